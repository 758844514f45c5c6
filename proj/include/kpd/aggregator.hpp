#pragma once

#include <cctype>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"
#include "kpd/purify.hpp"

namespace kpd {

struct AggregationExample {
  std::string question;
  std::vector<std::string> rationales;
  std::string consolidated;
};

struct ExampleBank {
  std::vector<AggregationExample> examples;
};

// JSONL: {"question", "rationales": [..], "consolidated"}.
inline ExampleBank load_example_bank(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  ExampleBank bank;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto j = detail::parse_jsonl_line(line, path, lineno);
    AggregationExample ex;
    ex.question = j.at("question").get<std::string>();
    ex.rationales = j.at("rationales").get<std::vector<std::string>>();
    ex.consolidated = j.at("consolidated").get<std::string>();
    bank.examples.push_back(std::move(ex));
  }
  return bank;
}

struct AggregationPrompt {
  std::string instruction;
  AggregationExample example;
  std::string query_question;
  std::vector<std::pair<std::string, std::string>> query_rationales;  // (teacher, text)

  std::string render() const {
    std::ostringstream out;
    out << instruction << "\n\n";
    out << "Example:\nQuestion: " << example.question << "\n";
    for (std::size_t i = 0; i < example.rationales.size(); ++i) {
      out << "Rationale " << (i + 1) << ": " << example.rationales[i] << "\n";
    }
    out << "Consolidated rationale: " << example.consolidated << "\n\n";
    out << "Question: " << query_question << "\n";
    for (const auto& [teacher, text] : query_rationales) {
      out << "Rationale from " << teacher << ": " << text << "\n";
    }
    out << "Consolidated rationale:";
    return out.str();
  }
};

inline const char* kDefaultAggregationInstruction =
    "You are given a multiple-choice question and several candidate rationales. "
    "Combine them into one short, coherent rationale that supports the correct answer. "
    "Resolve contradictions in favor of the majority and drop irrelevant content.";

// Deterministic per seed: one in-context example drawn uniformly from the
// bank, all rationales included verbatim.
inline AggregationPrompt build_prompt(const ExampleBank& bank, const Question& q,
                                      std::span<const TeacherRationale* const> rationales,
                                      std::uint64_t seed) {
  if (bank.examples.empty()) throw UsageError("build_prompt: empty example bank");
  Rng rng(derive_seed(seed, "example-bank:" + q.id));
  AggregationPrompt p;
  p.instruction = kDefaultAggregationInstruction;
  p.example = bank.examples[rng.next_index(bank.examples.size())];
  p.query_question = q.text;
  for (const TeacherRationale* r : rationales) {
    p.query_rationales.emplace_back(r->teacher_id, r->rationale_text);
  }
  return p;
}

namespace detail {

inline std::vector<std::string> surface_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

}  // namespace detail

// Test double for the remote aggregator: the lowest-index correct
// teacher's rationale; with no correct teacher, the concatenation of all
// rationales truncated to the longest single rationale's token length.
inline PurifiedRationale aggregate_mock(const Question& q,
                                        std::span<const TeacherRationale* const> rationales,
                                        const Vocab& vocab) {
  PurifiedRationale out;
  out.source = PurifiedRationale::Source::Aggregated;
  for (const TeacherRationale* r : rationales) {
    if (r->predicted_index == q.gold_index) {
      out.text = r->rationale_text;
      out.tokens = tokenize(out.text, vocab);
      return out;
    }
  }
  std::size_t max_len = 0;
  std::string concat;
  for (const TeacherRationale* r : rationales) {
    max_len = std::max(max_len, detail::surface_words(r->rationale_text).size());
    if (!concat.empty()) concat += " ";
    concat += r->rationale_text;
  }
  auto words = detail::surface_words(concat);
  if (words.size() > max_len) words.resize(max_len);
  std::string text;
  for (const auto& w : words) {
    if (!text.empty()) text += " ";
    text += w;
  }
  out.text = text;
  out.tokens = tokenize(text, vocab);
  return out;
}

struct AggregatorEndpoint {
  std::string base_url;           // e.g. http://localhost:8080
  std::string path = "/v1/complete";
  std::string auth_env_var;       // name of the env var holding the token
  int timeout_seconds = 60;
  int max_retries = 3;
  int max_concurrency = 4;
  int max_tokens = 512;
  // Backoff base in milliseconds; doubles per retry. Tests shrink it.
  int backoff_ms = 250;
};

// Implemented in the CLI / tests via cpp-httplib; kept behind a function
// pointer here so the library proper stays transport-free.
using HttpPostFn = std::function<std::pair<int, std::string>(const std::string& url,
                                                             const std::string& body,
                                                             const std::string& auth_token,
                                                             int timeout_seconds)>;

inline PurifiedRationale aggregate_remote(const AggregatorEndpoint& endpoint,
                                          const AggregationPrompt& prompt, const Vocab& vocab,
                                          const HttpPostFn& post) {
  std::string token;
  if (!endpoint.auth_env_var.empty()) {
    if (const char* t = std::getenv(endpoint.auth_env_var.c_str())) token = t;
  }
  nlohmann::json req{{"prompt", prompt.render()}, {"max_tokens", endpoint.max_tokens}};
  std::string body = req.dump();
  std::string url = endpoint.base_url + endpoint.path;

  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(endpoint.backoff_ms << (attempt - 1)));
    }
    int status = 0;
    std::string response;
    try {
      std::tie(status, response) = post(url, body, token, endpoint.timeout_seconds);
    } catch (const std::exception& e) {
      last_error = e.what();
      continue;
    }
    if (status != 200) {
      last_error = "HTTP " + std::to_string(status);
      continue;
    }
    auto j = nlohmann::json::parse(response, nullptr, false);
    if (j.is_discarded() || !j.contains("text")) {
      last_error = "malformed response body";
      continue;
    }
    std::string text = j["text"].get<std::string>();
    if (text.empty()) {
      last_error = "empty completion";
      continue;
    }
    PurifiedRationale out;
    out.source = PurifiedRationale::Source::Aggregated;
    out.text = text;
    out.tokens = tokenize(text, vocab);
    return out;
  }
  throw RemoteError("aggregation failed after " + std::to_string(endpoint.max_retries + 1) +
                    " attempts: " + last_error);
}

// Sidecar cache keyed by question id; reruns are idempotent.
struct AggregationCache {
  std::unordered_map<std::string, std::pair<std::string, std::uint64_t>> entries;  // id -> (r_p, prompt_hash)

  static AggregationCache load(const std::string& path) {
    AggregationCache cache;
    std::ifstream f(path);
    if (!f) return cache;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto j = detail::parse_jsonl_line(line, path, lineno);
      cache.entries[j.at("question_id").get<std::string>()] = {
          j.at("r_p").get<std::string>(), j.at("prompt_hash").get<std::uint64_t>()};
    }
    return cache;
  }

  void append(const std::string& path, const std::string& question_id, const std::string& r_p,
              std::uint64_t prompt_hash) {
    entries[question_id] = {r_p, prompt_hash};
    std::ofstream f(path, std::ios::app);
    if (!f) throw DataError("cannot write " + path);
    nlohmann::json j{{"question_id", question_id}, {"r_p", r_p}, {"prompt_hash", prompt_hash}};
    f << j.dump() << "\n";
  }
};

class MockAggregatorPurifier final : public Purifier {
 public:
  std::string name() const override { return "aggregate-mock"; }

  RoutingDistribution route(const Question&,
                            std::span<const TeacherRationale* const>) const override {
    throw UsageError("aggregation produces text, not a routing distribution");
  }

  PurifiedRationale purify(const Question& q, std::span<const TeacherRationale* const> rationales,
                           const Vocab& vocab) const override {
    return aggregate_mock(q, rationales, vocab);
  }
};

}  // namespace kpd
