#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"

namespace kpd {

enum class Split { Train, Test, Valid, Public };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Valid: return "valid";
    case Split::Public: return "public";
  }
  return "?";
}

inline std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  if (s == "valid") return Split::Valid;
  if (s == "public") return Split::Public;
  return std::nullopt;
}

enum class PromptTag { PredictOption, GenerateRationale };

// Hash-bucket vocabulary. Reserved tokens occupy the lowest ids; every
// surface token maps into [kReserved, size()).
struct Vocab {
  static constexpr int kReserved = 8;
  static constexpr int PAD = 0;
  static constexpr int BOS = 1;
  static constexpr int EOS = 2;
  static constexpr int SEP = 3;
  static constexpr int OPT = 4;
  static constexpr int TAG_PREDICT = 5;
  static constexpr int TAG_RATIONALE = 6;
  static constexpr int UNKFREE = 7;

  int buckets = 4096;
  std::uint64_t seed = 0;

  int size() const { return kReserved + buckets; }

  int tag_token(PromptTag t) const {
    return t == PromptTag::PredictOption ? TAG_PREDICT : TAG_RATIONALE;
  }

  int bucket_of(std::string_view surface) const {
    return kReserved + static_cast<int>(fnv1a(surface, 0xcbf29ce484222325ULL ^ seed) %
                                        static_cast<std::uint64_t>(buckets));
  }
};

// Lowercase, split on whitespace and punctuation, hash each surface token
// into a bucket. Pure function of (text, vocab).
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(vocab.bucket_of(cur));
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

struct Question {
  std::string id;
  std::string dataset_id;
  std::string text;
  std::vector<std::string> options;
  int gold_index = 0;
  // Unset means the question sits in the train/public pool awaiting
  // make_splits.
  std::optional<Split> split;
};

struct TeacherRationale {
  std::string question_id;
  std::string teacher_id;
  std::string rationale_text;
  int predicted_index = 0;
  int token_count = 0;  // filled by tokenize_corpus
};

struct TeacherEnsemble {
  std::vector<std::string> teacher_ids;

  std::size_t size() const { return teacher_ids.size(); }

  int index_of(const std::string& id) const {
    for (std::size_t i = 0; i < teacher_ids.size(); ++i) {
      if (teacher_ids[i] == id) return static_cast<int>(i);
    }
    return -1;
  }

  TeacherEnsemble prefix(std::size_t n) const {
    TeacherEnsemble e;
    e.teacher_ids.assign(teacher_ids.begin(),
                         teacher_ids.begin() + static_cast<std::ptrdiff_t>(std::min(n, teacher_ids.size())));
    return e;
  }
};

struct RouterLabel {
  std::string question_id;
  std::optional<int> optimal_teacher;
};

class Corpus {
 public:
  std::vector<Question> questions;
  std::vector<TeacherRationale> rationales;
  // Questions lacking a rationale from every ensemble teacher make the run
  // incomplete (a warning, not an error: OOD corpora are routed before
  // sampling).
  bool incomplete = false;

  void rebuild_index() {
    question_index_.clear();
    rationale_index_.clear();
    for (std::size_t i = 0; i < questions.size(); ++i) {
      question_index_[questions[i].id] = i;
    }
    for (std::size_t i = 0; i < rationales.size(); ++i) {
      rationale_index_[rationales[i].question_id + "\x1f" + rationales[i].teacher_id] = i;
    }
  }

  const Question* find_question(const std::string& id) const {
    auto it = question_index_.find(id);
    return it == question_index_.end() ? nullptr : &questions[it->second];
  }

  const TeacherRationale* find_rationale(const std::string& question_id,
                                         const std::string& teacher_id) const {
    auto it = rationale_index_.find(question_id + "\x1f" + teacher_id);
    return it == rationale_index_.end() ? nullptr : &rationales[it->second];
  }

  std::vector<const Question*> questions_in(Split s) const {
    std::vector<const Question*> out;
    for (const auto& q : questions) {
      if (q.split && *q.split == s) out.push_back(&q);
    }
    return out;
  }

  std::vector<std::string> dataset_ids() const {
    std::vector<std::string> ids;
    for (const auto& q : questions) {
      if (std::find(ids.begin(), ids.end(), q.dataset_id) == ids.end()) {
        ids.push_back(q.dataset_id);
      }
    }
    return ids;
  }

 private:
  std::unordered_map<std::string, std::size_t> question_index_;
  std::unordered_map<std::string, std::size_t> rationale_index_;
};

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, const std::string& file,
                                       std::size_t lineno) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw DataError(file + ":" + std::to_string(lineno) + ": malformed JSON line");
  }
  return j;
}

}  // namespace detail

inline Corpus ingest(const std::string& questions_path, const std::string& rationales_path) {
  Corpus corpus;

  std::ifstream qf(questions_path);
  if (!qf) throw DataError("cannot open " + questions_path);
  std::string line;
  std::size_t lineno = 0;
  std::unordered_set<std::string> seen_ids;
  while (std::getline(qf, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto j = detail::parse_jsonl_line(line, questions_path, lineno);
    Question q;
    try {
      q.id = j.at("id").get<std::string>();
      q.dataset_id = j.at("dataset").get<std::string>();
      q.text = j.at("question").get<std::string>();
      q.options = j.at("options").get<std::vector<std::string>>();
      q.gold_index = j.at("gold").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(questions_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (j.contains("split")) {
      auto s = parse_split(j["split"].get<std::string>());
      if (!s) {
        throw DataError(questions_path + ":" + std::to_string(lineno) + ": unknown split \"" +
                        j["split"].get<std::string>() + "\"");
      }
      q.split = s;
    }
    if (q.options.size() < 2) {
      throw DataError(questions_path + ":" + std::to_string(lineno) + ": question \"" + q.id +
                      "\" needs at least 2 options");
    }
    for (const auto& o : q.options) {
      if (o.empty()) {
        throw DataError(questions_path + ":" + std::to_string(lineno) + ": question \"" + q.id +
                        "\" has an empty option");
      }
    }
    if (q.gold_index < 0 || q.gold_index >= static_cast<int>(q.options.size())) {
      throw DataError(questions_path + ":" + std::to_string(lineno) + ": question \"" + q.id +
                      "\" gold index out of range");
    }
    if (seen_ids.count(q.id)) {
      throw DataError(questions_path + ":" + std::to_string(lineno) + ": duplicate question id \"" +
                      q.id + "\"");
    }
    seen_ids.insert(q.id);
    corpus.questions.push_back(std::move(q));
  }
  corpus.rebuild_index();

  std::ifstream rf(rationales_path);
  if (!rf) throw DataError("cannot open " + rationales_path);
  lineno = 0;
  std::unordered_set<std::string> seen_pairs;
  while (std::getline(rf, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto j = detail::parse_jsonl_line(line, rationales_path, lineno);
    TeacherRationale r;
    try {
      r.question_id = j.at("question_id").get<std::string>();
      r.teacher_id = j.at("teacher").get<std::string>();
      r.rationale_text = j.at("rationale").get<std::string>();
      r.predicted_index = j.at("predicted").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(rationales_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const Question* q = corpus.find_question(r.question_id);
    if (!q) {
      throw DataError(rationales_path + ":" + std::to_string(lineno) +
                      ": rationale references unknown question \"" + r.question_id + "\"");
    }
    if (r.predicted_index < 0 || r.predicted_index >= static_cast<int>(q->options.size())) {
      throw DataError(rationales_path + ":" + std::to_string(lineno) + ": predicted index out of range for \"" +
                      r.question_id + "\"");
    }
    std::string key = r.question_id + "\x1f" + r.teacher_id;
    if (seen_pairs.count(key)) {
      throw DataError(rationales_path + ":" + std::to_string(lineno) + ": duplicate rationale for (\"" +
                      r.question_id + "\", \"" + r.teacher_id + "\")");
    }
    seen_pairs.insert(std::move(key));
    corpus.rationales.push_back(std::move(r));
  }
  corpus.rebuild_index();

  return corpus;
}

// Flags the corpus incomplete when a question lacks a rationale from some
// ensemble teacher.
inline void check_coverage(Corpus& corpus, const TeacherEnsemble& ensemble) {
  for (const auto& q : corpus.questions) {
    for (const auto& t : ensemble.teacher_ids) {
      if (!corpus.find_rationale(q.id, t)) {
        corpus.incomplete = true;
        return;
      }
    }
  }
  corpus.incomplete = false;
}

inline void tokenize_corpus(Corpus& corpus, const Vocab& vocab) {
  for (auto& r : corpus.rationales) {
    r.token_count = static_cast<int>(tokenize(r.rationale_text, vocab).size());
  }
}

// Partitions the unsplit pool into train/public per dataset. Explicit
// splits are preserved. train_fraction defaults to 4:1 = 0.8.
inline Corpus make_splits(Corpus corpus, double train_fraction, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> pool_by_dataset;
  for (std::size_t i = 0; i < corpus.questions.size(); ++i) {
    if (!corpus.questions[i].split) {
      pool_by_dataset[corpus.questions[i].dataset_id].push_back(i);
    }
  }
  std::size_t pool_total = 0;
  for (const auto& [ds, idx] : pool_by_dataset) pool_total += idx.size();
  if (pool_total == 0) {
    bool any_train = false;
    for (const auto& q : corpus.questions) {
      if (q.split && *q.split == Split::Train) any_train = true;
    }
    if (!any_train) throw DataError("empty training pool");
    return corpus;
  }

  for (auto& [ds, idx] : pool_by_dataset) {
    Rng rng(derive_seed(seed, "split:" + ds));
    rng.shuffle(idx);
    std::size_t n_train =
        static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * train_fraction));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      corpus.questions[idx[i]].split = i < n_train ? Split::Train : Split::Public;
    }
  }
  return corpus;
}

// Writes questions back out in the ingest format, including any split
// assignments.
inline void save_questions(const std::string& path, const Corpus& corpus) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  for (const auto& q : corpus.questions) {
    nlohmann::json j{{"id", q.id}, {"dataset", q.dataset_id}, {"question", q.text},
                     {"options", q.options}, {"gold", q.gold_index}};
    if (q.split) j["split"] = split_name(*q.split);
    f << j.dump() << "\n";
  }
}

// Per-question optimal teacher: correct with minimal token count; ties go
// to the lowest teacher index. No correct teacher -> no label (the
// question is skipped by supervised router trainers but kept for
// distillation).
inline std::vector<RouterLabel> label_optimal_teacher(const Corpus& corpus,
                                                      const TeacherEnsemble& ensemble) {
  std::vector<RouterLabel> labels;
  labels.reserve(corpus.questions.size());
  for (const auto& q : corpus.questions) {
    RouterLabel label{q.id, std::nullopt};
    int best_tokens = -1;
    for (std::size_t t = 0; t < ensemble.size(); ++t) {
      const TeacherRationale* r = corpus.find_rationale(q.id, ensemble.teacher_ids[t]);
      if (!r || r->predicted_index != q.gold_index) continue;
      if (!label.optimal_teacher || r->token_count < best_tokens) {
        label.optimal_teacher = static_cast<int>(t);
        best_tokens = r->token_count;
      }
    }
    labels.push_back(std::move(label));
  }
  return labels;
}

}  // namespace kpd
