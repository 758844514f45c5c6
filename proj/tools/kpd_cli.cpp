// Command-line front end: wires corpus ingestion, embeddings, the four
// routers, aggregation, distillation, and the evaluation harness together.
// Exit codes: 0 ok, 1 usage, 2 data, 3 remote.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "kpd/aggregator.hpp"
#include "kpd/cls_router.hpp"
#include "kpd/common.hpp"
#include "kpd/corpus.hpp"
#include "kpd/encoder.hpp"
#include "kpd/eval.hpp"
#include "kpd/pl_rank.hpp"
#include "kpd/purify.hpp"
#include "kpd/rl_selector.hpp"
#include "kpd/sim_router.hpp"
#include "kpd/student.hpp"

namespace {

struct Opts {
  std::string questions;
  std::string rationales;
  std::vector<std::string> teachers;
  std::string embeddings;  // precomputed embedding file; empty -> hashed encoder
  std::string out;
  std::string log_path;
  std::string method;
  std::string strategy = "all";
  std::string model;
  std::string student;
  std::string student_out;
  std::string bank;
  std::string cache;
  std::string endpoint;
  std::string auth_env;
  std::string dataset_filter;
  std::string split = "test";
  std::string format = "json";
  std::string run_id = "run";
  std::string plot;
  std::string report_in;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double gamma = 10.0;
  double lambda = 4.0;
  double learning_rate = 1e-2;
  int batch_size = 8;
  int epochs = 10;
  int hidden = 64;
  int dim = 768;
  int key_dim = 768;
  double router_lr = 0.0;  // 0 -> per-method default
  int router_batch = 16;
  int router_epochs = 200;
  int router_hidden = 128;
  double selector_lr = 5e-5;
  int selector_epochs = 2;
  int selector_batch = 8;
  int max_tokens = 512;
  int timeout_seconds = 60;
  int max_retries = 3;
  int max_concurrency = 4;
  bool mock = false;
  bool force = false;
  bool log_gradient = false;
};

const std::vector<std::string> kConfigKeys = {
    "questions", "rationales", "teachers", "embeddings", "seed", "train_fraction",
    "gamma", "lambda", "learning_rate", "batch_size", "epochs", "hidden", "dim",
    "key_dim", "router_lr", "router_batch", "router_epochs", "router_hidden",
    "selector_lr", "selector_epochs", "selector_batch", "method", "dataset_filter",
    "endpoint", "auth_env", "max_tokens", "timeout_seconds", "max_retries",
    "max_concurrency", "split", "format", "run_id"};

void apply_config(const std::string& path, Opts& o) {
  std::ifstream f(path);
  if (!f) throw kpd::DataError("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw kpd::DataError(path + ": " + e.what());
  }
  if (!j.is_object()) throw kpd::DataError(path + ": config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end()) {
      throw kpd::UsageError(path + ": unknown config key \"" + key + "\"");
    }
  }
  auto s = [&](const char* k, std::string& dst) { if (j.contains(k)) dst = j[k].get<std::string>(); };
  auto d = [&](const char* k, double& dst) { if (j.contains(k)) dst = j[k].get<double>(); };
  auto i = [&](const char* k, int& dst) { if (j.contains(k)) dst = j[k].get<int>(); };
  s("questions", o.questions);
  s("rationales", o.rationales);
  if (j.contains("teachers")) o.teachers = j["teachers"].get<std::vector<std::string>>();
  s("embeddings", o.embeddings);
  if (j.contains("seed")) o.seed = j["seed"].get<std::uint64_t>();
  d("train_fraction", o.train_fraction);
  d("gamma", o.gamma);
  d("lambda", o.lambda);
  d("learning_rate", o.learning_rate);
  i("batch_size", o.batch_size);
  i("epochs", o.epochs);
  i("hidden", o.hidden);
  i("dim", o.dim);
  i("key_dim", o.key_dim);
  d("router_lr", o.router_lr);
  i("router_batch", o.router_batch);
  i("router_epochs", o.router_epochs);
  i("router_hidden", o.router_hidden);
  d("selector_lr", o.selector_lr);
  i("selector_epochs", o.selector_epochs);
  i("selector_batch", o.selector_batch);
  s("method", o.method);
  s("dataset_filter", o.dataset_filter);
  s("endpoint", o.endpoint);
  s("auth_env", o.auth_env);
  i("max_tokens", o.max_tokens);
  i("timeout_seconds", o.timeout_seconds);
  i("max_retries", o.max_retries);
  i("max_concurrency", o.max_concurrency);
  s("split", o.split);
  s("format", o.format);
  s("run_id", o.run_id);
}

nlohmann::json resolved_config(const Opts& o, const std::string& command) {
  return nlohmann::json{
      {"command", command}, {"questions", o.questions}, {"rationales", o.rationales},
      {"teachers", o.teachers}, {"embeddings", o.embeddings}, {"seed", o.seed},
      {"train_fraction", o.train_fraction}, {"gamma", o.gamma}, {"lambda", o.lambda},
      {"learning_rate", o.learning_rate}, {"batch_size", o.batch_size}, {"epochs", o.epochs},
      {"hidden", o.hidden}, {"dim", o.dim}, {"key_dim", o.key_dim}, {"router_lr", o.router_lr},
      {"router_batch", o.router_batch}, {"router_epochs", o.router_epochs},
      {"router_hidden", o.router_hidden}, {"selector_lr", o.selector_lr},
      {"selector_epochs", o.selector_epochs}, {"selector_batch", o.selector_batch},
      {"method", o.method}, {"dataset_filter", o.dataset_filter}, {"split", o.split},
      {"run_id", o.run_id}};
  // No credentials here on purpose: the auth token lives only in the env var.
}

std::string config_hash(const nlohmann::json& resolved) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(kpd::fnv1a(resolved.dump())));
  return buf;
}

// Every artifact gets a sidecar with the resolved run configuration.
void persist_run(const std::string& artifact_path, const nlohmann::json& resolved) {
  nlohmann::json j = resolved;
  j["config_hash"] = config_hash(resolved);
  std::ofstream f(artifact_path + ".run.json");
  if (!f) throw kpd::DataError("cannot write " + artifact_path + ".run.json");
  f << j.dump(2) << "\n";
}

kpd::Corpus load_corpus(const Opts& o, bool ensure_splits) {
  if (o.questions.empty() || o.rationales.empty()) {
    throw kpd::UsageError("--questions and --rationales are required");
  }
  kpd::Corpus corpus = kpd::ingest(o.questions, o.rationales);
  if (ensure_splits) {
    bool any_split = false;
    for (const auto& q : corpus.questions) {
      if (q.split) { any_split = true; break; }
    }
    if (!any_split) corpus = kpd::make_splits(std::move(corpus), o.train_fraction, o.seed);
  }
  return corpus;
}

kpd::TeacherEnsemble ensemble_of(const Opts& o) {
  if (o.teachers.empty()) throw kpd::UsageError("--teachers is required");
  return kpd::TeacherEnsemble{o.teachers};
}

std::unique_ptr<kpd::EmbeddingProvider> make_provider(const Opts& o) {
  if (!o.embeddings.empty()) {
    return std::make_unique<kpd::StoreProvider>(kpd::load_embeddings(o.embeddings, o.dim), o.dim);
  }
  // Hashed encoder seed is fixed: it stands in for a frozen pretrained
  // encoder and must agree across commands.
  return std::make_unique<kpd::HashedProvider>(kpd::HashedEncoderConfig{o.dim, true, true, 0});
}

std::unique_ptr<kpd::Purifier> train_router(const std::string& method, const kpd::Corpus& corpus,
                                            const kpd::TeacherEnsemble& ensemble,
                                            const kpd::EmbeddingProvider& provider, const Opts& o) {
  auto labels = kpd::label_optimal_teacher(corpus, ensemble);
  if (method == "pl") {
    return std::make_unique<kpd::PLPurifier>(
        kpd::build_pl_database(corpus, ensemble, labels, provider, kpd::Split::Public, o.gamma),
        &provider, o.dataset_filter);
  }
  if (method == "cls") {
    auto data = kpd::labeled_embeddings(corpus, labels, provider);
    kpd::ClsTrainConfig cc;
    cc.learning_rate = o.router_lr > 0 ? o.router_lr : 5e-5;
    cc.batch_size = o.router_batch;
    cc.epochs = o.router_epochs;
    cc.seed = o.seed;
    cc.hidden = o.router_hidden;
    return std::make_unique<kpd::ClsPurifier>(
        kpd::train_cls(data, static_cast<int>(ensemble.size()), cc), &provider);
  }
  if (method == "sim") {
    auto items = kpd::sim_training_items(corpus, ensemble, provider, o.seed);
    kpd::SimTrainConfig sc;
    sc.learning_rate = o.router_lr > 0 ? o.router_lr : 2e-5;
    sc.batch_size = o.router_batch;
    sc.epochs = o.router_epochs;
    sc.seed = o.seed;
    sc.key_dim = o.key_dim;
    return std::make_unique<kpd::SimPurifier>(
        kpd::train_sim(items, static_cast<int>(ensemble.size()), sc), &provider);
  }
  throw kpd::UsageError("unknown router method \"" + method + "\" (expected pl, cls, or sim)");
}

kpd::DistillConfig distill_config(const Opts& o) {
  kpd::DistillConfig c;
  c.lambda = o.lambda;
  c.learning_rate = o.learning_rate;
  c.batch_size = o.batch_size;
  c.epochs = o.epochs;
  c.seed = o.seed;
  c.hidden = o.hidden;
  return c;
}

std::pair<int, std::string> http_post(const std::string& url, const std::string& body,
                                      const std::string& token, int timeout_seconds) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw kpd::RemoteError("malformed endpoint url");
  auto path_start = url.find('/', scheme_end + 3);
  std::string base = path_start == std::string::npos ? url : url.substr(0, path_start);
  std::string path = path_start == std::string::npos ? "/" : url.substr(path_start);
  httplib::Client cli(base);
  cli.set_connection_timeout(timeout_seconds);
  cli.set_read_timeout(timeout_seconds);
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
  auto res = cli.Post(path, headers, body, "application/json");
  if (!res) throw kpd::RemoteError("connection to " + base + " failed");
  return {res->status, res->body};
}

int cmd_ingest(const Opts& o) {
  kpd::Corpus corpus = kpd::ingest(o.questions, o.rationales);
  if (!o.teachers.empty()) kpd::check_coverage(corpus, ensemble_of(o));
  std::cerr << "ingested " << corpus.questions.size() << " questions, "
            << corpus.rationales.size() << " rationales"
            << (corpus.incomplete ? " (incomplete teacher coverage)" : "") << "\n";
  if (!o.out.empty()) {
    nlohmann::json j{{"questions", corpus.questions.size()},
                     {"rationales", corpus.rationales.size()},
                     {"datasets", corpus.dataset_ids()},
                     {"incomplete", corpus.incomplete}};
    std::ofstream f(o.out);
    if (!f) throw kpd::DataError("cannot write " + o.out);
    f << j.dump(2) << "\n";
    persist_run(o.out, resolved_config(o, "ingest"));
  }
  return 0;
}

int cmd_split(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  kpd::Corpus corpus = kpd::ingest(o.questions, o.rationales);
  corpus = kpd::make_splits(std::move(corpus), o.train_fraction, o.seed);
  kpd::save_questions(o.out, corpus);
  persist_run(o.out, resolved_config(o, "split"));
  std::size_t train = corpus.questions_in(kpd::Split::Train).size();
  std::size_t pub = corpus.questions_in(kpd::Split::Public).size();
  std::cerr << "split: " << train << " train / " << pub << " public\n";
  return 0;
}

int cmd_embed(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  kpd::Corpus corpus = kpd::ingest(o.questions, o.rationales);
  kpd::HashedEncoderConfig cfg{o.dim, true, true, 0};
  std::vector<std::tuple<std::string, std::string, kpd::Embedding>> records;
  for (const auto& q : corpus.questions) {
    records.emplace_back(q.id, "question", kpd::hashed_embed(q.text, cfg));
  }
  for (const auto& r : corpus.rationales) {
    records.emplace_back(r.question_id, "rationale:" + r.teacher_id,
                         kpd::hashed_embed(r.rationale_text, cfg));
  }
  kpd::save_embeddings_f32(o.out, records, o.dim);
  persist_run(o.out, resolved_config(o, "embed"));
  std::cerr << "wrote " << records.size() << " embeddings\n";
  return 0;
}

int cmd_router_train(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  kpd::Corpus corpus = load_corpus(o, true);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);
  auto provider = make_provider(o);
  auto purifier = train_router(o.method, corpus, ensemble, *provider, o);
  if (o.method == "pl") {
    kpd::save_pl_database(o.out, static_cast<kpd::PLPurifier*>(purifier.get())->database());
  } else if (o.method == "cls") {
    kpd::save_mlp_router(o.out, static_cast<kpd::ClsPurifier*>(purifier.get())->router(), o.seed,
                         o.router_epochs);
  } else {
    kpd::save_sim_router(o.out, static_cast<kpd::SimPurifier*>(purifier.get())->router(), o.seed);
  }
  persist_run(o.out, resolved_config(o, "router train"));
  std::cerr << "trained " << o.method << " router -> " << o.out << "\n";
  return 0;
}

int cmd_route(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  if (o.model.empty()) throw kpd::UsageError("--model is required");
  if (o.method == "rl" && o.student.empty() && !o.force) {
    throw kpd::UsageError(
        "the teacher selector is trained jointly with a specific student and embeds rationale "
        "correctness in its state, so it does not transfer to question-only routing; pass the "
        "paired student via --student, or --force to route anyway");
  }
  kpd::Corpus corpus = load_corpus(o, false);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);
  auto provider = make_provider(o);

  std::unique_ptr<kpd::Purifier> purifier;
  if (o.method == "pl") {
    purifier = std::make_unique<kpd::PLPurifier>(kpd::load_pl_database(o.model), provider.get(),
                                                 o.dataset_filter);
  } else if (o.method == "cls") {
    purifier = std::make_unique<kpd::ClsPurifier>(kpd::load_mlp_router(o.model), provider.get());
  } else if (o.method == "sim") {
    purifier = std::make_unique<kpd::SimPurifier>(kpd::load_sim_router(o.model), provider.get());
  } else if (o.method == "rl") {
    std::string paired;
    auto selector = kpd::load_selector(o.model, &paired);
    if (!o.student.empty() && !paired.empty() &&
        std::filesystem::path(o.student).filename() != std::filesystem::path(paired).filename()) {
      throw kpd::UsageError("selector was trained with student \"" + paired +
                            "\", not \"" + o.student + "\"");
    }
    purifier = std::make_unique<kpd::SelectorPurifier>(std::move(selector), provider.get());
  } else {
    throw kpd::UsageError("unknown routing method \"" + o.method + "\"");
  }

  std::vector<kpd::RoutingDecision> decisions;
  for (const auto& q : corpus.questions) {
    std::vector<const kpd::TeacherRationale*> rationales;
    if (o.method == "rl") {
      rationales = kpd::gather_rationales(corpus, q, ensemble);
    }
    auto dist = purifier->route(q, std::span<const kpd::TeacherRationale* const>(
                                       rationales.data(), rationales.size()));
    decisions.push_back({q.id, purifier->name(), dist.probs, dist.argmax()});
  }
  kpd::write_routing_log(o.out, decisions);
  persist_run(o.out, resolved_config(o, "route"));
  std::cerr << "routed " << decisions.size() << " questions\n";
  return 0;
}

int cmd_aggregate(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  if (!o.mock && o.endpoint.empty()) {
    throw kpd::UsageError("aggregate needs --mock or --endpoint");
  }
  kpd::Corpus corpus = load_corpus(o, false);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);

  kpd::ExampleBank bank;
  if (!o.mock || !o.bank.empty()) {
    if (o.bank.empty()) throw kpd::UsageError("--bank is required for remote aggregation");
    bank = kpd::load_example_bank(o.bank);
  }

  kpd::AggregationCache cache;
  if (!o.cache.empty()) cache = kpd::AggregationCache::load(o.cache);
  std::mutex cache_mu;

  struct Job {
    const kpd::Question* q;
    std::string r_p;
  };
  std::vector<Job> jobs;
  for (const auto& q : corpus.questions) jobs.push_back({&q, ""});

  if (o.mock) {
    for (auto& job : jobs) {
      auto rationales = kpd::gather_rationales(corpus, *job.q, ensemble);
      job.r_p = kpd::aggregate_mock(*job.q,
                                    std::span<const kpd::TeacherRationale* const>(
                                        rationales.data(), rationales.size()),
                                    vocab)
                    .text;
    }
  } else {
    kpd::AggregatorEndpoint ep;
    ep.base_url = o.endpoint;
    ep.auth_env_var = o.auth_env;
    ep.timeout_seconds = o.timeout_seconds;
    ep.max_retries = o.max_retries;
    ep.max_tokens = o.max_tokens;

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::string first_error;
    std::mutex err_mu;
    auto worker = [&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= jobs.size() || failed.load()) return;
        auto& job = jobs[i];
        auto rationales = kpd::gather_rationales(corpus, *job.q, ensemble);
        auto prompt = kpd::build_prompt(bank, *job.q,
                                        std::span<const kpd::TeacherRationale* const>(
                                            rationales.data(), rationales.size()),
                                        o.seed);
        std::uint64_t phash = kpd::fnv1a(prompt.render());
        {
          std::lock_guard<std::mutex> lk(cache_mu);
          auto it = cache.entries.find(job.q->id);
          if (it != cache.entries.end() && it->second.second == phash) {
            job.r_p = it->second.first;
            continue;
          }
        }
        try {
          job.r_p = kpd::aggregate_remote(ep, prompt, vocab, http_post).text;
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!failed.exchange(true)) first_error = e.what();
          return;
        }
        if (!o.cache.empty()) {
          std::lock_guard<std::mutex> lk(cache_mu);
          cache.append(o.cache, job.q->id, job.r_p, phash);
        }
      }
    };
    std::vector<std::thread> pool;
    int n_threads = std::max(1, std::min(o.max_concurrency, 4));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failed.load()) throw kpd::RemoteError(first_error);
  }

  std::ofstream f(o.out);
  if (!f) throw kpd::DataError("cannot write " + o.out);
  for (const auto& job : jobs) {
    nlohmann::json j{{"question_id", job.q->id}, {"r_p", job.r_p}};
    f << j.dump() << "\n";
  }
  persist_run(o.out, resolved_config(o, "aggregate"));
  std::cerr << "aggregated " << jobs.size() << " questions\n";
  return 0;
}

int cmd_distill(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  kpd::Corpus corpus = load_corpus(o, true);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);

  kpd::DistillStrategy strategy = kpd::DistillStrategy::all_teachers();
  std::unordered_map<std::string, std::vector<int>> purified;
  if (o.strategy == "all") {
    // default
  } else if (o.strategy.rfind("single:", 0) == 0) {
    int t = std::stoi(o.strategy.substr(7));
    if (t < 0 || t >= static_cast<int>(ensemble.size())) {
      throw kpd::UsageError("single-teacher index out of range");
    }
    strategy = kpd::DistillStrategy::single_teacher(t);
  } else if (o.strategy.rfind("purified:", 0) == 0) {
    std::string path = o.strategy.substr(9);
    std::ifstream pf(path);
    if (!pf) throw kpd::DataError("cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(pf, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto j = kpd::detail::parse_jsonl_line(line, path, lineno);
      purified[j.at("question_id").get<std::string>()] =
          kpd::tokenize(j.at("r_p").get<std::string>(), vocab);
    }
    strategy = kpd::DistillStrategy::purified_map(&purified);
  } else {
    throw kpd::UsageError("unknown strategy \"" + o.strategy +
                          "\" (expected all, single:<i>, or purified:<file>)");
  }

  std::vector<kpd::EpochLog> log;
  kpd::StudentModel student = kpd::train_distill(corpus, ensemble, vocab, strategy,
                                                 distill_config(o), &log);
  kpd::save_student(o.out, student, vocab, o.seed);
  if (!o.log_path.empty()) kpd::write_training_log(o.log_path, log);
  persist_run(o.out, resolved_config(o, "distill"));
  std::cerr << "distilled student -> " << o.out << "\n";
  return 0;
}

int cmd_select_teacher(const Opts& o) {
  if (o.out.empty() || o.student_out.empty()) {
    throw kpd::UsageError("--out (selector) and --student-out are required");
  }
  kpd::Corpus corpus = load_corpus(o, true);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);
  auto provider = make_provider(o);

  kpd::SelectorConfig sc;
  sc.learning_rate = o.selector_lr;
  sc.epochs = o.selector_epochs;
  sc.batch_size = o.selector_batch;
  sc.seed = o.seed;
  sc.log_gradient = o.log_gradient;

  std::vector<kpd::EpochLog> log;
  auto [student, selector] =
      kpd::train_alternating(corpus, ensemble, vocab, *provider, distill_config(o), sc, &log);
  kpd::save_student(o.student_out, student, vocab, o.seed);
  kpd::save_selector(o.out, selector, std::filesystem::path(o.student_out).filename().string());
  if (!o.log_path.empty()) kpd::write_training_log(o.log_path, log);
  persist_run(o.out, resolved_config(o, "select-teacher"));
  std::cerr << "trained selector -> " << o.out << " (student -> " << o.student_out << ")\n";
  return 0;
}

int cmd_eval(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  if (o.student.empty()) throw kpd::UsageError("--student is required");
  kpd::Vocab vocab;
  kpd::StudentModel student = kpd::load_student(o.student, &vocab);
  kpd::Corpus corpus = load_corpus(o, true);
  auto split = kpd::parse_split(o.split);
  if (!split) throw kpd::UsageError("unknown split \"" + o.split + "\"");

  auto resolved = resolved_config(o, "eval");
  kpd::EvalReport report;
  report.run_id = o.run_id;
  report.config_hash = config_hash(resolved);
  std::string method = o.method.empty() ? "student" : o.method;
  for (const auto& [ds, acc] : kpd::per_dataset_accuracy(student, corpus, vocab, *split)) {
    report.rows.push_back({o.run_id, method, student.hidden,
                           static_cast<int>(o.teachers.size()), ds, acc, 0.0, 0, 0, o.seed});
  }
  kpd::emit_report(report, o.format == "csv" ? kpd::ReportFormat::Csv : kpd::ReportFormat::Json,
                   o.out);
  persist_run(o.out, resolved);
  std::cerr << "evaluated " << o.student << " on " << o.split << " -> " << o.out << "\n";
  return 0;
}

int cmd_sweep(const Opts& o) {
  if (o.out.empty()) throw kpd::UsageError("--out is required");
  if (o.method.empty()) throw kpd::UsageError("--method is required");
  kpd::Corpus corpus = load_corpus(o, true);
  kpd::Vocab vocab;
  kpd::tokenize_corpus(corpus, vocab);
  auto ensemble = ensemble_of(o);
  auto provider = make_provider(o);

  kpd::PurifierFactory factory = [&](const kpd::TeacherEnsemble& prefix) {
    return train_router(o.method, corpus, prefix, *provider, o);
  };
  auto result = kpd::teacher_sweep(corpus, ensemble, factory, o.method, distill_config(o), vocab,
                                   o.run_id);
  auto resolved = resolved_config(o, "sweep");
  result.report.config_hash = config_hash(resolved);
  kpd::emit_report(result.report,
                   o.format == "csv" ? kpd::ReportFormat::Csv : kpd::ReportFormat::Json, o.out);
  if (!o.plot.empty()) kpd::emit_plot_data(result.report, o.plot);
  persist_run(o.out, resolved);
  std::cerr << "sweep cmv(" << o.method << ") = " << result.cmv << "\n";
  return 0;
}

int cmd_report(const Opts& o) {
  if (o.report_in.empty() || o.out.empty()) throw kpd::UsageError("--in and --out are required");
  kpd::EvalReport report = kpd::load_report_json(o.report_in);
  kpd::emit_report(report, o.format == "csv" ? kpd::ReportFormat::Csv : kpd::ReportFormat::Json,
                   o.out);
  if (!o.plot.empty()) kpd::emit_plot_data(report, o.plot);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Opts o;

  // Config file first, flags override.
  try {
    for (int i = 1; i + 1 < argc; ++i) {
      if (std::string(argv[i]) == "--config") apply_config(argv[i + 1], o);
    }
  } catch (const kpd::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const kpd::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  CLI::App app{"knowledge-purification distillation toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values");

  auto add_common = [&](CLI::App* cmd) {
    // Also accepted after the subcommand; the value was already applied in
    // the pre-parse scan above.
    cmd->add_option("--config", config_path);
    cmd->add_option("--questions", o.questions);
    cmd->add_option("--rationales", o.rationales);
    cmd->add_option("--teachers", o.teachers)->delimiter(',');
    cmd->add_option("--seed", o.seed);
    cmd->add_option("--embeddings", o.embeddings);
    cmd->add_option("--dim", o.dim);
  };

  auto* ingest_cmd = app.add_subcommand("ingest", "validate a corpus");
  add_common(ingest_cmd);
  ingest_cmd->add_option("--out", o.out);

  auto* split_cmd = app.add_subcommand("split", "assign train/public splits per dataset");
  add_common(split_cmd);
  split_cmd->add_option("--out", o.out);
  split_cmd->add_option("--train-fraction", o.train_fraction);

  auto* embed_cmd = app.add_subcommand("embed", "write hashed embeddings for a corpus");
  add_common(embed_cmd);
  embed_cmd->add_option("--out", o.out);

  auto* router_cmd = app.add_subcommand("router", "router operations");
  auto* rt = router_cmd->add_subcommand("train", "train a routing model");
  add_common(rt);
  rt->add_option("--method", o.method)->required();
  rt->add_option("--out", o.out);
  rt->add_option("--gamma", o.gamma);
  rt->add_option("--router-lr", o.router_lr);
  rt->add_option("--router-batch", o.router_batch);
  rt->add_option("--router-epochs", o.router_epochs);
  rt->add_option("--router-hidden", o.router_hidden);
  rt->add_option("--key-dim", o.key_dim);
  rt->add_option("--dataset-filter", o.dataset_filter);
  router_cmd->require_subcommand(1);

  auto* route_cmd = app.add_subcommand("route", "route questions with a trained model");
  add_common(route_cmd);
  route_cmd->add_option("--method", o.method)->required();
  route_cmd->add_option("--model", o.model);
  route_cmd->add_option("--out", o.out);
  route_cmd->add_option("--student", o.student);
  route_cmd->add_option("--dataset-filter", o.dataset_filter);
  route_cmd->add_flag("--force", o.force);

  auto* agg_cmd = app.add_subcommand("aggregate", "consolidate rationales");
  add_common(agg_cmd);
  agg_cmd->add_option("--out", o.out);
  agg_cmd->add_option("--bank", o.bank);
  agg_cmd->add_option("--cache", o.cache);
  agg_cmd->add_option("--endpoint", o.endpoint);
  agg_cmd->add_option("--auth-env", o.auth_env,
                      "env var holding the bearer token (never written anywhere)");
  agg_cmd->add_option("--max-tokens", o.max_tokens);
  agg_cmd->add_option("--timeout", o.timeout_seconds);
  agg_cmd->add_option("--max-retries", o.max_retries);
  agg_cmd->add_option("--max-concurrency", o.max_concurrency);
  agg_cmd->add_flag("--mock", o.mock);

  auto* distill_cmd = app.add_subcommand("distill", "train a student");
  add_common(distill_cmd);
  distill_cmd->add_option("--out", o.out);
  distill_cmd->add_option("--log", o.log_path);
  distill_cmd->add_option("--strategy", o.strategy, "all | single:<i> | purified:<file>");
  distill_cmd->add_option("--lambda", o.lambda);
  distill_cmd->add_option("--lr", o.learning_rate);
  distill_cmd->add_option("--batch", o.batch_size);
  distill_cmd->add_option("--epochs", o.epochs);
  distill_cmd->add_option("--hidden", o.hidden);
  distill_cmd->add_option("--train-fraction", o.train_fraction);

  auto* sel_cmd = app.add_subcommand("select-teacher", "alternating selector + student training");
  add_common(sel_cmd);
  sel_cmd->add_option("--out", o.out);
  sel_cmd->add_option("--student-out", o.student_out);
  sel_cmd->add_option("--log", o.log_path);
  sel_cmd->add_option("--lambda", o.lambda);
  sel_cmd->add_option("--lr", o.learning_rate);
  sel_cmd->add_option("--hidden", o.hidden);
  sel_cmd->add_option("--selector-lr", o.selector_lr);
  sel_cmd->add_option("--selector-epochs", o.selector_epochs);
  sel_cmd->add_option("--selector-batch", o.selector_batch);
  sel_cmd->add_flag("--log-gradient", o.log_gradient);
  sel_cmd->add_option("--train-fraction", o.train_fraction);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a student checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--student", o.student);
  eval_cmd->add_option("--out", o.out);
  eval_cmd->add_option("--split", o.split);
  eval_cmd->add_option("--format", o.format);
  eval_cmd->add_option("--run-id", o.run_id);
  eval_cmd->add_option("--method", o.method);

  auto* sweep_cmd = app.add_subcommand("sweep", "incremental-teacher sweep with CMV");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--method", o.method);
  sweep_cmd->add_option("--out", o.out);
  sweep_cmd->add_option("--plot", o.plot);
  sweep_cmd->add_option("--format", o.format);
  sweep_cmd->add_option("--run-id", o.run_id);
  sweep_cmd->add_option("--lambda", o.lambda);
  sweep_cmd->add_option("--lr", o.learning_rate);
  sweep_cmd->add_option("--batch", o.batch_size);
  sweep_cmd->add_option("--epochs", o.epochs);
  sweep_cmd->add_option("--hidden", o.hidden);
  sweep_cmd->add_option("--gamma", o.gamma);
  sweep_cmd->add_option("--router-lr", o.router_lr);
  sweep_cmd->add_option("--router-batch", o.router_batch);
  sweep_cmd->add_option("--router-epochs", o.router_epochs);
  sweep_cmd->add_option("--router-hidden", o.router_hidden);
  sweep_cmd->add_option("--key-dim", o.key_dim);
  sweep_cmd->add_option("--train-fraction", o.train_fraction);

  auto* report_cmd = app.add_subcommand("report", "re-emit a JSON report");
  report_cmd->add_option("--in", o.report_in);
  report_cmd->add_option("--out", o.out);
  report_cmd->add_option("--format", o.format);
  report_cmd->add_option("--plot", o.plot);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (ingest_cmd->parsed()) return cmd_ingest(o);
    if (split_cmd->parsed()) return cmd_split(o);
    if (embed_cmd->parsed()) return cmd_embed(o);
    if (router_cmd->parsed()) return cmd_router_train(o);
    if (route_cmd->parsed()) return cmd_route(o);
    if (agg_cmd->parsed()) return cmd_aggregate(o);
    if (distill_cmd->parsed()) return cmd_distill(o);
    if (sel_cmd->parsed()) return cmd_select_teacher(o);
    if (eval_cmd->parsed()) return cmd_eval(o);
    if (sweep_cmd->parsed()) return cmd_sweep(o);
    if (report_cmd->parsed()) return cmd_report(o);
    throw kpd::UsageError("no subcommand");
  } catch (const kpd::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const kpd::RemoteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const kpd::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
