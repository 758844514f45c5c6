#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/encoder.hpp"
#include "kpd/purify.hpp"

namespace kpd {

// Similarity weight between a query and a database question:
// omega' = gamma^(1 + cos), strictly increasing in the cosine.
inline double weight_omega(const Embedding& query_emb, const Embedding& entry_emb, double gamma) {
  if (gamma <= 1.0) throw UsageError("weight_omega: gamma must be > 1");
  return std::pow(gamma, 1.0 + cosine(query_emb, entry_emb));
}

// Training-free ranking state: labeled question embeddings with their
// optimal teacher. All work happens at query time.
struct PLDatabase {
  struct Entry {
    Embedding emb;
    int teacher = 0;
    std::string dataset_id;
  };
  std::vector<Entry> entries;
  double gamma = 10.0;
  int n_teachers = 0;
};

inline PLDatabase build_pl_database(const Corpus& corpus, const TeacherEnsemble& ensemble,
                                    const std::vector<RouterLabel>& labels,
                                    const EmbeddingProvider& provider, Split split = Split::Public,
                                    double gamma = 10.0) {
  PLDatabase db;
  db.gamma = gamma;
  db.n_teachers = static_cast<int>(ensemble.size());
  for (const auto& label : labels) {
    if (!label.optimal_teacher) continue;
    const Question* q = corpus.find_question(label.question_id);
    if (!q || !q->split || *q->split != split) continue;
    db.entries.push_back({provider.question(*q), *label.optimal_teacher, q->dataset_id});
  }
  return db;
}

// Closed-form per-query distribution: P_i is the weight mass of entries
// whose optimal teacher is i, normalized by the total weight mass.
inline RoutingDistribution pl_rank_closed(const PLDatabase& db, const Embedding& query_emb,
                                          const std::string& dataset_filter = "") {
  if (db.entries.empty()) throw UsageError("pl_rank_closed: empty database");
  std::vector<double> mass(static_cast<std::size_t>(db.n_teachers), 0.0);
  double total = 0.0;
  for (const auto& entry : db.entries) {
    if (!dataset_filter.empty() && entry.dataset_id != dataset_filter) continue;
    double w = weight_omega(query_emb, entry.emb, db.gamma);
    mass[static_cast<std::size_t>(entry.teacher)] += w;
    total += w;
  }
  if (total <= 0.0) throw UsageError("pl_rank_closed: no entries match the dataset filter");
  RoutingDistribution d;
  d.probs.resize(mass.size());
  for (std::size_t i = 0; i < mass.size(); ++i) d.probs[i] = mass[i] / total;
  return d;
}

// (weight, optimal teacher) pairs for one query, the inputs of the
// weighted cross-entropy objective.
using WeightedLabels = std::vector<std::pair<double, int>>;

inline WeightedLabels query_weights(const PLDatabase& db, const Embedding& query_emb) {
  WeightedLabels wl;
  wl.reserve(db.entries.size());
  for (const auto& entry : db.entries) {
    wl.emplace_back(weight_omega(query_emb, entry.emb, db.gamma), entry.teacher);
  }
  return wl;
}

// Weighted cross-entropy over one-hot labels: sum_q omega' * -log softmax(xi)[y].
inline double pl_objective(std::span<const double> xi, const WeightedLabels& labels) {
  double lse = detail::log_sum_exp(xi);
  double total = 0.0;
  for (const auto& [w, teacher] : labels) {
    if (w <= 0.0) throw UsageError("pl_objective: weights must be positive");
    total += w * (lse - xi[static_cast<std::size_t>(teacher)]);
  }
  return total;
}

struct PLCoefficients {
  std::vector<double> xi;
  bool converged = false;

  std::vector<double> probs() const {
    double lse = detail::log_sum_exp(xi);
    std::vector<double> p(xi.size());
    for (std::size_t i = 0; i < xi.size(); ++i) p[i] = std::exp(xi[i] - lse);
    return p;
  }
};

// Gradient-descent minimizer of the weighted cross-entropy objective,
// started from xi = 0. This is the verification oracle for the closed
// form; the production path is pl_rank_closed.
inline PLCoefficients pl_fit_oracle(const WeightedLabels& labels, int n_teachers,
                                    int max_steps = 20000, double lr = 0.0) {
  PLCoefficients c;
  c.xi.assign(static_cast<std::size_t>(n_teachers), 0.0);
  if (labels.empty()) return c;

  double total_w = 0.0;
  for (const auto& [w, t] : labels) total_w += w;
  if (lr <= 0.0) lr = 1.0 / total_w;  // keeps steps scale-free in the weights

  std::vector<double> count(static_cast<std::size_t>(n_teachers), 0.0);
  for (const auto& [w, t] : labels) count[static_cast<std::size_t>(t)] += w;

  std::vector<double> grad(c.xi.size());
  for (int step = 0; step < max_steps; ++step) {
    double lse = detail::log_sum_exp(c.xi);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < c.xi.size(); ++i) {
      double p = std::exp(c.xi[i] - lse);
      grad[i] = total_w * p - count[i];
      norm2 += grad[i] * grad[i];
    }
    if (std::sqrt(norm2) < 1e-10) {
      c.converged = true;
      break;
    }
    for (std::size_t i = 0; i < c.xi.size(); ++i) c.xi[i] -= lr * grad[i];
  }
  return c;
}

inline void save_pl_database(const std::string& path, const PLDatabase& db) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  int dim = db.entries.empty() ? 0 : static_cast<int>(db.entries.front().emb.dim());
  nlohmann::json header{{"format", "kpd-pl"}, {"version", 1}, {"gamma", db.gamma},
                        {"n", db.n_teachers}, {"count", db.entries.size()}, {"dim", dim}};
  f << header.dump() << "\n";
  for (const auto& e : db.entries) {
    nlohmann::json j{{"teacher", e.teacher}, {"dataset", e.dataset_id}};
    f << j.dump() << "\n";
    std::vector<float> buf(e.emb.values.begin(), e.emb.values.end());
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    f << "\n";
  }
}

inline PLDatabase load_pl_database(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  if (header.value("format", "") != "kpd-pl") throw DataError(path + ": not a ranking database");
  PLDatabase db;
  db.gamma = header.at("gamma").get<double>();
  db.n_teachers = header.at("n").get<int>();
  std::size_t count = header.at("count").get<std::size_t>();
  int dim = header.at("dim").get<int>();
  for (std::size_t rec = 0; rec < count; ++rec) {
    if (!std::getline(f, line)) throw DataError(path + ": truncated");
    auto j = detail::parse_jsonl_line(line, path, rec + 2);
    PLDatabase::Entry e;
    e.teacher = j.at("teacher").get<int>();
    e.dataset_id = j.at("dataset").get<std::string>();
    std::vector<float> buf(static_cast<std::size_t>(dim));
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw DataError(path + ": truncated binary payload");
    e.emb.values.assign(buf.begin(), buf.end());
    if (f.peek() == '\n') f.get();
    db.entries.push_back(std::move(e));
  }
  return db;
}

class PLPurifier final : public Purifier {
 public:
  PLPurifier(PLDatabase db, const EmbeddingProvider* provider, std::string dataset_filter = "")
      : db_(std::move(db)), provider_(provider), dataset_filter_(std::move(dataset_filter)) {}

  std::string name() const override { return "pl"; }

  RoutingDistribution route(const Question& q,
                            std::span<const TeacherRationale* const>) const override {
    return pl_rank_closed(db_, provider_->question(q), dataset_filter_);
  }

  const PLDatabase& database() const { return db_; }

 private:
  PLDatabase db_;
  const EmbeddingProvider* provider_;
  std::string dataset_filter_;
};

}  // namespace kpd
