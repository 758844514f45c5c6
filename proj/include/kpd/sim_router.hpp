#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/encoder.hpp"
#include "kpd/optim.hpp"
#include "kpd/purify.hpp"

namespace kpd {

// Similarity-based router: n trainable teacher embeddings in a 768-dim
// space, cosine-softmax routing. Question embeddings of a different width
// pass through a trainable linear projection; at width 768 the projection
// is the identity and carries no parameters.
struct SimRouter {
  int n_teachers = 0;
  int key_dim = 768;
  int enc_dim = 768;
  std::vector<double> params;  // K (n*key_dim), then P (key_dim*enc_dim) when enc_dim != key_dim

  bool has_projection() const { return enc_dim != key_dim; }
  std::size_t k_offset() const { return 0; }
  std::size_t p_offset() const { return static_cast<std::size_t>(n_teachers) * key_dim; }
  std::size_t param_count() const {
    return p_offset() + (has_projection() ? static_cast<std::size_t>(key_dim) * enc_dim : 0);
  }
  const double* key(int i) const { return params.data() + static_cast<std::size_t>(i) * key_dim; }
};

inline SimRouter sim_init(int n_teachers, int enc_dim, std::uint64_t seed, int key_dim = 768) {
  SimRouter r;
  r.n_teachers = n_teachers;
  r.key_dim = key_dim;
  r.enc_dim = enc_dim;
  r.params.resize(r.param_count());
  Rng rng(derive_seed(seed, "sim-init"));
  for (int i = 0; i < n_teachers; ++i) {
    double* k = r.params.data() + static_cast<std::size_t>(i) * key_dim;
    double norm2 = 0.0;
    for (int j = 0; j < key_dim; ++j) {
      k[j] = rng.normal();
      norm2 += k[j] * k[j];
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < key_dim; ++j) k[j] *= inv;
  }
  if (r.has_projection()) {
    double s = 1.0 / std::sqrt(static_cast<double>(enc_dim));
    for (std::size_t i = r.p_offset(); i < r.param_count(); ++i) r.params[i] = rng.uniform(-s, s);
  }
  return r;
}

namespace detail {

// cos(a, b) plus optional gradients w.r.t. both arguments.
inline double cosine_grad(std::span<const double> a, std::span<const double> b,
                          std::span<double> da, std::span<double> db) {
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na2 += a[i] * a[i];
    nb2 += b[i] * b[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) {
    if (!da.empty()) std::fill(da.begin(), da.end(), 0.0);
    if (!db.empty()) std::fill(db.begin(), db.end(), 0.0);
    return 0.0;
  }
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  double c = dot / (na * nb);
  if (!da.empty()) {
    for (std::size_t i = 0; i < a.size(); ++i) da[i] = b[i] / (na * nb) - c * a[i] / na2;
  }
  if (!db.empty()) {
    for (std::size_t i = 0; i < b.size(); ++i) db[i] = a[i] / (na * nb) - c * b[i] / nb2;
  }
  return c;
}

// Projects a question embedding into key space. dz_to_gp scatters an
// upstream dz into the projection's gradient block.
inline std::vector<double> sim_project(const SimRouter& r, std::span<const double> q) {
  if (static_cast<int>(q.size()) != r.enc_dim) {
    throw UsageError("sim router: embedding dim " + std::to_string(q.size()) + ", expected " +
                     std::to_string(r.enc_dim));
  }
  if (!r.has_projection()) return std::vector<double>(q.begin(), q.end());
  std::vector<double> z(static_cast<std::size_t>(r.key_dim), 0.0);
  const double* P = r.params.data() + r.p_offset();
  for (int i = 0; i < r.key_dim; ++i) {
    const double* row = P + static_cast<std::size_t>(i) * r.enc_dim;
    double s = 0.0;
    for (int j = 0; j < r.enc_dim; ++j) s += row[j] * q[static_cast<std::size_t>(j)];
    z[static_cast<std::size_t>(i)] = s;
  }
  return z;
}

inline void sim_backprop_projection(const SimRouter& r, std::span<const double> q,
                                    std::span<const double> dz, std::span<double> grad) {
  if (!r.has_projection() || grad.empty()) return;
  double* gP = grad.data() + r.p_offset();
  for (int i = 0; i < r.key_dim; ++i) {
    double g = dz[static_cast<std::size_t>(i)];
    if (g == 0.0) continue;
    double* row = gP + static_cast<std::size_t>(i) * r.enc_dim;
    for (int j = 0; j < r.enc_dim; ++j) row[j] += g * q[static_cast<std::size_t>(j)];
  }
}

}  // namespace detail

// Softmax over cosine similarities to the teacher embeddings. A zero
// question embedding routes uniformly.
inline RoutingDistribution sim_route(const SimRouter& r, const Embedding& q_emb) {
  auto z = detail::sim_project(r, q_emb.values);
  double norm2 = 0.0;
  for (double v : z) norm2 += v * v;
  if (norm2 == 0.0) {
    RoutingDistribution d;
    d.probs.assign(static_cast<std::size_t>(r.n_teachers), 1.0 / r.n_teachers);
    return d;
  }
  std::vector<double> sims(static_cast<std::size_t>(r.n_teachers));
  for (int i = 0; i < r.n_teachers; ++i) {
    sims[static_cast<std::size_t>(i)] =
        detail::cosine_grad(z, std::span<const double>(r.key(i), static_cast<std::size_t>(r.key_dim)), {}, {});
  }
  return softmax_distribution(sims);
}

// -ln( e^{s+} / (e^{s+} + e^{s-}) ) with s the cosine similarity between
// the projected question and the teacher embeddings.
inline double loss_sample_llm(const SimRouter& r, const Embedding& q_emb, int pos, int neg,
                              std::span<double> grad = {}, double scale = 1.0) {
  auto z = detail::sim_project(r, q_emb.values);
  const std::size_t kd = static_cast<std::size_t>(r.key_dim);
  std::vector<double> dz_pos(grad.empty() ? 0 : kd), dk_pos(grad.empty() ? 0 : kd);
  std::vector<double> dz_neg(grad.empty() ? 0 : kd), dk_neg(grad.empty() ? 0 : kd);
  double sp = detail::cosine_grad(z, std::span<const double>(r.key(pos), kd), dz_pos, dk_pos);
  double sn = detail::cosine_grad(z, std::span<const double>(r.key(neg), kd), dz_neg, dk_neg);
  // log(1 + e^{sn - sp}), computed stably.
  double x = sn - sp;
  double loss = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  if (!grad.empty()) {
    double sig = 1.0 / (1.0 + std::exp(-x));  // dloss/dx
    double* gk_pos = grad.data() + static_cast<std::size_t>(pos) * kd;
    double* gk_neg = grad.data() + static_cast<std::size_t>(neg) * kd;
    std::vector<double> dz(kd, 0.0);
    for (std::size_t j = 0; j < kd; ++j) {
      gk_pos[j] += scale * sig * -dk_pos[j];
      gk_neg[j] += scale * sig * dk_neg[j];
      dz[j] = scale * sig * (dz_neg[j] - dz_pos[j]);
    }
    detail::sim_backprop_projection(r, q_emb.values, dz, grad);
  }
  return loss;
}

// In-group/out-group contrastive loss over projected question embeddings.
// An empty out-group contributes 0 by convention.
inline double loss_sample_sample(const SimRouter& r, const Embedding& anchor, const Embedding& in_group,
                                 std::span<const Embedding* const> out_group,
                                 std::span<double> grad = {}, double scale = 1.0) {
  if (out_group.empty()) return 0.0;
  auto za = detail::sim_project(r, anchor.values);
  auto zp = detail::sim_project(r, in_group.values);
  const std::size_t kd = static_cast<std::size_t>(r.key_dim);
  const bool want_grad = !grad.empty() && r.has_projection();

  std::vector<double> da_p(want_grad ? kd : 0), dp(want_grad ? kd : 0);
  double sp = detail::cosine_grad(za, zp, da_p, dp);

  std::vector<double> sims(out_group.size());
  std::vector<std::vector<double>> da_n(want_grad ? out_group.size() : 0);
  std::vector<std::vector<double>> dn(want_grad ? out_group.size() : 0);
  std::vector<std::vector<double>> zn(out_group.size());
  for (std::size_t k = 0; k < out_group.size(); ++k) {
    zn[k] = detail::sim_project(r, out_group[k]->values);
    if (want_grad) {
      da_n[k].resize(kd);
      dn[k].resize(kd);
      sims[k] = detail::cosine_grad(za, zn[k], da_n[k], dn[k]);
    } else {
      sims[k] = detail::cosine_grad(za, zn[k], {}, {});
    }
  }

  std::vector<double> all(sims.size() + 1);
  all[0] = sp;
  for (std::size_t k = 0; k < sims.size(); ++k) all[k + 1] = sims[k];
  double lse = detail::log_sum_exp(all);
  double loss = lse - sp;

  if (want_grad) {
    double p0 = std::exp(sp - lse);
    std::vector<double> dza(kd, 0.0), dzp(kd, 0.0);
    double w0 = (p0 - 1.0) * scale;  // d loss / d sp
    for (std::size_t j = 0; j < kd; ++j) {
      dza[j] += w0 * da_p[j];
      dzp[j] += w0 * dp[j];
    }
    detail::sim_backprop_projection(r, in_group.values, dzp, grad);
    for (std::size_t k = 0; k < sims.size(); ++k) {
      double wk = std::exp(sims[k] - lse) * scale;
      std::vector<double> dzn(kd, 0.0);
      for (std::size_t j = 0; j < kd; ++j) {
        dza[j] += wk * da_n[k][j];
        dzn[j] = wk * dn[k][j];
      }
      detail::sim_backprop_projection(r, out_group[k]->values, dzn, grad);
    }
    detail::sim_backprop_projection(r, anchor.values, dza, grad);
  }
  return loss;
}

struct SimTrainItem {
  Embedding emb;
  // Sample-LLM positives/negatives; -1 when the question has all-correct
  // or all-wrong teachers (the term is skipped).
  int positive = -1;
  int negative = -1;
  std::string dataset_id;
};

// Binary per-teacher scores with seeded random tie-breaking among equal
// bests/worsts.
inline std::vector<SimTrainItem> sim_training_items(const Corpus& corpus,
                                                    const TeacherEnsemble& ensemble,
                                                    const EmbeddingProvider& provider,
                                                    std::uint64_t seed,
                                                    Split split = Split::Public) {
  Rng rng(derive_seed(seed, "sim-ties"));
  std::vector<SimTrainItem> items;
  for (const Question* q : corpus.questions_in(split)) {
    SimTrainItem item;
    item.emb = provider.question(*q);
    item.dataset_id = q->dataset_id;
    std::vector<int> correct, wrong;
    bool covered = true;
    for (std::size_t t = 0; t < ensemble.size(); ++t) {
      const TeacherRationale* r = corpus.find_rationale(q->id, ensemble.teacher_ids[t]);
      if (!r) {
        covered = false;
        break;
      }
      (r->predicted_index == q->gold_index ? correct : wrong).push_back(static_cast<int>(t));
    }
    if (covered && !correct.empty() && !wrong.empty()) {
      item.positive = correct[rng.next_index(correct.size())];
      item.negative = wrong[rng.next_index(wrong.size())];
    }
    items.push_back(std::move(item));
  }
  return items;
}

struct SimTrainConfig {
  double learning_rate = 2e-5;
  int batch_size = 16;
  int epochs = 5000;
  std::uint64_t seed = 0;
  int key_dim = 768;
};

// Trains K (and P when present) with the combined sample-LLM +
// sample-sample objective. When the corpus has >= 2 datasets, batches are
// fixed up to contain at least two groups so the sample-sample term stays
// active.
inline SimRouter train_sim(const std::vector<SimTrainItem>& data, int n_teachers,
                           const SimTrainConfig& config, std::vector<double>* loss_log = nullptr) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < data.size(); ++i) eligible.push_back(i);
  if (eligible.empty()) throw DataError("train_sim: empty training set");

  SimRouter router = sim_init(n_teachers, static_cast<int>(data.front().emb.dim()), config.seed,
                              config.key_dim);
  if (n_teachers == 1) return router;  // nothing to contrast against

  AdamW opt(AdamWConfig{.lr = config.learning_rate});
  std::vector<double> grad(router.param_count());
  Rng rng(derive_seed(config.seed, "sim-shuffle"));

  std::size_t n_groups = 0;
  {
    std::vector<std::string> seen;
    for (const auto& it : data) {
      if (std::find(seen.begin(), seen.end(), it.dataset_id) == seen.end()) seen.push_back(it.dataset_id);
    }
    n_groups = seen.size();
  }

  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order = eligible;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    if (n_groups >= 2) {
      // Ensure every full batch spans at least two groups.
      for (std::size_t start = 0; start + 1 < order.size(); start += bs) {
        std::size_t end = std::min(order.size(), start + bs);
        const std::string& g0 = data[order[start]].dataset_id;
        bool mixed = false;
        for (std::size_t k = start + 1; k < end; ++k) {
          if (data[order[k]].dataset_id != g0) {
            mixed = true;
            break;
          }
        }
        if (!mixed) {
          for (std::size_t k = 0; k < order.size(); ++k) {
            if (data[order[k]].dataset_id != g0) {
              std::swap(order[start], order[k]);
              break;
            }
          }
        }
      }
    }

    double ep_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::size_t end = std::min(order.size(), start + bs);
      std::fill(grad.begin(), grad.end(), 0.0);
      double scale = 1.0 / static_cast<double>(end - start);

      for (std::size_t k = start; k < end; ++k) {
        const auto& item = data[order[k]];
        if (item.positive >= 0 && item.negative >= 0) {
          ep_loss += loss_sample_llm(router, item.emb, item.positive, item.negative, grad, scale);
        }
        // In-group positive: seeded draw among in-batch same-group items.
        std::vector<std::size_t> in_group;
        std::vector<const Embedding*> out_group;
        for (std::size_t m = start; m < end; ++m) {
          if (m == k) continue;
          if (data[order[m]].dataset_id == item.dataset_id) {
            in_group.push_back(order[m]);
          } else {
            out_group.push_back(&data[order[m]].emb);
          }
        }
        if (!in_group.empty() && !out_group.empty()) {
          const Embedding& pos = data[in_group[rng.next_index(in_group.size())]].emb;
          ep_loss += loss_sample_sample(router, item.emb, pos,
                                        std::span<const Embedding* const>(out_group), grad, scale);
        }
      }
      opt.step(router.params, grad);
    }
    if (loss_log) loss_log->push_back(ep_loss / static_cast<double>(order.size()));
  }
  return router;
}

inline void save_sim_router(const std::string& path, const SimRouter& r, std::uint64_t seed) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  nlohmann::json header{{"format", "kpd-sim"}, {"version", 1}, {"n", r.n_teachers},
                        {"dim", r.key_dim}, {"proj_dim", r.enc_dim}, {"seed", seed}};
  f << header.dump() << "\n";
  f.write(reinterpret_cast<const char*>(r.params.data()),
          static_cast<std::streamsize>(r.params.size() * sizeof(double)));
}

inline SimRouter load_sim_router(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  if (header.value("format", "") != "kpd-sim") throw DataError(path + ": not a similarity router checkpoint");
  SimRouter r;
  r.n_teachers = header.at("n").get<int>();
  r.key_dim = header.at("dim").get<int>();
  r.enc_dim = header.at("proj_dim").get<int>();
  r.params.resize(r.param_count());
  f.read(reinterpret_cast<char*>(r.params.data()),
         static_cast<std::streamsize>(r.params.size() * sizeof(double)));
  if (!f) throw DataError(path + ": truncated parameter payload");
  return r;
}

class SimPurifier final : public Purifier {
 public:
  SimPurifier(SimRouter router, const EmbeddingProvider* provider)
      : router_(std::move(router)), provider_(provider) {}

  std::string name() const override { return "sim"; }

  RoutingDistribution route(const Question& q,
                            std::span<const TeacherRationale* const>) const override {
    return sim_route(router_, provider_->question(q));
  }

  const SimRouter& router() const { return router_; }

 private:
  SimRouter router_;
  const EmbeddingProvider* provider_;
};

}  // namespace kpd
