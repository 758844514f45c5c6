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
#include "kpd/optim.hpp"
#include "kpd/purify.hpp"

namespace kpd {

// Shared-trunk two-layer perceptron over the frozen question embedding,
// rectifier between the layers, softmax over teachers.
struct MlpRouter {
  int input_dim = 0;
  int hidden = 128;
  int n_teachers = 0;
  std::vector<double> params;  // W1 (hidden*d), b1 (hidden), W2 (n*hidden), b2 (n)

  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return static_cast<std::size_t>(hidden) * input_dim; }
  std::size_t w2_offset() const { return b1_offset() + static_cast<std::size_t>(hidden); }
  std::size_t b2_offset() const { return w2_offset() + static_cast<std::size_t>(n_teachers) * hidden; }
  std::size_t param_count() const { return b2_offset() + static_cast<std::size_t>(n_teachers); }
};

inline MlpRouter mlp_init(int input_dim, int n_teachers, std::uint64_t seed, int hidden = 128) {
  MlpRouter r;
  r.input_dim = input_dim;
  r.hidden = hidden;
  r.n_teachers = n_teachers;
  r.params.resize(r.param_count());
  Rng rng(derive_seed(seed, "cls-init"));
  double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t i = r.w1_offset(); i < r.b1_offset(); ++i) r.params[i] = rng.uniform(-s1, s1);
  for (std::size_t i = r.b1_offset(); i < r.w2_offset(); ++i) r.params[i] = 0.0;
  for (std::size_t i = r.w2_offset(); i < r.b2_offset(); ++i) r.params[i] = rng.uniform(-s2, s2);
  for (std::size_t i = r.b2_offset(); i < r.param_count(); ++i) r.params[i] = 0.0;
  return r;
}

inline RoutingDistribution mlp_forward(const MlpRouter& r, const Embedding& q_emb) {
  if (static_cast<int>(q_emb.dim()) != r.input_dim) {
    throw UsageError("mlp_forward: embedding dim " + std::to_string(q_emb.dim()) + ", router expects " +
                     std::to_string(r.input_dim));
  }
  std::vector<double> z1(static_cast<std::size_t>(r.hidden));
  const double* W1 = r.params.data() + r.w1_offset();
  const double* b1 = r.params.data() + r.b1_offset();
  for (int i = 0; i < r.hidden; ++i) {
    double a = b1[i];
    const double* row = W1 + static_cast<std::size_t>(i) * r.input_dim;
    for (int j = 0; j < r.input_dim; ++j) a += row[j] * q_emb.values[static_cast<std::size_t>(j)];
    z1[static_cast<std::size_t>(i)] = std::max(0.0, a);
  }
  std::vector<double> logits(static_cast<std::size_t>(r.n_teachers));
  const double* W2 = r.params.data() + r.w2_offset();
  const double* b2 = r.params.data() + r.b2_offset();
  for (int i = 0; i < r.n_teachers; ++i) {
    double a = b2[i];
    const double* row = W2 + static_cast<std::size_t>(i) * r.hidden;
    for (int j = 0; j < r.hidden; ++j) a += row[j] * z1[static_cast<std::size_t>(j)];
    logits[static_cast<std::size_t>(i)] = a;
  }
  return softmax_distribution(logits);
}

// Cross-entropy of one labeled question; accumulates scaled gradients when
// grad is non-empty.
inline double mlp_ce_loss(const MlpRouter& r, const Embedding& q_emb, int label,
                          std::span<double> grad = {}, double scale = 1.0) {
  const std::size_t d = static_cast<std::size_t>(r.input_dim);
  const std::size_t h = static_cast<std::size_t>(r.hidden);
  const std::size_t n = static_cast<std::size_t>(r.n_teachers);
  const double* W1 = r.params.data() + r.w1_offset();
  const double* b1 = r.params.data() + r.b1_offset();
  const double* W2 = r.params.data() + r.w2_offset();
  const double* b2 = r.params.data() + r.b2_offset();

  std::vector<double> pre(h), z1(h);
  for (std::size_t i = 0; i < h; ++i) {
    double a = b1[i];
    const double* row = W1 + i * d;
    for (std::size_t j = 0; j < d; ++j) a += row[j] * q_emb.values[j];
    pre[i] = a;
    z1[i] = std::max(0.0, a);
  }
  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    double a = b2[i];
    const double* row = W2 + i * h;
    for (std::size_t j = 0; j < h; ++j) a += row[j] * z1[j];
    logits[i] = a;
  }
  double lse = detail::log_sum_exp(logits);
  double loss = lse - logits[static_cast<std::size_t>(label)];

  if (!grad.empty()) {
    std::vector<double> dz1(h, 0.0);
    double* gW2 = grad.data() + r.w2_offset();
    double* gb2 = grad.data() + r.b2_offset();
    for (std::size_t i = 0; i < n; ++i) {
      double p = std::exp(logits[i] - lse);
      double dl = p - (static_cast<int>(i) == label ? 1.0 : 0.0);
      const double* row = W2 + i * h;
      double* grow = gW2 + i * h;
      double g = scale * dl;
      for (std::size_t j = 0; j < h; ++j) {
        grow[j] += g * z1[j];
        dz1[j] += dl * row[j];
      }
      gb2[i] += g;
    }
    double* gW1 = grad.data() + r.w1_offset();
    double* gb1 = grad.data() + r.b1_offset();
    for (std::size_t i = 0; i < h; ++i) {
      if (pre[i] <= 0.0) continue;
      double g = scale * dz1[i];
      double* grow = gW1 + i * d;
      for (std::size_t j = 0; j < d; ++j) grow[j] += g * q_emb.values[j];
      gb1[i] += g;
    }
  }
  return loss;
}

struct ClsTrainConfig {
  double learning_rate = 5e-5;
  int batch_size = 16;
  int epochs = 5000;
  std::uint64_t seed = 0;
  int hidden = 128;
};

struct LabeledEmbedding {
  Embedding emb;
  int teacher = 0;
  std::string dataset_id;
};

// Labeled (question embedding, optimal teacher) pairs from a split;
// questions with no correct teacher carry no label and are skipped.
inline std::vector<LabeledEmbedding> labeled_embeddings(const Corpus& corpus,
                                                        const std::vector<RouterLabel>& labels,
                                                        const EmbeddingProvider& provider,
                                                        Split split = Split::Public) {
  std::vector<LabeledEmbedding> out;
  for (const auto& label : labels) {
    if (!label.optimal_teacher) continue;
    const Question* q = corpus.find_question(label.question_id);
    if (!q || !q->split || *q->split != split) continue;
    out.push_back({provider.question(*q), *label.optimal_teacher, q->dataset_id});
  }
  return out;
}

inline MlpRouter train_cls(const std::vector<LabeledEmbedding>& data, int n_teachers,
                           const ClsTrainConfig& config, std::vector<double>* loss_log = nullptr) {
  if (data.empty()) throw DataError("train_cls: empty label set");
  MlpRouter router = mlp_init(static_cast<int>(data.front().emb.dim()), n_teachers, config.seed,
                              config.hidden);
  AdamW opt(AdamWConfig{.lr = config.learning_rate});
  std::vector<double> grad(router.param_count());
  Rng rng(derive_seed(config.seed, "cls-shuffle"));

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double ep_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const auto& item = data[order[k]];
        ep_loss += mlp_ce_loss(router, item.emb, item.teacher, grad, scale);
      }
      opt.step(router.params, grad);
    }
    if (loss_log) loss_log->push_back(ep_loss / static_cast<double>(data.size()));
  }
  return router;
}

inline void save_mlp_router(const std::string& path, const MlpRouter& r, std::uint64_t seed,
                            int epochs_trained) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  nlohmann::json header{{"format", "kpd-cls"}, {"version", 1}, {"d", r.input_dim},
                        {"hidden", r.hidden}, {"n", r.n_teachers}, {"seed", seed},
                        {"epochs_trained", epochs_trained}};
  f << header.dump() << "\n";
  f.write(reinterpret_cast<const char*>(r.params.data()),
          static_cast<std::streamsize>(r.params.size() * sizeof(double)));
}

inline MlpRouter load_mlp_router(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  if (header.value("format", "") != "kpd-cls") throw DataError(path + ": not a classifier checkpoint");
  MlpRouter r;
  r.input_dim = header.at("d").get<int>();
  r.hidden = header.at("hidden").get<int>();
  r.n_teachers = header.at("n").get<int>();
  r.params.resize(r.param_count());
  f.read(reinterpret_cast<char*>(r.params.data()),
         static_cast<std::streamsize>(r.params.size() * sizeof(double)));
  if (!f) throw DataError(path + ": truncated parameter payload");
  return r;
}

class ClsPurifier final : public Purifier {
 public:
  ClsPurifier(MlpRouter router, const EmbeddingProvider* provider)
      : router_(std::move(router)), provider_(provider) {}

  std::string name() const override { return "cls"; }

  RoutingDistribution route(const Question& q,
                            std::span<const TeacherRationale* const>) const override {
    return mlp_forward(router_, provider_->question(q));
  }

  const MlpRouter& router() const { return router_; }

 private:
  MlpRouter router_;
  const EmbeddingProvider* provider_;
};

}  // namespace kpd
