#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"
#include "kpd/optim.hpp"

namespace kpd {

// Compact autoregressive token model: token embeddings, one hidden affine
// map with tanh, output projection tied to the embeddings. The next-token
// state is built from the mean embedding of the full prefix.
struct StudentModel {
  int vocab_size = 0;
  int hidden = 0;
  std::vector<double> params;  // E (V*h), then W (h*h), then b (h)

  std::size_t emb_offset() const { return 0; }
  std::size_t w_offset() const { return static_cast<std::size_t>(vocab_size) * hidden; }
  std::size_t b_offset() const { return w_offset() + static_cast<std::size_t>(hidden) * hidden; }
  std::size_t param_count() const { return b_offset() + static_cast<std::size_t>(hidden); }

  const double* emb_row(int token) const { return params.data() + static_cast<std::size_t>(token) * hidden; }
  const double* w() const { return params.data() + w_offset(); }
  const double* bias() const { return params.data() + b_offset(); }
};

inline StudentModel student_init(int vocab_size, int hidden, std::uint64_t seed) {
  StudentModel m;
  m.vocab_size = vocab_size;
  m.hidden = hidden;
  m.params.resize(m.param_count());
  Rng rng(derive_seed(seed, "student-init"));
  double scale = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t i = 0; i < m.w_offset(); ++i) m.params[i] = rng.uniform(-scale, scale);
  for (std::size_t i = m.w_offset(); i < m.b_offset(); ++i) m.params[i] = rng.uniform(-scale, scale);
  for (std::size_t i = m.b_offset(); i < m.param_count(); ++i) m.params[i] = 0.0;
  return m;
}

namespace detail {

// Hidden state for one prefix: s = tanh(W * mean(E[prefix]) + b).
// mean_buf and state_buf are hidden-sized scratch.
inline void student_state(const StudentModel& m, std::span<const double> mean_emb,
                          std::span<double> state) {
  const double* W = m.w();
  const double* b = m.bias();
  for (int i = 0; i < m.hidden; ++i) {
    double a = b[i];
    const double* row = W + static_cast<std::size_t>(i) * m.hidden;
    for (int j = 0; j < m.hidden; ++j) a += row[j] * mean_emb[static_cast<std::size_t>(j)];
    state[static_cast<std::size_t>(i)] = std::tanh(a);
  }
}

inline void student_logits(const StudentModel& m, std::span<const double> state,
                           std::span<double> logits) {
  for (int v = 0; v < m.vocab_size; ++v) {
    const double* row = m.emb_row(v);
    double z = 0.0;
    for (int j = 0; j < m.hidden; ++j) z += row[j] * state[static_cast<std::size_t>(j)];
    logits[static_cast<std::size_t>(v)] = z;
  }
}

}  // namespace detail

// Probabilities of the next token given a prefix. Mostly a test surface;
// training goes through nll_sequence_grad.
inline std::vector<double> next_token_probs(const StudentModel& m, std::span<const int> prefix) {
  std::vector<double> mean(static_cast<std::size_t>(m.hidden), 0.0);
  for (int tok : prefix) {
    const double* row = m.emb_row(tok);
    for (int j = 0; j < m.hidden; ++j) mean[static_cast<std::size_t>(j)] += row[j];
  }
  if (!prefix.empty()) {
    for (double& v : mean) v /= static_cast<double>(prefix.size());
  }
  std::vector<double> state(static_cast<std::size_t>(m.hidden));
  detail::student_state(m, mean, state);
  std::vector<double> logits(static_cast<std::size_t>(m.vocab_size));
  detail::student_logits(m, state, logits);
  double lse = detail::log_sum_exp(logits);
  std::vector<double> probs(logits.size());
  for (std::size_t v = 0; v < logits.size(); ++v) probs[v] = std::exp(logits[v] - lse);
  return probs;
}

// Teacher-forced sequence NLL: sum_i -log p(target_i | context, target_<i>),
// natural log. When grad is non-empty, accumulates scale * d(nll)/d(params)
// into it.
inline double nll_sequence_impl(const StudentModel& m, std::span<const int> context,
                                std::span<const int> target, std::span<double> grad,
                                double scale) {
  if (target.empty()) throw UsageError("nll_sequence: empty target");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != m.param_count()) {
    throw UsageError("nll_sequence: gradient buffer size mismatch");
  }

  const std::size_t h = static_cast<std::size_t>(m.hidden);
  std::vector<double> sum_emb(h, 0.0);
  std::vector<int> prefix(context.begin(), context.end());
  for (int tok : context) {
    const double* row = m.emb_row(tok);
    for (std::size_t j = 0; j < h; ++j) sum_emb[j] += row[j];
  }

  std::vector<double> mean(h), state(h), logits(static_cast<std::size_t>(m.vocab_size));
  std::vector<double> dstate(h), da(h), dmean(h);
  double total = 0.0;

  for (std::size_t i = 0; i < target.size(); ++i) {
    const std::size_t len = prefix.size();
    for (std::size_t j = 0; j < h; ++j) {
      mean[j] = len ? sum_emb[j] / static_cast<double>(len) : 0.0;
    }
    detail::student_state(m, mean, state);
    detail::student_logits(m, state, logits);
    double lse = detail::log_sum_exp(logits);
    int tgt = target[i];
    if (tgt < 0 || tgt >= m.vocab_size) throw UsageError("nll_sequence: token out of vocabulary");
    total += lse - logits[static_cast<std::size_t>(tgt)];

    if (want_grad) {
      // dz_v = p_v - [v == tgt]; dE_v += dz_v * s (tied output);
      // ds = E^T dz; da = ds * (1 - s^2); dW += da m^T; db += da;
      // dm = W^T da; dE[tok] += dm / len over the prefix.
      std::fill(dstate.begin(), dstate.end(), 0.0);
      for (int v = 0; v < m.vocab_size; ++v) {
        double p = std::exp(logits[static_cast<std::size_t>(v)] - lse);
        double dz = p - (v == tgt ? 1.0 : 0.0);
        if (dz == 0.0) continue;
        double* ge = grad.data() + static_cast<std::size_t>(v) * h;
        const double* row = m.emb_row(v);
        double g = scale * dz;
        for (std::size_t j = 0; j < h; ++j) {
          ge[j] += g * state[j];
          dstate[j] += dz * row[j];
        }
      }
      for (std::size_t j = 0; j < h; ++j) da[j] = dstate[j] * (1.0 - state[j] * state[j]);
      double* gw = grad.data() + m.w_offset();
      double* gb = grad.data() + m.b_offset();
      const double* W = m.w();
      std::fill(dmean.begin(), dmean.end(), 0.0);
      for (std::size_t r = 0; r < h; ++r) {
        double g = scale * da[r];
        double* gwrow = gw + r * h;
        const double* wrow = W + r * h;
        for (std::size_t j = 0; j < h; ++j) {
          gwrow[j] += g * mean[j];
          dmean[j] += da[r] * wrow[j];
        }
        gb[r] += g;
      }
      if (len > 0) {
        double inv = scale / static_cast<double>(len);
        for (int tok : prefix) {
          double* ge = grad.data() + static_cast<std::size_t>(tok) * h;
          for (std::size_t j = 0; j < h; ++j) ge[j] += inv * dmean[j];
        }
      }
    }

    prefix.push_back(tgt);
    const double* row = m.emb_row(tgt);
    for (std::size_t j = 0; j < h; ++j) sum_emb[j] += row[j];
  }
  return total;
}

inline double nll_sequence(const StudentModel& m, std::span<const int> context,
                           std::span<const int> target) {
  return nll_sequence_impl(m, context, target, {}, 0.0);
}

inline double nll_sequence_grad(const StudentModel& m, std::span<const int> context,
                                std::span<const int> target, std::span<double> grad,
                                double scale = 1.0) {
  return nll_sequence_impl(m, context, target, grad, scale);
}

// Prompt layouts shared by training and option scoring.
inline std::vector<int> build_context(const Question& q, PromptTag tag, const Vocab& vocab) {
  std::vector<int> ctx;
  ctx.push_back(Vocab::BOS);
  auto qt = tokenize(q.text, vocab);
  ctx.insert(ctx.end(), qt.begin(), qt.end());
  for (const auto& opt : q.options) {
    ctx.push_back(Vocab::OPT);
    auto ot = tokenize(opt, vocab);
    ctx.insert(ctx.end(), ot.begin(), ot.end());
  }
  ctx.push_back(Vocab::SEP);
  ctx.push_back(vocab.tag_token(tag));
  return ctx;
}

// Mean over the batch of the gold-option NLL under the option-prediction
// prompt. Accumulates scaled gradients when grad is non-empty.
inline double loss_pr(const StudentModel& m, std::span<const Question* const> batch,
                      const Vocab& vocab, std::span<double> grad = {}, double scale = 1.0) {
  if (batch.empty()) throw UsageError("loss_pr: empty batch");
  double total = 0.0;
  double per = scale / static_cast<double>(batch.size());
  for (const Question* q : batch) {
    auto ctx = build_context(*q, PromptTag::PredictOption, vocab);
    auto tgt = tokenize(q->options[static_cast<std::size_t>(q->gold_index)], vocab);
    total += grad.empty() ? nll_sequence(m, ctx, tgt) : nll_sequence_grad(m, ctx, tgt, grad, per);
  }
  return total / static_cast<double>(batch.size());
}

// Mean over the batch of the rationale NLL under the rationale prompt.
// rationale_for maps a question to its (purified or per-teacher) token
// sequence.
inline double loss_dl(const StudentModel& m, std::span<const Question* const> batch,
                      const Vocab& vocab,
                      const std::function<const std::vector<int>&(const Question&)>& rationale_for,
                      std::span<double> grad = {}, double scale = 1.0) {
  if (batch.empty()) throw UsageError("loss_dl: empty batch");
  double total = 0.0;
  double per = scale / static_cast<double>(batch.size());
  for (const Question* q : batch) {
    auto ctx = build_context(*q, PromptTag::GenerateRationale, vocab);
    const std::vector<int>& tgt = rationale_for(*q);
    if (tgt.empty()) throw DataError("loss_dl: empty rationale for question \"" + q->id + "\"");
    total += grad.empty() ? nll_sequence(m, ctx, tgt) : nll_sequence_grad(m, ctx, tgt, grad, per);
  }
  return total / static_cast<double>(batch.size());
}

inline double loss_kd(double l_pr, double l_dl, double lambda) {
  if (lambda <= 0.0) throw UsageError("loss_kd: lambda must be positive");
  return l_pr + lambda * l_dl;
}

inline double loss_mtkd(double l_pr, std::span<const double> l_dl_per_teacher,
                        std::span<const double> lambda_per_teacher) {
  if (l_dl_per_teacher.size() != lambda_per_teacher.size()) {
    throw UsageError("loss_mtkd: length mismatch");
  }
  double total = l_pr;
  for (std::size_t j = 0; j < l_dl_per_teacher.size(); ++j) {
    if (lambda_per_teacher[j] <= 0.0) throw UsageError("loss_mtkd: lambda must be positive");
    total += lambda_per_teacher[j] * l_dl_per_teacher[j];
  }
  return total;
}

// Same form as loss_kd, applied to the purified rationale's distillation
// loss.
inline double loss_mtkd_kp(double l_pr, double l_dl_kp, double lambda) {
  return loss_kd(l_pr, l_dl_kp, lambda);
}

// Per-teacher weights used by the incremental-teacher experiments.
inline std::vector<double> default_lambda_schedule(std::size_t n_teachers) {
  double w = 4.0;
  switch (n_teachers) {
    case 1: w = 4.0; break;
    case 2: w = 2.0; break;
    case 3: w = 1.33; break;
    case 4: w = 1.0; break;
    default: w = 4.0 / static_cast<double>(n_teachers); break;
  }
  return std::vector<double>(n_teachers, w);
}

// Length-normalized option scoring under the option-prediction prompt;
// ties resolve to the lowest index.
inline int predict_option(const StudentModel& m, const Question& q, const Vocab& vocab) {
  auto ctx = build_context(q, PromptTag::PredictOption, vocab);
  int best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < q.options.size(); ++i) {
    auto tgt = tokenize(q.options[i], vocab);
    if (tgt.empty()) continue;
    double score = nll_sequence(m, ctx, tgt) / static_cast<double>(tgt.size());
    if (score < best_score - 1e-12) {
      best_score = score;
      best = static_cast<int>(i);
    }
  }
  return best;
}

struct DistillConfig {
  double lambda = 4.0;
  std::vector<double> lambda_per_teacher;  // empty -> default schedule
  double learning_rate = 1e-2;
  int batch_size = 8;
  int epochs = 10;
  std::uint64_t seed = 0;
  int hidden = 64;
};

struct EpochLog {
  int epoch = 0;
  double l_pr = 0.0;
  double l_dl = 0.0;
  double total = 0.0;
  long long wall_ms = 0;
};

inline void write_training_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  for (const auto& e : log) {
    nlohmann::json j{{"epoch", e.epoch}, {"l_pr", e.l_pr}, {"l_dl", e.l_dl},
                     {"total", e.total}, {"wall_ms", e.wall_ms}};
    f << j.dump() << "\n";
  }
}

struct DistillStrategy {
  enum class Kind { SingleTeacher, AllTeachers, Purified };
  Kind kind = Kind::AllTeachers;
  int teacher = 0;  // SingleTeacher
  // Purified: question id -> purified rationale tokens, resolved before
  // training starts.
  const std::unordered_map<std::string, std::vector<int>>* purified = nullptr;

  static DistillStrategy single_teacher(int t) { return {Kind::SingleTeacher, t, nullptr}; }
  static DistillStrategy all_teachers() { return {Kind::AllTeachers, 0, nullptr}; }
  static DistillStrategy purified_map(const std::unordered_map<std::string, std::vector<int>>* map) {
    return {Kind::Purified, 0, map};
  }
};

inline StudentModel train_distill(const Corpus& corpus, const TeacherEnsemble& ensemble,
                                  const Vocab& vocab, const DistillStrategy& strategy,
                                  const DistillConfig& config,
                                  std::vector<EpochLog>* log = nullptr) {
  auto train = corpus.questions_in(Split::Train);
  if (train.empty()) throw DataError("train_distill: empty train split");

  // Pre-tokenize all rationales once.
  std::unordered_map<std::string, std::vector<std::vector<int>>> per_teacher_tokens;
  for (const Question* q : train) {
    std::vector<std::vector<int>> toks;
    for (const auto& tid : ensemble.teacher_ids) {
      const TeacherRationale* r = corpus.find_rationale(q->id, tid);
      if (strategy.kind != DistillStrategy::Kind::Purified) {
        if (!r) throw DataError("train_distill: missing rationale for (\"" + q->id + "\", \"" + tid + "\")");
        toks.push_back(tokenize(r->rationale_text, vocab));
      }
    }
    per_teacher_tokens.emplace(q->id, std::move(toks));
  }

  std::vector<double> lambdas = config.lambda_per_teacher;
  if (lambdas.empty()) lambdas = default_lambda_schedule(ensemble.size());
  if (lambdas.size() != ensemble.size()) throw UsageError("train_distill: lambda_per_teacher length mismatch");

  StudentModel model = student_init(vocab.size(), config.hidden, config.seed);
  AdamW opt(AdamWConfig{.lr = config.learning_rate});
  std::vector<double> grad(model.param_count());
  Rng shuffle_rng(derive_seed(config.seed, "distill-shuffle"));

  std::vector<const Question*> order = train;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double ep_pr = 0.0, ep_dl = 0.0, ep_total = 0.0;
    std::size_t n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const Question* const> batch(order.data() + start, end - start);
      std::fill(grad.begin(), grad.end(), 0.0);

      double pr = loss_pr(model, batch, vocab, grad, 1.0);
      double dl = 0.0, total = 0.0;
      if (strategy.kind == DistillStrategy::Kind::AllTeachers) {
        double dl_sum = 0.0;
        for (std::size_t j = 0; j < ensemble.size(); ++j) {
          auto rationale_for = [&](const Question& q) -> const std::vector<int>& {
            return per_teacher_tokens.at(q.id)[j];
          };
          double dl_j = loss_dl(model, batch, vocab, rationale_for, grad, lambdas[j]);
          dl_sum += dl_j;
          total += lambdas[j] * dl_j;
        }
        dl = dl_sum / static_cast<double>(ensemble.size());
        total += pr;
      } else {
        auto rationale_for = [&](const Question& q) -> const std::vector<int>& {
          if (strategy.kind == DistillStrategy::Kind::SingleTeacher) {
            return per_teacher_tokens.at(q.id)[static_cast<std::size_t>(strategy.teacher)];
          }
          auto it = strategy.purified->find(q.id);
          if (it == strategy.purified->end()) {
            throw DataError("train_distill: no purified rationale for \"" + q.id + "\"");
          }
          return it->second;
        };
        dl = loss_dl(model, batch, vocab, rationale_for, grad, config.lambda);
        total = loss_kd(pr, dl, config.lambda);
      }

      opt.step(model.params, grad);
      ep_pr += pr;
      ep_dl += dl;
      ep_total += total;
      ++n_batches;
    }

    if (log) {
      auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0).count();
      log->push_back({epoch, ep_pr / static_cast<double>(n_batches), ep_dl / static_cast<double>(n_batches),
                      ep_total / static_cast<double>(n_batches), ms});
    }
  }
  return model;
}

inline void save_student(const std::string& path, const StudentModel& m, const Vocab& vocab,
                         std::uint64_t seed) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  nlohmann::json header{{"format", "kpd-student"}, {"version", 1},
                        {"vocab_size", m.vocab_size}, {"hidden", m.hidden},
                        {"vocab_buckets", vocab.buckets}, {"vocab_seed", vocab.seed},
                        {"seed", seed}};
  f << header.dump() << "\n";
  f.write(reinterpret_cast<const char*>(m.params.data()),
          static_cast<std::streamsize>(m.params.size() * sizeof(double)));
}

inline StudentModel load_student(const std::string& path, Vocab* vocab_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  if (header.value("format", "") != "kpd-student") throw DataError(path + ": not a student checkpoint");
  StudentModel m;
  m.vocab_size = header.at("vocab_size").get<int>();
  m.hidden = header.at("hidden").get<int>();
  m.params.resize(m.param_count());
  f.read(reinterpret_cast<char*>(m.params.data()),
         static_cast<std::streamsize>(m.params.size() * sizeof(double)));
  if (!f) throw DataError(path + ": truncated parameter payload");
  if (vocab_out) {
    vocab_out->buckets = header.at("vocab_buckets").get<int>();
    vocab_out->seed = header.at("vocab_seed").get<std::uint64_t>();
  }
  return m;
}

}  // namespace kpd
