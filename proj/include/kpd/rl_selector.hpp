#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/encoder.hpp"
#include "kpd/purify.hpp"
#include "kpd/student.hpp"

namespace kpd {

struct SelectorConfig {
  double learning_rate = 5e-5;  // beta
  int epochs = 2;               // L
  int batch_size = 8;           // b
  std::uint64_t seed = 0;
  // Eq-form policy gradient uses grad(pi); the log-variant switches to the
  // classical grad(log pi) for comparison.
  bool log_gradient = false;
};

struct SelectorParams {
  int n_teachers = 0;
  int state_dim = 0;  // 2d
  std::vector<double> params;  // W (n*state_dim), then b (n)

  std::size_t w_offset() const { return 0; }
  std::size_t b_offset() const { return static_cast<std::size_t>(n_teachers) * state_dim; }
  std::size_t param_count() const { return b_offset() + static_cast<std::size_t>(n_teachers); }
  const double* w_row(int i) const { return params.data() + static_cast<std::size_t>(i) * state_dim; }
  double bias(int i) const { return params[b_offset() + static_cast<std::size_t>(i)]; }
};

inline SelectorParams selector_init(int n_teachers, int embedding_dim) {
  SelectorParams p;
  p.n_teachers = n_teachers;
  p.state_dim = 2 * embedding_dim;
  p.params.assign(p.param_count(), 0.0);
  return p;
}

// State for one (question, teacher): [E(q), E(r) * correct]. An incorrect
// teacher's second half is exactly zero.
inline std::vector<double> build_state(const Embedding& q_emb, const Embedding& rationale_emb,
                                       bool teacher_correct) {
  if (q_emb.dim() != rationale_emb.dim()) {
    throw UsageError("build_state: dimension mismatch");
  }
  std::vector<double> s;
  s.reserve(2 * q_emb.dim());
  s.insert(s.end(), q_emb.values.begin(), q_emb.values.end());
  if (teacher_correct) {
    s.insert(s.end(), rationale_emb.values.begin(), rationale_emb.values.end());
  } else {
    s.insert(s.end(), q_emb.dim(), 0.0);
  }
  return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double selector_score(const SelectorParams& p, int teacher, std::span<const double> state) {
  const double* w = p.w_row(teacher);
  double z = p.bias(teacher);
  for (std::size_t j = 0; j < state.size(); ++j) z += w[j] * state[j];
  return sigmoid(z);
}

// pi(s, a) = a * sigma(Ws + b) + (1 - a) * (1 - sigma(Ws + b)).
inline double policy_prob(const SelectorParams& p, int teacher, std::span<const double> state,
                          int action) {
  double s = selector_score(p, teacher, state);
  return action ? s : 1.0 - s;
}

struct TeacherSelection {
  int teacher = 0;
  std::vector<int> actions;  // one-hot at the selected teacher
};

// argmax_i sigma(W_i s_i + b_i); ties go to the lowest index.
inline TeacherSelection select_teacher(const SelectorParams& p,
                                       std::span<const std::vector<double>> states) {
  if (states.empty()) throw UsageError("select_teacher: no states");
  TeacherSelection sel;
  double best = -1.0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    double s = selector_score(p, static_cast<int>(i), states[i]);
    if (s > best) {
      best = s;
      sel.teacher = static_cast<int>(i);
    }
  }
  sel.actions.assign(states.size(), 0);
  sel.actions[static_cast<std::size_t>(sel.teacher)] = 1;
  return sel;
}

struct EpisodeEntry {
  std::vector<std::vector<double>> states;  // one per teacher
  std::vector<int> actions;                 // exactly one 1
  int minibatch = 0;
};

using EpisodeHistory = std::vector<EpisodeEntry>;

// theta <- theta + beta * sum r * grad(pi(s_i, a_i)). Rewards are per
// minibatch. The literal form uses grad(pi); the log variant uses
// grad(log pi).
inline void reinforce_update(SelectorParams& p, const EpisodeHistory& history,
                             std::span<const double> minibatch_rewards, double beta,
                             bool log_gradient = false) {
  std::vector<double> delta(p.param_count(), 0.0);
  for (const auto& entry : history) {
    double r = minibatch_rewards[static_cast<std::size_t>(entry.minibatch)];
    if (!std::isfinite(r)) throw UsageError("reinforce_update: non-finite reward");
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < entry.states.size(); ++i) {
      const auto& state = entry.states[i];
      const double* w = p.w_row(static_cast<int>(i));
      double z = p.bias(static_cast<int>(i));
      for (std::size_t j = 0; j < state.size(); ++j) z += w[j] * state[j];
      double sig = sigmoid(z);
      int a = entry.actions[i];
      // d pi / d z = sigma' for a=1, -sigma' for a=0.
      double dpi_dz = sig * (1.0 - sig) * (a ? 1.0 : -1.0);
      double g = dpi_dz;
      if (log_gradient) {
        double pi = a ? sig : 1.0 - sig;
        g = dpi_dz / std::max(pi, 1e-12);
      }
      double coeff = r * g;
      double* dw = delta.data() + i * static_cast<std::size_t>(p.state_dim);
      for (std::size_t j = 0; j < state.size(); ++j) dw[j] += coeff * state[j];
      delta[p.b_offset() + i] += coeff;
    }
  }
  for (std::size_t k = 0; k < p.params.size(); ++k) {
    if (!std::isfinite(delta[k])) throw UsageError("reinforce_update: non-finite gradient");
    p.params[k] += beta * delta[k];
  }
}

// Alternating training: per mini-batch, select a teacher per question and
// distill the student on the selected rationale; at epoch end, reward each
// history entry with r = -L_PR - L_DL evaluated on its mini-batch under
// the current student, then update the selector. History clears per epoch.
inline std::pair<StudentModel, SelectorParams> train_alternating(
    const Corpus& corpus, const TeacherEnsemble& ensemble, const Vocab& vocab,
    const EmbeddingProvider& provider, const DistillConfig& student_config,
    const SelectorConfig& selector_config, std::vector<EpochLog>* log = nullptr) {
  auto train = corpus.questions_in(Split::Train);
  if (train.empty()) throw DataError("train_alternating: empty train split");

  // States and rationale tokens are fixed per question; cache them.
  struct Prepared {
    std::vector<std::vector<double>> states;
    std::vector<std::vector<int>> rationale_tokens;
  };
  std::unordered_map<std::string, Prepared> prep;
  for (const Question* q : train) {
    Prepared pq;
    Embedding q_emb = provider.question(*q);
    for (const auto& tid : ensemble.teacher_ids) {
      const TeacherRationale* r = corpus.find_rationale(q->id, tid);
      if (!r) throw DataError("train_alternating: missing rationale for (\"" + q->id + "\", \"" + tid + "\")");
      pq.states.push_back(build_state(q_emb, provider.rationale(*r), r->predicted_index == q->gold_index));
      pq.rationale_tokens.push_back(tokenize(r->rationale_text, vocab));
    }
    prep.emplace(q->id, std::move(pq));
  }

  StudentModel student = student_init(vocab.size(), student_config.hidden, student_config.seed);
  SelectorParams selector = selector_init(static_cast<int>(ensemble.size()), provider.dim());
  AdamW opt(AdamWConfig{.lr = student_config.learning_rate});
  std::vector<double> grad(student.param_count());
  Rng shuffle_rng(derive_seed(selector_config.seed, "rl-shuffle"));

  std::vector<const Question*> order = train;
  const std::size_t bs = static_cast<std::size_t>(selector_config.batch_size);

  for (int epoch = 0; epoch < selector_config.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    EpisodeHistory history;
    std::vector<std::vector<const Question*>> minibatches;
    std::unordered_map<std::string, int> selected_for;  // question -> teacher

    double ep_pr = 0.0, ep_dl = 0.0;
    int mb_id = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++mb_id) {
      std::size_t end = std::min(order.size(), start + bs);
      std::vector<const Question*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));

      for (const Question* q : batch) {
        const auto& pq = prep.at(q->id);
        auto sel = select_teacher(selector, pq.states);
        selected_for[q->id] = sel.teacher;
        history.push_back({pq.states, sel.actions, mb_id});
      }

      // Student step on the purified (selected) rationales, Eq-5 form.
      std::fill(grad.begin(), grad.end(), 0.0);
      std::span<const Question* const> bspan(batch.data(), batch.size());
      double pr = loss_pr(student, bspan, vocab, grad, 1.0);
      auto rationale_for = [&](const Question& q) -> const std::vector<int>& {
        return prep.at(q.id).rationale_tokens[static_cast<std::size_t>(selected_for.at(q.id))];
      };
      double dl = loss_dl(student, bspan, vocab, rationale_for, grad, student_config.lambda);
      opt.step(student.params, grad);
      ep_pr += pr;
      ep_dl += dl;
      minibatches.push_back(std::move(batch));
    }

    // Epoch-end rewards under the current student.
    std::vector<double> rewards(minibatches.size());
    for (std::size_t m = 0; m < minibatches.size(); ++m) {
      std::span<const Question* const> bspan(minibatches[m].data(), minibatches[m].size());
      double pr = loss_pr(student, bspan, vocab);
      auto rationale_for = [&](const Question& q) -> const std::vector<int>& {
        return prep.at(q.id).rationale_tokens[static_cast<std::size_t>(selected_for.at(q.id))];
      };
      double dl = loss_dl(student, bspan, vocab, rationale_for);
      rewards[m] = -pr - dl;
    }
    reinforce_update(selector, history, rewards, selector_config.learning_rate,
                     selector_config.log_gradient);

    if (log) {
      auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0).count();
      double nb = static_cast<double>(minibatches.size());
      log->push_back({epoch, ep_pr / nb, ep_dl / nb,
                      (ep_pr + student_config.lambda * ep_dl) / nb, ms});
    }
  }
  return {std::move(student), std::move(selector)};
}

// Selector checkpoints are only meaningful next to the student they were
// trained with; the header records that pairing.
inline void save_selector(const std::string& path, const SelectorParams& p,
                          const std::string& paired_student_id) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  nlohmann::json header{{"format", "kpd-selector"}, {"version", 1}, {"n", p.n_teachers},
                        {"state_dim", p.state_dim}, {"paired_student", paired_student_id}};
  f << header.dump() << "\n";
  f.write(reinterpret_cast<const char*>(p.params.data()),
          static_cast<std::streamsize>(p.params.size() * sizeof(double)));
}

inline SelectorParams load_selector(const std::string& path, std::string* paired_student_id = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  if (header.value("format", "") != "kpd-selector") throw DataError(path + ": not a selector checkpoint");
  SelectorParams p;
  p.n_teachers = header.at("n").get<int>();
  p.state_dim = header.at("state_dim").get<int>();
  p.params.resize(p.param_count());
  f.read(reinterpret_cast<char*>(p.params.data()),
         static_cast<std::streamsize>(p.params.size() * sizeof(double)));
  if (!f) throw DataError(path + ": truncated parameter payload");
  if (paired_student_id) *paired_student_id = header.value("paired_student", "");
  return p;
}

// Selection needs rationales (the state embeds them), so this purifier is
// not transferable to route-only use; the CLI enforces that rule.
class SelectorPurifier final : public Purifier {
 public:
  SelectorPurifier(SelectorParams params, const EmbeddingProvider* provider)
      : params_(std::move(params)), provider_(provider) {}

  std::string name() const override { return "rl"; }

  RoutingDistribution route(const Question& q,
                            std::span<const TeacherRationale* const> rationales) const override {
    if (rationales.size() != static_cast<std::size_t>(params_.n_teachers)) {
      throw UsageError("selector route: rationale count mismatch");
    }
    Embedding q_emb = provider_->question(q);
    std::vector<double> scores(rationales.size());
    for (std::size_t i = 0; i < rationales.size(); ++i) {
      auto state = build_state(q_emb, provider_->rationale(*rationales[i]),
                               rationales[i]->predicted_index == q.gold_index);
      scores[i] = selector_score(params_, static_cast<int>(i), state);
    }
    // Scores are per-teacher sigmoids, not a distribution; normalize for
    // the common routing interface (argmax is unchanged).
    double sum = 0.0;
    for (double s : scores) sum += s;
    RoutingDistribution d;
    d.probs.resize(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
      d.probs[i] = sum > 0.0 ? scores[i] / sum : 1.0 / static_cast<double>(scores.size());
    }
    return d;
  }

  const SelectorParams& params() const { return params_; }

 private:
  SelectorParams params_;
  const EmbeddingProvider* provider_;
};

}  // namespace kpd
