#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <unistd.h>

#include "kpd/optim.hpp"
#include "kpd/student.hpp"
#include "synthetic.hpp"

namespace {

std::string temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("kpd_student_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

kpd::StudentModel zero_model(int vocab, int hidden) {
  kpd::StudentModel m;
  m.vocab_size = vocab;
  m.hidden = hidden;
  m.params.assign(m.param_count(), 0.0);
  return m;
}

// Central-difference check over a sample of parameter coordinates.
double max_rel_grad_error(kpd::StudentModel& m, std::span<const int> ctx,
                          std::span<const int> tgt, int n_coords, std::uint64_t seed) {
  std::vector<double> grad(m.param_count(), 0.0);
  kpd::nll_sequence_grad(m, ctx, tgt, grad);
  kpd::Rng rng(seed);
  double worst = 0.0;
  const double h = 1e-6;
  for (int k = 0; k < n_coords; ++k) {
    std::size_t i = rng.next_index(m.params.size());
    double orig = m.params[i];
    m.params[i] = orig + h;
    double up = kpd::nll_sequence(m, ctx, tgt);
    m.params[i] = orig - h;
    double down = kpd::nll_sequence(m, ctx, tgt);
    m.params[i] = orig;
    double numeric = (up - down) / (2.0 * h);
    double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  return worst;
}

}  // namespace

TEST_CASE("uniform model: NLL is length times log vocab") {
  auto m4 = zero_model(4, 8);
  std::vector<int> ctx{0, 1};
  std::vector<int> tgt{1, 2, 3};
  CHECK(kpd::nll_sequence(m4, ctx, tgt) == doctest::Approx(3.0 * std::log(4.0)).epsilon(1e-9));

  auto m2 = zero_model(2, 4);
  std::vector<int> tgt2{0, 1};
  std::vector<int> ctx2{0};
  CHECK(kpd::nll_sequence(m2, ctx2, tgt2) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("next-token probabilities sum to one") {
  kpd::StudentModel m = kpd::student_init(50, 8, 3);
  std::vector<int> prefix{1, 7, 21, 3};
  auto p = kpd::next_token_probs(m, prefix);
  double sum = 0.0;
  for (double v : p) {
    CHECK(v >= 0.0);
    sum += v;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences") {
  kpd::StudentModel m = kpd::student_init(64, 8, 11);
  std::vector<int> ctx{1, 5, 9, 33};
  std::vector<int> tgt{2, 60, 17};
  CHECK(max_rel_grad_error(m, ctx, tgt, 200, 5) <= 1e-4);

  // Empty context (first token predicted from the zero mean).
  std::vector<int> no_ctx;
  CHECK(max_rel_grad_error(m, no_ctx, tgt, 100, 6) <= 1e-4);
}

TEST_CASE("gradient scale parameter is linear") {
  kpd::StudentModel m = kpd::student_init(16, 4, 2);
  std::vector<int> ctx{1};
  std::vector<int> tgt{3, 5};
  std::vector<double> g1(m.param_count(), 0.0), g2(m.param_count(), 0.0);
  kpd::nll_sequence_grad(m, ctx, tgt, g1, 1.0);
  kpd::nll_sequence_grad(m, ctx, tgt, g2, 2.5);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    CHECK(g2[i] == doctest::Approx(2.5 * g1[i]).epsilon(1e-12));
  }
}

TEST_CASE("loss combinators") {
  CHECK(kpd::loss_kd(1.0, 0.5, 4.0) == doctest::Approx(3.0));
  CHECK_THROWS_AS(kpd::loss_kd(1.0, 0.5, 0.0), kpd::UsageError);

  // n=1 reduction: multi-teacher sum with one teacher equals plain KD.
  std::vector<double> dl{0.5};
  auto sched = kpd::default_lambda_schedule(1);
  CHECK(kpd::loss_mtkd(1.0, dl, sched) == doctest::Approx(kpd::loss_kd(1.0, 0.5, sched[0])));
  CHECK(kpd::loss_mtkd_kp(1.0, 0.5, 4.0) == doctest::Approx(kpd::loss_kd(1.0, 0.5, 4.0)));

  CHECK(kpd::default_lambda_schedule(1) == std::vector<double>{4.0});
  CHECK(kpd::default_lambda_schedule(2) == std::vector<double>(2, 2.0));
  CHECK(kpd::default_lambda_schedule(3) == std::vector<double>(3, 1.33));
  CHECK(kpd::default_lambda_schedule(4) == std::vector<double>(4, 1.0));
  CHECK(kpd::default_lambda_schedule(8) == std::vector<double>(8, 0.5));

  std::vector<double> mismatched{0.5, 0.6};
  CHECK_THROWS_AS(kpd::loss_mtkd(1.0, mismatched, sched), kpd::UsageError);
}

TEST_CASE("uniform model distillation loss on real prompts") {
  kpd::Vocab vocab;
  auto m = zero_model(vocab.size(), 8);
  kpd::Question q{"q", "d", "why is the sky blue", {"scattering", "mirrors"}, 0, std::nullopt};
  const kpd::Question* qp = &q;
  std::vector<int> rat = kpd::tokenize("light scatters more at short wavelengths", vocab);
  auto rationale_for = [&](const kpd::Question&) -> const std::vector<int>& { return rat; };
  double dl = kpd::loss_dl(m, std::span<const kpd::Question* const>(&qp, 1), vocab, rationale_for);
  CHECK(dl == doctest::Approx(static_cast<double>(rat.size()) * std::log(vocab.size()))
                  .epsilon(1e-9));

  std::vector<int> empty;
  auto empty_for = [&](const kpd::Question&) -> const std::vector<int>& { return empty; };
  CHECK_THROWS_AS(
      kpd::loss_dl(m, std::span<const kpd::Question* const>(&qp, 1), vocab, empty_for),
      kpd::DataError);
}

TEST_CASE("prompt layout") {
  kpd::Vocab vocab;
  kpd::Question q{"q", "d", "alpha", {"beta", "gamma delta"}, 0, std::nullopt};
  auto ctx = kpd::build_context(q, kpd::PromptTag::PredictOption, vocab);
  // BOS alpha OPT beta OPT gamma delta SEP TAG
  REQUIRE(ctx.size() == 9);
  CHECK(ctx[0] == kpd::Vocab::BOS);
  CHECK(ctx[2] == kpd::Vocab::OPT);
  CHECK(ctx[4] == kpd::Vocab::OPT);
  CHECK(ctx[7] == kpd::Vocab::SEP);
  CHECK(ctx[8] == kpd::Vocab::TAG_PREDICT);
  auto ctx2 = kpd::build_context(q, kpd::PromptTag::GenerateRationale, vocab);
  CHECK(ctx2.back() == kpd::Vocab::TAG_RATIONALE);
}

TEST_CASE("predict_option: ties resolve to the lowest index") {
  kpd::Vocab vocab;
  auto m = zero_model(vocab.size(), 8);
  kpd::Question q{"q", "d", "pick", {"aa", "bb", "cc"}, 0, std::nullopt};
  // Uniform model scores every option identically (length-normalized).
  CHECK(kpd::predict_option(m, q, vocab) == 0);
}

TEST_CASE("AdamW converges on a quadratic") {
  std::vector<double> x{5.0, -3.0, 0.5};
  const std::vector<double> target{1.0, 2.0, -4.0};
  kpd::AdamW opt(kpd::AdamWConfig{.lr = 0.1});
  std::vector<double> g(3);
  for (int step = 0; step < 2000; ++step) {
    for (int i = 0; i < 3; ++i) g[i] = 2.0 * (x[i] - target[i]);
    opt.step(x, g);
  }
  for (int i = 0; i < 3; ++i) CHECK(x[i] == doctest::Approx(target[i]).epsilon(1e-4));

  std::vector<double> bad{std::nan("")};
  std::vector<double> p{0.0};
  CHECK_THROWS_AS(opt.step(p, bad), kpd::UsageError);
}

TEST_CASE("distillation training runs and reduces the objective") {
  auto corpus = synth::make_cluster_corpus(5, {3, 20, 4, 4, 10, 4});
  kpd::Vocab vocab;
  vocab.buckets = 256;
  kpd::tokenize_corpus(corpus, vocab);
  kpd::TeacherEnsemble ensemble{{"t0", "t1", "t2"}};
  kpd::DistillConfig cfg;
  cfg.epochs = 8;
  cfg.hidden = 16;
  cfg.seed = 1;
  std::vector<kpd::EpochLog> log;
  auto model = kpd::train_distill(corpus, ensemble, vocab, kpd::DistillStrategy::all_teachers(),
                                  cfg, &log);
  REQUIRE(log.size() == 8);
  CHECK(log.back().total < log.front().total);
  CHECK(model.vocab_size == vocab.size());

  // Determinism: identical seed, bitwise-identical parameters.
  auto again = kpd::train_distill(corpus, ensemble, vocab, kpd::DistillStrategy::all_teachers(),
                                  cfg);
  CHECK(model.params == again.params);
}

TEST_CASE("student checkpoint round trip is bitwise") {
  kpd::Vocab vocab;
  vocab.buckets = 128;
  auto m = kpd::student_init(vocab.size(), 8, 17);
  auto path = temp_file("student.bin");
  kpd::save_student(path, m, vocab, 17);
  kpd::Vocab vocab2;
  auto back = kpd::load_student(path, &vocab2);
  CHECK(back.params == m.params);
  CHECK(back.vocab_size == m.vocab_size);
  CHECK(vocab2.buckets == 128);
  CHECK_THROWS_AS(kpd::load_student(temp_file("nope.bin")), kpd::DataError);
}
