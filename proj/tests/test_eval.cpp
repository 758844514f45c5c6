#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "kpd/eval.hpp"
#include "synthetic.hpp"

namespace {

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() /
          (stem + "_" + std::to_string(::getpid())))
      .string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

// A uniform next-token model: every option ties, prediction falls to 0.
kpd::StudentModel zero_student(int vocab_size, int hidden = 8) {
  kpd::StudentModel m = kpd::student_init(vocab_size, hidden, 0);
  std::fill(m.params.begin(), m.params.end(), 0.0);
  return m;
}

kpd::Question simple_question(const std::string& id, int gold) {
  kpd::Question q;
  q.id = id;
  q.dataset_id = "d";
  q.text = "pick one";
  q.options = {"alpha", "beta", "gamma", "delta"};
  q.gold_index = gold;
  return q;
}

// Always routes everything to teacher `t` out of `n`.
struct ConstantPurifier : kpd::Purifier {
  int n, t;
  ConstantPurifier(int n_, int t_) : n(n_), t(t_) {}
  std::string name() const override { return "const"; }
  kpd::RoutingDistribution route(const kpd::Question&,
                                 std::span<const kpd::TeacherRationale* const>) const override {
    kpd::RoutingDistribution d;
    d.probs.assign(static_cast<std::size_t>(n), 0.0);
    d.probs[static_cast<std::size_t>(t)] = 1.0;
    return d;
  }
};

}  // namespace

TEST_CASE("accuracy closed cases under a uniform model") {
  kpd::Vocab vocab;
  vocab.buckets = 256;
  auto m = zero_student(vocab.size());

  // Uniform model ties every option; prediction is index 0.
  std::vector<kpd::Question> qs;
  for (int i = 0; i < 10; ++i) qs.push_back(simple_question("q" + std::to_string(i), 0));
  std::vector<const kpd::Question*> ps;
  for (const auto& q : qs) ps.push_back(&q);
  auto span = std::span<const kpd::Question* const>(ps.data(), ps.size());
  CHECK(kpd::accuracy(m, span, vocab) == doctest::Approx(1.0));

  for (int i = 0; i < 5; ++i) qs[static_cast<std::size_t>(i)].gold_index = 1;
  CHECK(kpd::accuracy(m, span, vocab) == doctest::Approx(0.5));

  CHECK_THROWS_AS(kpd::accuracy(m, std::span<const kpd::Question* const>{}, vocab),
                  kpd::UsageError);
}

TEST_CASE("uniform student scores near chance on random gold indices") {
  auto corpus = synth::make_cluster_corpus(11, {3, 10, 5, 67, 10, 3});
  kpd::Vocab vocab;
  vocab.buckets = 256;
  kpd::tokenize_corpus(corpus, vocab);
  auto m = zero_student(vocab.size());
  auto test = corpus.questions_in(kpd::Split::Test);
  REQUIRE(test.size() == 201);
  double acc =
      kpd::accuracy(m, std::span<const kpd::Question* const>(test.data(), test.size()), vocab);
  CHECK(acc > 0.15);
  CHECK(acc < 0.35);

  // Question order does not change the result.
  std::vector<const kpd::Question*> reversed(test.rbegin(), test.rend());
  CHECK(kpd::accuracy(m, std::span<const kpd::Question* const>(reversed.data(), reversed.size()),
                      vocab) == doctest::Approx(acc));
}

TEST_CASE("mean accuracy improvement closed cases") {
  std::vector<double> same{0.5, 0.6, 0.7};
  CHECK(kpd::compute_cmv(same, same) == doctest::Approx(0.0));

  std::vector<double> kp{0.50, 0.52, 0.54};
  std::vector<double> base{0.50, 0.50, 0.50};
  CHECK(kpd::compute_cmv(kp, base) == doctest::Approx(0.02).epsilon(1e-12));
  CHECK(kpd::compute_cmv(base, kp) == doctest::Approx(-0.02).epsilon(1e-12));

  std::vector<double> shorter{0.5};
  CHECK_THROWS_AS(kpd::compute_cmv(kp, shorter), kpd::UsageError);
  CHECK_THROWS_AS(kpd::compute_cmv(std::span<const double>{}, std::span<const double>{}),
                  kpd::UsageError);
  std::vector<double> oor{1.5, 0.5, 0.5};
  CHECK_THROWS_AS(kpd::compute_cmv(oor, base), kpd::UsageError);
}

TEST_CASE("reference accuracy fixture reproduces the expected improvement signs") {
  std::ifstream f("fixtures/reference_accuracy.json");
  REQUIRE(f.good());
  nlohmann::json j;
  f >> j;

  const auto& students = j.at("students");
  for (const auto& [method, series] : j.at("methods").items()) {
    int expected = j.at("expected_cmv_sign").at(method).get<int>();
    for (const auto& student : students) {
      auto kp = series.at(student.get<std::string>()).get<std::vector<double>>();
      auto base = j.at("baseline").at(student.get<std::string>()).get<std::vector<double>>();
      double cmv = kpd::compute_cmv(kp, base);
      INFO(method, " / ", student.get<std::string>(), " cmv=", cmv);
      if (expected > 0) {
        CHECK(cmv > 0.0);
      } else {
        CHECK(cmv < 0.0);
      }
    }
  }
}

TEST_CASE("report emission is stable and round trips") {
  kpd::EvalReport report;
  report.run_id = "r1";
  report.config_hash = "abc123";
  report.rationales_consumed = 30;
  report.rationales_baseline = 90;
  report.rows = {{"r1", "sim", 64, 3, "ds0", 0.81234, 0.0213, 12, 345, 7},
                 {"r1", "sim", 64, 3, "average", 0.79999, 0.0213, 12, 345, 7},
                 {"r1", "baseline", 64, 3, "average", 0.7786, 0.0, 0, 340, 7}};

  auto csv = temp_path("kpd_report") + ".csv";
  auto csv2 = temp_path("kpd_report2") + ".csv";
  kpd::emit_report(report, kpd::ReportFormat::Csv, csv);
  kpd::emit_report(report, kpd::ReportFormat::Csv, csv2);
  auto text = slurp(csv);
  CHECK(text == slurp(csv2));
  CHECK(text.rfind("run_id,method,student_dim,n_teachers,dataset,acc,cmv,purify_ms,distill_ms,seed\n",
                   0) == 0);
  CHECK(text.find("r1,sim,64,3,ds0,0.8123,0.0213,12,345,7") != std::string::npos);

  auto json_path = temp_path("kpd_report") + ".json";
  kpd::emit_report(report, kpd::ReportFormat::Json, json_path);
  auto back = kpd::load_report_json(json_path);
  CHECK(back.run_id == report.run_id);
  CHECK(back.config_hash == report.config_hash);
  CHECK(back.rationales_consumed == 30);
  CHECK(back.rationales_baseline == 90);
  REQUIRE(back.rows.size() == report.rows.size());
  for (std::size_t i = 0; i < back.rows.size(); ++i) {
    CHECK(back.rows[i].method == report.rows[i].method);
    CHECK(back.rows[i].dataset == report.rows[i].dataset);
    CHECK(back.rows[i].n_teachers == report.rows[i].n_teachers);
    CHECK(back.rows[i].acc == doctest::Approx(report.rows[i].acc).epsilon(1e-4));
    CHECK(back.rows[i].cmv == doctest::Approx(report.rows[i].cmv).epsilon(1e-4));
    CHECK(back.rows[i].seed == report.rows[i].seed);
  }

  auto plot = temp_path("kpd_plot") + ".csv";
  kpd::emit_plot_data(report, plot);
  auto plot_text = slurp(plot);
  CHECK(plot_text.rfind("method,n_teachers,acc\n", 0) == 0);
  CHECK(plot_text.find("sim,3,0.8000") != std::string::npos);
  CHECK(plot_text.find("ds0") == std::string::npos);  // only cross-dataset means

  std::filesystem::remove(csv);
  std::filesystem::remove(csv2);
  std::filesystem::remove(json_path);
  std::filesystem::remove(plot);
}

TEST_CASE("per-dataset accuracy appends the cross-dataset mean") {
  auto corpus = synth::make_cluster_corpus(13, {3, 6, 3, 10, 10, 3});
  kpd::Vocab vocab;
  vocab.buckets = 256;
  kpd::tokenize_corpus(corpus, vocab);
  auto m = zero_student(vocab.size());
  auto rows = kpd::per_dataset_accuracy(m, corpus, vocab, kpd::Split::Test);
  REQUIRE(rows.size() == 4);  // ds0, ds1, ds2, average
  CHECK(rows.back().first == "average");
  double mean = (rows[0].second + rows[1].second + rows[2].second) / 3.0;
  CHECK(rows.back().second == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("constant routing in a sweep equals single-teacher distillation") {
  auto corpus = synth::make_cluster_corpus(15, {3, 8, 4, 5, 10, 3});
  kpd::Vocab vocab;
  vocab.buckets = 256;
  kpd::tokenize_corpus(corpus, vocab);
  kpd::TeacherEnsemble ensemble{{"t0", "t1", "t2"}};

  kpd::DistillConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 3;
  cfg.seed = 5;

  auto factory = [](const kpd::TeacherEnsemble& prefix) -> std::unique_ptr<kpd::Purifier> {
    return std::make_unique<ConstantPurifier>(static_cast<int>(prefix.size()), 0);
  };
  auto sweep = kpd::teacher_sweep(corpus, ensemble, factory, "const", cfg, vocab);

  REQUIRE(sweep.method_avg_acc.size() == 3);
  REQUIRE(sweep.baseline_avg_acc.size() == 3);
  // Routing everything to teacher 0 distills on exactly the data that
  // single-teacher distillation uses.
  auto single = kpd::train_distill(corpus, ensemble, vocab,
                                   kpd::DistillStrategy::single_teacher(0), cfg);
  auto acc = kpd::per_dataset_accuracy(single, corpus, vocab, kpd::Split::Test);
  CHECK(sweep.method_avg_acc.back() == doctest::Approx(acc.back().second).epsilon(1e-12));

  // Improvement column is the same value on every method row.
  for (const auto& row : sweep.report.rows) {
    if (row.method == "const") CHECK(row.cmv == doctest::Approx(sweep.cmv));
    if (row.method == "baseline") CHECK(row.cmv == 0.0);
  }

  kpd::TeacherEnsemble one{{"t0"}};
  CHECK_THROWS_AS(kpd::teacher_sweep(corpus, one, factory, "const", cfg, vocab),
                  kpd::UsageError);
}

TEST_CASE("router-guided pipeline consumes exactly one rationale per question") {
  auto corpus = synth::make_cluster_corpus(17, {3, 8, 4, 5, 10, 3});
  kpd::Vocab vocab;
  vocab.buckets = 256;
  kpd::tokenize_corpus(corpus, vocab);
  kpd::TeacherEnsemble ensemble{{"t0", "t1", "t2"}};

  kpd::DistillConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 2;
  cfg.seed = 1;

  ConstantPurifier router(3, 1);
  auto report = kpd::ood_pipeline(router, corpus, ensemble, cfg, vocab, "ood-run");
  CHECK(report.rationales_consumed == 24);       // 3 clusters x 8 train questions
  CHECK(report.rationales_baseline == 24 * 3);   // all-rationale demand
  CHECK(report.run_id == "ood-run");
  bool has_average = false;
  for (const auto& row : report.rows) {
    CHECK(row.method == "const");
    CHECK(row.n_teachers == 3);
    has_average = has_average || row.dataset == "average";
  }
  CHECK(has_average);
}
