#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"
#include "kpd/purify.hpp"
#include "kpd/student.hpp"

namespace kpd {

inline double accuracy(const StudentModel& student, std::span<const Question* const> questions,
                       const Vocab& vocab) {
  if (questions.empty()) throw UsageError("accuracy: empty question list");
  std::size_t correct = 0;
  for (const Question* q : questions) {
    if (predict_option(student, *q, vocab) == q->gold_index) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(questions.size());
}

// Mean accuracy improvement of a purification method over the all-rationale
// baseline across incremental ensemble sizes |T| = 2..n.
inline double compute_cmv(std::span<const double> acc_kp, std::span<const double> acc_baseline) {
  if (acc_kp.size() != acc_baseline.size()) throw UsageError("compute_cmv: length mismatch");
  if (acc_kp.empty()) throw UsageError("compute_cmv: empty series");
  double sum = 0.0;
  for (std::size_t i = 0; i < acc_kp.size(); ++i) {
    if (acc_kp[i] < 0.0 || acc_kp[i] > 1.0 || acc_baseline[i] < 0.0 || acc_baseline[i] > 1.0) {
      throw UsageError("compute_cmv: accuracies must lie in [0, 1]");
    }
    sum += acc_kp[i] - acc_baseline[i];
  }
  return sum / static_cast<double>(acc_kp.size());
}

struct EvalRow {
  std::string run_id;
  std::string method;
  int student_dim = 0;
  int n_teachers = 0;
  std::string dataset;  // "average" for the cross-dataset mean
  double acc = 0.0;
  double cmv = 0.0;
  long long purify_ms = 0;
  long long distill_ms = 0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::string run_id;
  std::string config_hash;
  std::vector<EvalRow> rows;
  // Router-guided OOD accounting: rationales consumed vs the all-rationale
  // demand of n per question.
  long long rationales_consumed = 0;
  long long rationales_baseline = 0;
};

namespace detail {

inline std::string fmt4(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

}  // namespace detail

enum class ReportFormat { Csv, Json };

inline void emit_report(const EvalReport& report, ReportFormat format, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  if (format == ReportFormat::Csv) {
    f << "run_id,method,student_dim,n_teachers,dataset,acc,cmv,purify_ms,distill_ms,seed\n";
    for (const auto& r : report.rows) {
      f << r.run_id << ',' << r.method << ',' << r.student_dim << ',' << r.n_teachers << ','
        << r.dataset << ',' << detail::fmt4(r.acc) << ',' << detail::fmt4(r.cmv) << ','
        << r.purify_ms << ',' << r.distill_ms << ',' << r.seed << "\n";
    }
  } else {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
      rows.push_back({{"run_id", r.run_id}, {"method", r.method}, {"student_dim", r.student_dim},
                      {"n_teachers", r.n_teachers}, {"dataset", r.dataset},
                      {"acc", std::stod(detail::fmt4(r.acc))}, {"cmv", std::stod(detail::fmt4(r.cmv))},
                      {"purify_ms", r.purify_ms}, {"distill_ms", r.distill_ms}, {"seed", r.seed}});
    }
    nlohmann::json j{{"run_id", report.run_id}, {"config_hash", report.config_hash},
                     {"rationales_consumed", report.rationales_consumed},
                     {"rationales_baseline", report.rationales_baseline}, {"rows", rows}};
    f << j.dump(2) << "\n";
  }
}

// (|T|, acc) series per method, for external plotting.
inline void emit_plot_data(const EvalReport& report, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "method,n_teachers,acc\n";
  for (const auto& r : report.rows) {
    if (r.dataset != "average") continue;
    f << r.method << ',' << r.n_teachers << ',' << detail::fmt4(r.acc) << "\n";
  }
}

inline EvalReport load_report_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  nlohmann::json j;
  f >> j;
  EvalReport report;
  report.run_id = j.value("run_id", "");
  report.config_hash = j.value("config_hash", "");
  report.rationales_consumed = j.value("rationales_consumed", 0LL);
  report.rationales_baseline = j.value("rationales_baseline", 0LL);
  for (const auto& r : j.at("rows")) {
    EvalRow row;
    row.run_id = r.value("run_id", "");
    row.method = r.value("method", "");
    row.student_dim = r.value("student_dim", 0);
    row.n_teachers = r.value("n_teachers", 0);
    row.dataset = r.value("dataset", "");
    row.acc = r.value("acc", 0.0);
    row.cmv = r.value("cmv", 0.0);
    row.purify_ms = r.value("purify_ms", 0LL);
    row.distill_ms = r.value("distill_ms", 0LL);
    row.seed = r.value("seed", std::uint64_t{0});
    report.rows.push_back(std::move(row));
  }
  return report;
}

// Per-dataset accuracy on a split plus the cross-dataset mean.
inline std::vector<std::pair<std::string, double>> per_dataset_accuracy(
    const StudentModel& student, const Corpus& corpus, const Vocab& vocab, Split split) {
  std::map<std::string, std::vector<const Question*>> by_dataset;
  for (const Question* q : corpus.questions_in(split)) by_dataset[q->dataset_id].push_back(q);
  if (by_dataset.empty()) throw UsageError("per_dataset_accuracy: empty split");
  std::vector<std::pair<std::string, double>> out;
  double sum = 0.0;
  for (const auto& [ds, qs] : by_dataset) {
    double a = accuracy(student, std::span<const Question* const>(qs.data(), qs.size()), vocab);
    out.emplace_back(ds, a);
    sum += a;
  }
  out.emplace_back("average", sum / static_cast<double>(by_dataset.size()));
  return out;
}

// Builds the purified-rationale map used by Purified distillation.
inline std::unordered_map<std::string, std::vector<int>> purified_rationales(
    const Corpus& corpus, const TeacherEnsemble& ensemble, const Purifier& method,
    const Vocab& vocab, Split split = Split::Train, std::vector<RoutingDecision>* decisions = nullptr) {
  std::unordered_map<std::string, std::vector<int>> out;
  for (const Question* q : corpus.questions_in(split)) {
    auto rationales = gather_rationales(corpus, *q, ensemble);
    std::span<const TeacherRationale* const> rspan(rationales.data(), rationales.size());
    PurifiedRationale p = method.purify(*q, rspan, vocab);
    if (decisions && p.source == PurifiedRationale::Source::Routed) {
      RoutingDistribution dist = method.route(*q, rspan);
      decisions->push_back({q->id, method.name(), dist.probs, p.teacher});
    }
    out.emplace(q->id, std::move(p.tokens));
  }
  return out;
}

// Builds a purification method for a teacher prefix; the sweep retrains
// the method for each |T|.
using PurifierFactory = std::function<std::unique_ptr<Purifier>(const TeacherEnsemble& prefix)>;

struct SweepResult {
  EvalReport report;
  std::vector<double> method_avg_acc;    // |T| = 1..n
  std::vector<double> baseline_avg_acc;  // |T| = 1..n
  double cmv = 0.0;
};

// One distillation + evaluation per teacher prefix for the chosen method
// and the all-rationale baseline, plus the CMV over |T| = 2..n.
inline SweepResult teacher_sweep(const Corpus& corpus, const TeacherEnsemble& ensemble,
                                 const PurifierFactory& make_purifier, const std::string& method_name,
                                 const DistillConfig& config, const Vocab& vocab,
                                 const std::string& run_id = "sweep") {
  if (ensemble.size() < 2) throw UsageError("teacher_sweep: need at least 2 teachers");
  SweepResult result;
  result.report.run_id = run_id;

  for (std::size_t n = 1; n <= ensemble.size(); ++n) {
    TeacherEnsemble prefix = ensemble.prefix(n);

    // All-rationale baseline.
    DistillConfig base_cfg = config;
    base_cfg.lambda_per_teacher = default_lambda_schedule(n);
    auto t0 = std::chrono::steady_clock::now();
    StudentModel baseline =
        train_distill(corpus, prefix, vocab, DistillStrategy::all_teachers(), base_cfg);
    auto base_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - t0).count();

    // Purified run.
    t0 = std::chrono::steady_clock::now();
    std::unique_ptr<Purifier> purifier = make_purifier(prefix);
    auto purified = purified_rationales(corpus, prefix, *purifier, vocab);
    auto purify_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t0).count();
    t0 = std::chrono::steady_clock::now();
    StudentModel routed =
        train_distill(corpus, prefix, vocab, DistillStrategy::purified_map(&purified), config);
    auto routed_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - t0).count();

    auto base_acc = per_dataset_accuracy(baseline, corpus, vocab, Split::Test);
    auto routed_acc = per_dataset_accuracy(routed, corpus, vocab, Split::Test);
    for (const auto& [ds, acc] : base_acc) {
      result.report.rows.push_back({run_id, "baseline", config.hidden, static_cast<int>(n), ds, acc, 0.0,
                                    0, base_ms, config.seed});
      if (ds == "average") result.baseline_avg_acc.push_back(acc);
    }
    for (const auto& [ds, acc] : routed_acc) {
      result.report.rows.push_back({run_id, method_name, config.hidden, static_cast<int>(n), ds, acc, 0.0,
                                    purify_ms, routed_ms, config.seed});
      if (ds == "average") result.method_avg_acc.push_back(acc);
    }
  }

  std::span<const double> kp(result.method_avg_acc.data() + 1, result.method_avg_acc.size() - 1);
  std::span<const double> base(result.baseline_avg_acc.data() + 1, result.baseline_avg_acc.size() - 1);
  result.cmv = compute_cmv(kp, base);
  for (auto& row : result.report.rows) {
    if (row.method == method_name) row.cmv = result.cmv;
  }
  return result;
}

// Router-guided pipeline on a corpus routed before rationale sampling:
// each question consumes exactly one teacher's rationale. The report
// carries the consumed-vs-baseline rationale counts.
inline EvalReport ood_pipeline(const Purifier& router, const Corpus& ood_corpus,
                               const TeacherEnsemble& ensemble, const DistillConfig& config,
                               const Vocab& vocab, const std::string& run_id = "ood") {
  auto train = ood_corpus.questions_in(Split::Train);
  if (train.empty()) throw DataError("ood_pipeline: empty train split");

  auto t0 = std::chrono::steady_clock::now();
  std::unordered_map<std::string, std::vector<int>> purified;
  long long consumed = 0;
  for (const Question* q : train) {
    // Routing needs only the question; the selected teacher's rationale is
    // the single one consumed.
    RoutingDistribution dist = router.route(*q, {});
    int chosen = dist.argmax();
    const TeacherRationale* r = ood_corpus.find_rationale(q->id, ensemble.teacher_ids[static_cast<std::size_t>(chosen)]);
    if (!r) {
      throw DataError("ood_pipeline: missing rationale for routed teacher \"" +
                      ensemble.teacher_ids[static_cast<std::size_t>(chosen)] + "\" on \"" + q->id + "\"");
    }
    purified.emplace(q->id, tokenize(r->rationale_text, vocab));
    ++consumed;
  }
  auto purify_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::steady_clock::now() - t0).count();

  t0 = std::chrono::steady_clock::now();
  StudentModel student =
      train_distill(ood_corpus, ensemble, vocab, DistillStrategy::purified_map(&purified), config);
  auto distill_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0).count();

  EvalReport report;
  report.run_id = run_id;
  report.rationales_consumed = consumed;
  report.rationales_baseline = consumed * static_cast<long long>(ensemble.size());
  for (const auto& [ds, acc] : per_dataset_accuracy(student, ood_corpus, vocab, Split::Test)) {
    report.rows.push_back({run_id, router.name(), config.hidden, static_cast<int>(ensemble.size()), ds,
                           acc, 0.0, purify_ms, distill_ms, config.seed});
  }
  return report;
}

}  // namespace kpd
