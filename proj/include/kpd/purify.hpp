#pragma once

#include <cmath>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"

namespace kpd {

struct RoutingDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }

  // Argmax with ties resolved to the lowest teacher index.
  int argmax() const {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
  }
};

inline RoutingDistribution softmax_distribution(std::span<const double> scores) {
  RoutingDistribution d;
  d.probs.resize(scores.size());
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    d.probs[i] = std::exp(scores[i] - mx);
    sum += d.probs[i];
  }
  for (double& p : d.probs) p /= sum;
  return d;
}

struct PurifiedRationale {
  enum class Source { Routed, Aggregated };
  Source source = Source::Routed;
  int teacher = -1;  // valid for Routed
  std::vector<int> tokens;
  std::string text;
};

inline PurifiedRationale route_argmax(const RoutingDistribution& dist,
                                      std::span<const TeacherRationale* const> rationales,
                                      const Vocab& vocab) {
  if (rationales.empty()) throw UsageError("route_argmax: empty ensemble");
  if (dist.size() != rationales.size()) {
    throw UsageError("route_argmax: distribution has " + std::to_string(dist.size()) +
                     " entries for " + std::to_string(rationales.size()) + " rationales");
  }
  int chosen = dist.argmax();
  PurifiedRationale out;
  out.source = PurifiedRationale::Source::Routed;
  out.teacher = chosen;
  out.text = rationales[static_cast<std::size_t>(chosen)]->rationale_text;
  out.tokens = tokenize(out.text, vocab);
  return out;
}

// Uniform interface over the five purification methods. Routers implement
// route(); the aggregator overrides purify() directly.
class Purifier {
 public:
  virtual ~Purifier() = default;
  virtual std::string name() const = 0;

  // Routing methods produce a distribution over teachers from the question
  // alone. Aggregation-style methods may throw here.
  virtual RoutingDistribution route(const Question& q,
                                    std::span<const TeacherRationale* const> rationales) const = 0;

  virtual PurifiedRationale purify(const Question& q,
                                   std::span<const TeacherRationale* const> rationales,
                                   const Vocab& vocab) const {
    return route_argmax(route(q, rationales), rationales, vocab);
  }
};

inline PurifiedRationale purify(const Purifier& method, const Question& q,
                                std::span<const TeacherRationale* const> rationales,
                                const Vocab& vocab) {
  return method.purify(q, rationales, vocab);
}

// Collects the ensemble's rationales for a question in canonical teacher
// order.
inline std::vector<const TeacherRationale*> gather_rationales(const Corpus& corpus,
                                                              const Question& q,
                                                              const TeacherEnsemble& ensemble) {
  std::vector<const TeacherRationale*> out;
  out.reserve(ensemble.size());
  for (const auto& tid : ensemble.teacher_ids) {
    const TeacherRationale* r = corpus.find_rationale(q.id, tid);
    if (!r) throw DataError("missing rationale for (\"" + q.id + "\", \"" + tid + "\")");
    out.push_back(r);
  }
  return out;
}

struct RoutingDecision {
  std::string question_id;
  std::string method;
  std::vector<double> probs;
  int chosen = 0;
};

inline void write_routing_log(const std::string& path, const std::vector<RoutingDecision>& decisions) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  for (const auto& d : decisions) {
    nlohmann::json j{{"question_id", d.question_id}, {"method", d.method},
                     {"probs", d.probs}, {"chosen", d.chosen}};
    f << j.dump() << "\n";
  }
}

}  // namespace kpd
