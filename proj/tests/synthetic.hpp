#pragma once

// Synthetic corpora for the test suites. All generators are pure functions
// of their seed.

#include <string>
#include <vector>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"

namespace synth {

inline std::string repeat_word(const std::string& w, int times) {
  std::string out;
  for (int i = 0; i < times; ++i) {
    if (!out.empty()) out += " ";
    out += w;
  }
  return out;
}

// Three specialist teachers, three disjoint word clusters. Cluster c's
// questions are pool words only; the gold option is always cluster c's
// answer word, so the answer is learnable solely through rationales.
// Teacher j is correct exactly on cluster j and repeats that answer word;
// wrong teachers push their own cluster's answer word interleaved with
// filler, which makes distilling them actively harmful.
struct ClusterSpec {
  int clusters = 3;
  int train_per_cluster = 200;
  int public_per_cluster = 50;
  int test_per_cluster = 67;
  int pool_words = 25;
  int rationale_repeats = 6;
};

inline kpd::Corpus make_cluster_corpus(std::uint64_t seed, const ClusterSpec& spec = {}) {
  kpd::Rng rng(kpd::derive_seed(seed, "cluster-corpus"));
  kpd::Corpus corpus;

  auto pool_word = [](int c, int k) {
    return "p" + std::to_string(c) + "w" + std::to_string(k);
  };
  auto answer_word = [](int c) { return "ans" + std::to_string(c); };

  auto add_question = [&](int c, int idx, kpd::Split split) {
    kpd::Question q;
    q.id = "q" + std::to_string(c) + "_" + std::to_string(idx) + "_" + kpd::split_name(split);
    q.dataset_id = "ds" + std::to_string(c);

    // Options: every cluster's answer word plus distractors, shuffled so the
    // gold index is uniform. The gold option is always this cluster's answer
    // word and never appears in the question text.
    q.options.clear();
    for (int k = 0; k < spec.clusters && k < 4; ++k) q.options.push_back(answer_word(k));
    int d = 0;
    while (q.options.size() < 4)
      q.options.push_back("dis" + std::to_string(c) + "x" + std::to_string(d++));
    for (std::size_t i = q.options.size(); i > 1; --i)
      std::swap(q.options[i - 1], q.options[rng.next_index(i)]);
    auto option_index = [&](const std::string& w) {
      for (std::size_t i = 0; i < q.options.size(); ++i)
        if (q.options[i] == w) return static_cast<int>(i);
      return 0;
    };
    q.gold_index = option_index(answer_word(c));

    std::string words[3];
    for (auto& w : words) w = pool_word(c, static_cast<int>(rng.next_index(spec.pool_words)));
    q.text = words[0] + " " + words[1] + " " + words[2] + " " +
             pool_word(c, static_cast<int>(rng.next_index(spec.pool_words)));
    q.split = split;

    // Interleaving the pushed word with filler keeps each occurrence in a
    // near-clean, question-dominated context, so its training signal scales
    // with the repeat count instead of collapsing into one effective push.
    // Filler comes from the arguing teacher's own cluster, which keeps each
    // teacher's rationales separable for similarity routing.
    auto interleaved = [&](const std::string& pushed, int filler_cluster, int times) {
      std::string out;
      for (int k = 0; k < times; ++k)
        out += pushed + " " +
               pool_word(filler_cluster, static_cast<int>(rng.next_index(spec.pool_words))) + " ";
      out += pushed;
      return out;
    };

    for (int t = 0; t < spec.clusters; ++t) {
      kpd::TeacherRationale r;
      r.question_id = q.id;
      r.teacher_id = "t" + std::to_string(t);
      if (t == c) {
        r.predicted_index = q.gold_index;
        r.rationale_text = interleaved(answer_word(c), c, spec.rationale_repeats);
      } else {
        // All wrong teachers argue for the next cluster's answer word, so
        // their combined push outweighs the correct teacher's and distilling
        // them is actively harmful rather than diluted noise.
        r.predicted_index = option_index(answer_word((c + 1) % spec.clusters));
        r.rationale_text = interleaved(q.options[static_cast<std::size_t>(r.predicted_index)], t,
                                       spec.rationale_repeats);
      }
      corpus.rationales.push_back(std::move(r));
    }
    corpus.questions.push_back(std::move(q));
  };

  for (int c = 0; c < spec.clusters; ++c) {
    int idx = 0;
    for (int i = 0; i < spec.train_per_cluster; ++i) add_question(c, idx++, kpd::Split::Train);
    for (int i = 0; i < spec.public_per_cluster; ++i) add_question(c, idx++, kpd::Split::Public);
    for (int i = 0; i < spec.test_per_cluster; ++i) add_question(c, idx++, kpd::Split::Test);
  }
  corpus.rebuild_index();
  return corpus;
}

// One reliable teacher plus noisy duplicates: teacher 0 is always correct
// with a short rationale; teachers 1..n-1 flip a coin and repeat whatever
// they predicted, at greater length.
struct NoisySpec {
  int teachers = 4;
  int train = 160;
  int public_count = 60;
  int test = 80;
  double duplicate_accuracy = 0.5;
  // How many near-clean-context pushes a duplicate's rationale delivers.
  int duplicate_repeats = 3;
};

inline kpd::Corpus make_noisy_duplicate_corpus(std::uint64_t seed, const NoisySpec& spec = {}) {
  kpd::Rng rng(kpd::derive_seed(seed, "noisy-corpus"));
  kpd::Corpus corpus;

  auto add_question = [&](int idx, kpd::Split split) {
    kpd::Question q;
    q.id = "n" + std::to_string(idx) + "_" + kpd::split_name(split);
    q.dataset_id = "noisy";
    q.gold_index = static_cast<int>(rng.next_index(4));
    for (int k = 0; k < 4; ++k) q.options.push_back("ans" + std::to_string(k));
    std::string topic = "topic" + std::to_string(rng.next_index(200));
    q.text = topic + " " + q.options[static_cast<std::size_t>(q.gold_index)] + " " + topic;
    q.split = split;

    // Interleaving a pushed word with the topic keeps each occurrence in a
    // near-clean context, so its training signal scales with the repeats.
    auto interleaved = [&](int pred, int times) {
      std::string out;
      for (int k = 0; k < times; ++k)
        out += q.options[static_cast<std::size_t>(pred)] + " " + topic + " ";
      out += q.options[static_cast<std::size_t>(pred)];
      return out;
    };

    for (int t = 0; t < spec.teachers; ++t) {
      kpd::TeacherRationale r;
      r.question_id = q.id;
      r.teacher_id = "t" + std::to_string(t);
      if (t == 0) {
        r.predicted_index = q.gold_index;
        r.rationale_text = interleaved(q.gold_index, 3);
      } else {
        bool correct = rng.next_double() < spec.duplicate_accuracy;
        // Wrong duplicates agree on the same wrong option, so every extra
        // noisy teacher compounds the damage instead of spreading it.
        int pred = correct ? q.gold_index : (q.gold_index + 1) % 4;
        r.predicted_index = pred;
        r.rationale_text = interleaved(pred, spec.duplicate_repeats) + " noise" +
                           std::to_string(rng.next_index(50));
      }
      corpus.rationales.push_back(std::move(r));
    }
    corpus.questions.push_back(std::move(q));
  };

  int idx = 0;
  for (int i = 0; i < spec.train; ++i) add_question(idx++, kpd::Split::Train);
  for (int i = 0; i < spec.public_count; ++i) add_question(idx++, kpd::Split::Public);
  for (int i = 0; i < spec.test; ++i) add_question(idx++, kpd::Split::Test);
  corpus.rebuild_index();
  return corpus;
}

// Selector corpus: teacher 0 is always correct with short templated
// rationales; teachers 1..3 are never correct and ramble at length, making
// their distillation loss far worse.
struct DominantSpec {
  int teachers = 4;
  int train = 64;
  int heldout = 32;
  int ramble_words = 80;
};

inline kpd::Corpus make_dominant_teacher_corpus(std::uint64_t seed, const DominantSpec& spec = {}) {
  kpd::Rng rng(kpd::derive_seed(seed, "dominant-corpus"));
  kpd::Corpus corpus;

  auto add_question = [&](int idx, kpd::Split split) {
    kpd::Question q;
    q.id = "d" + std::to_string(idx) + "_" + kpd::split_name(split);
    q.dataset_id = "dom";
    q.gold_index = static_cast<int>(rng.next_index(4));
    for (int k = 0; k < 4; ++k) q.options.push_back("choice" + std::to_string(k));
    q.text = "subject" + std::to_string(rng.next_index(20)) + " asks about " +
             q.options[static_cast<std::size_t>(q.gold_index)];
    q.split = split;

    for (int t = 0; t < spec.teachers; ++t) {
      kpd::TeacherRationale r;
      r.question_id = q.id;
      r.teacher_id = "t" + std::to_string(t);
      if (t == 0) {
        r.predicted_index = q.gold_index;
        r.rationale_text =
            "the answer is " + q.options[static_cast<std::size_t>(q.gold_index)] + " clearly";
      } else {
        r.predicted_index = (q.gold_index + t) % 4;
        std::string ramble;
        for (int w = 0; w < spec.ramble_words; ++w) {
          if (!ramble.empty()) ramble += " ";
          ramble += "blah" + std::to_string(rng.next_index(500));
        }
        r.rationale_text = ramble;
      }
      corpus.rationales.push_back(std::move(r));
    }
    corpus.questions.push_back(std::move(q));
  };

  int idx = 0;
  for (int i = 0; i < spec.train; ++i) add_question(idx++, kpd::Split::Train);
  for (int i = 0; i < spec.heldout; ++i) add_question(idx++, kpd::Split::Test);
  corpus.rebuild_index();
  return corpus;
}

}  // namespace synth
