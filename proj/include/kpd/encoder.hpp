#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kpd/common.hpp"
#include "kpd/corpus.hpp"

namespace kpd {

struct Embedding {
  std::vector<double> values;
  bool normalized = false;

  std::size_t dim() const { return values.size(); }

  double norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
  }
};

// Zero vectors get cosine 0 by convention.
inline double cosine(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) {
    throw UsageError("cosine: dimension mismatch (" + std::to_string(a.dim()) + " vs " +
                     std::to_string(b.dim()) + ")");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    dot += a.values[i] * b.values[i];
    na += a.values[i] * a.values[i];
    nb += b.values[i] * b.values[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct HashedEncoderConfig {
  int dim = 768;
  bool unigrams = true;
  bool bigrams = true;
  std::uint64_t seed = 0;
};

// Signed feature hashing of word n-grams, L2-normalized. Deterministic
// stand-in for a frozen language encoder.
inline Embedding hashed_embed(const std::string& text, const HashedEncoderConfig& config) {
  if (config.dim < 8) throw UsageError("hashed_embed: dim must be >= 8");
  Embedding e;
  e.values.assign(static_cast<std::size_t>(config.dim), 0.0);

  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      words.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();

  auto add = [&](const std::string& gram) {
    std::uint64_t h = fnv1a(gram, 0x9e3779b97f4a7c15ULL ^ config.seed);
    std::size_t bucket = static_cast<std::size_t>(h % static_cast<std::uint64_t>(config.dim));
    double sign = (h >> 63) ? -1.0 : 1.0;
    e.values[bucket] += sign;
  };

  if (config.unigrams) {
    for (const auto& w : words) add(w);
  }
  if (config.bigrams) {
    for (std::size_t i = 0; i + 1 < words.size(); ++i) add(words[i] + " " + words[i + 1]);
  }

  double n = e.norm();
  if (n > 0.0) {
    for (double& v : e.values) v /= n;
    e.normalized = true;
  }
  return e;
}

// Keyed by (id, kind) where kind is "question" or "rationale:<teacher>".
class EmbeddingStore {
 public:
  void put(const std::string& id, const std::string& kind, Embedding e) {
    auto key = std::make_pair(id, kind);
    if (map_.count(key)) throw DataError("duplicate embedding key (" + id + ", " + kind + ")");
    map_.emplace(std::move(key), std::move(e));
  }

  const Embedding* find(const std::string& id, const std::string& kind) const {
    auto it = map_.find(std::make_pair(id, kind));
    return it == map_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return map_.size(); }

 private:
  std::map<std::pair<std::string, std::string>, Embedding> map_;
};

// File format: a JSON header line {"dim", "count", "dtype"}. For
// dtype "f32le" each record is a JSON line {"id", "kind"} followed by dim
// little-endian f32 and a newline. Any other dtype falls back to pure
// JSONL records carrying "vec".
inline EmbeddingStore load_embeddings(const std::string& path, int expected_dim) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw DataError(path + ": missing header");
  auto header = detail::parse_jsonl_line(line, path, 1);
  int dim = header.at("dim").get<int>();
  std::size_t count = header.at("count").get<std::size_t>();
  std::string dtype = header.value("dtype", "json");
  if (dim != expected_dim) {
    throw DataError(path + ": dimension mismatch, file has " + std::to_string(dim) + ", expected " +
                    std::to_string(expected_dim));
  }

  EmbeddingStore store;
  for (std::size_t rec = 0; rec < count; ++rec) {
    if (!std::getline(f, line)) throw DataError(path + ": truncated after " + std::to_string(rec) + " records");
    if (line.empty()) {
      --rec;
      continue;
    }
    auto j = detail::parse_jsonl_line(line, path, rec + 2);
    std::string id = j.at("id").get<std::string>();
    std::string kind = j.at("kind").get<std::string>();
    Embedding e;
    e.values.resize(static_cast<std::size_t>(dim));
    if (dtype == "f32le") {
      std::vector<float> buf(static_cast<std::size_t>(dim));
      f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
      if (!f) throw DataError(path + ": truncated binary payload for \"" + id + "\"");
      for (std::size_t i = 0; i < buf.size(); ++i) e.values[i] = static_cast<double>(buf[i]);
      if (f.peek() == '\n') f.get();
    } else {
      auto vec = j.at("vec").get<std::vector<double>>();
      if (static_cast<int>(vec.size()) != dim) {
        throw DataError(path + ": record \"" + id + "\" has dim " + std::to_string(vec.size()) +
                        ", expected " + std::to_string(dim));
      }
      e.values = std::move(vec);
    }
    for (double v : e.values) {
      if (!std::isfinite(v)) throw DataError(path + ": non-finite value in record \"" + id + "\"");
    }
    store.put(id, kind, std::move(e));
  }
  return store;
}

inline void save_embeddings_f32(const std::string& path,
                                const std::vector<std::tuple<std::string, std::string, Embedding>>& records,
                                int dim) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  nlohmann::json header{{"dim", dim}, {"count", records.size()}, {"dtype", "f32le"}};
  f << header.dump() << "\n";
  for (const auto& [id, kind, e] : records) {
    nlohmann::json j{{"id", id}, {"kind", kind}};
    f << j.dump() << "\n";
    std::vector<float> buf(e.values.begin(), e.values.end());
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    f << "\n";
  }
}

// Uniform access to question/rationale vectors; routers do not care where
// they come from.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual int dim() const = 0;
  virtual Embedding question(const Question& q) const = 0;
  virtual Embedding rationale(const TeacherRationale& r) const = 0;
};

class HashedProvider final : public EmbeddingProvider {
 public:
  explicit HashedProvider(HashedEncoderConfig config) : config_(config) {}
  int dim() const override { return config_.dim; }
  Embedding question(const Question& q) const override { return hashed_embed(q.text, config_); }
  Embedding rationale(const TeacherRationale& r) const override {
    return hashed_embed(r.rationale_text, config_);
  }

 private:
  HashedEncoderConfig config_;
};

class StoreProvider final : public EmbeddingProvider {
 public:
  StoreProvider(EmbeddingStore store, int dim) : store_(std::move(store)), dim_(dim) {}
  int dim() const override { return dim_; }
  Embedding question(const Question& q) const override {
    const Embedding* e = store_.find(q.id, "question");
    if (!e) throw DataError("no question embedding for \"" + q.id + "\"");
    return *e;
  }
  Embedding rationale(const TeacherRationale& r) const override {
    const Embedding* e = store_.find(r.question_id, "rationale:" + r.teacher_id);
    if (!e) {
      throw DataError("no rationale embedding for (\"" + r.question_id + "\", \"" + r.teacher_id + "\")");
    }
    return *e;
  }

 private:
  EmbeddingStore store_;
  int dim_;
};

}  // namespace kpd
