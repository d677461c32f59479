#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "swayflow/common.hpp"
#include "swayflow/io.hpp"
#include "swayflow/rng.hpp"
#include "swayflow/tensor.hpp"
#include "swayflow/text.hpp"

namespace swayflow {

// The generative rule behind a synthetic corpus: each symbol owns a fixed
// feature template held for a fixed per-symbol duration, with a one-frame
// crossfade on each side of every internal span boundary (acoustic-style
// features change smoothly, never discontinuously), plus isotropic noise.
// A string therefore fully determines its clean feature sequence.
struct CorpusRule {
  int64_t feat_dim = 8;
  double noise_sigma = 0.05;
  std::string symbols;              // e.g. "abcdefghijklmnop"
  std::vector<int64_t> durations;   // frames per symbol occurrence
  std::vector<double> templates;    // (n_symbols, feat_dim) row major
  uint64_t seed = 0;

  int64_t n_symbols() const { return static_cast<int64_t>(symbols.size()); }

  int64_t symbol_index(char c) const {
    const auto p = symbols.find(c);
    if (p == std::string::npos) fail("corpus rule: symbol '", c, "' is not in the rule");
    return static_cast<int64_t>(p);
  }

  void validate() const {
    if (symbols.empty()) fail("corpus rule: no symbols");
    if (feat_dim <= 0) fail("corpus rule: feat_dim must be positive");
    if (durations.size() != symbols.size())
      fail("corpus rule: ", durations.size(), " durations for ", symbols.size(), " symbols");
    for (int64_t d : durations)
      if (d < 2) fail("corpus rule: durations must be >= 2 (one leading and one trailing crossfade frame per span)");
    if (templates.size() != symbols.size() * static_cast<std::size_t>(feat_dim))
      fail("corpus rule: template matrix size mismatch");
    if (!(noise_sigma >= 0.0)) fail("corpus rule: negative noise sigma");
  }
};

inline CorpusRule make_default_rule(uint64_t seed, int64_t feat_dim = 8,
                                    int64_t n_symbols = 16, double sigma = 0.05) {
  if (n_symbols < 1 || n_symbols > 26) fail("make_default_rule: n_symbols must be in [1, 26]");
  CorpusRule rule;
  rule.feat_dim = feat_dim;
  rule.noise_sigma = sigma;
  rule.seed = seed;
  for (int64_t i = 0; i < n_symbols; ++i) rule.symbols.push_back(static_cast<char>('a' + i));
  Rng rng(seed);
  rule.templates.resize(static_cast<std::size_t>(n_symbols * feat_dim));
  for (auto& v : rule.templates) v = rng.normal();
  rule.durations.resize(static_cast<std::size_t>(n_symbols));
  for (auto& d : rule.durations) d = 2 + static_cast<int64_t>(rng.below(5));  // 2..6
  return rule;
}

// Frames the rule assigns to a string.
inline int64_t oracle_frames(const CorpusRule& rule, const std::string& text) {
  int64_t n = 0;
  for (char c : text) n += rule.durations[static_cast<std::size_t>(rule.symbol_index(c))];
  return n;
}

// Clean (noise-free) features for a string, shape (frames, feat_dim). Each
// span holds its symbol's template; at every internal span boundary the two
// adjacent frames blend 3:1 toward their own template, so transitions are
// smooth while every frame stays nearest its own symbol (durations are >= 2,
// so no frame is both a leading and a trailing edge).
inline Tensor<double> oracle_features(const CorpusRule& rule, const std::string& text) {
  const int64_t f_dim = rule.feat_dim;
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(oracle_frames(rule, text) * f_dim));
  std::vector<std::size_t> span_symbol;
  std::vector<int64_t> span_start;
  for (char c : text) {
    const auto s = static_cast<std::size_t>(rule.symbol_index(c));
    span_symbol.push_back(s);
    span_start.push_back(static_cast<int64_t>(v.size()) / f_dim);
    for (int64_t rep = 0; rep < rule.durations[s]; ++rep)
      v.insert(v.end(), rule.templates.begin() + static_cast<std::ptrdiff_t>(s * f_dim),
               rule.templates.begin() + static_cast<std::ptrdiff_t>((s + 1) * f_dim));
  }
  for (std::size_t i = 0; i + 1 < span_symbol.size(); ++i) {
    const auto a = span_symbol[i], b = span_symbol[i + 1];
    const int64_t last_a = span_start[i + 1] - 1, first_b = span_start[i + 1];
    for (int64_t c = 0; c < f_dim; ++c) {
      const double ta = rule.templates[a * static_cast<std::size_t>(f_dim) +
                                       static_cast<std::size_t>(c)];
      const double tb = rule.templates[b * static_cast<std::size_t>(f_dim) +
                                       static_cast<std::size_t>(c)];
      v[static_cast<std::size_t>(last_a * f_dim + c)] = 0.75 * ta + 0.25 * tb;
      v[static_cast<std::size_t>(first_b * f_dim + c)] = 0.25 * ta + 0.75 * tb;
    }
  }
  const int64_t frames = static_cast<int64_t>(v.size()) / f_dim;
  return Tensor<double>({frames, f_dim}, std::move(v));
}

// One noisy realization of a string's features at the rule's noise level,
// stored at file precision. Draws feat_dim values per frame, in frame order.
inline Tensor<float> sample_noisy_features(const CorpusRule& rule, const std::string& text,
                                           Rng& rng) {
  auto clean = oracle_features(rule, text);
  std::vector<float> noisy(clean.data().size());
  for (std::size_t k = 0; k < noisy.size(); ++k)
    noisy[k] = static_cast<float>(clean.data()[k] + rule.noise_sigma * rng.normal());
  return Tensor<float>(clean.shape(), std::move(noisy));
}

// Nearest template (L2) for each frame.
inline std::vector<int64_t> nearest_symbols(const CorpusRule& rule,
                                            const std::vector<double>& frames, int64_t n_frames) {
  const int64_t f_dim = rule.feat_dim, n_sym = rule.n_symbols();
  std::vector<int64_t> out(static_cast<std::size_t>(n_frames));
  for (int64_t t = 0; t < n_frames; ++t) {
    double best = 0.0;
    int64_t best_s = -1;
    for (int64_t s = 0; s < n_sym; ++s) {
      double d2 = 0.0;
      for (int64_t c = 0; c < f_dim; ++c) {
        const double diff = frames[static_cast<std::size_t>(t * f_dim + c)] -
                            rule.templates[static_cast<std::size_t>(s * f_dim + c)];
        d2 += diff * diff;
      }
      if (best_s < 0 || d2 < best) {
        best = d2;
        best_s = s;
      }
    }
    out[static_cast<std::size_t>(t)] = best_s;
  }
  return out;
}

// Fraction of a transcript's symbols recovered from features: frames are
// split into the transcript's duration spans, each span votes by majority
// nearest template.
inline double symbol_recovery(const CorpusRule& rule, const std::string& text,
                              const std::vector<double>& frames, int64_t n_frames) {
  if (text.empty()) fail("symbol_recovery: empty transcript");
  if (n_frames != oracle_frames(rule, text))
    fail("symbol_recovery: ", n_frames, " frames for a transcript needing ",
         oracle_frames(rule, text));
  const auto votes = nearest_symbols(rule, frames, n_frames);
  int64_t t = 0, hits = 0;
  for (char c : text) {
    const int64_t s = rule.symbol_index(c);
    const int64_t d = rule.durations[static_cast<std::size_t>(s)];
    std::vector<int64_t> counts(static_cast<std::size_t>(rule.n_symbols()), 0);
    for (int64_t i = 0; i < d; ++i) ++counts[static_cast<std::size_t>(votes[t + i])];
    const auto major = std::max_element(counts.begin(), counts.end()) - counts.begin();
    if (major == s) ++hits;
    t += d;
  }
  return static_cast<double>(hits) / static_cast<double>(text.size());
}

// Mean squared error per element between two frame blocks.
inline double frame_mse(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty())
    fail("frame_mse: mismatched block sizes ", a.size(), " vs ", b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

struct CorpusEntry {
  std::string id;
  std::string text;
  std::string feature_file;  // relative to the corpus directory
};

struct Corpus {
  std::string dir;
  CorpusRule rule;
  std::vector<CorpusEntry> entries;

  Tensor<double> features_of(std::size_t index) const {
    if (index >= entries.size()) fail("corpus: entry ", index, " out of range");
    return read_f32_tensor<double>(
        (std::filesystem::path(dir) / entries[index].feature_file).string());
  }
};

inline std::string sample_string(const CorpusRule& rule, Rng& rng, int64_t min_len = 3,
                                 int64_t max_len = 10) {
  const auto len = min_len + static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_len - min_len + 1)));
  std::string s;
  for (int64_t i = 0; i < len; ++i)
    s.push_back(rule.symbols[rng.below(static_cast<uint64_t>(rule.n_symbols()))]);
  return s;
}

namespace detail {

inline nlohmann::json rule_to_json(const CorpusRule& rule) {
  nlohmann::json j;
  j["feat_dim"] = rule.feat_dim;
  j["noise_sigma"] = rule.noise_sigma;
  j["symbols"] = rule.symbols;
  j["durations"] = rule.durations;
  j["templates"] = rule.templates;
  j["seed"] = rule.seed;
  return j;
}

inline CorpusRule rule_from_json(const nlohmann::json& j) {
  CorpusRule rule;
  rule.feat_dim = j.at("feat_dim").get<int64_t>();
  rule.noise_sigma = j.at("noise_sigma").get<double>();
  rule.symbols = j.at("symbols").get<std::string>();
  rule.durations = j.at("durations").get<std::vector<int64_t>>();
  rule.templates = j.at("templates").get<std::vector<double>>();
  rule.seed = j.at("seed").get<uint64_t>();
  rule.validate();
  return rule;
}

}  // namespace detail

// Writes vocab.txt, rule.json, manifest.json, and data/*.f32 under `dir`.
// The vocabulary is the rule's symbols behind the filler on line 0.
inline Corpus generate_corpus(const std::string& dir, int64_t count, const CorpusRule& rule,
                              bool force = false, int64_t min_len = 3, int64_t max_len = 10) {
  rule.validate();
  if (count < 0) fail("generate_corpus: negative count");
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    fail("generate_corpus: ", dir, " exists and is not empty (use force to overwrite)");
  fs::create_directories(root / "data");

  std::vector<std::string> vocab_lines{"<F>"};
  for (char c : rule.symbols) vocab_lines.emplace_back(1, c);
  Vocabulary::from_symbols(vocab_lines).save((root / "vocab.txt").string());

  std::ofstream rule_out(root / "rule.json");
  rule_out << detail::rule_to_json(rule).dump(2) << '\n';
  if (!rule_out) fail("generate_corpus: cannot write rule.json");

  Corpus corpus;
  corpus.dir = dir;
  corpus.rule = rule;
  Rng rng(rule.seed + 1);  // entry stream distinct from template stream
  nlohmann::json manifest;
  manifest["count"] = count;
  manifest["entries"] = nlohmann::json::array();
  for (int64_t i = 0; i < count; ++i) {
    CorpusEntry e;
    e.id = "utt" + std::to_string(i);
    e.text = sample_string(rule, rng, min_len, max_len);
    e.feature_file = "data/" + e.id + ".f32";
    auto noisy = sample_noisy_features(rule, e.text, rng);
    write_f32_file((root / e.feature_file).string(), noisy.shape(), noisy.data());
    manifest["entries"].push_back(
        {{"id", e.id}, {"text", e.text}, {"file", e.feature_file}});
    corpus.entries.push_back(std::move(e));
  }
  std::ofstream man_out(root / "manifest.json");
  man_out << manifest.dump(2) << '\n';
  if (!man_out) fail("generate_corpus: cannot write manifest.json");
  return corpus;
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream rule_in(root / "rule.json");
  if (!rule_in) fail("load_corpus: cannot open ", (root / "rule.json").string());
  nlohmann::json rj;
  rule_in >> rj;
  Corpus corpus;
  corpus.dir = dir;
  corpus.rule = detail::rule_from_json(rj);

  std::ifstream man_in(root / "manifest.json");
  if (!man_in) fail("load_corpus: cannot open ", (root / "manifest.json").string());
  nlohmann::json mj;
  man_in >> mj;
  for (const auto& e : mj.at("entries")) {
    CorpusEntry entry;
    entry.id = e.at("id").get<std::string>();
    entry.text = e.at("text").get<std::string>();
    entry.feature_file = e.at("file").get<std::string>();
    corpus.entries.push_back(std::move(entry));
  }
  if (corpus.entries.size() != mj.at("count").get<std::size_t>())
    fail("load_corpus: manifest count ", mj.at("count").get<std::size_t>(),
         " != entry rows ", corpus.entries.size());
  return corpus;
}

inline Vocabulary load_corpus_vocab(const std::string& dir) {
  return Vocabulary::load((std::filesystem::path(dir) / "vocab.txt").string());
}

}  // namespace swayflow
