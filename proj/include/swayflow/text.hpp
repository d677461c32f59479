#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "swayflow/common.hpp"

namespace swayflow {

namespace detail {

// Returns the byte length of the UTF-8 sequence starting at `pos`, or 0 if
// the bytes there are not well-formed UTF-8.
inline std::size_t utf8_len(const std::string& s, std::size_t pos) {
  const auto lead = static_cast<unsigned char>(s[pos]);
  std::size_t len = 0;
  if (lead < 0x80)
    len = 1;
  else if ((lead & 0xE0) == 0xC0)
    len = 2;
  else if ((lead & 0xF0) == 0xE0)
    len = 3;
  else if ((lead & 0xF8) == 0xF0)
    len = 4;
  else
    return 0;
  if (pos + len > s.size()) return 0;
  for (std::size_t i = 1; i < len; ++i)
    if ((static_cast<unsigned char>(s[pos + i]) & 0xC0) != 0x80) return 0;
  return len;
}

inline std::size_t count_code_points(const std::string& s) {
  std::size_t n = 0, pos = 0;
  while (pos < s.size()) {
    const std::size_t len = utf8_len(s, pos);
    if (len == 0) return std::string::npos;
    pos += len;
    ++n;
  }
  return n;
}

}  // namespace detail

// Immutable symbol table. ID 0 is always the filler used to pad character
// sequences out to the frame length; the remaining entries are single
// characters (one Unicode code point each).
class Vocabulary {
 public:
  static constexpr int64_t kFillerId = 0;

  static Vocabulary from_symbols(std::vector<std::string> symbols) {
    if (symbols.empty()) fail("vocabulary: needs at least the filler symbol on line 0");
    Vocabulary v;
    v.symbols_ = std::move(symbols);
    for (std::size_t i = 0; i < v.symbols_.size(); ++i) {
      const std::string& sym = v.symbols_[i];
      if (sym.empty()) fail("vocabulary: line ", i, " is empty");
      if (i != 0) {
        const std::size_t cps = detail::count_code_points(sym);
        if (cps == std::string::npos) fail("vocabulary: line ", i, " is not valid UTF-8");
        if (cps != 1)
          fail("vocabulary: line ", i, " ('", sym, "') must be a single character");
      }
      if (!v.ids_.emplace(sym, static_cast<int64_t>(i)).second)
        fail("vocabulary: duplicate symbol '", sym, "' at line ", i);
    }
    return v;
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("vocabulary: cannot open ", path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return from_symbols(std::move(lines));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("vocabulary: cannot write ", path);
    for (const auto& s : symbols_) out << s << '\n';
    if (!out) fail("vocabulary: write to ", path, " failed");
  }

  int64_t size() const { return static_cast<int64_t>(symbols_.size()); }
  int64_t filler_id() const { return kFillerId; }

  const std::string& symbol(int64_t id) const {
    if (id < 0 || id >= size()) fail("vocabulary: id ", id, " out of range [0, ", size(), ")");
    return symbols_[static_cast<std::size_t>(id)];
  }

  bool contains(const std::string& sym) const { return ids_.count(sym) != 0; }

  int64_t id_of(const std::string& sym) const {
    auto it = ids_.find(sym);
    if (it == ids_.end()) fail("vocabulary: unknown symbol '", sym, "'");
    return it->second;
  }

  const std::vector<std::string>& symbols() const { return symbols_; }

 private:
  Vocabulary() = default;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int64_t> ids_;
};

// One ID per character, in order. Unknown characters and malformed UTF-8 are
// rejected with the byte offset.
inline std::vector<int64_t> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int64_t> ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t len = detail::utf8_len(text, pos);
    if (len == 0) fail("tokenize: invalid UTF-8 at byte ", pos);
    const std::string ch = text.substr(pos, len);
    if (!vocab.contains(ch)) fail("tokenize: unknown character '", ch, "' at byte ", pos);
    ids.push_back(vocab.id_of(ch));
    pos += len;
  }
  return ids;
}

inline std::string detokenize(const std::vector<int64_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (int64_t id : ids) out += vocab.symbol(id);
  return out;
}

// Character IDs padded with fillers to the frame length N. Positions past
// effective_len are all filler.
struct ExtendedSequence {
  std::vector<int64_t> ids;
  int64_t effective_len = 0;

  int64_t length() const { return static_cast<int64_t>(ids.size()); }
};

inline ExtendedSequence pad_to_length(const std::vector<int64_t>& ids, int64_t n,
                                      const Vocabulary& vocab) {
  const auto m = static_cast<int64_t>(ids.size());
  if (m > n) fail("pad_to_length: ", m, " tokens exceed target length ", n);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= vocab.size())
      fail("pad_to_length: id ", ids[i], " at position ", i, " outside vocabulary");
  ExtendedSequence seq;
  seq.ids = ids;
  seq.ids.resize(static_cast<std::size_t>(n), vocab.filler_id());
  seq.effective_len = m;
  return seq;
}

// Total frame budget for prompt + generated speech: the reference length
// plus a ceiling-scaled share proportional to the character-count ratio.
inline int64_t estimate_duration(int64_t ref_frames, int64_t ref_char_count,
                                 int64_t gen_char_count) {
  if (ref_frames <= 0) fail("estimate_duration: ref_frames must be positive, got ", ref_frames);
  if (ref_char_count <= 0)
    fail("estimate_duration: ref_char_count must be positive, got ", ref_char_count);
  if (gen_char_count <= 0)
    fail("estimate_duration: gen_char_count must be positive, got ", gen_char_count);
  return ref_frames + (ref_frames * gen_char_count + ref_char_count - 1) / ref_char_count;
}

}  // namespace swayflow
