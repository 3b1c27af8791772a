#include "cirm/features.hpp"

#include <algorithm>
#include <set>

#include "cirm/error.hpp"

namespace cirm {

std::string_view bias_name(Bias b) {
  switch (b) {
    case Bias::len: return "len";
    case Bias::para: return "para";
    case Bias::over: return "over";
    case Bias::excl: return "excl";
    case Bias::bold: return "bold";
  }
  return "?";
}

Bias bias_from_name(std::string_view name) {
  for (Bias b : kAllBiases)
    if (bias_name(b) == name) return b;
  throw Error("bad_argument", "unknown bias name '" + std::string(name) + "'");
}

double FeatureVector::value(Bias b) const {
  switch (b) {
    case Bias::len: return static_cast<double>(len);
    case Bias::para: return static_cast<double>(para);
    case Bias::over: return over;
    case Bias::excl: return static_cast<double>(excl);
    case Bias::bold: return static_cast<double>(bold);
  }
  return 0.0;
}

namespace {

// Decodes the UTF-8 sequence starting at s[i]; returns the code point and
// advances i. Throws on malformed input.
char32_t decode_utf8(std::string_view s, size_t& i) {
  auto fail = [&]() -> char32_t {
    throw Error("invalid_utf8", "malformed UTF-8 at byte offset " + std::to_string(i));
  };
  unsigned char c0 = static_cast<unsigned char>(s[i]);
  if (c0 < 0x80) {
    ++i;
    return c0;
  }
  int extra;
  char32_t cp;
  if ((c0 & 0xE0) == 0xC0) {
    extra = 1;
    cp = c0 & 0x1Fu;
  } else if ((c0 & 0xF0) == 0xE0) {
    extra = 2;
    cp = c0 & 0x0Fu;
  } else if ((c0 & 0xF8) == 0xF0) {
    extra = 3;
    cp = c0 & 0x07u;
  } else {
    return fail();
  }
  if (i + static_cast<size_t>(extra) >= s.size()) return fail();
  for (int k = 1; k <= extra; ++k) {
    unsigned char cc = static_cast<unsigned char>(s[i + static_cast<size_t>(k)]);
    if ((cc & 0xC0) != 0x80) return fail();
    cp = (cp << 6) | (cc & 0x3Fu);
  }
  // Reject overlong encodings and surrogates.
  static const char32_t min_cp[4] = {0, 0x80, 0x800, 0x10000};
  if (cp < min_cp[extra]) return fail();
  if (cp >= 0xD800 && cp <= 0xDFFF) return fail();
  if (cp > 0x10FFFF) return fail();
  i += static_cast<size_t>(extra) + 1;
  return cp;
}

bool is_word_separator(char32_t cp) {
  switch (cp) {
    case U' ':
    case U'\t':
    case U'\n':
    case U'\r':
    case U'\f':
    case U'\v':
    case 0x00A0:  // no-break space
    case 0x2028:  // line separator
    case 0x2029:  // paragraph separator
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;  // en quad .. hair space
  }
}

bool is_ascii_punct(char32_t cp) {
  return (cp >= U'!' && cp <= U'/') || (cp >= U':' && cp <= U'@') || (cp >= U'[' && cp <= U'`') ||
         (cp >= U'{' && cp <= U'~');
}

}  // namespace

int64_t utf8_scalar_count(std::string_view s) {
  int64_t n = 0;
  size_t i = 0;
  while (i < s.size()) {
    decode_utf8(s, i);
    ++n;
  }
  return n;
}

int64_t count_nonoverlapping(std::string_view text, std::string_view needle) {
  if (needle.empty()) return 0;
  int64_t n = 0;
  size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string_view::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  size_t i = 0;
  std::string current;
  std::vector<std::pair<size_t, size_t>> cp_spans;  // byte spans of current word's code points

  auto flush = [&]() {
    if (cp_spans.empty()) return;
    // Strip leading/trailing ASCII punctuation code points.
    size_t lo = 0, hi = cp_spans.size();
    auto cp_at = [&](size_t k) {
      size_t p = cp_spans[k].first;
      return decode_utf8(text, p);
    };
    while (lo < hi && is_ascii_punct(cp_at(lo))) ++lo;
    while (hi > lo && is_ascii_punct(cp_at(hi - 1))) --hi;
    if (lo < hi) {
      std::string w;
      for (size_t k = lo; k < hi; ++k) {
        std::string_view piece = text.substr(cp_spans[k].first, cp_spans[k].second - cp_spans[k].first);
        for (char c : piece) {
          if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
          w += c;
        }
      }
      words.push_back(std::move(w));
    }
    cp_spans.clear();
  };

  while (i < text.size()) {
    size_t start = i;
    char32_t cp = decode_utf8(text, i);
    if (is_word_separator(cp)) {
      flush();
    } else {
      cp_spans.emplace_back(start, i);
    }
  }
  flush();
  return words;
}

FeatureVector extract_features(const QueryResponse& qr) {
  FeatureVector f;
  f.len = utf8_scalar_count(qr.response);
  f.para = count_nonoverlapping(qr.response, "\n\n");
  f.excl = 0;
  {
    size_t i = 0;
    while (i < qr.response.size()) {
      char32_t cp = decode_utf8(qr.response, i);
      if (cp == U'!') ++f.excl;
    }
  }
  f.bold = count_nonoverlapping(qr.response, "**");

  std::vector<std::string> q_words = tokenize_words(qr.query);
  if (q_words.empty()) {
    f.over = 0.0;
  } else {
    std::vector<std::string> r_words = tokenize_words(qr.response);
    std::set<std::string> r_set(r_words.begin(), r_words.end());
    std::set<std::string> q_set(q_words.begin(), q_words.end());
    int64_t hit = 0;
    for (const std::string& w : q_set)
      if (r_set.count(w)) ++hit;
    f.over = static_cast<double>(hit) / static_cast<double>(q_set.size());
  }
  return f;
}

std::vector<int64_t> byte_tokens(std::string_view text) {
  std::vector<int64_t> toks;
  toks.reserve(text.size());
  for (char c : text) toks.push_back(static_cast<int64_t>(static_cast<unsigned char>(c)));
  return toks;
}

}  // namespace cirm
