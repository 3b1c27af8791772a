#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cirm {

// The five surface-level response properties a reward model can latch onto
// instead of quality. Enum order is the canonical order used everywhere
// (arrays, manifests, reports).
enum class Bias : uint8_t { len = 0, para = 1, over = 2, excl = 3, bold = 4 };

inline constexpr int kBiasCount = 5;
inline constexpr Bias kAllBiases[kBiasCount] = {Bias::len, Bias::para, Bias::over, Bias::excl,
                                                Bias::bold};

std::string_view bias_name(Bias b);
Bias bias_from_name(std::string_view name);

struct QueryResponse {
  std::string query;
  std::string response;
};

// Feature quantities for one response (relative to its query for `over`):
//   len  - response length in Unicode scalar values
//   para - count of non-overlapping "\n\n" occurrences
//   over - fraction of query words that also appear in the response
//   excl - count of '!' code points
//   bold - count of non-overlapping "**" occurrences
struct FeatureVector {
  int64_t len = 0;
  int64_t para = 0;
  double over = 0.0;
  int64_t excl = 0;
  int64_t bold = 0;

  double value(Bias b) const;
  bool operator==(const FeatureVector&) const = default;
};

FeatureVector extract_features(const QueryResponse& qr);

// Word tokenization shared by `over` and the corpus generator: split on
// Unicode whitespace, lowercase ASCII letters, strip leading/trailing ASCII
// punctuation, drop empties.
std::vector<std::string> tokenize_words(std::string_view text);

// Number of Unicode scalar values; throws Error("invalid_utf8") on malformed
// input (inputs are required to be valid UTF-8).
int64_t utf8_scalar_count(std::string_view s);

int64_t count_nonoverlapping(std::string_view text, std::string_view needle);

// Deterministic prompt construction: the exact token sequence the model sees.
struct PromptTemplate {
  std::string prefix = "Q: ";
  std::string middle = "\nA: ";

  std::string render(std::string_view query, std::string_view response) const {
    std::string s;
    s.reserve(prefix.size() + query.size() + middle.size() + response.size());
    s += prefix;
    s += query;
    s += middle;
    s += response;
    return s;
  }
};

// Byte-level tokenization: one token per byte, values 0..255.
std::vector<int64_t> byte_tokens(std::string_view text);

}  // namespace cirm
