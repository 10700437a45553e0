#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace twofold::stats {

/// McNemar statistic with continuity correction:
///   max(0, |b - c| - 1)^2 / (b + c)
/// b counts examples model A got wrong and B right, c the reverse.
double mcnemar_chi2(std::uint64_t b, std::uint64_t c);

/// Upper tail of chi-square with one degree of freedom, erfc(sqrt(x / 2)).
double chi2_pvalue_df1(double x);

/// Two-sided exact binomial p-value: min(1, 2 P(X <= min(b, c))) for
/// X ~ Binomial(b + c, 1/2). Integer accumulation up to b + c = 64, log-space
/// summation beyond.
double exact_binomial_p(std::uint64_t b, std::uint64_t c);

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
/// Ties are dropped by the caller. Returns 1 when there are no trials.
double sign_test_greater(std::uint64_t wins, std::uint64_t losses);

enum class TestKind { chi2_continuity, exact_binomial };
std::string_view to_string(TestKind k);

inline constexpr std::uint64_t kDefaultExactThreshold = 25;

struct PairedComparison {
  std::uint64_t n00 = 0;  // both wrong
  std::uint64_t n01 = 0;  // A wrong, B right  (b)
  std::uint64_t n10 = 0;  // A right, B wrong  (c)
  std::uint64_t n11 = 0;  // both right
  bool degenerate = false;  // no discordant pairs
  TestKind chosen_test = TestKind::exact_binomial;
  double chi2 = 0.0;
  double chi2_p = 1.0;
  double exact_p = 1.0;
  double p_value = 1.0;  // from chosen_test

  std::uint64_t b() const noexcept { return n01; }
  std::uint64_t c() const noexcept { return n10; }
  std::uint64_t total() const noexcept { return n00 + n01 + n10 + n11; }
};

/// Tallies joint correctness of two prediction vectors against shared labels.
/// The exact test is chosen when b + c < exact_threshold.
PairedComparison compare_models(std::span<const std::uint8_t> preds_a,
                                std::span<const std::uint8_t> preds_b,
                                std::span<const std::uint8_t> labels,
                                std::uint64_t exact_threshold = kDefaultExactThreshold);

}  // namespace twofold::stats
