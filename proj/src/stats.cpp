#include "twofold/stats.hpp"

#include "twofold/error.hpp"

#include <algorithm>
#include <cmath>

namespace twofold::stats {

double mcnemar_chi2(std::uint64_t b, std::uint64_t c) {
  if (b + c == 0) throw ContractViolation("McNemar statistic undefined without discordant pairs");
  const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c));
  const double corrected = std::max(0.0, diff - 1.0);
  return corrected * corrected / static_cast<double>(b + c);
}

double chi2_pvalue_df1(double x) {
  if (!(x >= 0.0)) throw ContractViolation("chi-square statistic must be non-negative");
  return std::erfc(std::sqrt(x / 2.0));
}

namespace {

// P(X <= k) for X ~ Binomial(n, 1/2).
double binomial_half_cdf(std::uint64_t n, std::uint64_t k) {
  if (k >= n) return 1.0;
  if (n <= 64) {
    unsigned __int128 term = 1;  // C(n, 0)
    unsigned __int128 sum = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
      term = term * (n - i + 1) / i;
      sum += term;
    }
    return static_cast<double>(static_cast<long double>(sum) / std::ldexp(1.0L, static_cast<int>(n)));
  }
  // Log-space with a running max for large n.
  const double log_half_n = static_cast<double>(n) * std::log(0.5);
  double acc = 0.0;
  const double lg_n1 = std::lgamma(static_cast<double>(n) + 1.0);
  double peak = -INFINITY;
  for (std::uint64_t i = 0; i <= k; ++i) {
    const double lt = lg_n1 - std::lgamma(static_cast<double>(i) + 1.0) -
                      std::lgamma(static_cast<double>(n - i) + 1.0) + log_half_n;
    if (lt > peak) {
      acc = acc * std::exp(peak - lt) + 1.0;
      peak = lt;
    } else {
      acc += std::exp(lt - peak);
    }
  }
  return std::min(1.0, acc * std::exp(peak));
}

}  // namespace

double exact_binomial_p(std::uint64_t b, std::uint64_t c) {
  if (b + c == 0) throw ContractViolation("exact test undefined without discordant pairs");
  return std::min(1.0, 2.0 * binomial_half_cdf(b + c, std::min(b, c)));
}

double sign_test_greater(std::uint64_t wins, std::uint64_t losses) {
  const std::uint64_t n = wins + losses;
  if (n == 0) return 1.0;
  if (wins == 0) return 1.0;
  // P(X >= wins) = P(X <= losses) by symmetry.
  return binomial_half_cdf(n, losses);
}

std::string_view to_string(TestKind k) {
  return k == TestKind::chi2_continuity ? "chi2_continuity" : "exact_binomial";
}

PairedComparison compare_models(std::span<const std::uint8_t> preds_a,
                                std::span<const std::uint8_t> preds_b,
                                std::span<const std::uint8_t> labels,
                                std::uint64_t exact_threshold) {
  if (preds_a.size() != labels.size() || preds_b.size() != labels.size())
    throw DimensionMismatch("paired comparison inputs differ in length");
  if (labels.empty()) throw ContractViolation("paired comparison needs examples");
  PairedComparison r;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool a_ok = (preds_a[i] != 0) == (labels[i] != 0);
    const bool b_ok = (preds_b[i] != 0) == (labels[i] != 0);
    if (a_ok) (b_ok ? r.n11 : r.n10) += 1;
    else (b_ok ? r.n01 : r.n00) += 1;
  }
  const std::uint64_t discordant = r.n01 + r.n10;
  if (discordant == 0) {
    r.degenerate = true;
    return r;
  }
  r.chi2 = mcnemar_chi2(r.n01, r.n10);
  r.chi2_p = chi2_pvalue_df1(r.chi2);
  r.exact_p = exact_binomial_p(r.n01, r.n10);
  r.chosen_test = discordant < exact_threshold ? TestKind::exact_binomial : TestKind::chi2_continuity;
  r.p_value = r.chosen_test == TestKind::exact_binomial ? r.exact_p : r.chi2_p;
  return r;
}

}  // namespace twofold::stats
