#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace gxe {

double mean(std::span<const double> v);
// unbiased (n-1) sample variance; 0 for n < 2
double sample_variance(std::span<const double> v);

// Pearson correlation; nullopt when either series has zero variance.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// ranks with average ties, 1-based
std::vector<double> average_ranks(std::span<const double> v);

// Spearman rank correlation with average ranks for ties; nullopt when either
// rank series is constant.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

// two-sided p-value for Student's t with df degrees of freedom
double student_t_two_sided_p(double t, double df);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};

// Welch's unequal-variance two-sample t-test.
TTestResult welch_t_test(std::span<const double> a, std::span<const double> b);

// One-sample t-test of `a` against a fixed reference value.
TTestResult one_sample_t_test(std::span<const double> a, double reference);

// regularized incomplete beta I_x(a, b)
double incomplete_beta(double a, double b, double x);

}  // namespace gxe
