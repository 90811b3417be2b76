#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>

namespace eamser {

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 1e-4;

  bool passed() const { return max_rel_error <= tolerance; }

  void merge(const GradCheckReport& other) {
    if (other.max_rel_error > max_rel_error) {
      max_rel_error = other.max_rel_error;
      worst_index = coordinates + other.worst_index;
      worst_analytic = other.worst_analytic;
      worst_numeric = other.worst_numeric;
    }
    coordinates += other.coordinates;
  }
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences of `loss` over every coordinate of `param`, which is
/// perturbed in place and restored. `analytic` holds dloss/dparam in the same
/// layout.
template <typename Loss>
GradCheckReport grad_check(Loss&& loss, std::span<double> param, std::span<const double> analytic,
                           double h = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.tolerance = tol;
  report.coordinates = param.size();
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + h;
    const double up = loss();
    param[i] = saved - h;
    const double down = loss();
    param[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double rel = relative_error(analytic[i], numeric);
    if (rel > report.max_rel_error || i == 0) {
      report.max_rel_error = std::max(rel, report.max_rel_error);
      report.worst_index = i;
      report.worst_analytic = analytic[i];
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace eamser
