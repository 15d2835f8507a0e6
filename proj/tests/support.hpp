#pragma once

// Shared helpers for unit and acceptance tests: random matrices and a central
// finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mikecoco/autograd.hpp"

namespace testing_support {

using mikecoco::ag::Index;
using mikecoco::ag::Matrix;
using mikecoco::ag::Tensor;

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

struct GradCheck {
  double worst_error = 0.0;  // max |analytic - numeric| / max(|analytic|, |numeric|) over failing-floor entries
  double worst_abs = 0.0;
  double largest_numeric = 0.0;  // guards against a vacuous check
  bool ok = true;
  int checked = 0;
};

// Compares d loss / d leaf (already in leaf.grad() after backward) against central
// differences. Passes entries with |a - n| <= abs_floor or relative error <= rel_tol.
inline GradCheck finite_difference(const std::function<double()>& loss, Tensor leaf, double rel_tol = 1e-3,
                                   double abs_floor = 1e-5, double h = 1e-6, int max_entries = 64) {
  GradCheck out;
  const Matrix analytic = leaf.has_grad() ? leaf.grad() : Matrix::Zero(leaf.rows(), leaf.cols());
  Matrix& w = leaf.mutable_value();
  const Index n = w.size();
  const Index stride = std::max<Index>(1, n / max_entries);
  for (Index i = 0; i < n; i += stride) {
    const double keep = w.data()[i];
    w.data()[i] = keep + h;
    const double up = loss();
    w.data()[i] = keep - h;
    const double down = loss();
    w.data()[i] = keep;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.data()[i];
    const double diff = std::abs(a - numeric);
    const double rel = diff / std::max({std::abs(a), std::abs(numeric), 1e-300});
    ++out.checked;
    out.largest_numeric = std::max(out.largest_numeric, std::abs(numeric));
    out.worst_abs = std::max(out.worst_abs, diff);
    if (diff > abs_floor) {
      out.worst_error = std::max(out.worst_error, rel);
      if (rel > rel_tol) out.ok = false;
    }
  }
  return out;
}

}  // namespace testing_support

#include <filesystem>
#include <fstream>
#include <string>

namespace testing_support {

// Fresh directory under the system temp dir, emptied on construction.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / "mikecoco_unit" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace testing_support
