#pragma once

// Independent reference implementations used as test oracles. None of
// these call into the library's kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rmt/tensor.hpp"

namespace oracle {

using Mat = std::vector<double>;  // row-major

inline Mat naive_matmul(const Mat& a, const Mat& b, std::size_t r, std::size_t k, std::size_t c) {
  Mat out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < k; ++t) out[i * c + j] += a[i * k + t] * b[t * c + j];
  return out;
}

inline Mat transpose(const Mat& a, std::size_t r, std::size_t c) {
  Mat out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

inline Mat two_pass_layer_norm(const Mat& x, std::size_t r, std::size_t d, const Mat& gain,
                               const Mat& bias, double eps) {
  Mat out(r * d);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x[i * d + j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x[i * d + j] - mean) * (x[i * d + j] - mean);
    var /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      out[i * d + j] = (x[i * d + j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
    }
  }
  return out;
}

inline Mat softmax_row(const Mat& row) {
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  double s = 0;
  Mat out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) s += (out[i] = std::exp(row[i] - mx));
  for (auto& v : out) v /= s;
  return out;
}

inline double log_sum_exp(const double* row, std::size_t n) {
  double mx = row[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(row[i] - mx);
  return mx + std::log(s);
}

inline double gelu_tanh(double x) {
  const double c = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// Single-head scaled dot-product attention for one sequence.
inline Mat attention_1h(const Mat& q, const Mat& k, const Mat& v, std::size_t t, std::size_t d, bool causal) {
  Mat out(t * d, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    Mat scores;
    const std::size_t lim = causal ? i + 1 : t;
    for (std::size_t j = 0; j < lim; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += q[i * d + c] * k[j * d + c];
      scores.push_back(s / std::sqrt(static_cast<double>(d)));
    }
    auto p = softmax_row(scores);
    for (std::size_t j = 0; j < lim; ++j)
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += p[j] * v[j * d + c];
  }
  return out;
}

// Chi-square statistic against a uniform distribution and its upper-tail
// p-value (regularized upper incomplete gamma, series/continued fraction).
inline double gamma_q(double a, double x) {
  if (x <= 0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1) {
    double sum = 1.0 / a, del = sum, ap = a;
    for (int n = 0; n < 1000; ++n) {
      ap += 1;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
  }
  double b = x + 1 - a, c = 1e300, d = 1 / b, h = d;
  for (int i = 1; i < 1000; ++i) {
    const double an = -i * (i - a);
    b += 2;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

inline double chi2_uniform_p(const std::vector<std::size_t>& counts) {
  double total = 0;
  for (auto c : counts) total += static_cast<double>(c);
  const double expected = total / static_cast<double>(counts.size());
  double chi2 = 0;
  for (auto c : counts) chi2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) / expected;
  return gamma_q((static_cast<double>(counts.size()) - 1) / 2.0, chi2 / 2.0);
}

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// d f / d x_i by central differences at step h and h/2 combined by
// Richardson extrapolation, which cancels the O(h^2) truncation term.
template <class F>
double central_difference(F&& f, double& x, double h) {
  const double orig = x;
  auto diff = [&](double step) {
    x = orig + step;
    const double up = f();
    x = orig - step;
    const double down = f();
    x = orig;
    return (up - down) / (2 * step);
  };
  const double coarse = diff(h);
  const double fine = diff(h / 2);
  return (4 * fine - coarse) / 3;
}

// Relative error with an absolute floor for coordinates whose true
// gradient is zero.
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

}  // namespace oracle

namespace testutil {

template <class Real>
std::vector<double> to_double(std::span<const Real> s) {
  return std::vector<double>(s.begin(), s.end());
}

template <class Real>
rmt::Tensor<Real> tensor(rmt::Shape shape, const std::vector<double>& v, bool grad = false) {
  return rmt::Tensor<Real>::from(std::move(shape), std::vector<Real>(v.begin(), v.end()), grad);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rmt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::filesystem::path data_dir() { return std::filesystem::path(RMT_SOURCE_DIR) / "data"; }

}  // namespace testutil
