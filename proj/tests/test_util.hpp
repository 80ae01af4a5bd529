#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hilat/rng.hpp"
#include "hilat/tensor.hpp"

namespace hilat_test {

inline hilat::Matrix random_matrix(std::size_t r, std::size_t c, hilat::Rng& rng, double lo = -1.0, double hi = 1.0) {
  hilat::Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform(lo, hi);
  return m;
}

// Max relative error between tape gradients and central differences of a
// scalar function of the given parameters, over every coordinate.
inline double max_fd_error(std::vector<hilat::Parameter*> params,
                           const std::function<hilat::Var(hilat::Tape&)>& f, double eps = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    hilat::Tape t;
    t.backward(f(t));
  }
  double worst = 0.0;
  for (auto* p : params) {
    const hilat::Matrix g = p->grad;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double x = p->value[i];
      p->value[i] = x + eps;
      hilat::Tape t1;
      const double fp = f(t1).value()(0, 0);
      p->value[i] = x - eps;
      hilat::Tape t2;
      const double fm = f(t2).value()(0, 0);
      p->value[i] = x;
      const double num = (fp - fm) / (2 * eps);
      const double rel = std::fabs(num - g[i]) / std::max({std::fabs(num), std::fabs(g[i]), 1e-8});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Fresh per-test scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hilat_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace hilat_test
