#pragma once

// Central finite-difference gradient checks in double precision. The
// analytic side comes from Tape::backward; the numeric side re-evaluates
// the scalar with one coordinate nudged by +-step.

#include "anon/autodiff.hpp"
#include "anon/nn.hpp"
#include "anon/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace anon::testing {

using Builder = std::function<Var<double>(Tape<double>&)>;

struct GradCheckResult {
  double max_rel_error = 0;
  int checked = 0;
  std::string worst;
};

// Coordinates whose true gradient is zero (e.g. attention key biases, which
// softmax ignores) leave only rounding noise in the numeric side; both below
// 1e-8 counts as agreement.
inline double relative_error(double analytic, double numeric) {
  if (std::abs(analytic) < 1e-8 && std::abs(numeric) < 1e-8) return 0.0;
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Checks `coords_per_param` random coordinates of each parameter in `params`
// (all of them when the parameter is smaller).
inline GradCheckResult check_gradients(ParameterSet<double>& params, const Builder& build, int coords_per_param,
                                       std::uint64_t seed, double step = 1e-5) {
  params.zero_grad();
  {
    Tape<double> tape;
    tape.backward(build(tape));
  }
  auto value = [&]() {
    Tape<double> tape;
    return build(tape).scalar();
  };
  Rng rng(seed);
  GradCheckResult res;
  for (auto& p : params) {
    const auto n = static_cast<std::size_t>(p.size());
    const std::size_t k = std::min<std::size_t>(n, static_cast<std::size_t>(coords_per_param));
    for (std::size_t idx : rng.sample_without_replacement(n, k)) {
      double& x = p.value.data()[idx];
      const double saved = x;
      x = saved + step;
      const double fp = value();
      x = saved - step;
      const double fm = value();
      x = saved;
      const double numeric = (fp - fm) / (2 * step);
      const double analytic = p.grad.data()[idx];
      const double err = relative_error(analytic, numeric);
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = p.name + "[" + std::to_string(idx) + "] analytic=" + std::to_string(analytic) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

inline Mat<double> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  return init::normal<double>(rows, cols, rng, scale);
}

}  // namespace anon::testing
