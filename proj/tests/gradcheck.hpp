#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "prerec/autograd.hpp"

namespace testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Central differences on `per_param` random coordinates of every parameter.
// `build` records the scalar loss on the given tape.
inline GradCheckResult grad_check(std::vector<prerec::ag::Param*> params,
                                  const std::function<prerec::ag::Var(prerec::ag::Tape&)>& build, std::size_t per_param,
                                  std::uint64_t seed, double step = 1e-4) {
  for (auto* p : params) p->zero_grad();
  {
    prerec::ag::Tape tape;
    tape.backward(build(tape));
  }
  auto eval = [&] {
    prerec::ag::Tape tape(false);
    return build(tape).scalar();
  };
  std::mt19937_64 rng(seed);
  GradCheckResult r;
  for (auto* p : params) {
    if (p->value.size() == 0) continue;
    std::uniform_int_distribution<std::size_t> pick(0, p->value.size() - 1);
    for (std::size_t k = 0; k < per_param; ++k) {
      const std::size_t i = pick(rng);
      const double orig = p->value.data[i];
      p->value.data[i] = orig + step;
      const double up = eval();
      p->value.data[i] = orig - step;
      const double down = eval();
      p->value.data[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p->grad.data[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic) / denom);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace testing
