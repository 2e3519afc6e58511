#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "divot/errors.hpp"
#include "divot/tape.hpp"

// Gradient verification by central finite differences. Runs in double so the
// truncation/roundoff floor sits well below the tolerances the tests assert.

namespace divot::ad {

// Result of comparing analytic gradients against finite differences for one
// input tensor.
struct FdReport {
  double max_rel_err = 0.0;  // |analytic - numeric| / max(1, |analytic|, |numeric|)
  double max_abs_err = 0.0;
  int64_t worst_index = -1;
};

// f builds the graph from scratch on the given tape and returns a scalar
// loss. `x` is the flattened input being probed; the function must copy it
// into the tape itself (via input()). Each call sees a freshly reset tape.
using FdFn = std::function<Ref<double>(Tape<double>&, const std::vector<double>&)>;

// Central differences: (f(x+h) - f(x-h)) / 2h per coordinate, compared
// against the analytic gradient from one backward pass. Throws on non-finite
// values so silent NaN never reads as a pass.
inline FdReport finite_difference_check(const FdFn& f, std::vector<double> x, double h = 1e-5) {
  Tape<double> tape;

  // Analytic pass. The probed input is the first tensor f creates with
  // requires_grad, which f must arrange; we locate it by convention: f
  // returns the loss, and the probe input is node 0.
  Ref<double> loss = f(tape, x);
  tape.backward(loss);
  Ref<double> probe{&tape, 0};
  if (probe.count() != static_cast<int64_t>(x.size()))
    fail_runtime("finite_difference_check: probe node size mismatch (f must create the probed input first)");
  // A missing grad buffer is legitimate (gradient identically zero).
  std::vector<double> analytic(x.size(), 0.0);
  if (tape.has_grad(probe.id))
    for (size_t i = 0; i < x.size(); ++i) analytic[i] = probe.grad()[i];

  FdReport rep;
  for (size_t i = 0; i < x.size(); ++i) {
    const double save = x[i];
    x[i] = save + h;
    tape.reset();
    const double fp = f(tape, x).scalar();
    x[i] = save - h;
    tape.reset();
    const double fm = f(tape, x).scalar();
    x[i] = save;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail_runtime("finite_difference_check: non-finite loss at coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * h);
    if (!std::isfinite(analytic[i]))
      fail_runtime("finite_difference_check: non-finite analytic gradient at coordinate " + std::to_string(i));
    const double abs_err = std::abs(analytic[i] - numeric);
    const double rel_err = abs_err / std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    if (rel_err > rep.max_rel_err) {
      rep.max_rel_err = rel_err;
      rep.worst_index = static_cast<int64_t>(i);
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
  }
  return rep;
}

}  // namespace divot::ad
