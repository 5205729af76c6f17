#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "pcan/errors.hpp"
#include "pcan/tape.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

struct FdOptions {
  double step = 1e-5;            // central-difference half width
  double kink_threshold = 1e-6;  // margin below which a sample is flagged
};

template <typename T>
struct FdEntry {
  std::string name;
  T rel_err = T{0};  // ||analytic - numeric|| / max(1e-8, ||analytic|| + ||numeric||)
  T min_kink_margin = std::numeric_limits<T>::infinity();
  bool excluded = false;  // too close to a relu/max kink to trust the oracle
};

template <typename T>
struct FdReport {
  std::vector<FdEntry<T>> entries;
  T worst = T{0};  // max relative error over non-excluded entries
  T tolerance = T{0};
  bool passed = false;
  bool any_excluded = false;

  bool within(T tol) const { return worst < tol; }
};

// Builds the scalar objective from registered parameters. Must be
// deterministic: the checker evaluates it repeatedly.
template <typename T>
using GraphBuilder = std::function<VarId(Tape<T>&, const ParamVars&)>;

// Compare reverse-mode gradients against central finite differences.
// Per parameter tensor: rel_err = ||analytic - numeric|| /
// max(1e-8, ||analytic|| + ||numeric||) over the whole gradient. The norm
// comparison is deliberate: an elementwise ratio on a ~1e-7 gradient entry
// amplifies the difference oracle's own round-off (~eps*|f|/h) past any
// useful tolerance even when backward is exact. Entries whose evaluations
// came within kink_threshold of a relu/max kink are flagged excluded rather
// than failed, since the numeric oracle is unreliable there.
template <typename T>
FdReport<T> finite_diff_check(const GraphBuilder<T>& build, const ParamStore<T>& params,
                              T tolerance, const FdOptions& opt = {}) {
  auto evaluate = [&](const ParamStore<T>& p, T* margin) {
    Tape<T> tape;
    ParamVars pv = tape.register_params(p);
    VarId out = build(tape, pv);
    if (margin) *margin = tape.min_kink_margin();
    return tape.scalar(out);
  };

  // Two evaluations must agree bit for bit, otherwise the whole comparison
  // is meaningless.
  T center_margin = std::numeric_limits<T>::infinity();
  const T v0 = evaluate(params, &center_margin);
  const T v1 = evaluate(params, nullptr);
  if (v0 != v1) throw CheckError("finite_diff_check: function is not deterministic");

  std::map<std::string, Tensor<T>> analytic;
  {
    Tape<T> tape;
    ParamVars pv = tape.register_params(params);
    VarId out = build(tape, pv);
    analytic = grad(tape, out);
  }

  const T h = static_cast<T>(opt.step);
  const T kink_eps = static_cast<T>(opt.kink_threshold);

  FdReport<T> report;
  ParamStore<T> work = params;
  for (const auto& [name, base] : params) {
    FdEntry<T> entry;
    entry.name = name;
    entry.min_kink_margin = center_margin;
    const Tensor<T>& ga = analytic.at(name);
    Tensor<T>& wt = work.at(name);
    T na2 = T{0}, nn2 = T{0}, nd2 = T{0};
    for (std::size_t i = 0; i < base.size(); ++i) {
      const T orig = base.values()[i];
      T m_plus = std::numeric_limits<T>::infinity();
      T m_minus = std::numeric_limits<T>::infinity();
      wt.values()[i] = orig + h;
      const T fp = evaluate(work, &m_plus);
      wt.values()[i] = orig - h;
      const T fm = evaluate(work, &m_minus);
      wt.values()[i] = orig;
      const T numeric = (fp - fm) / (T{2} * h);
      const T a = ga.values()[i];
      na2 += a * a;
      nn2 += numeric * numeric;
      nd2 += (a - numeric) * (a - numeric);
      entry.min_kink_margin = std::min({entry.min_kink_margin, m_plus, m_minus});
    }
    entry.rel_err = std::sqrt(nd2) /
                    std::max(static_cast<T>(1e-8), std::sqrt(na2) + std::sqrt(nn2));
    entry.excluded = entry.min_kink_margin < kink_eps;
    report.any_excluded = report.any_excluded || entry.excluded;
    if (!entry.excluded) report.worst = std::max(report.worst, entry.rel_err);
    report.entries.push_back(std::move(entry));
  }
  report.tolerance = tolerance;
  report.passed = report.within(tolerance);
  return report;
}

}  // namespace pcan
