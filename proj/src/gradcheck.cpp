#include "uidkat/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace uidkat {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_error);
  return m;
}

template <typename T>
GradCheckReport finite_diff_check(const std::function<double()>& loss,
                                  const std::vector<GradTarget<T>>& targets,
                                  const GradCheckOptions& opts) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng = Rng(opts.seed).stream("gradcheck");
  for (const auto& target : targets) {
    expect_shape(target.analytic->shape(), target.value->shape(), target.name.c_str());
    GradCheckGroup group;
    group.name = target.name;
    const std::size_t n = target.value->numel();
    std::vector<std::size_t> indices;
    if (opts.max_entries == 0 || n <= opts.max_entries) {
      indices.resize(n);
      for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    } else {
      auto perm = rng.permutation(n);
      indices.assign(perm.begin(), perm.begin() + static_cast<long>(opts.max_entries));
      std::sort(indices.begin(), indices.end());
    }
    for (std::size_t idx : indices) {
      T& v = (*target.value)[idx];
      const T saved = v;
      const auto at = [&](double offset) {
        v = static_cast<T>(saved + offset);
        const double f = loss();
        v = saved;
        return f;
      };
      const double d1 = at(opts.h) - at(-opts.h);
      const double numeric = opts.fourth_order
                                 ? (8.0 * d1 - (at(2 * opts.h) - at(-2 * opts.h))) / (12.0 * opts.h)
                                 : d1 / (2.0 * opts.h);
      const double analytic = (*target.analytic)[idx];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++group.checked;
      if (rel >= group.max_rel_error) {
        group.max_rel_error = rel;
        group.worst_index = idx;
        group.analytic = analytic;
        group.numeric = numeric;
      }
    }
    if (group.max_rel_error > opts.tolerance && report.passed) {
      report.passed = false;
      std::ostringstream os;
      os << "gradient mismatch in '" << group.name << "' at index " << group.worst_index
         << ": analytic " << group.analytic << " vs numeric " << group.numeric
         << " (relative error " << group.max_rel_error << " > " << opts.tolerance << ")";
      report.failure = os.str();
    }
    report.groups.push_back(group);
  }
  return report;
}

template <typename T>
GradCheckReport check_op(
    const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& forward,
    const std::function<std::vector<Tensor<T>>(const std::vector<Tensor<T>>&, const Tensor<T>&)>&
        backward,
    std::vector<Tensor<T>> inputs, const std::vector<std::string>& names,
    const GradCheckOptions& opts) {
  Rng rng = Rng(opts.seed).stream("gradcheck-upstream");
  const Tensor<T> out = forward(inputs);
  Tensor<T> upstream = Tensor<T>::zeros_like(out);
  for (auto& u : upstream.vec()) u = static_cast<T>(rng.uniform(-1.0, 1.0));
  const std::vector<Tensor<T>> grads = backward(inputs, upstream);
  if (grads.size() != inputs.size() || names.size() != inputs.size()) {
    throw ShapeError("check_op: backward must return one gradient per named input");
  }
  auto loss = [&]() {
    const Tensor<T> y = forward(inputs);
    double s = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * upstream[i];
    return s;
  };
  std::vector<GradTarget<T>> targets;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    targets.push_back({names[i], &inputs[i], &grads[i]});
  }
  return finite_diff_check<T>(loss, targets, opts);
}

template GradCheckReport finite_diff_check(const std::function<double()>&,
                                           const std::vector<GradTarget<float>>&,
                                           const GradCheckOptions&);
template GradCheckReport finite_diff_check(const std::function<double()>&,
                                           const std::vector<GradTarget<double>>&,
                                           const GradCheckOptions&);
template GradCheckReport check_op(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>&,
    const std::function<std::vector<Tensor<double>>(const std::vector<Tensor<double>>&,
                                                    const Tensor<double>&)>&,
    std::vector<Tensor<double>>, const std::vector<std::string>&, const GradCheckOptions&);

}  // namespace uidkat
