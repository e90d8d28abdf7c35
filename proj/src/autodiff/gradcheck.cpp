#include "osm/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace osm::ad {
namespace {

double evaluate(const std::function<Var<double>(Tape<double>&)>& f) {
  Tape<double> tape;
  const double v = f(tape).value().item();
  if (!std::isfinite(v)) throw EvaluationError("grad_check: objective is not finite");
  return v;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(std::span<Parameter<double>* const> params,
                           const std::function<Var<double>(Tape<double>&)>& f, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = f(tape);
    if (!std::isfinite(loss.value().item())) {
      throw EvaluationError("grad_check: objective is not finite");
    }
    tape.backward(loss);
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k]->value.size(); ++i) coords.emplace_back(k, i);
  if (coords.size() > max_coords) {
    CounterRng rng(seed);
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + rng.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }

  GradCheckReport report;
  report.coordinates = coords.size();
  for (const auto& [k, i] : coords) {
    double& x = params[k]->value[i];
    const double saved = x;
    x = saved + eps;
    const double up = evaluate(f);
    x = saved - eps;
    const double down = evaluate(f);
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(params[k]->grad[i], numeric);
    if (err > report.max_rel_error || report.worst_parameter.empty()) {
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = params[k]->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace osm::ad
