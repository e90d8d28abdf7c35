#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "osm/autodiff/tape.hpp"

namespace osm::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
};

// |a - b| / max(|a|, |b|, 1e-6): relative, with a floor so that two
// vanishing gradients compare as equal.
double relative_error(double analytic, double numeric);

// Compares tape gradients of the scalar built by `f` with central
// differences on at most `max_coords` coordinates (sampled deterministically
// from `seed` when there are more). Parameter values are restored afterwards;
// Parameter::grad holds the analytic gradient on return.
GradCheckReport grad_check(std::span<Parameter<double>* const> params,
                           const std::function<Var<double>(Tape<double>&)>& f,
                           double eps = 1e-5, std::size_t max_coords = 200,
                           std::uint64_t seed = 1);

}  // namespace osm::ad
