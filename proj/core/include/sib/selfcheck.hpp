#pragma once

#include <cstdint>
#include <vector>

#include "sib/gradcheck.hpp"
#include "sib/models.hpp"
#include "sib/sibcore.hpp"
#include "sib/tasks.hpp"

namespace sib {

/// Gradient checks of every differentiable op and of the full unrolled
/// inner loop (toy head, cosine head with prototype init, and the
/// self-supervised init), against central finite differences.
std::vector<ad::GradCheckResult> gradcheck_suite(std::uint64_t seed = 7, double tolerance = 1e-6);

/// Small classification episode with `ways` classes, one shot each and
/// `query` query points in `dim` dimensions.
Episode small_classification_episode(std::size_t ways, std::size_t dim, std::size_t query, std::uint64_t seed);

/// A model whose parameters are all perturbed away from their (partly zero)
/// initial values, so that every path of the graph carries gradient.
MetaModel perturbed_model(const ModelSpec& spec, std::uint64_t seed, double scale = 0.3);

}  // namespace sib
