#pragma once

#include <iosfwd>
#include <string>

#include "structdgp/model.hpp"

namespace sdgp {

/// Binary checkpoint, all integers and reals little-endian:
///   "SDGPCKPT"                    8 bytes
///   version                       u32 (currently 1)
///   structure                     u32 (0 mf, 1 star, 2 fc)
///   input_dim, inducing, layers   u32 each
///   widths                        u32 per layer
///   count                         u64, number of reals that follow
///   jitter, log_noise             f64
///   per layer: log lengthscales, log variance, inducing inputs (column-major)
///   mu_M
///   factor blocks in pattern order: diagonal blocks as their lower triangle
///     column by column, other blocks all M*M entries column-major
///   per hidden layer: mean map (column-major)
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const DGPModel& model, std::ostream& out);
DGPModel load_checkpoint(std::istream& in);
void save_checkpoint(const DGPModel& model, const std::string& path);
DGPModel load_checkpoint(const std::string& path);

}  // namespace sdgp
