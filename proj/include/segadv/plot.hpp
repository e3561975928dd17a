#pragma once

#include <filesystem>
#include <vector>

#include "segadv/supervision.hpp"

namespace segadv {

/// Renders total and cross-entropy loss against step into a PNG.
void write_loss_plot(const std::filesystem::path& path, const std::vector<LossBreakdown>& history);

}  // namespace segadv
