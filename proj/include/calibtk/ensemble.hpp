#pragma once

#include <optional>
#include <vector>

#include "calibtk/calibration.hpp"
#include "calibtk/predictions.hpp"

namespace calibtk {

// Elementwise mean of aligned member probabilities. Members must agree on
// ids, labels, groups and shape.
ProbabilitySet combine(const std::vector<ProbabilitySet>& members);

// Fits one temperature per member on its validation set, applies it, then
// combines. vals must have either one entry (shared validation set) or one
// per member.
ProbabilitySet ensemble_of_calibrated(const std::vector<PredictionSet>& members,
                                      const std::vector<PredictionSet>& vals);

// One shared temperature minimizing the NLL of the combined, T-scaled member
// predictions; same search protocol as fit_temperature. Members are aligned
// prediction sets on validation rows; when val_ids is given, only those rows
// enter the objective.
Calibrator fit_shared_temperature(
    const std::vector<PredictionSet>& members,
    const std::optional<std::vector<std::string>>& val_ids = std::nullopt);

}  // namespace calibtk
