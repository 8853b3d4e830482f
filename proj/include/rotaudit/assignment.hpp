#pragma once

#include <vector>

#include "rotaudit/linalg.hpp"

namespace rotaudit {

/// Optimal linear assignment on a square cost matrix (Hungarian method with
/// potentials, O(n^3)). Returns col[i], the column assigned to row i.
std::vector<int> min_cost_assignment(const MatD& cost);

/// Same, maximising the total score.
std::vector<int> max_score_assignment(const MatD& score);

double assignment_total(const MatD& m, const std::vector<int>& cols);

}  // namespace rotaudit
