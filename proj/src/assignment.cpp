#include "rotaudit/assignment.hpp"

#include <limits>
#include <stdexcept>

namespace rotaudit {

std::vector<int> min_cost_assignment(const MatD& cost) {
  if (cost.rows() != cost.cols()) throw std::invalid_argument("min_cost_assignment: cost must be square");
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // 1-based potentials u (rows), v (cols); way[] holds the augmenting path.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> col(n, -1);
  for (int j = 1; j <= n; ++j) col[p[j] - 1] = j - 1;
  return col;
}

std::vector<int> max_score_assignment(const MatD& score) {
  return min_cost_assignment(-score);
}

double assignment_total(const MatD& m, const std::vector<int>& cols) {
  double total = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i) total += m(static_cast<Eigen::Index>(i), cols[i]);
  return total;
}

}  // namespace rotaudit
