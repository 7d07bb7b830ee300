#pragma once

// 8 x 8 per-cell loss bookkeeping and loss-proportional pixel allocation.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "idf/renderer.hpp"

namespace idf {

struct CellLossGrid {
  static constexpr int kSide = 8;
  static constexpr int kCells = kSide * kSide;

  std::array<double, kCells> loss;
  std::array<int, kCells> count{};

  CellLossGrid() { loss.fill(1.0); }

  // Inverse of cell_span: cell i covers [floor(i n / 8), floor((i + 1) n / 8)).
  static int cell_of(int row, int col, int width, int height) {
    const int cr = std::min(kSide - 1, (kSide * (row + 1) - 1) / height);
    const int cc = std::min(kSide - 1, (kSide * (col + 1) - 1) / width);
    return cr * kSide + cc;
  }

  // Cells without samples keep their previous loss.
  void refresh(std::span<const Pixel> pixels, std::span<const double> per_pixel_loss, int width,
               int height) {
    std::array<double, kCells> acc{};
    std::array<int, kCells> n{};
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      const int c = cell_of(pixels[i].row, pixels[i].col, width, height);
      acc[c] += per_pixel_loss[i];
      ++n[c];
    }
    for (int c = 0; c < kCells; ++c) {
      if (n[c] > 0) loss[c] = acc[c] / n[c];
      count[c] = n[c];
    }
  }
};

// Per-cell sample counts. score_c is the cell loss, or 1/(loss + eps) when
// inverted. n_c = max(1, round(B score_c / sum score)); a shortfall is added to
// cells in descending score order, an excess is removed one at a time from the
// largest allocation (lowest score among ties), which keeps the allocation
// monotone in score and every cell at one or more.
inline std::array<int, CellLossGrid::kCells> allocate_cells(const CellLossGrid& grid, int budget,
                                                            bool invert, double eps = 1e-6) {
  constexpr int K = CellLossGrid::kCells;
  require(budget >= K, "active sampling needs a budget of at least one sample per cell");
  std::array<double, K> score;
  for (int c = 0; c < K; ++c) {
    const double l = std::max(0.0, grid.loss[c]);
    score[c] = invert ? 1.0 / (l + eps) : l;
  }
  double total = std::accumulate(score.begin(), score.end(), 0.0);
  if (!(total > 0) || !std::isfinite(total)) {
    score.fill(1.0);
    total = K;
  }
  std::array<int, K> n;
  for (int c = 0; c < K; ++c)
    n[c] = std::max(1, static_cast<int>(std::lround(budget * score[c] / total)));

  std::array<int, K> order;
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });

  int residual = budget - std::accumulate(n.begin(), n.end(), 0);
  for (int i = 0; residual > 0; i = (i + 1) % K, --residual) ++n[order[i]];
  while (residual < 0) {
    int pick = -1;
    for (int i = K - 1; i >= 0; --i) {  // lowest score first among equal counts
      const int c = order[i];
      if (pick < 0 || n[c] > n[pick]) pick = c;
    }
    --n[pick];
    ++residual;
  }
  return n;
}

inline std::pair<int, int> cell_span(int index, int extent) {
  return {index * extent / CellLossGrid::kSide, (index + 1) * extent / CellLossGrid::kSide};
}

// Draws `budget` pixels: allocation per allocate_cells, uniform within a cell.
// Budgets below one per cell fall back to drawing cells with probability
// proportional to their score.
inline std::vector<Pixel> active_sample_pixels(const CellLossGrid& grid, int budget, bool invert,
                                               int width, int height, std::mt19937_64& rng,
                                               double eps = 1e-6) {
  constexpr int K = CellLossGrid::kCells;
  require(width >= CellLossGrid::kSide && height >= CellLossGrid::kSide,
          "active sampling needs at least one pixel per cell");
  std::array<int, K> alloc{};
  if (budget >= K) {
    alloc = allocate_cells(grid, budget, invert, eps);
  } else {
    std::array<double, K> score;
    for (int c = 0; c < K; ++c) {
      const double l = std::max(0.0, grid.loss[c]);
      score[c] = invert ? 1.0 / (l + eps) : l + eps;
    }
    std::discrete_distribution<int> pick(score.begin(), score.end());
    for (int i = 0; i < budget; ++i) ++alloc[pick(rng)];
  }
  std::vector<Pixel> out;
  out.reserve(static_cast<std::size_t>(budget));
  for (int c = 0; c < K; ++c) {
    auto [r0, r1] = cell_span(c / CellLossGrid::kSide, height);
    auto [c0, c1] = cell_span(c % CellLossGrid::kSide, width);
    std::uniform_int_distribution<int> ur(r0, r1 - 1), uc(c0, c1 - 1);
    for (int i = 0; i < alloc[c]; ++i) out.push_back({ur(rng), uc(rng)});
  }
  return out;
}

}  // namespace idf
