#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pdisco/errors.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

struct Keypoint {
  int part_id = 0;     // 1-based, matching mask pixel values
  double x = 0.0;      // normalized column in [0,1]
  double y = 0.0;      // normalized row in [0,1]
  bool visible = true;
};

// Hard labels over the patch grid: 0 = background, k = foreground part k.
struct PartAssignment {
  int h = 0, w = 0;
  std::vector<int> labels;

  int at(int i, int j) const { return labels[static_cast<std::size_t>(i) * w + j]; }
};

// Argmax over channels; ties go to the lowest channel index, so a foreground
// channel beats the background channel on an exact tie.
inline PartAssignment part_assignment(const Tensor& attention) {
  if (attention.rank() != 3) throw ConfigError("part_assignment expects (K+1,H,W)");
  const int channels = attention.dim(0), h = attention.dim(1), w = attention.dim(2);
  PartAssignment out{h, w, std::vector<int>(static_cast<std::size_t>(h) * w)};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      int best = 0;
      for (int k = 1; k < channels; ++k)
        if (attention.at3(k, i, j) > attention.at3(best, i, j)) best = k;
      out.labels[static_cast<std::size_t>(i) * w + j] = (best == channels - 1) ? 0 : best + 1;
    }
  return out;
}

inline PartAssignment upsample_nearest(const PartAssignment& a, int out_h, int out_w) {
  PartAssignment out{out_h, out_w, std::vector<int>(static_cast<std::size_t>(out_h) * out_w)};
  for (int i = 0; i < out_h; ++i) {
    const int si = std::min(a.h - 1, i * a.h / out_h);
    for (int j = 0; j < out_w; ++j) {
      const int sj = std::min(a.w - 1, j * a.w / out_w);
      out.labels[static_cast<std::size_t>(i) * out_w + j] = a.at(si, sj);
    }
  }
  return out;
}

// Attention-mass centroid per foreground part, in normalized 1-based grid
// coordinates; absent when the channel carries (almost) no mass.
struct Centroid {
  double y = 0.0, x = 0.0;
  bool present = false;
};

inline std::vector<Centroid> centroids(const Tensor& attention) {
  if (attention.rank() != 3) throw ConfigError("centroids expects (K+1,H,W)");
  const int k = attention.dim(0) - 1, h = attention.dim(1), w = attention.dim(2);
  std::vector<Centroid> out(static_cast<std::size_t>(k));
  for (int part = 0; part < k; ++part) {
    double mass = 0.0, my = 0.0, mx = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double a = attention.at3(part, i, j);
        mass += a;
        my += a * (i + 1);
        mx += a * (j + 1);
      }
    if (mass >= 1e-6) out[part] = Centroid{my / mass / h, mx / mass / w, true};
  }
  return out;
}

// ---- clustering agreement ----

namespace detail {

// Joint label counts. Labels are remapped to dense indices by first-seen
// order; small label sets (the common case) run without heap allocation.
struct Contingency {
  static constexpr int kInline = 16;

  int rows = 0, cols = 0;
  double n = 0.0;
  double inline_cells[kInline * kInline];
  std::vector<double> heap_cells;

  double* cells() { return heap_cells.empty() ? inline_cells : heap_cells.data(); }
  const double* cells() const { return heap_cells.empty() ? inline_cells : heap_cells.data(); }
  double cell(int r, int c) const { return cells()[r * cols + c]; }

  double row_sum(int r) const {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += cell(r, c);
    return s;
  }
  double col_sum(int c) const {
    double s = 0.0;
    for (int r = 0; r < rows; ++r) s += cell(r, c);
    return s;
  }
};

// Dense index per distinct label, first-seen order. Stays on the stack while
// the label alphabet is small, which covers every use in this engine.
struct LabelIndex {
  int inline_labels[Contingency::kInline];
  std::vector<int> heap_labels;
  int count = 0;

  int index_of(int v) {
    const int* labels = heap_labels.empty() ? inline_labels : heap_labels.data();
    for (int i = 0; i < count; ++i)
      if (labels[i] == v) return i;
    if (heap_labels.empty() && count < Contingency::kInline) {
      inline_labels[count] = v;
    } else {
      if (heap_labels.empty()) heap_labels.assign(inline_labels, inline_labels + count);
      heap_labels.push_back(v);
    }
    return count++;
  }
};

inline Contingency contingency_table(const std::vector<int>& a, const std::vector<int>& b) {
  LabelIndex la, lb;
  for (int v : a) la.index_of(v);
  for (int v : b) lb.index_of(v);
  Contingency c;
  c.rows = la.count;
  c.cols = lb.count;
  c.n = static_cast<double>(a.size());
  if (c.rows * c.cols > Contingency::kInline * Contingency::kInline)
    c.heap_cells.assign(static_cast<std::size_t>(c.rows) * c.cols, 0.0);
  else
    std::fill(c.inline_cells, c.inline_cells + c.rows * c.cols, 0.0);
  double* cells = c.cells();
  for (std::size_t i = 0; i < a.size(); ++i)
    cells[la.index_of(a[i]) * c.cols + lb.index_of(b[i])] += 1.0;
  return c;
}

}  // namespace detail

// Normalized mutual information with geometric-mean normalization and natural
// logs. Two degenerate conventions keep the metric total: two single-block
// labelings agree perfectly (1), and a single-block labeling against a split
// one carries no information (0).
inline double nmi(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size())
    throw InputError("nmi: labelings differ in length (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  if (a.empty()) throw InputError("nmi: empty labelings");
  const detail::Contingency c = detail::contingency_table(a, b);

  double rs_inline[detail::Contingency::kInline], cs_inline[detail::Contingency::kInline];
  std::vector<double> rs_heap, cs_heap;
  double* rs = rs_inline;
  double* cs = cs_inline;
  if (c.rows > detail::Contingency::kInline) {
    rs_heap.resize(static_cast<std::size_t>(c.rows));
    rs = rs_heap.data();
  }
  if (c.cols > detail::Contingency::kInline) {
    cs_heap.resize(static_cast<std::size_t>(c.cols));
    cs = cs_heap.data();
  }
  for (int r = 0; r < c.rows; ++r) rs[r] = c.row_sum(r);
  for (int col = 0; col < c.cols; ++col) cs[col] = c.col_sum(col);

  double ha = 0.0, hb = 0.0;
  for (int r = 0; r < c.rows; ++r)
    if (rs[r] > 0.0) ha -= (rs[r] / c.n) * std::log(rs[r] / c.n);
  for (int col = 0; col < c.cols; ++col)
    if (cs[col] > 0.0) hb -= (cs[col] / c.n) * std::log(cs[col] / c.n);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  if (ha == 0.0 || hb == 0.0) return 0.0;

  double mi = 0.0;
  for (int r = 0; r < c.rows; ++r)
    for (int col = 0; col < c.cols; ++col) {
      const double nij = c.cell(r, col);
      if (nij > 0.0) mi += (nij / c.n) * std::log(nij * c.n / (rs[r] * cs[col]));
    }
  const double v = mi / std::sqrt(ha * hb);
  return std::min(1.0, std::max(0.0, v));
}

// Adjusted Rand index over the pair-counting contingency formulation; a zero
// denominator (no pair structure to disagree on) is defined as 1.
inline double ari(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size())
    throw InputError("ari: labelings differ in length (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  if (a.size() < 2) throw InputError("ari: need at least two items");
  const detail::Contingency c = detail::contingency_table(a, b);
  auto choose2 = [](double n) { return 0.5 * n * (n - 1.0); };
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  for (int r = 0; r < c.rows; ++r)
    for (int col = 0; col < c.cols; ++col) sum_cells += choose2(c.cell(r, col));
  for (int r = 0; r < c.rows; ++r) sum_rows += choose2(c.row_sum(r));
  for (int col = 0; col < c.cols; ++col) sum_cols += choose2(c.col_sum(col));
  const double total_pairs = choose2(c.n);
  // (index - expected) / (max - expected), cleared of the inner division so
  // small integer cases come out exact
  const double numerator = total_pairs * sum_cells - sum_rows * sum_cols;
  const double denominator = total_pairs * 0.5 * (sum_rows + sum_cols) - sum_rows * sum_cols;
  if (denominator == 0.0) return 1.0;
  return numerator / denominator;
}

// ---- pixel-level evaluation against ground truth ----

// Appends (predicted, ground-truth) label pairs over foreground pixels; the
// prediction is upsampled nearest-neighbor to the mask resolution. Returns
// false (and appends nothing) for images with empty foreground.
inline bool part_clustering_labels(const PartAssignment& assignment,
                                   const std::vector<int>& gt_part_mask, int gt_h, int gt_w,
                                   std::vector<int>& pred_out, std::vector<int>& gt_out) {
  if (static_cast<int>(gt_part_mask.size()) != gt_h * gt_w)
    throw InputError("ground-truth mask size mismatch");
  const PartAssignment up = upsample_nearest(assignment, gt_h, gt_w);
  bool any = false;
  for (int i = 0; i < gt_h * gt_w; ++i) {
    if (gt_part_mask[i] > 0) {
      pred_out.push_back(up.labels[i]);
      gt_out.push_back(gt_part_mask[i]);
      any = true;
    }
  }
  return any;
}

// IoU between predicted foreground (any part label > 0) and a binary mask;
// defined as 1 when both sets are empty.
inline double foreground_iou(const PartAssignment& assignment,
                             const std::vector<std::uint8_t>& fg_mask, int h, int w) {
  if (static_cast<int>(fg_mask.size()) != h * w) throw InputError("fg mask size mismatch");
  const PartAssignment up = upsample_nearest(assignment, h, w);
  long inter = 0, uni = 0;
  for (int i = 0; i < h * w; ++i) {
    const bool p = up.labels[i] > 0, g = fg_mask[i] != 0;
    inter += (p && g) ? 1 : 0;
    uni += (p || g) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Streaming mean of per-location attention entropy.
class EntropyAccumulator {
 public:
  void add(const Tensor& attention) {
    if (attention.rank() != 3) throw ConfigError("entropy accumulator expects (K+1,H,W)");
    const int channels = attention.dim(0), hw = attention.dim(1) * attention.dim(2);
    for (int loc = 0; loc < hw; ++loc) {
      double h = 0.0;
      for (int k = 0; k < channels; ++k) {
        const double a = attention[k * hw + loc];
        if (a > 0.0) h -= a * std::log(a);
      }
      total_ += h;
      ++count_;
    }
  }

  double mean() const { return count_ ? total_ / count_ : 0.0; }
  long count() const { return count_; }

 private:
  double total_ = 0.0;
  long count_ = 0;
};

// ---- keypoint regression ----

struct KeypointSample {
  std::vector<Centroid> part_centroids;
  std::vector<Keypoint> keypoints;
};

namespace detail {

// Gaussian elimination with partial pivoting; falls back to a small ridge
// term when the system is rank-deficient.
inline std::vector<double> solve_least_squares(const std::vector<std::vector<double>>& rows,
                                               const std::vector<double>& targets) {
  const std::size_t dim = rows.empty() ? 0 : rows[0].size();
  std::vector<std::vector<double>> ata(dim, std::vector<double>(dim, 0.0));
  std::vector<double> atb(dim, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < dim; ++i) {
      atb[i] += rows[r][i] * targets[r];
      for (std::size_t j = 0; j < dim; ++j) ata[i][j] += rows[r][i] * rows[r][j];
    }
  }
  auto solve = [dim](std::vector<std::vector<double>> m,
                     std::vector<double> b) -> std::pair<bool, std::vector<double>> {
    for (std::size_t col = 0; col < dim; ++col) {
      std::size_t pivot = col;
      for (std::size_t r = col + 1; r < dim; ++r)
        if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
      if (std::fabs(m[pivot][col]) < 1e-12) return {false, {}};
      std::swap(m[pivot], m[col]);
      std::swap(b[pivot], b[col]);
      for (std::size_t r = 0; r < dim; ++r) {
        if (r == col) continue;
        const double f = m[r][col] / m[col][col];
        if (f == 0.0) continue;
        for (std::size_t c2 = col; c2 < dim; ++c2) m[r][c2] -= f * m[col][c2];
        b[r] -= f * b[col];
      }
    }
    std::vector<double> x(dim);
    for (std::size_t i = 0; i < dim; ++i) x[i] = b[i] / m[i][i];
    return {true, std::move(x)};
  };
  auto [ok, x] = solve(ata, atb);
  if (ok) return x;
  for (std::size_t i = 0; i < dim; ++i) ata[i][i] += 1e-6;  // ridge fallback
  auto [ok2, x2] = solve(ata, atb);
  if (!ok2) throw NumericError("keypoint regression: singular even with ridge");
  return x2;
}

inline bool all_present(const std::vector<Centroid>& cs) {
  for (const Centroid& c : cs)
    if (!c.present) return false;
  return true;
}

inline std::vector<double> centroid_features(const std::vector<Centroid>& cs) {
  std::vector<double> f;
  f.reserve(2 * cs.size() + 1);
  f.push_back(1.0);
  for (const Centroid& c : cs) {
    f.push_back(c.y);
    f.push_back(c.x);
  }
  return f;
}

}  // namespace detail

// Fits one linear map (with intercept) from the 2K centroid coordinates to
// each annotated keypoint coordinate on the train split, then reports
// 100 x mean Euclidean error over visible test keypoints.
inline double keypoint_regression_error(const std::vector<KeypointSample>& train,
                                        const std::vector<KeypointSample>& test) {
  if (train.empty()) throw InputError("keypoint regression: empty train split");
  const std::size_t k = train[0].part_centroids.size();
  const std::size_t dim = 2 * k + 1;

  std::size_t usable = 0;
  for (const KeypointSample& s : train)
    if (detail::all_present(s.part_centroids)) ++usable;
  if (usable < dim)
    throw InputError("keypoint regression: need at least " + std::to_string(dim) +
                     " training samples with all centroids present, have " +
                     std::to_string(usable));

  // per keypoint id: regression rows and x/y targets
  std::map<int, std::vector<std::vector<double>>> rows;
  std::map<int, std::vector<double>> tx, ty;
  for (const KeypointSample& s : train) {
    if (!detail::all_present(s.part_centroids)) continue;
    const std::vector<double> f = detail::centroid_features(s.part_centroids);
    for (const Keypoint& kp : s.keypoints) {
      if (!kp.visible) continue;
      rows[kp.part_id].push_back(f);
      tx[kp.part_id].push_back(kp.x);
      ty[kp.part_id].push_back(kp.y);
    }
  }
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> models;
  for (auto& [part_id, r] : rows)
    models[part_id] = {detail::solve_least_squares(r, tx[part_id]),
                       detail::solve_least_squares(r, ty[part_id])};

  double total = 0.0;
  long count = 0;
  for (const KeypointSample& s : test) {
    if (!detail::all_present(s.part_centroids)) continue;
    const std::vector<double> f = detail::centroid_features(s.part_centroids);
    for (const Keypoint& kp : s.keypoints) {
      if (!kp.visible) continue;
      auto it = models.find(kp.part_id);
      if (it == models.end()) continue;
      double px = 0.0, py = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        px += it->second.first[i] * f[i];
        py += it->second.second[i] * f[i];
      }
      total += std::sqrt((px - kp.x) * (px - kp.x) + (py - kp.y) * (py - kp.y));
      ++count;
    }
  }
  if (count == 0) throw InputError("keypoint regression: no evaluable test keypoints");
  return 100.0 * total / count;
}

}  // namespace pdisco
