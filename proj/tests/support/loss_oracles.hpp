#pragma once

// Brute-force scalar re-implementations of the training losses. They share
// no code with include/anon/losses.hpp: every term is enumerated with plain
// loops in double precision straight from the written formulas.

#include "anon/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace anon::oracle {

inline double cosine(const Mat<double>& a, Eigen::Index i, const Mat<double>& b, Eigen::Index j) {
  double dot = 0, na = 0, nb = 0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    dot += a(i, c) * b(j, c);
    na += a(i, c) * a(i, c);
    nb += b(j, c) * b(j, c);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double budget(const Mat<double>& v1, const Mat<double>& v2, double tau, bool include_positive = false) {
  const Eigen::Index n = v1.rows();
  double total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double num = std::exp(cosine(v1, i, v2, i) / tau);
    double den = include_positive ? num : 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      den += std::exp(cosine(v1, i, v1, j) / tau);
      den += std::exp(cosine(v1, i, v2, j) / tau);
    }
    total += -std::log(num / den);
  }
  return total / static_cast<double>(n);
}

inline double latent_consistency(const Mat<double>& a, const Mat<double>& b, Eigen::Index batch) {
  double s = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return s / static_cast<double>(batch);
}

inline double cross_entropy(const Mat<double>& logits, const std::vector<int>& labels) {
  double total = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double z = 0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp(logits(i, k));
    total += -std::log(std::exp(logits(i, labels[static_cast<std::size_t>(i)])) / z);
  }
  return total / static_cast<double>(logits.rows());
}

struct Seg {
  double start, end;
  int label;
};

inline double focal(const Mat<double>& logits, Eigen::Index r, int cls, double alpha, double gamma) {
  double z = 0;
  for (Eigen::Index k = 0; k < logits.cols(); ++k) z += std::exp(logits(r, k));
  const double p = std::exp(logits(r, cls)) / z;
  return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
}

// Sum over positives of (IoU * focal + 1 - IoU) / N_pos plus the background
// focal terms / N_neg. Center sampling picks the shortest containing segment.
inline double tad(const Mat<double>& logits, const Mat<double>& offsets, const std::vector<std::vector<Seg>>& gt,
                  Eigen::Index seq_len, double alpha = 0.25, double gamma = 2.0, double radius = 0.25) {
  double pos = 0, neg = 0;
  int n_pos = 0, n_neg = 0;
  for (std::size_t b = 0; b < gt.size(); ++b) {
    for (Eigen::Index t = 0; t < seq_len; ++t) {
      const Eigen::Index r = static_cast<Eigen::Index>(b) * seq_len + t;
      const Seg* best = nullptr;
      for (const auto& s : gt[b]) {
        const double len = s.end - s.start, c = (s.start + s.end) / 2, x = static_cast<double>(t);
        const bool inside = x >= s.start && x <= s.end && std::fabs(x - c) <= radius * len;
        if (inside && (best == nullptr || len < best->end - best->start)) best = &s;
      }
      if (best == nullptr) {
        neg += focal(logits, r, 0, 1.0 - alpha, gamma);
        ++n_neg;
        continue;
      }
      const double ps = static_cast<double>(t) - offsets(r, 0), pe = static_cast<double>(t) + offsets(r, 1);
      const double inter = std::max(0.0, std::min(pe, best->end) - std::max(ps, best->start));
      const double uni = std::max(pe, best->end) - std::min(ps, best->start);
      // union of two overlapping intervals is their hull; otherwise the sum of lengths
      const double u = inter > 0 ? uni : (pe - ps) + (best->end - best->start);
      const double iou = inter / u;
      pos += iou * focal(logits, r, best->label + 1, alpha, gamma) + (1.0 - iou);
      ++n_pos;
    }
  }
  return (n_pos ? pos / n_pos : 0.0) + (n_neg ? neg / n_neg : 0.0);
}

inline double topk_mean(const Mat<double>& m, Eigen::Index row, int k) {
  std::vector<double> v(m.row(row).data(), m.row(row).data() + m.cols());
  std::sort(v.begin(), v.end(), std::greater<>());
  const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), v.size());
  double s = 0;
  for (std::size_t i = 0; i < kk; ++i) s += v[i];
  return s / static_cast<double>(kk);
}

struct AdParts {
  double sce, ts, sp, mc, total;
};

// First half of the batch normal, second half anomalous.
inline AdParts ad(const Mat<double>& scores, const Mat<double>& mags, double l1, double l2, double l3, double margin,
                  int k = 3) {
  const Eigen::Index b = scores.rows(), half = b / 2;
  AdParts out{0, 0, 0, 0, 0};
  for (Eigen::Index i = 0; i < b; ++i) {
    const double y = i < half ? 0.0 : 1.0, s = topk_mean(scores, i, k);
    out.sce += -(y * std::log(s) + (1 - y) * std::log(1 - s));
  }
  out.sce /= static_cast<double>(b);
  for (Eigen::Index i = half; i < b; ++i) {
    for (Eigen::Index j = 0; j + 1 < scores.cols(); ++j)
      out.ts += (scores(i, j) - scores(i, j + 1)) * (scores(i, j) - scores(i, j + 1));
    for (Eigen::Index j = 0; j < scores.cols(); ++j) out.sp += scores(i, j);
  }
  out.ts /= static_cast<double>(half);
  out.sp /= static_cast<double>(half);
  std::vector<double> m(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) m[static_cast<std::size_t>(i)] = topk_mean(mags, i, k);
  for (Eigen::Index p = 0; p < half; ++p)
    for (Eigen::Index q = 0; q < half; ++q) out.mc += std::fabs(m[p] - m[q]);
  for (Eigen::Index u = half; u < b; ++u)
    for (Eigen::Index v = half; v < b; ++v) out.mc += std::fabs(m[u] - m[v]);
  for (Eigen::Index p = 0; p < half; ++p)
    for (Eigen::Index u = half; u < b; ++u) out.mc += std::max(0.0, margin - std::fabs(m[p] - m[u]));
  out.total = out.sce + l1 * out.ts + l2 * out.sp + l3 * out.mc;
  return out;
}

}  // namespace anon::oracle
