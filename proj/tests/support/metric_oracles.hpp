#pragma once

// Brute-force references for the evaluation metrics: pairwise counts,
// explicit rank scans and coordinate-compressed areas instead of sorting.

#include "anon/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

namespace anon::oracle {

// Item i ranks after every strictly higher score and after equal scores that
// come earlier.
inline std::size_t rank_of(const std::vector<double>& s, std::size_t i) {
  std::size_t r = 1;
  for (std::size_t j = 0; j < s.size(); ++j)
    if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++r;
  return r;
}

inline double average_precision(const std::vector<double>& s, const std::vector<int>& l) {
  double sum = 0;
  int npos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    const std::size_t r = rank_of(s, i);
    int above = 0;
    for (std::size_t k = 0; k < s.size(); ++k)
      if (l[k] && rank_of(s, k) <= r) ++above;
    sum += static_cast<double>(above) / static_cast<double>(r);
    ++npos;
  }
  return sum / npos;
}

// Fraction of (positive, negative) pairs ordered correctly; ties count half.
inline double roc_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] && !l[j]) {
        pairs += 1;
        good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return good / pairs;
}

inline double retrieval_top1(const Mat<double>& g, const std::vector<int>& gid, const Mat<double>& p, const std::vector<int>& pid) {
  int hit = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double best = -2;
    Eigen::Index arg = 0;
    for (Eigen::Index j = 0; j < g.rows(); ++j) {
      double dot = 0, np = 0, ng = 0;
      for (Eigen::Index k = 0; k < p.cols(); ++k) {
        dot += p(i, k) * g(j, k);
        np += p(i, k) * p(i, k);
        ng += g(j, k) * g(j, k);
      }
      const double c = dot / std::sqrt(np * ng);
      if (c > best + 1e-12) {
        best = c;
        arg = j;
      }
    }
    hit += gid[arg] == pid[i];
  }
  return static_cast<double>(hit) / static_cast<double>(p.rows());
}

inline double temporal_iou(double a0, double a1, double b0, double b1) {
  const double lo = std::max(a0, b0), hi = std::min(a1, b1);
  if (hi <= lo) return 0;
  return (hi - lo) / (std::max(a1, b1) - std::min(a0, b0));  // overlapping, so the hull is the union
}

// Greedy matching, then the envelope read off at each recall level k/G.
inline double detection_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Segment>>& gt,
                           int label, double thr) {
  struct D {
    std::size_t v, order;
    Detection d;
  };
  std::vector<D> all;
  std::size_t order = 0, G = 0;
  for (std::size_t v = 0; v < dets.size(); ++v)
    for (const auto& d : dets[v])
      if (d.label == label) all.push_back({v, order++, d});
  for (const auto& g : gt)
    for (const auto& s : g) G += s.label == label;
  // Selection by repeatedly taking the highest remaining score (earliest on ties).
  std::vector<char> taken(all.size(), 0);
  std::vector<std::vector<char>> used(gt.size());
  for (std::size_t v = 0; v < gt.size(); ++v) used[v].assign(gt[v].size(), 0);
  std::vector<double> prec, rec;
  double tp = 0;
  for (std::size_t n = 1; n <= all.size(); ++n) {
    std::size_t pick = all.size();
    for (std::size_t i = 0; i < all.size(); ++i)
      if (!taken[i] && (pick == all.size() || all[i].d.score > all[pick].d.score)) pick = i;
    taken[pick] = 1;
    const auto& x = all[pick];
    int best = -1;
    double best_iou = 0;
    for (std::size_t g = 0; g < gt[x.v].size(); ++g) {
      const auto& s = gt[x.v][g];
      if (s.label != label || used[x.v][g]) continue;
      const double iou = temporal_iou(x.d.start, x.d.end, s.start, s.end);
      if (iou >= thr && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[x.v][static_cast<std::size_t>(best)] = 1;
      tp += 1;
    }
    prec.push_back(tp / static_cast<double>(n));
    rec.push_back(tp / static_cast<double>(G));
  }
  double ap = 0;
  for (std::size_t k = 1; k <= G; ++k) {
    double m = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= static_cast<double>(k) / static_cast<double>(G) - 1e-12) m = std::max(m, prec[i]);
    ap += m / static_cast<double>(G);
  }
  return ap;
}

// Dominated area by coordinate compression.
inline double nhv(const std::vector<TradeoffRun>& runs) {
  std::set<double> xs{0.0}, ys{0.0};
  for (const auto& r : runs) {
    xs.insert(r.acc);
    ys.insert(1 - r.priv);
  }
  const std::vector<double> X(xs.begin(), xs.end()), Y(ys.begin(), ys.end());
  double area = 0;
  for (std::size_t i = 0; i + 1 < X.size(); ++i)
    for (std::size_t j = 0; j + 1 < Y.size(); ++j) {
      bool covered = false;
      for (const auto& r : runs) covered = covered || (r.acc >= X[i + 1] && 1 - r.priv >= Y[j + 1]);
      if (covered) area += (X[i + 1] - X[i]) * (Y[j + 1] - Y[j]);
    }
  return area;
}

}  // namespace anon::oracle
