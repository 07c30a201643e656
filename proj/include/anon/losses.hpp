#pragma once

// Training objectives. Each loss is a pure function returning its value
// together with the gradient w.r.t. every matrix input (LossGrad); the
// tape wrappers in namespace ad attach them to a Tape as fused nodes.

#include "anon/autodiff.hpp"
#include "anon/errors.hpp"
#include "anon/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace anon {

struct LossWeights {
  double lc = 100.0;     // latent consistency
  double task = 1.0;     // multitask utility
  double budget = 1.0;   // budget (subtracted)
  double ar = 1.0;
  double tad = 1.0;
  double ad = 1.0;
  double temperature = 0.1;
  double lambda_smooth = 0.01;  // 1.0 lets sparsity swamp the top-k term at 8 segments
  double lambda_sparse = 0.01;
  double lambda_magnitude = 0.001;
  double margin = 1.0;

  void validate() const {
    for (double w : {lc, task, budget, ar, tad, ad, lambda_smooth, lambda_sparse, lambda_magnitude})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and nonnegative");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
    if (!(margin > 0.0) || !std::isfinite(margin)) throw ConfigError("margin must be > 0");
  }
};

template <typename Scalar>
struct LossGrad {
  Scalar value = 0;
  std::vector<Mat<Scalar>> grads;
};

// ---------------------------------------------------------------------------
// Budget: NT-Xent between two static views of each video.
//
//   L_i = -log d(u_i, v_i) / sum_{j != i} [d(u_i, u_j) + d(u_i, v_j)]
//   d(a, b) = exp(cos(a, b) / tau)
//
// With include_positive the positive pair d(u_i, v_i) is also added to the
// denominator (the canonical SimCLR form). Returns the batch mean; the
// trainer maximizes it.
template <typename Scalar>
LossGrad<Scalar> budget_nt_xent(const Mat<Scalar>& view1, const Mat<Scalar>& view2, double temperature,
                                bool include_positive = false) {
  const Eigen::Index n = view1.rows();
  if (view2.rows() != n || view2.cols() != view1.cols()) throw ShapeError("budget_nt_xent: view shapes differ");
  if (n < 2) throw DomainError("budget_nt_xent: need at least 2 samples (empty denominator)");
  if (!(temperature > 0.0)) throw DomainError("budget_nt_xent: temperature must be > 0");
  ColVec<Scalar> n1 = view1.rowwise().norm(), n2 = view2.rowwise().norm();
  if ((n1.array() <= Scalar(0)).any() || (n2.array() <= Scalar(0)).any())
    throw DomainError("budget_nt_xent: zero-norm feature vector");
  Mat<Scalar> u = n1.asDiagonal().inverse() * view1;
  Mat<Scalar> v = n2.asDiagonal().inverse() * view2;
  const auto inv_tau = static_cast<Scalar>(1.0 / temperature);
  Mat<Scalar> a = (u * u.transpose()) * inv_tau;  // u_i . u_j / tau
  Mat<Scalar> b = (u * v.transpose()) * inv_tau;  // u_i . v_j / tau

  // Softmax weights over the denominator terms, per row.
  Mat<Scalar> ga = Mat<Scalar>::Zero(n, n), gb = Mat<Scalar>::Zero(n, n);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) m = std::max({m, a(i, j), b(i, j)});
      else if (include_positive) m = std::max(m, b(i, i));
    }
    Scalar z = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) {
        ga(i, j) = std::exp(a(i, j) - m);
        gb(i, j) = std::exp(b(i, j) - m);
        z += ga(i, j) + gb(i, j);
      } else if (include_positive) {
        gb(i, i) = std::exp(b(i, i) - m);
        z += gb(i, i);
      }
    }
    ga.row(i) /= z;
    gb.row(i) /= z;
    gb(i, i) -= Scalar(1);  // d(-b_ii)/d b_ii
    total += -b(i, i) + m + std::log(z);
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  ga *= inv_n;
  gb *= inv_n;
  Mat<Scalar> du = ((ga + ga.transpose()) * u + gb * v) * inv_tau;
  Mat<Scalar> dv = (gb.transpose() * u) * inv_tau;
  // Back through the row normalization x -> x / |x|.
  auto unnormalize = [](const Mat<Scalar>& unit, const Mat<Scalar>& d_unit, const ColVec<Scalar>& norms) {
    Mat<Scalar> dx(unit.rows(), unit.cols());
    for (Eigen::Index r = 0; r < unit.rows(); ++r)
      dx.row(r) = (d_unit.row(r) - unit.row(r) * unit.row(r).dot(d_unit.row(r))) / norms(r);
    return dx;
  };
  return {total * inv_n, {unnormalize(u, du, n1), unnormalize(v, dv, n2)}};
}

// ---------------------------------------------------------------------------
// Latent consistency: mean over the batch of the squared l2 distance between
// original and anonymized features. Inputs are [B * tokens x d] with the
// batch size given explicitly.
template <typename Scalar>
LossGrad<Scalar> latent_consistency(const Mat<Scalar>& original, const Mat<Scalar>& anonymized, Eigen::Index batch) {
  if (original.rows() != anonymized.rows() || original.cols() != anonymized.cols())
    throw ShapeError("latent_consistency: shape mismatch");
  if (batch <= 0) throw ShapeError("latent_consistency: batch must be positive");
  Mat<Scalar> diff = anonymized - original;
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(batch);
  Mat<Scalar> g = diff * (Scalar(2) * inv_b);
  Mat<Scalar> g_orig = -g;
  return {diff.squaredNorm() * inv_b, {std::move(g_orig), std::move(g)}};
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy averaged over the batch.
template <typename Scalar>
LossGrad<Scalar> action_ce(const Mat<Scalar>& logits, const std::vector<int>& labels) {
  const Eigen::Index b = logits.rows(), k = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != b) throw ShapeError("action_ce: label count differs from batch");
  if (b == 0) throw ShapeError("action_ce: empty batch");
  Mat<Scalar> g(b, k);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw RangeError("action_ce: label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const Scalar m = logits.row(i).maxCoeff();
    RowVec<Scalar> e = (logits.row(i).array() - m).exp();
    const Scalar z = e.sum();
    total += -(logits(i, y) - m - std::log(z));
    g.row(i) = e / z;
    g(i, y) -= Scalar(1);
  }
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);
  return {total * inv_b, {g * inv_b}};
}

// Independent sigmoid cross-entropy per attribute (multi-label), averaged
// over all entries. Targets are 0/1.
template <typename Scalar>
LossGrad<Scalar> multilabel_bce(const Mat<Scalar>& logits, const Mat<Scalar>& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) throw ShapeError("multilabel_bce: shape mismatch");
  if (logits.size() == 0) throw ShapeError("multilabel_bce: empty batch");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(logits.size());
  Mat<Scalar> g(logits.rows(), logits.cols());
  Scalar total = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const Scalar z = logits.data()[i], y = targets.data()[i];
    // log(1 + exp(-|z|)) + max(z, 0) - y z
    total += std::log1p(std::exp(-std::abs(z))) + std::max(z, Scalar(0)) - y * z;
    g.data()[i] = (Scalar(1) / (Scalar(1) + std::exp(-z)) - y) * inv;
  }
  return {total * inv, {std::move(g)}};
}

// ---------------------------------------------------------------------------
// Temporal action detection (single pyramid level).

struct Segment {
  double start = 0;
  double end = 0;
  int label = 0;  // action class in [0, K)
};

struct TadOptions {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double center_radius = 0.25;  // fraction of segment length around its center
};

struct TadTarget {
  int cls = 0;          // 0 = background, otherwise action + 1
  double gt_start = 0;  // valid when cls > 0
  double gt_end = 0;
};

// Center sampling: instant t is positive for a segment containing it when
// |t - center| <= radius * length; the shortest such segment wins.
inline std::vector<TadTarget> assign_tad_targets(Eigen::Index seq_len, const std::vector<Segment>& segments,
                                                 double center_radius) {
  std::vector<TadTarget> out(static_cast<std::size_t>(seq_len));
  for (Eigen::Index t = 0; t < seq_len; ++t) {
    double best_len = std::numeric_limits<double>::infinity();
    const auto pos = static_cast<double>(t);
    for (const auto& s : segments) {
      const double len = s.end - s.start;
      const double center = 0.5 * (s.start + s.end);
      if (pos < s.start || pos > s.end) continue;
      if (std::abs(pos - center) > center_radius * len) continue;
      if (len < best_len) {
        best_len = len;
        out[static_cast<std::size_t>(t)] = TadTarget{s.label + 1, s.start, s.end};
      }
    }
  }
  return out;
}

// Temporal IoU of [a0, a1] and [b0, b1].
inline double temporal_iou(double a0, double a1, double b0, double b1) {
  const double inter = std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
  const double uni = (a1 - a0) + (b1 - b0) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace detail {
// Softmax focal loss for one row and its gradient w.r.t. the logits.
template <typename Scalar>
Scalar focal_row(const Eigen::Ref<const RowVec<Scalar>>& z, int cls, double alpha_t, double gamma,
                 Eigen::Ref<RowVec<Scalar>> grad) {
  const Scalar m = z.maxCoeff();
  RowVec<Scalar> p = (z.array() - m).exp();
  p /= p.sum();
  const Scalar pt = p(cls);
  const Scalar log_pt = z(cls) - m - std::log(((z.array() - m).exp()).sum());
  const auto g = static_cast<Scalar>(gamma);
  const auto a = static_cast<Scalar>(alpha_t);
  const Scalar one_m = Scalar(1) - pt;
  const Scalar value = -a * std::pow(one_m, g) * log_pt;
  // dFL/dz_k = a * [g (1-pt)^(g-1) pt log pt - (1-pt)^g] * (delta_kc - p_k)
  const Scalar pow_gm1 = one_m > Scalar(0) ? std::pow(one_m, g - Scalar(1)) : Scalar(0);
  const Scalar coef = a * (g * pow_gm1 * pt * log_pt - std::pow(one_m, g));
  grad = -coef * p;
  grad(cls) += coef;
  return value;
}
}  // namespace detail

// logits: [B*T x (K+1)] with background at column 0; offsets: [B*T x 2]
// nonnegative distances (left, right). segments[b] are the ground-truth
// segments of sequence b, in instant units.
//
//   L = 1/N_pos sum_pos (IoU * L_cls + (1 - IoU)) + 1/N_neg sum_neg L_cls
//
// The IoU weight is differentiated like any other term.
template <typename Scalar>
LossGrad<Scalar> tad_loss(const Mat<Scalar>& logits, const Mat<Scalar>& offsets,
                          const std::vector<std::vector<Segment>>& segments, Eigen::Index seq_len,
                          const TadOptions& opt = {}) {
  if (seq_len <= 0) throw ShapeError("tad_loss: need at least one instant");
  if (logits.rows() != offsets.rows() || offsets.cols() != 2) throw ShapeError("tad_loss: offsets must be [rows x 2]");
  if (logits.rows() % seq_len != 0) throw ShapeError("tad_loss: rows not divisible by seq_len");
  if (logits.cols() < 2) throw ShapeError("tad_loss: need background plus at least one class");
  const Eigen::Index batch = logits.rows() / seq_len;
  if (static_cast<Eigen::Index>(segments.size()) != batch) throw ShapeError("tad_loss: segment lists differ from batch");
  const int num_classes = static_cast<int>(logits.cols()) - 1;

  std::vector<TadTarget> targets;
  targets.reserve(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (const auto& s : segments[static_cast<std::size_t>(b)])
      if (s.label < 0 || s.label >= num_classes) throw RangeError("tad_loss: segment label out of range");
    auto tb = assign_tad_targets(seq_len, segments[static_cast<std::size_t>(b)], opt.center_radius);
    targets.insert(targets.end(), tb.begin(), tb.end());
  }
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& t : targets) (t.cls > 0 ? n_pos : n_neg)++;
  if (n_pos + n_neg == 0) throw DomainError("tad_loss: no positive and no negative instants");

  Mat<Scalar> g_logits = Mat<Scalar>::Zero(logits.rows(), logits.cols());
  Mat<Scalar> g_off = Mat<Scalar>::Zero(offsets.rows(), 2);
  Scalar pos_sum = 0, neg_sum = 0;
  RowVec<Scalar> grow(logits.cols());
  const Scalar inv_pos = n_pos > 0 ? Scalar(1) / static_cast<Scalar>(n_pos) : Scalar(0);
  const Scalar inv_neg = n_neg > 0 ? Scalar(1) / static_cast<Scalar>(n_neg) : Scalar(0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const TadTarget& tg = targets[static_cast<std::size_t>(r)];
    const double alpha_t = tg.cls > 0 ? opt.focal_alpha : 1.0 - opt.focal_alpha;
    const Scalar cls_loss = detail::focal_row<Scalar>(logits.row(r), tg.cls, alpha_t, opt.focal_gamma, grow);
    if (tg.cls == 0) {
      neg_sum += cls_loss;
      g_logits.row(r) = grow * inv_neg;
      continue;
    }
    // IoU between [t - l, t + r] and the assigned ground truth.
    const auto t = static_cast<Scalar>(r % seq_len);
    const Scalar l = offsets(r, 0), rr = offsets(r, 1);
    if (l < Scalar(0) || rr < Scalar(0)) throw DomainError("tad_loss: negative offset at a positive instant");
    const auto s = static_cast<Scalar>(tg.gt_start), e = static_cast<Scalar>(tg.gt_end);
    const Scalar lo = std::max(t - l, s), hi = std::min(t + rr, e);
    const Scalar inter = std::max(Scalar(0), hi - lo);
    const Scalar uni = (l + rr) + (e - s) - inter;
    if (!(uni > Scalar(0))) throw DomainError("tad_loss: degenerate segment pair (zero union)");
    const Scalar iou = inter / uni;
    // d inter / d l and d inter / d r (subgradient 0 on ties / no overlap).
    const Scalar di_dl = (inter > Scalar(0) && t - l > s) ? Scalar(1) : Scalar(0);
    const Scalar di_dr = (inter > Scalar(0) && t + rr < e) ? Scalar(1) : Scalar(0);
    const Scalar diou_dl = (di_dl * uni - inter * (Scalar(1) - di_dl)) / (uni * uni);
    const Scalar diou_dr = (di_dr * uni - inter * (Scalar(1) - di_dr)) / (uni * uni);
    pos_sum += iou * cls_loss + (Scalar(1) - iou);
    g_logits.row(r) = grow * (iou * inv_pos);
    g_off(r, 0) = (cls_loss - Scalar(1)) * diou_dl * inv_pos;
    g_off(r, 1) = (cls_loss - Scalar(1)) * diou_dr * inv_pos;
  }
  return {pos_sum * inv_pos + neg_sum * inv_neg, {std::move(g_logits), std::move(g_off)}};
}

// ---------------------------------------------------------------------------
// Weakly supervised anomaly detection (MGFN-style objective).

struct AdOptions {
  double lambda_smooth = 0.01;
  double lambda_sparse = 0.01;
  double lambda_magnitude = 0.001;
  double margin = 1.0;
  int top_k = 3;
};

struct AdTerms {
  double sce = 0, smooth = 0, sparse = 0, magnitude = 0;
};

namespace detail {
// Indices of the k largest entries of a row (ties broken by lower index).
template <typename Scalar>
std::vector<Eigen::Index> top_k_indices(const Eigen::Ref<const RowVec<Scalar>>& row, int k) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(row.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  const auto kk = static_cast<std::size_t>(std::min<Eigen::Index>(k, row.size()));
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(),
                    [&](Eigen::Index a, Eigen::Index b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
  idx.resize(kk);
  return idx;
}
}  // namespace detail

// scores, magnitudes: [B x S]; labels: B/2 normal (0) followed by B/2
// anomalous (1) videos.
//   L = L_sce + l1 * L_ts + l2 * L_sp + l3 * L_mc
// L_sce: BCE on the mean of the top-k segment scores of each video (batch
// mean). L_ts, L_sp: smoothness and sparsity of anomalous-video scores
// (mean over anomalous videos of the per-video sums). L_mc: pairwise
// magnitude contrast on the top-k mean magnitude of each video, with
// absolute difference as distance and a hinge on the cross-type margin.
template <typename Scalar>
LossGrad<Scalar> ad_loss(const Mat<Scalar>& scores, const Mat<Scalar>& magnitudes, const std::vector<int>& labels,
                         const AdOptions& opt = {}, AdTerms* terms = nullptr) {
  const Eigen::Index b = scores.rows(), s = scores.cols();
  if (magnitudes.rows() != b || magnitudes.cols() != s) throw ShapeError("ad_loss: magnitudes shape differs from scores");
  if (static_cast<Eigen::Index>(labels.size()) != b) throw ShapeError("ad_loss: label count differs from batch");
  if (b < 2 || b % 2 != 0) throw DomainError("ad_loss: batch must be half normal, half anomalous");
  if (s < 1) throw ShapeError("ad_loss: need at least one segment");
  if (opt.top_k < 1) throw ConfigError("ad_loss: top_k must be >= 1");
  const Eigen::Index half = b / 2;
  for (Eigen::Index i = 0; i < b; ++i)
    if (labels[static_cast<std::size_t>(i)] != (i < half ? 0 : 1))
      throw DomainError("ad_loss: batch must be B/2 normal videos followed by B/2 anomalous videos");
  if ((scores.array() <= Scalar(0)).any() || (scores.array() >= Scalar(1)).any())
    throw DomainError("ad_loss: scores must lie in (0, 1)");

  Mat<Scalar> gs = Mat<Scalar>::Zero(b, s), gm = Mat<Scalar>::Zero(b, s);
  AdTerms t;
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);
  const Scalar inv_half = Scalar(1) / static_cast<Scalar>(half);

  // Sigmoid cross-entropy on top-k mean scores.
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto idx = detail::top_k_indices<Scalar>(scores.row(i), opt.top_k);
    Scalar v = 0;
    for (auto j : idx) v += scores(i, j);
    const auto k = static_cast<Scalar>(idx.size());
    v /= k;
    const Scalar y = i < half ? Scalar(0) : Scalar(1);
    t.sce += static_cast<double>(-(y * std::log(v) + (Scalar(1) - y) * std::log(Scalar(1) - v)) * inv_b);
    const Scalar dv = (-(y / v) + (Scalar(1) - y) / (Scalar(1) - v)) * inv_b;
    for (auto j : idx) gs(i, j) += dv / k;
  }
  // Smoothness and sparsity over anomalous videos.
  for (Eigen::Index i = half; i < b; ++i) {
    for (Eigen::Index j = 0; j + 1 < s; ++j) {
      const Scalar d = scores(i, j) - scores(i, j + 1);
      t.smooth += static_cast<double>(d * d * inv_half);
      const auto w = static_cast<Scalar>(opt.lambda_smooth) * Scalar(2) * d * inv_half;
      gs(i, j) += w;
      gs(i, j + 1) -= w;
    }
    t.sparse += static_cast<double>(scores.row(i).sum() * inv_half);
    gs.row(i).array() += static_cast<Scalar>(opt.lambda_sparse) * inv_half;
  }
  // Magnitude contrast.
  std::vector<std::vector<Eigen::Index>> mag_idx(static_cast<std::size_t>(b));
  ColVec<Scalar> mag(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    mag_idx[static_cast<std::size_t>(i)] = detail::top_k_indices<Scalar>(magnitudes.row(i), opt.top_k);
    Scalar v = 0;
    for (auto j : mag_idx[static_cast<std::size_t>(i)]) v += magnitudes(i, j);
    mag(i) = v / static_cast<Scalar>(mag_idx[static_cast<std::size_t>(i)].size());
  }
  ColVec<Scalar> dmag = ColVec<Scalar>::Zero(b);
  auto sign = [](Scalar x) { return x > Scalar(0) ? Scalar(1) : (x < Scalar(0) ? Scalar(-1) : Scalar(0)); };
  const auto margin = static_cast<Scalar>(opt.margin);
  for (Eigen::Index p = 0; p < b; ++p)
    for (Eigen::Index q = 0; q < b; ++q) {
      const bool p_normal = p < half, q_normal = q < half;
      const Scalar diff = mag(p) - mag(q);
      if (p_normal == q_normal) {
        t.magnitude += static_cast<double>(std::abs(diff));
        dmag(p) += sign(diff);
        dmag(q) -= sign(diff);
      } else if (p_normal) {  // each cross pair counted once, normal first
        const Scalar hinge = margin - std::abs(diff);
        if (hinge > Scalar(0)) {
          t.magnitude += static_cast<double>(hinge);
          dmag(p) -= sign(diff);
          dmag(q) += sign(diff);
        }
      }
    }
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& idx = mag_idx[static_cast<std::size_t>(i)];
    const Scalar w = static_cast<Scalar>(opt.lambda_magnitude) * dmag(i) / static_cast<Scalar>(idx.size());
    for (auto j : idx) gm(i, j) += w;
  }
  if (terms) *terms = t;
  const double total = t.sce + opt.lambda_smooth * t.smooth + opt.lambda_sparse * t.sparse + opt.lambda_magnitude * t.magnitude;
  return {static_cast<Scalar>(total), {std::move(gs), std::move(gm)}};
}

// ---------------------------------------------------------------------------
// Combiners.

enum class Task { kAR = 0, kTAD = 1, kAD = 2 };
constexpr std::array<Task, 3> kAllTasks = {Task::kAR, Task::kTAD, Task::kAD};

inline std::string to_string(Task t) {
  switch (t) {
    case Task::kAR: return "ar";
    case Task::kTAD: return "tad";
    case Task::kAD: return "ad";
  }
  return "?";
}
inline Task task_from_string(const std::string& s) {
  if (s == "ar") return Task::kAR;
  if (s == "tad") return Task::kTAD;
  if (s == "ad") return Task::kAD;
  throw ConfigError("unknown task '" + s + "' (expected ar, tad or ad)");
}

struct TaskMask {
  bool ar = true, tad = true, ad = true;
  bool active(Task t) const { return t == Task::kAR ? ar : (t == Task::kTAD ? tad : ad); }
  bool any() const { return ar || tad || ad; }
};

// Weighted sum over active tasks; inactive tasks contribute nothing.
inline double multitask_utility(double l_ar, double l_tad, double l_ad, const LossWeights& w, const TaskMask& mask) {
  if (!mask.any()) throw ConfigError("multitask_utility: no active task");
  double total = 0;
  if (mask.ar) total += w.ar * l_ar;
  if (mask.tad) total += w.tad * l_tad;
  if (mask.ad) total += w.ad * l_ad;
  return total;
}

inline double overall_objective(double l_lc, double l_task, double l_budget, const LossWeights& w) {
  for (double v : {l_lc, l_task, l_budget})
    if (!std::isfinite(v)) throw DomainError("overall_objective: non-finite component");
  return w.lc * l_lc + w.task * l_task - w.budget * l_budget;
}

// Per-step record of every loss term.
struct LossBundle {
  double budget = 0, lc = 0, ar = 0, tad = 0, ad = 0, task = 0, total = 0;
  double lc_static = 0;  // anchor on static clips when enabled
};

// ---------------------------------------------------------------------------
// Tape wrappers.
namespace ad {

template <typename Scalar>
Var<Scalar> budget_nt_xent(Var<Scalar> view1, Var<Scalar> view2, double temperature, bool include_positive = false) {
  auto r = anon::budget_nt_xent(view1.value(), view2.value(), temperature, include_positive);
  return fused_scalar(r.value, {view1, view2}, std::move(r.grads));
}

template <typename Scalar>
Var<Scalar> latent_consistency(Var<Scalar> original, Var<Scalar> anonymized, Eigen::Index batch) {
  auto r = anon::latent_consistency(original.value(), anonymized.value(), batch);
  return fused_scalar(r.value, {original, anonymized}, std::move(r.grads));
}

template <typename Scalar>
Var<Scalar> action_ce(Var<Scalar> logits, const std::vector<int>& labels) {
  auto r = anon::action_ce(logits.value(), labels);
  return fused_scalar(r.value, {logits}, std::move(r.grads));
}

template <typename Scalar>
Var<Scalar> multilabel_bce(Var<Scalar> logits, const Mat<Scalar>& targets) {
  auto r = anon::multilabel_bce(logits.value(), targets);
  return fused_scalar(r.value, {logits}, std::move(r.grads));
}

template <typename Scalar>
Var<Scalar> tad_loss(Var<Scalar> logits, Var<Scalar> offsets, const std::vector<std::vector<Segment>>& segments,
                     Eigen::Index seq_len, const TadOptions& opt = {}) {
  auto r = anon::tad_loss(logits.value(), offsets.value(), segments, seq_len, opt);
  return fused_scalar(r.value, {logits, offsets}, std::move(r.grads));
}

template <typename Scalar>
Var<Scalar> ad_loss(Var<Scalar> scores, Var<Scalar> magnitudes, const std::vector<int>& labels, const AdOptions& opt = {},
                    AdTerms* terms = nullptr) {
  auto r = anon::ad_loss(scores.value(), magnitudes.value(), labels, opt, terms);
  return fused_scalar(r.value, {scores, magnitudes}, std::move(r.grads));
}

// L = w_lc * L_lc + w_task * L_task - w_budget * L_budget
template <typename Scalar>
Var<Scalar> overall_objective(Var<Scalar> l_lc, Var<Scalar> l_task, Var<Scalar> l_budget, const LossWeights& w) {
  return weighted_sum<Scalar>({l_lc, l_task, l_budget},
                              {static_cast<Scalar>(w.lc), static_cast<Scalar>(w.task), static_cast<Scalar>(-w.budget)});
}

}  // namespace ad
}  // namespace anon
