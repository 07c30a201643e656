#include "anon/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace anon {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::size_t> order_descending(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw RangeError(std::string(what) + " must be in [0, 1]");
}

// The eval paths only read parameters, but the forward functions are
// non-const since they may bind leaves.
template <typename T>
T& mut(const T& x) {
  return const_cast<T&>(x);
}

Mat<double> softmax_rows(const Mat<float>& z) {
  Mat<double> p = z.cast<double>();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    p.row(r).array() -= p.row(r).maxCoeff();
    p.row(r) = p.row(r).array().exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Mat<float> stack(const std::vector<Mat<float>>& clips, const std::vector<int>& which) {
  const Eigen::Index t = clips.front().rows(), d = clips.front().cols();
  Mat<float> x(static_cast<Eigen::Index>(which.size()) * t, d);
  for (std::size_t i = 0; i < which.size(); ++i) x.middleRows(static_cast<Eigen::Index>(i) * t, t) = clips[which[i]];
  return x;
}

std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

Mat<float> pooled_subset(const Adapter<float>* adapter, const std::vector<Mat<float>>& clips, const std::vector<int>& which,
                         Pooling pooling) {
  if (which.empty()) throw ShapeError("no clips to pool");
  const Eigen::Index t = clips.front().rows();
  Mat<float> x = stack(clips, which);
  if (adapter != nullptr) x = adapter->apply(x, t);
  return pool_tokens(x, t, pooling);
}

}  // namespace

double average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("average_precision: size mismatch");
  const auto idx = order_descending(scores);
  double hits = 0, sum = 0;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (labels[idx[r]] != 0) {
      hits += 1;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) throw DomainError("average_precision: no positives");
  return sum / hits;
}

CmapResult class_mean_ap(const Mat<double>& scores, const Mat<double>& labels) {
  if (scores.rows() != labels.rows() || scores.cols() != labels.cols()) throw ShapeError("class_mean_ap: shape mismatch");
  CmapResult out;
  out.per_attribute.assign(static_cast<std::size_t>(scores.cols()), kNaN);
  double sum = 0;
  int used = 0;
  for (Eigen::Index a = 0; a < scores.cols(); ++a) {
    std::vector<double> s(static_cast<std::size_t>(scores.rows()));
    std::vector<int> l(s.size());
    int pos = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      s[i] = scores(i, a);
      l[i] = labels(i, a) > 0.5 ? 1 : 0;
      pos += l[i];
    }
    if (pos == 0 || pos == scores.rows()) {
      out.warnings.push_back("attribute " + std::to_string(a) + (pos == 0 ? " has no positives" : " has no negatives") +
                             "; excluded from cMAP");
      continue;
    }
    out.per_attribute[a] = average_precision(s, l);
    sum += out.per_attribute[a];
    ++used;
  }
  if (used == 0) throw DomainError("class_mean_ap: every attribute was excluded");
  out.cmap = sum / used;
  return out;
}

double attribute_accuracy(const Mat<double>& logits, const Mat<double>& labels) {
  if (logits.rows() != labels.rows() || logits.cols() != labels.cols() || logits.size() == 0)
    throw ShapeError("attribute_accuracy: shape mismatch");
  double hit = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) hit += (logits.data()[i] > 0) == (labels.data()[i] > 0.5) ? 1 : 0;
  return hit / static_cast<double>(logits.size());
}

double attribute_chance(const Mat<double>& labels) {
  if (labels.size() == 0) throw ShapeError("attribute_chance: empty labels");
  double sum = 0;
  for (Eigen::Index a = 0; a < labels.cols(); ++a) {
    const double rate = (labels.col(a).array() > 0.5).cast<double>().mean();
    sum += std::max(rate, 1.0 - rate);
  }
  return sum / static_cast<double>(labels.cols());
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: size mismatch");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0, pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] != 0) {
        rank_sum += avg_rank;
        pos += 1;
      }
    i = j;
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0 || neg == 0) throw DomainError("roc_auc: labels contain a single class");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

double top1_accuracy(const Mat<double>& logits, const std::vector<int>& labels) {
  if (logits.rows() != static_cast<Eigen::Index>(labels.size()) || labels.empty())
    throw ShapeError("top1_accuracy: label count differs from logits");
  double hit = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    hit += arg == labels[i] ? 1 : 0;
  }
  return hit / static_cast<double>(labels.size());
}

double retrieval_top1(const Mat<double>& gallery, const std::vector<int>& gallery_ids, const Mat<double>& probe,
                      const std::vector<int>& probe_ids) {
  if (gallery.rows() == 0) throw DomainError("retrieval_top1: empty gallery");
  if (gallery.rows() != static_cast<Eigen::Index>(gallery_ids.size()) ||
      probe.rows() != static_cast<Eigen::Index>(probe_ids.size()) || gallery.cols() != probe.cols())
    throw ShapeError("retrieval_top1: shape mismatch");
  if (probe.rows() == 0) throw DomainError("retrieval_top1: no probes");
  for (int id : probe_ids)
    if (std::find(gallery_ids.begin(), gallery_ids.end(), id) == gallery_ids.end())
      throw DomainError("retrieval_top1: probe subject " + std::to_string(id) + " has no gallery item");
  auto unit = [](const Mat<double>& m) {
    Mat<double> u = m;
    for (Eigen::Index r = 0; r < u.rows(); ++r) {
      const double n = u.row(r).norm();
      if (n > 0) u.row(r) /= n;
    }
    return u;
  };
  const Mat<double> sim = unit(probe) * unit(gallery).transpose();
  double hit = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    Eigen::Index best;
    sim.row(i).maxCoeff(&best);
    hit += gallery_ids[best] == probe_ids[i] ? 1 : 0;
  }
  return hit / static_cast<double>(probe.rows());
}

double combined_score(double acc, double priv) {
  check_unit(acc, "combined_score: acc");
  check_unit(priv, "combined_score: priv");
  return (acc + (1.0 - priv)) * 0.5;
}

BiasGap bias_gap(const std::vector<int>& correct, const std::vector<Gender>& genders) {
  if (correct.size() != genders.size()) throw ShapeError("bias_gap: size mismatch");
  double hit[2] = {0, 0}, n[2] = {0, 0};
  for (std::size_t i = 0; i < correct.size(); ++i) {
    const int g = static_cast<int>(genders[i]);
    n[g] += 1;
    hit[g] += correct[i] != 0 ? 1 : 0;
  }
  if (n[0] == 0 || n[1] == 0) throw DomainError("bias_gap: both gender subclasses must be present");
  BiasGap out;
  out.acc_female = hit[0] / n[0];
  out.acc_male = hit[1] / n[1];
  out.overall = (hit[0] + hit[1]) / (n[0] + n[1]);
  out.gap = std::abs(out.acc_female - out.acc_male);
  return out;
}

// ---- detection ----------------------------------------------------------------

std::vector<Detection> decode_detections(const Mat<double>& probs, const Mat<double>& offsets, const TadDecodeOptions& opt) {
  if (probs.rows() != offsets.rows() || offsets.cols() != 2 || probs.cols() < 2)
    throw ShapeError("decode_detections: expects probs [T x (K+1)] and offsets [T x 2]");
  std::vector<Detection> out;
  for (Eigen::Index c = 1; c < probs.cols(); ++c) {
    std::vector<Detection> cand;
    for (Eigen::Index t = 0; t < probs.rows(); ++t) {
      if (probs(t, c) < opt.score_threshold) continue;
      const auto [s, e] = decode_segment(static_cast<double>(t), offsets(t, 0), offsets(t, 1));
      cand.push_back({s, e, probs(t, c), static_cast<int>(c - 1)});
    }
    std::stable_sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const auto& d : cand) {
      bool suppressed = false;
      for (const auto& k : kept)
        if (temporal_iou(d.start, d.end, k.start, k.end) >= opt.nms_iou) {
          suppressed = true;
          break;
        }
      if (!suppressed) kept.push_back(d);
    }
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

double detection_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<std::vector<Segment>>& truth,
                    int label, double tiou) {
  if (detections.size() != truth.size()) throw ShapeError("detection_ap: video counts differ");
  struct Item {
    double score;
    std::size_t video;
    Detection det;
  };
  std::vector<Item> items;
  std::size_t num_truth = 0;
  std::vector<std::vector<char>> used(truth.size());
  for (std::size_t v = 0; v < truth.size(); ++v) {
    used[v].assign(truth[v].size(), 0);
    for (const auto& s : truth[v]) num_truth += s.label == label ? 1 : 0;
    for (const auto& d : detections[v])
      if (d.label == label) items.push_back({d.score, v, d});
  }
  if (num_truth == 0) return kNaN;
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score > b.score; });

  std::vector<double> precision, recall;
  double tp = 0, fp = 0;
  for (const auto& it : items) {
    const auto& gts = truth[it.video];
    int best = -1;
    double best_iou = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].label != label || used[it.video][g]) continue;
      const double iou = temporal_iou(it.det.start, it.det.end, gts[g].start, gts[g].end);
      if (iou >= tiou && iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[it.video][best] = 1;
      tp += 1;
    } else {
      fp += 1;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(num_truth));
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

TadMapResult detection_map(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<Segment>>& truth, int num_classes,
                           const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ConfigError("detection_map: no tIoU thresholds");
  TadMapResult out;
  out.thresholds = thresholds;
  std::size_t total_dets = 0;
  for (const auto& d : detections) total_dets += d.size();
  if (total_dets == 0) out.warnings.push_back("no detections; mAP is 0");
  bool any_truth = false;
  for (double thr : thresholds) {
    double sum = 0;
    int used = 0;
    for (int c = 0; c < num_classes; ++c) {
      const double ap = detection_ap(detections, truth, c, thr);
      if (std::isnan(ap)) continue;
      sum += ap;
      ++used;
    }
    any_truth = any_truth || used > 0;
    out.map_at.push_back(used > 0 ? sum / used : 0.0);
  }
  if (!any_truth) throw DomainError("detection_map: no ground-truth segments");
  out.mean_map = std::accumulate(out.map_at.begin(), out.map_at.end(), 0.0) / static_cast<double>(out.map_at.size());
  return out;
}

// ---- tradeoff ----------------------------------------------------------------

TradeoffCurve tradeoff_curve(const std::vector<TradeoffRun>& runs) {
  if (runs.size() < 2) throw DomainError("tradeoff_curve: need at least 2 runs");
  TradeoffCurve out;
  for (const auto& r : runs) {
    check_unit(r.acc, "tradeoff_curve: acc");
    check_unit(r.priv, "tradeoff_curve: priv");
    const bool dup = std::any_of(out.points.begin(), out.points.end(),
                                 [&](const TradeoffRun& p) { return p.acc == r.acc && p.priv == r.priv; });
    if (dup) {
      std::ostringstream os;
      os << "duplicate point (acc " << r.acc << ", priv " << r.priv << ") collapsed";
      out.warnings.push_back(os.str());
      continue;
    }
    out.points.push_back(r);
  }
  std::stable_sort(out.points.begin(), out.points.end(),
                   [](const TradeoffRun& a, const TradeoffRun& b) { return a.priv < b.priv; });

  // Union of boxes [0, acc] x [0, 1 - priv]: sweep acc downward.
  auto pts = out.points;
  std::sort(pts.begin(), pts.end(), [](const TradeoffRun& a, const TradeoffRun& b) { return a.acc > b.acc; });
  double best_y = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    best_y = std::max(best_y, 1.0 - pts[i].priv);
    const double next_x = i + 1 < pts.size() ? pts[i + 1].acc : 0.0;
    out.nhv += (pts[i].acc - next_x) * best_y;
  }
  return out;
}

std::string tradeoff_svg(const TradeoffCurve& curve) {
  const double w = 420, h = 420, m = 50;
  auto X = [&](double acc) { return m + acc * (w - 2 * m); };
  auto Y = [&](double y) { return h - m - y * (h - 2 * m); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<rect x=\"" << m << "\" y=\"" << m << "\" width=\"" << w - 2 * m << "\" height=\"" << h - 2 * m
     << "\" fill=\"none\" stroke=\"black\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"13\">utility (top-1)</text>\n"
     << "<text x=\"14\" y=\"" << h / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 " << h / 2
     << ")\">1 - privacy leakage</text>\n"
     << "<text x=\"" << w / 2 << "\" y=\"" << m - 16 << "\" text-anchor=\"middle\" font-size=\"13\">NHV = " << curve.nhv
     << "</text>\n<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& p : curve.points) os << X(p.acc) << "," << Y(1.0 - p.priv) << " ";
  os << "\"/>\n";
  for (const auto& p : curve.points)
    os << "<circle cx=\"" << X(p.acc) << "\" cy=\"" << Y(1.0 - p.priv) << "\" r=\"4\" fill=\"steelblue\"><title>budget "
       << p.budget_weight << ", task " << p.task_weight << "</title></circle>\n";
  os << "</svg>\n";
  return os.str();
}

// ---- protocol-level ------------------------------------------------------------

Mat<float> pooled_clips(const Adapter<float>* adapter, const std::vector<Mat<float>>& clips, Pooling pooling) {
  return pooled_subset(adapter, clips, all_indices(clips.size()), pooling);
}

namespace {

Mat<double> video_logits(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                         int clips_per_video, Pooling pooling) {
  if (table.videos.empty()) throw DomainError("evaluation set is empty");
  Mat<double> out(static_cast<Eigen::Index>(table.videos.size()), head.config().num_outputs);
  for (std::size_t v = 0; v < table.videos.size(); ++v) {
    const auto& vf = table.videos[v];
    if (vf.clips.empty()) throw LookupError("video " + vf.labels.video_id + " has no stored clips");
    const auto idx = evenly_spaced_indices(static_cast<int>(vf.clips.size()), clips_per_video);
    Tape<float> tape;
    const Mat<float> logits =
        mut(head).forward_linear_ar(tape, tape.constant(pooled_subset(adapter, vf.clips, idx, pooling)), false).value();
    out.row(static_cast<Eigen::Index>(v)) = logits.cast<double>().colwise().mean();
  }
  return out;
}

}  // namespace

double eval_top1(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter, int clips_per_video,
                 Pooling pooling, std::vector<int>* correct) {
  const Mat<double> logits = video_logits(head, table, adapter, clips_per_video, pooling);
  std::vector<int> labels;
  for (const auto& vf : table.videos) labels.push_back(vf.labels.action);
  if (correct != nullptr) {
    correct->clear();
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      Eigen::Index arg;
      logits.row(i).maxCoeff(&arg);
      correct->push_back(arg == labels[i] ? 1 : 0);
    }
  }
  return top1_accuracy(logits, labels);
}

PrivacyResult eval_privacy(const Head<float>& probe, const FeatureTable& table, const Adapter<float>* adapter,
                           Pooling pooling) {
  std::vector<Mat<float>> feats;
  std::vector<const VideoRecord*> owners;
  for (const auto& vf : table.videos)
    for (std::size_t s = 0; s < vf.static_clips.size(); ++s) owners.push_back(&vf.labels);
  if (owners.empty()) throw DomainError("eval_privacy: no static clips");
  const int a = probe.config().num_outputs;
  Mat<double> labels(static_cast<Eigen::Index>(owners.size()), a);
  Mat<double> logits(labels.rows(), a);
  Eigen::Index row = 0;
  for (const auto& vf : table.videos) {
    if (vf.static_clips.empty()) continue;
    const Mat<float> pooled = pooled_clips(adapter, vf.static_clips, pooling);
    Tape<float> tape;
    const Mat<float> z = mut(probe).forward_privacy_probe(tape, tape.constant(pooled), false).value();
    if (static_cast<int>(vf.labels.attributes.size()) < a)
      throw ShapeError("eval_privacy: video " + vf.labels.video_id + " has too few attributes");
    for (Eigen::Index i = 0; i < z.rows(); ++i, ++row) {
      logits.row(row) = z.row(i).cast<double>();
      for (int j = 0; j < a; ++j) labels(row, j) = vf.labels.attributes[j];
    }
  }
  PrivacyResult out;
  auto cm = class_mean_ap(logits, labels);
  out.cmap = cm.cmap;
  out.warnings = std::move(cm.warnings);
  out.accuracy = attribute_accuracy(logits, labels);
  out.chance = attribute_chance(labels);
  return out;
}

TadMapResult eval_tad_map(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                          const std::vector<double>& thresholds, const TadDecodeOptions& opt) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Segment>> truth;
  for (const auto& vf : table.videos) {
    if (vf.clips.empty()) throw LookupError("video " + vf.labels.video_id + " has no stored clips");
    const Mat<float> seq = pooled_clips(adapter, vf.clips, Pooling::kMean);
    Tape<float> tape;
    auto o = mut(head).forward_tad(tape, tape.constant(seq), seq.rows(), false);
    dets.push_back(decode_detections(softmax_rows(o.logits.value()), o.offsets.value().cast<double>(), opt));
    truth.push_back(vf.labels.segments);
  }
  return detection_map(dets, truth, head.config().num_outputs, thresholds);
}

double eval_ad_auc(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& vf : table.videos) {
    if (vf.clips.empty()) throw LookupError("video " + vf.labels.video_id + " has no stored clips");
    const Mat<float> segs = pooled_clips(adapter, vf.clips, Pooling::kMean);
    Tape<float> tape;
    const Mat<float> s = mut(head).forward_ad(tape, tape.constant(segs), segs.rows(), false).scores.value();
    const auto frames = vf.labels.frame_labels();
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const auto seg = std::min<Eigen::Index>(static_cast<Eigen::Index>(f) / kClipFrames, s.cols() - 1);
      scores.push_back(s(0, seg));
      labels.push_back(frames[f]);
    }
  }
  return roc_auc(scores, labels);
}

double eval_gait_retrieval(const FeatureTable& table, const Adapter<float>* adapter, int gallery_per_subject) {
  if (gallery_per_subject < 1) throw ConfigError("eval_gait_retrieval: gallery_per_subject must be >= 1");
  std::map<int, int> seen;
  std::vector<RowVec<double>> g, p;
  std::vector<int> gid, pid;
  for (const auto& vf : table.videos) {
    const RowVec<double> f = pooled_clips(adapter, vf.clips, Pooling::kMean).cast<double>().colwise().mean();
    if (seen[vf.labels.subject]++ < gallery_per_subject) {
      g.push_back(f);
      gid.push_back(vf.labels.subject);
    } else {
      p.push_back(f);
      pid.push_back(vf.labels.subject);
    }
  }
  auto to_mat = [](const std::vector<RowVec<double>>& rows, Eigen::Index d) {
    Mat<double> m(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
    return m;
  };
  if (g.empty()) throw DomainError("eval_gait_retrieval: empty gallery");
  const Eigen::Index d = g.front().cols();
  return retrieval_top1(to_mat(g, d), gid, to_mat(p, d), pid);
}

BiasGap eval_bias_gap(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                      int clips_per_video) {
  std::vector<int> correct;
  eval_top1(head, table, adapter, clips_per_video, Pooling::kMean, &correct);
  std::vector<Gender> genders;
  for (const auto& vf : table.videos) genders.push_back(vf.labels.gender);
  return bias_gap(correct, genders);
}

}  // namespace anon
