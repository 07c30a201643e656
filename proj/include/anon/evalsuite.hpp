#pragma once

// Evaluation protocols: privacy cMAP, action top-1, detection mAP, anomaly
// frame AUC, gait retrieval, the combined privacy/utility score, the gender
// subclass gap and the privacy-utility tradeoff curve.

#include "anon/adapter.hpp"
#include "anon/datagen.hpp"
#include "anon/errors.hpp"
#include "anon/featurestore.hpp"
#include "anon/heads.hpp"
#include "anon/losses.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace anon {

// ---- score-level metrics ---------------------------------------------------

// Precision averaged at each positive's rank, scores descending (ties keep
// item order).
double average_precision(const std::vector<double>& scores, const std::vector<int>& labels);

struct CmapResult {
  double cmap = 0;
  std::vector<double> per_attribute;  // NaN where excluded
  std::vector<std::string> warnings;
};
// scores, labels: [N x A]. Attributes lacking positives or negatives are
// excluded with a warning.
CmapResult class_mean_ap(const Mat<double>& scores, const Mat<double>& labels);

// Mean over attributes of the 0/1 accuracy of (score > 0).
double attribute_accuracy(const Mat<double>& logits, const Mat<double>& labels);
// Mean over attributes of the majority-class rate (a constant predictor).
double attribute_chance(const Mat<double>& labels);

// Rank-based ROC AUC (Mann-Whitney, ties averaged).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

double top1_accuracy(const Mat<double>& logits, const std::vector<int>& labels);

// Cosine nearest-gallery retrieval hit rate.
double retrieval_top1(const Mat<double>& gallery, const std::vector<int>& gallery_ids, const Mat<double>& probe,
                      const std::vector<int>& probe_ids);

// (acc + (1 - priv)) / 2
double combined_score(double acc, double priv);

struct BiasGap {
  double acc_female = 0, acc_male = 0, overall = 0, gap = 0;
};
BiasGap bias_gap(const std::vector<int>& correct, const std::vector<Gender>& genders);

// ---- detection ---------------------------------------------------------------

struct Detection {
  double start = 0, end = 0, score = 0;
  int label = 0;
};

struct TadDecodeOptions {
  double score_threshold = 0.1;
  double nms_iou = 0.5;
};

// One video's per-instant class probabilities [T x (K+1)] (column 0 =
// background) and offsets [T x 2] to detections, after per-class NMS.
std::vector<Detection> decode_detections(const Mat<double>& probs, const Mat<double>& offsets, const TadDecodeOptions& opt);

// Greedy matching by descending score; a ground truth matches at most once.
// AP is the area under the interpolated precision envelope.
double detection_ap(const std::vector<std::vector<Detection>>& detections, const std::vector<std::vector<Segment>>& truth,
                    int label, double tiou);

struct TadMapResult {
  std::vector<double> thresholds;
  std::vector<double> map_at;  // mean over classes with ground truth
  double mean_map = 0;
  std::vector<std::string> warnings;
};
TadMapResult detection_map(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<Segment>>& truth, int num_classes,
                           const std::vector<double>& thresholds);

// ---- tradeoff ------------------------------------------------------------------

struct TradeoffRun {
  double budget_weight = 0, task_weight = 0, acc = 0, priv = 0;
};
struct TradeoffCurve {
  std::vector<TradeoffRun> points;  // privacy ascending, duplicates collapsed
  double nhv = 0;                   // area dominated in (acc, 1 - priv), reference (0, 0)
  std::vector<std::string> warnings;
};
TradeoffCurve tradeoff_curve(const std::vector<TradeoffRun>& runs);
std::string tradeoff_svg(const TradeoffCurve& curve);

// ---- protocol-level evaluation on feature tables --------------------------------

// Pooled (optionally anonymized) features. Pass adapter = nullptr for raw.
Mat<float> pooled_clips(const Adapter<float>* adapter, const std::vector<Mat<float>>& clips, Pooling pooling);

double eval_top1(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                 int clips_per_video = 5, Pooling pooling = Pooling::kMean, std::vector<int>* correct = nullptr);

struct PrivacyResult {
  double cmap = 0, accuracy = 0, chance = 0;
  std::vector<std::string> warnings;
};
PrivacyResult eval_privacy(const Head<float>& probe, const FeatureTable& table, const Adapter<float>* adapter,
                           Pooling pooling = Pooling::kMean);

TadMapResult eval_tad_map(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                          const std::vector<double>& thresholds, const TadDecodeOptions& opt = {});

double eval_ad_auc(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter);

// First `gallery_per_subject` videos of each subject form the gallery, the
// rest are probes.
double eval_gait_retrieval(const FeatureTable& table, const Adapter<float>* adapter, int gallery_per_subject);

BiasGap eval_bias_gap(const Head<float>& head, const FeatureTable& table, const Adapter<float>* adapter,
                      int clips_per_video = 5);

// Everything a run reports.
struct EvalReport {
  std::optional<double> cmap, privacy_accuracy, privacy_chance;
  std::map<std::string, double> top1;
  std::optional<TadMapResult> tad;
  std::optional<double> ad_auc, gait_top1;
  std::optional<BiasGap> bias;
  std::optional<double> combined;
  std::string adapter_checkpoint;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

}  // namespace anon
