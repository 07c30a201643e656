#include "doctest.h"

#include "anon/evalsuite.hpp"
#include "support/metric_oracles.hpp"

#include <cmath>
#include <functional>
#include <set>

using namespace anon;

namespace {

std::vector<double> grid_scores(std::size_t n, Rng& rng) {
  std::vector<double> s(n);
  for (auto& x : s) x = static_cast<double>(rng.below(16)) / 4.0;  // deliberate ties
  return s;
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> l(n);
  for (auto& x : l) x = static_cast<int>(rng.below(2));
  return l;
}

}  // namespace

TEST_CASE("average precision") {
  CHECK(average_precision({0.9, 0.8, 0.7}, {1, 0, 1}) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(average_precision({3, 2, 1, 0}, {1, 1, 0, 0}) == 1.0);
  CHECK(average_precision({0, 1, 2, 3}, {1, 0, 0, 0}) == doctest::Approx(0.25));
  // Ties keep input order.
  CHECK(average_precision({1, 1}, {0, 1}) == 0.5);
  CHECK(average_precision({1, 1}, {1, 0}) == 1.0);
  CHECK_THROWS_AS(average_precision({1, 2}, {0, 0}), DomainError);
  CHECK_THROWS_AS(average_precision({1, 2}, {0}), ShapeError);

  Rng rng(11);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    const auto s = grid_scores(n, rng);
    auto l = random_labels(n, rng);
    l[rng.below(n)] = 1;
    CHECK(average_precision(s, l) == doctest::Approx(oracle::average_precision(s, l)).epsilon(1e-12));
  }

  std::vector<double> s(4000);
  for (auto& x : s) x = rng.uniform();
  const auto l = random_labels(s.size(), rng);
  CHECK(std::abs(average_precision(s, l) - 0.5) < 0.05);
}

TEST_CASE("class-mean AP excludes degenerate attributes") {
  Mat<double> scores(4, 3), labels(4, 3);
  scores << 0.9, 0.1, 0.5,  //
      0.8, 0.2, 0.4,        //
      0.7, 0.3, 0.3,        //
      0.1, 0.4, 0.2;
  labels << 1, 1, 0,  //
      0, 1, 0,        //
      1, 1, 0,        //
      0, 1, 0;
  const auto r = class_mean_ap(scores, labels);
  CHECK(r.cmap == doctest::Approx(5.0 / 6.0));
  CHECK(std::isnan(r.per_attribute[1]));
  CHECK(std::isnan(r.per_attribute[2]));
  CHECK(r.warnings.size() == 2);
  CHECK_THROWS_AS(class_mean_ap(scores.rightCols(2), labels.rightCols(2)), DomainError);
  CHECK_THROWS_AS(class_mean_ap(scores, labels.leftCols(2)), ShapeError);

  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.below(15)), a = 1 + static_cast<Eigen::Index>(rng.below(4));
    Mat<double> s(n, a), y(n, a);
    double sum = 0;
    int used = 0;
    for (Eigen::Index c = 0; c < a; ++c) {
      const auto sc = grid_scores(static_cast<std::size_t>(n), rng);
      auto lc = random_labels(static_cast<std::size_t>(n), rng);
      lc[0] = 1;
      lc[1] = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        s(i, c) = sc[static_cast<std::size_t>(i)];
        y(i, c) = lc[static_cast<std::size_t>(i)];
      }
      sum += oracle::average_precision(sc, lc);
      ++used;
    }
    CHECK(class_mean_ap(s, y).cmap == doctest::Approx(sum / used).epsilon(1e-12));
  }
}

TEST_CASE("attribute accuracy and chance") {
  Mat<double> logits(4, 2), labels(4, 2);
  logits << 1, -1, -1, 1, 2, 2, -3, -3;
  labels << 1, 0, 0, 0, 1, 0, 1, 0;
  CHECK(attribute_accuracy(logits, labels) == doctest::Approx(5.0 / 8.0));
  CHECK(attribute_chance(labels) == doctest::Approx((0.75 + 1.0) / 2));
}

TEST_CASE("ROC AUC matches the pairwise count") {
  CHECK(roc_auc({0.1, 0.9}, {0, 1}) == 1.0);
  CHECK(roc_auc({0.9, 0.1}, {0, 1}) == 0.0);
  CHECK(roc_auc({0.5, 0.5}, {0, 1}) == 0.5);
  CHECK_THROWS_AS(roc_auc({1, 2, 3}, {1, 1, 1}), DomainError);
  Rng rng(13);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 2 + rng.below(15);
    const auto s = grid_scores(n, rng);
    auto l = random_labels(n, rng);
    l[0] = 1;
    l[1] = 0;
    CHECK(roc_auc(s, l) == doctest::Approx(oracle::roc_auc(s, l)).epsilon(1e-12));
  }
  // Random scores: 0.5 within 3 sd of the Mann-Whitney null.
  std::vector<double> s(4000);
  for (auto& x : s) x = rng.uniform();
  const auto l = random_labels(s.size(), rng);
  double p = 0;
  for (int x : l) p += x;
  const double q = static_cast<double>(l.size()) - p;
  CHECK(std::abs(roc_auc(s, l) - 0.5) <= 3 * std::sqrt((p + q + 1) / (12 * p * q)));
}

TEST_CASE("rank metrics are invariant to strictly increasing transforms") {
  Rng rng(14);
  std::vector<std::function<double(double)>> family;
  for (int k = 0; k < 100; ++k) {
    const double a = rng.uniform(0.1, 3), b = rng.uniform(-5, 5);
    switch (k % 4) {
      case 0: family.push_back([=](double x) { return a * x + b; }); break;
      case 1: family.push_back([=](double x) { return std::exp(a * x) + b; }); break;
      case 2: family.push_back([=](double x) { return a * x * x * x + x + b; }); break;
      default: family.push_back([=](double x) { return std::atan(a * (x - 2)) + b; }); break;
    }
  }
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 16;
    const auto s = grid_scores(n, rng);
    auto l = random_labels(n, rng);
    l[0] = 1;
    l[1] = 0;
    const double ap = average_precision(s, l), auc = roc_auc(s, l);
    for (const auto& f : family) {
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = f(s[i]);
      CHECK(average_precision(t, l) == ap);
      CHECK(roc_auc(t, l) == auc);
    }
  }
}

TEST_CASE("top-1 accuracy") {
  Rng rng(15);
  const int n = 10000, k = 8;
  Mat<double> logits(n, k);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(k));
    for (int c = 0; c < k; ++c) logits(i, c) = static_cast<double>(rng.below(64)) / 8.0;
  }
  const double acc = top1_accuracy(logits, labels);
  // Row-wise constant shifts do not move the argmax.
  Mat<double> shifted = logits;
  for (int i = 0; i < n; ++i) shifted.row(i).array() += static_cast<double>(rng.below(100)) - 50;
  CHECK(top1_accuracy(shifted, labels) == acc);
  // Random logits: about 1/K.
  CHECK(std::abs(acc - 1.0 / k) <= 3 * std::sqrt((1.0 / k) * (1 - 1.0 / k) / n) + 0.01);
  for (int i = 0; i < n; ++i) logits(i, labels[static_cast<std::size_t>(i)]) = 100;
  CHECK(top1_accuracy(logits, labels) == 1.0);
  CHECK_THROWS_AS(top1_accuracy(logits, {1, 2}), ShapeError);
}

TEST_CASE("cosine retrieval") {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index g = 2 + static_cast<Eigen::Index>(rng.below(14)), p = 1 + static_cast<Eigen::Index>(rng.below(16));
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.below(6));
    Mat<double> gal(g, d), prb(p, d);
    for (Eigen::Index i = 0; i < gal.size(); ++i) gal.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < prb.size(); ++i) prb.data()[i] = rng.normal();
    std::vector<int> gid(static_cast<std::size_t>(g)), pid(static_cast<std::size_t>(p));
    for (auto& x : gid) x = static_cast<int>(rng.below(4));
    for (auto& x : pid) x = gid[rng.below(gid.size())];
    CHECK(retrieval_top1(gal, gid, prb, pid) == doctest::Approx(oracle::retrieval_top1(gal, gid, prb, pid)));
    // Probing with the gallery itself is perfect, and scale does not matter.
    // In one dimension every vector is parallel, so skip it there.
    if (d > 1) CHECK(retrieval_top1(gal, gid, 3.0 * gal, gid) == 1.0);
  }
  Mat<double> gal = Mat<double>::Identity(2, 2);
  CHECK_THROWS_AS(retrieval_top1(gal, {0, 1}, gal, {0, 7}), DomainError);
  CHECK_THROWS_AS(retrieval_top1(gal, {0}, gal, {0, 1}), ShapeError);
}

TEST_CASE("combined score and bias gap") {
  CHECK(combined_score(0.74, 0.5) == doctest::Approx(0.62));
  CHECK(combined_score(1, 0) == 1.0);
  CHECK(combined_score(0, 1) == 0.0);
  CHECK_THROWS_AS(combined_score(1.2, 0.5), RangeError);
  CHECK_THROWS_AS(combined_score(0.5, -0.1), RangeError);

  std::vector<int> correct;
  std::vector<Gender> genders;
  for (int i = 0; i < 10000; ++i) {
    correct.push_back(i < 4678);
    genders.push_back(Gender::kFemale);
  }
  for (int i = 0; i < 10000; ++i) {
    correct.push_back(i < 5620);
    genders.push_back(Gender::kMale);
  }
  const BiasGap b = bias_gap(correct, genders);
  CHECK(b.acc_female == doctest::Approx(0.4678));
  CHECK(b.acc_male == doctest::Approx(0.5620));
  CHECK(100 * b.gap == doctest::Approx(9.42));
  CHECK(b.overall == doctest::Approx((0.4678 + 0.5620) / 2));
  CHECK(bias_gap({1, 0, 1, 0}, {Gender::kFemale, Gender::kFemale, Gender::kMale, Gender::kMale}).gap == 0.0);
  CHECK_THROWS_AS(bias_gap({1, 1}, {Gender::kMale, Gender::kMale}), DomainError);
}

TEST_CASE("detection AP against the greedy-matching oracle") {
  // One hit at tIoU 0.5, one miss.
  const std::vector<std::vector<Segment>> gt{{{0, 10, 0}, {20, 30, 0}}};
  const std::vector<std::vector<Detection>> dets{{{1, 10, 0.9, 0}, {40, 50, 0.8, 0}}};
  CHECK(detection_ap(dets, gt, 0, 0.5) == doctest::Approx(0.5));
  CHECK(detection_ap(dets, gt, 0, 0.95) == 0.0);
  CHECK(std::isnan(detection_ap(dets, gt, 1, 0.5)));
  // A duplicate of a matched segment is a false positive.
  const std::vector<std::vector<Detection>> dup{{{0, 10, 0.9, 0}, {0, 10, 0.8, 0}, {20, 30, 0.7, 0}}};
  CHECK(detection_ap(dup, gt, 0, 0.5) == doctest::Approx((1.0 + 2.0 / 3.0) / 2));
  std::vector<std::vector<Detection>> exact{{{0, 10, 0.5, 0}, {20, 30, 0.4, 0}}};
  CHECK(detection_ap(exact, gt, 0, 0.7) == 1.0);

  Rng rng(17);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t nv = 1 + rng.below(3);
    std::vector<std::vector<Segment>> truth(nv);
    std::vector<std::vector<Detection>> pred(nv);
    for (std::size_t v = 0; v < nv; ++v) {
      const std::size_t ng = rng.below(4), nd = rng.below(6);
      for (std::size_t i = 0; i < ng; ++i) {
        const double s = static_cast<double>(rng.below(40));
        truth[v].push_back({s, s + 1 + static_cast<double>(rng.below(10)), static_cast<int>(rng.below(2))});
      }
      for (std::size_t i = 0; i < nd; ++i) {
        const double s = static_cast<double>(rng.below(40));
        pred[v].push_back({s, s + 1 + static_cast<double>(rng.below(10)), static_cast<double>(rng.below(5)),
                           static_cast<int>(rng.below(2))});
      }
    }
    for (int label = 0; label < 2; ++label)
      for (double thr : {0.1, 0.3, 0.5, 0.7}) {
        const double got = detection_ap(pred, truth, label, thr);
        bool any = false;
        for (const auto& g : truth)
          for (const auto& s : g) any = any || s.label == label;
        if (!any) {
          CHECK(std::isnan(got));
          continue;
        }
        CHECK(got == doctest::Approx(oracle::detection_ap(pred, truth, label, thr)).epsilon(1e-12));
      }
  }
}

TEST_CASE("detection mAP and decoding") {
  const std::vector<std::vector<Segment>> gt{{{0, 10, 0}, {20, 30, 1}}};
  const std::vector<std::vector<Detection>> perfect{{{0, 10, 0.9, 0}, {20, 30, 0.8, 1}}};
  const auto r = detection_map(perfect, gt, 3, {0.3, 0.5, 0.7});
  CHECK(r.mean_map == 1.0);
  CHECK(r.map_at.size() == 3);
  const auto none = detection_map({{}}, gt, 2, {0.5});
  CHECK(none.mean_map == 0.0);
  CHECK(none.warnings.size() == 1);
  CHECK_THROWS_AS(detection_map(perfect, {{}}, 2, {0.5}), DomainError);
  CHECK_THROWS_AS(detection_map(perfect, gt, 2, {}), ConfigError);

  // Instants 1 and 2 propose overlapping class-0 segments; NMS keeps the higher.
  Mat<double> probs(4, 3), offsets(4, 2);
  probs << 0.9, 0.05, 0.05,  //
      0.2, 0.7, 0.1,         //
      0.1, 0.8, 0.1,         //
      0.95, 0.0, 0.05;
  offsets << 0, 0, 1, 1, 2, 1, 0, 0;
  const auto d = decode_detections(probs, offsets, {});
  REQUIRE(d.size() == 2);
  CHECK(d[0].label == 0);
  CHECK(d[0].score == 0.8);
  CHECK(d[0].start == 0);
  CHECK(d[0].end == 3);
  CHECK(d[1].label == 1);
  CHECK(d[1].score == 0.1);
  TadDecodeOptions loose;
  loose.nms_iou = 1.01;
  loose.score_threshold = 0.5;
  CHECK(decode_detections(probs, offsets, loose).size() == 2);
  CHECK_THROWS_AS(decode_detections(probs, offsets.leftCols(1), {}), ShapeError);
}

TEST_CASE("tradeoff curve and normalized hypervolume") {
  const auto two = tradeoff_curve({{0, 1, 1, 0}, {1, 1, 0, 1}});
  CHECK(two.nhv == 1.0);
  CHECK(two.points.front().priv == 0);

  const std::vector<TradeoffRun> base{{0, 1, 0.9, 0.8}, {1, 1, 0.7, 0.4}, {4, 1, 0.5, 0.2}};
  const double h = tradeoff_curve(base).nhv;
  CHECK(h == doctest::Approx(oracle::nhv(base)));
  auto more = base;
  more.push_back({2, 1, 0.6, 0.5});  // dominated by (0.7, 0.4)
  CHECK(tradeoff_curve(more).nhv == doctest::Approx(h));
  more.push_back(base[0]);
  const auto dup = tradeoff_curve(more);
  CHECK(dup.points.size() == 4);
  CHECK(dup.warnings.size() == 1);
  for (std::size_t i = 1; i < dup.points.size(); ++i) CHECK(dup.points[i - 1].priv <= dup.points[i].priv);
  CHECK_THROWS_AS(tradeoff_curve({base[0]}), DomainError);
  CHECK_THROWS_AS(tradeoff_curve({base[0], {0, 0, 1.5, 0}}), RangeError);
  CHECK(tradeoff_svg(dup).find("<svg") == 0);

  Rng rng(18);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<TradeoffRun> runs;
    const std::size_t n = 2 + rng.below(10);
    for (std::size_t i = 0; i < n; ++i)
      runs.push_back({0, 1, static_cast<double>(rng.below(11)) / 10, static_cast<double>(rng.below(11)) / 10});
    CHECK(tradeoff_curve(runs).nhv == doctest::Approx(oracle::nhv(runs)).epsilon(1e-12));
  }
}
