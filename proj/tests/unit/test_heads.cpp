#include "doctest.h"

#include "anon/heads.hpp"
#include "support/gradcheck.hpp"
#include "support/instances.hpp"

#include <cmath>

using namespace anon;
using anon::testing::check_gradients;
using anon::testing::gaussian;

namespace {

HeadConfig cfg(HeadKind k, int d, int n, int hidden = 8) {
  HeadConfig c;
  c.kind = k;
  c.input_dim = d;
  c.num_outputs = n;
  c.hidden = hidden;
  c.seed = 4;
  return c;
}

void zero_all(Head<double>& h) {
  for (auto& p : h.params()) p.value.setZero();
}

Mat<double> affine(const Mat<double>& x, const Parameter<double>& w, const Parameter<double>& b) {
  Mat<double> y(x.rows(), w.value.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index o = 0; o < w.value.rows(); ++o) {
      double s = b.value(0, o);
      for (Eigen::Index k = 0; k < x.cols(); ++k) s += w.value(o, k) * x(i, k);
      y(i, o) = s;
    }
  return y;
}

}  // namespace

TEST_CASE("linear action head") {
  Rng rng(1);
  Head<double> h(cfg(HeadKind::kLinearAR, 6, 4));
  const Mat<double> x = gaussian(5, 6, rng);
  Tape<double> t;
  const Mat<double> y = h.forward_linear_ar(t, t.constant(x), false).value();
  CHECK((y - affine(x, h.params().get("fc.w"), h.params().get("fc.b"))).cwiseAbs().maxCoeff() < 1e-12);

  Head<double> one(cfg(HeadKind::kLinearAR, 6, 1));
  CHECK(one.forward_linear_ar(t, t.constant(x), false).cols() == 1);
  zero_all(h);
  CHECK(h.forward_linear_ar(t, t.constant(x), false).value().isZero());
  CHECK_THROWS_AS(h.forward_linear_ar(t, t.constant(Mat<double>(gaussian(5, 3, rng))), false), ShapeError);
  CHECK_THROWS_AS(h.forward_tad(t, t.constant(x), 5, false), ConfigError);
}

TEST_CASE("privacy probe") {
  Rng rng(2);
  Head<double> h(cfg(HeadKind::kPrivacyProbe, 6, 7, 6));
  const Mat<double> x = gaussian(5, 6, rng);
  Tape<double> t;
  const Mat<double> y = h.forward_privacy_probe(t, t.constant(x), false).value();
  CHECK(y.cols() == 7);
  Mat<double> hidden = affine(x, h.params().get("fc1.w"), h.params().get("fc1.b")).cwiseMax(0.0);
  CHECK((y - affine(hidden, h.params().get("fc2.w"), h.params().get("fc2.b"))).cwiseAbs().maxCoeff() < 1e-12);
  zero_all(h);
  CHECK(h.forward_privacy_probe(t, t.constant(x), false).value().isZero());

  auto lc = cfg(HeadKind::kPrivacyProbe, 6, 7);
  lc.linear_probe = true;
  Head<double> lin(lc);
  CHECK(lin.params().size() == 2);
}

TEST_CASE("detection head shapes and offsets") {
  Rng rng(3);
  Head<double> h(cfg(HeadKind::kTAD, 6, 3));
  Tape<double> t;
  auto single = h.forward_tad(t, t.constant(Mat<double>(gaussian(2, 6, rng))), 1, false);
  CHECK(single.logits.rows() == 2);
  CHECK(single.logits.cols() == 4);
  CHECK(single.offsets.cols() == 2);
  for (int trial = 0; trial < 10; ++trial) {
    auto out = h.forward_tad(t, t.constant(Mat<double>(gaussian(12, 6, rng, 5.0))), 6, false);
    CHECK((out.offsets.value().array() >= 0.0).all());
  }
  const auto seg = decode_segment(5, 2, 3);
  CHECK(seg.first == 3.0);
  CHECK(seg.second == 8.0);
}

TEST_CASE("anomaly head") {
  Rng rng(4);
  Head<double> h(cfg(HeadKind::kAD, 6, 1, 5));
  const Mat<double> x = gaussian(8, 6, rng);
  Tape<double> t;
  auto out = h.forward_ad(t, t.constant(x), 4, false);
  CHECK(out.scores.rows() == 2);
  CHECK(out.scores.cols() == 4);
  CHECK((out.magnitudes.value().array() >= 0.0).all());
  const Mat<double> z = affine(x, h.params().get("embed.w"), h.params().get("embed.b"));
  const Mat<double> s = affine(z.cwiseMax(0.0), h.params().get("score.w"), h.params().get("score.b"));
  for (Eigen::Index i = 0; i < 8; ++i) {
    CHECK(std::abs(out.scores.value()(i / 4, i % 4) - 1.0 / (1.0 + std::exp(-s(i, 0)))) < 1e-12);
    CHECK(std::abs(out.magnitudes.value()(i / 4, i % 4) - z.row(i).norm()) < 1e-9);
  }
  zero_all(h);
  CHECK((h.forward_ad(t, t.constant(x), 4, false).scores.value().array() == 0.5).all());
  CHECK_THROWS_AS(h.forward_ad(t, t.constant(x), 3, false), ShapeError);
}

TEST_CASE("head forwards pass finite differences") {
  Rng rng(5);
  const Mat<double> x = gaussian(12, 6, rng);
  auto run = [&](Head<double>& h, auto fn) {
    auto r = check_gradients(h.params(), fn, 10, 7);
    CHECK(r.max_rel_error < 1e-4);
  };
  Head<double> ar(cfg(HeadKind::kLinearAR, 6, 3));
  run(ar, [&](Tape<double>& t) { return ad::action_ce(ar.forward_linear_ar(t, t.constant(x), true), std::vector<int>(12, 1)); });
  Head<double> pp(cfg(HeadKind::kPrivacyProbe, 6, 4));
  const Mat<double> d4 = gaussian(12, 4, rng);
  run(pp, [&](Tape<double>& t) {
    return ad::sum(ad::cwise_mul(pp.forward_privacy_probe(t, t.constant(x), true), t.constant(d4)));
  });
  Head<double> tad(cfg(HeadKind::kTAD, 6, 2));
  const Mat<double> d3 = gaussian(12, 3, rng), d2 = gaussian(12, 2, rng);
  run(tad, [&](Tape<double>& t) {
    auto o = tad.forward_tad(t, t.constant(x), 6, true);
    return ad::add(ad::sum(ad::cwise_mul(o.logits, t.constant(d3))), ad::sum(ad::cwise_mul(o.offsets, t.constant(d2))));
  });
  Head<double> an(cfg(HeadKind::kAD, 6, 1));
  const Mat<double> da = gaussian(3, 4, rng), db = gaussian(3, 4, rng);
  run(an, [&](Tape<double>& t) {
    auto o = an.forward_ad(t, t.constant(x), 4, true);
    return ad::add(ad::sum(ad::cwise_mul(o.scores, t.constant(da))), ad::sum(ad::cwise_mul(o.magnitudes, t.constant(db))));
  });
}

TEST_CASE("token pooling") {
  Mat<double> x(4, 2);
  x << 1, 5,  //
      3, -1,  //
      0, 0,   //
      2, 2;
  Mat<double> mean = pool_tokens(x, 2), mx = pool_tokens(x, 2, Pooling::kMax);
  CHECK(mean(0, 0) == 2.0);
  CHECK(mean(1, 1) == 1.0);
  CHECK(mx(0, 1) == 5.0);
  CHECK(mx(1, 0) == 2.0);
}
