#include "doctest.h"

#include "anon/adapter.hpp"
#include "support/gradcheck.hpp"
#include "support/instances.hpp"

using namespace anon;
using anon::testing::check_gradients;
using anon::testing::gaussian;

namespace {

AdapterConfig small(AdapterVariant v, int depth, int d, int heads) {
  AdapterConfig c;
  c.variant = v;
  c.depth = depth;
  c.feature_dim = d;
  c.heads = heads;
  c.seed = 9;
  return c;
}

// Scalar functional of the adapter output for gradient checks.
Var<double> probe(Tape<double>& t, Adapter<double>& a, const Mat<double>& x, const Mat<double>& dir, Eigen::Index tokens,
                  Mode mode) {
  Rng rng(77);
  auto y = a.forward(t, t.constant(x), tokens, mode, &rng, true);
  return ad::sum(ad::cwise_mul(y, t.constant(dir)));
}

}  // namespace

TEST_CASE("adapter construction follows the configuration") {
  Adapter<double> sa(small(AdapterVariant::kSelfAttention, 3, 64, 8));
  int blocks = 0;
  for (const auto& p : sa.params())
    if (p.name.ends_with("attn.wq")) ++blocks;
  CHECK(blocks == 3);
  // per block: 2 layer norms, 4 projections, 4d feed-forward
  const Eigen::Index d = 64;
  CHECK(sa.params().count() == 3 * (4 * d + 4 * (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)));

  Adapter<double> mlp(small(AdapterVariant::kMlp, 1, 64, 8));
  CHECK(mlp.params().size() == 4);
  CHECK(mlp.buffers().size() == 2);

  CHECK_THROWS_AS(Adapter<double>(small(AdapterVariant::kSelfAttention, 3, 64, 7)), ConfigError);
  CHECK_THROWS_AS(Adapter<double>(small(AdapterVariant::kMlp, 0, 64, 8)), ConfigError);
  CHECK(adapter_variant_from_string("mlp") == AdapterVariant::kMlp);
  CHECK_THROWS_AS(adapter_variant_from_string("conv"), ConfigError);
}

TEST_CASE("anonymize preserves shape and is deterministic in evaluation mode") {
  Rng rng(1);
  for (auto v : {AdapterVariant::kSelfAttention, AdapterVariant::kMlp}) {
    Adapter<double> a(small(v, 2, 64, 8));
    const Mat<double> x = gaussian(8, 64, rng);
    const Mat<double> y = anonymize(a, x, 8);
    CHECK(y.rows() == 8);
    CHECK(y.cols() == 64);
    CHECK(y == anonymize(a, x, 8));
    CHECK(all_finite(y));
    CHECK_THROWS_AS(anonymize(a, Mat<double>(gaussian(8, 32, rng)), 8), ShapeError);
  }
}

TEST_CASE("attention adapter mixes only within a clip") {
  Rng rng(2);
  Adapter<double> a(small(AdapterVariant::kSelfAttention, 1, 16, 4));
  Mat<double> x = gaussian(8, 16, rng);
  const Mat<double> y = anonymize(a, x, 4);
  x.row(6) *= -3.0;  // second clip only
  const Mat<double> y2 = anonymize(a, x, 4);
  CHECK(y.topRows(4) == y2.topRows(4));
  CHECK_FALSE(y.bottomRows(4).isApprox(y2.bottomRows(4)));
}

TEST_CASE("adapter variants pass finite differences") {
  Rng rng(3);
  SUBCASE("self attention") {
    Adapter<double> a(small(AdapterVariant::kSelfAttention, 2, 8, 2));
    const Mat<double> x = gaussian(8, 8, rng), dir = gaussian(8, 8, rng);
    auto r = check_gradients(a.params(), [&](Tape<double>& t) { return probe(t, a, x, dir, 4, Mode::kEval); }, 10, 1);
    CHECK(r.checked >= 10);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("self attention with residual dropout") {
    auto cfg = small(AdapterVariant::kSelfAttention, 1, 8, 2);
    cfg.attention_dropout_rate = 0.2;
    Adapter<double> a(cfg);
    const Mat<double> x = gaussian(8, 8, rng), dir = gaussian(8, 8, rng);
    auto r = check_gradients(a.params(), [&](Tape<double>& t) { return probe(t, a, x, dir, 4, Mode::kTrain); }, 10, 2);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("mlp in train mode") {
    Adapter<double> a(small(AdapterVariant::kMlp, 2, 6, 1));
    const Mat<double> x = gaussian(10, 6, rng), dir = gaussian(10, 6, rng);
    auto r = check_gradients(a.params(), [&](Tape<double>& t) { return probe(t, a, x, dir, 1, Mode::kTrain); }, 10, 3);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("mlp in eval mode") {
    Adapter<double> a(small(AdapterVariant::kMlp, 2, 6, 1));
    const Mat<double> x = gaussian(10, 6, rng), dir = gaussian(10, 6, rng);
    auto r = check_gradients(a.params(), [&](Tape<double>& t) { return probe(t, a, x, dir, 1, Mode::kEval); }, 10, 4);
    INFO(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("mlp running statistics track batch statistics") {
  auto cfg = small(AdapterVariant::kMlp, 1, 4, 1);
  cfg.dropout_rate = 0.0;
  Adapter<double> a(cfg);
  Rng rng(4);
  const Mat<double> x = gaussian(32, 4, rng);
  for (int i = 0; i < 200; ++i) {
    Tape<double> t;
    a.forward(t, t.constant(x), 1, Mode::kTrain, &rng, false);
  }
  Tape<double> t1, t2;
  const Mat<double> train = a.forward(t1, t1.constant(x), 1, Mode::kTrain, &rng, false).value();
  const Mat<double> eval = a.forward(t2, t2.constant(x), 1, Mode::kEval, nullptr, false).value();
  // running variance is the unbiased estimate, so eval is slightly shrunk
  CHECK((train - eval).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("float and double adapters agree") {
  Adapter<double> ad(small(AdapterVariant::kSelfAttention, 3, 64, 8));
  Adapter<float> af(small(AdapterVariant::kSelfAttention, 3, 64, 8));
  Rng rng(5);
  const Mat<double> x = gaussian(8, 64, rng);
  const Mat<double> yd = anonymize(ad, x, 8);
  const Mat<float> yf = anonymize(af, Mat<float>(x.cast<float>()), 8);
  CHECK((yd - yf.cast<double>()).cwiseAbs().maxCoeff() < 1e-4);
}
