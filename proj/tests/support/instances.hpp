#pragma once

// Random small loss instances shared by the unit tests and the acceptance
// binary.

#include "anon/losses.hpp"
#include "anon/random.hpp"
#include "loss_oracles.hpp"

#include <vector>

namespace anon::testing {

inline Mat<double> gaussian(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

inline Mat<double> uniform(Eigen::Index r, Eigen::Index c, Rng& rng, double lo, double hi) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

struct TadInstance {
  Eigen::Index seq_len = 0;
  int classes = 0;
  Mat<double> logits, offsets;
  std::vector<std::vector<Segment>> segments;

  std::vector<std::vector<oracle::Seg>> oracle_segments() const {
    std::vector<std::vector<oracle::Seg>> out;
    for (const auto& v : segments) {
      out.emplace_back();
      for (const auto& s : v) out.back().push_back({s.start, s.end, s.label});
    }
    return out;
  }
};

// Sequences of at most 8 instants, 0..2 segments each.
inline TadInstance random_tad(Rng& rng) {
  TadInstance in;
  in.seq_len = 2 + static_cast<Eigen::Index>(rng.below(7));
  in.classes = 1 + static_cast<int>(rng.below(3));
  const Eigen::Index batch = 1 + static_cast<Eigen::Index>(rng.below(2));
  in.logits = gaussian(batch * in.seq_len, in.classes + 1, rng, 1.5);
  in.offsets = uniform(batch * in.seq_len, 2, rng, 0.2, 3.0);
  for (Eigen::Index b = 0; b < batch; ++b) {
    std::vector<Segment> segs;
    const auto n = rng.below(3);
    for (std::uint64_t s = 0; s < n; ++s) {
      const double a = rng.uniform(-0.5, static_cast<double>(in.seq_len) - 1.0);
      const double len = rng.uniform(0.5, static_cast<double>(in.seq_len));
      segs.push_back({a, a + len, static_cast<int>(rng.below(static_cast<std::uint64_t>(in.classes)))});
    }
    in.segments.push_back(segs);
  }
  return in;
}

struct AdInstance {
  Mat<double> scores, mags;
  std::vector<int> labels;
};

// Even batch of at most 8 videos with at most 8 segments.
inline AdInstance random_ad(Rng& rng) {
  AdInstance in;
  const Eigen::Index half = 1 + static_cast<Eigen::Index>(rng.below(4));
  const Eigen::Index segs = 1 + static_cast<Eigen::Index>(rng.below(8));
  in.scores = uniform(2 * half, segs, rng, 0.02, 0.98);
  in.mags = uniform(2 * half, segs, rng, 0.0, 3.0);
  for (Eigen::Index i = 0; i < 2 * half; ++i) in.labels.push_back(i < half ? 0 : 1);
  return in;
}

}  // namespace anon::testing
