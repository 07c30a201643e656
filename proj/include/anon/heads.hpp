#pragma once

// Task heads trained on (anonymized) features, plus the privacy probe.

#include "anon/autodiff.hpp"
#include "anon/errors.hpp"
#include "anon/nn.hpp"

#include <cstdint>
#include <string>
#include <type_traits>
#include <utility>

namespace anon {

enum class HeadKind { kLinearAR, kTAD, kAD, kPrivacyProbe };

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kLinearAR: return "linear_ar";
    case HeadKind::kTAD: return "tad";
    case HeadKind::kAD: return "ad";
    case HeadKind::kPrivacyProbe: return "privacy_probe";
  }
  return "?";
}
inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "linear_ar") return HeadKind::kLinearAR;
  if (s == "tad") return HeadKind::kTAD;
  if (s == "ad") return HeadKind::kAD;
  if (s == "privacy_probe") return HeadKind::kPrivacyProbe;
  throw ConfigError("unknown head kind '" + s + "'");
}

enum class Pooling { kMean, kMax };

struct HeadConfig {
  HeadKind kind = HeadKind::kLinearAR;
  int input_dim = 64;
  // Classes for linear_ar and tad (excluding background), attributes for the
  // privacy probe; unused by ad.
  int num_outputs = 1;
  int hidden = 64;       // tad tower width, ad embedding width, probe hidden width
  int kernel = 3;        // tad temporal kernel
  bool linear_probe = false;  // privacy probe: single Linear(d, A) instead of the 2-layer MLP
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw ConfigError("head input_dim must be >= 1");
    if (kind != HeadKind::kAD && num_outputs < 1) throw ConfigError("head num_outputs must be >= 1");
    if (hidden < 1) throw ConfigError("head hidden must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("head kernel must be odd");
  }
};

template <typename Scalar>
struct TadOutput {
  Var<Scalar> logits;   // [B*T x (K+1)], column 0 = background
  Var<Scalar> offsets;  // [B*T x 2], nonnegative
};

template <typename Scalar>
struct AdOutput {
  Var<Scalar> scores;      // [B x S] in (0, 1)
  Var<Scalar> magnitudes;  // [B x S] >= 0
};

template <typename Scalar>
class Head {
 public:
  explicit Head(HeadConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const Eigen::Index d = cfg_.input_dim, h = cfg_.hidden, k = cfg_.kernel, n = cfg_.num_outputs;
    switch (cfg_.kind) {
      case HeadKind::kLinearAR:
        add_linear("fc", d, n, rng);
        break;
      case HeadKind::kPrivacyProbe:
        if (cfg_.linear_probe) {
          add_linear("fc", d, n, rng);
        } else {
          add_linear("fc1", d, h, rng);
          add_linear("fc2", h, n, rng);
        }
        break;
      case HeadKind::kTAD:
        add_linear("conv1", k * d, h, rng);
        add_linear("conv2", k * h, h, rng);
        add_linear("cls", k * h, n + 1, rng);
        add_linear("reg", k * h, 2, rng);
        break;
      case HeadKind::kAD:
        add_linear("embed", d, h, rng);
        add_linear("score", h, 1, rng);
        break;
    }
  }

  const HeadConfig& config() const { return cfg_; }
  HeadKind kind() const { return cfg_.kind; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  std::string checksum() const { return params_.checksum(); }

  // pooled: [B x d] -> logits [B x K]
  Var<Scalar> forward_linear_ar(Tape<Scalar>& tape, Var<Scalar> pooled, bool trainable) {
    expect(HeadKind::kLinearAR);
    check_dim(pooled);
    return lin(tape, pooled, "fc", trainable);
  }

  // pooled static features: [B x d] -> independent attribute logits [B x A]
  Var<Scalar> forward_privacy_probe(Tape<Scalar>& tape, Var<Scalar> pooled, bool trainable) {
    expect(HeadKind::kPrivacyProbe);
    check_dim(pooled);
    if (cfg_.linear_probe) return lin(tape, pooled, "fc", trainable);
    return lin(tape, ad::relu(lin(tape, pooled, "fc1", trainable)), "fc2", trainable);
  }

  // Sequences of instant features [B*T x d] -> per-instant class logits and
  // boundary distances.
  TadOutput<Scalar> forward_tad(Tape<Scalar>& tape, Var<Scalar> seq, Eigen::Index seq_len, bool trainable) {
    expect(HeadKind::kTAD);
    check_dim(seq);
    if (seq_len < 1) throw ShapeError("forward_tad: need at least one instant");
    const Eigen::Index k = cfg_.kernel;
    Var<Scalar> h = ad::relu(lin(tape, ad::temporal_im2col(seq, seq_len, k), "conv1", trainable));
    h = ad::relu(lin(tape, ad::temporal_im2col(h, seq_len, k), "conv2", trainable));
    Var<Scalar> cols = ad::temporal_im2col(h, seq_len, k);
    return {lin(tape, cols, "cls", trainable), ad::softplus(lin(tape, cols, "reg", trainable))};
  }

  // Segment features [B*S x d] -> scores and feature magnitudes [B x S].
  AdOutput<Scalar> forward_ad(Tape<Scalar>& tape, Var<Scalar> segs, Eigen::Index num_segments, bool trainable) {
    expect(HeadKind::kAD);
    check_dim(segs);
    if (num_segments < 1 || segs.rows() % num_segments != 0) throw ShapeError("forward_ad: bad segment count");
    const Eigen::Index b = segs.rows() / num_segments;
    Var<Scalar> z = lin(tape, segs, "embed", trainable);
    Var<Scalar> mag = ad::row_norm(z, Scalar(1e-12));
    // Kept off exactly 0 and 1, which saturate in single precision.
    constexpr auto eps = std::is_same_v<Scalar, float> ? Scalar(1e-6) : Scalar(1e-12);
    Var<Scalar> score = ad::clamp(ad::sigmoid(lin(tape, ad::relu(z), "score", trainable)), eps, Scalar(1) - eps);
    return {ad::reshape(score, b, num_segments), ad::reshape(mag, b, num_segments)};
  }

 private:
  void add_linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
    params_.add(name + ".w", init::xavier_uniform<Scalar>(out, in, rng));
    params_.add(name + ".b", Mat<Scalar>::Zero(1, out));
  }
  Var<Scalar> lin(Tape<Scalar>& tape, Var<Scalar> x, const std::string& name, bool trainable) {
    return linear(tape, x, params_.get(name + ".w"), params_.get(name + ".b"), trainable);
  }
  void expect(HeadKind k) const {
    if (cfg_.kind != k) throw ConfigError("head is " + to_string(cfg_.kind) + ", not " + to_string(k));
  }
  void check_dim(Var<Scalar> x) const {
    if (x.cols() != cfg_.input_dim)
      throw ShapeError("head expects input dim " + std::to_string(cfg_.input_dim) + ", got " + std::to_string(x.cols()));
  }

  HeadConfig cfg_;
  ParameterSet<Scalar> params_;
};

// Token pooling from [B*T x d] to [B x d].
template <typename Scalar>
Var<Scalar> pool_tokens(Var<Scalar> x, Eigen::Index tokens, Pooling p = Pooling::kMean) {
  return p == Pooling::kMean ? ad::mean_pool_rows(x, tokens) : ad::max_pool_rows(x, tokens);
}

template <typename Scalar>
Mat<Scalar> pool_tokens(const Mat<Scalar>& x, Eigen::Index tokens, Pooling p = Pooling::kMean) {
  Tape<Scalar> tape;
  return pool_tokens(tape.constant(x), tokens, p).value();
}

// Decodes an instant's boundary distances into a segment [t - left, t + right].
inline std::pair<double, double> decode_segment(double instant, double left, double right) {
  return {instant - left, instant + right};
}

}  // namespace anon
