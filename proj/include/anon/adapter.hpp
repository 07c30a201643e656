#pragma once

// Anonymizing adapter: a shape-preserving transform appended after the
// frozen encoder. Two variants:
//   * self_attention: `depth` pre-norm transformer encoder blocks
//       h   = x + Wo * MHA(LN1(x))
//       out = h + W2 * relu(W1 * LN2(h) + b1) + b2
//   * mlp: `depth` blocks of Linear(d, d) -> ReLU -> BatchNorm -> Dropout.
// Inputs are clips stacked as [B * tokens x d].

#include "anon/autodiff.hpp"
#include "anon/errors.hpp"
#include "anon/nn.hpp"
#include "anon/random.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace anon {

enum class AdapterVariant { kSelfAttention, kMlp };

inline std::string to_string(AdapterVariant v) { return v == AdapterVariant::kMlp ? "mlp" : "self_attention"; }
inline AdapterVariant adapter_variant_from_string(const std::string& s) {
  if (s == "self_attention") return AdapterVariant::kSelfAttention;
  if (s == "mlp") return AdapterVariant::kMlp;
  throw ConfigError("unknown adapter variant '" + s + "' (expected self_attention or mlp)");
}

enum class Mode { kTrain, kEval };

struct AdapterConfig {
  AdapterVariant variant = AdapterVariant::kSelfAttention;
  int depth = 3;
  int heads = 8;
  int feature_dim = 64;
  int ffn_multiplier = 4;
  double dropout_rate = 0.1;           // mlp blocks
  double attention_dropout_rate = 0.0;  // self-attention blocks (residual branches)
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw ConfigError("adapter depth must be >= 1");
    if (feature_dim < 1) throw ConfigError("adapter feature_dim must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("adapter dropout_rate must be in [0, 1)");
    if (attention_dropout_rate < 0.0 || attention_dropout_rate >= 1.0)
      throw ConfigError("adapter attention_dropout_rate must be in [0, 1)");
    if (variant == AdapterVariant::kSelfAttention) {
      if (heads < 1 || feature_dim % heads != 0)
        throw ConfigError("adapter feature_dim " + std::to_string(feature_dim) + " is not divisible by heads " +
                          std::to_string(heads));
      if (ffn_multiplier < 1) throw ConfigError("adapter ffn_multiplier must be >= 1");
    }
  }
};

template <typename Scalar>
class Adapter {
 public:
  explicit Adapter(AdapterConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const Eigen::Index d = cfg_.feature_dim;
    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      if (cfg_.variant == AdapterVariant::kSelfAttention) {
        const Eigen::Index f = static_cast<Eigen::Index>(cfg_.ffn_multiplier) * d;
        params_.add(p + "ln1.gamma", Mat<Scalar>::Ones(1, d));
        params_.add(p + "ln1.beta", Mat<Scalar>::Zero(1, d));
        for (const char* n : {"wq", "wk", "wv", "wo"}) {
          params_.add(p + "attn." + n, init::xavier_uniform<Scalar>(d, d, rng));
          params_.add(p + "attn.b" + std::string(n + 1), Mat<Scalar>::Zero(1, d));
        }
        params_.add(p + "ln2.gamma", Mat<Scalar>::Ones(1, d));
        params_.add(p + "ln2.beta", Mat<Scalar>::Zero(1, d));
        params_.add(p + "ffn.w1", init::xavier_uniform<Scalar>(f, d, rng));
        params_.add(p + "ffn.b1", Mat<Scalar>::Zero(1, f));
        params_.add(p + "ffn.w2", init::xavier_uniform<Scalar>(d, f, rng));
        params_.add(p + "ffn.b2", Mat<Scalar>::Zero(1, d));
      } else {
        params_.add(p + "fc.w", init::xavier_uniform<Scalar>(d, d, rng));
        params_.add(p + "fc.b", Mat<Scalar>::Zero(1, d));
        params_.add(p + "bn.gamma", Mat<Scalar>::Ones(1, d));
        params_.add(p + "bn.beta", Mat<Scalar>::Zero(1, d));
        buffers_.add(p + "bn.running_mean", Mat<Scalar>::Zero(1, d));
        buffers_.add(p + "bn.running_var", Mat<Scalar>::Ones(1, d));
      }
    }
  }

  const AdapterConfig& config() const { return cfg_; }
  ParameterSet<Scalar>& params() { return params_; }
  const ParameterSet<Scalar>& params() const { return params_; }
  // Non-trainable state (batch-norm running statistics).
  ParameterSet<Scalar>& buffers() { return buffers_; }
  const ParameterSet<Scalar>& buffers() const { return buffers_; }

  long steps() const { return steps_; }
  void count_step() { ++steps_; }
  void set_steps(long s) { steps_ = s; }

  std::string checksum() const { return params_.checksum() + buffers_.checksum(); }

  // Forward on the tape. In kTrain mode dropout draws from `rng` and
  // batch-norm uses (and updates) batch statistics. `trainable` decides
  // whether the parameters enter the tape as leaves or constants.
  Var<Scalar> forward(Tape<Scalar>& tape, Var<Scalar> x, Eigen::Index tokens, Mode mode, Rng* rng,
                      bool trainable) {
    if (x.cols() != cfg_.feature_dim)
      throw ShapeError("adapter expects feature dim " + std::to_string(cfg_.feature_dim) + ", got " +
                       std::to_string(x.cols()));
    if (tokens <= 0 || x.rows() % tokens != 0) throw ShapeError("adapter input rows not divisible by tokens");
    if (mode == Mode::kTrain && needs_rng() && rng == nullptr) throw ConfigError("adapter train mode needs an rng");
    Var<Scalar> h = x;
    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      h = cfg_.variant == AdapterVariant::kSelfAttention ? attention_block(tape, h, p, tokens, mode, rng, trainable)
                                                         : mlp_block(tape, h, p, mode, rng, trainable);
    }
    return h;
  }

  // Evaluation-mode application without gradients.
  Mat<Scalar> apply(const Mat<Scalar>& x, Eigen::Index tokens) const {
    Tape<Scalar> tape;
    // Eval mode with constant parameters never writes to *this.
    auto* self = const_cast<Adapter*>(this);
    return self->forward(tape, tape.constant(x), tokens, Mode::kEval, nullptr, false).value();
  }

 private:
  bool needs_rng() const {
    return cfg_.variant == AdapterVariant::kMlp ? cfg_.dropout_rate > 0.0 : cfg_.attention_dropout_rate > 0.0;
  }

  Var<Scalar> dropout(Tape<Scalar>& tape, Var<Scalar> x, double rate, Mode mode, Rng* rng) {
    if (mode != Mode::kTrain || rate <= 0.0) return x;
    const auto keep = static_cast<Scalar>(1.0 / (1.0 - rate));
    Mat<Scalar> mask(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < rate ? Scalar(0) : keep;
    return ad::cwise_mul(x, tape.constant(std::move(mask)));
  }

  Var<Scalar> attention_block(Tape<Scalar>& tape, Var<Scalar> x, const std::string& p, Eigen::Index tokens, Mode mode,
                              Rng* rng, bool trainable) {
    auto P = [&](const std::string& n) -> Parameter<Scalar>& { return params_.get(p + n); };
    Var<Scalar> n1 = ad::layer_norm(x, bind(tape, P("ln1.gamma"), trainable), bind(tape, P("ln1.beta"), trainable));
    Var<Scalar> q = linear(tape, n1, P("attn.wq"), P("attn.bq"), trainable);
    Var<Scalar> k = linear(tape, n1, P("attn.wk"), P("attn.bk"), trainable);
    Var<Scalar> v = linear(tape, n1, P("attn.wv"), P("attn.bv"), trainable);
    Var<Scalar> a = ad::multi_head_attention(q, k, v, tokens, static_cast<Eigen::Index>(cfg_.heads));
    Var<Scalar> o = linear(tape, a, P("attn.wo"), P("attn.bo"), trainable);
    Var<Scalar> h = ad::add(x, dropout(tape, o, cfg_.attention_dropout_rate, mode, rng));
    Var<Scalar> n2 = ad::layer_norm(h, bind(tape, P("ln2.gamma"), trainable), bind(tape, P("ln2.beta"), trainable));
    Var<Scalar> f = ad::relu(linear(tape, n2, P("ffn.w1"), P("ffn.b1"), trainable));
    Var<Scalar> f2 = linear(tape, f, P("ffn.w2"), P("ffn.b2"), trainable);
    return ad::add(h, dropout(tape, f2, cfg_.attention_dropout_rate, mode, rng));
  }

  Var<Scalar> mlp_block(Tape<Scalar>& tape, Var<Scalar> x, const std::string& p, Mode mode, Rng* rng,
                        bool trainable) {
    auto P = [&](const std::string& n) -> Parameter<Scalar>& { return params_.get(p + n); };
    Var<Scalar> z = ad::relu(linear(tape, x, P("fc.w"), P("fc.b"), trainable));
    Var<Scalar> gamma = bind(tape, P("bn.gamma"), trainable);
    Var<Scalar> beta = bind(tape, P("bn.beta"), trainable);
    auto& running_mean = buffers_.get(p + "bn.running_mean").value;
    auto& running_var = buffers_.get(p + "bn.running_var").value;
    constexpr Scalar kEps = Scalar(1e-5);
    Var<Scalar> y;
    if (mode == Mode::kTrain) {
      RowVec<Scalar> mu, var;
      y = ad::batch_norm_train(z, gamma, beta, kEps, &mu, &var);
      // PyTorch convention: momentum 0.1, unbiased variance in the running estimate.
      const auto n = static_cast<Scalar>(z.rows());
      running_mean = Scalar(0.9) * running_mean + Scalar(0.1) * mu;
      running_var = Scalar(0.9) * running_var + Scalar(0.1) * var * (n / (n - Scalar(1)));
    } else {
      // Eval: normalize with the running statistics, then the learned affine.
      RowVec<Scalar> inv_std = (running_var.row(0).array() + kEps).rsqrt();
      Mat<Scalar> scale = inv_std.replicate(z.rows(), 1);
      Mat<Scalar> offset = running_mean.cwiseProduct(inv_std).replicate(z.rows(), 1);
      Var<Scalar> zhat = ad::sub(ad::cwise_mul(z, tape.constant(std::move(scale))), tape.constant(std::move(offset)));
      y = ad::add_row(ad::cwise_mul(zhat, repeat_rows(gamma, z.rows())), beta);
    }
    return dropout(tape, y, cfg_.dropout_rate, mode, rng);
  }

  static Var<Scalar> repeat_rows(Var<Scalar> row, Eigen::Index n) {
    Mat<Scalar> out = row.value().replicate(n, 1);
    return row.tape->record(std::move(out), {row}, [row](Tape<Scalar>& t, int self) {
      t.accumulate(row, t.grad(self).colwise().sum());
    });
  }

  AdapterConfig cfg_;
  ParameterSet<Scalar> params_;
  ParameterSet<Scalar> buffers_;
  long steps_ = 0;
};

// Allocates parameters for `cfg`. The result is not yet an identity map;
// pretrain_identity() establishes that.
template <typename Scalar>
Adapter<Scalar> init_adapter(const AdapterConfig& cfg) {
  return Adapter<Scalar>(cfg);
}

// Evaluation-mode anonymization of a batch of clips [B * tokens x d].
template <typename Scalar>
Mat<Scalar> anonymize(const Adapter<Scalar>& adapter, const Mat<Scalar>& features, Eigen::Index tokens) {
  return adapter.apply(features, tokens);
}

}  // namespace anon
