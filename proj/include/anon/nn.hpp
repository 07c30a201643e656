#pragma once

// Parameter containers, initializers and the AdamW optimizer shared by the
// adapter and the task heads.

#include "anon/autodiff.hpp"
#include "anon/random.hpp"

#include <cmath>
#include <deque>
#include <string>
#include <vector>

namespace anon {

// Owns named parameters. std::deque keeps element addresses stable while
// growing, and copies are deep, so copying a ParameterSet is a snapshot.
template <typename Scalar>
class ParameterSet {
 public:
  Parameter<Scalar>& add(std::string name, Mat<Scalar> init) {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    params_.emplace_back(std::move(name), std::move(init));
    return params_.back();
  }

  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }

  Parameter<Scalar>& get(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw LookupError("no parameter named " + name);
  }
  const Parameter<Scalar>& get(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw LookupError("no parameter named " + name);
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  Eigen::Index count() const {
    Eigen::Index n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      if (!p.value.allFinite()) return false;
    return true;
  }

  Scalar grad_norm() const {
    Scalar s = 0;
    for (const auto& p : params_) s += p.grad.squaredNorm();
    return std::sqrt(s);
  }

  void scale_grads(Scalar f) {
    for (auto& p : params_) p.grad *= f;
  }

  // Stable digest of names, shapes and values.
  std::string checksum() const {
    Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      h.update_matrix(p.value);
    }
    return h.hex();
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<Other>());
    return out;
  }

 private:
  std::deque<Parameter<Scalar>> params_;
};

namespace init {

// Glorot/Xavier uniform for a [fan_out x fan_in] weight.
template <typename Scalar>
Mat<Scalar> xavier_uniform(Eigen::Index fan_out, Eigen::Index fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Mat<Scalar> w(fan_out, fan_in);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return w;
}

template <typename Scalar>
Mat<Scalar> normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double stddev) {
  Mat<Scalar> w(rows, cols);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
  return w;
}

}  // namespace init

// Affine layer y = x W^T + b with W stored [out x in].
template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, Var<Scalar> x, Parameter<Scalar>& weight, Parameter<Scalar>& bias,
                   bool trainable) {
  Var<Scalar> w = trainable ? tape.leaf(weight) : tape.constant(weight.value);
  Var<Scalar> b = trainable ? tape.leaf(bias) : tape.constant(bias.value);
  return ad::add_row(ad::matmul_nt(x, w), b);
}

// Leaf or constant depending on whether this module is being trained.
template <typename Scalar>
Var<Scalar> bind(Tape<Scalar>& tape, Parameter<Scalar>& p, bool trainable) {
  return trainable ? tape.leaf(p) : tape.constant(p.value);
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay (Loshchilov & Hutter); matches the update
// order of torch.optim.AdamW.
template <typename Scalar>
class AdamW {
 public:
  AdamW(ParameterSet<Scalar>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& p : params) {
      m_.push_back(Mat<Scalar>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<Scalar>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
    const auto step_size = static_cast<Scalar>(cfg_.lr / bc1);
    const auto sqrt_bc2 = static_cast<Scalar>(std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const auto decay = static_cast<Scalar>(1.0 - cfg_.lr * cfg_.weight_decay);
    std::size_t i = 0;
    for (auto& p : *params_) {
      p.value *= decay;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / sqrt_bc2 + eps);
      ++i;
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return steps_; }

 private:
  ParameterSet<Scalar>* params_;
  AdamWConfig cfg_;
  std::vector<Mat<Scalar>> m_, v_;
  long steps_ = 0;
};

}  // namespace anon
