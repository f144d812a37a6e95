#ifndef OWSD_NETWORK_HPP
#define OWSD_NETWORK_HPP

#include <memory>
#include <string>
#include <vector>

#include "owsd/errors.hpp"
#include "owsd/layers.hpp"
#include "owsd/rng.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

enum class LossKind { mse, cross_entropy };

// Mean squared error with the 1/2 factor folded in:
//   L = sum((o - t)^2) / (2 * numel),  dL/do = (o - t) / numel.
inline double mse_loss(const Tensor& out, const Tensor& target, Tensor* grad = nullptr) {
  if (!same_shape(out, target)) {
    throw shape_error("mse: output " + shape_str(out.shape) + " vs target " +
                      shape_str(target.shape));
  }
  const double n = static_cast<double>(out.numel());
  double acc = 0.0;
  if (grad) *grad = Tensor(out.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double d = out.data[i] - target.data[i];
    acc += d * d;
    if (grad) grad->data[i] = d / n;
  }
  return acc / (2.0 * n);
}

// Plain mean of squared differences, for reporting (no 1/2 factor).
inline double mean_squared_error(const Tensor& a, const Tensor& b) {
  if (!same_shape(a, b)) {
    throw shape_error("mean_squared_error: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

// Sequential float64 network. Architecture and input shape are fixed at
// construction; parameter init draws from the given seed so identical
// (arch, seed) pairs produce identical weights.
class Network {
 public:
  Network() = default;

  Network(std::vector<LayerSpec> arch, Shape input_shape, std::uint64_t init_seed)
      : arch_(std::move(arch)), input_shape_(std::move(input_shape)) {
    if (arch_.empty()) throw invalid_architecture_error("network needs at least one layer");
    std::vector<std::unique_ptr<Layer>> layers;
    for (const auto& spec : arch_) layers.push_back(make_layer(spec));
    wire_up(std::move(layers), init_seed);
  }

  // For stacks containing layers with no LayerSpec form (residual blocks);
  // such networks cannot be serialized.
  Network(std::vector<std::unique_ptr<Layer>> layers, Shape input_shape, std::uint64_t init_seed)
      : input_shape_(std::move(input_shape)) {
    if (layers.empty()) throw invalid_architecture_error("network needs at least one layer");
    for (const auto& l : layers) {
      LayerSpec s;
      if (l->serializable_spec(&s)) arch_.push_back(std::move(s));
    }
    if (arch_.size() != layers.size()) arch_.clear();
    wire_up(std::move(layers), init_seed);
  }

  Network(const Network& other)
      : arch_(other.arch_), input_shape_(other.input_shape_), shapes_(other.shapes_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& other) {
    if (this != &other) *this = Network(other);
    return *this;
  }
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const std::vector<LayerSpec>& arch() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return shapes_.back(); }
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

  // Pure forward pass; safe to call from multiple threads concurrently.
  Tensor infer(const Tensor& x) const {
    check_input(x);
    Tensor cur = x;
    for (const auto& l : layers_) cur = l->infer(cur);
    return cur;
  }

  // Per-layer activations, input excluded; trace[i] is layer i's output.
  std::vector<Tensor> infer_trace(const Tensor& x) const {
    check_input(x);
    std::vector<Tensor> trace;
    trace.reserve(layers_.size());
    Tensor cur = x;
    for (const auto& l : layers_) {
      cur = l->infer(cur);
      trace.push_back(cur);
    }
    return trace;
  }

  Tensor forward_train(const Tensor& x, Rng& rng) {
    check_input(x);
    Tensor cur = x;
    for (auto& l : layers_) cur = l->forward_train(cur, rng);
    last_output_ = cur;
    have_forward_ = true;
    return cur;
  }

  // Computes the loss against `target`, runs backward, accumulates parameter
  // gradients. Cross-entropy requires a trailing softmax layer; its gradient
  // is injected below the softmax as (p - y)/N for stability.
  double backward_loss(LossKind loss, const Tensor& target) {
    if (!have_forward_) {
      throw missing_forward_error("backward_loss called before forward_train");
    }
    std::size_t start = layers_.size();
    Tensor grad;
    double loss_value = 0.0;
    if (loss == LossKind::mse) {
      loss_value = mse_loss(last_output_, target, &grad);
    } else {
      auto* sm = dynamic_cast<SoftmaxLayer*>(layers_.back().get());
      if (!sm) {
        throw invalid_architecture_error("cross-entropy needs a softmax output layer");
      }
      const Tensor& z = sm->cached_logits();
      const Tensor& p = sm->cached_probs();
      if (!same_shape(p, target)) {
        throw shape_error("cross-entropy: output " + shape_str(p.shape) + " vs target " +
                          shape_str(target.shape));
      }
      const std::size_t D = z.shape.back();
      const std::size_t N = z.numel() / D;
      for (std::size_t r = 0; r < N; ++r) {
        const double* zr = z.data.data() + r * D;
        const double* yr = target.data.data() + r * D;
        double mx = zr[0];
        for (std::size_t i = 1; i < D; ++i) mx = std::max(mx, zr[i]);
        double lse = 0.0;
        for (std::size_t i = 0; i < D; ++i) lse += std::exp(zr[i] - mx);
        lse = mx + std::log(lse);
        for (std::size_t i = 0; i < D; ++i) loss_value += yr[i] * (lse - zr[i]);
      }
      loss_value /= static_cast<double>(N);
      grad = Tensor(p.shape);
      for (std::size_t i = 0; i < p.numel(); ++i) {
        grad.data[i] = (p.data[i] - target.data[i]) / static_cast<double>(N);
      }
      start -= 1;  // skip the softmax layer; grad is already below it
    }
    for (std::size_t i = start; i-- > 0;) {
      grad = layers_[i]->backward(grad);
    }
    have_forward_ = false;
    return loss_value;
  }

  std::vector<Tensor*> params() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      auto p = l->params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  // Params plus buffers, in layer order; the serialization contract.
  std::vector<Tensor*> state_tensors() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      auto p = l->state();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  std::vector<const Tensor*> state_tensors() const {
    auto s = const_cast<Network*>(this)->state_tensors();
    return {s.begin(), s.end()};
  }

  std::vector<Tensor> state_snapshot() const {
    std::vector<Tensor> snap;
    for (const Tensor* t : state_tensors()) snap.push_back(*t);
    return snap;
  }

  // New network made of the first n layers with weights copied over.
  Network clone_prefix(std::size_t n) const {
    if (n == 0 || n > layers_.size()) {
      throw invalid_argument_error("clone_prefix: bad layer count " + std::to_string(n));
    }
    std::vector<LayerSpec> specs;
    for (std::size_t i = 0; i < n; ++i) {
      LayerSpec s;
      if (!layers_[i]->serializable_spec(&s)) {
        throw invalid_architecture_error("clone_prefix: layer " + std::to_string(i) +
                                         " is not spec-expressible");
      }
      specs.push_back(std::move(s));
    }
    Network out(specs, input_shape_, 0);
    auto self = const_cast<Network*>(this);
    for (std::size_t i = 0; i < n; ++i) {
      auto src = self->layers_[i]->state();
      auto dst = out.layers_[i]->state();
      for (std::size_t t = 0; t < src.size(); ++t) dst[t]->data = src[t]->data;
    }
    return out;
  }

  void state_restore(const std::vector<Tensor>& snap) {
    auto tensors = state_tensors();
    if (snap.size() != tensors.size()) {
      throw invalid_argument_error("state_restore: tensor count mismatch");
    }
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].shape != tensors[i]->shape) {
        throw shape_error("state_restore: tensor " + std::to_string(i) + " shape mismatch");
      }
      tensors[i]->data = snap[i].data;
    }
  }

 private:
  void wire_up(std::vector<std::unique_ptr<Layer>> layers, std::uint64_t init_seed) {
    Rng rng(init_seed);
    Shape cur = input_shape_;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& layer = layers[i];
      layer->set_label("layer " + std::to_string(i) + " (" + layer_kind_name(layer->kind()) +
                       ")");
      Shape next;
      try {
        next = layer->output_shape(cur);
      } catch (const error& e) {
        throw invalid_architecture_error(std::string(e.what()));
      }
      layer->init_params(cur, rng);
      shapes_.push_back(cur);
      layers_.push_back(std::move(layer));
      cur = std::move(next);
    }
    shapes_.push_back(cur);
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != input_shape_.size() + 1) {
      throw shape_error("input: expected [N," + shape_str(input_shape_) + "], got " +
                        shape_str(x.shape));
    }
    for (std::size_t i = 0; i < input_shape_.size(); ++i) {
      if (x.shape[i + 1] != input_shape_[i]) {
        throw shape_error("input: expected [N," + shape_str(input_shape_) + "], got " +
                          shape_str(x.shape));
      }
    }
  }

  std::vector<LayerSpec> arch_;
  Shape input_shape_;
  std::vector<Shape> shapes_;
  std::vector<std::unique_ptr<Layer>> layers_;
  Tensor last_output_;
  bool have_forward_ = false;
};

}  // namespace owsd

#endif  // OWSD_NETWORK_HPP
