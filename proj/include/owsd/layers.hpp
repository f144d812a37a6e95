#ifndef OWSD_LAYERS_HPP
#define OWSD_LAYERS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owsd/errors.hpp"
#include "owsd/rng.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

using json = nlohmann::json;

// Weight init convention for conv/deconv/dense (DCGAN-style); batchnorm is
// scale=1 shift=0, biases start at zero.
inline constexpr double kWeightInitStddev = 0.02;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

enum class LayerKind { dense, conv2d, deconv2d, batchnorm, dropout, relu, tanh, softmax, reshape };

inline std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::deconv2d: return "deconv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::dropout: return "dropout";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::softmax: return "softmax";
    case LayerKind::reshape: return "reshape";
  }
  return "?";
}

// Declarative description of one layer in a sequential stack.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;       // dense
  std::size_t filters = 0;     // conv2d / deconv2d output channels
  std::size_t kernel = 0;      // conv2d / deconv2d
  std::size_t stride = 1;      // conv2d / deconv2d
  std::size_t pad = 0;         // conv2d / deconv2d
  double rate = 0.0;           // dropout
  Shape target;                // reshape (per-sample shape)

  static LayerSpec dense(std::size_t units) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.units = units;
    return s;
  }
  static LayerSpec conv2d(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                          std::size_t pad = 0) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.filters = filters;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec deconv2d(std::size_t filters, std::size_t kernel, std::size_t stride = 1,
                            std::size_t pad = 0) {
    LayerSpec s = conv2d(filters, kernel, stride, pad);
    s.kind = LayerKind::deconv2d;
    return s;
  }
  static LayerSpec batchnorm() {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    return s;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.rate = rate;
    return s;
  }
  static LayerSpec relu() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
  }
  static LayerSpec tanh() {
    LayerSpec s;
    s.kind = LayerKind::tanh;
    return s;
  }
  static LayerSpec softmax() {
    LayerSpec s;
    s.kind = LayerKind::softmax;
    return s;
  }
  static LayerSpec reshape(Shape target) {
    LayerSpec s;
    s.kind = LayerKind::reshape;
    s.target = std::move(target);
    return s;
  }

  void validate() const {
    switch (kind) {
      case LayerKind::dense:
        if (units == 0) throw invalid_architecture_error("dense layer needs units >= 1");
        break;
      case LayerKind::conv2d:
      case LayerKind::deconv2d:
        if (filters == 0) throw invalid_architecture_error("conv needs filters >= 1");
        if (kernel == 0) throw invalid_architecture_error("conv needs kernel >= 1");
        if (stride == 0) throw invalid_architecture_error("conv needs stride >= 1");
        break;
      case LayerKind::dropout:
        if (!(rate >= 0.0 && rate < 1.0)) {
          throw invalid_architecture_error("dropout rate must be in [0,1)");
        }
        break;
      case LayerKind::reshape:
        if (target.empty()) throw invalid_architecture_error("reshape needs a target shape");
        break;
      default: break;
    }
  }
};

inline json layer_spec_to_json(const LayerSpec& s) {
  json j;
  j["kind"] = layer_kind_name(s.kind);
  switch (s.kind) {
    case LayerKind::dense: j["units"] = s.units; break;
    case LayerKind::conv2d:
    case LayerKind::deconv2d:
      j["filters"] = s.filters;
      j["kernel"] = s.kernel;
      j["stride"] = s.stride;
      j["pad"] = s.pad;
      break;
    case LayerKind::dropout: j["rate"] = s.rate; break;
    case LayerKind::reshape: j["target"] = s.target; break;
    default: break;
  }
  return j;
}

inline LayerSpec layer_spec_from_json(const json& j) {
  LayerSpec s;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "dense") {
    s.kind = LayerKind::dense;
    s.units = j.at("units").get<std::size_t>();
  } else if (kind == "conv2d" || kind == "deconv2d") {
    s.kind = kind == "conv2d" ? LayerKind::conv2d : LayerKind::deconv2d;
    s.filters = j.at("filters").get<std::size_t>();
    s.kernel = j.at("kernel").get<std::size_t>();
    s.stride = j.at("stride").get<std::size_t>();
    s.pad = j.at("pad").get<std::size_t>();
  } else if (kind == "batchnorm") {
    s.kind = LayerKind::batchnorm;
  } else if (kind == "dropout") {
    s.kind = LayerKind::dropout;
    s.rate = j.at("rate").get<double>();
  } else if (kind == "relu") {
    s.kind = LayerKind::relu;
  } else if (kind == "tanh") {
    s.kind = LayerKind::tanh;
  } else if (kind == "softmax") {
    s.kind = LayerKind::softmax;
  } else if (kind == "reshape") {
    s.kind = LayerKind::reshape;
    s.target = j.at("target").get<Shape>();
  } else {
    throw invalid_architecture_error("unknown layer kind '" + kind + "'");
  }
  s.validate();
  return s;
}

inline json arch_to_json(const std::vector<LayerSpec>& arch) {
  json a = json::array();
  for (const auto& s : arch) a.push_back(layer_spec_to_json(s));
  return a;
}

inline std::vector<LayerSpec> arch_from_json(const json& a) {
  std::vector<LayerSpec> arch;
  for (const auto& j : a) arch.push_back(layer_spec_from_json(j));
  return arch;
}

// ---------------------------------------------------------------------------
// Convolution primitives, channels-last. A field [H,W,C] convolved with a
// kernel matrix W of shape [K*K*C, F] (row index (kh*K + kw)*C + c) produces
// [Ho,Wo,F] with Ho = (H + 2p - K)/s + 1. col2im is the exact adjoint of
// im2col, which makes the transposed convolution below the exact adjoint of
// the convolution; tests rely on the inner-product identity this yields.
// ---------------------------------------------------------------------------

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeom {
  std::size_t H = 0, W = 0, C = 0;  // field dims
  std::size_t K = 0, s = 1, p = 0;
  std::size_t Ho = 0, Wo = 0;  // position grid

  static ConvGeom forward_of(std::size_t H, std::size_t W, std::size_t C, std::size_t K,
                             std::size_t s, std::size_t p, const std::string& where) {
    if (H + 2 * p < K || W + 2 * p < K) {
      throw shape_error(where + ": kernel " + std::to_string(K) + " larger than padded input " +
                        std::to_string(H + 2 * p) + "x" + std::to_string(W + 2 * p));
    }
    ConvGeom g;
    g.H = H;
    g.W = W;
    g.C = C;
    g.K = K;
    g.s = s;
    g.p = p;
    g.Ho = (H + 2 * p - K) / s + 1;
    g.Wo = (W + 2 * p - K) / s + 1;
    return g;
  }

  std::size_t patch_len() const { return K * K * C; }
  std::size_t positions() const { return Ho * Wo; }
};

// Gather kernel patches: field [N,H,W,C] -> P [N*Ho*Wo, K*K*C].
inline std::vector<double> im2col(const double* field, std::size_t N, const ConvGeom& g) {
  std::vector<double> P(N * g.positions() * g.patch_len(), 0.0);
  const std::size_t row_len = g.patch_len();
  for (std::size_t n = 0; n < N; ++n) {
    const double* f = field + n * g.H * g.W * g.C;
    double* pn = P.data() + n * g.positions() * row_len;
    for (std::size_t oh = 0; oh < g.Ho; ++oh) {
      for (std::size_t ow = 0; ow < g.Wo; ++ow) {
        double* row = pn + (oh * g.Wo + ow) * row_len;
        for (std::size_t kh = 0; kh < g.K; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.s + kh) -
                                    static_cast<std::ptrdiff_t>(g.p);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
          for (std::size_t kw = 0; kw < g.K; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.s + kw) -
                                      static_cast<std::ptrdiff_t>(g.p);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
            const double* src = f + (static_cast<std::size_t>(ih) * g.W +
                                     static_cast<std::size_t>(iw)) * g.C;
            std::copy(src, src + g.C, row + (kh * g.K + kw) * g.C);
          }
        }
      }
    }
  }
  return P;
}

// Scatter-add patches back: P [N*Ho*Wo, K*K*C] -> field [N,H,W,C] (adjoint of im2col).
inline void col2im(const double* P, std::size_t N, const ConvGeom& g, double* field) {
  const std::size_t row_len = g.patch_len();
  for (std::size_t n = 0; n < N; ++n) {
    double* f = field + n * g.H * g.W * g.C;
    const double* pn = P + n * g.positions() * row_len;
    for (std::size_t oh = 0; oh < g.Ho; ++oh) {
      for (std::size_t ow = 0; ow < g.Wo; ++ow) {
        const double* row = pn + (oh * g.Wo + ow) * row_len;
        for (std::size_t kh = 0; kh < g.K; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.s + kh) -
                                    static_cast<std::ptrdiff_t>(g.p);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
          for (std::size_t kw = 0; kw < g.K; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.s + kw) -
                                      static_cast<std::ptrdiff_t>(g.p);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.W)) continue;
            double* dst = f + (static_cast<std::size_t>(ih) * g.W +
                               static_cast<std::size_t>(iw)) * g.C;
            const double* src = row + (kh * g.K + kw) * g.C;
            for (std::size_t c = 0; c < g.C; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

// y[N,Ho,Wo,F] = conv(x[N,H,W,C], W[K*K*C,F]) + b, bias optional.
inline Tensor conv2d_forward(const Tensor& x, const Tensor& W, const Tensor* b, std::size_t K,
                             std::size_t s, std::size_t p) {
  const std::size_t N = x.shape[0];
  ConvGeom g = ConvGeom::forward_of(x.shape[1], x.shape[2], x.shape[3], K, s, p, "conv2d");
  const std::size_t F = W.shape[1];
  std::vector<double> P = im2col(x.data.data(), N, g);
  Tensor y({N, g.Ho, g.Wo, F});
  ConstMatMap Pm(P.data(), static_cast<Eigen::Index>(N * g.positions()),
                 static_cast<Eigen::Index>(g.patch_len()));
  ConstMatMap Wm(W.data.data(), static_cast<Eigen::Index>(g.patch_len()),
                 static_cast<Eigen::Index>(F));
  MatMap Ym(y.data.data(), Pm.rows(), Wm.cols());
  Ym.noalias() = Pm * Wm;
  if (b) {
    for (std::size_t r = 0; r < N * g.positions(); ++r) {
      double* row = y.data.data() + r * F;
      for (std::size_t f = 0; f < F; ++f) row[f] += b->data[f];
    }
  }
  return y;
}

// Adjoint of conv2d_forward in its input: dy[N,Ho,Wo,F] -> dx[N,H,W,C].
inline Tensor conv2d_input_grad(const Tensor& dy, const Tensor& W, std::size_t H, std::size_t W_in,
                                std::size_t C, std::size_t K, std::size_t s, std::size_t p) {
  const std::size_t N = dy.shape[0];
  ConvGeom g = ConvGeom::forward_of(H, W_in, C, K, s, p, "conv2d backward");
  if (g.Ho != dy.shape[1] || g.Wo != dy.shape[2]) {
    throw shape_error("conv2d backward: position grid mismatch");
  }
  const std::size_t F = W.shape[1];
  std::vector<double> M(N * g.positions() * g.patch_len());
  ConstMatMap DYm(dy.data.data(), static_cast<Eigen::Index>(N * g.positions()),
                  static_cast<Eigen::Index>(F));
  ConstMatMap Wm(W.data.data(), static_cast<Eigen::Index>(g.patch_len()),
                 static_cast<Eigen::Index>(F));
  MatMap Mm(M.data(), DYm.rows(), Wm.rows());
  Mm.noalias() = DYm * Wm.transpose();
  Tensor dx({N, H, W_in, C});
  col2im(M.data(), N, g, dx.data.data());
  return dx;
}

// ---------------------------------------------------------------------------
// Layers. infer() is pure and safe to call concurrently on shared weights;
// forward_train() caches whatever backward() needs and is single-threaded
// per instance.
// ---------------------------------------------------------------------------

class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual std::string label() const { return label_; }
  void set_label(std::string l) { label_ = std::move(l); }

  // Validates and computes the per-sample output shape; throws
  // invalid_architecture_error / shape_error when shapes do not compose.
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual void init_params(const Shape& /*in*/, Rng& /*rng*/) {}

  virtual Tensor infer(const Tensor& x) const = 0;
  virtual Tensor forward_train(const Tensor& x, Rng& rng) = 0;
  // Accumulates parameter gradients, returns input gradient.
  virtual Tensor backward(const Tensor& dy) = 0;

  virtual std::vector<Tensor*> params() { return {}; }
  // Trainable params plus buffers (batchnorm running stats); serialization order.
  virtual std::vector<Tensor*> state() { return params(); }
  std::vector<const Tensor*> state() const {
    auto s = const_cast<Layer*>(this)->state();
    return {s.begin(), s.end()};
  }

  virtual bool serializable_spec(LayerSpec* out) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

 protected:
  std::string label_;
  bool has_cache_ = false;
};

class DenseLayer final : public Layer {
 public:
  explicit DenseLayer(std::size_t units) : units_(units) {}

  LayerKind kind() const override { return LayerKind::dense; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 1) {
      throw invalid_architecture_error(label() + ": dense expects a flat input, got " +
                                       shape_str(in) + " (insert a reshape)");
    }
    return {units_};
  }

  void init_params(const Shape& in, Rng& rng) override {
    in_dim_ = in[0];
    W_ = Tensor::randn({in_dim_, units_}, rng, kWeightInitStddev);
    b_ = Tensor::zeros({units_});
  }

  Tensor infer(const Tensor& x) const override { return apply(x); }

  Tensor forward_train(const Tensor& x, Rng&) override {
    x_cache_ = x;
    has_cache_ = true;
    return apply(x);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t N = dy.shape[0];
    W_.ensure_grad();
    b_.ensure_grad();
    ConstMatMap X(x_cache_.data.data(), static_cast<Eigen::Index>(N),
                  static_cast<Eigen::Index>(in_dim_));
    ConstMatMap DY(dy.data.data(), static_cast<Eigen::Index>(N),
                   static_cast<Eigen::Index>(units_));
    MatMap dW(W_.grad.data(), static_cast<Eigen::Index>(in_dim_),
              static_cast<Eigen::Index>(units_));
    dW.noalias() += X.transpose() * DY;
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = dy.data.data() + n * units_;
      for (std::size_t u = 0; u < units_; ++u) b_.grad[u] += row[u];
    }
    Tensor dx({N, in_dim_});
    ConstMatMap W(W_.data.data(), static_cast<Eigen::Index>(in_dim_),
                  static_cast<Eigen::Index>(units_));
    MatMap DX(dx.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(in_dim_));
    DX.noalias() = DY * W.transpose();
    return dx;
  }

  std::vector<Tensor*> params() override { return {&W_, &b_}; }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::dense(units_);
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<DenseLayer>(*this); }

 private:
  Tensor apply(const Tensor& x) const {
    if (x.rank() != 2 || x.shape[1] != in_dim_) {
      throw shape_error(label() + ": expected input [N," + std::to_string(in_dim_) + "], got " +
                        shape_str(x.shape));
    }
    const std::size_t N = x.shape[0];
    Tensor y({N, units_});
    ConstMatMap X(x.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(in_dim_));
    ConstMatMap W(W_.data.data(), static_cast<Eigen::Index>(in_dim_),
                  static_cast<Eigen::Index>(units_));
    MatMap Y(y.data.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(units_));
    Y.noalias() = X * W;
    for (std::size_t n = 0; n < N; ++n) {
      double* row = y.data.data() + n * units_;
      for (std::size_t u = 0; u < units_; ++u) row[u] += b_.data[u];
    }
    return y;
  }

  std::size_t units_;
  std::size_t in_dim_ = 0;
  Tensor W_, b_;
  Tensor x_cache_;
};

class Conv2dLayer final : public Layer {
 public:
  Conv2dLayer(std::size_t filters, std::size_t kernel, std::size_t stride, std::size_t pad)
      : F_(filters), K_(kernel), s_(stride), p_(pad) {}

  LayerKind kind() const override { return LayerKind::conv2d; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3) {
      throw invalid_architecture_error(label() + ": conv2d expects [H,W,C] input, got " +
                                       shape_str(in));
    }
    ConvGeom g = ConvGeom::forward_of(in[0], in[1], in[2], K_, s_, p_, label());
    return {g.Ho, g.Wo, F_};
  }

  void init_params(const Shape& in, Rng& rng) override {
    in_shape_ = in;
    W_ = Tensor::randn({K_ * K_ * in[2], F_}, rng, kWeightInitStddev);
    b_ = Tensor::zeros({F_});
  }

  Tensor infer(const Tensor& x) const override {
    check_input(x);
    return conv2d_forward(x, W_, &b_, K_, s_, p_);
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    check_input(x);
    x_cache_ = x;
    has_cache_ = true;
    return conv2d_forward(x, W_, &b_, K_, s_, p_);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t N = dy.shape[0];
    ConvGeom g = ConvGeom::forward_of(in_shape_[0], in_shape_[1], in_shape_[2], K_, s_, p_,
                                      label());
    W_.ensure_grad();
    b_.ensure_grad();
    std::vector<double> P = im2col(x_cache_.data.data(), N, g);
    ConstMatMap Pm(P.data(), static_cast<Eigen::Index>(N * g.positions()),
                   static_cast<Eigen::Index>(g.patch_len()));
    ConstMatMap DY(dy.data.data(), Pm.rows(), static_cast<Eigen::Index>(F_));
    MatMap dW(W_.grad.data(), Pm.cols(), static_cast<Eigen::Index>(F_));
    dW.noalias() += Pm.transpose() * DY;
    for (std::size_t r = 0; r < N * g.positions(); ++r) {
      const double* row = dy.data.data() + r * F_;
      for (std::size_t f = 0; f < F_; ++f) b_.grad[f] += row[f];
    }
    return conv2d_input_grad(dy, W_, in_shape_[0], in_shape_[1], in_shape_[2], K_, s_, p_);
  }

  std::vector<Tensor*> params() override { return {&W_, &b_}; }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::conv2d(F_, K_, s_, p_);
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2dLayer>(*this); }

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.shape[1] != in_shape_[0] || x.shape[2] != in_shape_[1] ||
        x.shape[3] != in_shape_[2]) {
      throw shape_error(label() + ": expected input [N," + shape_str(in_shape_) + "], got " +
                        shape_str(x.shape));
    }
  }

  std::size_t F_, K_, s_, p_;
  Shape in_shape_;
  Tensor W_, b_;
  Tensor x_cache_;
};

// Transposed convolution, implemented as the exact adjoint of Conv2dLayer's
// linear map. Weights live in the layout of the adjoint convolution
// [K*K*filters, C_in] so the two share the same primitives.
class Deconv2dLayer final : public Layer {
 public:
  Deconv2dLayer(std::size_t filters, std::size_t kernel, std::size_t stride, std::size_t pad)
      : F_(filters), K_(kernel), s_(stride), p_(pad) {}

  LayerKind kind() const override { return LayerKind::deconv2d; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3) {
      throw invalid_architecture_error(label() + ": deconv2d expects [H,W,C] input, got " +
                                       shape_str(in));
    }
    const std::size_t Ho = (in[0] - 1) * s_ + K_;
    const std::size_t Wo = (in[1] - 1) * s_ + K_;
    if (Ho < 2 * p_ + 1 || Wo < 2 * p_ + 1) {
      throw invalid_architecture_error(label() + ": padding too large for output");
    }
    return {Ho - 2 * p_, Wo - 2 * p_, F_};
  }

  void init_params(const Shape& in, Rng& rng) override {
    in_shape_ = in;
    out_shape_ = output_shape(in);
    W_ = Tensor::randn({K_ * K_ * F_, in[2]}, rng, kWeightInitStddev);
    b_ = Tensor::zeros({F_});
  }

  Tensor infer(const Tensor& x) const override { return apply(x); }

  Tensor forward_train(const Tensor& x, Rng&) override {
    x_cache_ = x;
    has_cache_ = true;
    return apply(x);
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t N = dy.shape[0];
    ConvGeom g = adjoint_geom();
    W_.ensure_grad();
    b_.ensure_grad();
    // dW = im2col(dy)^T * x ; dx = conv(dy, W) without bias.
    std::vector<double> P = im2col(dy.data.data(), N, g);
    const std::size_t Cin = in_shape_[2];
    ConstMatMap Pm(P.data(), static_cast<Eigen::Index>(N * g.positions()),
                   static_cast<Eigen::Index>(g.patch_len()));
    ConstMatMap X(x_cache_.data.data(), Pm.rows(), static_cast<Eigen::Index>(Cin));
    MatMap dW(W_.grad.data(), Pm.cols(), static_cast<Eigen::Index>(Cin));
    dW.noalias() += Pm.transpose() * X;
    const std::size_t out_positions = out_shape_[0] * out_shape_[1];
    for (std::size_t r = 0; r < N * out_positions; ++r) {
      const double* row = dy.data.data() + r * F_;
      for (std::size_t f = 0; f < F_; ++f) b_.grad[f] += row[f];
    }
    Tensor dx({N, in_shape_[0], in_shape_[1], Cin});
    ConstMatMap Wm(W_.data.data(), static_cast<Eigen::Index>(g.patch_len()),
                   static_cast<Eigen::Index>(Cin));
    MatMap DX(dx.data.data(), Pm.rows(), static_cast<Eigen::Index>(Cin));
    DX.noalias() = Pm * Wm;
    return dx;
  }

  std::vector<Tensor*> params() override { return {&W_, &b_}; }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::deconv2d(F_, K_, s_, p_);
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Deconv2dLayer>(*this); }

 private:
  // Geometry of the adjoint convolution, whose field is this layer's output.
  ConvGeom adjoint_geom() const {
    return ConvGeom::forward_of(out_shape_[0], out_shape_[1], F_, K_, s_, p_, label());
  }

  Tensor apply(const Tensor& x) const {
    if (x.rank() != 4 || x.shape[1] != in_shape_[0] || x.shape[2] != in_shape_[1] ||
        x.shape[3] != in_shape_[2]) {
      throw shape_error(label() + ": expected input [N," + shape_str(in_shape_) + "], got " +
                        shape_str(x.shape));
    }
    const std::size_t N = x.shape[0];
    ConvGeom g = adjoint_geom();
    const std::size_t Cin = in_shape_[2];
    std::vector<double> M(N * g.positions() * g.patch_len());
    ConstMatMap X(x.data.data(), static_cast<Eigen::Index>(N * g.positions()),
                  static_cast<Eigen::Index>(Cin));
    ConstMatMap Wm(W_.data.data(), static_cast<Eigen::Index>(g.patch_len()),
                   static_cast<Eigen::Index>(Cin));
    MatMap Mm(M.data(), X.rows(), Wm.rows());
    Mm.noalias() = X * Wm.transpose();
    Tensor y({N, out_shape_[0], out_shape_[1], F_});
    col2im(M.data(), N, g, y.data.data());
    const std::size_t out_positions = out_shape_[0] * out_shape_[1];
    for (std::size_t r = 0; r < N * out_positions; ++r) {
      double* row = y.data.data() + r * F_;
      for (std::size_t f = 0; f < F_; ++f) row[f] += b_.data[f];
    }
    return y;
  }

  std::size_t F_, K_, s_, p_;
  Shape in_shape_, out_shape_;
  Tensor W_, b_;
  Tensor x_cache_;
};

// Normalizes over every axis except the trailing channel axis. Training mode
// uses batch statistics and updates the running buffers; inference uses the
// running buffers only, so it stays a pure function of (weights, input).
class BatchNormLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::batchnorm; }

  Shape output_shape(const Shape& in) const override {
    if (in.empty()) throw invalid_architecture_error(label() + ": batchnorm needs input");
    return in;
  }

  void init_params(const Shape& in, Rng&) override {
    C_ = in.back();
    gamma_ = Tensor({C_}, 1.0);
    beta_ = Tensor::zeros({C_});
    running_mean_ = Tensor::zeros({C_});
    running_var_ = Tensor({C_}, 1.0);
  }

  Tensor infer(const Tensor& x) const override {
    Tensor y(x.shape);
    const std::size_t rows = x.numel() / C_;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = x.data.data() + r * C_;
      double* out = y.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) {
        const double inv = 1.0 / std::sqrt(running_var_.data[c] + kBatchNormEps);
        out[c] = gamma_.data[c] * (in[c] - running_mean_.data[c]) * inv + beta_.data[c];
      }
    }
    return y;
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    const std::size_t rows = x.numel() / C_;
    mean_.assign(C_, 0.0);
    var_.assign(C_, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = x.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) mean_[c] += in[c];
    }
    for (std::size_t c = 0; c < C_; ++c) mean_[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = x.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) {
        const double d = in[c] - mean_[c];
        var_[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < C_; ++c) var_[c] /= static_cast<double>(rows);
    // Warm-start the running stats from the first batch; the (0,1) prior
    // would otherwise dominate inference for the first ~1/(1-momentum) steps.
    if (!stats_seen_) {
      std::copy(mean_.begin(), mean_.end(), running_mean_.data.begin());
      std::copy(var_.begin(), var_.end(), running_var_.data.begin());
      stats_seen_ = true;
    } else {
      for (std::size_t c = 0; c < C_; ++c) {
        running_mean_.data[c] =
            kBatchNormMomentum * running_mean_.data[c] + (1.0 - kBatchNormMomentum) * mean_[c];
        running_var_.data[c] =
            kBatchNormMomentum * running_var_.data[c] + (1.0 - kBatchNormMomentum) * var_[c];
      }
    }
    xhat_ = Tensor(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = x.data.data() + r * C_;
      double* xh = xhat_.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) {
        xh[c] = (in[c] - mean_[c]) / std::sqrt(var_[c] + kBatchNormEps);
      }
    }
    has_cache_ = true;
    Tensor y(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xh = xhat_.data.data() + r * C_;
      double* out = y.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) out[c] = gamma_.data[c] * xh[c] + beta_.data[c];
    }
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t rows = dy.numel() / C_;
    const double m = static_cast<double>(rows);
    gamma_.ensure_grad();
    beta_.ensure_grad();
    std::vector<double> sum_dy(C_, 0.0), sum_dy_xhat(C_, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* d = dy.data.data() + r * C_;
      const double* xh = xhat_.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) {
        sum_dy[c] += d[c];
        sum_dy_xhat[c] += d[c] * xh[c];
      }
    }
    for (std::size_t c = 0; c < C_; ++c) {
      beta_.grad[c] += sum_dy[c];
      gamma_.grad[c] += sum_dy_xhat[c];
    }
    Tensor dx(dy.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* d = dy.data.data() + r * C_;
      const double* xh = xhat_.data.data() + r * C_;
      double* out = dx.data.data() + r * C_;
      for (std::size_t c = 0; c < C_; ++c) {
        const double inv = 1.0 / std::sqrt(var_[c] + kBatchNormEps);
        out[c] = gamma_.data[c] * inv / m *
                 (m * d[c] - sum_dy[c] - xh[c] * sum_dy_xhat[c]);
      }
    }
    return dx;
  }

  std::vector<Tensor*> params() override { return {&gamma_, &beta_}; }
  std::vector<Tensor*> state() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::batchnorm();
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNormLayer>(*this); }

 private:
  std::size_t C_ = 0;
  bool stats_seen_ = false;
  Tensor gamma_, beta_, running_mean_, running_var_;
  std::vector<double> mean_, var_;
  Tensor xhat_;
};

class DropoutLayer final : public Layer {
 public:
  explicit DropoutLayer(double rate) : rate_(rate) {}

  LayerKind kind() const override { return LayerKind::dropout; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor infer(const Tensor& x) const override { return x; }

  Tensor forward_train(const Tensor& x, Rng& rng) override {
    mask_.assign(x.numel(), 0.0);
    const double keep = 1.0 - rate_;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      mask_[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    }
    has_cache_ = true;
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] * mask_[i];
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dx(dy.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dx.data[i] = dy.data[i] * mask_[i];
    return dx;
  }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::dropout(rate_);
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<DropoutLayer>(*this); }

 private:
  double rate_;
  std::vector<double> mask_;
};

class ReluLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor infer(const Tensor& x) const override {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
    return y;
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    x_cache_ = x;
    has_cache_ = true;
    return infer(x);
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dx(dy.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) {
      dx.data[i] = x_cache_.data[i] > 0.0 ? dy.data[i] : 0.0;
    }
    return dx;
  }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::relu();
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }

 private:
  Tensor x_cache_;
};

class TanhLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::tanh; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor infer(const Tensor& x) const override {
    Tensor y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y.data[i] = std::tanh(x.data[i]);
    return y;
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    y_cache_ = infer(x);
    has_cache_ = true;
    return y_cache_;
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dx(dy.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) {
      dx.data[i] = dy.data[i] * (1.0 - y_cache_.data[i] * y_cache_.data[i]);
    }
    return dx;
  }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::tanh();
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<TanhLayer>(*this); }

 private:
  Tensor y_cache_;
};

// Softmax over the trailing axis, computed via the max-shift for stability.
class SoftmaxLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::softmax; }
  Shape output_shape(const Shape& in) const override {
    if (in.empty()) throw invalid_architecture_error(label() + ": softmax needs input");
    return in;
  }

  Tensor infer(const Tensor& x) const override {
    const std::size_t D = x.shape.back();
    const std::size_t rows = x.numel() / D;
    Tensor y(x.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = x.data.data() + r * D;
      double* out = y.data.data() + r * D;
      double mx = in[0];
      for (std::size_t i = 1; i < D; ++i) mx = std::max(mx, in[i]);
      double sum = 0.0;
      for (std::size_t i = 0; i < D; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
      }
      for (std::size_t i = 0; i < D; ++i) out[i] /= sum;
    }
    return y;
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    z_cache_ = x;
    y_cache_ = infer(x);
    has_cache_ = true;
    return y_cache_;
  }

  Tensor backward(const Tensor& dy) override {
    const std::size_t D = dy.shape.back();
    const std::size_t rows = dy.numel() / D;
    Tensor dx(dy.shape);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* d = dy.data.data() + r * D;
      const double* p = y_cache_.data.data() + r * D;
      double* out = dx.data.data() + r * D;
      double dot = 0.0;
      for (std::size_t i = 0; i < D; ++i) dot += d[i] * p[i];
      for (std::size_t i = 0; i < D; ++i) out[i] = p[i] * (d[i] - dot);
    }
    return dx;
  }

  const Tensor& cached_logits() const { return z_cache_; }
  const Tensor& cached_probs() const { return y_cache_; }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::softmax();
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<SoftmaxLayer>(*this); }

 private:
  Tensor z_cache_, y_cache_;
};

class ReshapeLayer final : public Layer {
 public:
  explicit ReshapeLayer(Shape target) : target_(std::move(target)) {}

  LayerKind kind() const override { return LayerKind::reshape; }

  Shape output_shape(const Shape& in) const override {
    if (shape_numel(in) != shape_numel(target_)) {
      throw invalid_architecture_error(label() + ": cannot reshape " + shape_str(in) + " to " +
                                       shape_str(target_));
    }
    return target_;
  }

  void init_params(const Shape& in, Rng&) override { in_shape_ = in; }

  Tensor infer(const Tensor& x) const override {
    Shape s{x.shape[0]};
    s.insert(s.end(), target_.begin(), target_.end());
    return x.reshaped(std::move(s));
  }

  Tensor forward_train(const Tensor& x, Rng&) override {
    has_cache_ = true;
    return infer(x);
  }

  Tensor backward(const Tensor& dy) override {
    Shape s{dy.shape[0]};
    s.insert(s.end(), in_shape_.begin(), in_shape_.end());
    return dy.reshaped(std::move(s));
  }

  bool serializable_spec(LayerSpec* out) const override {
    *out = LayerSpec::reshape(target_);
    return true;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReshapeLayer>(*this); }

 private:
  Shape target_, in_shape_;
};

// conv -> relu -> conv plus identity skip, relu after the sum. Channel count
// is preserved so the skip needs no projection. Not expressible as a
// LayerSpec; built programmatically (the reconstruction attack uses it when
// its residual option is on).
class ResidualConvBlock final : public Layer {
 public:
  explicit ResidualConvBlock(std::size_t kernel) : K_(kernel) {
    if (K_ % 2 == 0) throw invalid_architecture_error("residual block needs an odd kernel");
  }

  LayerKind kind() const override { return LayerKind::conv2d; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3) {
      throw invalid_architecture_error(label() + ": residual block expects [H,W,C]");
    }
    return in;
  }

  void init_params(const Shape& in, Rng& rng) override {
    in_shape_ = in;
    const std::size_t C = in[2];
    const std::size_t p = (K_ - 1) / 2;
    conv1_ = std::make_unique<Conv2dLayer>(C, K_, 1, p);
    conv2_ = std::make_unique<Conv2dLayer>(C, K_, 1, p);
    conv1_->set_label(label() + ".conv1");
    conv2_->set_label(label() + ".conv2");
    conv1_->init_params(in, rng);
    conv2_->init_params(in, rng);
  }

  Tensor infer(const Tensor& x) const override {
    Tensor h = conv1_->infer(x);
    for (double& v : h.data) v = v > 0.0 ? v : 0.0;
    Tensor y = conv2_->infer(h);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const double s = y.data[i] + x.data[i];
      y.data[i] = s > 0.0 ? s : 0.0;
    }
    return y;
  }

  Tensor forward_train(const Tensor& x, Rng& rng) override {
    Tensor h = conv1_->forward_train(x, rng);
    mid_relu_in_ = h;
    for (double& v : h.data) v = v > 0.0 ? v : 0.0;
    Tensor y = conv2_->forward_train(h, rng);
    sum_pre_relu_ = Tensor(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i) sum_pre_relu_.data[i] = y.data[i] + x.data[i];
    has_cache_ = true;
    Tensor out(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i) {
      out.data[i] = sum_pre_relu_.data[i] > 0.0 ? sum_pre_relu_.data[i] : 0.0;
    }
    return out;
  }

  Tensor backward(const Tensor& dy) override {
    Tensor dsum(dy.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) {
      dsum.data[i] = sum_pre_relu_.data[i] > 0.0 ? dy.data[i] : 0.0;
    }
    Tensor dh = conv2_->backward(dsum);
    for (std::size_t i = 0; i < dh.numel(); ++i) {
      if (mid_relu_in_.data[i] <= 0.0) dh.data[i] = 0.0;
    }
    Tensor dx = conv1_->backward(dh);
    for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += dsum.data[i];
    return dx;
  }

  std::vector<Tensor*> params() override {
    auto a = conv1_->params();
    auto b = conv2_->params();
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  bool serializable_spec(LayerSpec*) const override { return false; }

  std::unique_ptr<Layer> clone() const override {
    auto c = std::make_unique<ResidualConvBlock>(K_);
    c->label_ = label_;
    c->in_shape_ = in_shape_;
    if (conv1_) c->conv1_ = std::make_unique<Conv2dLayer>(*conv1_);
    if (conv2_) c->conv2_ = std::make_unique<Conv2dLayer>(*conv2_);
    return c;
  }

 private:
  std::size_t K_;
  Shape in_shape_;
  std::unique_ptr<Conv2dLayer> conv1_, conv2_;
  Tensor mid_relu_in_, sum_pre_relu_;
};

inline std::unique_ptr<Layer> make_layer(const LayerSpec& s) {
  s.validate();
  switch (s.kind) {
    case LayerKind::dense: return std::make_unique<DenseLayer>(s.units);
    case LayerKind::conv2d: return std::make_unique<Conv2dLayer>(s.filters, s.kernel, s.stride, s.pad);
    case LayerKind::deconv2d:
      return std::make_unique<Deconv2dLayer>(s.filters, s.kernel, s.stride, s.pad);
    case LayerKind::batchnorm: return std::make_unique<BatchNormLayer>();
    case LayerKind::dropout: return std::make_unique<DropoutLayer>(s.rate);
    case LayerKind::relu: return std::make_unique<ReluLayer>();
    case LayerKind::tanh: return std::make_unique<TanhLayer>();
    case LayerKind::softmax: return std::make_unique<SoftmaxLayer>();
    case LayerKind::reshape: return std::make_unique<ReshapeLayer>(s.target);
  }
  throw invalid_architecture_error("unhandled layer kind");
}

}  // namespace owsd

#endif  // OWSD_LAYERS_HPP
