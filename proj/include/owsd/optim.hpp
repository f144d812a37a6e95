#ifndef OWSD_OPTIM_HPP
#define OWSD_OPTIM_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "owsd/errors.hpp"
#include "owsd/network.hpp"
#include "owsd/rng.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

// ADAM with exponential learning-rate decay: lr_eff = lr * decay^epoch.
class Adam {
 public:
  explicit Adam(std::vector<Tensor*> params, double lr = 1e-4, double decay = 0.95)
      : params_(std::move(params)), lr_(lr), decay_(decay) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      slots_[i].m.assign(params_[i]->numel(), 0.0);
      slots_[i].v.assign(params_[i]->numel(), 0.0);
    }
  }

  void set_epoch(std::size_t epoch) { epoch_ = epoch; }
  double effective_lr() const { return lr_ * std::pow(decay_, static_cast<double>(epoch_)); }

  void zero_grad() {
    for (Tensor* p : params_) {
      if (p->has_grad()) p->zero_grad();
    }
  }

  void step() {
    ++t_;
    const double lr = effective_lr();
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i];
      if (!p->has_grad()) {
        throw missing_gradient_error("adam step: parameter " + std::to_string(i) +
                                     " has no gradient (run backward first)");
      }
      auto& m = slots_[i].m;
      auto& v = slots_[i].v;
      for (std::size_t j = 0; j < p->numel(); ++j) {
        const double g = p->grad[j];
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p->data[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
      }
    }
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

 private:
  struct Slot {
    std::vector<double> m, v;
  };

  std::vector<Tensor*> params_;
  std::vector<Slot> slots_;
  double lr_, decay_;
  std::size_t epoch_ = 0;
  std::uint64_t t_ = 0;
};

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  Shape s = t.shape;
  s[0] = idx.size();
  Tensor out(s);
  const std::size_t row = t.numel() / t.shape[0];
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * row),
              t.data.begin() + static_cast<std::ptrdiff_t>((idx[i] + 1) * row),
              out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

struct FitConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double lr_decay = 0.95;
  std::size_t patience = 5;
  double val_fraction = 0.15;
  LossKind loss = LossKind::cross_entropy;
  std::uint64_t seed = 0;
  bool verbose = false;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_top1 = -1.0;  // -1 when no validation split or loss is MSE
  double lr = 0.0;
};

struct FitResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<EpochStats> history;
  double wall_seconds = 0.0;
};

namespace detail {

inline double tensor_loss(const Tensor& out, const Tensor& Y, LossKind loss) {
  if (loss == LossKind::mse) return mse_loss(out, Y);
  double acc = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (Y.data[i] > 0.0) acc -= Y.data[i] * std::log(std::max(out.data[i], 1e-300));
  }
  const std::size_t D = out.shape.back();
  return acc / static_cast<double>(out.numel() / D);
}

inline double eval_loss(const Network& net, const Tensor& X, const Tensor& Y, LossKind loss) {
  return tensor_loss(net.infer(X), Y, loss);
}

// Top-1 accuracy of a [N,L] probability tensor; ties go to the lower index.
inline double top1_from_probs(const Tensor& probs, const std::vector<std::size_t>& truths) {
  if (probs.rank() != 2 || probs.shape[0] != truths.size()) {
    throw shape_error("top1_from_probs: probs must be [N,L] with one truth per row");
  }
  const std::size_t L = probs.shape[1];
  std::size_t hits = 0;
  for (std::size_t n = 0; n < truths.size(); ++n) {
    const double* row = probs.data.data() + n * L;
    std::size_t best = 0;
    for (std::size_t j = 1; j < L; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (best == truths[n]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truths.size());
}

// Validation indices, stratified by argmax label for classification so small
// classes stay represented on both sides of the split.
inline std::vector<std::size_t> val_indices(const Tensor& Y, LossKind loss, double frac,
                                            Rng& rng) {
  const std::size_t N = Y.shape[0];
  std::vector<std::size_t> val;
  if (frac <= 0.0) return val;
  if (loss == LossKind::cross_entropy && Y.rank() == 2) {
    const std::size_t D = Y.shape[1];
    std::vector<std::vector<std::size_t>> per_label(D);
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = Y.data.data() + n * D;
      std::size_t best = 0;
      for (std::size_t d = 1; d < D; ++d) {
        if (row[d] > row[best]) best = d;
      }
      per_label[best].push_back(n);
    }
    for (auto& g : per_label) {
      rng.shuffle(g);
      const std::size_t take = static_cast<std::size_t>(frac * static_cast<double>(g.size()));
      val.insert(val.end(), g.begin(), g.begin() + static_cast<std::ptrdiff_t>(take));
    }
  } else {
    std::vector<std::size_t> all(N);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    const std::size_t take = static_cast<std::size_t>(frac * static_cast<double>(N));
    val.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(val.begin(), val.end());
  return val;
}

}  // namespace detail

// Minibatch training with per-epoch shuffling, lr decay, early stopping on
// validation loss, and best-epoch weight restore.
inline FitResult fit(Network& net, const Tensor& X, const Tensor& Y, const FitConfig& cfg) {
  if (X.shape[0] != Y.shape[0]) {
    throw shape_error("fit: " + std::to_string(X.shape[0]) + " inputs vs " +
                      std::to_string(Y.shape[0]) + " targets");
  }
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(cfg.seed, 0x666974));  // "fit"

  std::vector<std::size_t> val_idx = detail::val_indices(Y, cfg.loss, cfg.val_fraction, rng);
  std::vector<char> in_val(X.shape[0], 0);
  for (std::size_t i : val_idx) in_val[i] = 1;
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < X.shape[0]; ++i) {
    if (!in_val[i]) train_idx.push_back(i);
  }
  if (train_idx.empty()) throw invalid_argument_error("fit: no training samples after split");

  Tensor Xval, Yval;
  const bool have_val = !val_idx.empty();
  if (have_val) {
    Xval = gather_rows(X, val_idx);
    Yval = gather_rows(Y, val_idx);
  }

  Adam opt(net.params(), cfg.lr, cfg.lr_decay);
  FitResult res;
  std::vector<Tensor> best_state = net.state_snapshot();
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_epoch(epoch);
    rng.shuffle(train_idx);
    double train_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t off = 0; off < train_idx.size(); off += cfg.batch_size) {
      const std::size_t take = std::min(cfg.batch_size, train_idx.size() - off);
      if (take < 2 && train_idx.size() > 2) continue;  // batchnorm needs rows to normalize over
      std::vector<std::size_t> batch(train_idx.begin() + static_cast<std::ptrdiff_t>(off),
                                     train_idx.begin() + static_cast<std::ptrdiff_t>(off + take));
      Tensor xb = gather_rows(X, batch);
      Tensor yb = gather_rows(Y, batch);
      opt.zero_grad();
      net.forward_train(xb, rng);
      train_loss += net.backward_loss(cfg.loss, yb);
      opt.step();
      ++batches;
    }
    train_loss /= static_cast<double>(std::max<std::size_t>(batches, 1));

    double val_loss = train_loss;
    double val_top1 = -1.0;
    if (have_val) {
      Tensor out = net.infer(Xval);
      val_loss = detail::tensor_loss(out, Yval, cfg.loss);
      if (cfg.loss == LossKind::cross_entropy) {
        std::vector<std::size_t> truths;
        const std::size_t D = Yval.shape.back();
        for (std::size_t n = 0; n < Yval.shape[0]; ++n) {
          const double* row = Yval.data.data() + n * D;
          truths.push_back(static_cast<std::size_t>(
              std::max_element(row, row + D) - row));
        }
        val_top1 = detail::top1_from_probs(out, truths);
      }
    }
    res.history.push_back({epoch, train_loss, val_loss, val_top1, opt.effective_lr()});
    if (cfg.verbose) {
      std::fprintf(stderr, "epoch %zu train %.6f val %.6f lr %.2e\n", epoch, train_loss, val_loss,
                   opt.effective_lr());
    }
    if (val_loss < best - 1e-12) {
      best = val_loss;
      res.best_epoch = epoch;
      best_state = net.state_snapshot();
      since_best = 0;
    } else {
      ++since_best;
      if (since_best > cfg.patience) {
        res.epochs_run = epoch + 1;
        break;
      }
    }
    res.epochs_run = epoch + 1;
  }

  net.state_restore(best_state);
  res.best_val_loss = best;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace owsd

#endif  // OWSD_OPTIM_HPP
