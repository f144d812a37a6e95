#ifndef OWSD_PRIVACY_HPP
#define OWSD_PRIVACY_HPP

#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "owsd/cloud.hpp"
#include "owsd/encoder.hpp"
#include "owsd/image_io.hpp"
#include "owsd/network.hpp"
#include "owsd/optim.hpp"
#include "owsd/scrambler.hpp"

namespace owsd {

// H(v) = -sum v_i log2 v_i, with 0 log 0 = 0.
inline double entropy(const std::vector<double>& probs) {
  check_distribution(probs, "entropy");
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log2(p);
  }
  return std::max(h, 0.0);
}

struct VectorPair {
  std::vector<double> plain;
  std::vector<double> scrambled;
  std::size_t label = 0;
};
using VectorPairSet = std::vector<VectorPair>;

// Classification vectors for each eval image and its scrambled counterpart.
// This is lab-side analysis: it queries the CloudModel directly and charges
// no key budget.
inline VectorPairSet collect_vector_pairs(const CloudModel& cloud, const EncoderModel& encoder,
                                          const ScramblingKey& key, const Tensor& images,
                                          const std::vector<std::size_t>& labels) {
  VectorPairSet pairs;
  Tensor plain_probs = cloud.classify_batch(images);
  Tensor scrambled = scramble_batch(key, encoder.encode_batch(images));
  Tensor scram_probs = cloud.classify_batch(scrambled);
  const std::size_t L = plain_probs.shape[1];
  for (std::size_t i = 0; i < images.shape[0]; ++i) {
    VectorPair p;
    p.plain.assign(plain_probs.data.begin() + static_cast<std::ptrdiff_t>(i * L),
                   plain_probs.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
    p.scrambled.assign(scram_probs.data.begin() + static_cast<std::ptrdiff_t>(i * L),
                       scram_probs.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * L));
    p.label = labels.empty() ? 0 : labels[i];
    pairs.push_back(std::move(p));
  }
  return pairs;
}

struct EntropyStats {
  double mean_plain = 0.0;
  double mean_scrambled = 0.0;
};

inline EntropyStats entropy_stats(const VectorPairSet& pairs) {
  if (pairs.empty()) throw invalid_argument_error("entropy_stats: no pairs");
  EntropyStats s;
  for (const auto& p : pairs) {
    s.mean_plain += entropy(p.plain);
    s.mean_scrambled += entropy(p.scrambled);
  }
  s.mean_plain /= static_cast<double>(pairs.size());
  s.mean_scrambled /= static_cast<double>(pairs.size());
  return s;
}

namespace detail {

// Top-k indices by probability, ties resolved toward the lower index.
inline std::vector<std::size_t> topk_indices(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return v[a] > v[b] || (v[a] == v[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

}  // namespace detail

struct IntersectionStats {
  std::size_t k = 1;
  double intersection_rate = 0.0;      // mean |topk(plain) n topk(scrambled)| / k
  double mean_confidence_reduction = 0.0;  // relative drop on plain's top-k label set
};

inline IntersectionStats intersection_and_reduction(const VectorPairSet& pairs, std::size_t k) {
  if (pairs.empty()) throw invalid_argument_error("intersection_and_reduction: no pairs");
  const std::size_t L = pairs.front().plain.size();
  if (k < 1 || k > L) {
    throw invalid_argument_error("intersection_and_reduction: k=" + std::to_string(k) +
                                 " out of range for " + std::to_string(L) + " labels");
  }
  IntersectionStats out;
  out.k = k;
  for (const auto& p : pairs) {
    if (p.plain.size() != L || p.scrambled.size() != L) {
      throw shape_error("intersection_and_reduction: vector length mismatch");
    }
    const auto tp = detail::topk_indices(p.plain, k);
    const auto ts = detail::topk_indices(p.scrambled, k);
    std::size_t common = 0;
    for (std::size_t a : tp) {
      if (std::find(ts.begin(), ts.end(), a) != ts.end()) ++common;
    }
    out.intersection_rate += static_cast<double>(common) / static_cast<double>(k);
    double conf_plain = 0.0, conf_scram = 0.0;
    for (std::size_t a : tp) {
      conf_plain += p.plain[a];
      conf_scram += p.scrambled[a];
    }
    out.mean_confidence_reduction += (conf_plain - conf_scram) / conf_plain;
  }
  out.intersection_rate /= static_cast<double>(pairs.size());
  out.mean_confidence_reduction /= static_cast<double>(pairs.size());
  return out;
}

// ---------------------------------------------------------------------------
// 2-D PCA via covariance power iteration with deflation.
// ---------------------------------------------------------------------------

struct PcaResult {
  std::vector<std::array<double, 2>> points;
  std::array<double, 2> eigenvalues{0.0, 0.0};
  std::vector<std::vector<double>> components;  // 2 x d (zero row if degenerate)
};

inline PcaResult pca_2d(const std::vector<std::vector<double>>& vectors) {
  if (vectors.size() < 3) throw invalid_argument_error("pca_2d: need at least 3 vectors");
  const std::size_t d = vectors.front().size();
  if (d < 2) throw invalid_argument_error("pca_2d: dimension must be at least 2");
  const std::size_t n = vectors.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& v : vectors) {
    if (v.size() != d) throw shape_error("pca_2d: mixed vector lengths");
    for (std::size_t j = 0; j < d; ++j) mean[j] += v[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (const auto& v : vectors) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = v[a] - mean[a];
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += da * (v[b] - mean[b]);
    }
  }
  for (double& c : cov) c /= static_cast<double>(n - 1);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

  PcaResult res;
  res.components.assign(2, std::vector<double>(d, 0.0));
  std::vector<double> work = cov;
  for (std::size_t comp = 0; comp < 2; ++comp) {
    std::vector<double> v(d);
    for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.01 * static_cast<double>(j + comp);
    double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    for (double& x : v) x /= norm;
    double lambda = 0.0;
    for (int it = 0; it < 10000; ++it) {
      std::vector<double> w(d, 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) w[a] += work[a * d + b] * v[b];
      }
      const double wnorm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      if (wnorm < 1e-14 * (trace + 1e-300)) {
        lambda = 0.0;
        break;
      }
      for (double& x : w) x /= wnorm;
      double delta = 0.0;
      for (std::size_t j = 0; j < d; ++j) delta = std::max(delta, std::abs(w[j] - v[j]));
      v = w;
      lambda = wnorm;
      if (delta < 1e-13) break;
    }
    if (lambda <= 1e-12 * (trace + 1e-300)) {
      res.eigenvalues[comp] = 0.0;
      continue;  // degenerate direction: leave component zero
    }
    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(v[j]) > std::abs(v[big])) big = j;
    }
    if (v[big] < 0.0) {
      for (double& x : v) x = -x;
    }
    res.eigenvalues[comp] = lambda;
    res.components[comp] = v;
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) work[a * d + b] -= lambda * v[a] * v[b];
    }
  }

  for (const auto& vec : vectors) {
    std::array<double, 2> pt{0.0, 0.0};
    for (std::size_t comp = 0; comp < 2; ++comp) {
      for (std::size_t j = 0; j < d; ++j) {
        pt[comp] += (vec[j] - mean[j]) * res.components[comp][j];
      }
    }
    res.points.push_back(pt);
  }
  return res;
}

// Mean silhouette over 2-D points with integer group ids (used to compare
// plaintext vs scrambled cluster separation).
inline double silhouette_2d(const std::vector<std::array<double, 2>>& points,
                            const std::vector<std::size_t>& groups) {
  if (points.size() != groups.size() || points.size() < 2) {
    throw invalid_argument_error("silhouette_2d: bad input");
  }
  const std::size_t n = points.size();
  auto dist = [&](std::size_t a, std::size_t b) {
    const double dx = points[a][0] - points[b][0];
    const double dy = points[a][1] - points[b][1];
    return std::sqrt(dx * dx + dy * dy);
  };
  const std::size_t n_groups = *std::max_element(groups.begin(), groups.end()) + 1;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> mean_dist(n_groups, 0.0);
    std::vector<std::size_t> count(n_groups, 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      mean_dist[groups[j]] += dist(i, j);
      ++count[groups[j]];
    }
    double a = count[groups[i]] ? mean_dist[groups[i]] / static_cast<double>(count[groups[i]])
                                : 0.0;
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < n_groups; ++g) {
      if (g == groups[i] || count[g] == 0) continue;
      b = std::min(b, mean_dist[g] / static_cast<double>(count[g]));
    }
    if (std::isinf(b)) continue;
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Dead-ReLU fraction of the scrambling generator (§ hardness argument).
// ---------------------------------------------------------------------------

inline double dead_relu_fraction(const ScramblingKey& key, const Tensor& embeddings) {
  if (embeddings.rank() != 2) throw shape_error("dead_relu_fraction: embeddings must be [N,E]");
  std::size_t zeros = 0, total = 0;
  for (std::size_t i = 0; i < embeddings.shape[0]; ++i) {
    auto trace = key.net.infer_trace(embeddings.slice0(i, 1));
    for (std::size_t l = 0; l < key.net.size(); ++l) {
      if (key.net.layer(l).kind() != LayerKind::relu) continue;
      for (double v : trace[l].data) {
        if (v == 0.0) ++zeros;
        ++total;
      }
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(zeros) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Reconstruction attack (autoencoder inversion attempt).
// ---------------------------------------------------------------------------

struct AttackConfig {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 2e-3;
  std::size_t patience = 6;
  std::size_t repetitions = 2;
  bool residual_blocks = false;
  std::uint64_t seed = 11;
  std::filesystem::path grid_dir;  // empty = no sample grids
};

struct AttackReport {
  std::size_t pair_count = 0;
  double mse_plain_mean = 0.0, mse_plain_std = 0.0;
  double mse_scrambled_mean = 0.0, mse_scrambled_std = 0.0;
  double ratio = 0.0;  // scrambled / plain, of means
  double baseline_mse = 0.0;  // mean-predictor on the test targets
  std::vector<double> mse_plain_reps, mse_scrambled_reps;
  std::vector<std::string> grid_paths;
};

// 2x2 average pooling: the attack reconstructs at a quarter of the original
// pixel count, as the reference setup does.
inline Tensor avg_pool2(const Tensor& images) {
  const std::size_t N = images.shape[0], H = images.shape[1], W = images.shape[2],
                    C = images.shape[3];
  Tensor out({N, H / 2, W / 2, C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t y = 0; y < H / 2; ++y) {
      for (std::size_t x = 0; x < W / 2; ++x) {
        for (std::size_t c = 0; c < C; ++c) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              s += images.data[((n * H + 2 * y + dy) * W + 2 * x + dx) * C + c];
            }
          }
          out.data[((n * (H / 2) + y) * (W / 2) + x) * C + c] = s / 4.0;
        }
      }
    }
  }
  return out;
}

namespace detail {

inline Network attack_net(const Shape& in, std::size_t out_channels, bool residual,
                          std::uint64_t seed) {
  std::vector<std::unique_ptr<Layer>> layers;
  layers.push_back(std::make_unique<Conv2dLayer>(16, 3, 2, 1));
  layers.push_back(std::make_unique<BatchNormLayer>());
  layers.push_back(std::make_unique<ReluLayer>());
  layers.push_back(std::make_unique<Conv2dLayer>(32, 3, 2, 1));
  layers.push_back(std::make_unique<BatchNormLayer>());
  layers.push_back(std::make_unique<ReluLayer>());
  layers.push_back(std::make_unique<Conv2dLayer>(48, 3, 2, 1));
  layers.push_back(std::make_unique<BatchNormLayer>());
  layers.push_back(std::make_unique<ReluLayer>());
  if (residual) layers.push_back(std::make_unique<ResidualConvBlock>(3));
  layers.push_back(std::make_unique<Deconv2dLayer>(32, 4, 2, 1));
  layers.push_back(std::make_unique<BatchNormLayer>());
  layers.push_back(std::make_unique<ReluLayer>());
  layers.push_back(std::make_unique<Deconv2dLayer>(16, 4, 2, 1));
  layers.push_back(std::make_unique<BatchNormLayer>());
  layers.push_back(std::make_unique<ReluLayer>());
  layers.push_back(std::make_unique<Deconv2dLayer>(out_channels, 3, 1, 1));
  layers.push_back(std::make_unique<TanhLayer>());
  return Network(std::move(layers), in, seed);
}

inline double run_attack_condition(const Tensor& inputs, const Tensor& targets01,
                                   const std::vector<std::size_t>& train_idx,
                                   const std::vector<std::size_t>& test_idx,
                                   const AttackConfig& cfg, std::uint64_t seed,
                                   Tensor* test_recon_out) {
  Shape in(inputs.shape.begin() + 1, inputs.shape.end());
  Network net = attack_net(in, targets01.shape[3], cfg.residual_blocks, seed);
  // Train in tanh range; report MSE in pixel range.
  Tensor targets_tanh(targets01.shape);
  for (std::size_t i = 0; i < targets01.numel(); ++i) {
    targets_tanh.data[i] = 2.0 * targets01.data[i] - 1.0;
  }
  FitConfig fc;
  fc.epochs = cfg.epochs;
  fc.batch_size = cfg.batch;
  fc.lr = cfg.lr;
  fc.patience = cfg.patience;
  fc.val_fraction = 0.12;
  fc.loss = LossKind::mse;
  fc.seed = seed;
  fit(net, gather_rows(inputs, train_idx), gather_rows(targets_tanh, train_idx), fc);

  Tensor out = net.infer(gather_rows(inputs, test_idx));
  for (double& v : out.data) v = (v + 1.0) * 0.5;
  if (test_recon_out) *test_recon_out = out;
  return mean_squared_error(out, gather_rows(targets01, test_idx));
}

}  // namespace detail

inline AttackReport run_attack(const Tensor& scrambled, const Tensor& originals,
                               std::size_t pair_count, const AttackConfig& cfg) {
  if (originals.rank() != 4 || scrambled.rank() != 4 ||
      originals.shape[0] != scrambled.shape[0]) {
    throw shape_error("run_attack: scrambled/original batches must align");
  }
  if (pair_count > originals.shape[0] || pair_count < 20) {
    throw insufficient_pairs_error("run_attack: need 20.." +
                                   std::to_string(originals.shape[0]) + " pairs, got " +
                                   std::to_string(pair_count));
  }
  Tensor targets = avg_pool2(originals);

  AttackReport report;
  report.pair_count = pair_count;
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    const std::uint64_t rep_seed = derive_seed(cfg.seed, 0xa77ac0 + rep);
    Rng rng(rep_seed);
    std::vector<std::size_t> idx(pair_count);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    const std::size_t n_test = std::max<std::size_t>(1, pair_count / 10);  // 90/10 split
    std::vector<std::size_t> test_idx(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_idx(idx.begin() + static_cast<std::ptrdiff_t>(n_test),
                                       idx.end());

    Tensor recon_plain, recon_scram;
    const double mse_plain = detail::run_attack_condition(originals, targets, train_idx, test_idx,
                                                          cfg, rep_seed, &recon_plain);
    const double mse_scram = detail::run_attack_condition(scrambled, targets, train_idx, test_idx,
                                                          cfg, rep_seed, &recon_scram);
    report.mse_plain_reps.push_back(mse_plain);
    report.mse_scrambled_reps.push_back(mse_scram);

    if (!cfg.grid_dir.empty()) {
      std::filesystem::create_directories(cfg.grid_dir);
      const std::size_t show = std::min<std::size_t>(6, test_idx.size());
      std::vector<Tensor> tiles;
      for (std::size_t i = 0; i < show; ++i) {
        Shape img_shape(originals.shape.begin() + 1, originals.shape.end());
        Shape small_shape(targets.shape.begin() + 1, targets.shape.end());
        tiles.push_back(originals.slice0(test_idx[i], 1).reshaped(img_shape));
        tiles.push_back(scrambled.slice0(test_idx[i], 1).reshaped(
            Shape(scrambled.shape.begin() + 1, scrambled.shape.end())));
        tiles.push_back(upscale_nn(recon_plain.slice0(i, 1).reshaped(small_shape), 2));
        tiles.push_back(upscale_nn(recon_scram.slice0(i, 1).reshaped(small_shape), 2));
      }
      const auto path = cfg.grid_dir / ("attack_rep" + std::to_string(rep) + ".png");
      write_png(path, tile_images(tiles, 4));
      report.grid_paths.push_back(path.string());
    }

    if (rep == 0) {
      Tensor t = gather_rows(targets, test_idx);
      std::vector<double> mean(t.numel() / t.shape[0], 0.0);
      const std::size_t row = mean.size();
      for (std::size_t n = 0; n < t.shape[0]; ++n) {
        for (std::size_t j = 0; j < row; ++j) mean[j] += t.data[n * row + j];
      }
      for (double& m : mean) m /= static_cast<double>(t.shape[0]);
      double base = 0.0;
      for (std::size_t n = 0; n < t.shape[0]; ++n) {
        for (std::size_t j = 0; j < row; ++j) {
          const double d = t.data[n * row + j] - mean[j];
          base += d * d;
        }
      }
      report.baseline_mse = base / static_cast<double>(t.numel());
    }
  }

  auto mean_std = [](const std::vector<double>& xs, double* mean, double* stdev) {
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    *mean = m;
    *stdev = xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0;
  };
  mean_std(report.mse_plain_reps, &report.mse_plain_mean, &report.mse_plain_std);
  mean_std(report.mse_scrambled_reps, &report.mse_scrambled_mean, &report.mse_scrambled_std);
  report.ratio = report.mse_scrambled_mean / report.mse_plain_mean;
  return report;
}

inline json attack_report_json(const AttackReport& r) {
  json j;
  j["pair_count"] = r.pair_count;
  j["mse_plain"] = {{"mean", r.mse_plain_mean}, {"std", r.mse_plain_std},
                    {"reps", r.mse_plain_reps}};
  j["mse_scrambled"] = {{"mean", r.mse_scrambled_mean}, {"std", r.mse_scrambled_std},
                        {"reps", r.mse_scrambled_reps}};
  j["ratio"] = r.ratio;
  j["baseline_mse"] = r.baseline_mse;
  j["grids"] = r.grid_paths;
  return j;
}

}  // namespace owsd

#endif  // OWSD_PRIVACY_HPP
