#ifndef OWSD_IIN_HPP
#define OWSD_IIN_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "owsd/cloud.hpp"
#include "owsd/errors.hpp"
#include "owsd/network.hpp"
#include "owsd/optim.hpp"
#include "owsd/serialize.hpp"

namespace owsd {

struct IINTrainingConfig {
  double learning_rate = 1e-4;
  double decay = 0.95;
  std::size_t max_epochs = 40;
  std::size_t patience = 5;
  double dropout = 0.5;
  std::size_t hidden_width = 256;
  std::size_t batch = 64;
  double val_fraction = 0.10;
  std::size_t members = 5;  // independently trained nets; predictions average
  std::uint64_t seed = 0;
};

// One training/inference example: the image's embedding plus the cloud's
// classification vector for each ensemble member, in encoder order.
struct IINPair {
  Tensor embedding;                               // [E]
  std::vector<std::vector<double>> cloud_vectors;  // each |V_j|
  std::size_t label = 0;
};

inline std::vector<LayerSpec> iin_arch(std::size_t hidden, double dropout, std::size_t n_labels) {
  // Input batchnorm standardizes the feature scales: the classification-vector
  // dims are orders of magnitude smaller than the embedding dims.
  return {
      LayerSpec::batchnorm(),
      LayerSpec::dense(hidden), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::dropout(dropout), LayerSpec::dense(n_labels), LayerSpec::softmax(),
  };
}

struct IINModel {
  std::string iin_id;
  std::uint64_t seed = 0;
  std::vector<std::string> label_names;  // L_conf
  std::string key_id;                    // bindings for the stale-IIN rule
  std::string cloud_model_id;
  std::vector<std::string> encoder_ids;
  // Small ensemble over [E + sum |V|] -> [|L_conf|]; a single training run on
  // a few hundred pairs is too luck-sensitive, averaging flattens the noise.
  std::vector<Network> nets;
  json training_meta;  // epochs_run, best_epoch, best_val_loss, members

  std::size_t input_dim() const { return nets.front().input_shape()[0]; }
  std::size_t n_labels() const { return label_names.size(); }

  std::vector<double> predict(const Tensor& embedding,
                              const std::vector<std::vector<double>>& cloud_vectors) const {
    if (embedding.rank() != 1) throw shape_error("iin_predict: embedding must be a vector");
    std::vector<double> features(embedding.data.begin(), embedding.data.end());
    for (const auto& v : cloud_vectors) features.insert(features.end(), v.begin(), v.end());
    if (features.size() != input_dim()) {
      throw shape_error("iin_predict: got " + std::to_string(features.size()) +
                        " features, model expects " + std::to_string(input_dim()));
    }
    const Tensor x({1, input_dim()}, features);
    std::vector<double> probs(n_labels(), 0.0);
    for (const Network& net : nets) {
      Tensor out = net.infer(x);
      for (std::size_t j = 0; j < probs.size(); ++j) probs[j] += out.data[j];
    }
    for (double& p : probs) p /= static_cast<double>(nets.size());
    return probs;
  }
};

namespace detail {

inline Tensor pairs_to_matrix(const std::vector<IINPair>& pairs, std::size_t input_dim) {
  Tensor X({pairs.size(), input_dim});
  for (std::size_t n = 0; n < pairs.size(); ++n) {
    std::size_t off = 0;
    double* row = X.data.data() + n * input_dim;
    const IINPair& p = pairs[n];
    for (std::size_t i = 0; i < p.embedding.numel(); ++i) row[off++] = p.embedding.data[i];
    for (const auto& v : p.cloud_vectors) {
      for (double x : v) row[off++] = x;
    }
  }
  return X;
}

}  // namespace detail

struct IINTrainResult {
  FitResult fit;  // the member with the best validation loss
  std::vector<FitResult> member_fits;
  double wall_seconds = 0.0;
};

inline IINModel train_iin(const std::vector<IINPair>& pairs,
                          const std::vector<std::string>& label_names,
                          const IINTrainingConfig& cfg, IINTrainResult* result = nullptr) {
  if (pairs.empty()) throw invalid_argument_error("train_iin: no pairs");
  if (cfg.learning_rate <= 0.0) throw invalid_argument_error("train_iin: learning_rate > 0");
  const std::size_t E = pairs.front().embedding.numel();
  const std::size_t n_slots = pairs.front().cloud_vectors.size();
  std::size_t input_dim = E;
  for (const auto& v : pairs.front().cloud_vectors) input_dim += v.size();
  for (const auto& p : pairs) {
    if (p.embedding.numel() != E || p.cloud_vectors.size() != n_slots) {
      throw shape_error("train_iin: inconsistent pair dimensions");
    }
    std::size_t dim = p.embedding.numel();
    for (const auto& v : p.cloud_vectors) dim += v.size();
    if (dim != input_dim) throw shape_error("train_iin: inconsistent pair dimensions");
    if (p.label >= label_names.size()) {
      throw invalid_argument_error("train_iin: label out of range");
    }
  }
  std::vector<char> seen(label_names.size(), 0);
  std::size_t distinct = 0;
  for (const auto& p : pairs) {
    if (!seen[p.label]) {
      seen[p.label] = 1;
      ++distinct;
    }
  }
  if (distinct < 2) {
    throw degenerate_labels_error("train_iin: needs at least 2 distinct labels, got " +
                                  std::to_string(distinct));
  }

  Tensor X = detail::pairs_to_matrix(pairs, input_dim);
  std::vector<std::size_t> labels;
  for (const auto& p : pairs) labels.push_back(p.label);
  Tensor Y = one_hot(labels, label_names.size());

  IINModel model;
  model.seed = cfg.seed;
  model.label_names = label_names;

  FitConfig fit_cfg;
  fit_cfg.epochs = cfg.max_epochs;
  fit_cfg.batch_size = cfg.batch;
  fit_cfg.lr = cfg.learning_rate;
  fit_cfg.lr_decay = cfg.decay;
  fit_cfg.patience = cfg.patience;
  fit_cfg.val_fraction = cfg.val_fraction;
  fit_cfg.loss = LossKind::cross_entropy;

  const std::size_t members = std::max<std::size_t>(1, cfg.members);
  std::vector<FitResult> fits;
  std::vector<double> member_losses;
  std::size_t best_r = 0;
  double total_wall = 0.0;
  for (std::size_t r = 0; r < members; ++r) {
    Network net(iin_arch(cfg.hidden_width, cfg.dropout, label_names.size()), {input_dim},
                derive_seed(cfg.seed, 0x696e6974 + r));
    fit_cfg.seed = derive_seed(cfg.seed, 0x69696e + r);  // "iin"
    FitResult fr = fit(net, X, Y, fit_cfg);
    total_wall += fr.wall_seconds;
    member_losses.push_back(fr.best_val_loss);
    if (r == 0 || fr.best_val_loss < fits[best_r].best_val_loss) best_r = r;
    fits.push_back(std::move(fr));
    model.nets.push_back(std::move(net));
  }

  model.training_meta["epochs_run"] = fits[best_r].epochs_run;
  model.training_meta["best_epoch"] = fits[best_r].best_epoch;
  model.training_meta["best_val_loss"] = fits[best_r].best_val_loss;
  model.training_meta["members"] = members;
  model.training_meta["member_val_losses"] = member_losses;
  model.iin_id = "iin-" + detail::hex16(derive_seed(cfg.seed, input_dim * 1000003 +
                                                                  label_names.size()));
  if (result) {
    result->wall_seconds = total_wall;
    result->fit = fits[best_r];
    result->fit.wall_seconds = total_wall;
    result->member_fits = std::move(fits);
  }
  return model;
}

// Ties broken by lowest label index: the true label is in the top k iff
// fewer than k labels rank strictly ahead of it (equal probability at a
// lower index counts as ahead).
inline double topk_accuracy(const std::vector<std::vector<double>>& predictions,
                            const std::vector<std::size_t>& truths, std::size_t k) {
  if (predictions.size() != truths.size()) {
    throw invalid_argument_error("topk_accuracy: prediction/truth count mismatch");
  }
  if (predictions.empty()) throw invalid_argument_error("topk_accuracy: empty input");
  const std::size_t L = predictions.front().size();
  if (k < 1 || k > L) {
    throw invalid_argument_error("topk_accuracy: k=" + std::to_string(k) +
                                 " out of range for " + std::to_string(L) + " labels");
  }
  std::size_t hits = 0;
  for (std::size_t n = 0; n < predictions.size(); ++n) {
    const auto& p = predictions[n];
    const std::size_t t = truths[n];
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] > p[t] || (p[j] == p[t] && j < t)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

inline void save_iin(const std::filesystem::path& path, const IINModel& m) {
  ModelRecord rec;
  rec.magic = "OWSI";
  rec.seed = m.seed;
  rec.id = m.iin_id;
  rec.meta = network_meta(m.nets.front());
  rec.meta["n_members"] = m.nets.size();
  rec.meta["label_names"] = m.label_names;
  rec.meta["key_id"] = m.key_id;
  rec.meta["cloud_model_id"] = m.cloud_model_id;
  rec.meta["encoder_ids"] = m.encoder_ids;
  rec.meta["training_meta"] = m.training_meta;
  for (const Network& net : m.nets) {
    auto state = network_state_copy(net);
    rec.tensors.insert(rec.tensors.end(), std::make_move_iterator(state.begin()),
                       std::make_move_iterator(state.end()));
  }
  save_model_record(path, rec);
}

inline IINModel load_iin(const std::filesystem::path& path) {
  ModelRecord rec = load_model_record(path, "OWSI");
  IINModel m;
  m.iin_id = rec.id;
  m.seed = rec.seed;
  m.label_names = rec.meta.at("label_names").get<std::vector<std::string>>();
  m.key_id = rec.meta.value("key_id", "");
  m.cloud_model_id = rec.meta.value("cloud_model_id", "");
  m.encoder_ids = rec.meta.value("encoder_ids", std::vector<std::string>{});
  m.training_meta = rec.meta.value("training_meta", json::object());
  const std::size_t members = rec.meta.value("n_members", std::size_t{1});
  if (members == 0 || rec.tensors.size() % members != 0) {
    throw io_error("OWSI container holds " + std::to_string(rec.tensors.size()) +
                   " tensors, not divisible across " + std::to_string(members) + " members");
  }
  const std::size_t per = rec.tensors.size() / members;
  const auto arch = arch_from_json(rec.meta.at("arch"));
  const auto input_shape = rec.meta.at("input_shape").get<Shape>();
  for (std::size_t r = 0; r < members; ++r) {
    Network net(arch, input_shape, rec.seed);
    std::vector<Tensor> state(rec.tensors.begin() + static_cast<std::ptrdiff_t>(r * per),
                              rec.tensors.begin() + static_cast<std::ptrdiff_t>((r + 1) * per));
    net.state_restore(state);
    m.nets.push_back(std::move(net));
  }
  return m;
}

}  // namespace owsd

#endif  // OWSD_IIN_HPP
