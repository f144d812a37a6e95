#ifndef OWSD_CLOUD_HPP
#define OWSD_CLOUD_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "owsd/dataset.hpp"
#include "owsd/errors.hpp"
#include "owsd/network.hpp"
#include "owsd/optim.hpp"
#include "owsd/scrambler.hpp"
#include "owsd/serialize.hpp"

namespace owsd {

struct ClassificationVector {
  std::vector<double> probs;
  std::string model_id;
};

inline void check_distribution(const std::vector<double>& probs, const std::string& where) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw invalid_distribution_error(where + ": negative or non-finite probability");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw invalid_distribution_error(where + ": probabilities sum to " + std::to_string(sum));
  }
}

struct CloudConfig {
  std::size_t epochs = 16;
  std::size_t batch = 32;
  double lr = 1e-3;
  double val_fraction = 0.15;
  std::size_t patience = 4;
  double accuracy_floor = 0.7;
  std::uint64_t seed = 2;
};

// Two conv blocks (the usual pooling step realized as a stride-2 conv so the
// layer set stays minimal), dense 128, softmax.
inline std::vector<LayerSpec> cloud_arch(std::size_t n_labels, std::size_t image_size) {
  const std::size_t flat = (image_size / 4) * (image_size / 4) * 24;
  return {
      LayerSpec::conv2d(8, 3, 1, 1),  LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::conv2d(12, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::conv2d(16, 3, 1, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::conv2d(24, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::reshape({flat}),
      LayerSpec::dense(128),          LayerSpec::relu(),
      LayerSpec::dropout(0.25),
      LayerSpec::dense(n_labels),     LayerSpec::softmax(),
  };
}

struct CloudModel {
  std::string model_id;
  std::uint64_t seed = 0;
  std::vector<std::string> label_names;
  Network net;  // [H,W,C] -> [|labels|]

  std::size_t n_labels() const { return label_names.size(); }

  ClassificationVector classify(const Tensor& image) const {
    Shape batched{1};
    batched.insert(batched.end(), image.shape.begin(), image.shape.end());
    Tensor out = net.infer(image.reshaped(batched));
    ClassificationVector v;
    v.model_id = model_id;
    v.probs.assign(out.data.begin(), out.data.end());
    check_distribution(v.probs, "classify");
    return v;
  }

  Tensor classify_batch(const Tensor& images) const { return net.infer(images); }
};

struct CloudTrainReport {
  double top1_holdout = 0.0;
  bool floor_met = true;
  std::string warning;
  FitResult fit;
};

// Trains on the cloud_train split restricted to `label_subset` (empty = all
// dataset labels). The model's output space is exactly that subset.
inline CloudModel train_cloud(const LabeledDataset& ds, const CloudConfig& cfg,
                              std::vector<std::size_t> label_subset = {},
                              CloudTrainReport* report = nullptr) {
  if (label_subset.empty()) {
    for (std::size_t c = 0; c < ds.n_classes(); ++c) label_subset.push_back(c);
  }
  std::vector<std::ptrdiff_t> remap(ds.n_classes(), -1);
  for (std::size_t j = 0; j < label_subset.size(); ++j) remap[label_subset[j]] = static_cast<std::ptrdiff_t>(j);

  const auto idx = split_filtered(ds, "cloud_train", label_subset);
  std::vector<std::size_t> per_class(label_subset.size(), 0);
  std::vector<std::size_t> labels;
  for (std::size_t i : idx) {
    const std::size_t l = static_cast<std::size_t>(remap[ds.labels[i]]);
    labels.push_back(l);
    ++per_class[l];
  }
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] < 10) {
      throw dataset_error("cloud_train split too small: label " + std::to_string(label_subset[c]) +
                          " has " + std::to_string(per_class[c]) + " samples (need 10)");
    }
  }

  Network net(cloud_arch(label_subset.size(), ds.height), {ds.height, ds.width, ds.channels},
              cfg.seed);
  FitConfig fit_cfg;
  fit_cfg.epochs = cfg.epochs;
  fit_cfg.batch_size = cfg.batch;
  fit_cfg.lr = cfg.lr;
  fit_cfg.patience = cfg.patience;
  fit_cfg.val_fraction = cfg.val_fraction;
  fit_cfg.loss = LossKind::cross_entropy;
  fit_cfg.seed = derive_seed(cfg.seed, 0x636c64);  // "cld"
  FitResult fr =
      fit(net, stack_images(ds, idx), one_hot(labels, label_subset.size()), fit_cfg);

  CloudModel model;
  model.seed = cfg.seed;
  for (std::size_t c : label_subset) model.label_names.push_back(ds.label_names[c]);
  model.model_id = "cmls-" + detail::hex16(derive_seed(
                                 cfg.seed, detail::json_fnv1a(arch_to_json(net.arch()))));
  model.net = std::move(net);

  if (report) {
    const auto eval_idx = split_filtered(ds, "eval", label_subset);
    std::vector<std::size_t> eval_labels;
    for (std::size_t i : eval_idx) eval_labels.push_back(static_cast<std::size_t>(remap[ds.labels[i]]));
    Tensor probs = model.classify_batch(stack_images(ds, eval_idx));
    report->top1_holdout = detail::top1_from_probs(probs, eval_labels);
    report->floor_met = report->top1_holdout >= cfg.accuracy_floor;
    if (!report->floor_met) {
      report->warning = "cloud top-1 " + std::to_string(report->top1_holdout) +
                        " below floor " + std::to_string(cfg.accuracy_floor);
    }
    report->fit = std::move(fr);
  }
  return model;
}

inline void save_cloud(const std::filesystem::path& path, const CloudModel& m) {
  ModelRecord rec;
  rec.magic = "OWSC";
  rec.seed = m.seed;
  rec.id = m.model_id;
  rec.meta = network_meta(m.net);
  rec.meta["label_names"] = m.label_names;
  rec.tensors = network_state_copy(m.net);
  save_model_record(path, rec);
}

inline CloudModel load_cloud(const std::filesystem::path& path) {
  ModelRecord rec = load_model_record(path, "OWSC");
  CloudModel m;
  m.model_id = rec.id;
  m.seed = rec.seed;
  m.label_names = rec.meta.at("label_names").get<std::vector<std::string>>();
  m.net = network_from_record(rec);
  return m;
}

}  // namespace owsd

#endif  // OWSD_CLOUD_HPP
