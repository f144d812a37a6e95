#ifndef OWSD_ENCODER_HPP
#define OWSD_ENCODER_HPP

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

// Desk-scale stand-in for a pre-trained feature extractor: three stride-2
// conv blocks, flatten, dense to E, tanh. Trained with a temporary
// classification head that is discarded afterwards.
struct EncoderConfig {
  std::size_t embedding_dim = 64;
  std::size_t epochs = 24;
  std::size_t batch = 32;
  double lr = 1e-3;
  double val_fraction = 0.15;
  std::size_t patience = 6;
  std::uint64_t seed = 1;
};

struct EncoderModel {
  std::string encoder_id;
  std::string trained_on;
  std::uint64_t seed = 0;
  Network trunk;  // [H,W,C] -> [E]

  std::size_t embedding_dim() const { return trunk.output_shape()[0]; }

  Tensor encode(const Tensor& image) const {
    Shape batched{1};
    batched.insert(batched.end(), image.shape.begin(), image.shape.end());
    Tensor out = trunk.infer(image.reshaped(batched));
    return out.reshaped({out.shape[1]});
  }

  Tensor encode_batch(const Tensor& images) const { return trunk.infer(images); }
};

inline std::vector<LayerSpec> encoder_trunk_arch(std::size_t embedding_dim, std::size_t image_size,
                                                 std::size_t channels) {
  const std::size_t flat = (image_size / 8) * (image_size / 8) * 64;
  (void)channels;
  return {
      LayerSpec::conv2d(16, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::conv2d(32, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::conv2d(64, 3, 2, 1), LayerSpec::batchnorm(), LayerSpec::relu(),
      LayerSpec::reshape({flat}),
      LayerSpec::dropout(0.25),
      LayerSpec::dense(embedding_dim),
      LayerSpec::tanh(),
  };
}

struct EncoderTrainReport {
  double head_top1 = 0.0;  // on the eval split, with the temporary head
  FitResult fit;
};

inline EncoderModel train_encoder(const LabeledDataset& ds, const EncoderConfig& cfg,
                                  EncoderTrainReport* report = nullptr) {
  const auto idx = ds.split("encoder_train");
  std::vector<std::size_t> per_class(ds.n_classes(), 0);
  for (std::size_t i : idx) ++per_class[ds.labels[i]];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] < 10) {
      throw dataset_error("encoder_train split too small: class " + std::to_string(c) + " has " +
                          std::to_string(per_class[c]) + " samples (need 10)");
    }
  }

  auto arch = encoder_trunk_arch(cfg.embedding_dim, ds.height, ds.channels);
  const std::size_t trunk_len = arch.size();
  arch.push_back(LayerSpec::dense(ds.n_classes()));
  arch.push_back(LayerSpec::softmax());
  Network net(arch, {ds.height, ds.width, ds.channels}, cfg.seed);

  FitConfig fit_cfg;
  fit_cfg.epochs = cfg.epochs;
  fit_cfg.batch_size = cfg.batch;
  fit_cfg.lr = cfg.lr;
  fit_cfg.patience = cfg.patience;
  fit_cfg.val_fraction = cfg.val_fraction;
  fit_cfg.loss = LossKind::cross_entropy;
  fit_cfg.seed = derive_seed(cfg.seed, 0x656e63);  // "enc"
  FitResult fr = fit(net, stack_images(ds, idx), one_hot(labels_at(ds, idx), ds.n_classes()),
                     fit_cfg);

  if (report) {
    const auto eval_idx = ds.split("eval");
    Tensor probs = net.infer(stack_images(ds, eval_idx));
    report->head_top1 = detail::top1_from_probs(probs, labels_at(ds, eval_idx));
    report->fit = std::move(fr);
  }

  EncoderModel model;
  model.seed = cfg.seed;
  model.trunk = net.clone_prefix(trunk_len);
  model.trained_on = "synthetic-" + std::to_string(ds.seed);
  model.encoder_id =
      "enc-" + detail::hex16(derive_seed(cfg.seed, detail::json_fnv1a(arch_to_json(
                                                       model.trunk.arch()))));
  return model;
}

inline void save_encoder(const std::filesystem::path& path, const EncoderModel& m) {
  ModelRecord rec;
  rec.magic = "OWSE";
  rec.seed = m.seed;
  rec.id = m.encoder_id;
  rec.meta = network_meta(m.trunk);
  rec.meta["trained_on"] = m.trained_on;
  rec.tensors = network_state_copy(m.trunk);
  save_model_record(path, rec);
}

inline EncoderModel load_encoder(const std::filesystem::path& path) {
  ModelRecord rec = load_model_record(path, "OWSE");
  EncoderModel m;
  m.encoder_id = rec.id;
  m.seed = rec.seed;
  m.trained_on = rec.meta.value("trained_on", "");
  m.trunk = network_from_record(rec);
  return m;
}

}  // namespace owsd

#endif  // OWSD_ENCODER_HPP
