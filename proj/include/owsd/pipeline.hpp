#ifndef OWSD_PIPELINE_HPP
#define OWSD_PIPELINE_HPP

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "owsd/budget.hpp"
#include "owsd/cloud.hpp"
#include "owsd/encoder.hpp"
#include "owsd/errors.hpp"
#include "owsd/iin.hpp"
#include "owsd/scrambler.hpp"
#include "owsd/wire.hpp"

namespace owsd {

// The only route to the cloud. Accepting ScrambledImage (never a raw Tensor)
// makes "only scrambled images leave the organization" a type-level rule.
class CloudChannel {
 public:
  virtual ~CloudChannel() = default;
  virtual ClassificationVector submit(const ScrambledImage& image) = 0;
  virtual std::string model_id() const = 0;
  virtual std::size_t vector_len() const = 0;
  virtual std::vector<std::string> labels() const = 0;
};

// In-process stand-in for the HTTP hop. Pixels are pushed through float32
// and back so results match the served path bit-for-bit.
class InProcessChannel final : public CloudChannel {
 public:
  explicit InProcessChannel(const CloudModel& model, bool quantize = true)
      : model_(&model), quantize_(quantize) {}

  ClassificationVector submit(const ScrambledImage& image) override {
    return model_->classify(quantize_ ? quantize_f32(image.pixels) : image.pixels);
  }
  std::string model_id() const override { return model_->model_id; }
  std::size_t vector_len() const override { return model_->n_labels(); }
  std::vector<std::string> labels() const override { return model_->label_names; }

 private:
  const CloudModel* model_;
  bool quantize_;
};

struct PipelineConfig {
  std::vector<std::string> encoder_ids;
  std::string key_id;
  std::string iin_id;
  std::vector<std::string> conf_label_names;
  double label_ratio = 0.0;  // |L_conf| / |L_cloud|
};

struct TrainingPhaseReport {
  std::size_t pairs = 0;
  std::size_t submissions = 0;
  IINTrainResult iin;
};

// Collects (embedding, cloud vectors) for each image, charging the budget one
// reservation per scrambled submission. The embedding kept for the IIN is the
// first encoder's; ensemble members contribute their classification vectors
// in encoder order.
inline std::vector<IINPair> collect_pairs(const std::vector<EncoderModel>& encoders,
                                          const ScramblingKey& key, CloudChannel& cloud,
                                          KeyBudget& budget, const Tensor& images,
                                          const std::vector<std::size_t>& labels) {
  if (encoders.empty()) throw invalid_argument_error("pipeline needs at least one encoder");
  const std::size_t n = images.shape[0];
  if (labels.size() != n) throw shape_error("collect_pairs: image/label count mismatch");
  const std::size_t needed = n * encoders.size();
  budget.reserve(needed);  // all-or-nothing: fail before any submission
  std::size_t reserved = needed;
  std::vector<IINPair> pairs(n);
  try {
    std::vector<Tensor> embeddings;  // [N,E] per encoder
    for (const auto& enc : encoders) embeddings.push_back(enc.encode_batch(images));
    for (std::size_t i = 0; i < n; ++i) {
      IINPair& p = pairs[i];
      p.label = labels[i];
      p.embedding = embeddings[0].slice0(i, 1).reshaped({encoders[0].embedding_dim()});
      for (std::size_t e = 0; e < encoders.size(); ++e) {
        Tensor emb = embeddings[e].slice0(i, 1).reshaped({encoders[e].embedding_dim()});
        ClassificationVector v = cloud.submit(scramble(key, emb));
        budget.commit(1);
        --reserved;
        p.cloud_vectors.push_back(std::move(v.probs));
      }
    }
  } catch (...) {
    budget.release(reserved);
    throw;
  }
  return pairs;
}

class Pipeline {
 public:
  Pipeline(std::vector<EncoderModel> encoders, ScramblingKey key, GeneratorConfig gen_config,
           CloudChannel& cloud, std::size_t budget_limit = 0)
      : encoders_(std::move(encoders)),
        key_(std::move(key)),
        gen_config_(std::move(gen_config)),
        cloud_(&cloud),
        budget_(key_.key_id, budget_limit) {
    if (encoders_.empty()) throw invalid_argument_error("pipeline needs at least one encoder");
    for (const auto& enc : encoders_) {
      if (enc.embedding_dim() != key_.embedding_dim()) {
        throw shape_error("encoder " + enc.encoder_id + " embedding dim " +
                          std::to_string(enc.embedding_dim()) + " != key input " +
                          std::to_string(key_.embedding_dim()));
      }
    }
  }

  const ScramblingKey& key() const { return key_; }
  const std::vector<EncoderModel>& encoders() const { return encoders_; }
  KeyBudget& budget() { return budget_; }
  const std::optional<IINModel>& iin() const { return iin_; }
  void adopt_iin(IINModel m) { iin_ = std::move(m); }

  PipelineConfig config() const {
    PipelineConfig c;
    for (const auto& e : encoders_) c.encoder_ids.push_back(e.encoder_id);
    c.key_id = key_.key_id;
    if (iin_) {
      c.iin_id = iin_->iin_id;
      c.conf_label_names = iin_->label_names;
      c.label_ratio = static_cast<double>(iin_->label_names.size()) /
                      static_cast<double>(cloud_->vector_len());
    }
    return c;
  }

  TrainingPhaseReport run_training_phase(const Tensor& images,
                                         const std::vector<std::size_t>& labels,
                                         const std::vector<std::string>& conf_label_names,
                                         const IINTrainingConfig& cfg) {
    TrainingPhaseReport report;
    auto pairs = collect_pairs(encoders_, key_, *cloud_, budget_, images, labels);
    report.pairs = pairs.size();
    report.submissions = pairs.size() * encoders_.size();
    IINModel model = train_iin(pairs, conf_label_names, cfg, &report.iin);
    model.key_id = key_.key_id;
    model.cloud_model_id = cloud_->model_id();
    for (const auto& e : encoders_) model.encoder_ids.push_back(e.encoder_id);
    iin_ = std::move(model);
    return report;
  }

  std::vector<double> infer(const Tensor& image) {
    if (!iin_) throw stale_iin_error("no IIN trained for this pipeline");
    if (iin_->key_id != key_.key_id) {
      throw stale_iin_error("IIN was trained against key " + iin_->key_id +
                            " but the active key is " + key_.key_id + "; retrain required");
    }
    budget_.reserve(encoders_.size());
    std::size_t reserved = encoders_.size();
    std::vector<std::vector<double>> vectors;
    try {
      for (const auto& enc : encoders_) {
        ClassificationVector v = cloud_->submit(scramble(key_, enc.encode(image)));
        budget_.commit(1);
        --reserved;
        vectors.push_back(std::move(v.probs));
      }
    } catch (...) {
      budget_.release(reserved);
      throw;
    }
    return iin_->predict(encoders_[0].encode(image), vectors);
  }

  // Fresh key, zeroed budget, previous IIN left in place but stale (its
  // key_id no longer matches). No training happens here.
  ScramblingKey& rotate_key(std::uint64_t new_seed) {
    key_ = generate_key(new_seed, gen_config_);
    budget_.reset(key_.key_id);
    return key_;
  }

 private:
  std::vector<EncoderModel> encoders_;
  ScramblingKey key_;
  GeneratorConfig gen_config_;
  CloudChannel* cloud_;
  KeyBudget budget_;
  std::optional<IINModel> iin_;
};

}  // namespace owsd

#endif  // OWSD_PIPELINE_HPP
