#ifndef OWSD_USECASES_HPP
#define OWSD_USECASES_HPP

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "owsd/dataset.hpp"
#include "owsd/image_io.hpp"
#include "owsd/pipeline.hpp"

namespace owsd {

// Experiment harness for the five deployment scenarios:
//   1. confidential labels identical to the cloud's
//   2. confidential labels a strict subset (label-ratio sweep)
//   3. confidential labels disjoint from the cloud's (transfer)
//   4. encoder ensembles
//   5. IIN training-set-size curve
struct UseCaseConfig {
  std::uint64_t base_seed = 42;
  std::size_t n_seeds = 3;
  SyntheticConfig data;  // 10 classes x 200, 32x32 unless a case overrides
  std::size_t embedding_dim = 64;
  CloudConfig cloud;
  // A deliberately modest encoder: once the encoder saturates the task the
  // ensemble and training-size effects the experiments measure disappear.
  EncoderConfig encoder = [] {
    EncoderConfig c;
    c.epochs = 12;
    return c;
  }();
  // The IIN gets a longer leash than the deployment defaults; the trend
  // criteria need the fully converged model, not the 40-epoch checkpoint.
  IINTrainingConfig iin = [] {
    IINTrainingConfig c;
    c.max_epochs = 60;
    c.patience = 8;
    c.val_fraction = 0.15;
    return c;
  }();
  std::vector<std::size_t> conf_counts = {2, 5, 10};
  std::vector<std::size_t> ensemble_sizes = {1, 2};
  std::vector<std::size_t> images_per_label = {5, 15, 35, 45};
  std::filesystem::path output_dir;  // plots land here when set
};

struct VariantStats {
  std::string name;
  json params = json::object();
  std::vector<double> top1_truth, top5_truth;
  std::vector<double> top1_cloud, top5_cloud;  // empty when the cloud cannot
                                               // express the confidential labels
  static double mean(const std::vector<double>& xs) {
    return xs.empty() ? 0.0
                      : std::accumulate(xs.begin(), xs.end(), 0.0) /
                            static_cast<double>(xs.size());
  }
};

struct UseCaseReport {
  int use_case = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<VariantStats> variants;
  std::vector<std::string> plots;

  json to_json() const {
    json j;
    j["use_case"] = use_case;
    j["seeds"] = seeds;
    j["variants"] = json::array();
    for (const auto& v : variants) {
      json jv;
      jv["name"] = v.name;
      jv["params"] = v.params;
      jv["top1_truth"] = VariantStats::mean(v.top1_truth);
      jv["top5_truth"] = VariantStats::mean(v.top5_truth);
      jv["top1_cloud"] = v.top1_cloud.empty() ? json(nullptr) : json(VariantStats::mean(v.top1_cloud));
      jv["top5_cloud"] = v.top5_cloud.empty() ? json(nullptr) : json(VariantStats::mean(v.top5_cloud));
      jv["per_seed"] = {{"top1_truth", v.top1_truth},
                        {"top5_truth", v.top5_truth},
                        {"top1_cloud", v.top1_cloud},
                        {"top5_cloud", v.top5_cloud}};
      j["variants"].push_back(std::move(jv));
    }
    j["plots"] = plots;
    return j;
  }
};

namespace detail {

struct SingleRun {
  double top1_truth = 0.0, top5_truth = 0.0;
  bool has_cloud_ref = false;
  double top1_cloud = 0.0, top5_cloud = 0.0;
};

// One pipeline instance for one experiment seed: fresh key, fresh budget,
// fresh IIN; the cloud model and encoders are fixed upstream services.
inline SingleRun run_pipeline_variant(const LabeledDataset& ds, const CloudModel& cloud,
                                      const std::vector<EncoderModel>& encoders,
                                      const std::vector<std::size_t>& conf_labels,
                                      const std::vector<std::size_t>& iin_idx,
                                      const std::vector<std::size_t>& eval_idx,
                                      std::uint64_t seed, const UseCaseConfig& cfg) {
  std::vector<std::string> conf_names;
  std::vector<std::ptrdiff_t> to_conf(ds.n_classes(), -1);
  for (std::size_t j = 0; j < conf_labels.size(); ++j) {
    conf_names.push_back(ds.label_names[conf_labels[j]]);
    to_conf[conf_labels[j]] = static_cast<std::ptrdiff_t>(j);
  }
  auto conf_labels_at = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    for (std::size_t i : idx) {
      if (to_conf[ds.labels[i]] < 0) {
        throw dataset_error("index " + std::to_string(i) + " not in confidential label set");
      }
      out.push_back(static_cast<std::size_t>(to_conf[ds.labels[i]]));
    }
    return out;
  };

  GeneratorConfig gen = toy_generator_config(cfg.embedding_dim);
  ScramblingKey key = generate_key(derive_seed(seed, 0x6b6579), gen);
  InProcessChannel channel(cloud);
  Pipeline pipe(encoders, std::move(key), gen, channel);

  IINTrainingConfig icfg = cfg.iin;
  icfg.seed = derive_seed(seed, 0x69696e);
  pipe.run_training_phase(stack_images(ds, iin_idx), conf_labels_at(iin_idx), conf_names, icfg);

  std::vector<std::vector<double>> preds;
  for (std::size_t i : eval_idx) preds.push_back(pipe.infer(ds.images[i]));
  const auto truth = conf_labels_at(eval_idx);
  const std::size_t k5 = std::min<std::size_t>(5, conf_labels.size());

  SingleRun r;
  r.top1_truth = topk_accuracy(preds, truth, 1);
  r.top5_truth = topk_accuracy(preds, truth, k5);

  // Table-1-style second column: agreement with what the cloud would say on
  // the plaintext image, restricted to the confidential labels. Only defined
  // when every confidential label exists in the cloud's label set.
  std::vector<std::size_t> conf_to_cloud;
  for (const auto& name : conf_names) {
    auto it = std::find(cloud.label_names.begin(), cloud.label_names.end(), name);
    if (it == cloud.label_names.end()) break;
    conf_to_cloud.push_back(static_cast<std::size_t>(it - cloud.label_names.begin()));
  }
  if (conf_to_cloud.size() == conf_names.size()) {
    Tensor probs = cloud.classify_batch(stack_images(ds, eval_idx));
    std::vector<std::size_t> cloud_ref;
    for (std::size_t i = 0; i < eval_idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < conf_to_cloud.size(); ++j) {
        if (probs.data[i * cloud.n_labels() + conf_to_cloud[j]] >
            probs.data[i * cloud.n_labels() + conf_to_cloud[best]]) {
          best = j;
        }
      }
      cloud_ref.push_back(best);
    }
    r.has_cloud_ref = true;
    r.top1_cloud = topk_accuracy(preds, cloud_ref, 1);
    r.top5_cloud = topk_accuracy(preds, cloud_ref, k5);
  }
  return r;
}

inline std::vector<std::uint64_t> experiment_seeds(const UseCaseConfig& cfg) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.n_seeds; ++i) seeds.push_back(cfg.base_seed + i);
  return seeds;
}

inline void append_run(VariantStats& v, const SingleRun& r) {
  v.top1_truth.push_back(r.top1_truth);
  v.top5_truth.push_back(r.top5_truth);
  if (r.has_cloud_ref) {
    v.top1_cloud.push_back(r.top1_cloud);
    v.top5_cloud.push_back(r.top5_cloud);
  }
}

// Encoders are treated like pre-trained feature extractors: one per ensemble
// slot, trained once and shared across experiment seeds.
inline std::vector<EncoderModel> build_encoders(const LabeledDataset& ds,
                                                const UseCaseConfig& cfg, std::size_t count) {
  std::vector<EncoderModel> encoders;
  for (std::size_t j = 0; j < count; ++j) {
    EncoderConfig ec = cfg.encoder;
    ec.embedding_dim = cfg.embedding_dim;
    ec.seed = derive_seed(cfg.encoder.seed, 0xe0c + j);
    encoders.push_back(train_encoder(ds, ec));
  }
  return encoders;
}

}  // namespace detail

inline UseCaseReport run_use_case_1(const UseCaseConfig& cfg) {
  UseCaseReport rep;
  rep.use_case = 1;
  rep.seeds = detail::experiment_seeds(cfg);
  LabeledDataset ds = generate_synthetic(cfg.data);
  CloudModel cloud = train_cloud(ds, cfg.cloud);
  auto encoders = detail::build_encoders(ds, cfg, 1);

  std::vector<std::size_t> conf(ds.n_classes());
  std::iota(conf.begin(), conf.end(), 0);
  VariantStats v;
  v.name = "same_labels";
  v.params = {{"n_conf", conf.size()}, {"n_cloud", ds.n_classes()}};
  for (auto seed : rep.seeds) {
    detail::append_run(v, detail::run_pipeline_variant(ds, cloud, encoders, conf,
                                                       ds.split("iin_train"), ds.split("eval"),
                                                       seed, cfg));
  }
  rep.variants.push_back(std::move(v));
  return rep;
}

inline UseCaseReport run_use_case_2(const UseCaseConfig& cfg) {
  UseCaseReport rep;
  rep.use_case = 2;
  rep.seeds = detail::experiment_seeds(cfg);
  LabeledDataset ds = generate_synthetic(cfg.data);
  CloudModel cloud = train_cloud(ds, cfg.cloud);
  auto encoders = detail::build_encoders(ds, cfg, 1);

  for (std::size_t count : cfg.conf_counts) {
    if (count > ds.n_classes()) {
      throw invalid_argument_error("use-case 2: conf count " + std::to_string(count) +
                                   " exceeds cloud label count");
    }
    std::vector<std::size_t> conf(count);
    std::iota(conf.begin(), conf.end(), 0);
    VariantStats v;
    v.name = "conf_" + std::to_string(count);
    v.params = {{"n_conf", count},
                {"n_cloud", ds.n_classes()},
                {"label_ratio", static_cast<double>(count) / static_cast<double>(ds.n_classes())}};
    for (auto seed : rep.seeds) {
      detail::append_run(v, detail::run_pipeline_variant(
                                ds, cloud, encoders, conf, split_filtered(ds, "iin_train", conf),
                                split_filtered(ds, "eval", conf), seed, cfg));
    }
    rep.variants.push_back(std::move(v));
  }
  return rep;
}

inline UseCaseReport run_use_case_3(const UseCaseConfig& cfg) {
  UseCaseReport rep;
  rep.use_case = 3;
  rep.seeds = detail::experiment_seeds(cfg);
  SyntheticConfig data = cfg.data;
  data.n_classes = std::max<std::size_t>(16, data.n_classes);  // room for a disjoint split
  data.per_class = std::min<std::size_t>(data.per_class, 150);
  LabeledDataset ds = generate_synthetic(data);

  std::vector<std::size_t> cloud_labels(10);
  std::iota(cloud_labels.begin(), cloud_labels.end(), 0);
  std::vector<std::size_t> conf(ds.n_classes() - 10);
  std::iota(conf.begin(), conf.end(), 10);

  CloudModel cloud = train_cloud(ds, cfg.cloud, cloud_labels);
  auto encoders = detail::build_encoders(ds, cfg, 1);

  VariantStats v;
  v.name = "disjoint_labels";
  v.params = {{"n_conf", conf.size()}, {"n_cloud", cloud_labels.size()},
              {"chance", 1.0 / static_cast<double>(conf.size())}};
  for (auto seed : rep.seeds) {
    detail::append_run(v, detail::run_pipeline_variant(
                              ds, cloud, encoders, conf, split_filtered(ds, "iin_train", conf),
                              split_filtered(ds, "eval", conf), seed, cfg));
  }
  rep.variants.push_back(std::move(v));
  return rep;
}

inline UseCaseReport run_use_case_4(const UseCaseConfig& cfg) {
  UseCaseReport rep;
  rep.use_case = 4;
  rep.seeds = detail::experiment_seeds(cfg);
  LabeledDataset ds = generate_synthetic(cfg.data);
  CloudModel cloud = train_cloud(ds, cfg.cloud);
  const std::size_t max_n = *std::max_element(cfg.ensemble_sizes.begin(),
                                              cfg.ensemble_sizes.end());
  auto all_encoders = detail::build_encoders(ds, cfg, max_n);

  std::vector<std::size_t> conf(ds.n_classes());
  std::iota(conf.begin(), conf.end(), 0);
  for (std::size_t n : cfg.ensemble_sizes) {
    std::vector<EncoderModel> encoders(all_encoders.begin(),
                                       all_encoders.begin() + static_cast<std::ptrdiff_t>(n));
    VariantStats v;
    v.name = "encoders_" + std::to_string(n);
    v.params = {{"n_encoders", n}};
    for (auto seed : rep.seeds) {
      detail::append_run(v, detail::run_pipeline_variant(ds, cloud, encoders, conf,
                                                         ds.split("iin_train"), ds.split("eval"),
                                                         seed, cfg));
    }
    rep.variants.push_back(std::move(v));
  }
  return rep;
}

inline UseCaseReport run_use_case_5(const UseCaseConfig& base_cfg) {
  // The size sweep measures the deployment IIN configuration as-is; the
  // longer experiment schedule of the other use-cases overtrains the
  // smallest sweep points and blurs the curve.
  UseCaseConfig cfg = base_cfg;
  cfg.iin = IINTrainingConfig{};

  UseCaseReport rep;
  rep.use_case = 5;
  rep.seeds = detail::experiment_seeds(cfg);
  const std::size_t want = *std::max_element(cfg.images_per_label.begin(),
                                             cfg.images_per_label.end());
  SyntheticConfig data = cfg.data;
  // iin_train holds 20% of each class; make sure the largest sweep point fits.
  // The floor of 480 keeps the eval split large enough to resolve the small
  // accuracy steps near the plateau.
  data.per_class = std::max({data.per_class, want * 5 + 15, std::size_t{480}});
  LabeledDataset ds = generate_synthetic(data);
  CloudModel cloud = train_cloud(ds, cfg.cloud);
  auto encoders = detail::build_encoders(ds, cfg, 1);

  std::vector<std::size_t> conf(ds.n_classes());
  std::iota(conf.begin(), conf.end(), 0);

  // Nested per-class subsets: the 15-image set contains the 5-image set, and
  // so on, so each sweep point differs only by added data.
  std::vector<std::vector<std::size_t>> per_class(ds.n_classes());
  for (std::size_t i : ds.split("iin_train")) per_class[ds.labels[i]].push_back(i);
  Rng rng(derive_seed(cfg.base_seed, 0x5c5));
  for (auto& bucket : per_class) rng.shuffle(bucket);
  for (std::size_t n : cfg.images_per_label) {
    for (const auto& bucket : per_class) {
      if (bucket.size() < n) {
        throw dataset_error("use-case 5: class has only " + std::to_string(bucket.size()) +
                            " iin_train images, sweep needs " + std::to_string(n));
      }
    }
  }

  const auto eval_idx = ds.split("eval");
  for (std::size_t n : cfg.images_per_label) {
    std::vector<std::size_t> iin_idx;
    for (const auto& bucket : per_class) {
      iin_idx.insert(iin_idx.end(), bucket.begin(), bucket.begin() + static_cast<std::ptrdiff_t>(n));
    }
    std::sort(iin_idx.begin(), iin_idx.end());
    VariantStats v;
    v.name = "images_" + std::to_string(n);
    v.params = {{"images_per_label", n}, {"train_size", iin_idx.size()}};
    for (auto seed : rep.seeds) {
      detail::append_run(v, detail::run_pipeline_variant(ds, cloud, encoders, conf, iin_idx,
                                                         eval_idx, seed, cfg));
    }
    rep.variants.push_back(std::move(v));
  }

  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    std::vector<SvgSeries> series;
    SvgSeries mean_series;
    mean_series.name = "mean";
    for (std::size_t si = 0; si < rep.seeds.size(); ++si) {
      SvgSeries s;
      s.name = "seed " + std::to_string(rep.seeds[si]);
      for (std::size_t vi = 0; vi < rep.variants.size(); ++vi) {
        s.xs.push_back(static_cast<double>(cfg.images_per_label[vi]));
        s.ys.push_back(rep.variants[vi].top1_truth[si]);
      }
      series.push_back(std::move(s));
    }
    for (std::size_t vi = 0; vi < rep.variants.size(); ++vi) {
      mean_series.xs.push_back(static_cast<double>(cfg.images_per_label[vi]));
      mean_series.ys.push_back(VariantStats::mean(rep.variants[vi].top1_truth));
    }
    series.push_back(std::move(mean_series));
    const auto path = cfg.output_dir / "use_case_5_curve.svg";
    svg_curve(path, series, "IIN top-1 vs images per label", "images per label", "top-1 accuracy");
    rep.plots.push_back(path.string());
  }
  return rep;
}

inline UseCaseReport run_use_case(int uc, const UseCaseConfig& cfg) {
  switch (uc) {
    case 1: return run_use_case_1(cfg);
    case 2: return run_use_case_2(cfg);
    case 3: return run_use_case_3(cfg);
    case 4: return run_use_case_4(cfg);
    case 5: return run_use_case_5(cfg);
    default:
      throw invalid_argument_error("use case must be 1..5, got " + std::to_string(uc));
  }
}

}  // namespace owsd

#endif  // OWSD_USECASES_HPP
