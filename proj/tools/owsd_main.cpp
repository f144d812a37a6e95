// owsd: command-line front end for the scrambling pipeline.
//
// Every subcommand accepts --seed, --config <json>, and --json. Config keys
// are the long option names without dashes (flat, or nested under a section
// named after the subcommand); command-line flags override config values,
// which override built-in defaults. Exit codes: 0 success, 1 usage error,
// 2 runtime error.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "owsd/dataset.hpp"
#include "owsd/http_cloud.hpp"
#include "owsd/http_gateway.hpp"
#include "owsd/image_io.hpp"
#include "owsd/pipeline.hpp"
#include "owsd/privacy.hpp"
#include "owsd/usecases.hpp"

namespace {

using owsd::json;

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string normalize_key(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

// Flat keys plus the section named after the active subcommand.
json config_scope(const json& cfg, const std::string& subcommand) {
  json scope = json::object();
  for (const auto& [k, v] : cfg.items()) {
    if (!v.is_object()) scope[normalize_key(k)] = v;
  }
  for (const auto& [k, v] : cfg.items()) {
    if (v.is_object() && normalize_key(k) == subcommand) {
      for (const auto& [k2, v2] : v.items()) scope[normalize_key(k2)] = v2;
    }
  }
  return scope;
}

// Applies config values as option defaults for the active subcommand before
// parsing; flags given on the command line still win because CLI11 rewrites
// bound variables only for options it actually sees.
class ConfigBinder {
 public:
  ConfigBinder(json scope, std::string active)
      : scope_(std::move(scope)), active_(std::move(active)) {}

  template <typename T>
  CLI::Option* option(CLI::App* sub, const std::string& flag, T& var, const std::string& desc,
                      bool required = false) {
    const std::string key = flag.substr(2);
    bool from_config = false;
    if (sub->get_name() == active_ && scope_.contains(key)) {
      try {
        var = scope_[key].get<T>();
      } catch (const json::exception&) {
        throw usage_error("config key '" + key + "' has the wrong type for " + flag);
      }
      used_.insert(key);
      from_config = true;
    }
    auto* opt = sub->add_option(flag, var, desc);
    if (required && !from_config) opt->required();
    return opt;
  }

  CLI::Option* flag(CLI::App* sub, const std::string& name, bool& var, const std::string& desc) {
    const std::string key = name.substr(2);
    if (sub->get_name() == active_ && scope_.contains(key)) {
      try {
        var = scope_[key].get<bool>();
      } catch (const json::exception&) {
        throw usage_error("config key '" + key + "' must be a boolean");
      }
      used_.insert(key);
    }
    return sub->add_flag(name, var, desc);
  }

  void check_all_used() const {
    for (const auto& [k, v] : scope_.items()) {
      if (!used_.count(k)) {
        throw usage_error("config key '" + k + "' does not match any option of subcommand '" +
                          active_ + "'");
      }
    }
  }

 private:
  json scope_;
  std::string active_;
  std::set<std::string> used_;
};

std::string find_config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw usage_error("--config needs a file path");
      return args[i + 1];
    }
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

std::string find_subcommand(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      ++i;  // skip its value
      continue;
    }
    if (!args[i].empty() && args[i][0] != '-') return args[i];
  }
  return {};
}

void emit(bool json_out, const json& j, const std::string& text) {
  if (json_out) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text << "\n";
  }
}

std::vector<owsd::EncoderModel> load_encoders(const std::vector<std::string>& paths) {
  std::vector<owsd::EncoderModel> encoders;
  for (const auto& p : paths) encoders.push_back(owsd::load_encoder(p));
  return encoders;
}

void attach_budget_state(owsd::KeyBudget& budget, const std::string& state_path) {
  if (state_path.empty()) return;
  if (std::filesystem::exists(state_path)) {
    budget.restore_state(owsd::KeyBudget::load_state(state_path));
  }
  budget.set_persist_path(state_path);
}

std::unique_ptr<owsd::CloudChannel> make_channel(const std::string& cloud_path,
                                                 const std::string& cloud_url,
                                                 std::unique_ptr<owsd::CloudModel>& keepalive,
                                                 const std::string& who) {
  if (!cloud_url.empty()) return std::make_unique<owsd::HttpChannel>(cloud_url);
  if (!cloud_path.empty()) {
    keepalive = std::make_unique<owsd::CloudModel>(owsd::load_cloud(cloud_path));
    return std::make_unique<owsd::InProcessChannel>(*keepalive);
  }
  throw usage_error(who + " needs --cloud or --cloud-url");
}

json split_sizes(const owsd::LabeledDataset& ds) {
  json j = json::object();
  for (const auto& name : owsd::kSplitNames) j[name] = ds.split(name).size();
  return j;
}

std::size_t argmax(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;
  }
  return best;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> raw(argv + 1, argv + argc);
  json cfg = json::object();
  const std::string cfg_path = find_config_path(raw);
  if (!cfg_path.empty()) {
    std::ifstream is(cfg_path);
    if (!is) throw usage_error("cannot open config file " + cfg_path);
    try {
      is >> cfg;
    } catch (const json::exception& e) {
      throw usage_error("config file " + cfg_path + " is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw usage_error("config file must hold a JSON object");
  }
  const std::string active = find_subcommand(raw);
  ConfigBinder bind(config_scope(cfg, active), active);

  CLI::App app{"one-way scrambling by deconvolution: keygen, training, inference, analysis"};
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", "owsd 1.0.0");

  std::string config_file;  // consumed in the pre-scan; accepted here so parsing succeeds
  auto add_common = [&](CLI::App* sub, bool& json_out) {
    sub->add_option("--config", config_file, "JSON config file; flags override its values");
    bind.flag(sub, "--json", json_out, "print a machine-readable JSON report on stdout");
  };

  // ---- gen-data ----
  struct {
    std::string out, idx_images, idx_labels;
    std::size_t classes = 10, per_class = 200, size = 32, channels = 3;
    std::uint64_t seed = 7;
    bool json_out = false;
  } g;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic shape dataset or ingest IDX");
  add_common(gen, g.json_out);
  bind.option(gen, "--out", g.out, "output dataset directory", true);
  bind.option(gen, "--classes", g.classes, "number of classes (2..18)");
  bind.option(gen, "--per-class", g.per_class, "images per class");
  bind.option(gen, "--size", g.size, "image side length");
  bind.option(gen, "--seed", g.seed, "dataset seed");
  bind.option(gen, "--idx-images", g.idx_images, "IDX image file (switches to ingestion)");
  bind.option(gen, "--idx-labels", g.idx_labels, "IDX label file");
  bind.option(gen, "--channels", g.channels, "channels for ingested grayscale images");
  gen->callback([&] {
    owsd::LabeledDataset ds;
    if (!g.idx_images.empty() || !g.idx_labels.empty()) {
      if (g.idx_images.empty() || g.idx_labels.empty()) {
        throw usage_error("IDX ingestion needs both --idx-images and --idx-labels");
      }
      ds = owsd::ingest_idx(g.idx_images, g.idx_labels, g.channels, g.seed);
    } else {
      owsd::SyntheticConfig sc;
      sc.n_classes = g.classes;
      sc.per_class = g.per_class;
      sc.image_size = g.size;
      sc.seed = g.seed;
      ds = owsd::generate_synthetic(sc);
    }
    owsd::save_dataset(g.out, ds);
    emit(g.json_out,
         json{{"dir", g.out},
              {"images", ds.size()},
              {"classes", ds.n_classes()},
              {"label_names", ds.label_names},
              {"splits", split_sizes(ds)}},
         "wrote " + std::to_string(ds.size()) + " images over " +
             std::to_string(ds.n_classes()) + " classes to " + g.out);
  });

  // ---- train-cloud ----
  struct {
    std::string data, out;
    std::vector<std::size_t> labels;
    std::size_t epochs = 16, batch = 32, patience = 4;
    double lr = 1e-3, val_fraction = 0.15, floor = 0.7;
    std::uint64_t seed = 2;
    bool json_out = false;
  } tc;
  auto* tcs = app.add_subcommand("train-cloud", "train the mock cloud classifier");
  add_common(tcs, tc.json_out);
  bind.option(tcs, "--data", tc.data, "dataset directory", true);
  bind.option(tcs, "--out", tc.out, "output model file (.owsc)", true);
  bind.option(tcs, "--labels", tc.labels, "label ids the cloud trains on (default: all)")
      ->delimiter(',');
  bind.option(tcs, "--epochs", tc.epochs, "max training epochs");
  bind.option(tcs, "--batch", tc.batch, "batch size");
  bind.option(tcs, "--lr", tc.lr, "learning rate");
  bind.option(tcs, "--patience", tc.patience, "early-stopping patience");
  bind.option(tcs, "--val-fraction", tc.val_fraction, "validation fraction");
  bind.option(tcs, "--floor", tc.floor, "held-out top-1 floor (warning when missed)");
  bind.option(tcs, "--seed", tc.seed, "training seed");
  tcs->callback([&] {
    auto ds = owsd::load_dataset(tc.data);
    owsd::CloudConfig cc;
    cc.epochs = tc.epochs;
    cc.batch = tc.batch;
    cc.lr = tc.lr;
    cc.patience = tc.patience;
    cc.val_fraction = tc.val_fraction;
    cc.accuracy_floor = tc.floor;
    cc.seed = tc.seed;
    owsd::CloudTrainReport rep;
    owsd::CloudModel model = owsd::train_cloud(ds, cc, tc.labels, &rep);
    owsd::save_cloud(tc.out, model);
    if (!rep.floor_met) std::cerr << "warning: " << rep.warning << "\n";
    emit(tc.json_out,
         json{{"model_id", model.model_id},
              {"labels", model.label_names},
              {"top1_holdout", rep.top1_holdout},
              {"floor_met", rep.floor_met},
              {"epochs_run", rep.fit.epochs_run},
              {"best_val_loss", rep.fit.best_val_loss},
              {"out", tc.out}},
         "cloud " + model.model_id + ": held-out top-1 " + std::to_string(rep.top1_holdout) +
             " -> " + tc.out);
  });

  // ---- train-encoder ----
  struct {
    std::string data, out;
    std::size_t embedding_dim = 64, epochs = 12, batch = 32, patience = 4;
    double lr = 1e-3, val_fraction = 0.15;
    std::uint64_t seed = 1;
    bool json_out = false;
  } te;
  auto* tes = app.add_subcommand("train-encoder", "train a feature-extractor encoder");
  add_common(tes, te.json_out);
  bind.option(tes, "--data", te.data, "dataset directory", true);
  bind.option(tes, "--out", te.out, "output model file (.owse)", true);
  bind.option(tes, "--embedding-dim", te.embedding_dim, "embedding dimension");
  bind.option(tes, "--epochs", te.epochs, "max training epochs");
  bind.option(tes, "--batch", te.batch, "batch size");
  bind.option(tes, "--lr", te.lr, "learning rate");
  bind.option(tes, "--patience", te.patience, "early-stopping patience");
  bind.option(tes, "--val-fraction", te.val_fraction, "validation fraction");
  bind.option(tes, "--seed", te.seed, "training seed");
  tes->callback([&] {
    auto ds = owsd::load_dataset(te.data);
    owsd::EncoderConfig ec;
    ec.embedding_dim = te.embedding_dim;
    ec.epochs = te.epochs;
    ec.batch = te.batch;
    ec.lr = te.lr;
    ec.patience = te.patience;
    ec.val_fraction = te.val_fraction;
    ec.seed = te.seed;
    owsd::EncoderTrainReport rep;
    owsd::EncoderModel enc = owsd::train_encoder(ds, ec, &rep);
    owsd::save_encoder(te.out, enc);
    emit(te.json_out,
         json{{"encoder_id", enc.encoder_id},
              {"embedding_dim", enc.embedding_dim()},
              {"head_top1", rep.head_top1},
              {"epochs_run", rep.fit.epochs_run},
              {"out", te.out}},
         "encoder " + enc.encoder_id + ": probe-head top-1 " + std::to_string(rep.head_top1) +
             " -> " + te.out);
  });

  // ---- keygen ----
  struct {
    std::string out;
    std::uint64_t seed = 42;
    std::size_t embedding_dim = 64, base_size = 4, base_channels = 128, out_channels = 3;
    std::vector<std::size_t> filters{64, 32};
    bool paper_shape = false, json_out = false;
  } kg;
  auto* kgs = app.add_subcommand("keygen", "generate a frozen random scrambling key");
  add_common(kgs, kg.json_out);
  bind.option(kgs, "--out", kg.out, "output key file (.owsk)", true);
  bind.option(kgs, "--seed", kg.seed, "key seed (the secret initialization)");
  bind.option(kgs, "--embedding-dim", kg.embedding_dim, "embedding dimension the key accepts");
  bind.option(kgs, "--base-size", kg.base_size, "side of the seed volume");
  bind.option(kgs, "--base-channels", kg.base_channels, "channels of the seed volume");
  bind.option(kgs, "--filters", kg.filters, "intermediate deconv filter counts")->delimiter(',');
  bind.option(kgs, "--out-channels", kg.out_channels, "output image channels");
  bind.flag(kgs, "--paper-shape", kg.paper_shape, "use the reference 2048 -> 256x256x3 layout");
  kgs->callback([&] {
    owsd::GeneratorConfig gc;
    if (kg.paper_shape) {
      gc = owsd::paper_shape_config();
    } else {
      gc.embedding_dim = kg.embedding_dim;
      gc.base_size = kg.base_size;
      gc.base_channels = kg.base_channels;
      gc.filters = kg.filters;
      gc.out_channels = kg.out_channels;
    }
    owsd::ScramblingKey key = owsd::generate_key(kg.seed, gc);
    owsd::save_key(kg.out, key);
    emit(kg.json_out,
         json{{"key_id", key.key_id},
              {"seed", key.seed},
              {"embedding_dim", key.embedding_dim()},
              {"image_shape", key.image_shape()},
              {"out", kg.out}},
         "key " + key.key_id + " (" + std::to_string(key.embedding_dim()) + " -> " +
             owsd::shape_str(key.image_shape()) + ") -> " + kg.out);
  });

  // ---- scramble ----
  struct {
    std::string key, out, data, embedding, png;
    std::vector<std::string> encoders;
    std::size_t image_index = 0;
    std::uint64_t seed = 0;
    bool json_out = false;
  } sc;
  auto* scs = app.add_subcommand("scramble", "scramble one image (or a raw embedding)");
  add_common(scs, sc.json_out);
  bind.option(scs, "--key", sc.key, "key file (.owsk)", true);
  bind.option(scs, "--out", sc.out, "output tensor file (.owtn)", true);
  bind.option(scs, "--encoder", sc.encoders, "encoder file (.owse)")->delimiter(',');
  bind.option(scs, "--data", sc.data, "dataset directory");
  bind.option(scs, "--image-index", sc.image_index, "image index within the dataset");
  bind.option(scs, "--embedding", sc.embedding, "embedding tensor (.owtn), bypasses encoding");
  bind.option(scs, "--png", sc.png, "also write the scrambled image as PNG");
  bind.option(scs, "--seed", sc.seed, "unused; accepted for config uniformity");
  scs->callback([&] {
    owsd::ScramblingKey key = owsd::load_key(sc.key);
    owsd::Tensor emb;
    if (!sc.embedding.empty()) {
      emb = owsd::load_owtn(sc.embedding);
    } else {
      if (sc.encoders.empty() || sc.data.empty()) {
        throw usage_error("scramble needs --embedding, or --encoder plus --data/--image-index");
      }
      auto ds = owsd::load_dataset(sc.data);
      if (sc.image_index >= ds.size()) {
        throw usage_error("--image-index " + std::to_string(sc.image_index) +
                          " out of range (dataset has " + std::to_string(ds.size()) + ")");
      }
      owsd::EncoderModel enc = owsd::load_encoder(sc.encoders.front());
      emb = enc.encode(ds.images[sc.image_index]);
    }
    owsd::ScrambledImage img = owsd::scramble(key, emb);
    owsd::save_owtn(sc.out, img.pixels);
    if (!sc.png.empty()) owsd::write_png(sc.png, img.pixels);
    emit(sc.json_out,
         json{{"key_id", img.key_id},
              {"shape", img.pixels.shape},
              {"out", sc.out},
              {"png", sc.png.empty() ? json(nullptr) : json(sc.png)}},
         "scrambled -> " + sc.out + " (" + owsd::shape_str(img.pixels.shape) + ")");
  });

  // ---- train-iin ----
  struct {
    std::string data, key, out, cloud, cloud_url, split = "iin_train", state, metrics_log;
    std::vector<std::string> encoders;
    std::vector<std::size_t> conf_labels;
    std::size_t images_per_label = 0, hidden = 256, epochs = 40, batch = 64, patience = 5;
    std::size_t members = 5, limit = 0;
    double dropout = 0.5, lr = 1e-4, val_fraction = 0.10;
    std::uint64_t seed = 3;
    bool json_out = false;
  } ti;
  auto* tis = app.add_subcommand("train-iin", "run the training phase: collect pairs, fit the IIN");
  add_common(tis, ti.json_out);
  bind.option(tis, "--data", ti.data, "dataset directory", true);
  bind.option(tis, "--key", ti.key, "key file (.owsk)", true);
  bind.option(tis, "--encoder", ti.encoders, "encoder file(s), comma separated for ensembles",
              true)
      ->delimiter(',');
  bind.option(tis, "--out", ti.out, "output model file (.owsi)", true);
  bind.option(tis, "--cloud", ti.cloud, "cloud model file (.owsc), classified in-process");
  bind.option(tis, "--cloud-url", ti.cloud_url, "cloud base URL (HTTP instead of --cloud)");
  bind.option(tis, "--conf-labels", ti.conf_labels, "confidential label ids (default: all)")
      ->delimiter(',');
  bind.option(tis, "--split", ti.split, "dataset split to train on");
  bind.option(tis, "--images-per-label", ti.images_per_label,
              "cap the training images per label (0 = all)");
  bind.option(tis, "--hidden", ti.hidden, "hidden layer width");
  bind.option(tis, "--dropout", ti.dropout, "dropout rate");
  bind.option(tis, "--epochs", ti.epochs, "max training epochs");
  bind.option(tis, "--batch", ti.batch, "batch size");
  bind.option(tis, "--lr", ti.lr, "learning rate");
  bind.option(tis, "--patience", ti.patience, "early-stopping patience");
  bind.option(tis, "--val-fraction", ti.val_fraction, "validation fraction");
  bind.option(tis, "--members", ti.members, "ensemble members averaged at prediction time");
  bind.option(tis, "--seed", ti.seed, "IIN training seed");
  bind.option(tis, "--limit", ti.limit, "key budget limit (0 = default 9000)");
  bind.option(tis, "--budget-state", ti.state, "budget state JSON, restored and persisted");
  bind.option(tis, "--metrics-log", ti.metrics_log, "write per-epoch loss/accuracy JSON here");
  tis->callback([&] {
    auto ds = owsd::load_dataset(ti.data);
    owsd::ScramblingKey key = owsd::load_key(ti.key);
    auto encoders = load_encoders(ti.encoders);
    std::unique_ptr<owsd::CloudModel> keepalive;
    auto channel = make_channel(ti.cloud, ti.cloud_url, keepalive, "train-iin");

    std::vector<std::size_t> conf = ti.conf_labels;
    if (conf.empty()) {
      conf.resize(ds.n_classes());
      std::iota(conf.begin(), conf.end(), 0);
    }
    std::vector<std::string> conf_names;
    std::vector<std::ptrdiff_t> to_conf(ds.n_classes(), -1);
    for (std::size_t j = 0; j < conf.size(); ++j) {
      if (conf[j] >= ds.n_classes()) {
        throw usage_error("--conf-labels entry " + std::to_string(conf[j]) + " is out of range");
      }
      conf_names.push_back(ds.label_names[conf[j]]);
      to_conf[conf[j]] = static_cast<std::ptrdiff_t>(j);
    }
    auto idx = owsd::split_filtered(ds, ti.split, conf);
    if (ti.images_per_label > 0) {
      std::vector<std::size_t> capped, counts(ds.n_classes(), 0);
      for (std::size_t i : idx) {
        if (counts[ds.labels[i]]++ < ti.images_per_label) capped.push_back(i);
      }
      idx = std::move(capped);
    }
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) labels.push_back(static_cast<std::size_t>(to_conf[ds.labels[i]]));

    owsd::KeyBudget budget(key.key_id, ti.limit);
    attach_budget_state(budget, ti.state);
    auto pairs = owsd::collect_pairs(encoders, key, *channel, budget,
                                     owsd::stack_images(ds, idx), labels);
    owsd::IINTrainingConfig ic;
    ic.learning_rate = ti.lr;
    ic.max_epochs = ti.epochs;
    ic.patience = ti.patience;
    ic.dropout = ti.dropout;
    ic.hidden_width = ti.hidden;
    ic.batch = ti.batch;
    ic.val_fraction = ti.val_fraction;
    ic.members = ti.members;
    ic.seed = ti.seed;
    owsd::IINTrainResult result;
    owsd::IINModel iin = owsd::train_iin(pairs, conf_names, ic, &result);
    iin.key_id = key.key_id;
    iin.cloud_model_id = channel->model_id();
    for (const auto& e : encoders) iin.encoder_ids.push_back(e.encoder_id);
    owsd::save_iin(ti.out, iin);
    if (!ti.metrics_log.empty()) {
      json members = json::array();
      for (std::size_t r = 0; r < result.member_fits.size(); ++r) {
        json epochs = json::array();
        for (const auto& e : result.member_fits[r].history) {
          json je{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                  {"lr", e.lr}};
          if (e.val_top1 >= 0.0) je["val_top1"] = e.val_top1;
          epochs.push_back(std::move(je));
        }
        members.push_back(json{{"member", r},
                               {"best_epoch", result.member_fits[r].best_epoch},
                               {"best_val_loss", result.member_fits[r].best_val_loss},
                               {"epochs", std::move(epochs)}});
      }
      std::ofstream log(ti.metrics_log);
      if (!log) throw owsd::io_error("cannot open " + ti.metrics_log + " for writing");
      log << json{{"iin_id", iin.iin_id}, {"members", std::move(members)}}.dump(2) << "\n";
    }
    emit(ti.json_out,
         json{{"iin_id", iin.iin_id},
              {"input_dim", iin.input_dim()},
              {"labels", iin.label_names},
              {"pairs", pairs.size()},
              {"submissions_used", budget.used()},
              {"submissions_limit", budget.limit()},
              {"epochs_run", result.fit.epochs_run},
              {"best_val_loss", result.fit.best_val_loss},
              {"wall_seconds", result.wall_seconds},
              {"out", ti.out}},
         "iin " + iin.iin_id + ": " + std::to_string(pairs.size()) + " pairs, budget " +
             std::to_string(budget.used()) + "/" + std::to_string(budget.limit()) + " -> " +
             ti.out);
  });

  // ---- infer ----
  struct {
    std::string data, key, iin, cloud, cloud_url, state;
    std::vector<std::string> encoders;
    std::size_t image_index = 0, limit = 0;
    std::uint64_t seed = 0;
    bool json_out = false;
  } inf;
  auto* ins = app.add_subcommand("infer", "classify one image through the full pipeline");
  add_common(ins, inf.json_out);
  bind.option(ins, "--data", inf.data, "dataset directory", true);
  bind.option(ins, "--image-index", inf.image_index, "image index within the dataset", true);
  bind.option(ins, "--key", inf.key, "key file (.owsk)", true);
  bind.option(ins, "--iin", inf.iin, "IIN file (.owsi)", true);
  bind.option(ins, "--encoder", inf.encoders, "encoder file(s)", true)->delimiter(',');
  bind.option(ins, "--cloud", inf.cloud, "cloud model file (.owsc)");
  bind.option(ins, "--cloud-url", inf.cloud_url, "cloud base URL");
  bind.option(ins, "--limit", inf.limit, "key budget limit (0 = default 9000)");
  bind.option(ins, "--budget-state", inf.state, "budget state JSON, restored and persisted");
  bind.option(ins, "--seed", inf.seed, "unused; accepted for config uniformity");
  ins->callback([&] {
    auto ds = owsd::load_dataset(inf.data);
    if (inf.image_index >= ds.size()) {
      throw usage_error("--image-index out of range (dataset has " + std::to_string(ds.size()) +
                        ")");
    }
    owsd::ScramblingKey key = owsd::load_key(inf.key);
    owsd::IINModel iin = owsd::load_iin(inf.iin);
    if (iin.key_id != key.key_id) {
      throw owsd::stale_iin_error("IIN " + iin.iin_id + " was trained against key " + iin.key_id +
                                  ", not " + key.key_id + "; retrain after rotation");
    }
    auto encoders = load_encoders(inf.encoders);
    std::unique_ptr<owsd::CloudModel> keepalive;
    auto channel = make_channel(inf.cloud, inf.cloud_url, keepalive, "infer");
    owsd::KeyBudget budget(key.key_id, inf.limit);
    attach_budget_state(budget, inf.state);

    const owsd::Tensor& image = ds.images[inf.image_index];
    budget.reserve(encoders.size());
    std::size_t reserved = encoders.size();
    std::vector<std::vector<double>> vectors;
    try {
      for (const auto& enc : encoders) {
        auto v = channel->submit(owsd::scramble(key, enc.encode(image)));
        budget.commit(1);
        --reserved;
        vectors.push_back(std::move(v.probs));
      }
    } catch (...) {
      budget.release(reserved);
      throw;
    }
    std::vector<double> probs = iin.predict(encoders[0].encode(image), vectors);
    const std::size_t best = argmax(probs);
    emit(inf.json_out,
         json{{"label", iin.label_names[best]},
              {"probabilities", probs},
              {"labels", iin.label_names},
              {"truth", ds.label_names[ds.labels[inf.image_index]]},
              {"key_id", key.key_id},
              {"submissions_used", budget.used()},
              {"submissions_limit", budget.limit()}},
         "predicted " + iin.label_names[best] + " (truth " +
             ds.label_names[ds.labels[inf.image_index]] + "), budget " +
             std::to_string(budget.used()) + "/" + std::to_string(budget.limit()));
  });

  // ---- run-use-case ----
  struct {
    int uc = 0;
    std::vector<std::size_t> sweep{2, 5, 10}, ensembles{1, 2}, sizes{5, 15, 35, 45};
    std::size_t n_seeds = 3, classes = 10, per_class = 200, size = 32, embedding_dim = 64;
    std::size_t cloud_epochs = 16, encoder_epochs = 12, iin_epochs = 60;
    std::uint64_t base_seed = 42, data_seed = 7, seed = 42;
    std::string out, out_dir;
    bool json_out = false;
  } ru;
  auto* rus = app.add_subcommand("run-use-case", "run one of the five experiment scenarios");
  add_common(rus, ru.json_out);
  rus->add_option("uc", ru.uc, "use case number (1..5)")->required()->check(CLI::Range(1, 5));
  bind.option(rus, "--labels", ru.sweep, "confidential label counts for use-case 2")
      ->delimiter(',');
  bind.option(rus, "--ensembles", ru.ensembles, "encoder counts for use-case 4")->delimiter(',');
  bind.option(rus, "--sizes", ru.sizes, "images-per-label sweep for use-case 5")->delimiter(',');
  bind.option(rus, "--seeds", ru.n_seeds, "number of experiment seeds");
  bind.option(rus, "--base-seed", ru.base_seed, "first experiment seed");
  bind.option(rus, "--classes", ru.classes, "dataset classes");
  bind.option(rus, "--per-class", ru.per_class, "dataset images per class");
  bind.option(rus, "--size", ru.size, "dataset image side");
  bind.option(rus, "--data-seed", ru.data_seed, "dataset seed");
  bind.option(rus, "--embedding-dim", ru.embedding_dim, "encoder embedding dimension");
  bind.option(rus, "--cloud-epochs", ru.cloud_epochs, "cloud training epochs");
  bind.option(rus, "--encoder-epochs", ru.encoder_epochs, "encoder training epochs");
  bind.option(rus, "--iin-epochs", ru.iin_epochs, "IIN training epochs");
  bind.option(rus, "--out", ru.out, "also write the JSON report to this file");
  bind.option(rus, "--out-dir", ru.out_dir, "directory for plots");
  bind.option(rus, "--seed", ru.seed, "alias for --base-seed");
  rus->callback([&] {
    owsd::UseCaseConfig c;
    c.base_seed = rus->count("--seed") ? ru.seed : ru.base_seed;
    c.n_seeds = ru.n_seeds;
    c.data.n_classes = ru.classes;
    c.data.per_class = ru.per_class;
    c.data.image_size = ru.size;
    c.data.seed = ru.data_seed;
    c.embedding_dim = ru.embedding_dim;
    c.cloud.epochs = ru.cloud_epochs;
    c.encoder.epochs = ru.encoder_epochs;
    c.iin.max_epochs = ru.iin_epochs;
    c.conf_counts = ru.sweep;
    c.ensemble_sizes = ru.ensembles;
    c.images_per_label = ru.sizes;
    if (!ru.out_dir.empty()) c.output_dir = ru.out_dir;
    owsd::UseCaseReport rep = owsd::run_use_case(ru.uc, c);
    const json j = rep.to_json();
    if (!ru.out.empty()) {
      std::ofstream os(ru.out);
      if (!os) throw owsd::io_error("cannot write report to " + ru.out);
      os << j.dump(2) << "\n";
    }
    std::string text = "use case " + std::to_string(rep.use_case) + ":";
    for (const auto& v : rep.variants) {
      text += " " + v.name + " top1=" + std::to_string(owsd::VariantStats::mean(v.top1_truth));
    }
    emit(ru.json_out, j, text);
  });

  // ---- analyze ----
  struct {
    std::string mode, data, key, cloud, split = "eval", out_dir;
    std::vector<std::string> encoders;
    std::size_t pairs = 0, k = 1, attack_epochs = 30, attack_reps = 2;
    std::uint64_t seed = 11;
    bool residual = false, json_out = false;
  } an;
  auto* ans = app.add_subcommand("analyze", "privacy analyses over a trained setup");
  add_common(ans, an.json_out);
  ans->add_option("mode", an.mode, "entropy | intersection | pca | dead-relu | attack")
      ->required()
      ->check(CLI::IsMember({"entropy", "intersection", "pca", "dead-relu", "attack"}));
  bind.option(ans, "--data", an.data, "dataset directory", true);
  bind.option(ans, "--encoder", an.encoders, "encoder file (.owse)", true)->delimiter(',');
  bind.option(ans, "--key", an.key, "key file (.owsk)", true);
  bind.option(ans, "--cloud", an.cloud, "cloud model file (.owsc)");
  bind.option(ans, "--split", an.split, "dataset split to analyze (attack uses 'attack')");
  bind.option(ans, "--pairs", an.pairs, "pair count (0 = whole split)");
  bind.option(ans, "--k", an.k, "k for the top-k intersection");
  bind.option(ans, "--out-dir", an.out_dir, "directory for plots / reconstruction grids");
  bind.option(ans, "--seed", an.seed, "attack training seed");
  bind.option(ans, "--attack-epochs", an.attack_epochs, "attack training epochs");
  bind.option(ans, "--attack-reps", an.attack_reps, "attack repetitions");
  bind.flag(ans, "--residual", an.residual, "use a residual bottleneck in the attack net");
  ans->callback([&] {
    auto ds = owsd::load_dataset(an.data);
    owsd::EncoderModel enc = owsd::load_encoder(an.encoders.front());
    owsd::ScramblingKey key = owsd::load_key(an.key);
    if ((an.mode == "entropy" || an.mode == "intersection" || an.mode == "pca") &&
        an.cloud.empty()) {
      throw usage_error("analyze " + an.mode + " needs --cloud");
    }

    json j;
    std::string text;
    if (an.mode == "dead-relu") {
      auto idx = ds.split(an.split);
      if (an.pairs > 0 && an.pairs < idx.size()) idx.resize(an.pairs);
      owsd::Tensor emb = enc.encode_batch(owsd::stack_images(ds, idx));
      const double frac = owsd::dead_relu_fraction(key, emb);
      j = {{"dead_relu_fraction", frac}, {"images", idx.size()}, {"key_id", key.key_id}};
      text = "dead ReLU fraction " + std::to_string(frac) + " over " +
             std::to_string(idx.size()) + " images";
    } else if (an.mode == "attack") {
      auto idx = ds.split(an.split == "eval" ? "attack" : an.split);
      owsd::Tensor originals = owsd::stack_images(ds, idx);
      owsd::Tensor scrambled = owsd::scramble_batch(key, enc.encode_batch(originals));
      owsd::AttackConfig ac;
      ac.epochs = an.attack_epochs;
      ac.repetitions = an.attack_reps;
      ac.residual_blocks = an.residual;
      ac.seed = an.seed;
      if (!an.out_dir.empty()) ac.grid_dir = an.out_dir;
      const std::size_t n = (an.pairs > 0 && an.pairs < idx.size()) ? an.pairs : idx.size();
      owsd::AttackReport rep = owsd::run_attack(scrambled, originals, n, ac);
      j = owsd::attack_report_json(rep);
      text = "attack MSE: plain " + std::to_string(rep.mse_plain_mean) + ", scrambled " +
             std::to_string(rep.mse_scrambled_mean) + ", ratio " + std::to_string(rep.ratio);
    } else {
      owsd::CloudModel cloud = owsd::load_cloud(an.cloud);
      auto idx = ds.split(an.split);
      if (an.pairs > 0 && an.pairs < idx.size()) idx.resize(an.pairs);
      auto pairs = owsd::collect_vector_pairs(cloud, enc, key, owsd::stack_images(ds, idx),
                                              owsd::labels_at(ds, idx));
      if (an.mode == "entropy") {
        owsd::EntropyStats es = owsd::entropy_stats(pairs);
        j = {{"pairs", pairs.size()},
             {"mean_plain", es.mean_plain},
             {"mean_scrambled", es.mean_scrambled}};
        text = "entropy: plain " + std::to_string(es.mean_plain) + ", scrambled " +
               std::to_string(es.mean_scrambled);
      } else if (an.mode == "intersection") {
        owsd::IntersectionStats is = owsd::intersection_and_reduction(pairs, an.k);
        j = {{"pairs", pairs.size()},
             {"k", is.k},
             {"intersection_rate", is.intersection_rate},
             {"mean_confidence_reduction", is.mean_confidence_reduction},
             {"chance", static_cast<double>(is.k) / static_cast<double>(cloud.n_labels())}};
        text = "top-" + std::to_string(is.k) + " intersection " +
               std::to_string(is.intersection_rate) + ", confidence reduction " +
               std::to_string(is.mean_confidence_reduction);
      } else {
        std::vector<std::vector<double>> plain, scram;
        std::vector<std::string> groups;
        std::vector<std::size_t> gid;
        for (const auto& p : pairs) {
          plain.push_back(p.plain);
          scram.push_back(p.scrambled);
          groups.push_back(ds.label_names[p.label]);
          gid.push_back(p.label);
        }
        owsd::PcaResult rp = owsd::pca_2d(plain);
        owsd::PcaResult rs = owsd::pca_2d(scram);
        const double sil_p = owsd::silhouette_2d(rp.points, gid);
        const double sil_s = owsd::silhouette_2d(rs.points, gid);
        j = {{"pairs", pairs.size()},
             {"eigenvalues_plain", rp.eigenvalues},
             {"eigenvalues_scrambled", rs.eigenvalues},
             {"silhouette_plain", sil_p},
             {"silhouette_scrambled", sil_s}};
        if (!an.out_dir.empty()) {
          std::filesystem::create_directories(an.out_dir);
          const auto pp = std::filesystem::path(an.out_dir) / "pca_plain.svg";
          const auto ps = std::filesystem::path(an.out_dir) / "pca_scrambled.svg";
          owsd::svg_scatter(pp, rp.points, groups, "plaintext classification vectors (PCA)");
          owsd::svg_scatter(ps, rs.points, groups, "scrambled classification vectors (PCA)");
          j["plots"] = {pp.string(), ps.string()};
        }
        text = "pca silhouettes: plain " + std::to_string(sil_p) + ", scrambled " +
               std::to_string(sil_s);
      }
    }
    emit(an.json_out, j, text);
  });

  // ---- rotate-key ----
  struct {
    std::string key, out, state;
    std::uint64_t seed = 0;
    bool json_out = false;
  } rk;
  auto* rks = app.add_subcommand("rotate-key", "re-seed an existing key layout; resets the budget");
  add_common(rks, rk.json_out);
  bind.option(rks, "--key", rk.key, "existing key file (.owsk)", true);
  bind.option(rks, "--out", rk.out, "output key file (.owsk)", true);
  bind.option(rks, "--seed", rk.seed, "new key seed", true);
  bind.option(rks, "--budget-state", rk.state, "budget state JSON to reset for the new key");
  rks->callback([&] {
    owsd::ScramblingKey old_key = owsd::load_key(rk.key);
    if (old_key.net.arch().empty()) {
      throw owsd::invalid_architecture_error("key has no serializable architecture");
    }
    owsd::ScramblingKey fresh =
        owsd::regenerate_key(rk.seed, old_key.net.arch(), old_key.net.input_shape());
    owsd::save_key(rk.out, fresh);
    if (!rk.state.empty()) {
      owsd::KeyBudget budget(fresh.key_id);
      budget.set_persist_path(rk.state);
      budget.reset(fresh.key_id);
    }
    emit(rk.json_out,
         json{{"old_key_id", old_key.key_id}, {"new_key_id", fresh.key_id}, {"out", rk.out}},
         "rotated " + old_key.key_id + " -> " + fresh.key_id + " (" + rk.out + ")");
  });

  // ---- serve-cloud ----
  struct {
    std::string cloud, host = "127.0.0.1";
    int port = 8080;
    std::uint64_t seed = 0;
    bool json_out = false;
  } svc;
  auto* svcs = app.add_subcommand("serve-cloud", "serve a cloud model over HTTP");
  add_common(svcs, svc.json_out);
  bind.option(svcs, "--cloud", svc.cloud, "cloud model file (.owsc)", true);
  bind.option(svcs, "--port", svc.port, "listen port (0 = pick a free one)")->envname("OWSD_PORT");
  bind.option(svcs, "--host", svc.host, "bind address");
  bind.option(svcs, "--seed", svc.seed, "unused; accepted for config uniformity");
  svcs->callback([&] {
    owsd::CloudServer server(owsd::load_cloud(svc.cloud));
    const int port = server.start(svc.host, svc.port);
    emit(svc.json_out,
         json{{"host", svc.host}, {"port", port}, {"model_id", server.model().model_id}},
         "cloud " + server.model().model_id + " listening on " + svc.host + ":" +
             std::to_string(port));
    std::cout.flush();
    server.wait();
  });

  // ---- serve-gateway ----
  struct {
    std::string key, iin, cloud_url, host = "127.0.0.1", state;
    std::vector<std::string> encoders;
    std::size_t limit = 0;
    int port = 8081;
    std::uint64_t seed = 0;
    bool json_out = false;
  } gw;
  auto* gws = app.add_subcommand("serve-gateway", "serve the organization-side gateway");
  add_common(gws, gw.json_out);
  bind.option(gws, "--key", gw.key, "key file (.owsk)", true);
  bind.option(gws, "--iin", gw.iin, "IIN file (.owsi)", true);
  bind.option(gws, "--encoder", gw.encoders, "encoder file(s)", true)->delimiter(',');
  bind.option(gws, "--cloud-url", gw.cloud_url, "upstream CMLS base URL", true)
      ->envname("OWSD_CLOUD_URL");
  bind.option(gws, "--port", gw.port, "listen port (0 = pick a free one)")->envname("OWSD_PORT");
  bind.option(gws, "--host", gw.host, "bind address");
  bind.option(gws, "--state", gw.state, "budget state JSON path")->envname("OWSD_STATE_PATH");
  bind.option(gws, "--limit", gw.limit, "key budget limit (0 = default 9000)");
  bind.option(gws, "--seed", gw.seed, "unused; accepted for config uniformity");
  gws->callback([&] {
    owsd::GatewayConfig gc;
    gc.cloud_url = gw.cloud_url;
    gc.budget_limit = gw.limit;
    if (!gw.state.empty()) gc.state_path = gw.state;
    owsd::GatewayServer server(load_encoders(gw.encoders), owsd::load_key(gw.key),
                               owsd::load_iin(gw.iin), gc);
    const int port = server.start(gw.host, gw.port);
    emit(gw.json_out,
         json{{"host", gw.host},
              {"port", port},
              {"key_id", server.budget().key_id()},
              {"submissions_used", server.budget().used()},
              {"submissions_limit", server.budget().limit()}},
         "gateway listening on " + gw.host + ":" + std::to_string(port) + " (budget " +
             std::to_string(server.budget().used()) + "/" +
             std::to_string(server.budget().limit()) + ")");
    std::cout.flush();
    server.wait();
  });

  bind.check_all_used();

  try {
    std::reverse(raw.begin(), raw.end());  // CLI11's vector parse expects reversed args
    app.parse(raw);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  if (app.get_subcommands().empty()) {
    std::cout << app.help();
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const owsd::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
