#ifndef OWSD_HTTP_GATEWAY_HPP
#define OWSD_HTTP_GATEWAY_HPP

#include <string>
#include <thread>
#include <vector>

#include "owsd/http_cloud.hpp"
#include "owsd/iin.hpp"
#include "owsd/scrambler.hpp"

// httplib pulls in <resolv.h>, whose _res macro mangles Eigen parameter
// names; Eigen must already be included by the headers above.
#include <httplib.h>

namespace owsd {

struct GatewayConfig {
  std::string cloud_url;
  std::size_t budget_limit = 0;  // 0 = default (attack bound - IIN cost)
  std::filesystem::path state_path;  // budget persistence; empty = in-memory only
};

// Organization-side service: plaintext comes in, only scrambled pixels go
// out. Encode and scramble happen in-process; the upstream sees exactly
// serialize(scramble(key, encode(image))) and nothing else.
class GatewayServer {
 public:
  GatewayServer(std::vector<EncoderModel> encoders, ScramblingKey key, IINModel iin,
                GatewayConfig config)
      : encoders_(std::move(encoders)),
        key_(std::move(key)),
        iin_(std::move(iin)),
        config_(std::move(config)),
        budget_(key_.key_id, config_.budget_limit),
        upstream_(config_.cloud_url) {
    if (encoders_.empty()) throw invalid_argument_error("gateway needs at least one encoder");
    for (const auto& enc : encoders_) {
      if (enc.embedding_dim() != key_.embedding_dim()) {
        throw shape_error("gateway: encoder embedding dim mismatch");
      }
    }
    if (iin_.key_id != key_.key_id) {
      throw stale_iin_error("gateway: IIN bound to key " + iin_.key_id + ", serving key " +
                            key_.key_id);
    }
    if (!config_.state_path.empty()) {
      if (std::filesystem::exists(config_.state_path)) {
        budget_.restore_state(KeyBudget::load_state(config_.state_path));
      }
      budget_.set_persist_path(config_.state_path);
    }
    upstream_.set_connection_timeout(5, 0);
    upstream_.set_read_timeout(30, 0);
    auto health = upstream_.Get("/v1/health");
    if (!health || health->status != 200) {
      throw cloud_unreachable_error("gateway startup: no healthy cloud at " + config_.cloud_url);
    }

    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      detail::json_reply(res, 200,
                         json{{"status", "ok"},
                              {"key_id", key_.key_id},
                              {"iin_id", iin_.iin_id},
                              {"submissions_used", budget_.used()},
                              {"submissions_limit", budget_.limit()}});
    });
    server_.Post("/v1/classify", [this](const httplib::Request& req, httplib::Response& res) {
      handle_classify(req, res);
    });
  }

  int start(const std::string& host = "127.0.0.1", int port = 0) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw port_in_use_error("gateway: no free port on " + host);
    } else {
      if (!server_.bind_to_port(host, port)) {
        throw port_in_use_error("gateway: cannot bind " + host + ":" + std::to_string(port));
      }
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  void wait() {
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  KeyBudget& budget() { return budget_; }

  ~GatewayServer() { stop(); }

 private:
  void handle_classify(const httplib::Request& req, httplib::Response& res) {
    PredictRequest preq;
    try {
      preq = PredictRequest::from_json(json::parse(req.body));
    } catch (const std::exception& e) {
      detail::error_reply(res, 400, "bad_request", e.what());
      return;
    }
    Tensor image;
    try {
      image = pixels_from_b64(preq.image_b64, preq.height, preq.width, preq.channels);
    } catch (const std::exception& e) {
      detail::error_reply(res, 422, "shape_mismatch", e.what());
      return;
    }

    try {
      budget_.reserve(encoders_.size());
    } catch (const budget_exhausted_error& e) {
      detail::error_reply(res, 429, "key_budget_exhausted", e.what());
      return;
    }

    std::size_t reserved = encoders_.size();
    std::vector<std::vector<double>> vectors;
    try {
      for (const auto& enc : encoders_) {
        ScrambledImage scrambled = scramble(key_, enc.encode(image));
        PredictRequest up = make_predict_request(scrambled.pixels);
        auto ack = upstream_.Post("/v1/predict", up.to_json().dump(), "application/json");
        if (!ack || ack->status != 200) {
          budget_.release(reserved);
          detail::error_reply(res, 502, "cloud_unreachable",
                              ack ? "upstream status " + std::to_string(ack->status)
                                  : "upstream did not respond");
          return;
        }
        budget_.commit(1);
        --reserved;
        PredictResponse pres = PredictResponse::from_json(json::parse(ack->body));
        vectors.push_back(std::move(pres.probabilities));
      }
    } catch (const std::exception& e) {
      budget_.release(reserved);
      detail::error_reply(res, 502, "cloud_unreachable", e.what());
      return;
    }

    try {
      std::vector<double> probs = iin_.predict(encoders_[0].encode(image), vectors);
      std::size_t best = 0;
      for (std::size_t j = 1; j < probs.size(); ++j) {
        if (probs[j] > probs[best]) best = j;
      }
      detail::json_reply(res, 200,
                         json{{"label", iin_.label_names[best]},
                              {"probabilities", probs},
                              {"labels", iin_.label_names},
                              {"key_id", key_.key_id},
                              {"submissions_used", budget_.used()},
                              {"submissions_limit", budget_.limit()}});
    } catch (const std::exception& e) {
      detail::error_reply(res, 422, "shape_mismatch", e.what());
    }
  }

  std::vector<EncoderModel> encoders_;
  ScramblingKey key_;
  IINModel iin_;
  GatewayConfig config_;
  KeyBudget budget_;
  httplib::Client upstream_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace owsd

#endif  // OWSD_HTTP_GATEWAY_HPP
