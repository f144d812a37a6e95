#ifndef OWSD_WIRE_HPP
#define OWSD_WIRE_HPP

#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "owsd/base64.hpp"
#include "owsd/errors.hpp"
#include "owsd/tensor.hpp"

namespace owsd {

using json = nlohmann::json;

// Wire payloads carry pixels as base64 of float32 little-endian, row-major.
static_assert(sizeof(float) == 4, "wire format requires 32-bit float");

inline Tensor quantize_f32(const Tensor& t) {
  Tensor out(t.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    out.data[i] = static_cast<double>(static_cast<float>(t.data[i]));
  }
  return out;
}

inline std::string pixels_to_b64(const Tensor& image) {
  std::vector<std::uint8_t> bytes(image.numel() * 4);
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const float f = static_cast<float>(image.data[i]);
    std::memcpy(bytes.data() + i * 4, &f, 4);
  }
  return base64_encode(bytes);
}

inline Tensor pixels_from_b64(const std::string& b64, std::size_t h, std::size_t w,
                              std::size_t c) {
  const std::vector<std::uint8_t> bytes = base64_decode(b64);
  if (bytes.size() != h * w * c * 4) {
    throw shape_error("payload holds " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(h * w * c * 4) + " for " + std::to_string(h) + "x" +
                      std::to_string(w) + "x" + std::to_string(c) + " float32");
  }
  Tensor img({h, w, c});
  for (std::size_t i = 0; i < img.numel(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + i * 4, 4);
    img.data[i] = static_cast<double>(f);
  }
  return img;
}

struct PredictRequest {
  std::string image_b64;
  std::size_t height = 0, width = 0, channels = 0;

  nlohmann::json to_json() const {
    return {{"image_b64", image_b64}, {"height", height}, {"width", width},
            {"channels", channels}};
  }
  static PredictRequest from_json(const nlohmann::json& j) {
    PredictRequest r;
    r.image_b64 = j.at("image_b64").get<std::string>();
    r.height = j.at("height").get<std::size_t>();
    r.width = j.at("width").get<std::size_t>();
    r.channels = j.at("channels").get<std::size_t>();
    return r;
  }
};

struct PredictResponse {
  std::string model_id;
  std::vector<double> probabilities;
  std::vector<std::string> labels;

  nlohmann::json to_json() const {
    return {{"model_id", model_id}, {"probabilities", probabilities}, {"labels", labels}};
  }
  static PredictResponse from_json(const nlohmann::json& j) {
    PredictResponse r;
    r.model_id = j.at("model_id").get<std::string>();
    r.probabilities = j.at("probabilities").get<std::vector<double>>();
    r.labels = j.at("labels").get<std::vector<std::string>>();
    return r;
  }
};

inline PredictRequest make_predict_request(const Tensor& image) {
  if (image.rank() != 3) throw shape_error("predict request needs an [H,W,C] image");
  PredictRequest r;
  r.height = image.shape[0];
  r.width = image.shape[1];
  r.channels = image.shape[2];
  r.image_b64 = pixels_to_b64(image);
  return r;
}

}  // namespace owsd

#endif  // OWSD_WIRE_HPP
