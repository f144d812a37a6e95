#ifndef OWSD_BUDGET_HPP
#define OWSD_BUDGET_HPP

#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "owsd/errors.hpp"

namespace owsd {

using json = nlohmann::json;

inline constexpr std::size_t kDefaultAttackBound = 13500;  // pairs an attacker would need
inline constexpr std::size_t kDefaultIinCost = 4500;       // pairs IIN training consumes
inline constexpr std::size_t kDefaultBudgetLimit = kDefaultAttackBound - kDefaultIinCost;  // 9000

// Submission counter for one scrambling key. reserve/commit/release keep the
// committed count monotone while guaranteeing the limit is never crossed even
// with concurrent callers; a failed upstream call releases its reservation
// and consumes nothing.
class KeyBudget {
 public:
  KeyBudget() = default;

  explicit KeyBudget(std::string key_id, std::size_t limit = 0,
                     std::size_t attack_bound = kDefaultAttackBound,
                     std::size_t iin_cost = kDefaultIinCost)
      : key_id_(std::move(key_id)),
        limit_(limit != 0 ? limit : attack_bound - iin_cost),
        attack_bound_(attack_bound),
        iin_cost_(iin_cost) {
    if (attack_bound_ <= iin_cost_) {
      throw invalid_argument_error("key budget: attack_bound must exceed iin_cost");
    }
    if (limit_ == 0) throw invalid_argument_error("key budget: limit must be positive");
  }

  const std::string& key_id() const { return key_id_; }
  std::size_t limit() const { return limit_; }
  std::size_t attack_bound() const { return attack_bound_; }
  std::size_t iin_cost() const { return iin_cost_; }

  std::size_t used() const {
    std::lock_guard lock(mu_);
    return used_;
  }

  std::size_t remaining() const {
    std::lock_guard lock(mu_);
    return limit_ - used_ - inflight_;
  }

  void reserve(std::size_t n) {
    std::lock_guard lock(mu_);
    if (used_ + inflight_ + n > limit_) {
      throw budget_exhausted_error("key budget exhausted: " + std::to_string(used_ + inflight_) +
                                   " of " + std::to_string(limit_) +
                                   " submissions used on key " + key_id_);
    }
    inflight_ += n;
  }

  void commit(std::size_t n) {
    std::lock_guard lock(mu_);
    if (n > inflight_) throw invalid_argument_error("key budget: commit without reserve");
    inflight_ -= n;
    used_ += n;
    if (!persist_path_.empty()) persist_locked();
  }

  void release(std::size_t n) {
    std::lock_guard lock(mu_);
    if (n > inflight_) throw invalid_argument_error("key budget: release without reserve");
    inflight_ -= n;
  }

  void reset(std::string new_key_id) {
    std::lock_guard lock(mu_);
    key_id_ = std::move(new_key_id);
    used_ = 0;
    inflight_ = 0;
    if (!persist_path_.empty()) persist_locked();
  }

  void set_persist_path(std::filesystem::path path) {
    std::lock_guard lock(mu_);
    persist_path_ = std::move(path);
  }

  nlohmann::json state() const {
    std::lock_guard lock(mu_);
    return {{"key_id", key_id_}, {"submissions_used", used_}};
  }

  // Adopts a persisted counter if it belongs to the same key.
  void restore_state(const nlohmann::json& s) {
    std::lock_guard lock(mu_);
    if (s.value("key_id", "") != key_id_) return;
    used_ = s.value("submissions_used", std::size_t{0});
    if (used_ > limit_) {
      throw invalid_argument_error("key budget state exceeds limit");
    }
  }

  static nlohmann::json load_state(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw artifact_missing_error("no such budget state: " + path.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw io_error("bad budget state file: " + std::string(e.what()));
    }
    return j;
  }

 private:
  void persist_locked() const {
    const std::filesystem::path tmp = persist_path_.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw io_error("cannot write budget state " + tmp.string());
      os << nlohmann::json{{"key_id", key_id_}, {"submissions_used", used_}}.dump() << "\n";
    }
    std::filesystem::rename(tmp, persist_path_);
  }

  mutable std::mutex mu_;
  std::string key_id_;
  std::size_t limit_ = kDefaultBudgetLimit;
  std::size_t attack_bound_ = kDefaultAttackBound;
  std::size_t iin_cost_ = kDefaultIinCost;
  std::size_t used_ = 0;
  std::size_t inflight_ = 0;
  std::filesystem::path persist_path_;
};

}  // namespace owsd

#endif  // OWSD_BUDGET_HPP
