#ifndef OWSD_ERRORS_HPP
#define OWSD_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace owsd {

// Base class for everything thrown by this library. The CLI maps these to
// exit code 2; anything else escaping a handler is a bug.
class error : public std::runtime_error {
 public:
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

class shape_error : public error {
 public:
  explicit shape_error(const std::string& msg) : error(msg) {}
};

class nonfinite_error : public error {
 public:
  explicit nonfinite_error(const std::string& msg) : error(msg) {}
};

class missing_forward_error : public error {
 public:
  explicit missing_forward_error(const std::string& msg) : error(msg) {}
};

class missing_gradient_error : public error {
 public:
  explicit missing_gradient_error(const std::string& msg) : error(msg) {}
};

class invalid_architecture_error : public error {
 public:
  explicit invalid_architecture_error(const std::string& msg) : error(msg) {}
};

class invalid_argument_error : public error {
 public:
  explicit invalid_argument_error(const std::string& msg) : error(msg) {}
};

class invalid_distribution_error : public error {
 public:
  explicit invalid_distribution_error(const std::string& msg) : error(msg) {}
};

class dataset_error : public error {
 public:
  explicit dataset_error(const std::string& msg) : error(msg) {}
};

class degenerate_labels_error : public error {
 public:
  explicit degenerate_labels_error(const std::string& msg) : error(msg) {}
};

class io_error : public error {
 public:
  explicit io_error(const std::string& msg) : error(msg) {}
};

class artifact_missing_error : public error {
 public:
  explicit artifact_missing_error(const std::string& msg) : error(msg) {}
};

class budget_exhausted_error : public error {
 public:
  explicit budget_exhausted_error(const std::string& msg) : error(msg) {}
};

class stale_iin_error : public error {
 public:
  explicit stale_iin_error(const std::string& msg) : error(msg) {}
};

class insufficient_pairs_error : public error {
 public:
  explicit insufficient_pairs_error(const std::string& msg) : error(msg) {}
};

class cloud_unreachable_error : public error {
 public:
  explicit cloud_unreachable_error(const std::string& msg) : error(msg) {}
};

class port_in_use_error : public error {
 public:
  explicit port_in_use_error(const std::string& msg) : error(msg) {}
};

}  // namespace owsd

#endif  // OWSD_ERRORS_HPP
