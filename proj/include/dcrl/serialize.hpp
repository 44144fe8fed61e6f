#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcrl::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ChecksumError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a_file(const std::string& path);
std::string hex64(std::uint64_t h);

/// Binary container of named dense arrays with an embedded string-metadata
/// section and a trailing checksum. Column-major payloads, fixed layout.
class ArrayFile {
 public:
  static constexpr std::uint32_t kSchemaVersion = 1;

  void put(const std::string& name, Eigen::MatrixXd m);
  void put_ints(const std::string& name, std::vector<int> v);
  void set_meta(const std::string& key, const std::string& value);

  bool has(const std::string& name) const;
  const Eigen::MatrixXd& mat(const std::string& name) const;
  const std::vector<int>& ints(const std::string& name) const;
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const;

  /// Names of matrix entries in insertion order.
  const std::vector<std::string>& mat_names() const { return mat_order_; }

  /// Atomic write (temp file + rename); returns the checksum written.
  std::uint64_t save(const std::string& path) const;
  static ArrayFile load(const std::string& path);

 private:
  std::map<std::string, Eigen::MatrixXd> mats_;
  std::vector<std::string> mat_order_;
  std::map<std::string, std::vector<int>> ints_;
  std::vector<std::string> int_order_;
  std::map<std::string, std::string> meta_;
};

}  // namespace dcrl::io
