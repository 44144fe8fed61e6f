#include "dcrl/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dcrl::io {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'R', 'L', 'B', 'I', 'N', '1'};

void append(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void append_pod(std::string& buf, T v) {
  append(buf, &v, sizeof(T));
}

void append_str(std::string& buf, const std::string& s) {
  append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
  append(buf, s.data(), s.size());
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void read(void* p, std::size_t n) {
    if (pos + n > buf.size()) throw IoError("truncated array file");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (pos + n > buf.size()) throw IoError("truncated array file");
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  return fnv1a(buf.data(), buf.size());
}

std::string hex64(std::uint64_t h) {
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

void ArrayFile::put(const std::string& name, Eigen::MatrixXd m) {
  if (mats_.count(name) == 0) mat_order_.push_back(name);
  mats_[name] = std::move(m);
}

void ArrayFile::put_ints(const std::string& name, std::vector<int> v) {
  if (ints_.count(name) == 0) int_order_.push_back(name);
  ints_[name] = std::move(v);
}

void ArrayFile::set_meta(const std::string& key, const std::string& value) {
  meta_[key] = value;
}

bool ArrayFile::has(const std::string& name) const {
  return mats_.count(name) > 0 || ints_.count(name) > 0;
}

const Eigen::MatrixXd& ArrayFile::mat(const std::string& name) const {
  auto it = mats_.find(name);
  if (it == mats_.end()) throw IoError("missing array entry: " + name);
  return it->second;
}

const std::vector<int>& ArrayFile::ints(const std::string& name) const {
  auto it = ints_.find(name);
  if (it == ints_.end()) throw IoError("missing int entry: " + name);
  return it->second;
}

const std::string& ArrayFile::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw IoError("missing metadata key: " + key);
  return it->second;
}

bool ArrayFile::has_meta(const std::string& key) const {
  return meta_.count(key) > 0;
}

std::uint64_t ArrayFile::save(const std::string& path) const {
  std::string buf;
  append(buf, kMagic, sizeof(kMagic));
  append_pod<std::uint32_t>(buf, kSchemaVersion);

  append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(meta_.size()));
  for (const auto& [k, v] : meta_) {
    append_str(buf, k);
    append_str(buf, v);
  }

  append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(mat_order_.size()));
  for (const auto& name : mat_order_) {
    const Eigen::MatrixXd& m = mats_.at(name);
    append_str(buf, name);
    append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(m.rows()));
    append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(m.cols()));
    append(buf, m.data(), sizeof(double) * m.size());
  }

  append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(int_order_.size()));
  for (const auto& name : int_order_) {
    const std::vector<int>& v = ints_.at(name);
    append_str(buf, name);
    append_pod<std::uint32_t>(buf, static_cast<std::uint32_t>(v.size()));
    append(buf, v.data(), sizeof(int) * v.size());
  }

  const std::uint64_t checksum = fnv1a(buf.data(), buf.size());
  append_pod<std::uint64_t>(buf, checksum);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename " + tmp + " -> " + path);
  return checksum;
}

ArrayFile ArrayFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < sizeof(kMagic) + 12) throw IoError("truncated array file");

  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  if (fnv1a(buf.data(), body) != stored)
    throw ChecksumError("checksum mismatch in " + path);

  Reader r{buf};
  char magic[8];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("bad magic in " + path);
  const auto version = r.pod<std::uint32_t>();
  if (version != kSchemaVersion)
    throw VersionError("schema version " + std::to_string(version) +
                       " unsupported (expected " +
                       std::to_string(kSchemaVersion) + ") in " + path);

  ArrayFile a;
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    a.meta_[k] = r.str();
  }
  const auto n_mats = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_mats; ++i) {
    std::string name = r.str();
    const auto rows = r.pod<std::uint32_t>();
    const auto cols = r.pod<std::uint32_t>();
    Eigen::MatrixXd m(rows, cols);
    r.read(m.data(), sizeof(double) * m.size());
    a.put(name, std::move(m));
  }
  const auto n_ints = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_ints; ++i) {
    std::string name = r.str();
    const auto cnt = r.pod<std::uint32_t>();
    std::vector<int> v(cnt);
    r.read(v.data(), sizeof(int) * v.size());
    a.put_ints(name, std::move(v));
  }
  return a;
}

}  // namespace dcrl::io
