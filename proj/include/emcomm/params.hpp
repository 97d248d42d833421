#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "emcomm/autodiff.hpp"
#include "emcomm/random.hpp"
#include "emcomm/tensor.hpp"

namespace emcomm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and feature-file codecs assume a little-endian host");

/// Named, ordered collection of trainable tensors.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    if (params_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    value.set_requires_grad(true);
    return params_.emplace(name, std::move(value)).first->second;
  }

  /// Registers a tensor drawn uniformly from [-limit, limit].
  Tensor& add_uniform(const std::string& name, Shape shape, double limit, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = uniform(rng, -limit, limit);
    return add(name, std::move(t));
  }

  /// Glorot-uniform initialization for a [fan_in x fan_out] matrix.
  Tensor& add_glorot(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return add_uniform(name, Shape{fan_in, fan_out}, limit, rng);
  }

  Tensor& add_constant(const std::string& name, Shape shape, double fill) {
    return add(name, Tensor(std::move(shape), fill));
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw LookupError("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  /// (name, shape) listing in storage order.
  std::vector<std::pair<std::string, Shape>> manifest() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (const auto& [name, t] : params_) out.emplace_back(name, t.shape);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    auto ia = a.params_.begin();
    auto ib = b.params_.begin();
    for (; ia != a.params_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.shape != ib->second.shape ||
          ia->second.data != ib->second.data) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, Tensor> params_;
};

/// Parameters bound as leaves of one tape, looked up by name.
class Bound {
 public:
  /// `trainable` leaves accumulate into the store's grads; otherwise they
  /// are recorded as constants.
  Bound(ad::Tape& tape, ParamStore& store, bool trainable) : tape_(&tape) {
    for (auto& [name, t] : store) {
      vars_.emplace(name, trainable ? tape.param(t) : tape.constant(Tensor(t.shape, t.data)));
    }
  }

  /// Read-only binding: every parameter becomes a constant.
  Bound(ad::Tape& tape, const ParamStore& store) : tape_(&tape) {
    for (const auto& [name, t] : store) vars_.emplace(name, tape.constant(Tensor(t.shape, t.data)));
  }

  ad::Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw LookupError("unbound parameter '" + name + "'");
    return it->second;
  }

  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

// ---------------------------------------------------------------------------
// Checkpoint codec.
//
// Layout (little-endian):
//   "EMCK" | version u32 | metadata_len u32 | metadata (UTF-8 "key=value\n")
//   then until EOF, per parameter:
//   name_len u32 | name | rank u32 | dims u32 x rank | f64 x prod(dims)

inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  double f64() {
    double v;
    std::memcpy(&v, take(8), 8);
    return v;
  }
  float f32() {
    float v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) +
                        " (need " + std::to_string(n) + " bytes, " +
                        std::to_string(bytes_.size() - pos_) + " remain)");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to '" + path + "'");
}

}  // namespace detail

inline std::string encode_checkpoint(const ParamStore& store, const Metadata& meta = {}) {
  std::string out = "EMCK";
  detail::put_u32(out, kCheckpointVersion);
  std::string text;
  for (const auto& [k, v] : meta) text += k + "=" + v + "\n";
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto& [name, t] : store) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  return out;
}

struct Checkpoint {
  ParamStore params;
  Metadata metadata;
};

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.str(4) != "EMCK") r.fail("bad magic", 0);
  const std::size_t vpos = r.offset();
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(v), vpos);
  }
  Checkpoint ck;
  const std::uint32_t meta_len = r.u32();
  const std::size_t meta_at = r.offset();
  const std::string text = r.str(meta_len);
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(start, nl - start);
    const auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed metadata line '" + line + "'", meta_at + start);
    ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
    start = nl + 1;
  }
  while (!r.at_end()) {
    const std::size_t at = r.offset();
    const std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank), at);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    const std::size_t n = shape_size(shape);
    const char* raw = r.take(n * sizeof(double));
    std::vector<double> data(n);
    std::memcpy(data.data(), raw, n * sizeof(double));
    if (ck.params.contains(name)) r.fail("duplicate parameter '" + name + "'", at);
    ck.params.add(name, Tensor(shape, std::move(data)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const ParamStore& store, const Metadata& meta = {}) {
  detail::write_file(path, encode_checkpoint(store, meta));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file(path), path);
}

}  // namespace emcomm
