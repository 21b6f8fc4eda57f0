#ifndef RESNEST_CHECKPOINT_HPP
#define RESNEST_CHECKPOINT_HPP

#include "resnest/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace resnest {

/// Raised for unreadable, truncated or inconsistent checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named tensors in file order.
///
/// File layout: "SPLT", u32 version, u32 count; per tensor u16 name length,
/// UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank, rank x u64 extents, raw
/// values. Everything is little-endian.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  using Value = std::variant<Tensor<float>, Tensor<double>>;
  struct Entry {
    std::string name;
    Value value;
  };

  template <typename Scalar>
  void put(const std::string& name, const Tensor<Scalar>& t) {
    require(!name.empty() && name.size() <= 0xffff, "checkpoint names must be 1..65535 bytes");
    for (auto& e : entries_) {
      if (e.name == name) {
        e.value = t;
        return;
      }
    }
    entries_.push_back(Entry{name, t});
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  /// Tensor stored under `name`; the stored dtype must equal Scalar.
  template <typename Scalar>
  const Tensor<Scalar>& get(const std::string& name) const {
    const Entry* e = find(name);
    if (e == nullptr) throw CheckpointError("checkpoint has no tensor '" + name + "'");
    const auto* t = std::get_if<Tensor<Scalar>>(&e->value);
    if (t == nullptr) {
      throw CheckpointError("tensor '" + name + "' is stored as " + dtype_name(e->value) +
                            ", requested " + (sizeof(Scalar) == 4 ? "f32" : "f64"));
    }
    return *t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes, const std::string& origin = "<memory>");

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  static std::string dtype_name(const Value& v) {
    return std::holds_alternative<Tensor<float>>(v) ? "f32" : "f64";
  }

 private:
  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  std::vector<Entry> entries_;
};

/// Copies every parameter and buffer of a model (anything with
/// for_each_parameter / for_each_buffer) into the checkpoint.
template <typename Model>
void store_model(Checkpoint& ckpt, Model& model) {
  model.for_each_parameter([&](auto& p) { ckpt.put(p.name, p.value); });
  model.for_each_buffer([&](const std::string& name, const auto& t) { ckpt.put(name, t); });
}

/// Overwrites the model's parameters and buffers; every one must be present
/// with a matching shape and dtype.
template <typename Model>
void restore_model(const Checkpoint& ckpt, Model& model) {
  auto assign = [&](const std::string& name, auto& dst) {
    using Scalar = std::decay_t<decltype(dst[0])>;
    const auto& src = ckpt.template get<Scalar>(name);
    if (src.shape() != dst.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + to_string(src.shape()) +
                            ", model expects " + to_string(dst.shape()));
    }
    dst = src;
  };
  model.for_each_parameter([&](auto& p) { assign(p.name, p.value); });
  model.for_each_buffer([&](const std::string& name, auto& t) { assign(name, t); });
}

}  // namespace resnest

#endif  // RESNEST_CHECKPOINT_HPP
