#include "resnest/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace resnest {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'S', 'P', 'L', 'T'};

template <typename T>
void put_raw(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  template <typename T>
  T read(const char* what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what), sizeof(T));
    return value;
  }

  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(origin_ + ": truncated while reading " + what + " at byte " +
                            std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }
  const std::string& origin() const { return origin_; }

 private:
  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

template <typename Scalar>
void write_tensor(std::string& out, const std::string& name, const Tensor<Scalar>& t) {
  put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.append(name);
  put_raw<std::uint8_t>(out, sizeof(Scalar) == 4 ? 0 : 1);
  put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
  for (Index d : t.shape()) put_raw<std::uint64_t>(out, static_cast<std::uint64_t>(d));
  out.append(reinterpret_cast<const char*>(t.data()), sizeof(Scalar) * std::size_t(t.size()));
}

template <typename Scalar>
Tensor<Scalar> read_values(Reader& in, Shape shape, const std::string& name) {
  Tensor<Scalar> t(std::move(shape));
  const std::size_t bytes = sizeof(Scalar) * std::size_t(t.size());
  std::memcpy(t.data(), in.take(bytes, ("values of '" + name + "'").c_str()), bytes);
  return t;
}

}  // namespace

std::string Checkpoint::serialize() const {
  std::string out(kMagic, 4);
  put_raw<std::uint32_t>(out, kVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    std::visit([&](const auto& t) { write_tensor(out, e.name, t); }, e.value);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes, const std::string& origin) {
  Reader in(bytes, origin);
  if (std::memcmp(in.take(4, "magic"), kMagic, 4) != 0) {
    throw CheckpointError(origin + ": not a checkpoint (bad magic)");
  }
  const auto version = in.read<std::uint32_t>("version");
  if (version != kVersion) {
    throw CheckpointError(origin + ": unsupported format version " + std::to_string(version));
  }
  const auto count = in.read<std::uint32_t>("tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.read<std::uint16_t>("name length");
    std::string name(in.take(len, "name"), len);
    const auto dtype = in.read<std::uint8_t>("dtype");
    const auto rank = in.read<std::uint8_t>("rank");
    if (rank < 1 || rank > 4) {
      throw CheckpointError(origin + ": tensor '" + name + "' has unsupported rank " +
                            std::to_string(rank));
    }
    Shape shape;
    for (int d = 0; d < rank; ++d) {
      const auto extent = in.read<std::uint64_t>("extent");
      if (extent == 0 || extent > (std::uint64_t{1} << 40)) {
        throw CheckpointError(origin + ": tensor '" + name + "' has invalid extent " +
                              std::to_string(extent));
      }
      shape.push_back(static_cast<Index>(extent));
    }
    if (ckpt.has(name)) throw CheckpointError(origin + ": duplicate tensor '" + name + "'");
    if (dtype == 0) {
      ckpt.entries_.push_back(Entry{name, read_values<float>(in, shape, name)});
    } else if (dtype == 1) {
      ckpt.entries_.push_back(Entry{name, read_values<double>(in, shape, name)});
    } else {
      throw CheckpointError(origin + ": tensor '" + name + "' has unknown dtype tag " +
                            std::to_string(dtype));
    }
  }
  if (!in.done()) {
    throw CheckpointError(origin + ": trailing bytes after tensor " + std::to_string(count));
  }
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize(buffer.str(), path);
}

}  // namespace resnest
