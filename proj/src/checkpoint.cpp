#include "mlfn/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mlfn::checkpoint {
namespace {

constexpr char kMagic[4] = {'M', 'L', 'F', 'N'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw IoError("checkpoint " + source_ + " truncated at byte " + std::to_string(pos_));
  }

  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

const Record* Checkpoint::find(const std::string& name) const {
  for (const Record& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

void write(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, ckpt.version);
  put_le<std::uint64_t>(out, ckpt.digest);
  for (const Record& r : ckpt.records) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensor.rank()));
    for (std::size_t e : r.tensor.shape()) put_le<std::uint64_t>(out, e);
    for (float v : r.tensor.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

Checkpoint read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  Reader in(ss.str(), path.string());
  if (in.take(4) != std::string(kMagic, 4)) throw IoError(path.string() + " is not an MLFN checkpoint");
  Checkpoint ckpt;
  ckpt.version = in.le<std::uint32_t>();
  if (ckpt.version != kFormatVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  ckpt.digest = in.le<std::uint64_t>();
  while (!in.done()) {
    Record r;
    r.name = in.take(in.le<std::uint32_t>());
    const std::uint32_t rank = in.le<std::uint32_t>();
    if (rank > kMaxRank) throw IoError("tensor '" + r.name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(in.le<std::uint64_t>());
    std::vector<float> data(shape_size(shape));
    for (float& v : data) v = std::bit_cast<float>(in.le<std::uint32_t>());
    r.tensor = Tensor<float>(std::move(shape), std::move(data));
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

template <Real T>
Checkpoint capture(const model::MlfnModel<T>& model) {
  Checkpoint ckpt;
  ckpt.digest = model::config_digest(model.config());
  for (const auto& p : model.parameters())
    ckpt.records.push_back({p.name, p.var.value().template cast<float>()});
  for (const auto& b : model.buffers())
    ckpt.records.push_back({b.name, b.tensor().template cast<float>()});
  return ckpt;
}

template <Real T>
void restore(model::MlfnModel<T>& model, const Checkpoint& ckpt) {
  const std::uint64_t expected = model::config_digest(model.config());
  if (ckpt.digest != expected) {
    std::ostringstream msg;
    msg << "checkpoint config digest " << std::hex << ckpt.digest << " does not match model config "
        << expected;
    throw ContractError(msg.str());
  }
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<float>& {
    const Record* r = ckpt.find(name);
    if (!r) throw ContractError("checkpoint lacks tensor '" + name + "'");
    if (r->tensor.shape() != shape)
      throw ContractError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(r->tensor.shape()) + ", expected " + shape_str(shape));
    return r->tensor;
  };
  for (const auto& p : model.parameters()) {
    auto var = p.var;
    var.mutable_value() = fetch(p.name, p.var.shape()).template cast<T>();
  }
  for (const auto& b : model.buffers()) b.tensor() = fetch(b.name, b.tensor().shape()).template cast<T>();
}

template Checkpoint capture<float>(const model::MlfnModel<float>&);
template Checkpoint capture<double>(const model::MlfnModel<double>&);
template void restore<float>(model::MlfnModel<float>&, const Checkpoint&);
template void restore<double>(model::MlfnModel<double>&, const Checkpoint&);

}  // namespace mlfn::checkpoint
