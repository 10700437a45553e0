#include "twofold/nn/checkpoint.hpp"

#include "twofold/error.hpp"
#include "twofold/hash.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace twofold::nn {

namespace {

constexpr std::string_view kMagic = "TWFDCKPT";

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() { return std::string(take(u32())); }
  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

void write_layer_params(Writer& w, const DenseLayer<double>& l) {
  for (Index k = 0; k < l.weights.size(); ++k) w.f64(l.weights.data()[k]);
  for (Index k = 0; k < l.bias.size(); ++k) w.f64(l.bias[k]);
}

// Walks the whole file; `on_layer` sees every layer as it is decoded.
template <typename OnLayer>
Checkpoint parse(std::string_view bytes, OnLayer&& on_layer) {
  Reader r(bytes);
  if (r.take(kMagic.size()) != kMagic) throw DataError("not a twofold checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.network = Network(static_cast<Index>(r.u32()));
  const std::uint32_t meta_count = r.u32();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string k = r.str();
    ck.metadata[k] = r.str();
  }
  const std::uint32_t node_count = r.u32();
  for (std::uint32_t i = 0; i < node_count; ++i) {
    Node<double> n;
    n.name = r.str();
    const std::uint8_t role = r.u8();
    if (role > static_cast<std::uint8_t>(NodeRole::proxy_head)) throw DataError("bad node role");
    n.role = static_cast<NodeRole>(role);
    const std::uint32_t inputs = r.u32();
    for (std::uint32_t k = 0; k < inputs; ++k) n.inputs.push_back(r.str());
    const std::uint32_t layers = r.u32();
    for (std::uint32_t li = 0; li < layers; ++li) {
      DenseLayer<double> l;
      const auto out = static_cast<Index>(r.u32());
      const auto in = static_cast<Index>(r.u32());
      const std::uint8_t act = r.u8();
      if (act > static_cast<std::uint8_t>(Activation::softmax)) throw DataError("bad activation");
      l.activation = static_cast<Activation>(act);
      l.trainable = r.u8() != 0;
      const std::size_t offset = r.pos();
      l.weights.resize(out, in);
      l.bias.resize(out);
      for (Index k = 0; k < l.weights.size(); ++k) l.weights.data()[k] = r.f64();
      for (Index k = 0; k < out; ++k) l.bias[k] = r.f64();
      on_layer(ParameterRange{n.name, li, offset, r.pos() - offset, l.trainable});
      n.layers.push_back(std::move(l));
    }
    ck.network.add_node(std::move(n));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint");
  return ck;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

std::string serialize_checkpoint(const Network& net, const Metadata& metadata) {
  Writer w;
  w.raw(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(net.input_dim()));
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(net.node_count()));
  for (const auto& n : net.nodes()) {
    w.str(n.name);
    w.u8(static_cast<std::uint8_t>(n.role));
    w.u32(static_cast<std::uint32_t>(n.inputs.size()));
    for (const auto& in : n.inputs) w.str(in);
    w.u32(static_cast<std::uint32_t>(n.layers.size()));
    for (const auto& l : n.layers) {
      w.u32(static_cast<std::uint32_t>(l.out_dim()));
      w.u32(static_cast<std::uint32_t>(l.in_dim()));
      w.u8(static_cast<std::uint8_t>(l.activation));
      w.u8(l.trainable ? 1 : 0);
      write_layer_params(w, l);
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  return parse(bytes, [](const ParameterRange&) {});
}

std::vector<ParameterRange> parameter_ranges(std::string_view bytes) {
  std::vector<ParameterRange> out;
  parse(bytes, [&](const ParameterRange& r) { out.push_back(r); });
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     const Metadata& metadata) {
  const std::string bytes = serialize_checkpoint(net, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write on " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

std::string parameter_bytes(const Network& net, const std::vector<std::string>& nodes) {
  Writer w;
  for (const auto& name : nodes)
    for (const auto& l : net.node(name).layers) write_layer_params(w, l);
  return w.take();
}

std::string parameter_bytes(std::string_view checkpoint_bytes,
                            const std::vector<std::string>& nodes) {
  const auto ranges = parameter_ranges(checkpoint_bytes);
  std::string out;
  for (const auto& name : nodes) {
    bool found = false;
    for (const auto& r : ranges)
      if (r.node == name) {
        out.append(checkpoint_bytes.substr(r.offset, r.length));
        found = true;
      }
    if (!found) throw UnknownName("checkpoint has no node '" + name + "'");
  }
  return out;
}

std::string checkpoint_id(std::string_view checkpoint_bytes) {
  return sha256_hex(checkpoint_bytes).substr(0, 16);
}

}  // namespace twofold::nn
