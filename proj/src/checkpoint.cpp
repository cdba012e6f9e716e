#include "stsn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "stsn/binio.hpp"

namespace stsn {

namespace {

constexpr std::uint16_t kVersion = 1;

void append_tensor(std::vector<unsigned char>& buf, const std::string& name, const Tensor& t) {
  require(name.size() < 65536, "tensor name too long");
  append_u16(buf, static_cast<std::uint16_t>(name.size()));
  for (char c : name) buf.push_back(static_cast<unsigned char>(c));
  append_u16(buf, static_cast<std::uint16_t>(t.dims().size()));
  for (int d : t.dims()) append_u32(buf, static_cast<std::uint32_t>(d));
  for (real v : t.values()) append_f64(buf, v);
}

struct Cursor {
  const unsigned char* p;
  std::size_t left;

  void need(std::size_t n) {
    if (left < n) throw std::runtime_error("checkpoint truncated");
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    p += 2;
    left -= 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    p += 4;
    left -= 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
    p += 8;
    left -= 8;
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     ModelParams& params) {
  std::vector<unsigned char> payload;
  for (int v : {config.feature_channels, config.backbone_depth, config.head_stride, config.K,
                config.temporal_stride, config.num_classes, config.image_h, config.image_w}) {
    append_u32(payload, static_cast<std::uint32_t>(v));
  }

  std::uint32_t count = 0;
  params.for_each_layer([&](const std::string&, ConvLayer&) { count += 2; });
  append_u32(payload, count);
  params.for_each_layer([&](const std::string& name, ConvLayer& layer) {
    append_tensor(payload, name + ".weight", layer.params.weight);
    append_tensor(payload, name + ".bias", layer.params.bias);
  });

  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot open checkpoint for writing: " + path.string());
  os.write("STCK", 4);
  put_u16(os, kVersion);
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size()));
  put_u32(os, crc32(payload));
  os.flush();
  require(os.good(), "checkpoint write failed: " + path.string());
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is.good()) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 10 || std::memcmp(bytes.data(), "STCK", 4) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kVersion) {
    throw CheckpointError("unknown checkpoint version " + std::to_string(version));
  }

  const std::size_t payload_len = bytes.size() - 6 - 4;
  std::span<const unsigned char> payload(bytes.data() + 6, payload_len);
  std::uint32_t want = 0;
  for (int i = 3; i >= 0; --i) want = (want << 8) | bytes[bytes.size() - 4 + i];
  if (crc32(payload) != want) {
    throw std::runtime_error("checkpoint payload checksum mismatch: " + path.string());
  }

  Cursor cur{payload.data(), payload.size()};
  ModelConfig config;
  config.feature_channels = static_cast<int>(cur.u32());
  config.backbone_depth = static_cast<int>(cur.u32());
  config.head_stride = static_cast<int>(cur.u32());
  config.K = static_cast<int>(cur.u32());
  config.temporal_stride = static_cast<int>(cur.u32());
  config.num_classes = static_cast<int>(cur.u32());
  config.image_h = static_cast<int>(cur.u32());
  config.image_w = static_cast<int>(cur.u32());
  try {
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid checkpoint config: ") + e.what());
  }

  std::map<std::string, Tensor> records;
  const std::uint32_t count = cur.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = cur.u16();
    std::string name = cur.str(name_len);
    const std::uint16_t rank = cur.u16();
    if (rank == 0 || rank > 8) throw CheckpointError("bad tensor rank in checkpoint");
    std::vector<int> dims(rank);
    std::int64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      dims[d] = static_cast<int>(cur.u32());
      if (dims[d] <= 0) throw CheckpointError("bad tensor extent in checkpoint");
      n *= dims[d];
    }
    std::vector<real> values(static_cast<std::size_t>(n));
    for (real& v : values) v = cur.f64();
    records.emplace(std::move(name), Tensor(std::move(dims), std::move(values)));
  }
  if (cur.left != 0) throw CheckpointError("trailing bytes in checkpoint payload");

  ModelParams params = make_model(config);
  std::size_t consumed = 0;
  params.for_each_layer([&](const std::string& name, ConvLayer& layer) {
    for (const char* kind : {".weight", ".bias"}) {
      auto it = records.find(name + kind);
      if (it == records.end()) throw CheckpointError("checkpoint misses tensor " + name + kind);
      Tensor& expect = std::string(kind) == ".weight" ? layer.params.weight : layer.params.bias;
      if (it->second.dims() != expect.dims()) {
        throw CheckpointError("checkpoint tensor dims mismatch for " + name + kind);
      }
      expect = it->second;
      ++consumed;
    }
  });
  if (consumed != records.size()) throw CheckpointError("checkpoint holds unexpected tensors");
  return {config, std::move(params)};
}

}  // namespace stsn
