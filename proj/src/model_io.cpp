#include "dfq/model_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "binary.hpp"
#include "dfq/error.hpp"

namespace dfq {

namespace binary {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to " + path + " failed");
}

}  // namespace binary

std::vector<std::uint8_t> encode_model(const SegModel& model) {
  binary::Writer w;
  w.bytes(kModelMagic, 4);
  w.u32(kModelVersion);
  const ModelConfig& c = model.config;
  for (auto v : {c.image_size, c.patch_size, c.embed_dim, c.num_layers, c.num_heads, c.mlp_ratio,
                 c.num_classes, c.channels})
    w.u32(v);
  for (const Tensor* t : model.parameters())
    for (double v : t->data()) w.f64(v);
  return w.take();
}

SegModel decode_model(const std::vector<std::uint8_t>& bytes, std::size_t* consumed) {
  binary::Reader r(bytes, "model file");
  if (r.tag(4) != std::string(kModelMagic, 4)) r.fail("bad magic (expected DFQM)", 0);
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) r.fail("unsupported version " + std::to_string(version), 4);
  ModelConfig c;
  for (std::uint32_t* f : {&c.image_size, &c.patch_size, &c.embed_dim, &c.num_layers,
                           &c.num_heads, &c.mlp_ratio, &c.num_classes, &c.channels})
    *f = r.u32();
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    r.fail(std::string("invalid config block (") + e.what() + ")", 8);
  }
  SegModel m = init_model(c, 0);
  for (Tensor* t : m.parameters()) {
    r.expect(t->size() * 8);
    auto d = t->mutable_data();
    for (auto& v : d) {
      const std::size_t at = r.offset();
      v = r.f64();
      if (!std::isfinite(v)) r.fail("non-finite parameter value", at);
    }
  }
  if (consumed) {
    *consumed = r.offset();
  } else if (r.remaining() != 0) {
    r.fail("unexpected trailing data", r.offset());
  }
  return m;
}

void save_model(const SegModel& model, const std::string& path) {
  binary::write_file(path, encode_model(model));
}

SegModel load_model(const std::string& path) { return decode_model(binary::read_file(path)); }

std::size_t model_file_bytes(const ModelConfig& config) {
  return kModelHeaderBytes + 8 * init_model(config, 0).parameter_count();
}

}  // namespace dfq
