#include "dfq/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "binary.hpp"
#include "dfq/error.hpp"

namespace dfq {

namespace {

void check_image(const Tensor& image, const char* what) {
  if (!image.defined() || image.rank() != 3)
    throw ShapeError(std::string(what) + ": expected an [H x W x ch] image");
}

std::vector<std::uint8_t> scaled_bytes(const Tensor& image) {
  const auto v = image.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  std::vector<std::uint8_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t = span > 0.0 ? (v[i] - *lo) / span : 0.0;
    out[i] = static_cast<std::uint8_t>(std::lround(t * 255.0));
  }
  return out;
}

std::vector<std::uint8_t> pnm(const char* magic, std::size_t w, std::size_t h,
                              const std::vector<std::uint8_t>& pixels) {
  const std::string header = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

// Distinct tints for classes 1..; class 0 is never tinted.
constexpr std::uint8_t kPalette[][3] = {{230, 25, 75},  {60, 180, 75},  {0, 130, 200}, {245, 130, 48},
                                        {145, 30, 180}, {70, 240, 240}, {240, 50, 230}, {210, 245, 60}};

}  // namespace

std::vector<std::uint8_t> encode_pnm(const Tensor& image) {
  check_image(image, "encode_pnm");
  const std::size_t ch = image.dim(2);
  if (ch != 1 && ch != 3) throw ShapeError("encode_pnm: only 1 or 3 channels can be exported");
  return pnm(ch == 1 ? "P5" : "P6", image.dim(1), image.dim(0), scaled_bytes(image));
}

void write_pnm(const Tensor& image, const std::string& path) { binary::write_file(path, encode_pnm(image)); }

std::vector<std::uint8_t> encode_label_overlay(const Tensor& image, const std::vector<int>& label_map) {
  check_image(image, "encode_label_overlay");
  const std::size_t h = image.dim(0), w = image.dim(1), ch = image.dim(2);
  if (label_map.size() != h * w) throw ShapeError("encode_label_overlay: label map does not match the image");
  const auto gray = scaled_bytes(image);
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t p = 0; p < h * w; ++p) {
    unsigned sum = 0;
    for (std::size_t c = 0; c < ch; ++c) sum += gray[p * ch + c];
    const auto g = static_cast<std::uint8_t>(sum / ch);
    const int l = label_map[p];
    for (std::size_t c = 0; c < 3; ++c) {
      if (l <= 0) {
        rgb[p * 3 + c] = g;
      } else {
        const std::uint8_t tint = kPalette[(l - 1) % std::size(kPalette)][c];
        rgb[p * 3 + c] = static_cast<std::uint8_t>((g + 2u * tint) / 3u);
      }
    }
  }
  return pnm("P6", w, h, rgb);
}

void write_label_overlay(const Tensor& image, const std::vector<int>& label_map, const std::string& path) {
  binary::write_file(path, encode_label_overlay(image, label_map));
}

std::vector<std::uint8_t> encode_image(const Tensor& image) {
  check_image(image, "encode_image");
  binary::Writer w;
  w.bytes(kImageMagic, 4);
  w.u32(kImageVersion);
  for (std::size_t a = 0; a < 3; ++a) w.u32(static_cast<std::uint32_t>(image.dim(a)));
  for (double v : image.data()) w.f64(v);
  return w.take();
}

Tensor decode_image(const std::vector<std::uint8_t>& bytes) {
  binary::Reader r(bytes, "image file");
  if (r.tag(4) != std::string(kImageMagic, 4)) r.fail("bad magic (expected DFQI)", 0);
  const std::uint32_t version = r.u32();
  if (version != kImageVersion) r.fail("unsupported version " + std::to_string(version), 4);
  const std::size_t h = r.u32(), w = r.u32(), ch = r.u32();
  if (h == 0 || w == 0 || ch == 0) r.fail("empty image dimensions", 8);
  r.expect(h * w * ch * 8);
  std::vector<double> data(h * w * ch);
  for (auto& v : data) {
    const std::size_t at = r.offset();
    v = r.f64();
    if (!std::isfinite(v)) r.fail("non-finite pixel value", at);
  }
  if (r.remaining() != 0) r.fail("unexpected trailing data", r.offset());
  return Tensor({h, w, ch}, std::move(data));
}

void save_image(const Tensor& image, const std::string& path) { binary::write_file(path, encode_image(image)); }

Tensor load_image(const std::string& path) { return decode_image(binary::read_file(path)); }

std::string raw_image_path(const std::string& path) {
  return std::filesystem::path(path).replace_extension(".dfqi").string();
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream out;
  out << "iteration,l_sm,l_dm,l_is,num_masks\n";
  for (const auto& t : trace)
    out << t.iteration << ',' << format_double(t.l_sm) << ',' << format_double(t.l_dm) << ','
        << format_double(t.l_is) << ',' << t.num_masks << '\n';
  return out.str();
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::ostringstream out;
  out << "method,source,w_bits,a_bits,size_bytes,bops,dataset,mean_iou,seed\n";
  for (const auto& r : rows)
    out << r.method << ',' << to_string(r.source) << ',' << r.w_bits << ',' << r.a_bits << ','
        << r.size_bytes << ',' << r.bops << ',' << r.dataset << ',' << format_double(r.mean_iou) << ','
        << r.seed << '\n';
  return out.str();
}

std::string eval_csv(const EvalReport& r, const std::string& dataset) {
  std::ostringstream out;
  out << "precision,w_bits,a_bits,weights,activations,source,seed,size_bytes,bops,dataset,"
         "averaging,num_masks,mean_iou\n";
  out << r.precision() << ',' << r.w_bits << ',' << r.a_bits << ',' << r.weights << ','
      << r.activations << ',' << to_string(r.source) << ',' << r.seed << ',' << r.size_bytes << ','
      << r.bops << ',' << dataset << ",per-mask," << r.ious.size() << ',' << format_double(r.mean_iou)
      << '\n';
  return out.str();
}

void write_text(const std::string& path, const std::string& text) {
  binary::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace dfq
