#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfq/eval.hpp"
#include "dfq/synth.hpp"
#include "dfq/tensor.hpp"

namespace dfq {

// Binary PGM (1 channel) or PPM (3 channels), each image min-max scaled to
// [0, 255] on its own. For viewing only; the scaling loses the float values.
std::vector<std::uint8_t> encode_pnm(const Tensor& image);
void write_pnm(const Tensor& image, const std::string& path);

// The image in gray with every labeled pixel tinted by its class colour.
std::vector<std::uint8_t> encode_label_overlay(const Tensor& image, const std::vector<int>& label_map);
void write_label_overlay(const Tensor& image, const std::vector<int>& label_map, const std::string& path);

// Lossless float image container:
// char[4] "DFQI" | u32 version | u32 H | u32 W | u32 ch | f64 pixels (row-major).
inline constexpr char kImageMagic[4] = {'D', 'F', 'Q', 'I'};
inline constexpr std::uint32_t kImageVersion = 1;
std::vector<std::uint8_t> encode_image(const Tensor& image);
Tensor decode_image(const std::vector<std::uint8_t>& bytes);
void save_image(const Tensor& image, const std::string& path);
Tensor load_image(const std::string& path);

// path with its extension replaced by ".dfqi": where the float tensor behind
// an exported PGM/PPM lives.
std::string raw_image_path(const std::string& path);

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

std::string trace_csv(const std::vector<TraceRow>& trace);
// Header method,source,w_bits,a_bits,size_bytes,bops,dataset,mean_iou,seed.
std::string compare_csv(const std::vector<CompareRow>& rows);
// One summary row.
std::string eval_csv(const EvalReport& report, const std::string& dataset);
void write_text(const std::string& path, const std::string& text);

}  // namespace dfq
