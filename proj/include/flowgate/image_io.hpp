#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowgate/image.hpp"

namespace flowgate {

// 8-bit codecs. Samples map linearly between [0,255] and [0,1]; on write
// each sample is rounded to the nearest code value. All failures throw
// DataError.

std::vector<std::uint8_t> encode_png(const ImageBuffer& img);
std::vector<std::uint8_t> encode_pnm(const ImageBuffer& img);
// Sniffs PNG, JPEG and binary PGM/PPM by magic bytes.
ImageBuffer decode_image(std::span<const std::uint8_t> bytes);

ImageBuffer read_image(const std::filesystem::path& path);
// Format chosen by extension: .png, .pgm/.ppm/.pnm.
void write_image(const std::filesystem::path& path, const ImageBuffer& img);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace flowgate
