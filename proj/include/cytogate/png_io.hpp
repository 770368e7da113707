#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "cytogate/grid.hpp"

namespace cytogate::png {

struct Header {
  int width = 0;
  int height = 0;
  int bit_depth = 0;
  int channels = 0;
};

/// Reads only the IHDR chunk.
Header read_header(const std::filesystem::path& path);

/// Decodes a single-channel PNG (8- or 16-bit) into native-endian samples.
IntensityGrid read_gray(const std::filesystem::path& path, int* bit_depth = nullptr);

void write_gray(const std::filesystem::path& path, const IntensityGrid& grid, int bit_depth);

/// Encodes an 8-bit RGBA image (4 bytes per pixel, row-major) to PNG bytes.
std::vector<std::uint8_t> encode_rgba(int width, int height, std::span<const std::uint8_t> rgba);

/// Decodes PNG bytes into 8-bit RGBA.
std::vector<std::uint8_t> decode_rgba(std::span<const std::uint8_t> bytes, int* width, int* height);

/// Sequential row decoder for grayscale PNGs. Keeps one row in memory.
class RowReader {
 public:
  explicit RowReader(const std::filesystem::path& path);
  ~RowReader();
  RowReader(RowReader&&) noexcept;
  RowReader& operator=(RowReader&&) noexcept;
  RowReader(const RowReader&) = delete;
  RowReader& operator=(const RowReader&) = delete;

  const Header& header() const noexcept;
  int next_row() const noexcept;

  /// Decodes the next row into `out` (width samples).
  void read_row(std::span<std::uint16_t> out);
  void skip_rows(int count);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cytogate::png
