#include "cytogate/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstring>
#include <string>

#include "cytogate/error.hpp"

namespace cytogate::png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error(ErrorKind::io, "cannot open " + path.string());
  return f;
}

[[noreturn]] void fail(const std::filesystem::path& path, const char* what) {
  throw Error(ErrorKind::format, "png " + path.string() + ": " + what);
}

void on_png_error(png_structp png_ptr, png_const_charp) {
  std::longjmp(png_jmpbuf(png_ptr), 1);
}

void on_png_warning(png_structp, png_const_charp) {}

bool host_is_little_endian() {
  const std::uint16_t probe = 1;
  std::uint8_t first = 0;
  std::memcpy(&first, &probe, 1);
  return first == 1;
}

struct MemoryWriter {
  std::vector<std::uint8_t>* out;
};

void write_to_vector(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* writer = static_cast<MemoryWriter*>(png_get_io_ptr(png_ptr));
  writer->out->insert(writer->out->end(), data, data + length);
}

void flush_noop(png_structp) {}

struct MemoryReader {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void read_from_span(png_structp png_ptr, png_bytep data, png_size_t length) {
  auto* reader = static_cast<MemoryReader*>(png_get_io_ptr(png_ptr));
  if (reader->offset + length > reader->bytes.size()) {
    png_error(png_ptr, "truncated");
  }
  std::memcpy(data, reader->bytes.data() + reader->offset, length);
  reader->offset += length;
}

}  // namespace

struct RowReader::Impl {
  std::filesystem::path path;
  FilePtr file;
  png_structp png = nullptr;
  png_infop info = nullptr;
  Header header;
  int next = 0;
  std::vector<std::uint8_t> scratch;

  ~Impl() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

RowReader::RowReader(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
  impl_->path = path;
  impl_->file = open_file(path, "rb");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, impl_->file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    fail(path, "not a PNG file");
  }
  impl_->png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!impl_->png) fail(path, "libpng init failed");
  impl_->info = png_create_info_struct(impl_->png);
  if (!impl_->info) fail(path, "libpng init failed");
  if (setjmp(png_jmpbuf(impl_->png))) fail(path, "corrupt header");
  png_init_io(impl_->png, impl_->file.get());
  png_set_sig_bytes(impl_->png, 8);
  png_read_info(impl_->png, impl_->info);

  const int color = png_get_color_type(impl_->png, impl_->info);
  const int depth = png_get_bit_depth(impl_->png, impl_->info);
  const int interlace = png_get_interlace_type(impl_->png, impl_->info);
  if (color != PNG_COLOR_TYPE_GRAY) fail(path, "expected single-channel grayscale");
  if (depth != 8 && depth != 16) fail(path, "unsupported bit depth");
  if (interlace != PNG_INTERLACE_NONE) fail(path, "interlaced PNG not supported for streaming");
  if (depth == 16 && host_is_little_endian()) png_set_swap(impl_->png);
  png_read_update_info(impl_->png, impl_->info);

  impl_->header.width = static_cast<int>(png_get_image_width(impl_->png, impl_->info));
  impl_->header.height = static_cast<int>(png_get_image_height(impl_->png, impl_->info));
  impl_->header.bit_depth = depth;
  impl_->header.channels = 1;
  impl_->scratch.resize(png_get_rowbytes(impl_->png, impl_->info));
}

RowReader::~RowReader() = default;
RowReader::RowReader(RowReader&&) noexcept = default;
RowReader& RowReader::operator=(RowReader&&) noexcept = default;

const Header& RowReader::header() const noexcept { return impl_->header; }
int RowReader::next_row() const noexcept { return impl_->next; }

void RowReader::read_row(std::span<std::uint16_t> out) {
  auto& im = *impl_;
  if (im.next >= im.header.height) fail(im.path, "read past last row");
  if (out.size() != static_cast<std::size_t>(im.header.width)) {
    throw Error(ErrorKind::invalid_argument, "row buffer width mismatch");
  }
  if (setjmp(png_jmpbuf(im.png))) fail(im.path, "corrupt image data");
  png_read_row(im.png, im.scratch.data(), nullptr);
  ++im.next;
  if (im.header.bit_depth == 16) {
    std::memcpy(out.data(), im.scratch.data(), out.size() * sizeof(std::uint16_t));
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = im.scratch[i];
  }
}

void RowReader::skip_rows(int count) {
  std::vector<std::uint16_t> sink(static_cast<std::size_t>(impl_->header.width));
  for (int i = 0; i < count; ++i) read_row(sink);
}

Header read_header(const std::filesystem::path& path) {
  RowReader reader(path);
  return reader.header();
}

IntensityGrid read_gray(const std::filesystem::path& path, int* bit_depth) {
  RowReader reader(path);
  const auto& h = reader.header();
  IntensityGrid grid(h.width, h.height);
  for (int y = 0; y < h.height; ++y) reader.read_row(grid.row(y));
  if (bit_depth) *bit_depth = h.bit_depth;
  return grid;
}

void write_gray(const std::filesystem::path& path, const IntensityGrid& grid, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) {
    throw Error(ErrorKind::invalid_argument, "bit depth must be 8 or 16");
  }
  auto file = open_file(path, "wb");
  png_structp png_ptr =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  png_infop info = png_ptr ? png_create_info_struct(png_ptr) : nullptr;
  if (!png_ptr || !info) {
    png_destroy_write_struct(&png_ptr, &info);
    fail(path, "libpng init failed");
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(grid.width()) * (bit_depth / 8));
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info);
    fail(path, "write failed");
  }
  png_init_io(png_ptr, file.get());
  // Microscopy rasters are noisy; heavier zlib levels and adaptive filtering
  // cost several times the time for a few percent of size.
  png_set_compression_level(png_ptr, 1);
  png_set_filter(png_ptr, PNG_FILTER_TYPE_BASE, PNG_FILTER_SUB);
  png_set_IHDR(png_ptr, info, static_cast<png_uint_32>(grid.width()),
               static_cast<png_uint_32>(grid.height()), bit_depth, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png_ptr, info);
  for (int y = 0; y < grid.height(); ++y) {
    auto src = grid.row(y);
    if (bit_depth == 16) {
      for (std::size_t x = 0; x < src.size(); ++x) {
        row[2 * x] = static_cast<std::uint8_t>(src[x] >> 8);
        row[2 * x + 1] = static_cast<std::uint8_t>(src[x] & 0xff);
      }
    } else {
      for (std::size_t x = 0; x < src.size(); ++x) {
        if (src[x] > 255) {
          png_destroy_write_struct(&png_ptr, &info);
          throw Error(ErrorKind::invalid_argument, "sample exceeds 8-bit range");
        }
        row[x] = static_cast<std::uint8_t>(src[x]);
      }
    }
    png_write_row(png_ptr, row.data());
  }
  png_write_end(png_ptr, nullptr);
  png_destroy_write_struct(&png_ptr, &info);
}

std::vector<std::uint8_t> encode_rgba(int width, int height, std::span<const std::uint8_t> rgba) {
  if (rgba.size() != static_cast<std::size_t>(width) * height * 4) {
    throw Error(ErrorKind::invalid_argument, "rgba buffer size mismatch");
  }
  std::vector<std::uint8_t> out;
  MemoryWriter writer{&out};
  png_structp png_ptr =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  png_infop info = png_ptr ? png_create_info_struct(png_ptr) : nullptr;
  if (!png_ptr || !info) {
    png_destroy_write_struct(&png_ptr, &info);
    throw Error(ErrorKind::format, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info);
    throw Error(ErrorKind::format, "png encode failed");
  }
  png_set_write_fn(png_ptr, &writer, write_to_vector, flush_noop);
  png_set_compression_level(png_ptr, 1);
  png_set_IHDR(png_ptr, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGBA, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png_ptr, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png_ptr, const_cast<png_bytep>(rgba.data() + static_cast<std::size_t>(y) * width * 4));
  }
  png_write_end(png_ptr, nullptr);
  png_destroy_write_struct(&png_ptr, &info);
  return out;
}

std::vector<std::uint8_t> decode_rgba(std::span<const std::uint8_t> bytes, int* width, int* height) {
  MemoryReader reader{bytes, 0};
  png_structp png_ptr =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  png_infop info = png_ptr ? png_create_info_struct(png_ptr) : nullptr;
  if (!png_ptr || !info) {
    png_destroy_read_struct(&png_ptr, &info, nullptr);
    throw Error(ErrorKind::format, "libpng init failed");
  }
  std::vector<std::uint8_t> out;
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_read_struct(&png_ptr, &info, nullptr);
    throw Error(ErrorKind::format, "png decode failed");
  }
  png_set_read_fn(png_ptr, &reader, read_from_span);
  png_read_info(png_ptr, info);
  png_set_expand(png_ptr);
  png_set_strip_16(png_ptr);
  png_set_gray_to_rgb(png_ptr);
  png_set_add_alpha(png_ptr, 0xff, PNG_FILLER_AFTER);
  png_read_update_info(png_ptr, info);
  const int w = static_cast<int>(png_get_image_width(png_ptr, info));
  const int h = static_cast<int>(png_get_image_height(png_ptr, info));
  out.resize(static_cast<std::size_t>(w) * h * 4);
  for (int y = 0; y < h; ++y) {
    png_read_row(png_ptr, out.data() + static_cast<std::size_t>(y) * w * 4, nullptr);
  }
  png_destroy_read_struct(&png_ptr, &info, nullptr);
  if (width) *width = w;
  if (height) *height = h;
  return out;
}

}  // namespace cytogate::png
