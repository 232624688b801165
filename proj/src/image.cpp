#include "tic/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#ifdef TIC_WITH_PNG
#include <png.h>
#endif

namespace tic {

Tensor ImageBuffer::to_tensor() const {
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  std::vector<double> v(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + p] = pixels[p * 3 + c] / 255.0;
  return Tensor::constant({1, 3, height, width}, std::move(v));
}

ImageBuffer ImageBuffer::from_tensor(const Tensor& x) {
  if (x.ndim() != 4 || x.dim(0) != 1 || x.dim(1) != 3) {
    throw ShapeError("ImageBuffer::from_tensor: expected [1,3,H,W], got " + shape_str(x.shape()));
  }
  ImageBuffer img(static_cast<int>(x.dim(3)), static_cast<int>(x.dim(2)));
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  const auto d = x.data();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(d[c * plane + p], 0.0, 1.0);
      img.pixels[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path) {
  const std::string t = header_token(in);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }) ||
      t.size() > 6) {
    throw ImageError("malformed PPM header in " + path.string());
  }
  return std::stoi(t);
}

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  return i < n ? i : period - i;
}

}  // namespace

ImageBuffer read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  if (header_token(in) != "P6") throw ImageError("not a binary PPM (P6) file: " + path.string());
  const int w = header_int(in, path), h = header_int(in, path), maxval = header_int(in, path);
  if (w < 1 || h < 1) throw ImageError("PPM has empty extents: " + path.string());
  if (maxval != 255) throw ImageError("only 8-bit PPM (maxval 255) is supported: " + path.string());
  ImageBuffer img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw ImageError("truncated PPM: " + path.string());
  return img;
}

void write_ppm(const std::filesystem::path& path, const ImageBuffer& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write image " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw ImageError("failed writing " + path.string());
}

void write_pgm(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& gray) {
  if (gray.size() != static_cast<std::size_t>(width) * height) throw ImageError("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write image " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out) throw ImageError("failed writing " + path.string());
}

#ifdef TIC_WITH_PNG

bool png_supported() { return true; }

ImageBuffer read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw ImageError("cannot read PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  ImageBuffer img(static_cast<int>(png.width), static_cast<int>(png.height));
  if (!png_image_finish_read(&png, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

#else

bool png_supported() { return false; }
ImageBuffer read_png(const std::filesystem::path& path) {
  throw ImageError("PNG support not built in; cannot read " + path.string());
}
void write_png(const std::filesystem::path& path, const ImageBuffer&) {
  throw ImageError("PNG support not built in; cannot write " + path.string());
}

#endif

ImageBuffer read_image(const std::filesystem::path& path) {
  const std::string e = lower_ext(path);
  if (e == ".png") return read_png(path);
  return read_ppm(path);
}

void write_image(const std::filesystem::path& path, const ImageBuffer& img) {
  if (lower_ext(path) == ".png") {
    write_png(path, img);
  } else {
    write_ppm(path, img);
  }
}

PaddedImage pad_reflect(const ImageBuffer& img, int multiple) {
  if (img.width < 1 || img.height < 1) throw ImageError("pad_reflect: empty image");
  if (multiple < 1) throw ContractError("pad_reflect: multiple must be positive");
  const int H = (img.height + multiple - 1) / multiple * multiple;
  const int W = (img.width + multiple - 1) / multiple * multiple;
  PaddedImage out{ImageBuffer(W, H), img.height, img.width};
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      const int sr = reflect(r, img.height), sc = reflect(c, img.width);
      for (int ch = 0; ch < 3; ++ch) out.image.at(r, c, ch) = img.at(sr, sc, ch);
    }
  return out;
}

ImageBuffer crop_back(const ImageBuffer& img, int height, int width) {
  if (height < 1 || width < 1 || height > img.height || width > img.width) {
    throw ContractError("crop_back: target extents exceed the image");
  }
  ImageBuffer out(width, height);
  for (int r = 0; r < height; ++r)
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(r) * img.width * 3, static_cast<std::ptrdiff_t>(width) * 3,
                out.pixels.begin() + static_cast<std::ptrdiff_t>(r) * width * 3);
  return out;
}

}  // namespace tic
