#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>

#include "sure/error.hpp"
#include "sure/train/synthetic.hpp"

namespace sure::cli {

using train::Image;

/// Binary (P5) 8-bit PGM. Intensities are stored as round(255 v).
inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  std::string row(img.width, '\0');
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double v = std::clamp(static_cast<double>(img.at(x, y)), 0.0, 1.0);
      row[x] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    os.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw IoError("write failed for " + path.string());
}

namespace detail {

inline std::size_t pgm_header_int(std::istream& is, const std::string& where) {
  for (;;) {
    const int c = is.peek();
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
  long long v = -1;
  if (!(is >> v) || v <= 0) throw IoError(where + ": malformed PGM header");
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Reads P5 or P2 grayscale with maxval up to 255, scaled to [0, 1].
inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (!is || (magic != "P5" && magic != "P2"))
    throw IoError(path.string() + ": not a grayscale PGM (P5/P2)");
  const auto w = detail::pgm_header_int(is, path.string());
  const auto h = detail::pgm_header_int(is, path.string());
  const auto maxval = detail::pgm_header_int(is, path.string());
  if (maxval > 255) throw IoError(path.string() + ": only 8-bit PGM is supported");
  Image img(w, h);
  const float scale = static_cast<float>(maxval);
  if (magic == "P5") {
    is.get();  // single whitespace after maxval
    std::string buf(w * h, '\0');
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size()))
      throw IoError(path.string() + ": truncated pixel data");
    for (std::size_t k = 0; k < buf.size(); ++k)
      img.pixels[k] = static_cast<float>(static_cast<unsigned char>(buf[k])) / scale;
  } else {
    for (auto& p : img.pixels) {
      long long v;
      if (!(is >> v) || v < 0 || v > static_cast<long long>(maxval))
        throw IoError(path.string() + ": bad pixel value");
      p = static_cast<float>(v) / scale;
    }
  }
  return img;
}

struct Padded {
  Image image;
  std::size_t pad_right = 0;
  std::size_t pad_bottom = 0;
};

/// Extends the right and bottom borders by replication up to multiples of
/// `multiple`; pixel coordinates of the original are unchanged.
inline Padded pad_to_multiple(const Image& img, std::size_t multiple = 8) {
  if (img.width == 0 || img.height == 0) throw InvalidArgument("cannot pad an empty image");
  Padded out;
  out.pad_right = (multiple - img.width % multiple) % multiple;
  out.pad_bottom = (multiple - img.height % multiple) % multiple;
  out.image = Image(img.width + out.pad_right, img.height + out.pad_bottom);
  for (std::size_t y = 0; y < out.image.height; ++y)
    for (std::size_t x = 0; x < out.image.width; ++x)
      out.image.at(x, y) = img.at(std::min(x, img.width - 1), std::min(y, img.height - 1));
  return out;
}

}  // namespace sure::cli
