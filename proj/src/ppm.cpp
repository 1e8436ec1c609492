#include "mlfn/ppm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "mlfn/errors.hpp"

namespace mlfn::ppm {

unsigned char quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

void write(const std::filesystem::path& path, const float* chw, std::size_t height,
           std::size_t width) {
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  const std::size_t plane = height * width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(chw[c * plane + p])));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string token(std::istream& in) {
  std::string t;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!t.empty()) return t;
      continue;
    }
    t.push_back(ch);
  }
  return t;
}

}  // namespace

Image read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image " + path.string());
  if (token(f) != "P6") throw IoError(path.string() + ": not a binary PPM (P6)");
  Image img;
  try {
    img.width = std::stoul(token(f));
    img.height = std::stoul(token(f));
    if (std::stoul(token(f)) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PPM header");
  }
  const std::size_t plane = img.height * img.width;
  std::string bytes(plane * 3, '\0');
  f.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(f.gcount()) != bytes.size()) throw IoError(path.string() + ": truncated pixel data");
  img.chw.resize(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img.chw[c * plane + p] = static_cast<float>(static_cast<unsigned char>(bytes[p * 3 + c])) / 255.0f;
  return img;
}

}  // namespace mlfn::ppm
