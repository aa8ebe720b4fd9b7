#include "climb/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "climb/checkpoint.hpp"

namespace climb {

void write_pgm(const std::string& path, const Tensor& image) {
  const Shape& s = image.shape();
  int64_t h, w;
  if (s.size() == 2) {
    h = s[0];
    w = s[1];
  } else if (s.size() == 3 && s[0] == 1) {
    h = s[1];
    w = s[2];
  } else {
    throw std::runtime_error("write_pgm: image must be [H,W] or [1,H,W], got " + shape_str(s));
  }
  std::ostringstream os;
  os << "P5\n" << w << " " << h << "\n255\n";
  std::string blob = os.str();
  blob.reserve(blob.size() + static_cast<size_t>(h * w));
  for (double v : image.values()) {
    double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
    blob.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  atomic_write_file(path, blob);
}

Tensor read_pgm(const std::string& path) {
  std::string blob = read_file(path);
  std::istringstream is(blob);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: not a P5 file: " + path);
  // Headers may carry '#' comment lines between tokens.
  auto next_int = [&is, &path]() -> int64_t {
    for (;;) {
      is >> std::ws;
      if (is.peek() == '#') {
        std::string line;
        std::getline(is, line);
        continue;
      }
      int64_t v;
      if (!(is >> v)) throw std::runtime_error("read_pgm: bad header in " + path);
      return v;
    }
  };
  int64_t w = next_int();
  int64_t h = next_int();
  int64_t maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("read_pgm: unsupported header in " + path);
  is.get();  // single whitespace after maxval
  size_t offset = static_cast<size_t>(is.tellg());
  if (blob.size() < offset + static_cast<size_t>(w * h))
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  std::vector<double> v(static_cast<size_t>(w * h));
  for (size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<double>(static_cast<unsigned char>(blob[offset + i])) / 255.0;
  return Tensor::from_values({h, w}, std::move(v));
}

}  // namespace climb
