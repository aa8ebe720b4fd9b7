#pragma once

#include <string>

#include "climb/tensor.hpp"

namespace climb {

// Binary PGM (P5, maxval 255). Images are [H,W] or [1,H,W] tensors with
// values in [0,1]; writing quantizes to bytes, reading maps byte/255 back.
// Writes go through a temp file + rename.
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);

}  // namespace climb
