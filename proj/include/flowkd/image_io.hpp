#pragma once

#include <string>

#include "flowkd/tensor.hpp"

namespace flowkd {

// PNG <-> float tensors in [0,1]. RGB images are (3,H,W), grayscale (H,W).
// 8-bit on disk; 16-bit and palette inputs are converted on read.
TensorF read_png_rgb(const std::string& path);
TensorF read_png_gray(const std::string& path);
void write_png_rgb(const std::string& path, const TensorF& img);
void write_png_gray(const std::string& path, const TensorF& img);

}  // namespace flowkd
