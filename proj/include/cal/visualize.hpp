#pragma once

#include <array>
#include <span>

#include "cal/tensor.hpp"

namespace cal {

// Fixed "hot" color ramp: 0 maps to black, then red, yellow, white at 1.
std::array<double, 3> heatmap_ramp(double v);

// Render one attention map as an RGB image: nearest-neighbor upsample the
// fh x fw cell grid to image_size and map values linearly onto the ramp
// (scaled by the map maximum; an all-zero map renders as the zero color).
Tensor heatmap_image(std::span<const double> cells, std::size_t fh, std::size_t fw,
                     int image_size);

// 1-pixel rectangle outline (half-open box) drawn in place.
void draw_rect_outline(Tensor& image, const std::array<int, 4>& rect, double r, double g,
                       double b);

}  // namespace cal
