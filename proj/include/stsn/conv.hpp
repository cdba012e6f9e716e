#pragma once

#include <utility>
#include <vector>

#include "stsn/tensor.hpp"

namespace stsn {

// Geometry of one conv layer. The sampling grid R is enumerated row-major
// from (-(kh/2), -(kw/2)) to (kh/2, kw/2), scaled by dilation; tap t maps to
// (ky, kx) = (t / kw, t % kw).
struct ConvSpec {
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int pad = 1;
  int dilation = 1;
  int in_channels = 0;
  int out_channels = 0;

  int taps() const { return kernel_h * kernel_w; }
  std::pair<int, int> output_dims(int in_h, int in_w) const;
  void validate() const;
};

struct ConvParams {
  Tensor weight;  // [out_channels, in_channels, kernel_h, kernel_w]
  Tensor bias;    // [out_channels]
};

// Per-pixel displacements for one deformable layer. Channel layout is
// (dy_1, dx_1, dy_2, dx_2, ...): one (y,x) pair per grid tap, in grid order,
// shared across all feature channels.
struct OffsetField {
  Tensor field;  // [2*taps, out_h, out_w]
};

// Zero-padded bilinear read of all channels at fractional (y, x). Coordinates
// outside [0,h-1]x[0,w-1] fade to zero over a one-pixel band.
std::vector<real> bilinear_sample(const Tensor& map, real y, real x);

// Piecewise-constant derivative of the sampled value w.r.t. (y, x), one pair
// of vectors [c]. At exact integer coordinates the derivative is taken from
// the cell on the lower-coordinate side of each axis; it vanishes outside the
// open support (-1, h) x (-1, w) of the padded interpolant.
std::pair<std::vector<real>, std::vector<real>> bilinear_sample_coord_grad(
    const Tensor& map, real y, real x);

// y(p0) = sum_{pn in R} w(pn) * x(p0 + pn) + bias, zero padding outside the
// input. Differentiable w.r.t. input, weights and bias.
Tensor conv2d(const Tensor& input, const ConvSpec& spec, const ConvParams& params);

// y(p0) = sum_{pn in R} w(pn) * x(p0 + pn + dpn) + bias with bilinear reads at
// fractional positions. Differentiable w.r.t. input, weights, bias and the
// offsets. Deformable layers are restricted to stride 1.
Tensor deform_conv2d(const Tensor& input, const OffsetField& offsets, const ConvSpec& spec,
                     const ConvParams& params);

// Predicts the offset field for a deformable layer with geometry `spec` by
// running a plain convolution over `input`; no activation is applied.
OffsetField offset_conv(const Tensor& input, const ConvSpec& spec,
                        const ConvParams& offset_params);

}  // namespace stsn
