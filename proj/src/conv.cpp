#include "stsn/conv.hpp"

#include <algorithm>
#include <cmath>

namespace stsn {

namespace {

// C[m][n] += A[m][k] * B[k][n], C pre-initialized by the caller.
void gemm_accumulate(const real* a, const real* b, real* c, int m, int kdim, int n) {
  for (int i = 0; i < m; ++i) {
    const real* arow = a + static_cast<std::size_t>(i) * kdim;
    real* crow = c + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < kdim; ++k) {
      const real av = arow[k];
      if (av == 0.0) continue;
      const real* brow = b + static_cast<std::size_t>(k) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// GW[m][k] += G[m][n] * B[k][n]^T
void gemm_nt_accumulate(const real* g, const real* b, real* gw, int m, int kdim, int n) {
  for (int i = 0; i < m; ++i) {
    const real* grow = g + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < kdim; ++k) {
      const real* brow = b + static_cast<std::size_t>(k) * n;
      real acc = 0;
      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
      gw[static_cast<std::size_t>(i) * kdim + k] += acc;
    }
  }
}

// GB[k][n] += A[m][k]^T * G[m][n]
void gemm_tn_accumulate(const real* a, const real* g, real* gb, int m, int kdim, int n) {
  for (int k = 0; k < kdim; ++k) {
    real* brow = gb + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < m; ++i) {
      const real av = a[static_cast<std::size_t>(i) * kdim + k];
      if (av == 0.0) continue;
      const real* grow = g + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
    }
  }
}

void im2col_plain(const real* x, int c, int h, int w, const ConvSpec& s, int oh, int ow,
                  real* col) {
  const int taps = s.taps();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        real* dst = col + (static_cast<std::size_t>(ic) * taps + ky * s.kernel_w + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky * s.dilation;
          const bool row_ok = iy >= 0 && iy < h;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx * s.dilation;
            dst[static_cast<std::size_t>(oy) * ow + ox] =
                (row_ok && ix >= 0 && ix < w) ? x[(static_cast<std::size_t>(ic) * h + iy) * w + ix]
                                              : 0.0;
          }
        }
      }
    }
  }
}

void col2im_plain(const real* gcol, int c, int h, int w, const ConvSpec& s, int oh, int ow,
                  real* gx) {
  const int taps = s.taps();
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        const real* src = gcol + (static_cast<std::size_t>(ic) * taps + ky * s.kernel_w + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky * s.dilation;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx * s.dilation;
            if (ix < 0 || ix >= w) continue;
            gx[(static_cast<std::size_t>(ic) * h + iy) * w + ix] +=
                src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

struct Cell {
  int y0, x0;
  real fy, fx;  // fractional position within the cell
};

inline Cell forward_cell(real y, real x) {
  const real fy = std::floor(y), fx = std::floor(x);
  return {static_cast<int>(fy), static_cast<int>(fx), y - fy, x - fx};
}

// Derivative cell: the containing cell, except at exact integer coordinates
// where the cell on the lower-coordinate side is used.
inline Cell derivative_cell(real y, real x) {
  real fy = std::floor(y), fx = std::floor(x);
  if (fy == y) fy -= 1.0;
  if (fx == x) fx -= 1.0;
  return {static_cast<int>(fy), static_cast<int>(fx), y - fy, x - fx};
}

inline bool dead_sample(real y, real x, int h, int w) {
  return !(y > -1.0 && y < static_cast<real>(h) && x > -1.0 && x < static_cast<real>(w));
}

void check_conv_args(const Tensor& input, const ConvSpec& spec, const ConvParams& params) {
  spec.validate();
  require(input.dims().size() == 3, "conv input must be [c,h,w]");
  require(input.dims()[0] == spec.in_channels, "conv input channel count mismatch");
  const std::vector<int> wdims{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  require(params.weight.dims() == wdims, "conv weight dims inconsistent with spec");
  require(params.bias.dims() == std::vector<int>{spec.out_channels},
          "conv bias dims inconsistent with spec");
}

}  // namespace

std::pair<int, int> ConvSpec::output_dims(int in_h, int in_w) const {
  const int oh = (in_h + 2 * pad - (dilation * (kernel_h - 1) + 1)) / stride + 1;
  const int ow = (in_w + 2 * pad - (dilation * (kernel_w - 1) + 1)) / stride + 1;
  return {oh, ow};
}

void ConvSpec::validate() const {
  require(kernel_h > 0 && kernel_w > 0 && kernel_h % 2 == 1 && kernel_w % 2 == 1,
          "conv kernels must be odd and positive");
  require(stride >= 1 && pad >= 0 && dilation >= 1, "bad conv stride/pad/dilation");
  require(in_channels > 0 && out_channels > 0, "conv channel counts must be positive");
}

std::vector<real> bilinear_sample(const Tensor& map, real y, real x) {
  require(map.dims().size() == 3, "bilinear_sample expects a [c,h,w] map");
  const int c = map.dims()[0], h = map.dims()[1], w = map.dims()[2];
  std::vector<real> out(static_cast<std::size_t>(c), 0.0);
  if (dead_sample(y, x, h, w)) return out;
  const Cell cell = forward_cell(y, x);
  const real w00 = (1 - cell.fy) * (1 - cell.fx);
  const real w01 = (1 - cell.fy) * cell.fx;
  const real w10 = cell.fy * (1 - cell.fx);
  const real w11 = cell.fy * cell.fx;
  const bool y0ok = cell.y0 >= 0 && cell.y0 < h;
  const bool y1ok = cell.y0 + 1 >= 0 && cell.y0 + 1 < h;
  const bool x0ok = cell.x0 >= 0 && cell.x0 < w;
  const bool x1ok = cell.x0 + 1 >= 0 && cell.x0 + 1 < w;
  const real* m = map.data();
  for (int ic = 0; ic < c; ++ic) {
    const real* plane = m + static_cast<std::size_t>(ic) * h * w;
    const real v00 = (y0ok && x0ok) ? plane[cell.y0 * w + cell.x0] : 0.0;
    const real v01 = (y0ok && x1ok) ? plane[cell.y0 * w + cell.x0 + 1] : 0.0;
    const real v10 = (y1ok && x0ok) ? plane[(cell.y0 + 1) * w + cell.x0] : 0.0;
    const real v11 = (y1ok && x1ok) ? plane[(cell.y0 + 1) * w + cell.x0 + 1] : 0.0;
    out[ic] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
  }
  return out;
}

std::pair<std::vector<real>, std::vector<real>> bilinear_sample_coord_grad(const Tensor& map,
                                                                           real y, real x) {
  require(map.dims().size() == 3, "bilinear_sample_coord_grad expects a [c,h,w] map");
  const int c = map.dims()[0], h = map.dims()[1], w = map.dims()[2];
  std::vector<real> dy(static_cast<std::size_t>(c), 0.0), dx(static_cast<std::size_t>(c), 0.0);
  if (dead_sample(y, x, h, w)) return {dy, dx};
  const Cell cell = derivative_cell(y, x);
  const bool y0ok = cell.y0 >= 0 && cell.y0 < h;
  const bool y1ok = cell.y0 + 1 >= 0 && cell.y0 + 1 < h;
  const bool x0ok = cell.x0 >= 0 && cell.x0 < w;
  const bool x1ok = cell.x0 + 1 >= 0 && cell.x0 + 1 < w;
  const real* m = map.data();
  for (int ic = 0; ic < c; ++ic) {
    const real* plane = m + static_cast<std::size_t>(ic) * h * w;
    const real v00 = (y0ok && x0ok) ? plane[cell.y0 * w + cell.x0] : 0.0;
    const real v01 = (y0ok && x1ok) ? plane[cell.y0 * w + cell.x0 + 1] : 0.0;
    const real v10 = (y1ok && x0ok) ? plane[(cell.y0 + 1) * w + cell.x0] : 0.0;
    const real v11 = (y1ok && x1ok) ? plane[(cell.y0 + 1) * w + cell.x0 + 1] : 0.0;
    dy[ic] = (1 - cell.fx) * (v10 - v00) + cell.fx * (v11 - v01);
    dx[ic] = (1 - cell.fy) * (v01 - v00) + cell.fy * (v11 - v10);
  }
  return {dy, dx};
}

Tensor conv2d(const Tensor& input, const ConvSpec& spec, const ConvParams& params) {
  check_conv_args(input, spec, params);
  const int c = input.dims()[0], h = input.dims()[1], w = input.dims()[2];
  const auto [oh, ow] = spec.output_dims(h, w);
  require(oh > 0 && ow > 0, "conv output is empty");
  const int taps = spec.taps();
  const int kdim = c * taps;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;

  auto col = std::make_shared<std::vector<real>>(static_cast<std::size_t>(kdim) * plane);
  im2col_plain(input.data(), c, h, w, spec, oh, ow, col->data());

  auto out = std::make_shared<std::vector<real>>(static_cast<std::size_t>(spec.out_channels) * plane);
  for (int oc = 0; oc < spec.out_channels; ++oc) {
    std::fill_n(out->data() + static_cast<std::size_t>(oc) * plane, plane, params.bias.data()[oc]);
  }
  gemm_accumulate(params.weight.data(), col->data(), out->data(), spec.out_channels, kdim,
                  static_cast<int>(plane));

  std::vector<int> odims{spec.out_channels, oh, ow};
  Tape* tape = Tape::active();
  const bool track = tape && (input.node() >= 0 || params.weight.node() >= 0 || params.bias.node() >= 0);
  if (!track) return Tensor(std::move(odims), std::move(out));

  auto wsaved = params.weight.storage();
  const ConvSpec s = spec;
  return tape->emit(
      std::move(odims), out, {&input, &params.weight, &params.bias},
      [col, wsaved, s, c, h, w, oh, ow, kdim, plane](const std::vector<real>& g,
                                                     Tape::ParentGrads pg) {
        const int n = static_cast<int>(plane);
        if (pg[2]) {
          for (int oc = 0; oc < s.out_channels; ++oc) {
            real acc = 0;
            const real* grow = g.data() + static_cast<std::size_t>(oc) * plane;
            for (std::size_t j = 0; j < plane; ++j) acc += grow[j];
            (*pg[2])[oc] += acc;
          }
        }
        if (pg[1]) {
          gemm_nt_accumulate(g.data(), col->data(), pg[1]->data(), s.out_channels, kdim, n);
        }
        if (pg[0]) {
          std::vector<real> gcol(static_cast<std::size_t>(kdim) * plane, 0.0);
          gemm_tn_accumulate(wsaved->data(), g.data(), gcol.data(), s.out_channels, kdim, n);
          col2im_plain(gcol.data(), c, h, w, s, oh, ow, pg[0]->data());
        }
      });
}

Tensor deform_conv2d(const Tensor& input, const OffsetField& offsets, const ConvSpec& spec,
                     const ConvParams& params) {
  check_conv_args(input, spec, params);
  require(spec.stride == 1, "deformable layers are restricted to stride 1");
  const int c = input.dims()[0], h = input.dims()[1], w = input.dims()[2];
  const auto [oh, ow] = spec.output_dims(h, w);
  require(oh > 0 && ow > 0, "deform_conv output is empty");
  const int taps = spec.taps();
  const int kdim = c * taps;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::vector<int> offdims{2 * taps, oh, ow};
  require(offsets.field.dims() == offdims, "offset field shape inconsistent with conv geometry");

  const real* x = input.data();
  const real* off = offsets.field.data();
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;

  auto col = std::make_shared<std::vector<real>>(static_cast<std::size_t>(kdim) * plane);
  real* colp = col->data();
  for (int t = 0; t < taps; ++t) {
    const int ky = t / spec.kernel_w, kx = t % spec.kernel_w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const std::size_t p = static_cast<std::size_t>(oy) * ow + ox;
        const real sy = oy - spec.pad + ky * spec.dilation + off[(2 * t) * plane + p];
        const real sx = ox - spec.pad + kx * spec.dilation + off[(2 * t + 1) * plane + p];
        if (dead_sample(sy, sx, h, w)) {
          for (int ic = 0; ic < c; ++ic) colp[(static_cast<std::size_t>(ic) * taps + t) * plane + p] = 0.0;
          continue;
        }
        const Cell cell = forward_cell(sy, sx);
        const real w00 = (1 - cell.fy) * (1 - cell.fx);
        const real w01 = (1 - cell.fy) * cell.fx;
        const real w10 = cell.fy * (1 - cell.fx);
        const real w11 = cell.fy * cell.fx;
        const bool y0ok = cell.y0 >= 0 && cell.y0 < h;
        const bool y1ok = cell.y0 + 1 < h;  // cell.y0 >= -1 here
        const bool x0ok = cell.x0 >= 0 && cell.x0 < w;
        const bool x1ok = cell.x0 + 1 < w;
        const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(cell.y0) * w + cell.x0;
        for (int ic = 0; ic < c; ++ic) {
          const real* pl = x + ic * in_plane;
          const real v00 = (y0ok && x0ok) ? pl[base] : 0.0;
          const real v01 = (y0ok && x1ok) ? pl[base + 1] : 0.0;
          const real v10 = (y1ok && x0ok) ? pl[base + w] : 0.0;
          const real v11 = (y1ok && x1ok) ? pl[base + w + 1] : 0.0;
          colp[(static_cast<std::size_t>(ic) * taps + t) * plane + p] =
              w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
        }
      }
    }
  }

  auto out = std::make_shared<std::vector<real>>(static_cast<std::size_t>(spec.out_channels) * plane);
  for (int oc = 0; oc < spec.out_channels; ++oc) {
    std::fill_n(out->data() + static_cast<std::size_t>(oc) * plane, plane, params.bias.data()[oc]);
  }
  gemm_accumulate(params.weight.data(), col->data(), out->data(), spec.out_channels, kdim,
                  static_cast<int>(plane));

  std::vector<int> odims{spec.out_channels, oh, ow};
  Tape* tape = Tape::active();
  const bool track = tape && (input.node() >= 0 || offsets.field.node() >= 0 ||
                              params.weight.node() >= 0 || params.bias.node() >= 0);
  if (!track) return Tensor(std::move(odims), std::move(out));

  auto xsaved = input.storage();
  auto osaved = offsets.field.storage();
  auto wsaved = params.weight.storage();
  const ConvSpec s = spec;
  return tape->emit(
      std::move(odims), out, {&input, &offsets.field, &params.weight, &params.bias},
      [col, xsaved, osaved, wsaved, s, c, h, w, oh, ow, kdim, plane](const std::vector<real>& g,
                                                                     Tape::ParentGrads pg) {
        const int taps = s.taps();
        const int n = static_cast<int>(plane);
        if (pg[3]) {
          for (int oc = 0; oc < s.out_channels; ++oc) {
            real acc = 0;
            const real* grow = g.data() + static_cast<std::size_t>(oc) * plane;
            for (std::size_t j = 0; j < plane; ++j) acc += grow[j];
            (*pg[3])[oc] += acc;
          }
        }
        if (pg[2]) {
          gemm_nt_accumulate(g.data(), col->data(), pg[2]->data(), s.out_channels, kdim, n);
        }
        if (!pg[0] && !pg[1]) return;

        std::vector<real> gcol(static_cast<std::size_t>(kdim) * plane, 0.0);
        gemm_tn_accumulate(wsaved->data(), g.data(), gcol.data(), s.out_channels, kdim, n);

        const real* x = xsaved->data();
        const real* off = osaved->data();
        const std::size_t in_plane = static_cast<std::size_t>(h) * w;
        for (int t = 0; t < taps; ++t) {
          const int ky = t / s.kernel_w, kx = t % s.kernel_w;
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              const std::size_t p = static_cast<std::size_t>(oy) * ow + ox;
              const real sy = oy - s.pad + ky * s.dilation + off[(2 * t) * plane + p];
              const real sx = ox - s.pad + kx * s.dilation + off[(2 * t + 1) * plane + p];
              if (dead_sample(sy, sx, h, w)) continue;

              const Cell fc = forward_cell(sy, sx);
              const real w00 = (1 - fc.fy) * (1 - fc.fx);
              const real w01 = (1 - fc.fy) * fc.fx;
              const real w10 = fc.fy * (1 - fc.fx);
              const real w11 = fc.fy * fc.fx;
              const bool fy0 = fc.y0 >= 0 && fc.y0 < h;
              const bool fy1 = fc.y0 + 1 < h;
              const bool fx0 = fc.x0 >= 0 && fc.x0 < w;
              const bool fx1 = fc.x0 + 1 < w;

              const Cell dc = derivative_cell(sy, sx);
              const bool dy0 = dc.y0 >= 0 && dc.y0 < h;
              const bool dy1 = dc.y0 + 1 >= 0 && dc.y0 + 1 < h;
              const bool dx0 = dc.x0 >= 0 && dc.x0 < w;
              const bool dx1 = dc.x0 + 1 >= 0 && dc.x0 + 1 < w;

              real acc_dy = 0, acc_dx = 0;
              for (int ic = 0; ic < c; ++ic) {
                const real gc = gcol[(static_cast<std::size_t>(ic) * taps + t) * plane + p];
                if (gc == 0.0) continue;
                if (pg[0]) {
                  real* gx = pg[0]->data() + ic * in_plane;
                  if (fy0 && fx0) gx[fc.y0 * w + fc.x0] += gc * w00;
                  if (fy0 && fx1) gx[fc.y0 * w + fc.x0 + 1] += gc * w01;
                  if (fy1 && fx0) gx[(fc.y0 + 1) * w + fc.x0] += gc * w10;
                  if (fy1 && fx1) gx[(fc.y0 + 1) * w + fc.x0 + 1] += gc * w11;
                }
                if (pg[1]) {
                  const real* pl = x + ic * in_plane;
                  const real v00 = (dy0 && dx0) ? pl[dc.y0 * w + dc.x0] : 0.0;
                  const real v01 = (dy0 && dx1) ? pl[dc.y0 * w + dc.x0 + 1] : 0.0;
                  const real v10 = (dy1 && dx0) ? pl[(dc.y0 + 1) * w + dc.x0] : 0.0;
                  const real v11 = (dy1 && dx1) ? pl[(dc.y0 + 1) * w + dc.x0 + 1] : 0.0;
                  acc_dy += gc * ((1 - dc.fx) * (v10 - v00) + dc.fx * (v11 - v01));
                  acc_dx += gc * ((1 - dc.fy) * (v01 - v00) + dc.fy * (v11 - v10));
                }
              }
              if (pg[1]) {
                (*pg[1])[(2 * t) * plane + p] += acc_dy;
                (*pg[1])[(2 * t + 1) * plane + p] += acc_dx;
              }
            }
          }
        }
      });
}

OffsetField offset_conv(const Tensor& input, const ConvSpec& spec,
                        const ConvParams& offset_params) {
  spec.validate();
  require(input.dims().size() == 3, "offset_conv input must be [c,h,w]");
  ConvSpec ospec = spec;
  ospec.in_channels = input.dims()[0];
  ospec.out_channels = 2 * spec.taps();
  require(offset_params.weight.dims() ==
              std::vector<int>{ospec.out_channels, ospec.in_channels, spec.kernel_h, spec.kernel_w},
          "offset_conv params must produce exactly 2N channels");
  return OffsetField{conv2d(input, ospec, offset_params)};
}

}  // namespace stsn
