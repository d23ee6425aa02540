// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cstring>
#include <string>

namespace prbfpn {

namespace debug {
namespace {
std::atomic<bool> g_backward_fault{false};
}
void set_backward_fault(bool enabled) { g_backward_fault.store(enabled); }
bool backward_fault() { return g_backward_fault.load(); }
}  // namespace debug

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

std::string both(const Shape& a, const Shape& b) { return a.str() + " vs " + b.str(); }

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

// Unfold output rows [oy0, oy1) of one image (c, h, w) into a
// (c*k*k, (oy1-oy0)*ow) matrix.
template <typename T>
void im2col_rows(const T* img, int c, int h, int w, int k, int stride, int pad, int ow, int oy0, int oy1, T* col) {
  const std::size_t cols = static_cast<std::size_t>(oy1 - oy0) * ow;
  for (int ic = 0; ic < c; ++ic) {
    const T* plane = img + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(ic * k + ky) * k + kx) * cols;
        // Output columns whose input column lies inside the image.
        const int lo = std::clamp(floor_div(pad - kx + stride - 1, stride), 0, ow);
        const int hi = std::clamp(floor_div(w - 1 + pad - kx, stride) + 1, lo, ow);
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* dst = row + static_cast<std::size_t>(oy - oy0) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          const int shift = kx - pad;
          std::fill(dst, dst + lo, T(0));
          if (stride == 1) {
            std::copy(src + lo + shift, src + hi + shift, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * stride + shift];
          }
          std::fill(dst + hi, dst + ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_rows_add(const T* col, int c, int h, int w, int k, int stride, int pad, int ow, int oy0, int oy1,
                     T* img) {
  const std::size_t cols = static_cast<std::size_t>(oy1 - oy0) * ow;
  for (int ic = 0; ic < c; ++ic) {
    T* plane = img + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(ic * k + ky) * k + kx) * cols;
        const int lo = std::clamp(floor_div(pad - kx + stride - 1, stride), 0, ow);
        const int hi = std::clamp(floor_div(w - 1 + pad - kx, stride) + 1, lo, ow);
        for (int oy = oy0; oy < oy1; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy - oy0) * ow;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const int shift = kx - pad;
          if (stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * stride + shift] += src[ox];
          }
        }
      }
    }
  }
}

// Output rows per im2col tile, sized so a tile stays cache resident.
int tile_rows(int kk, int ow, int oh) {
  constexpr int kTileElems = 1 << 16;
  return std::clamp(kTileElems / std::max(kk * ow, 1), 1, oh);
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int pad) {
  const Shape is = input.shape();
  const Shape ws = weight.shape();
  require(ws.c == is.c, "conv2d: input channels do not match weight: " + both(is, ws));
  require(ws.h == ws.w && ws.h % 2 == 1, "conv2d: kernel must be square and odd: " + ws.str());
  require(stride >= 1 && pad >= 0, "conv2d: stride must be positive and pad non-negative");
  require(bias.shape() == Shape{1, ws.n, 1, 1},
          "conv2d: bias must be 1x" + std::to_string(ws.n) + "x1x1, got " + bias.shape().str());
  const int k = ws.h;
  const int oh = (is.h + 2 * pad - k) / stride + 1;
  const int ow = (is.w + 2 * pad - k) / stride + 1;
  require(is.h + 2 * pad >= k && is.w + 2 * pad >= k && oh >= 1 && ow >= 1,
          "conv2d: empty output for " + both(is, ws));

  const int c_out = ws.n;
  const int kk = is.c * k * k;
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out(Shape{is.n, c_out, oh, ow});
  Tape<T>* tape = tape_for<T>({&input, &weight, &bias});
  const int rows = tile_rows(kk, ow, oh);

  AlignedVector<T> cols;
  if (!direct) cols.resize(static_cast<std::size_t>(kk) * rows * ow);

  ConstMatMap<T> wmat(weight.data().data(), c_out, kk);
  const auto bvec = bias.data();
  auto odata = out.mutable_data();
  for (int b = 0; b < is.n; ++b) {
    const T* img = input.data().data() + static_cast<std::size_t>(b) * is.c * is.plane();
    T* obase = odata.data() + static_cast<std::size_t>(b) * c_out * p;
    if (direct) {
      MatMap<T>(obase, c_out, p).noalias() = wmat * ConstMatMap<T>(img, kk, p);
    } else {
      for (int oy0 = 0; oy0 < oh; oy0 += rows) {
        const int oy1 = std::min(oh, oy0 + rows);
        const Eigen::Index t = static_cast<Eigen::Index>(oy1 - oy0) * ow;
        im2col_rows(img, is.c, is.h, is.w, k, stride, pad, ow, oy0, oy1, cols.data());
        StridedMap<T>(obase + static_cast<std::size_t>(oy0) * ow, c_out, t, Eigen::OuterStride<>(p)).noalias() =
            wmat * ConstMatMap<T>(cols.data(), kk, t);
      }
    }
    MatMap<T> omat(obase, c_out, p);
    for (int oc = 0; oc < c_out; ++oc) omat.row(oc).array() += bvec[oc];
  }

  if (tape != nullptr) {
    out.set_requires_grad(true);
    tape->record("conv2d", {input, weight, bias}, out,
                 [input, weight, bias, out, stride, pad, k, oh, ow, kk, p, rows, direct]() mutable {
                   const Shape is = input.shape();
                   const int c_out = weight.shape().n;
                   const auto g = out.grad();
                   ConstMatMap<T> wmat(weight.data().data(), c_out, kk);
                   const T wscale = debug::backward_fault() ? T(2) : T(1);
                   const bool need_w = weight.requires_grad();
                   const bool need_in = input.requires_grad();
                   AlignedVector<T> col;
                   AlignedVector<T> dcol;
                   if (!direct && need_w) col.resize(static_cast<std::size_t>(kk) * rows * ow);
                   if (!direct && need_in) dcol.resize(static_cast<std::size_t>(kk) * rows * ow);
                   for (int b = 0; b < is.n; ++b) {
                     const T* gbase = g.data() + static_cast<std::size_t>(b) * c_out * p;
                     ConstMatMap<T> gmat(gbase, c_out, p);
                     const std::size_t in_off = static_cast<std::size_t>(b) * is.c * is.plane();
                     const T* img = input.data().data() + in_off;
                     if (bias.requires_grad()) {
                       auto bg = bias.grad_mut();
                       for (int oc = 0; oc < c_out; ++oc) bg[oc] += gmat.row(oc).sum();
                     }
                     if (direct) {
                       if (need_w) {
                         MatMap<T>(weight.grad_mut().data(), c_out, kk).noalias() +=
                             wscale * (gmat * ConstMatMap<T>(img, kk, p).transpose());
                       }
                       if (need_in) {
                         MatMap<T>(input.grad_mut().data() + in_off, is.c, p).noalias() += wmat.transpose() * gmat;
                       }
                       continue;
                     }
                     for (int oy0 = 0; oy0 < oh; oy0 += rows) {
                       const int oy1 = std::min(oh, oy0 + rows);
                       const Eigen::Index t = static_cast<Eigen::Index>(oy1 - oy0) * ow;
                       ConstStridedMap<T> gt(gbase + static_cast<std::size_t>(oy0) * ow, c_out, t,
                                             Eigen::OuterStride<>(p));
                       if (need_w) {
                         im2col_rows(img, is.c, is.h, is.w, k, stride, pad, ow, oy0, oy1, col.data());
                         MatMap<T>(weight.grad_mut().data(), c_out, kk).noalias() +=
                             wscale * (gt * ConstMatMap<T>(col.data(), kk, t).transpose());
                       }
                       if (need_in) {
                         MatMap<T>(dcol.data(), kk, t).noalias() = wmat.transpose() * gt;
                         col2im_rows_add(dcol.data(), is.c, is.h, is.w, k, stride, pad, ow, oy0, oy1,
                                         input.grad_mut().data() + in_off);
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename T>
Tensor<T> pointwise_conv(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape ws = weight.shape();
  require(ws.h == 1 && ws.w == 1, "pointwise_conv: weight must be (c_out, c_in, 1, 1), got " + ws.str());
  require(ws.c == input.shape().c,
          "pointwise_conv: channel mismatch: " + both(input.shape(), ws));
  return conv2d(input, weight, bias, 1, 0);
}

template <typename T>
Tensor<T> depthwise_scale(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const Shape is = input.shape();
  const Shape want{1, is.c, 1, 1};
  require(weight.shape() == want && bias.shape() == want,
          "depthwise_scale: weight/bias must be " + want.str() + " for input " + is.str() + ", got " +
              weight.shape().str() + " and " + bias.shape().str());
  Tensor<T> out(is);
  const std::size_t plane = is.plane();
  const auto x = input.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  auto y = out.mutable_data();
  for (int b = 0; b < is.n; ++b) {
    for (int c = 0; c < is.c; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * is.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) y[off + i] = wv[c] * x[off + i] + bv[c];
    }
  }
  if (Tape<T>* tape = tape_for<T>({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record("depthwise_scale", {input, weight, bias}, out, [input, weight, bias, out]() mutable {
      const Shape is = input.shape();
      const std::size_t plane = is.plane();
      const auto g = out.grad();
      const auto x = input.data();
      const auto wv = weight.data();
      for (int b = 0; b < is.n; ++b) {
        for (int c = 0; c < is.c; ++c) {
          const std::size_t off = (static_cast<std::size_t>(b) * is.c + c) * plane;
          if (input.requires_grad()) {
            auto ig = input.grad_mut();
            for (std::size_t i = 0; i < plane; ++i) ig[off + i] += wv[c] * g[off + i];
          }
          if (weight.requires_grad()) {
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += g[off + i] * x[off + i];
            weight.grad_mut()[c] += acc;
          }
          if (bias.requires_grad()) {
            T acc = 0;
            for (std::size_t i = 0; i < plane; ++i) acc += g[off + i];
            bias.grad_mut()[c] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& input, int block) {
  const Shape is = input.shape();
  require(block >= 1, "space_to_depth: block must be positive");
  require(is.h % block == 0 && is.w % block == 0,
          "space_to_depth: spatial dims of " + is.str() + " not divisible by " + std::to_string(block));
  const int bb = block * block;
  const Shape os{is.n, is.c * bb, is.h / block, is.w / block};
  Tensor<T> out(os);
  // Precomputed gather map: out[i] = in[src[i]]. Shared with backward.
  auto src = std::make_shared<std::vector<std::size_t>>(os.numel());
  for (int b = 0; b < is.n; ++b)
    for (int c = 0; c < is.c; ++c)
      for (int dy = 0; dy < block; ++dy)
        for (int dx = 0; dx < block; ++dx) {
          const int oc = c * bb + dy * block + dx;
          for (int y = 0; y < os.h; ++y)
            for (int x = 0; x < os.w; ++x) {
              (*src)[out.offset(b, oc, y, x)] = input.offset(b, c, y * block + dy, x * block + dx);
            }
        }
  const auto xin = input.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xin[(*src)[i]];
  if (Tape<T>* tape = tape_for<T>({&input})) {
    out.set_requires_grad(true);
    tape->record("space_to_depth", {input}, out, [input, out, src]() mutable {
      auto ig = input.grad_mut();
      const auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ig[(*src)[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& input) {
  const Shape is = input.shape();
  const Shape os{is.n, is.c, is.h * 2, is.w * 2};
  Tensor<T> out(os);
  const auto x = input.data();
  auto y = out.mutable_data();
  const std::size_t planes = static_cast<std::size_t>(is.n) * is.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data() + pl * is.plane();
    T* dst = y.data() + pl * os.plane();
    for (int r = 0; r < is.h; ++r) {
      T* row0 = dst + static_cast<std::size_t>(2 * r) * os.w;
      for (int c = 0; c < is.w; ++c) row0[2 * c] = row0[2 * c + 1] = src[r * is.w + c];
      std::memcpy(row0 + os.w, row0, sizeof(T) * os.w);
    }
  }
  if (Tape<T>* tape = tape_for<T>({&input})) {
    out.set_requires_grad(true);
    tape->record("upsample2x", {input}, out, [input, out]() mutable {
      const Shape is = input.shape();
      const int ow = is.w * 2;
      const std::size_t planes = static_cast<std::size_t>(is.n) * is.c;
      auto ig = input.grad_mut();
      const auto g = out.grad();
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* gp = g.data() + pl * is.plane() * 4;
        T* dst = ig.data() + pl * is.plane();
        for (int r = 0; r < is.h; ++r) {
          const T* g0 = gp + static_cast<std::size_t>(2 * r) * ow;
          const T* g1 = g0 + ow;
          for (int c = 0; c < is.w; ++c) dst[r * is.w + c] += g0[2 * c] + g0[2 * c + 1] + g1[2 * c] + g1[2 * c + 1];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> downsample2x(const Tensor<T>& input) {
  const Shape is = input.shape();
  require(is.h % 2 == 0 && is.w % 2 == 0, "downsample2x: spatial dims must be even, got " + is.str());
  const Shape os{is.n, is.c, is.h / 2, is.w / 2};
  Tensor<T> out(os);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(os.numel());
  const auto x = input.data();
  auto y = out.mutable_data();
  const std::size_t planes = static_cast<std::size_t>(is.n) * is.c;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const std::size_t ibase = pl * is.plane();
    const std::size_t obase = pl * os.plane();
    for (int r = 0; r < os.h; ++r) {
      for (int c = 0; c < os.w; ++c) {
        const std::size_t i00 = ibase + static_cast<std::size_t>(2 * r) * is.w + 2 * c;
        const std::size_t cand[4] = {i00, i00 + 1, i00 + is.w, i00 + is.w + 1};
        std::size_t best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (x[cand[q]] > x[best]) best = cand[q];
        y[obase + r * os.w + c] = x[best];
        (*argmax)[obase + r * os.w + c] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (Tape<T>* tape = tape_for<T>({&input})) {
    out.set_requires_grad(true);
    tape->record("downsample2x", {input}, out, [input, out, argmax]() mutable {
      auto ig = input.grad_mut();
      const auto g = out.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ig[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: need at least one input");
  const Shape s0 = inputs[0].shape();
  int c_total = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape si = inputs[i].shape();
    require(si.n == s0.n && si.h == s0.h && si.w == s0.w,
            "concat_channels: input " + std::to_string(i) + " has shape " + si.str() +
                ", incompatible with input 0 shape " + s0.str());
    c_total += si.c;
  }
  const Shape os{s0.n, c_total, s0.h, s0.w};
  Tensor<T> out(os);
  auto y = out.mutable_data();
  const std::size_t plane = s0.plane();
  for (int b = 0; b < s0.n; ++b) {
    std::size_t dst = static_cast<std::size_t>(b) * c_total * plane;
    for (const auto& t : inputs) {
      const std::size_t len = static_cast<std::size_t>(t.shape().c) * plane;
      std::memcpy(y.data() + dst, t.data().data() + b * len, sizeof(T) * len);
      dst += len;
    }
  }
  Tape<T>* tape = active_tape<T>();
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (tape != nullptr && any) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> ins(inputs.begin(), inputs.end());
    tape->record("concat_channels", ins, out, [ins, out]() mutable {
      const Shape os = out.shape();
      const std::size_t plane = os.plane();
      const auto g = out.grad();
      for (int b = 0; b < os.n; ++b) {
        std::size_t src = static_cast<std::size_t>(b) * os.c * plane;
        for (auto& t : ins) {
          const std::size_t len = static_cast<std::size_t>(t.shape().c) * plane;
          if (t.requires_grad()) {
            add_into<T>(t.grad_mut().subspan(b * len, len), g.subspan(src, len));
          }
          src += len;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch: " + both(a.shape(), b.shape()));
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  const auto x0 = a.data();
  const auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  if (Tape<T>* tape = tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("add", {a, b}, out, [a, b, out]() mutable {
      if (a.requires_grad()) add_into<T>(a.grad_mut(), out.grad());
      if (b.requires_grad()) add_into<T>(b.grad_mut(), out.grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch: " + both(a.shape(), b.shape()));
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  const auto x0 = a.data();
  const auto x1 = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] * x1[i];
  if (Tape<T>* tape = tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("mul", {a, b}, out, [a, b, out]() mutable {
      const auto g = out.grad();
      // Read both operands before writing so mul(x, x) accumulates 2*x*g.
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        const auto xb = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        const auto xa = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  Tensor<T> out(input.shape());
  auto y = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  if (Tape<T>* tape = tape_for<T>({&input})) {
    out.set_requires_grad(true);
    tape->record("leaky_relu", {input}, out, [input, out, slope]() mutable {
      auto ig = input.grad_mut();
      const auto g = out.grad();
      const auto x = input.data();
      for (std::size_t i = 0; i < g.size(); ++i) ig[i] += x[i] >= T(0) ? g[i] : slope * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = 0;
  for (T v : input.data()) acc += v;
  Tensor<T> out(Shape{}, acc);
  if (Tape<T>* tape = tape_for<T>({&input})) {
    out.set_requires_grad(true);
    tape->record("sum", {input}, out, [input, out]() mutable {
      const T g = out.grad()[0];
      for (T& v : input.grad_mut()) v += g;
    });
  }
  return out;
}

#define PRBFPN_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);    \
  template Tensor<T> pointwise_conv<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> depthwise_scale<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> space_to_depth<T>(const Tensor<T>&, int);                                     \
  template Tensor<T> upsample2x<T>(const Tensor<T>&);                                              \
  template Tensor<T> downsample2x<T>(const Tensor<T>&);                                            \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);                               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                           \
  template Tensor<T> sum<T>(const Tensor<T>&);

PRBFPN_INSTANTIATE_OPS(float)
PRBFPN_INSTANTIATE_OPS(double)

}  // namespace prbfpn
