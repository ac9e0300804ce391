#include "mp3d/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "mp3d/errors.hpp"
#include "mp3d/parallel.hpp"

namespace mp3d {

namespace {

using i64 = std::int64_t;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Spatial view of a rank-4 or rank-5 activation: [N, C, D, H, W].
struct Volume5 {
  i64 n, c, d, h, w;
};

Volume5 as_volume(const Shape& s, const char* op) {
  if (s.size() == 5) return {s[0], s[1], s[2], s[3], s[4]};
  if (s.size() == 4) return {s[0], s[1], 1, s[2], s[3]};
  throw ShapeError(std::string(op) + ": expected rank-4 or rank-5 input, got " + shape_str(s));
}

Shape shape_like(const Shape& in, i64 c, i64 d, i64 h, i64 w) {
  if (in.size() == 5) return {in[0], c, d, h, w};
  return {in[0], c, h, w};
}

struct ConvGeom {
  i64 n, ci, d, h, w;
  i64 co, kd, kh, kw;
  i64 sd, sh, sw, pd, ph, pw, groups;
  i64 od, oh, ow;
  i64 cig() const { return ci / groups; }
  i64 cog() const { return co / groups; }
  i64 k() const { return cig() * kd * kh * kw; }
  i64 p() const { return od * oh * ow; }
  i64 in_vol() const { return d * h * w; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && sd == 1 && sh == 1 && sw == 1 && pd == 0 && ph == 0 && pw == 0;
  }
};

ConvGeom conv_geometry(const Shape& in, const Shape& ker, const ConvOptions& o) {
  Volume5 v = as_volume(in, "conv3d");
  ConvGeom g{};
  g.n = v.n, g.ci = v.c, g.d = v.d, g.h = v.h, g.w = v.w;
  if (ker.size() == 5) {
    g.co = ker[0], g.kd = ker[2], g.kh = ker[3], g.kw = ker[4];
  } else if (ker.size() == 4 && in.size() == 4) {
    g.co = ker[0], g.kd = 1, g.kh = ker[2], g.kw = ker[3];
  } else {
    throw ShapeError("conv3d: kernel must be [Cout, Cin/g, kd, kh, kw], got " + shape_str(ker));
  }
  g.groups = o.groups;
  g.sd = o.stride[0], g.sh = o.stride[1], g.sw = o.stride[2];
  g.pd = o.pad[0], g.ph = o.pad[1], g.pw = o.pad[2];
  if (in.size() == 4 && (g.kd != 1 || g.pd != 0))
    throw ShapeError("conv3d: rank-4 input needs depth kernel 1 and depth pad 0");
  if (g.groups < 1) throw ShapeError("conv3d: groups must be >= 1");
  if (g.ci % g.groups != 0)
    throw ShapeError("conv3d: input channels " + std::to_string(g.ci) + " not divisible by groups " +
                     std::to_string(g.groups));
  if (g.co % g.groups != 0)
    throw ShapeError("conv3d: output channels " + std::to_string(g.co) + " not divisible by groups " +
                     std::to_string(g.groups));
  if (ker[1] != g.cig())
    throw ShapeError("conv3d: kernel input-channel dimension " + std::to_string(ker[1]) + " != Cin/groups " +
                     std::to_string(g.cig()));
  if (g.sd < 1 || g.sh < 1 || g.sw < 1) throw ShapeError("conv3d: strides must be >= 1");
  const char* names[3] = {"depth", "height", "width"};
  i64 ext[3] = {g.d, g.h, g.w}, kk[3] = {g.kd, g.kh, g.kw}, pp[3] = {g.pd, g.ph, g.pw};
  for (int i = 0; i < 3; ++i)
    if (kk[i] > ext[i] + 2 * pp[i])
      throw ShapeError(std::string("conv3d: kernel ") + names[i] + " extent " + std::to_string(kk[i]) +
                       " exceeds padded input " + names[i] + " " + std::to_string(ext[i] + 2 * pp[i]));
  g.od = window_output_extent(g.d, static_cast<int>(g.kd), static_cast<int>(g.sd), static_cast<int>(g.pd));
  g.oh = window_output_extent(g.h, static_cast<int>(g.kh), static_cast<int>(g.sh), static_cast<int>(g.ph));
  g.ow = window_output_extent(g.w, static_cast<int>(g.kw), static_cast<int>(g.sw), static_cast<int>(g.pw));
  return g;
}

// in: first channel of the group for one sample. cols: [K, P].
template <typename T>
void im2col(const T* in, const ConvGeom& g, T* cols) {
  const i64 P = g.p();
  for (i64 c = 0; c < g.cig(); ++c)
    for (i64 kz = 0; kz < g.kd; ++kz)
      for (i64 ky = 0; ky < g.kh; ++ky)
        for (i64 kx = 0; kx < g.kw; ++kx) {
          T* dst = cols + (((c * g.kd + kz) * g.kh + ky) * g.kw + kx) * P;
          for (i64 oz = 0; oz < g.od; ++oz) {
            i64 iz = oz * g.sd - g.pd + kz;
            if (iz < 0 || iz >= g.d) {
              std::fill(dst, dst + g.oh * g.ow, T(0));
              dst += g.oh * g.ow;
              continue;
            }
            for (i64 oy = 0; oy < g.oh; ++oy) {
              i64 iy = oy * g.sh - g.ph + ky;
              if (iy < 0 || iy >= g.h) {
                std::fill(dst, dst + g.ow, T(0));
                dst += g.ow;
                continue;
              }
              const T* row = in + ((c * g.d + iz) * g.h + iy) * g.w;
              for (i64 ox = 0; ox < g.ow; ++ox) {
                i64 ix = ox * g.sw - g.pw + kx;
                *dst++ = (ix >= 0 && ix < g.w) ? row[ix] : T(0);
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* in) {
  const i64 P = g.p();
  for (i64 c = 0; c < g.cig(); ++c)
    for (i64 kz = 0; kz < g.kd; ++kz)
      for (i64 ky = 0; ky < g.kh; ++ky)
        for (i64 kx = 0; kx < g.kw; ++kx) {
          const T* src = cols + (((c * g.kd + kz) * g.kh + ky) * g.kw + kx) * P;
          for (i64 oz = 0; oz < g.od; ++oz) {
            i64 iz = oz * g.sd - g.pd + kz;
            if (iz < 0 || iz >= g.d) {
              src += g.oh * g.ow;
              continue;
            }
            for (i64 oy = 0; oy < g.oh; ++oy) {
              i64 iy = oy * g.sh - g.ph + ky;
              if (iy < 0 || iy >= g.h) {
                src += g.ow;
                continue;
              }
              T* row = in + ((c * g.d + iz) * g.h + iy) * g.w;
              for (i64 ox = 0; ox < g.ow; ++ox, ++src) {
                i64 ix = ox * g.sw - g.pw + kx;
                if (ix >= 0 && ix < g.w) row[ix] += *src;
              }
            }
          }
        }
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, const BasicTensor<T>& bias,
                      const ConvOptions& options) {
  const ConvGeom g = conv_geometry(input.shape(), kernel.shape(), options);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.co))
    throw ShapeError("conv3d: bias must be [" + std::to_string(g.co) + "], got " + shape_str(bias.shape()));

  const i64 P = g.p(), K = g.k(), cig = g.cig(), cog = g.cog();
  std::vector<T> out(static_cast<std::size_t>(g.n * g.co * P));
  const T* in = input.data().data();
  const T* ker = kernel.data().data();
  const T* b = bias.defined() ? bias.data().data() : nullptr;

  parallel_for(g.n * g.groups, 1, [&](i64 begin, i64 end) {
    std::vector<T> cols;
    for (i64 item = begin; item < end; ++item) {
      i64 n = item / g.groups, grp = item % g.groups;
      const T* in_ng = in + (n * g.ci + grp * cig) * g.in_vol();
      const T* col_ptr = in_ng;
      if (!g.pointwise()) {
        cols.resize(static_cast<std::size_t>(K * P));
        im2col(in_ng, g, cols.data());
        col_ptr = cols.data();
      }
      ConstMapMat<T> wm(ker + grp * cog * K, cog, K);
      ConstMapMat<T> cm(col_ptr, K, P);
      MapMat<T> om(out.data() + (n * g.co + grp * cog) * P, cog, P);
      om.noalias() = wm * cm;
      if (b)
        for (i64 c = 0; c < cog; ++c) om.row(c).array() += b[grp * cog + c];
    }
  });

  Shape out_shape = shape_like(input.shape(), g.co, g.od, g.oh, g.ow);
  std::vector<std::shared_ptr<TensorNode<T>>> parents{input.node(), kernel.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return BasicTensor<T>::make_result(std::move(out_shape), std::move(out), std::move(parents), [g](TensorNode<T>& self) {
    const i64 P = g.p(), K = g.k(), cig = g.cig(), cog = g.cog();
    auto& in_node = *self.parents[0];
    auto& ker_node = *self.parents[1];
    const T* gout = self.grad.data();
    const T* in = in_node.data.data();
    const T* ker = ker_node.data.data();

    if (in_node.requires_grad) {
      T* gin = in_node.grad_buffer();
      parallel_for(g.n * g.groups, 1, [&](i64 begin, i64 end) {
        std::vector<T> dcols;
        for (i64 item = begin; item < end; ++item) {
          i64 n = item / g.groups, grp = item % g.groups;
          ConstMapMat<T> wm(ker + grp * cog * K, cog, K);
          ConstMapMat<T> gm(gout + (n * g.co + grp * cog) * P, cog, P);
          T* gin_ng = gin + (n * g.ci + grp * cig) * g.in_vol();
          if (g.pointwise()) {
            MapMat<T> dm(gin_ng, K, P);
            dm.noalias() += wm.transpose() * gm;
          } else {
            dcols.resize(static_cast<std::size_t>(K * P));
            MapMat<T> dm(dcols.data(), K, P);
            dm.noalias() = wm.transpose() * gm;
            col2im_add(dcols.data(), g, gin_ng);
          }
        }
      });
    }
    if (ker_node.requires_grad) {
      T* gker = ker_node.grad_buffer();
      parallel_for(g.groups, 1, [&](i64 begin, i64 end) {
        std::vector<T> cols;
        for (i64 grp = begin; grp < end; ++grp) {
          MapMat<T> dw(gker + grp * cog * K, cog, K);
          for (i64 n = 0; n < g.n; ++n) {
            const T* in_ng = in + (n * g.ci + grp * cig) * g.in_vol();
            const T* col_ptr = in_ng;
            if (!g.pointwise()) {
              cols.resize(static_cast<std::size_t>(K * P));
              im2col(in_ng, g, cols.data());
              col_ptr = cols.data();
            }
            ConstMapMat<T> cm(col_ptr, K, P);
            ConstMapMat<T> gm(gout + (n * g.co + grp * cog) * P, cog, P);
            dw.noalias() += gm * cm.transpose();
          }
        }
      });
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      T* gb = self.parents[2]->grad_buffer();
      for (i64 n = 0; n < g.n; ++n)
        for (i64 c = 0; c < g.co; ++c) {
          const T* row = gout + (n * g.co + c) * P;
          T acc = 0;
          for (i64 p = 0; p < P; ++p) acc += row[p];
          gb[c] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// pool3d

template <typename T>
BasicTensor<T> pool3d(const BasicTensor<T>& input, PoolMode mode, Triple window, Triple stride, Triple pad) {
  Volume5 v = as_volume(input.shape(), "pool3d");
  if (input.rank() == 4 && (window[0] != 1 || pad[0] != 0))
    throw ShapeError("pool3d: rank-4 input needs depth window 1 and depth pad 0");
  i64 ext[3] = {v.d, v.h, v.w};
  const char* names[3] = {"depth", "height", "width"};
  for (int i = 0; i < 3; ++i) {
    if (window[i] < 1 || stride[i] < 1 || pad[i] < 0)
      throw ShapeError("pool3d: window and stride must be >= 1, pad >= 0");
    if (window[i] > ext[i] + 2 * pad[i])
      throw ShapeError(std::string("pool3d: window ") + names[i] + " extent " + std::to_string(window[i]) +
                       " too large for input " + names[i] + " " + std::to_string(ext[i]));
    if (pad[i] >= window[i]) throw ShapeError("pool3d: padding must be smaller than the window");
  }
  const i64 od = window_output_extent(v.d, window[0], stride[0], pad[0]);
  const i64 oh = window_output_extent(v.h, window[1], stride[1], pad[1]);
  const i64 ow = window_output_extent(v.w, window[2], stride[2], pad[2]);
  const i64 planes = v.n * v.c, in_vol = v.d * v.h * v.w, out_vol = od * oh * ow;
  const T* in = input.data().data();
  std::vector<T> out(static_cast<std::size_t>(planes * out_vol));
  std::vector<i64> argmax;
  if (mode == PoolMode::kMax) argmax.resize(out.size());
  const double inv_count = 1.0 / (static_cast<double>(window[0]) * window[1] * window[2]);

  for (i64 pl = 0; pl < planes; ++pl) {
    const T* src = in + pl * in_vol;
    for (i64 oz = 0; oz < od; ++oz)
      for (i64 oy = 0; oy < oh; ++oy)
        for (i64 ox = 0; ox < ow; ++ox) {
          i64 o = pl * out_vol + (oz * oh + oy) * ow + ox;
          T best = -std::numeric_limits<T>::infinity();
          i64 best_idx = -1;
          double acc = 0;
          for (int kz = 0; kz < window[0]; ++kz) {
            i64 iz = oz * stride[0] - pad[0] + kz;
            if (iz < 0 || iz >= v.d) continue;
            for (int ky = 0; ky < window[1]; ++ky) {
              i64 iy = oy * stride[1] - pad[1] + ky;
              if (iy < 0 || iy >= v.h) continue;
              for (int kx = 0; kx < window[2]; ++kx) {
                i64 ix = ox * stride[2] - pad[2] + kx;
                if (ix < 0 || ix >= v.w) continue;
                i64 idx = (iz * v.h + iy) * v.w + ix;
                T val = src[idx];
                if (mode == PoolMode::kMax) {
                  if (best_idx < 0 || val > best) best = val, best_idx = idx;
                } else {
                  acc += val;
                }
              }
            }
          }
          if (mode == PoolMode::kMax) {
            out[o] = best;
            argmax[o] = pl * in_vol + best_idx;
          } else {
            out[o] = static_cast<T>(acc * inv_count);
          }
        }
  }

  Shape out_shape = shape_like(input.shape(), v.c, od, oh, ow);
  return BasicTensor<T>::make_result(
      std::move(out_shape), std::move(out), {input.node()},
      [mode, window, stride, pad, v, od, oh, ow, argmax = std::move(argmax), inv_count](TensorNode<T>& self) {
        auto& pin = *self.parents[0];
        T* gin = pin.grad_buffer();
        const T* gout = self.grad.data();
        if (mode == PoolMode::kMax) {
          for (std::size_t o = 0; o < argmax.size(); ++o) gin[argmax[o]] += gout[o];
          return;
        }
        const i64 in_vol = v.d * v.h * v.w, out_vol = od * oh * ow;
        for (i64 pl = 0; pl < v.n * v.c; ++pl)
          for (i64 oz = 0; oz < od; ++oz)
            for (i64 oy = 0; oy < oh; ++oy)
              for (i64 ox = 0; ox < ow; ++ox) {
                T gval = static_cast<T>(gout[pl * out_vol + (oz * oh + oy) * ow + ox] * inv_count);
                for (int kz = 0; kz < window[0]; ++kz) {
                  i64 iz = oz * stride[0] - pad[0] + kz;
                  if (iz < 0 || iz >= v.d) continue;
                  for (int ky = 0; ky < window[1]; ++ky) {
                    i64 iy = oy * stride[1] - pad[1] + ky;
                    if (iy < 0 || iy >= v.h) continue;
                    for (int kx = 0; kx < window[2]; ++kx) {
                      i64 ix = ox * stride[2] - pad[2] + kx;
                      if (ix < 0 || ix >= v.w) continue;
                      gin[pl * in_vol + (iz * v.h + iy) * v.w + ix] += gval;
                    }
                  }
                }
              }
      });
}

// ---------------------------------------------------------------------------
// group_norm

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& input, int num_groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps) {
  if (input.rank() < 2) throw ShapeError("group_norm: input must be [N, C, ...]");
  const i64 n = input.dim(0), c = input.dim(1);
  if (num_groups < 1 || c % num_groups != 0)
    throw ShapeError("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                     std::to_string(num_groups));
  for (const auto* p : {&gamma, &beta})
    if (p->defined() && (p->rank() != 1 || p->dim(0) != c))
      throw ShapeError("group_norm: affine parameters must be [" + std::to_string(c) + "]");
  const i64 spatial = input.numel() / (n * c), cpg = c / num_groups, m = cpg * spatial;
  const T* x = input.data().data();
  const T* gm = gamma.defined() ? gamma.data().data() : nullptr;
  const T* bt = beta.defined() ? beta.data().data() : nullptr;
  std::vector<T> out(static_cast<std::size_t>(input.numel()));
  std::vector<T> xhat(out.size());
  std::vector<double> rstd(static_cast<std::size_t>(n * num_groups));

  parallel_for(n * num_groups, 4, [&](i64 begin, i64 end) {
    for (i64 ng = begin; ng < end; ++ng) {
      i64 base = ng * m;  // groups are contiguous channel blocks
      double mean = 0;
      for (i64 i = 0; i < m; ++i) mean += x[base + i];
      mean /= static_cast<double>(m);
      double var = 0;
      for (i64 i = 0; i < m; ++i) {
        double d = x[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      double r = 1.0 / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(ng)] = r;
      i64 grp = ng % num_groups;
      for (i64 cc = 0; cc < cpg; ++cc) {
        i64 ch = grp * cpg + cc;
        T scale = gm ? gm[ch] : T(1), shift = bt ? bt[ch] : T(0);
        for (i64 s = 0; s < spatial; ++s) {
          i64 idx = base + cc * spatial + s;
          T xh = static_cast<T>((x[idx] - mean) * r);
          xhat[idx] = xh;
          out[idx] = xh * scale + shift;
        }
      }
    }
  });

  std::vector<std::shared_ptr<TensorNode<T>>> parents{input.node(), gamma.defined() ? gamma.node() : nullptr,
                                                     beta.defined() ? beta.node() : nullptr};
  return BasicTensor<T>::make_result(
      input.shape(), std::move(out), std::move(parents),
      [n, c, num_groups, spatial, cpg, m, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& self) {
        const T* gout = self.grad.data();
        auto& pin = *self.parents[0];
        auto* pg = self.parents[1].get();
        auto* pb = self.parents[2].get();
        const T* gm = pg ? pg->data.data() : nullptr;
        if (pin.requires_grad) {
          T* gin = pin.grad_buffer();
          parallel_for(n * num_groups, 4, [&](i64 begin, i64 end) {
            for (i64 ng = begin; ng < end; ++ng) {
              i64 base = ng * m, grp = ng % num_groups;
              double s1 = 0, s2 = 0;
              for (i64 cc = 0; cc < cpg; ++cc) {
                double sc = gm ? gm[grp * cpg + cc] : 1.0;
                for (i64 s = 0; s < spatial; ++s) {
                  i64 idx = base + cc * spatial + s;
                  double dxh = gout[idx] * sc;
                  s1 += dxh;
                  s2 += dxh * xhat[idx];
                }
              }
              double r = rstd[static_cast<std::size_t>(ng)], mm = static_cast<double>(m);
              for (i64 cc = 0; cc < cpg; ++cc) {
                double sc = gm ? gm[grp * cpg + cc] : 1.0;
                for (i64 s = 0; s < spatial; ++s) {
                  i64 idx = base + cc * spatial + s;
                  double dxh = gout[idx] * sc;
                  gin[idx] += static_cast<T>(r * (dxh - s1 / mm - xhat[idx] * s2 / mm));
                }
              }
            }
          });
        }
        if ((pg && pg->requires_grad) || (pb && pb->requires_grad)) {
          T* gg = pg && pg->requires_grad ? pg->grad_buffer() : nullptr;
          T* gb = pb && pb->requires_grad ? pb->grad_buffer() : nullptr;
          for (i64 nn = 0; nn < n; ++nn)
            for (i64 ch = 0; ch < c; ++ch) {
              double ag = 0, ab = 0;
              i64 base = (nn * c + ch) * spatial;
              for (i64 s = 0; s < spatial; ++s) {
                ag += gout[base + s] * xhat[base + s];
                ab += gout[base + s];
              }
              if (gg) gg[ch] += static_cast<T>(ag);
              if (gb) gb[ch] += static_cast<T>(ab);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [](TensorNode<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < p.data.size(); ++i)
      if (p.data[i] > T(0)) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-double(x.data()[i]))));
  return BasicTensor<T>::make_result(x.shape(), out, {x.node()}, [out](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < out.size(); ++i) g[i] += self.grad[i] * out[i] * (T(1) - out[i]);
  });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  require_same_shape(x, y, "add");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y.data()[i];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x.node(), y.node()}, [](TensorNode<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      T* g = p->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& x, const BasicTensor<T>& y) {
  require_same_shape(x, y, "mul");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y.data()[i];
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x.node(), y.node()}, [](TensorNode<T>& self) {
    auto& a = *self.parents[0];
    auto& b = *self.parents[1];
    if (a.requires_grad) {
      T* g = a.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b.data[i];
    }
    if (b.requires_grad) {
      T* g = b.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a.data[i];
    }
  });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T s) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= s;
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [s](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
  });
}

template <typename T>
BasicTensor<T> upsample2x_nearest(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x_nearest: expected [N, C, H, W], got " + shape_str(x.shape()));
  const i64 planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes * 4 * h * w));
  const T* src = x.data().data();
  for (i64 p = 0; p < planes; ++p)
    for (i64 y = 0; y < 2 * h; ++y)
      for (i64 xx = 0; xx < 2 * w; ++xx) out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
  return BasicTensor<T>::make_result({x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x.node()},
                                     [planes, h, w](TensorNode<T>& self) {
                                       T* g = self.parents[0]->grad_buffer();
                                       for (i64 p = 0; p < planes; ++p)
                                         for (i64 y = 0; y < 2 * h; ++y)
                                           for (i64 xx = 0; xx < 2 * w; ++xx)
                                             g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
                                     });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("reshape: extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x.node()}, [](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int dim, std::int64_t start, std::int64_t length) {
  if (dim < 0) dim += x.rank();
  if (dim < 0 || dim >= x.rank()) throw ShapeError("narrow: dimension out of range");
  const i64 extent = x.dim(dim);
  if (start < 0 || length < 1 || start + length > extent)
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside dimension " + std::to_string(dim) + " of extent " + std::to_string(extent));
  i64 outer = 1, inner = 1;
  for (int i = 0; i < dim; ++i) outer *= x.dim(i);
  for (int i = dim + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(dim)] = length;
  std::vector<T> out(static_cast<std::size_t>(outer * length * inner));
  const T* src = x.data().data();
  for (i64 o = 0; o < outer; ++o)
    std::copy_n(src + (o * extent + start) * inner, length * inner, out.data() + o * length * inner);
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {x.node()},
                                     [outer, inner, extent, start, length](TensorNode<T>& self) {
                                       T* g = self.parents[0]->grad_buffer();
                                       for (i64 o = 0; o < outer; ++o)
                                         for (i64 i = 0; i < length * inner; ++i)
                                           g[(o * extent + start) * inner + i] += self.grad[o * length * inner + i];
                                     });
}

template <typename T>
BasicTensor<T> concat_anchor_outputs(const std::vector<BasicTensor<T>>& levels, int values_per_anchor) {
  if (levels.empty()) throw ShapeError("concat_anchor_outputs: no levels");
  const i64 k = values_per_anchor, n = levels[0].dim(0);
  struct Level {
    i64 a, h, w, offset;
  };
  std::vector<Level> info;
  i64 total = 0;
  for (const auto& t : levels) {
    if (t.rank() != 4 || t.dim(0) != n || t.dim(1) % k != 0)
      throw ShapeError("concat_anchor_outputs: level shape " + shape_str(t.shape()) + " incompatible with " +
                       std::to_string(k) + " values per anchor");
    Level l{t.dim(1) / k, t.dim(2), t.dim(3), total};
    total += l.a * l.h * l.w;
    info.push_back(l);
  }
  std::vector<T> out(static_cast<std::size_t>(n * total * k));
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const auto& l = info[li];
    const T* src = levels[li].data().data();
    for (i64 b = 0; b < n; ++b)
      for (i64 a = 0; a < l.a; ++a)
        for (i64 j = 0; j < k; ++j)
          for (i64 y = 0; y < l.h; ++y)
            for (i64 x = 0; x < l.w; ++x) {
              i64 anchor = l.offset + (y * l.w + x) * l.a + a;
              out[(b * total + anchor) * k + j] = src[((b * l.a * k + a * k + j) * l.h + y) * l.w + x];
            }
    parents.push_back(levels[li].node());
  }
  return BasicTensor<T>::make_result({n, total, k}, std::move(out), std::move(parents),
                                     [info, n, k, total](TensorNode<T>& self) {
                                       for (std::size_t li = 0; li < info.size(); ++li) {
                                         auto& p = *self.parents[li];
                                         if (!p.requires_grad) continue;
                                         const auto& l = info[li];
                                         T* g = p.grad_buffer();
                                         for (i64 b = 0; b < n; ++b)
                                           for (i64 a = 0; a < l.a; ++a)
                                             for (i64 j = 0; j < k; ++j)
                                               for (i64 y = 0; y < l.h; ++y)
                                                 for (i64 x = 0; x < l.w; ++x) {
                                                   i64 anchor = l.offset + (y * l.w + x) * l.a + a;
                                                   g[((b * l.a * k + a * k + j) * l.h + y) * l.w + x] +=
                                                       self.grad[(b * total + anchor) * k + j];
                                                 }
                                       }
                                     });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  return BasicTensor<T>::make_result({1}, {static_cast<T>(acc)}, {x.node()}, [](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& x, const std::vector<T>& w) {
  if (static_cast<i64>(w.size()) != x.numel()) throw ShapeError("weighted_sum: weight count mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(x.data()[i]) * w[i];
  return BasicTensor<T>::make_result({1}, {static_cast<T>(acc)}, {x.node()}, [w](TensorNode<T>& self) {
    T* g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

// ---------------------------------------------------------------------------
// losses

template <typename T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& pred, const BasicTensor<T>& target, const BasicTensor<T>& weights) {
  require_same_shape(pred, target, "bce_with_logits");
  if (weights.defined()) require_same_shape(pred, weights, "bce_with_logits");
  const std::size_t m = pred.data().size();
  double wsum = 0, acc = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double w = weights.defined() ? weights.data()[i] : 1.0;
    if (w < 0) throw std::invalid_argument("bce_with_logits: weights must be nonnegative");
    if (w == 0) continue;
    double x = pred.data()[i], t = target.data()[i];
    acc += w * (std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x))));
    wsum += w;
  }
  double value = wsum > 0 ? acc / wsum : 0.0;
  std::vector<T> t(target.data().begin(), target.data().end());
  std::vector<T> w = weights.defined() ? std::vector<T>(weights.data().begin(), weights.data().end()) : std::vector<T>{};
  return BasicTensor<T>::make_result({1}, {static_cast<T>(value)}, {pred.node()},
                                     [t = std::move(t), w = std::move(w), wsum](TensorNode<T>& self) {
                                       if (wsum <= 0) return;
                                       auto& p = *self.parents[0];
                                       T* g = p.grad_buffer();
                                       double scale = self.grad[0] / wsum;
                                       for (std::size_t i = 0; i < p.data.size(); ++i) {
                                         double wi = w.empty() ? 1.0 : w[i];
                                         if (wi == 0) continue;
                                         double s = 1.0 / (1.0 + std::exp(-double(p.data[i])));
                                         g[i] += static_cast<T>(scale * wi * (s - t[i]));
                                       }
                                     });
}

template <typename T>
BasicTensor<T> smooth_l1(const BasicTensor<T>& pred, const BasicTensor<T>& target, double beta,
                         const BasicTensor<T>& weights) {
  require_same_shape(pred, target, "smooth_l1");
  if (weights.defined()) require_same_shape(pred, weights, "smooth_l1");
  if (beta <= 0) throw std::invalid_argument("smooth_l1: beta must be positive");
  const std::size_t m = pred.data().size();
  double wsum = 0, acc = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double w = weights.defined() ? weights.data()[i] : 1.0;
    if (w < 0) throw std::invalid_argument("smooth_l1: weights must be nonnegative");
    if (w == 0) continue;
    double d = double(pred.data()[i]) - target.data()[i], ad = std::abs(d);
    acc += w * (ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta);
    wsum += w;
  }
  double value = wsum > 0 ? acc / wsum : 0.0;
  std::vector<T> t(target.data().begin(), target.data().end());
  std::vector<T> w = weights.defined() ? std::vector<T>(weights.data().begin(), weights.data().end()) : std::vector<T>{};
  return BasicTensor<T>::make_result({1}, {static_cast<T>(value)}, {pred.node()},
                                     [t = std::move(t), w = std::move(w), wsum, beta](TensorNode<T>& self) {
                                       if (wsum <= 0) return;
                                       auto& p = *self.parents[0];
                                       T* g = p.grad_buffer();
                                       double scale = self.grad[0] / wsum;
                                       for (std::size_t i = 0; i < p.data.size(); ++i) {
                                         double wi = w.empty() ? 1.0 : w[i];
                                         if (wi == 0) continue;
                                         double d = double(p.data[i]) - t[i];
                                         double gd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
                                         g[i] += static_cast<T>(scale * wi * gd);
                                       }
                                     });
}

#define MP3D_INSTANTIATE_OPS(T)                                                                                     \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,              \
                                 const ConvOptions&);                                                               \
  template BasicTensor<T> pool3d(const BasicTensor<T>&, PoolMode, Triple, Triple, Triple);                          \
  template BasicTensor<T> group_norm(const BasicTensor<T>&, int, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                     double);                                                                       \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                              \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                           \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                        \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> upsample2x_nearest(const BasicTensor<T>&);                                                \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                                    \
  template BasicTensor<T> narrow(const BasicTensor<T>&, int, std::int64_t, std::int64_t);                           \
  template BasicTensor<T> concat_anchor_outputs(const std::vector<BasicTensor<T>>&, int);                           \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                               \
  template BasicTensor<T> weighted_sum(const BasicTensor<T>&, const std::vector<T>&);                               \
  template BasicTensor<T> bce_with_logits(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);     \
  template BasicTensor<T> smooth_l1(const BasicTensor<T>&, const BasicTensor<T>&, double, const BasicTensor<T>&);

MP3D_INSTANTIATE_OPS(float)
MP3D_INSTANTIATE_OPS(double)

#undef MP3D_INSTANTIATE_OPS

}  // namespace mp3d
