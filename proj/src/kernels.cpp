#include "shortcut/kernels.hpp"

#include <Eigen/Core>
#include <stdexcept>

namespace shortcut::kernels {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

struct Dims {
  std::size_t n, ci, h, w, co, kh, kw, oh, ow;
};

Dims conv_dims(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4 || w.size() != 4) throw std::invalid_argument("conv2d expects rank-4 tensors");
  if (x[1] != w[1]) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(x[1]) +
                                " channels, kernel expects " + std::to_string(w[1]));
  }
  const std::size_t hp = x[2] + 2 * g.pad_h;
  const std::size_t wp = x[3] + 2 * g.pad_w;
  if (hp < w[2] || wp < w[3]) throw std::invalid_argument("conv2d: kernel larger than input");
  return {x[0], x[1], x[2], x[3], w[0], w[2], w[3], hp - w[2] + 1, wp - w[3] + 1};
}

// col[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy + i - ph, ox + j - pw]
void im2col(const double* x, const Dims& d, ConvGeometry g, double* col) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t c = 0; c < d.ci; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = col + ((c * d.kh + i) * d.kw + j) * plane;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) -
                                    static_cast<std::ptrdiff_t>(g.pad_h);
          double* dst = row + oy * d.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(dst, dst + d.ow, 0.0);
            continue;
          }
          const double* src = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + j) -
                                      static_cast<std::ptrdiff_t>(g.pad_w);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* col, const Dims& d, ConvGeometry g, double* x) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t c = 0; c < d.ci; ++c) {
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = col + ((c * d.kh + i) * d.kw + j) * plane;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + i) -
                                    static_cast<std::ptrdiff_t>(g.pad_h);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.h)) continue;
          double* dst = x + (c * d.h + static_cast<std::size_t>(iy)) * d.w;
          const double* src = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + j) -
                                      static_cast<std::ptrdiff_t>(g.pad_w);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g) {
  const Dims d = conv_dims(x.shape(), w.shape(), g);
  Tensor y({d.n, d.co, d.oh, d.ow});
  const std::size_t k = d.ci * d.kh * d.kw;
  const std::size_t plane = d.oh * d.ow;
  std::vector<double> col(k * plane);
  ConstMapMatrix wm(w.data(), static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data() + n * d.ci * d.h * d.w, d, g, col.data());
    ConstMapMatrix cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    MapMatrix ym(y.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
                 static_cast<Eigen::Index>(plane));
    ym.noalias() = wm * cm;
  }
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape,
                         ConvGeometry g) {
  const Dims d = conv_dims(x_shape, w.shape(), g);
  if (gy.shape() != Shape{d.n, d.co, d.oh, d.ow}) {
    throw std::invalid_argument("conv2d_input_grad: gradient shape " + shape_string(gy.shape()));
  }
  Tensor gx(x_shape);
  const std::size_t k = d.ci * d.kh * d.kw;
  const std::size_t plane = d.oh * d.ow;
  std::vector<double> col(k * plane);
  ConstMapMatrix wm(w.data(), static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < d.n; ++n) {
    ConstMapMatrix gm(gy.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
                      static_cast<Eigen::Index>(plane));
    MapMatrix cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    cm.noalias() = wm.transpose() * gm;
    col2im(col.data(), d, g, gx.data() + n * d.ci * d.h * d.w);
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape,
                          ConvGeometry g) {
  const Dims d = conv_dims(x.shape(), w_shape, g);
  if (gy.shape() != Shape{d.n, d.co, d.oh, d.ow}) {
    throw std::invalid_argument("conv2d_weight_grad: gradient shape " + shape_string(gy.shape()));
  }
  Tensor gw(w_shape);
  const std::size_t k = d.ci * d.kh * d.kw;
  const std::size_t plane = d.oh * d.ow;
  std::vector<double> col(k * plane);
  MapMatrix wm(gw.data(), static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(k));
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data() + n * d.ci * d.h * d.w, d, g, col.data());
    ConstMapMatrix cm(col.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(plane));
    ConstMapMatrix gm(gy.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
                      static_cast<Eigen::Index>(plane));
    wm.noalias() += gm * cm.transpose();
  }
  return gw;
}

PoolResult max_pool(const Tensor& x, std::size_t kh, std::size_t kw) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool expects rank-4 input");
  if (kh == 0 || kw == 0 || kh > x.dim(2) || kw > x.dim(3)) {
    throw std::invalid_argument("max_pool: window does not fit input " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / kh, ow = w / kw;
  Tensor y({n, c, oh, ow});
  auto idx = std::make_shared<std::vector<std::size_t>>(y.size());
  std::size_t o = 0;
  for (std::size_t b = 0; b < n * c; ++b) {
    const std::size_t base = b * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + (oy * kh) * w + ox * kw;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t p = base + (oy * kh + i) * w + ox * kw + j;
            if (x[p] > x[best]) best = p;
          }
        }
        (*idx)[o] = best;
        y[o] = x[best];
      }
    }
  }
  return {std::move(y), std::move(idx)};
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& index, const Shape& out_shape) {
  Tensor y(out_shape);
  if (y.size() != index.size()) throw std::invalid_argument("gather: index size mismatch");
  for (std::size_t i = 0; i < index.size(); ++i) y[i] = x[index[i]];
  return y;
}

Tensor scatter(const Tensor& y, const std::vector<std::size_t>& index, const Shape& in_shape) {
  Tensor x(in_shape);
  if (y.size() != index.size()) throw std::invalid_argument("scatter: index size mismatch");
  for (std::size_t i = 0; i < index.size(); ++i) x[index[i]] += y[i];
  return x;
}

Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("channel_sum needs rank >= 2");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t inner = x.size() / (n * c);
  Tensor out({c});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (b * c + ch) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += p[i];
      out[ch] += s;
    }
  }
  return out;
}

Tensor channel_broadcast(const Tensor& per_channel, const Shape& shape) {
  Tensor out(shape);
  const std::size_t n = shape.at(0), c = shape.at(1);
  if (per_channel.size() != c) throw std::invalid_argument("channel_broadcast: channel mismatch");
  const std::size_t inner = out.size() / (n * c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.data() + (b * c + ch) * inner;
      std::fill(p, p + inner, per_channel[ch]);
    }
  }
  return out;
}

}  // namespace shortcut::kernels
