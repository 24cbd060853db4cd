#include "mg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>

namespace mg {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

struct Geometry4 {
  std::int64_t n, c, h, w;
  bool batched;
};

Geometry4 image_geometry(const Tensor& t, const char* op) {
  if (t.ndim() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.ndim() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(t.shape()));
}

Shape image_shape(const Geometry4& g, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (g.batched) return {g.n, c, h, w};
  return {c, h, w};
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string(op) + ": non-finite value in output");
}

// Unfolds one [C,H,W] image into a (C*kh*kw) x (Ho*Wo) row-major matrix.
void im2col(const float* img, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, int stride, int pad, std::int64_t ho, std::int64_t wo, float* col) {
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* plane = img + ch * h * w;
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        float* row = col + ((ch * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          float* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = plane + iy * w;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t kh,
                std::int64_t kw, int stride, int pad, std::int64_t ho, std::int64_t wo, float* img) {
  for (std::int64_t ch = 0; ch < c; ++ch) {
    float* plane = img + ch * h * w;
    for (std::int64_t ki = 0; ki < kh; ++ki) {
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const float* row = col + ((ch * kh + ki) * kw + kj) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          float* dst = plane + iy * w;
          const float* src = row + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

namespace {
thread_local BranchTrace* active_trace = nullptr;
}  // namespace

BranchTrace::BranchTrace(Kind kind, const BranchTrace* source)
    : kind_(kind), source_(source), previous_(active_trace) {
  if (kind_ == Kind::Replay && !source_) throw std::logic_error("BranchTrace: replay needs a recorded source");
  active_trace = this;
}

BranchTrace::~BranchTrace() { stop(); }

void BranchTrace::stop() {
  if (stopped_) return;
  if (active_trace != this) throw std::logic_error("BranchTrace: traces must stop in reverse order of creation");
  active_trace = previous_;
  stopped_ = true;
}

BranchTrace* BranchTrace::current() { return active_trace; }

std::vector<std::uint8_t> BranchTrace::sides(std::span<const float> x) {
  std::vector<std::uint8_t> natural(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) natural[i] = x[i] > 0.0f ? 1 : 0;
  if (kind_ == Kind::Record) {
    sides_.push_back(natural);
    return natural;
  }
  if (side_cursor_ >= source_->sides_.size() || source_->sides_[side_cursor_].size() != x.size()) {
    throw std::logic_error("BranchTrace: replayed graph differs from the recorded one");
  }
  const auto& recorded = source_->sides_[side_cursor_++];
  diverged_ = diverged_ || recorded != natural;
  return recorded;
}

std::vector<std::int64_t> BranchTrace::winners(std::vector<std::int64_t> natural) {
  if (kind_ == Kind::Record) {
    winners_.push_back(natural);
    return natural;
  }
  if (winner_cursor_ >= source_->winners_.size() || source_->winners_[winner_cursor_].size() != natural.size()) {
    throw std::logic_error("BranchTrace: replayed graph differs from the recorded one");
  }
  const auto& recorded = source_->winners_[winner_cursor_++];
  diverged_ = diverged_ || recorded != natural;
  return recorded;
}

// ---------------------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  const auto g = image_geometry(input, "conv2d");
  if (kernel.ndim() != 4) throw DimensionError("conv2d: kernel must be [C_out,C_in,kh,kw], got " + shape_str(kernel.shape()));
  const auto cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d: input has " + std::to_string(g.c) + " channels but kernel expects " +
                         std::to_string(kernel.dim(1)));
  }
  if (bias.ndim() != 1 || bias.dim(0) != cout) throw DimensionError("conv2d: bias must be [C_out]");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (padding < 0) throw ParameterError("conv2d: padding must be >= 0");
  if (kh > g.h + 2 * padding || kw > g.w + 2 * padding) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  const std::int64_t ho = (g.h + 2 * padding - kh) / stride + 1;
  const std::int64_t wo = (g.w + 2 * padding - kw) / stride + 1;
  const std::int64_t k = g.c * kh * kw, p = ho * wo;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  Tensor out(image_shape(g, cout, ho, wo));
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(k * p));
  // forward products accumulate in double and round once; this keeps loss
  // evaluations smooth enough for finite differences at h = 1e-3
  const Eigen::MatrixXd wmat = CMapRM(kernel.data().data(), cout, k).cast<double>();
  const Eigen::VectorXd bvec = Eigen::Map<const Eigen::VectorXf>(bias.data().data(), cout).cast<double>();
  const auto in = input.data();
  auto o = out.data();
  for (std::int64_t n = 0; n < g.n; ++n) {
    const float* img = in.data() + n * g.c * g.h * g.w;
    const float* colp = img;
    if (!direct) {
      im2col(img, g.c, g.h, g.w, kh, kw, stride, padding, ho, wo, col.data());
      colp = col.data();
    }
    MapRM y(o.data() + n * cout * p, cout, p);
    Eigen::MatrixXd acc = wmat * CMapRM(colp, k, p).cast<double>();
    acc.colwise() += bvec;
    y = acc.cast<float>();
  }

  if (tape.tracks({&input, &kernel, &bias})) {
    tape.record("conv2d", {input, kernel, bias}, out,
                [input = Tensor(input), kernel = Tensor(kernel), bias = Tensor(bias), out, g, cout, kh, kw, ho, wo, k, p, stride, padding, direct]() mutable {
                  const auto gy = std::as_const(out).grad();
                  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(k * p));
                  std::vector<float> dcol(static_cast<std::size_t>(k * p));
                  CMapRM wmat(kernel.data().data(), cout, k);
                  const auto in = input.data();
                  for (std::int64_t n = 0; n < g.n; ++n) {
                    CMapRM dy(gy.data() + n * cout * p, cout, p);
                    const float* img = in.data() + n * g.c * g.h * g.w;
                    if (kernel.requires_grad()) {
                      const float* colp = img;
                      if (!direct) {
                        im2col(img, g.c, g.h, g.w, kh, kw, stride, padding, ho, wo, col.data());
                        colp = col.data();
                      }
                      MapRM dw(kernel.grad().data(), cout, k);
                      dw.noalias() += dy * CMapRM(colp, k, p).transpose();
                    }
                    if (bias.requires_grad()) {
                      auto db = bias.grad();
                      for (std::int64_t co = 0; co < cout; ++co) {
                        double s = 0.0;
                        for (std::int64_t j = 0; j < p; ++j) s += dy(co, j);
                        db[static_cast<std::size_t>(co)] += static_cast<float>(s);
                      }
                    }
                    if (input.requires_grad()) {
                      float* dimg = input.grad().data() + n * g.c * g.h * g.w;
                      if (direct) {
                        MapRM(dimg, k, p).noalias() += wmat.transpose() * dy;
                      } else {
                        MapRM(dcol.data(), k, p).noalias() = wmat.transpose() * dy;
                        col2im_add(dcol.data(), g.c, g.h, g.w, kh, kw, stride, padding, ho, wo, dimg);
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor max_pool2d(Tape& tape, const Tensor& input, int window, int stride) {
  const auto g = image_geometry(input, "max_pool2d");
  if (window < 1 || stride < 1) throw ParameterError("max_pool2d: window and stride must be >= 1");
  if (window > g.h || window > g.w) {
    throw DimensionError("max_pool2d: window " + std::to_string(window) + " larger than input " +
                         shape_str(input.shape()));
  }
  const std::int64_t ho = (g.h - window) / stride + 1, wo = (g.w - window) / stride + 1;
  Tensor out(image_shape(g, g.c, ho, wo));
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  const auto in = input.data();
  auto o = out.data();
  std::int64_t idx = 0;
  for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
    const std::int64_t base = plane * g.h * g.w;
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox, ++idx) {
        std::int64_t best = base + oy * stride * g.w + ox * stride;
        for (int dy = 0; dy < window; ++dy) {
          for (int dx = 0; dx < window; ++dx) {
            const std::int64_t at = base + (oy * stride + dy) * g.w + ox * stride + dx;
            if (in[static_cast<std::size_t>(at)] > in[static_cast<std::size_t>(best)] || std::isnan(in[static_cast<std::size_t>(at)])) best = at;
          }
        }
        o[static_cast<std::size_t>(idx)] = in[static_cast<std::size_t>(best)];
        (*argmax)[static_cast<std::size_t>(idx)] = best;
      }
    }
  }
  if (auto* trace = BranchTrace::current()) {
    *argmax = trace->winners(std::move(*argmax));
    for (std::size_t i = 0; i < argmax->size(); ++i) o[i] = in[static_cast<std::size_t>((*argmax)[i])];
  }
  if (tape.tracks({&input})) {
    tape.record("max_pool2d", {input}, out, [input = Tensor(input), out, argmax]() mutable {
      const auto gy = std::as_const(out).grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < argmax->size(); ++i) gx[static_cast<std::size_t>((*argmax)[i])] += gy[i];
    });
  }
  return out;
}

Tensor upsample_nearest2x(Tape& tape, const Tensor& input) {
  const auto g = image_geometry(input, "upsample_nearest2x");
  const std::int64_t ho = g.h * 2, wo = g.w * 2;
  Tensor out(image_shape(g, g.c, ho, wo));
  const auto in = input.data();
  auto o = out.data();
  for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
    for (std::int64_t y = 0; y < ho; ++y) {
      for (std::int64_t x = 0; x < wo; ++x) {
        o[static_cast<std::size_t>((plane * ho + y) * wo + x)] =
            in[static_cast<std::size_t>((plane * g.h + y / 2) * g.w + x / 2)];
      }
    }
  }
  if (tape.tracks({&input})) {
    tape.record("upsample_nearest2x", {input}, out, [input = Tensor(input), out, g, ho, wo]() mutable {
      const auto gy = std::as_const(out).grad();
      auto gx = input.grad();
      for (std::int64_t plane = 0; plane < g.n * g.c; ++plane) {
        for (std::int64_t y = 0; y < ho; ++y) {
          for (std::int64_t x = 0; x < wo; ++x) {
            gx[static_cast<std::size_t>((plane * g.h + y / 2) * g.w + x / 2)] +=
                gy[static_cast<std::size_t>((plane * ho + y) * wo + x)];
          }
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto ga = image_geometry(a, "concat_channels");
  const auto gb = image_geometry(b, "concat_channels");
  if (ga.batched != gb.batched || ga.n != gb.n || ga.h != gb.h || ga.w != gb.w) {
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::int64_t hw = ga.h * ga.w, c = ga.c + gb.c;
  Tensor out(image_shape(ga, c, ga.h, ga.w));
  const auto da = a.data();
  const auto db = b.data();
  auto o = out.data();
  for (std::int64_t n = 0; n < ga.n; ++n) {
    std::copy_n(da.begin() + n * ga.c * hw, ga.c * hw, o.begin() + n * c * hw);
    std::copy_n(db.begin() + n * gb.c * hw, gb.c * hw, o.begin() + n * c * hw + ga.c * hw);
  }
  if (tape.tracks({&a, &b})) {
    tape.record("concat_channels", {a, b}, out, [a = Tensor(a), b = Tensor(b), out, ga, gb, hw, c]() mutable {
      const auto gy = std::as_const(out).grad();
      for (std::int64_t n = 0; n < ga.n; ++n) {
        if (a.requires_grad()) {
          auto gx = a.grad();
          for (std::int64_t i = 0; i < ga.c * hw; ++i) {
            gx[static_cast<std::size_t>(n * ga.c * hw + i)] += gy[static_cast<std::size_t>(n * c * hw + i)];
          }
        }
        if (b.requires_grad()) {
          auto gx = b.grad();
          for (std::int64_t i = 0; i < gb.c * hw; ++i) {
            gx[static_cast<std::size_t>(n * gb.c * hw + i)] +=
                gy[static_cast<std::size_t>(n * c * hw + ga.c * hw + i)];
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample_block(Tape& tape, const Tensor& input, const Tensor& skip, const Tensor& kernel,
                      const Tensor& bias, ActivationSpec act) {
  const auto gi = image_geometry(input, "upsample_block");
  const auto gs = image_geometry(skip, "upsample_block");
  if (gs.h != 2 * gi.h || gs.w != 2 * gi.w) {
    throw DimensionError("upsample_block: skip " + shape_str(skip.shape()) +
                         " does not match 2x upsampled input " + shape_str(input.shape()));
  }
  const int pad = static_cast<int>(kernel.dim(2) / 2);
  auto up = upsample_nearest2x(tape, input);
  auto joined = concat_channels(tape, up, skip);
  return activation(tape, conv2d(tape, joined, kernel, bias, 1, pad), act);
}

// ---------------------------------------------------------------------------

Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2) throw DimensionError("linear: expected 2-D input and weight");
  const auto n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw DimensionError("linear: input has " + std::to_string(din) + " features but weight expects " +
                         std::to_string(weight.dim(1)));
  }
  if (bias.ndim() != 1 || bias.dim(0) != dout) throw DimensionError("linear: bias must be [d_out]");
  Tensor out({n, dout});
  CMapRM x(input.data().data(), n, din);
  CMapRM w(weight.data().data(), dout, din);
  MapRM y(out.data().data(), n, dout);
  Eigen::MatrixXd acc = x.cast<double>() * w.cast<double>().transpose();
  acc.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), dout).cast<double>();
  y = acc.cast<float>();
  if (tape.tracks({&input, &weight, &bias})) {
    tape.record("linear", {input, weight, bias}, out, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, n, din, dout]() mutable {
      CMapRM dy(std::as_const(out).grad().data(), n, dout);
      if (input.requires_grad()) {
        MapRM(input.grad().data(), n, din).noalias() += dy * CMapRM(weight.data().data(), dout, din);
      }
      if (weight.requires_grad()) {
        MapRM(weight.grad().data(), dout, din).noalias() += dy.transpose() * CMapRM(input.data().data(), n, din);
      }
      if (bias.requires_grad()) {
        auto db = bias.grad();
        for (std::int64_t j = 0; j < dout; ++j) {
          double s = 0.0;
          for (std::int64_t i = 0; i < n; ++i) s += dy(i, j);
          db[static_cast<std::size_t>(j)] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

Tensor flatten(Tape& tape, const Tensor& input) {
  if (input.ndim() < 2) throw DimensionError("flatten: expected at least 2 axes");
  const auto n = input.dim(0);
  Tensor out = input.reshaped({n, input.numel() / n});
  if (tape.tracks({&input})) {
    tape.record("flatten", {input}, out, [input = Tensor(input), out]() mutable {
      const auto gy = std::as_const(out).grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const Tensor& input, const char* name, Fwd fwd, Deriv deriv) {
  Tensor out(input.shape());
  const auto in = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(in[i]);
  if (tape.tracks({&input})) {
    tape.record(name, {input}, out, [input = Tensor(input), out, deriv]() mutable {
      const auto gy = std::as_const(out).grad();
      const auto x = input.data();
      const auto y = out.data();
      auto gx = input.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(x[i], y[i]);
    });
  }
  return out;
}

// y = x on the positive side, slope * x on the other, with the side of every element given.
Tensor forced_piecewise(Tape& tape, const Tensor& input, float slope, std::vector<std::uint8_t> sides) {
  Tensor out(input.shape());
  const auto in = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = sides[i] ? in[i] : slope * in[i];
  if (tape.tracks({&input})) {
    tape.record("piecewise", {input}, out, [input = Tensor(input), out, slope, sides = std::move(sides)]() mutable {
      const auto gy = std::as_const(out).grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += sides[i] ? gy[i] : slope * gy[i];
    });
  }
  return out;
}

}  // namespace

Tensor relu(Tape& tape, const Tensor& input) {
  if (auto* trace = BranchTrace::current()) return forced_piecewise(tape, input, 0.0f, trace->sides(input.data()));
  return unary(
      tape, input, "relu", [](float x) { return x > 0.0f || std::isnan(x) ? x : 0.0f; },  // NaN propagates
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor leaky_relu(Tape& tape, const Tensor& input, float slope) {
  if (auto* trace = BranchTrace::current()) return forced_piecewise(tape, input, slope, trace->sides(input.data()));
  return unary(
      tape, input, "leaky_relu", [slope](float x) { return x > 0.0f ? x : slope * x; },
      [slope](float x, float) { return x > 0.0f ? 1.0f : slope; });
}

Tensor sigmoid(Tape& tape, const Tensor& input) {
  return unary(
      tape, input, "sigmoid",
      [](float x) {
        if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
        const float e = std::exp(x);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor activation(Tape& tape, const Tensor& input, ActivationSpec act) {
  switch (act.kind) {
    case Activation::Relu: return relu(tape, input);
    case Activation::LeakyRelu: return leaky_relu(tape, input, act.slope);
    case Activation::Sigmoid: return sigmoid(tape, input);
    case Activation::None: return input;
  }
  return input;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const auto da = a.data();
  const auto db = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] + db[i];
  if (tape.tracks({&a, &b})) {
    tape.record("add", {a, b}, out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      const auto gy = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto g = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const auto da = a.data();
  const auto db = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = da[i] * db[i];
  if (tape.tracks({&a, &b})) {
    tape.record("mul", {a, b}, out, [a = Tensor(a), b = Tensor(b), out]() mutable {
      const auto gy = std::as_const(out).grad();
      const auto da = a.data();
      const auto db = b.data();
      if (a.requires_grad()) {
        auto g = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * db[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * da[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, float factor) {
  return unary(
      tape, a, "scale", [factor](float x) { return x * factor; }, [factor](float, float) { return factor; });
}

Tensor sum(Tape& tape, const Tensor& input) {
  double s = 0.0;
  for (float v : input.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (tape.tracks({&input})) {
    tape.record("sum", {input}, out, [input = Tensor(input), out]() mutable {
      const float gy = std::as_const(out).grad()[0];
      for (auto& g : input.grad()) g += gy;
    });
  }
  return out;
}

Tensor pick(Tape& tape, const Tensor& input, std::int64_t flat_index) {
  if (flat_index < 0 || flat_index >= input.numel()) throw DimensionError("pick: index out of range");
  Tensor out = Tensor::scalar(input.at(flat_index));
  if (tape.tracks({&input})) {
    tape.record("pick", {input}, out, [input = Tensor(input), out, flat_index]() mutable {
      input.grad()[static_cast<std::size_t>(flat_index)] += std::as_const(out).grad()[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor batch_norm2d(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                    BatchNormState& state, Mode mode) {
  if (input.ndim() != 4) throw DimensionError("batch_norm2d: expected [N,C,H,W], got " + shape_str(input.shape()));
  const auto n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (t->ndim() != 1 || t->dim(0) != c) throw DimensionError("batch_norm2d: per-channel tensors must be [C]");
  }
  const std::int64_t m = n * hw;
  if (mode == Mode::Train && m < 2) {
    throw DimensionError("batch_norm2d: degenerate variance, train mode needs at least 2 values per channel");
  }
  Tensor out(input.shape());
  auto xhat = std::make_shared<std::vector<float>>(static_cast<std::size_t>(input.numel()));
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(c));
  const auto x = input.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  auto rm = state.running_mean.data();
  auto rv = state.running_var.data();
  auto y = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const auto cc = static_cast<std::size_t>(ch);
    double mean, var;
    if (mode == Mode::Train) {
      double s = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < hw; ++j) s += x[static_cast<std::size_t>((i * c + ch) * hw + j)];
      mean = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < hw; ++j) {
          const double d = x[static_cast<std::size_t>((i * c + ch) * hw + j)] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(m);
      const double unbiased = ss / static_cast<double>(m - 1);
      rm[cc] = static_cast<float>((1.0 - state.momentum) * rm[cc] + state.momentum * mean);
      rv[cc] = static_cast<float>((1.0 - state.momentum) * rv[cc] + state.momentum * unbiased);
    } else {
      mean = rm[cc];
      var = rv[cc];
    }
    const double istd = 1.0 / std::sqrt(var + state.eps);
    (*inv_std)[cc] = static_cast<float>(istd);
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < hw; ++j) {
        const auto at = static_cast<std::size_t>((i * c + ch) * hw + j);
        const float xh = static_cast<float>((x[at] - mean) * istd);
        (*xhat)[at] = xh;
        y[at] = gm[cc] * xh + bt[cc];
      }
    }
  }
  if (tape.tracks({&input, &gamma, &beta})) {
    tape.record("batch_norm2d", {input, gamma, beta}, out,
                [input = Tensor(input), gamma = Tensor(gamma), beta = Tensor(beta), out, xhat, inv_std, n, c, hw, m, mode]() mutable {
                  const auto gy = std::as_const(out).grad();
                  const auto gm = gamma.data();
                  for (std::int64_t ch = 0; ch < c; ++ch) {
                    const auto cc = static_cast<std::size_t>(ch);
                    double sum_dy = 0.0, sum_dy_xh = 0.0;
                    for (std::int64_t i = 0; i < n; ++i) {
                      for (std::int64_t j = 0; j < hw; ++j) {
                        const auto at = static_cast<std::size_t>((i * c + ch) * hw + j);
                        sum_dy += gy[at];
                        sum_dy_xh += static_cast<double>(gy[at]) * (*xhat)[at];
                      }
                    }
                    if (gamma.requires_grad()) gamma.grad()[cc] += static_cast<float>(sum_dy_xh);
                    if (beta.requires_grad()) beta.grad()[cc] += static_cast<float>(sum_dy);
                    if (!input.requires_grad()) continue;
                    auto gx = input.grad();
                    const double scale_c = static_cast<double>(gm[cc]) * (*inv_std)[cc];
                    const double md = static_cast<double>(m);
                    for (std::int64_t i = 0; i < n; ++i) {
                      for (std::int64_t j = 0; j < hw; ++j) {
                        const auto at = static_cast<std::size_t>((i * c + ch) * hw + j);
                        if (mode == Mode::Train) {
                          gx[at] += static_cast<float>(scale_c * (gy[at] - sum_dy / md - (*xhat)[at] * sum_dy_xh / md));
                        } else {
                          gx[at] += static_cast<float>(scale_c * gy[at]);
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

Tensor dropout(Tape& tape, const Tensor& input, float rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0f && rate < 1.0f)) throw ParameterError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  if (mode == Mode::Eval || rate == 0.0f) return input;
  Tensor out(input.shape());
  auto mask = std::make_shared<std::vector<float>>(static_cast<std::size_t>(input.numel()));
  const float keep_scale = 1.0f / (1.0f - rate);
  const auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool drop = std::generate_canonical<double, 53>(rng) < rate;
    (*mask)[i] = drop ? 0.0f : keep_scale;
    y[i] = x[i] * (*mask)[i];
  }
  if (tape.tracks({&input})) {
    tape.record("dropout", {input}, out, [input = Tensor(input), out, mask]() mutable {
      const auto gy = std::as_const(out).grad();
      auto gx = input.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (*mask)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_logits(const Tensor& logits, std::span<const int> labels, const char* op) {
  if (logits.ndim() != 2) throw DimensionError(std::string(op) + ": logits must be [N,K]");
  if (logits.dim(1) < 2) throw DimensionError(std::string(op) + ": need at least 2 classes");
  if (static_cast<std::int64_t>(labels.size()) != logits.dim(0)) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.dim(0)) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.dim(1)) throw ParameterError(std::string(op) + ": label " + std::to_string(y) + " out of range");
  }
}

// Row-wise stabilized softmax in double precision.
std::vector<double> softmax_rows(const Tensor& logits, std::vector<double>* log_norm = nullptr) {
  const auto n = logits.dim(0), k = logits.dim(1);
  const auto z = logits.data();
  std::vector<double> p(static_cast<std::size_t>(n * k));
  if (log_norm) log_norm->assign(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < k; ++j) mx = std::max<double>(mx, z[static_cast<std::size_t>(i * k + j)]);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(z[static_cast<std::size_t>(i * k + j)] - mx);
    for (std::int64_t j = 0; j < k; ++j) {
      p[static_cast<std::size_t>(i * k + j)] = std::exp(z[static_cast<std::size_t>(i * k + j)] - mx) / s;
    }
    if (log_norm) (*log_norm)[static_cast<std::size_t>(i)] = mx + std::log(s);
  }
  return p;
}

}  // namespace

Tensor softmax(Tape& tape, const Tensor& logits) {
  if (logits.ndim() != 2) throw DimensionError("softmax: logits must be [N,K]");
  const auto n = logits.dim(0), k = logits.dim(1);
  const auto p = softmax_rows(logits);
  Tensor out(logits.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(p[i]);
  if (tape.tracks({&logits})) {
    tape.record("softmax", {logits}, out, [logits = Tensor(logits), out, n, k]() mutable {
      const auto gy = std::as_const(out).grad();
      const auto y = out.data();
      auto gx = logits.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
          const auto at = static_cast<std::size_t>(i * k + j);
          dot += static_cast<double>(gy[at]) * y[at];
        }
        for (std::int64_t j = 0; j < k; ++j) {
          const auto at = static_cast<std::size_t>(i * k + j);
          gx[at] += static_cast<float>(y[at] * (gy[at] - dot));
        }
      }
    });
  }
  return out;
}

std::vector<float> cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels, "cross_entropy_per_sample");
  const auto n = logits.dim(0), k = logits.dim(1);
  std::vector<double> log_norm;
  softmax_rows(logits, &log_norm);
  std::vector<float> out(static_cast<std::size_t>(n));
  const auto z = logits.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    out[ii] = static_cast<float>(log_norm[ii] - z[static_cast<std::size_t>(i * k + labels[ii])]);
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels, "softmax_cross_entropy");
  const auto n = logits.dim(0), k = logits.dim(1);
  std::vector<double> log_norm;
  auto p = std::make_shared<std::vector<double>>(softmax_rows(logits, &log_norm));
  const auto z = logits.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    total += log_norm[ii] - z[static_cast<std::size_t>(i * k + labels[ii])];
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(n)));
  require_finite(out, "softmax_cross_entropy");
  if (tape.tracks({&logits})) {
    std::vector<int> y(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", {logits}, out, [logits = Tensor(logits), out, p, y, n, k]() mutable {
      const double gy = std::as_const(out).grad()[0];
      auto gx = logits.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const auto at = static_cast<std::size_t>(i * k + j);
          const double onehot = (j == y[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
          gx[at] += static_cast<float>(gy * ((*p)[at] - onehot) / static_cast<double>(n));
        }
      }
    });
  }
  return out;
}

Tensor mse_loss(Tape& tape, const Tensor& reconstruction, const Tensor& target) {
  check_same_shape(reconstruction, target, "mse_loss");
  const auto a = reconstruction.data();
  const auto b = target.data();
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  const double count = static_cast<double>(a.size());
  Tensor out = Tensor::scalar(static_cast<float>(s / count));
  require_finite(out, "mse_loss");
  if (tape.tracks({&reconstruction, &target})) {
    tape.record("mse_loss", {reconstruction, target}, out, [reconstruction = Tensor(reconstruction), target = Tensor(target), out, count]() mutable {
      const double gy = std::as_const(out).grad()[0];
      const auto a = reconstruction.data();
      const auto b = target.data();
      const double f = 2.0 * gy / count;
      if (reconstruction.requires_grad()) {
        auto g = reconstruction.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>(f * (static_cast<double>(a[i]) - b[i]));
      }
      if (target.requires_grad()) {
        auto g = target.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= static_cast<float>(f * (static_cast<double>(a[i]) - b[i]));
      }
    });
  }
  return out;
}

}  // namespace mg
