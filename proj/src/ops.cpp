#include "stet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <string>

#include "stet/errors.hpp"

namespace stet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Index mapping from an output element to the elements of two broadcast inputs.
struct Broadcast {
  enum class Kind { Same, BSuffix, ASuffix, General };
  Kind kind = Kind::Same;
  Shape out;
  std::size_t na = 0;
  std::size_t nb = 0;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;

  template <typename F>
  void visit(F&& f) const {
    const std::size_t n = shape_numel(out);
    switch (kind) {
      case Kind::Same:
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        break;
      case Kind::BSuffix:
        for (std::size_t i = 0, j = 0; i < n; ++i) {
          f(i, i, j);
          if (++j == nb) j = 0;
        }
        break;
      case Kind::ASuffix:
        for (std::size_t i = 0, j = 0; i < n; ++i) {
          f(i, j, i);
          if (++j == na) j = 0;
        }
        break;
      case Kind::General:
        for (std::size_t i = 0; i < n; ++i) f(i, ia[i], ib[i]);
        break;
    }
  }
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

std::shared_ptr<Broadcast> plan_broadcast(const Shape& a, const Shape& b, std::string_view op) {
  auto bc = std::make_shared<Broadcast>();
  bc->na = shape_numel(a);
  bc->nb = shape_numel(b);
  if (a == b) {
    bc->out = a;
    bc->kind = Broadcast::Kind::Same;
    return bc;
  }
  if (is_suffix(b, a) && bc->nb > 0) {
    bc->out = a;
    bc->kind = Broadcast::Kind::BSuffix;
    return bc;
  }
  if (is_suffix(a, b) && bc->na > 0) {
    bc->out = b;
    bc->kind = Broadcast::Kind::ASuffix;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  Shape out(r);
  for (std::size_t d = 0; d < r; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = r; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : acc_a;
    sb[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = shape_numel(out);
  bc->ia.resize(n);
  bc->ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off_a = 0, off_b = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc->ia[i] = off_a;
    bc->ib[i] = off_b;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off_a += sa[d];
      off_b += sb[d];
      if (idx[d] < out[d]) break;
      off_a -= sa[d] * out[d];
      off_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
  bc->out = std::move(out);
  bc->kind = Broadcast::Kind::General;
  return bc;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, std::string_view name, Fwd fwd, Deriv deriv) {
  const bool track = needs_grad({&x});
  Tensor out = make_result(x.shape(), track);
  const auto xs = x.data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record(name, out.impl(), [xi, o, deriv]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < o->data.size(); ++i) {
        xi->grad[i] += o->grad[i] * deriv(xi->data[i], o->data[i]);
      }
    });
  }
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

void accumulate_into(TensorImpl& dst, const std::vector<double>& src) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto bc = plan_broadcast(a.shape(), b.shape(), "add");
  const bool track = needs_grad({&a, &b});
  Tensor out = make_result(bc->out, track);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  bc->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] + pb[ib]; });
  if (track) {
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("add", out.impl(), [ai, bi, o, bc]() {
      const double* g = o->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        bc->visit([&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        bc->visit([&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto bc = plan_broadcast(a.shape(), b.shape(), "sub");
  const bool track = needs_grad({&a, &b});
  Tensor out = make_result(bc->out, track);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  bc->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] - pb[ib]; });
  if (track) {
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("sub", out.impl(), [ai, bi, o, bc]() {
      const double* g = o->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        bc->visit([&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        bc->visit([&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= g[i]; });
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto bc = plan_broadcast(a.shape(), b.shape(), "mul");
  const bool track = needs_grad({&a, &b});
  Tensor out = make_result(bc->out, track);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  bc->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] * pb[ib]; });
  if (track) {
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("mul", out.impl(), [ai, bi, o, bc]() {
      const double* g = o->grad.data();
      const double* va = ai->data.data();
      const double* vb = bi->data.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* ga = ai->grad.data();
        bc->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * vb[ib]; });
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* gb = bi->grad.data();
        bc->visit([&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * va[ia]; });
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor pow(const Tensor& x, double exponent) {
  return unary(
      x, "pow", [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) {
        return exponent == 0.0 ? 0.0 : exponent * std::pow(v, exponent - 1.0);
      });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double th = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * k * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  const bool track = needs_grad({&x});
  Tensor out = make_result({}, track);
  double s = 0.0;
  for (double v : x.data()) s += v;
  out[0] = s;
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("sum", out.impl(), [xi, o]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (double& g : xi->grad) g += o->grad[0];
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  const bool track = needs_grad({&x});
  Tensor out = make_result(std::move(shape), track);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("reshape", out.impl(), [xi, o]() {
      if (!xi->requires_grad) return;
      accumulate_into(*xi, o->grad);
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t r = x.rank();
  if (order.size() != r) {
    throw DimensionError("permute: order has " + std::to_string(order.size()) +
                         " axes for shape " + shape_str(x.shape()));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t a : order) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axis order");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * in[d];
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t d = 0; d < r; ++d) {
    out_shape[d] = in[order[d]];
    step[d] = in_stride[order[d]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += step[d];
      if (idx[d] < out_shape[d]) break;
      off -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  const bool track = needs_grad({&x});
  Tensor out = make_result(std::move(out_shape), track);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = px[(*src)[i]];
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("permute", out.impl(), [xi, o, src]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < src->size(); ++i) xi->grad[(*src)[i]] += o->grad[i];
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " +
                           shape_str(s));
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= first[d];
  for (std::size_t d = ax + 1; d < first.size(); ++d) inner *= first[d];

  bool track = false;
  for (const auto& p : parts) track = track || needs_grad({&p});
  Tensor out = make_result(out_shape, track);
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t row = p.shape()[ax] * inner;
    const double* src = p.data().data();
    double* dst = out.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * row, row, dst + o * out_row + offset);
    }
    offset += row;
  }
  if (track) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    TensorImpl* o = out.impl().get();
    Tape::current().record("concat", out.impl(), [ins, o, offsets, outer, out_row]() {
      for (std::size_t k = 0; k < ins.size(); ++k) {
        auto& in = *ins[k];
        if (!in.requires_grad) continue;
        in.ensure_grad();
        const std::size_t row = in.data.size() / outer;
        for (std::size_t r = 0; r < outer; ++r) {
          const double* g = o->grad.data() + r * out_row + offsets[k];
          double* gi = in.grad.data() + r * row;
          for (std::size_t j = 0; j < row; ++j) gi[j] += g[j];
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  const std::size_t ax = normalize_axis(axis, in.size(), "slice");
  if (start + length > in[ax]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") exceeds axis of size " +
                         std::to_string(in[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= in[d];
  for (std::size_t d = ax + 1; d < in.size(); ++d) inner *= in[d];
  Shape out_shape = in;
  out_shape[ax] = length;
  const bool track = needs_grad({&x});
  Tensor out = make_result(out_shape, track);
  const std::size_t in_row = in[ax] * inner, out_row = length * inner, skip = start * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + skip, out_row, out.data().data() + o * out_row);
  }
  if (track) {
    auto xi = x.impl();
    TensorImpl* op = out.impl().get();
    Tape::current().record("slice", out.impl(), [xi, op, outer, in_row, out_row, skip]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < out_row; ++j) {
          xi->grad[o * in_row + skip + j] += op->grad[o * out_row + j];
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const auto mismatch = [&]() {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t bk = transpose_b ? bs.back() : bs[bs.size() - 2];
  const std::size_t n = transpose_b ? bs[bs.size() - 2] : bs.back();
  if (k != bk) throw mismatch();
  const bool shared_b = bs.size() == 2;
  if (!shared_b && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) {
    throw mismatch();
  }
  const std::size_t batch = a.numel() / std::max<std::size_t>(m * k, 1);
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool track = needs_grad({&a, &b});
  Tensor out = make_result(out_shape, track);

  const Eigen::Index em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k),
                     en = static_cast<Eigen::Index>(n);
  if (shared_b) {
    const Eigen::Index rows = static_cast<Eigen::Index>(batch) * em;
    ConstMap A(a.data().data(), rows, ek);
    MutMap C(out.data().data(), rows, en);
    if (transpose_b) {
      C.noalias() = A * ConstMap(b.data().data(), en, ek).transpose();
    } else {
      C.noalias() = A * ConstMap(b.data().data(), ek, en);
    }
  } else {
    for (std::size_t s = 0; s < batch; ++s) {
      ConstMap A(a.data().data() + s * m * k, em, ek);
      MutMap C(out.data().data() + s * m * n, em, en);
      if (transpose_b) {
        C.noalias() = A * ConstMap(b.data().data() + s * n * k, en, ek).transpose();
      } else {
        C.noalias() = A * ConstMap(b.data().data() + s * k * n, ek, en);
      }
    }
  }

  if (track) {
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("matmul", out.impl(), [ai, bi, o, shared_b, transpose_b, batch, em, ek,
                                                 en]() {
      const Eigen::Index groups = shared_b ? 1 : static_cast<Eigen::Index>(batch);
      const Eigen::Index rows = shared_b ? static_cast<Eigen::Index>(batch) * em : em;
      if (ai->requires_grad) ai->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      for (Eigen::Index s = 0; s < groups; ++s) {
        ConstMap G(o->grad.data() + s * rows * en, rows, en);
        ConstMap A(ai->data.data() + s * rows * ek, rows, ek);
        const double* pb = bi->data.data() + s * ek * en;
        if (ai->requires_grad) {
          MutMap GA(ai->grad.data() + s * rows * ek, rows, ek);
          if (transpose_b) {
            GA.noalias() += G * ConstMap(pb, en, ek);
          } else {
            GA.noalias() += G * ConstMap(pb, ek, en).transpose();
          }
        }
        if (bi->requires_grad) {
          double* gb = bi->grad.data() + s * ek * en;
          if (transpose_b) {
            MutMap(gb, en, ek).noalias() += G.transpose() * A;
          } else {
            MutMap(gb, ek, en).noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw DimensionError("softmax_lastdim: needs a non-empty last axis, got " +
                         shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const bool track = needs_grad({&x});
  Tensor out = make_result(x.shape(), track);
  const double* px = x.data().data();
  double* py = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * n;
    double* yr = py + r * n;
    if (std::any_of(xr, xr + n, [](double v) { return std::isnan(v); })) {
      // Diverged upstream; let the NaN reach the loss check.
      std::fill(yr, yr + n, std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double mx = *std::max_element(xr, xr + n);
    if (mx == kNegInf) {
      throw DegenerateError("softmax_lastdim: slice " + std::to_string(r) +
                            " has no valid entry (all -inf)");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = xr[j] == kNegInf ? 0.0 : std::exp(xr[j] - mx);
      total += yr[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("softmax", out.impl(), [xi, o, n, rows]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = o->data.data() + r * n;
        const double* g = o->grad.data() + r * n;
        double* gx = xi->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const bool track = needs_grad({&x, &gamma, &beta});
  Tensor out = make_result(x.shape(), track);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  double* py = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      py[r * n + j] = h * pg[j] + pb[j];
    }
  }
  if (track) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("layer_norm", out.impl(), [xi, gi, bi, o, xhat, rstd, n, rows]() {
      if (gi->requires_grad) gi->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      if (xi->requires_grad) xi->ensure_grad();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* g = o->grad.data() + r * n;
        const double* h = xhat->data() + r * n;
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[j] * gi->data[j];
          sum_dh += dh;
          sum_dh_h += dh * h[j];
          if (gi->requires_grad) gi->grad[j] += g[j] * h[j];
          if (bi->requires_grad) bi->grad[j] += g[j];
        }
        if (xi->requires_grad) {
          double* gx = xi->grad.data() + r * n;
          const double rs = (*rstd)[r];
          for (std::size_t j = 0; j < n; ++j) {
            const double dh = g[j] * gi->data[j];
            gx[j] += rs * (dh - inv_n * sum_dh - h[j] * inv_n * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto factors = std::make_shared<std::vector<double>>(x.numel());
  for (double& f : *factors) f = rng.uniform() < p ? 0.0 : keep_scale;
  const bool track = needs_grad({&x});
  Tensor out = make_result(x.shape(), track);
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * (*factors)[i];
  if (track) {
    auto xi = x.impl();
    TensorImpl* o = out.impl().get();
    Tape::current().record("dropout", out.impl(), [xi, o, factors]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t i = 0; i < factors->size(); ++i) xi->grad[i] += o->grad[i] * (*factors)[i];
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

Unfolded unfold_time(const Tensor& x, std::size_t window) {
  if (window == 0 || window % 2 == 0) {
    throw ConfigError("unfold_time: window must be odd, got " + std::to_string(window));
  }
  if (x.rank() < 2) throw DimensionError("unfold_time: needs [..., t, h], got " + shape_str(x.shape()));
  const Shape& in = x.shape();
  const std::size_t t = in[in.size() - 2];
  const std::size_t h = in.back();
  if (t == 0) throw DimensionError("unfold_time: empty time axis");
  const std::size_t outer = x.numel() / (t * h);
  const std::size_t half = window / 2;
  Shape out_shape(in.begin(), in.end() - 1);
  out_shape.push_back(window);
  out_shape.push_back(h);

  Unfolded result;
  result.valid.assign(t * window, 0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < window; ++j) {
      const long src = static_cast<long>(i + j) - static_cast<long>(half);
      result.valid[i * window + j] = src >= 0 && src < static_cast<long>(t);
    }
  }
  const bool track = needs_grad({&x});
  Tensor out = make_result(out_shape, track);
  const double* px = x.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < window; ++j) {
        if (!result.valid[i * window + j]) continue;
        const std::size_t src = i + j - half;
        std::copy_n(px + (o * t + src) * h, h, po + ((o * t + i) * window + j) * h);
      }
    }
  }
  if (track) {
    auto xi = x.impl();
    TensorImpl* op = out.impl().get();
    auto valid = result.valid;
    Tape::current().record("unfold_time", out.impl(), [xi, op, valid, outer, t, window, half, h]() {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < t; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            if (!valid[i * window + j]) continue;
            const std::size_t src = i + j - half;
            const double* g = op->grad.data() + ((o * t + i) * window + j) * h;
            double* gx = xi->grad.data() + (o * t + src) * h;
            for (std::size_t k = 0; k < h; ++k) gx[k] += g[k];
          }
        }
      }
    });
  }
  result.values = std::move(out);
  return result;
}

Tensor window_pad_bias(std::size_t t, std::size_t window) {
  if (window == 0 || window % 2 == 0) {
    throw ConfigError("window_pad_bias: window must be odd, got " + std::to_string(window));
  }
  Tensor bias = Tensor::zeros({t, 1, window});
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < window; ++j) {
      const long src = static_cast<long>(i + j) - static_cast<long>(half);
      if (src < 0 || src >= static_cast<long>(t)) bias[i * window + j] = kNegInf;
    }
  }
  return bias;
}

}  // namespace stet

namespace stet {

namespace {

struct BandGeometry {
  std::size_t outer, t, e, w, half;
};

BandGeometry band_geometry(const Tensor& x, std::size_t window, std::string_view op) {
  if (window == 0 || window % 2 == 0) {
    throw ConfigError(std::string(op) + ": window must be odd, got " + std::to_string(window));
  }
  if (x.rank() < 2) throw DimensionError(std::string(op) + ": needs [..., t, e], got " + shape_str(x.shape()));
  const std::size_t t = x.dim(-2), e = x.dim(-1);
  if (t == 0) throw DimensionError(std::string(op) + ": empty time axis");
  return {x.numel() / (t * e), t, e, window, window / 2};
}

// Valid key range [lo, hi) for query i.
inline std::size_t band_lo(std::size_t i, std::size_t half) { return i >= half ? i - half : 0; }
inline std::size_t band_hi(std::size_t i, std::size_t half, std::size_t t) {
  return std::min(t, i + half + 1);
}

}  // namespace

Tensor banded_scores(const Tensor& q, const Tensor& k, std::size_t window, double factor) {
  if (q.shape() != k.shape()) {
    throw DimensionError("banded_scores: shapes " + shape_str(q.shape()) + " and " +
                         shape_str(k.shape()) + " differ");
  }
  const BandGeometry g = band_geometry(q, window, "banded_scores");
  Shape out_shape(q.shape().begin(), q.shape().end() - 1);
  out_shape.push_back(g.w);
  const bool track = needs_grad({&q, &k});
  Tensor out = make_result(out_shape, track);
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  double* po = out.data().data();
  std::fill(po, po + out.numel(), kNegInf);
  for (std::size_t o = 0; o < g.outer; ++o) {
    const double* qb = pq + o * g.t * g.e;
    const double* kb = pk + o * g.t * g.e;
    for (std::size_t i = 0; i < g.t; ++i) {
      double* row = po + (o * g.t + i) * g.w;
      const double* qi = qb + i * g.e;
      for (std::size_t s = band_lo(i, g.half); s < band_hi(i, g.half, g.t); ++s) {
        const double* ks = kb + s * g.e;
        double acc = 0.0;
        for (std::size_t c = 0; c < g.e; ++c) acc += qi[c] * ks[c];
        row[s + g.half - i] = acc * factor;
      }
    }
  }
  if (track) {
    auto qi_ = q.impl(), ki_ = k.impl();
    TensorImpl* op = out.impl().get();
    Tape::current().record("banded_scores", out.impl(), [qi_, ki_, op, g, factor]() {
      const bool gq = qi_->requires_grad, gk = ki_->requires_grad;
      if (gq) qi_->ensure_grad();
      if (gk) ki_->ensure_grad();
      for (std::size_t o = 0; o < g.outer; ++o) {
        const std::size_t base = o * g.t * g.e;
        for (std::size_t i = 0; i < g.t; ++i) {
          const double* grow = op->grad.data() + (o * g.t + i) * g.w;
          for (std::size_t s = band_lo(i, g.half); s < band_hi(i, g.half, g.t); ++s) {
            const double d = grow[s + g.half - i] * factor;
            if (d == 0.0) continue;
            if (gq) {
              double* dq = qi_->grad.data() + base + i * g.e;
              const double* ks = ki_->data.data() + base + s * g.e;
              for (std::size_t c = 0; c < g.e; ++c) dq[c] += d * ks[c];
            }
            if (gk) {
              double* dk = ki_->grad.data() + base + s * g.e;
              const double* qv = qi_->data.data() + base + i * g.e;
              for (std::size_t c = 0; c < g.e; ++c) dk[c] += d * qv[c];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor banded_mix(const Tensor& p, const Tensor& v, std::size_t window) {
  const BandGeometry g = band_geometry(v, window, "banded_mix");
  Shape expect(v.shape().begin(), v.shape().end() - 1);
  expect.push_back(window);
  if (p.shape() != expect) {
    throw DimensionError("banded_mix: weights " + shape_str(p.shape()) + " do not match values " +
                         shape_str(v.shape()) + " with window " + std::to_string(window));
  }
  const bool track = needs_grad({&p, &v});
  Tensor out = make_result(v.shape(), track);
  const double* pp = p.data().data();
  const double* pv = v.data().data();
  double* po = out.data().data();
  for (std::size_t o = 0; o < g.outer; ++o) {
    const double* vb = pv + o * g.t * g.e;
    for (std::size_t i = 0; i < g.t; ++i) {
      const double* prow = pp + (o * g.t + i) * g.w;
      double* orow = po + (o * g.t + i) * g.e;
      for (std::size_t s = band_lo(i, g.half); s < band_hi(i, g.half, g.t); ++s) {
        const double a = prow[s + g.half - i];
        const double* vs = vb + s * g.e;
        for (std::size_t c = 0; c < g.e; ++c) orow[c] += a * vs[c];
      }
    }
  }
  if (track) {
    auto pi = p.impl(), vi = v.impl();
    TensorImpl* op = out.impl().get();
    Tape::current().record("banded_mix", out.impl(), [pi, vi, op, g]() {
      const bool gp = pi->requires_grad, gv = vi->requires_grad;
      if (gp) pi->ensure_grad();
      if (gv) vi->ensure_grad();
      for (std::size_t o = 0; o < g.outer; ++o) {
        const std::size_t base = o * g.t * g.e;
        for (std::size_t i = 0; i < g.t; ++i) {
          const double* go = op->grad.data() + base + i * g.e;
          const std::size_t prow = (o * g.t + i) * g.w;
          for (std::size_t s = band_lo(i, g.half); s < band_hi(i, g.half, g.t); ++s) {
            const std::size_t slot = prow + s + g.half - i;
            const double* vs = vi->data.data() + base + s * g.e;
            if (gp) {
              double acc = 0.0;
              for (std::size_t c = 0; c < g.e; ++c) acc += go[c] * vs[c];
              pi->grad[slot] += acc;
            }
            if (gv) {
              const double a = pi->data[slot];
              double* dv = vi->grad.data() + base + s * g.e;
              for (std::size_t c = 0; c < g.e; ++c) dv[c] += a * go[c];
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace stet
