#include "nrr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace nrr::ad {

namespace {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b)
{
    throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    for (const auto& in : inputs) {
        if (in.requires_grad()) node->requires_grad = true;
        node->inputs.push_back(in.ptr());
    }
    if (node->requires_grad) node->backward_fn = std::move(fn);
    return Var(std::move(node));
}

}  // namespace

std::string to_string(const Shape& s)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

std::size_t numel(const Shape& s)
{
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (data_.size() != numel(shape_)) {
        throw ShapeError("tensor of shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
    }
}

Scalar Tensor::item() const
{
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const
{
    if (numel(shape) != data_.size()) shape_error("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

Tensor& Node::grad_buffer()
{
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), Scalar(0));
    return grad;
}

Var constant(Tensor t)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    return Var(std::move(node));
}

Var parameter(Tensor t)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->requires_grad = true;
    return Var(std::move(node));
}

void backward(const Var& loss)
{
    if (loss.value().size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backward_fn) n->grad = Tensor(n->value.shape(), Scalar(0));
    }
    loss.node().grad_buffer()[0] += Scalar(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---- affine ---------------------------------------------------------------

Var affine(const Var& x, const Var& weight, const Var& bias)
{
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1]) shape_error("affine", xs, ws);
    if (bias.shape() != Shape{ws[0]}) shape_error("affine bias", ws, bias.shape());
    const std::size_t n = xs[0], in = xs[1], out = ws[0];

    Tensor y({n, out});
    MapMat Y(y.ptr(), n, out);
    Y.noalias() = CMapMat(x.value().ptr(), n, in) * CMapMat(weight.value().ptr(), out, in).transpose();
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.value().ptr(), out);

    return make_node(std::move(y), {x, weight, bias}, [n, in, out](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        CMapMat G(self.grad.ptr(), n, out);
        if (xn.requires_grad) {
            MapMat(xn.grad_buffer().ptr(), n, in).noalias() += G * CMapMat(wn.value.ptr(), out, in);
        }
        if (wn.requires_grad) {
            MapMat(wn.grad_buffer().ptr(), out, in).noalias() += G.transpose() * CMapMat(xn.value.ptr(), n, in);
        }
        if (bn.requires_grad) {
            Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bn.grad_buffer().ptr(), out) += G.colwise().sum();
        }
    });
}

// ---- convolutions -----------------------------------------------------------

std::size_t conv_out_size(std::size_t in, std::size_t k, ConvGeometry g)
{
    if (g.stride == 0) throw ShapeError("conv3d: stride must be positive");
    if (in + 2 * g.padding < k) {
        throw ShapeError("conv3d: kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(in + 2 * g.padding));
    }
    return (in + 2 * g.padding - k) / g.stride + 1;
}

std::size_t conv_transpose_out_size(std::size_t in, std::size_t k, ConvGeometry g, int axis)
{
    if (g.stride == 0) throw ShapeError("conv_transpose3d: stride must be positive");
    const long long out = (static_cast<long long>(in) - 1) * static_cast<long long>(g.stride) -
                          2 * static_cast<long long>(g.padding) + static_cast<long long>(k) +
                          static_cast<long long>(g.output_padding[axis]);
    if (out <= 0) throw ShapeError("conv_transpose3d: non-positive output size");
    return static_cast<std::size_t>(out);
}

namespace {

struct Grid {
    std::size_t d, h, w;
    std::size_t size() const { return d * h * w; }
};

// For a convolution whose *input* grid is `in` and *output* grid is `out`,
// builds cols[(c,kd,kh,kw), (od,oh,ow)] = in[c, od*s-p+kd, ...] (0 outside).
void im2col(const Scalar* src, std::size_t channels, Grid in, Grid out, std::size_t k, ConvGeometry g, Scalar* cols)
{
    const auto s = static_cast<long long>(g.stride);
    const auto p = static_cast<long long>(g.padding);
    const std::size_t ncol = out.size();
    for (std::size_t c = 0; c < channels; ++c) {
        const Scalar* plane = src + c * in.size();
        for (std::size_t kd = 0; kd < k; ++kd)
            for (std::size_t kh = 0; kh < k; ++kh)
                for (std::size_t kw = 0; kw < k; ++kw) {
                    Scalar* row = cols + (((c * k + kd) * k + kh) * k + kw) * ncol;
                    for (std::size_t od = 0; od < out.d; ++od) {
                        const long long id = static_cast<long long>(od) * s - p + static_cast<long long>(kd);
                        for (std::size_t oh = 0; oh < out.h; ++oh) {
                            const long long ih = static_cast<long long>(oh) * s - p + static_cast<long long>(kh);
                            Scalar* dst = row + (od * out.h + oh) * out.w;
                            if (id < 0 || id >= (long long)in.d || ih < 0 || ih >= (long long)in.h) {
                                std::fill(dst, dst + out.w, Scalar(0));
                                continue;
                            }
                            const Scalar* line = plane + (id * in.h + ih) * in.w;
                            for (std::size_t ow = 0; ow < out.w; ++ow) {
                                const long long iw = static_cast<long long>(ow) * s - p + static_cast<long long>(kw);
                                dst[ow] = (iw < 0 || iw >= (long long)in.w) ? Scalar(0) : line[iw];
                            }
                        }
                    }
                }
    }
}

// Adjoint of im2col: scatters columns back onto `dst` (accumulating).
void col2im(const Scalar* cols, std::size_t channels, Grid in, Grid out, std::size_t k, ConvGeometry g, Scalar* dst)
{
    const auto s = static_cast<long long>(g.stride);
    const auto p = static_cast<long long>(g.padding);
    const std::size_t ncol = out.size();
    for (std::size_t c = 0; c < channels; ++c) {
        Scalar* plane = dst + c * in.size();
        for (std::size_t kd = 0; kd < k; ++kd)
            for (std::size_t kh = 0; kh < k; ++kh)
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const Scalar* row = cols + (((c * k + kd) * k + kh) * k + kw) * ncol;
                    for (std::size_t od = 0; od < out.d; ++od) {
                        const long long id = static_cast<long long>(od) * s - p + static_cast<long long>(kd);
                        if (id < 0 || id >= (long long)in.d) continue;
                        for (std::size_t oh = 0; oh < out.h; ++oh) {
                            const long long ih = static_cast<long long>(oh) * s - p + static_cast<long long>(kh);
                            if (ih < 0 || ih >= (long long)in.h) continue;
                            const Scalar* src = row + (od * out.h + oh) * out.w;
                            Scalar* line = plane + (id * in.h + ih) * in.w;
                            for (std::size_t ow = 0; ow < out.w; ++ow) {
                                const long long iw = static_cast<long long>(ow) * s - p + static_cast<long long>(kw);
                                if (iw >= 0 && iw < (long long)in.w) line[iw] += src[ow];
                            }
                        }
                    }
                }
    }
}

void check_volume_input(const char* op, const Shape& x, const Shape& kernel)
{
    if (x.size() != 5 || kernel.size() != 5 || kernel[2] != kernel[3] || kernel[2] != kernel[4]) {
        shape_error(op, x, kernel);
    }
}

}  // namespace

Var conv3d(const Var& x, const Var& kernel, const Var& bias, ConvGeometry g)
{
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    check_volume_input("conv3d", xs, ks);
    if (xs[1] != ks[1]) shape_error("conv3d", xs, ks);
    if (bias.shape() != Shape{ks[0]}) shape_error("conv3d bias", ks, bias.shape());
    const std::size_t n = xs[0], ci = xs[1], co = ks[0], k = ks[2];
    const Grid in{xs[2], xs[3], xs[4]};
    const Grid out{conv_out_size(in.d, k, g), conv_out_size(in.h, k, g), conv_out_size(in.w, k, g)};
    const std::size_t rows = ci * k * k * k;

    Tensor y({n, co, out.d, out.h, out.w});
    std::vector<Scalar> cols(rows * out.size());
    CMapMat K(kernel.value().ptr(), co, rows);
    const auto B = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.value().ptr(), co);
    for (std::size_t b = 0; b < n; ++b) {
        im2col(x.value().ptr() + b * ci * in.size(), ci, in, out, k, g, cols.data());
        MapMat Y(y.ptr() + b * co * out.size(), co, out.size());
        Y.noalias() = K * CMapMat(cols.data(), rows, out.size());
        Y.colwise() += B;
    }

    return make_node(std::move(y), {x, kernel, bias}, [=](Node& self) {
        Node& xn = *self.inputs[0];
        Node& kn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        std::vector<Scalar> cols(rows * out.size());
        std::vector<Scalar> dcols(rows * out.size());
        CMapMat K(kn.value.ptr(), co, rows);
        for (std::size_t b = 0; b < n; ++b) {
            CMapMat G(self.grad.ptr() + b * co * out.size(), co, out.size());
            if (kn.requires_grad) {
                im2col(xn.value.ptr() + b * ci * in.size(), ci, in, out, k, g, cols.data());
                MapMat(kn.grad_buffer().ptr(), co, rows).noalias() +=
                    G * CMapMat(cols.data(), rows, out.size()).transpose();
            }
            if (bn.requires_grad) {
                Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bn.grad_buffer().ptr(), co) += G.rowwise().sum();
            }
            if (xn.requires_grad) {
                MapMat(dcols.data(), rows, out.size()).noalias() = K.transpose() * G;
                col2im(dcols.data(), ci, in, out, k, g, xn.grad_buffer().ptr() + b * ci * in.size());
            }
        }
    });
}

Var conv_transpose3d(const Var& x, const Var& kernel, const Var& bias, ConvGeometry g)
{
    const Shape& xs = x.shape();
    const Shape& ks = kernel.shape();
    check_volume_input("conv_transpose3d", xs, ks);
    if (xs[1] != ks[0]) shape_error("conv_transpose3d", xs, ks);
    if (bias.shape() != Shape{ks[1]}) shape_error("conv_transpose3d bias", ks, bias.shape());
    const std::size_t n = xs[0], ci = xs[1], co = ks[1], k = ks[2];
    // `small` is the transposed op's input grid, i.e. the matching conv's output grid.
    const Grid small{xs[2], xs[3], xs[4]};
    const Grid big{conv_transpose_out_size(small.d, k, g, 0), conv_transpose_out_size(small.h, k, g, 1),
                   conv_transpose_out_size(small.w, k, g, 2)};
    const std::size_t rows = co * k * k * k;

    Tensor y({n, co, big.d, big.h, big.w});
    std::vector<Scalar> cols(rows * small.size());
    CMapMat K(kernel.value().ptr(), ci, rows);
    for (std::size_t b = 0; b < n; ++b) {
        MapMat(cols.data(), rows, small.size()).noalias() =
            K.transpose() * CMapMat(x.value().ptr() + b * ci * small.size(), ci, small.size());
        Scalar* dst = y.ptr() + b * co * big.size();
        col2im(cols.data(), co, big, small, k, g, dst);
        for (std::size_t c = 0; c < co; ++c) {
            const Scalar bc = bias.value()[c];
            for (std::size_t i = 0; i < big.size(); ++i) dst[c * big.size() + i] += bc;
        }
    }

    return make_node(std::move(y), {x, kernel, bias}, [=](Node& self) {
        Node& xn = *self.inputs[0];
        Node& kn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        std::vector<Scalar> dcols(rows * small.size());
        CMapMat K(kn.value.ptr(), ci, rows);
        for (std::size_t b = 0; b < n; ++b) {
            const Scalar* G = self.grad.ptr() + b * co * big.size();
            im2col(G, co, big, small, k, g, dcols.data());
            CMapMat DC(dcols.data(), rows, small.size());
            if (xn.requires_grad) {
                MapMat(xn.grad_buffer().ptr() + b * ci * small.size(), ci, small.size()).noalias() += K * DC;
            }
            if (kn.requires_grad) {
                MapMat(kn.grad_buffer().ptr(), ci, rows).noalias() +=
                    CMapMat(xn.value.ptr() + b * ci * small.size(), ci, small.size()) * DC.transpose();
            }
            if (bn.requires_grad) {
                Tensor& bg = bn.grad_buffer();
                for (std::size_t c = 0; c < co; ++c) {
                    Scalar acc = 0;
                    for (std::size_t i = 0; i < big.size(); ++i) acc += G[c * big.size() + i];
                    bg[c] += acc;
                }
            }
        }
    });
}

Var avg_pool3d(const Var& x, std::size_t factor)
{
    const Shape& xs = x.shape();
    if (xs.size() != 5 || factor == 0 || xs[2] % factor || xs[3] % factor || xs[4] % factor) {
        throw ShapeError("avg_pool3d: spatial dims of " + to_string(xs) + " not divisible by " +
                         std::to_string(factor));
    }
    const std::size_t planes = xs[0] * xs[1];
    const Grid in{xs[2], xs[3], xs[4]};
    const Grid out{in.d / factor, in.h / factor, in.w / factor};
    const Scalar inv = Scalar(1) / static_cast<Scalar>(factor * factor * factor);
    Tensor y({xs[0], xs[1], out.d, out.h, out.w});
    auto src_index = [=](std::size_t p, std::size_t d, std::size_t h, std::size_t w) {
        return p * in.size() + (d * in.h + h) * in.w + w;
    };
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t d = 0; d < in.d; ++d)
            for (std::size_t h = 0; h < in.h; ++h)
                for (std::size_t w = 0; w < in.w; ++w) {
                    y[p * out.size() + ((d / factor) * out.h + h / factor) * out.w + w / factor] +=
                        inv * x.value()[src_index(p, d, h, w)];
                }
    return make_node(std::move(y), {x}, [=](Node& self) {
        Tensor& gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t d = 0; d < in.d; ++d)
                for (std::size_t h = 0; h < in.h; ++h)
                    for (std::size_t w = 0; w < in.w; ++w) {
                        gx[src_index(p, d, h, w)] +=
                            inv * self.grad[p * out.size() + ((d / factor) * out.h + h / factor) * out.w + w / factor];
                    }
    });
}

Var upsample3d(const Var& x, std::size_t factor)
{
    const Shape& xs = x.shape();
    if (xs.size() != 5 || factor == 0) throw ShapeError("upsample3d: expected [N,C,D,H,W], got " + to_string(xs));
    const std::size_t planes = xs[0] * xs[1];
    const Grid in{xs[2], xs[3], xs[4]};
    const Grid out{in.d * factor, in.h * factor, in.w * factor};
    Tensor y({xs[0], xs[1], out.d, out.h, out.w});
    auto src_index = [=](std::size_t p, std::size_t d, std::size_t h, std::size_t w) {
        return p * in.size() + ((d / factor) * in.h + h / factor) * in.w + w / factor;
    };
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t d = 0; d < out.d; ++d)
            for (std::size_t h = 0; h < out.h; ++h)
                for (std::size_t w = 0; w < out.w; ++w) {
                    y[p * out.size() + (d * out.h + h) * out.w + w] = x.value()[src_index(p, d, h, w)];
                }
    return make_node(std::move(y), {x}, [=](Node& self) {
        Tensor& gx = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t d = 0; d < out.d; ++d)
                for (std::size_t h = 0; h < out.h; ++h)
                    for (std::size_t w = 0; w < out.w; ++w) {
                        gx[src_index(p, d, h, w)] += self.grad[p * out.size() + (d * out.h + h) * out.w + w];
                    }
    });
}

// ---- elementwise ----------------------------------------------------------

namespace {

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df)
{
    Tensor y(x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x.value()[i]);
    return make_node(std::move(y), {x}, [df](Node& self) {
        Node& xn = *self.inputs[0];
        Tensor& gx = xn.grad_buffer();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xn.value[i], self.value[i]);
    });
}

void check_same(const char* op, const Var& a, const Var& b)
{
    if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

}  // namespace

Var relu(const Var& x)
{
    return unary(
        x, [](Scalar v) { return v > 0 ? v : Scalar(0); }, [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

Var sigmoid(const Var& x)
{
    return unary(
        x,
        [](Scalar v) {
            if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
            const Scalar e = std::exp(v);
            return e / (Scalar(1) + e);
        },
        [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

Var exp(const Var& x)
{
    return unary(x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

Var log(const Var& x)
{
    return unary(x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

Var clamp(const Var& x, Scalar lo, Scalar hi)
{
    return unary(
        x, [lo, hi](Scalar v) { return std::clamp(v, lo, hi); },
        [lo, hi](Scalar v, Scalar) { return (v > lo && v < hi) ? Scalar(1) : Scalar(0); });
}

Var scale(const Var& x, Scalar c)
{
    return unary(x, [c](Scalar v) { return c * v; }, [c](Scalar, Scalar) { return c; });
}

Var add_scalar(const Var& x, Scalar c)
{
    return unary(x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar) { return Scalar(1); });
}

Var add(const Var& a, const Var& b)
{
    check_same("add", a, b);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
    return make_node(std::move(y), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            Tensor& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b)
{
    check_same("sub", a, b);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
    return make_node(std::move(y), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            const Scalar sign = k == 0 ? Scalar(1) : Scalar(-1);
            Tensor& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b)
{
    check_same("mul", a, b);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
    return make_node(std::move(y), {a, b}, [](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        if (an.requires_grad) {
            Tensor& g = an.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
        }
        if (bn.requires_grad) {
            Tensor& g = bn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
        }
    });
}

Var gaussian_sample(const Var& mu, const Var& sigma, const Tensor& eps)
{
    check_same("gaussian_sample", mu, sigma);
    if (eps.shape() != mu.shape()) shape_error("gaussian_sample eps", mu.shape(), eps.shape());
    Tensor y(mu.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = mu.value()[i] + sigma.value()[i] * eps[i];
    return make_node(std::move(y), {mu, sigma}, [eps](Node& self) {
        Node& mn = *self.inputs[0];
        Node& sn = *self.inputs[1];
        if (mn.requires_grad) {
            Tensor& g = mn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (sn.requires_grad) {
            Tensor& g = sn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * eps[i];
        }
    });
}

// ---- reductions -------------------------------------------------------------

Var reduce_sum(const Var& x)
{
    Scalar acc = 0;
    for (Scalar v : x.value().data()) acc += v;
    return make_node(Tensor::scalar(acc), {x}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const Scalar up = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
    });
}

Var reduce_mean(const Var& x)
{
    if (x.value().size() == 0) throw ShapeError("reduce_mean of empty tensor");
    return scale(reduce_sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

Var reshape(const Var& x, Shape shape)
{
    Tensor y = x.value().reshaped(std::move(shape));
    return make_node(std::move(y), {x}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var concat_cols(const Var& a, const Var& b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[0] != bs[0]) shape_error("concat_cols", as, bs);
    const std::size_t n = as[0], p = as[1], q = bs[1];
    Tensor y({n, p + q});
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(a.value().ptr() + r * p, p, y.ptr() + r * (p + q));
        std::copy_n(b.value().ptr() + r * q, q, y.ptr() + r * (p + q) + p);
    }
    return make_node(std::move(y), {a, b}, [n, p, q](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        for (std::size_t r = 0; r < n; ++r) {
            if (an.requires_grad) {
                Tensor& g = an.grad_buffer();
                for (std::size_t c = 0; c < p; ++c) g[r * p + c] += self.grad[r * (p + q) + c];
            }
            if (bn.requires_grad) {
                Tensor& g = bn.grad_buffer();
                for (std::size_t c = 0; c < q; ++c) g[r * q + c] += self.grad[r * (p + q) + p + c];
            }
        }
    });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end)
{
    const Shape& xs = x.shape();
    if (xs.size() != 2 || begin >= end || end > xs[1]) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + to_string(xs));
    }
    const std::size_t n = xs[0], f = xs[1], w = end - begin;
    Tensor y({n, w});
    for (std::size_t r = 0; r < n; ++r) std::copy_n(x.value().ptr() + r * f + begin, w, y.ptr() + r * w);
    return make_node(std::move(y), {x}, [n, f, w, begin](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * f + begin + c] += self.grad[r * w + c];
    });
}

Var standardize_cols(const Var& x, Scalar eps)
{
    const Shape& xs = x.shape();
    if (xs.size() != 2 || xs[0] < 2) throw ShapeError("standardize_cols expects [N>=2, F], got " + to_string(xs));
    const std::size_t n = xs[0], f = xs[1];
    Tensor y({n, f});
    std::vector<Scalar> inv(f);
    for (std::size_t c = 0; c < f; ++c) {
        double m = 0, v = 0;
        for (std::size_t r = 0; r < n; ++r) m += x.value()[r * f + c];
        m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
            const double e = x.value()[r * f + c] - m;
            v += e * e;
        }
        inv[c] = static_cast<Scalar>(1.0 / std::sqrt(v / static_cast<double>(n) + eps));
        for (std::size_t r = 0; r < n; ++r)
            y[r * f + c] = static_cast<Scalar>((x.value()[r * f + c] - m) * inv[c]);
    }
    Tensor yc = y;
    return make_node(std::move(y), {x}, [n, f, inv = std::move(inv), yc = std::move(yc)](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t c = 0; c < f; ++c) {
            double mg = 0, mgy = 0;
            for (std::size_t r = 0; r < n; ++r) {
                mg += self.grad[r * f + c];
                mgy += self.grad[r * f + c] * yc[r * f + c];
            }
            mg /= static_cast<double>(n);
            mgy /= static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r) {
                const double gy = self.grad[r * f + c];
                g[r * f + c] += static_cast<Scalar>(inv[c] * (gy - mg - yc[r * f + c] * mgy));
            }
        }
    });
}

Var bce_with_logits(const Var& logits, const Tensor& targets)
{
    const std::size_t n = logits.value().size();
    if (targets.size() != n || n == 0) shape_error("bce_with_logits", logits.shape(), targets.shape());
    Scalar acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar z = logits.value()[i];
        acc += std::max(z, Scalar(0)) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return make_node(Tensor::scalar(acc / static_cast<Scalar>(n)), {logits}, [targets, n](Node& self) {
        Node& zn = *self.inputs[0];
        Tensor& g = zn.grad_buffer();
        const Scalar up = self.grad[0] / static_cast<Scalar>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const Scalar z = zn.value[i];
            const Scalar s = z >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-z)) : std::exp(z) / (Scalar(1) + std::exp(z));
            g[i] += up * (s - targets[i]);
        }
    });
}

}  // namespace nrr::ad
