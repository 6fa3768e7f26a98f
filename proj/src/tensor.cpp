#include "fogda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <Eigen/Core>

#include "fogda/errors.hpp"

namespace fogda {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw std::invalid_argument(op + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_str(t.shape()));
    }
}

void require_same(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

// Elementwise unary op with a derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
    const Tensor& in = x.value();
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {xid}, [xid, deriv](Tape& tape, std::size_t self) {
        const Tensor& xin = tape.value(xid);
        const Tensor& y = tape.value(self);
        const Tensor& g = tape.grad_mut(self);
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xin[i], y[i]);
    });
}

struct ConvGeometry {
    std::size_t n, c, h, w, k, kh, kw, oh, ow, stride, pad;
};

void im2col(const double* img, const ConvGeometry& g, double* col) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t ch = 0; ch < g.c; ++ch) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((ch * g.kh + ky) * g.kw + kx) * plane;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.ow, 0.0);
                        continue;
                    }
                    const double* src = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvGeometry& g, double* img) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t ch = 0; ch < g.c; ++ch) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((ch * g.kh + ky) * g.kw + kx) * plane;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    double* dst = img + (ch * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const double* src = row + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- Tensor -------------------------------------------------------------

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_numel(shape_) != data_.size()) {
        throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not hold " +
                                    std::to_string(data_.size()) + " values");
    }
}

double& Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::invalid_argument("item(): tensor of shape " + shape_str(shape_) + " is not a scalar");
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("reshaped: " + shape_str(shape_) + " cannot become " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---- Tape ---------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
    bool needs = false;
    for (std::size_t p : parents) {
        if (p >= nodes_.size()) throw std::logic_error("Tape::record: parent id from another tape");
        needs = needs || nodes_[p].requires_grad;
    }
    Node node{std::move(value), {}, std::move(parents), needs ? std::move(fn) : BackwardFn{}, needs};
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_mut(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.size() != node.value.size() || node.grad.shape() != node.value.shape()) {
        node.grad = Tensor(node.value.shape());
    }
    return node.grad;
}

Tensor Tape::grad(Var v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.shape() == node.value.shape() && !node.grad.empty()) return node.grad;
    return Tensor(node.value.shape());
}

void Tape::backward(Var loss) {
    if (&loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
    const Tensor& lv = nodes_.at(loss.id()).value;
    if (lv.size() != 1) throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    for (auto& node : nodes_) node.grad = Tensor();
    if (!nodes_[loss.id()].requires_grad) return;
    grad_mut(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
        node.backward(*this, i);
    }
}

bool Tape::any_requires_grad() const {
    return std::any_of(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.requires_grad; });
}

// ---- ops ----------------------------------------------------------------

Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
    const Tensor& x = input.value();
    const Tensor& w = kernel.value();
    const Tensor& b = bias.value();
    require_rank("conv2d input", x, 4);
    require_rank("conv2d kernel", w, 4);
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (w.dim(1) != x.dim(1)) shape_error("conv2d", x.shape(), w.shape());
    if (b.rank() != 1 || b.dim(0) != w.dim(0)) shape_error("conv2d bias", w.shape(), b.shape());
    if (w.dim(2) > x.dim(2) + 2 * pad || w.dim(3) > x.dim(3) + 2 * pad) shape_error("conv2d", x.shape(), w.shape());

    ConvGeometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.k = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = stride;
    g.pad = pad;
    g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
    g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

    const std::size_t ckk = g.c * g.kh * g.kw;
    const std::size_t plane = g.oh * g.ow;
    Tensor out({g.n, g.k, g.oh, g.ow});
    Storage col(ckk * plane);
    ConstMatMap wm(w.raw().data(), static_cast<Eigen::Index>(g.k), static_cast<Eigen::Index>(ckk));
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(x.raw().data() + n * g.c * g.h * g.w, g, col.data());
        ConstMatMap cm(col.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(plane));
        MatMap om(out.raw().data() + n * g.k * plane, static_cast<Eigen::Index>(g.k), static_cast<Eigen::Index>(plane));
        om.noalias() = wm * cm;
        for (std::size_t k = 0; k < g.k; ++k) om.row(static_cast<Eigen::Index>(k)).array() += b[k];
    }

    const std::size_t xid = input.id(), wid = kernel.id(), bid = bias.id();
    return input.tape().record(std::move(out), {xid, wid, bid}, [g, xid, wid, bid](Tape& tape, std::size_t self) {
        const std::size_t ckk = g.c * g.kh * g.kw;
        const std::size_t plane = g.oh * g.ow;
        const Tensor& gout = tape.grad_mut(self);
        const Tensor& xin = tape.value(xid);
        const Tensor& wv = tape.value(wid);
        const bool need_x = tape.requires_grad(xid);
        const bool need_w = tape.requires_grad(wid);
        const bool need_b = tape.requires_grad(bid);
        Storage col(ckk * plane);
        Storage dcol(ckk * plane);
        for (std::size_t n = 0; n < g.n; ++n) {
            ConstMatMap gm(gout.raw().data() + n * g.k * plane, static_cast<Eigen::Index>(g.k),
                           static_cast<Eigen::Index>(plane));
            if (need_w) {
                im2col(xin.raw().data() + n * g.c * g.h * g.w, g, col.data());
                ConstMatMap cm(col.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(plane));
                MatMap gw(tape.grad_mut(wid).raw().data(), static_cast<Eigen::Index>(g.k),
                          static_cast<Eigen::Index>(ckk));
                gw.noalias() += gm * cm.transpose();
            }
            if (need_b) {
                Tensor& gb = tape.grad_mut(bid);
                for (std::size_t k = 0; k < g.k; ++k) gb[k] += gm.row(static_cast<Eigen::Index>(k)).sum();
            }
            if (need_x) {
                ConstMatMap wm(wv.raw().data(), static_cast<Eigen::Index>(g.k), static_cast<Eigen::Index>(ckk));
                MatMap dm(dcol.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(plane));
                dm.noalias() = wm.transpose() * gm;
                col2im_add(dcol.data(), g, tape.grad_mut(xid).raw().data() + n * g.c * g.h * g.w);
            }
        }
    });
}

Var relu(Var x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
    return unary(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
    return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
    return unary(x, [](double v) { return std::log(std::max(v, kLogEps)); },
                 [](double v, double) { return v > kLogEps ? 1.0 / v : 0.0; });
}

Var add(Var a, Var b) {
    require_same("add", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {aid, bid}, [aid, bid](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        for (std::size_t p : {aid, bid}) {
            if (!tape.requires_grad(p)) continue;
            Tensor& gp = tape.grad_mut(p);
            for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    require_same("sub", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {aid, bid}, [aid, bid](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        if (tape.requires_grad(aid)) {
            Tensor& ga = tape.grad_mut(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tape.requires_grad(bid)) {
            Tensor& gb = tape.grad_mut(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same("mul", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const std::size_t aid = a.id(), bid = b.id();
    return a.tape().record(std::move(out), {aid, bid}, [aid, bid](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        const Tensor& av = tape.value(aid);
        const Tensor& bv = tape.value(bid);
        if (tape.requires_grad(aid)) {
            Tensor& ga = tape.grad_mut(aid);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tape.requires_grad(bid)) {
            Tensor& gb = tape.grad_mut(bid);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

Var scale(Var x, double c) {
    return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var sum(Var x) {
    const Tensor& in = x.value();
    double s = 0.0;
    for (double v : in.data()) s += v;
    const std::size_t xid = x.id();
    return x.tape().record(Tensor::scalar(s), {xid}, [xid](Tape& tape, std::size_t self) {
        const double g = tape.grad_mut(self)[0];
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Var mean(Var x) {
    const std::size_t n = x.value().size();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var concat_channels(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const Tensor& first = parts[0].value();
    require_rank("concat_channels", first, 4);
    std::size_t total_c = 0;
    for (const Var& p : parts) {
        const Tensor& t = p.value();
        require_rank("concat_channels", t, 4);
        if (t.dim(0) != first.dim(0) || t.dim(2) != first.dim(2) || t.dim(3) != first.dim(3)) {
            shape_error("concat_channels", first.shape(), t.shape());
        }
        total_c += t.dim(1);
    }
    const std::size_t n = first.dim(0), hw = first.dim(2) * first.dim(3);
    Tensor out({n, total_c, first.dim(2), first.dim(3)});
    std::vector<std::size_t> ids;
    std::vector<std::size_t> chans;
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& t = p.value();
        const std::size_t c = t.dim(1);
        for (std::size_t b = 0; b < n; ++b) {
            std::copy_n(t.raw().data() + b * c * hw, c * hw, out.raw().data() + (b * total_c + offset) * hw);
        }
        offset += c;
        ids.push_back(p.id());
        chans.push_back(c);
    }
    return parts[0].tape().record(std::move(out), ids, [ids, chans, n, hw, total_c](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t c = chans[k];
            if (tape.requires_grad(ids[k])) {
                Tensor& gp = tape.grad_mut(ids[k]);
                for (std::size_t b = 0; b < n; ++b) {
                    const double* src = g.raw().data() + (b * total_c + offset) * hw;
                    double* dst = gp.raw().data() + b * c * hw;
                    for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                }
            }
            offset += c;
        }
    });
}

Var concat_channels(Var a, Var b) {
    const Var parts[] = {a, b};
    return concat_channels(std::span<const Var>(parts));
}

Var slice_channels(Var x, std::size_t begin, std::size_t end) {
    const Tensor& in = x.value();
    require_rank("slice_channels", in, 4);
    if (begin >= end || end > in.dim(1)) {
        throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") outside " + shape_str(in.shape()));
    }
    const std::size_t n = in.dim(0), c = in.dim(1), hw = in.dim(2) * in.dim(3), oc = end - begin;
    Tensor out({n, oc, in.dim(2), in.dim(3)});
    for (std::size_t b = 0; b < n; ++b) {
        std::copy_n(in.raw().data() + (b * c + begin) * hw, oc * hw, out.raw().data() + b * oc * hw);
    }
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {xid}, [xid, n, c, hw, oc, begin](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t b = 0; b < n; ++b) {
            const double* src = g.raw().data() + b * oc * hw;
            double* dst = gx.raw().data() + (b * c + begin) * hw;
            for (std::size_t i = 0; i < oc * hw; ++i) dst[i] += src[i];
        }
    });
}

Var upsample_nearest2x(Var x) {
    const Tensor& in = x.value();
    require_rank("upsample_nearest2x", in, 4);
    const std::size_t planes = in.dim(0) * in.dim(1), h = in.dim(2), w = in.dim(3);
    Tensor out({in.dim(0), in.dim(1), 2 * h, 2 * w});
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = in.raw().data() + p * h * w;
        double* dst = out.raw().data() + p * 4 * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
        }
    }
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {xid}, [xid, planes, h, w](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t p = 0; p < planes; ++p) {
            const double* src = g.raw().data() + p * 4 * h * w;
            double* dst = gx.raw().data() + p * h * w;
            for (std::size_t y = 0; y < 2 * h; ++y) {
                for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    });
}

Var avg_pool(Var x, std::size_t out_h, std::size_t out_w) {
    const Tensor& in = x.value();
    require_rank("avg_pool", in, 4);
    if (out_h == 0 || out_w == 0) throw std::invalid_argument("avg_pool: output size must be positive");
    const std::size_t planes = in.dim(0) * in.dim(1), h = in.dim(2), w = in.dim(3);
    // Bin i covers [floor(i*h/out_h), ceil((i+1)*h/out_h)).
    auto bins = [](std::size_t in_sz, std::size_t out_sz) {
        std::vector<std::pair<std::size_t, std::size_t>> b(out_sz);
        for (std::size_t i = 0; i < out_sz; ++i) {
            b[i] = {(i * in_sz) / out_sz, ((i + 1) * in_sz + out_sz - 1) / out_sz};
        }
        return b;
    };
    const auto ybins = bins(h, out_h);
    const auto xbins = bins(w, out_w);
    Tensor out({in.dim(0), in.dim(1), out_h, out_w});
    for (std::size_t p = 0; p < planes; ++p) {
        const double* src = in.raw().data() + p * h * w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double s = 0.0;
                for (std::size_t y = ybins[oy].first; y < ybins[oy].second; ++y) {
                    for (std::size_t xx = xbins[ox].first; xx < xbins[ox].second; ++xx) s += src[y * w + xx];
                }
                const double cnt = static_cast<double>((ybins[oy].second - ybins[oy].first) *
                                                       (xbins[ox].second - xbins[ox].first));
                out.raw()[(p * out_h + oy) * out_w + ox] = s / cnt;
            }
        }
    }
    const std::size_t xid = x.id();
    return x.tape().record(std::move(out), {xid}, [=](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t p = 0; p < planes; ++p) {
            double* dst = gx.raw().data() + p * h * w;
            for (std::size_t oy = 0; oy < out_h; ++oy) {
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const double cnt = static_cast<double>((ybins[oy].second - ybins[oy].first) *
                                                           (xbins[ox].second - xbins[ox].first));
                    const double gv = g.raw()[(p * out_h + oy) * out_w + ox] / cnt;
                    for (std::size_t y = ybins[oy].first; y < ybins[oy].second; ++y) {
                        for (std::size_t xx = xbins[ox].first; xx < xbins[ox].second; ++xx) dst[y * w + xx] += gv;
                    }
                }
            }
        }
    });
}

Var minmax_normalize(Var x) {
    const Tensor& in = x.value();
    if (in.empty()) throw std::invalid_argument("minmax_normalize: empty tensor");
    const auto [lo_it, hi_it] = std::minmax_element(in.raw().begin(), in.raw().end());
    const std::size_t imin = static_cast<std::size_t>(lo_it - in.raw().begin());
    const std::size_t imax = static_cast<std::size_t>(hi_it - in.raw().begin());
    const double lo = *lo_it;
    const double range = *hi_it - lo;
    Tensor out(in.shape());
    const std::size_t xid = x.id();
    if (range < 1e-8) return x.tape().constant(std::move(out));
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = (in[i] - lo) / range;
    return x.tape().record(std::move(out), {xid}, [xid, imin, imax, range](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        const Tensor& y = tape.value(self);
        Tensor& gx = tape.grad_mut(xid);
        double dmin = 0.0, dmax = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] / range;
            dmin += g[i] * (y[i] - 1.0) / range;
            dmax -= g[i] * y[i] / range;
        }
        gx[imin] += dmin;
        gx[imax] += dmax;
    });
}

Var mse(Var a, Var b) {
    require_same("mse", a.value(), b.value());
    if (a.value().empty()) throw std::invalid_argument("mse: empty tensors");
    const Var d = sub(a, b);
    return mean(mul(d, d));
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
    const Tensor& z = logits.value();
    if (z.rank() < 2) throw std::invalid_argument("softmax_cross_entropy: logits need a class axis, got " + shape_str(z.shape()));
    const std::size_t n = z.dim(0), k = z.dim(1), inner = z.size() / (n * k);
    if (targets.size() != n * inner) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for logits " + shape_str(z.shape()));
    }
    // Softmax probabilities are kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(z.size());
    std::vector<int> tg(targets.begin(), targets.end());
    double loss = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z[(b * k + c) * inner + i]);
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) s += std::exp(z[(b * k + c) * inner + i] - mx);
            for (std::size_t c = 0; c < k; ++c) {
                (*probs)[(b * k + c) * inner + i] = std::exp(z[(b * k + c) * inner + i] - mx) / s;
            }
            const int t = tg[b * inner + i];
            if (t < 0) continue;
            if (static_cast<std::size_t>(t) >= k) {
                throw std::invalid_argument("softmax_cross_entropy: target class " + std::to_string(t) +
                                            " outside [0," + std::to_string(k) + ")");
            }
            loss += -(z[(b * k + static_cast<std::size_t>(t)) * inner + i] - mx - std::log(s));
            ++count;
        }
    }
    const std::size_t zid = logits.id();
    if (count == 0) return logits.tape().constant(Tensor::scalar(0.0));
    loss /= static_cast<double>(count);
    return logits.tape().record(Tensor::scalar(loss), {zid}, [=](Tape& tape, std::size_t self) {
        const double g = tape.grad_mut(self)[0] / static_cast<double>(count);
        Tensor& gz = tape.grad_mut(zid);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t i = 0; i < inner; ++i) {
                const int t = tg[b * inner + i];
                if (t < 0) continue;
                for (std::size_t c = 0; c < k; ++c) {
                    const std::size_t idx = (b * k + c) * inner + i;
                    gz[idx] += g * ((*probs)[idx] - (static_cast<int>(c) == t ? 1.0 : 0.0));
                }
            }
        }
    });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
    const Tensor& z = logits.value();
    require_same("bce_with_logits", z, targets);
    if (z.empty()) throw std::invalid_argument("bce_with_logits: empty tensors");
    double loss = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        // max(z,0) - z*y + log(1 + exp(-|z|))
        loss += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    const double n = static_cast<double>(z.size());
    const std::size_t zid = logits.id();
    return logits.tape().record(Tensor::scalar(loss / n), {zid}, [zid, targets, n](Tape& tape, std::size_t self) {
        const double g = tape.grad_mut(self)[0] / n;
        const Tensor& zv = tape.value(zid);
        Tensor& gz = tape.grad_mut(zid);
        for (std::size_t i = 0; i < zv.size(); ++i) {
            const double s = zv[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-zv[i])) : std::exp(zv[i]) / (1.0 + std::exp(zv[i]));
            gz[i] += g * (s - targets[i]);
        }
    });
}

Var smooth_l1(Var pred, const Tensor& target, const Tensor& mask) {
    const Tensor& p = pred.value();
    require_same("smooth_l1", p, target);
    require_same("smooth_l1 mask", p, mask);
    double loss = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double d = std::abs(p[i] - target[i]);
        loss += d < 1.0 ? 0.5 * d * d : d - 0.5;
        ++count;
    }
    const std::size_t pid = pred.id();
    if (count == 0) return pred.tape().constant(Tensor::scalar(0.0));
    const double n = static_cast<double>(count);
    return pred.tape().record(Tensor::scalar(loss / n), {pid}, [pid, target, mask, n](Tape& tape, std::size_t self) {
        const double g = tape.grad_mut(self)[0] / n;
        const Tensor& pv = tape.value(pid);
        Tensor& gp = tape.grad_mut(pid);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            if (mask[i] == 0.0) continue;
            const double d = pv[i] - target[i];
            gp[i] += g * (std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0));
        }
    });
}

Var grl(Var x, double coeff) {
    if (!std::isfinite(coeff)) throw std::invalid_argument("grl: coefficient must be finite");
    const std::size_t xid = x.id();
    return x.tape().record(x.value(), {xid}, [xid, coeff](Tape& tape, std::size_t self) {
        const Tensor& g = tape.grad_mut(self);
        Tensor& gx = tape.grad_mut(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= coeff * g[i];
    });
}

void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads, double lr) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                                    std::to_string(grads.size()) + " gradients");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("sgd_step: learning rate must be finite and >= 0");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].value->shape() != grads[i].shape()) {
            shape_error("sgd_step " + params[i].name, params[i].value->shape(), grads[i].shape());
        }
        if (!grads[i].all_finite()) throw NumericalError("non-finite gradient in parameter " + params[i].name);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].value;
        const Tensor& g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
}

}  // namespace fogda
