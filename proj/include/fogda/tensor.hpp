#pragma once

// Dense float64 tensors and a reverse-mode differentiation tape.
//
// A Tensor is a plain value (shape + row-major data). Differentiable
// computation happens on a Tape: every op appends a node holding its output
// value, its parent node ids and a backward closure. Var is a cheap handle
// to one node. Gradients are accumulated per node by Tape::backward().

#include <cstddef>
#include <functional>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace fogda {

using Shape = std::vector<std::size_t>;

// Tensor buffers start on a 64-byte boundary. Vectorized reductions peel a
// head that depends on the address, so a fixed alignment keeps results
// bitwise reproducible from run to run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    Storage& raw() { return data_; }
    const Storage& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // NCHW accessor, valid for rank-4 tensors.
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    double item() const;
    Tensor reshaped(Shape shape) const;
    bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    Storage data_;
};

class Tape;

// Handle to a node on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    // Called with the tape and the id of the node being differentiated; it
    // reads grad(self) and accumulates into the parents' gradients.
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that receives a gradient.
    Var leaf(Tensor value);
    // Leaf that never receives a gradient.
    Var constant(Tensor value);

    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    // Gradient accumulator of a node; zero-initialised on first access.
    Tensor& grad_mut(std::size_t id);
    // Gradient after backward(); zeros for nodes the loss does not reach.
    Tensor grad(Var v) const;

    // Runs reverse accumulation from a scalar loss. Throws on a non-scalar.
    void backward(Var loss);

    std::size_t size() const { return nodes_.size(); }
    bool any_requires_grad() const;
    const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
};

// ---- op catalog ---------------------------------------------------------

inline constexpr double kLogEps = 1e-8;

// Cross-correlation with zero padding. input [N,C,H,W], kernel [K,C,kh,kw], bias [K].
Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad);

Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
// log(max(x, kLogEps)); gradient is zero where the floor is active.
Var log(Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var sum(Var x);
Var mean(Var x);

Var concat_channels(std::span<const Var> parts);
Var concat_channels(Var a, Var b);
// Channels [begin, end) of an NCHW tensor.
Var slice_channels(Var x, std::size_t begin, std::size_t end);
Var upsample_nearest2x(Var x);
// Adaptive average pooling of an NCHW tensor to (out_h, out_w).
Var avg_pool(Var x, std::size_t out_h, std::size_t out_w);

// Min-max normalisation over every element of x. Outputs zeros when the
// range is below 1e-8.
Var minmax_normalize(Var x);

// Mean squared error with mean reduction.
Var mse(Var a, Var b);
// Softmax cross-entropy over axis 1. One target per position of the
// remaining axes, -1 means ignored. Mean over non-ignored positions;
// zero when every position is ignored.
Var softmax_cross_entropy(Var logits, std::span<const int> targets);
// Binary cross-entropy on logits against targets in [0,1], mean reduction.
Var bce_with_logits(Var logits, const Tensor& targets);
// Smooth-L1 (beta = 1) between pred and target, averaged over entries
// with nonzero mask. Zero when the mask is empty.
Var smooth_l1(Var pred, const Tensor& target, const Tensor& mask);

// Gradient reversal: identity forward, gradient scaled by -coeff backward.
Var grl(Var x, double coeff);

// A named view of one learnable tensor.
struct ParamRef {
    std::string name;
    Tensor* value;
};

// p <- p - lr * g for every parameter. Every gradient is checked before any
// parameter moves; a non-finite entry throws NumericalError naming the
// parameter and leaves all parameters untouched.
void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads, double lr);

}  // namespace fogda
