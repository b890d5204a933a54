#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ldp::ad {

using Shape = std::vector<size_t>;

namespace detail {

struct TapeState;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // leaf accumulator, empty until first backward
    bool requires_grad = false;
    std::weak_ptr<TapeState> tape;

    size_t numel() const { return data.size(); }
};

using NodePtr = std::shared_ptr<Node>;

// Per-backward-pass gradient flows. Leaf grads are folded into Node::grad at
// the end of the pass so that repeated backward calls accumulate while
// intermediate flows stay private to each pass.
class BackwardCtx {
  public:
    const std::vector<double>* flow(const NodePtr& n) const;
    std::vector<double>& accum(const NodePtr& n);
    bool wants(const NodePtr& n) const;
    void seed(const NodePtr& n, double value);
    void fold_into_leaves();

  private:
    std::unordered_map<Node*, std::vector<double>> flows_;
    std::vector<NodePtr> touched_;
};

struct TapeState {
    std::vector<std::function<void(BackwardCtx&)>> ops;
};

}  // namespace detail

class Tape;

// Dense n-dimensional value. Copying a Tensor copies the handle, not the
// storage; detach()/clone() make independent copies. Tensors without a tape
// are plain immutable values as far as autodiff is concerned.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from(const Shape& shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const;
    size_t numel() const;
    size_t ndim() const;
    // 2D accessors; throw on other ranks.
    size_t rows() const;
    size_t cols() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();
    double at(size_t i) const;
    double at(size_t r, size_t c) const;
    double value() const;  // scalar tensors only

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    bool tracked() const;  // participates in some live tape

    Tensor detach() const;  // deep copy, constant

    friend class Tape;
    friend class OpContext;

  private:
    explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
    detail::NodePtr n_;
};

// Ordered record of the primitive operations of one differentiable
// computation. Ops are appended in execution order, which is a topological
// order of the graph; backward() replays them once each, in reverse.
class Tape {
  public:
    Tape();

    // New leaf with requires_grad set, tracked by this tape.
    Tensor var(const Shape& shape, std::vector<double> data);
    Tensor var_like(const Tensor& source);

    // Mark an existing tensor as a trainable leaf of this tape.
    void watch(Tensor& t);

    // Reverse pass from a scalar loss. Accumulates into leaf grads; repeated
    // calls without clear() keep accumulating.
    void backward(const Tensor& loss);

    // Drop recorded operations (leaves and their grads are untouched).
    void clear();

    size_t num_recorded() const;

    friend class OpContext;

  private:
    std::shared_ptr<detail::TapeState> state_;
};

// Toggle NaN/Inf screening inside ops. On by default; the sweep harness can
// switch it off for speed.
void set_debug_checks(bool enabled);
bool debug_checks_enabled();

// While alive, ops do not record onto any tape (used for finite-difference
// probes and reference-model evaluation).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_recording_enabled();

// Internal bridge for primitive op implementations.
class OpContext {
  public:
    static const detail::NodePtr& node(const Tensor& t) { return t.n_; }
    static Tensor wrap(detail::NodePtr n) { return Tensor(std::move(n)); }
    static std::shared_ptr<detail::TapeState> tape_of(const Tensor& t) {
        return t.n_ ? t.n_->tape.lock() : nullptr;
    }
    static void attach(const Tensor& t, const std::shared_ptr<detail::TapeState>& tape) {
        t.n_->tape = tape;
    }
    static void record(const std::shared_ptr<detail::TapeState>& tape,
                       std::function<void(detail::BackwardCtx&)> op) {
        tape->ops.push_back(std::move(op));
    }
};

}  // namespace ldp::ad
