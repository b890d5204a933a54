#include "ldp/tensor.hpp"

#include <atomic>
#include <cmath>

#include "ldp/errors.hpp"

namespace ldp::ad {

namespace detail {

const std::vector<double>* BackwardCtx::flow(const NodePtr& n) const {
    auto it = flows_.find(n.get());
    return it == flows_.end() ? nullptr : &it->second;
}

std::vector<double>& BackwardCtx::accum(const NodePtr& n) {
    auto it = flows_.find(n.get());
    if (it == flows_.end()) {
        it = flows_.emplace(n.get(), std::vector<double>(n->numel(), 0.0)).first;
        touched_.push_back(n);
    }
    return it->second;
}

bool BackwardCtx::wants(const NodePtr& n) const {
    return n->requires_grad || !n->tape.expired();
}

void BackwardCtx::seed(const NodePtr& n, double value) {
    accum(n)[0] += value;
}

void BackwardCtx::fold_into_leaves() {
    for (const auto& n : touched_) {
        if (!n->requires_grad) {
            continue;
        }
        auto& flow = flows_[n.get()];
        if (n->grad.empty()) {
            n->grad.assign(n->numel(), 0.0);
        }
        for (size_t i = 0; i < flow.size(); ++i) {
            n->grad[i] += flow[i];
        }
    }
}

}  // namespace detail

using detail::Node;
using detail::NodePtr;

namespace {

size_t shape_numel(const Shape& shape) {
    size_t n = 1;
    for (size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive");
        }
        n *= d;
    }
    return n;
}

std::atomic<bool> g_debug_checks{true};
thread_local bool t_recording = true;

}  // namespace

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled); }
bool debug_checks_enabled() { return g_debug_checks.load(); }

NoGradGuard::NoGradGuard() : prev_(t_recording) { t_recording = false; }
NoGradGuard::~NoGradGuard() { t_recording = prev_; }
bool grad_recording_enabled() { return t_recording; }

Tensor Tensor::zeros(const Shape& shape) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data.assign(shape_numel(shape), 0.0);
    return Tensor(std::move(n));
}

Tensor Tensor::full(const Shape& shape, double value) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data.assign(shape_numel(shape), value);
    return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor data length does not match shape");
    }
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data = std::move(data);
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
    if (!n_) throw ContractError("use of undefined tensor");
    return n_->shape;
}

size_t Tensor::numel() const { return shape().empty() ? 0 : n_->numel(); }
size_t Tensor::ndim() const { return shape().size(); }

size_t Tensor::rows() const {
    if (ndim() != 2) throw ShapeError("rows(): tensor is not 2D");
    return n_->shape[0];
}

size_t Tensor::cols() const {
    if (ndim() != 2) throw ShapeError("cols(): tensor is not 2D");
    return n_->shape[1];
}

std::span<const double> Tensor::data() const {
    if (!n_) throw ContractError("use of undefined tensor");
    return n_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!n_) throw ContractError("use of undefined tensor");
    return n_->data;
}

double Tensor::at(size_t i) const {
    if (i >= numel()) throw ShapeError("flat index out of range");
    return n_->data[i];
}

double Tensor::at(size_t r, size_t c) const {
    if (r >= rows() || c >= cols()) throw ShapeError("2D index out of range");
    return n_->data[r * cols() + c];
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value(): tensor is not scalar");
    return n_->data[0];
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

bool Tensor::has_grad() const { return n_ && !n_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return n_->grad;
}

void Tensor::zero_grad() {
    if (n_ && !n_->grad.empty()) {
        std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }
}

bool Tensor::tracked() const { return n_ && !n_->tape.expired(); }

Tensor Tensor::detach() const {
    if (!n_) return Tensor();
    auto n = std::make_shared<Node>();
    n->shape = n_->shape;
    n->data = n_->data;
    return Tensor(std::move(n));
}

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {}

Tensor Tape::var(const Shape& shape, std::vector<double> data) {
    Tensor t = Tensor::from(shape, std::move(data));
    watch(t);
    return t;
}

Tensor Tape::var_like(const Tensor& source) {
    return var(source.shape(), std::vector<double>(source.data().begin(), source.data().end()));
}

void Tape::watch(Tensor& t) {
    if (!t.defined()) throw ContractError("watch on undefined tensor");
    if (t.tracked() && t.n_->tape.lock() != state_) {
        throw ContractError("tensor already belongs to a different tape");
    }
    t.n_->requires_grad = true;
    t.n_->tape = state_;
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    if (loss.n_->tape.lock() != state_) {
        throw ContractError("loss is not connected to this tape");
    }
    detail::BackwardCtx ctx;
    ctx.seed(loss.n_, 1.0);
    for (auto it = state_->ops.rbegin(); it != state_->ops.rend(); ++it) {
        (*it)(ctx);
    }
    ctx.fold_into_leaves();
}

void Tape::clear() { state_->ops.clear(); }

size_t Tape::num_recorded() const { return state_->ops.size(); }

}  // namespace ldp::ad
