#include "ldp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

#include "ldp/errors.hpp"

namespace ldp::ad {

namespace {

using detail::BackwardCtx;
using detail::NodePtr;
using detail::TapeState;

const NodePtr& node(const Tensor& t) { return OpContext::node(t); }

std::shared_ptr<TapeState> joint_tape(std::initializer_list<const Tensor*> inputs) {
    if (!grad_recording_enabled()) {
        return nullptr;
    }
    std::shared_ptr<TapeState> tape;
    for (const Tensor* t : inputs) {
        auto s = OpContext::tape_of(*t);
        if (!s) {
            continue;
        }
        if (!tape) {
            tape = s;
        } else if (tape != s) {
            throw ContractError("operands belong to different tapes");
        }
    }
    return tape;
}

void check_finite(std::span<const double> v, const char* op) {
    if (!debug_checks_enabled()) {
        return;
    }
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }
}

Tensor make_result(Shape shape, std::vector<double> data, const std::shared_ptr<TapeState>& tape,
                   const char* op) {
    check_finite(data, op);
    Tensor out = Tensor::from(std::move(shape), std::move(data));
    if (tape) {
        OpContext::attach(out, tape);
    }
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch");
    }
}

// Row-aware view of a 1D or 2D tensor: 1D tensors act as a single row.
void rowcol(const Tensor& x, size_t& rows, size_t& cols, const char* op) {
    if (x.ndim() == 1) {
        rows = 1;
        cols = x.shape()[0];
    } else if (x.ndim() == 2) {
        rows = x.rows();
        cols = x.cols();
    } else {
        throw ShapeError(std::string(op) + ": expected 1D or 2D tensor");
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto tape = joint_tape({&a, &b});
    std::vector<double> out(a.numel());
    auto da = a.data();
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] + db[i];
    }
    Tensor r = make_result(a.shape(), std::move(out), tape, "add");
    if (tape) {
        NodePtr na = node(a), nb = node(b), nr = node(r);
        OpContext::record(tape, [na, nb, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            if (ctx.wants(na)) {
                auto& ga = ctx.accum(na);
                for (size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
            }
            if (ctx.wants(nb)) {
                auto& gb = ctx.accum(nb);
                for (size_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i];
            }
        });
    }
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto tape = joint_tape({&a, &b});
    std::vector<double> out(a.numel());
    auto da = a.data();
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] - db[i];
    }
    Tensor r = make_result(a.shape(), std::move(out), tape, "sub");
    if (tape) {
        NodePtr na = node(a), nb = node(b), nr = node(r);
        OpContext::record(tape, [na, nb, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            if (ctx.wants(na)) {
                auto& ga = ctx.accum(na);
                for (size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i];
            }
            if (ctx.wants(nb)) {
                auto& gb = ctx.accum(nb);
                for (size_t i = 0; i < g->size(); ++i) gb[i] -= (*g)[i];
            }
        });
    }
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto tape = joint_tape({&a, &b});
    std::vector<double> out(a.numel());
    auto da = a.data();
    auto db = b.data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] * db[i];
    }
    Tensor r = make_result(a.shape(), std::move(out), tape, "mul");
    if (tape) {
        NodePtr na = node(a), nb = node(b), nr = node(r);
        OpContext::record(tape, [na, nb, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            if (ctx.wants(na)) {
                auto& ga = ctx.accum(na);
                for (size_t i = 0; i < g->size(); ++i) ga[i] += (*g)[i] * nb->data[i];
            }
            if (ctx.wants(nb)) {
                auto& gb = ctx.accum(nb);
                for (size_t i = 0; i < g->size(); ++i) gb[i] += (*g)[i] * na->data[i];
            }
        });
    }
    return r;
}

Tensor affine(const Tensor& x, double k, double c) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = k * dx[i] + c;
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "affine");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, k](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) gx[i] += k * (*g)[i];
        });
    }
    return r;
}

Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }
Tensor mul_scalar(const Tensor& x, double k) { return affine(x, k, 0.0); }
Tensor add_scalar(const Tensor& x, double c) { return affine(x, 1.0, c); }

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.ndim() != 2 || v.ndim() != 1 || v.shape()[0] != m.cols()) {
        throw ShapeError("add_rowvec: expected [R x C] and [C]");
    }
    auto tape = joint_tape({&m, &v});
    size_t R = m.rows(), C = m.cols();
    std::vector<double> out(R * C);
    auto dm = m.data();
    auto dv = v.data();
    for (size_t r = 0; r < R; ++r) {
        for (size_t c = 0; c < C; ++c) {
            out[r * C + c] = dm[r * C + c] + dv[c];
        }
    }
    Tensor r = make_result(m.shape(), std::move(out), tape, "add_rowvec");
    if (tape) {
        NodePtr nm = node(m), nv = node(v), nr = node(r);
        OpContext::record(tape, [nm, nv, nr, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            if (ctx.wants(nm)) {
                auto& gm = ctx.accum(nm);
                for (size_t i = 0; i < g->size(); ++i) gm[i] += (*g)[i];
            }
            if (ctx.wants(nv)) {
                auto& gv = ctx.accum(nv);
                for (size_t r2 = 0; r2 < R; ++r2) {
                    for (size_t c = 0; c < C; ++c) gv[c] += (*g)[r2 * C + c];
                }
            }
        });
    }
    return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) {
        throw ShapeError("matmul: operands must be 2D");
    }
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree");
    }
    auto tape = joint_tape({&a, &b});
    size_t M = a.rows(), K = a.cols(), N = b.cols();
    std::vector<double> out(M * N, 0.0);
    auto da = a.data();
    auto db = b.data();
    for (size_t i = 0; i < M; ++i) {
        for (size_t l = 0; l < K; ++l) {
            double av = da[i * K + l];
            const double* brow = &db[l * N];
            double* orow = &out[i * N];
            for (size_t j = 0; j < N; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor r = make_result({M, N}, std::move(out), tape, "matmul");
    if (tape) {
        NodePtr na = node(a), nb = node(b), nr = node(r);
        OpContext::record(tape, [na, nb, nr, M, K, N](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            if (ctx.wants(na)) {
                // ga += g . b^T
                auto& ga = ctx.accum(na);
                for (size_t i = 0; i < M; ++i) {
                    for (size_t l = 0; l < K; ++l) {
                        double acc = 0.0;
                        const double* grow = &(*g)[i * N];
                        const double* brow = &nb->data[l * N];
                        for (size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
                        ga[i * K + l] += acc;
                    }
                }
            }
            if (ctx.wants(nb)) {
                // gb += a^T . g
                auto& gb = ctx.accum(nb);
                for (size_t i = 0; i < M; ++i) {
                    const double* arow = &na->data[i * K];
                    const double* grow = &(*g)[i * N];
                    for (size_t l = 0; l < K; ++l) {
                        double av = arow[l];
                        double* gbrow = &gb[l * N];
                        for (size_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return r;
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: operand must be 2D");
    auto tape = joint_tape({&a});
    size_t R = a.rows(), C = a.cols();
    std::vector<double> out(R * C);
    auto da = a.data();
    for (size_t r = 0; r < R; ++r) {
        for (size_t c = 0; c < C; ++c) {
            out[c * R + r] = da[r * C + c];
        }
    }
    Tensor r = make_result({C, R}, std::move(out), tape, "transpose");
    if (tape) {
        NodePtr na = node(a), nr = node(r);
        OpContext::record(tape, [na, nr, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(na)) return;
            auto& ga = ctx.accum(na);
            for (size_t r2 = 0; r2 < R; ++r2) {
                for (size_t c = 0; c < C; ++c) ga[r2 * C + c] += (*g)[c * R + r2];
            }
        });
    }
    return r;
}

namespace {

// Shared softmax body over generic (outer, stride, count) slices.
void softmax_slices(const std::span<const double> in, std::vector<double>& out, size_t n_slices,
                    size_t slice_len, size_t outer_stride, size_t inner_stride) {
    for (size_t s = 0; s < n_slices; ++s) {
        size_t base = s * outer_stride;
        double mx = in[base];
        for (size_t i = 1; i < slice_len; ++i) {
            mx = std::max(mx, in[base + i * inner_stride]);
        }
        double z = 0.0;
        for (size_t i = 0; i < slice_len; ++i) {
            double e = std::exp(in[base + i * inner_stride] - mx);
            out[base + i * inner_stride] = e;
            z += e;
        }
        for (size_t i = 0; i < slice_len; ++i) {
            out[base + i * inner_stride] /= z;
        }
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    size_t R, C;
    rowcol(x, R, C, "softmax");
    int nd = static_cast<int>(x.ndim());
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ShapeError("softmax: invalid axis");

    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    bool along_rows = (x.ndim() == 1) || axis == 1;
    size_t n_slices = along_rows ? R : C;
    size_t slice_len = along_rows ? C : R;
    size_t outer_stride = along_rows ? C : 1;
    size_t inner_stride = along_rows ? 1 : C;
    softmax_slices(x.data(), out, n_slices, slice_len, outer_stride, inner_stride);
    Tensor r = make_result(x.shape(), std::move(out), tape, "softmax");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, n_slices, slice_len, outer_stride,
                                 inner_stride](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t s = 0; s < n_slices; ++s) {
                size_t base = s * outer_stride;
                double dot = 0.0;
                for (size_t i = 0; i < slice_len; ++i) {
                    size_t k = base + i * inner_stride;
                    dot += (*g)[k] * nr->data[k];
                }
                for (size_t i = 0; i < slice_len; ++i) {
                    size_t k = base + i * inner_stride;
                    gx[k] += ((*g)[k] - dot) * nr->data[k];
                }
            }
        });
    }
    return r;
}

Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask) {
    if (x.ndim() != 2) throw ShapeError("masked_softmax_rows: operand must be 2D");
    if (mask.size() != x.numel()) throw ShapeError("masked_softmax_rows: mask size mismatch");
    auto tape = joint_tape({&x});
    size_t R = x.rows(), C = x.cols();
    std::vector<double> out(R * C, 0.0);
    auto dx = x.data();
    for (size_t r = 0; r < R; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t c = 0; c < C; ++c) {
            if (mask[r * C + c]) mx = std::max(mx, dx[r * C + c]);
        }
        if (!std::isfinite(mx)) {
            throw NumericError("masked_softmax_rows: row with no allowed entries");
        }
        double z = 0.0;
        for (size_t c = 0; c < C; ++c) {
            size_t k = r * C + c;
            if (mask[k]) {
                out[k] = std::exp(dx[k] - mx);
                z += out[k];
            }
        }
        for (size_t c = 0; c < C; ++c) {
            if (mask[r * C + c]) out[r * C + c] /= z;
        }
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "masked_softmax_rows");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        auto m = mask;  // by value; mask lifetime is caller's business
        OpContext::record(tape, [nx, nr, m, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t r2 = 0; r2 < R; ++r2) {
                double dot = 0.0;
                for (size_t c = 0; c < C; ++c) {
                    size_t k = r2 * C + c;
                    if (m[k]) dot += (*g)[k] * nr->data[k];
                }
                for (size_t c = 0; c < C; ++c) {
                    size_t k = r2 * C + c;
                    if (m[k]) gx[k] += ((*g)[k] - dot) * nr->data[k];
                }
            }
        });
    }
    return r;
}

Tensor log_softmax_rows(const Tensor& x) {
    size_t R, C;
    rowcol(x, R, C, "log_softmax_rows");
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t r = 0; r < R; ++r) {
        double mx = dx[r * C];
        for (size_t c = 1; c < C; ++c) mx = std::max(mx, dx[r * C + c]);
        double z = 0.0;
        for (size_t c = 0; c < C; ++c) z += std::exp(dx[r * C + c] - mx);
        double lse = mx + std::log(z);
        for (size_t c = 0; c < C; ++c) out[r * C + c] = dx[r * C + c] - lse;
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "log_softmax_rows");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t r2 = 0; r2 < R; ++r2) {
                double gsum = 0.0;
                for (size_t c = 0; c < C; ++c) gsum += (*g)[r2 * C + c];
                for (size_t c = 0; c < C; ++c) {
                    size_t k = r2 * C + c;
                    gx[k] += (*g)[k] - std::exp(nr->data[k]) * gsum;
                }
            }
        });
    }
    return r;
}

Tensor pick_rows(const Tensor& x, const std::vector<int>& ids) {
    if (x.ndim() != 2) throw ShapeError("pick_rows: operand must be 2D");
    if (ids.size() != x.rows()) throw ShapeError("pick_rows: one id per row required");
    size_t C = x.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= C) {
            throw DataError("pick_rows: token id out of vocabulary range");
        }
    }
    auto tape = joint_tape({&x});
    std::vector<double> out(ids.size());
    auto dx = x.data();
    for (size_t t = 0; t < ids.size(); ++t) {
        out[t] = dx[t * C + static_cast<size_t>(ids[t])];
    }
    Tensor r = make_result({ids.size()}, std::move(out), tape, "pick_rows");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        auto idv = ids;
        OpContext::record(tape, [nx, nr, idv, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t t = 0; t < idv.size(); ++t) {
                gx[t * C + static_cast<size_t>(idv[t])] += (*g)[t];
            }
        });
    }
    return r;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_index) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy: logits must be [T x V]");
    size_t T = logits.rows(), V = logits.cols();
    if (targets.size() != T) throw ShapeError("cross_entropy: one target per row required");
    size_t active = 0;
    for (int y : targets) {
        if (y == ignore_index) continue;
        if (y < 0 || static_cast<size_t>(y) >= V) {
            throw DataError("cross_entropy: token id out of vocabulary range");
        }
        ++active;
    }
    if (active == 0) {
        throw DataError("cross_entropy: degenerate batch, every position ignored");
    }
    auto tape = joint_tape({&logits});
    auto dx = logits.data();
    double total = 0.0;
    for (size_t t = 0; t < T; ++t) {
        if (targets[t] == ignore_index) continue;
        double mx = dx[t * V];
        for (size_t c = 1; c < V; ++c) mx = std::max(mx, dx[t * V + c]);
        double z = 0.0;
        for (size_t c = 0; c < V; ++c) z += std::exp(dx[t * V + c] - mx);
        double lse = mx + std::log(z);
        total += lse - dx[t * V + static_cast<size_t>(targets[t])];
    }
    double denom = static_cast<double>(active);
    Tensor r = make_result({1}, {total / denom}, tape, "cross_entropy");
    if (tape) {
        NodePtr nx = node(logits), nr = node(r);
        auto tv = targets;
        OpContext::record(tape, [nx, nr, tv, T, V, ignore_index, denom](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            double gs = (*g)[0] / denom;
            auto& gx = ctx.accum(nx);
            for (size_t t = 0; t < T; ++t) {
                if (tv[t] == ignore_index) continue;
                double mx = nx->data[t * V];
                for (size_t c = 1; c < V; ++c) mx = std::max(mx, nx->data[t * V + c]);
                double z = 0.0;
                for (size_t c = 0; c < V; ++c) z += std::exp(nx->data[t * V + c] - mx);
                for (size_t c = 0; c < V; ++c) {
                    double p = std::exp(nx->data[t * V + c] - mx) / z;
                    double onehot = (c == static_cast<size_t>(tv[t])) ? 1.0 : 0.0;
                    gx[t * V + c] += gs * (p - onehot);
                }
            }
        });
    }
    return r;
}

namespace {

Tensor reduce_all(const Tensor& x, double scale, const char* op) {
    auto tape = joint_tape({&x});
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor r = make_result({1}, {total * scale}, tape, op);
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, scale](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            double gv = (*g)[0] * scale;
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        });
    }
    return r;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, 1.0, "sum"); }

Tensor mean(const Tensor& x) {
    return reduce_all(x, 1.0 / static_cast<double>(x.numel()), "mean");
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty input");
    std::vector<const Tensor*> ptrs;
    std::shared_ptr<TapeState> tape;
    std::vector<double> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) throw ShapeError("stack_scalars: inputs must be scalar");
        out[i] = xs[i].value();
        auto t = joint_tape({&xs[i]});
        if (t) {
            if (tape && tape != t) throw ContractError("operands belong to different tapes");
            tape = t;
        }
    }
    Tensor r = make_result({xs.size()}, std::move(out), tape, "stack_scalars");
    if (tape) {
        std::vector<NodePtr> ns;
        ns.reserve(xs.size());
        for (const auto& x : xs) ns.push_back(node(x));
        NodePtr nr = node(r);
        OpContext::record(tape, [ns, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            for (size_t i = 0; i < ns.size(); ++i) {
                if (ctx.wants(ns[i])) ctx.accum(ns[i])[0] += (*g)[i];
            }
        });
    }
    return r;
}

Tensor slice_rows(const Tensor& x, size_t r0, size_t nrows) {
    if (x.ndim() != 2) throw ShapeError("slice_rows: operand must be 2D");
    if (r0 + nrows > x.rows()) throw ShapeError("slice_rows: range out of bounds");
    auto tape = joint_tape({&x});
    size_t C = x.cols();
    std::vector<double> out(nrows * C);
    auto dx = x.data();
    std::copy(dx.begin() + r0 * C, dx.begin() + (r0 + nrows) * C, out.begin());
    Tensor r = make_result({nrows, C}, std::move(out), tape, "slice_rows");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, r0, nrows, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < nrows * C; ++i) gx[r0 * C + i] += (*g)[i];
        });
    }
    return r;
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t ncols) {
    if (x.ndim() != 2) throw ShapeError("slice_cols: operand must be 2D");
    if (c0 + ncols > x.cols()) throw ShapeError("slice_cols: range out of bounds");
    auto tape = joint_tape({&x});
    size_t R = x.rows(), C = x.cols();
    std::vector<double> out(R * ncols);
    auto dx = x.data();
    for (size_t r = 0; r < R; ++r) {
        for (size_t c = 0; c < ncols; ++c) out[r * ncols + c] = dx[r * C + c0 + c];
    }
    Tensor r = make_result({R, ncols}, std::move(out), tape, "slice_cols");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, c0, ncols, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t r2 = 0; r2 < R; ++r2) {
                for (size_t c = 0; c < ncols; ++c) {
                    gx[r2 * C + c0 + c] += (*g)[r2 * ncols + c];
                }
            }
        });
    }
    return r;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    size_t C = parts[0].cols();
    size_t R = 0;
    std::shared_ptr<TapeState> tape;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != C) throw ShapeError("concat_rows: column mismatch");
        R += p.rows();
        auto t = joint_tape({&p});
        if (t) {
            if (tape && tape != t) throw ContractError("operands belong to different tapes");
            tape = t;
        }
    }
    std::vector<double> out;
    out.reserve(R * C);
    for (const auto& p : parts) {
        auto d = p.data();
        out.insert(out.end(), d.begin(), d.end());
    }
    Tensor r = make_result({R, C}, std::move(out), tape, "concat_rows");
    if (tape) {
        std::vector<NodePtr> ns;
        std::vector<size_t> offsets;
        size_t off = 0;
        for (const auto& p : parts) {
            ns.push_back(node(p));
            offsets.push_back(off);
            off += p.numel();
        }
        NodePtr nr = node(r);
        OpContext::record(tape, [ns, offsets, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            for (size_t i = 0; i < ns.size(); ++i) {
                if (!ctx.wants(ns[i])) continue;
                auto& gp = ctx.accum(ns[i]);
                for (size_t k = 0; k < gp.size(); ++k) gp[k] += (*g)[offsets[i] + k];
            }
        });
    }
    return r;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    size_t R = parts[0].rows();
    size_t C = 0;
    std::shared_ptr<TapeState> tape;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.rows() != R) throw ShapeError("concat_cols: row mismatch");
        C += p.cols();
        auto t = joint_tape({&p});
        if (t) {
            if (tape && tape != t) throw ContractError("operands belong to different tapes");
            tape = t;
        }
    }
    std::vector<double> out(R * C);
    size_t c_off = 0;
    for (const auto& p : parts) {
        auto d = p.data();
        size_t pc = p.cols();
        for (size_t r = 0; r < R; ++r) {
            for (size_t c = 0; c < pc; ++c) out[r * C + c_off + c] = d[r * pc + c];
        }
        c_off += pc;
    }
    Tensor r = make_result({R, C}, std::move(out), tape, "concat_cols");
    if (tape) {
        std::vector<NodePtr> ns;
        std::vector<size_t> offs;
        std::vector<size_t> widths;
        size_t off = 0;
        for (const auto& p : parts) {
            ns.push_back(node(p));
            offs.push_back(off);
            widths.push_back(p.cols());
            off += p.cols();
        }
        NodePtr nr = node(r);
        OpContext::record(tape, [ns, offs, widths, nr, R, C](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            for (size_t i = 0; i < ns.size(); ++i) {
                if (!ctx.wants(ns[i])) continue;
                auto& gp = ctx.accum(ns[i]);
                for (size_t r2 = 0; r2 < R; ++r2) {
                    for (size_t c = 0; c < widths[i]; ++c) {
                        gp[r2 * widths[i] + c] += (*g)[r2 * C + offs[i] + c];
                    }
                }
            }
        });
    }
    return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.ndim() != 2) throw ShapeError("layer_norm: operand must be 2D");
    size_t R = x.rows(), C = x.cols();
    if (gamma.ndim() != 1 || gamma.shape()[0] != C || beta.ndim() != 1 || beta.shape()[0] != C) {
        throw ShapeError("layer_norm: gamma/beta must be [C]");
    }
    auto tape = joint_tape({&x, &gamma, &beta});
    std::vector<double> out(R * C);
    auto dx = x.data();
    auto dg = gamma.data();
    auto db = beta.data();
    for (size_t r = 0; r < R; ++r) {
        double mu = 0.0;
        for (size_t c = 0; c < C; ++c) mu += dx[r * C + c];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (size_t c = 0; c < C; ++c) {
            double d = dx[r * C + c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        double ivar = 1.0 / std::sqrt(var + eps);
        for (size_t c = 0; c < C; ++c) {
            double xhat = (dx[r * C + c] - mu) * ivar;
            out[r * C + c] = dg[c] * xhat + db[c];
        }
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "layer_norm");
    if (tape) {
        NodePtr nx = node(x), ng = node(gamma), nb = node(beta), nr = node(r);
        OpContext::record(tape, [nx, ng, nb, nr, R, C, eps](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g) return;
            bool wx = ctx.wants(nx), wg = ctx.wants(ng), wb = ctx.wants(nb);
            if (!wx && !wg && !wb) return;
            for (size_t r2 = 0; r2 < R; ++r2) {
                double mu = 0.0;
                for (size_t c = 0; c < C; ++c) mu += nx->data[r2 * C + c];
                mu /= static_cast<double>(C);
                double var = 0.0;
                for (size_t c = 0; c < C; ++c) {
                    double d = nx->data[r2 * C + c] - mu;
                    var += d * d;
                }
                var /= static_cast<double>(C);
                double ivar = 1.0 / std::sqrt(var + eps);
                double s1 = 0.0, s2 = 0.0;
                for (size_t c = 0; c < C; ++c) {
                    size_t k = r2 * C + c;
                    double xhat = (nx->data[k] - mu) * ivar;
                    double dxhat = (*g)[k] * ng->data[c];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
                if (wg) {
                    auto& gg = ctx.accum(ng);
                    for (size_t c = 0; c < C; ++c) {
                        size_t k = r2 * C + c;
                        gg[c] += (*g)[k] * (nx->data[k] - mu) * ivar;
                    }
                }
                if (wb) {
                    auto& gb = ctx.accum(nb);
                    for (size_t c = 0; c < C; ++c) gb[c] += (*g)[r2 * C + c];
                }
                if (wx) {
                    auto& gx = ctx.accum(nx);
                    double invC = 1.0 / static_cast<double>(C);
                    for (size_t c = 0; c < C; ++c) {
                        size_t k = r2 * C + c;
                        double xhat = (nx->data[k] - mu) * ivar;
                        double dxhat = (*g)[k] * ng->data[c];
                        gx[k] += ivar * (dxhat - s1 * invC - xhat * s2 * invC);
                    }
                }
            }
        });
    }
    return r;
}

namespace {

constexpr double kGeluK = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

}  // namespace

Tensor gelu(const Tensor& x) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = dx[i];
        double u = kGeluK * (v + kGeluC * v * v * v);
        out[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "gelu");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) {
                double v = nx->data[i];
                double u = kGeluK * (v + kGeluC * v * v * v);
                double th = std::tanh(u);
                double d = 0.5 * (1.0 + th) +
                           0.5 * v * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluC * v * v);
                gx[i] += (*g)[i] * d;
            }
        });
    }
    return r;
}

Tensor exp(const Tensor& x) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(dx[i]);
    Tensor r = make_result(x.shape(), std::move(out), tape, "exp");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * nr->data[i];
        });
    }
    return r;
}

Tensor log(const Tensor& x) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        if (dx[i] <= 0.0) throw NumericError("log: non-positive input");
        out[i] = std::log(dx[i]);
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "log");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] / nx->data[i];
        });
    }
    return r;
}

namespace {

double stable_sigmoid(double v) {
    if (v >= 0.0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    double e = std::exp(v);
    return e / (1.0 + e);
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(dx[i]);
    Tensor r = make_result(x.shape(), std::move(out), tape, "sigmoid");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) {
                double s = nr->data[i];
                gx[i] += (*g)[i] * s * (1.0 - s);
            }
        });
    }
    return r;
}

Tensor softplus(const Tensor& x) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = dx[i];
        out[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v)));
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "softplus");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) {
                gx[i] += (*g)[i] * stable_sigmoid(nx->data[i]);
            }
        });
    }
    return r;
}

Tensor clamp_max(const Tensor& x, double hi, size_t* clamped_count) {
    auto tape = joint_tape({&x});
    std::vector<double> out(x.numel());
    auto dx = x.data();
    size_t clamped = 0;
    for (size_t i = 0; i < out.size(); ++i) {
        if (dx[i] > hi) {
            out[i] = hi;
            ++clamped;
        } else {
            out[i] = dx[i];
        }
    }
    if (clamped_count) *clamped_count = clamped;
    Tensor r = make_result(x.shape(), std::move(out), tape, "clamp_max");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, hi](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) {
                if (nx->data[i] <= hi) gx[i] += (*g)[i];
            }
        });
    }
    return r;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding: table must be [V x d]");
    size_t V = table.rows(), d = table.cols();
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= V) {
            throw DataError("embedding: token id out of vocabulary range");
        }
    }
    if (ids.empty()) throw ShapeError("embedding: empty id sequence");
    auto tape = joint_tape({&table});
    std::vector<double> out(ids.size() * d);
    auto dt = table.data();
    for (size_t t = 0; t < ids.size(); ++t) {
        std::copy(dt.begin() + static_cast<size_t>(ids[t]) * d,
                  dt.begin() + (static_cast<size_t>(ids[t]) + 1) * d, out.begin() + t * d);
    }
    Tensor r = make_result({ids.size(), d}, std::move(out), tape, "embedding");
    if (tape) {
        NodePtr nt = node(table), nr = node(r);
        auto idv = ids;
        OpContext::record(tape, [nt, nr, idv, d](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nt)) return;
            auto& gt = ctx.accum(nt);
            for (size_t t = 0; t < idv.size(); ++t) {
                for (size_t c = 0; c < d; ++c) {
                    gt[static_cast<size_t>(idv[t]) * d + c] += (*g)[t * d + c];
                }
            }
        });
    }
    return r;
}

namespace {

// Rotates pair (x0, x1) by theta; used by both rope variants and their
// backward rules (backward rotates the flow by -theta).
inline void rotate_pair(double x0, double x1, double theta, double& y0, double& y1) {
    double c = std::cos(theta), s = std::sin(theta);
    y0 = c * x0 - s * x1;
    y1 = s * x0 + c * x1;
}

}  // namespace

Tensor rope1d(const Tensor& x, const std::vector<int64_t>& positions, double base) {
    if (x.ndim() != 2) throw ShapeError("rope1d: operand must be [L x head_dim]");
    size_t L = x.rows(), D = x.cols();
    if (D % 2 != 0) throw ConfigError("rope1d: head_dim must be even");
    if (positions.size() != L) throw ShapeError("rope1d: one position per row required");
    if (base <= 0.0) throw ConfigError("rope1d: base must be positive");
    auto tape = joint_tape({&x});
    size_t half = D / 2;
    std::vector<double> inv_freq(half);
    for (size_t j = 0; j < half; ++j) {
        inv_freq[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(D));
    }
    std::vector<double> out(L * D);
    auto dx = x.data();
    for (size_t t = 0; t < L; ++t) {
        double pos = static_cast<double>(positions[t]);
        for (size_t j = 0; j < half; ++j) {
            rotate_pair(dx[t * D + 2 * j], dx[t * D + 2 * j + 1], pos * inv_freq[j],
                        out[t * D + 2 * j], out[t * D + 2 * j + 1]);
        }
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "rope1d");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        auto pv = positions;
        OpContext::record(tape, [nx, nr, pv, inv_freq, L, D](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            size_t half = D / 2;
            for (size_t t = 0; t < L; ++t) {
                double pos = static_cast<double>(pv[t]);
                for (size_t j = 0; j < half; ++j) {
                    double g0, g1;
                    rotate_pair((*g)[t * D + 2 * j], (*g)[t * D + 2 * j + 1],
                                -pos * inv_freq[j], g0, g1);
                    gx[t * D + 2 * j] += g0;
                    gx[t * D + 2 * j + 1] += g1;
                }
            }
        });
    }
    return r;
}

Tensor rope2d(const Tensor& x, const std::vector<std::array<int64_t, 2>>& positions, double base) {
    if (x.ndim() != 2) throw ShapeError("rope2d: operand must be [L x head_dim]");
    size_t L = x.rows(), D = x.cols();
    if (D % 4 != 0) throw ConfigError("rope2d: head_dim must be divisible by 4");
    if (positions.size() != L) throw ShapeError("rope2d: one position per row required");
    if (base <= 0.0) throw ConfigError("rope2d: base must be positive");
    auto tape = joint_tape({&x});
    size_t quarter = D / 4;
    // Each axis gets the frequency schedule of a (head_dim/2)-wide rotary.
    std::vector<double> inv_freq(quarter);
    for (size_t j = 0; j < quarter; ++j) {
        inv_freq[j] = std::pow(base, -4.0 * static_cast<double>(j) / static_cast<double>(D));
    }
    std::vector<double> out(L * D);
    auto dx = x.data();
    for (size_t t = 0; t < L; ++t) {
        double pr = static_cast<double>(positions[t][0]);
        double pc = static_cast<double>(positions[t][1]);
        for (size_t j = 0; j < quarter; ++j) {
            rotate_pair(dx[t * D + 2 * j], dx[t * D + 2 * j + 1], pr * inv_freq[j],
                        out[t * D + 2 * j], out[t * D + 2 * j + 1]);
            size_t k = 2 * (quarter + j);
            rotate_pair(dx[t * D + k], dx[t * D + k + 1], pc * inv_freq[j], out[t * D + k],
                        out[t * D + k + 1]);
        }
    }
    Tensor r = make_result(x.shape(), std::move(out), tape, "rope2d");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        auto pv = positions;
        OpContext::record(tape, [nx, nr, pv, inv_freq, L, D](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            size_t quarter = D / 4;
            for (size_t t = 0; t < L; ++t) {
                double pr = static_cast<double>(pv[t][0]);
                double pc = static_cast<double>(pv[t][1]);
                for (size_t j = 0; j < quarter; ++j) {
                    double g0, g1;
                    rotate_pair((*g)[t * D + 2 * j], (*g)[t * D + 2 * j + 1],
                                -pr * inv_freq[j], g0, g1);
                    gx[t * D + 2 * j] += g0;
                    gx[t * D + 2 * j + 1] += g1;
                    size_t k = 2 * (quarter + j);
                    rotate_pair((*g)[t * D + k], (*g)[t * D + k + 1], -pc * inv_freq[j], g0, g1);
                    gx[t * D + k] += g0;
                    gx[t * D + k + 1] += g1;
                }
            }
        });
    }
    return r;
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
    if (!training || p == 0.0) {
        return x;
    }
    auto tape = joint_tape({&x});
    std::vector<double> mask(x.numel());
    double keep_scale = 1.0 / (1.0 - p);
    for (auto& m : mask) m = (rng.uniform() >= p) ? keep_scale : 0.0;
    std::vector<double> out(x.numel());
    auto dx = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * mask[i];
    Tensor r = make_result(x.shape(), std::move(out), tape, "dropout");
    if (tape) {
        NodePtr nx = node(x), nr = node(r);
        OpContext::record(tape, [nx, nr, mask](BackwardCtx& ctx) {
            const auto* g = ctx.flow(nr);
            if (!g || !ctx.wants(nx)) return;
            auto& gx = ctx.accum(nx);
            for (size_t i = 0; i < g->size(); ++i) gx[i] += (*g)[i] * mask[i];
        });
    }
    return r;
}

}  // namespace ldp::ad
