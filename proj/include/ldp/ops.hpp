#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "ldp/rng.hpp"
#include "ldp/tensor.hpp"

namespace ldp::ad {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// k*x + c elementwise.
Tensor affine(const Tensor& x, double k, double c);
Tensor neg(const Tensor& x);
Tensor mul_scalar(const Tensor& x, double k);
Tensor add_scalar(const Tensor& x, double c);

// [R x C] + [C], broadcast over rows (bias add).
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Softmax along `axis` of a 1D or 2D tensor, stabilized by max subtraction.
Tensor softmax(const Tensor& x, int axis);
// Row softmax restricted to mask==1 entries; masked entries get probability 0.
Tensor masked_softmax_rows(const Tensor& x, const std::vector<uint8_t>& mask);
Tensor log_softmax_rows(const Tensor& x);

// out[t] = x[t, ids[t]].
Tensor pick_rows(const Tensor& x, const std::vector<int>& ids);

// Mean negative log-likelihood over positions whose target != ignore_index.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int ignore_index = -1);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor stack_scalars(const std::vector<Tensor>& xs);  // k scalars -> [k]

Tensor slice_rows(const Tensor& x, size_t r0, size_t nrows);
Tensor slice_cols(const Tensor& x, size_t c0, size_t ncols);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
// min(x, hi); if clamped_count is given it receives the number of clamped entries.
Tensor clamp_max(const Tensor& x, double hi, size_t* clamped_count = nullptr);

// table [V x d], ids in [0,V) -> [len(ids) x d].
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Rotary position encoding on [L x head_dim]. 1D mode rotates pair i of each
// vector by pos * base^(-2i/head_dim). 2D mode splits the pairs in half: the
// first half is rotated by the row index, the second by the column index,
// each with the frequency schedule of a head_dim/2 rotary. Position 0 (or
// (0,0)) is the identity, and every rotation preserves the vector norm.
Tensor rope1d(const Tensor& x, const std::vector<int64_t>& positions, double base);
Tensor rope2d(const Tensor& x, const std::vector<std::array<int64_t, 2>>& positions, double base);

// Inverted dropout on the adapter branch; identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace ldp::ad
