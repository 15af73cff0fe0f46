#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tp/common.hpp"

namespace tprog::ad {

// Small reverse-mode tape over dense row-major double matrices. One tape per
// forward evaluation; ops record their pullbacks as closures and backward()
// replays them in reverse. External parameters enter through leaves whose
// gradients are flushed into caller-owned buffers, so a shared parameter set
// can be used by many tapes (one per example) with per-thread grad sinks.

struct Tensor {
    int rows = 0, cols = 0;
    std::vector<double> val, grad;

    size_t size() const { return val.size(); }
    double& v(int r, int c) { return val[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return val[static_cast<size_t>(r) * cols + c]; }
    double& g(int r, int c) { return grad[static_cast<size_t>(r) * cols + c]; }
};

class Tape {
public:
    // Fresh zero-filled node.
    Tensor* tensor(int rows, int cols);

    // Copy external values in; on backward() the accumulated gradient is
    // added into `grad_sink` (may be null for frozen parameters).
    Tensor* leaf(const double* values, int rows, int cols, double* grad_sink);

    // --- ops ---------------------------------------------------------------

    Tensor* matmul(Tensor* a, Tensor* b);     // (n,m)x(m,p)
    Tensor* matmul_nt(Tensor* a, Tensor* b);  // (n,m)x(p,m)^T -> (n,p)
    Tensor* add(Tensor* a, Tensor* b);
    Tensor* mul(Tensor* a, Tensor* b);  // elementwise
    Tensor* scale(Tensor* a, double s);

    // x*W + b with b broadcast over rows.
    Tensor* affine(Tensor* x, Tensor* w, Tensor* b);
    Tensor* gelu(Tensor* x);

    // out = sum_v weights[0][v] * scales[v] * states[v]
    Tensor* mix(std::span<Tensor* const> states, Tensor* weights,
                const std::vector<double>& scales = {});

    Tensor* concat_cols(std::span<Tensor* const> parts);
    Tensor* mean_rows(Tensor* x);

    // Row-wise softmax(x / tau + noise) over the causal-valid prefix of
    // each row (j <= i when causal). Entries outside the prefix are 0.
    Tensor* softmax_rows(Tensor* x, double tau, const std::vector<double>* noise, bool causal);

    // Hard one-hot argmax per row (ties -> lowest index); no gradient.
    Tensor* hard_rows(Tensor* x, bool causal);

    // Straight-through hardening: forward emits one-hot argmax rows, the
    // backward pass treats the op as identity.
    Tensor* st_rows(Tensor* x, bool causal);

    // Categorical attention score adjustment: multiply by the distance bias,
    // then (optionally) add the no-match mass (1 - row max) to column 0.
    Tensor* adjust_scores(Tensor* s, const std::vector<double>& bias, bool causal,
                          bool bos_mass = true);

    // Zero out entries above the causal diagonal (for multi-match scores).
    Tensor* mask_causal(Tensor* s);

    // Elementwise log(x + eps): lifts bounded match scores into logit space
    // so the relaxed argmax explores matches rather than all positions.
    Tensor* log_eps(Tensor* x, double eps);

    // out[i] = embedding_rows[ids[i]]
    Tensor* gather_rows(Tensor* table, const std::vector<int>& ids);

    // Sum of -log softmax(row)[target] over rows with target >= 0.
    // Also returns the per-row probabilities if probs_out is given.
    Tensor* ce_sum(Tensor* logits, const std::vector<int>& targets);

    // --- control -----------------------------------------------------------

    void backward(Tensor* scalar, double seed = 1.0);
    void reset();

private:
    Tensor* fresh(int rows, int cols);

    std::vector<std::unique_ptr<Tensor>> arena_;
    size_t used_ = 0;
    std::vector<std::function<void()>> pullbacks_;
    std::vector<std::pair<Tensor*, double*>> leaves_;
};

// Bias b_d on the query/key offset d: b_0 = 1/N, b_1 = 1 decreasing linearly
// to b_N = 1/N. Any strictly decreasing curve with these endpoints picks the
// closest match; linear is the simplest.
std::vector<double> distance_bias(int max_len);

}  // namespace tprog::ad
