#include "tp/tape.hpp"

#include <algorithm>
#include <cmath>

namespace tprog::ad {

Tensor* Tape::fresh(int rows, int cols) {
    if (used_ < arena_.size()) {
        Tensor* t = arena_[used_++].get();
        t->rows = rows;
        t->cols = cols;
        t->val.assign(static_cast<size_t>(rows) * cols, 0.0);
        t->grad.assign(static_cast<size_t>(rows) * cols, 0.0);
        return t;
    }
    auto t = std::make_unique<Tensor>();
    t->rows = rows;
    t->cols = cols;
    t->val.assign(static_cast<size_t>(rows) * cols, 0.0);
    t->grad.assign(static_cast<size_t>(rows) * cols, 0.0);
    arena_.push_back(std::move(t));
    used_++;
    return arena_.back().get();
}

Tensor* Tape::tensor(int rows, int cols) { return fresh(rows, cols); }

Tensor* Tape::leaf(const double* values, int rows, int cols, double* grad_sink) {
    Tensor* t = fresh(rows, cols);
    std::copy(values, values + t->size(), t->val.begin());
    if (grad_sink) leaves_.emplace_back(t, grad_sink);
    return t;
}

Tensor* Tape::matmul(Tensor* a, Tensor* b) {
    if (a->cols != b->rows) throw InvalidArgument("matmul: shape mismatch");
    Tensor* out = fresh(a->rows, b->cols);
    int n = a->rows, m = a->cols, p = b->cols;
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < m; ++t) {
            double av = a->at(i, t);
            if (av == 0.0) continue;
            const double* brow = &b->val[static_cast<size_t>(t) * p];
            double* orow = &out->val[static_cast<size_t>(i) * p];
            for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
        }
    pullbacks_.push_back([a, b, out, n, m, p] {
        for (int i = 0; i < n; ++i) {
            const double* og = &out->grad[static_cast<size_t>(i) * p];
            for (int t = 0; t < m; ++t) {
                const double* brow = &b->val[static_cast<size_t>(t) * p];
                double acc = 0;
                for (int j = 0; j < p; ++j) acc += og[j] * brow[j];
                a->grad[static_cast<size_t>(i) * m + t] += acc;
                double av = a->at(i, t);
                if (av != 0.0) {
                    double* bg = &b->grad[static_cast<size_t>(t) * p];
                    for (int j = 0; j < p; ++j) bg[j] += av * og[j];
                }
            }
        }
    });
    return out;
}

Tensor* Tape::matmul_nt(Tensor* a, Tensor* b) {
    if (a->cols != b->cols) throw InvalidArgument("matmul_nt: shape mismatch");
    Tensor* out = fresh(a->rows, b->rows);
    int n = a->rows, m = a->cols, p = b->rows;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) {
            double acc = 0;
            const double* arow = &a->val[static_cast<size_t>(i) * m];
            const double* brow = &b->val[static_cast<size_t>(j) * m];
            for (int t = 0; t < m; ++t) acc += arow[t] * brow[t];
            out->v(i, j) = acc;
        }
    pullbacks_.push_back([a, b, out, n, m, p] {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j) {
                double g = out->grad[static_cast<size_t>(i) * p + j];
                if (g == 0.0) continue;
                double* ag = &a->grad[static_cast<size_t>(i) * m];
                double* bg = &b->grad[static_cast<size_t>(j) * m];
                const double* arow = &a->val[static_cast<size_t>(i) * m];
                const double* brow = &b->val[static_cast<size_t>(j) * m];
                for (int t = 0; t < m; ++t) {
                    ag[t] += g * brow[t];
                    bg[t] += g * arow[t];
                }
            }
    });
    return out;
}

Tensor* Tape::add(Tensor* a, Tensor* b) {
    if (a->rows != b->rows || a->cols != b->cols) throw InvalidArgument("add: shape mismatch");
    Tensor* out = fresh(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] + b->val[i];
    pullbacks_.push_back([a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
            a->grad[i] += out->grad[i];
            b->grad[i] += out->grad[i];
        }
    });
    return out;
}

Tensor* Tape::mul(Tensor* a, Tensor* b) {
    if (a->rows != b->rows || a->cols != b->cols) throw InvalidArgument("mul: shape mismatch");
    Tensor* out = fresh(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] * b->val[i];
    pullbacks_.push_back([a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
            a->grad[i] += out->grad[i] * b->val[i];
            b->grad[i] += out->grad[i] * a->val[i];
        }
    });
    return out;
}

Tensor* Tape::scale(Tensor* a, double s) {
    Tensor* out = fresh(a->rows, a->cols);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] * s;
    pullbacks_.push_back([a, out, s] {
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * s;
    });
    return out;
}

Tensor* Tape::affine(Tensor* x, Tensor* w, Tensor* b) {
    if (x->cols != w->rows || b->rows != 1 || b->cols != w->cols)
        throw InvalidArgument("affine: shape mismatch");
    Tensor* out = matmul(x, w);
    int n = out->rows, p = out->cols;
    Tensor* res = fresh(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p; ++j) res->v(i, j) = out->at(i, j) + b->at(0, j);
    pullbacks_.push_back([out, b, res, n, p] {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j) {
                double g = res->grad[static_cast<size_t>(i) * p + j];
                out->grad[static_cast<size_t>(i) * p + j] += g;
                b->grad[j] += g;
            }
    });
    return res;
}

Tensor* Tape::gelu(Tensor* x) {
    Tensor* out = fresh(x->rows, x->cols);
    for (size_t i = 0; i < out->size(); ++i) {
        double v = x->val[i];
        out->val[i] = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    }
    pullbacks_.push_back([x, out] {
        for (size_t i = 0; i < out->size(); ++i) {
            double v = x->val[i];
            double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
            x->grad[i] += out->grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

Tensor* Tape::mix(std::span<Tensor* const> states, Tensor* weights,
                  const std::vector<double>& scales) {
    if (states.empty()) throw InvalidArgument("mix: no states");
    if (weights->rows != 1 || weights->cols != static_cast<int>(states.size()))
        throw InvalidArgument("mix: weight shape mismatch");
    int n = states[0]->rows, k = states[0]->cols;
    Tensor* out = fresh(n, k);
    std::vector<Tensor*> st(states.begin(), states.end());
    std::vector<double> sc = scales.empty() ? std::vector<double>(st.size(), 1.0) : scales;
    for (size_t v = 0; v < st.size(); ++v) {
        double w = weights->val[v] * sc[v];
        if (w == 0.0) continue;
        for (size_t i = 0; i < out->size(); ++i) out->val[i] += w * st[v]->val[i];
    }
    pullbacks_.push_back([st, sc, weights, out] {
        for (size_t v = 0; v < st.size(); ++v) {
            double w = weights->val[v] * sc[v];
            double wg = 0;
            for (size_t i = 0; i < out->size(); ++i) {
                wg += out->grad[i] * st[v]->val[i];
                if (w != 0.0) st[v]->grad[i] += w * out->grad[i];
            }
            weights->grad[v] += wg * sc[v];
        }
    });
    return out;
}

Tensor* Tape::concat_cols(std::span<Tensor* const> parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols: no parts");
    int n = parts[0]->rows, total = 0;
    for (auto* p : parts) {
        if (p->rows != n) throw InvalidArgument("concat_cols: row mismatch");
        total += p->cols;
    }
    Tensor* out = fresh(n, total);
    std::vector<Tensor*> ps(parts.begin(), parts.end());
    int off = 0;
    for (auto* p : ps) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p->cols; ++j) out->v(i, off + j) = p->at(i, j);
        off += p->cols;
    }
    pullbacks_.push_back([ps, out, n] {
        int off = 0;
        for (auto* p : ps) {
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < p->cols; ++j)
                    p->grad[static_cast<size_t>(i) * p->cols + j] +=
                        out->grad[static_cast<size_t>(i) * out->cols + off + j];
            off += p->cols;
        }
    });
    return out;
}

Tensor* Tape::mean_rows(Tensor* x) {
    Tensor* out = fresh(1, x->cols);
    double inv = 1.0 / x->rows;
    for (int i = 0; i < x->rows; ++i)
        for (int j = 0; j < x->cols; ++j) out->val[j] += x->at(i, j) * inv;
    pullbacks_.push_back([x, out, inv] {
        for (int i = 0; i < x->rows; ++i)
            for (int j = 0; j < x->cols; ++j)
                x->grad[static_cast<size_t>(i) * x->cols + j] += out->grad[j] * inv;
    });
    return out;
}

Tensor* Tape::softmax_rows(Tensor* x, double tau, const std::vector<double>* noise, bool causal) {
    if (tau <= 0.0) throw InvalidArgument("softmax_rows: tau must be positive");
    int n = x->rows, m = x->cols;
    Tensor* out = fresh(n, m);
    for (int i = 0; i < n; ++i) {
        int limit = causal ? std::min(i + 1, m) : m;
        double mx = -1e300;
        for (int j = 0; j < limit; ++j) {
            // Signal scaled by 1/tau, noise at unit scale: the sample
            // converges to the hard argmax as tau anneals to zero, matching
            // the eval-time behavior instead of a Cat(softmax(x)) draw.
            double z = x->at(i, j) / tau;
            if (noise) z += (*noise)[static_cast<size_t>(i) * m + j];
            out->v(i, j) = z;
            mx = std::max(mx, z);
        }
        double sum = 0;
        for (int j = 0; j < limit; ++j) {
            double e = std::exp(out->at(i, j) - mx);
            out->v(i, j) = e;
            sum += e;
        }
        for (int j = 0; j < limit; ++j) out->v(i, j) /= sum;
    }
    pullbacks_.push_back([x, out, tau, causal, n, m] {
        for (int i = 0; i < n; ++i) {
            int limit = causal ? std::min(i + 1, m) : m;
            double dot = 0;
            for (int j = 0; j < limit; ++j)
                dot += out->grad[static_cast<size_t>(i) * m + j] * out->at(i, j);
            for (int j = 0; j < limit; ++j) {
                double p = out->at(i, j);
                x->grad[static_cast<size_t>(i) * m + j] +=
                    p * (out->grad[static_cast<size_t>(i) * m + j] - dot) / tau;
            }
        }
    });
    return out;
}

Tensor* Tape::hard_rows(Tensor* x, bool causal) {
    int n = x->rows, m = x->cols;
    Tensor* out = fresh(n, m);
    for (int i = 0; i < n; ++i) {
        int limit = causal ? std::min(i + 1, m) : m;
        int best = 0;
        for (int j = 1; j < limit; ++j)
            if (x->at(i, j) > x->at(i, best)) best = j;
        out->v(i, best) = 1.0;
    }
    return out;  // piecewise constant: no pullback
}

Tensor* Tape::st_rows(Tensor* x, bool causal) {
    int n = x->rows, m = x->cols;
    Tensor* out = fresh(n, m);
    for (int i = 0; i < n; ++i) {
        int limit = causal ? std::min(i + 1, m) : m;
        int best = 0;
        for (int j = 1; j < limit; ++j)
            if (x->at(i, j) > x->at(i, best)) best = j;
        out->v(i, best) = 1.0;
    }
    pullbacks_.push_back([x, out] {
        for (size_t i = 0; i < out->size(); ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

Tensor* Tape::adjust_scores(Tensor* s, const std::vector<double>& bias, bool causal,
                            bool bos_mass) {
    int n = s->rows;
    if (s->cols != n) throw InvalidArgument("adjust_scores: square matrix expected");
    Tensor* out = fresh(n, n);
    auto argmaxes = std::make_shared<std::vector<int>>(n, 0);
    for (int i = 0; i < n; ++i) {
        int limit = causal ? i + 1 : n;
        int am = 0;
        for (int j = 0; j < limit; ++j) {
            if (s->at(i, j) > s->at(i, am)) am = j;
            out->v(i, j) = s->at(i, j) * bias[std::abs(i - j)];
        }
        (*argmaxes)[i] = am;
        if (bos_mass) out->v(i, 0) += 1.0 - s->at(i, am);
    }
    pullbacks_.push_back([s, out, bias, causal, n, argmaxes, bos_mass] {
        for (int i = 0; i < n; ++i) {
            int limit = causal ? i + 1 : n;
            for (int j = 0; j < limit; ++j)
                s->grad[static_cast<size_t>(i) * n + j] +=
                    out->grad[static_cast<size_t>(i) * n + j] * bias[std::abs(i - j)];
            if (bos_mass)
                s->grad[static_cast<size_t>(i) * n + (*argmaxes)[i]] -=
                    out->grad[static_cast<size_t>(i) * n];
        }
    });
    return out;
}

Tensor* Tape::mask_causal(Tensor* s) {
    int n = s->rows, m = s->cols;
    Tensor* out = fresh(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m && j <= i; ++j) out->v(i, j) = s->at(i, j);
    pullbacks_.push_back([s, out, n, m] {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m && j <= i; ++j)
                s->grad[static_cast<size_t>(i) * m + j] += out->grad[static_cast<size_t>(i) * m + j];
    });
    return out;
}

Tensor* Tape::log_eps(Tensor* x, double eps) {
    Tensor* out = fresh(x->rows, x->cols);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = std::log(x->val[i] + eps);
    pullbacks_.push_back([x, out, eps] {
        for (size_t i = 0; i < out->size(); ++i)
            x->grad[i] += out->grad[i] / (x->val[i] + eps);
    });
    return out;
}

Tensor* Tape::gather_rows(Tensor* table, const std::vector<int>& ids) {
    Tensor* out = fresh(static_cast<int>(ids.size()), table->cols);
    for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < table->cols; ++j) out->v(static_cast<int>(i), j) = table->at(ids[i], j);
    pullbacks_.push_back([table, out, ids] {
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < table->cols; ++j)
                table->grad[static_cast<size_t>(ids[i]) * table->cols + j] +=
                    out->grad[i * table->cols + j];
    });
    return out;
}

Tensor* Tape::ce_sum(Tensor* logits, const std::vector<int>& targets) {
    int n = logits->rows, c = logits->cols;
    if (static_cast<int>(targets.size()) != n) throw InvalidArgument("ce_sum: target size mismatch");
    Tensor* out = fresh(1, 1);
    // Keep probabilities for the pullback.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * c);
    double loss = 0;
    for (int i = 0; i < n; ++i) {
        double mx = logits->at(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, logits->at(i, j));
        double sum = 0;
        for (int j = 0; j < c; ++j) {
            double e = std::exp(logits->at(i, j) - mx);
            (*probs)[static_cast<size_t>(i) * c + j] = e;
            sum += e;
        }
        for (int j = 0; j < c; ++j) (*probs)[static_cast<size_t>(i) * c + j] /= sum;
        if (targets[i] >= 0) loss -= std::log((*probs)[static_cast<size_t>(i) * c + targets[i]]);
    }
    out->val[0] = loss;
    pullbacks_.push_back([logits, out, probs, targets, n, c] {
        double g = out->grad[0];
        if (g == 0.0) return;
        for (int i = 0; i < n; ++i) {
            if (targets[i] < 0) continue;
            for (int j = 0; j < c; ++j) {
                double p = (*probs)[static_cast<size_t>(i) * c + j];
                logits->grad[static_cast<size_t>(i) * c + j] +=
                    g * (p - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

void Tape::backward(Tensor* scalar, double seed) {
    if (scalar->size() != 1) throw InvalidArgument("backward: scalar output expected");
    scalar->grad[0] = seed;
    for (auto it = pullbacks_.rbegin(); it != pullbacks_.rend(); ++it) (*it)();
    for (auto& [tensor, sink] : leaves_)
        for (size_t i = 0; i < tensor->size(); ++i) sink[i] += tensor->grad[i];
}

void Tape::reset() {
    used_ = 0;
    pullbacks_.clear();
    leaves_.clear();
}

std::vector<double> distance_bias(int max_len) {
    if (max_len < 1) throw InvalidArgument("distance_bias: max_len must be positive");
    std::vector<double> b(static_cast<size_t>(max_len) + 1);
    double floor = 1.0 / max_len;
    b[0] = floor;
    if (max_len == 1) return b;
    for (int d = 1; d <= max_len; ++d)
        b[d] = 1.0 - (d - 1) * (1.0 - floor) / (max_len - 1);
    return b;
}

}  // namespace tprog::ad
