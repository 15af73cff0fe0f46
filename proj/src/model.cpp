#include "tp/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <span>

namespace tprog::model {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

Graph::Graph(const Architecture& a) : arch(a) {
    if (arch.k < static_cast<int>(arch.vocab.size()) || arch.k < arch.max_len)
        throw InvalidArgument("Graph: cardinality k must cover vocab size and max_len");
    auto push = [&](VarNode v) {
        v.feature_offset = feature_count;
        v.feature_width = v.categorical ? arch.k : 1;
        feature_count += v.feature_width;
        if (v.categorical)
            cat_vars.push_back(static_cast<int>(vars.size()));
        else
            num_vars.push_back(static_cast<int>(vars.size()));
        vars.push_back(std::move(v));
    };

    if (arch.embedding == EmbeddingKind::OneHot) {
        push({VarClass::Tokens, -1, -1, "tokens", true, 0, 0, 0});
    } else {
        for (int j = 0; j < arch.embed_vars; ++j)
            push({VarClass::Embedding, -1, j, "var" + std::to_string(j) + "_embeddings", true, 0, 0, 0});
    }
    push({VarClass::Positions, -1, -1, "positions", true, 0, 0, 0});
    if (arch.any_numerical()) push({VarClass::Ones, -1, -1, "ones", false, 1, 0, 0});

    int prev_bound = 1;  // max static bound among numerical vars below the layer
    for (int l = 0; l < arch.layers; ++l) {
        int head_bound = arch.max_len * prev_bound;
        for (int h = 0; h < arch.cat_heads; ++h)
            push({VarClass::CatHead, l, h,
                  "attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs", true, 0, 0, 0});
        for (int h = 0; h < arch.num_heads; ++h)
            push({VarClass::NumHead, l, h,
                  "num_attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs", false,
                  head_bound, 0, 0});
        for (int m = 0; m < arch.cat_mlps; ++m)
            push({VarClass::CatMlp, l, m,
                  "mlp_" + std::to_string(l) + "_" + std::to_string(m) + "_outputs", true, 0, 0, 0});
        for (int m = 0; m < arch.num_mlps; ++m)
            push({VarClass::NumMlp, l, m,
                  "num_mlp_" + std::to_string(l) + "_" + std::to_string(m) + "_outputs", true, 0, 0, 0});
        if (arch.num_heads > 0) prev_bound = std::max(prev_bound, head_bound);
    }
}

namespace {

int layer_of(const VarNode& v) { return v.layer; }
bool is_head(const VarNode& v) {
    return v.cls == VarClass::CatHead || v.cls == VarClass::NumHead;
}

}  // namespace

std::vector<int> Graph::head_cat_candidates(int layer) const {
    std::vector<int> out;
    for (int i : cat_vars)
        if (layer_of(vars[i]) < layer) out.push_back(i);
    return out;
}

std::vector<int> Graph::head_num_candidates(int layer) const {
    std::vector<int> out;
    for (int i : num_vars)
        if (layer_of(vars[i]) < layer) out.push_back(i);
    return out;
}

std::vector<int> Graph::mlp_cat_candidates(int layer) const {
    std::vector<int> out;
    for (int i : cat_vars) {
        const auto& v = vars[i];
        if (layer_of(v) < layer || (layer_of(v) == layer && is_head(v))) out.push_back(i);
    }
    return out;
}

std::vector<int> Graph::mlp_num_candidates(int layer) const {
    // Deeper count chains are legal head values but make exhaustive lookup
    // tables impractically large, so MLP inputs stop at second-hop bounds.
    int cap = arch.max_len * arch.max_len;
    std::vector<int> out;
    for (int i : num_vars) {
        const auto& v = vars[i];
        if (v.bound > cap) continue;
        if (layer_of(v) < layer || (layer_of(v) == layer && is_head(v))) out.push_back(i);
    }
    return out;
}

int Graph::var_index(const std::string& name) const {
    for (size_t i = 0; i < vars.size(); ++i)
        if (vars[i].name == name) return static_cast<int>(i);
    throw InvalidArgument("Graph: unknown variable " + name);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

SoftParams SoftParams::init(const Architecture& arch, uint64_t seed) {
    Graph g(arch);
    SoftParams p;
    p.arch = arch;
    Rng rng = Rng(seed).fork(0x9a11);
    auto normal_vec = [&](size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.next_normal();
        return v;
    };
    auto fanin_vec = [&](size_t n, int fan_in) {
        std::vector<double> v(n);
        double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& x : v) x = (2.0 * rng.next_unit() - 1.0) * r;
        return v;
    };

    int k = arch.k;
    for (int l = 0; l < arch.layers; ++l) {
        LayerParams lp;
        size_t n_head_cat = g.head_cat_candidates(l).size();
        size_t n_head_num = g.head_num_candidates(l).size();
        size_t n_mlp_cat = g.mlp_cat_candidates(l).size();
        size_t n_mlp_num = g.mlp_num_candidates(l).size();
        for (int h = 0; h < arch.cat_heads; ++h) {
            CatHeadParams hp;
            hp.phi_q = normal_vec(n_head_cat);
            hp.phi_k = normal_vec(n_head_cat);
            hp.phi_v = normal_vec(n_head_cat);
            hp.psi = normal_vec(static_cast<size_t>(k) * k);
            lp.cat_heads.push_back(std::move(hp));
        }
        for (int h = 0; h < arch.num_heads; ++h) {
            NumHeadParams hp;
            hp.phi_q = normal_vec(n_head_cat);
            hp.phi_k = normal_vec(n_head_cat);
            hp.phi_v = normal_vec(n_head_num);
            hp.psi = normal_vec(static_cast<size_t>(k) * k);
            lp.num_heads.push_back(std::move(hp));
        }
        for (int m = 0; m < arch.cat_mlps; ++m) {
            MlpParams mp;
            mp.phi1 = normal_vec(n_mlp_cat);
            mp.phi2 = normal_vec(n_mlp_cat);
            int in = 2 * k;
            mp.w1 = fanin_vec(static_cast<size_t>(in) * arch.mlp_hidden, in);
            mp.b1.assign(arch.mlp_hidden, 0.0);
            mp.w2 = fanin_vec(static_cast<size_t>(arch.mlp_hidden) * k, arch.mlp_hidden);
            mp.b2.assign(k, 0.0);
            lp.cat_mlps.push_back(std::move(mp));
        }
        for (int m = 0; m < arch.num_mlps; ++m) {
            MlpParams mp;
            mp.phi1 = normal_vec(n_mlp_num);
            mp.phi2 = normal_vec(n_mlp_num);
            int in = 2;
            mp.w1 = fanin_vec(static_cast<size_t>(in) * arch.mlp_hidden, in);
            mp.b1.assign(arch.mlp_hidden, 0.0);
            mp.w2 = fanin_vec(static_cast<size_t>(arch.mlp_hidden) * k, arch.mlp_hidden);
            mp.b2.assign(k, 0.0);
            lp.num_mlps.push_back(std::move(mp));
        }
        p.layers.push_back(std::move(lp));
    }
    if (arch.embedding == EmbeddingKind::Factored)
        p.embed = normal_vec(arch.vocab.size() * static_cast<size_t>(arch.embed_vars) * k);
    p.classifier.assign(static_cast<size_t>(g.feature_count) * arch.classes.size(), 0.0);
    return p;
}

void SoftParams::for_each_family(
    const std::function<void(const std::string&, std::vector<double>&)>& fn) {
    for (auto& lp : layers) {
        for (auto& h : lp.cat_heads) {
            fn("gate", h.phi_q);
            fn("gate", h.phi_k);
            fn("gate", h.phi_v);
            fn("predicate", h.psi);
        }
        for (auto& h : lp.num_heads) {
            fn("gate", h.phi_q);
            fn("gate", h.phi_k);
            fn("gate", h.phi_v);
            fn("predicate", h.psi);
        }
        for (auto* group : {&lp.cat_mlps, &lp.num_mlps})
            for (auto& m : *group) {
                fn("gate", m.phi1);
                fn("gate", m.phi2);
                fn("mlp_dense", m.w1);
                fn("mlp_dense", m.b1);
                fn("mlp_dense", m.w2);
                fn("mlp_dense", m.b2);
            }
    }
    if (!embed.empty()) fn("embedding", embed);
    fn("classifier", classifier);
}

size_t SoftParams::parameter_count() {
    size_t n = 0;
    for_each_family([&](const std::string&, std::vector<double>& v) { n += v.size(); });
    return n;
}

SoftParams zero_like(const SoftParams& p) {
    SoftParams z = p;
    z.for_each_family([](const std::string&, std::vector<double>& v) {
        std::fill(v.begin(), v.end(), 0.0);
    });
    return z;
}

// ---------------------------------------------------------------------------
// Theta sampling
// ---------------------------------------------------------------------------

std::vector<double> gumbel_softmax(const std::vector<double>& logits, double tau,
                                   const std::vector<double>& noise) {
    if (tau <= 0.0) throw InvalidArgument("gumbel_softmax: tau must be positive");
    if (!noise.empty() && noise.size() != logits.size())
        throw InvalidArgument("gumbel_softmax: noise size mismatch");
    std::vector<double> out(logits.size());
    double mx = -1e300;
    for (size_t i = 0; i < logits.size(); ++i) {
        if (!std::isfinite(logits[i])) throw InvalidArgument("gumbel_softmax: non-finite logit");
        out[i] = (logits[i] + (noise.empty() ? 0.0 : noise[i])) / tau;
        mx = std::max(mx, out[i]);
    }
    double sum = 0;
    for (auto& x : out) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (auto& x : out) x /= sum;
    return out;
}

namespace {

std::vector<double> gumbel_vec(Rng& rng, size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.next_gumbel();
    return v;
}

// Visit logits vectors in the canonical order shared by ThetaSample indexing:
// gates per layer (cat heads q/k/v, num heads q/k/v, cat mlps 1/2, num mlps
// 1/2), then predicates (cat heads, num heads per layer), then embeddings.
template <typename P, typename FnGate, typename FnPred, typename FnEmbed>
void visit_theta(P& p, FnGate gate, FnPred pred, FnEmbed emb) {
    int l = 0;
    for (auto& lp : p.layers) {
        for (auto& h : lp.cat_heads) {
            gate(l, h.phi_q);
            gate(l, h.phi_k);
            gate(l, h.phi_v);
        }
        for (auto& h : lp.num_heads) {
            gate(l, h.phi_q);
            gate(l, h.phi_k);
            gate(l, h.phi_v);
        }
        for (auto& m : lp.cat_mlps) {
            gate(l, m.phi1);
            gate(l, m.phi2);
        }
        for (auto& m : lp.num_mlps) {
            gate(l, m.phi1);
            gate(l, m.phi2);
        }
        l++;
    }
    l = 0;
    for (auto& lp : p.layers) {
        for (auto& h : lp.cat_heads) pred(l, h.psi);
        for (auto& h : lp.num_heads) pred(l, h.psi);
        l++;
    }
    emb(p.embed);
}

ThetaSample make_theta(const SoftParams& p, const std::vector<double>& layer_taus, double emb_tau,
                       Rng* rng) {
    ThetaSample t;
    int k = p.arch.k;
    auto sample_rows = [&](const std::vector<double>& logits, int width, double tau) {
        std::vector<double> out;
        out.reserve(logits.size());
        for (size_t off = 0; off < logits.size(); off += width) {
            std::vector<double> row(logits.begin() + off, logits.begin() + off + width);
            auto noise = rng ? gumbel_vec(*rng, row.size()) : std::vector<double>{};
            auto s = gumbel_softmax(row, tau, noise);
            out.insert(out.end(), s.begin(), s.end());
        }
        return out;
    };
    visit_theta(
        const_cast<SoftParams&>(p),
        [&](int l, std::vector<double>& v) {
            t.gates.push_back(sample_rows(v, static_cast<int>(v.size()), layer_taus[l]));
        },
        [&](int l, std::vector<double>& v) { t.predicates.push_back(sample_rows(v, k, layer_taus[l])); },
        [&](std::vector<double>& v) {
            double tau = emb_tau;
            if (v.empty()) return;
            // One table per embedding variable, rows per token.
            int m = p.arch.embed_vars;
            size_t vocab = p.arch.vocab.size();
            for (int j = 0; j < m; ++j) {
                std::vector<double> table;
                table.reserve(vocab * k);
                for (size_t w = 0; w < vocab; ++w) {
                    size_t off = (w * m + j) * static_cast<size_t>(k);
                    std::vector<double> row(v.begin() + off, v.begin() + off + k);
                    auto noise2 = rng ? gumbel_vec(*rng, row.size()) : std::vector<double>{};
                    auto sj = gumbel_softmax(row, tau, noise2);
                    table.insert(table.end(), sj.begin(), sj.end());
                }
                t.embeds.push_back(std::move(table));
            }
        });
    return t;
}

}  // namespace

ThetaSample make_theta_public_mean(const SoftParams& p, const std::vector<double>& taus,
                                   double emb_tau);

ThetaSample sample_theta(const SoftParams& p, double tau, Rng& rng) {
    std::vector<double> taus(std::max(1, p.arch.layers), tau);
    return make_theta(p, taus, tau, &rng);
}

ThetaSample sample_theta_layered(const SoftParams& p, const std::vector<double>& layer_taus,
                                 double emb_tau, Rng& rng) {
    return make_theta(p, layer_taus, emb_tau, &rng);
}

ThetaSample mean_theta(const SoftParams& p, double tau) {
    std::vector<double> taus(std::max(1, p.arch.layers), tau);
    return make_theta(p, taus, tau, nullptr);
}

ThetaSample make_theta_public_mean(const SoftParams& p, const std::vector<double>& taus,
                                   double emb_tau) {
    return make_theta(p, taus, emb_tau, nullptr);
}

ThetaSample zero_like_theta(const SoftParams& p) {
    std::vector<double> taus(std::max(1, p.arch.layers), 1.0);
    ThetaSample z = make_theta(p, taus, 1.0, nullptr);
    for (auto& v : z.gates) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : z.predicates) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : z.embeds) std::fill(v.begin(), v.end(), 0.0);
    return z;
}

void backprop_theta_layered(const SoftParams& p, const ThetaSample& sample,
                            const ThetaSample& grads, const std::vector<double>& layer_taus,
                            double emb_tau, SoftParams* logit_grads) {
    int k = p.arch.k;
    // d logits = (1/tau) * p .* (dp - (dp . p)) per simplex row.
    auto pull_rows = [&](const std::vector<double>& probs, const std::vector<double>& dprobs,
                         std::vector<double>& dlogits, int width, double tau) {
        for (size_t off = 0; off < probs.size(); off += width) {
            double dot = 0;
            for (int i = 0; i < width; ++i) dot += dprobs[off + i] * probs[off + i];
            for (int i = 0; i < width; ++i)
                dlogits[off + i] += probs[off + i] * (dprobs[off + i] - dot) / tau;
        }
    };
    size_t gi = 0, pi = 0;
    visit_theta(
        *logit_grads,
        [&](int l, std::vector<double>& dv) {
            pull_rows(sample.gates[gi], grads.gates[gi], dv, static_cast<int>(dv.size()),
                      layer_taus[l]);
            gi++;
        },
        [&](int l, std::vector<double>& dv) {
            pull_rows(sample.predicates[pi], grads.predicates[pi], dv, k, layer_taus[l]);
            pi++;
        },
        [&](std::vector<double>& dv) {
            if (dv.empty()) return;
            int m = p.arch.embed_vars;
            size_t vocab = p.arch.vocab.size();
            for (int j = 0; j < m; ++j)
                for (size_t w = 0; w < vocab; ++w) {
                    size_t off = (w * m + j) * static_cast<size_t>(k);
                    size_t soff = w * static_cast<size_t>(k);
                    double dot = 0;
                    for (int i = 0; i < k; ++i)
                        dot += grads.embeds[j][soff + i] * sample.embeds[j][soff + i];
                    for (int i = 0; i < k; ++i)
                        dv[off + i] += sample.embeds[j][soff + i] *
                                       (grads.embeds[j][soff + i] - dot) / emb_tau;
                }
        });
}

void backprop_theta(const SoftParams& p, const ThetaSample& sample, const ThetaSample& grads,
                    double tau, SoftParams* logit_grads) {
    std::vector<double> taus(std::max(1, p.arch.layers), tau);
    backprop_theta_layered(p, sample, grads, taus, tau, logit_grads);
}

// ---------------------------------------------------------------------------
// Forward builder
// ---------------------------------------------------------------------------

namespace {

struct ThetaCursor {
    const ThetaSample& theta;
    ThetaSample* grads = nullptr;
    size_t gate = 0, pred = 0;

    std::pair<const std::vector<double>*, double*> next_gate() {
        auto* g = grads ? grads->gates[gate].data() : nullptr;
        return {&theta.gates[gate++], g};
    }
    std::pair<const std::vector<double>*, double*> next_pred() {
        auto* g = grads ? grads->predicates[pred].data() : nullptr;
        return {&theta.predicates[pred++], g};
    }
};

struct BuildOutput {
    ad::Tensor* logits = nullptr;
};

// Shared relaxed forward over one sequence. Gradients flow when sinks are
// provided; trace captures intermediate states when non-null.
BuildOutput build_forward(ad::Tape& tape, const SoftParams& p, const Graph& g,
                          const ThetaSample& theta, ThetaSample* theta_grads,
                          SoftParams* param_grads, const std::vector<int>& tokens,
                          const std::vector<double>& layer_taus, SoftMode mode, Rng* rng,
                          RelaxedTrace* trace) {
    const auto& arch = p.arch;
    int n = static_cast<int>(tokens.size());
    int k = arch.k;
    if (n == 0) throw InvalidArgument("forward: empty sequence");
    if (n > arch.max_len) throw InvalidArgument("forward: sequence longer than max_len");
    for (int t : tokens)
        if (t < 0 || t >= static_cast<int>(arch.vocab.size()))
            throw InvalidArgument("forward: token id out of range");
    bool train = mode == SoftMode::Train;
    if (train && !rng) throw InvalidArgument("forward: train mode needs a noise source");

    ThetaCursor cur{theta, theta_grads};
    std::vector<ad::Tensor*> states(g.vars.size(), nullptr);
    auto bias = ad::distance_bias(arch.max_len);
    static const bool no_train_bias = std::getenv("TP_EXP_NO_TRAIN_BIAS") != nullptr;
    static const bool st_attn = std::getenv("TP_EXP_ST_ATTN") != nullptr;
    static const bool st_theta = std::getenv("TP_EXP_ST_THETA") != nullptr;
    static const bool bos_train = std::getenv("TP_EXP_BOS_TRAIN") != nullptr;
    static const bool no_attn_noise = std::getenv("TP_EXP_NO_ATTN_NOISE") != nullptr;
    static const bool raw_scores = std::getenv("TP_EXP_RAW_SCORES") != nullptr;
    static const bool noise_in_tau = std::getenv("TP_EXP_NOISE_IN_TAU") != nullptr;
    std::vector<double> flat_bias(bias.size(), 1.0);
    const auto& train_bias = (mode == SoftMode::Train && no_train_bias) ? flat_bias : bias;

    auto check_finite = [&](ad::Tensor* t, const VarNode& v) {
        for (double x : t->val)
            if (!std::isfinite(x))
                throw std::runtime_error("forward: non-finite state in variable '" + v.name +
                                         "' (layer " + std::to_string(v.layer) + ")");
    };
    auto capture_cat = [&](const VarNode& v, ad::Tensor* t) {
        if (!trace) return;
        std::vector<std::vector<double>> rows(n);
        for (int i = 0; i < n; ++i)
            rows[i].assign(t->val.begin() + static_cast<size_t>(i) * k,
                           t->val.begin() + static_cast<size_t>(i + 1) * k);
        trace->cat_states[v.name] = std::move(rows);
    };
    auto capture_num = [&](const VarNode& v, ad::Tensor* t) {
        if (!trace) return;
        trace->num_states[v.name] = t->val;
    };

    // Inputs.
    for (size_t vi = 0; vi < g.vars.size(); ++vi) {
        const auto& v = g.vars[vi];
        if (v.layer >= 0) break;
        switch (v.cls) {
            case VarClass::Tokens: {
                ad::Tensor* t = tape.tensor(n, k);
                for (int i = 0; i < n; ++i) t->v(i, tokens[i]) = 1.0;
                states[vi] = t;
                break;
            }
            case VarClass::Positions: {
                ad::Tensor* t = tape.tensor(n, k);
                for (int i = 0; i < n; ++i) t->v(i, i) = 1.0;
                states[vi] = t;
                break;
            }
            case VarClass::Ones: {
                ad::Tensor* t = tape.tensor(n, 1);
                for (int i = 0; i < n; ++i) t->v(i, 0) = 1.0;
                states[vi] = t;
                break;
            }
            case VarClass::Embedding: {
                const auto& table = theta.embeds[v.index];
                double* sink = theta_grads ? theta_grads->embeds[v.index].data() : nullptr;
                ad::Tensor* tbl =
                    tape.leaf(table.data(), static_cast<int>(arch.vocab.size()), k, sink);
                states[vi] = tape.gather_rows(tbl, tokens);
                break;
            }
            default:
                throw InvalidArgument("forward: unexpected input variable class");
        }
        if (v.categorical)
            capture_cat(v, states[vi]);
        else
            capture_num(v, states[vi]);
    }

    auto gate_leaf = [&](std::span<ad::Tensor* const> cands) {
        auto [vals, sink] = cur.next_gate();
        ad::Tensor* leaf = tape.leaf(vals->data(), 1, static_cast<int>(cands.size()), sink);
        if (train && st_theta) leaf = tape.st_rows(leaf, false);
        return leaf;
    };
    auto gather_states = [&](const std::vector<int>& idx) {
        std::vector<ad::Tensor*> out;
        out.reserve(idx.size());
        for (int i : idx) out.push_back(states[i]);
        return out;
    };

    // Gumbel noise for a relaxed argmax row block; draw order is fixed by the
    // module order so streams are reproducible.
    auto noise_block = [&](size_t count) {
        std::vector<double> v(count);
        for (auto& x : v) x = rng->next_gumbel();
        return v;
    };

    static const double attn_tau_fix = [] {
        const char* v = std::getenv("TP_EXP_ATTN_TAU");
        return v ? std::atof(v) : 0.0;
    }();
    for (int l = 0; l < arch.layers; ++l) {
        double tau = layer_taus[l];
        if (mode == SoftMode::Train && attn_tau_fix > 0) tau = attn_tau_fix;
        const auto& lp = p.layers[l];
        auto head_cat = g.head_cat_candidates(l);
        auto head_num = g.head_num_candidates(l);
        auto head_cat_states = gather_states(head_cat);
        auto head_num_states = gather_states(head_num);

        for (int h = 0; h < arch.cat_heads; ++h) {
            (void)lp;
            ad::Tensor* pi_q = gate_leaf(head_cat_states);
            ad::Tensor* pi_k = gate_leaf(head_cat_states);
            ad::Tensor* pi_v = gate_leaf(head_cat_states);
            ad::Tensor* q = tape.mix(head_cat_states, pi_q);
            ad::Tensor* key = tape.mix(head_cat_states, pi_k);
            ad::Tensor* val = tape.mix(head_cat_states, pi_v);
            auto [pred_vals, pred_sink] = cur.next_pred();
            ad::Tensor* wp = tape.leaf(pred_vals->data(), k, k, pred_sink);
            if (train && st_theta) wp = tape.st_rows(wp, false);
            ad::Tensor* scores = tape.matmul_nt(tape.matmul(q, wp), key);
            ad::Tensor* att;
            if (train) {
                // The no-match fallback mass is an eval-time construct; with
                // diffuse early scores it swamps column 0 and starves the
                // predicate gradients, so the relaxation trains without it.
                ad::Tensor* adjusted =
                    tape.adjust_scores(scores, train_bias, arch.causal, bos_train);
                auto noise = noise_block(static_cast<size_t>(n) * n);
                if (noise_in_tau)
                    for (auto& g_ : noise) g_ /= tau;
                ad::Tensor* logits =
                    raw_scores ? adjusted : tape.log_eps(adjusted, 1e-6);
                att = tape.softmax_rows(logits, tau, no_attn_noise ? nullptr : &noise,
                                        arch.causal);
                if (st_attn) att = tape.st_rows(att, arch.causal);
            } else {
                ad::Tensor* adjusted = tape.adjust_scores(scores, bias, arch.causal, true);
                att = tape.hard_rows(adjusted, arch.causal);
            }
            int vi = g.var_index("attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs");
            states[vi] = tape.matmul(att, val);
            check_finite(states[vi], g.vars[vi]);
            capture_cat(g.vars[vi], states[vi]);
            if (trace) {
                std::vector<std::vector<double>> rows(n);
                for (int i = 0; i < n; ++i)
                    rows[i].assign(att->val.begin() + static_cast<size_t>(i) * n,
                                   att->val.begin() + static_cast<size_t>(i + 1) * n);
                trace->attn_rows[g.vars[vi].name] = std::move(rows);
            }
        }

        for (int h = 0; h < arch.num_heads; ++h) {
            ad::Tensor* pi_q = gate_leaf(head_cat_states);
            ad::Tensor* pi_k = gate_leaf(head_cat_states);
            ad::Tensor* pi_v = gate_leaf(head_num_states);
            ad::Tensor* q = tape.mix(head_cat_states, pi_q);
            ad::Tensor* key = tape.mix(head_cat_states, pi_k);
            ad::Tensor* val = tape.mix(head_num_states, pi_v);  // raw values: sum semantics
            auto [pred_vals, pred_sink] = cur.next_pred();
            ad::Tensor* wp = tape.leaf(pred_vals->data(), k, k, pred_sink);
            if (train && st_theta) wp = tape.st_rows(wp, false);
            ad::Tensor* scores = tape.matmul_nt(tape.matmul(q, wp), key);
            // Multi-match scores: no normalization, no default; rows may sum
            // to zero ("attend to nothing").
            if (arch.causal) scores = tape.mask_causal(scores);
            int vi = g.var_index("num_attn_" + std::to_string(l) + "_" + std::to_string(h) +
                                 "_outputs");
            states[vi] = tape.matmul(scores, val);
            check_finite(states[vi], g.vars[vi]);
            capture_num(g.vars[vi], states[vi]);
        }

        auto emit_mlp = [&](const MlpParams& mp, const std::vector<int>& cands, bool numerical,
                            int out_var) {
            auto cand_states = gather_states(cands);
            std::vector<double> scales;
            if (numerical) {
                // Scale each candidate into [0, 1] by its static bound; the
                // discretizer re-applies the same encoding when enumerating.
                for (int c : cands) scales.push_back(1.0 / g.vars[c].bound);
            }
            ad::Tensor* pi1 = gate_leaf(cand_states);
            ad::Tensor* pi2 = gate_leaf(cand_states);
            ad::Tensor* in1 = tape.mix(cand_states, pi1, scales);
            ad::Tensor* in2 = tape.mix(cand_states, pi2, scales);
            std::vector<ad::Tensor*> both = {in1, in2};
            ad::Tensor* z = tape.concat_cols(both);
            int in_dim = numerical ? 2 : 2 * k;
            auto leaf = [&](const std::vector<double>& v, int r, int c, double* sink) {
                return tape.leaf(v.data(), r, c, sink);
            };
            MlpParams* mg = nullptr;
            if (param_grads) {
                // Locate the matching grad struct by walking the same layout.
                auto& glp = param_grads->layers[l];
                size_t idx = numerical ? (&mp - lp.num_mlps.data()) : (&mp - lp.cat_mlps.data());
                mg = numerical ? &glp.num_mlps[idx] : &glp.cat_mlps[idx];
            }
            ad::Tensor* w1 = leaf(mp.w1, in_dim, arch.mlp_hidden, mg ? mg->w1.data() : nullptr);
            ad::Tensor* b1 = leaf(mp.b1, 1, arch.mlp_hidden, mg ? mg->b1.data() : nullptr);
            ad::Tensor* w2 = leaf(mp.w2, arch.mlp_hidden, k, mg ? mg->w2.data() : nullptr);
            ad::Tensor* b2 = leaf(mp.b2, 1, k, mg ? mg->b2.data() : nullptr);
            ad::Tensor* f = tape.affine(tape.gelu(tape.affine(z, w1, b1)), w2, b2);
            ad::Tensor* out;
            if (train) {
                auto noise = noise_block(static_cast<size_t>(n) * k);
                out = tape.softmax_rows(f, tau, no_attn_noise ? nullptr : &noise, false);
                if (st_attn) out = tape.st_rows(out, false);
            } else {
                out = tape.hard_rows(f, false);
            }
            states[out_var] = out;
            check_finite(out, g.vars[out_var]);
            capture_cat(g.vars[out_var], out);
        };

        auto mlp_cat = g.mlp_cat_candidates(l);
        auto mlp_num = g.mlp_num_candidates(l);
        for (int m = 0; m < arch.cat_mlps; ++m)
            emit_mlp(lp.cat_mlps[m], mlp_cat, false,
                     g.var_index("mlp_" + std::to_string(l) + "_" + std::to_string(m) + "_outputs"));
        for (int m = 0; m < arch.num_mlps; ++m)
            emit_mlp(lp.num_mlps[m], mlp_num, true,
                     g.var_index("num_mlp_" + std::to_string(l) + "_" + std::to_string(m) +
                                 "_outputs"));
    }

    // Classifier over the concatenated stream, production order.
    std::vector<ad::Tensor*> blocks;
    blocks.reserve(g.vars.size());
    for (size_t vi = 0; vi < g.vars.size(); ++vi) blocks.push_back(states[vi]);
    ad::Tensor* feat = tape.concat_cols(blocks);
    if (arch.pooled) feat = tape.mean_rows(feat);
    ad::Tensor* wc = tape.leaf(p.classifier.data(), g.feature_count,
                               static_cast<int>(arch.classes.size()),
                               param_grads ? param_grads->classifier.data() : nullptr);
    BuildOutput out;
    out.logits = tape.matmul(feat, wc);
    if (trace) {
        trace->logits.assign(out.logits->rows, {});
        for (int i = 0; i < out.logits->rows; ++i)
            trace->logits[i].assign(out.logits->val.begin() + static_cast<size_t>(i) * out.logits->cols,
                                    out.logits->val.begin() +
                                        static_cast<size_t>(i + 1) * out.logits->cols);
    }
    return out;
}

}  // namespace

RelaxedTrace forward_soft(const SoftParams& p, const ThetaSample& theta,
                          const std::vector<int>& tokens, double tau, SoftMode mode, Rng* rng) {
    Graph g(p.arch);
    ad::Tape tape;
    RelaxedTrace trace;
    std::vector<double> taus(std::max(1, p.arch.layers), tau);
    build_forward(tape, p, g, theta, nullptr, nullptr, tokens, taus, mode, rng, &trace);
    return trace;
}

// ---------------------------------------------------------------------------
// Loss / gradients
// ---------------------------------------------------------------------------

namespace {
double exp_env(const char* name, double fallback) {
    const char* v = std::getenv(name);
    return v ? std::atof(v) : fallback;
}
}  // namespace

double loss(const SoftParams& p, const Batch& batch, double tau, const NoiseSpec& spec,
            SoftParams* grads) {
    double theta_floor = exp_env("TP_EXP_THETA_FLOOR", 0.0);
    std::vector<double> layer_taus = spec.layer_taus;
    if (layer_taus.empty()) layer_taus.assign(std::max(1, p.arch.layers), tau);
    if (static_cast<int>(layer_taus.size()) != std::max(1, p.arch.layers))
        throw InvalidArgument("loss: layer_taus size mismatch");
    std::vector<double> theta_taus = layer_taus;
    for (auto& t : theta_taus) t = std::max(t, theta_floor);
    double emb_tau = theta_taus.front();
    if (batch.tokens.empty()) throw InvalidArgument("loss: empty batch");
    if (batch.tokens.size() != batch.targets.size())
        throw InvalidArgument("loss: tokens/targets size mismatch");
    int64_t total_scored = 0;
    for (const auto* t : batch.targets)
        for (int y : *t)
            if (y >= 0) total_scored++;
    if (total_scored == 0) throw InvalidArgument("loss: batch is fully masked");

    Graph g(p.arch);
    if (grads) *grads = zero_like(p);
    double total = 0;
    ad::Tape tape;
    for (int s0 = 0; s0 < spec.samples; ++s0) {
        int s = spec.sample_base + s0;
        // One weight draw per example: same objective as a shared per-step
        // draw, far lower gradient variance for the structure gates.
        ThetaSample theta_grads = grads ? zero_like_theta(p) : ThetaSample{};
        for (size_t e = 0; e < batch.tokens.size(); ++e) {
            Rng theta_rng = Rng(spec.master_seed)
                                .fork(mix_keys(mix_keys(0xA11CE, spec.step), s))
                                .fork(e);
            static const bool theta_mean = std::getenv("TP_EXP_THETA_MEAN") != nullptr;
            ThetaSample theta = theta_mean
                                    ? make_theta_public_mean(p, theta_taus, emb_tau)
                                    : sample_theta_layered(p, theta_taus, emb_tau, theta_rng);
            if (grads) {
                for (auto& v : theta_grads.gates) std::fill(v.begin(), v.end(), 0.0);
                for (auto& v : theta_grads.predicates) std::fill(v.begin(), v.end(), 0.0);
                for (auto& v : theta_grads.embeds) std::fill(v.begin(), v.end(), 0.0);
            }
            Rng ex_rng =
                Rng(spec.master_seed).fork(mix_keys(mix_keys(0xB0B, spec.step), s)).fork(e);
            tape.reset();
            auto out = build_forward(tape, p, g, theta, grads ? &theta_grads : nullptr, grads,
                                     *batch.tokens[e], layer_taus, SoftMode::Train, &ex_rng,
                                     nullptr);
            ad::Tensor* l = tape.ce_sum(out.logits, *batch.targets[e]);
            double w = 1.0 / (static_cast<double>(spec.samples) * total_scored);
            total += l->val[0] * w;
            if (grads) {
                tape.backward(l, w);
                backprop_theta_layered(p, theta, theta_grads, theta_taus, emb_tau, grads);
            }
        }
    }
    return total;
}

// ---------------------------------------------------------------------------
// Hard path
// ---------------------------------------------------------------------------

namespace {

int argmax_of(std::span<const double> v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = static_cast<int>(i);
    return best;
}

std::vector<int> psi_rows_argmax(const std::vector<double>& psi, int k) {
    std::vector<int> mapping(k);
    for (int r = 0; r < k; ++r)
        mapping[r] = argmax_of(std::span(psi).subspan(static_cast<size_t>(r) * k, k));
    return mapping;
}

// Dense MLP body on a concrete encoded input (shared with discretize so the
// lookup tables reproduce the hard forward bit for bit).
std::vector<double> mlp_logits(const MlpParams& mp, std::span<const double> input, int hidden,
                               int k) {
    std::vector<double> h(hidden);
    int in = static_cast<int>(input.size());
    for (int j = 0; j < hidden; ++j) {
        double acc = mp.b1[j];
        for (int i = 0; i < in; ++i) acc += input[i] * mp.w1[static_cast<size_t>(i) * hidden + j];
        h[j] = 0.5 * acc * (1.0 + std::erf(acc * M_SQRT1_2));
    }
    std::vector<double> f(k);
    for (int j = 0; j < k; ++j) {
        double acc = mp.b2[j];
        for (int i = 0; i < hidden; ++i) acc += h[i] * mp.w2[static_cast<size_t>(i) * k + j];
        f[j] = acc;
    }
    return f;
}

struct HardState {
    std::vector<std::vector<int>> cat;       // per var index (categorical)
    std::vector<std::vector<int64_t>> num;   // per var index (numerical)
};

}  // namespace

HardEvaluator::HardEvaluator(const SoftParams& p) : p_(p), graph_(p.arch) {
    const auto& arch = p.arch;
    int k = arch.k;
    bias_ = ad::distance_bias(arch.max_len);
    for (int l = 0; l < arch.layers; ++l) {
        const auto& lp = p.layers[l];
        auto head_cat = graph_.head_cat_candidates(l);
        auto head_num = graph_.head_num_candidates(l);
        auto mlp_cat = graph_.mlp_cat_candidates(l);
        auto mlp_num = graph_.mlp_num_candidates(l);
        std::vector<HeadChoice> ch, nh;
        int hi = 0;
        for (const auto& hp : lp.cat_heads)
            ch.push_back({head_cat[argmax_of(hp.phi_q)], head_cat[argmax_of(hp.phi_k)],
                          head_cat[argmax_of(hp.phi_v)],
                          graph_.var_index("attn_" + std::to_string(l) + "_" +
                                           std::to_string(hi++) + "_outputs"),
                          psi_rows_argmax(hp.psi, k)});
        hi = 0;
        for (const auto& hp : lp.num_heads)
            nh.push_back({head_cat[argmax_of(hp.phi_q)], head_cat[argmax_of(hp.phi_k)],
                          head_num[argmax_of(hp.phi_v)],
                          graph_.var_index("num_attn_" + std::to_string(l) + "_" +
                                           std::to_string(hi++) + "_outputs"),
                          psi_rows_argmax(hp.psi, k)});
        std::vector<MlpChoice> cm, nm;
        int mi = 0;
        for (const auto& mp : lp.cat_mlps)
            cm.push_back({mlp_cat[argmax_of(mp.phi1)], mlp_cat[argmax_of(mp.phi2)],
                          graph_.var_index("mlp_" + std::to_string(l) + "_" +
                                           std::to_string(mi++) + "_outputs"),
                          1.0, 1.0});
        mi = 0;
        for (const auto& mp : lp.num_mlps) {
            int c1 = mlp_num[argmax_of(mp.phi1)], c2 = mlp_num[argmax_of(mp.phi2)];
            nm.push_back({c1, c2,
                          graph_.var_index("num_mlp_" + std::to_string(l) + "_" +
                                           std::to_string(mi++) + "_outputs"),
                          1.0 / graph_.vars[c1].bound, 1.0 / graph_.vars[c2].bound});
        }
        cat_heads_.push_back(std::move(ch));
        num_heads_.push_back(std::move(nh));
        cat_mlps_.push_back(std::move(cm));
        num_mlps_.push_back(std::move(nm));
    }
}

HardResult HardEvaluator::run(const std::vector<int>& tokens) const {
    const auto& arch = p_.arch;
    const Graph& g = graph_;
    int n = static_cast<int>(tokens.size());
    int k = arch.k;
    if (n == 0) throw InvalidArgument("forward_hard: empty sequence");
    if (n > arch.max_len) throw InvalidArgument("forward_hard: sequence longer than max_len");

    std::vector<std::vector<int>> cat_state(g.vars.size());
    std::vector<std::vector<int64_t>> num_state(g.vars.size());

    for (size_t vi = 0; vi < g.vars.size(); ++vi) {
        const auto& v = g.vars[vi];
        if (v.layer >= 0) break;
        switch (v.cls) {
            case VarClass::Tokens:
                cat_state[vi] = tokens;
                break;
            case VarClass::Positions: {
                std::vector<int> pos(n);
                for (int i = 0; i < n; ++i) pos[i] = i;
                cat_state[vi] = pos;
                break;
            }
            case VarClass::Ones:
                num_state[vi].assign(n, 1);
                break;
            case VarClass::Embedding: {
                std::vector<int> vals(n);
                for (int i = 0; i < n; ++i) {
                    size_t off = (static_cast<size_t>(tokens[i]) * arch.embed_vars + v.index) *
                                 static_cast<size_t>(k);
                    vals[i] = argmax_of(std::span(p_.embed).subspan(off, k));
                }
                cat_state[vi] = vals;
                break;
            }
            default:
                break;
        }
    }

    for (int l = 0; l < arch.layers; ++l) {
        for (int h = 0; h < arch.cat_heads; ++h) {
            const auto& c = cat_heads_[l][h];
            const auto& q = cat_state[c.query];
            const auto& key = cat_state[c.key];
            const auto& val = cat_state[c.value];
            std::vector<int> out(n);
            for (int i = 0; i < n; ++i) {
                int limit = arch.causal ? i + 1 : n;
                // Literal scores: match indicator times distance bias, plus
                // the no-match mass on column 0; argmax, lowest j on ties.
                double row_max = 0.0;
                for (int j = 0; j < limit; ++j)
                    if (key[j] == c.mapping[q[i]]) row_max = 1.0;
                int best = -1;
                double best_score = -1.0;
                for (int j = 0; j < limit; ++j) {
                    double s = key[j] == c.mapping[q[i]] ? bias_[std::abs(i - j)] : 0.0;
                    if (j == 0) s += 1.0 - row_max;
                    if (s > best_score) {
                        best_score = s;
                        best = j;
                    }
                }
                out[i] = val[best];
            }
            cat_state[c.out] = std::move(out);
        }

        for (int h = 0; h < arch.num_heads; ++h) {
            const auto& c = num_heads_[l][h];
            const auto& q = cat_state[c.query];
            const auto& key = cat_state[c.key];
            const auto& val = num_state[c.value];
            std::vector<int64_t> out(n, 0);
            for (int i = 0; i < n; ++i) {
                int limit = arch.causal ? i + 1 : n;
                int64_t acc = 0;
                for (int j = 0; j < limit; ++j)
                    if (key[j] == c.mapping[q[i]]) acc += val[j];
                out[i] = acc;
            }
            num_state[c.out] = std::move(out);
        }

        for (int m = 0; m < arch.cat_mlps; ++m) {
            const auto& c = cat_mlps_[l][m];
            const auto& mp = p_.layers[l].cat_mlps[m];
            std::vector<int> out(n);
            std::vector<double> input(2 * static_cast<size_t>(k), 0.0);
            for (int i = 0; i < n; ++i) {
                std::fill(input.begin(), input.end(), 0.0);
                input[cat_state[c.in1][i]] = 1.0;
                input[static_cast<size_t>(k) + cat_state[c.in2][i]] = 1.0;
                out[i] = argmax_of(mlp_logits(mp, input, arch.mlp_hidden, k));
            }
            cat_state[c.out] = std::move(out);
        }
        for (int m = 0; m < arch.num_mlps; ++m) {
            const auto& c = num_mlps_[l][m];
            const auto& mp = p_.layers[l].num_mlps[m];
            std::vector<int> out(n);
            for (int i = 0; i < n; ++i) {
                double input[2] = {num_state[c.in1][i] * c.scale1, num_state[c.in2][i] * c.scale2};
                out[i] = argmax_of(mlp_logits(mp, std::span(input, 2), arch.mlp_hidden, k));
            }
            cat_state[c.out] = std::move(out);
        }
    }

    // Classifier accumulation mirrors the interpreter's order exactly.
    size_t num_classes = arch.classes.size();
    std::vector<std::vector<double>> scores(n, std::vector<double>(num_classes, 0.0));
    for (size_t vi = 0; vi < g.vars.size(); ++vi) {
        const auto& v = g.vars[vi];
        const double* w = &p_.classifier[static_cast<size_t>(v.feature_offset) * num_classes];
        if (v.categorical) {
            for (int i = 0; i < n; ++i) {
                const double* row = w + static_cast<size_t>(cat_state[vi][i]) * num_classes;
                for (size_t c = 0; c < num_classes; ++c) scores[i][c] += row[c];
            }
        } else {
            for (int i = 0; i < n; ++i)
                for (size_t c = 0; c < num_classes; ++c)
                    scores[i][c] += w[c] * static_cast<double>(num_state[vi][i]);
        }
    }
    HardResult r;
    if (arch.pooled) {
        std::vector<double> pooled(num_classes, 0.0);
        for (size_t c = 0; c < num_classes; ++c) {
            for (int i = 0; i < n; ++i) pooled[c] += scores[i][c];
            pooled[c] /= static_cast<double>(n);
        }
        r.scores = {pooled};
    } else {
        r.scores = std::move(scores);
    }
    for (const auto& row : r.scores) r.label_ids.push_back(argmax_of(row));
    return r;
}

HardResult forward_hard(const SoftParams& p, const std::vector<int>& tokens) {
    return HardEvaluator(p).run(tokens);
}

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

ir::Program discretize(const SoftParams& p) {
    const auto& arch = p.arch;
    Graph g(arch);
    int k = arch.k;

    ir::Program prog;
    prog.vocab = arch.vocab;
    prog.max_len = arch.max_len;
    prog.causal = arch.causal;
    prog.cardinality = k;
    prog.classifier.classes = arch.classes;
    prog.classifier.output_mode = arch.pooled ? ir::OutputMode::MeanPooled : ir::OutputMode::PerToken;

    auto pad_labels = [&](std::vector<std::string> labels) {
        while (static_cast<int>(labels.size()) < k)
            labels.push_back("<unused_" + std::to_string(labels.size()) + ">");
        return labels;
    };

    // Declared bounds can be tighter than the static training bounds: they
    // follow the actually chosen value chain.
    std::vector<int> declared_bound(g.vars.size(), 0);

    for (size_t vi = 0; vi < g.vars.size(); ++vi) {
        const auto& v = g.vars[vi];
        if (v.layer >= 0) break;
        ir::VariableDecl d;
        d.name = v.name;
        switch (v.cls) {
            case VarClass::Tokens:
                d.kind = ir::VarKind::Categorical;
                d.cardinality = k;
                d.producer.kind = ir::ProducerKind::InputToken;
                d.value_labels = pad_labels(arch.vocab);
                break;
            case VarClass::Positions: {
                d.kind = ir::VarKind::Categorical;
                d.cardinality = k;
                d.producer.kind = ir::ProducerKind::InputPosition;
                std::vector<std::string> labels;
                for (int i = 0; i < arch.max_len; ++i) labels.push_back(std::to_string(i));
                d.value_labels = pad_labels(labels);
                break;
            }
            case VarClass::Ones:
                d.kind = ir::VarKind::Numerical;
                d.cardinality = 1;
                d.producer.kind = ir::ProducerKind::InputOnes;
                declared_bound[vi] = 1;
                break;
            case VarClass::Embedding: {
                d.kind = ir::VarKind::Categorical;
                d.cardinality = k;
                d.producer.kind = ir::ProducerKind::InputEmbedding;
                d.producer.index = v.index;
                for (size_t w = 0; w < arch.vocab.size(); ++w) {
                    size_t off = (w * arch.embed_vars + v.index) * static_cast<size_t>(k);
                    d.producer.token_map.push_back(argmax_of(std::span(p.embed).subspan(off, k)));
                }
                break;
            }
            default:
                break;
        }
        prog.inputs.push_back(std::move(d));
    }

    for (int l = 0; l < arch.layers; ++l) {
        const auto& lp = p.layers[l];
        auto head_cat = g.head_cat_candidates(l);
        auto head_num = g.head_num_candidates(l);
        ir::Layer layer;

        for (int h = 0; h < arch.cat_heads; ++h) {
            const auto& hp = lp.cat_heads[h];
            ir::CatHeadSpec spec;
            spec.query_var = g.vars[head_cat[argmax_of(hp.phi_q)]].name;
            spec.key_var = g.vars[head_cat[argmax_of(hp.phi_k)]].name;
            spec.value_var = g.vars[head_cat[argmax_of(hp.phi_v)]].name;
            spec.predicate.mapping = psi_rows_argmax(hp.psi, k);
            spec.output.name = "attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs";
            spec.output.kind = ir::VarKind::Categorical;
            spec.output.cardinality = k;
            spec.output.producer = {ir::ProducerKind::AttnHead, l, h, {}};
            layer.cat_heads.push_back(std::move(spec));
        }
        for (int h = 0; h < arch.num_heads; ++h) {
            const auto& hp = lp.num_heads[h];
            ir::NumHeadSpec spec;
            spec.query_var = g.vars[head_cat[argmax_of(hp.phi_q)]].name;
            spec.key_var = g.vars[head_cat[argmax_of(hp.phi_k)]].name;
            int chosen = head_num[argmax_of(hp.phi_v)];
            spec.value_var = g.vars[chosen].name;
            spec.predicate.mapping = psi_rows_argmax(hp.psi, k);
            spec.output.name =
                "num_attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs";
            spec.output.kind = ir::VarKind::Numerical;
            spec.output.cardinality = arch.max_len * declared_bound[chosen];
            spec.output.producer = {ir::ProducerKind::NumAttnHead, l, h, {}};
            declared_bound[g.var_index(spec.output.name)] = spec.output.cardinality;
            layer.num_heads.push_back(std::move(spec));
        }

        auto mlp_cat = g.mlp_cat_candidates(l);
        auto mlp_num = g.mlp_num_candidates(l);
        for (int m = 0; m < arch.cat_mlps; ++m) {
            const auto& mp = lp.cat_mlps[m];
            ir::LookupMlpSpec spec;
            spec.input_kind = ir::VarKind::Categorical;
            int c1 = mlp_cat[argmax_of(mp.phi1)], c2 = mlp_cat[argmax_of(mp.phi2)];
            spec.input_vars = {g.vars[c1].name, g.vars[c2].name};
            std::vector<double> input(2 * static_cast<size_t>(k), 0.0);
            for (int v1 = 0; v1 < k; ++v1)
                for (int v2 = 0; v2 < k; ++v2) {
                    std::fill(input.begin(), input.end(), 0.0);
                    input[v1] = 1.0;
                    input[static_cast<size_t>(k) + v2] = 1.0;
                    spec.table[{v1, v2}] =
                        argmax_of(mlp_logits(mp, input, arch.mlp_hidden, k));
                }
            spec.default_value = 0;
            spec.output.name = "mlp_" + std::to_string(l) + "_" + std::to_string(m) + "_outputs";
            spec.output.kind = ir::VarKind::Categorical;
            spec.output.cardinality = k;
            spec.output.producer = {ir::ProducerKind::Mlp, l, m, {}};
            layer.mlps.push_back(std::move(spec));
        }
        for (int m = 0; m < arch.num_mlps; ++m) {
            const auto& mp = lp.num_mlps[m];
            ir::LookupMlpSpec spec;
            spec.input_kind = ir::VarKind::Numerical;
            int c1 = mlp_num[argmax_of(mp.phi1)], c2 = mlp_num[argmax_of(mp.phi2)];
            spec.input_vars = {g.vars[c1].name, g.vars[c2].name};
            double s1 = 1.0 / g.vars[c1].bound, s2 = 1.0 / g.vars[c2].bound;
            int b1 = declared_bound[c1], b2 = declared_bound[c2];
            for (int v1 = 0; v1 <= b1; ++v1)
                for (int v2 = 0; v2 <= b2; ++v2) {
                    double input[2] = {v1 * s1, v2 * s2};
                    spec.table[{v1, v2}] =
                        argmax_of(mlp_logits(mp, std::span(input, 2), arch.mlp_hidden, k));
                }
            spec.default_value = 0;
            spec.output.name =
                "num_mlp_" + std::to_string(l) + "_" + std::to_string(m) + "_outputs";
            spec.output.kind = ir::VarKind::Categorical;
            spec.output.cardinality = k;
            spec.output.producer = {ir::ProducerKind::NumMlp, l, m, {}};
            layer.mlps.push_back(std::move(spec));
        }
        prog.layers.push_back(std::move(layer));
    }

    size_t num_classes = arch.classes.size();
    for (const auto& v : g.vars) {
        std::vector<std::vector<double>> rows;
        int width = v.categorical ? k : 1;
        for (int r = 0; r < width; ++r) {
            const double* w = &p.classifier[(static_cast<size_t>(v.feature_offset) + r) * num_classes];
            rows.emplace_back(w, w + num_classes);
        }
        prog.classifier.weights[v.name] = std::move(rows);
    }
    return prog;
}

int shared_cardinality(int vocab_size, int max_positions) {
    return std::max(vocab_size, max_positions);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kCkptFormat = "tprog-checkpoint";
constexpr int kCkptVersion = 1;

json arch_to_json(const Architecture& a) {
    json j;
    j["layers"] = a.layers;
    j["cat_heads"] = a.cat_heads;
    j["num_heads"] = a.num_heads;
    j["cat_mlps"] = a.cat_mlps;
    j["num_mlps"] = a.num_mlps;
    j["k"] = a.k;
    j["max_len"] = a.max_len;
    j["mlp_hidden"] = a.mlp_hidden;
    j["causal"] = a.causal;
    j["pooled"] = a.pooled;
    j["embedding"] = a.embedding == EmbeddingKind::OneHot ? "one-hot" : "factored";
    j["embed_vars"] = a.embed_vars;
    j["vocab"] = a.vocab;
    j["classes"] = a.classes;
    return j;
}

Architecture arch_from_json(const json& j) {
    Architecture a;
    a.layers = j.at("layers").get<int>();
    a.cat_heads = j.at("cat_heads").get<int>();
    a.num_heads = j.at("num_heads").get<int>();
    a.cat_mlps = j.at("cat_mlps").get<int>();
    a.num_mlps = j.at("num_mlps").get<int>();
    a.k = j.at("k").get<int>();
    a.max_len = j.at("max_len").get<int>();
    a.mlp_hidden = j.at("mlp_hidden").get<int>();
    a.causal = j.at("causal").get<bool>();
    a.pooled = j.at("pooled").get<bool>();
    a.embedding =
        j.at("embedding").get<std::string>() == "factored" ? EmbeddingKind::Factored : EmbeddingKind::OneHot;
    a.embed_vars = j.at("embed_vars").get<int>();
    a.vocab = j.at("vocab").get<std::vector<std::string>>();
    a.classes = j.at("classes").get<std::vector<std::string>>();
    return a;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    json j;
    j["format"] = kCkptFormat;
    j["version"] = kCkptVersion;
    j["architecture"] = arch_to_json(c.params.arch);
    j["rng"] = {{"master_seed", c.master_seed}, {"step", c.step}};
    json tensors = json::array();
    const_cast<SoftParams&>(c.params).for_each_family(
        [&](const std::string& family, std::vector<double>& v) {
            tensors.push_back(json{{"family", family}, {"values", v}});
        });
    j["tensors"] = tensors;
    write_text_file(path, j.dump() + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError("checkpoint parse error: " + std::string(e.what()));
    }
    if (!j.is_object() || j.value("format", "") != kCkptFormat)
        throw ParseError("not a checkpoint (missing versioned header)");
    if (j.value("version", -1) != kCkptVersion)
        throw ParseError("unsupported checkpoint version");
    Checkpoint c;
    Architecture arch = arch_from_json(j.at("architecture"));
    c.params = SoftParams::init(arch, 0);
    c.master_seed = j.at("rng").at("master_seed").get<uint64_t>();
    c.step = j.at("rng").at("step").get<int64_t>();
    const auto& tensors = j.at("tensors");
    size_t idx = 0;
    c.params.for_each_family([&](const std::string& family, std::vector<double>& v) {
        if (idx >= tensors.size()) throw ParseError("checkpoint tensor list too short");
        const auto& t = tensors[idx++];
        if (t.at("family").get<std::string>() != family)
            throw ParseError("checkpoint tensor family mismatch");
        auto vals = t.at("values").get<std::vector<double>>();
        if (vals.size() != v.size()) throw ParseError("checkpoint tensor shape mismatch");
        v = std::move(vals);
    });
    if (idx != tensors.size()) throw ParseError("checkpoint tensor list too long");
    return c;
}

}  // namespace tprog::model
