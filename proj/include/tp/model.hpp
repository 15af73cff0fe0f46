#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tp/ir.hpp"
#include "tp/tape.hpp"

namespace tprog::model {

// The trainable relaxed model: continuous distributions over the discrete
// structure (variable gates, predicate rows, lookup tables, embeddings),
// trained with Gumbel-Softmax reparameterization and discretized into an
// ir::Program afterwards.

enum class EmbeddingKind { OneHot, Factored };

struct Architecture {
    int layers = 1;
    int cat_heads = 1, num_heads = 0;  // per layer
    int cat_mlps = 0, num_mlps = 0;    // per layer
    int k = 8;                         // shared categorical cardinality
    int max_len = 8;                   // maximum positions, specials included
    int mlp_hidden = 64;
    bool causal = false;
    bool pooled = false;
    EmbeddingKind embedding = EmbeddingKind::OneHot;
    int embed_vars = 2;  // m, factored embeddings only
    std::vector<std::string> vocab;
    std::vector<std::string> classes;

    bool any_numerical() const { return num_heads > 0 || num_mlps > 0; }
};

// ---------------------------------------------------------------------------
// Static layout: candidate sets, variable order, feature offsets
// ---------------------------------------------------------------------------

enum class VarClass { Tokens, Positions, Embedding, Ones, CatHead, NumHead, CatMlp, NumMlp };

struct VarNode {
    VarClass cls;
    int layer = -1, index = -1;
    std::string name;
    bool categorical = true;
    int bound = 0;        // numerical: static training-time bound
    int feature_offset = 0, feature_width = 0;
};

// Everything about the model that follows from the architecture alone.
struct Graph {
    explicit Graph(const Architecture& arch);

    const Architecture arch;
    std::vector<VarNode> vars;       // production order (= classifier feature order)
    std::vector<int> cat_vars;       // indices into vars
    std::vector<int> num_vars;
    int feature_count = 0;

    // Candidate variable indices readable by each module kind at a layer.
    std::vector<int> head_cat_candidates(int layer) const;   // q/k for all heads, v for cat heads
    std::vector<int> head_num_candidates(int layer) const;   // v for num heads
    std::vector<int> mlp_cat_candidates(int layer) const;    // cat mlp inputs (same-layer heads ok)
    std::vector<int> mlp_num_candidates(int layer) const;    // num mlp inputs, bound-capped

    int var_index(const std::string& name) const;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct CatHeadParams {
    std::vector<double> phi_q, phi_k, phi_v;  // gate logits over candidates
    std::vector<double> psi;                  // k*k predicate row logits
};
struct NumHeadParams {
    std::vector<double> phi_q, phi_k, phi_v;
    std::vector<double> psi;
};
struct MlpParams {
    std::vector<double> phi1, phi2;   // input slot gates
    std::vector<double> w1, b1, w2, b2;  // dense lookup body
};
struct LayerParams {
    std::vector<CatHeadParams> cat_heads;
    std::vector<NumHeadParams> num_heads;
    std::vector<MlpParams> cat_mlps, num_mlps;
};

struct SoftParams {
    Architecture arch;
    std::vector<LayerParams> layers;
    std::vector<double> embed;       // factored: vocab x m x k logits
    std::vector<double> classifier;  // features x classes

    static SoftParams init(const Architecture& arch, uint64_t seed);

    // Visit every tensor, tagged with its family name
    // (gate | predicate | mlp_dense | embedding | classifier).
    void for_each_family(const std::function<void(const std::string&, std::vector<double>&)>& fn);
    size_t parameter_count();
};

// Checkpoints: versioned JSON with architecture, tensors and RNG state.
struct Checkpoint {
    SoftParams params;
    uint64_t master_seed = 0;
    int64_t step = 0;
};
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Sampled / relaxed weights
// ---------------------------------------------------------------------------

// softmax((logits + noise) / tau); tau must be positive.
std::vector<double> gumbel_softmax(const std::vector<double>& logits, double tau,
                                   const std::vector<double>& noise);

// One concrete draw of the discrete weights (gates, predicate rows, factored
// embeddings) from the relaxed distribution; `grads` mirrors the shapes.
struct ThetaSample {
    std::vector<std::vector<double>> gates;       // canonical module order
    std::vector<std::vector<double>> predicates;  // per head, k*k
    std::vector<std::vector<double>> embeds;      // per embed var, vocab*k
};

ThetaSample sample_theta(const SoftParams& p, double tau, Rng& rng);
// Per-layer temperatures (bottom-up crystallization schedules).
ThetaSample sample_theta_layered(const SoftParams& p, const std::vector<double>& layer_taus,
                                 double emb_tau, Rng& rng);
ThetaSample mean_theta(const SoftParams& p, double tau);
// Gradient of the loss w.r.t. raw logits given gradients w.r.t. the sample.
void backprop_theta(const SoftParams& p, const ThetaSample& sample, const ThetaSample& grads,
                    double tau, SoftParams* logit_grads);
void backprop_theta_layered(const SoftParams& p, const ThetaSample& sample,
                            const ThetaSample& grads, const std::vector<double>& layer_taus,
                            double emb_tau, SoftParams* logit_grads);

ThetaSample zero_like_theta(const SoftParams& p);
SoftParams zero_like(const SoftParams& p);

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

enum class SoftMode { Train, EvalSoft };

struct RelaxedTrace {
    std::map<std::string, std::vector<std::vector<double>>> cat_states;  // var -> n rows of k
    std::map<std::string, std::vector<double>> num_states;               // var -> n values
    std::map<std::string, std::vector<std::vector<double>>> attn_rows;   // head -> n rows of n
    std::vector<std::vector<double>> logits;  // n x classes (1 x classes pooled)
};

// Single-sequence relaxed forward. In Train mode attention rows and MLP
// outputs are Gumbel-Softmax samples (noise from rng); in EvalSoft they are
// hard argmaxes over the relaxed scores and rng may be null.
RelaxedTrace forward_soft(const SoftParams& p, const ThetaSample& theta,
                          const std::vector<int>& tokens, double tau, SoftMode mode, Rng* rng);

// Deterministic hard path: argmax weights, hard attention, argmax MLPs. This
// is the model side of the model<->program equivalence check.
struct HardResult {
    std::vector<int> label_ids;  // per position (one entry when pooled)
    std::vector<std::vector<double>> scores;
};

// Caches the graph layout and argmax choices; run() is cheap per sequence.
class HardEvaluator {
public:
    explicit HardEvaluator(const SoftParams& p);
    HardResult run(const std::vector<int>& tokens) const;

private:
    const SoftParams& p_;
    Graph graph_;
    struct HeadChoice {
        int query, key, value, out;  // var indices
        std::vector<int> mapping;
    };
    struct MlpChoice {
        int in1, in2, out;
        double scale1 = 1.0, scale2 = 1.0;
    };
    std::vector<std::vector<HeadChoice>> cat_heads_, num_heads_;
    std::vector<std::vector<MlpChoice>> cat_mlps_, num_mlps_;
    std::vector<double> bias_;
};

HardResult forward_hard(const SoftParams& p, const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

struct Batch {
    // Borrowed views into a dataset split.
    std::vector<const std::vector<int>*> tokens;
    std::vector<const std::vector<int>*> targets;
    bool pooled = false;
};

struct NoiseSpec {
    uint64_t master_seed = 0;
    int64_t step = 0;
    int samples = 1;      // S
    int sample_base = 0;  // index of the first noise stream (testing hook)
    // Optional per-layer temperature override (size = layers); empty means
    // every layer uses the global tau.
    std::vector<double> layer_taus;
};

// Mean masked cross-entropy over S Gumbel samples. When `grads` is non-null
// it receives d(loss)/d(params). Deterministic given (params, batch, spec).
double loss(const SoftParams& p, const Batch& batch, double tau, const NoiseSpec& spec,
            SoftParams* grads = nullptr);

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

ir::Program discretize(const SoftParams& p);

// Architecture helper shared by the training harness and the CLI.
int shared_cardinality(int vocab_size, int max_positions);

}  // namespace tprog::model
