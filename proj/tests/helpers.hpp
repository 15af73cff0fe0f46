#pragma once

// Shared test fixtures: hand-built reference programs, the literal
// score-formula attention oracle, and a random valid-program generator.

#include <map>
#include <set>
#include <string>
#include <vector>

#include "tp/common.hpp"
#include "tp/ir.hpp"

namespace tptest {

using namespace tprog;

// Literal hard-attention oracle: binary score matrix, multiplicative distance
// bias (1 at offset 1 down to 1/N at offset N, 1/N at offset 0), no-match
// mass added to column 0, argmax with lowest index on ties. Kept independent
// of the production implementation.
inline std::vector<int> select_closest_oracle(const std::vector<int>& keys,
                                              const std::vector<int>& queries,
                                              const std::vector<int>& mapping, bool causal,
                                              int max_len) {
    int n = static_cast<int>(keys.size());
    std::vector<double> b(static_cast<size_t>(max_len) + 1);
    b[0] = 1.0 / max_len;
    for (int d = 1; d <= max_len; ++d)
        b[d] = max_len == 1 ? 1.0 : 1.0 - (d - 1) * (1.0 - 1.0 / max_len) / (max_len - 1);
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) {
        int limit = causal ? i + 1 : n;
        double row_max = 0.0;
        for (int j = 0; j < limit; ++j)
            if (keys[j] == mapping[queries[i]]) row_max = 1.0;
        int best = 0;
        double best_score = -1.0;
        for (int j = 0; j < limit; ++j) {
            double s = (keys[j] == mapping[queries[i]] ? 1.0 : 0.0) * b[std::abs(i - j)];
            if (j == 0) s += 1.0 - row_max;
            if (s > best_score) {
                best_score = s;
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

inline ir::VariableDecl cat_var(const std::string& name, int k, ir::Producer prod,
                                std::vector<std::string> labels = {}) {
    ir::VariableDecl v;
    v.name = name;
    v.kind = ir::VarKind::Categorical;
    v.cardinality = k;
    v.producer = std::move(prod);
    v.value_labels = std::move(labels);
    return v;
}

inline ir::VariableDecl num_var(const std::string& name, int bound, ir::Producer prod) {
    ir::VariableDecl v;
    v.name = name;
    v.kind = ir::VarKind::Numerical;
    v.cardinality = bound;
    v.producer = std::move(prod);
    return v;
}

inline std::vector<std::string> pad_labels(std::vector<std::string> labels, int k) {
    while (static_cast<int>(labels.size()) < k)
        labels.push_back("<unused_" + std::to_string(labels.size()) + ">");
    return labels;
}

inline void zero_weights(ir::Program& p) {
    for (const auto* v : p.all_vars()) {
        size_t rows = v->is_categorical() ? v->cardinality : 1;
        p.classifier.weights[v->name] =
            std::vector<std::vector<double>>(rows, std::vector<double>(p.classifier.classes.size(), 0.0));
    }
}

// Two-layer induction program: the first head copies the previous token, the
// second matches the current letter against those copies and reads out the
// number that followed it (position 0 fallback -> "unk").
inline ir::Program make_icl_program() {
    ir::Program p;
    p.vocab = {"<pad>", "<s>", "1", "2", "3", "4", "a", "b", "c", "d"};
    p.max_len = 10;
    p.causal = true;
    p.cardinality = 10;
    p.inputs.push_back(
        cat_var("tokens", 10, {ir::ProducerKind::InputToken, -1, -1, {}}, p.vocab));
    std::vector<std::string> pos_labels;
    for (int i = 0; i < 10; ++i) pos_labels.push_back(std::to_string(i));
    p.inputs.push_back(
        cat_var("positions", 10, {ir::ProducerKind::InputPosition, -1, -1, {}}, pos_labels));

    ir::Layer l0;
    ir::CatHeadSpec h0;
    h0.query_var = "positions";
    h0.key_var = "positions";
    h0.value_var = "tokens";
    h0.predicate.mapping = {9, 0, 1, 2, 3, 4, 5, 6, 7, 8};  // previous position; 0 -> no match
    h0.output = cat_var("attn_0_0_outputs", 10, {ir::ProducerKind::AttnHead, 0, 0, {}});
    l0.cat_heads.push_back(h0);
    p.layers.push_back(l0);

    ir::Layer l1;
    ir::CatHeadSpec h1;
    h1.query_var = "tokens";
    h1.key_var = "attn_0_0_outputs";
    h1.value_var = "tokens";
    // Letters match themselves; everything else matches <pad>, which never
    // occurs, forcing the BOS default.
    h1.predicate.mapping = {0, 0, 0, 0, 0, 0, 6, 7, 8, 9};
    h1.output = cat_var("attn_1_0_outputs", 10, {ir::ProducerKind::AttnHead, 1, 0, {}});
    l1.cat_heads.push_back(h1);
    p.layers.push_back(l1);

    p.classifier.classes = {"1", "2", "3", "4", "unk"};
    p.classifier.output_mode = ir::OutputMode::PerToken;
    zero_weights(p);
    auto& w = p.classifier.weights["attn_1_0_outputs"];
    w[1][4] = 1.0;                              // <s> -> unk
    for (int d = 0; d < 4; ++d) w[2 + d][d] = 1.0;  // digit token -> its class
    return p;
}

// One numerical head counting token multiplicity plus a linear-in-count
// readout (the `ones` weight row acts as the per-class intercept).
inline ir::Program make_hist_program() {
    ir::Program p;
    p.vocab = {"<pad>", "<s>", "a", "b", "c", "d", "e", "f", "g", "h"};
    p.max_len = 9;
    p.causal = false;
    p.cardinality = 10;
    p.inputs.push_back(
        cat_var("tokens", 10, {ir::ProducerKind::InputToken, -1, -1, {}}, p.vocab));
    p.inputs.push_back(cat_var("positions", 10, {ir::ProducerKind::InputPosition, -1, -1, {}}));
    p.inputs.push_back(num_var("ones", 1, {ir::ProducerKind::InputOnes, -1, -1, {}}));

    ir::Layer l0;
    ir::NumHeadSpec h;
    h.query_var = "tokens";
    h.key_var = "tokens";
    h.value_var = "ones";
    h.predicate.mapping = {0, 0, 2, 3, 4, 5, 6, 7, 8, 9};  // identity on content tokens
    h.output = num_var("num_attn_0_0_outputs", 9, {ir::ProducerKind::NumAttnHead, 0, 0, {}});
    l0.num_heads.push_back(h);
    p.layers.push_back(l0);

    p.classifier.classes = {"1", "2", "3", "4", "5", "6", "7", "8"};
    p.classifier.output_mode = ir::OutputMode::PerToken;
    zero_weights(p);
    // argmax_c (2c*x - c^2) = x for integer counts x in [1, 8].
    for (int c = 1; c <= 8; ++c) {
        p.classifier.weights["num_attn_0_0_outputs"][0][c - 1] = 2.0 * c;
        p.classifier.weights["ones"][0][c - 1] = -static_cast<double>(c) * c;
    }
    return p;
}

// Random valid program over a small vocabulary, for fuzzing and the
// compression soundness checks.
struct RandomProgramOptions {
    int max_layers = 2;
    int max_heads = 2;  // per kind per layer
    int max_mlps = 1;   // per kind per layer
    int vocab_content = 4;
    int max_len = 6;
    bool allow_numerical = true;
};

inline ir::Program random_program(Rng& rng, const RandomProgramOptions& opt = {}) {
    ir::Program p;
    p.vocab = {"<pad>", "<s>"};
    for (int i = 0; i < opt.vocab_content; ++i)
        p.vocab.push_back(std::string(1, static_cast<char>('a' + i)));
    p.max_len = opt.max_len;
    p.causal = rng.next_bool();
    int k = std::max(static_cast<int>(p.vocab.size()), p.max_len);
    p.cardinality = k;
    bool numerical = opt.allow_numerical && rng.next_bool();

    p.inputs.push_back(cat_var("tokens", k, {ir::ProducerKind::InputToken, -1, -1, {}},
                               pad_labels(p.vocab, k)));
    p.inputs.push_back(cat_var("positions", k, {ir::ProducerKind::InputPosition, -1, -1, {}}));
    if (numerical) p.inputs.push_back(num_var("ones", 1, {ir::ProducerKind::InputOnes, -1, -1, {}}));

    std::vector<std::string> cat_names = {"tokens", "positions"};
    struct NumInfo {
        std::string name;
        int bound;
    };
    std::vector<NumInfo> num_names;
    if (numerical) num_names.push_back({"ones", 1});

    auto random_predicate = [&](int kq, int kk) {
        ir::Predicate pred;
        for (int q = 0; q < kq; ++q)
            pred.mapping.push_back(static_cast<int>(rng.next_below(kk)));
        return pred;
    };

    int layers = 1 + static_cast<int>(rng.next_below(opt.max_layers));
    for (int l = 0; l < layers; ++l) {
        ir::Layer layer;
        std::vector<std::string> next_cat = cat_names;
        std::vector<NumInfo> next_num = num_names;
        int n_cat_heads = 1 + static_cast<int>(rng.next_below(opt.max_heads));
        for (int h = 0; h < n_cat_heads; ++h) {
            ir::CatHeadSpec spec;
            spec.query_var = cat_names[rng.next_below(cat_names.size())];
            spec.key_var = cat_names[rng.next_below(cat_names.size())];
            spec.value_var = cat_names[rng.next_below(cat_names.size())];
            spec.predicate = random_predicate(k, k);
            spec.output = cat_var("attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs",
                                  k, {ir::ProducerKind::AttnHead, l, h, {}});
            next_cat.push_back(spec.output.name);
            layer.cat_heads.push_back(std::move(spec));
        }
        if (numerical) {
            int n_num_heads = static_cast<int>(rng.next_below(opt.max_heads + 1));
            for (int h = 0; h < n_num_heads; ++h) {
                ir::NumHeadSpec spec;
                spec.query_var = cat_names[rng.next_below(cat_names.size())];
                spec.key_var = cat_names[rng.next_below(cat_names.size())];
                const auto& vv = num_names[rng.next_below(num_names.size())];
                spec.value_var = vv.name;
                spec.predicate = random_predicate(k, k);
                spec.output = num_var("num_attn_" + std::to_string(l) + "_" + std::to_string(h) +
                                          "_outputs",
                                      p.max_len * vv.bound, {ir::ProducerKind::NumAttnHead, l, h, {}});
                next_num.push_back({spec.output.name, spec.output.cardinality});
                layer.num_heads.push_back(std::move(spec));
            }
        }
        // Same-layer head outputs are legal MLP inputs.
        std::vector<std::string> mlp_cat = next_cat;
        std::vector<NumInfo> mlp_num = next_num;
        int n_mlps = static_cast<int>(rng.next_below(opt.max_mlps + 1));
        for (int m = 0; m < n_mlps; ++m) {
            ir::LookupMlpSpec spec;
            bool num_mlp = numerical && !mlp_num.empty() && rng.next_bool();
            spec.input_kind = num_mlp ? ir::VarKind::Numerical : ir::VarKind::Categorical;
            std::vector<int> widths;
            for (int s = 0; s < 2; ++s) {
                if (num_mlp) {
                    const auto& vv = mlp_num[rng.next_below(mlp_num.size())];
                    spec.input_vars.push_back(vv.name);
                    widths.push_back(vv.bound + 1);
                } else {
                    spec.input_vars.push_back(mlp_cat[rng.next_below(mlp_cat.size())]);
                    widths.push_back(k);
                }
            }
            for (int v1 = 0; v1 < widths[0]; ++v1)
                for (int v2 = 0; v2 < widths[1]; ++v2)
                    spec.table[{v1, v2}] = static_cast<int>(rng.next_below(k));
            spec.default_value = 0;
            std::string prefix = num_mlp ? "num_mlp_" : "mlp_";
            spec.output = cat_var(prefix + std::to_string(l) + "_" + std::to_string(m) + "_outputs",
                                  k, {num_mlp ? ir::ProducerKind::NumMlp : ir::ProducerKind::Mlp,
                                      l, m, {}});
            next_cat.push_back(spec.output.name);
            layer.mlps.push_back(std::move(spec));
        }
        cat_names = std::move(next_cat);
        num_names = std::move(next_num);
        p.layers.push_back(std::move(layer));
    }

    int n_classes = 2 + static_cast<int>(rng.next_below(3));
    for (int c = 0; c < n_classes; ++c) p.classifier.classes.push_back("c" + std::to_string(c));
    p.classifier.output_mode = ir::OutputMode::PerToken;
    zero_weights(p);
    for (auto& [name, rows] : p.classifier.weights)
        for (auto& row : rows)
            for (auto& w : row)
                if (rng.next_below(3) == 0) w = rng.next_normal();
    return p;
}

// Realistic trained-program shapes for the emitted-line-count statistics
// (structure and sparsity chosen to mirror extracted models of those tasks).
inline ir::Program hist_shaped_program(Rng& rng) {
    ir::Program p;
    p.vocab = {"<pad>", "<s>", "a", "b", "c", "d", "e", "f", "g", "h"};
    p.max_len = 9;
    p.cardinality = 10;
    p.inputs.push_back(cat_var("tokens", 10, {ir::ProducerKind::InputToken, -1, -1, {}}, pad_labels(p.vocab, 10)));
    p.inputs.push_back(cat_var("positions", 10, {ir::ProducerKind::InputPosition, -1, -1, {}}));
    p.inputs.push_back(num_var("ones", 1, {ir::ProducerKind::InputOnes, -1, -1, {}}));
    ir::Layer l0;
    auto rnd_pred = [&](int shared) {
        ir::Predicate pr;
        // `shared` of the 10 rows map to one common key, rest distinct-ish
        int common = (int)rng.next_below(10);
        for (int q = 0; q < 10; ++q)
            pr.mapping.push_back(q < shared ? common : (int)rng.next_below(10));
        return pr;
    };
    for (int h = 0; h < 2; ++h) {
        ir::CatHeadSpec s;
        s.query_var = h ? "tokens" : "positions";
        s.key_var = "positions";
        s.value_var = "tokens";
        s.predicate = rnd_pred(h == 0 ? 0 : 3);
        s.output = cat_var("attn_0_" + std::to_string(h) + "_outputs", 10, {ir::ProducerKind::AttnHead, 0, h, {}});
        l0.cat_heads.push_back(s);
    }
    for (int h = 0; h < 2; ++h) {
        ir::NumHeadSpec s;
        s.query_var = "tokens";
        s.key_var = "tokens";
        s.value_var = "ones";
        s.predicate = rnd_pred(h == 0 ? 2 : 4);
        s.output = num_var("num_attn_0_" + std::to_string(h) + "_outputs", 9, {ir::ProducerKind::NumAttnHead, 0, h, {}});
        l0.num_heads.push_back(s);
    }
    { // cat mlp over (tokens, attn_0_0): full 100-entry table, skewed outputs
        ir::LookupMlpSpec m;
        m.input_kind = ir::VarKind::Categorical;
        m.input_vars = {"tokens", "attn_0_0_outputs"};
        for (int a = 0; a < 10; ++a)
            for (int b = 0; b < 10; ++b)
                m.table[{a, b}] = rng.next_below(100) < 55 ? 3 : (int)rng.next_below(10);
        m.output = cat_var("mlp_0_0_outputs", 10, {ir::ProducerKind::Mlp, 0, 0, {}});
        l0.mlps.push_back(m);
    }
    { // num mlp over the two counts
        ir::LookupMlpSpec m;
        m.input_kind = ir::VarKind::Numerical;
        m.input_vars = {"num_attn_0_0_outputs", "num_attn_0_1_outputs"};
        for (int a = 0; a <= 9; ++a)
            for (int b = 0; b <= 9; ++b)
                m.table[{a, b}] = rng.next_below(100) < 60 ? 0 : (int)rng.next_below(10);
        m.output = cat_var("num_mlp_0_0_outputs", 10, {ir::ProducerKind::NumMlp, 0, 0, {}});
        l0.mlps.push_back(m);
    }
    p.layers.push_back(l0);
    p.classifier.classes = {"1","2","3","4","5","6","7","8"};
    p.classifier.output_mode = ir::OutputMode::PerToken;
    zero_weights(p);
    // half the variables carry weight (the other half prunes away)
    for (auto& [name, rows] : p.classifier.weights)
        if (name != "attn_0_1_outputs" && name != "mlp_0_0_outputs" && name != "positions")
            for (auto& row : rows)
                for (auto& w : row) w = rng.next_normal();
    return p;
}

inline ir::Program dyck1_shaped_program(Rng& rng) {
    ir::Program p;
    p.vocab = {"<pad>", "<s>", "(", ")"};
    p.max_len = 16;
    p.cardinality = 16;
    int k = 16;
    p.inputs.push_back(cat_var("tokens", k, {ir::ProducerKind::InputToken, -1, -1, {}}, pad_labels(p.vocab, k)));
    p.inputs.push_back(cat_var("positions", k, {ir::ProducerKind::InputPosition, -1, -1, {}}));
    p.inputs.push_back(num_var("ones", 1, {ir::ProducerKind::InputOnes, -1, -1, {}}));
    std::vector<std::string> cats = {"tokens", "positions"};
    struct NI { std::string name; int bound; };
    std::vector<NI> nums = {{"ones", 1}};
    auto rnd_pred = [&](int shared) {
        ir::Predicate pr;
        int common = (int)rng.next_below(k);
        for (int q = 0; q < k; ++q)
            pr.mapping.push_back(q < shared ? common : (int)rng.next_below(k));
        return pr;
    };
    for (int l = 0; l < 3; ++l) {
        ir::Layer layer;
        std::vector<std::string> next_cats = cats;
        std::vector<NI> next_nums = nums;
        for (int h = 0; h < 4; ++h) {
            ir::CatHeadSpec s;
            s.query_var = cats[rng.next_below(cats.size())];
            s.key_var = cats[rng.next_below(cats.size())];
            s.value_var = cats[rng.next_below(cats.size())];
            s.predicate = rnd_pred((int)rng.next_below(6));
            s.output = cat_var("attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs", k,
                               {ir::ProducerKind::AttnHead, l, h, {}});
            next_cats.push_back(s.output.name);
            layer.cat_heads.push_back(s);
        }
        for (int h = 0; h < 4; ++h) {
            ir::NumHeadSpec s;
            s.query_var = cats[rng.next_below(cats.size())];
            s.key_var = cats[rng.next_below(cats.size())];
            // layer 0 counts ones; upper layers sum lower-layer counts so the
            // declared bounds escalate as in real extracted programs
            const auto& vv = l == 0 ? nums[0] : NI{"num_attn_" + std::to_string(l - 1) + "_" +
                                                       std::to_string(h % 2) + "_outputs",
                                                   l == 1 ? 16 : 256};
            s.value_var = vv.name;
            s.predicate = rnd_pred((int)rng.next_below(8));
            s.output = num_var("num_attn_" + std::to_string(l) + "_" + std::to_string(h) + "_outputs",
                               p.max_len * vv.bound, {ir::ProducerKind::NumAttnHead, l, h, {}});
            next_nums.push_back({s.output.name, s.output.cardinality});
            layer.num_heads.push_back(s);
        }
        { // cat mlp (full table k^2 = 256)
            ir::LookupMlpSpec m;
            m.input_kind = ir::VarKind::Categorical;
            m.input_vars = {next_cats[rng.next_below(next_cats.size())],
                            next_cats[rng.next_below(next_cats.size())]};
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                    m.table[{a, b}] = rng.next_below(100) < 50 ? 7 : (int)rng.next_below(k);
            m.output = cat_var("mlp_" + std::to_string(l) + "_0_outputs", k, {ir::ProducerKind::Mlp, l, 0, {}});
            next_cats.push_back(m.output.name);
            layer.mlps.push_back(m);
        }
        { // num mlp: first-hop counts at layers 0-1; at layer 2 one giant
          // second-hop table (the shape that dominates real full emissions)
            ir::LookupMlpSpec m;
            m.input_kind = ir::VarKind::Numerical;
            // the layer-2 table reads the two layer-1 composed counts
            std::string n1 = "num_attn_" + std::to_string(l == 2 ? 1 : l) + "_0_outputs";
            std::string n2 = "num_attn_" + std::to_string(l == 2 ? 1 : l) + "_1_outputs";
            m.input_vars = {n1, n2};
            int b1 = l <= 1 ? 16 : 256;
            int b2 = b1;
            for (int a = 0; a <= b1; ++a)
                for (int b = 0; b <= b2; ++b)
                    if (l <= 1 || a <= 215)  // sparse tail folds into the default
                        m.table[{a, b}] = rng.next_below(100) < 50 ? 2 : (int)rng.next_below(k);
            m.output = cat_var("num_mlp_" + std::to_string(l) + "_0_outputs", k, {ir::ProducerKind::NumMlp, l, 0, {}});
            next_cats.push_back(m.output.name);
            layer.mlps.push_back(m);
        }
        cats = next_cats;
        nums = next_nums;
        p.layers.push_back(layer);
    }
    p.classifier.classes = {"T", "P", "F"};
    p.classifier.output_mode = ir::OutputMode::PerToken;
    zero_weights(p);
    std::set<std::string> dead = {"num_mlp_2_0_outputs", "mlp_2_0_outputs",
                                  "attn_2_3_outputs", "num_attn_2_3_outputs"};
    for (auto& [name, rows] : p.classifier.weights) {
        if (dead.count(name)) continue;
        for (auto& row : rows)
            for (auto& w : row) w = rng.next_normal();
    }
    return p;
}

// Random token-id sequence (bos first, content after), length in [1, max].
inline std::vector<int> random_sequence(Rng& rng, const ir::Program& p) {
    int n = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(p.max_len)));
    std::vector<int> tokens = {1};
    for (int i = 1; i < n; ++i)
        tokens.push_back(2 + static_cast<int>(rng.next_below(p.vocab.size() - 2)));
    return tokens;
}

}  // namespace tptest
