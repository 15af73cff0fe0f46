#include "tp/ir.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace tprog::ir {

const VariableDecl* Program::find_var(const std::string& name) const {
    for (const auto* v : all_vars())
        if (v->name == name) return v;
    return nullptr;
}

std::vector<const VariableDecl*> Program::all_vars() const {
    std::vector<const VariableDecl*> out;
    for (const auto& v : inputs) out.push_back(&v);
    for (const auto& layer : layers) {
        for (const auto& h : layer.cat_heads) out.push_back(&h.output);
        for (const auto& h : layer.num_heads) out.push_back(&h.output);
        for (const auto& m : layer.mlps) out.push_back(&m.output);
    }
    return out;
}

std::vector<const VariableDecl*> Program::categorical_vars() const {
    std::vector<const VariableDecl*> out;
    for (const auto* v : all_vars())
        if (v->is_categorical()) out.push_back(v);
    return out;
}

std::vector<const VariableDecl*> Program::numerical_vars() const {
    std::vector<const VariableDecl*> out;
    for (const auto* v : all_vars())
        if (!v->is_categorical()) out.push_back(v);
    return out;
}

namespace {

// Stage index for acyclicity: inputs 0, layer L heads 2L+1, layer L mlps 2L+2.
// Heads may read anything below their layer; MLPs may also read same-layer
// head outputs.
struct VarInfo {
    const VariableDecl* decl = nullptr;
    int stage = 0;
    int count = 0;  // declarations with this name
};

std::map<std::string, VarInfo> collect_vars(const Program& p) {
    std::map<std::string, VarInfo> vars;
    auto add = [&](const VariableDecl& d, int stage) {
        auto& info = vars[d.name];
        if (info.count == 0) {
            info.decl = &d;
            info.stage = stage;
        }
        info.count++;
    };
    for (const auto& v : p.inputs) add(v, 0);
    for (size_t li = 0; li < p.layers.size(); ++li) {
        int l = static_cast<int>(li);
        for (const auto& h : p.layers[li].cat_heads) add(h.output, 2 * l + 1);
        for (const auto& h : p.layers[li].num_heads) add(h.output, 2 * l + 1);
        for (const auto& m : p.layers[li].mlps) add(m.output, 2 * l + 2);
    }
    return vars;
}

class Validator {
public:
    explicit Validator(const Program& p) : p_(p), vars_(collect_vars(p)) {}

    std::vector<Violation> run() {
        check_globals();
        check_inputs();
        for (size_t li = 0; li < p_.layers.size(); ++li) check_layer(static_cast<int>(li));
        check_classifier();
        return std::move(out_);
    }

private:
    void add(const std::string& element, const std::string& message) {
        out_.push_back({element, message});
    }

    void check_decl(const std::string& elem, const VariableDecl& d) {
        if (d.cardinality < 1) add(elem, "cardinality must be >= 1 for variable '" + d.name + "'");
        if (d.is_categorical() && !d.value_labels.empty() &&
            static_cast<int>(d.value_labels.size()) != d.cardinality)
            add(elem, "value_labels length " + std::to_string(d.value_labels.size()) +
                          " != cardinality " + std::to_string(d.cardinality) + " for '" + d.name + "'");
    }

    // Resolve a reference made from `stage`; report if undeclared, declared
    // too late, or of the wrong kind.
    const VariableDecl* resolve(const std::string& elem, const std::string& name, int stage,
                                VarKind want) {
        auto it = vars_.find(name);
        if (it == vars_.end()) {
            add(elem, "reads undeclared variable '" + name + "'");
            return nullptr;
        }
        if (it->second.stage >= stage)
            add(elem, "reads variable '" + name + "' not produced at an earlier stage (acyclicity)");
        const VariableDecl* d = it->second.decl;
        if (d->kind != want)
            add(elem, "variable '" + name + "' has wrong kind (expected " +
                          (want == VarKind::Categorical ? "categorical" : "numerical") + ")");
        return d;
    }

    void check_predicate(const std::string& elem, const Predicate& pred,
                         const VariableDecl* qv, const VariableDecl* kv) {
        if (!qv || !kv) return;
        if (static_cast<int>(pred.mapping.size()) != qv->cardinality) {
            add(elem, "predicate not total: covers " + std::to_string(pred.mapping.size()) +
                          " of " + std::to_string(qv->cardinality) + " query values");
            return;
        }
        for (size_t q = 0; q < pred.mapping.size(); ++q)
            if (pred.mapping[q] < 0 || pred.mapping[q] >= kv->cardinality) {
                add(elem, "predicate maps query " + std::to_string(q) + " to out-of-range key value " +
                              std::to_string(pred.mapping[q]));
                return;
            }
        if (!pred.branches.empty()) {
            std::vector<int> covered(pred.mapping.size(), 0);
            for (const auto& br : pred.branches)
                for (int q : br.queries) {
                    if (q < 0 || q >= static_cast<int>(pred.mapping.size()) ||
                        pred.mapping[q] != br.key) {
                        add(elem, "predicate branch disagrees with mapping at query " +
                                      std::to_string(q));
                        return;
                    }
                    covered[q]++;
                }
            for (size_t q = 0; q < covered.size(); ++q)
                if (covered[q] != 1) {
                    add(elem, "predicate branches do not partition the query domain");
                    return;
                }
        }
    }

    void check_globals() {
        if (p_.max_len < 1) add("program", "max_len must be positive");
        if (p_.cardinality < 1) add("program", "cardinality must be positive");
        for (const auto& [name, info] : vars_)
            if (info.count > 1)
                add("program", "variable '" + name + "' produced " + std::to_string(info.count) +
                                   " times (single-producer violation)");
    }

    void check_inputs() {
        bool tokens = false, positions = false;
        int ones = 0;
        for (size_t i = 0; i < p_.inputs.size(); ++i) {
            const auto& v = p_.inputs[i];
            std::string elem = "inputs[" + std::to_string(i) + "]";
            check_decl(elem, v);
            switch (v.producer.kind) {
                case ProducerKind::InputToken:
                    tokens = true;
                    if (!v.is_categorical()) add(elem, "'tokens' must be categorical");
                    break;
                case ProducerKind::InputPosition:
                    positions = true;
                    if (!v.is_categorical()) add(elem, "'positions' must be categorical");
                    break;
                case ProducerKind::InputOnes:
                    ones++;
                    if (v.is_categorical()) add(elem, "'ones' must be numerical");
                    break;
                case ProducerKind::InputEmbedding: {
                    if (!v.is_categorical()) add(elem, "embedding variables must be categorical");
                    if (v.producer.token_map.size() != p_.vocab.size())
                        add(elem, "embedding token_map size != vocab size");
                    for (int val : v.producer.token_map)
                        if (val < 0 || val >= v.cardinality)
                            add(elem, "embedding token_map value out of range");
                    break;
                }
                default:
                    add(elem, "input variable with non-input producer");
            }
        }
        // Token identity may be carried either by `tokens` or by factored
        // embedding variables; positions are always present.
        bool any_embedding = std::any_of(p_.inputs.begin(), p_.inputs.end(), [](const auto& v) {
            return v.producer.kind == ProducerKind::InputEmbedding;
        });
        if (!tokens && !any_embedding) add("inputs", "missing 'tokens' (or embedding) input variable");
        if (!positions) add("inputs", "missing 'positions' input variable");

        bool any_numerical = ones > 0;
        for (const auto& layer : p_.layers) {
            if (!layer.num_heads.empty()) any_numerical = true;
            for (const auto& m : layer.mlps)
                if (m.input_kind == VarKind::Numerical) any_numerical = true;
        }
        if (any_numerical && ones != 1)
            add("inputs", "numerical modules present: exactly one 'ones' input required, found " +
                              std::to_string(ones));
    }

    void check_layer(int l) {
        const Layer& layer = p_.layers[l];
        int head_stage = 2 * l + 1, mlp_stage = 2 * l + 2;
        for (size_t h = 0; h < layer.cat_heads.size(); ++h) {
            const auto& spec = layer.cat_heads[h];
            std::string elem = "layers[" + std::to_string(l) + "].cat_heads[" + std::to_string(h) + "]";
            check_decl(elem, spec.output);
            const auto* qv = resolve(elem, spec.query_var, head_stage, VarKind::Categorical);
            const auto* kv = resolve(elem, spec.key_var, head_stage, VarKind::Categorical);
            const auto* vv = resolve(elem, spec.value_var, head_stage, VarKind::Categorical);
            check_predicate(elem, spec.predicate, qv, kv);
            if (vv && spec.output.cardinality != vv->cardinality)
                add(elem, "output cardinality " + std::to_string(spec.output.cardinality) +
                              " != value variable cardinality " + std::to_string(vv->cardinality));
            if (!spec.output.is_categorical()) add(elem, "categorical head output must be categorical");
        }
        for (size_t h = 0; h < layer.num_heads.size(); ++h) {
            const auto& spec = layer.num_heads[h];
            std::string elem = "layers[" + std::to_string(l) + "].num_heads[" + std::to_string(h) + "]";
            check_decl(elem, spec.output);
            const auto* qv = resolve(elem, spec.query_var, head_stage, VarKind::Categorical);
            const auto* kv = resolve(elem, spec.key_var, head_stage, VarKind::Categorical);
            const auto* vv = resolve(elem, spec.value_var, head_stage, VarKind::Numerical);
            check_predicate(elem, spec.predicate, qv, kv);
            if (spec.output.is_categorical()) add(elem, "numerical head output must be numerical");
            if (vv && spec.output.cardinality != p_.max_len * vv->cardinality)
                add(elem, "output bound " + std::to_string(spec.output.cardinality) +
                              " != max_len * value bound = " +
                              std::to_string(p_.max_len * vv->cardinality));
        }
        for (size_t m = 0; m < layer.mlps.size(); ++m) {
            const auto& spec = layer.mlps[m];
            std::string elem = "layers[" + std::to_string(l) + "].mlps[" + std::to_string(m) + "]";
            check_decl(elem, spec.output);
            if (spec.input_vars.empty() || spec.input_vars.size() > 2) {
                add(elem, "lookup MLP must read 1 or 2 input variables");
                continue;
            }
            std::vector<int> domain;
            bool ok = true;
            for (const auto& name : spec.input_vars) {
                const auto* v = resolve(elem, name, mlp_stage, spec.input_kind);
                if (!v) {
                    ok = false;
                    continue;
                }
                // Numerical domain enumerates 0..bound inclusive.
                domain.push_back(v->is_categorical() ? v->cardinality : v->cardinality + 1);
            }
            if (!spec.output.is_categorical()) add(elem, "MLP output must be categorical");
            int k = spec.output.cardinality;
            if (spec.default_value < 0 || spec.default_value >= k)
                add(elem, "default value out of range [0, " + std::to_string(k) + ")");
            if (!ok) continue;
            for (const auto& [key, value] : spec.table) {
                if (key.size() != spec.input_vars.size()) {
                    add(elem, "table key arity != number of input variables");
                    break;
                }
                bool in_domain = true;
                for (size_t s = 0; s < key.size(); ++s)
                    if (key[s] < 0 || key[s] >= domain[s]) in_domain = false;
                if (!in_domain) {
                    add(elem, "table key outside the declared input domain");
                    break;
                }
                if (value < 0 || value >= k) {
                    add(elem, "table value " + std::to_string(value) + " outside [0, " +
                                  std::to_string(k) + ")");
                    break;
                }
            }
        }
    }

    void check_classifier() {
        const auto& c = p_.classifier;
        if (c.classes.empty()) add("classifier", "no output classes declared");
        for (const auto* v : p_.all_vars()) {
            auto it = c.weights.find(v->name);
            if (it == c.weights.end()) {
                add("classifier", "missing weights for variable '" + v->name + "'");
                continue;
            }
            size_t rows = v->is_categorical() ? static_cast<size_t>(v->cardinality) : 1;
            if (it->second.size() != rows) {
                add("classifier", "weight rows for '" + v->name + "' != " + std::to_string(rows));
                continue;
            }
            for (const auto& row : it->second)
                if (row.size() != c.classes.size()) {
                    add("classifier", "weight row width for '" + v->name + "' != class count");
                    break;
                }
        }
        for (const auto& [name, rows] : c.weights)
            if (!p_.find_var(name)) add("classifier", "weights for undeclared variable '" + name + "'");
    }

    const Program& p_;
    std::map<std::string, VarInfo> vars_;
    std::vector<Violation> out_;
};

}  // namespace

std::vector<Violation> validate_program(const Program& p) { return Validator(p).run(); }

void require_valid(const Program& p, const std::string& context) {
    auto violations = validate_program(p);
    if (violations.empty()) return;
    std::ostringstream ss;
    ss << context << ": invalid program:";
    for (const auto& v : violations) ss << "\n  " << v.element << ": " << v.message;
    throw InvalidArgument(ss.str());
}

bool structurally_equal(const Program& a, const Program& b) {
    return serialize(a) == serialize(b);
}

namespace {

std::string producer_class(const Producer& prod) {
    switch (prod.kind) {
        case ProducerKind::InputToken:
        case ProducerKind::InputEmbedding:
            return "tokens";
        case ProducerKind::InputPosition:
            return "positions";
        case ProducerKind::InputOnes:
            return "ones";
        case ProducerKind::AttnHead:
        case ProducerKind::NumAttnHead:
            return "attn";
        case ProducerKind::Mlp:
        case ProducerKind::NumMlp:
            return "mlp";
    }
    return "?";
}

}  // namespace

ProgramStats program_stats(const Program& p) {
    ProgramStats stats;
    for (const auto& layer : p.layers) {
        ReadFractions rf;
        int heads = static_cast<int>(layer.cat_heads.size() + layer.num_heads.size());
        if (heads > 0) {
            auto tally = [&](const std::string& role, const std::string& var) {
                if (const auto* d = p.find_var(var)) rf.by_role[role][producer_class(d->producer)] += 1.0;
            };
            for (const auto& h : layer.cat_heads) {
                tally("key", h.key_var);
                tally("query", h.query_var);
                tally("value", h.value_var);
            }
            for (const auto& h : layer.num_heads) {
                tally("key", h.key_var);
                tally("query", h.query_var);
                tally("value", h.value_var);
            }
            for (auto& [role, classes] : rf.by_role)
                for (auto& [cls, count] : classes) count /= heads;
        }
        stats.reads_by_layer.push_back(std::move(rf));
    }
    // Line counts are filled in by the extraction module (it owns the
    // emitter); see extract::fill_line_counts.
    return stats;
}

}  // namespace tprog::ir
