#include "tp/interp.hpp"

#include <algorithm>
#include <cstdlib>

namespace tprog::interp {

std::vector<int> select_closest(const std::vector<int>& keys, const std::vector<int>& queries,
                                const ir::Predicate& predicate, bool causal, int max_len) {
    size_t n = keys.size();
    if (n == 0) throw InvalidArgument("select_closest: empty input");
    if (queries.size() != n) throw InvalidArgument("select_closest: keys/queries length mismatch");
    if (static_cast<int>(n) > max_len)
        throw InvalidArgument("select_closest: sequence longer than max_len");

    std::vector<int> out(n, 0);
    for (size_t i = 0; i < n; ++i) {
        int want = predicate(queries[i]);
        size_t limit = causal ? i + 1 : n;
        // Rank matches by (self?, distance, position): the nearest non-self
        // match wins, a self-match beats only the no-match default, equal
        // distances break toward the earlier position.
        bool found = false;
        int best_j = 0;
        long best_rank = 0;
        for (size_t j = 0; j < limit; ++j) {
            if (keys[j] != want) continue;
            long d = std::labs(static_cast<long>(i) - static_cast<long>(j));
            long rank = d == 0 ? static_cast<long>(n) + 1 : d;  // self ranks last
            if (!found || rank < best_rank) {
                found = true;
                best_rank = rank;
                best_j = static_cast<int>(j);
            }
        }
        out[i] = found ? best_j : 0;
    }
    return out;
}

std::vector<std::vector<uint8_t>> select(const std::vector<int>& keys,
                                         const std::vector<int>& queries,
                                         const ir::Predicate& predicate, bool causal) {
    size_t n = keys.size();
    if (n == 0) throw InvalidArgument("select: empty input");
    if (queries.size() != n) throw InvalidArgument("select: keys/queries length mismatch");
    std::vector<std::vector<uint8_t>> m(n, std::vector<uint8_t>(n, 0));
    for (size_t i = 0; i < n; ++i) {
        int want = predicate(queries[i]);
        size_t limit = causal ? i + 1 : n;
        for (size_t j = 0; j < limit; ++j)
            if (keys[j] == want) m[i][j] = 1;
    }
    return m;
}

std::vector<int64_t> aggregate_sum(const std::vector<std::vector<uint8_t>>& matrix,
                                   const std::vector<int64_t>& values) {
    std::vector<int64_t> out(matrix.size(), 0);
    for (size_t i = 0; i < matrix.size(); ++i) {
        int64_t acc = 0;
        for (size_t j = 0; j < values.size(); ++j)
            if (matrix[i][j]) acc += values[j];
        out[i] = acc;
    }
    return out;
}

std::vector<int> apply_mlp(const ir::LookupMlpSpec& spec, const ir::Program& program,
                           const std::vector<std::vector<int64_t>>& inputs) {
    if (inputs.size() != spec.input_vars.size())
        throw InvalidArgument("apply_mlp: input arity mismatch");
    size_t n = inputs.empty() ? 0 : inputs[0].size();
    // Bound checks guard against extraction bugs.
    for (size_t s = 0; s < inputs.size(); ++s) {
        const auto* decl = program.find_var(spec.input_vars[s]);
        if (!decl) throw InvalidArgument("apply_mlp: unknown input variable " + spec.input_vars[s]);
        int64_t hi = decl->is_categorical() ? decl->cardinality - 1 : decl->cardinality;
        for (int64_t v : inputs[s])
            if (v < 0 || v > hi)
                throw InvalidArgument("apply_mlp: bound exceeded for variable " + spec.input_vars[s] +
                                      " (value " + std::to_string(v) + ", bound " +
                                      std::to_string(hi) + ")");
    }
    std::vector<int> out(n, spec.default_value);
    std::vector<int> key(inputs.size());
    for (size_t i = 0; i < n; ++i) {
        for (size_t s = 0; s < inputs.size(); ++s) key[s] = static_cast<int>(inputs[s][i]);
        auto it = spec.table.find(key);
        if (it != spec.table.end()) out[i] = it->second;
    }
    return out;
}

namespace {

struct Evaluator {
    const ir::Program& p;
    size_t n;
    ExecutionTrace trace;

    const std::vector<int>& cat(const std::string& name) {
        auto it = trace.cat_values.find(name);
        if (it == trace.cat_values.end())
            throw InvalidArgument("run_program: variable '" + name + "' not available");
        return it->second;
    }
    const std::vector<int64_t>& num(const std::string& name) {
        auto it = trace.num_values.find(name);
        if (it == trace.num_values.end())
            throw InvalidArgument("run_program: variable '" + name + "' not available");
        return it->second;
    }

    void check_bound(const ir::VariableDecl& decl, const std::vector<int64_t>& values) {
        for (int64_t v : values)
            if (v < 0 || v > decl.cardinality)
                throw InvalidArgument("run_program: value " + std::to_string(v) + " of '" +
                                      decl.name + "' exceeds bound " +
                                      std::to_string(decl.cardinality));
    }

    void run_inputs(const std::vector<int>& token_ids) {
        for (const auto& v : p.inputs) {
            switch (v.producer.kind) {
                case ir::ProducerKind::InputToken:
                    trace.cat_values[v.name] = token_ids;
                    break;
                case ir::ProducerKind::InputPosition: {
                    std::vector<int> pos(n);
                    for (size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i);
                    trace.cat_values[v.name] = pos;
                    break;
                }
                case ir::ProducerKind::InputOnes:
                    trace.num_values[v.name] = std::vector<int64_t>(n, 1);
                    break;
                case ir::ProducerKind::InputEmbedding: {
                    std::vector<int> vals(n);
                    for (size_t i = 0; i < n; ++i) vals[i] = v.producer.token_map.at(token_ids[i]);
                    trace.cat_values[v.name] = vals;
                    break;
                }
                default:
                    throw InvalidArgument("run_program: bad input producer for '" + v.name + "'");
            }
        }
    }

    void run_layers() {
        for (const auto& layer : p.layers) {
            for (const auto& h : layer.cat_heads) {
                auto idx = select_closest(cat(h.key_var), cat(h.query_var), h.predicate, p.causal,
                                          p.max_len);
                trace.cat_values[h.output.name] = aggregate(idx, cat(h.value_var));
                trace.attn_index[h.output.name] = std::move(idx);
            }
            for (const auto& h : layer.num_heads) {
                auto m = select(cat(h.key_var), cat(h.query_var), h.predicate, p.causal);
                auto sums = aggregate_sum(m, num(h.value_var));
                check_bound(h.output, sums);
                trace.num_values[h.output.name] = std::move(sums);
            }
            for (const auto& m : layer.mlps) {
                std::vector<std::vector<int64_t>> ins;
                for (const auto& name : m.input_vars) {
                    if (m.input_kind == ir::VarKind::Categorical) {
                        const auto& cv = cat(name);
                        ins.emplace_back(cv.begin(), cv.end());
                    } else {
                        ins.push_back(num(name));
                    }
                }
                trace.cat_values[m.output.name] = apply_mlp(m, p, ins);
            }
        }
    }

    // Classifier scores in canonical variable order. The relaxed model's
    // hard-eval path mirrors this accumulation order so label argmaxes agree
    // bit for bit.
    void run_classifier() {
        size_t num_classes = p.classifier.classes.size();
        std::vector<std::vector<double>> scores(n, std::vector<double>(num_classes, 0.0));
        for (const auto* v : p.all_vars()) {
            const auto& rows = p.classifier.weights.at(v->name);
            if (v->is_categorical()) {
                const auto& vals = cat(v->name);
                for (size_t i = 0; i < n; ++i)
                    for (size_t c = 0; c < num_classes; ++c) scores[i][c] += rows[vals[i]][c];
            } else {
                const auto& vals = num(v->name);
                for (size_t i = 0; i < n; ++i)
                    for (size_t c = 0; c < num_classes; ++c)
                        scores[i][c] += rows[0][c] * static_cast<double>(vals[i]);
            }
        }
        if (p.classifier.output_mode == ir::OutputMode::MeanPooled) {
            std::vector<double> pooled(num_classes, 0.0);
            for (size_t c = 0; c < num_classes; ++c) {
                for (size_t i = 0; i < n; ++i) pooled[c] += scores[i][c];
                pooled[c] /= static_cast<double>(n);
            }
            trace.scores = {pooled};
        } else {
            trace.scores = std::move(scores);
        }
        for (const auto& row : trace.scores) {
            size_t best = 0;
            for (size_t c = 1; c < row.size(); ++c)
                if (row[c] > row[best]) best = c;  // ties -> lowest class index
            trace.labels.push_back(p.classifier.classes[best]);
        }
    }
};

std::vector<int> tokens_to_ids(const ir::Program& p, const std::vector<std::string>& tokens) {
    std::map<std::string, int> index;
    for (size_t i = 0; i < p.vocab.size(); ++i) index[p.vocab[i]] = static_cast<int>(i);
    int unk = -1;
    if (auto it = index.find(ir::kUnk); it != index.end()) unk = it->second;
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) {
        auto it = index.find(t);
        if (it != index.end()) {
            ids.push_back(it->second);
        } else if (unk >= 0) {
            ids.push_back(unk);
        } else {
            throw InvalidArgument("run_program: token '" + t + "' not in vocabulary");
        }
    }
    return ids;
}

}  // namespace

RunResult run_program(const ir::Program& p, const std::vector<std::string>& tokens) {
    if (tokens.empty()) throw InvalidArgument("run_program: empty input");
    if (static_cast<int>(tokens.size()) > p.max_len)
        throw InvalidArgument("run_program: input longer than max_len");
    Evaluator ev{p, tokens.size(), {}};
    ev.run_inputs(tokens_to_ids(p, tokens));
    ev.run_layers();
    ev.run_classifier();
    RunResult r;
    r.labels = ev.trace.labels;
    r.trace = std::move(ev.trace);
    return r;
}

std::vector<int> run_program_ids(const ir::Program& p, const std::vector<int>& token_ids) {
    if (token_ids.empty()) throw InvalidArgument("run_program: empty input");
    Evaluator ev{p, token_ids.size(), {}};
    ev.run_inputs(token_ids);
    ev.run_layers();
    ev.run_classifier();
    std::vector<int> out;
    out.reserve(ev.trace.labels.size());
    for (const auto& row : ev.trace.scores) {
        size_t best = 0;
        for (size_t c = 1; c < row.size(); ++c)
            if (row[c] > row[best]) best = c;
        out.push_back(static_cast<int>(best));
    }
    return out;
}

std::vector<std::vector<FeatureContribution>> classifier_feature_report(
    const ir::Program& p, const std::vector<std::string>& tokens) {
    RunResult r = run_program(p, tokens);
    size_t n = tokens.size();
    size_t num_classes = p.classifier.classes.size();
    std::vector<std::vector<FeatureContribution>> report(n);
    for (size_t i = 0; i < n; ++i) {
        for (const auto* v : p.all_vars()) {
            const auto& rows = p.classifier.weights.at(v->name);
            FeatureContribution fc;
            fc.variable = v->name;
            fc.class_scores.resize(num_classes);
            if (v->is_categorical()) {
                int val = r.trace.cat_values.at(v->name)[i];
                fc.value = val;
                for (size_t c = 0; c < num_classes; ++c) fc.class_scores[c] = rows[val][c];
            } else {
                int64_t val = r.trace.num_values.at(v->name)[i];
                fc.value = static_cast<int>(val);
                fc.numerical = true;
                for (size_t c = 0; c < num_classes; ++c)
                    fc.class_scores[c] = rows[0][c] * static_cast<double>(val);
            }
            report[i].push_back(std::move(fc));
        }
        std::stable_sort(report[i].begin(), report[i].end(), [](const auto& a, const auto& b) {
            auto gap = [](const FeatureContribution& f) {
                auto [lo, hi] = std::minmax_element(f.class_scores.begin(), f.class_scores.end());
                return *hi - *lo;
            };
            return gap(a) > gap(b);
        });
    }
    return report;
}

}  // namespace tprog::interp
