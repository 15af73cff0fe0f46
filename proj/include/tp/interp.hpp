#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tp/ir.hpp"

namespace tprog::interp {

// Exact, deterministic execution of discrete programs. This is the reference
// the relaxed model and the extraction passes are checked against.

// Hard attention: for each query position, the position of the closest key
// matching the predicate. Self-matches rank below every other match; if
// nothing matches, the query attends to position 0. N is the model's maximum
// sequence length (sets the distance-bias floor).
std::vector<int> select_closest(const std::vector<int>& keys, const std::vector<int>& queries,
                                const ir::Predicate& predicate, bool causal, int max_len);

// Multi-match attention matrix: M[i][j] = 1 iff predicate(queries[i]) ==
// keys[j] (and j <= i when causal). Rows may be all-zero.
std::vector<std::vector<uint8_t>> select(const std::vector<int>& keys,
                                         const std::vector<int>& queries,
                                         const ir::Predicate& predicate, bool causal);

// out[i] = values[indices[i]]
template <typename T>
std::vector<T> aggregate(const std::vector<int>& indices, const std::vector<T>& values) {
    std::vector<T> out;
    out.reserve(indices.size());
    for (int j : indices) out.push_back(values.at(j));
    return out;
}

// out[i] = sum_j M[i][j] * values[j]
std::vector<int64_t> aggregate_sum(const std::vector<std::vector<uint8_t>>& matrix,
                                   const std::vector<int64_t>& values);

// Table lookup with default fallthrough. Throws if a numerical input exceeds
// the declared bound (an extraction bug, not a data condition).
std::vector<int> apply_mlp(const ir::LookupMlpSpec& spec, const ir::Program& program,
                           const std::vector<std::vector<int64_t>>& inputs);

struct ExecutionTrace {
    std::map<std::string, std::vector<int>> cat_values;
    std::map<std::string, std::vector<int64_t>> num_values;
    // Chosen key position per query, per categorical head output name.
    std::map<std::string, std::vector<int>> attn_index;
    std::vector<std::vector<double>> scores;  // per position (or single row if pooled)
    std::vector<std::string> labels;
};

struct RunResult {
    std::vector<std::string> labels;  // per position, or one element if pooled
    ExecutionTrace trace;
};

RunResult run_program(const ir::Program& p, const std::vector<std::string>& tokens);

// Batch helper: token ids straight in, label ids straight out (argmax class
// index per position or pooled). Used by evaluation loops.
std::vector<int> run_program_ids(const ir::Program& p, const std::vector<int>& token_ids);

struct FeatureContribution {
    std::string variable;
    int value = 0;           // categorical value, or the numerical integer
    bool numerical = false;
    std::vector<double> class_scores;  // contribution per class
};

// Per position: every active feature with its class-score contributions,
// sorted by descending max-minus-min class gap.
std::vector<std::vector<FeatureContribution>> classifier_feature_report(
    const ir::Program& p, const std::vector<std::string>& tokens);

}  // namespace tprog::interp
