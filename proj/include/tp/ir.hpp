#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tp/common.hpp"

namespace tprog::ir {

// ---------------------------------------------------------------------------
// The discrete program representation.
//
// A program is a stack of layers over a disentangled stream of named
// variables. Attention heads read one key, one query and one value variable
// through a learned total predicate; lookup MLPs map input-value tuples to a
// new categorical variable; a linear classifier scores the final stream.
// ---------------------------------------------------------------------------

enum class VarKind { Categorical, Numerical };

enum class ProducerKind {
    InputToken,      // one-hot token identity
    InputPosition,   // one-hot position index
    InputOnes,       // constant numerical 1
    InputEmbedding,  // factored embedding variable (token -> value map)
    AttnHead,        // categorical attention output
    NumAttnHead,     // numerical attention output (bounded count)
    Mlp,             // categorical lookup MLP output
    NumMlp,          // numerical-input lookup MLP output (still categorical)
};

struct Producer {
    ProducerKind kind = ProducerKind::InputToken;
    int layer = -1;  // -1 for inputs
    int index = -1;  // head/mlp slot within the layer
    std::vector<int> token_map;  // InputEmbedding only: vocab index -> value
};

struct VariableDecl {
    std::string name;
    VarKind kind = VarKind::Categorical;
    // Categorical: number of values k. Numerical: inclusive upper bound on
    // the integer values the variable can take (ones has bound 1).
    int cardinality = 1;
    Producer producer;
    // Optional human-readable symbol per value (categorical only).
    std::vector<std::string> value_labels;

    bool is_categorical() const { return kind == VarKind::Categorical; }
};

// Queries sharing a key value, grouped into one emitted branch.
struct PredicateBranch {
    std::vector<int> queries;  // ascending
    int key = 0;
    bool operator==(const PredicateBranch&) const = default;
};

// Total map from query value to the key value it matches. `branches` is an
// optional grouped form produced by the predicate compression pass; when
// present it must agree with `mapping` on every query.
struct Predicate {
    std::vector<int> mapping;  // size = query cardinality, entries in [0, k_key)
    std::vector<PredicateBranch> branches;

    int operator()(int query_value) const { return mapping.at(query_value); }
    bool operator==(const Predicate&) const = default;
};

struct CatHeadSpec {
    std::string query_var, key_var, value_var;  // all categorical
    Predicate predicate;
    VariableDecl output;  // categorical, cardinality = cardinality(value_var)
};

struct NumHeadSpec {
    std::string query_var, key_var;  // categorical
    std::string value_var;           // numerical
    Predicate predicate;
    VariableDecl output;  // numerical, bound = max_len * bound(value_var)
};

struct LookupMlpSpec {
    std::vector<std::string> input_vars;  // 2 slots; 1 after duplicate collapse
    VarKind input_kind = VarKind::Categorical;
    // Explicit entries; tuples not listed fall through to default_value.
    // Freshly discretized tables cover the whole input domain.
    std::map<std::vector<int>, int> table;
    int default_value = 0;
    VariableDecl output;  // categorical
};

enum class OutputMode { PerToken, MeanPooled };

struct ClassifierSpec {
    std::vector<std::string> classes;
    // Per variable: categorical -> cardinality rows of |classes| weights,
    // numerical -> a single row (weight * value).
    std::map<std::string, std::vector<std::vector<double>>> weights;
    OutputMode output_mode = OutputMode::PerToken;
};

struct Layer {
    std::vector<CatHeadSpec> cat_heads;
    std::vector<NumHeadSpec> num_heads;
    std::vector<LookupMlpSpec> mlps;  // categorical-input first, then numerical-input
};

struct Program {
    // Vocabulary conventions: index 0 = <pad>, index 1 = <s>,
    // index 2 = </s> when an eos token is used.
    std::vector<std::string> vocab;
    int max_len = 1;  // maximum number of positions, specials included
    bool causal = false;
    int cardinality = 1;  // shared categorical cardinality k
    std::vector<VariableDecl> inputs;
    std::vector<Layer> layers;
    ClassifierSpec classifier;

    const VariableDecl* find_var(const std::string& name) const;
    // All declared variables in production order (inputs, then per layer:
    // cat heads, num heads, mlps). This is also the classifier feature order.
    std::vector<const VariableDecl*> all_vars() const;
    std::vector<const VariableDecl*> categorical_vars() const;
    std::vector<const VariableDecl*> numerical_vars() const;
};

// Well-known special tokens.
inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kBos = "<s>";
inline constexpr const char* kEos = "</s>";
inline constexpr const char* kUnk = "<unk>";

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct Violation {
    std::string element;  // offending element, e.g. "layers[1].cat_heads[0]"
    std::string message;
};

// Empty result iff every structural invariant holds. Violations are data,
// not failures.
std::vector<Violation> validate_program(const Program& p);

// Throwing convenience for call sites that require a valid program.
void require_valid(const Program& p, const std::string& context);

// ---------------------------------------------------------------------------
// Serialization (canonical JSON, sorted keys; extension .tp.json)
// ---------------------------------------------------------------------------

std::string serialize(const Program& p);
Program deserialize(const std::string& text);

Program load_program(const std::string& path);
void save_program(const Program& p, const std::string& path);

bool structurally_equal(const Program& a, const Program& b);

// ---------------------------------------------------------------------------
// Static statistics
// ---------------------------------------------------------------------------

struct ReadFractions {
    // role ("key"|"query"|"value") -> producer class
    // ("tokens"|"positions"|"ones"|"attn"|"mlp") -> fraction of heads.
    std::map<std::string, std::map<std::string, double>> by_role;
};

struct ProgramStats {
    int line_count_full = 0;
    int line_count_pruned = 0;
    std::vector<ReadFractions> reads_by_layer;
};

ProgramStats program_stats(const Program& p);

}  // namespace tprog::ir
