#pragma once

#include <string>
#include <vector>

#include "tp/ir.hpp"
#include "tp/model.hpp"
#include "tp/tasks.hpp"

namespace tprog::extract {

// Program-to-source conversion: semantics-preserving compression passes, a
// deterministic emitter, and the model<->program equivalence check.

struct EmissionOptions {
    std::string dialect = "py3";  // py3 | pseudo
    bool branch_merge = true;     // group predicate queries sharing a key
    bool default_fold = true;     // fold most frequent MLP output into a default
    bool dead_code = true;        // drop variables that cannot reach the classifier
    bool type_annotate = true;    // propagate value labels along value edges
    int max_width = 88;
    // Name of the classifier weight CSV the emitted program loads; when empty
    // the weights are inlined as a literal table.
    std::string weights_file = "classifier_weights.csv";

    static EmissionOptions none() {
        EmissionOptions o;
        o.branch_merge = o.default_fold = o.dead_code = o.type_annotate = false;
        return o;
    }
};

// --- passes (each one is semantics-preserving) ------------------------------

ir::Program compress_predicates(const ir::Program& p);
ir::Program compress_mlps(const ir::Program& p);
ir::Program annotate_types(const ir::Program& p);
ir::Program prune_dead(const ir::Program& p);

ir::Program apply_passes(const ir::Program& p, const EmissionOptions& opts);

// --- emission ----------------------------------------------------------------

std::string emit_source(const ir::Program& p, const EmissionOptions& opts);
std::string classifier_weights_csv(const ir::Program& p);

// Full program statistics including emitted line counts (full emission vs all
// passes applied).
ir::ProgramStats program_stats_with_lines(const ir::Program& p);

// --- equivalence ---------------------------------------------------------------

struct Mismatch {
    int example = -1;
    int position = -1;
    int model_label = -1, program_label = -1;
};

struct EquivalenceReport {
    double match_rate = 0.0;
    int64_t positions = 0;
    bool passed = false;
    bool has_mismatch = false;
    Mismatch first_mismatch;
};

// Hard-eval model path vs the interpreter on every sequence; passes iff every
// position label matches exactly.
EquivalenceReport verify_equivalence(const model::SoftParams& params, const ir::Program& p,
                                     const std::vector<tasks::Example>& split);

}  // namespace tprog::extract
