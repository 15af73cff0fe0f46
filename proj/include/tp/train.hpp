#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tp/model.hpp"
#include "tp/tasks.hpp"

namespace tprog::train {

// Optimization loop: geometric temperature annealing, Adam over the relaxed
// parameters, per-epoch validation of the hard-eval model, multi-seed and
// grid-search harnesses.

struct TrainConfig {
    int epochs = 250;
    int batch_size = 512;
    double learning_rate = 0.05;
    double tau_start = 3.0, tau_end = 0.01;
    int samples = 1;  // Gumbel samples per step
    int seeds = 5;

    // Model shape. Heads and MLPs are split evenly between categorical and
    // numerical modules unless numerical_split == "none".
    int layers = 2;
    int heads = 4;
    int mlps = 2;
    std::string numerical_split = "even";  // even | none
    int mlp_hidden = 64;

    // Reduced-compute profile for CI-scale runs.
    static TrainConfig desk() {
        TrainConfig c;
        c.epochs = 100;
        c.batch_size = 256;
        return c;
    }
};

struct GridSpec {
    std::vector<int> layers = {2, 3};
    std::vector<int> heads = {4, 8};
    std::vector<int> mlps = {2, 4};
};

struct RunRecord {
    TrainConfig config;
    std::string task;
    int cardinality = 0;
    uint64_t seed = 0;
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_metric;  // per epoch, hard-eval token accuracy
    double final_val = 0.0;
    double final_test = std::nan("");  // filled only for the selected model
    bool failed = false;
    double wall_seconds = 0.0;
    int64_t steps = 0;
    std::string checkpoint_path;

    // Equality of everything reproducible (wall time and paths excluded).
    bool same_results(const RunRecord& other) const;
};

std::string run_record_json(const RunRecord& r);

// tau(step) = tau_start * (tau_end / tau_start)^(step / (total_steps - 1)).
double temperature(int64_t step, int64_t total_steps, double tau_start, double tau_end);

model::Architecture make_architecture(const TrainConfig& c, const tasks::Dataset& data);

// One optimization run. Returns the final state; on NaN loss the record is
// marked failed and training stops early. Deterministic given (config, data,
// seed) in single-threaded mode.
struct TrainResult {
    RunRecord record;
    model::SoftParams params;
};
TrainResult train_model(const TrainConfig& config, const tasks::Dataset& data, uint64_t seed);

// seeds x grid runs in a worker pool; selection by validation metric; the
// test metric is computed once, for the selected model only.
struct GridResult {
    RunRecord best;
    model::SoftParams best_params;
    std::vector<RunRecord> leaderboard;  // sorted by val metric, descending
};
GridResult grid_search(const TrainConfig& base, const GridSpec& grid, const tasks::Dataset& data);

// Best-of-seeds with a fixed shape (a single-cell grid).
GridResult train_best_of_seeds(const TrainConfig& config, const tasks::Dataset& data);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

enum class Metric { TokenAccuracy, SpanF1 };

Metric metric_from_string(const std::string& s);

double evaluate_program(const ir::Program& p, const tasks::Dataset& data,
                        const std::string& split, Metric metric);
double evaluate_hard(const model::SoftParams& p, const std::vector<tasks::Example>& split,
                     Metric metric, const tasks::Dataset& data);

// IOB2 span F1 over label sequences (micro-averaged).
double span_f1(const std::vector<std::vector<std::string>>& gold,
               const std::vector<std::vector<std::string>>& pred);

// Test-leakage audit: number of test-split evaluations since last reset.
int64_t test_eval_count();
void reset_test_eval_count();

}  // namespace tprog::train
