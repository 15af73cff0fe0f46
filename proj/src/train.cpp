#include "tp/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <set>

#include "tp/interp.hpp"

namespace tprog::train {

using json = nlohmann::json;

namespace {
std::atomic<int64_t> g_test_evals{0};
}

int64_t test_eval_count() { return g_test_evals.load(); }
void reset_test_eval_count() { g_test_evals.store(0); }

double temperature(int64_t step, int64_t total_steps, double tau_start, double tau_end) {
    if (total_steps < 2) throw InvalidArgument("temperature: need at least 2 steps");
    if (step < 0 || step >= total_steps) throw InvalidArgument("temperature: step out of range");
    if (!(tau_start > tau_end) || tau_end <= 0)
        throw InvalidArgument("temperature: need tau_start > tau_end > 0");
    double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return tau_start * std::pow(tau_end / tau_start, t);
}

model::Architecture make_architecture(const TrainConfig& c, const tasks::Dataset& data) {
    model::Architecture a;
    a.layers = c.layers;
    if (c.numerical_split == "even") {
        a.cat_heads = c.heads - c.heads / 2;
        a.num_heads = c.heads / 2;
        a.cat_mlps = c.mlps - c.mlps / 2;
        a.num_mlps = c.mlps / 2;
    } else if (c.numerical_split == "none") {
        a.cat_heads = c.heads;
        a.num_heads = 0;
        a.cat_mlps = c.mlps;
        a.num_mlps = 0;
    } else {
        throw InvalidArgument("numerical_split must be 'even' or 'none'");
    }
    a.max_len = data.max_positions;
    a.k = model::shared_cardinality(static_cast<int>(data.vocab.size()), data.max_positions);
    a.mlp_hidden = c.mlp_hidden;
    a.causal = data.causal;
    a.pooled = data.pooled;
    a.vocab = data.vocab;
    a.classes = data.classes;
    return a;
}

bool RunRecord::same_results(const RunRecord& other) const {
    return seed == other.seed && train_loss == other.train_loss && val_metric == other.val_metric &&
           final_val == other.final_val && failed == other.failed && steps == other.steps &&
           ((std::isnan(final_test) && std::isnan(other.final_test)) ||
            final_test == other.final_test);
}

namespace {

json config_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"tau_start", c.tau_start},
                {"tau_end", c.tau_end},
                {"samples", c.samples},
                {"seeds", c.seeds},
                {"layers", c.layers},
                {"heads", c.heads},
                {"mlps", c.mlps},
                {"numerical_split", c.numerical_split},
                {"mlp_hidden", c.mlp_hidden}};
}

}  // namespace

std::string run_record_json(const RunRecord& r) {
    json j;
    j["config"] = config_to_json(r.config);
    j["task"] = r.task;
    j["cardinality"] = r.cardinality;
    j["seed"] = r.seed;
    j["train_loss"] = r.train_loss;
    j["val_metric"] = r.val_metric;
    j["final_val"] = r.final_val;
    if (!std::isnan(r.final_test)) j["final_test"] = r.final_test;
    j["failed"] = r.failed;
    j["wall_seconds"] = r.wall_seconds;
    j["steps"] = r.steps;
    j["checkpoint"] = r.checkpoint_path;
    return j.dump();
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

Metric metric_from_string(const std::string& s) {
    if (s == "token-accuracy" || s == "accuracy") return Metric::TokenAccuracy;
    if (s == "span-f1") return Metric::SpanF1;
    throw InvalidArgument("unknown metric '" + s + "'");
}

namespace {

// IOB2 spans as (type, start, end-exclusive).
std::set<std::tuple<std::string, int, int>> spans_of(const std::vector<std::string>& labels) {
    std::set<std::tuple<std::string, int, int>> spans;
    int start = -1;
    std::string type;
    auto close = [&](int end) {
        if (start >= 0) spans.insert({type, start, end});
        start = -1;
    };
    for (int i = 0; i < static_cast<int>(labels.size()); ++i) {
        const auto& l = labels[i];
        if (l.size() > 2 && l[0] == 'B' && l[1] == '-') {
            close(i);
            start = i;
            type = l.substr(2);
        } else if (l.size() > 2 && l[0] == 'I' && l[1] == '-') {
            // An I- tag continuing nothing (or the wrong type) starts a span,
            // matching the common lenient reading.
            if (start < 0 || type != l.substr(2)) {
                close(i);
                start = i;
                type = l.substr(2);
            }
        } else {
            close(i);
        }
    }
    close(static_cast<int>(labels.size()));
    return spans;
}

bool looks_iob2(const std::vector<std::string>& classes) {
    bool any_b = false;
    for (const auto& c : classes) {
        if (c == "O") continue;
        if (c.size() > 2 && (c[0] == 'B' || c[0] == 'I') && c[1] == '-') {
            any_b = true;
            continue;
        }
        return false;
    }
    return any_b;
}

}  // namespace

double span_f1(const std::vector<std::vector<std::string>>& gold,
               const std::vector<std::vector<std::string>>& pred) {
    if (gold.size() != pred.size()) throw InvalidArgument("span_f1: size mismatch");
    int64_t tp = 0, n_gold = 0, n_pred = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
        auto gs = spans_of(gold[i]);
        auto ps = spans_of(pred[i]);
        n_gold += gs.size();
        n_pred += ps.size();
        for (const auto& s : ps)
            if (gs.count(s)) tp++;
    }
    if (n_gold == 0 && n_pred == 0) return 1.0;
    double precision = n_pred ? static_cast<double>(tp) / n_pred : 0.0;
    double recall = n_gold ? static_cast<double>(tp) / n_gold : 0.0;
    if (precision + recall == 0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

template <typename LabelFn>
double metric_over(const std::vector<tasks::Example>& split, Metric metric,
                   const tasks::Dataset& data, LabelFn&& predict) {
    if (split.empty()) throw InvalidArgument("evaluate: empty split");
    if (metric == Metric::TokenAccuracy) {
        int64_t correct = 0, total = 0;
        for (const auto& e : split) {
            auto pred = predict(e);
            for (size_t i = 0; i < e.targets.size(); ++i) {
                if (e.targets[i] < 0) continue;
                total++;
                if (i < pred.size() && pred[i] == e.targets[i]) correct++;
            }
        }
        if (total == 0) throw InvalidArgument("evaluate: no labeled positions");
        return static_cast<double>(correct) / static_cast<double>(total);
    }
    if (!looks_iob2(data.classes))
        throw InvalidArgument("evaluate: span-f1 requires IOB2-style classes");
    std::vector<std::vector<std::string>> gold, predicted;
    for (const auto& e : split) {
        auto pred = predict(e);
        std::vector<std::string> g, q;
        for (size_t i = 0; i < e.targets.size(); ++i) {
            if (e.targets[i] < 0) continue;  // specials carry no spans
            g.push_back(data.classes[e.targets[i]]);
            q.push_back(i < pred.size() ? data.classes[pred[i]] : "O");
        }
        gold.push_back(std::move(g));
        predicted.push_back(std::move(q));
    }
    return span_f1(gold, predicted);
}

}  // namespace

double evaluate_program(const ir::Program& p, const tasks::Dataset& data,
                        const std::string& split_name, Metric metric) {
    if (split_name == "test") g_test_evals++;
    const auto& split = data.split(split_name);
    return metric_over(split, metric, data,
                       [&](const tasks::Example& e) { return interp::run_program_ids(p, e.tokens); });
}

double evaluate_hard(const model::SoftParams& p, const std::vector<tasks::Example>& split,
                     Metric metric, const tasks::Dataset& data) {
    model::HardEvaluator eval(p);
    return metric_over(split, metric, data, [&](const tasks::Example& e) {
        return eval.run(e.tokens).label_ids;
    });
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

namespace {

struct Adam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    model::SoftParams m, v;
    int64_t t = 0;

    Adam(const model::SoftParams& p, double lr_)
        : lr(lr_), m(model::zero_like(p)), v(model::zero_like(p)) {}

    void step(model::SoftParams& p, model::SoftParams& g) {
        t++;
        double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        std::vector<std::vector<double>*> ps, gs, ms, vs;
        p.for_each_family([&](const std::string&, std::vector<double>& x) { ps.push_back(&x); });
        g.for_each_family([&](const std::string&, std::vector<double>& x) { gs.push_back(&x); });
        m.for_each_family([&](const std::string&, std::vector<double>& x) { ms.push_back(&x); });
        v.for_each_family([&](const std::string&, std::vector<double>& x) { vs.push_back(&x); });
        for (size_t f = 0; f < ps.size(); ++f)
            for (size_t i = 0; i < ps[f]->size(); ++i) {
                double gi = (*gs[f])[i];
                double& mi = (*ms[f])[i];
                double& vi = (*vs[f])[i];
                mi = beta1 * mi + (1 - beta1) * gi;
                vi = beta2 * vi + (1 - beta2) * gi * gi;
                (*ps[f])[i] -= lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
            }
    }
};

// NaN guard: zero non-finite components, then clip the global norm to 1.
bool sanitize_grads(model::SoftParams& g) {
    bool tripped = false;
    double norm_sq = 0;
    g.for_each_family([&](const std::string&, std::vector<double>& x) {
        for (auto& v : x) {
            if (!std::isfinite(v)) {
                v = 0;
                tripped = true;
            }
            norm_sq += v * v;
        }
    });
    if (!tripped) return false;
    double norm = std::sqrt(norm_sq);
    if (norm > 1.0) {
        double s = 1.0 / norm;
        g.for_each_family([&](const std::string&, std::vector<double>& x) {
            for (auto& v : x) v *= s;
        });
    }
    return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainResult train_model(const TrainConfig& config, const tasks::Dataset& data, uint64_t seed) {
    auto t0 = std::chrono::steady_clock::now();
    if (data.train.empty()) throw InvalidArgument("train_model: empty train split");
    auto arch = make_architecture(config, data);
    model::SoftParams params = model::SoftParams::init(arch, seed);

    TrainResult result;
    result.record.config = config;
    result.record.task = data.task;
    result.record.cardinality = arch.k;
    result.record.seed = seed;

    int n_train = static_cast<int>(data.train.size());
    int batches = (n_train + config.batch_size - 1) / config.batch_size;
    int64_t total_steps = static_cast<int64_t>(config.epochs) * batches;

    Adam adam(params, config.learning_rate);
    model::SoftParams grads = model::zero_like(params);
    Rng shuffle_rng = Rng(seed).fork(0x5u);
    std::vector<int> order(n_train);
    for (int i = 0; i < n_train; ++i) order[i] = i;

    int64_t step = 0;
    bool diverged = false;
    for (int epoch = 0; epoch < config.epochs && !diverged; ++epoch) {
        // Fisher-Yates with the run's own stream.
        for (int i = n_train - 1; i > 0; --i)
            std::swap(order[i],
                      order[static_cast<int>(shuffle_rng.next_below(static_cast<uint64_t>(i) + 1))]);
        double epoch_loss = 0;
        int epoch_batches = 0;
        for (int b = 0; b < batches; ++b) {
            model::Batch batch;
            for (int i = b * config.batch_size; i < std::min((b + 1) * config.batch_size, n_train);
                 ++i) {
                batch.tokens.push_back(&data.train[order[i]].tokens);
                batch.targets.push_back(&data.train[order[i]].targets);
            }
            double tau = total_steps >= 2
                             ? temperature(step, total_steps, config.tau_start, config.tau_end)
                             : config.tau_end;
            double l = model::loss(params, batch, tau, {seed, step, config.samples}, &grads);
            if (!std::isfinite(l)) {
                result.record.failed = true;
                diverged = true;
                break;
            }
            sanitize_grads(grads);
            adam.step(params, grads);
            epoch_loss += l;
            epoch_batches++;
            step++;
        }
        if (epoch_batches > 0) result.record.train_loss.push_back(epoch_loss / epoch_batches);
        if (!diverged && !data.val.empty())
            result.record.val_metric.push_back(
                evaluate_hard(params, data.val, Metric::TokenAccuracy, data));
    }
    result.record.steps = step;
    if (!result.record.val_metric.empty()) result.record.final_val = result.record.val_metric.back();
    if (config.epochs == 0 && !data.val.empty())
        result.record.final_val = evaluate_hard(params, data.val, Metric::TokenAccuracy, data);
    result.params = std::move(params);
    result.record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

GridResult grid_search(const TrainConfig& base, const GridSpec& grid, const tasks::Dataset& data) {
    if (grid.layers.empty() || grid.heads.empty() || grid.mlps.empty())
        throw InvalidArgument("grid_search: empty grid");
    struct Cell {
        TrainConfig config;
        uint64_t seed;
    };
    std::vector<Cell> cells;
    for (int l : grid.layers)
        for (int h : grid.heads)
            for (int m : grid.mlps)
                for (int s = 0; s < base.seeds; ++s) {
                    TrainConfig c = base;
                    c.layers = l;
                    c.heads = h;
                    c.mlps = m;
                    cells.push_back({c, static_cast<uint64_t>(s)});
                }

    std::vector<TrainResult> results(cells.size());
    parallel_for(static_cast<int>(cells.size()), [&](int i) {
        results[i] = train_model(cells[i].config, data, cells[i].seed);
    });

    GridResult out;
    int best = -1;
    for (size_t i = 0; i < results.size(); ++i) {
        out.leaderboard.push_back(results[i].record);
        if (results[i].record.failed) continue;
        if (best < 0 || results[i].record.final_val > results[best].record.final_val)
            best = static_cast<int>(i);
    }
    if (best < 0) throw std::runtime_error("grid_search: all runs failed");
    std::stable_sort(out.leaderboard.begin(), out.leaderboard.end(),
                     [](const RunRecord& a, const RunRecord& b) {
                         if (a.failed != b.failed) return !a.failed;
                         return a.final_val > b.final_val;
                     });
    out.best = results[best].record;
    out.best_params = std::move(results[best].params);
    // The one and only test evaluation, on the discretized program.
    if (!data.test.empty())
        out.best.final_test =
            evaluate_program(model::discretize(out.best_params), data, "test",
                             Metric::TokenAccuracy);
    return out;
}

GridResult train_best_of_seeds(const TrainConfig& config, const tasks::Dataset& data) {
    GridSpec single;
    single.layers = {config.layers};
    single.heads = {config.heads};
    single.mlps = {config.mlps};
    return grid_search(config, single, data);
}

}  // namespace tprog::train
