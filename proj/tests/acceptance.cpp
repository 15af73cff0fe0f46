// Acceptance suite: one pass/fail line per criterion, exit 0 iff all pass.
//
//   1  in-context recall reproduction (best of 5 seeds, >= 99.5% token acc)
//   2  histogram reproduction (>= 99.0%)
//   3  reverse and dyck1 at reduced compute (>= 95.0% each)
//   4  exact model<->program equivalence on every trained checkpoint
//   5  hard-attention semantics vs the literal score-formula oracle
//   6  finite-difference gradient check per parameter family
//   7  compression passes preserve semantics
//   8  bound safety and simplex conservation under fuzzing
//   9  categorical-only ablation trains on sort (>= 95.0%)

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <vector>

#include "../tests/helpers.hpp"
#include "tp/extract.hpp"
#include "tp/interp.hpp"
#include "tp/model.hpp"
#include "tp/tasks.hpp"
#include "tp/train.hpp"

using namespace tprog;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int criterion;
    std::string description;
    bool passed;
    double seconds;
};

std::vector<Outcome> g_outcomes;
std::string g_out_dir = "acceptance_runs";

template <typename Fn>
void criterion(int id, const std::string& description, const std::set<int>& enabled, Fn&& fn) {
    if (!enabled.empty() && !enabled.count(id)) return;
    auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    std::string detail;
    try {
        detail = fn();
        ok = true;
    } catch (const std::exception& e) {
        detail = e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    g_outcomes.push_back({id, description, ok, secs});
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << description << " — "
              << detail << " (" << static_cast<int>(secs) << "s)\n"
              << std::flush;
}

struct Check {
    static void require(bool cond, const std::string& msg) {
        if (!cond) throw std::runtime_error(msg);
    }
};

// One training criterion: best of `seeds` runs at a fixed shape, selection by
// validation accuracy, reported metric from the discretized program on test.
struct TrainedTask {
    std::string name;
    tasks::Dataset data;
    tasks::Dataset verify_data;  // dedicated 2000-sequence split for criterion 4
    std::vector<model::SoftParams> all_params;
    double best_test = 0.0;
    int best_index = -1;
};

TrainedTask run_task(const std::string& task_name, const tasks::Dataset& data,
                     const tasks::Dataset& verify_data, train::TrainConfig config) {
    TrainedTask out;
    out.name = task_name;
    out.data = data;
    out.verify_data = verify_data;
    std::vector<train::TrainResult> results(config.seeds);
    parallel_for(config.seeds, [&](int s) {
        results[s] = train::train_model(config, data, static_cast<uint64_t>(s));
    });
    int best = -1;
    for (int s = 0; s < config.seeds; ++s) {
        if (results[s].record.failed) continue;
        if (best < 0 || results[s].record.final_val > results[best].record.final_val) best = s;
    }
    Check::require(best >= 0, task_name + ": all runs failed");
    for (auto& r : results) out.all_params.push_back(std::move(r.params));
    out.best_index = best;
    out.best_test = train::evaluate_program(model::discretize(out.all_params[best]), data, "test",
                                            train::Metric::TokenAccuracy);
    // Persist the winning checkpoint for inspection.
    fs::create_directories(g_out_dir);
    model::Checkpoint ckpt;
    ckpt.params = out.all_params[best];
    ckpt.master_seed = best;
    model::save_checkpoint(ckpt, g_out_dir + "/" + task_name + "_checkpoint.json");
    ir::save_program(model::discretize(out.all_params[best]),
                     g_out_dir + "/" + task_name + ".tp.json");
    return out;
}

std::string pct(double v) {
    char buf[32];
    snprintf(buf, sizeof(buf), "%.2f%%", v * 100.0);
    return buf;
}

tasks::Dataset gen_rasp_quick(const std::string& name, int vocab, int len, int n, uint64_t seed) {
    tasks::TaskSpec spec;
    spec.name = name;
    spec.vocab_size = vocab;
    spec.max_len = len;
    spec.n_samples = n;
    spec.n_val = n / 10;
    spec.n_test = n / 10;
    spec.seed = seed;
    return tasks::gen_rasp(spec);
}

std::vector<TrainedTask> g_trained;  // collected for criterion 4

}  // namespace

int main(int argc, char** argv) {
    std::set<int> enabled;
    for (int i = 1; i < argc; ++i) {
        if (!std::strcmp(argv[i], "--out") && i + 1 < argc) g_out_dir = argv[++i];
        if (!std::strcmp(argv[i], "--criteria") && i + 1 < argc) {
            std::string list = argv[++i];
            for (size_t pos = 0; pos < list.size();) {
                size_t comma = list.find(',', pos);
                if (comma == std::string::npos) comma = list.size();
                enabled.insert(std::atoi(list.substr(pos, comma - pos).c_str()));
                pos = comma + 1;
            }
        }
    }
    fs::create_directories(g_out_dir);

    // --- criterion 1: in-context recall ------------------------------------
    criterion(1, "in-context recall, 2 layers x 1 head, k=10, best of 5 >= 99.5%", enabled, [&] {
        auto data = tasks::gen_icl(5000, 10, 0);
        auto verify = tasks::gen_icl(2000, 10, 999);
        train::TrainConfig c = train::TrainConfig::desk();
        c.layers = 2;
        c.heads = 1;
        c.mlps = 0;
        c.numerical_split = "none";
        auto t = run_task("icl", data, verify, c);
        g_trained.push_back(t);
        Check::require(t.best_test >= 0.995, "best test accuracy " + pct(t.best_test));
        return "test accuracy " + pct(t.best_test);
    });

    // --- criterion 2: histogram --------------------------------------------
    criterion(2, "histogram |V|=8 N=8, 2 cat + 2 num heads, best of 5 >= 99.0%", enabled, [&] {
        auto data = gen_rasp_quick("hist", 8, 8, 5000, 0);
        auto verify = gen_rasp_quick("hist", 8, 8, 2000, 999);
        train::TrainConfig c = train::TrainConfig::desk();
        c.layers = 1;
        c.heads = 4;
        c.mlps = 2;
        c.numerical_split = "even";
        auto t = run_task("hist", data, verify, c);
        g_trained.push_back(t);
        Check::require(t.best_test >= 0.99, "best test accuracy " + pct(t.best_test));
        return "test accuracy " + pct(t.best_test);
    });

    // --- criterion 3: reverse and dyck1 ------------------------------------
    criterion(3, "reverse and dyck1 at (3,8,2), best of 5 >= 95.0%", enabled, [&] {
        auto rev_data = gen_rasp_quick("reverse", 8, 8, 5000, 0);
        auto rev_verify = gen_rasp_quick("reverse", 8, 8, 2000, 999);
        train::TrainConfig c = train::TrainConfig::desk();
        c.layers = 3;
        c.heads = 8;
        c.mlps = 2;
        c.numerical_split = "even";
        auto rev = run_task("reverse", rev_data, rev_verify, c);
        g_trained.push_back(rev);

        auto dyck_data = gen_rasp_quick("dyck1", 2, 16, 5000, 0);
        auto dyck_verify = gen_rasp_quick("dyck1", 2, 16, 2000, 999);
        auto dy = run_task("dyck1", dyck_data, dyck_verify, c);
        g_trained.push_back(dy);
        Check::require(rev.best_test >= 0.95, "reverse test accuracy " + pct(rev.best_test));
        Check::require(dy.best_test >= 0.95, "dyck1 test accuracy " + pct(dy.best_test));
        return "reverse " + pct(rev.best_test) + ", dyck1 " + pct(dy.best_test);
    });

    // --- criterion 9: categorical-only ablation ------------------------------
    criterion(9, "categorical-only sort (no numerical modules) >= 95.0%", enabled, [&] {
        auto data = gen_rasp_quick("sort", 8, 8, 5000, 0);
        auto verify = gen_rasp_quick("sort", 8, 8, 2000, 999);
        train::TrainConfig c = train::TrainConfig::desk();
        c.layers = 3;
        c.heads = 2;
        c.mlps = 2;
        c.numerical_split = "none";
        auto t = run_task("sort_nonum", data, verify, c);
        model::Architecture arch = train::make_architecture(c, data);
        Check::require(!arch.any_numerical(), "ablation built numerical modules");
        g_trained.push_back(t);
        Check::require(t.best_test >= 0.95, "best test accuracy " + pct(t.best_test));
        return "test accuracy " + pct(t.best_test);
    });

    // --- criterion 4: exact equivalence --------------------------------------
    criterion(4, "model hard-eval == extracted program on 2000 sequences (every checkpoint)",
              enabled, [&] {
                  Check::require(!g_trained.empty(), "no trained checkpoints (criteria 1-3 off?)");
                  int64_t checked = 0;
                  for (const auto& t : g_trained) {
                      for (const auto& params : t.all_params) {
                          auto program = model::discretize(params);
                          ir::require_valid(program, t.name);
                          auto report =
                              extract::verify_equivalence(params, program, t.verify_data.test.empty()
                                                                                ? t.verify_data.train
                                                                                : t.verify_data.test);
                          // also run against the compressed form
                          extract::EmissionOptions opts;
                          auto compressed = extract::apply_passes(program, opts);
                          auto report2 = extract::verify_equivalence(
                              params, compressed,
                              t.verify_data.test.empty() ? t.verify_data.train
                                                         : t.verify_data.test);
                          Check::require(report.passed && report2.passed,
                                         t.name + ": match rate " +
                                             std::to_string(report.match_rate) + " / " +
                                             std::to_string(report2.match_rate));
                          checked++;
                      }
                  }
                  return std::to_string(checked) + " checkpoints exactly equivalent";
              });

    // --- criterion 5: attention semantics oracle ------------------------------
    criterion(5, "select_closest == literal score-formula oracle (exhaustive + randomized)",
              enabled, [&] {
                  Rng rng(20240817);
                  int64_t checked = 0;
                  for (int trial = 0; trial < 200; ++trial) {
                      std::vector<int> mapping(4);
                      for (auto& m : mapping) m = static_cast<int>(rng.next_below(4));
                      bool causal = rng.next_bool();
                      int max_len = 6 + static_cast<int>(rng.next_below(11));
                      for (int n = 1; n <= 6; ++n) {
                          int64_t total = 1;
                          for (int i = 0; i < n; ++i) total *= 4;
                          for (int64_t code = 0; code < total; ++code) {
                              std::vector<int> keys(n);
                              int64_t c = code;
                              for (int i = 0; i < n; ++i) {
                                  keys[i] = c % 4;
                                  c /= 4;
                              }
                              std::vector<int> queries = keys;
                              if (trial % 2 == 0)
                                  for (auto& q : queries)
                                      q = static_cast<int>(rng.next_below(4));
                              ir::Predicate pred;
                              pred.mapping = mapping;
                              auto got =
                                  interp::select_closest(keys, queries, pred, causal, max_len);
                              auto want = tptest::select_closest_oracle(keys, queries, mapping,
                                                                        causal, max_len);
                              Check::require(got == want, "disagreement found");
                              checked += n;
                          }
                      }
                  }
                  return std::to_string(checked) + " positions agree";
              });

    // --- criterion 6: gradient correctness -------------------------------------
    criterion(6, "finite differences vs analytic gradients, 50 coords per family", enabled, [&] {
        model::Architecture arch;
        arch.layers = 2;
        arch.cat_heads = 1;
        arch.num_heads = 1;
        arch.cat_mlps = 1;
        arch.num_mlps = 1;
        arch.k = 6;
        arch.max_len = 6;
        arch.mlp_hidden = 8;
        arch.causal = true;
        arch.embedding = model::EmbeddingKind::Factored;
        arch.embed_vars = 2;
        arch.vocab = {"<pad>", "<s>", "a", "b", "c", "d"};
        arch.classes = {"a", "b", "c"};
        auto params = model::SoftParams::init(arch, 5);
        std::vector<std::vector<int>> toks = {{1, 2, 3, 4, 2}, {1, 5, 4}};
        std::vector<std::vector<int>> targets = {{-1, 0, 1, 2, 1}, {-1, 2, 0}};
        model::Batch batch;
        for (size_t i = 0; i < toks.size(); ++i) {
            batch.tokens.push_back(&toks[i]);
            batch.targets.push_back(&targets[i]);
        }
        model::NoiseSpec spec{21, 3, 1, 0, {}};
        double tau = 1.0, h = 1e-4;
        model::SoftParams grads = model::zero_like(params);
        model::loss(params, batch, tau, spec, &grads);
        std::vector<std::pair<std::string, std::vector<double>*>> pv, gv;
        params.for_each_family(
            [&](const std::string& f, std::vector<double>& v) { pv.push_back({f, &v}); });
        grads.for_each_family(
            [&](const std::string& f, std::vector<double>& v) { gv.push_back({f, &v}); });
        std::map<std::string, int> counts;
        double worst = 0;
        Rng rng(4242);
        for (size_t f = 0; f < pv.size(); ++f) {
            auto& [family, vec] = pv[f];
            if (vec->empty()) continue;
            // spread the 50-per-family budget over this family's tensors
            int per_tensor = 4;
            if (family == "gate") per_tensor = 3;
            if (family == "predicate") per_tensor = 13;
            if (family == "embedding" || family == "classifier") per_tensor = 50;
            for (int c = 0; c < per_tensor; ++c) {
                size_t i = rng.next_below(vec->size());
                double keep = (*vec)[i];
                (*vec)[i] = keep + h;
                double up = model::loss(params, batch, tau, spec);
                (*vec)[i] = keep - h;
                double down = model::loss(params, batch, tau, spec);
                (*vec)[i] = keep;
                double fd = (up - down) / (2 * h);
                double an = (*gv[f].second)[i];
                double err = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-6});
                worst = std::max(worst, err);
                Check::require(err < 1e-3, family + " coordinate rel err " + std::to_string(err));
                counts[family]++;
            }
        }
        for (const char* fam : {"gate", "predicate", "mlp_dense", "embedding", "classifier"})
            Check::require(counts[fam] >= 50, std::string(fam) + " family under-sampled (" +
                                                  std::to_string(counts[fam]) + ")");
        return "worst relative error " + std::to_string(worst);
    });

    // --- criterion 7: compression soundness -------------------------------------
    criterion(7, "compression passes preserve semantics on 50 random programs", enabled, [&] {
        Rng rng(7777);
        for (int trial = 0; trial < 50; ++trial) {
            auto p = tptest::random_program(rng);
            Check::require(ir::validate_program(p).empty(), "generator produced invalid program");
            auto grouped = extract::compress_predicates(p);
            // exhaustive: every query agrees with the branch lookup
            for (size_t l = 0; l < p.layers.size(); ++l)
                for (size_t h = 0; h < p.layers[l].cat_heads.size(); ++h) {
                    const auto& orig = p.layers[l].cat_heads[h].predicate;
                    for (size_t q = 0; q < orig.mapping.size(); ++q) {
                        int found = -1;
                        for (const auto& br : grouped.layers[l].cat_heads[h].predicate.branches)
                            for (int bq : br.queries)
                                if (bq == static_cast<int>(q)) found = br.key;
                        Check::require(found == orig.mapping[q], "predicate branch mismatch");
                    }
                }
            auto folded = extract::compress_mlps(p);
            // exhaustive over the full input domain of every MLP
            for (size_t l = 0; l < p.layers.size(); ++l)
                for (size_t m = 0; m < p.layers[l].mlps.size(); ++m) {
                    const auto& orig = p.layers[l].mlps[m];
                    const auto& comp = folded.layers[l].mlps[m];
                    std::vector<int64_t> widths;
                    for (const auto& name : orig.input_vars) {
                        const auto* v = p.find_var(name);
                        widths.push_back(v->is_categorical() ? v->cardinality
                                                             : v->cardinality + 1);
                    }
                    for (int64_t a = 0; a < widths[0]; ++a)
                        for (int64_t b = 0; b < widths[1]; ++b) {
                            auto it = orig.table.find({static_cast<int>(a), static_cast<int>(b)});
                            int want = it != orig.table.end() ? it->second : orig.default_value;
                            int got;
                            if (comp.input_vars.size() == 1) {
                                if (a != b) continue;  // collapsed: only the diagonal is reachable
                                auto jt = comp.table.find({static_cast<int>(a)});
                                got = jt != comp.table.end() ? jt->second : comp.default_value;
                            } else {
                                auto jt =
                                    comp.table.find({static_cast<int>(a), static_cast<int>(b)});
                                got = jt != comp.table.end() ? jt->second : comp.default_value;
                            }
                            Check::require(got == want, "mlp fold mismatch");
                        }
                }
            // pruning: identical labels over a full split of random sequences
            auto pruned = extract::prune_dead(p);
            Check::require(ir::validate_program(pruned).empty(), "pruned program invalid");
            for (int x = 0; x < 40; ++x) {
                auto tokens = tptest::random_sequence(rng, p);
                Check::require(interp::run_program_ids(p, tokens) ==
                                   interp::run_program_ids(pruned, tokens),
                               "pruning changed outputs");
                Check::require(interp::run_program_ids(p, tokens) ==
                                   interp::run_program_ids(grouped, tokens),
                               "grouping changed outputs");
                Check::require(interp::run_program_ids(p, tokens) ==
                                   interp::run_program_ids(folded, tokens),
                               "folding changed outputs");
            }
        }
        return "50 programs, all passes semantics-preserving";
    });

    // --- criterion 8: bound safety and simplex conservation -----------------------
    criterion(8, "fuzz: numerical bounds hold, soft states sum to 1 +/- 1e-5", enabled, [&] {
        Rng rng(31415);
        int64_t interp_runs = 0, simplex_rows = 0;
        for (int trial = 0; trial < 10000; ++trial) {
            auto p = tptest::random_program(rng);
            auto tokens = tptest::random_sequence(rng, p);
            std::vector<std::string> token_strs;
            for (int id : tokens) token_strs.push_back(p.vocab[id]);
            auto result = interp::run_program(p, token_strs);
            // bound safety is asserted inside the evaluator; re-check the trace
            for (const auto& [name, values] : result.trace.num_values) {
                const auto* decl = p.find_var(name);
                for (auto v : values)
                    Check::require(v >= 0 && v <= decl->cardinality,
                                   "bound violated for " + name);
            }
            interp_runs++;
        }
        for (int trial = 0; trial < 300; ++trial) {
            model::Architecture arch;
            arch.layers = 1 + static_cast<int>(rng.next_below(2));
            arch.cat_heads = 1 + static_cast<int>(rng.next_below(2));
            arch.num_heads = static_cast<int>(rng.next_below(2));
            arch.cat_mlps = static_cast<int>(rng.next_below(2));
            arch.num_mlps = arch.num_heads > 0 ? static_cast<int>(rng.next_below(2)) : 0;
            arch.k = 6;
            arch.max_len = 6;
            arch.mlp_hidden = 8;
            arch.causal = rng.next_bool();
            arch.vocab = {"<pad>", "<s>", "a", "b", "c", "d"};
            arch.classes = {"x", "y"};
            auto params = model::SoftParams::init(arch, rng.next_u64());
            std::vector<int> tokens = {1};
            int n = 2 + static_cast<int>(rng.next_below(4));
            for (int i = 1; i < n; ++i)
                tokens.push_back(static_cast<int>(rng.next_below(arch.vocab.size())));
            double tau = 0.05 + rng.next_unit() * 3.0;
            Rng theta_rng(rng.next_u64());
            auto theta = model::sample_theta(params, tau, theta_rng);
            Rng fwd(rng.next_u64());
            auto trace =
                model::forward_soft(params, theta, tokens, tau, model::SoftMode::Train, &fwd);
            for (const auto& [name, rows] : trace.cat_states)
                for (const auto& row : rows) {
                    double sum = 0;
                    for (double x : row) sum += x;
                    Check::require(std::fabs(sum - 1.0) <= 1e-5, "state simplex violated");
                    simplex_rows++;
                }
            for (const auto& [name, rows] : trace.attn_rows)
                for (const auto& row : rows) {
                    double sum = 0;
                    for (double x : row) sum += x;
                    Check::require(std::fabs(sum - 1.0) <= 1e-5, "attention simplex violated");
                    simplex_rows++;
                }
        }
        Check::require(simplex_rows >= 10000, "not enough simplex rows fuzzed");
        return std::to_string(interp_runs) + " program runs, " + std::to_string(simplex_rows) +
               " simplex rows";
    });

    int failed = 0;
    for (const auto& o : g_outcomes)
        if (!o.passed) failed++;
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria FAILED")
              << "\n";
    return failed == 0 ? 0 : 1;
}
