// Command-line surface: data generation, training, extraction, verification,
// evaluation and reporting, each writing a replayable run manifest.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

#include "tp/extract.hpp"
#include "tp/interp.hpp"
#include "tp/ir.hpp"
#include "tp/model.hpp"
#include "tp/tasks.hpp"
#include "tp/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tprog;

namespace {

constexpr const char* kVersion = "tprog 0.1.0";

// Exit codes: 0 success, 1 semantic failure (mismatch / metric gate),
// 2 usage or I/O error.
struct SemanticFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Manifest {
    std::string command;
    json config;
    std::vector<uint64_t> seeds;
    std::vector<std::string> artifacts;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void write(const std::string& out_dir) {
        json j;
        j["command"] = command;
        j["config"] = config;
        j["seeds"] = seeds;
        j["artifacts"] = artifacts;
        j["tool_version"] = kVersion;
        j["wall_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_text_file(out_dir + "/manifest.json", j.dump(2) + "\n");
    }
};

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

json train_config_json(const train::TrainConfig& c) {
    return json{{"epochs", c.epochs},       {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate}, {"tau_start", c.tau_start},
                {"tau_end", c.tau_end},     {"samples", c.samples},
                {"seeds", c.seeds},         {"layers", c.layers},
                {"heads", c.heads},         {"mlps", c.mlps},
                {"numerical_split", c.numerical_split}, {"mlp_hidden", c.mlp_hidden}};
}

// Config files fully default; unknown keys are an error so typos surface.
void apply_config_file(train::TrainConfig& c, const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ParseError("config parse error: " + std::string(e.what()));
    }
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "tau_start") c.tau_start = value.get<double>();
        else if (key == "tau_end") c.tau_end = value.get<double>();
        else if (key == "samples") c.samples = value.get<int>();
        else if (key == "seeds") c.seeds = value.get<int>();
        else if (key == "layers") c.layers = value.get<int>();
        else if (key == "heads") c.heads = value.get<int>();
        else if (key == "mlps") c.mlps = value.get<int>();
        else if (key == "numerical_split") c.numerical_split = value.get<std::string>();
        else if (key == "mlp_hidden") c.mlp_hidden = value.get<int>();
        else throw ParseError("unknown config key '" + key + "'");
    }
}

// --- gen --------------------------------------------------------------------

int cmd_gen(const std::string& task, int vocab, int len, int n, uint64_t seed,
            const std::string& out_dir) {
    ensure_dir(out_dir);
    Manifest man;
    man.command = "gen";
    man.seeds = {seed};
    tasks::Dataset data;
    if (task == "icl") {
        data = tasks::gen_icl(n, len, seed);
    } else {
        tasks::TaskSpec spec;
        spec.name = task;
        spec.vocab_size = vocab;
        spec.max_len = len;
        spec.n_samples = n;
        spec.n_val = n / 10;
        spec.n_test = n / 10;
        spec.seed = seed;
        data = tasks::gen_rasp(spec);
    }
    tasks::save_dataset(data, out_dir);
    int k = model::shared_cardinality(static_cast<int>(data.vocab.size()), data.max_positions);
    man.config = json{{"task", task},       {"vocab", vocab}, {"len", len},
                      {"n", n},             {"seed", seed},   {"cardinality", k},
                      {"max_positions", data.max_positions}};
    man.artifacts = {out_dir + "/meta.json", out_dir + "/train.tsv", out_dir + "/val.tsv",
                     out_dir + "/test.tsv"};
    man.write(out_dir);
    std::cout << "wrote " << data.train.size() << "/" << data.val.size() << "/"
              << data.test.size() << " examples to " << out_dir << " (cardinality " << k << ")\n";
    return 0;
}

// --- train ------------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              train::TrainConfig config, bool grid, const std::string& out_prefix) {
    ensure_dir(out_dir);
    Manifest man;
    man.command = "train";
    auto data = tasks::load_dataset(data_dir);
    for (int s = 0; s < config.seeds; ++s) man.seeds.push_back(s);

    train::GridResult result;
    if (grid) {
        result = train::grid_search(config, train::GridSpec{}, data);
    } else {
        result = train::train_best_of_seeds(config, data);
    }

    std::string runs_path = out_dir + "/runs.jsonl";
    std::string ledger;
    for (const auto& r : result.leaderboard) ledger += train::run_record_json(r) + "\n";
    write_text_file(runs_path, ledger);

    std::string board_path = out_dir + "/leaderboard.csv";
    std::string board = "task,k,layers,heads,mlps,seed,val,test,failed\n";
    for (const auto& r : result.leaderboard) {
        board += r.task + "," + std::to_string(r.cardinality) + "," +
                 std::to_string(r.config.layers) + "," + std::to_string(r.config.heads) + "," +
                 std::to_string(r.config.mlps) + "," + std::to_string(r.seed) + "," +
                 std::to_string(r.final_val) + "," +
                 (std::isnan(r.final_test) ? "" : std::to_string(r.final_test)) + "," +
                 (r.failed ? "1" : "0") + "\n";
    }
    write_text_file(board_path, board);

    std::string ckpt_path = out_dir + "/" + out_prefix + "checkpoint.json";
    model::Checkpoint ckpt;
    ckpt.params = result.best_params;
    ckpt.master_seed = result.best.seed;
    ckpt.step = result.best.steps;
    model::save_checkpoint(ckpt, ckpt_path);

    man.config = train_config_json(config);
    man.config["data"] = data_dir;
    man.config["grid"] = grid;
    man.artifacts = {runs_path, board_path, ckpt_path};
    man.write(out_dir);
    std::cout << "best run: seed " << result.best.seed << " shape (" << result.best.config.layers
              << "," << result.best.config.heads << "," << result.best.config.mlps
              << ") val " << result.best.final_val << " test " << result.best.final_test << "\n";
    return 0;
}

// --- extract ----------------------------------------------------------------

int cmd_extract(const std::string& ckpt_path, const std::string& out_dir, bool no_compress,
                const std::string& dialect, std::string stem) {
    ensure_dir(out_dir);
    Manifest man;
    man.command = "extract";
    auto ckpt = model::load_checkpoint(ckpt_path);
    if (stem.empty()) stem = "program";

    ir::Program program = model::discretize(ckpt.params);
    ir::require_valid(program, "extract");

    extract::EmissionOptions opts;
    if (no_compress) opts = extract::EmissionOptions::none();
    opts.dialect = dialect;
    opts.weights_file = stem + "_classifier_weights.csv";

    ir::Program emitted = extract::apply_passes(program, opts);
    std::string prog_path = out_dir + "/" + stem + ".tp.json";
    ir::save_program(program, prog_path);
    std::string src_path = out_dir + "/" + stem + (dialect == "py3" ? ".py" : ".txt");
    write_text_file(src_path, extract::emit_source(emitted, opts));
    std::string weights_path = out_dir + "/" + opts.weights_file;
    write_text_file(weights_path, extract::classifier_weights_csv(emitted));

    auto stats = extract::program_stats_with_lines(program);
    std::string stats_path = out_dir + "/" + stem + "_stats.csv";
    write_text_file(stats_path, "task,lines_full,lines_pruned\n" + stem + "," +
                                    std::to_string(stats.line_count_full) + "," +
                                    std::to_string(stats.line_count_pruned) + "\n");

    man.config = json{{"checkpoint", ckpt_path},
                      {"dialect", dialect},
                      {"compress", !no_compress},
                      {"stem", stem}};
    man.artifacts = {prog_path, src_path, weights_path, stats_path};
    man.write(out_dir);
    std::cout << "extracted " << prog_path << " (" << stats.line_count_full << " lines full, "
              << stats.line_count_pruned << " pruned)\n";
    return 0;
}

// --- verify -----------------------------------------------------------------

int cmd_verify(const std::string& ckpt_path, const std::string& prog_path,
               const std::string& data_dir, const std::string& split) {
    auto ckpt = model::load_checkpoint(ckpt_path);
    auto program = ir::load_program(prog_path);
    auto data = tasks::load_dataset(data_dir);
    auto report = extract::verify_equivalence(ckpt.params, program, data.split(split));
    std::cout << "match_rate " << report.match_rate << " over " << report.positions
              << " positions\n";
    if (!report.passed) {
        std::cout << "first_mismatch: example " << report.first_mismatch.example << " position "
                  << report.first_mismatch.position << " model="
                  << report.first_mismatch.model_label
                  << " program=" << report.first_mismatch.program_label << "\n";
        throw SemanticFailure("model and program disagree");
    }
    return 0;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const std::string& prog_path, const std::string& data_dir, const std::string& split,
             const std::string& metric_name, double min_metric) {
    auto program = ir::load_program(prog_path);
    auto data = tasks::load_dataset(data_dir);
    auto metric = train::metric_from_string(metric_name);
    double value = train::evaluate_program(program, data, split, metric);

    // Per-class accuracy breakdown.
    std::map<int, std::pair<int64_t, int64_t>> per_class;  // class -> (correct, total)
    for (const auto& e : data.split(split)) {
        auto pred = interp::run_program_ids(program, e.tokens);
        for (size_t i = 0; i < e.targets.size(); ++i) {
            if (e.targets[i] < 0) continue;
            auto& [correct, total] = per_class[e.targets[i]];
            total++;
            if (i < pred.size() && pred[i] == e.targets[i]) correct++;
        }
    }
    std::cout << metric_name << " " << value << "\n";
    for (const auto& [cls, counts] : per_class)
        std::cout << "class " << data.classes[cls] << ": " << counts.first << "/" << counts.second
                  << "\n";
    if (value < min_metric) throw SemanticFailure("metric below threshold");
    return 0;
}

// --- stats / report -----------------------------------------------------------

int cmd_stats(const std::string& prog_path, const std::string& out_csv, std::string task) {
    auto program = ir::load_program(prog_path);
    auto stats = extract::program_stats_with_lines(program);
    if (task.empty()) task = fs::path(prog_path).stem().stem().string();
    std::string csv = "task,lines_full,lines_pruned\n" + task + "," +
                      std::to_string(stats.line_count_full) + "," +
                      std::to_string(stats.line_count_pruned) + "\n";
    if (!out_csv.empty())
        write_text_file(out_csv, csv);
    else
        std::cout << csv;
    for (size_t l = 0; l < stats.reads_by_layer.size(); ++l)
        for (const auto& [role, classes] : stats.reads_by_layer[l].by_role)
            for (const auto& [cls, frac] : classes)
                std::cout << "layer " << l << " " << role << " " << cls << " " << frac << "\n";
    return 0;
}

int cmd_report(const std::string& runs_path, const std::string& out_csv) {
    std::string csv = "Dataset,k,L,H,M,Acc\n";
    std::string text = read_text_file(runs_path);
    std::istringstream ss(text);
    std::string line;
    // Best record per task by validation metric; report its test accuracy.
    std::map<std::string, json> best;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        std::string task = j.value("task", "?");
        if (!best.count(task) || j.value("final_val", 0.0) > best[task].value("final_val", 0.0))
            best[task] = j;
    }
    for (const auto& [task, j] : best) {
        double acc = j.contains("final_test") ? j["final_test"].get<double>()
                                              : j.value("final_val", 0.0);
        csv += task + "," + std::to_string(j.value("cardinality", 0)) + "," +
               std::to_string(j["config"].value("layers", 0)) + "," +
               std::to_string(j["config"].value("heads", 0)) + "," +
               std::to_string(j["config"].value("mlps", 0)) + "," + std::to_string(acc) + "\n";
    }
    if (!out_csv.empty())
        write_text_file(out_csv, csv);
    else
        std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train gated sequence models and decompile them into discrete programs"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Generate a task dataset");
    std::string g_task, g_out = "out";
    int g_vocab = 8, g_len = 8, g_n = 20000;
    uint64_t g_seed = 0;
    gen->add_option("--task", g_task, "icl|reverse|hist|hist2|sort|most_freq|dyck1|dyck2")
        ->required();
    gen->add_option("--vocab", g_vocab, "content vocabulary size");
    gen->add_option("--len", g_len, "max content length (dyck: total window)");
    gen->add_option("--n", g_n, "number of samples");
    gen->add_option("--seed", g_seed);
    gen->add_option("--out", g_out)->required();

    // train
    auto* tr = app.add_subcommand("train", "Train on a generated dataset");
    std::string t_data, t_out = "out", t_config, t_profile = "paper", t_prefix;
    bool t_grid = false;
    train::TrainConfig tc;
    int t_epochs = -1, t_batch = -1, t_seeds = -1, t_layers = -1, t_heads = -1, t_mlps = -1;
    double t_lr = -1;
    std::string t_numerical;
    tr->add_option("--data", t_data)->required();
    tr->add_option("--out", t_out)->required();
    tr->add_option("--config", t_config, "JSON config file (flags override)");
    tr->add_option("--profile", t_profile, "paper|desk");
    tr->add_flag("--grid", t_grid, "full layers/heads/mlps grid search");
    tr->add_option("--epochs", t_epochs);
    tr->add_option("--batch", t_batch);
    tr->add_option("--lr", t_lr);
    tr->add_option("--seeds", t_seeds);
    tr->add_option("--layers", t_layers);
    tr->add_option("--heads", t_heads);
    tr->add_option("--mlps", t_mlps);
    tr->add_option("--numerical", t_numerical, "even|none");
    tr->add_option("--prefix", t_prefix, "checkpoint filename prefix");

    // extract
    auto* ex = app.add_subcommand("extract", "Discretize a checkpoint and emit source");
    std::string e_ckpt, e_out = "out", e_dialect = "py3", e_stem;
    bool e_nocompress = false;
    ex->add_option("--checkpoint", e_ckpt)->required();
    ex->add_option("--out", e_out)->required();
    ex->add_flag("--no-compress", e_nocompress);
    ex->add_option("--dialect", e_dialect, "py3|pseudo");
    ex->add_option("--stem", e_stem, "artifact file stem");

    // verify
    auto* ve = app.add_subcommand("verify", "Check model/program equivalence");
    std::string v_ckpt, v_prog, v_data, v_split = "test";
    ve->add_option("--checkpoint", v_ckpt)->required();
    ve->add_option("--program", v_prog)->required();
    ve->add_option("--data", v_data)->required();
    ve->add_option("--split", v_split);

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a program on a dataset split");
    std::string ee_prog, ee_data, ee_split = "test", ee_metric = "token-accuracy";
    double ee_min = -1.0;
    ev->add_option("--program", ee_prog)->required();
    ev->add_option("--data", ee_data)->required();
    ev->add_option("--split", ee_split);
    ev->add_option("--metric", ee_metric, "token-accuracy|span-f1");
    ev->add_option("--min", ee_min, "exit 1 if the metric falls below this");

    // stats
    auto* st = app.add_subcommand("stats", "Program statistics (line counts, reads)");
    std::string s_prog, s_out, s_task;
    st->add_option("--program", s_prog)->required();
    st->add_option("--out", s_out, "CSV output path");
    st->add_option("--task", s_task);

    // report
    auto* re = app.add_subcommand("report", "Summarize a run ledger into a CSV");
    std::string r_runs, r_out;
    re->add_option("--runs", r_runs)->required();
    re->add_option("--out", r_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_gen(g_task, g_vocab, g_len, g_n, g_seed, g_out);
        if (*tr) {
            if (t_profile == "desk") tc = train::TrainConfig::desk();
            else if (t_profile != "paper") throw InvalidArgument("unknown profile " + t_profile);
            if (!t_config.empty()) apply_config_file(tc, t_config);
            if (t_epochs >= 0) tc.epochs = t_epochs;
            if (t_batch > 0) tc.batch_size = t_batch;
            if (t_lr > 0) tc.learning_rate = t_lr;
            if (t_seeds > 0) tc.seeds = t_seeds;
            if (t_layers > 0) tc.layers = t_layers;
            if (t_heads >= 0) tc.heads = t_heads;
            if (t_mlps >= 0) tc.mlps = t_mlps;
            if (!t_numerical.empty()) tc.numerical_split = t_numerical;
            return cmd_train(t_data, t_out, tc, t_grid, t_prefix);
        }
        if (*ex) return cmd_extract(e_ckpt, e_out, e_nocompress, e_dialect, e_stem);
        if (*ve) return cmd_verify(v_ckpt, v_prog, v_data, v_split);
        if (*ev) return cmd_eval(ee_prog, ee_data, ee_split, ee_metric, ee_min);
        if (*st) return cmd_stats(s_prog, s_out, s_task);
        if (*re) return cmd_report(r_runs, r_out);
    } catch (const SemanticFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
