#include "tp/extract.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "tp/interp.hpp"

namespace tprog::extract {

// ---------------------------------------------------------------------------
// Passes
// ---------------------------------------------------------------------------

namespace {

void fill_branches(ir::Predicate& pred) {
    std::map<int, std::vector<int>> by_key;
    for (size_t q = 0; q < pred.mapping.size(); ++q)
        by_key[pred.mapping[q]].push_back(static_cast<int>(q));
    std::vector<ir::PredicateBranch> branches;
    for (auto& [key, queries] : by_key) branches.push_back({std::move(queries), key});
    // Stable order for diffs: ascending minimum query value.
    std::sort(branches.begin(), branches.end(),
              [](const auto& a, const auto& b) { return a.queries.front() < b.queries.front(); });
    pred.branches = std::move(branches);
}

// Input domain width per slot: k for categorical, bound+1 for numerical.
std::vector<int64_t> mlp_domain(const ir::Program& p, const ir::LookupMlpSpec& m) {
    std::vector<int64_t> widths;
    for (const auto& name : m.input_vars) {
        const auto* v = p.find_var(name);
        if (!v) throw InvalidArgument("compress_mlps: unknown input variable " + name);
        widths.push_back(v->is_categorical() ? v->cardinality : static_cast<int64_t>(v->cardinality) + 1);
    }
    return widths;
}

}  // namespace

ir::Program compress_predicates(const ir::Program& p) {
    ir::Program out = p;
    for (auto& layer : out.layers) {
        for (auto& h : layer.cat_heads) fill_branches(h.predicate);
        for (auto& h : layer.num_heads) fill_branches(h.predicate);
    }
    return out;
}

ir::Program compress_mlps(const ir::Program& p) {
    ir::Program out = p;
    for (auto& layer : out.layers) {
        for (auto& m : layer.mlps) {
            // Duplicate-input MLPs only ever see equal inputs at run time;
            // collapse them to a single-argument table over the diagonal.
            if (m.input_vars.size() == 2 && m.input_vars[0] == m.input_vars[1]) {
                std::map<std::vector<int>, int> diag;
                auto widths = mlp_domain(p, m);
                for (int v = 0; v < widths[0]; ++v) {
                    auto it = m.table.find({v, v});
                    diag[{v}] = it != m.table.end() ? it->second : m.default_value;
                }
                m.input_vars.pop_back();
                m.table = std::move(diag);
            }
            // Most frequent output becomes the default; only exceptions stay.
            auto widths = mlp_domain(out, m);
            std::map<int, int64_t> freq;
            int64_t domain = 1;
            for (auto w : widths) domain *= w;
            for (const auto& [key, value] : m.table) freq[value]++;
            freq[m.default_value] += domain - static_cast<int64_t>(m.table.size());
            int best = m.default_value;
            int64_t best_count = -1;
            for (const auto& [value, count] : freq)
                if (count > best_count || (count == best_count && value < best)) {
                    best = value;
                    best_count = count;
                }
            std::map<std::vector<int>, int> kept;
            if (m.input_vars.size() == 1) {
                for (int v = 0; v < widths[0]; ++v) {
                    auto it = m.table.find({v});
                    int val = it != m.table.end() ? it->second : m.default_value;
                    if (val != best) kept[{v}] = val;
                }
            } else {
                for (int v1 = 0; v1 < widths[0]; ++v1)
                    for (int v2 = 0; v2 < widths[1]; ++v2) {
                        auto it = m.table.find({v1, v2});
                        int val = it != m.table.end() ? it->second : m.default_value;
                        if (val != best) kept[{v1, v2}] = val;
                    }
            }
            m.table = std::move(kept);
            m.default_value = best;
        }
    }
    return out;
}

ir::Program annotate_types(const ir::Program& p) {
    ir::Program out = p;
    std::map<std::string, std::vector<std::string>> labels;
    for (auto& v : out.inputs) {
        if (v.producer.kind == ir::ProducerKind::InputToken && v.value_labels.empty()) {
            // Token labels default to the vocabulary.
            v.value_labels = out.vocab;
            while (static_cast<int>(v.value_labels.size()) < v.cardinality)
                v.value_labels.push_back("<unused_" + std::to_string(v.value_labels.size()) + ">");
        }
        if (!v.value_labels.empty()) {
            if (static_cast<int>(v.value_labels.size()) != v.cardinality)
                throw InvalidArgument("annotate_types: label length mismatch for " + v.name);
            labels[v.name] = v.value_labels;
        }
    }
    for (auto& layer : out.layers) {
        for (auto& h : layer.cat_heads) {
            auto it = labels.find(h.value_var);
            if (it != labels.end()) {
                if (static_cast<int>(it->second.size()) != h.output.cardinality)
                    throw InvalidArgument("annotate_types: label length mismatch for " +
                                          h.output.name);
                h.output.value_labels = it->second;
                labels[h.output.name] = it->second;
            }
        }
        // MLP outputs keep integer values; numerical heads carry no labels.
    }
    return out;
}

ir::Program prune_dead(const ir::Program& p) {
    ir::Program out = p;
    auto nonzero_weights = [&](const std::string& name) {
        auto it = out.classifier.weights.find(name);
        if (it == out.classifier.weights.end()) return false;
        for (const auto& row : it->second)
            for (double w : row)
                if (w != 0.0) return true;
        return false;
    };

    std::set<std::string> live;
    for (const auto* v : out.all_vars())
        if (nonzero_weights(v->name)) live.insert(v->name);

    // One reverse sweep suffices: modules only read earlier stages.
    for (auto layer = out.layers.rbegin(); layer != out.layers.rend(); ++layer) {
        for (auto& m : layer->mlps)
            if (live.count(m.output.name))
                live.insert(m.input_vars.begin(), m.input_vars.end());
        for (auto& h : layer->num_heads)
            if (live.count(h.output.name)) {
                live.insert(h.query_var);
                live.insert(h.key_var);
                live.insert(h.value_var);
            }
        for (auto& h : layer->cat_heads)
            if (live.count(h.output.name)) {
                live.insert(h.query_var);
                live.insert(h.key_var);
                live.insert(h.value_var);
            }
    }

    for (auto& layer : out.layers) {
        std::erase_if(layer.cat_heads,
                      [&](const ir::CatHeadSpec& h) { return !live.count(h.output.name); });
        std::erase_if(layer.num_heads,
                      [&](const ir::NumHeadSpec& h) { return !live.count(h.output.name); });
        std::erase_if(layer.mlps,
                      [&](const ir::LookupMlpSpec& m) { return !live.count(m.output.name); });
    }
    // Inputs always stay declared; drop weight rows of removed variables.
    std::set<std::string> declared;
    for (const auto* v : out.all_vars()) declared.insert(v->name);
    std::erase_if(out.classifier.weights,
                  [&](const auto& kv) { return !declared.count(kv.first); });
    return out;
}

ir::Program apply_passes(const ir::Program& p, const EmissionOptions& opts) {
    ir::Program out = p;
    if (opts.dead_code) out = prune_dead(out);
    if (opts.branch_merge) out = compress_predicates(out);
    if (opts.default_fold) out = compress_mlps(out);
    if (opts.type_annotate) out = annotate_types(out);
    return out;
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

namespace {

// Runtime value domain of each categorical variable, following value edges:
// token-valued variables hold strings at run time, everything else ints.
struct RenderInfo {
    bool is_str = false;
    std::vector<std::string> labels;  // for string rendering, padded to k
};

std::map<std::string, RenderInfo> render_info(const ir::Program& p) {
    std::map<std::string, RenderInfo> info;
    for (const auto& v : p.inputs) {
        RenderInfo ri;
        if (v.producer.kind == ir::ProducerKind::InputToken) {
            ri.is_str = true;
            ri.labels = v.value_labels.empty() ? p.vocab : v.value_labels;
            while (static_cast<int>(ri.labels.size()) < v.cardinality)
                ri.labels.push_back("<unused_" + std::to_string(ri.labels.size()) + ">");
        }
        info[v.name] = std::move(ri);
    }
    for (const auto& layer : p.layers) {
        for (const auto& h : layer.cat_heads) info[h.output.name] = info.at(h.value_var);
        for (const auto& h : layer.num_heads) info[h.output.name] = {};
        for (const auto& m : layer.mlps) info[m.output.name] = {};
    }
    return info;
}

std::string py_str(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    out += '"';
    return out;
}

std::string render_value(const RenderInfo& ri, int value) {
    if (!ri.is_str) return std::to_string(value);
    if (value < static_cast<int>(ri.labels.size())) return py_str(ri.labels[value]);
    return py_str("<unused_" + std::to_string(value) + ">");
}

std::string singular(const std::string& var) {
    if (!var.empty() && var.back() == 's') return var.substr(0, var.size() - 1);
    return var;
}

// Fill-style wrapping of comma-separated items inside a bracketed construct.
void emit_wrapped(std::ostringstream& out, const std::string& indent, const std::string& head,
                  const std::vector<std::string>& items, const std::string& tail, int width) {
    std::string one_line = indent + head + join(items, ", ") + tail;
    if (static_cast<int>(one_line.size()) <= width) {
        out << one_line << "\n";
        return;
    }
    out << indent << head << "\n";
    std::string inner = indent + "    ";
    std::string line = inner;
    for (size_t i = 0; i < items.size(); ++i) {
        std::string piece = items[i] + ",";
        if (line.size() > inner.size() &&
            static_cast<int>(line.size() + piece.size() + 1) > width) {
            out << line << "\n";
            line = inner;
        }
        if (line.size() > inner.size()) line += " ";
        line += piece;
    }
    if (line.size() > inner.size()) out << line << "\n";
    out << indent << tail << "\n";
}

class PyEmitter {
public:
    PyEmitter(const ir::Program& p, const EmissionOptions& opts)
        : p_(p), opts_(opts), info_(render_info(p)) {}

    std::string emit() {
        prelude();
        run_function();
        footer();
        return out_.str();
    }

private:
    void prelude() {
        out_ << "# Decompiled sequence model. The run() function maps a token sequence\n";
        out_ << "# (specials included) to one predicted label per position";
        if (p_.classifier.output_mode == ir::OutputMode::MeanPooled)
            out_ << " (pooled to one label)";
        out_ << ".\n";
        out_ << "# Usage: python3 this_file.py \"<s>\" tok tok ...\n\n";
        out_ << "import csv\nimport os\nimport sys\n\n\n";
        out_ << "def select_closest(keys, queries, predicate, causal=False):\n";
        out_ << "    # One attended position per query: nearest predicate match wins,\n";
        out_ << "    # a self-match ranks below every other match, position 0 catches\n";
        out_ << "    # queries with no match at all.\n";
        out_ << "    attended = []\n";
        out_ << "    for i, q in enumerate(queries):\n";
        out_ << "        limit = i + 1 if causal else len(keys)\n";
        out_ << "        best = None\n";
        out_ << "        for j in range(limit):\n";
        out_ << "            if not predicate(q, keys[j]):\n";
        out_ << "                continue\n";
        out_ << "            d = abs(i - j)\n";
        out_ << "            rank = (limit + 1) if d == 0 else d\n";
        out_ << "            if best is None or rank < best[0]:\n";
        out_ << "                best = (rank, j)\n";
        out_ << "        attended.append(0 if best is None else best[1])\n";
        out_ << "    return attended\n\n\n";
        out_ << "def select(keys, queries, predicate, causal=False):\n";
        out_ << "    rows = []\n";
        out_ << "    for i, q in enumerate(queries):\n";
        out_ << "        limit = i + 1 if causal else len(keys)\n";
        out_ << "        rows.append([j < limit and predicate(q, keys[j]) for j in range(len(keys))])\n";
        out_ << "    return rows\n\n\n";
        out_ << "def aggregate(indices, values):\n";
        out_ << "    return [values[j] for j in indices]\n\n\n";
        out_ << "def aggregate_sum(matrix, values):\n";
        out_ << "    return [sum(v for m, v in zip(row, values) if m) for row in matrix]\n\n\n";
        std::vector<std::string> classes;
        for (const auto& c : p_.classifier.classes) classes.push_back(py_str(c));
        emit_wrapped(out_, "", "classes = [", classes, "]", opts_.max_width);
        out_ << "\n\n";
        if (opts_.weights_file.empty()) {
            inline_weights();
        } else {
            out_ << "def load_classifier_weights():\n";
            out_ << "    path = os.path.join(os.path.dirname(os.path.abspath(__file__)),\n";
            out_ << "                        " << py_str(opts_.weights_file) << ")\n";
            out_ << "    table = {}\n";
            out_ << "    with open(path, newline=\"\") as f:\n";
            out_ << "        for row in csv.reader(f):\n";
            out_ << "            table[(row[0], row[1])] = [float(x) for x in row[2:]]\n";
            out_ << "    return table\n\n\n";
            out_ << "classifier_weights = load_classifier_weights()\n\n\n";
        }
    }

    void inline_weights() {
        out_ << "classifier_weights = {\n";
        for (const auto* v : p_.all_vars()) {
            const auto& rows = p_.classifier.weights.at(v->name);
            const auto& ri = info_.at(v->name);
            for (size_t r = 0; r < rows.size(); ++r) {
                std::string key = v->is_categorical()
                                      ? (ri.is_str ? ri.labels[r] : std::to_string(r))
                                      : std::string("_");
                std::vector<std::string> ws;
                for (double w : rows[r]) {
                    std::ostringstream s;
                    s.precision(17);
                    s << w;
                    ws.push_back(s.str());
                }
                emit_wrapped(out_, "    ",
                             "(" + py_str(v->name) + ", " + py_str(key) + "): [", ws, "],",
                             opts_.max_width);
            }
        }
        out_ << "}\n\n\n";
    }

    // Branches of a predicate, grouped if the program carries groups.
    std::vector<ir::PredicateBranch> branches_of(const ir::Predicate& pred) {
        if (!pred.branches.empty()) return pred.branches;
        std::vector<ir::PredicateBranch> out;
        for (size_t q = 0; q < pred.mapping.size(); ++q)
            out.push_back({{static_cast<int>(q)}, pred.mapping[q]});
        return out;
    }

    void predicate_function(const std::string& fn, const std::string& query_var,
                            const std::string& key_var, const ir::Predicate& pred) {
        const auto& qi = info_.at(query_var);
        const auto& ki = info_.at(key_var);
        std::string qa = singular(query_var), ka = singular(key_var);
        if (qa == ka) {
            qa = "q_" + qa;
            ka = "k_" + ka;
        }
        out_ << "    def " << fn << "(" << qa << ", " << ka << "):\n";
        for (const auto& br : branches_of(pred)) {
            std::vector<std::string> items;
            for (int q : br.queries) items.push_back(render_value(qi, q));
            emit_wrapped(out_, "        ", "if " + qa + " in {", items,
                         "}:", opts_.max_width);
            out_ << "            return " << ka << " == " << render_value(ki, br.key) << "\n";
        }
        out_ << "        return False\n";
    }

    void mlp_function(const std::string& fn, const ir::LookupMlpSpec& m) {
        std::vector<std::string> args;
        std::set<std::string> seen;
        for (const auto& v : m.input_vars) {
            std::string a = singular(v);
            if (seen.count(a)) a = a + "_2";
            seen.insert(a);
            args.push_back(a);
        }
        out_ << "    def " << fn << "(" << join(args, ", ") << "):\n";
        if (m.input_vars.size() == 1)
            out_ << "        key = " << args[0] << "\n";
        else
            out_ << "        key = (" << join(args, ", ") << ")\n";

        // Group exceptions by output value, ordered by smallest key.
        std::map<int, std::vector<std::vector<int>>> groups;
        for (const auto& [key, value] : m.table) groups[value].push_back(key);
        std::vector<std::pair<std::vector<int>, int>> ordered;  // (min key, value)
        for (const auto& [value, keys] : groups) ordered.push_back({keys.front(), value});
        std::sort(ordered.begin(), ordered.end());
        for (const auto& [min_key, value] : ordered) {
            std::vector<std::string> items;
            for (const auto& key : groups[value]) items.push_back(render_key(m, key));
            emit_wrapped(out_, "        ", "if key in {", items, "}:", opts_.max_width);
            out_ << "            return " << value << "\n";
        }
        out_ << "        return " << m.default_value << "\n";
    }

    std::string render_key(const ir::LookupMlpSpec& m, const std::vector<int>& key) {
        std::vector<std::string> parts;
        for (size_t s = 0; s < key.size(); ++s) {
            const auto& ri = m.input_kind == ir::VarKind::Categorical
                                 ? info_.at(m.input_vars[s])
                                 : RenderInfo{};
            parts.push_back(render_value(ri, key[s]));
        }
        if (parts.size() == 1) return parts[0];
        return "(" + join(parts, ", ") + ")";
    }

    std::string zip_inputs(const ir::LookupMlpSpec& m, const std::string& fn) {
        if (m.input_vars.size() == 1)
            return "[" + fn + "(k0) for k0 in " + m.input_vars[0] + "]";
        return "[" + fn + "(k0, k1) for k0, k1 in zip(" + m.input_vars[0] + ", " +
               m.input_vars[1] + ")]";
    }

    void run_function() {
        out_ << "def run(tokens):\n";
        out_ << "    positions = list(range(len(tokens)))\n";
        bool any_ones = false;
        for (const auto& v : p_.inputs)
            if (v.producer.kind == ir::ProducerKind::InputOnes) any_ones = true;
        if (any_ones) out_ << "    ones = [1 for _ in tokens]\n";
        for (const auto& v : p_.inputs)
            if (v.producer.kind == ir::ProducerKind::InputEmbedding) {
                std::vector<std::string> items;
                for (size_t w = 0; w < p_.vocab.size(); ++w)
                    items.push_back(py_str(p_.vocab[w]) + ": " +
                                    std::to_string(v.producer.token_map[w]));
                emit_wrapped(out_, "    ", singular(v.name) + "_map = {", items, "}",
                             opts_.max_width);
                out_ << "    " << v.name << " = [" << singular(v.name)
                     << "_map.get(t, 0) for t in tokens]\n";
            }
        out_ << "\n";

        std::string causal_arg = p_.causal ? ", causal=True" : "";
        for (size_t li = 0; li < p_.layers.size(); ++li) {
            const auto& layer = p_.layers[li];
            for (const auto& h : layer.cat_heads) {
                std::string base = h.output.name.substr(0, h.output.name.size() - 8);  // strip _outputs
                std::string fn = "predicate" + base.substr(4);                         // strip attn
                out_ << "    # " << base << "\n";
                predicate_function(fn, h.query_var, h.key_var, h.predicate);
                out_ << "    " << base << "_pattern = select_closest(" << h.key_var << ", "
                     << h.query_var << ", " << fn << causal_arg << ")\n";
                out_ << "    " << h.output.name << " = aggregate(" << base << "_pattern, "
                     << h.value_var << ")\n\n";
            }
            for (const auto& h : layer.num_heads) {
                std::string base = h.output.name.substr(0, h.output.name.size() - 8);
                std::string fn = "num_predicate" + base.substr(8);  // strip num_attn
                out_ << "    # " << base << "\n";
                predicate_function(fn, h.query_var, h.key_var, h.predicate);
                out_ << "    " << base << "_pattern = select(" << h.key_var << ", " << h.query_var
                     << ", " << fn << causal_arg << ")\n";
                out_ << "    " << h.output.name << " = aggregate_sum(" << base << "_pattern, "
                     << h.value_var << ")\n\n";
            }
            for (const auto& m : layer.mlps) {
                std::string fn = m.output.name.substr(0, m.output.name.size() - 8);
                out_ << "    # " << fn << "\n";
                mlp_function(fn, m);
                out_ << "    " << m.output.name << " = " << zip_inputs(m, fn) << "\n\n";
            }
        }
        scoring();
    }

    void scoring() {
        std::vector<std::string> cat_items, num_items;
        for (const auto* v : p_.all_vars()) {
            std::string entry = "(" + py_str(v->name) + ", " + v->name + ")";
            if (v->is_categorical())
                cat_items.push_back(entry);
            else
                num_items.push_back(entry);
        }
        out_ << "    # classifier\n";
        emit_wrapped(out_, "    ", "categorical_features = [", cat_items, "]", opts_.max_width);
        emit_wrapped(out_, "    ", "numerical_features = [", num_items, "]", opts_.max_width);
        out_ << "    scores = [[0.0] * len(classes) for _ in tokens]\n";
        out_ << "    for name, values in categorical_features:\n";
        out_ << "        for i, v in enumerate(values):\n";
        out_ << "            row = classifier_weights[(name, str(v))]\n";
        out_ << "            for c in range(len(classes)):\n";
        out_ << "                scores[i][c] += row[c]\n";
        if (!num_items.empty()) {
            out_ << "    for name, values in numerical_features:\n";
            out_ << "        row = classifier_weights[(name, \"_\")]\n";
            out_ << "        for i, v in enumerate(values):\n";
            out_ << "            for c in range(len(classes)):\n";
            out_ << "                scores[i][c] += row[c] * v\n";
        }
        if (p_.classifier.output_mode == ir::OutputMode::MeanPooled) {
            out_ << "    pooled = [sum(s[c] for s in scores) / len(scores) for c in range(len(classes))]\n";
            out_ << "    scores = [pooled]\n";
        }
        out_ << "    return [\n";
        out_ << "        classes[max(range(len(classes)), key=lambda c: (s[c], -c))] for s in scores\n";
        out_ << "    ]\n";
    }

    void footer() {
        out_ << "\n\nif __name__ == \"__main__\":\n";
        out_ << "    print(\" \".join(run(sys.argv[1:])))\n";
    }

    const ir::Program& p_;
    const EmissionOptions& opts_;
    std::map<std::string, RenderInfo> info_;
    std::ostringstream out_;
};

// Language-neutral pseudocode; same structure, no runnable scaffolding.
std::string emit_pseudo(const ir::Program& p, const EmissionOptions& opts) {
    auto info = render_info(p);
    std::ostringstream out;
    out << "program (k=" << p.cardinality << ", max_len=" << p.max_len
        << (p.causal ? ", causal" : "") << ")\n";
    out << "vocab: " << join(p.vocab, " ") << "\n";
    out << "classes: " << join(p.classifier.classes, " ") << "\n";
    auto pred_lines = [&](const ir::Predicate& pred, const std::string& qv, const std::string& kv) {
        std::vector<ir::PredicateBranch> branches;
        if (!pred.branches.empty()) {
            branches = pred.branches;
        } else {
            for (size_t q = 0; q < pred.mapping.size(); ++q)
                branches.push_back({{static_cast<int>(q)}, pred.mapping[q]});
        }
        for (const auto& br : branches) {
            std::vector<std::string> qs;
            for (int q : br.queries) qs.push_back(render_value(info.at(qv), q));
            out << "      {" << join(qs, ", ") << "} -> " << render_value(info.at(kv), br.key)
                << "\n";
        }
    };
    for (size_t li = 0; li < p.layers.size(); ++li) {
        out << "layer " << li << ":\n";
        for (const auto& h : p.layers[li].cat_heads) {
            out << "  " << h.output.name << " = aggregate(select_closest(keys=" << h.key_var
                << ", queries=" << h.query_var << "), values=" << h.value_var << ")\n";
            pred_lines(h.predicate, h.query_var, h.key_var);
        }
        for (const auto& h : p.layers[li].num_heads) {
            out << "  " << h.output.name << " = aggregate_sum(select(keys=" << h.key_var
                << ", queries=" << h.query_var << "), values=" << h.value_var
                << ")  # bound " << h.output.cardinality << "\n";
            pred_lines(h.predicate, h.query_var, h.key_var);
        }
        for (const auto& m : p.layers[li].mlps) {
            out << "  " << m.output.name << " = lookup(" << join(m.input_vars, ", ") << ")\n";
            std::map<int, std::vector<std::string>> groups;
            for (const auto& [key, value] : m.table) {
                std::vector<std::string> parts;
                for (size_t s = 0; s < key.size(); ++s) {
                    RenderInfo ri = m.input_kind == ir::VarKind::Categorical
                                        ? info.at(m.input_vars[s])
                                        : RenderInfo{};
                    parts.push_back(render_value(ri, key[s]));
                }
                groups[value].push_back(parts.size() == 1 ? parts[0]
                                                          : "(" + join(parts, ", ") + ")");
            }
            for (const auto& [value, keys] : groups)
                out << "      {" << join(keys, ", ") << "} -> " << value << "\n";
            out << "      default -> " << m.default_value << "\n";
        }
    }
    out << "classifier: "
        << (p.classifier.output_mode == ir::OutputMode::PerToken ? "per-token" : "mean-pooled")
        << " argmax over " << p.classifier.classes.size() << " classes\n";
    (void)opts;
    return out.str();
}

}  // namespace

std::string emit_source(const ir::Program& p, const EmissionOptions& opts) {
    ir::require_valid(p, "emit_source");
    if (opts.dialect == "py3") return PyEmitter(p, opts).emit();
    if (opts.dialect == "pseudo") return emit_pseudo(p, opts);
    throw InvalidArgument("emit_source: unregistered dialect '" + opts.dialect + "'");
}

std::string classifier_weights_csv(const ir::Program& p) {
    auto info = render_info(p);
    std::ostringstream out;
    out.precision(17);
    for (const auto* v : p.all_vars()) {
        const auto& rows = p.classifier.weights.at(v->name);
        const auto& ri = info.at(v->name);
        for (size_t r = 0; r < rows.size(); ++r) {
            std::string key =
                v->is_categorical() ? (ri.is_str ? ri.labels[r] : std::to_string(r)) : "_";
            out << v->name << "," << key;
            for (double w : rows[r]) out << "," << w;
            out << "\n";
        }
    }
    return out.str();
}

ir::ProgramStats program_stats_with_lines(const ir::Program& p) {
    ir::ProgramStats stats = ir::program_stats(p);
    EmissionOptions full = EmissionOptions::none();
    EmissionOptions pruned;
    auto count_lines = [](const std::string& text) {
        return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
    };
    stats.line_count_full = count_lines(emit_source(p, full));
    stats.line_count_pruned = count_lines(emit_source(apply_passes(p, pruned), pruned));
    return stats;
}

// ---------------------------------------------------------------------------
// Equivalence
// ---------------------------------------------------------------------------

EquivalenceReport verify_equivalence(const model::SoftParams& params, const ir::Program& p,
                                     const std::vector<tasks::Example>& split) {
    if (split.empty()) throw InvalidArgument("verify_equivalence: empty split");
    struct PerExample {
        int64_t matched = 0, total = 0;
        int mismatch_pos = -1;
        int model_label = -1, program_label = -1;
    };
    std::vector<PerExample> results(split.size());
    model::HardEvaluator eval(params);
    parallel_for(static_cast<int>(split.size()), [&](int e) {
        auto model_labels = eval.run(split[e].tokens).label_ids;
        auto program_labels = interp::run_program_ids(p, split[e].tokens);
        PerExample r;
        size_t n = std::max(model_labels.size(), program_labels.size());
        for (size_t i = 0; i < n; ++i) {
            int ml = i < model_labels.size() ? model_labels[i] : -1;
            int pl = i < program_labels.size() ? program_labels[i] : -1;
            r.total++;
            if (ml == pl) {
                r.matched++;
            } else if (r.mismatch_pos < 0) {
                r.mismatch_pos = static_cast<int>(i);
                r.model_label = ml;
                r.program_label = pl;
            }
        }
        results[e] = r;
    });
    EquivalenceReport report;
    int64_t matched = 0;
    for (size_t e = 0; e < results.size(); ++e) {
        matched += results[e].matched;
        report.positions += results[e].total;
        if (!report.has_mismatch && results[e].mismatch_pos >= 0) {
            report.has_mismatch = true;
            report.first_mismatch = {static_cast<int>(e), results[e].mismatch_pos,
                                     results[e].model_label, results[e].program_label};
        }
    }
    report.match_rate =
        report.positions ? static_cast<double>(matched) / report.positions : 0.0;
    report.passed = matched == report.positions;
    return report;
}

}  // namespace tprog::extract
