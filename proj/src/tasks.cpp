#include "tp/tasks.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "tp/ir.hpp"

namespace tprog::tasks {

using json = nlohmann::json;

const std::vector<Example>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val" || name == "validation") return val;
    if (name == "test") return test;
    throw InvalidArgument("unknown split '" + name + "'");
}

std::vector<std::string> Dataset::tokens_of(const Example& e) const {
    std::vector<std::string> out;
    out.reserve(e.tokens.size());
    for (int id : e.tokens) out.push_back(vocab.at(id));
    return out;
}

std::vector<std::string> Dataset::targets_of(const Example& e) const {
    std::vector<std::string> out;
    out.reserve(e.targets.size());
    for (int t : e.targets) out.push_back(t < 0 ? ir::kPad : classes.at(t));
    return out;
}

// ---------------------------------------------------------------------------
// Gold labelers
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> gold_reverse(const std::vector<std::string>& in) {
    return {in.rbegin(), in.rend()};
}

std::vector<std::string> gold_sort(const std::vector<std::string>& in) {
    auto out = in;
    std::sort(out.begin(), out.end());
    return out;
}

std::map<std::string, int> counts_of(const std::vector<std::string>& in) {
    std::map<std::string, int> counts;
    for (const auto& t : in) counts[t]++;
    return counts;
}

std::vector<std::string> gold_hist(const std::vector<std::string>& in) {
    auto counts = counts_of(in);
    std::vector<std::string> out;
    out.reserve(in.size());
    for (const auto& t : in) out.push_back(std::to_string(counts[t]));
    return out;
}

// Per token: how many distinct token types share its histogram value.
std::vector<std::string> gold_hist2(const std::vector<std::string>& in) {
    auto counts = counts_of(in);
    std::map<int, int> types_with_count;
    for (const auto& [tok, c] : counts) types_with_count[c]++;
    std::vector<std::string> out;
    out.reserve(in.size());
    for (const auto& t : in) out.push_back(std::to_string(types_with_count[counts[t]]));
    return out;
}

// Unique tokens ordered by frequency, first occurrence breaking ties.
std::vector<std::string> gold_most_freq(const std::vector<std::string>& in) {
    auto counts = counts_of(in);
    std::map<std::string, int> first_pos;
    for (size_t i = 0; i < in.size(); ++i)
        if (!first_pos.count(in[i])) first_pos[in[i]] = static_cast<int>(i);
    std::vector<std::string> uniq;
    for (const auto& [tok, c] : counts) uniq.push_back(tok);
    std::sort(uniq.begin(), uniq.end(), [&](const std::string& a, const std::string& b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return first_pos[a] < first_pos[b];
    });
    return uniq;
}

// Prefix labels: T = balanced so far, P = extendable prefix, F = invalid
// (absorbing). Dyck-1 uses (); Dyck-2 adds {}.
std::vector<std::string> gold_dyck(const std::vector<std::string>& in, bool two) {
    std::vector<std::string> out;
    out.reserve(in.size());
    std::vector<char> stack;
    bool failed = false;
    for (const auto& t : in) {
        if (!failed) {
            if (t == "(" || (two && t == "{")) {
                stack.push_back(t[0]);
            } else if (t == ")" || (two && t == "}")) {
                char open = t == ")" ? '(' : '{';
                if (stack.empty() || stack.back() != open)
                    failed = true;
                else
                    stack.pop_back();
            } else {
                throw InvalidArgument("dyck: invalid token '" + t + "'");
            }
        }
        out.push_back(failed ? "F" : (stack.empty() ? "T" : "P"));
    }
    return out;
}

void check_tokens(const std::vector<std::string>& in, const std::vector<std::string>& alphabet) {
    std::set<std::string> allowed(alphabet.begin(), alphabet.end());
    for (const auto& t : in)
        if (!allowed.count(t)) throw InvalidArgument("gold: invalid token '" + t + "'");
}

}  // namespace

std::vector<std::string> content_alphabet(const std::string& task, int vocab_size) {
    if (task == "dyck1") return {"(", ")"};
    if (task == "dyck2") return {"(", ")", "{", "}"};
    if (vocab_size < 1 || vocab_size > 26)
        throw InvalidArgument("vocab_size must be in [1, 26]");
    std::vector<std::string> out;
    for (int i = 0; i < vocab_size; ++i) out.push_back(std::string(1, static_cast<char>('a' + i)));
    return out;
}

bool task_uses_eos(const std::string& task) { return task == "sort" || task == "reverse"; }

std::vector<std::string> gold(const std::string& task, const std::vector<std::string>& input) {
    if (task == "dyck1") {
        check_tokens(input, content_alphabet(task, 0));
        return gold_dyck(input, false);
    }
    if (task == "dyck2") {
        check_tokens(input, content_alphabet(task, 0));
        return gold_dyck(input, true);
    }
    check_tokens(input, content_alphabet("", 26));
    if (task == "reverse") return gold_reverse(input);
    if (task == "sort") return gold_sort(input);
    if (task == "hist") return gold_hist(input);
    if (task == "hist2") return gold_hist2(input);
    if (task == "most_freq") return gold_most_freq(input);
    throw InvalidArgument("unknown task '" + task + "'");
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace {

struct VocabIndex {
    std::vector<std::string> vocab;
    std::map<std::string, int> index;

    explicit VocabIndex(std::vector<std::string> v) : vocab(std::move(v)) {
        for (size_t i = 0; i < vocab.size(); ++i) index[vocab[i]] = static_cast<int>(i);
    }
    int operator[](const std::string& t) const { return index.at(t); }
};

// Valid Dyck word of length 2*half, built by a random walk over legal moves.
// Invariant: tokens left = 2 * opens left + stack depth, so an open is legal
// whenever opens remain and a close whenever the stack is nonempty.
std::vector<std::string> sample_dyck_word(Rng& rng, int half, bool two) {
    std::vector<std::string> out;
    std::vector<char> stack;
    int opens_left = half;
    int total_left = 2 * half;
    while (total_left > 0) {
        bool can_open = opens_left > 0;
        bool can_close = !stack.empty();
        bool open = can_open && can_close ? rng.next_bool() : can_open;
        if (open) {
            char c = two && rng.next_bool() ? '{' : '(';
            stack.push_back(c);
            out.emplace_back(1, c);
            opens_left--;
        } else {
            out.emplace_back(1, stack.back() == '{' ? '}' : ')');
            stack.pop_back();
        }
        total_left--;
    }
    return out;
}

std::vector<std::string> sample_dyck_content(Rng& rng, int length, bool two,
                                             const std::vector<std::string>& alphabet,
                                             bool* biased) {
    std::vector<std::string> content;
    if (rng.next_bool()) {
        // Uniform tokens.
        *biased = false;
        for (int i = 0; i < length; ++i)
            content.push_back(alphabet[rng.next_below(alphabet.size())]);
    } else {
        // Valid word of length <= N, padded with uniform tokens.
        *biased = true;
        int half = length >= 2 ? rng.next_int(1, length / 2) : 0;
        if (half > 0) content = sample_dyck_word(rng, half, two);
        while (static_cast<int>(content.size()) < length)
            content.push_back(alphabet[rng.next_below(alphabet.size())]);
    }
    return content;
}

std::string key_of(const std::vector<std::string>& content) { return join(content, " "); }

void split_dataset(Dataset& d, std::vector<Example> all, int n_val, int n_test) {
    int n = static_cast<int>(all.size());
    int n_train = n - n_val - n_test;
    if (n_train <= 0) throw InvalidArgument("split sizes exceed sample count");
    d.train.assign(all.begin(), all.begin() + n_train);
    d.val.assign(all.begin() + n_train, all.begin() + n_train + n_val);
    d.test.assign(all.begin() + n_train + n_val, all.end());
}

}  // namespace

Dataset gen_rasp(const TaskSpec& spec) {
    bool dyck = spec.name == "dyck1" || spec.name == "dyck2";
    auto alphabet = content_alphabet(spec.name, spec.vocab_size);
    bool eos = task_uses_eos(spec.name);

    // Dyck content fills the window exactly (max_len counts total positions
    // there); other tasks draw a content length uniformly in [1, max_len].
    int max_content = dyck ? spec.max_len - 1 : spec.max_len;
    if (max_content < 1) throw InvalidArgument("gen_rasp: max_len leaves no content positions");

    // Rejection sampling must terminate: require a comfortably larger domain.
    double domain = 0, width = 1;
    for (int l = 1; l <= max_content; ++l) {
        width *= static_cast<double>(alphabet.size());
        domain += dyck ? 0 : width;
        if (domain > 1e15) break;
    }
    if (dyck) domain = width;  // uniform branch alone covers |V|^N strings
    // Exhausting the whole domain is allowed (coupon-collector sampling);
    // only a strictly smaller domain cannot terminate.
    if (domain < static_cast<double>(spec.n_samples))
        throw InvalidArgument("gen_rasp: token domain too small for " +
                              std::to_string(spec.n_samples) + " unique samples");

    Dataset d;
    d.task = spec.name;
    d.seed = spec.seed;
    d.vocab = {ir::kPad, ir::kBos};
    if (eos) d.vocab.push_back(ir::kEos);
    for (const auto& t : alphabet) d.vocab.push_back(t);

    // Output label set.
    std::set<std::string> class_set;
    if (spec.name == "dyck1" || spec.name == "dyck2") {
        class_set = {"T", "P", "F"};
    } else if (spec.name == "hist" || spec.name == "hist2") {
        for (int c = 1; c <= max_content; ++c) class_set.insert(std::to_string(c));
    } else {
        class_set.insert(alphabet.begin(), alphabet.end());
    }
    d.classes.assign(class_set.begin(), class_set.end());
    d.max_positions = max_content + 1 + (eos ? 1 : 0);

    VocabIndex vi(d.vocab);
    std::map<std::string, int> class_index;
    for (size_t i = 0; i < d.classes.size(); ++i) class_index[d.classes[i]] = static_cast<int>(i);

    Rng rng = Rng(spec.seed).fork(0x7a5f);
    std::map<std::string, size_t> seen;  // key -> index into `all`
    std::vector<Example> all;
    while (static_cast<int>(all.size()) < spec.n_samples) {
        std::vector<std::string> content;
        bool biased = false;
        if (dyck) {
            content = sample_dyck_content(rng, max_content, spec.name == "dyck2", alphabet, &biased);
            d.draws_total++;
            if (biased) d.draws_biased++;
        } else {
            int len = rng.next_int(1, max_content);
            for (int i = 0; i < len; ++i) content.push_back(alphabet[rng.next_below(alphabet.size())]);
        }
        auto [it, inserted] = seen.emplace(key_of(content), all.size());
        if (!inserted) {
            // A string counts as biased-origin if any draw of it was biased.
            if (biased) all[it->second].biased_origin = true;
            continue;
        }

        auto labels = gold(spec.name, content);
        Example e;
        e.biased_origin = biased;
        e.tokens.push_back(vi[ir::kBos]);
        e.targets.push_back(-1);
        // most_freq output is shorter than the input: left-aligned after bos,
        // masked beyond its length.
        for (size_t i = 0; i < content.size(); ++i) {
            e.tokens.push_back(vi[content[i]]);
            e.targets.push_back(i < labels.size() ? class_index.at(labels[i]) : -1);
        }
        if (eos) {
            e.tokens.push_back(vi[ir::kEos]);
            e.targets.push_back(-1);
        }
        all.push_back(std::move(e));
    }
    split_dataset(d, std::move(all), spec.n_val, spec.n_test);
    return d;
}

Dataset gen_icl(int n_samples, int length, uint64_t seed) {
    if (length < 3 || length % 2 != 0)
        throw InvalidArgument("gen_icl: length must be even (bos + letter/number alternation)");
    const std::vector<std::string> letters = {"a", "b", "c", "d"};
    const std::vector<std::string> numbers = {"0", "1", "2", "3"};

    Dataset d;
    d.task = "icl";
    d.seed = seed;
    d.causal = true;
    d.vocab = {ir::kPad, ir::kBos};
    for (const auto& t : numbers) d.vocab.push_back(t);
    for (const auto& t : letters) d.vocab.push_back(t);
    d.classes = numbers;
    d.classes.push_back("unk");
    d.max_positions = length;

    VocabIndex vi(d.vocab);
    std::map<std::string, int> class_index;
    for (size_t i = 0; i < d.classes.size(); ++i) class_index[d.classes[i]] = static_cast<int>(i);

    Rng rng = Rng(seed).fork(0x1c1);
    std::set<std::string> seen;
    std::vector<Example> all;
    while (static_cast<int>(all.size()) < n_samples) {
        // A many-to-one letter -> number mapping, then alternate up to a
        // sampled length (always ending with a letter).
        std::map<std::string, std::string> mapping;
        for (const auto& l : letters) mapping[l] = numbers[rng.next_below(numbers.size())];
        int n_letters = rng.next_int(2, length / 2);
        std::vector<std::string> toks = {ir::kBos};
        std::vector<std::string> seq_letters;
        for (int i = 0; i < n_letters; ++i) {
            const auto& l = letters[rng.next_below(letters.size())];
            seq_letters.push_back(l);
            toks.push_back(l);
            if (i + 1 < n_letters) toks.push_back(mapping[l]);
        }
        if (!seen.insert(join(toks, " ")).second) continue;

        Example e;
        std::set<std::string> seen_letters;
        for (const auto& t : toks) e.tokens.push_back(vi[t]);
        e.targets.assign(toks.size(), -1);
        for (int i = 0; i < n_letters; ++i) {
            int pos = 1 + 2 * i;
            const auto& l = seq_letters[i];
            e.targets[pos] =
                class_index.at(seen_letters.count(l) ? mapping[l] : std::string("unk"));
            seen_letters.insert(l);
        }
        all.push_back(std::move(e));
    }
    int n_val = std::max(1, n_samples / 10);
    int n_test = n_val;
    split_dataset(d, std::move(all), n_val, n_test);
    return d;
}

// ---------------------------------------------------------------------------
// CoNLL ingestion
// ---------------------------------------------------------------------------

namespace {

std::string substitute_digits(const std::string& word) {
    std::string out;
    bool in_run = false;
    for (char c : word) {
        if (std::isdigit(static_cast<unsigned char>(c))) {
            if (!in_run) out += '#';
            in_run = true;
        } else {
            out += c;
            in_run = false;
        }
    }
    return out;
}

}  // namespace

Dataset load_conll(const std::string& path, int max_len, int vocab_size) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open file: " + path);

    std::vector<std::vector<std::string>> sentences, tag_seqs;
    std::vector<std::string> words, tags;
    std::string line;
    int line_no = 0;
    auto flush = [&] {
        if (words.empty()) return;
        if (static_cast<int>(words.size()) <= max_len) {
            sentences.push_back(words);
            tag_seqs.push_back(tags);
        }
        words.clear();
        tags.clear();
    };
    while (std::getline(in, line)) {
        line_no++;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        auto cols = split_ws(line);
        if (cols[0] == "-DOCSTART-") {
            flush();
            continue;
        }
        if (cols.size() != 4)
            throw ParseError("malformed CoNLL line " + std::to_string(line_no) + ": expected 4 columns, got " +
                             std::to_string(cols.size()));
        words.push_back(substitute_digits(cols[0]));
        tags.push_back(cols[3]);
    }
    flush();

    // Frequency-ranked vocabulary, ties broken lexicographically.
    std::map<std::string, int> freq;
    for (const auto& s : sentences)
        for (const auto& w : s) freq[w]++;
    std::vector<std::pair<std::string, int>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Dataset d;
    d.task = "conll";
    d.vocab = {ir::kPad, ir::kBos, ir::kEos, ir::kUnk};
    for (const auto& [w, c] : ranked) {
        if (static_cast<int>(d.vocab.size()) - 4 >= vocab_size) break;
        d.vocab.push_back(w);
    }
    std::set<std::string> class_set;
    for (const auto& ts : tag_seqs) class_set.insert(ts.begin(), ts.end());
    d.classes.assign(class_set.begin(), class_set.end());
    d.max_positions = max_len + 2;

    VocabIndex vi(d.vocab);
    std::map<std::string, int> class_index;
    for (size_t i = 0; i < d.classes.size(); ++i) class_index[d.classes[i]] = static_cast<int>(i);
    for (size_t s = 0; s < sentences.size(); ++s) {
        Example e;
        e.tokens.push_back(vi[ir::kBos]);
        e.targets.push_back(-1);
        for (size_t i = 0; i < sentences[s].size(); ++i) {
            const auto& w = sentences[s][i];
            e.tokens.push_back(vi.index.count(w) ? vi[w] : vi[ir::kUnk]);
            e.targets.push_back(class_index.at(tag_seqs[s][i]));
        }
        e.tokens.push_back(vi[ir::kEos]);
        e.targets.push_back(-1);
        d.train.push_back(std::move(e));
    }
    return d;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace {

void write_split(const Dataset& d, const std::vector<Example>& split, const std::string& path) {
    std::ostringstream out;
    for (const auto& e : split) {
        out << join(d.tokens_of(e), " ") << '\t' << join(d.targets_of(e), " ") << '\n';
    }
    write_text_file(path, out.str());
}

std::vector<Example> read_split(const Dataset& d, const std::string& path) {
    std::string text = read_text_file(path);
    std::map<std::string, int> vocab_index, class_index;
    for (size_t i = 0; i < d.vocab.size(); ++i) vocab_index[d.vocab[i]] = static_cast<int>(i);
    for (size_t i = 0; i < d.classes.size(); ++i) class_index[d.classes[i]] = static_cast<int>(i);

    std::vector<Example> out;
    std::istringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        line_no++;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": missing tab separator");
        Example e;
        for (const auto& t : split_ws(line.substr(0, tab))) {
            auto it = vocab_index.find(t);
            if (it == vocab_index.end())
                throw ParseError(path + ":" + std::to_string(line_no) + ": unknown token '" + t + "'");
            e.tokens.push_back(it->second);
        }
        for (const auto& t : split_ws(line.substr(tab + 1))) {
            if (t == ir::kPad) {
                e.targets.push_back(-1);
            } else {
                auto it = class_index.find(t);
                if (it == class_index.end())
                    throw ParseError(path + ":" + std::to_string(line_no) + ": unknown label '" + t + "'");
                e.targets.push_back(it->second);
            }
        }
        if (!d.pooled && e.targets.size() != e.tokens.size())
            throw ParseError(path + ":" + std::to_string(line_no) + ": token/target length mismatch");
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace

void save_dataset(const Dataset& d, const std::string& dir) {
    json meta;
    meta["task"] = d.task;
    meta["vocab"] = d.vocab;
    meta["classes"] = d.classes;
    meta["max_positions"] = d.max_positions;
    meta["causal"] = d.causal;
    meta["pooled"] = d.pooled;
    meta["seed"] = d.seed;
    meta["sizes"] = {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}};
    write_text_file(dir + "/meta.json", meta.dump(2) + "\n");
    write_split(d, d.train, dir + "/train.tsv");
    write_split(d, d.val, dir + "/val.tsv");
    write_split(d, d.test, dir + "/test.tsv");
}

Dataset load_dataset(const std::string& dir) {
    json meta;
    try {
        meta = json::parse(read_text_file(dir + "/meta.json"));
    } catch (const json::parse_error& e) {
        throw ParseError("bad dataset meta.json: " + std::string(e.what()));
    }
    Dataset d;
    d.task = meta.at("task").get<std::string>();
    d.vocab = meta.at("vocab").get<std::vector<std::string>>();
    d.classes = meta.at("classes").get<std::vector<std::string>>();
    d.max_positions = meta.at("max_positions").get<int>();
    d.causal = meta.at("causal").get<bool>();
    d.pooled = meta.at("pooled").get<bool>();
    d.seed = meta.at("seed").get<uint64_t>();
    d.train = read_split(d, dir + "/train.tsv");
    d.val = read_split(d, dir + "/val.tsv");
    d.test = read_split(d, dir + "/test.tsv");
    return d;
}

}  // namespace tprog::tasks
