#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tp/common.hpp"

namespace tprog::tasks {

// Data generation and gold labeling for the sequence tasks, plus a
// CoNLL-format ingestion path. Gold labelers double as brute-force oracles
// for the rest of the system, so they are deliberately simple and are
// property-tested on their own.

struct Example {
    std::vector<int> tokens;   // vocab ids, specials included
    std::vector<int> targets;  // class ids; -1 = masked; single entry when pooled
    bool biased_origin = false;  // Dyck sampling: came from the valid-prefix branch
};

struct Dataset {
    std::string task;
    std::vector<std::string> vocab;    // <pad>, <s>, [</s>,] [<unk>,] content...
    std::vector<std::string> classes;  // output label set, mask excluded
    int max_positions = 1;             // specials included
    bool causal = false;
    bool pooled = false;
    uint64_t seed = 0;
    // Dyck sampling only: accepted + rejected draw counts per mixture branch.
    int64_t draws_total = 0, draws_biased = 0;
    std::vector<Example> train, val, test;

    const std::vector<Example>& split(const std::string& name) const;
    std::vector<std::string> tokens_of(const Example& e) const;
    std::vector<std::string> targets_of(const Example& e) const;  // "<pad>" where masked
};

struct TaskSpec {
    std::string name;       // reverse|hist|hist2|sort|most_freq|dyck1|dyck2
    int vocab_size = 8;     // content tokens (fixed for dyck: 2 / 4)
    int max_len = 8;        // content tokens; for dyck: total positions incl. bos
    int n_samples = 20000;
    int n_val = 2000, n_test = 2000;  // remainder is train
    uint64_t seed = 0;
};

// Per-task gold labels over content tokens (no specials).
// reverse/sort/most_freq return token sequences; hist/hist2 return counts as
// decimal strings; dyck1/dyck2 return per-prefix labels in {T, P, F}.
std::vector<std::string> gold(const std::string& task, const std::vector<std::string>& input);

std::vector<std::string> content_alphabet(const std::string& task, int vocab_size);
bool task_uses_eos(const std::string& task);

Dataset gen_rasp(const TaskSpec& spec);

// In-context recall data: bos + alternating letter/number, ending with a
// letter. Target at each letter is the number that followed its previous
// occurrence, else "unk". Causal.
Dataset gen_icl(int n_samples = 20000, int length = 10, uint64_t seed = 0);

// CoNLL 2003 column format -> IOB2 tagged dataset. Digit runs are replaced
// with '#', sentences longer than max_len content words are dropped, words
// outside the top vocab_size are mapped to <unk>.
Dataset load_conll(const std::string& path, int max_len = 30, int vocab_size = 10000);

// Dataset files: one example per line, "tokens<TAB>targets".
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace tprog::tasks
