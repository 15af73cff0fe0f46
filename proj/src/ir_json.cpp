#include <json.hpp>

#include "tp/ir.hpp"

namespace tprog::ir {

// nlohmann::json keeps object keys sorted, which gives us the canonical,
// diff-stable document ordering for free.
using json = nlohmann::json;

namespace {

constexpr const char* kFormat = "tprog-program";
constexpr int kVersion = 1;

std::string kind_str(VarKind k) { return k == VarKind::Categorical ? "categorical" : "numerical"; }

VarKind kind_from(const std::string& s, const std::string& where) {
    if (s == "categorical") return VarKind::Categorical;
    if (s == "numerical") return VarKind::Numerical;
    throw ParseError("unknown variable kind '" + s + "' at " + where);
}

std::string producer_str(ProducerKind k) {
    switch (k) {
        case ProducerKind::InputToken: return "input-token";
        case ProducerKind::InputPosition: return "input-position";
        case ProducerKind::InputOnes: return "input-ones";
        case ProducerKind::InputEmbedding: return "input-embedding";
        case ProducerKind::AttnHead: return "attn-head";
        case ProducerKind::NumAttnHead: return "num-attn-head";
        case ProducerKind::Mlp: return "mlp";
        case ProducerKind::NumMlp: return "num-mlp";
    }
    return "?";
}

ProducerKind producer_from(const std::string& s, const std::string& where) {
    if (s == "input-token") return ProducerKind::InputToken;
    if (s == "input-position") return ProducerKind::InputPosition;
    if (s == "input-ones") return ProducerKind::InputOnes;
    if (s == "input-embedding") return ProducerKind::InputEmbedding;
    if (s == "attn-head") return ProducerKind::AttnHead;
    if (s == "num-attn-head") return ProducerKind::NumAttnHead;
    if (s == "mlp") return ProducerKind::Mlp;
    if (s == "num-mlp") return ProducerKind::NumMlp;
    throw ParseError("unknown producer '" + s + "' at " + where);
}

json var_to_json(const VariableDecl& v) {
    json j;
    j["name"] = v.name;
    j["kind"] = kind_str(v.kind);
    j["cardinality"] = v.cardinality;
    json prod;
    prod["kind"] = producer_str(v.producer.kind);
    if (v.producer.layer >= 0) prod["layer"] = v.producer.layer;
    if (v.producer.index >= 0) prod["index"] = v.producer.index;
    if (!v.producer.token_map.empty()) prod["token_map"] = v.producer.token_map;
    j["producer"] = prod;
    if (!v.value_labels.empty()) j["value_labels"] = v.value_labels;
    return j;
}

// Field accessor with a path-qualified error on absence or wrong type.
template <typename T>
T field(const json& j, const std::string& key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError("missing field '" + key + "' at " + where);
    try {
        return it->get<T>();
    } catch (const json::exception& e) {
        throw ParseError("bad field '" + key + "' at " + where + ": " + e.what());
    }
}

VariableDecl var_from_json(const json& j, const std::string& where) {
    VariableDecl v;
    v.name = field<std::string>(j, "name", where);
    v.kind = kind_from(field<std::string>(j, "kind", where), where);
    v.cardinality = field<int>(j, "cardinality", where);
    const json& prod = j.at("producer");
    v.producer.kind = producer_from(field<std::string>(prod, "kind", where + ".producer"), where);
    v.producer.layer = prod.value("layer", -1);
    v.producer.index = prod.value("index", -1);
    if (prod.contains("token_map")) v.producer.token_map = prod["token_map"].get<std::vector<int>>();
    if (j.contains("value_labels")) v.value_labels = j["value_labels"].get<std::vector<std::string>>();
    return v;
}

json predicate_to_json(const Predicate& pred) {
    json j;
    j["mapping"] = pred.mapping;
    if (!pred.branches.empty()) {
        json branches = json::array();
        for (const auto& b : pred.branches)
            branches.push_back(json{{"queries", b.queries}, {"key", b.key}});
        j["branches"] = branches;
    }
    return j;
}

Predicate predicate_from_json(const json& j, const std::string& where) {
    Predicate p;
    if (j.is_array()) {  // bare mapping
        p.mapping = j.get<std::vector<int>>();
        return p;
    }
    p.mapping = field<std::vector<int>>(j, "mapping", where);
    if (j.contains("branches"))
        for (const auto& bj : j["branches"]) {
            PredicateBranch b;
            b.queries = field<std::vector<int>>(bj, "queries", where);
            b.key = field<int>(bj, "key", where);
            p.branches.push_back(std::move(b));
        }
    return p;
}

json mlp_to_json(const LookupMlpSpec& m) {
    json j;
    j["input_vars"] = m.input_vars;
    j["input_kind"] = kind_str(m.input_kind);
    j["default_value"] = m.default_value;
    json table = json::array();
    for (const auto& [key, value] : m.table) table.push_back(json::array({key, value}));
    j["table"] = table;
    j["output"] = var_to_json(m.output);
    return j;
}

LookupMlpSpec mlp_from_json(const json& j, const std::string& where) {
    LookupMlpSpec m;
    m.input_vars = field<std::vector<std::string>>(j, "input_vars", where);
    m.input_kind = kind_from(field<std::string>(j, "input_kind", where), where);
    m.default_value = field<int>(j, "default_value", where);
    for (const auto& entry : j.at("table")) {
        if (!entry.is_array() || entry.size() != 2)
            throw ParseError("table entry must be [key, value] at " + where);
        m.table[entry[0].get<std::vector<int>>()] = entry[1].get<int>();
    }
    m.output = var_from_json(j.at("output"), where + ".output");
    return m;
}

}  // namespace

std::string serialize(const Program& p) {
    json j;
    j["format"] = kFormat;
    j["version"] = kVersion;
    j["vocab"] = p.vocab;
    j["max_len"] = p.max_len;
    j["causal"] = p.causal;
    j["cardinality"] = p.cardinality;

    json inputs = json::array();
    for (const auto& v : p.inputs) inputs.push_back(var_to_json(v));
    j["inputs"] = inputs;

    json layers = json::array();
    for (const auto& layer : p.layers) {
        json lj;
        json cat = json::array();
        for (const auto& h : layer.cat_heads) {
            json hj;
            hj["query_var"] = h.query_var;
            hj["key_var"] = h.key_var;
            hj["value_var"] = h.value_var;
            hj["predicate"] = predicate_to_json(h.predicate);
            hj["output"] = var_to_json(h.output);
            cat.push_back(hj);
        }
        lj["cat_heads"] = cat;
        json num = json::array();
        for (const auto& h : layer.num_heads) {
            json hj;
            hj["query_var"] = h.query_var;
            hj["key_var"] = h.key_var;
            hj["value_var"] = h.value_var;
            hj["predicate"] = predicate_to_json(h.predicate);
            hj["output"] = var_to_json(h.output);
            num.push_back(hj);
        }
        lj["num_heads"] = num;
        json mlps = json::array();
        for (const auto& m : layer.mlps) mlps.push_back(mlp_to_json(m));
        lj["mlps"] = mlps;
        layers.push_back(lj);
    }
    j["layers"] = layers;

    json cls;
    cls["classes"] = p.classifier.classes;
    cls["output_mode"] = p.classifier.output_mode == OutputMode::PerToken ? "per-token" : "mean-pooled";
    json weights;  // object keyed by variable name -> sorted
    for (const auto& [name, rows] : p.classifier.weights) weights[name] = rows;
    cls["weights"] = weights;
    j["classifier"] = cls;

    return j.dump(2) + "\n";
}

Program deserialize(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // Map the byte offset to a line number for the error locus.
        size_t line = 1;
        for (size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') line++;
        throw ParseError("program parse error at line " + std::to_string(line) + ": " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != kFormat)
        throw ParseError("not a program document (missing format header)");
    if (j.value("version", -1) != kVersion)
        throw ParseError("unsupported program version " + std::to_string(j.value("version", -1)));

    Program p;
    p.vocab = field<std::vector<std::string>>(j, "vocab", "program");
    p.max_len = field<int>(j, "max_len", "program");
    p.causal = field<bool>(j, "causal", "program");
    p.cardinality = field<int>(j, "cardinality", "program");
    size_t idx = 0;
    for (const auto& vj : j.at("inputs"))
        p.inputs.push_back(var_from_json(vj, "inputs[" + std::to_string(idx++) + "]"));

    size_t li = 0;
    for (const auto& lj : j.at("layers")) {
        std::string lwhere = "layers[" + std::to_string(li++) + "]";
        Layer layer;
        for (const auto& hj : lj.at("cat_heads")) {
            CatHeadSpec h;
            h.query_var = field<std::string>(hj, "query_var", lwhere);
            h.key_var = field<std::string>(hj, "key_var", lwhere);
            h.value_var = field<std::string>(hj, "value_var", lwhere);
            h.predicate = predicate_from_json(hj.at("predicate"), lwhere);
            h.output = var_from_json(hj.at("output"), lwhere + ".output");
            layer.cat_heads.push_back(std::move(h));
        }
        for (const auto& hj : lj.at("num_heads")) {
            NumHeadSpec h;
            h.query_var = field<std::string>(hj, "query_var", lwhere);
            h.key_var = field<std::string>(hj, "key_var", lwhere);
            h.value_var = field<std::string>(hj, "value_var", lwhere);
            h.predicate = predicate_from_json(hj.at("predicate"), lwhere);
            h.output = var_from_json(hj.at("output"), lwhere + ".output");
            layer.num_heads.push_back(std::move(h));
        }
        for (const auto& mj : lj.at("mlps")) layer.mlps.push_back(mlp_from_json(mj, lwhere + ".mlps"));
        p.layers.push_back(std::move(layer));
    }

    const json& cls = j.at("classifier");
    p.classifier.classes = field<std::vector<std::string>>(cls, "classes", "classifier");
    std::string mode = field<std::string>(cls, "output_mode", "classifier");
    if (mode == "per-token")
        p.classifier.output_mode = OutputMode::PerToken;
    else if (mode == "mean-pooled")
        p.classifier.output_mode = OutputMode::MeanPooled;
    else
        throw ParseError("unknown classifier output_mode '" + mode + "'");
    for (const auto& [name, rows] : cls.at("weights").items())
        p.classifier.weights[name] = rows.get<std::vector<std::vector<double>>>();

    return p;
}

Program load_program(const std::string& path) { return deserialize(read_text_file(path)); }

void save_program(const Program& p, const std::string& path) { write_text_file(path, serialize(p)); }

}  // namespace tprog::ir
