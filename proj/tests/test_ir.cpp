#include <doctest.h>

#include "helpers.hpp"
#include "tp/interp.hpp"
#include "tp/ir.hpp"

using namespace tprog;
using namespace tptest;

TEST_CASE("validate: minimal two-layer one-head program is clean") {
    auto p = make_icl_program();
    auto violations = ir::validate_program(p);
    for (const auto& v : violations) MESSAGE(v.element, ": ", v.message);
    CHECK(violations.empty());
}

TEST_CASE("validate: reading a same-layer head output from a head is an acyclicity violation") {
    auto p = make_icl_program();
    p.layers[0].cat_heads[0].key_var = "attn_0_0_outputs";  // self-reference
    auto violations = ir::validate_program(p);
    REQUIRE(violations.size() == 1);
    CHECK(violations[0].message.find("acyclicity") != std::string::npos);
    CHECK(violations[0].element.find("cat_heads[0]") != std::string::npos);
}

TEST_CASE("validate: non-total predicate is reported") {
    auto p = make_icl_program();
    p.layers[0].cat_heads[0].predicate.mapping.pop_back();
    auto violations = ir::validate_program(p);
    REQUIRE(violations.size() == 1);
    CHECK(violations[0].message.find("not total") != std::string::npos);
}

TEST_CASE("validate: numerical head bound law") {
    auto p = make_hist_program();
    p.layers[0].num_heads[0].output.cardinality = 5;  // should be max_len * 1 = 9
    auto violations = ir::validate_program(p);
    REQUIRE(!violations.empty());
    CHECK(violations[0].message.find("max_len * value bound") != std::string::npos);
}

TEST_CASE("validate: duplicate producer and missing classifier rows") {
    auto p = make_icl_program();
    p.layers[1].cat_heads[0].output.name = "attn_0_0_outputs";
    auto violations = ir::validate_program(p);
    bool single_producer = false;
    for (const auto& v : violations)
        if (v.message.find("single-producer") != std::string::npos) single_producer = true;
    CHECK(single_producer);
}

TEST_CASE("serialize/deserialize round-trips structurally and bytewise") {
    auto p = make_icl_program();
    auto text = ir::serialize(p);
    auto q = ir::deserialize(text);
    CHECK(ir::structurally_equal(p, q));
    CHECK(ir::serialize(q) == text);  // canonical ordering -> byte stable

    Rng rng(42);
    for (int i = 0; i < 10; ++i) {
        auto r = random_program(rng);
        auto t1 = ir::serialize(r);
        auto r2 = ir::deserialize(t1);
        auto t2 = ir::serialize(r2);
        CHECK(t1 == t2);
    }
}

TEST_CASE("deserialize: truncated and malformed documents fail with a locus") {
    auto text = ir::serialize(make_icl_program());
    CHECK_THROWS_AS(ir::deserialize(text.substr(0, text.size() / 2)), ParseError);
    CHECK_THROWS_AS(ir::deserialize("{}"), ParseError);
    CHECK_THROWS_WITH_AS(ir::deserialize("not json"), doctest::Contains("line"), ParseError);
}

TEST_CASE("program_stats: reads by layer for the induction program") {
    auto p = make_icl_program();
    auto stats = ir::program_stats(p);
    REQUIRE(stats.reads_by_layer.size() == 2);
    CHECK(stats.reads_by_layer[0].by_role["key"]["positions"] == doctest::Approx(1.0));
    CHECK(stats.reads_by_layer[0].by_role["query"]["positions"] == doctest::Approx(1.0));
    CHECK(stats.reads_by_layer[0].by_role["value"]["tokens"] == doctest::Approx(1.0));
    CHECK(stats.reads_by_layer[1].by_role["key"]["attn"] == doctest::Approx(1.0));
    CHECK(stats.reads_by_layer[1].by_role["query"]["tokens"] == doctest::Approx(1.0));
}

TEST_CASE("program_stats: empty layer list gives an empty record") {
    auto p = make_icl_program();
    p.layers.clear();
    p.classifier.weights.clear();
    zero_weights(p);
    auto stats = ir::program_stats(p);
    CHECK(stats.reads_by_layer.empty());
}
