#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "tp/tape.hpp"

using namespace tprog;

namespace {

// Central-difference gradient of a scalar function of one tensor entry.
template <typename F>
double fd_grad(F&& f, std::vector<double>& x, size_t i, double h = 1e-6) {
    double keep = x[i];
    x[i] = keep + h;
    double up = f();
    x[i] = keep - h;
    double down = f();
    x[i] = keep;
    return (up - down) / (2 * h);
}

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

}  // namespace

TEST_CASE("tape: matmul/affine/gelu gradients match finite differences") {
    Rng rng(2024);
    std::vector<double> xv(12), wv(20), bv(5), cv(15);
    for (auto* v : {&xv, &wv, &bv, &cv})
        for (auto& e : *v) e = rng.next_normal();

    auto eval = [&](std::vector<double>* grad_param, std::vector<double>* sink) {
        ad::Tape tape;
        ad::Tensor* x = tape.leaf(xv.data(), 3, 4, grad_param == &xv ? sink->data() : nullptr);
        ad::Tensor* w = tape.leaf(wv.data(), 4, 5, grad_param == &wv ? sink->data() : nullptr);
        ad::Tensor* b = tape.leaf(bv.data(), 1, 5, grad_param == &bv ? sink->data() : nullptr);
        ad::Tensor* c = tape.leaf(cv.data(), 3, 5, grad_param == &cv ? sink->data() : nullptr);
        ad::Tensor* y = tape.gelu(tape.affine(x, w, b));
        ad::Tensor* z = tape.mul(y, c);
        ad::Tensor* ones5 = tape.tensor(5, 1);
        for (int i = 0; i < 5; ++i) ones5->v(i, 0) = 1.0;
        ad::Tensor* ones3 = tape.tensor(1, 3);
        for (int i = 0; i < 3; ++i) ones3->v(0, i) = 1.0;
        ad::Tensor* total = tape.matmul(ones3, tape.matmul(z, ones5));
        double value = total->val[0];
        if (grad_param) tape.backward(total);
        return value;
    };

    for (auto* param : {&xv, &wv, &bv, &cv}) {
        std::vector<double> grad(param->size(), 0.0);
        eval(param, &grad);
        for (size_t i = 0; i < param->size(); i += 3) {
            double fd = fd_grad([&] { return eval(nullptr, nullptr); }, *param, i);
            CHECK(rel_err(grad[i], fd) < 1e-5);
        }
    }
}

TEST_CASE("tape: softmax rows sum to one and grads check out") {
    Rng rng(77);
    std::vector<double> xv(16);
    for (auto& e : xv) e = rng.next_normal();
    std::vector<double> noise(16);
    for (auto& e : noise) e = rng.next_gumbel();

    for (bool causal : {false, true}) {
        auto eval = [&](std::vector<double>* sink) {
            ad::Tape tape;
            ad::Tensor* x = tape.leaf(xv.data(), 4, 4, sink ? sink->data() : nullptr);
            ad::Tensor* sm = tape.softmax_rows(x, 0.7, &noise, causal);
            for (int i = 0; i < 4; ++i) {
                double sum = 0;
                int limit = causal ? i + 1 : 4;
                for (int j = 0; j < limit; ++j) sum += sm->at(i, j);
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
            }
            ad::Tensor* w = tape.tensor(4, 4);
            for (size_t i = 0; i < 16; ++i) w->val[i] = 0.1 * static_cast<double>(i % 5);
            ad::Tensor* prod = tape.mul(sm, w);
            ad::Tensor* ones4 = tape.tensor(4, 1);
            for (int i = 0; i < 4; ++i) ones4->v(i, 0) = 1.0;
            ad::Tensor* ones1 = tape.tensor(1, 4);
            for (int i = 0; i < 4; ++i) ones1->v(0, i) = 1.0;
            ad::Tensor* total = tape.matmul(ones1, tape.matmul(prod, ones4));
            double value = total->val[0];
            if (sink) tape.backward(total);
            return value;
        };
        std::vector<double> grad(16, 0.0);
        eval(&grad);
        for (size_t i = 0; i < 16; i += 2) {
            double fd = fd_grad([&] { return eval(nullptr); }, xv, i);
            CHECK(rel_err(grad[i], fd) < 1e-5);
        }
    }
}

TEST_CASE("tape: adjust_scores implements bias and no-match mass") {
    ad::Tape tape;
    ad::Tensor* s = tape.tensor(4, 4);
    s->v(1, 0) = 1.0;
    s->v(1, 3) = 1.0;
    s->v(0, 2) = 1.0;
    auto bias = ad::distance_bias(8);
    ad::Tensor* a = tape.adjust_scores(s, bias, false);
    CHECK(a->at(1, 0) == doctest::Approx(bias[1]));  // distance 1
    CHECK(a->at(1, 3) == doctest::Approx(bias[2]));  // distance 2
    CHECK(a->at(2, 0) == doctest::Approx(1.0));      // no match: BOS mass
    CHECK(a->at(2, 1) == 0.0);
    CHECK(a->at(0, 2) == doctest::Approx(bias[2]));
    CHECK(a->at(0, 0) == doctest::Approx(0.0));

    ad::Tensor* h = tape.hard_rows(a, false);
    CHECK(h->at(1, 0) == 1.0);
    CHECK(h->at(2, 0) == 1.0);
    CHECK(h->at(0, 2) == 1.0);
}

TEST_CASE("tape: adjust_scores gradient on soft scores") {
    Rng rng(5150);
    std::vector<double> sv(25);
    for (auto& e : sv) e = rng.next_unit() * 0.8;
    auto bias = ad::distance_bias(6);
    for (bool causal : {false, true}) {
        auto eval = [&](std::vector<double>* sink) {
            ad::Tape tape;
            ad::Tensor* s = tape.leaf(sv.data(), 5, 5, sink ? sink->data() : nullptr);
            ad::Tensor* a = tape.adjust_scores(s, bias, causal);
            ad::Tensor* v1 = tape.tensor(5, 1);
            for (int i = 0; i < 5; ++i) v1->v(i, 0) = 1.0 + 0.3 * i;
            ad::Tensor* v2 = tape.tensor(1, 5);
            for (int i = 0; i < 5; ++i) v2->v(0, i) = 1.0 - 0.1 * i;
            ad::Tensor* total = tape.matmul(v2, tape.matmul(a, v1));
            double value = total->val[0];
            if (sink) tape.backward(total);
            return value;
        };
        std::vector<double> grad(25, 0.0);
        eval(&grad);
        for (size_t i = 0; i < 25; i += 2) {
            double fd = fd_grad([&] { return eval(nullptr); }, sv, i);
            CHECK(rel_err(grad[i], fd) < 1e-5);
        }
    }
}

TEST_CASE("tape: mix respects scales and accumulates gate grads") {
    std::vector<double> s1 = {1, 2, 3, 4}, s2 = {5, 6, 7, 8}, w = {0.25, 0.75};
    std::vector<double> wgrad(2, 0.0);
    ad::Tape tape;
    ad::Tensor* a = tape.leaf(s1.data(), 2, 2, nullptr);
    ad::Tensor* b = tape.leaf(s2.data(), 2, 2, nullptr);
    ad::Tensor* pi = tape.leaf(w.data(), 1, 2, wgrad.data());
    std::vector<ad::Tensor*> states = {a, b};
    ad::Tensor* out = tape.mix(states, pi, {1.0, 0.5});
    CHECK(out->at(0, 0) == doctest::Approx(0.25 * 1 + 0.75 * 0.5 * 5));
    ad::Tensor* ones2 = tape.tensor(2, 1);
    ones2->v(0, 0) = ones2->v(1, 0) = 1.0;
    ad::Tensor* ones1 = tape.tensor(1, 2);
    ones1->v(0, 0) = ones1->v(0, 1) = 1.0;
    ad::Tensor* total = tape.matmul(ones1, tape.matmul(out, ones2));
    tape.backward(total);
    CHECK(wgrad[0] == doctest::Approx(1 + 2 + 3 + 4));
    CHECK(wgrad[1] == doctest::Approx(0.5 * (5 + 6 + 7 + 8)));
}

TEST_CASE("tape: ce_sum masks negative targets") {
    std::vector<double> lv = {0.0, 0.0, 1.0, -1.0, 2.0, 0.0};
    ad::Tape tape;
    ad::Tensor* logits = tape.leaf(lv.data(), 3, 2, nullptr);
    ad::Tensor* l = tape.ce_sum(logits, {0, -1, 1});
    double expect = -std::log(0.5) - std::log(std::exp(0.0) / (std::exp(2.0) + std::exp(0.0)));
    CHECK(l->val[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("distance bias: endpoints and monotonicity") {
    auto b = ad::distance_bias(10);
    CHECK(b[0] == doctest::Approx(0.1));
    CHECK(b[1] == doctest::Approx(1.0));
    CHECK(b[10] == doctest::Approx(0.1));
    for (int d = 1; d < 10; ++d) CHECK(b[d] > b[d + 1]);
    for (int d = 1; d < 10; ++d) CHECK(b[0] < b[d]);
    auto b1 = ad::distance_bias(1);
    CHECK(b1[0] == doctest::Approx(1.0));
}
