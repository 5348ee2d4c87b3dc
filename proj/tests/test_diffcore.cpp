// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "slotmerge/checkpoint.hpp"
#include "slotmerge/gradcheck.hpp"
#include "slotmerge/rng.hpp"
#include "slotmerge/tensor.hpp"

using namespace slotmerge;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Scalar loss sum(op_output .* C) for a fixed random C, so every output
// entry is exercised with a distinct weight.
Tensor weighted_sum(Graph& g, const Tensor& t, const Tensor& weights) {
    return g.sum_all(g.mul(t, weights));
}

}  // namespace

TEST_CASE("matmul value examples") {
    Graph g;
    Tensor identity = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor prod = g.matmul(identity, m);
    CHECK(prod.at(0, 0) == 1.0);
    CHECK(prod.at(0, 1) == 2.0);
    CHECK(prod.at(1, 0) == 3.0);
    CHECK(prod.at(1, 1) == 4.0);

    Tensor selector = Tensor::from({1, 2}, {1, 0});
    Tensor col = Tensor::from({2, 1}, {2, 3});
    CHECK(g.matmul(selector, col).value() == 2.0);

    CHECK_THROWS_AS(g.matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(101);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    auto build = [&](Graph& g) { return g.sum_all(g.matmul(a, b)); };
    auto report = gradient_check(build, {{"a", a}, {"b", b}}, 1e-5);
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax examples") {
    Graph g;
    Tensor uniform = g.softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(uniform.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor extreme = g.softmax(Tensor::from({2}, {1000, 0}), 0);
    CHECK(extreme.at(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(extreme.at(1) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(extreme.all_finite());

    // outputs positive, sum to 1 within 1e-12 along the axis
    Rng rng(7);
    Tensor x = random_tensor({4, 5}, rng, false, -3.0, 3.0);
    Tensor rows = g.softmax(x, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(rows.at(i, j) > 0.0);
            s += rows.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Tensor cols = g.softmax(x, 0);
    for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += cols.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(11);
    Tensor x = random_tensor({4}, rng);
    Tensor w = random_tensor({4}, rng, false);
    auto build = [&](Graph& g) { return weighted_sum(g, g.softmax(x, 0), w); };
    CHECK(gradient_check(build, {{"x", x}}, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("layernorm examples") {
    Graph g;
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});

    // constant row collapses to zero thanks to the variance floor
    Tensor flat = g.layernorm(Tensor::full({1, 4}, 3.5), gain, bias);
    for (std::size_t j = 0; j < 4; ++j) CHECK(flat.at(0, j) == doctest::Approx(0.0));

    Tensor two = g.layernorm(Tensor::from({1, 2}, {1, -1}),
                             Tensor::full({2}, 1.0), Tensor::zeros({2}));
    CHECK(two.at(0, 0) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(two.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layernorm gradient matches finite differences") {
    Rng rng(13);
    Tensor x = random_tensor({3, 6}, rng);
    Tensor gain = random_tensor({6}, rng, true, 0.5, 1.5);
    Tensor bias = random_tensor({6}, rng);
    Tensor w = random_tensor({3, 6}, rng, false);
    auto build = [&](Graph& g) { return weighted_sum(g, g.layernorm(x, gain, bias), w); };
    auto report = gradient_check(build, {{"x", x}, {"gain", gain}, {"bias", bias}}, 1e-5);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("elementwise examples") {
    Graph g;
    CHECK(g.sigmoid(Tensor::scalar(0.0)).value() == 0.5);
    Tensor sums = g.sum(Tensor::from({2, 2}, {1, 2, 3, 4}), 0);
    CHECK(sums.at(0) == 4.0);
    CHECK(sums.at(1) == 6.0);
    Tensor row_sums = g.sum(Tensor::from({2, 2}, {1, 2, 3, 4}), 1);
    CHECK(row_sums.at(0) == 3.0);
    CHECK(row_sums.at(1) == 7.0);
}

TEST_CASE("composite expression gradient matches finite differences") {
    Rng rng(17);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 3}, rng, true, 0.5, 2.0);
    auto build = [&](Graph& g) {
        Tensor mixed = g.mul(g.sigmoid(a), g.tanh(b));
        Tensor divided = g.div(mixed, b, 1e-6);
        return g.sum_all(g.relu(g.sub(divided, g.scale(a, 0.25))));
    };
    CHECK(gradient_check(build, {{"a", a}, {"b", b}}, 1e-5).max_rel_err < 1e-5);
}

// Every registered op, checked against central finite differences on
// randomized inputs over many seeds.
TEST_CASE("all ops pass randomized finite-difference checks") {
    constexpr int kSeeds = 100;
    for (int seed = 0; seed < kSeeds; ++seed) {
        Rng rng(1000 + seed);

        struct OpCase {
            std::string name;
            std::vector<std::pair<std::string, Tensor>> leaves;
            std::function<Tensor(Graph&)> build;
        };
        std::vector<OpCase> cases;

        {
            Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
            cases.push_back({"matmul", {{"a", a}, {"b", b}}, [=](Graph& g) {
                                 return g.sum_all(g.matmul(a, b));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"transpose", {{"a", a}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.transpose(g.transpose(a)), w));
                             }});
        }
        {
            Tensor x = random_tensor({3, 4}, rng), w = random_tensor({4, 2}, rng),
                   b = random_tensor({2}, rng);
            Tensor c = random_tensor({3, 2}, rng, false);
            cases.push_back({"linear", {{"x", x}, {"w", w}, {"b", b}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.linear(x, w, b), c));
                             }});
        }
        {
            Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
            Tensor c = random_tensor({2, 3}, rng, false);
            cases.push_back({"add/sub/mul", {{"a", a}, {"b", b}}, [=](Graph& g) {
                                 return g.sum_all(
                                     g.mul(g.sub(g.add(a, b), g.mul(a, b)), c));
                             }});
        }
        {
            Tensor a = random_tensor({2, 3}, rng);
            Tensor b = random_tensor({2, 3}, rng, true, 0.5, 2.0);
            cases.push_back({"div", {{"a", a}, {"b", b}}, [=](Graph& g) {
                                 return g.sum_all(g.div(a, b, 1e-7));
                             }});
        }
        {
            Tensor a = random_tensor({5}, rng);
            Tensor w = random_tensor({5}, rng, false);
            cases.push_back({"unary chain", {{"a", a}}, [=](Graph& g) {
                                 Tensor t = g.exp(g.scale(g.tanh(a), 0.5));
                                 return weighted_sum(g, g.sigmoid(t), w);
                             }});
        }
        {
            Tensor a = random_tensor({4}, rng);
            Tensor w = random_tensor({4}, rng, false);
            cases.push_back({"relu", {{"a", a}}, [=](Graph& g) {
                                 // shift away from the kink at 0
                                 return weighted_sum(g, g.relu(g.add_const(a, 2.0)), w);
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor w0 = random_tensor({4}, rng, false), w1 = random_tensor({3}, rng, false);
            cases.push_back({"sum axes", {{"a", a}}, [=](Graph& g) {
                                 return g.add(weighted_sum(g, g.sum(a, 0), w0),
                                              weighted_sum(g, g.sum(a, 1), w1));
                             }});
        }
        {
            Tensor a = random_tensor({4, 5}, rng);
            Tensor w = random_tensor({2, 3}, rng, false);
            cases.push_back({"slice", {{"a", a}}, [=](Graph& g) {
                                 Tensor rows = g.slice(a, 0, 1, 2);
                                 return g.sum_all(g.mul(g.slice(rows, 1, 2, 3), w));
                             }});
        }
        {
            Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 2}, rng);
            Tensor w = random_tensor({2, 5}, rng, false);
            cases.push_back({"concat", {{"a", a}, {"b", b}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.concat(a, b, 1), w));
                             }});
        }
        {
            Tensor a = random_tensor({4, 3}, rng);
            std::vector<bool> keep = {true, false, true, true};
            Tensor w = random_tensor({3, 3}, rng, false);
            cases.push_back({"masked_select_rows", {{"a", a}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.masked_select_rows(a, keep), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng), r = random_tensor({4}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"replace_row", {{"a", a}, {"r", r}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.replace_row(a, 1, r), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng), c = random_tensor({3}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"replace_col", {{"a", a}, {"c", c}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.replace_col(a, 2, c), w));
                             }});
        }
        {
            Tensor v = random_tensor({4}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"tile_rows", {{"v", v}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.tile_rows(v, 3), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng), v = random_tensor({4}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"add_rowvec", {{"a", a}, {"v", v}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.add_rowvec(a, v), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor v = random_tensor({4}, rng, true, 0.5, 2.0);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"div_rowvec", {{"a", a}, {"v", v}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.div_rowvec(a, v, 1e-8), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng), v = random_tensor({3}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"mul_colvec", {{"a", a}, {"v", v}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.mul_colvec(a, v), w));
                             }});
        }
        {
            Tensor a = random_tensor({2, 3}, rng), s = random_tensor({1}, rng);
            Tensor w = random_tensor({2, 3}, rng, false);
            cases.push_back({"mul_scalar", {{"a", a}, {"s", s}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.mul_scalar(a, s), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"softmax axis1", {{"a", a}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.softmax(a, 1), w));
                             }});
            Tensor a2 = random_tensor({3, 4}, rng);
            cases.push_back({"softmax axis0", {{"a", a2}}, [=](Graph& g) {
                                 return g.sum_all(g.mul(g.softmax(a2, 0), w));
                             }});
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            std::vector<bool> active = {true, false, true, true};
            Tensor w = random_tensor({3, 4}, rng, false);
            cases.push_back({"softmax_masked_cols", {{"a", a}}, [=](Graph& g) {
                                 return g.sum_all(
                                     g.mul(g.softmax_masked_cols(a, active), w));
                             }});
        }

        for (auto& c : cases) {
            auto report = gradient_check(c.build, c.leaves, 1e-5);
            INFO("op " << c.name << " seed " << seed << " worst leaf "
                       << report.worst_leaf << "[" << report.worst_index << "] analytic "
                       << report.worst_analytic << " numeric " << report.worst_numeric);
            CHECK(report.max_rel_err < 1e-5);
        }
    }
}

TEST_CASE("gradcheck of f = sum(x) is exact with representable steps") {
    Tensor x = Tensor::from({2}, {0.25, 0.5}, true);
    auto build = [&](Graph& g) { return g.sum_all(x); };
    // h = 0.25 keeps every perturbed value exactly representable
    auto report = gradient_check(build, {{"x", x}}, 0.25);
    CHECK(report.max_rel_err == 0.0);

    Graph g;
    Tensor loss = g.sum_all(x);
    x.zero_grad();
    g.backward(loss);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("gradcheck of sum(softmax(x)^2)") {
    Rng rng(23);
    Tensor x = random_tensor({5}, rng);
    auto build = [&](Graph& g) {
        Tensor y = g.softmax(x, 0);
        return g.sum_all(g.mul(y, y));
    };
    CHECK(gradient_check(build, {{"x", x}}, 1e-5).max_rel_err < 1e-6);
}

TEST_CASE("gradcheck rejects non-finite losses") {
    Tensor x = Tensor::from({1}, {std::nan("")}, true);
    auto build = [&](Graph& g) { return g.sum_all(x); };
    CHECK_THROWS_AS(gradient_check(build, {{"x", x}}, 1e-5), CalibrationError);
}

TEST_CASE("forward replay is deterministic") {
    Rng rng_a(77), rng_b(77);
    Tensor xa = random_tensor({4, 4}, rng_a);
    Tensor xb = random_tensor({4, 4}, rng_b);
    Graph ga, gb;
    Tensor ya = ga.softmax(ga.matmul(xa, ga.transpose(xa)), 1);
    Tensor yb = gb.softmax(gb.matmul(xb, gb.transpose(xb)), 1);
    for (std::size_t i = 0; i < ya.numel(); ++i) CHECK(ya.at(i) == yb.at(i));
}

TEST_CASE("gradient accumulation is additive across backward passes") {
    Rng rng(31);
    Tensor x = random_tensor({3, 3}, rng);

    // separate graphs, separate sweeps
    Tensor grad_separate;
    {
        x.zero_grad();
        Graph g1;
        g1.backward(g1.sum_all(g1.mul(x, x)));
        Graph g2;
        g2.backward(g2.sum_all(g2.sigmoid(x)));
        grad_separate = Tensor::from({3, 3},
                                     std::vector<double>(x.grad().begin(), x.grad().end()));
    }
    // one graph, one combined loss
    {
        x.zero_grad();
        Graph g;
        Tensor combined = g.add(g.sum_all(g.mul(x, x)), g.sum_all(g.sigmoid(x)));
        g.backward(combined);
    }
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(grad_separate.at(i)).epsilon(1e-12));
}

TEST_CASE("repeated backward on one graph accumulates into leaves") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Graph g;
    Tensor loss = g.sum_all(g.mul(x, x));
    x.zero_grad();
    g.backward(loss);
    g.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(4.0));  // 2 * (2*x0)
    CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("backward leaves finite gradients on finite problems") {
    Rng rng(41);
    Tensor x = random_tensor({4, 4}, rng);
    Graph g;
    Tensor y = g.layernorm(g.softmax(x, 1), Tensor::full({4}, 1.0, true),
                           Tensor::zeros({4}, true));
    g.backward(g.sum_all(y));
    for (double v : x.grad()) CHECK(std::isfinite(v));
}

TEST_CASE("detach cuts the tape") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Graph g;
    Tensor y = g.mul(x, x);
    Tensor z = g.detach(y);
    CHECK_FALSE(z.requires_grad());
    Tensor loss = g.sum_all(g.mul_scalar(z, Tensor::scalar(2.0)));
    CHECK_FALSE(loss.requires_grad());
    x.zero_grad();
    g.backward(loss);
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("checkpoint container round-trips bit-exactly") {
    Rng rng(53);
    NamedTensors tensors;
    tensors.emplace_back("alpha", random_tensor({3, 4}, rng, false));
    tensors.emplace_back("beta", random_tensor({7}, rng, false));
    tensors.emplace_back("gamma", Tensor::scalar(-0.125));

    const std::string path = "ckpt_roundtrip_test.bin";
    save_checkpoint(path, tensors);
    NamedTensors loaded = load_checkpoint(path);
    REQUIRE(loaded.size() == tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        CHECK(loaded[i].first == tensors[i].first);
        REQUIRE(loaded[i].second.shape() == tensors[i].second.shape());
        for (std::size_t e = 0; e < tensors[i].second.numel(); ++e)
            CHECK(loaded[i].second.at(e) == tensors[i].second.at(e));
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects corrupt headers") {
    const std::string path = "ckpt_corrupt_test.bin";
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOTACKPT v9 1\n", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::remove(path.c_str());
}
