#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"
#include "ventrigen/ops.hpp"
#include "ventrigen/tensor.hpp"

using vgen::backward;
using vgen::build_tape;
using vgen::Tensor;

TEST_CASE("tensor invariants") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t.size() == 6);
    REQUIRE(t.shape() == vgen::Shape{2, 3});
    REQUIRE_THROWS_WITH(Tensor::from_values({2, 2}, {1, 2, 3}),
                        Catch::Matchers::ContainsSubstring("does not match"));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
    Tensor y = vgen::mul(x, x);
    REQUIRE_THROWS_WITH(backward(y), Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("sum of squares gradient") {
    Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
    Tensor loss = vgen::sum(vgen::mul(x, x));
    backward(loss);
    REQUIRE(x.grad_view() == std::vector<double>{2, 4, 6});
}

TEST_CASE("matmul column-sum gradient") {
    // loss = sum(A x) -> grad_x = column sums of A
    Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor x = Tensor::from_values({3, 1}, {1, 1, 1}, true);
    backward(vgen::sum(vgen::matmul(a, x)));
    REQUIRE(x.grad_view() == std::vector<double>{5, 7, 9});
}

TEST_CASE("repeated backward accumulates until zeroed") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tensor loss = vgen::sum(vgen::mul(x, x));
    backward(loss);
    backward(loss);
    REQUIRE(x.grad_view() == std::vector<double>{4, 8});
    x.zero_grad();
    backward(loss);
    REQUIRE(x.grad_view() == std::vector<double>{2, 4});
}

TEST_CASE("tape is topologically ordered") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tensor y = vgen::mul(x, x);
    Tensor z = vgen::add(y, x);
    Tensor loss = vgen::sum(z);
    auto tape = build_tape(loss);
    REQUIRE(tape.order.size() == 4);
    for (std::size_t i = 0; i < tape.order.size(); ++i) {
        for (const auto& parent : tape.order[i]->parents) {
            std::size_t pidx = tape.order.size();
            for (std::size_t j = 0; j < tape.order.size(); ++j) {
                if (tape.order[j].get() == parent.get()) pidx = j;
            }
            REQUIRE(pidx < i);
        }
    }
}

TEST_CASE("linearity of backward") {
    // grad of a*f + b*g equals a*grad(f) + b*grad(g)
    vgen::RngStream rng = vgen::make_stream(5, "linearity");
    Tensor x = vtest::random_tensor({4}, rng, true);
    auto f = [&](const Tensor& t) { return vgen::sum(vgen::mul(t, t)); };
    auto g = [&](const Tensor& t) { return vgen::sum(vgen::sigmoid(t)); };

    backward(f(x));
    std::vector<double> gf = x.grad_view();
    x.zero_grad();
    backward(g(x));
    std::vector<double> gg = x.grad_view();
    x.zero_grad();

    double a = 2.5, b = -1.25;
    backward(vgen::add(vgen::mul_scalar(f(x), a), vgen::mul_scalar(g(x), b)));
    for (std::size_t i = 0; i < x.size(); ++i) {
        REQUIRE_THAT(x.grad_view()[i],
                     Catch::Matchers::WithinRel(a * gf[i] + b * gg[i], 1e-12));
    }
}

TEST_CASE("identical seeds give bit-identical forward values") {
    auto run = [] {
        vgen::RngStream rng = vgen::make_stream(99, "determinism");
        Tensor x = vtest::random_tensor({2, 3, 8, 8}, rng, false);
        Tensor w = vtest::random_tensor({4, 3, 3, 3}, rng, false);
        Tensor y = vgen::conv2d(x, w, 1, 1);
        return y.values();
    };
    REQUIRE(run() == run());
}

TEST_CASE("no-grad mode records nothing") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    vgen::Tensor y;
    {
        vgen::NoGradGuard guard;
        y = vgen::mul(x, x);
    }
    REQUIRE_FALSE(y.requires_grad());
    REQUIRE(y.node()->parents.empty());
}

TEST_CASE("detach severs the graph") {
    Tensor x = Tensor::from_values({2}, {3, 4}, true);
    Tensor d = vgen::mul(x, x).detach();
    REQUIRE_FALSE(d.requires_grad());
    REQUIRE(d.values() == std::vector<double>{9, 16});
    REQUIRE(d.node()->parents.empty());
}
