#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "neft/errors.hpp"
#include "neft/rng.hpp"
#include "neft/tensor.hpp"

using namespace neft;

namespace {

Tensor random_f64(std::vector<std::int64_t> shape, Rng& rng, double scale = 1.0) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = rng.uniform(-scale, scale);
    return Tensor::of_f64(std::move(shape), std::move(data));
}

/// Central finite differences against the analytic gradients of `build`,
/// which must map leaf tensors to a scalar loss on the given tape.
void check_gradients(const std::vector<Tensor>& leaves,
                     const std::function<TensorId(Tape&, const std::vector<TensorId>&)>& build, double step = 1e-5,
                     double tol = 1e-4) {
    auto eval = [&](const std::vector<Tensor>& inputs) {
        Tape tape;
        std::vector<TensorId> ids;
        for (const auto& t : inputs) ids.push_back(tape.leaf(t));
        TensorId loss = build(tape, ids);
        return tape.value(loss).scalar_at(0);
    };

    Tape tape;
    std::vector<TensorId> ids;
    for (const auto& t : leaves) ids.push_back(tape.leaf(t));
    TensorId loss = build(tape, ids);
    std::vector<Tensor> grads = tape.backward(loss);

    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const Tensor& grad = grads[static_cast<std::size_t>(ids[k])];
        for (std::int64_t i = 0; i < leaves[k].numel(); ++i) {
            std::vector<Tensor> plus = leaves, minus = leaves;
            plus[k].set_scalar(i, leaves[k].scalar_at(i) + step);
            minus[k].set_scalar(i, leaves[k].scalar_at(i) - step);
            double numeric = (eval(plus) - eval(minus)) / (2.0 * step);
            double analytic = grad.scalar_at(i);
            double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            CHECK(std::abs(numeric - analytic) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("matmul against identity and a hand dot product") {
    Tape tape;
    TensorId a = tape.leaf(Tensor::of_f64({2, 2}, {1, 2, 3, 4}));
    TensorId eye = tape.leaf(Tensor::of_f64({2, 2}, {1, 0, 0, 1}));
    TensorId c = tape.matmul(a, eye);
    auto v = tape.value(c).f64();
    CHECK(v[0] == 1.0);
    CHECK(v[1] == 2.0);
    CHECK(v[2] == 3.0);
    CHECK(v[3] == 4.0);

    TensorId row = tape.leaf(Tensor::of_f64({1, 3}, {1, 2, 3}));
    TensorId col = tape.leaf(Tensor::of_f64({3, 1}, {4, 5, 6}));
    TensorId dot = tape.matmul(row, col);
    CHECK(tape.value(dot).f64()[0] == doctest::Approx(32.0).epsilon(1e-12));
}

TEST_CASE("add with the additive identity") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({3}, {1, 2, 3}));
    TensorId zero = tape.leaf(Tensor::zeros({3}, Dtype::f64));
    auto v = tape.value(tape.add(x, zero)).f64();
    CHECK(v[0] == 1.0);
    CHECK(v[1] == 2.0);
    CHECK(v[2] == 3.0);
}

TEST_CASE("matmul_nt multiplies by the transpose") {
    // A (1x3) times B (2x3)^T = (1x2)
    Tape tape;
    TensorId a = tape.leaf(Tensor::of_f64({1, 3}, {1, 2, 3}));
    TensorId b = tape.leaf(Tensor::of_f64({2, 3}, {4, 5, 6, 1, 0, -1}));
    auto v = tape.value(tape.matmul_nt(a, b)).f64();
    CHECK(v[0] == doctest::Approx(32.0));
    CHECK(v[1] == doctest::Approx(-2.0));
}

TEST_CASE("shape and dtype violations are reported") {
    Tape tape;
    TensorId a = tape.leaf(Tensor::of_f64({2, 3}, std::vector<double>(6, 1.0)));
    TensorId b = tape.leaf(Tensor::of_f64({2, 3}, std::vector<double>(6, 1.0)));
    CHECK_THROWS_WITH_AS(static_cast<void>(tape.matmul(a, b)), doctest::Contains("(2,3)"), ShapeError);
    TensorId f = tape.leaf(Tensor::of_f32({2, 3}, std::vector<float>(6, 1.0f)));
    CHECK_THROWS_AS(static_cast<void>(tape.add(a, f)), DtypeError);
    CHECK_THROWS_AS(static_cast<void>(tape.value(998)), Error);
}

TEST_CASE("backward of a plain sum is all ones") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({3}, {5, -1, 2}));
    TensorId loss = tape.sum_all(x);
    auto grads = tape.backward(loss);
    auto g = grads[static_cast<std::size_t>(x)].f64();
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
}

TEST_CASE("zero-scaled loss zeroes every gradient") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({2, 2}, {1, 2, 3, 4}));
    TensorId act = tape.activation(x, Activation::silu);
    TensorId loss = tape.scale(tape.sum_all(act), 0.0);
    auto grads = tape.backward(loss);
    auto g = grads[static_cast<std::size_t>(x)].f64();
    for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("backward requires a scalar loss and a live id") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
    CHECK_THROWS_AS(tape.backward(57), Error);
}

TEST_CASE("parameters off the loss path get zero gradients") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({2}, {1, 2}));
    TensorId unused = tape.leaf(Tensor::of_f64({2}, {3, 4}));
    TensorId loss = tape.sum_all(x);
    auto grads = tape.backward(loss);
    auto g = grads[static_cast<std::size_t>(unused)].f64();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("softmax cross entropy of uniform logits is ln C") {
    Tape tape;
    TensorId logits = tape.leaf(Tensor::of_f64({2, 3}, {0.7, 0.7, 0.7, -4, -4, -4}));
    TensorId loss = tape.softmax_cross_entropy(logits, {0, 2});
    CHECK(tape.value(loss).f64()[0] == doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("softmax cross entropy matches a direct evaluation") {
    Tape tape;
    TensorId logits = tape.leaf(Tensor::of_f64({1, 3}, {1, 2, 3}));
    TensorId loss = tape.softmax_cross_entropy(logits, {2});
    // -log(e^3 / (e^1 + e^2 + e^3))
    CHECK(tape.value(loss).f64()[0] == doctest::Approx(0.40760596444438079).epsilon(1e-14));
}

TEST_CASE("a 20-logit margin drives the loss below 1e-8") {
    Tape tape;
    TensorId logits = tape.leaf(Tensor::of_f64({1, 3}, {0, -20, -20}));
    TensorId loss = tape.softmax_cross_entropy(logits, {0});
    CHECK(tape.value(loss).f64()[0] < 1e-8);
    CHECK(tape.value(loss).f64()[0] > 0.0);
}

TEST_CASE("softmax cross entropy rejects bad labels and shapes") {
    Tape tape;
    TensorId logits = tape.leaf(Tensor::of_f64({1, 3}, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(static_cast<void>(tape.softmax_cross_entropy(logits, {3})), doctest::Contains("label 3"),
                         Error);
    CHECK_THROWS_AS(static_cast<void>(tape.softmax_cross_entropy(logits, {0, 1})), ShapeError);
}

TEST_CASE("embedding gather rejects out-of-range ids with the position") {
    Tape tape;
    TensorId table = tape.leaf(Tensor::of_f64({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7}));
    auto ok = tape.embedding_gather(table, {3, 0});
    CHECK(tape.value(ok).f64()[0] == 6.0);
    CHECK_THROWS_WITH_AS(static_cast<void>(tape.embedding_gather(table, {0, 9})), doctest::Contains("position 1"),
                         Error);
}

TEST_CASE("segment_mean averages ragged segments") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({3, 2}, {1, 2, 3, 4, 10, 20}));
    TensorId m = tape.segment_mean(x, {2, 1});
    auto v = tape.value(m).f64();
    CHECK(v[0] == doctest::Approx(2.0));
    CHECK(v[1] == doctest::Approx(3.0));
    CHECK(v[2] == doctest::Approx(10.0));
    CHECK(v[3] == doctest::Approx(20.0));
    CHECK_THROWS_AS(static_cast<void>(tape.segment_mean(x, {2, 2})), ShapeError);
}

TEST_CASE("bias_add broadcasts over rows only") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({2, 2}, {1, 2, 3, 4}));
    TensorId b = tape.leaf(Tensor::of_f64({2}, {10, 20}));
    auto v = tape.value(tape.bias_add(x, b)).f64();
    CHECK(v[0] == 11.0);
    CHECK(v[1] == 22.0);
    CHECK(v[2] == 13.0);
    CHECK(v[3] == 24.0);
}

TEST_CASE("activation forward values") {
    Tape tape;
    TensorId x = tape.leaf(Tensor::of_f64({3}, {-1.0, 0.0, 2.0}));
    auto relu = tape.value(tape.activation(x, Activation::relu)).f64();
    CHECK(relu[0] == 0.0);
    CHECK(relu[1] == 0.0);
    CHECK(relu[2] == 2.0);
    auto silu = tape.value(tape.activation(x, Activation::silu)).f64();
    CHECK(silu[2] == doctest::Approx(2.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
    auto gelu = tape.value(tape.activation(x, Activation::gelu)).f64();
    CHECK(gelu[2] == doctest::Approx(2.0 * 0.5 * (1.0 + std::erf(2.0 / std::sqrt(2.0)))).epsilon(1e-12));
    CHECK(gelu[1] == 0.0);
}

TEST_CASE("every primitive passes a finite-difference check") {
    Rng rng(2024);

    SUBCASE("matmul chain") {
        std::vector<Tensor> leaves{random_f64({3, 4}, rng), random_f64({4, 2}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.sum_all(t.activation(t.matmul(ids[0], ids[1]), Activation::silu));
        });
    }
    SUBCASE("matmul_nt") {
        std::vector<Tensor> leaves{random_f64({3, 4}, rng), random_f64({5, 4}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.sum_all(t.activation(t.matmul_nt(ids[0], ids[1]), Activation::gelu));
        });
    }
    SUBCASE("bias_add and add") {
        std::vector<Tensor> leaves{random_f64({4, 3}, rng), random_f64({3}, rng), random_f64({4, 3}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.sum_all(t.add(t.bias_add(ids[0], ids[1]), ids[2]));
        });
    }
    SUBCASE("scale") {
        std::vector<Tensor> leaves{random_f64({5}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.scale(t.sum_all(t.activation(ids[0], Activation::silu)), -1.7);
        });
    }
    SUBCASE("embedding gather") {
        std::vector<Tensor> leaves{random_f64({6, 3}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            // repeated ids exercise the scatter-add in the backward pass
            return t.sum_all(t.activation(t.embedding_gather(ids[0], {1, 4, 1, 0}), Activation::silu));
        });
    }
    SUBCASE("segment_mean") {
        std::vector<Tensor> leaves{random_f64({5, 3}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.sum_all(t.activation(t.segment_mean(ids[0], {2, 3}), Activation::gelu));
        });
    }
    SUBCASE("softmax cross entropy") {
        std::vector<Tensor> leaves{random_f64({4, 3}, rng, 2.0)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.softmax_cross_entropy(ids[0], {0, 2, 1, 2});
        });
    }
    SUBCASE("relu") {
        // keep values away from the kink at 0 for the finite difference
        std::vector<Tensor> leaves{Tensor::of_f64({4}, {-1.5, -0.3, 0.4, 2.0})};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            return t.sum_all(t.activation(ids[0], Activation::relu));
        });
    }
}

TEST_CASE("a random two-layer network matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(mix64(seed, "fd-net"));
        std::int64_t d = 4;
        std::vector<Tensor> leaves{random_f64({6, d}, rng), random_f64({8, d}, rng), random_f64({d, 8}, rng),
                                   random_f64({3, d}, rng)};
        check_gradients(leaves, [](Tape& t, const std::vector<TensorId>& ids) {
            TensorId x = t.embedding_gather(ids[0], {2, 5, 1, 0, 3});
            TensorId z = t.matmul_nt(x, ids[1]);
            TensorId a = t.activation(z, Activation::silu);
            TensorId y = t.matmul_nt(a, ids[2]);
            TensorId h = t.add(x, y);
            TensorId pooled = t.segment_mean(h, {3, 2});
            TensorId logits = t.matmul_nt(pooled, ids[3]);
            return t.softmax_cross_entropy(logits, {1, 0});
        });
    }
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [] {
        Rng rng(77);
        Tape tape;
        TensorId a = tape.leaf(random_f64({8, 6}, rng));
        TensorId b = tape.leaf(random_f64({7, 6}, rng));
        TensorId loss = tape.softmax_cross_entropy(tape.matmul_nt(a, b), {0, 1, 2, 3, 4, 5, 6, 0});
        auto grads = tape.backward(loss);
        return std::pair(grads[static_cast<std::size_t>(a)], grads[static_cast<std::size_t>(b)]);
    };
    auto r1 = run();
    auto r2 = run();
    auto a1 = r1.first.f64(), a2 = r2.first.f64();
    for (std::size_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == a2[i]);
    auto b1 = r1.second.f64(), b2 = r2.second.f64();
    for (std::size_t i = 0; i < b1.size(); ++i) CHECK(b1[i] == b2[i]);
}

TEST_CASE("dtype conversion and finiteness checks") {
    Tensor t = Tensor::of_f32({2}, {1.5f, -2.5f});
    Tensor d = t.to(Dtype::f64);
    CHECK(d.f64()[0] == 1.5);
    CHECK(d.f64()[1] == -2.5);
    CHECK(t.all_finite());
    Tensor bad = Tensor::of_f64({1}, {std::nan("")});
    CHECK(!bad.all_finite());
}

TEST_CASE("tensor construction validates shape") {
    CHECK_THROWS_AS(Tensor::of_f64({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0}, Dtype::f32), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({-1, 4}, Dtype::f32), ShapeError);
}
