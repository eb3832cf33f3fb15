#include <doctest.h>

#include <cmath>
#include <vector>

#include "agconv/tensor.hpp"

using namespace agconv;

namespace {

Tensor t2(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) {
    return Tensor(Shape{r, c}, std::move(v), rg);
}

} // namespace

TEST_CASE("matmul basics") {
    Tensor eye = t2(2, 2, {1, 0, 0, 1});
    Tensor a = t2(2, 2, {1, 2, 3, 4});
    Tensor r = matmul(eye, a);
    CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

    Tensor proj = t2(2, 2, {1, 0, 0, 0});
    Tensor b = t2(2, 2, {5, 6, 7, 8});
    CHECK(matmul(proj, b).values() == std::vector<double>{5, 6, 0, 0});

    Tensor col = t2(2, 1, {2, 1});
    Tensor p = matmul(a, col);
    CHECK(p.shape() == Shape{2, 1});
    CHECK(p.values() == std::vector<double>{4, 10});

    CHECK_THROWS_AS(matmul(t2(2, 3, {1, 2, 3, 4, 5, 6}), t2(2, 2, {1, 2, 3, 4})), DimError);
}

TEST_CASE("matmul backward rules") {
    Tensor a = t2(2, 2, {1, 2, 3, 4}, true);
    Tensor b = t2(2, 2, {5, 6, 7, 8}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor c = matmul(a, b);
        Tensor loss = weighted_sum(c, {1, 1, 1, 1});
        backward(tape, loss);
    }
    // dA = dC*B^T with dC = ones: rows are [b00+b01, b10+b11]
    CHECK(a.grad() == std::vector<double>{11, 15, 11, 15});
    // dB = A^T*dC: rows are [a00+a10, ...]
    CHECK(b.grad() == std::vector<double>{4, 4, 6, 6});
}

TEST_CASE("leaky_relu") {
    Tensor x(Shape{3}, {3.0, 0.0, -5.0});
    Tensor y = leaky_relu(x, 0.2);
    CHECK(y.values()[0] == 3.0);
    CHECK(y.values()[1] == 0.0);
    CHECK(y.values()[2] == doctest::Approx(-1.0));
    CHECK_THROWS_AS(leaky_relu(x, 1.0), ContractError);
    CHECK_THROWS_AS(leaky_relu(x, -0.1), ContractError);
}

TEST_CASE("softmax_lastdim values") {
    Tensor u(Shape{3}, {0.0, 0.0, 0.0});
    Tensor su = softmax_lastdim(u);
    for (double v : su.values())
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    Tensor dom(Shape{3}, {1000.0, 0.0, 0.0});
    auto d = softmax_lastdim(dom).values();
    CHECK(std::abs(d[0] - 1.0) < 1e-12);
    CHECK(std::abs(d[1]) < 1e-12);
    CHECK(std::abs(d[2]) < 1e-12);

    Tensor l(Shape{3}, {std::log(2.0), std::log(1.0), std::log(1.0)});
    auto lv = softmax_lastdim(l).values();
    CHECK(lv[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(lv[1] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(lv[2] == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one for any finite input") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = Tensor::uniform(Shape{4, 9}, rng, -60.0, 60.0);
        Tensor y = softmax_lastdim(x);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 9; ++j)
                s += y.values()[i * 9 + j];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("reduce_max_rows") {
    Tensor x = t2(2, 2, {1, 5, 3, 2});
    MaxReduce r = reduce_max_rows(x);
    CHECK(r.values.shape() == Shape{2});
    CHECK(r.values.values() == std::vector<double>{3, 5});
    CHECK(r.argmax == std::vector<std::size_t>{1, 0});

    Tensor single = t2(1, 3, {4, 5, 6});
    MaxReduce s = reduce_max_rows(single);
    CHECK(s.values.values() == std::vector<double>{4, 5, 6});
    CHECK(s.argmax == std::vector<std::size_t>{0, 0, 0});

    Tensor dup = t2(3, 3, {4, 5, 6, 4, 5, 6, 4, 5, 6});
    CHECK(reduce_max_rows(dup).values.values() == std::vector<double>{4, 5, 6});
    // ties route to the lowest row
    CHECK(reduce_max_rows(dup).argmax == std::vector<std::size_t>{0, 0, 0});

    CHECK_THROWS_AS(reduce_max_rows(t2(0, 3, {})), SizeError);
}

TEST_CASE("reduce_max_rows is invariant under row permutation") {
    Rng rng(11);
    Tensor x = Tensor::uniform(Shape{6, 4}, rng, -2.0, 2.0);
    MaxReduce base = reduce_max_rows(x);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    std::vector<double> pv(24);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            pv[i * 4 + j] = x.values()[perm[i] * 4 + j];
    MaxReduce permuted = reduce_max_rows(t2(6, 4, pv));
    CHECK(base.values.values() == permuted.values.values()); // exact
}

TEST_CASE("max backward routes to lowest argmax row") {
    Tensor x = t2(2, 2, {1, 5, 1, 2}, true); // column 0 ties at 1
    Tape tape;
    {
        TapeScope scope(tape);
        MaxReduce r = reduce_max_rows(x);
        Tensor loss = weighted_sum(r.values, {1, 1});
        backward(tape, loss);
    }
    CHECK(x.grad() == std::vector<double>{1, 1, 0, 0});
}

TEST_CASE("concat_lastdim") {
    Tensor a(Shape{2}, {1, 2});
    Tensor b(Shape{1}, {3});
    CHECK(concat_lastdim(a, b).values() == std::vector<double>{1, 2, 3});

    Tensor empty(Shape{0}, std::vector<double>{});
    Tensor s(Shape{1}, {7});
    Tensor r = concat_lastdim(empty, s);
    CHECK(r.values() == std::vector<double>{7});

    Tensor c = t2(2, 1, {1, 2});
    Tensor d = t2(2, 1, {3, 4});
    CHECK(concat_lastdim(c, d).values() == std::vector<double>{1, 3, 2, 4});

    CHECK_THROWS_AS(concat_lastdim(t2(2, 1, {1, 2}), t2(3, 1, {1, 2, 3})), DimError);
}

TEST_CASE("backward contracts") {
    SUBCASE("linear map: grad of w is x") {
        Tensor w(Shape{3}, {1.0, -2.0, 0.5}, true);
        std::vector<double> x{4.0, 5.0, 6.0};
        Tape tape;
        {
            TapeScope scope(tape);
            backward(tape, weighted_sum(w, x));
        }
        CHECK(w.grad() == x);
    }
    SUBCASE("constant loss leaves grads zero") {
        Tensor w(Shape{2}, {1.0, 2.0}, true);
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor c = Tensor::scalar(5.0);
            backward(tape, c);
        }
        CHECK(w.grad() == std::vector<double>{0, 0});
    }
    SUBCASE("product rule") {
        Tensor w1 = Tensor::scalar(2.0, true);
        Tensor w2 = Tensor::scalar(3.0, true);
        Tape tape;
        {
            TapeScope scope(tape);
            backward(tape, mul(w1, w2));
        }
        CHECK(w1.grad()[0] == 3.0);
        CHECK(w2.grad()[0] == 2.0);
    }
    SUBCASE("loss must be scalar") {
        Tensor w(Shape{2}, {1.0, 2.0}, true);
        Tape tape;
        TapeScope scope(tape);
        Tensor y = add(w, w);
        CHECK_THROWS_AS(backward(tape, y), ContractError);
    }
    SUBCASE("multiply-used tensor accumulates sum of per-use gradients") {
        // loss = w*a + w*b + w*c -> dw = a + b + c
        Tensor w = Tensor::scalar(1.5, true);
        Tape tape;
        {
            TapeScope scope(tape);
            Tensor l = add(add(scale(w, 2.0), scale(w, 3.0)), scale(w, 5.0));
            backward(tape, l);
        }
        CHECK(w.grad()[0] == 10.0);
    }
}

TEST_CASE("grad_check oracle") {
    SUBCASE("quadratic") {
        Tensor w = Tensor::scalar(3.0, true);
        double err = grad_check([&] { return mul(w, w); }, {w}, 1e-6);
        CHECK(err < 1e-9);
        CHECK(w.grad()[0] == doctest::Approx(6.0));
    }
    SUBCASE("constant function") {
        Tensor w = Tensor::scalar(2.0, true);
        double err = grad_check([&] { return scale(w, 0.0); }, {w}, 1e-6);
        CHECK(err == 0.0);
    }
    SUBCASE("rejects non-positive eps") {
        Tensor w = Tensor::scalar(2.0, true);
        CHECK_THROWS_AS(grad_check([&] { return mul(w, w); }, {w}, 0.0), ContractError);
    }
}

TEST_CASE("grad_check validates every op backward rule") {
    Rng rng(23);
    const double tol = 1e-7;

    SUBCASE("matmul/add_bias/leaky chain") {
        Tensor x = Tensor::uniform(Shape{5, 3}, rng, -1, 1, true);
        Tensor w = Tensor::uniform(Shape{3, 4}, rng, -1, 1, true);
        Tensor b = Tensor::uniform(Shape{4}, rng, -1, 1, true);
        auto f = [&] {
            Tensor y = leaky_relu(add_bias(matmul(x, w), b), 0.2);
            return weighted_sum(y, std::vector<double>(20, 0.37));
        };
        CHECK(grad_check(f, {x, w, b}) < tol);
    }
    SUBCASE("softmax_lastdim") {
        Tensor x = Tensor::uniform(Shape{4, 5}, rng, -2, 2, true);
        std::vector<double> proj;
        for (int i = 0; i < 20; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(softmax_lastdim(x), proj); };
        CHECK(grad_check(f, {x}) < tol);
    }
    SUBCASE("neighborhood softmax and max") {
        Tensor x = Tensor::uniform(Shape{12, 3}, rng, -2, 2, true);
        std::vector<double> proj;
        for (int i = 0; i < 12; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] {
            Tensor a = neighborhood_softmax(x, 4);
            MaxReduce m = neighborhood_max(mul(a, x), 4);
            return weighted_sum(m.values, {proj.begin(), proj.begin() + 9});
        };
        CHECK(grad_check(f, {x}) < 1e-6);
    }
    SUBCASE("gather/concat/sub") {
        Tensor x = Tensor::uniform(Shape{6, 3}, rng, -1, 1, true);
        std::vector<std::size_t> c{0, 1, 2, 3, 4, 5, 0, 2};
        std::vector<std::size_t> n{1, 1, 3, 0, 5, 4, 4, 2};
        std::vector<double> proj;
        for (int i = 0; i < 48; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] {
            Tensor fc = gather_rows(x, c);
            Tensor fn = gather_rows(x, n);
            Tensor d = concat_lastdim(fc, sub(fn, fc));
            return weighted_sum(d, proj);
        };
        CHECK(grad_check(f, {x}) < tol);
    }
    SUBCASE("edge_linear matches and differentiates") {
        Tensor x = Tensor::uniform(Shape{6, 3}, rng, -1, 1, true);
        Tensor w = Tensor::uniform(Shape{6, 4}, rng, -1, 1, true);
        Tensor b = Tensor::uniform(Shape{4}, rng, -1, 1, true);
        std::vector<std::size_t> c{0, 1, 2, 3, 4, 5, 0, 2};
        std::vector<std::size_t> n{1, 1, 3, 0, 5, 4, 4, 2};
        std::vector<double> proj;
        for (int i = 0; i < 32; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(edge_linear(w, b, x, c, n), proj); };
        CHECK(grad_check(f, {x, w, b}) < tol);
    }
    SUBCASE("edge_kernel_apply") {
        Tensor k = Tensor::uniform(Shape{5, 12}, rng, -1, 1, true); // c=3, M=4
        Tensor dx = Tensor::uniform(Shape{5, 3}, rng, -1, 1, true);
        std::vector<double> proj;
        for (int i = 0; i < 20; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(edge_kernel_apply(k, dx), proj); };
        CHECK(grad_check(f, {k, dx}) < tol);
    }
    SUBCASE("affine_norm") {
        Tensor x = Tensor::uniform(Shape{7, 3}, rng, -2, 2, true);
        Tensor g = Tensor::uniform(Shape{3}, rng, 0.5, 1.5, true);
        Tensor b = Tensor::uniform(Shape{3}, rng, -0.5, 0.5, true);
        std::vector<double> proj;
        for (int i = 0; i < 21; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(affine_norm(x, g, b), proj); };
        CHECK(grad_check(f, {x, g, b}) < 1e-6);
    }
    SUBCASE("cross entropy") {
        Tensor x = Tensor::uniform(Shape{1, 5}, rng, -2, 2, true);
        auto f = [&] { return cross_entropy(x, 3); };
        CHECK(grad_check(f, {x}) < tol);

        Tensor rows = Tensor::uniform(Shape{4, 3}, rng, -2, 2, true);
        std::vector<int> labels{0, 2, 1, 1};
        auto fr = [&] { return cross_entropy_rows(rows, labels); };
        CHECK(grad_check(fr, {rows}) < tol);
    }
    SUBCASE("row_scale and sparse_mix_rows") {
        Tensor m = Tensor::uniform(Shape{4, 3}, rng, -1, 1, true);
        Tensor s = Tensor::uniform(Shape{4}, rng, 0.1, 2.0, true);
        std::vector<double> proj;
        for (int i = 0; i < 12; ++i)
            proj.push_back(rng.uniform(-1, 1));
        auto f = [&] { return weighted_sum(row_scale(m, s), proj); };
        CHECK(grad_check(f, {m, s}) < tol);

        std::vector<std::size_t> idx{0, 1, 2, 3, 1, 0};
        std::vector<double> w{0.5, 0.3, 0.2, 0.9, 0.05, 0.05};
        auto fm = [&] {
            Tensor y = sparse_mix_rows(idx, w, 3, m);
            return weighted_sum(y, {proj.begin(), proj.begin() + 6});
        };
        CHECK(grad_check(fm, {m}) < tol);
    }
}

TEST_CASE("cross entropy values") {
    Tensor conf(Shape{1, 2}, {1000.0, 0.0});
    CHECK(std::abs(cross_entropy(conf, 0).value()) < 1e-12);
    CHECK_THROWS_AS(cross_entropy(conf, 2), ContractError);

    Tensor uni(Shape{1, 4}, {0.0, 0.0, 0.0, 0.0});
    CHECK(cross_entropy(uni, 2).value() == doctest::Approx(std::log(4.0)));

    Tensor two(Shape{1, 2}, {std::log(1.0), std::log(3.0)});
    CHECK(cross_entropy(two, 1).value() == doctest::Approx(-std::log(0.75)));
}

TEST_CASE("sgd momentum") {
    SUBCASE("first step equals plain sgd") {
        Parameter p("w", Tensor(Shape{1}, {1.0}));
        p.tensor.grad()[0] = 1.0;
        sgd_momentum_step(p, 0.1, 0.9);
        CHECK(p.momentum[0] == 1.0);
        CHECK(p.tensor.values()[0] == doctest::Approx(0.9));
        CHECK(p.tensor.grad()[0] == 0.0);
    }
    SUBCASE("zero grad leaves parameter unchanged") {
        Parameter p("w", Tensor(Shape{1}, {1.0}));
        sgd_momentum_step(p, 0.1, 0.9);
        CHECK(p.tensor.values()[0] == 1.0);
    }
    SUBCASE("second step accumulates momentum") {
        Parameter p("w", Tensor(Shape{1}, {0.0}));
        p.tensor.grad()[0] = 1.0;
        sgd_momentum_step(p, 0.1, 0.9);
        p.tensor.grad()[0] = 1.0;
        sgd_momentum_step(p, 0.1, 0.9);
        CHECK(p.momentum[0] == doctest::Approx(1.9));
        CHECK(p.tensor.values()[0] == doctest::Approx(-0.1 - 0.19));
    }
    SUBCASE("missing grad is a contract error") {
        Parameter p;
        p.name = "w";
        p.tensor = Tensor(Shape{1}, {1.0});
        CHECK_THROWS_AS(sgd_momentum_step(p, 0.1, 0.9), ContractError);
    }
}

TEST_CASE("cosine schedule") {
    CHECK(std::abs(cosine_lr(0, 100, 0.1, 0.001) - 0.1) < 1e-12);
    CHECK(std::abs(cosine_lr(100, 100, 0.1, 0.001) - 0.001) < 1e-12);
    CHECK(cosine_lr(50, 100, 0.1, 0.001) == doctest::Approx(0.0505).epsilon(1e-12));
    double prev = cosine_lr(0, 200, 0.1, 0.001);
    for (std::size_t t = 1; t <= 200; ++t) {
        double cur = cosine_lr(t, 200, 0.1, 0.001);
        CHECK(cur <= prev);
        prev = cur;
    }
    CHECK_THROWS_AS(cosine_lr(101, 100, 0.1, 0.001), ContractError);
    CHECK_THROWS_AS(cosine_lr(0, 0, 0.1, 0.001), ContractError);
}

TEST_CASE("tensor invariants") {
    Tensor z(Shape{0, 3}, std::vector<double>{});
    CHECK(z.numel() == 0);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1.0}), DimError);

    Tensor t(Shape{2}, {1.0, 2.0});
    CHECK(!t.has_grad());
    t.set_requires_grad(true);
    CHECK(t.has_grad());
    CHECK(t.grad().size() == 2);
}
