#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "dlra/rng.hpp"
#include "dlra/tensor.hpp"
#include "support.hpp"

using dlra::TensorD;
using dlra::TensorF;

namespace {

TensorD randn2(std::size_t m, std::size_t n, dlra::Rng& rng) {
    return TensorD::randn({m, n}, rng);
}

void clear_tape() { dlra::Tape<double>::instance().clear(); }

}  // namespace

TEST_CASE("matmul identity and 1x1") {
    auto i2 = TensorD::from({2, 2}, {1, 0, 0, 1});
    auto b = TensorD::from({2, 2}, {3, 4, 5, 6});
    auto c = dlra::matmul(i2, b);
    CHECK(c.values() == std::vector<double>{3, 4, 5, 6});

    auto p = dlra::matmul(TensorD::from({1, 1}, {2}), TensorD::from({1, 1}, {3}));
    CHECK(p.item() == 6.0);
}

TEST_CASE("matmul rejects mismatched inner extents and names both shapes") {
    auto a = TensorD::zeros({2, 3});
    auto b = TensorD::zeros({2, 2});
    try {
        dlra::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const dlra::ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradients match finite differences on 4x5 * 5x3") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        dlra::Rng rng(seed);
        auto a = randn2(4, 5, rng);
        auto b = randn2(5, 3, rng);
        auto r = randn2(4, 3, rng);  // fixed weighting so the loss is scalar
        auto rep = testsup::fd_check({a, b}, [&] { return dlra::sum(dlra::mul(dlra::matmul(a, b), r)); });
        CHECK(rep.max_rel_err < 1e-6);
        CHECK(rep.checked == 4 * 5 + 5 * 3);
    }
}

TEST_CASE("relu and gelu fixed points") {
    auto x = TensorD::from({1, 3}, {-1.0, 2.0, 0.0});
    auto r = dlra::relu(x);
    CHECK(r.values() == std::vector<double>{0.0, 2.0, 0.0});
    auto g = dlra::gelu(TensorD::from({1, 1}, {0.0}));
    CHECK(g.item() == 0.0);
}

TEST_CASE("gelu gradient at 0.7 matches finite differences") {
    auto x = TensorD::from({1, 1}, {0.7});
    auto rep = testsup::fd_check({x}, [&] { return dlra::sum(dlra::gelu(x)); });
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("add and sub reject shape mismatch") {
    auto a = TensorD::zeros({2, 2});
    auto b = TensorD::zeros({2, 3});
    CHECK_THROWS_AS(dlra::add(a, b), dlra::ShapeError);
    CHECK_THROWS_AS(dlra::sub(a, b), dlra::ShapeError);
}

TEST_CASE("softmax symmetry, shift invariance, normalization") {
    auto y0 = dlra::softmax(TensorD::from({1, 2}, {0.0, 0.0}));
    CHECK(y0.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y0.values()[1] == doctest::Approx(0.5).epsilon(1e-12));

    auto y1 = dlra::softmax(TensorD::from({1, 2}, {1000.0, 1000.0}));
    CHECK(std::isfinite(y1.values()[0]));
    CHECK(y1.values()[0] == doctest::Approx(0.5).epsilon(1e-12));

    dlra::Rng rng(7);
    auto x = randn2(4, 9, rng);
    auto y = dlra::softmax(x);
    for (std::size_t i = 0; i < 4; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
            CHECK(y.at(i, j) >= 0.0);
            s += y.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("layernorm constant row and standardization") {
    auto gamma = TensorD::filled({3}, 1.0);
    auto beta = TensorD::zeros({3});
    auto y = dlra::layernorm(TensorD::from({1, 3}, {5.0, 5.0, 5.0}), gamma, beta);
    CHECK(y.values() == std::vector<double>{0.0, 0.0, 0.0});

    dlra::Rng rng(3);
    const std::size_t d = 64;
    auto x = randn2(2, d, rng);
    auto g64 = TensorD::filled({d}, 1.0);
    auto b64 = TensorD::zeros({d});
    auto z = dlra::layernorm(x, g64, b64);
    for (std::size_t i = 0; i < 2; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += z.at(i, j);
        mean /= d;
        for (std::size_t j = 0; j < d; ++j) var += (z.at(i, j) - mean) * (z.at(i, j) - mean);
        var /= d;
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("layernorm gradients match finite differences") {
    dlra::Rng rng(11);
    auto x = randn2(3, 6, rng);
    auto gamma = TensorD::randn({6}, rng, 0.5, 1.0);
    auto beta = TensorD::randn({6}, rng, 0.1);
    auto r = randn2(3, 6, rng);
    auto rep = testsup::fd_check(
        {x, gamma, beta}, [&] { return dlra::sum(dlra::mul(dlra::layernorm(x, gamma, beta), r)); });
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("cross entropy uniform, saturated, bad label") {
    auto l0 = dlra::cross_entropy(TensorD::from({1, 2}, {0.0, 0.0}), {0});
    CHECK(l0.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto l1 = dlra::cross_entropy(TensorD::from({1, 2}, {1e9, 0.0}), {0});
    CHECK(l1.item() == 0.0);

    try {
        dlra::cross_entropy(TensorD::zeros({1, 3}), {5});
        FAIL("expected LabelError");
    } catch (const dlra::LabelError& e) {
        CHECK(std::string(e.what()).find("5") != std::string::npos);
    }
    CHECK_THROWS_AS(dlra::cross_entropy(TensorD::zeros({2, 3}), {0}), dlra::ShapeError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    dlra::Rng rng(21);
    auto logits = randn2(4, 6, rng);
    std::vector<int> labels{2, 0, 5, 3};
    auto rep = testsup::fd_check({logits}, [&] { return dlra::cross_entropy(logits, labels); });
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("backward requires scalar loss") {
    auto x = TensorD::from({1, 2}, {1.0, 2.0}).set_requires_grad(true);
    auto y = dlra::mul_scalar(x, 2.0);
    CHECK_THROWS_AS(dlra::backward(y), dlra::ShapeError);
    clear_tape();
}

TEST_CASE("fan-in within one pass sums contributions once") {
    clear_tape();
    auto x = TensorD::from({1, 1}, {3.0}).set_requires_grad(true);
    auto y = dlra::mul(x, x);          // x^2
    auto z = dlra::add(y, y);          // 2 x^2
    auto loss = dlra::sum(z);
    dlra::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.0).epsilon(1e-12));  // d(2x^2)/dx at 3
    clear_tape();
}

TEST_CASE("repeated backward accumulates into grad") {
    clear_tape();
    auto x = TensorD::from({1, 1}, {3.0}).set_requires_grad(true);
    auto loss = dlra::sum(dlra::mul(x, x));
    dlra::backward(loss);
    dlra::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(12.0).epsilon(1e-12));  // 6 + 6
    clear_tape();
}

TEST_CASE("accumulation linearity: backward(L1+L2) == backward(L1); backward(L2)") {
    dlra::Rng rng(5);
    auto w0 = randn2(3, 3, rng);
    auto x1 = randn2(2, 3, rng);
    auto x2 = randn2(2, 3, rng);

    auto run_joint = [&] {
        clear_tape();
        auto w = w0.clone_detached().set_requires_grad(true);
        auto l1 = dlra::sum(dlra::gelu(dlra::matmul(x1, w)));
        auto l2 = dlra::sum(dlra::relu(dlra::matmul(x2, w)));
        dlra::backward(dlra::add(l1, l2));
        clear_tape();
        return w.grad();
    };
    auto run_split = [&] {
        clear_tape();
        auto w = w0.clone_detached().set_requires_grad(true);
        auto l1 = dlra::sum(dlra::gelu(dlra::matmul(x1, w)));
        auto l2 = dlra::sum(dlra::relu(dlra::matmul(x2, w)));
        dlra::backward(l1);
        dlra::backward(l2);
        clear_tape();
        return w.grad();
    };
    auto gj = run_joint();
    auto gs = run_split();
    REQUIRE(gj.size() == gs.size());
    for (std::size_t i = 0; i < gj.size(); ++i) CHECK(gj[i] == doctest::Approx(gs[i]).epsilon(1e-12));
}

TEST_CASE("gradients are bit-identical across repeated runs") {
    auto run = [] {
        clear_tape();
        dlra::Rng rng(42);
        auto w = TensorD::randn({8, 8}, rng).set_requires_grad(true);
        auto x = TensorD::randn({4, 8}, rng);
        auto g = TensorD::filled({8}, 1.0);
        auto b = TensorD::zeros({8});
        auto h = dlra::layernorm(dlra::gelu(dlra::matmul(x, w)), g, b);
        auto loss = dlra::cross_entropy(h, {1, 2, 3, 4});
        dlra::backward(loss);
        clear_tape();
        return w.grad();
    };
    auto g1 = run();
    auto g2 = run();
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("global grad clip on [3,4]") {
    auto mk = [] {
        clear_tape();
        auto p = TensorD::from({1, 2}, {0.0, 0.0}).set_requires_grad(true);
        auto loss = dlra::sum(dlra::mul(p, TensorD::from({1, 2}, {3.0, 4.0})));
        dlra::backward(loss);
        clear_tape();
        return p;
    };
    auto p1 = mk();
    CHECK(dlra::global_grad_clip<double>({p1}, 10.0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(p1.grad() == std::vector<double>{3.0, 4.0});

    auto p2 = mk();
    CHECK(dlra::global_grad_clip<double>({p2}, 1.0) == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(p2.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(p2.grad()[1] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("multi-tensor clip equals clipping the concatenated vector") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        dlra::Rng rng(seed);
        clear_tape();
        auto a = randn2(2, 3, rng).set_requires_grad(true);
        auto b = randn2(3, 1, rng).set_requires_grad(true);
        auto loss = dlra::sum(dlra::matmul(a, b));
        dlra::backward(loss);
        clear_tape();

        std::vector<std::vector<double>> ref{a.grad(), b.grad()};
        const double maxn = 0.7;
        const double ref_norm = testsup::clip_concat_oracle(ref, maxn);
        const double norm = dlra::global_grad_clip<double>({a, b}, maxn);
        CHECK(norm == doctest::Approx(ref_norm).epsilon(1e-12));
        for (std::size_t i = 0; i < ref[0].size(); ++i)
            CHECK(a.grad()[i] == doctest::Approx(ref[0][i]).epsilon(1e-12));
        for (std::size_t i = 0; i < ref[1].size(); ++i)
            CHECK(b.grad()[i] == doctest::Approx(ref[1][i]).epsilon(1e-12));
    }
}

TEST_CASE("every differentiable op passes finite differences on random shapes") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        dlra::Rng rng(seed);
        const std::size_t m = 2 + rng.index(3);
        const std::size_t n = 2 + rng.index(4);

        auto a = randn2(m, n, rng);
        auto b = randn2(m, n, rng);
        auto r = randn2(m, n, rng);
        auto weighted = [&](const TensorD& t) { return dlra::sum(dlra::mul(t, r)); };

        auto rep = testsup::fd_check({a, b}, [&] { return weighted(dlra::add(a, b)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a, b}, [&] { return weighted(dlra::sub(a, b)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a, b}, [&] { return weighted(dlra::mul(a, b)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] { return weighted(dlra::mul_scalar(a, -1.7)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] { return dlra::sum(dlra::mul(dlra::transpose(a), dlra::transpose(r))); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] { return weighted(dlra::gelu(a)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] { return weighted(dlra::softmax(a)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] { return dlra::sum(dlra::mul(dlra::mean_rows(a), dlra::mean_rows(r))); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a}, [&] {
            auto s = dlra::slice_cols(a, 1, n);
            return dlra::sum(dlra::mul(s, dlra::slice_cols(r, 1, n)));
        });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({a, b}, [&] {
            auto cat = dlra::concat_cols<double>({a, b});
            return dlra::sum(dlra::mul(cat, dlra::concat_cols<double>({r, r})));
        });
        CHECK(rep.max_rel_err < 1e-4);

        // kinked ops, sampled away from the kink
        auto far = TensorD::zeros({m, n});
        for (auto& v : far.values()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
        rep = testsup::fd_check({far}, [&] { return weighted(dlra::relu(far)); });
        CHECK(rep.max_rel_err < 1e-4);
        rep = testsup::fd_check({far}, [&] { return weighted(dlra::abs_t(far)); });
        CHECK(rep.max_rel_err < 1e-4);

        auto s = TensorD::randn({n}, rng);
        rep = testsup::fd_check({a, s}, [&] { return weighted(dlra::scale_cols(a, s)); });
        CHECK(rep.max_rel_err < 1e-4);

        auto row1 = TensorD::randn({1, n}, rng);
        auto row2 = TensorD::randn({1, n}, rng);
        auto rw = TensorD::randn({2, n}, rng);
        rep = testsup::fd_check({row1, row2}, [&] {
            auto st = dlra::stack_rows<double>({row1, row2});
            return dlra::sum(dlra::mul(st, rw));
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("float tensors train the same graph without grad on frozen inputs") {
    dlra::Tape<float>::instance().clear();
    auto w = TensorF::from({2, 2}, {1.f, 2.f, 3.f, 4.f}).set_requires_grad(true);
    auto x = TensorF::from({1, 2}, {1.f, 1.f});  // frozen
    auto loss = dlra::sum(dlra::matmul(x, w));
    dlra::backward(loss);
    CHECK(w.grad() == std::vector<float>{1.f, 1.f, 1.f, 1.f});
    CHECK_FALSE(x.has_grad());
    dlra::Tape<float>::instance().clear();
}
