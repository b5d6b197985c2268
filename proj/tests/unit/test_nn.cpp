#include <doctest.h>

#include <cmath>
#include <random>

#include "graphfree/nn/optim.hpp"
#include "graphfree/nn/tape.hpp"

using namespace graphfree::nn;

namespace {

Array<double> random_array(Shape shape, std::mt19937_64 &rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array<double> a(std::move(shape));
  for (auto &x : a.data) {
    x = u(rng);
  }
  return a;
}

using Builder = std::function<Var(Tape<double> &, const std::vector<Var> &)>;

double fd_error(const Builder &build, std::vector<Array<double>> inputs, double eps = 1e-6) {
  Objective f = [&](const std::vector<Array<double>> &params, std::vector<Array<double>> *grads) {
    Tape<double> tape;
    std::vector<Var> leaves;
    for (const auto &p : params) {
      leaves.push_back(tape.leaf(p, grads != nullptr));
    }
    Var loss = build(tape, leaves);
    if (grads) {
      tape.backward(loss);
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        (*grads)[i] = tape.grad(leaves[i]);
      }
    }
    return tape.value(loss).item();
  };
  return finite_difference_check(f, std::move(inputs), {.eps = eps, .floor = 1e-6}).max_rel_error;
}

// Weighted sum so every output coordinate gets a distinct adjoint.
Var probe(Tape<double> &t, Var x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Array<double> w = random_array(t.value(x).shape, rng);
  return t.sum(t.mul(x, t.leaf(std::move(w))));
}

} // namespace

TEST_SUITE("nn") {
  TEST_CASE("softmax of equal logits is uniform") {
    Tape<double> t;
    auto y = t.softmax_lastdim(t.leaf(Array<double>({2}, 0.0)));
    CHECK(t.value(y) == Array<double>({2}, {0.5, 0.5}));
  }

  TEST_CASE("cross entropy of uniform logits is ln V") {
    Tape<double> t;
    auto loss = t.cross_entropy(t.leaf(Array<double>({3, 8}, 0.25)), {1, 7, 3});
    CHECK(t.value(loss).item() == doctest::Approx(std::log(8.0)).epsilon(1e-14));
  }

  TEST_CASE("cross entropy ignores -1 targets") {
    std::mt19937_64 rng(3);
    auto logits = random_array({3, 5}, rng);
    Tape<double> a, b;
    auto all = a.cross_entropy(a.leaf(logits), {2, -1, 4});
    Array<double> kept({2, 5});
    std::copy_n(logits.data.begin(), 5, kept.data.begin());
    std::copy_n(logits.data.begin() + 10, 5, kept.data.begin() + 5);
    auto two = b.cross_entropy(b.leaf(kept), {2, 4});
    CHECK(a.value(all).item() == doctest::Approx(b.value(two).item()).epsilon(1e-14));
    Tape<double> c;
    CHECK_THROWS_AS(c.cross_entropy(c.leaf(logits), {-1, -1, -1}), std::invalid_argument);
  }

  TEST_CASE("rms_norm of a constant vector with unit gain is all ones") {
    Tape<double> t;
    auto y = t.rms_norm(t.leaf(Array<double>({2, 6}, 3.5)), t.leaf(Array<double>({6}, 1.0)), 0.0);
    for (double v : t.value(y).data) {
      CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    }
  }

  TEST_CASE("shape mismatch names both shapes") {
    Tape<double> t;
    auto a = t.leaf(Array<double>({2, 3}));
    auto b = t.leaf(Array<double>({4, 5}));
    try {
      t.matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError &e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2, 3]") != std::string::npos);
      CHECK(msg.find("[4, 5]") != std::string::npos);
    }
    CHECK_THROWS_AS(t.add(a, b), ShapeError);
    CHECK_THROWS_AS(t.mul(a, b), ShapeError);
  }

  TEST_CASE("backward of sum is all ones") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({3, 2}, 0.7), true);
    t.backward(t.sum(x));
    CHECK(t.grad(x) == Array<double>({3, 2}, 1.0));
  }

  TEST_CASE("backward of a scalar product follows the product rule") {
    Tape<double> t;
    auto x = t.leaf(Array<double>(Shape{}, 3.0), true);
    auto y = t.leaf(Array<double>(Shape{}, -2.0), true);
    t.backward(t.mul(x, y));
    CHECK(t.grad(x).item() == -2.0);
    CHECK(t.grad(y).item() == 3.0);
  }

  TEST_CASE("backward rejects a non-scalar loss") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({2}, 1.0), true);
    CHECK_THROWS_AS(t.backward(x), ShapeError);
  }

  TEST_CASE("masked pairs get exactly zero attention") {
    std::mt19937_64 rng(11);
    Tape<double> t;
    auto scores = t.leaf(random_array({1, 2, 3, 3}, rng, -5, 5));
    auto keep = std::make_shared<std::vector<std::uint8_t>>(
        std::vector<std::uint8_t>{1, 0, 0, 1, 1, 0, 1, 1, 1});
    auto p = t.value(t.softmax_lastdim(t.masked_fill(scores, keep)));
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t i = 0; i < 3; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
          const double a = p.data[(h * 3 + i) * 3 + j];
          if (!(*keep)[i * 3 + j]) {
            CHECK(a == 0.0);
          }
          row += a;
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-15));
      }
    }
  }

  TEST_CASE("each primitive's adjoint matches central differences") {
    std::mt19937_64 rng(2024);
    SUBCASE("matmul 2d and transposed") {
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.matmul(v[0], v[1]), 1); },
                     {random_array({4, 3}, rng), random_array({3, 5}, rng)}) < 1e-7);
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.matmul(v[0], v[1], true), 2); },
                     {random_array({2, 4, 3}, rng), random_array({5, 3}, rng)}) < 1e-7);
    }
    SUBCASE("batched matmul") {
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.matmul(v[0], v[1]), 3); },
                     {random_array({2, 3, 4}, rng), random_array({2, 4, 2}, rng)}) < 1e-7);
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.matmul(v[0], v[1], true), 4); },
                     {random_array({2, 3, 4}, rng), random_array({2, 5, 4}, rng)}) < 1e-7);
    }
    SUBCASE("add with broadcast, mul, scale, reshape") {
      CHECK(fd_error(
                [](auto &t, const auto &v) {
                  auto y = t.scale(t.mul(t.add(v[0], v[1]), v[0]), 1.7);
                  return probe(t, t.reshape(y, {6, 2}), 5);
                },
                {random_array({3, 4}, rng), random_array({4}, rng)}) < 1e-7);
    }
    SUBCASE("embedding lookup with repeated ids") {
      CHECK(fd_error(
                [](auto &t, const auto &v) {
                  return probe(t, t.embedding_lookup(v[0], {2, 0, 2, 4}), 6);
                },
                {random_array({5, 3}, rng)}) < 1e-7);
    }
    SUBCASE("rms_norm") {
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.rms_norm(v[0], v[1]), 7); },
                     {random_array({3, 6}, rng), random_array({6}, rng)}) < 1e-6);
    }
    SUBCASE("silu gate") {
      CHECK(fd_error([](auto &t, const auto &v) { return probe(t, t.silu_gate(v[0], v[1]), 8); },
                     {random_array({3, 4}, rng, -3, 3), random_array({3, 4}, rng)}) < 1e-7);
    }
    SUBCASE("masked softmax") {
      auto keep = std::make_shared<std::vector<std::uint8_t>>(
          std::vector<std::uint8_t>{1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1});
      CHECK(fd_error(
                [keep](auto &t, const auto &v) {
                  return probe(t, t.softmax_lastdim(t.masked_fill(v[0], keep)), 9);
                },
                {random_array({2, 2, 3, 3}, rng)}) < 1e-6);
    }
    SUBCASE("cross entropy") {
      CHECK(fd_error([](auto &t, const auto &v) { return t.cross_entropy(v[0], {1, -1, 0, 4}); },
                     {random_array({4, 6}, rng, -2, 2)}) < 1e-6);
    }
    SUBCASE("weighted mean absolute error") {
      Array<double> target({5}, 0.0);
      CHECK(fd_error(
                [target](auto &t, const auto &v) {
                  return t.mean_abs_error(v[0], target, {0.5, 1.0, 2.0, 1.0, 0.25});
                },
                {Array<double>({5}, {0.3, -0.7, 1.2, -0.4, 0.9})}) < 1e-8);
    }
    SUBCASE("head split, merge, gather, segment sum") {
      CHECK(fd_error(
                [](auto &t, const auto &v) {
                  auto h = t.split_heads(v[0], 2);
                  auto m = t.reshape(t.merge_heads(t.scale(h, 2.0)), {6, 4});
                  auto g = t.gather_rows(m, {5, 0, 3, 3});
                  return probe(t, t.segment_sum(g, {0, 1, 4}), 10);
                },
                {random_array({2, 3, 4}, rng)}) < 1e-7);
    }
  }

  TEST_CASE("random three-layer composite passes the gradient check") {
    std::mt19937_64 rng(7);
    auto build = [](Tape<double> &t, const std::vector<Var> &v) {
      Var h = v[0];
      for (int l = 0; l < 3; ++l) {
        Var x = t.rms_norm(h, v[1]);
        Var a = t.silu_gate(t.matmul(x, v[2]), t.matmul(x, v[3]));
        h = t.add(h, t.matmul(a, v[4]));
      }
      return t.cross_entropy(h, {0, 3, 2, 1, 4});
    };
    const double err = fd_error(build, {random_array({5, 6}, rng), random_array({6}, rng, 0.5, 1.5),
                                        random_array({6, 8}, rng), random_array({6, 8}, rng),
                                        random_array({8, 6}, rng)});
    CHECK(err < 1e-5);
  }

  TEST_CASE("gradient check of a linear map is exact") {
    std::mt19937_64 rng(5);
    Array<double> w = random_array({3, 2}, rng);
    const double err = fd_error(
        [w](auto &t, const auto &v) { return probe(t, t.matmul(v[0], t.leaf(w)), 12); },
        {random_array({4, 3}, rng)}, 1e-2);
    CHECK(err <= 1e-10);
    Objective f = [](const auto &p, auto *) { return p[0].data[0]; };
    CHECK_THROWS_AS(finite_difference_check(f, {Array<double>({1}, 1.0)}, {.eps = 0.0}),
                    std::invalid_argument);
  }

  TEST_CASE("adam first step moves by lr against the gradient sign") {
    std::vector<Array<double>> p{Array<double>({2}, {1.0, -1.0})};
    std::vector<Array<double>> g{Array<double>({2}, {0.3, -4.0})};
    auto state = AdamState<double>::zeros_like(p, {.eps = 1e-12});
    adam_step<double>(p, g, state, 0.01);
    CHECK(p[0].data[0] == doctest::Approx(0.99).epsilon(1e-9));
    CHECK(p[0].data[1] == doctest::Approx(-0.99).epsilon(1e-9));
    CHECK(state.step == 1);
  }

  TEST_CASE("adam leaves parameters alone for zero gradients and zero decay") {
    std::vector<Array<double>> p{Array<double>({3}, {1.0, 2.0, 3.0})};
    const auto before = p;
    std::vector<Array<double>> g{Array<double>({3}, 0.0)};
    auto state = AdamState<double>::zeros_like(p);
    for (int i = 0; i < 5; ++i) {
      adam_step<double>(p, g, state, 0.1);
    }
    CHECK(p == before);
  }

  TEST_CASE("adam decreases a convex quadratic") {
    std::vector<Array<double>> p{Array<double>({1}, 3.0)};
    auto state = AdamState<double>::zeros_like(p);
    double prev = 9.0;
    for (int i = 0; i < 100; ++i) {
      std::vector<Array<double>> g{Array<double>({1}, 2.0 * p[0].data[0])};
      adam_step<double>(p, g, state, 0.01);
      const double loss = p[0].data[0] * p[0].data[0];
      if (i >= 5) {
        CHECK(loss < prev);
      }
      prev = loss;
    }
  }

  TEST_CASE("adam is deterministic and validates shapes") {
    std::vector<Array<double>> a{Array<double>({2}, {0.5, 0.2})}, b = a;
    std::vector<Array<double>> g{Array<double>({2}, {0.1, -0.3})};
    auto sa = AdamState<double>::zeros_like(a), sb = AdamState<double>::zeros_like(b);
    adam_step<double>(a, g, sa, 0.1, 0.01);
    adam_step<double>(b, g, sb, 0.1, 0.01);
    CHECK(a == b);
    std::vector<Array<double>> wrong{Array<double>({3}, 0.0)};
    CHECK_THROWS_AS(adam_step<double>(a, wrong, sa, 0.1), ShapeError);
  }

  TEST_CASE("global norm clipping") {
    std::vector<Array<double>> g{Array<double>({2}, {120.0, 0.0}), Array<double>({1}, {160.0})};
    auto r = clip_global_norm<double>(g, 100.0);
    CHECK(r.norm == doctest::Approx(200.0));
    CHECK(r.clipped);
    CHECK(g[0].data[0] == doctest::Approx(60.0));
    CHECK(g[1].data[0] == doctest::Approx(80.0));

    std::vector<Array<double>> small{Array<double>({2}, {0.3, 0.4})};
    const auto copy = small;
    r = clip_global_norm<double>(small, 1.0);
    CHECK(r.norm == doctest::Approx(0.5));
    CHECK(small == copy);

    std::vector<Array<double>> bad{Array<double>({1}, {std::nan("")})};
    CHECK_FALSE(clip_global_norm<double>(bad, 1.0).finite);
    CHECK_THROWS_AS(clip_global_norm<double>(small, 0.0), std::invalid_argument);
  }

  TEST_CASE("post-clip norm never exceeds the limit") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> scale(0.01, 1000.0);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Array<double>> g{random_array({7}, rng), random_array({3, 2}, rng)};
      const double s = scale(rng);
      for (auto &a : g) {
        for (auto &x : a.data) {
          x *= s;
        }
      }
      clip_global_norm<double>(g, 1.0);
      double sq = 0.0;
      for (const auto &a : g) {
        for (double x : a.data) {
          sq += x * x;
        }
      }
      CHECK(std::sqrt(sq) <= 1.0 + 1e-9);
    }
  }
}
