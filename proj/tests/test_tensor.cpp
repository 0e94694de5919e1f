#include "uld/tensor.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "uld/rng.hpp"

using namespace uld;

namespace {

// Independent triple-loop product used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t kk = 0; kk < k; ++kk) out[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return out;
}

}  // namespace

TEST_CASE("tensor shape invariant") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5, 0.0)), ShapeError);
  Tensor<double> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(Tensor<double>::scalar(1.5).numel() == 1);
}

TEST_CASE("matmul identity and oracle") {
  auto a = Tensor<double>::matrix({{1, 2}, {3, 4}});
  auto eye = Tensor<double>::matrix({{1, 0}, {0, 1}});
  auto r = matmul(a, eye);
  CHECK(r.values() == a.values());

  auto b = Tensor<double>::matrix({{5}, {6}});
  auto ab = matmul(a, b);
  auto expect = naive_matmul(a.values(), b.values(), 2, 2, 1);
  CHECK(ab[0] == Catch::Approx(expect[0]));
  CHECK(ab[1] == Catch::Approx(expect[1]));
  CHECK(ab[0] == Catch::Approx(17.0));
  CHECK(ab[1] == Catch::Approx(39.0));

  Rng rng(11);
  auto x = Tensor<double>::randn({4, 5}, rng, 1.0);
  auto y = Tensor<double>::randn({5, 3}, rng, 1.0);
  auto xy = matmul(x, y);
  auto oracle = naive_matmul(x.values(), y.values(), 4, 5, 3);
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(xy[i] == Catch::Approx(oracle[i]));
}

TEST_CASE("matmul annihilator and shape errors") {
  Tensor<double> z({2, 3});
  Rng rng(3);
  auto any = Tensor<double>::randn({3, 4}, rng, 1.0);
  auto r = matmul(z, any);
  for (std::size_t i = 0; i < r.numel(); ++i) CHECK(r[i] == 0.0);
  CHECK_THROWS_AS(matmul(any, z), ShapeError);
}

TEST_CASE("softmax basics") {
  auto s = softmax(Tensor<double>::vector({0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(s[i] == Catch::Approx(1.0 / 3.0));

  auto t = softmax(Tensor<double>::vector({0.0, std::log(2.0)}));
  CHECK(t[0] == Catch::Approx(1.0 / 3.0));
  CHECK(t[1] == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("softmax shift invariance and simplex property") {
  Rng rng(99);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t v = 2 + static_cast<std::size_t>(rng.uniform_int(6));
    auto x = Tensor<double>::randn({v}, rng, 5.0);
    const double c = (rng.uniform() * 2.0 - 1.0) * 50.0;
    auto shifted = x.clone();
    for (std::size_t i = 0; i < v; ++i) shifted[i] += c;
    auto a = softmax(x);
    auto b = softmax(shifted);
    double total = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      CHECK(std::abs(a[i] - b[i]) < 1e-6);
      CHECK(a[i] >= 0.0);
      CHECK(a[i] <= 1.0);
      total += a[i];
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("cross entropy hand values") {
  CHECK(cross_entropy_logits(Tensor<double>::vector({0, 0}), 0).item() ==
        Catch::Approx(std::log(2.0)));
  CHECK(cross_entropy_logits(Tensor<double>::vector({1, 0}), 0).item() ==
        Catch::Approx(std::log(1.0 + std::exp(-1.0))));
  auto near_certain = cross_entropy_logits(Tensor<double>::vector({20, 0, 0, 0}), 0);
  CHECK(near_certain.item() < 1e-6);
  CHECK(near_certain.item() >= 0.0);
  CHECK_THROWS_AS(cross_entropy_logits(Tensor<double>::vector({0, 0}), 2), std::out_of_range);
}

TEST_CASE("cross entropy is nonnegative and gradient is softmax minus onehot") {
  Rng rng(5);
  for (int rep = 0; rep < 30; ++rep) {
    auto x = Tensor<double>::randn({5}, rng, 3.0);
    const int target = rng.uniform_int(5);
    CHECK(cross_entropy_logits(x, target).item() >= 0.0);

    x.set_requires_grad(true);
    x.zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    tape.backward(cross_entropy_logits(x, target));
    auto probs = softmax(x);
    for (std::size_t i = 0; i < 5; ++i) {
      const double expect = probs[i] - (static_cast<int>(i) == target ? 1.0 : 0.0);
      CHECK(x.grad()[i] == Catch::Approx(expect).margin(1e-12));
    }
  }
}

TEST_CASE("rms_norm hand values") {
  auto gain = Tensor<double>::vector({1, 1});
  auto a = rms_norm(Tensor<double>::vector({2.5, 2.5}), gain);
  CHECK(a[0] == Catch::Approx(1.0).epsilon(1e-4));
  CHECK(a[1] == Catch::Approx(1.0).epsilon(1e-4));

  auto b = rms_norm(Tensor<double>::vector({3, 4}), gain);
  CHECK(b[0] == Catch::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-4));
  CHECK(b[1] == Catch::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-4));

  auto zero_gain = rms_norm(Tensor<double>::vector({3, 4}), Tensor<double>::vector({0, 0}));
  CHECK(zero_gain[0] == 0.0);
  CHECK(zero_gain[1] == 0.0);
}

TEST_CASE("backward on linear and quadratic nodes") {
  auto x = Tensor<double>::vector({1, 2, 3});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    tape.backward(sum(x));
  }
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);

  auto y = Tensor<double>::scalar(3.0);
  y.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  auto loss = mul(y, y);
  tape.backward(loss);
  CHECK(y.grad()[0] == Catch::Approx(6.0));
  tape.backward(loss);  // repeated call accumulates
  CHECK(y.grad()[0] == Catch::Approx(12.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor<double>::vector({1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(&tape);
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("tape holds zero nodes after reset") {
  Tape<double> tape;
  CHECK(tape.size() == 0);
  Tape<double>::Scope scope(&tape);
  auto x = Tensor<double>::vector({1, 2});
  x.set_requires_grad(true);
  auto y = sum(scale(x, 2.0));
  (void)y;
  CHECK(tape.size() == 2);
  tape.reset();
  CHECK(tape.size() == 0);
}

TEST_CASE("projected cross entropy matches central differences") {
  Rng rng(17);
  auto w = Tensor<double>::randn({4, 6}, rng, 0.5);
  auto x = Tensor<double>::randn({1, 4}, rng, 1.0);
  const int target = 2;
  auto loss_fn = [&](Tensor<double>& inp) {
    auto logits = matmul(inp, w);
    auto row = slice_cols(logits, 0, 6);
    std::vector<int> targets{target};
    return masked_ce_sum(row, targets);
  };
  CHECK(finite_diff_check(loss_fn, x, 1e-5) < 1e-4);
}

TEST_CASE("finite_diff_check on exact quadratic and constant") {
  auto x = Tensor<double>::vector({1, 2, 3});
  auto quad = [](Tensor<double>& v) { return sum(mul(v, v)); };
  CHECK(finite_diff_check(quad, x, 1e-5) < 1e-6);

  auto y = Tensor<double>::vector({1, 2, 3});
  auto constant = [](Tensor<double>& v) { return scale(sum(mul(v, Tensor<double>({3}, 0.0))), 1.0); };
  CHECK(finite_diff_check(constant, y, 1e-5) < 1e-9);
}

TEST_CASE("composite op chain passes gradient check") {
  Rng rng(23);
  auto w = Tensor<double>::randn({3, 4}, rng, 0.7);
  auto gain = Tensor<double>::randn({4}, rng, 0.5);
  auto x = Tensor<double>::randn({2, 3}, rng, 1.0);
  auto f = [&](Tensor<double>& inp) {
    auto h = rms_norm(matmul(inp, w), gain);
    auto act = silu(h);
    auto probs = softmax(causal_mask(matmul_nt(act, act)));
    auto mixed = matmul(probs, act);
    std::vector<int> targets{1, 3};
    auto ce = masked_ce_sum(mixed, targets);
    return add(ce, scale(sum(logsigmoid(mixed)), 0.25));
  };
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("rope and slice/concat gradients") {
  Rng rng(31);
  auto x = Tensor<double>::randn({3, 8}, rng, 1.0);
  auto f = [&](Tensor<double>& inp) {
    auto r = rope(inp, 2);
    auto left = slice_cols(r, 0, 4);
    auto right = slice_cols(r, 4, 4);
    auto glued = concat_cols(std::vector<Tensor<double>>{right, left});
    std::vector<int> targets{2, -1, 5};
    return masked_ce_sum(glued, targets);
  };
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("uniform and kl fused losses match central differences") {
  Rng rng(41);
  auto x = Tensor<double>::randn({3, 5}, rng, 1.2);
  auto ref = Tensor<double>::randn({3, 5}, rng, 1.2);
  std::vector<bool> mask{true, false, true};
  auto fu = [&](Tensor<double>& inp) { return uniform_ce_sum(inp, mask); };
  CHECK(finite_diff_check(fu, x, 1e-5) < 1e-4);
  auto fk = [&](Tensor<double>& inp) { return kl_divergence_sum(inp, ref, mask); };
  CHECK(finite_diff_check(fk, x, 1e-5) < 1e-4);
}

TEST_CASE("backward reproduces bitwise identical gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto w = Tensor<double>::randn({4, 4}, rng, 0.9);
    auto x = Tensor<double>::randn({2, 4}, rng, 1.0);
    w.set_requires_grad(true);
    Tape<double> tape;
    Tape<double>::Scope scope(&tape);
    auto h = silu(matmul(x, w));
    std::vector<int> targets{0, 3};
    tape.backward(masked_ce_sum(h, targets));
    return w.grad();
  };
  auto g1 = run(7);
  auto g2 = run(7);
  CHECK(g1 == g2);  // element-for-element bitwise equality
}
