#include <cmath>
#include <vector>

#include "doctest.h"
#include "mergefp/ops.hpp"
#include "mergefp/rng.hpp"
#include "mergefp/tensor.hpp"
#include "ref_math.hpp"

using namespace mergefp;
using refmath::Vec;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, bool requires_grad = true,
                     float scale = 1.0f) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (float& v : t.data()) v = rng.normal() * scale;
  return t;
}

Vec to_vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

void check_grad(std::span<const float> got, const Vec& fd, const char* what) {
  const int64_t bad = refmath::allclose_violation(got, fd, 1e-2, 1e-4);
  if (bad >= 0) {
    CAPTURE(what);
    CAPTURE(bad);
    CAPTURE(got[static_cast<size_t>(bad)]);
    CAPTURE(fd[static_cast<size_t>(bad)]);
  }
  CHECK(bad == -1);
}

}  // namespace

TEST_CASE("matmul identity and selector rows") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, m);
  CHECK(c.data()[0] == 1.0f);
  CHECK(c.data()[1] == 2.0f);
  CHECK(c.data()[2] == 3.0f);
  CHECK(c.data()[3] == 4.0f);

  Tensor sel = Tensor::from_data({2, 2}, {1, 0, 0, 0});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor s = matmul(sel, b);
  CHECK(s.data()[0] == 5.0f);
  CHECK(s.data()[1] == 6.0f);
  CHECK(s.data()[2] == 0.0f);
  CHECK(s.data()[3] == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient of sum(C) matches finite differences") {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor loss = sum(matmul(a, b));
  backward(loss);

  const Vec b_ref = to_vec(b);
  auto f = [&](const Vec& av) {
    Vec c = refmath::matmul(av, b_ref, 3, 4, 2);
    double s = 0.0;
    for (double v : c) s += v;
    return s;
  };
  check_grad(a.grad(), refmath::finite_diff(f, to_vec(a)), "matmul dA");
}

TEST_CASE("cross entropy trivial values") {
  // uniform logits, V=256 -> ln 256
  Tensor logits = Tensor::zeros({1, 256});
  std::vector<int> target{17};
  CHECK(softmax_cross_entropy(logits, target).item() ==
        doctest::Approx(std::log(256.0)).epsilon(1e-6));

  // +20 on the target -> ~0
  Tensor peaked = Tensor::zeros({1, 256});
  peaked.data()[17] = 20.0f;
  CHECK(softmax_cross_entropy(peaked, target).item() <= 1e-6f);

  // frozen hand-oracle: V=4, logits [1,2,3,4], target 3
  // value = log(e^1+e^2+e^3+e^4) - 4 = 0.4401896985611953...
  Tensor small = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  std::vector<int> t3{3};
  CHECK(softmax_cross_entropy(small, t3).item() ==
        doctest::Approx(0.4401896985611953).epsilon(1e-6));
}

TEST_CASE("cross entropy rejects out-of-range targets") {
  Tensor logits = Tensor::zeros({1, 4});
  std::vector<int> bad{4};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad), std::out_of_range);
}

TEST_CASE("backward contracts") {
  SUBCASE("loss = sum(x) gives all-ones") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("loss = sum(x*x) gives 2x") {
    Tensor x = Tensor::from_data({4}, {1, -2, 3, 0.5f}, true);
    backward(sum(mul(x, x)));
    for (size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]));
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tensor x = Tensor::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
  }
  SUBCASE("fresh graphs give bit-identical gradients") {
    Rng rng(11);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor w = random_tensor({3, 3}, rng);
    std::vector<float> first;
    for (int rep = 0; rep < 2; ++rep) {
      x.zero_grad();
      w.zero_grad();
      backward(sum(mul(matmul(x, w), matmul(x, w))));
      if (rep == 0) first.assign(x.grad().begin(), x.grad().end());
    }
    for (size_t i = 0; i < first.size(); ++i) CHECK(x.grad()[i] == first[i]);
  }
}

TEST_CASE("sgd_step") {
  SUBCASE("lr=0 leaves params unchanged") {
    Tensor p = Tensor::from_data({2}, {1.0f, 1.0f});
    std::vector<float> g{2.0f, -2.0f};
    sgd_step(p, g, 0.0f);
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == 1.0f);
  }
  SUBCASE("direct arithmetic") {
    Tensor p = Tensor::from_data({2}, {1.0f, 1.0f});
    std::vector<float> g{2.0f, -2.0f};
    sgd_step(p, g, 0.5f);
    CHECK(p.data()[0] == 0.0f);
    CHECK(p.data()[1] == 2.0f);
  }
  SUBCASE("one step on a quadratic reduces the loss") {
    // loss(w) = sum((w - c)^2)
    Tensor w = Tensor::from_data({3}, {3.0f, -1.0f, 0.5f}, true);
    Tensor c = Tensor::from_data({3}, {1.0f, 1.0f, 1.0f});
    auto loss_of = [&]() {
      Tensor d = sub(w, c);
      return sum(mul(d, d));
    };
    Tensor loss = loss_of();
    const float before = loss.item();
    backward(loss);
    sgd_step(w, w.grad(), 0.05f);
    NoGradGuard ng;
    CHECK(loss_of().item() < before);
  }
  SUBCASE("shape mismatch is an error") {
    Tensor p = Tensor::from_data({2}, {1.0f, 1.0f});
    std::vector<float> g{1.0f};
    CHECK_THROWS_AS(sgd_step(p, g, 0.1f), std::invalid_argument);
  }
}

TEST_CASE("no silent broadcasting") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(sub(a, b), std::invalid_argument);
  Tensor one = Tensor::zeros({3});
  CHECK_THROWS_AS(add(a, one), std::invalid_argument);
}

// Gradient correctness for every primitive over 100 random instances each,
// against double-precision central finite differences.
TEST_CASE("primitive gradients match finite differences over 100 instances") {
  Rng rng(1234);

  for (int inst = 0; inst < 100; ++inst) {
    // shapes vary per instance
    const int64_t m = 1 + static_cast<int64_t>(rng.below(4));
    const int64_t k = 1 + static_cast<int64_t>(rng.below(4));
    const int64_t n = 1 + static_cast<int64_t>(rng.below(4));

    SUBCASE("") {}  // keep doctest quiet about loops

    {  // matmul, both sides
      Tensor a = random_tensor({m, k}, rng);
      Tensor b = random_tensor({k, n}, rng);
      Tensor w = random_tensor({m, n}, rng, false);  // fixed weights make the loss non-trivial
      backward(sum(mul(matmul(a, b), Tensor::from_data({m, n}, std::vector<float>(w.data().begin(), w.data().end())))));
      const Vec av = to_vec(a), bv = to_vec(b), wv = to_vec(w);
      auto fa = [&](const Vec& x) {
        Vec c = refmath::matmul(x, bv, m, k, n);
        double s = 0.0;
        for (size_t i = 0; i < c.size(); ++i) s += c[i] * wv[i];
        return s;
      };
      auto fb = [&](const Vec& x) {
        Vec c = refmath::matmul(av, x, m, k, n);
        double s = 0.0;
        for (size_t i = 0; i < c.size(); ++i) s += c[i] * wv[i];
        return s;
      };
      check_grad(a.grad(), refmath::finite_diff(fa, av), "matmul dA weighted");
      check_grad(b.grad(), refmath::finite_diff(fb, bv), "matmul dB weighted");
    }

    {  // add / mul / scale
      Tensor a = random_tensor({m, n}, rng);
      Tensor b = random_tensor({m, n}, rng);
      backward(sum(mul(add(a, b), scale(a, 0.7f))));
      const Vec av = to_vec(a), bv = to_vec(b);
      auto f = [&](const Vec& x) {
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) s += (x[i] + bv[i]) * 0.7 * x[i];
        return s;
      };
      check_grad(a.grad(), refmath::finite_diff(f, av), "add/mul/scale dA");
    }

    {  // silu
      Tensor x = random_tensor({m, n}, rng);
      backward(sum(silu(x)));
      auto f = [&](const Vec& v) {
        double s = 0.0;
        for (double t : refmath::silu(v)) s += t;
        return s;
      };
      check_grad(x.grad(), refmath::finite_diff(f, to_vec(x)), "silu");
    }

    {  // softmax_rows (weighted sum to probe the full Jacobian)
      const int64_t cols = 2 + static_cast<int64_t>(rng.below(5));
      Tensor x = random_tensor({m, cols}, rng);
      Tensor w = random_tensor({m, cols}, rng, false);
      backward(sum(mul(softmax_rows(x), Tensor::from_data({m, cols}, std::vector<float>(w.data().begin(), w.data().end())))));
      const Vec wv = to_vec(w);
      auto f = [&](const Vec& v) {
        double s = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          Vec row(v.begin() + i * cols, v.begin() + (i + 1) * cols);
          Vec p = refmath::softmax_row(row);
          for (int64_t j = 0; j < cols; ++j) s += p[static_cast<size_t>(j)] * wv[i * cols + j];
        }
        return s;
      };
      check_grad(x.grad(), refmath::finite_diff(f, to_vec(x)), "softmax_rows");
    }

    {  // rmsnorm, x and weight
      const int64_t d = 2 + static_cast<int64_t>(rng.below(6));
      Tensor x = random_tensor({m, d}, rng);
      Tensor w = random_tensor({d}, rng);
      Tensor probe = random_tensor({m, d}, rng, false);
      backward(sum(mul(rmsnorm(x, w), Tensor::from_data({m, d}, std::vector<float>(probe.data().begin(), probe.data().end())))));
      const Vec xv = to_vec(x), wv = to_vec(w), pv = to_vec(probe);
      auto fx = [&](const Vec& v) {
        Vec y = refmath::rmsnorm(v, wv, m, d);
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += y[i] * pv[i];
        return s;
      };
      auto fw = [&](const Vec& v) {
        Vec y = refmath::rmsnorm(xv, v, m, d);
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += y[i] * pv[i];
        return s;
      };
      check_grad(x.grad(), refmath::finite_diff(fx, xv), "rmsnorm dx");
      check_grad(w.grad(), refmath::finite_diff(fw, wv), "rmsnorm dw");
    }

    {  // embedding gather
      const int64_t v_rows = 4 + static_cast<int64_t>(rng.below(4));
      const int64_t d = 2 + static_cast<int64_t>(rng.below(4));
      Tensor table = random_tensor({v_rows, d}, rng);
      std::vector<int> ids;
      for (int64_t i = 0; i < m + 1; ++i) ids.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(v_rows))));
      Tensor probe = random_tensor({static_cast<int64_t>(ids.size()), d}, rng, false);
      backward(sum(mul(embedding(table, ids), Tensor::from_data(probe.shape(), std::vector<float>(probe.data().begin(), probe.data().end())))));
      const Vec tv = to_vec(table), pv = to_vec(probe);
      auto f = [&](const Vec& t) {
        double s = 0.0;
        for (size_t i = 0; i < ids.size(); ++i) {
          for (int64_t j = 0; j < d; ++j) s += t[ids[i] * d + j] * pv[i * d + j];
        }
        return s;
      };
      check_grad(table.grad(), refmath::finite_diff(f, tv), "embedding table");
    }

    {  // cross entropy
      const int64_t v_cols = 3 + static_cast<int64_t>(rng.below(6));
      Tensor logits = random_tensor({m, v_cols}, rng);
      std::vector<int> targets;
      for (int64_t i = 0; i < m; ++i) targets.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(v_cols))));
      backward(softmax_cross_entropy(logits, targets));
      auto f = [&](const Vec& v) { return refmath::cross_entropy_mean(v, targets, v_cols); };
      check_grad(logits.grad(), refmath::finite_diff(f, to_vec(logits)), "cross entropy");
    }

    {  // causal attention, all three inputs
      const int heads = 2;
      const int64_t seq = 3, d = 4;  // hd = 2
      Tensor q = random_tensor({seq, d}, rng);
      Tensor k = random_tensor({seq, d}, rng);
      Tensor v = random_tensor({seq, d}, rng);
      Tensor probe = random_tensor({seq, d}, rng, false);
      backward(sum(mul(causal_attention(q, k, v, heads, seq), Tensor::from_data({seq, d}, std::vector<float>(probe.data().begin(), probe.data().end())))));
      const Vec qv = to_vec(q), kv = to_vec(k), vv = to_vec(v), pv = to_vec(probe);
      auto weighted = [&](const Vec& out) {
        double s = 0.0;
        for (size_t i = 0; i < out.size(); ++i) s += out[i] * pv[i];
        return s;
      };
      auto fq = [&](const Vec& x) { return weighted(refmath::causal_attention(x, kv, vv, heads, seq, seq, d)); };
      auto fk = [&](const Vec& x) { return weighted(refmath::causal_attention(qv, x, vv, heads, seq, seq, d)); };
      auto fv = [&](const Vec& x) { return weighted(refmath::causal_attention(qv, kv, x, heads, seq, seq, d)); };
      check_grad(q.grad(), refmath::finite_diff(fq, qv), "attention dq");
      check_grad(k.grad(), refmath::finite_diff(fk, kv), "attention dk");
      check_grad(v.grad(), refmath::finite_diff(fv, vv), "attention dv");
    }
  }
}

TEST_CASE("forward values stay finite on bounded inputs") {
  Rng rng(77);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({4, 8}, rng, false, 3.0f);
    Tensor w = random_tensor({8}, rng, false);
    for (float v : rmsnorm(x, w).data()) CHECK(std::isfinite(v));
    for (float v : softmax_rows(x).data()) CHECK(std::isfinite(v));
    for (float v : silu(x).data()) CHECK(std::isfinite(v));
  }
}
