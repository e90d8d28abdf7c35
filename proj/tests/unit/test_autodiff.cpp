#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "osm/autodiff/gradcheck.hpp"
#include "osm/autodiff/kernels.hpp"
#include "osm/autodiff/ops.hpp"
#include "osm/autodiff/rng.hpp"
#include "osm/errors.hpp"

namespace ad = osm::ad;
using ad::Tape;
using ad::Tensor;

namespace {

Tensor<double> filled(std::size_t r, std::size_t c, std::uint64_t key) {
  ad::CounterRng rng(key);
  Tensor<double> t(r, c);
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t key) {
  ad::CounterRng rng(key);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-2.0, 2.0));
  return v;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  auto t = Tensor<double>::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_EQ(t.shape_string(), "[2x3]");
}

TEST(Ops, BroadcastMismatchThrows) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(3, 4));
  auto b = tape.constant(Tensor<double>(2, 4));
  EXPECT_THROW(ad::add(a, b), osm::DimensionError);
  EXPECT_THROW(ad::matmul(a, a), osm::DimensionError);
}

TEST(Ops, MatmulValuesAndMacs) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::from_rows({{1, 2}, {3, 4}}));
  auto b = tape.constant(Tensor<double>::from_rows({{5, 6}, {7, 8}}));
  ad::MacCounter macs;
  auto c = ad::matmul(a, b);
  EXPECT_EQ(c.value(), Tensor<double>::from_rows({{19, 22}, {43, 50}}));
  EXPECT_EQ(macs.count(), 8u);
}

TEST(Ops, MacCountersNestInclusively) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(2, 3));
  auto b = tape.constant(Tensor<double>(3, 4));
  ad::MacCounter outer;
  {
    ad::MacCounter inner;
    ad::matmul(a, b);
    EXPECT_EQ(inner.count(), 24u);
  }
  EXPECT_EQ(outer.count(), 24u);
  ad::matmul(a, b);
  EXPECT_EQ(outer.count(), 48u);
}

TEST(Ops, LogsumexpAllNegativeInfinity) {
  Tape<double> tape;
  ad::Parameter<double> p("x", Tensor<double>(2, 2, -std::numeric_limits<double>::infinity()));
  auto y = ad::logsumexp(tape.parameter(p), 0);
  EXPECT_TRUE(std::isinf(y.value()(0, 0)));
  tape.backward(ad::sum(y));
  for (double g : p.grad.storage()) EXPECT_EQ(g, 0.0);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  Tape<double> tape;
  auto s = ad::softmax_rows(tape.constant(filled(5, 7, 3)), 0.3);
  for (std::size_t r = 0; r < 5; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 7; ++c) acc += s.value()(r, c);
    EXPECT_NEAR(acc, 1.0, 1e-12);
  }
}

TEST(Ops, DropoutIsKeyedAndUnbiased) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>(200, 50, 1.0));
  auto a = ad::dropout(x, 0.25, 99);
  auto b = ad::dropout(x, 0.25, 99);
  auto c = ad::dropout(x, 0.25, 100);
  EXPECT_EQ(a.value(), b.value());
  EXPECT_FALSE(a.value() == c.value());
  double mean = 0.0;
  for (double v : a.value().storage()) mean += v;
  mean /= static_cast<double>(a.value().size());
  EXPECT_NEAR(mean, 1.0, 0.03);
  EXPECT_EQ(ad::dropout(x, 0.0, 5).value(), x.value());
}

TEST(Ops, GatherRowsMinusOneIsZero) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::from_rows({{1, 2}, {3, 4}}));
  const int idx[] = {1, -1, 0};
  auto g = ad::gather_rows(x, std::span<const int>(idx));
  EXPECT_EQ(g.value(), Tensor<double>::from_rows({{3, 4}, {0, 0}, {1, 2}}));
}

TEST(Ops, StraightThroughPassesGradient) {
  Tape<double> tape;
  ad::Parameter<double> p("s", Tensor<double>::from_rows({{0.3, -0.2}}));
  auto y = ad::straight_through(tape.parameter(p), Tensor<double>::from_rows({{1, 0}}));
  EXPECT_EQ(y.value(), Tensor<double>::from_rows({{1, 0}}));
  tape.backward(ad::sum(ad::mul(y, tape.constant(Tensor<double>::from_rows({{2, 3}})))));
  EXPECT_EQ(p.grad, Tensor<double>::from_rows({{2, 3}}));
}

TEST(Ops, BackwardAccumulatesAcrossTapes) {
  ad::Parameter<double> p("w", Tensor<double>::from_rows({{2.0}}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> tape;
    auto w = tape.parameter(p);
    tape.backward(ad::mul(w, w));
  }
  EXPECT_DOUBLE_EQ(p.grad.item(), 8.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  ad::Parameter<double> p("x", filled(2, 2, 4));
  // Records a node whose backward is deliberately off by a factor of two.
  auto bad = [&p](Tape<double>& t) {
    auto x = t.parameter(p);
    Tensor<double> v = x.value();
    for (auto& e : v.storage()) e = e * e;
    auto y = t.record(v, {x}, [x](Tape<double>& tape, std::uint32_t self) {
      double* g = tape.grad_buffer(x.id);
      const auto& gy = tape.grad(self);
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += 4.0 * tape.value(x.id)[i] * gy[i];
    });
    return ad::sum(y);
  };
  ad::Parameter<double>* ps[] = {&p};
  EXPECT_GT(ad::grad_check(ps, bad).max_rel_error, 0.4);
}

TEST(Rng, CounterStreamsReplay) {
  ad::CounterRng a(ad::derive_key({1, 2, 3}));
  ad::CounterRng b(ad::derive_key({1, 2, 3}), 5);
  for (int i = 0; i < 5; ++i) a.next_u64();
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(ad::derive_key({1, 2, 3}), ad::derive_key({1, 3, 2}));
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

template <typename T>
class KernelEquivalence : public ::testing::Test {};
using KernelTypes = ::testing::Types<float, double>;
TYPED_TEST_SUITE(KernelEquivalence, KernelTypes);

TYPED_TEST(KernelEquivalence, SimdMatchesScalarBitwise) {
  using T = TypeParam;
  namespace k = ad::kernels;
  const auto& ref = k::table<T>(k::Isa::scalar);
  for (k::Isa isa : {k::Isa::avx2, k::Isa::neon}) {
    if (!k::isa_available(isa)) continue;
    const auto& simd = k::table<T>(isa);
    for (std::size_t trial = 0; trial < 20; ++trial) {
      const std::size_t m = 1 + trial % 5, kk = 3 + trial % 7, n = 1 + 3 * trial;
      auto a = random_vec<T>(m * kk, trial);
      auto b = random_vec<T>(kk * n, trial + 100);
      auto c1 = random_vec<T>(m * n, trial + 200);
      auto c2 = c1;
      const bool acc = trial % 2 == 0;
      ref.gemm_nn(a.data(), b.data(), c1.data(), m, kk, n, acc);
      simd.gemm_nn(a.data(), b.data(), c2.data(), m, kk, n, acc);
      EXPECT_EQ(c1, c2) << k::isa_name(isa) << " gemm trial " << trial;

      auto x = random_vec<T>(n, trial + 300);
      auto y1 = random_vec<T>(n, trial + 400);
      auto y2 = y1;
      ref.axpy(n, T(0.37), x.data(), y1.data());
      simd.axpy(n, T(0.37), x.data(), y2.data());
      EXPECT_EQ(y1, y2);
      ref.mul(n, x.data(), y1.data(), y1.data());
      simd.mul(n, x.data(), y2.data(), y2.data());
      EXPECT_EQ(y1, y2);
      ref.add_inplace(n, x.data(), y1.data());
      simd.add_inplace(n, x.data(), y2.data());
      EXPECT_EQ(y1, y2);
    }
  }
}

TEST(Kernels, ForcedIsaChangesNothingInOps) {
  namespace k = ad::kernels;
  const auto saved = k::active_isa();
  auto run = [] {
    Tape<double> tape;
    auto a = tape.constant(filled(7, 9, 1));
    auto b = tape.constant(filled(9, 13, 2));
    return ad::matmul(a, b).value();
  };
  k::force_isa(k::Isa::scalar);
  const auto scalar = run();
  k::force_isa(saved);
  EXPECT_EQ(scalar, run());
}
