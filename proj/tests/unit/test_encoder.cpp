#include <gtest/gtest.h>

#include "osm/encoder/encoder.hpp"
#include "osm/errors.hpp"
#include "test_helpers.hpp"

using namespace osm;
using encoder::Encoder;
using encoder::ForwardOptions;
using encoder::GroupRegistry;
using encoder::MaskVector;
using encoder::ModuleKind;

namespace {

template <typename T>
ad::Tensor<T> gate_row(const MaskVector& m) {
  ad::Tensor<T> g(1, m.size());
  for (std::size_t j = 0; j < m.size(); ++j) g[j] = static_cast<T>(m.values[j]);
  return g;
}

}  // namespace

TEST(Registry, GroupCounts) {
  encoder::EncoderConfig big;
  big.num_blocks = 12;
  big.d_model = 512;
  EXPECT_EQ(GroupRegistry::build(big).size(), 204u);

  encoder::EncoderConfig toy;
  toy.num_blocks = 2;
  toy.d_model = 64;
  EXPECT_EQ(GroupRegistry::build(toy).size(), 20u);

  big.granularity = encoder::Granularity::layer;
  EXPECT_EQ(GroupRegistry::build(big).size(), 48u);
}

TEST(Registry, CanonicalOrdering) {
  const auto r = GroupRegistry::build(test::small_model());
  ASSERT_EQ(r.size(), 20u);
  EXPECT_EQ(r[0].kind, ModuleKind::ffn1);
  EXPECT_EQ(r[4].kind, ModuleKind::mhsa);
  EXPECT_EQ(r[5].kind, ModuleKind::conv);
  EXPECT_EQ(r[6].kind, ModuleKind::ffn2);
  EXPECT_EQ(r[10].block, 1);
  EXPECT_EQ(r.group_of(1, ModuleKind::ffn2, 3), 19);
  EXPECT_EQ(r.group_of_parameter("block1/ffn2/3/w1"), 19);
  EXPECT_FALSE(r.group_of_parameter("block0/ffn1/base/norm_g").has_value());
}

TEST(Config, InvalidDimensionsRejected) {
  auto c = test::small_model();
  c.conv_kernel = 4;
  EXPECT_THROW(GroupRegistry::build(c), ConfigError);
  c = test::small_model();
  c.d_model = 129;  // two heads
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::small_model();
  c.aux_splits = {3};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Encoder, ParameterNamesFollowConvention) {
  auto enc = Encoder<double>::build(test::small_model(), 3);
  for (auto* p : enc.parameters()) {
    if (!p->name.starts_with("block")) continue;
    const auto group = enc.registry().group_of_parameter(p->name);
    if (p->name.find("/base/") == std::string::npos) {
      EXPECT_TRUE(group.has_value()) << p->name;
    }
  }
  EXPECT_NE(enc.find("block0/mhsa/0/wq"), nullptr);
}

template <typename T>
class EncoderTyped : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(EncoderTyped, Precisions);

TYPED_TEST(EncoderTyped, GateOfOneIsBitwiseUngated) {
  using T = TypeParam;
  auto enc = Encoder<T>::build(test::small_model(), 11);
  const auto x = test::features<T>(20, 6, 5);
  ad::Tape<T> t1, t2;
  const auto plain = encoder::forward(t1, enc, x).value();
  ForwardOptions<T> opts;
  opts.gates = t2.constant(gate_row<T>(MaskVector::ones(enc.registry().size())));
  EXPECT_EQ(plain, encoder::forward(t2, enc, x, opts).value());
}

TYPED_TEST(EncoderTyped, AllZeroMaskLeavesResidualChain) {
  using T = TypeParam;
  auto enc = Encoder<T>::build(test::small_model(), 11);
  const auto n = enc.registry().size();
  const auto x = test::features<T>(20, 6, 5);
  ad::Tape<T> t1, t2;
  ForwardOptions<T> opts;
  opts.gates = t1.constant(gate_row<T>(MaskVector::zeros(n)));
  const auto zeroed = encoder::forward(t1, enc, x, opts).value();
  auto pruned = encoder::structural_prune(enc, MaskVector::zeros(n));
  for (const auto& b : pruned.blocks) {
    EXPECT_TRUE(b.ffn1.chunks.empty());
    EXPECT_TRUE(b.mhsa.heads.empty());
    EXPECT_FALSE(b.conv.layers.has_value());
  }
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
  EXPECT_LE(ad::max_abs_diff(zeroed, encoder::forward(t2, pruned, x).value()), tol);
}

TYPED_TEST(EncoderTyped, PruneMatchesMaskOnRandomMasks) {
  using T = TypeParam;
  auto enc = Encoder<T>::build(test::small_model(2, 64), 21);
  const auto n = enc.registry().size();
  const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const auto mask = test::random_mask(n, 1000 + trial);
    const auto x = test::features<T>(14 + trial % 5, 6, trial);
    ad::Tape<T> t1, t2;
    ForwardOptions<T> opts;
    opts.gates = t1.constant(gate_row<T>(mask));
    const auto masked = encoder::forward(t1, enc, x, opts).value();
    auto pruned = encoder::structural_prune(enc, mask);
    EXPECT_EQ(encoder::present_groups(pruned).values, mask.values);
    EXPECT_LE(ad::max_abs_diff(masked, encoder::forward(t2, pruned, x).value()), tol) << "trial " << trial;
  }
}

TEST(Encoder, SkipZeroGatesMatchesMultiplying) {
  auto enc = Encoder<double>::build(test::small_model(), 4);
  const auto mask = test::random_mask(enc.registry().size(), 77);
  const auto x = test::features<double>(18, 6, 8);
  ad::Tape<double> t1, t2;
  ForwardOptions<double> a, b;
  a.gates = t1.constant(gate_row<double>(mask));
  b.gates = t2.constant(gate_row<double>(mask));
  b.skip_zero_gates = true;
  EXPECT_LE(ad::max_abs_diff(encoder::forward(t1, enc, x, a).value(), encoder::forward(t2, enc, x, b).value()),
            1e-12);
}

TEST(Encoder, MaskLengthMismatchIsContractError) {
  auto enc = Encoder<double>::build(test::small_model(), 4);
  ad::Tape<double> t;
  ForwardOptions<double> opts;
  opts.gates = t.constant(ad::Tensor<double>(1, 3, 1.0));
  EXPECT_THROW(encoder::forward(t, enc, test::features<double>(10, 6, 1), opts), ContractError);
}

TEST(Encoder, OutputIsLogSoftmax) {
  auto enc = Encoder<double>::build(test::small_model(), 4);
  ad::Tape<double> t;
  const auto lp = encoder::forward(t, enc, test::features<double>(11, 6, 1)).value();
  EXPECT_EQ(lp.rows(), 6u);
  EXPECT_EQ(lp.cols(), 5u);
  for (std::size_t r = 0; r < lp.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < lp.cols(); ++c) s += std::exp(lp(r, c));
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Encoder, TooManyFramesRejected) {
  auto enc = Encoder<double>::build(test::small_model(), 4);
  ad::Tape<double> t;
  EXPECT_THROW(encoder::forward(t, enc, test::features<double>(80, 6, 1)), ContractError);
  EXPECT_THROW(encoder::forward(t, enc, test::features<double>(10, 5, 1)), DimensionError);
}

TEST(Encoder, BuildIsDeterministic) {
  auto a = Encoder<double>::build(test::small_model(), 9);
  auto b = Encoder<double>::build(test::small_model(), 9);
  auto c = Encoder<double>::build(test::small_model(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    differs = differs || !(pa[i]->value == pc[i]->value);
  }
  EXPECT_TRUE(differs);
}

TEST(Encoder, AuxHeadForward) {
  auto cfg = test::small_model(3);
  cfg.aux_splits = {1, 2};
  auto enc = Encoder<double>::build(cfg, 4);
  ad::Tape<double> t;
  const auto x = test::features<double>(10, 6, 1);
  EXPECT_EQ(encoder::aux_head_forward(t, enc, x, 2).cols(), 5u);
  EXPECT_THROW(encoder::aux_head_forward(t, enc, x, 3), ContractError);
}
