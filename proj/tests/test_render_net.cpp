#include "cnrf/render_net.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cnrf;
using cnrf::testing::central_diff;
using cnrf::testing::rel_err;
using cnrf::testing::tiny_net;

namespace {

// Layer sizes written out by hand for the desk preset (F=16, L=4):
// trunk 16-64, 64-64, (64+16)-64, 64-64; sigma 64-1; bottleneck 64-64;
// branch (64+24)-32; rgb 32-3.
constexpr size_t kDeskParams = (16 * 64 + 64) + (64 * 64 + 64) + (80 * 64 + 64) + (64 * 64 + 64) + (64 + 1) +
                               (64 * 64 + 64) + (88 * 32 + 32) + (32 * 3 + 3);

RenderParamsD random_params(const NetDescriptor& d, uint64_t seed, double scale = 0.6)
{
    RenderParamsD p = zero_params<double>(d);
    std::mt19937_64 g(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& net : p.nets)
        for (double& x : net) x = u(g);
    return p;
}

Vec3 unit(double x, double y, double z)
{
    return Vec3(x, y, z).normalized();
}

}  // namespace

TEST(RenderNet, DeskParameterCount)
{
    EXPECT_EQ(kDeskParams, 21764u);
    const NetLayout l(NetDescriptor::desk(16));
    EXPECT_EQ(l.parameter_count, kDeskParams);
    const RenderParams p = init_params(NetDescriptor::desk(16), 1);
    EXPECT_EQ(p.nets[0].size(), kDeskParams);
    EXPECT_EQ(p.nets[1].size(), kDeskParams);
}

TEST(RenderNet, FullPresetShapes)
{
    const NetDescriptor d = NetDescriptor::full(64);
    const NetLayout l(d);
    ASSERT_EQ(l.trunk.size(), 8u);
    EXPECT_EQ(l.trunk[0].in, 64);
    EXPECT_EQ(l.trunk[4].in, 256 + 64);
    EXPECT_EQ(l.branch.in, 256 + 24);
    EXPECT_EQ(l.branch.out, 128);
    EXPECT_EQ(l.rgb.out, 3);
    EXPECT_EQ(l.sigma.out, 1);
}

TEST(RenderNet, PosEncodeExamples)
{
    const auto e = pos_encode(Vec3(0, 0, 1), 1);
    const std::vector<double> expect{0, 1, 0, 1, 0, -1};
    ASSERT_EQ(e.size(), 6u);
    for (size_t n = 0; n < 6; ++n) EXPECT_NEAR(e[n], expect[n], 1e-15);

    const Vec3 d = unit(0.3, -0.5, 0.8);
    const auto e4 = pos_encode(d, 4);
    ASSERT_EQ(e4.size(), 24u);
    for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 4; ++l) {
            const double a = std::pow(2.0, l) * std::numbers::pi * d[k];
            EXPECT_NEAR(e4[size_t(k * 8 + 2 * l)], std::sin(a), 1e-14);
            EXPECT_NEAR(e4[size_t(k * 8 + 2 * l + 1)], std::cos(a), 1e-14);
        }

    const auto p = pos_encode(Vec3(1, 0, 0), 3), m = pos_encode(Vec3(-1, 0, 0), 3);
    for (size_t n = 0; n < p.size(); n += 2) {
        EXPECT_NEAR(p[n], -m[n], 1e-15);
        EXPECT_NEAR(p[n + 1], m[n + 1], 1e-15);
    }
    EXPECT_THROW(pos_encode(Vec3(1, 0, 1e-2), 4), InvalidArgument);
}

TEST(RenderNet, ZeroParamsClosedForm)
{
    const auto p = zero_params<float>(NetDescriptor::desk(16));
    NetCache<float> cache;
    std::vector<float> feat(16, 0.3f);
    const auto enc = pos_encode(unit(1, 2, 3), 4);
    const RadianceSample s = forward(p, NetKind::Coarse, std::span<const float>(feat), enc, cache);
    EXPECT_NEAR(s.sigma, std::log(2.0), 1e-6);
    for (double c : s.c) EXPECT_NEAR(c, 0.5, 1e-7);
}

TEST(RenderNet, OutputRangesAndViewIndependentDensity)
{
    const RenderParams p = init_params(NetDescriptor::desk(16), 5);
    std::mt19937_64 g(6);
    std::normal_distribution<double> nd(0.0, 3.0);
    NetCache<float> cache;
    std::vector<float> feat(16);
    for (int n = 0; n < 1000; ++n) {
        for (float& f : feat) f = float(nd(g));
        const Vec3 d1 = Vec3(nd(g), nd(g), nd(g)).normalized(), d2 = Vec3(nd(g), nd(g), nd(g)).normalized();
        const auto a = forward(p, NetKind::Fine, std::span<const float>(feat), pos_encode(d1, 4), cache);
        const auto b = forward(p, NetKind::Fine, std::span<const float>(feat), pos_encode(d2, 4), cache);
        ASSERT_GE(a.sigma, 0.0);
        ASSERT_TRUE(std::isfinite(a.sigma));
        for (double c : a.c) {
            ASSERT_GE(c, 0.0);
            ASSERT_LE(c, 1.0);
        }
        ASSERT_EQ(a.sigma, b.sigma);
    }
}

TEST(RenderNet, InitIsDeterministicAndScaled)
{
    const NetDescriptor d = NetDescriptor::desk(16);
    const RenderParams a = init_params(d, 42), b = init_params(d, 42), c = init_params(d, 43);
    EXPECT_EQ(a.nets, b.nets);
    EXPECT_NE(a.nets, c.nets);
    const LayerSpec& l0 = a.layout.trunk[0];
    const double bound = std::sqrt(6.0 / l0.in);
    for (int n = 0; n < l0.in * l0.out; ++n) EXPECT_LE(std::abs(a.nets[0][l0.weight_offset + size_t(n)]), bound);
    for (int n = 0; n < l0.out; ++n) EXPECT_EQ(a.nets[0][l0.bias_offset + size_t(n)], 0.0f);
    EXPECT_NE(a.nets[0], a.nets[1]);
}

TEST(RenderNet, BackwardMatchesFiniteDifferences)
{
    const NetDescriptor d = tiny_net(4);
    RenderParamsD p = random_params(d, 17);
    const int N = 3;
    Matrix<double> feat(4, N);
    std::mt19937_64 g(18);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int n = 0; n < feat.size(); ++n) feat.data()[n] = u(g);
    const auto enc = pos_encode(unit(0.2, 0.9, -0.4), d.enc_levels);
    Matrix<double> urgb(3, N), usig(1, N);
    for (int n = 0; n < urgb.size(); ++n) urgb.data()[n] = u(g);
    for (int n = 0; n < usig.size(); ++n) usig.data()[n] = u(g);

    for (NetKind kind : {NetKind::Coarse, NetKind::Fine}) {
        NetCache<double> cache;
        auto loss = [&]() {
            NetCache<double> c;
            forward(p, kind, feat, enc, c);
            return (c.rgb.array() * urgb.array()).sum() + (c.sigma.array() * usig.array()).sum();
        };
        forward(p, kind, feat, enc, cache);
        std::vector<double> pg(p.net(kind).size(), 0.0);
        const Matrix<double> dfeat = backward(p, cache, urgb, usig, std::span<double>(pg));

        double worst = 0.0;
        auto net = p.net(kind);
        for (size_t n = 0; n < net.size(); ++n) worst = std::max(worst, rel_err(pg[n], central_diff(net[n], loss, 1e-5), 1e-6));
        EXPECT_LE(worst, 1e-4);
        worst = 0.0;
        for (int n = 0; n < feat.size(); ++n)
            worst = std::max(worst, rel_err(dfeat.data()[n], central_diff(feat.data()[n], loss, 1e-5), 1e-6));
        EXPECT_LE(worst, 1e-4);
    }
}

TEST(RenderNet, BackwardEdgeCases)
{
    const NetDescriptor d = tiny_net(4);
    const RenderParamsD p = random_params(d, 3);
    Matrix<double> feat = Matrix<double>::Constant(4, 2, 0.2);
    NetCache<double> cache;
    forward(p, NetKind::Coarse, feat, pos_encode(unit(1, 0, 0), d.enc_levels), cache);

    const Matrix<double> z3 = Matrix<double>::Zero(3, 2), z1 = Matrix<double>::Zero(1, 2);
    std::vector<double> pg(p.nets[0].size(), 0.0);
    const auto df = backward(p, cache, z3, z1, std::span<double>(pg));
    EXPECT_EQ(df.cwiseAbs().maxCoeff(), 0.0);
    for (double x : pg) EXPECT_EQ(x, 0.0);

    // Sigma-only upstream: the feature gradient does not see the direction.
    NetCache<double> c2;
    forward(p, NetKind::Coarse, feat, pos_encode(unit(0, 0.6, 0.8), d.enc_levels), c2);
    const Matrix<double> us = Matrix<double>::Constant(1, 2, 0.7);
    const auto g1 = backward(p, cache, z3, us, {});
    const auto g2 = backward(p, c2, z3, us, {});
    EXPECT_EQ((g1 - g2).cwiseAbs().maxCoeff(), 0.0);

    // Cache from other parameters, or of the wrong width, is rejected.
    const RenderParamsD other = random_params(d, 4);
    const Matrix<double> wide3 = Matrix<double>::Zero(3, 3), wide1 = Matrix<double>::Zero(1, 3);
    const Matrix<double> tall = Matrix<double>::Zero(5, 2);
    EXPECT_THROW(backward(other, cache, z3, us, {}), InvalidArgument);
    EXPECT_THROW(backward(p, cache, wide3, wide1, {}), InvalidArgument);
    EXPECT_THROW(forward(p, NetKind::Coarse, tall, pos_encode(unit(1, 0, 0), d.enc_levels), c2), InvalidArgument);
}

TEST(RenderNet, SerializationRoundTripAndHash)
{
    const RenderParams p = init_params(NetDescriptor::desk(16), 9);
    const auto dir = cnrf::testing::temp_dir("net");
    save_params(p, dir / "n.cnrfnet");
    const RenderParams q = load_params(dir / "n.cnrfnet");
    EXPECT_EQ(q.descriptor, p.descriptor);
    EXPECT_EQ(q.nets, p.nets);
    EXPECT_EQ(renderer_hash(q), renderer_hash(p));

    RenderParams r = p;
    r.nets[1][7] = std::nextafter(r.nets[1][7], 1.0f);
    EXPECT_NE(renderer_hash(r), renderer_hash(p));

    const auto bytes = encode_params(p);
    EXPECT_EQ(bytes.size(), 8u + 7u * 4u + 2u * kDeskParams * 4u);
    auto bad = bytes;
    bad[3] ^= 0x40;
    EXPECT_THROW(decode_params(bad), FormatError);
    auto cut = bytes;
    cut.resize(cut.size() - 4);
    try {
        decode_params(cut);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::Truncated);
    }
    auto huge = bytes;
    huge[8 + 12 + 3] = 0x7f;  // trunk_width
    try {
        decode_params(huge);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.kind(), FormatErrorKind::DimensionOverflow);
        EXPECT_EQ(e.field(), "trunk_width");
    }
}
