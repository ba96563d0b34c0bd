#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "promptdet/diffnum.hpp"
#include "promptdet/gradcheck.hpp"
#include "promptdet/optim.hpp"

using namespace promptdet;

namespace {

std::vector<double> randv(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Values bounded away from zero so relu kinks never sit inside the FD stencil.
std::vector<double> off_kink(std::size_t n, std::uint64_t seed) {
  auto v = randv(n, seed, 0.05, 1.0);
  for (std::size_t i = 0; i < n; i += 2) v[i] = -v[i];
  return v;
}

DiffTensor leaf(Shape s, std::vector<double> v) { return DiffTensor::from(std::move(s), std::move(v), true); }

// Fixed random projection turns any tensor into a scalar with a generic gradient.
DiffTensor project(const DiffTensor& y, std::uint64_t seed) {
  return sum(mul(y, DiffTensor::from(y.shape(), randv(y.numel(), seed ^ 0x55))));
}

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

}  // namespace

TEST(Linear, IdentityAndSum) {
  auto x = DiffTensor::from({2, 2}, {1, 2, 3, 4});
  auto eye = DiffTensor::from({2, 2}, {1, 0, 0, 1});
  auto y = linear(x, eye, DiffTensor::zeros({2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 2, 3, 4}));
  auto s = linear(DiffTensor::from({1, 2}, {1, 2}), DiffTensor::from({2, 1}, {1, 1}), DiffTensor::zeros({1}));
  EXPECT_DOUBLE_EQ(s.item(), 3.0);
}

TEST(Linear, MatchesNaiveProduct) {
  // Odd sizes exercise the tiled kernel's remainders.
  const std::size_t n = 7, ci = 5, co = 9;
  auto xv = randv(n * ci, 11), wv = randv(ci * co, 12), bv = randv(co, 13);
  auto y = linear(DiffTensor::from({n, ci}, xv), DiffTensor::from({ci, co}, wv), DiffTensor::from({co}, bv));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < co; ++j) {
      long double acc = bv[j];
      for (std::size_t k = 0; k < ci; ++k) acc += static_cast<long double>(xv[i * ci + k]) * wv[k * co + j];
      EXPECT_NEAR(y.at(i * co + j), static_cast<double>(acc), 1e-12);
    }
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  try {
    linear(DiffTensor::zeros({2, 3}), DiffTensor::zeros({4, 1}), DiffTensor::zeros({1}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2"), std::string::npos);
    EXPECT_NE(msg.find("4"), std::string::npos);
  }
}

TEST(Linear, GradCheck) {
  for (auto seed : kSeeds) {
    auto x = leaf({3, 4}, randv(12, seed)), w = leaf({4, 5}, randv(20, seed + 10)), b = leaf({5}, randv(5, seed + 20));
    auto r = finite_diff_check([&] { return project(linear(x, w, b), seed); }, {x, w, b});
    EXPECT_TRUE(r.passed) << r.max_relative_error;
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(Relu, Values) {
  auto y = relu(DiffTensor::from({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{0, 0, 2}));
  auto p = DiffTensor::from({3}, {0.5, 1, 2});
  auto q = relu(p);
  EXPECT_EQ(std::vector<double>(q.values().begin(), q.values().end()), (std::vector<double>{0.5, 1, 2}));
}

TEST(Relu, GradCheckAwayFromKink) {
  for (auto seed : kSeeds) {
    auto x = leaf({4, 3}, off_kink(12, seed));
    auto r = finite_diff_check([&] { return project(relu(x), seed); }, {x});
    EXPECT_LT(r.max_relative_error, 1e-4);
    EXPECT_TRUE(r.kinks.empty());
  }
}

TEST(GradCheck, AffineIsExactAndKinkIsFlagged) {
  auto x = leaf({3}, {0.3, -0.2, 0.9});
  auto affine = finite_diff_check([&] { return add(scale(sum(x), 2.0), DiffTensor::scalar(1.0)); }, {x});
  EXPECT_LT(affine.max_relative_error, 1e-9);

  auto far = leaf({1}, {5.0});
  EXPECT_TRUE(finite_diff_check([&] { return sum(relu(far)); }, {far}).passed);
  auto near = leaf({1}, {1e-6});
  auto r = finite_diff_check([&] { return sum(relu(near)); }, {near});
  ASSERT_EQ(r.kinks.size(), 1u);
  EXPECT_EQ(r.kinks[0], 0u);
}

TEST(Conv2d, IdentityKernel) {
  auto x = DiffTensor::from({1, 2, 3, 3}, randv(18, 3));
  auto k = DiffTensor::from({2, 2, 1, 1}, {1, 0, 0, 1});
  auto y = conv2d(x, k, DiffTensor(), 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 18; ++i) EXPECT_DOUBLE_EQ(y.at(i), x.at(i));
}

TEST(Conv2d, AllOnesHandConvolution) {
  auto y = conv2d(DiffTensor::full({1, 1, 3, 3}, 1.0), DiffTensor::full({1, 1, 3, 3}, 1.0), DiffTensor(), 1, 1);
  // Counts of in-bounds taps: corners 4, edges 6, center 9.
  const std::vector<double> expect{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y.at(i), expect[i]);
}

TEST(Conv2d, OutputSizeAndNaiveOracle) {
  const std::size_t n = 2, c = 3, h = 7, w = 6, co = 4, k = 3;
  for (std::size_t stride : {1u, 2u}) {
    auto xv = randv(n * c * h * w, 21), kv = randv(co * c * k * k, 22), bv = randv(co, 23);
    auto y = conv2d(DiffTensor::from({n, c, h, w}, xv), DiffTensor::from({co, c, k, k}, kv), DiffTensor::from({co}, bv),
                    stride, 1);
    const std::size_t oh = (h + 2 - k) / stride + 1, ow = (w + 2 - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{n, co, oh, ow}));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t o = 0; o < co; ++o)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            long double acc = bv[o];
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const long long yy = static_cast<long long>(i * stride + u) - 1, xx = static_cast<long long>(j * stride + v) - 1;
                  if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(w)) continue;
                  acc += static_cast<long double>(xv[((b * c + ci) * h + yy) * w + xx]) * kv[((o * c + ci) * k + u) * k + v];
                }
            EXPECT_NEAR(y.at(((b * co + o) * oh + i) * ow + j), static_cast<double>(acc), 1e-12);
          }
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  EXPECT_THROW(conv2d(DiffTensor::zeros({1, 2, 4, 4}), DiffTensor::zeros({1, 3, 3, 3}), DiffTensor(), 1, 1), ShapeError);
}

TEST(Conv2d, GradCheck) {
  for (auto seed : kSeeds)
    for (std::size_t stride : {1u, 2u}) {
      auto x = leaf({1, 2, 4, 4}, randv(32, seed)), k = leaf({3, 2, 3, 3}, randv(54, seed + 1)), b = leaf({3}, randv(3, seed + 2));
      auto r = finite_diff_check([&] { return project(conv2d(x, k, b, stride, 1), seed); }, {x, k, b});
      EXPECT_LT(r.max_relative_error, 1e-4) << "stride " << stride;
    }
}

TEST(GroupMaxPool, Values) {
  auto one = group_max_pool(DiffTensor::from({1, 2}, {4, -1}), {{0}});
  EXPECT_EQ(one.at(0), 4);
  EXPECT_EQ(one.at(1), -1);
  auto y = group_max_pool(DiffTensor::from({2, 2}, {1, 5, 3, 2}), {{0, 1}});
  EXPECT_EQ(y.at(0), 3);
  EXPECT_EQ(y.at(1), 5);
  EXPECT_THROW(group_max_pool(DiffTensor::zeros({2, 2}), {{}}), std::invalid_argument);
}

TEST(GroupMaxPool, GradientOnlyReachesArgmaxFirstOnTies) {
  auto x = leaf({3, 2}, {1, 7, 4, 7, 4, 0});
  backward(sum(group_max_pool(x, {{0, 1, 2}})));
  // Column 0: max 4 at rows 1 and 2 -> row 1. Column 1: 7 at rows 0 and 1 -> row 0.
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 1, 0, 0, 0}));
}

TEST(GroupMaxPool, GradCheck) {
  for (auto seed : kSeeds) {
    auto x = leaf({6, 3}, randv(18, seed));
    auto r = finite_diff_check([&] { return project(group_max_pool(x, {{0, 2, 4}, {1, 3}, {5}}), seed); }, {x});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(SoftmaxCrossEntropy, KnownValues) {
  const int zero[] = {0};
  EXPECT_NEAR(softmax_cross_entropy(DiffTensor::from({1, 2}, {0, 0}), zero).item(), std::log(2.0), 1e-12);
  EXPECT_LT(softmax_cross_entropy(DiffTensor::from({1, 2}, {100, 0}), zero).item(), 1e-40);
  const int bad[] = {2};
  EXPECT_THROW(softmax_cross_entropy(DiffTensor::from({1, 2}, {0, 0}), bad), std::out_of_range);
}

TEST(SoftmaxCrossEntropy, MatchesLongDoubleFormula) {
  auto lv = randv(12, 31, -3, 3);
  const int labels[] = {2, 0, 3};
  long double expect = 0;
  for (int i = 0; i < 3; ++i) {
    long double z = 0;
    for (int k = 0; k < 4; ++k) z += std::exp(static_cast<long double>(lv[i * 4 + k]));
    expect += -(lv[i * 4 + labels[i]] - std::log(z));
  }
  EXPECT_NEAR(softmax_cross_entropy(DiffTensor::from({3, 4}, lv), labels).item(), static_cast<double>(expect / 3), 1e-12);
}

TEST(SoftmaxCrossEntropy, GradCheck) {
  const int labels[] = {1, 0, 2, 2};
  const double w[] = {1.0, 0.5, 0.0, 2.0};
  for (auto seed : kSeeds) {
    auto x = leaf({4, 3}, randv(12, seed, -2, 2));
    EXPECT_LT(finite_diff_check([&] { return softmax_cross_entropy(x, labels); }, {x}).max_relative_error, 1e-4);
    EXPECT_LT(finite_diff_check([&] { return softmax_cross_entropy(x, labels, w, 3.0); }, {x}).max_relative_error, 1e-4);
  }
}

TEST(LossOps, BceAndSmoothL1GradCheck) {
  const std::vector<double> t{0, 1, 0.3, 0.8, 1, 0};
  const std::vector<double> w{1, 1, 0.5, 2, 0, 1};
  for (auto seed : kSeeds) {
    auto x = leaf({2, 3}, randv(6, seed, -2, 2));
    EXPECT_LT(finite_diff_check([&] { return sigmoid_bce_with_logits(x, t, w, 4.0); }, {x}).max_relative_error, 1e-4);
    // Keep |pred - target| away from the quadratic/linear switch at beta.
    auto p = leaf({2, 3}, {0.5, 1.6, -0.2, 0.85, 2.5, -0.6});
    EXPECT_LT(finite_diff_check([&] { return smooth_l1(p, t, w, 1.0 / 9.0, 3.0); }, {p}).max_relative_error, 1e-4);
  }
}

TEST(LossOps, BceMatchesFormula) {
  const double x = 0.7, t = 0.25;
  const double s = 1 / (1 + std::exp(-x));
  const double expect = -(t * std::log(s) + (1 - t) * std::log(1 - s));
  const double tt[] = {t}, ww[] = {1.0};
  EXPECT_NEAR(sigmoid_bce_with_logits(DiffTensor::from({1, 1}, {x}), tt, ww, 1.0).item(), expect, 1e-12);
}

TEST(StopGradient, ForwardIdentityBackwardZero) {
  auto x = leaf({3}, {1.5, -2, 0.25});
  auto y = stop_gradient(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y.at(i), x.at(i));
  backward(add(sum(y), scale(sum(x), 0.0)));
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 0, 0}));
}

TEST(StopGradient, CompositeHasUnitSlope) {
  auto x = leaf({2}, {0.4, -1.1});
  backward(sum(add(x, stop_gradient(x))));
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1}));
  // The checker holds stopped values fixed, so it sees slope 1 as well.
  auto r = finite_diff_check([&] { return sum(add(x, stop_gradient(x))); }, {x});
  EXPECT_TRUE(r.passed);
}

TEST(StopGradient, FreezeReplaysRecordedValues) {
  auto x = leaf({2}, {0.4, -1.1});
  StopGradientFreeze freeze;
  EXPECT_THROW(StopGradientFreeze{}, std::logic_error);
  const double before = sum(stop_gradient(x)).item();
  x.mutable_values()[0] = 10.0;
  EXPECT_EQ(sum(stop_gradient(x)).item(), 10.0 - 1.1);  // still recording
  freeze.replay();
  EXPECT_EQ(sum(stop_gradient(x)).item(), before);
  EXPECT_EQ(sum(stop_gradient(x)).item(), 10.0 - 1.1);
  EXPECT_THROW(stop_gradient(x), std::logic_error);  // more calls than recorded
}

TEST(Backward, HandDerivatives) {
  auto x = leaf({3}, {1, 2, 3});
  backward(sum(x));
  EXPECT_EQ(x.grad(), (std::vector<double>{1, 1, 1}));
  auto y = leaf({2}, {1, 2});
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad(), (std::vector<double>{2, 4}));
  // Accumulates without reset.
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad(), (std::vector<double>{4, 8}));
  EXPECT_THROW(backward(y), ShapeError);
}

TEST(Backward, ChainLinearReluCrossEntropy) {
  const int labels[] = {0, 2};
  for (auto seed : kSeeds) {
    auto x = leaf({2, 3}, randv(6, seed)), w = leaf({3, 3}, randv(9, seed + 7)), b = leaf({3}, randv(3, seed + 8));
    auto r = finite_diff_check([&] { return softmax_cross_entropy(relu(linear(x, w, b)), labels); }, {x, w, b});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(Backward, IsLinearInTheLoss) {
  auto x = leaf({4}, randv(4, 9));
  auto l1 = [&] { return sum(mul(x, x)); };
  auto l2 = [&] { return sum(relu(x)); };
  backward(l1());
  auto g1 = x.grad();
  x.zero_grad();
  backward(l2());
  auto g2 = x.grad();
  x.zero_grad();
  backward(add(scale(l1(), 3.0), scale(l2(), -0.5)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], 3 * g1[i] - 0.5 * g2[i], 1e-12);
}

TEST(ShapeOps, GradCheck) {
  for (auto seed : kSeeds) {
    auto a = leaf({2, 2, 2, 3}, randv(24, seed)), b = leaf({2, 1, 2, 3}, randv(12, seed + 1));
    auto r = finite_diff_check(
        [&] {
          auto cat = concat_channels(a, b);
          auto rows = nchw_to_rows(cat);
          const std::size_t idx[] = {0, 3, 3, 11};
          auto g = gather_rows(slice_columns(rows, 1, 3), idx);
          return add(project(reshape(g, {8}), seed), add(mean(a), project(stack({a, a}), seed + 3)));
        },
        {a, b});
    EXPECT_LT(r.max_relative_error, 1e-4);
  }
}

TEST(BatchNorm, MatchesDirectFormulaAndGradCheck) {
  auto xv = randv(15, 41, -2, 2);
  auto y = batch_norm(DiffTensor::from({5, 3}, xv), DiffTensor::full({3}, 1.0), DiffTensor::zeros({3}), 1e-5);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 5; ++i) m += xv[i * 3 + c] / 5;
    for (std::size_t i = 0; i < 5; ++i) v += (xv[i * 3 + c] - m) * (xv[i * 3 + c] - m) / 5;
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(y.at(i * 3 + c), (xv[i * 3 + c] - m) / std::sqrt(v + 1e-5), 1e-12);
  }
  for (auto seed : kSeeds) {
    auto x = leaf({5, 3}, randv(15, seed)), g = leaf({3}, randv(3, seed + 1, 0.5, 1.5)), b = leaf({3}, randv(3, seed + 2));
    EXPECT_LT(finite_diff_check([&] { return project(batch_norm(x, g, b, 1e-5), seed); }, {x, g, b}).max_relative_error, 1e-4);
  }
}

TEST(Adam, ZeroGradientLeavesParams) {
  ParameterStore ps;
  auto& p = ps.add("p", DiffTensor::from({2}, {1.0, -2.0}, true));
  auto st = make_optimizer_state(ps, 0.01);
  p.zero_grad();
  adam_step(ps, st, 0.01);
  EXPECT_EQ(p.at(0), 1.0);
  EXPECT_EQ(p.at(1), -2.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p{0.5}, m{0}, v{0};
  const double g[] = {1.0};
  adam_update(p, g, m, v, 1, 0.01, AdamConfig{});
  // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps).
  EXPECT_NEAR(p[0] - 0.5, -0.01 / (1 + 1e-8), 1e-15);
}

TEST(Adam, DecreasesConvexQuadraticAndIsDeterministic) {
  auto run = [] {
    ParameterStore ps;
    auto& p = ps.add("p", DiffTensor::from({2}, {3.0, -1.0}, true));
    auto st = make_optimizer_state(ps, 0.1);
    std::vector<double> f;
    for (int i = 0; i < 2; ++i) {
      ps.zero_grad();
      auto loss = sum(mul(p, p));
      f.push_back(loss.item());
      backward(loss);
      adam_step(ps, st, 0.1);
    }
    f.push_back(sum(mul(p, p)).item());
    return f;
  };
  auto f = run();
  EXPECT_LT(f[1], f[0]);
  EXPECT_LT(f[2], f[1]);
  EXPECT_EQ(f, run());
}

TEST(OneCycle, Boundaries) {
  const double base = 0.01;
  EXPECT_DOUBLE_EQ(onecycle_lr(0, 1000, base), base / 10);
  EXPECT_NEAR(onecycle_lr(300, 1000, base), base, 1e-15);
  EXPECT_NEAR(onecycle_lr(1000, 1000, base), base / 1000, 1e-9);
  // Halfway through the decay the cosine sits at the midpoint.
  EXPECT_NEAR(onecycle_lr(650, 1000, base), (base + base / 1000) / 2, 1e-12);
  EXPECT_THROW(onecycle_lr(1001, 1000, base), std::out_of_range);
}

TEST(Checkpoint, RoundTripAndShapeGuard) {
  ParameterStore a;
  a.add("w", DiffTensor::from({2, 2}, randv(4, 1), true));
  a.add("b", DiffTensor::from({2}, randv(2, 2), true));
  const auto path = std::filesystem::temp_directory_path() / "promptdet_ckpt_test.bin";
  save_checkpoint(a, path, {{"stat", {1.0, 2.0}}});
  ParameterStore b;
  b.add("w", DiffTensor::zeros({2, 2}, true));
  b.add("b", DiffTensor::zeros({2}, true));
  auto buffers = load_checkpoint(b, path);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(b.get("w").at(i), a.get("w").at(i));
  ASSERT_EQ(buffers.size(), 1u);
  EXPECT_EQ(buffers[0].second, (std::vector<double>{1.0, 2.0}));
  ParameterStore c;
  c.add("w", DiffTensor::zeros({4}, true));
  c.add("b", DiffTensor::zeros({2}, true));
  EXPECT_THROW(load_checkpoint(c, path), std::exception);
  std::filesystem::remove(path);
}
