#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "msda/autodiff.hpp"
#include "msda/losses.hpp"
#include "msda/ops.hpp"

using namespace msda;
using testutil::random_tensor;

namespace {

KernelConfig fixed_kernel(double sigma2, std::vector<double> mults = {1.0}) {
  KernelConfig k;
  k.bandwidth_multipliers = std::move(mults);
  k.fixed_bandwidth = sigma2;
  return k;
}

double sqdist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(1); ++k) {
    const double d = a.at(i, k) - b.at(j, k);
    s += d * d;
  }
  return s;
}

// Median of the distinct-pair squared distances of the stacked rows.
double naive_sigma2(const Tensor& x, const Tensor& y) {
  std::vector<std::pair<const Tensor*, std::size_t>> rows;
  for (std::size_t i = 0; i < x.size(0); ++i) rows.emplace_back(&x, i);
  for (std::size_t i = 0; i < y.size(0); ++i) rows.emplace_back(&y, i);
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      d.push_back(sqdist(*rows[i].first, rows[i].second, *rows[j].first, rows[j].second));
  if (d.empty()) return 1.0;
  std::sort(d.begin(), d.end());
  const std::size_t n = d.size();
  const double med = n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
  return med == 0.0 ? 1.0 : med;
}

double naive_k(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j,
               double sigma2, const std::vector<double>& mults) {
  double s = 0.0;
  for (double m : mults) s += std::exp(-sqdist(a, i, b, j) / (m * sigma2));
  return s / static_cast<double>(mults.size());
}

double naive_mmd(const Tensor& s, const Tensor& t, const KernelConfig& cfg) {
  const double sigma2 = cfg.fixed_bandwidth.value_or(naive_sigma2(s, t));
  const auto& m = cfg.bandwidth_multipliers;
  const double n = static_cast<double>(s.size(0)), k = static_cast<double>(t.size(0));
  double ss = 0.0, st = 0.0, tt = 0.0;
  for (std::size_t i = 0; i < s.size(0); ++i)
    for (std::size_t j = 0; j < s.size(0); ++j) ss += naive_k(s, i, s, j, sigma2, m);
  for (std::size_t i = 0; i < s.size(0); ++i)
    for (std::size_t j = 0; j < t.size(0); ++j) st += naive_k(s, i, t, j, sigma2, m);
  for (std::size_t i = 0; i < t.size(0); ++i)
    for (std::size_t j = 0; j < t.size(0); ++j) tt += naive_k(t, i, t, j, sigma2, m);
  return ss / (n * n) - 2.0 * st / (n * k) + tt / (k * k);
}

// Centre first, then average outer products.
std::vector<double> two_pass_cov(const Tensor& x) {
  const std::size_t n = x.size(0), d = x.size(1);
  std::vector<double> mu(d, 0.0), c(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mu[k] += x.at(i, k) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        c[a * d + b] += (x.at(i, a) - mu[a]) * (x.at(i, b) - mu[b]) / static_cast<double>(n - 1);
  return c;
}

Tensor random_probs(std::size_t b, std::size_t c, std::mt19937_64& rng) {
  return softmax_rows(random_tensor({b, c}, rng, false, -3.0, 3.0));
}

}  // namespace

TEST_CASE("kernel config validation") {
  KernelConfig k;
  CHECK_NOTHROW(k.validate());
  k.bandwidth_multipliers.clear();
  CHECK_THROWS_AS(k.validate(), ContractError);
  k.bandwidth_multipliers = {1.0, -2.0};
  CHECK_THROWS_AS(k.validate(), ContractError);
  k = KernelConfig{};
  k.fixed_bandwidth = 0.0;
  CHECK_THROWS_AS(k.validate(), ContractError);
  LossWeights w{-0.1, 0.0};
  CHECK_THROWS_AS(w.validate(), ContractError);
  w = {0.0, std::nan("")};
  CHECK_THROWS_AS(w.validate(), ContractError);
}

TEST_CASE("gram examples") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor g = gram(x, x, KernelConfig{{}, {1.0}, std::nullopt});
  for (std::size_t i = 0; i < 5; ++i) CHECK(g.at(i, i) == 1.0);
  const Tensor p = Tensor::from_data({1, 2}, {0.3, -0.2});
  CHECK(gram(p, p, KernelConfig{}).item() == 1.0);
  const Tensor a = Tensor::from_data({1, 1}, {0.0}), b = Tensor::from_data({1, 1}, {1.0});
  CHECK(gram(a, b, fixed_kernel(1.0)).item() == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  CHECK_THROWS_AS(gram(x, random_tensor({2, 4}, rng), KernelConfig{}), DimensionError);
  CHECK_THROWS_AS(gram(Tensor::zeros({0, 3}), x, KernelConfig{}), ContractError);
}

TEST_CASE("median bandwidth and its fallback") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({4, 3}, rng), y = random_tensor({3, 3}, rng);
  const Tensor pooled = concat_rows(std::vector<Tensor>{x, y});
  CHECK(kernel_bandwidth(pooled, KernelConfig{}).item() ==
        doctest::Approx(naive_sigma2(x, y)).epsilon(1e-14));
  const Tensor same = Tensor::full({4, 2}, 0.7);
  CHECK(kernel_bandwidth(same, KernelConfig{}).item() == 1.0);
  CHECK(kernel_bandwidth(same, fixed_kernel(3.0)).item() == 3.0);
}

TEST_CASE("mmd hand values") {
  const Tensor a = Tensor::from_data({1, 1}, {0.0}), b = Tensor::from_data({1, 1}, {1.0});
  CHECK(mmd_squared(a, b, fixed_kernel(1.0)).item() ==
        doctest::Approx(2.0 * (1.0 - std::exp(-1.0))).epsilon(1e-15));
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({6, 4}, rng);
  CHECK(mmd_squared(x, x, KernelConfig{}).item() == 0.0);
}

TEST_CASE("mmd matches the naive loop, median and fixed bandwidths") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor s = random_tensor({5, 3}, rng), t = random_tensor({7, 3}, rng, false, -0.5, 2.0);
    CHECK(mmd_squared(s, t, KernelConfig{}).item() ==
          doctest::Approx(naive_mmd(s, t, KernelConfig{})).epsilon(1e-10));
    const auto cfg = fixed_kernel(0.8, {0.5, 1.0, 3.0});
    CHECK(mmd_squared(s, t, cfg).item() == doctest::Approx(naive_mmd(s, t, cfg)).epsilon(1e-10));
  }
}

TEST_CASE("mmd is non-negative on random batches") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> n(1, 12), d(1, 6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t dim = d(rng);
    const Tensor s = random_tensor({n(rng), dim}, rng);
    const Tensor t = random_tensor({n(rng), dim}, rng, false, -2.0, 0.5);
    REQUIRE(mmd_squared(s, t, KernelConfig{}).item() >= -1e-15);
  }
}

TEST_CASE("covariance examples and two-pass oracle") {
  CHECK(covariance(Tensor::from_data({2, 1}, {0.0, 2.0})).item() == doctest::Approx(2.0));
  const Tensor same = Tensor::from_data({2, 3}, {1, 2, 3, 1, 2, 3});
  for (double v : testutil::to_vec(covariance(same))) CHECK(v == doctest::Approx(0.0).scale(1.0));
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({9, 4}, rng, false, -3.0, 3.0);
    const Tensor c = covariance(x);
    const auto oracle = two_pass_cov(x);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(c.data()[i] - oracle[i]) < 1e-12);
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b) CHECK(std::abs(c.at(a, b) - c.at(b, a)) < 1e-12);
  }
  CHECK_THROWS_AS(covariance(Tensor::from_data({1, 2}, {1, 2})), ContractError);
}

TEST_CASE("covariance is positive semi-definite") {
  // Cholesky with a small jitter succeeds only for PSD input.
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor c = covariance(random_tensor({3, 5}, rng));  // rank-deficient
    const std::size_t d = 5;
    std::vector<double> a(c.data().begin(), c.data().end()), l(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) a[i * d + i] += 1e-10;
    bool ok = true;
    for (std::size_t j = 0; j < d && ok; ++j) {
      double s = a[j * d + j];
      for (std::size_t k = 0; k < j; ++k) s -= l[j * d + k] * l[j * d + k];
      if (s <= 0.0) {
        ok = false;
        break;
      }
      l[j * d + j] = std::sqrt(s);
      for (std::size_t i = j + 1; i < d; ++i) {
        double t = a[i * d + j];
        for (std::size_t k = 0; k < j; ++k) t -= l[i * d + k] * l[j * d + k];
        l[i * d + j] = t / l[j * d + j];
      }
    }
    CHECK(ok);
  }
}

TEST_CASE("coral examples") {
  // Source variance 2, target variance 0, d = 1.
  const Tensor s = Tensor::from_data({2, 1}, {0.0, 2.0});
  const Tensor t = Tensor::from_data({2, 1}, {5.0, 5.0});
  CHECK(coral_loss(s, t).item() == doctest::Approx(1.0).epsilon(1e-15));
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({6, 3}, rng);
  CHECK(coral_loss(x, x).item() == 0.0);
  const Tensor y = random_tensor({4, 3}, rng);
  CHECK(std::abs(coral_loss(x, y).item() - coral_loss(y, x).item()) < 1e-12);
  CHECK_THROWS_AS(coral_loss(x, random_tensor({1, 3}, rng)), ContractError);
  CHECK_THROWS_AS(coral_loss(x, random_tensor({4, 2}, rng)), DimensionError);
}

TEST_CASE("feature discrepancy is mmd plus coral") {
  std::mt19937_64 rng(9);
  const Tensor s = random_tensor({5, 3}, rng), t = random_tensor({6, 3}, rng);
  const double fd = feature_discrepancy(s, t, KernelConfig{}).item();
  CHECK(fd == mmd_squared(s, t, KernelConfig{}).item() + coral_loss(s, t).item());
  CHECK(feature_discrepancy(s, s, KernelConfig{}).item() == 0.0);
  const Tensor a = Tensor::from_data({2, 1}, {0.0, 1.0}), b = Tensor::from_data({2, 1}, {1.0, 3.0});
  // mmd by the loop oracle plus coral from variances 0.5 and 2.
  const double expected = naive_mmd(a, b, fixed_kernel(1.0)) + (0.5 - 2.0) * (0.5 - 2.0) / 4.0;
  CHECK(feature_discrepancy(a, b, fixed_kernel(1.0)).item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("class discrepancy examples and properties") {
  const Tensor p = Tensor::from_data({1, 2}, {1.0, 0.0}), q = Tensor::from_data({1, 2}, {0.0, 1.0});
  CHECK(class_discrepancy(std::vector<Tensor>{p, q}).item() == 1.0);
  std::mt19937_64 rng(10);
  const Tensor a = random_probs(4, 3, rng), b = random_probs(4, 3, rng), c = random_probs(4, 3, rng);
  CHECK(class_discrepancy(std::vector<Tensor>{a, a, a}).item() == 0.0);
  const double abc = class_discrepancy(std::vector<Tensor>{a, b, c}).item();
  CHECK(abc == doctest::Approx(class_discrepancy(std::vector<Tensor>{c, a, b}).item()).epsilon(1e-15));
  CHECK(abc == doctest::Approx(class_discrepancy(std::vector<Tensor>{b, c, a}).item()).epsilon(1e-15));
  CHECK(abc >= 0.0);
  CHECK(abc <= 2.0);
  CHECK_THROWS_AS(class_discrepancy(std::vector<Tensor>{a}), ContractError);
  CHECK_THROWS_AS(class_discrepancy(std::vector<Tensor>{a, random_probs(3, 3, rng)}), DimensionError);
  CHECK_THROWS_AS(class_discrepancy(std::vector<Tensor>{a, Tensor::full({4, 3}, 0.5)}), ContractError);
}

TEST_CASE("cross entropy examples and naive oracle") {
  const int zeros[] = {0, 1, 0};
  CHECK(cross_entropy(Tensor::zeros({3, 2}), zeros).item() == doctest::Approx(std::log(2.0)));
  const int first[] = {0};
  CHECK(cross_entropy(Tensor::from_data({1, 2}, {1000.0, 0.0}), first).item() < 1e-12);
  std::mt19937_64 rng(11);
  const Tensor logits = random_tensor({6, 4}, rng, false, -5.0, 5.0);
  const int labels[] = {0, 3, 2, 1, 1, 3};
  double naive = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits.at(i, k));
    naive -= std::log(std::exp(logits.at(i, static_cast<std::size_t>(labels[i]))) / z);
  }
  CHECK(cross_entropy(logits, labels).item() == doctest::Approx(naive / 6.0).epsilon(1e-9));
  const int bad[] = {0, 4, 0, 0, 0, 0};
  CHECK_THROWS_AS(cross_entropy(logits, bad), ContractError);
}

TEST_CASE("total loss arithmetic, errors and linearity of the gradient") {
  const auto s = [](double v) { return Tensor::scalar(v); };
  CHECK(total_loss(s(1), s(2), s(3), {0.5, 0.1}).item() == doctest::Approx(2.3).epsilon(1e-15));
  CHECK(total_loss(s(1), s(2), s(3), {0.0, 0.0}).item() == 1.0);
  try {
    total_loss(s(1), s(std::numeric_limits<double>::infinity()), s(0), {});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("fd") != std::string::npos);
  }

  std::mt19937_64 rng(12);
  Tensor x = random_tensor({4, 3}, rng, true);
  const Tensor y = random_tensor({5, 3}, rng);
  const int labels[] = {0, 1, 2, 1};
  const LossWeights w{0.7, 0.3};
  auto terms = [&] {
    const Tensor p = softmax_rows(x);
    return std::array<Tensor, 3>{cross_entropy(x, labels),
                                 feature_discrepancy(x, y, KernelConfig{}),
                                 class_discrepancy(std::vector<Tensor>{p, softmax_rows(scale(x, 2.0))})};
  };
  std::array<std::vector<double>, 3> g;
  for (int k = 0; k < 3; ++k) {
    x.zero_grad();
    backward(terms()[k]);
    g[k].assign(x.grad().begin(), x.grad().end());
  }
  x.zero_grad();
  const auto t = terms();
  backward(total_loss(t[0], t[1], t[2], w));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(x.grad()[i] - (g[0][i] + w.lambda * g[1][i] + w.gamma * g[2][i])) < 1e-10);
  }
}

TEST_CASE("every loss passes a finite-difference check") {
  std::mt19937_64 rng(13);
  Tensor s = random_tensor({5, 3}, rng, true), t = random_tensor({6, 3}, rng, true);
  Tensor l1 = random_tensor({4, 2}, rng, true), l2 = random_tensor({4, 2}, rng, true);
  std::vector<Tensor> params{s, t, l1, l2};
  const int labels[] = {1, 0, 0, 1};
  auto check = [&](const std::function<Tensor()>& f) {
    CHECK(finite_difference_check(f, params, 1e-6) < 1e-4);
  };
  check([&] { return mmd_squared(s, t, KernelConfig{}); });
  check([&] { return mmd_squared(s, t, fixed_kernel(0.7, {0.5, 2.0})); });
  check([&] { return coral_loss(s, t); });
  check([&] { return feature_discrepancy(s, t, KernelConfig{}); });
  check([&] { return class_discrepancy(std::vector<Tensor>{softmax_rows(l1), softmax_rows(l2)}); });
  check([&] { return cross_entropy(l1, labels); });
}
