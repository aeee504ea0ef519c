#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "helpers.hpp"
#include "msda/cam.hpp"
#include "msda/ops.hpp"

using namespace msda;

namespace {

Heatmap make_heatmap(std::size_t h, std::size_t w, std::vector<double> v,
                     std::size_t sh = 28, std::size_t sw = 28) {
  Heatmap hm;
  hm.values = Tensor::from_data({h, w}, std::move(v));
  hm.source_height = sh;
  hm.source_width = sw;
  return hm;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::filesystem::path scratch_dir() {
  auto dir = std::filesystem::temp_directory_path() / "msda_cam_test";
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("GAP of the raw map equals logit minus bias") {
  MsdaModel m = build_model(2, 2, {1, 28, 28}, 3);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor img = testutil::random_tensor({1, 1, 28, 28}, rng, false, 0.0, 1.0);
    for (std::size_t j = 0; j < 2; ++j) {
      // Independent logit: the ordinary forward pass.
      const auto out = forward_branch(m, img, j);
      for (int c = 0; c < 2; ++c) {
        const Tensor raw = raw_cam(m, img, c, j);
        const auto cw = class_weights(m, j, c);
        const double gap = mean_of(raw.data());
        CHECK(std::abs(gap - (out.logits.data()[c] - cw.bias)) < 1e-10);
      }
    }
  }
}

TEST_CASE("class weights compose projection and classifier") {
  MsdaModel m = build_model(1, 2, {1, 28, 28}, 5);
  const Tensor pw = m.parameter("branch0.proj.weight");
  const Tensor pb = m.parameter("branch0.proj.bias");
  const Tensor cw = m.parameter("branch0.cls.weight");
  const Tensor cb = m.parameter("branch0.cls.bias");
  const std::size_t k = pw.size(0), d = pw.size(1);
  const auto w1 = class_weights(m, 0, 1);
  REQUIRE(w1.weights.size() == k);
  for (std::size_t a = 0; a < k; ++a) {
    double s = 0.0;
    for (std::size_t b = 0; b < d; ++b) s += pw.data()[a * d + b] * cw.data()[b * 2 + 1];
    CHECK(w1.weights[a] == doctest::Approx(s).epsilon(1e-12));
  }
  double bias = cb.data()[1];
  for (std::size_t b = 0; b < d; ++b) bias += pb.data()[b] * cw.data()[b * 2 + 1];
  CHECK(w1.bias == doctest::Approx(bias).epsilon(1e-12));
  CHECK_THROWS_AS(class_weights(m, 0, 2), ContractError);
  CHECK_THROWS_AS(class_weights(m, 0, -1), ContractError);
  CHECK_THROWS_AS(class_weights(m, 1, 0), ContractError);
}

TEST_CASE("zero classifier gives an all-0.5 heatmap") {
  MsdaModel m = build_model(1, 2, {1, 28, 28}, 5);
  Tensor w = m.parameter("branch0.cls.weight");
  for (auto& v : w.data_mut()) v = 0.0;
  std::mt19937_64 rng(1);
  const Tensor img = testutil::random_tensor({1, 1, 28, 28}, rng, false, 0.0, 1.0);
  const Heatmap hm = compute_cam(m, img, 0, 0);
  for (double v : hm.values.data()) CHECK(v == 0.5);
  CHECK(hm.branch == std::optional<std::size_t>(0));
  CHECK(hm.branch_label() == "0");
  CHECK(hm.source_height == 28);
}

TEST_CASE("normalisation and weighting") {
  const Tensor raw = Tensor::from_data({2, 2}, {-1.0, 3.0, 1.0, 0.0});
  const auto n = testutil::to_vec(normalize_map(raw));
  CHECK(n == std::vector<double>{0.0, 1.0, 0.5, 0.25});
  CHECK(testutil::to_vec(normalize_map(Tensor::full({3, 3}, 2.0))) == std::vector<double>(9, 0.5));

  // One map with weight 1 is that map, normalised.
  std::mt19937_64 rng(4);
  const Tensor maps = testutil::random_tensor({1, 1, 5, 5}, rng, false, -1.0, 1.0);
  const std::vector<double> one{1.0};
  const Tensor sum = weighted_map_sum(maps, one);
  CHECK(testutil::to_vec(sum) == testutil::to_vec(maps));
  CHECK(testutil::to_vec(normalize_map(sum)) ==
        testutil::to_vec(normalize_map(Tensor::from_data({5, 5}, testutil::to_vec(maps)))));
  const std::vector<double> two{1.0, 2.0};
  CHECK_THROWS_AS(weighted_map_sum(maps, two), DimensionError);
}

TEST_CASE("raw maps are linear in the class weights") {
  std::mt19937_64 rng(12);
  const Tensor maps = testutil::random_tensor({1, 16, 10, 10}, rng, false, 0.0, 2.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> a(16), b(16), mix(16);
    const double t = (trial + 0.5) / 10.0;
    for (std::size_t k = 0; k < 16; ++k) {
      a[k] = u(rng);
      b[k] = u(rng);
      mix[k] = t * a[k] + (1.0 - t) * b[k];
    }
    const auto ra = testutil::to_vec(weighted_map_sum(maps, a));
    const auto rb = testutil::to_vec(weighted_map_sum(maps, b));
    const auto rm = testutil::to_vec(weighted_map_sum(maps, mix));
    for (std::size_t i = 0; i < rm.size(); ++i) {
      CHECK(std::abs(rm[i] - (t * ra[i] + (1.0 - t) * rb[i])) < 1e-10);
    }
  }
}

TEST_CASE("aggregation") {
  std::vector<double> left(16, 0.0), right(16, 0.0);
  left[4] = 1.0;   // row 1, col 0
  right[7] = 1.0;  // row 1, col 3
  Heatmap l = make_heatmap(4, 4, left), r = make_heatmap(4, 4, right);
  l.branch = 0;
  r.branch = 1;
  const Heatmap agg = aggregate_cams({l, r});
  CHECK(!agg.branch.has_value());
  CHECK(agg.branch_label() == "aggregate");
  CHECK(agg.values.data()[4] > 0.9);
  CHECK(agg.values.data()[7] > 0.9);
  CHECK(agg.values.data()[0] == 0.0);
  CHECK(testutil::to_vec(aggregate_cams({r, l}).values) == testutil::to_vec(agg.values));
  CHECK(testutil::to_vec(aggregate_cams({l, l}).values) == left);

  Heatmap other = make_heatmap(2, 2, {0, 1, 0, 1});
  CHECK_THROWS_AS(aggregate_cams({l, other}), DimensionError);
  Heatmap cls1 = r;
  cls1.class_index = 1;
  CHECK_THROWS_AS(aggregate_cams({l, cls1}), ContractError);
  CHECK_THROWS(aggregate_cams({}));
}

TEST_CASE("upsampling and peak") {
  const Heatmap hm = make_heatmap(2, 2, {0.1, 0.9, 0.3, 0.9}, 4, 6);
  const auto up = upsample_nearest(hm);
  REQUIRE(up.size() == 24);
  const std::vector<double> want{0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9,
                                 0.3, 0.3, 0.3, 0.9, 0.9, 0.9, 0.3, 0.3, 0.3, 0.9, 0.9, 0.9};
  CHECK(up == want);
  CHECK(heatmap_peak(hm) == std::pair<std::size_t, std::size_t>{0, 3});
  // 10x10 onto 28x28 keeps every block of the map.
  std::vector<double> v(100);
  for (std::size_t i = 0; i < 100; ++i) v[i] = static_cast<double>(i) / 99.0;
  const auto big = upsample_nearest(make_heatmap(10, 10, v));
  CHECK(big.size() == 784);
  CHECK(big.front() == 0.0);
  CHECK(big.back() == 1.0);
  CHECK(heatmap_peak(make_heatmap(10, 10, v)) == std::pair<std::size_t, std::size_t>{26, 26});
}

TEST_CASE("PGM export") {
  const auto dir = scratch_dir();
  const Heatmap zeros = make_heatmap(2, 2, {0, 0, 0, 0}, 3, 5);
  export_pgm(zeros, (dir / "z.pgm").string());
  const PgmImage z = read_pgm((dir / "z.pgm").string());
  CHECK(z.width == 5);
  CHECK(z.height == 3);
  CHECK(z.maxval == 255);
  CHECK(z.pixels == std::vector<int>(15, 0));
  std::ifstream in(dir / "z.pgm");
  std::string magic;
  std::size_t w = 0, h = 0;
  in >> magic >> w >> h;
  CHECK(magic == "P2");
  CHECK(w == 5);
  CHECK(h == 3);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(100);
  for (auto& x : v) x = u(rng);
  v[0] = 0.5 / 255.0;  // rounds half away from zero
  const Heatmap hm = make_heatmap(10, 10, v);
  export_pgm(hm, (dir / "r.pgm").string());
  const PgmImage back = read_pgm((dir / "r.pgm").string());
  const auto up = upsample_nearest(hm);
  REQUIRE(back.pixels.size() == up.size());
  for (std::size_t i = 0; i < up.size(); ++i) {
    CHECK(back.pixels[i] == static_cast<int>(std::lround(255.0 * up[i])));
  }
  CHECK(back.pixels[0] == 1);

  std::ofstream(dir / "bad.pgm") << "P5\n2 2\n255\n";
  CHECK_THROWS(read_pgm((dir / "bad.pgm").string()));
  std::ofstream(dir / "short.pgm") << "P2\n2 2\n255\n1 2 3\n";
  CHECK_THROWS(read_pgm((dir / "short.pgm").string()));
  std::ofstream(dir / "comment.pgm") << "P2\n# made by hand\n2 1\n255\n0 255\n";
  CHECK(read_pgm((dir / "comment.pgm").string()).pixels == std::vector<int>{0, 255});
  std::filesystem::remove_all(dir);

  CHECK(cam_filename("Os", "aggregate", 0, 3) == "Os_aggregate_0_3.pgm");
}

TEST_CASE("raw_cam checks its input") {
  MsdaModel m = build_model(1, 2, {1, 28, 28}, 1);
  CHECK_THROWS_AS(raw_cam(m, Tensor::zeros({2, 1, 28, 28}), 0, 0), DimensionError);
  CHECK_THROWS_AS(raw_cam(m, Tensor::zeros({1, 1, 28, 28}), 0, 3), ContractError);
  const Heatmap hm = compute_cam(m, Tensor::full({1, 1, 28, 28}, 0.3), 1, 0);
  CHECK(hm.values.shape() == Shape{10, 10});
  CHECK(hm.class_index == 1);
}
