#include "msda/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "msda/binary_io.hpp"

namespace msda {

namespace {

constexpr std::size_t kPixels = kImageSide * kImageSide;
constexpr const char* kDatasetMagic = "MSDA-DATASET 1";

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

using Image = std::vector<double>;

// Separable box blur with fractional radius: taps within floor(r) get weight
// 1, the next tap gets the fractional part. Borders replicate.
Image box_blur(const Image& src, double radius) {
  if (radius <= 0.0) return src;
  const int whole = static_cast<int>(std::floor(radius));
  const double frac = radius - whole;
  const int reach = frac > 0.0 ? whole + 1 : whole;
  std::vector<double> taps;
  for (int k = -reach; k <= reach; ++k) {
    taps.push_back(std::abs(k) <= whole ? 1.0 : frac);
  }
  const double norm = std::accumulate(taps.begin(), taps.end(), 0.0);
  const int side = static_cast<int>(kImageSide);
  auto clamp = [side](int v) { return std::clamp(v, 0, side - 1); };
  Image tmp(kPixels), out(kPixels);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int k = -reach; k <= reach; ++k)
        acc += taps[k + reach] * src[y * side + clamp(x + k)];
      tmp[y * side + x] = acc / norm;
    }
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double acc = 0.0;
      for (int k = -reach; k <= reach; ++k)
        acc += taps[k + reach] * tmp[clamp(y + k) * side + x];
      out[y * side + x] = acc / norm;
    }
  return out;
}

// Nearest-neighbour rotation about the image centre; uncovered pixels take
// the fill value.
Image rotate(const Image& src, double degrees, double fill) {
  if (degrees == 0.0) return src;
  const double theta = degrees * std::acos(-1.0) / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double centre = (static_cast<double>(kImageSide) - 1.0) / 2.0;
  const int side = static_cast<int>(kImageSide);
  Image out(kPixels, fill);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double dx = x - centre, dy = y - centre;
      const int sx = static_cast<int>(std::lround(c * dx + s * dy + centre));
      const int sy = static_cast<int>(std::lround(-s * dx + c * dy + centre));
      if (sx >= 0 && sx < side && sy >= 0 && sy < side) {
        out[y * side + x] = src[sy * side + sx];
      }
    }
  return out;
}

enum class Degradation { blur, low_contrast, occlusion };

void occlude(Image& glyph, std::mt19937_64& rng) {
  std::size_t x0 = kImageSide, x1 = 0;
  for (std::size_t y = 0; y < kImageSide; ++y)
    for (std::size_t x = 0; x < kImageSide; ++x)
      if (glyph[y * kImageSide + x] > 0.0) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (x0 > x1) return;
  const std::size_t width = x1 - x0 + 1;
  const auto band = static_cast<std::size_t>(std::ceil(0.3 * static_cast<double>(width)));
  std::uniform_int_distribution<std::size_t> start(x0, x1 + 1 - band);
  const std::size_t b0 = start(rng);
  for (std::size_t y = 0; y < kImageSide; ++y)
    for (std::size_t x = b0; x < b0 + band; ++x) glyph[y * kImageSide + x] = 0.0;
}

}  // namespace

void DomainSpec::validate() const {
  auto fail = [this](const std::string& what) {
    throw ContractError("domain '" + name + "': " + what);
  };
  if (name.empty()) fail("empty name");
  if (!(background_level >= 0.0 && background_level <= 1.0))
    fail("background_level must lie in [0, 1]");
  if (!(blur_radius >= 0.0) || !std::isfinite(blur_radius))
    fail("blur_radius must be >= 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
    fail("noise_sigma must be >= 0");
  if (!std::isfinite(rotation_degrees)) fail("rotation_degrees must be finite");
  if (!(glyph_contrast > 0.0 && glyph_contrast <= 1.0))
    fail("glyph_contrast must lie in (0, 1]");
}

std::vector<DomainSpec> default_roster() {
  // Os is the usual target. Ab is the weakest single source for it.
  return {
      {"Ab", 0.60, 0.3, 0.08, 9.0, 0.75},
      {"Bu", 0.70, 0.5, 0.06, 6.0, 0.60},
      {"Bo", 0.95, 0.2, 0.05, -5.0, 0.45},
      {"Li", 0.85, 0.3, 0.05, 10.0, 0.90},
      {"Wi", 0.80, 0.6, 0.05, -8.0, 0.55},
      {"Os", 0.75, 0.4, 0.06, 4.0, 0.55},
  };
}

void validate_roster(const std::vector<DomainSpec>& roster) {
  std::set<std::string> names;
  for (const auto& d : roster) {
    d.validate();
    if (!names.insert(d.name).second) {
      throw ContractError("duplicate domain name in roster: " + d.name);
    }
  }
}

const DomainSpec& find_domain(const std::vector<DomainSpec>& roster,
                              std::string_view name) {
  for (const auto& d : roster) {
    if (d.name == name) return d;
  }
  throw ContractError("unknown domain '" + std::string(name) + "'");
}

UnlabeledSet strip_labels(const LabeledSet& set) {
  return {set.images, set.domain_name};
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(splitmix64(seed) ^ (tag * 0xff51afd7ed558ccdull + 1));
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return derive_seed(seed, io::fnv1a64(tag));
}

std::uint64_t sample_seed(const DomainSpec& spec, std::uint64_t seed,
                          std::size_t index) {
  return derive_seed(derive_seed(seed, spec.name), index);
}

std::vector<double> make_glyph(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> offset(0, 1);
  std::uniform_int_distribution<std::size_t> bar_len(9, 12);
  std::uniform_int_distribution<int> cell_kind(0, 2);
  const std::size_t oy = offset(rng), ox = offset(rng);
  Image g(kPixels, 0.0);
  auto ink = [&g](std::size_t y, std::size_t x) { g[y * kImageSide + x] = 1.0; };
  const std::size_t len = bar_len(rng);
  for (std::size_t y = 1 + oy; y <= 2 + oy; ++y)
    for (std::size_t x = 1 + ox; x < 1 + ox + len; ++x) ink(y, x);
  // Two lines of four cells, each cell 2 wide and up to 3 tall.
  for (std::size_t line = 0; line < 2; ++line)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t x = 1 + ox + 3 * k, y = 5 + oy + 4 * line;
      const int kind = cell_kind(rng);
      for (std::size_t dy = 0; dy < 3; ++dy) {
        if (kind == 0 && dy == 2) continue;  // dot
        if (kind == 2 && dy == 0) continue;  // low stroke
        for (std::size_t dx = 0; dx < 2; ++dx) ink(y + dy, x + dx);
      }
    }
  return g;
}

LabeledSet generate_domain(const DomainSpec& spec, std::size_t n,
                           std::uint64_t seed) {
  spec.validate();
  if (n < 2 || n % 2 != 0) {
    throw ContractError("generate_domain: n must be even and >= 2, got " +
                        std::to_string(n));
  }
  std::vector<double> pixels(n * kPixels);
  std::vector<int> labels(n);
  const double bg = spec.background_level;
  const double ink = bg < 0.5 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = sample_seed(spec, seed, i);
    const bool ok = i % 2 == 0;
    labels[i] = ok ? kLabelOk : kLabelNotOk;
    Image glyph = make_glyph(s);
    std::mt19937_64 rng(derive_seed(s, "render"));
    if (!ok) {
      std::uniform_int_distribution<int> pick(0, 2);
      switch (static_cast<Degradation>(pick(rng))) {
        case Degradation::blur:
          glyph = box_blur(glyph, std::max(1.5, 2.0 * spec.blur_radius));
          break;
        case Degradation::low_contrast:
          for (auto& v : glyph) v *= 0.4;
          break;
        case Degradation::occlusion:
          occlude(glyph, rng);
          break;
      }
    }
    Image img(kPixels);
    for (std::size_t p = 0; p < kPixels; ++p) {
      img[p] = bg + spec.glyph_contrast * glyph[p] * (ink - bg);
    }
    img = box_blur(rotate(img, spec.rotation_degrees, bg), spec.blur_radius);
    if (spec.noise_sigma > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_sigma);
      for (auto& v : img) v += noise(rng);
    }
    for (std::size_t p = 0; p < kPixels; ++p) {
      pixels[i * kPixels + p] = std::clamp(img[p], 0.0, 1.0);
    }
  }
  return {Tensor::from_data({n, 1, kImageSide, kImageSide}, std::move(pixels)),
          std::move(labels), spec.name};
}

LabeledSet subset(const LabeledSet& ds, std::span<const std::size_t> rows) {
  const std::size_t stride = ds.size() ? ds.images.numel() / ds.size() : 0;
  std::vector<double> pixels(rows.size() * stride);
  std::vector<int> labels(rows.size());
  const auto src = ds.images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= ds.size()) {
      throw ContractError("subset: row " + std::to_string(rows[i]) +
                          " out of range for " + std::to_string(ds.size()));
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * stride),
                stride, pixels.begin() + static_cast<std::ptrdiff_t>(i * stride));
    labels[i] = ds.labels[rows[i]];
  }
  Shape shape = ds.images.shape();
  shape[0] = rows.size();
  return {Tensor::from_data(std::move(shape), std::move(pixels)),
          std::move(labels), ds.domain_name};
}

Split split(const LabeledSet& ds, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (n < 10) {
    throw ContractError("split needs at least 10 samples, got " + std::to_string(n));
  }
  // Shuffle within each class, then interleave classes by fractional rank so
  // that every prefix of the order is stratified to within one sample.
  std::mt19937_64 rng(derive_seed(seed, "split"));
  std::vector<int> classes(ds.labels.begin(), ds.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  struct Keyed {
    double key;
    int label;
    std::size_t index;
  };
  std::vector<Keyed> keyed;
  for (int c : classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (ds.labels[i] == c) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t k = 0; k < members.size(); ++k) {
      keyed.push_back({(static_cast<double>(k) + 0.5) /
                           static_cast<double>(members.size()),
                       c, members[k]});
    }
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.key < b.key || (a.key == b.key && a.label < b.label);
  });
  const auto n_train = static_cast<std::size_t>(std::lround(0.7 * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
  std::vector<std::size_t> train, val, test;
  for (std::size_t i = 0; i < n; ++i) {
    auto& part = i < n_train ? train : (i < n_train + n_val ? val : test);
    part.push_back(keyed[i].index);
  }
  return {subset(ds, train), subset(ds, val), subset(ds, test)};
}

LabeledSet combine_sources(const std::vector<LabeledSet>& sets) {
  if (sets.size() < 2) {
    throw ContractError("combine_sources needs at least 2 sets, got " +
                        std::to_string(sets.size()));
  }
  Shape item(sets[0].images.shape().begin() + 1, sets[0].images.shape().end());
  std::vector<double> pixels;
  std::vector<int> labels;
  std::string name = "combined(";
  for (std::size_t k = 0; k < sets.size(); ++k) {
    const auto& s = sets[k];
    Shape other(s.images.shape().begin() + 1, s.images.shape().end());
    if (other != item) {
      throw DimensionError("combine_sources: image shape " + shape_str(other) +
                           " vs " + shape_str(item));
    }
    pixels.insert(pixels.end(), s.images.data().begin(), s.images.data().end());
    labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    name += (k ? "," : "") + s.domain_name;
  }
  name += ")";
  Shape shape = item;
  shape.insert(shape.begin(), labels.size());
  return {Tensor::from_data(std::move(shape), std::move(pixels)),
          std::move(labels), name};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(derive_seed(seed, "epoch"), epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<Batch> minibatches(const LabeledSet& ds, std::size_t batch,
                               std::uint64_t seed, std::size_t epoch) {
  if (batch < 1 || batch > ds.size()) {
    throw ContractError("minibatches: batch " + std::to_string(batch) +
                        " outside [1, " + std::to_string(ds.size()) + "]");
  }
  const auto order = epoch_order(ds.size(), seed, epoch);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::span<const std::size_t> rows(order.data() + start, end - start);
    auto part = subset(ds, rows);
    out.push_back({std::move(part.images), std::move(part.labels)});
  }
  return out;
}

// Layout: text header terminated by "end", then n*c*h*w little-endian
// float64 pixels, then n label bytes.
void save_dataset(const LabeledSet& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  const auto& shape = ds.images.shape();
  const auto ok = std::count(ds.labels.begin(), ds.labels.end(), kLabelOk);
  out << kDatasetMagic << '\n';
  out << "name " << ds.domain_name << '\n';
  out << "n " << ds.size() << '\n';
  out << "shape " << shape[1] << ' ' << shape[2] << ' ' << shape[3] << '\n';
  out << "labels " << ok << ' ' << (static_cast<long>(ds.size()) - ok) << '\n';
  out << "end\n";
  io::write_f64_le(out, ds.images.data());
  std::string label_bytes(ds.size(), '\0');
  for (std::size_t i = 0; i < ds.size(); ++i) {
    label_bytes[i] = static_cast<char>(ds.labels[i]);
  }
  out.write(label_bytes.data(), static_cast<std::streamsize>(label_bytes.size()));
  if (!out) throw std::runtime_error("failed writing dataset " + path);
}

LabeledSet load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  const auto lines = io::read_header_lines(in, "end");
  if (lines.empty() || lines[0] != kDatasetMagic) {
    throw std::runtime_error(path + " is not a dataset file");
  }
  LabeledSet ds;
  std::size_t n = 0, c = 0, h = 0, w = 0;
  long ok = -1, not_ok = -1;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream ls(lines[i]);
    std::string key;
    ls >> key;
    if (key == "name") ls >> ds.domain_name;
    else if (key == "n") ls >> n;
    else if (key == "shape") ls >> c >> h >> w;
    else if (key == "labels") ls >> ok >> not_ok;
    if (ls.fail()) throw std::runtime_error("malformed dataset line: " + lines[i]);
  }
  std::vector<double> pixels(n * c * h * w);
  io::read_f64_le(in, pixels);
  std::string label_bytes(n, '\0');
  in.read(label_bytes.data(), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error("truncated label block in " + path);
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<unsigned char>(label_bytes[i]);
  const auto counted = std::count(ds.labels.begin(), ds.labels.end(), kLabelOk);
  if (counted != ok || static_cast<long>(n) - counted != not_ok) {
    throw std::runtime_error("label counts in " + path + " do not match header");
  }
  ds.images = Tensor::from_data({n, c, h, w}, std::move(pixels));
  return ds;
}

}  // namespace msda
