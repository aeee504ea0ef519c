#include "msda/cli.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "msda/binary_io.hpp"

namespace fs = std::filesystem;

namespace msda {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
    throw UsageError("config: " + key + " expects a number, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  errno = 0;
  char* end = nullptr;
  const auto v = std::strtoull(value.c_str(), &end, 10);
  if (value.empty() || value[0] == '-' || end != value.c_str() + value.size() ||
      errno == ERANGE) {
    throw UsageError("config: " + key + " expects a non-negative integer, got '" +
                     value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw UsageError("config: " + key + " expects true or false, got '" + value + "'");
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

DomainSpec& roster_entry(RunConfig& cfg, const std::string& name) {
  for (auto& d : cfg.roster) {
    if (d.name == name) return d;
  }
  throw UsageError("config: roster." + name + " refers to a domain not in roster");
}

void set_domain_field(DomainSpec& d, const std::string& field,
                      const std::string& key, const std::string& value) {
  const double v = parse_double(key, value);
  if (field == "background_level") d.background_level = v;
  else if (field == "blur_radius") d.blur_radius = v;
  else if (field == "noise_sigma") d.noise_sigma = v;
  else if (field == "rotation_degrees") d.rotation_degrees = v;
  else if (field == "glyph_contrast") d.glyph_contrast = v;
  else throw UsageError("config: unknown domain field '" + key + "'");
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  HyperParams& h = cfg.hyper;
  if (key == "target") cfg.target = value;
  else if (key == "protocol") {
    try {
      cfg.protocol = parse_protocol(value);
    } catch (const ContractError& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
  } else if (key == "sources") cfg.sources = split_list(value);
  else if (key == "output_dir") cfg.output_dir = value;
  else if (key == "export_cams") cfg.export_cams = parse_bool(key, value);
  else if (key == "data.images_per_domain") cfg.images_per_domain = parse_uint(key, value);
  else if (key == "cam.images") cfg.cam_images = parse_uint(key, value);
  else if (key == "cam.class") cfg.cam_class = static_cast<int>(parse_uint(key, value));
  else if (key == "suite.anchor") {
    if (value.empty()) cfg.anchor.reset();
    else cfg.anchor = value;
  } else if (key == "suite.jobs") cfg.jobs = parse_uint(key, value);
  else if (key == "hyper.lr") h.lr = parse_double(key, value);
  else if (key == "hyper.beta1") h.beta1 = parse_double(key, value);
  else if (key == "hyper.beta2") h.beta2 = parse_double(key, value);
  else if (key == "hyper.adam_eps") h.adam_eps = parse_double(key, value);
  else if (key == "hyper.batch") h.batch = parse_uint(key, value);
  else if (key == "hyper.epochs") h.epochs = parse_uint(key, value);
  else if (key == "hyper.lambda") h.weights.lambda = parse_double(key, value);
  else if (key == "hyper.gamma") h.weights.gamma = parse_double(key, value);
  else if (key == "hyper.seed") h.seed = parse_uint(key, value);
  else if (key == "kernel.family") {
    if (value != "gaussian") throw UsageError("config: unknown kernel family '" + value + "'");
    h.kernel.family = KernelFamily::gaussian;
  } else if (key == "kernel.multipliers") {
    h.kernel.bandwidth_multipliers.clear();
    for (const auto& m : split_list(value)) {
      h.kernel.bandwidth_multipliers.push_back(parse_double(key, m));
    }
  } else if (key == "kernel.bandwidth") {
    if (value == "median") h.kernel.fixed_bandwidth.reset();
    else h.kernel.fixed_bandwidth = parse_double(key, value);
  } else if (key.rfind("roster.", 0) == 0) {
    const auto dot = key.find('.', 7);
    if (dot == std::string::npos) throw UsageError("config: malformed key '" + key + "'");
    set_domain_field(roster_entry(cfg, key.substr(7, dot - 7)), key.substr(dot + 1),
                     key, value);
  } else {
    throw UsageError("config: unknown key '" + key + "'");
  }
}

struct ManifestEntry {
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string checksum;
};

std::string manifest_path(const RunConfig& cfg) {
  return (fs::path(data_dir(cfg)) / "manifest.csv").string();
}

std::map<std::string, ManifestEntry> read_manifest(const RunConfig& cfg) {
  const std::string path = manifest_path(cfg);
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing manifest " + path + " (run generate first)");
  std::map<std::string, ManifestEntry> out;
  std::string line;
  std::getline(in, line);
  if (trim(line) != "name,n,seed,checksum") {
    throw std::runtime_error(path + ": unexpected header");
  }
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split_list(line);
    if (f.size() != 4) throw std::runtime_error(path + ": malformed row '" + line + "'");
    out[f[0]] = {std::stoul(f[1]), std::stoull(f[2]), f[3]};
  }
  return out;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path);
}

// Target test split of the generated data, split with the data seed.
LabeledSet target_test(const RunConfig& cfg) {
  const auto manifest = read_manifest(cfg);
  const auto data = load_verified(cfg, cfg.target);
  const std::uint64_t seed = manifest.at(cfg.target).seed;
  return split(data, derive_seed(seed, "split:" + cfg.target)).test;
}

std::vector<std::string> export_cams_for(const RunConfig& cfg, const MsdaModel& model,
                                         const LabeledSet& test, std::size_t n_images,
                                         const std::string& dir) {
  std::vector<std::string> written;
  if (n_images == 0) return written;
  if (n_images > test.size()) {
    throw UsageError("cam: asked for " + std::to_string(n_images) +
                     " images but the target test split has " +
                     std::to_string(test.size()));
  }
  ensure_dir(dir);
  for (std::size_t i = 0; i < n_images; ++i) {
    const std::size_t row[] = {i};
    const Tensor image = subset(test, row).images;
    std::vector<Heatmap> maps;
    for (std::size_t j = 0; j < model.num_sources(); ++j) {
      maps.push_back(compute_cam(model, image, cfg.cam_class, j));
    }
    maps.push_back(aggregate_cams(maps));
    for (const auto& hm : maps) {
      const auto path =
          (fs::path(dir) / cam_filename(cfg.target, hm.branch_label(), cfg.cam_class, i))
              .string();
      export_pgm(hm, path);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace

void RunConfig::validate() const {
  try {
    validate_roster(roster);
    find_domain(roster, target);
    hyper.validate();
  } catch (const ContractError& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  std::set<std::string> seen;
  for (const auto& s : sources) {
    if (s == target) throw UsageError("config: target " + target + " is listed as a source");
    if (!seen.insert(s).second) throw UsageError("config: source " + s + " listed twice");
    try {
      find_domain(roster, s);
    } catch (const ContractError& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
  }
  if (protocol == Protocol::single && sources.size() != 1) {
    throw UsageError("config: protocol single takes exactly 1 source, got " +
                     std::to_string(sources.size()));
  }
  if (protocol != Protocol::single && sources.size() < 2) {
    throw UsageError("config: protocol " + to_string(protocol) +
                     " needs at least 2 sources, got " + std::to_string(sources.size()));
  }
  if (anchor && *anchor == target) throw UsageError("config: anchor equals the target");
  if (cam_class < 0 || cam_class > 1) throw UsageError("config: cam.class must be 0 or 1");
  if (images_per_domain < 10 || images_per_domain % 2 != 0) {
    throw UsageError("config: data.images_per_domain must be even and >= 10");
  }
}

RunConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  RunConfig cfg;
  // The roster list goes first so roster.<name>.* keys can refer to it.
  // Listed names known to the default roster start from its values.
  for (const auto& [key, value] : entries) {
    if (key != "roster") continue;
    const auto defaults = default_roster();
    cfg.roster.clear();
    for (const auto& name : split_list(value)) {
      DomainSpec d{name, 0.0, 0.0, 0.0, 0.0, 1.0};
      for (const auto& def : defaults) {
        if (def.name == name) d = def;
      }
      cfg.roster.push_back(d);
    }
  }
  for (const auto& [key, value] : entries) {
    if (key != "roster") set_key(cfg, key, value);
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::vector<std::string> names;
  for (const auto& d : cfg.roster) names.push_back(d.name);
  os << "roster=" << join(names, ',') << '\n';
  for (const auto& d : cfg.roster) {
    const std::string p = "roster." + d.name + ".";
    os << p << "background_level=" << fmt(d.background_level) << '\n'
       << p << "blur_radius=" << fmt(d.blur_radius) << '\n'
       << p << "noise_sigma=" << fmt(d.noise_sigma) << '\n'
       << p << "rotation_degrees=" << fmt(d.rotation_degrees) << '\n'
       << p << "glyph_contrast=" << fmt(d.glyph_contrast) << '\n';
  }
  const HyperParams& h = cfg.hyper;
  os << "target=" << cfg.target << '\n'
     << "protocol=" << to_string(cfg.protocol) << '\n'
     << "sources=" << join(cfg.sources, ',') << '\n'
     << "hyper.lr=" << fmt(h.lr) << '\n'
     << "hyper.beta1=" << fmt(h.beta1) << '\n'
     << "hyper.beta2=" << fmt(h.beta2) << '\n'
     << "hyper.adam_eps=" << fmt(h.adam_eps) << '\n'
     << "hyper.batch=" << h.batch << '\n'
     << "hyper.epochs=" << h.epochs << '\n'
     << "hyper.lambda=" << fmt(h.weights.lambda) << '\n'
     << "hyper.gamma=" << fmt(h.weights.gamma) << '\n'
     << "hyper.seed=" << h.seed << '\n'
     << "kernel.family=gaussian\n";
  std::vector<std::string> mults;
  for (double m : h.kernel.bandwidth_multipliers) mults.push_back(fmt(m));
  os << "kernel.multipliers=" << join(mults, ',') << '\n'
     << "kernel.bandwidth="
     << (h.kernel.fixed_bandwidth ? fmt(*h.kernel.fixed_bandwidth) : "median") << '\n'
     << "output_dir=" << cfg.output_dir << '\n'
     << "export_cams=" << (cfg.export_cams ? "true" : "false") << '\n'
     << "data.images_per_domain=" << cfg.images_per_domain << '\n'
     << "cam.images=" << cfg.cam_images << '\n'
     << "cam.class=" << cfg.cam_class << '\n'
     << "suite.anchor=" << cfg.anchor.value_or("") << '\n'
     << "suite.jobs=" << cfg.jobs << '\n';
  return os.str();
}

std::string data_dir(const RunConfig& cfg) {
  return (fs::path(cfg.output_dir) / "data").string();
}

std::string dataset_path(const RunConfig& cfg, const std::string& domain) {
  return (fs::path(data_dir(cfg)) / (domain + ".msds")).string();
}

std::vector<std::string> cmd_generate(const RunConfig& cfg) {
  cfg.validate();
  ensure_dir(data_dir(cfg));
  std::vector<std::string> written;
  std::ostringstream manifest;
  manifest << "name,n,seed,checksum\n";
  for (const auto& spec : cfg.roster) {
    const auto ds = generate_domain(spec, cfg.images_per_domain, cfg.hyper.seed);
    const auto path = dataset_path(cfg, spec.name);
    save_dataset(ds, path);
    manifest << spec.name << ',' << ds.size() << ',' << cfg.hyper.seed << ','
             << io::hex64(io::file_checksum(path)) << '\n';
    written.push_back(path);
  }
  write_text(manifest_path(cfg), manifest.str());
  written.push_back(manifest_path(cfg));
  return written;
}

LabeledSet load_verified(const RunConfig& cfg, const std::string& domain) {
  const auto manifest = read_manifest(cfg);
  const auto it = manifest.find(domain);
  if (it == manifest.end()) {
    throw std::runtime_error("domain " + domain + " is not in the manifest");
  }
  const auto path = dataset_path(cfg, domain);
  if (!fs::exists(path)) throw std::runtime_error("missing dataset " + path);
  const auto actual = io::hex64(io::file_checksum(path));
  if (actual != it->second.checksum) {
    throw std::runtime_error("checksum mismatch for " + path + ": manifest " +
                             it->second.checksum + ", file " + actual);
  }
  auto ds = load_dataset(path);
  if (ds.size() != it->second.n) {
    throw std::runtime_error(path + " holds " + std::to_string(ds.size()) +
                             " images, manifest says " + std::to_string(it->second.n));
  }
  return ds;
}

TrainReport cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = read_manifest(cfg);
  std::vector<DomainData> domains;
  std::vector<std::string> needed = cfg.sources;
  needed.push_back(cfg.target);
  for (const auto& name : needed) {
    const auto ds = load_verified(cfg, name);
    domains.push_back({name, split(ds, derive_seed(manifest.at(name).seed, "split:" + name))});
  }
  const RunSpec spec{cfg.protocol, cfg.sources};
  std::optional<MsdaModel> model;
  const RunResult result = run_one(spec, domains, cfg.target, cfg.hyper, &model);

  ensure_dir(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  SuiteResult row;
  row.target = cfg.target;
  row.seed = cfg.hyper.seed;
  row.runs.push_back(result);
  write_text((out / "report.csv").string(), suite_csv(row));

  std::ostringstream epochs;
  epochs << "epoch,cl,fd,cd,total,val_accuracy\n";
  for (std::size_t e = 0; e < result.report.per_epoch.size(); ++e) {
    const auto& log = result.report.per_epoch[e];
    epochs << e + 1 << ',' << fmt(log.cl) << ',' << fmt(log.fd) << ',' << fmt(log.cd)
           << ',' << fmt(log.total) << ',' << fmt(log.val_accuracy) << '\n';
  }
  write_text((out / "epochs.csv").string(), epochs.str());
  save_checkpoint(*model, (out / "model.ckpt").string());

  if (cfg.export_cams) {
    export_cams_for(cfg, *model, domains.back().split.test, cfg.cam_images,
                    (out / "cams").string());
  }
  return result.report;
}

SuiteResult cmd_suite(const RunConfig& cfg) {
  cfg.validate();
  SuiteOptions options;
  options.images_per_domain = cfg.images_per_domain;
  options.anchor = cfg.anchor;
  options.jobs = cfg.jobs;
  SuiteResult result;
  try {
    result = run_protocol_suite(cfg.roster, cfg.target, cfg.hyper, options);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  ensure_dir(cfg.output_dir);
  const fs::path out(cfg.output_dir);
  write_text((out / "suite.csv").string(), suite_csv(result));
  write_text((out / "summary.csv").string(), summary_csv(result.averages));
  return result;
}

std::vector<std::string> cmd_cam(const RunConfig& cfg, const std::string& checkpoint,
                                 std::size_t n_images) {
  cfg.validate();
  if (!fs::exists(checkpoint)) throw std::runtime_error("missing checkpoint " + checkpoint);
  const MsdaModel model = load_checkpoint(checkpoint);
  if (n_images == 0) return {};
  return export_cams_for(cfg, model, target_test(cfg), n_images,
                         (fs::path(cfg.output_dir) / "cams").string());
}

}  // namespace msda
