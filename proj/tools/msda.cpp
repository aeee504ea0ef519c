#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "msda/cli.hpp"

namespace {

msda::RunConfig configure(const std::string& path, const std::optional<std::uint64_t>& seed) {
  msda::RunConfig cfg = path.empty() ? msda::RunConfig{} : msda::load_config(path);
  if (seed) cfg.hyper.seed = *seed;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-source domain adaptation on synthetic date-code images"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "override hyper.seed");

  auto* generate = app.add_subcommand("generate", "write the roster datasets and manifest");
  auto* train = app.add_subcommand("train", "train one protocol run on generated data");
  auto* suite = app.add_subcommand("suite", "run the full protocol suite for the target");
  auto* cam = app.add_subcommand("cam", "export class activation maps from a checkpoint");
  std::string checkpoint;
  std::optional<std::size_t> images;
  cam->add_option("--checkpoint", checkpoint, "checkpoint path (default <output_dir>/model.ckpt)");
  cam->add_option("--images", images, "number of target test images (default cam.images)");
  auto* dump = app.add_subcommand("config", "print the effective config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    const msda::RunConfig cfg = configure(config_path, seed);
    if (*generate) {
      for (const auto& p : msda::cmd_generate(cfg)) std::cout << p << '\n';
    } else if (*train) {
      const auto report = msda::cmd_train(cfg);
      std::printf("%s %s accuracy %.2f\n", msda::to_string(report.protocol).c_str(),
                  cfg.target.c_str(), 100.0 * report.test_accuracy);
    } else if (*suite) {
      const auto result = msda::cmd_suite(cfg);
      std::cout << msda::summary_csv(result.averages);
    } else if (*cam) {
      const std::string path =
          checkpoint.empty() ? cfg.output_dir + "/model.ckpt" : checkpoint;
      for (const auto& p : msda::cmd_cam(cfg, path, images.value_or(cfg.cam_images))) {
        std::cout << p << '\n';
      }
    } else if (*dump) {
      cfg.validate();
      std::cout << msda::serialize_config(cfg);
    }
  } catch (const msda::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
