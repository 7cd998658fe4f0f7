#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "specseg/pipeline.hpp"

namespace {

using specseg::RunConfig;
namespace fs = std::filesystem;

struct CommonFlags {
  int background = -1;
  std::vector<std::size_t> out_size;
  std::size_t jobs = 1;
  int ignore_index = specseg::kDefaultIgnoreIndex;
  std::optional<fs::path> class_map;
};

void add_class_map(CLI::App* cmd, CommonFlags& common) {
  cmd->add_option("--class-map", common.class_map, "JSON object relabelling ground-truth values")
      ->check(CLI::ExistingFile);
}

void add_run_flags(CLI::App* cmd, RunConfig& cfg, CommonFlags& common) {
  cmd->add_option("--tau", cfg.tau, "NCut acceptance threshold")->capture_default_str();
  cmd->add_option("--alpha", cfg.alpha, "affinity exponent")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--splits", cfg.splits, "candidate thresholds per split")->capture_default_str();
  cmd->add_option("--min-size", cfg.min_size, "smallest segment a split may create")->capture_default_str();
  cmd->add_flag("--no-clamp{false}", cfg.clamp, "keep negative cosines (odd alpha only makes sense)");
  cmd->add_flag("--pamr,!--no-pamr", cfg.pamr, "refine with PAMR (needs images)")->capture_default_str();
  cmd->add_option("--pamr-iters", cfg.pamr_options.iterations, "PAMR iterations")->capture_default_str();
  cmd->add_option("--dilations", cfg.pamr_options.dilations, "PAMR dilations")->delimiter(',')->capture_default_str();
  cmd->add_option("--upsample", cfg.upsample, "concept or nearest")
      ->transform(CLI::CheckedTransformer(
          std::map<std::string, specseg::UpsampleMode>{{"concept", specseg::UpsampleMode::Concept},
                                                       {"nearest", specseg::UpsampleMode::Nearest}},
          CLI::ignore_case));
  cmd->add_option("--ignore-index", common.ignore_index, "ground-truth label to ignore")
      ->capture_default_str()
      ->check(CLI::Range(0, 65535));
  cmd->add_option("--background", common.background, "class receiving unmatched segments")->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  cmd->add_option("--jobs,-j", common.jobs, "files processed in parallel")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--out-size", common.out_size, "output height and width")->expected(2);
}

void finish_config(RunConfig& cfg, const CommonFlags& common) {
  if (common.background >= 0) cfg.background = common.background;
  cfg.ignore_index = static_cast<std::uint16_t>(common.ignore_index);
  if (common.out_size.size() == 2) cfg.out_size = std::pair{common.out_size[0], common.out_size[1]};
  if (common.class_map) cfg.class_map = specseg::load_class_map(*common.class_map);
}

int report(const specseg::BatchOutcome& outcome, const std::string& what) {
  for (const auto& f : outcome.failures) spdlog::error("{}", f.message);
  spdlog::info("{}: {} processed, {} failed", what, outcome.processed, outcome.failures.size());
  if (!outcome.ok()) {
    std::cerr << outcome.failures.size() << " input(s) failed:\n";
    for (const auto& f : outcome.failures) std::cerr << "  " << f.file << "\n";
  }
  return outcome.ok() ? 0 : 1;
}

void configure_logging() {
  spdlog::set_default_logger(spdlog::stderr_color_mt("specseg"));
  spdlog::set_pattern("[%l] %v");
  const char* level = std::getenv("SPECSEG_LOG");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::warn);
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Zero-shot segmentation from patch features via recursive normalized cuts"};
  app.require_subcommand(1);

  RunConfig cfg;
  CommonFlags common;

  specseg::SegmentRequest seg;
  auto* segment = app.add_subcommand("segment", "segment feature files into label PNGs");
  segment->add_option("features", seg.features, ".dcft file or directory")->required();
  segment->add_option("--images", seg.images, "RGB .png file or directory, paired by stem");
  segment->add_option("--out,-o", seg.out_dir, "output directory")->required();
  segment->add_flag("--render", seg.render, "also write a colour overlay");
  add_run_flags(segment, cfg, common);

  fs::path pred_dir, gt_dir, report_path;
  auto* eval = app.add_subcommand("eval", "score predicted label PNGs against ground truth");
  eval->add_option("pred", pred_dir, "prediction directory")->required();
  eval->add_option("gt", gt_dir, "ground-truth directory")->required();
  eval->add_option("--out,-o", report_path, "JSON report path")->required();
  eval->add_option("--ignore-index", common.ignore_index)->capture_default_str()->check(CLI::Range(0, 65535));
  eval->add_option("--background", common.background)->check(CLI::NonNegativeNumber);
  add_class_map(eval, common);

  specseg::SweepRequest sweep_req;
  fs::path sweep_out;
  auto* sweep = app.add_subcommand("sweep", "mIoU over a tau x alpha grid");
  sweep->add_option("features", sweep_req.features_dir, "feature directory")->required();
  sweep->add_option("gt", sweep_req.gt_dir, "ground-truth directory")->required();
  sweep->add_option("--images", sweep_req.images, "RGB image directory");
  sweep->add_option("--taus", sweep_req.taus, "tau values")->delimiter(',')->required();
  sweep->add_option("--alphas", sweep_req.alphas, "alpha values")->delimiter(',')->required();
  sweep->add_option("--out,-o", sweep_out, "CSV path")->required();
  add_run_flags(sweep, cfg, common);
  add_class_map(sweep, common);

  specseg::CoherenceRequest coh_req;
  fs::path coh_out;
  auto* coherence = app.add_subcommand("coherence", "same-class ROC of patch cosine similarity");
  coherence->add_option("features", coh_req.features_dir, "feature directory")->required();
  coherence->add_option("gt", coh_req.gt_dir, "ground-truth directory")->required();
  coherence->add_option("--pairs", coh_req.num_pairs, "sampled patch pairs")->capture_default_str();
  coherence->add_option("--seed", cfg.seed)->capture_default_str();
  coherence->add_option("--ignore-index", common.ignore_index)->capture_default_str()->check(CLI::Range(0, 65535));
  coherence->add_option("--out,-o", coh_out, "ROC CSV path")->required();
  add_class_map(coherence, common);

  specseg::ClusterRequest cluster;
  auto* autosc = app.add_subcommand("autosc", "eigen-gap spectral clustering");
  autosc->add_option("features", cluster.features, ".dcft file or directory")->required();
  autosc->add_option("--images", cluster.images, "RGB .png file or directory");
  autosc->add_option("--alphas", cluster.alphas, "candidate exponents")->delimiter(',')->capture_default_str();
  autosc->add_option("--k-max", cluster.k_max, "largest cluster count considered")->capture_default_str();
  autosc->add_option("--out,-o", cluster.out_dir, "output directory")->required();
  add_run_flags(autosc, cfg, common);

  auto* kmeans = app.add_subcommand("kmeans", "k-means on normalised patch features");
  kmeans->add_option("features", cluster.features, ".dcft file or directory")->required();
  kmeans->add_option("--images", cluster.images, "RGB .png file or directory");
  auto* k_opt = kmeans->add_option("--k", cluster.k, "cluster count");
  kmeans->add_option("--k-from-gt", cluster.gt, "take k from the ground-truth class count")->excludes(k_opt);
  kmeans->add_option("--out,-o", cluster.out_dir, "output directory")->required();
  add_run_flags(kmeans, cfg, common);
  add_class_map(kmeans, common);

  CLI11_PARSE(app, argc, argv);
  cluster.jobs = seg.jobs = sweep_req.jobs = common.jobs;

  try {
    finish_config(cfg, common);
    if (*segment) return report(specseg::cmd_segment(seg, cfg), "segment");
    if (*eval) {
      const auto r = specseg::cmd_eval(pred_dir, gt_dir, cfg, report_path);
      std::cout << "miou " << specseg::format_double(r.miou) << "\n";
      return 0;
    }
    if (*sweep) {
      const auto rows = specseg::cmd_sweep(sweep_req, cfg);
      specseg::write_file_atomic(sweep_out, specseg::sweep_to_csv(rows));
      return 0;
    }
    if (*coherence) {
      const auto roc = specseg::cmd_coherence(coh_req, cfg);
      specseg::write_file_atomic(coh_out, specseg::roc_to_csv(roc));
      std::cout << "auc " << specseg::format_double(roc.auc) << "\n";
      return 0;
    }
    if (*autosc) {
      cfg.validate();
      return report(specseg::cmd_autosc(cluster, cfg), "autosc");
    }
    if (*kmeans) {
      cfg.validate();
      return report(specseg::cmd_kmeans(cluster, cfg), "kmeans");
    }
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
