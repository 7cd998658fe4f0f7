#pragma once

// Batch commands behind the `specseg` tool. Inputs are paired across
// directories by filename stem; every output is written atomically.

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "specseg/affinity.hpp"
#include "specseg/autosc.hpp"
#include "specseg/error.hpp"
#include "specseg/evalkit.hpp"
#include "specseg/highres.hpp"
#include "specseg/ncut.hpp"
#include "specseg/tensorio.hpp"
#include "specseg/types.hpp"

namespace specseg {

namespace fs = std::filesystem;

enum class UpsampleMode { Concept, Nearest };

struct RunConfig {
  double tau = 0.5;
  int alpha = 10;
  std::size_t splits = 32;
  std::size_t min_size = 2;
  bool clamp = true;
  bool pamr = true;
  PamrOptions pamr_options{};
  UpsampleMode upsample = UpsampleMode::Concept;
  std::uint16_t ignore_index = kDefaultIgnoreIndex;
  std::optional<int> background;
  std::uint64_t seed = 0;
  std::optional<std::pair<std::size_t, std::size_t>> out_size;  // (height, width)
  /// Ground-truth relabelling applied on load; unlisted values pass through.
  std::map<std::uint16_t, std::uint16_t> class_map;

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw Error(Errc::InvalidArgument, "tau must lie in (0, 1)");
    if (alpha < 1) throw Error(Errc::InvalidArgument, "alpha must be >= 1");
    if (splits < 2) throw Error(Errc::InvalidArgument, "splits must be >= 2");
    if (min_size < 1) throw Error(Errc::InvalidArgument, "min-size must be >= 1");
    if (pamr_options.iterations < 0) throw Error(Errc::InvalidArgument, "pamr-iters must be >= 0");
  }

  NcutOptions ncut() const { return NcutOptions{tau, alpha, splits, min_size, clamp, {}}; }
};

/// Reads a JSON object mapping ground-truth label values to class ids,
/// e.g. {"7": 1, "8": 255}. Keys are decimal strings.
inline std::map<std::uint16_t, std::uint16_t> load_class_map(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidArgument, path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(Errc::InvalidArgument, path.string() + ": class map must be a JSON object");
  std::map<std::uint16_t, std::uint16_t> out;
  for (const auto& [key, value] : j.items()) {
    unsigned from = 0;
    const auto [end, ec] = std::from_chars(key.data(), key.data() + key.size(), from);
    if (ec != std::errc{} || end != key.data() + key.size() || from > 65535)
      throw Error(Errc::InvalidArgument, path.string() + ": bad label key \"" + key + "\"");
    if (!value.is_number_unsigned() || value.get<std::uint64_t>() > 65535)
      throw Error(Errc::InvalidArgument, path.string() + ": value for \"" + key + "\" is not a label in [0, 65535]");
    out[static_cast<std::uint16_t>(from)] = value.get<std::uint16_t>();
  }
  return out;
}

inline void remap_labels(LabelMap& map, const std::map<std::uint16_t, std::uint16_t>& class_map) {
  if (class_map.empty()) return;
  for (auto& v : map.labels)
    if (const auto it = class_map.find(v); it != class_map.end()) v = it->second;
}

struct Failure {
  std::string file;
  std::string message;
};

struct BatchOutcome {
  std::size_t processed = 0;
  std::vector<Failure> failures;

  bool ok() const noexcept { return failures.empty(); }
};

// ---------------------------------------------------------------------------
// Rendering

/// 256-entry index palette: bits of the label are spread over the high bits
/// of the three channels (label 0 is black, 1 dark red, 2 dark green, ...).
inline std::array<std::array<std::uint8_t, 3>, 256> render_palette() {
  std::array<std::array<std::uint8_t, 3>, 256> palette{};
  for (unsigned i = 0; i < 256; ++i) {
    unsigned c = i;
    std::array<unsigned, 3> rgb{};
    for (int j = 7; j >= 0; --j) {
      for (int ch = 0; ch < 3; ++ch) rgb[static_cast<std::size_t>(ch)] |= ((c >> ch) & 1u) << j;
      c >>= 3;
    }
    palette[i] = {static_cast<std::uint8_t>(rgb[0]), static_cast<std::uint8_t>(rgb[1]),
                  static_cast<std::uint8_t>(rgb[2])};
  }
  return palette;
}

/// Half-and-half blend of the image with the palette colour of each label.
inline std::vector<std::uint8_t> render_overlay(const HiResSegmentation& seg, const RgbImage& image) {
  if (image.height != seg.height || image.width != seg.width)
    throw Error(Errc::DimensionMismatch, "render image size differs from the segmentation");
  static const auto palette = render_palette();
  std::vector<std::uint8_t> rgb(seg.labels.size() * 3);
  for (std::size_t i = 0; i < seg.labels.size(); ++i) {
    const auto& colour = palette[static_cast<std::size_t>(seg.labels[i]) % 256];
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = 0.5 * std::clamp(image.data[i * 3 + c], 0.0f, 1.0f) * 255.0 + 0.5 * colour[c];
      rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return rgb;
}

// ---------------------------------------------------------------------------
// Serialization helpers

inline nlohmann::json to_json(const PartitionTree& tree) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& n = tree.nodes[i];
    nlohmann::json j{{"id", i}, {"node_ids", n.node_ids}, {"children", n.children}};
    j["split_cost"] = n.split_cost ? nlohmann::json(*n.split_cost) : nlohmann::json(nullptr);
    if (n.candidate_cost) j["candidate_cost"] = *n.candidate_cost;
    j["stop_reason"] = n.stop_reason ? nlohmann::json(std::string(to_string(*n.stop_reason))) : nlohmann::json(nullptr);
    nodes.push_back(std::move(j));
  }
  return {{"nodes", nodes}};
}

inline nlohmann::json to_json(const EigenGapReport& r) {
  return {{"alpha_chosen", r.alpha_chosen}, {"k_chosen", r.k_chosen},
          {"gaps", r.gaps},                 {"alphas", r.alphas},
          {"spectra", r.spectra},           {"best_gap_per_alpha", r.best_gap_per_alpha}};
}

/// Shortest decimal that round-trips.
inline std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

namespace detail {

inline LabelMap load_ground_truth(const fs::path& path, const RunConfig& config) {
  auto gt = load_labels(path, config.ignore_index);
  remap_labels(gt, config.class_map);
  return gt;
}

inline Error with_context(const Error& e, const std::string& context) {
  return Error(e.code(), context + ": " + e.message());
}

/// A single file, or the sorted regular files with the given extension.
inline std::vector<fs::path> list_inputs(const fs::path& p, const std::string& ext) {
  if (!fs::exists(p)) throw Error(Errc::IoFailure, p.string() + " does not exist");
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(p))
    if (entry.is_regular_file() && entry.path().extension() == ext) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Partner of `stem` under `where`: the file itself when `where` is a file,
/// otherwise `<where>/<stem><ext>` if it exists.
inline std::optional<fs::path> find_partner(const std::optional<fs::path>& where, const std::string& stem,
                                            const std::string& ext) {
  if (!where) return std::nullopt;
  if (!fs::is_directory(*where)) return fs::exists(*where) ? std::optional<fs::path>(*where) : std::nullopt;
  auto candidate = *where / (stem + ext);
  if (fs::exists(candidate)) return candidate;
  return std::nullopt;
}

/// Runs task(i) for i in [0, count) on up to `jobs` threads and collects
/// failures in input order.
template <typename Task>
BatchOutcome run_batch(const std::vector<fs::path>& inputs, std::size_t jobs, Task task) {
  std::vector<std::optional<std::string>> errors(inputs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < inputs.size(); i = next++) {
      try {
        task(i);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(inputs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  BatchOutcome outcome;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (errors[i])
      outcome.failures.push_back({inputs[i].string(), *errors[i]});
    else
      ++outcome.processed;
  }
  return outcome;
}

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot create " + dir.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

/// Output resolution: explicit size, else the image, else the sidecar's
/// source image size, else `fallback`, else the patch grid.
inline std::pair<std::size_t, std::size_t> output_size(const FeatureMap& fm, const RunConfig& config,
                                                       const RgbImage* image, const std::optional<RunMetadata>& meta,
                                                       std::optional<std::pair<std::size_t, std::size_t>> fallback = {}) {
  if (config.out_size) return *config.out_size;
  if (image) return {image->height, image->width};
  if (meta && meta->image_height > 0 && meta->image_width > 0) return {meta->image_height, meta->image_width};
  if (fallback) return *fallback;
  return {fm.height(), fm.width()};
}

/// Patch-grid segmentation to pixel labels: concept assignment or nearest
/// upsampling, then PAMR when enabled.
inline HiResSegmentation lift_segmentation(const FeatureMap& fm, const SegmentationMap& seg, std::size_t out_h,
                                           std::size_t out_w, const RunConfig& config, const RgbImage* image) {
  HiResSegmentation hi = config.upsample == UpsampleMode::Nearest
                             ? nearest_upsample(seg, out_h, out_w)
                             : assign_concepts_upsampled(fm, masked_smm(fm, seg), seg, out_h, out_w);
  if (!config.pamr) return hi;
  if (!image) throw Error(Errc::InvalidArgument, "an image is required when PAMR is enabled");
  return pamr_refine<float>(*image, hi, config.pamr_options);
}

struct SegmentOutput {
  NcutResult ncut;
  HiResSegmentation labels;
};

inline SegmentOutput segment_features(const FeatureMap& fm, const RunConfig& config, const RgbImage* image,
                                      const std::optional<RunMetadata>& meta,
                                      std::optional<std::pair<std::size_t, std::size_t>> fallback = {}) {
  SegmentOutput out;
  out.ncut = recursive_ncut(fm, config.ncut());
  const auto [h, w] = output_size(fm, config, image, meta, fallback);
  out.labels = lift_segmentation(fm, out.ncut.segmentation, h, w, config, image);
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct SegmentRequest {
  fs::path features;                 // .dcft file or directory
  std::optional<fs::path> images;    // .png file or directory
  fs::path out_dir;
  bool render = false;
  std::size_t jobs = 1;
};

namespace detail {

struct LoadedInput {
  FeatureMap features;
  std::optional<RunMetadata> meta;
  std::optional<RgbImage> image;
};

inline LoadedInput load_input(const fs::path& path, const std::optional<fs::path>& images, bool need_image) {
  LoadedInput in{load_features(path), load_metadata(path), std::nullopt};
  const auto image_path = find_partner(images, path.stem().string(), ".png");
  if (image_path)
    in.image = load_rgb(*image_path);
  else if (need_image)
    throw Error(Errc::MissingPair, "no image for " + path.filename().string());
  return in;
}

}  // namespace detail

/// Writes `<stem>.png` (16-bit labels), `<stem>.tree.json` and, with
/// rendering, `<stem>.render.png` per feature file.
inline BatchOutcome cmd_segment(const SegmentRequest& req, const RunConfig& config) {
  config.validate();
  const auto inputs = detail::list_inputs(req.features, ".dcft");
  detail::ensure_directory(req.out_dir);
  return detail::run_batch(inputs, req.jobs, [&](std::size_t i) {
    const auto& path = inputs[i];
    try {
      auto in = detail::load_input(path, req.images, config.pamr || req.render);
      const auto out = segment_features(in.features, config, in.image ? &*in.image : nullptr, in.meta);
      const std::string stem = path.stem().string();
      save_segmentation(out.labels, req.out_dir / (stem + ".png"));
      nlohmann::json tree = to_json(out.ncut.tree);
      tree["grid"] = {in.features.height(), in.features.width()};
      tree["num_segments"] = out.ncut.segmentation.num_segments;
      write_file_atomic(req.out_dir / (stem + ".tree.json"), tree.dump(2) + "\n");
      if (req.render)
        save_rgb8(out.labels.height, out.labels.width, render_overlay(out.labels, *in.image),
                  req.out_dir / (stem + ".render.png"));
    } catch (const Error& e) {
      throw detail::with_context(e, path.string());
    }
  });
}

namespace detail {

/// Stem-aligned (prediction, ground truth) paths; any unpaired file is an error.
inline std::vector<std::pair<fs::path, fs::path>> pair_by_stem(const fs::path& a_dir, const std::string& a_ext,
                                                                const fs::path& b_dir) {
  std::map<std::string, fs::path> a, b;
  for (const auto& p : list_inputs(a_dir, a_ext)) a.emplace(p.stem().string(), p);
  for (const auto& p : list_inputs(b_dir, ".png")) b.emplace(p.stem().string(), p);
  std::vector<std::string> missing;
  for (const auto& [stem, p] : a)
    if (!b.count(stem)) missing.push_back(p.string() + " has no ground truth");
  for (const auto& [stem, p] : b)
    if (!a.count(stem)) missing.push_back(p.string() + " has no counterpart in " + a_dir.string());
  if (!missing.empty()) {
    std::string msg;
    for (const auto& m : missing) msg += (msg.empty() ? "" : "; ") + m;
    throw Error(Errc::MissingPair, msg);
  }
  std::vector<std::pair<fs::path, fs::path>> out;
  for (const auto& [stem, p] : a) out.emplace_back(p, b.at(stem));
  return out;
}

}  // namespace detail

/// Scores a directory of predicted label PNGs against ground truth.
inline EvalReport cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const RunConfig& config,
                           const std::optional<fs::path>& report_path = std::nullopt) {
  EvalAccumulator acc;
  for (const auto& [pred_path, gt_path] : detail::pair_by_stem(pred_dir, ".png", gt_dir)) {
    try {
      const auto pred = segmentation_from_labels(load_labels(pred_path));
      const auto gt = detail::load_ground_truth(gt_path, config);
      acc.add(pred, gt, match_segments(pred, gt, config.background), pred_path.filename().string());
    } catch (const Error& e) {
      throw detail::with_context(e, pred_path.filename().string());
    }
  }
  auto report = acc.report();
  if (report_path) write_file_atomic(*report_path, to_json(report).dump(2) + "\n");
  return report;
}

struct SweepRequest {
  fs::path features_dir;
  fs::path gt_dir;
  std::optional<fs::path> images;
  std::vector<double> taus;
  std::vector<int> alphas;
  std::size_t jobs = 1;
};

struct SweepRow {
  double tau = 0.0;
  int alpha = 0;
  double miou = 0.0;
  double mean_k = 0.0;
};

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out = "tau,alpha,miou,mean_k\n";
  for (const auto& r : rows)
    out += format_double(r.tau) + "," + std::to_string(r.alpha) + "," + format_double(r.miou) + "," +
           format_double(r.mean_k) + "\n";
  return out;
}

/// Cross product of tau and alpha values. Each cell runs the segment
/// pipeline (at ground-truth resolution unless an image, sidecar or explicit
/// size says otherwise) and scores it; rows are ordered by (alpha, tau).
inline std::vector<SweepRow> cmd_sweep(const SweepRequest& req, const RunConfig& base) {
  if (req.taus.empty() || req.alphas.empty()) throw Error(Errc::InvalidArgument, "empty tau or alpha list");
  const auto pairs = detail::pair_by_stem(req.features_dir, ".dcft", req.gt_dir);
  std::vector<double> taus = req.taus;
  std::vector<int> alphas = req.alphas;
  std::sort(taus.begin(), taus.end());
  std::sort(alphas.begin(), alphas.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  for (double t : taus) {
    RunConfig c = base;
    c.tau = t;
    c.validate();
  }

  // cells[file][alpha][tau]
  struct Cell {
    EvalAccumulator acc;
    int k = 0;
  };
  std::vector<std::vector<std::vector<Cell>>> cells(
      pairs.size(), std::vector<std::vector<Cell>>(alphas.size(), std::vector<Cell>(taus.size())));
  std::vector<fs::path> inputs;
  for (const auto& p : pairs) inputs.push_back(p.first);

  const auto outcome = detail::run_batch(inputs, req.jobs, [&](std::size_t f) {
    const auto& [feat_path, gt_path] = pairs[f];
    try {
      auto in = detail::load_input(feat_path, req.images, base.pamr);
      const auto gt = detail::load_ground_truth(gt_path, base);
      const RgbImage* image = in.image ? &*in.image : nullptr;
      const auto [h, w] = output_size(in.features, base, image, in.meta, std::pair{gt.height, gt.width});
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        RunConfig config = base;
        config.alpha = alphas[a];
        const auto graph = build_affinity(in.features, AffinityOptions{config.alpha, config.clamp});
        for (std::size_t t = 0; t < taus.size(); ++t) {
          config.tau = taus[t];
          const auto ncut = recursive_ncut(graph, in.features.height(), in.features.width(), config.ncut());
          const auto labels = lift_segmentation(in.features, ncut.segmentation, h, w, config, image);
          const auto pred = segmentation_from_labels(LabelMap{labels.height, labels.width,
                                                              std::vector<std::uint16_t>(labels.labels.begin(),
                                                                                         labels.labels.end()),
                                                              kDefaultIgnoreIndex});
          auto& cell = cells[f][a][t];
          cell.acc.add(pred, gt, match_segments(pred, gt, base.background), feat_path.stem().string());
          cell.k = ncut.segmentation.num_segments;
        }
      }
    } catch (const Error& e) {
      throw detail::with_context(e, feat_path.string());
    }
  });
  if (!outcome.ok()) throw Error(Errc::InvalidArgument, outcome.failures.front().message);

  std::vector<SweepRow> rows;
  for (std::size_t a = 0; a < alphas.size(); ++a)
    for (std::size_t t = 0; t < taus.size(); ++t) {
      EvalAccumulator total;
      double k_sum = 0.0;
      for (std::size_t f = 0; f < pairs.size(); ++f) {
        total.merge(cells[f][a][t].acc);
        k_sum += cells[f][a][t].k;
      }
      rows.push_back({taus[t], alphas[a], total.report().miou, pairs.empty() ? 0.0 : k_sum / pairs.size()});
    }
  return rows;
}

struct CoherenceRequest {
  fs::path features_dir;
  fs::path gt_dir;
  std::size_t num_pairs = 100000;
};

inline RocCurve cmd_coherence(const CoherenceRequest& req, const RunConfig& config) {
  std::vector<FeatureMap> features;
  std::vector<LabelMap> labels;
  for (const auto& [feat_path, gt_path] : detail::pair_by_stem(req.features_dir, ".dcft", req.gt_dir)) {
    try {
      features.push_back(load_features(feat_path));
      labels.push_back(detail::load_ground_truth(gt_path, config));
    } catch (const Error& e) {
      throw detail::with_context(e, feat_path.string());
    }
  }
  return coherence_auc(features, labels, req.num_pairs, config.seed);
}

struct ClusterRequest {
  fs::path features;
  std::optional<fs::path> images;
  std::optional<fs::path> gt;  // for k from ground truth
  fs::path out_dir;
  std::size_t k = 0;           // k-means only; 0 takes k from ground truth
  std::vector<int> alphas = kDefaultAlphaSet;
  std::size_t k_max = 32;
  std::size_t jobs = 1;
};

/// Number of distinct non-ignored classes in a label map.
inline std::size_t count_classes(const LabelMap& gt) {
  std::set<std::uint16_t> classes;
  for (auto l : gt.labels)
    if (l != gt.ignore_index) classes.insert(l);
  return classes.size();
}

/// Eigen-gap driven k-way clustering. Writes `<stem>.png` and `<stem>.autosc.json`.
inline BatchOutcome cmd_autosc(const ClusterRequest& req, const RunConfig& config) {
  const auto inputs = detail::list_inputs(req.features, ".dcft");
  detail::ensure_directory(req.out_dir);
  return detail::run_batch(inputs, req.jobs, [&](std::size_t i) {
    const auto& path = inputs[i];
    try {
      auto in = detail::load_input(path, req.images, config.pamr);
      const auto result = autosc_segment(in.features, req.alphas, req.k_max);
      const RgbImage* image = in.image ? &*in.image : nullptr;
      const auto [h, w] = output_size(in.features, config, image, in.meta);
      const auto labels = lift_segmentation(in.features, result.segmentation, h, w, config, image);
      const std::string stem = path.stem().string();
      save_segmentation(labels, req.out_dir / (stem + ".png"));
      write_file_atomic(req.out_dir / (stem + ".autosc.json"), to_json(result.report).dump(2) + "\n");
    } catch (const Error& e) {
      throw detail::with_context(e, path.string());
    }
  });
}

/// k-means baseline with a fixed k or the ground-truth class count.
inline BatchOutcome cmd_kmeans(const ClusterRequest& req, const RunConfig& config) {
  if (req.k == 0 && !req.gt) throw Error(Errc::InvalidArgument, "k-means needs --k or --k-from-gt");
  const auto inputs = detail::list_inputs(req.features, ".dcft");
  detail::ensure_directory(req.out_dir);
  return detail::run_batch(inputs, req.jobs, [&](std::size_t i) {
    const auto& path = inputs[i];
    try {
      const std::string stem = path.stem().string();
      auto in = detail::load_input(path, req.images, config.pamr);
      std::size_t k = req.k;
      if (k == 0) {
        const auto gt_path = detail::find_partner(req.gt, stem, ".png");
        if (!gt_path) throw Error(Errc::MissingPair, "no ground truth for " + path.filename().string());
        k = count_classes(detail::load_ground_truth(*gt_path, config));
      }
      const auto result = kmeans_cluster(in.features, k, config.seed);
      const RgbImage* image = in.image ? &*in.image : nullptr;
      const auto [h, w] = output_size(in.features, config, image, in.meta);
      save_segmentation(lift_segmentation(in.features, result.segmentation, h, w, config, image),
                        req.out_dir / (stem + ".png"));
    } catch (const Error& e) {
      throw detail::with_context(e, path.string());
    }
  });
}

}  // namespace specseg
