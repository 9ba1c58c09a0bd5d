#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "histomorph/calibrate.hpp"
#include "histomorph/csv.hpp"
#include "histomorph/learn.hpp"
#include "histomorph/morpho.hpp"
#include "histomorph/raster.hpp"
#include "histomorph/stain.hpp"
#include "histomorph/synth.hpp"

namespace histomorph {

constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;
using nlohmann::json;

// --- Configuration -----------------------------------------------------------

struct PipelineConfig {
  struct Paths {
    std::string tiles_manifest;
    std::string thumbnail;
    std::string masks_dir;
    std::string logits;
    std::string labels;
    std::string immune_scores;
    std::string out_dir;
  } paths;
  struct Stain {
    double lambda = 0.1;
    double od_floor = 0.15;
    std::string reference_patch;  // empty = first patch in the manifest
  } stain;
  struct Calibration {
    double threshold = 0.9;
  } calibration;
  struct Tissue {
    double min_tissue_fraction = 0.5;
    int thumbnail_cell_px = 8;
  } tissue;
  ForestConfig forest;
  uint64_t seed = 0;
  int workers = 0;  // 0 = hardware concurrency; HISTOMORPH_WORKERS overrides
  double failure_tolerance = 0.01;
  int augment_epochs = 1;
};

inline json to_json(const PipelineConfig& c) {
  return json{
      {"paths",
       {{"tiles_manifest", c.paths.tiles_manifest},
        {"thumbnail", c.paths.thumbnail},
        {"masks_dir", c.paths.masks_dir},
        {"logits", c.paths.logits},
        {"labels", c.paths.labels},
        {"immune_scores", c.paths.immune_scores},
        {"out_dir", c.paths.out_dir}}},
      {"stain",
       {{"lambda", c.stain.lambda}, {"od_floor", c.stain.od_floor}, {"reference_patch", c.stain.reference_patch}}},
      {"calibration", {{"threshold", c.calibration.threshold}}},
      {"tissue",
       {{"min_tissue_fraction", c.tissue.min_tissue_fraction},
        {"thumbnail_cell_px", c.tissue.thumbnail_cell_px}}},
      {"forest",
       {{"n_trees", c.forest.n_trees},
        {"max_depth", c.forest.max_depth},
        {"min_leaf", c.forest.min_leaf},
        {"max_features", c.forest.max_features}}},
      {"seed", c.seed},
      {"workers", c.workers},
      {"failure_tolerance", c.failure_tolerance},
      {"augment_epochs", c.augment_epochs}};
}

inline PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  auto get = [](const json& obj, const char* key, auto fallback) {
    return obj.contains(key) ? obj.at(key).get<decltype(fallback)>() : fallback;
  };
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    c.paths.tiles_manifest = get(p, "tiles_manifest", std::string{});
    c.paths.thumbnail = get(p, "thumbnail", std::string{});
    c.paths.masks_dir = get(p, "masks_dir", std::string{});
    c.paths.logits = get(p, "logits", std::string{});
    c.paths.labels = get(p, "labels", std::string{});
    c.paths.immune_scores = get(p, "immune_scores", std::string{});
    c.paths.out_dir = get(p, "out_dir", std::string{});
  }
  if (j.contains("stain")) {
    const auto& s = j.at("stain");
    c.stain.lambda = get(s, "lambda", 0.1);
    c.stain.od_floor = get(s, "od_floor", 0.15);
    c.stain.reference_patch = get(s, "reference_patch", std::string{});
  }
  if (j.contains("calibration")) c.calibration.threshold = get(j.at("calibration"), "threshold", 0.9);
  if (j.contains("tissue")) {
    c.tissue.min_tissue_fraction = get(j.at("tissue"), "min_tissue_fraction", 0.5);
    c.tissue.thumbnail_cell_px = get(j.at("tissue"), "thumbnail_cell_px", 8);
  }
  if (j.contains("forest")) {
    const auto& f = j.at("forest");
    c.forest.n_trees = get(f, "n_trees", 500);
    c.forest.max_depth = get(f, "max_depth", -1);
    c.forest.min_leaf = get(f, "min_leaf", 1);
    c.forest.max_features = get(f, "max_features", 0);
  }
  c.seed = get(j, "seed", uint64_t{0});
  c.workers = get(j, "workers", 0);
  c.failure_tolerance = get(j, "failure_tolerance", 0.01);
  c.augment_epochs = get(j, "augment_epochs", 1);
  if (!(c.calibration.threshold > 0 && c.calibration.threshold < 1))
    throw std::invalid_argument("config: calibration.threshold must be in (0,1)");
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  json j;
  in >> j;
  return config_from_json(j);
}

// --- Hashing and atomic writes ------------------------------------------------

inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string hash_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("hash_file: cannot open " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h = fnv1a(buf, size_t(in.gcount()), h);
  return hash_hex(h);
}

inline std::string hash_string(const std::string& s) { return hash_hex(fnv1a(s.data(), s.size())); }

// temp file + rename, so readers never see partial artifacts
inline void atomic_write_text(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
  }
  fs::rename(tmp, path);
}

inline void atomic_write_png(const fs::path& path, const ImageRGB& img) {
  fs::path tmp = path;
  tmp += ".tmp.png";
  write_png_rgb(tmp.string(), img);
  fs::rename(tmp, path);
}

// --- Worker pool ---------------------------------------------------------------

inline int effective_workers(int configured) {
  if (const char* env = std::getenv("HISTOMORPH_WORKERS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  if (configured > 0) return configured;
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? int(hc) : 1;
}

// Order-independent fan-out over [0, n); results must be written by index.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  if (n == 0) return;
  workers = std::max(1, std::min<int>(workers, int(n)));
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (true) {
        size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// --- Model serialization ---------------------------------------------------------

inline json stain_model_to_json(const StainModel& m) {
  json W = json::array();
  for (int r = 0; r < 3; ++r) W.push_back({m.W(r, 0), m.W(r, 1)});
  return json{{"W", W}, {"p99", {m.p99[0], m.p99[1]}}, {"lambda", m.lambda}, {"converged", m.converged}};
}

inline StainModel stain_model_from_json(const json& j) {
  StainModel m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) m.W(r, c) = j.at("W").at(r).at(c).get<double>();
  m.p99[0] = j.at("p99").at(0).get<double>();
  m.p99[1] = j.at("p99").at(1).get<double>();
  m.lambda = j.at("lambda").get<double>();
  if (j.contains("converged")) m.converged = j.at("converged").get<bool>();
  m.validate();
  return m;
}

inline json forest_to_json(const ForestModel& m) {
  json trees = json::array();
  for (const auto& t : m.trees) {
    json nodes = json::array();
    for (const auto& n : t.nodes)
      nodes.push_back({n.feature, n.threshold, n.left, n.right, n.count0, n.count1});
    trees.push_back(std::move(nodes));
  }
  return json{{"trees", trees},
              {"importance", m.importance},
              {"config",
               {{"n_trees", m.config.n_trees},
                {"max_depth", m.config.max_depth},
                {"min_leaf", m.config.min_leaf},
                {"max_features", m.config.max_features},
                {"seed", m.config.seed}}}};
}

inline ForestModel forest_from_json(const json& j) {
  ForestModel m;
  for (const auto& jt : j.at("trees")) {
    Tree t;
    for (const auto& jn : jt)
      t.nodes.push_back({jn.at(0).get<int>(), jn.at(1).get<double>(), jn.at(2).get<int>(),
                         jn.at(3).get<int>(), jn.at(4).get<double>(), jn.at(5).get<double>()});
    m.trees.push_back(std::move(t));
  }
  m.importance = j.at("importance").get<std::vector<double>>();
  const auto& c = j.at("config");
  m.config.n_trees = c.at("n_trees").get<int>();
  m.config.max_depth = c.at("max_depth").get<int>();
  m.config.min_leaf = c.at("min_leaf").get<int>();
  m.config.max_features = c.at("max_features").get<int>();
  m.config.seed = c.at("seed").get<uint64_t>();
  return m;
}

inline json descriptor_to_json(const AugmentationDescriptor& d) {
  return json{{"kind", to_string(d.kind)}, {"params", d.params}, {"seed", d.seed}};
}

inline AugmentationDescriptor descriptor_from_json(const json& j) {
  AugmentationDescriptor d;
  d.kind = augmentation_kind_from_string(j.at("kind").get<std::string>());
  d.params = j.at("params").get<std::vector<double>>();
  d.seed = j.at("seed").get<uint64_t>();
  return d;
}

// --- SVG plots ------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct SvgCanvas {
  std::ostringstream out;
  static constexpr double kSize = 420, kMargin = 50;

  double px(double x) const { return kMargin + x * (kSize - 2 * kMargin); }
  double py(double y) const { return kSize - kMargin - y * (kSize - 2 * kMargin); }

  void begin(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize
        << "\" viewBox=\"0 0 " << kSize << " " << kSize << "\">\n";
    out << "<rect width=\"" << kSize << "\" height=\"" << kSize << "\" fill=\"white\"/>\n";
    out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSize - 2 * kMargin
        << "\" height=\"" << kSize - 2 * kMargin << "\" fill=\"none\" stroke=\"black\"/>\n";
    out << "<text x=\"" << kSize / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title
        << "</text>\n";
    out << "<text x=\"" << kSize / 2 << "\" y=\"" << kSize - 12
        << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel << "</text>\n";
    out << "<text x=\"14\" y=\"" << kSize / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
        << kSize / 2 << ")\">" << ylabel << "</text>\n";
    for (int i = 0; i <= 4; ++i) {
      double v = i / 4.0;
      out << "<text x=\"" << px(v) << "\" y=\"" << kSize - kMargin + 16
          << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(v).substr(0, 4) << "</text>\n";
      out << "<text x=\"" << kMargin - 6 << "\" y=\"" << py(v) + 3
          << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(v).substr(0, 4) << "</text>\n";
    }
  }

  void line(double x0, double y0, double x1, double y1, const std::string& style) {
    out << "<line x1=\"" << fmt(px(x0)) << "\" y1=\"" << fmt(py(y0)) << "\" x2=\"" << fmt(px(x1))
        << "\" y2=\"" << fmt(py(y1)) << "\" " << style << "/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) out << fmt(px(x)) << "," << fmt(py(y)) << " ";
    out << "\"/>\n";
  }

  void legend(const std::string& text) {
    out << "<text x=\"" << kSize - kMargin - 6 << "\" y=\"" << kSize - kMargin - 8
        << "\" text-anchor=\"end\" font-size=\"12\">" << text << "</text>\n";
  }

  std::string end() {
    out << "</svg>\n";
    return out.str();
  }
};

}  // namespace detail

// Three deterministic SVGs per report: ROC with the chance diagonal, PR with the
// prevalence baseline, and the MCC-F1 curve with its 0.5 reference.
inline std::map<std::string, std::string> emit_plots(const CurveReport& report,
                                                     const std::string& task,
                                                     double positive_prevalence) {
  if (report.roc_points.empty() || report.pr_points.empty() || report.mcc_f1_points.empty())
    throw std::invalid_argument("emit_plots: empty curve report");
  std::map<std::string, std::string> out;
  {
    detail::SvgCanvas svg;
    svg.begin("ROC - " + task, "False positive rate", "True positive rate");
    svg.line(0, 0, 1, 1, "stroke=\"gray\" stroke-dasharray=\"4 3\"");
    std::vector<std::pair<double, double>> pts{{0, 0}};
    for (const auto& p : report.roc_points) pts.push_back({p.fpr, p.tpr});
    svg.polyline(pts, "crimson");
    svg.legend("AUROC = " + detail::fmt(report.auroc).substr(0, 6));
    out["roc"] = svg.end();
  }
  {
    detail::SvgCanvas svg;
    svg.begin("Precision-Recall - " + task, "Recall", "Precision");
    svg.line(0, positive_prevalence, 1, positive_prevalence, "stroke=\"gray\" stroke-dasharray=\"4 3\"");
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : report.pr_points) pts.push_back({p.recall, p.precision});
    svg.polyline(pts, "seagreen");
    svg.legend("AUPRC = " + detail::fmt(report.auprc).substr(0, 6));
    out["pr"] = svg.end();
  }
  {
    detail::SvgCanvas svg;
    svg.begin("MCC-F1 - " + task, "F1", "Unit-normalized MCC");
    svg.line(0, 0.5, 1, 0.5, "stroke=\"gray\" stroke-dasharray=\"4 3\"");
    std::vector<std::pair<double, double>> pts;
    for (const auto& p : report.mcc_f1_points) pts.push_back({p.f1, p.mcc_unit});
    svg.polyline(pts, "royalblue");
    svg.legend("MCC-F1 = " + detail::fmt(report.mcc_f1).substr(0, 6));
    out["mcc_f1"] = svg.end();
  }
  return out;
}

// --- Stage framework --------------------------------------------------------------

enum class Stage { tile, normalize, augment_manifest, calibrate, filter, upscale, features, train, evaluate, stats, all };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::tile: return "tile";
    case Stage::normalize: return "normalize";
    case Stage::augment_manifest: return "augment-manifest";
    case Stage::calibrate: return "calibrate";
    case Stage::filter: return "filter";
    case Stage::upscale: return "upscale";
    case Stage::features: return "features";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
    case Stage::stats: return "stats";
    case Stage::all: return "all";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  for (Stage st : {Stage::tile, Stage::normalize, Stage::augment_manifest, Stage::calibrate,
                   Stage::filter, Stage::upscale, Stage::features, Stage::train, Stage::evaluate,
                   Stage::stats, Stage::all})
    if (to_string(st) == s) return st;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

struct StageOutcome {
  Stage stage;
  bool cached = false;
  int n_items = 0;
  int n_failures = 0;
};

namespace detail {

inline void require_artifact(const fs::path& p, const std::string& producing_stage) {
  if (!fs::exists(p))
    throw std::runtime_error("missing artifact " + p.string() + "; run stage '" + producing_stage +
                             "' first");
}

// Cache manifest: a stage is a pure function of its config slice and input
// hashes; identical key + existing outputs = no-op rerun.
struct StageCache {
  fs::path dir;
  json key;

  bool hit() const {
    fs::path mf = dir / "run_manifest.json";
    if (!fs::exists(mf)) return false;
    try {
      std::ifstream in(mf);
      json recorded;
      in >> recorded;
      if (recorded.at("key") != key) return false;
      for (const auto& o : recorded.at("outputs"))
        if (!fs::exists(dir / o.get<std::string>())) return false;
      return true;
    } catch (...) {
      return false;
    }
  }

  void commit(const std::vector<std::string>& outputs) const {
    json mf{{"key", key}, {"outputs", outputs}, {"version", kVersion}};
    atomic_write_text(dir / "run_manifest.json", mf.dump(2));
  }
};

inline StageCache make_cache(const PipelineConfig& cfg, Stage stage, const json& stage_config,
                             const std::vector<fs::path>& inputs) {
  StageCache cache;
  cache.dir = fs::path(cfg.paths.out_dir) / to_string(stage);
  fs::create_directories(cache.dir);
  json input_hashes = json::object();
  for (const auto& p : inputs) input_hashes[p.string()] = hash_file(p);
  cache.key = json{{"stage", to_string(stage)},
                   {"config", stage_config},
                   {"inputs", input_hashes},
                   {"version", kVersion}};
  return cache;
}

struct PatchRow {
  std::string slide_id, patch_id, path;
  int x, y;
  Magnification mag;
};

inline std::vector<PatchRow> read_patch_csv(const fs::path& path) {
  auto t = csv::read_file(path.string());
  int c_slide = t.col("slide_id"), c_patch = t.col("patch_id"), c_path = t.col("path");
  int c_x = t.col("x"), c_y = t.col("y"), c_mag = t.col("magnification");
  std::vector<PatchRow> out;
  for (const auto& r : t.rows)
    out.push_back({r[c_slide], r[c_patch], r[c_path], std::stoi(r[c_x]), std::stoi(r[c_y]),
                   magnification_from_string(r[c_mag])});
  return out;
}

inline void write_patch_csv(const fs::path& path, const std::vector<PatchRow>& rows) {
  csv::Table t;
  t.header = {"slide_id", "patch_id", "path", "x", "y", "magnification"};
  for (const auto& r : rows)
    t.rows.push_back({r.slide_id, r.patch_id, r.path, std::to_string(r.x), std::to_string(r.y),
                      to_string(r.mag)});
  fs::path tmp = path;
  tmp += ".tmp";
  csv::write_file(tmp.string(), t);
  fs::rename(tmp, path);
}

inline std::vector<LogitRecord> read_logits_csv(const fs::path& path) {
  auto t = csv::read_file(path.string());
  int c_patch = t.col("patch_id"), c_slide = t.col("slide_id"), c_label = t.col("label");
  std::vector<int> zc;
  for (size_t i = 0; i < t.header.size(); ++i)
    if (t.header[i].rfind("z_", 0) == 0) zc.push_back(int(i));
  std::vector<LogitRecord> out;
  for (const auto& r : t.rows) {
    LogitRecord rec;
    rec.patch_id = r[c_patch];
    rec.slide_id = r[c_slide];
    if (!r[c_label].empty()) rec.label = std::stoi(r[c_label]);
    for (int c : zc) rec.z.push_back(std::stod(r[c]));
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_logits_csv(const fs::path& path, const std::vector<LogitRecord>& records,
                             size_t n_classes) {
  csv::Table t;
  t.header = {"patch_id", "slide_id", "label"};
  for (size_t i = 0; i < n_classes; ++i) t.header.push_back("z_" + std::to_string(i));
  for (const auto& r : records) {
    std::vector<std::string> row{r.patch_id, r.slide_id, r.label ? std::to_string(*r.label) : ""};
    for (double z : r.z) row.push_back(std::to_string(z));
    t.rows.push_back(std::move(row));
  }
  fs::path tmp = path;
  tmp += ".tmp";
  csv::write_file(tmp.string(), t);
  fs::rename(tmp, path);
}

inline std::map<std::string, int> read_slide_labels(const fs::path& path) {
  auto t = csv::read_file(path.string());
  int c_slide = t.col("slide_id"), c_label = t.col("label");
  std::map<std::string, int> out;
  for (const auto& r : t.rows) out[r[c_slide]] = std::stoi(r[c_label]);
  return out;
}

// Deterministic stratified slide split: sort within each label, alternate.
inline std::set<std::string> train_slides(const std::map<std::string, int>& labels) {
  std::map<int, std::vector<std::string>> by_label;
  for (const auto& [slide, label] : labels) by_label[label].push_back(slide);
  std::set<std::string> train;
  for (auto& [label, slides] : by_label) {
    std::sort(slides.begin(), slides.end());
    for (size_t i = 0; i < slides.size(); i += 2) train.insert(slides[i]);
  }
  return train;
}

inline void log_failures(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& failures,
                         size_t n_items, double tolerance) {
  if (!failures.empty()) {
    std::ostringstream log;
    for (const auto& [id, msg] : failures) log << json{{"item", id}, {"error", msg}}.dump() << "\n";
    atomic_write_text(dir / "errors.jsonl", log.str());
  }
  if (n_items > 0 && double(failures.size()) / double(n_items) > tolerance)
    throw std::runtime_error("stage failure rate " + std::to_string(failures.size()) + "/" +
                             std::to_string(n_items) + " exceeds tolerance");
}

}  // namespace detail

// --- Stages ------------------------------------------------------------------------

inline StageOutcome run_stage(Stage stage, const PipelineConfig& cfg);

namespace stages {

inline StageOutcome tile(const PipelineConfig& cfg) {
  detail::require_artifact(cfg.paths.tiles_manifest, "(input) tiles manifest");
  detail::require_artifact(cfg.paths.thumbnail, "(input) thumbnail");
  json sc{{"min_tissue_fraction", cfg.tissue.min_tissue_fraction},
          {"thumbnail_cell_px", cfg.tissue.thumbnail_cell_px}};
  auto cache = detail::make_cache(cfg, Stage::tile, sc,
                                  {cfg.paths.tiles_manifest, cfg.paths.thumbnail});
  StageOutcome outcome{Stage::tile};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto thumb = read_png_rgb(cfg.paths.thumbnail);
  auto mask = build_tissue_mask(thumb, cfg.tissue.thumbnail_cell_px, cfg.tissue.min_tissue_fraction);

  auto t = csv::read_file(cfg.paths.tiles_manifest);
  int c_slide = t.col("slide_id"), c_patch = t.col("patch_id"), c_path = t.col("path");
  int c_x = t.col("x"), c_y = t.col("y"), c_mag = t.col("magnification");
  std::map<std::string, std::vector<TileRef>> by_slide;
  for (const auto& r : t.rows)
    by_slide[r[c_slide]].push_back({r[c_slide], r[c_patch], r[c_path], std::stoi(r[c_x]),
                                    std::stoi(r[c_y]), magnification_from_string(r[c_mag])});

  fs::path patches_dir = cache.dir / "patches";
  fs::create_directories(patches_dir);
  std::vector<detail::PatchRow> rows;
  std::vector<std::pair<std::string, std::string>> failures;
  size_t n_total_cells = 0;
  for (auto& [slide, tiles] : by_slide) {
    std::vector<PatchError> errors;
    auto patches = extract_patches(tiles, mask, &errors);
    n_total_cells += patches.size() + errors.size();
    for (const auto& e : errors) failures.push_back({e.patch_id, e.message});
    for (auto& p : patches) {
      fs::path out = patches_dir / patch_filename(p);
      atomic_write_png(out, p.pixels);
      rows.push_back({p.slide_id, p.patch_id, out.string(), p.x, p.y, p.magnification});
    }
  }
  detail::write_patch_csv(cache.dir / "patches.csv", rows);
  detail::log_failures(cache.dir, failures, n_total_cells, cfg.failure_tolerance);
  outcome.n_items = int(rows.size());
  outcome.n_failures = int(failures.size());

  std::vector<std::string> outputs{"patches.csv"};
  for (const auto& r : rows) outputs.push_back("patches/" + fs::path(r.path).filename().string());
  cache.commit(outputs);
  return outcome;
}

inline StageOutcome normalize(const PipelineConfig& cfg) {
  fs::path tile_csv = fs::path(cfg.paths.out_dir) / "tile" / "patches.csv";
  detail::require_artifact(tile_csv, "tile");
  auto rows = detail::read_patch_csv(tile_csv);
  json sc{{"lambda", cfg.stain.lambda},
          {"od_floor", cfg.stain.od_floor},
          {"reference_patch", cfg.stain.reference_patch}};
  std::vector<fs::path> inputs{tile_csv};
  for (const auto& r : rows) inputs.push_back(r.path);
  auto cache = detail::make_cache(cfg, Stage::normalize, sc, inputs);
  StageOutcome outcome{Stage::normalize};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }
  if (rows.empty()) throw std::runtime_error("normalize: tile stage produced no patches");

  StainFitOptions fit_opt;
  fit_opt.lambda = cfg.stain.lambda;
  fit_opt.od_floor = cfg.stain.od_floor;

  // reference model from the designated patch (default: first in manifest order)
  const detail::PatchRow* ref_row = &rows.front();
  if (!cfg.stain.reference_patch.empty()) {
    ref_row = nullptr;
    for (const auto& r : rows)
      if (r.patch_id == cfg.stain.reference_patch) ref_row = &r;
    if (!ref_row)
      throw std::runtime_error("normalize: reference patch '" + cfg.stain.reference_patch +
                               "' not found in tile output");
  }
  Patch ref_patch;
  ref_patch.pixels = read_tile_rgb(ref_row->path);
  StainModel target = fit_stain_model(ref_patch, fit_opt);
  atomic_write_text(cache.dir / "reference_stain.json", stain_model_to_json(target).dump(2));

  fs::path out_dir = cache.dir / "patches";
  fs::create_directories(out_dir);
  std::vector<detail::PatchRow> out_rows(rows.size());
  std::vector<uint8_t> ok(rows.size(), 0);
  std::vector<std::pair<std::string, std::string>> failures;
  std::mutex failures_mutex;
  parallel_for(rows.size(), effective_workers(cfg.workers), [&](size_t i) {
    const auto& r = rows[i];
    try {
      Patch p;
      p.slide_id = r.slide_id;
      p.patch_id = r.patch_id;
      p.x = r.x;
      p.y = r.y;
      p.magnification = r.mag;
      p.pixels = read_tile_rgb(r.path);
      StainModel source = fit_stain_model(p, fit_opt);
      Patch np = histomorph::normalize(p, source, target);
      fs::path out = out_dir / patch_filename(np);
      atomic_write_png(out, np.pixels);
      out_rows[i] = {r.slide_id, r.patch_id, out.string(), r.x, r.y, r.mag};
      ok[i] = 1;
    } catch (const std::exception& e) {
      std::lock_guard lock(failures_mutex);
      failures.push_back({r.patch_id, e.what()});
    }
  });
  std::vector<detail::PatchRow> kept_rows;
  for (size_t i = 0; i < rows.size(); ++i)
    if (ok[i]) kept_rows.push_back(out_rows[i]);
  detail::write_patch_csv(cache.dir / "patches.csv", kept_rows);
  detail::log_failures(cache.dir, failures, rows.size(), cfg.failure_tolerance);
  outcome.n_items = int(kept_rows.size());
  outcome.n_failures = int(failures.size());

  std::vector<std::string> outputs{"patches.csv", "reference_stain.json"};
  for (const auto& r : kept_rows) outputs.push_back("patches/" + fs::path(r.path).filename().string());
  cache.commit(outputs);
  return outcome;
}

inline StageOutcome augment_manifest(const PipelineConfig& cfg) {
  detail::require_artifact(cfg.paths.logits, "(input) logits");
  json sc{{"seed", cfg.seed}, {"epochs", cfg.augment_epochs}};
  auto cache = detail::make_cache(cfg, Stage::augment_manifest, sc, {cfg.paths.logits});
  StageOutcome outcome{Stage::augment_manifest};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto records = detail::read_logits_csv(cfg.paths.logits);
  std::map<int, std::vector<std::string>> by_class;
  for (const auto& r : records) {
    if (!r.label) throw std::runtime_error("augment-manifest: unlabeled record " + r.patch_id);
    by_class[*r.label].push_back(r.patch_id);
  }
  std::vector<std::vector<std::string>> classes;
  std::vector<int> class_ids;
  for (auto& [c, ids] : by_class) {
    classes.push_back(ids);
    class_ids.push_back(c);
  }
  auto manifest = balanced_manifest(classes, cfg.augment_epochs, cfg.seed);

  std::ostringstream out;
  for (size_t e = 0; e < manifest.size(); ++e)
    for (const auto& entry : manifest[e]) {
      json line = descriptor_to_json(entry.augmentation);
      line["epoch"] = e;
      line["class"] = class_ids[entry.class_index];
      line["patch_id"] = classes[entry.class_index][entry.item_index];
      out << line.dump() << "\n";
    }
  atomic_write_text(cache.dir / "manifest.jsonl", out.str());
  outcome.n_items = int(manifest.size());
  cache.commit({"manifest.jsonl"});
  return outcome;
}

inline StageOutcome calibrate(const PipelineConfig& cfg) {
  detail::require_artifact(cfg.paths.logits, "(input) logits");
  json sc{{"threshold", cfg.calibration.threshold}};
  auto cache = detail::make_cache(cfg, Stage::calibrate, sc, {cfg.paths.logits});
  StageOutcome outcome{Stage::calibrate};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto records = detail::read_logits_csv(cfg.paths.logits);
  auto model = fit_temperature(records, cfg.calibration.threshold);
  atomic_write_text(cache.dir / "calibration.json",
                    json{{"T", model.T}, {"threshold", model.threshold}}.dump(2));
  json report{{"T", model.T},
              {"nll_before", nll_at_temperature(records, 1.0)},
              {"nll_after", nll_at_temperature(records, model.T)},
              {"ece_before", expected_calibration_error(records, 1.0)},
              {"ece_after", expected_calibration_error(records, model.T)},
              {"n_records", records.size()}};
  atomic_write_text(cache.dir / "report.json", report.dump(2));
  outcome.n_items = int(records.size());
  cache.commit({"calibration.json", "report.json"});
  return outcome;
}

inline StageOutcome filter(const PipelineConfig& cfg) {
  fs::path calib = fs::path(cfg.paths.out_dir) / "calibrate" / "calibration.json";
  detail::require_artifact(calib, "calibrate");
  detail::require_artifact(cfg.paths.logits, "(input) logits");
  auto cache = detail::make_cache(cfg, Stage::filter, json::object(), {calib, cfg.paths.logits});
  StageOutcome outcome{Stage::filter};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  std::ifstream in(calib);
  json jc;
  in >> jc;
  CalibrationModel model{jc.at("T").get<double>(), jc.at("threshold").get<double>()};
  auto records = detail::read_logits_csv(cfg.paths.logits);
  auto result = filter_discriminative(records, model);
  size_t n_classes = records.empty() ? 2 : records.front().z.size();
  detail::write_logits_csv(cache.dir / "kept.csv", result.kept, n_classes);
  detail::write_logits_csv(cache.dir / "dropped.csv", result.dropped, n_classes);
  outcome.n_items = int(records.size());
  cache.commit({"kept.csv", "dropped.csv"});
  return outcome;
}

inline StageOutcome upscale(const PipelineConfig& cfg) {
  fs::path norm_csv = fs::path(cfg.paths.out_dir) / "normalize" / "patches.csv";
  fs::path kept_csv = fs::path(cfg.paths.out_dir) / "filter" / "kept.csv";
  detail::require_artifact(norm_csv, "normalize");
  detail::require_artifact(kept_csv, "filter");
  auto rows = detail::read_patch_csv(norm_csv);
  std::vector<fs::path> inputs{norm_csv, kept_csv};
  auto cache = detail::make_cache(cfg, Stage::upscale, json::object(), inputs);
  StageOutcome outcome{Stage::upscale};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  std::set<std::string> kept;
  for (const auto& r : detail::read_logits_csv(kept_csv)) kept.insert(r.patch_id);
  std::vector<const detail::PatchRow*> work;
  for (const auto& r : rows)
    if (kept.count(r.patch_id)) work.push_back(&r);

  fs::path out_dir = cache.dir / "patches";
  fs::create_directories(out_dir);
  std::vector<std::array<detail::PatchRow, 4>> out_rows(work.size());
  std::vector<uint8_t> ok(work.size(), 0);
  std::vector<std::pair<std::string, std::string>> failures;
  std::mutex failures_mutex;
  parallel_for(work.size(), effective_workers(cfg.workers), [&](size_t i) {
    const auto& r = *work[i];
    try {
      Patch p;
      p.slide_id = r.slide_id;
      p.patch_id = r.patch_id;
      p.x = r.x;
      p.y = r.y;
      p.magnification = Magnification::x20;
      p.pixels = read_tile_rgb(r.path);
      auto quads = upscale_to_40x(p);
      for (int q = 0; q < 4; ++q) {
        fs::path out = out_dir / patch_filename(quads[q]);
        atomic_write_png(out, quads[q].pixels);
        out_rows[i][q] = {quads[q].slide_id, quads[q].patch_id, out.string(), quads[q].x,
                          quads[q].y, Magnification::x40};
      }
      ok[i] = 1;
    } catch (const std::exception& e) {
      std::lock_guard lock(failures_mutex);
      failures.push_back({r.patch_id, e.what()});
    }
  });
  std::vector<detail::PatchRow> flat;
  for (size_t i = 0; i < work.size(); ++i)
    if (ok[i])
      for (const auto& q : out_rows[i]) flat.push_back(q);
  detail::write_patch_csv(cache.dir / "patches.csv", flat);
  detail::log_failures(cache.dir, failures, work.size(), cfg.failure_tolerance);
  outcome.n_items = int(flat.size());
  outcome.n_failures = int(failures.size());

  std::vector<std::string> outputs{"patches.csv"};
  for (const auto& r : flat) outputs.push_back("patches/" + fs::path(r.path).filename().string());
  cache.commit(outputs);
  return outcome;
}

inline StageOutcome features(const PipelineConfig& cfg) {
  fs::path norm_csv = fs::path(cfg.paths.out_dir) / "normalize" / "patches.csv";
  fs::path kept_csv = fs::path(cfg.paths.out_dir) / "filter" / "kept.csv";
  detail::require_artifact(norm_csv, "normalize");
  detail::require_artifact(kept_csv, "filter");
  if (cfg.paths.masks_dir.empty() || !fs::exists(cfg.paths.masks_dir))
    throw std::runtime_error("features: masks_dir '" + cfg.paths.masks_dir +
                             "' not found (nucleus masks are an external input)");
  auto rows = detail::read_patch_csv(norm_csv);
  auto cache = detail::make_cache(cfg, Stage::features, json::object(), {norm_csv, kept_csv});
  StageOutcome outcome{Stage::features};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  std::set<std::string> kept;
  for (const auto& r : detail::read_logits_csv(kept_csv)) kept.insert(r.patch_id);
  std::vector<const detail::PatchRow*> work;
  for (const auto& r : rows)
    if (kept.count(r.patch_id)) work.push_back(&r);

  std::vector<PatchFeatureVector> vecs(work.size());
  std::vector<uint8_t> ok(work.size(), 0);
  std::vector<std::pair<std::string, std::string>> failures;
  std::mutex failures_mutex;
  parallel_for(work.size(), effective_workers(cfg.workers), [&](size_t i) {
    const auto& r = *work[i];
    try {
      Patch p;
      p.patch_id = r.patch_id;
      p.slide_id = r.slide_id;
      p.pixels = read_tile_rgb(r.path);
      fs::path mask_path = fs::path(cfg.paths.masks_dir) / (r.patch_id + "_mask.png");
      if (!fs::exists(mask_path))
        throw std::runtime_error("missing mask " + mask_path.string());
      auto mask = read_png_label16(mask_path.string());
      auto nuclei = extract_nuclei(p, mask);
      if (nuclei.empty()) throw std::runtime_error("no nuclei above area floor");
      delaunay_features(nuclei);
      vecs[i] = aggregate_patch(nuclei, r.patch_id, r.slide_id);
      ok[i] = 1;
    } catch (const std::exception& e) {
      std::lock_guard lock(failures_mutex);
      failures.push_back({r.patch_id, e.what()});
    }
  });

  csv::Table t;
  t.header = {"patch_id", "slide_id", "n_nuclei"};
  for (const auto& name : patch_feature_names()) t.header.push_back(name);
  for (size_t i = 0; i < work.size(); ++i) {
    if (!ok[i]) continue;
    std::vector<std::string> row{vecs[i].patch_id, vecs[i].slide_id, std::to_string(vecs[i].n_nuclei)};
    for (double v : vecs[i].values) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.12g", v);
      row.push_back(buf);
    }
    t.rows.push_back(std::move(row));
  }
  fs::path tmp = cache.dir / "features.csv.tmp";
  csv::write_file(tmp.string(), t);
  fs::rename(tmp, cache.dir / "features.csv");
  detail::log_failures(cache.dir, failures, work.size(), cfg.failure_tolerance);
  outcome.n_items = int(t.rows.size());
  outcome.n_failures = int(failures.size());
  cache.commit({"features.csv"});
  return outcome;
}

struct FeatureDataset {
  std::vector<std::vector<double>> X;
  std::vector<int> y;
  std::vector<std::string> slide_ids;
  std::vector<std::string> patch_ids;
};

inline FeatureDataset load_feature_dataset(const fs::path& features_csv, const fs::path& labels_csv) {
  auto t = csv::read_file(features_csv.string());
  auto labels = detail::read_slide_labels(labels_csv);
  int c_patch = t.col("patch_id"), c_slide = t.col("slide_id");
  auto names = patch_feature_names();
  std::vector<int> cols;
  for (const auto& n : names) cols.push_back(t.col(n));
  FeatureDataset ds;
  for (const auto& r : t.rows) {
    auto it = labels.find(r[c_slide]);
    if (it == labels.end()) continue;
    std::vector<double> x;
    x.reserve(cols.size());
    for (int c : cols) x.push_back(std::stod(r[c]));
    ds.X.push_back(std::move(x));
    ds.y.push_back(it->second);
    ds.slide_ids.push_back(r[c_slide]);
    ds.patch_ids.push_back(r[c_patch]);
  }
  return ds;
}

inline StageOutcome train(const PipelineConfig& cfg) {
  fs::path feat_csv = fs::path(cfg.paths.out_dir) / "features" / "features.csv";
  detail::require_artifact(feat_csv, "features");
  detail::require_artifact(cfg.paths.labels, "(input) labels");
  json sc{{"n_trees", cfg.forest.n_trees},
          {"max_depth", cfg.forest.max_depth},
          {"min_leaf", cfg.forest.min_leaf},
          {"max_features", cfg.forest.max_features},
          {"seed", cfg.seed}};
  auto cache = detail::make_cache(cfg, Stage::train, sc, {feat_csv, cfg.paths.labels});
  StageOutcome outcome{Stage::train};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto ds = load_feature_dataset(feat_csv, cfg.paths.labels);
  auto labels = detail::read_slide_labels(cfg.paths.labels);
  auto train_set = detail::train_slides(labels);
  std::vector<std::vector<double>> X;
  std::vector<int> y;
  for (size_t i = 0; i < ds.X.size(); ++i)
    if (train_set.count(ds.slide_ids[i])) {
      X.push_back(ds.X[i]);
      y.push_back(ds.y[i]);
    }
  ForestConfig fc = cfg.forest;
  fc.seed = cfg.seed;
  auto model = train_forest(X, y, fc);

  json out = forest_to_json(model);
  json importance_named = json::object();
  auto names = patch_feature_names();
  for (size_t i = 0; i < names.size(); ++i) importance_named[names[i]] = model.importance[i];
  out["importance_named"] = importance_named;
  out["n_train_patches"] = X.size();
  atomic_write_text(cache.dir / "forest.json", out.dump());
  outcome.n_items = int(X.size());
  cache.commit({"forest.json"});
  return outcome;
}

inline StageOutcome evaluate(const PipelineConfig& cfg) {
  fs::path feat_csv = fs::path(cfg.paths.out_dir) / "features" / "features.csv";
  fs::path forest_json = fs::path(cfg.paths.out_dir) / "train" / "forest.json";
  detail::require_artifact(feat_csv, "features");
  detail::require_artifact(forest_json, "train");
  detail::require_artifact(cfg.paths.labels, "(input) labels");
  json sc{{"seed", cfg.seed}, {"n_trees", cfg.forest.n_trees}};
  auto cache = detail::make_cache(cfg, Stage::evaluate, sc, {feat_csv, forest_json, cfg.paths.labels});
  StageOutcome outcome{Stage::evaluate};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto ds = load_feature_dataset(feat_csv, cfg.paths.labels);
  auto labels = detail::read_slide_labels(cfg.paths.labels);
  auto train_set = detail::train_slides(labels);
  std::ifstream in(forest_json);
  json jf;
  in >> jf;
  auto model = forest_from_json(jf);

  std::vector<double> patch_scores;
  std::vector<int> patch_labels;
  std::map<std::string, std::pair<double, int>> slide_acc;
  for (size_t i = 0; i < ds.X.size(); ++i) {
    if (train_set.count(ds.slide_ids[i])) continue;
    double s = model.predict_p1(ds.X[i]);
    patch_scores.push_back(s);
    patch_labels.push_back(ds.y[i]);
    auto& acc = slide_acc[ds.slide_ids[i]];
    acc.first += s;
    acc.second += 1;
  }
  if (patch_scores.empty()) throw std::runtime_error("evaluate: test split is empty");

  std::vector<double> slide_scores;
  std::vector<int> slide_labels;
  for (const auto& [slide, acc] : slide_acc) {
    slide_scores.push_back(acc.first / acc.second);  // mean of probabilities
    slide_labels.push_back(labels.at(slide));
  }

  auto eval_one = [](const std::vector<double>& s, const std::vector<int>& l) {
    CurveReport rep = roc_pr_curves(s, l);
    auto mcc = mcc_f1_curve(s, l);
    rep.mcc_f1_points = std::move(mcc.mcc_f1_points);
    rep.mcc_f1 = mcc.mcc_f1;
    return rep;
  };
  CurveReport patch_rep = eval_one(patch_scores, patch_labels);
  CurveReport slide_rep = eval_one(slide_scores, slide_labels);

  json metrics{{"patch", {{"auroc", patch_rep.auroc}, {"auprc", patch_rep.auprc}, {"mcc_f1", patch_rep.mcc_f1}}},
               {"slide", {{"auroc", slide_rep.auroc}, {"auprc", slide_rep.auprc}, {"mcc_f1", slide_rep.mcc_f1}}}};
  atomic_write_text(cache.dir / "metrics.json", metrics.dump(2));

  // curve points CSV
  for (auto [name, rep] : {std::pair{std::string("patch"), &patch_rep}, {std::string("slide"), &slide_rep}}) {
    csv::Table ct;
    ct.header = {"kind", "threshold", "x", "y"};
    auto add = [&](const char* kind, double thr, double x, double y) {
      char b1[32], b2[32], b3[32];
      std::snprintf(b1, sizeof b1, "%.12g", thr);
      std::snprintf(b2, sizeof b2, "%.12g", x);
      std::snprintf(b3, sizeof b3, "%.12g", y);
      ct.rows.push_back({kind, b1, b2, b3});
    };
    for (const auto& p : rep->roc_points) add("roc", p.threshold, p.fpr, p.tpr);
    for (const auto& p : rep->pr_points) add("pr", p.threshold, p.recall, p.precision);
    for (const auto& p : rep->mcc_f1_points) add("mcc_f1", p.threshold, p.f1, p.mcc_unit);
    fs::path tmp = cache.dir / ("curves_" + name + ".csv.tmp");
    csv::write_file(tmp.string(), ct);
    fs::rename(tmp, cache.dir / ("curves_" + name + ".csv"));
  }

  double prevalence = 0;
  for (int l : slide_labels) prevalence += l;
  prevalence /= double(slide_labels.size());
  auto plots = emit_plots(slide_rep, "slide", prevalence);
  for (const auto& [name, svg] : plots) atomic_write_text(cache.dir / (name + ".svg"), svg);

  // ablation over the fixed feature groups
  std::vector<std::vector<double>> X_train, X_test;
  std::vector<int> y_train, y_test;
  for (size_t i = 0; i < ds.X.size(); ++i) {
    if (train_set.count(ds.slide_ids[i])) {
      X_train.push_back(ds.X[i]);
      y_train.push_back(ds.y[i]);
    } else {
      X_test.push_back(ds.X[i]);
      y_test.push_back(ds.y[i]);
    }
  }
  ForestConfig fc = cfg.forest;
  fc.seed = cfg.seed;
  auto grid = ablation_grid(X_train, y_train, X_test, y_test, fc);
  json ablation = json::array();
  for (const auto& row : grid)
    ablation.push_back({{"subset", row.name},
                        {"n_features", row.n_features},
                        {"auroc", row.report.auroc},
                        {"auprc", row.report.auprc},
                        {"mcc_f1", row.report.mcc_f1}});
  atomic_write_text(cache.dir / "ablation.json", ablation.dump(2));

  outcome.n_items = int(patch_scores.size());
  cache.commit({"metrics.json", "curves_patch.csv", "curves_slide.csv", "ablation.json", "roc.svg",
                "pr.svg", "mcc_f1.svg"});
  return outcome;
}

inline StageOutcome stats(const PipelineConfig& cfg) {
  detail::require_artifact(cfg.paths.immune_scores, "(input) immune scores");
  auto cache = detail::make_cache(cfg, Stage::stats, json::object(), {cfg.paths.immune_scores});
  StageOutcome outcome{Stage::stats};
  if (cache.hit()) {
    outcome.cached = true;
    return outcome;
  }

  auto t = csv::read_file(cfg.paths.immune_scores);
  int c_group = t.col("group"), c_score = t.col("immune_score");
  std::vector<double> mutated, non_mutated;
  for (const auto& r : t.rows)
    (r[c_group] == "mutated" ? mutated : non_mutated).push_back(std::stod(r[c_score]));
  if (mutated.empty() || non_mutated.empty())
    throw std::runtime_error("stats: need both mutated and non-mutated groups");

  auto one_sided = mann_whitney_u(mutated, non_mutated, Alternative::greater);
  auto two_sided = mann_whitney_u(mutated, non_mutated, Alternative::two_sided);
  json out{{"U", one_sided.U},
           {"p_one_sided_mutated_greater", one_sided.p_value},
           {"p_two_sided", two_sided.p_value},
           {"exact", one_sided.exact},
           {"n_mutated", mutated.size()},
           {"n_non_mutated", non_mutated.size()}};
  atomic_write_text(cache.dir / "stats.json", out.dump(2));
  outcome.n_items = int(t.rows.size());
  cache.commit({"stats.json"});
  return outcome;
}

}  // namespace stages

inline StageOutcome run_stage(Stage stage, const PipelineConfig& cfg) {
  if (cfg.paths.out_dir.empty()) throw std::invalid_argument("run_stage: out_dir not configured");
  fs::create_directories(cfg.paths.out_dir);
  switch (stage) {
    case Stage::tile: return stages::tile(cfg);
    case Stage::normalize: return stages::normalize(cfg);
    case Stage::augment_manifest: return stages::augment_manifest(cfg);
    case Stage::calibrate: return stages::calibrate(cfg);
    case Stage::filter: return stages::filter(cfg);
    case Stage::upscale: return stages::upscale(cfg);
    case Stage::features: return stages::features(cfg);
    case Stage::train: return stages::train(cfg);
    case Stage::evaluate: return stages::evaluate(cfg);
    case Stage::stats: return stages::stats(cfg);
    case Stage::all: {
      StageOutcome last{Stage::all};
      for (Stage s : {Stage::tile, Stage::normalize, Stage::augment_manifest, Stage::calibrate,
                      Stage::filter, Stage::upscale, Stage::features, Stage::train, Stage::evaluate,
                      Stage::stats})
        last = run_stage(s, cfg);
      last.stage = Stage::all;
      return last;
    }
  }
  throw std::invalid_argument("run_stage: bad stage");
}

}  // namespace histomorph
