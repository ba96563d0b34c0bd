#include "promptdet/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "promptdet/rng.hpp"

namespace promptdet {

namespace {

constexpr std::pair<ExperimentKind, const char*> kKinds[] = {
    {ExperimentKind::kGen, "gen"},
    {ExperimentKind::kTrain, "train"},
    {ExperimentKind::kEval, "eval"},
    {ExperimentKind::kAblateStages, "ablate-stages"},
    {ExperimentKind::kSweepAlpha, "sweep-alpha"},
    {ExperimentKind::kZeroshot, "zeroshot"},
};

// Table-4 rows: prompts switched on stage by stage.
struct Stage {
  const char* label;
  bool msbn, mask, ocrl;
};
constexpr Stage kStages[] = {
    {"baseline", false, false, false},
    {"+voxelization", true, false, false},
    {"+backbone", true, true, false},
    {"+head", true, true, true},
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << text;
  if (!os.good()) throw std::runtime_error("failed writing " + path.string());
}

// Where the artifacts go is not part of the experiment's identity.
std::string fingerprint(nlohmann::json snapshot) {
  snapshot.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(snapshot.dump())));
  return buf;
}

void check_finite(const EvalReport& report) {
  auto ok = [](const std::optional<double>& v) { return !v || std::isfinite(*v); };
  for (const auto& d : report.datasets) {
    bool good = ok(d.map_3d) && ok(d.map_bev);
    for (const auto& c : d.classes) good = good && ok(c.ap_bev) && ok(c.ap_3d);
    for (const auto& s : d.sizes)
      for (const auto& dim : s.dims) good = good && ok(dim.w1) && std::isfinite(dim.pred_mean) && std::isfinite(dim.pred_std);
    if (!good) throw std::runtime_error("non-finite metric in report for " + d.name);
  }
}

struct Splits {
  std::vector<DatasetFrames> train;  // training datasets, label order
  std::vector<DatasetFrames> test;   // every dataset, heldout included
};

std::vector<Frame> make_frames(const ExperimentConfig& cfg, const DatasetSpec& spec, const char* split,
                               std::size_t count) {
  const std::uint64_t seed = mix_seed(cfg.seed, hash_name(spec.name + "/" + split));
  std::vector<Frame> frames;
  frames.reserve(count);
  for (auto& f : generate_frames(spec, seed, count)) frames.push_back(align_point_range(f, cfg.detector.global_range));
  return frames;
}

Splits make_splits(const ExperimentConfig& cfg) {
  Splits s;
  for (const auto& e : cfg.datasets) {
    const DatasetSpec& spec = cfg.resolve_spec(e.spec);
    if (e.spec != cfg.heldout) {
      DatasetFrames d{spec, make_frames(cfg, spec, "train", e.train_frames)};
      if (!cfg.sn_target.empty()) {
        const DatasetSpec& target = cfg.resolve_spec(cfg.sn_target);
        for (auto& f : d.frames) f = apply_statistical_normalization(f, spec, target);
      }
      s.train.push_back(std::move(d));
    }
    s.test.push_back({spec, make_frames(cfg, spec, "test", e.test_frames)});
  }
  return s;
}

DatasetMetrics score(Detector& det, const DatasetFrames& data, const RangeMask& mask, const std::string& name,
                     const EvalOptions& options) {
  std::vector<DetectionResult> preds;
  std::vector<std::vector<Box3D>> gts;
  preds.reserve(data.frames.size());
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    DetectionResult r = det.predict(data.frames[i], mask);
    r.frame_index = i;
    preds.push_back(std::move(r));
    gts.push_back(data.frames[i].boxes);
  }
  DatasetMetrics m = evaluate(preds, gts, data.spec.id, name, options);
  m.num_frames = data.frames.size();
  return m;
}

EvalReport evaluate_all(Detector& det, const ExperimentConfig& cfg, const Splits& splits, const std::string& fp) {
  EvalReport report;
  report.config_fingerprint = fp;
  for (const auto& d : splits.test) {
    report.datasets.push_back(score(det, d, det.mask_for(d.spec), d.spec.name, cfg.evaluation));
    if (d.spec.name == cfg.heldout) {
      const RangeMask ones = all_ones_mask(det.bev_height(), det.bev_width());
      report.datasets.push_back(score(det, d, ones, uninformative_name(d.spec.name), cfg.evaluation));
    }
  }
  check_finite(report);
  return report;
}

void write_run(const std::filesystem::path& dir, const nlohmann::json& snapshot, const RunRow& row,
               const Detector* det) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.snapshot.json", snapshot.dump(2) + "\n");
  if (det) {
    write_text(dir / "train_log.csv", train_log_csv(row.train));
    det->save(dir / "checkpoint.bin");
  }
  write_text(dir / "report.json", report_to_json(row.report).dump(2) + "\n");
  write_text(dir / "metrics.csv", report_to_csv(row.report));
}

// Trains one detector configuration and scores it.
RunRow train_and_eval(const ExperimentConfig& cfg, const Splits& splits, const std::string& label,
                      const std::filesystem::path& dir) {
  ExperimentConfig run_cfg = cfg;
  run_cfg.detector.seed = cfg.seed;
  const nlohmann::json snapshot = experiment_to_json(run_cfg);

  Detector det(run_cfg.detector, splits.train.size());
  RunRow row;
  row.label = label;
  row.detector = run_cfg.detector;
  row.train = train(det, splits.train);
  for (const auto& r : row.train.log)
    if (!std::isfinite(r.total)) throw std::runtime_error("non-finite training loss at step " + std::to_string(r.step));
  row.report = evaluate_all(det, run_cfg, splits, fingerprint(snapshot));
  if (!dir.empty()) write_run(dir, snapshot, row, &det);
  return row;
}

}  // namespace

const char* kind_name(ExperimentKind kind) {
  for (const auto& [k, n] : kKinds)
    if (k == kind) return n;
  throw std::invalid_argument("unknown experiment kind");
}

ExperimentKind kind_from_name(const std::string& name) {
  for (const auto& [k, n] : kKinds)
    if (name == n) return k;
  throw std::invalid_argument("unknown experiment kind: " + name);
}

std::string uninformative_name(const std::string& dataset) { return dataset + "[all-ones-mask]"; }

const DatasetSpec& ExperimentConfig::resolve_spec(const std::string& name) const {
  for (const auto& s : custom_specs)
    if (s.name == name) return s;
  return preset_spec(name);  // throws for unknown names
}

void ExperimentConfig::validate() const {
  detector.validate();
  for (const auto& s : custom_specs) s.validate();
  if (datasets.empty()) throw std::invalid_argument("experiment: at least one dataset is required");
  std::set<std::string> names;
  std::set<int> ids;
  for (const auto& e : datasets) {
    const DatasetSpec& spec = resolve_spec(e.spec);
    if (!names.insert(e.spec).second) throw std::invalid_argument("experiment: dataset listed twice: " + e.spec);
    if (!ids.insert(spec.id).second) throw std::invalid_argument("experiment: duplicate spec id for " + e.spec);
    if (e.test_frames == 0 && kind != ExperimentKind::kGen) throw std::invalid_argument("experiment: " + e.spec + " needs test frames");
    if (e.train_frames == 0 && e.spec != heldout && kind != ExperimentKind::kEval)
      throw std::invalid_argument("experiment: " + e.spec + " needs training frames");
  }
  if (!heldout.empty() && !names.count(heldout)) throw std::invalid_argument("experiment: heldout dataset is not listed: " + heldout);
  if (kind == ExperimentKind::kZeroshot && heldout.empty()) throw std::invalid_argument("experiment: zeroshot needs a heldout dataset");
  if (!heldout.empty() && names.size() < 2) throw std::invalid_argument("experiment: nothing left to train on");
  if (!sn_target.empty()) resolve_spec(sn_target);
  if (kind == ExperimentKind::kSweepAlpha) {
    if (alphas.empty()) throw std::invalid_argument("experiment: alpha sweep is empty");
    for (double a : alphas)
      if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("experiment: alpha outside [0, 1]");
  }
  if (kind == ExperimentKind::kEval && checkpoint.empty()) throw std::invalid_argument("experiment: eval needs a checkpoint");
  for (double t : evaluation.thresholds.per_class)
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("experiment: IoU thresholds must lie in (0, 1]");
  if (!output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(output_dir, ec);
    if (ec || !std::filesystem::is_directory(output_dir))
      throw std::invalid_argument("experiment: output directory is not writable: " + output_dir.string());
  }
}

nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& e : cfg.datasets) ds.push_back({{"spec", e.spec}, {"train_frames", e.train_frames}, {"test_frames", e.test_frames}});
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : cfg.custom_specs) specs.push_back(spec_to_json(s));
  nlohmann::json thr = nlohmann::json::object();
  for (int k = 0; k < kNumClasses; ++k) thr[class_name(k)] = cfg.evaluation.thresholds.per_class[k];
  return {
      {"schema_version", ExperimentConfig::kSchemaVersion},
      {"kind", kind_name(cfg.kind)},
      {"seed", cfg.seed},
      {"datasets", ds},
      {"heldout", cfg.heldout},
      {"custom_specs", specs},
      {"sn_target", cfg.sn_target},
      {"detector", config_to_json(cfg.detector)},
      {"evaluation", {{"iou_thresholds", thr}, {"size_score_threshold", cfg.evaluation.size_score_threshold}}},
      {"alphas", cfg.alphas},
      {"output_dir", cfg.output_dir.string()},
      {"checkpoint", cfg.checkpoint.string()},
  };
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("experiment config must be a JSON object");
  if (j.value("schema_version", 0) != ExperimentConfig::kSchemaVersion)
    throw std::invalid_argument("experiment config: unsupported schema_version");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "schema_version") continue;
    else if (key == "kind") c.kind = kind_from_name(v.get<std::string>());
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "datasets") {
      for (const auto& e : v) {
        DatasetEntry d;
        for (const auto& [k, x] : e.items()) {
          if (k == "spec") d.spec = x.get<std::string>();
          else if (k == "train_frames") d.train_frames = x.get<std::size_t>();
          else if (k == "test_frames") d.test_frames = x.get<std::size_t>();
          else throw std::invalid_argument("experiment config: unknown dataset key " + k);
        }
        if (d.spec.empty()) throw std::invalid_argument("experiment config: dataset entry without spec");
        c.datasets.push_back(d);
      }
    } else if (key == "heldout") c.heldout = v.get<std::string>();
    else if (key == "custom_specs") {
      for (const auto& s : v) c.custom_specs.push_back(spec_from_json(s));
    } else if (key == "sn_target") c.sn_target = v.get<std::string>();
    else if (key == "detector") c.detector = config_from_json(v, desk_config());
    else if (key == "evaluation") {
      for (const auto& [k, x] : v.items()) {
        if (k == "size_score_threshold") c.evaluation.size_score_threshold = x.get<double>();
        else if (k == "iou_thresholds") {
          for (const auto& [cls, t] : x.items()) c.evaluation.thresholds.per_class[class_from_name(cls)] = t.get<double>();
        } else throw std::invalid_argument("experiment config: unknown evaluation key " + k);
      }
    } else if (key == "alphas") c.alphas = v.get<std::vector<double>>();
    else if (key == "output_dir") c.output_dir = v.get<std::string>();
    else if (key == "checkpoint") c.checkpoint = v.get<std::string>();
    else throw std::invalid_argument("experiment config: unknown key " + key);
  }
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string seg = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (seg.empty()) throw std::invalid_argument("empty segment in override path: " + path);
    nlohmann::json* next;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(seg, &used);
        if (used != seg.size()) throw std::invalid_argument(seg);
      } catch (const std::exception&) {
        throw std::invalid_argument("override path expects an array index at " + seg);
      }
      if (idx >= node->size()) throw std::invalid_argument("override index out of range: " + path);
      next = &(*node)[idx];
    } else {
      if (node->is_null()) *node = nlohmann::json::object();
      if (!node->is_object()) throw std::invalid_argument("override path crosses a scalar: " + path);
      next = &(*node)[seg];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    node = next;
    start = dot + 1;
  }
}

ExperimentResult run_experiment(const ExperimentConfig& cfg_in) {
  cfg_in.validate();
  ExperimentConfig cfg = cfg_in;
  cfg.detector.seed = cfg.seed;
  const std::filesystem::path& out = cfg.output_dir;
  ExperimentResult result;

  if (cfg.kind == ExperimentKind::kGen) {
    std::vector<DatasetSpec> specs;
    for (const auto& e : cfg.datasets) {
      const DatasetSpec& spec = cfg.resolve_spec(e.spec);
      specs.push_back(spec);
      if (out.empty()) continue;
      for (const auto& [split, count] : {std::pair<const char*, std::size_t>{"train", e.train_frames}, {"test", e.test_frames}}) {
        std::ostringstream os;
        write_frames_jsonl(os, make_frames(cfg, spec, split, count));
        write_text(out / (e.spec + "." + split + ".jsonl"), os.str());
      }
    }
    if (!out.empty()) {
      write_text(out / "specs.json", registry_to_json(specs).dump(2) + "\n");
      write_text(out / "config.snapshot.json", experiment_to_json(cfg).dump(2) + "\n");
    }
    return result;
  }

  const Splits splits = make_splits(cfg);

  if (cfg.kind == ExperimentKind::kEval) {
    const nlohmann::json snapshot = experiment_to_json(cfg);
    Detector det(cfg.detector, std::max<std::size_t>(1, splits.train.size()));
    det.load(cfg.checkpoint);
    RunRow row;
    row.label = "eval";
    row.detector = cfg.detector;
    row.report = evaluate_all(det, cfg, splits, fingerprint(snapshot));
    if (!out.empty()) write_run(out, snapshot, row, nullptr);
    result.rows.push_back(std::move(row));
    return result;
  }

  if (cfg.kind == ExperimentKind::kTrain || cfg.kind == ExperimentKind::kZeroshot) {
    result.rows.push_back(train_and_eval(cfg, splits, kind_name(cfg.kind), out));
    return result;
  }

  if (!out.empty()) write_text(out / "config.snapshot.json", experiment_to_json(cfg).dump(2) + "\n");
  if (cfg.kind == ExperimentKind::kAblateStages) {
    for (std::size_t i = 0; i < std::size(kStages); ++i) {
      ExperimentConfig c = cfg;
      c.detector.msbn_enabled = kStages[i].msbn;
      c.detector.mask_enabled = kStages[i].mask;
      c.detector.ocrl_enabled = kStages[i].ocrl;
      const std::filesystem::path dir = out.empty() ? out : out / ("stage" + std::to_string(i));
      result.rows.push_back(train_and_eval(c, splits, kStages[i].label, dir));
    }
  } else {  // sweep-alpha: alpha only matters with the voxelization prompt on
    for (std::size_t i = 0; i < cfg.alphas.size(); ++i) {
      ExperimentConfig c = cfg;
      c.detector.msbn_enabled = true;
      c.detector.alpha = cfg.alphas[i];
      char label[32];
      std::snprintf(label, sizeof label, "alpha=%g", cfg.alphas[i]);
      const std::filesystem::path dir = out.empty() ? out : out / ("alpha" + std::to_string(i));
      result.rows.push_back(train_and_eval(c, splits, label, dir));
    }
  }
  if (!out.empty()) write_text(out / "metrics.csv", summary_csv(result));
  return result;
}

std::string summary_csv(const ExperimentResult& result) {
  std::ostringstream os;
  os << "row";
  if (!result.rows.empty())
    for (const auto& d : result.rows.front().report.datasets) os << ',' << d.name << ":mAP_3D," << d.name << ":mAP_BEV";
  os << '\n';
  for (const auto& r : result.rows) {
    os << r.label;
    for (const auto& d : r.report.datasets)
      os << ',' << (d.map_3d ? fmt(*d.map_3d) : "NA") << ',' << (d.map_bev ? fmt(*d.map_bev) : "NA");
    os << '\n';
  }
  return os.str();
}

std::vector<DeltaCell> compare_reports(const EvalReport& a, const EvalReport& b) {
  if (a.datasets.size() != b.datasets.size()) throw std::invalid_argument("compare: reports cover different datasets");
  std::vector<DeltaCell> cells;
  auto cell = [&](const std::string& ds, const std::string& cls, const char* metric, const std::optional<double>& x,
                  const std::optional<double>& y) {
    DeltaCell c{ds, cls, metric, x, y, std::nullopt};
    if (x && y) c.delta = *y - *x;
    cells.push_back(std::move(c));
  };
  for (std::size_t i = 0; i < a.datasets.size(); ++i) {
    const auto& da = a.datasets[i];
    const auto& db = b.datasets[i];
    if (da.name != db.name || da.classes.size() != db.classes.size())
      throw std::invalid_argument("compare: dataset grid mismatch at " + da.name);
    for (std::size_t k = 0; k < da.classes.size(); ++k) {
      const auto& ca = da.classes[k];
      const auto& cb = db.classes[k];
      if (ca.class_id != cb.class_id) throw std::invalid_argument("compare: class grid mismatch in " + da.name);
      cell(da.name, class_name(ca.class_id), "AP_BEV", ca.ap_bev, cb.ap_bev);
      cell(da.name, class_name(ca.class_id), "AP_3D", ca.ap_3d, cb.ap_3d);
    }
    cell(da.name, "all", "mAP_3D", da.map_3d, db.map_3d);
    cell(da.name, "all", "mAP_BEV", da.map_bev, db.map_bev);
  }
  return cells;
}

std::string deltas_to_csv(const std::vector<DeltaCell>& cells) {
  std::ostringstream os;
  os << "dataset,class,metric,a,b,delta\n";
  auto v = [](const std::optional<double>& x) { return x ? fmt(*x) : std::string("NA"); };
  for (const auto& c : cells) os << c.dataset << ',' << c.class_name << ',' << c.metric << ',' << v(c.a) << ',' << v(c.b) << ',' << v(c.delta) << '\n';
  return os.str();
}

}  // namespace promptdet
