// cunet: phantom / train / predict / postprocess / evaluate / gradcheck / inspect.
//
// stdout carries exactly one JSON document per invocation (result or error);
// progress and tables go to stderr.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cunet/byteio.hpp"
#include "cunet/config.hpp"
#include "cunet/data.hpp"
#include "cunet/error.hpp"
#include "cunet/gradcheck.hpp"
#include "cunet/inference.hpp"
#include "cunet/metrics.hpp"
#include "cunet/network.hpp"
#include "cunet/phantom.hpp"
#include "cunet/training.hpp"
#include "cunet/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cunet;

namespace {

enum ExitCode { kOk = 0, kFailed = 1, kInvalid = 2, kFormat = 3, kNumeric = 4 };

struct Invocation {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::optional<std::size_t> fold;
  bool desk = false;
  std::string resume;
};

std::string utc_stamp(const char* fmt) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

void absolutize(fs::path& p) {
  if (!p.empty()) p = fs::absolute(p).lexically_normal();
}

RunConfig resolve_config(const Invocation& inv) {
  RunConfig cfg = inv.desk ? desk_preset() : RunConfig{};
  if (!inv.config_path.empty()) {
    std::ifstream in(inv.config_path);
    if (!in) throw ContractError("cannot open config " + inv.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ContractError("config " + inv.config_path + ": " + e.what());
    }
    // A run manifest carries its resolved config under "config".
    if (j.is_object() && j.contains("command") && j.contains("config")) j = j.at("config");
    cfg = parse_config(j, cfg);
  }
  if (inv.seed) cfg.seed = *inv.seed;
  if (inv.fold) cfg.train.fold = *inv.fold;
  cfg.finalize();
  absolutize(cfg.data.manifest);
  for (auto& p : cfg.predict.checkpoints) absolutize(p);
  absolutize(cfg.postprocess.input);
  absolutize(cfg.evaluate.pred);
  absolutize(cfg.evaluate.truth);
  return cfg;
}

void require_path(const fs::path& p, const std::string& key) {
  if (p.empty()) throw ContractError("config: " + key + " is required for this command");
  if (!fs::exists(p)) throw ContractError("config: " + key + " = " + p.string() + " does not exist");
}

// Run directory plus its manifest, which is written before any heavy work.
class Run {
 public:
  Run(const fs::path& out, const std::string& command, const RunConfig& cfg) {
    const std::string base = utc_stamp("%Y%m%d-%H%M%S") + "-seed" + std::to_string(cfg.seed);
    dir_ = out / base;
    for (int i = 2; fs::exists(dir_); ++i) dir_ = out / (base + "-" + std::to_string(i));
    fs::create_directories(dir_);
    dir_ = fs::absolute(dir_);
    manifest_ = {{"command", command},
                 {"seed", cfg.seed},
                 {"config", to_json(cfg)},
                 {"started_at", utc_stamp("%Y-%m-%dT%H:%M:%SZ")},
                 {"finished_at", nullptr},
                 {"status", "running"},
                 {"artifacts", json::array()}};
    flush();
  }

  const fs::path& dir() const { return dir_; }

  fs::path artifact(const fs::path& rel) {
    manifest_["artifacts"].push_back(rel.generic_string());
    fs::create_directories((dir_ / rel).parent_path());
    return dir_ / rel;
  }

  void finish(const std::string& status) {
    manifest_["status"] = status;
    manifest_["finished_at"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    flush();
  }

 private:
  void flush() const {
    std::ofstream(dir_ / "manifest.json") << manifest_.dump(2) << "\n";
  }

  fs::path dir_;
  json manifest_;
};

void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << "\n"; }

// A manifest (.json) or a single BVOL file whose id is its stem.
std::vector<VolumeSample> load_source(const fs::path& path) {
  std::vector<VolumeSample> out;
  if (path.extension() == ".json") {
    for (const auto& e : load_manifest(path)) out.push_back(load_volume(e.path, e.id));
  } else {
    out.push_back(load_volume(path, path.stem().string()));
  }
  return out;
}

std::vector<std::uint8_t> labels_of(const VolumeSample& s, const std::string& role) {
  if (!s.labels) throw ContractError(role + " volume " + s.id + " has no labels");
  return *s.labels;
}

VolumeSample label_volume(const std::string& id, const Grid& grid, std::vector<std::uint8_t> labels) {
  VolumeSample v;
  v.id = id;
  v.grid = grid;
  v.labels = std::move(labels);
  return v;
}

void save_dataset(Run& run, const std::vector<VolumeSample>& samples, const std::string& sub) {
  std::vector<ManifestEntry> entries;
  for (const auto& s : samples) {
    save_volume(s, run.artifact(fs::path(sub) / (s.id + ".bvol")));
    entries.push_back({s.id, s.id + ".bvol"});
  }
  save_manifest(entries, run.artifact(fs::path(sub) / "manifest.json"));
}

json cmd_phantom(const RunConfig& cfg, Run& run) {
  const auto cohort =
      gen_phantom_cohort(cfg.phantom.count, cfg.phantom.grid, cfg.phantom.noise_sigma, cfg.seed);
  save_dataset(run, cohort, "data");
  return {{"dataset", (run.dir() / "data" / "manifest.json").string()}, {"count", cohort.size()}};
}

struct TrainInputs {
  std::vector<VolumeSample> samples;
  bool generated = false;
};

TrainInputs prepare_train(const RunConfig& cfg) {
  TrainInputs in;
  if (!cfg.data.manifest.empty()) {
    require_path(cfg.data.manifest, "data.manifest");
    in.samples = load_source(cfg.data.manifest);
  } else {
    in.samples =
        gen_phantom_cohort(cfg.phantom.count, cfg.phantom.grid, cfg.phantom.noise_sigma, cfg.seed);
    in.generated = true;
  }
  for (const auto& s : in.samples) {
    labels_of(s, "training");
    if (s.modalities.size() != cfg.net.in_modalities) {
      throw ContractError("volume " + s.id + " has " + std::to_string(s.modalities.size()) +
                          " modalities, network expects " + std::to_string(cfg.net.in_modalities));
    }
  }
  if (cfg.train.folds > in.samples.size()) {
    throw ContractError("train.folds = " + std::to_string(cfg.train.folds) + " exceeds " +
                        std::to_string(in.samples.size()) + " volumes");
  }
  return in;
}

json cmd_train(const RunConfig& cfg, const TrainInputs& in, const Invocation& inv, Run& run) {
  if (in.generated) save_dataset(run, in.samples, "data");

  std::vector<std::string> ids;
  std::map<std::string, const VolumeSample*> by_id;
  for (const auto& s : in.samples) {
    ids.push_back(s.id);
    by_id[s.id] = &s;
  }
  const FoldSplit split = make_folds(ids, cfg.train.folds, cfg.seed);
  write_json(run.artifact("split.json"), {{"seed", split.seed}, {"folds", split.folds}});
  std::vector<VolumeSample> train_set, val_set;
  for (const auto& id : split.train_ids(cfg.train.fold)) train_set.push_back(zscore_normalize(*by_id.at(id)));
  for (const auto& id : split.val_ids(cfg.train.fold)) val_set.push_back(zscore_normalize(*by_id.at(id)));

  LayerGraph graph = build_network(cfg.net);
  graph.initialize(cfg.net.init_seed);
  TrainOptions opts;
  opts.out_dir = run.dir() / "train";
  run.artifact("train/metrics.jsonl");
  if (!inv.resume.empty()) opts.resume_from = fs::path(inv.resume);
  opts.on_epoch = [&](const EpochLog& e) {
    std::fprintf(stderr, "epoch %zu/%zu  train %.5f  val %.5f  dice %.4f  lr %.3g  %.0f ms\n",
                 e.epoch + 1, cfg.train.epochs, e.train_loss, e.val_loss, e.val_mean_dice, e.lr,
                 e.wall_ms);
  };
  const TrainResult result = train(graph, cfg.train, train_set, val_set, opts);
  run.artifact("train/last/params.cunetp");
  run.artifact("train/best/params.cunetp");

  json out = {{"best_epoch", result.best_epoch},
              {"best_score", result.best_score},
              {"epochs", result.log.size()},
              {"fold", cfg.train.fold},
              {"best_params", (run.dir() / "train/best/params.cunetp").string()}};
  if (!val_set.empty()) {
    decode_params(graph, byteio::read_file(run.dir() / "train/best/params.cunetp"));
    std::vector<EvalReport> reports;
    json per_case = json::object();
    for (const auto& s : val_set) {
      const Tensor probs = predict_volume(graph, s, make_sliding_plan(s.grid, cfg.train.patch, cfg.predict.stride));
      auto labels = probs_to_labels(probs);
      if (cfg.predict.postprocess) {
        labels = filter_enhancing(labels, s.grid, cfg.postprocess.min_voxels,
                                  cfg.postprocess.connectivity).labels;
      }
      reports.push_back(evaluate(labels, *s.labels));
      per_case[s.id] = to_json(reports.back());
    }
    EvalReport avg = average_reports(reports);
    avg.fold = static_cast<int>(cfg.train.fold);
    avg.checkpoint = "train/best/params.cunetp";
    avg.postprocessed = cfg.predict.postprocess;
    json report = to_json(avg);
    report["per_case"] = per_case;
    write_json(run.artifact("heldout_eval.json"), report);
    out["heldout_mean_dsc"] = avg.mean_dsc;
    out["heldout"] = {{"wt", avg.wt.dsc}, {"tc", avg.tc.dsc}, {"et", avg.et.dsc}};
  }
  return out;
}

struct PredictInputs {
  std::vector<VolumeSample> samples;
  std::vector<LayerGraph> models;
};

PredictInputs prepare_predict(const RunConfig& cfg) {
  require_path(cfg.data.manifest, "data.manifest");
  if (cfg.predict.checkpoints.empty()) throw ContractError("config: predict.checkpoints is empty");
  PredictInputs in;
  for (const auto& p : cfg.predict.checkpoints) {
    require_path(p, "predict.checkpoints");
    LayerGraph g = build_network(cfg.net);
    load_params(g, p);
    in.models.push_back(std::move(g));
  }
  in.models.front().check_patch({cfg.train.patch.d, cfg.train.patch.h, cfg.train.patch.w});
  in.samples = load_source(cfg.data.manifest);
  return in;
}

json cmd_predict(const RunConfig& cfg, const PredictInputs& in, Run& run) {
  std::vector<ManifestEntry> entries;
  json audits = json::object();
  for (const auto& raw : in.samples) {
    const VolumeSample s = zscore_normalize(raw);
    const SlidingPlan plan = make_sliding_plan(s.grid, cfg.train.patch, cfg.predict.stride);
    std::vector<Tensor> probs;
    for (const auto& g : in.models) probs.push_back(predict_volume(g, s, plan));
    const Tensor avg = probs.size() == 1 ? probs.front() : ensemble_average(probs);
    auto labels = probs_to_labels(avg);
    if (cfg.predict.postprocess) {
      FilterResult f = filter_enhancing(labels, s.grid, cfg.postprocess.min_voxels,
                                        cfg.postprocess.connectivity);
      labels = std::move(f.labels);
      audits[s.id] = to_json(f.audit);
    }
    save_volume(label_volume(s.id, s.grid, std::move(labels)), run.artifact("pred/" + s.id + ".bvol"));
    entries.push_back({s.id, s.id + ".bvol"});
    if (cfg.predict.write_probs) {
      VolumeSample pv;
      pv.id = s.id;
      pv.grid = s.grid;
      const std::size_t n = s.grid.size();
      for (std::size_t c = 0; c < avg.dim(1); ++c) {
        pv.modalities.emplace_back(avg.data().begin() + c * n, avg.data().begin() + (c + 1) * n);
      }
      save_volume(pv, run.artifact("probs/" + s.id + ".bvol"));
    }
    std::fprintf(stderr, "predicted %s (%zu patches x %zu models)\n", s.id.c_str(),
                 plan.origins.size(), in.models.size());
  }
  save_manifest(entries, run.artifact("pred/manifest.json"));
  json out = {{"predictions", (run.dir() / "pred/manifest.json").string()},
              {"count", entries.size()},
              {"ensemble", in.models.size()}};
  if (cfg.predict.postprocess) {
    write_json(run.artifact("pred/audit.json"), audits);
    out["audit"] = audits;
  }
  return out;
}

json cmd_postprocess(const RunConfig& cfg, const std::vector<VolumeSample>& inputs, Run& run) {
  std::vector<ManifestEntry> entries;
  json audits = json::object();
  for (const auto& s : inputs) {
    FilterResult f = filter_enhancing(labels_of(s, "postprocess"), s.grid, cfg.postprocess.min_voxels,
                                      cfg.postprocess.connectivity);
    audits[s.id] = to_json(f.audit);
    save_volume(label_volume(s.id, s.grid, std::move(f.labels)), run.artifact("post/" + s.id + ".bvol"));
    entries.push_back({s.id, s.id + ".bvol"});
  }
  save_manifest(entries, run.artifact("post/manifest.json"));
  write_json(run.artifact("post/audit.json"), audits);
  return {{"labels", (run.dir() / "post/manifest.json").string()}, {"audit", audits}};
}

struct EvaluateInputs {
  std::vector<VolumeSample> pred, truth;
};

EvaluateInputs prepare_evaluate(const RunConfig& cfg) {
  require_path(cfg.evaluate.pred, "evaluate.pred");
  require_path(cfg.evaluate.truth, "evaluate.truth");
  EvaluateInputs in{load_source(cfg.evaluate.pred), load_source(cfg.evaluate.truth)};
  if (in.pred.size() == 1 && in.truth.size() == 1) return in;
  std::map<std::string, std::size_t> truth_ix;
  for (std::size_t i = 0; i < in.truth.size(); ++i) truth_ix[in.truth[i].id] = i;
  std::vector<VolumeSample> matched;
  for (const auto& p : in.pred) {
    auto it = truth_ix.find(p.id);
    if (it == truth_ix.end()) throw ContractError("evaluate: no truth volume for id " + p.id);
    matched.push_back(in.truth[it->second]);
  }
  in.truth = std::move(matched);
  return in;
}

json cmd_evaluate(const RunConfig& cfg, const EvaluateInputs& in, const Invocation& inv, Run& run) {
  (void)cfg;
  std::vector<EvalReport> reports;
  json per_case = json::object();
  for (std::size_t i = 0; i < in.pred.size(); ++i) {
    const auto& p = in.pred[i];
    const auto& t = in.truth[i];
    if (!(p.grid == t.grid)) {
      throw ContractError("evaluate: " + p.id + " grid " + grid_str(p.grid) + " vs truth " +
                          grid_str(t.grid));
    }
    reports.push_back(evaluate(labels_of(p, "predicted"), labels_of(t, "truth")));
    per_case[p.id] = to_json(reports.back());
  }
  EvalReport avg = average_reports(reports);
  if (inv.fold) avg.fold = static_cast<int>(*inv.fold);
  avg.checkpoint = cfg.evaluate.pred.string();
  json report = to_json(avg);
  report["per_case"] = per_case;
  write_json(run.artifact("evaluation.json"), report);
  return report;
}

json cmd_gradcheck(const RunConfig& cfg, Run& run, bool& all_passed) {
  SuiteOptions opts;
  opts.eps = cfg.gradcheck.eps;
  opts.op_tolerance = cfg.gradcheck.op_tolerance;
  opts.net_tolerance = cfg.gradcheck.net_tolerance;
  opts.net_samples = cfg.gradcheck.net_samples;
  opts.seed = cfg.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_gradcheck_suite(opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json table = json::array();
  all_passed = true;
  std::fprintf(stderr, "%-44s %12s %10s %8s  %s\n", "check", "max_rel_err", "tolerance", "coords", "result");
  for (const auto& r : rows) {
    all_passed = all_passed && r.passed();
    std::fprintf(stderr, "%-44s %12.3e %10.1e %8zu  %s\n", r.name.c_str(), r.result.max_rel_error,
                 r.tolerance, r.result.checked, r.passed() ? "pass" : "FAIL");
    table.push_back({{"name", r.name},
                     {"max_rel_error", r.result.max_rel_error},
                     {"tolerance", r.tolerance},
                     {"checked", r.result.checked},
                     {"passed", r.passed()}});
  }
  json out = {{"passed", all_passed}, {"seconds", secs}, {"checks", table}};
  write_json(run.artifact("gradcheck.json"), out);
  return out;
}

json cmd_inspect(const RunConfig& cfg, Run& run) {
  const LayerGraph graph = build_network(cfg.net);
  const ArchReport r = inspect(graph, {cfg.train.patch.d, cfg.train.patch.h, cfg.train.patch.w});
  json shapes = json::array();
  for (const auto& s : r.encoder_shapes) {
    shapes.push_back({{"level", s.level}, {"channels", s.channels}, {"extent", s.extent}});
  }
  json out = {{"parameter_count", r.parameter_count},
              {"conv_layers", r.conv_layers},
              {"conv3_layers", r.conv3_layers},
              {"conv1_layers", r.conv1_layers},
              {"reference_layer_count", 84},
              {"layer_convention", r.layer_convention},
              {"stem_width", r.stem_width},
              {"encoder_widths", r.encoder_widths},
              {"encoder_shapes", shapes},
              {"receptive_field", r.receptive_field},
              {"patch", json::array({cfg.train.patch.d, cfg.train.patch.h, cfg.train.patch.w})}};
  std::string widths;
  for (auto w : r.encoder_widths) widths += (widths.empty() ? "" : ",") + std::to_string(w);
  std::fprintf(stderr, "encoder widths: %s\nstem width: %zu\nparameters: %zu\nconv layers: %zu\n",
               widths.c_str(), r.stem_width, r.parameter_count, r.conv_layers);
  write_json(run.artifact("inspect.json"), out);
  return out;
}

int emit_error(int code, const std::string& kind, const std::string& message) {
  std::cout << json{{"status", "error"}, {"kind", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

int dispatch(const Invocation& inv) {
  const RunConfig cfg = resolve_config(inv);
  std::optional<Run> run;
  try {
    json result;
    bool ok = true;
    const fs::path out = inv.out;
    if (inv.command == "phantom") {
      run.emplace(out, inv.command, cfg);
      result = cmd_phantom(cfg, *run);
    } else if (inv.command == "train") {
      if (!inv.resume.empty()) require_path(inv.resume, "--resume");
      const TrainInputs in = prepare_train(cfg);
      run.emplace(out, inv.command, cfg);
      result = cmd_train(cfg, in, inv, *run);
    } else if (inv.command == "predict") {
      const PredictInputs in = prepare_predict(cfg);
      run.emplace(out, inv.command, cfg);
      result = cmd_predict(cfg, in, *run);
    } else if (inv.command == "postprocess") {
      require_path(cfg.postprocess.input, "postprocess.input");
      const auto inputs = load_source(cfg.postprocess.input);
      run.emplace(out, inv.command, cfg);
      result = cmd_postprocess(cfg, inputs, *run);
    } else if (inv.command == "evaluate") {
      const EvaluateInputs in = prepare_evaluate(cfg);
      run.emplace(out, inv.command, cfg);
      result = cmd_evaluate(cfg, in, inv, *run);
    } else if (inv.command == "gradcheck") {
      run.emplace(out, inv.command, cfg);
      result = cmd_gradcheck(cfg, *run, ok);
    } else if (inv.command == "inspect") {
      run.emplace(out, inv.command, cfg);
      result = cmd_inspect(cfg, *run);
    }
    run->finish(ok ? "ok" : "failed");
    std::cout << json{{"status", ok ? "ok" : "failed"},
                      {"command", inv.command},
                      {"run_dir", run->dir().string()},
                      {"result", result}}
                     .dump(2)
              << std::endl;
    return ok ? kOk : kFailed;
  } catch (...) {
    if (run) run->finish("error");
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware 3D UNet segmentation toolkit"};
  app.require_subcommand(1, 1);
  Invocation inv;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"phantom", "Generate a synthetic phantom dataset"},
      {"train", "Train one fold (phantoms are generated when no manifest is given)"},
      {"predict", "Sliding-window prediction, optionally ensembled over checkpoints"},
      {"postprocess", "Relabel small enhancing-tumor components"},
      {"evaluate", "Score predicted labels against ground truth"},
      {"gradcheck", "Finite-difference gradient suite"},
      {"inspect", "Architecture report"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", inv.config_path, "JSON config or run manifest")->check(CLI::ExistingFile);
    sub->add_option("--seed", inv.seed, "Seed override");
    sub->add_option("--out", inv.out, "Parent directory for run directories")->capture_default_str();
    sub->add_option("--fold", inv.fold, "Fold index override");
    sub->add_flag("--desk", inv.desk, "Desk-scale preset: base 4, depth 3, 16^3 patches, 20x50 steps");
    if (name == "train") sub->add_option("--resume", inv.resume, "Checkpoint directory to continue from");
    sub->callback([&inv, name = name] { inv.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return emit_error(kInvalid, "usage", e.what());
  }

  try {
    return dispatch(inv);
  } catch (const ContractError& e) {
    return emit_error(kInvalid, "contract", e.what());
  } catch (const FormatError& e) {
    return emit_error(kFormat, "format", e.what());
  } catch (const NumericError& e) {
    return emit_error(kNumeric, "numeric", e.what());
  } catch (const std::exception& e) {
    return emit_error(kFailed, "internal", e.what());
  }
}
