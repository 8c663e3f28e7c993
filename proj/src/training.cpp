#include "cunet/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "cunet/byteio.hpp"
#include "cunet/error.hpp"
#include "cunet/inference.hpp"
#include "cunet/loss.hpp"
#include "cunet/metrics.hpp"
#include "cunet/ops.hpp"

namespace cunet {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("TrainConfig: " + msg); };
  if (!(lr0 > 0.0)) fail("lr0 must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) fail("plateau_factor must lie in (0, 1)");
  if (plateau_patience == 0) fail("plateau_patience must be positive");
  if (plateau_delta < 0.0) fail("plateau_delta must be non-negative");
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("betas must lie in (0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (patch.size() == 0) fail("patch extents must be positive");
  if (steps_per_epoch == 0) fail("steps_per_epoch must be positive");
  if (folds == 0 || fold >= folds) fail("fold must lie in [0, folds)");
  if (!(foreground_bias >= 0.0 && foreground_bias <= 1.0)) fail("foreground_bias must lie in [0, 1]");
  if (augment.max_angle_deg < 0.0) fail("augment.max_angle_deg must be non-negative");
  if (!(augment.flip_prob >= 0.0 && augment.flip_prob <= 1.0)) fail("augment.flip_prob must lie in [0, 1]");
  if (dice_smooth < 0.0) fail("dice_smooth must be non-negative");
}

NamedParams named_parameters(const LayerGraph& graph) {
  NamedParams out;
  for (const auto& name : graph.param_names()) out.emplace_back(name, graph.param(name));
  return out;
}

void adam_step(const NamedParams& params, AdamState& state, double lr, const AdamHyper& hyper) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (const auto& [name, param] : params) {
    Tensor p = param;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    if (m.size() != p.numel()) throw ContractError("adam_step: moment shape mismatch for " + name);
    if (!p.has_grad()) {
      // Zero gradient: moments decay, parameters still move by the momentum.
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] *= hyper.beta1;
        v[i] *= hyper.beta2;
      }
    } else {
      const auto g = p.grad();
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      }
    }
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

double PlateauSchedule::observe(double val_loss) {
  if (!best || val_loss < *best - delta) {
    best = val_loss;
    bad_epochs = 0;
  } else {
    ++bad_epochs;
  }
  if (bad_epochs >= patience) {
    lr *= factor;
    ++reductions;
    bad_epochs = 0;
  }
  return lr;
}

double plateau_schedule(const std::vector<double>& history, PlateauSchedule state) {
  for (double loss : history) state.observe(loss);
  return state.lr;
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},
          {"val_mean_dice", e.val_mean_dice},
          {"lr", e.lr},
          {"wall_ms", e.wall_ms}};
}

EpochLog epoch_log_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_loss = j.at("val_loss").get<double>();
  e.val_mean_dice = j.at("val_mean_dice").get<double>();
  e.lr = j.at("lr").get<double>();
  e.wall_ms = j.at("wall_ms").get<double>();
  return e;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  byteio::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::map<std::string, Tensor> moments_table(const std::map<std::string, std::vector<double>>& mom) {
  std::map<std::string, Tensor> table;
  for (const auto& [name, values] : mom) table.emplace(name, Tensor::from_data({values.size()}, values));
  return table;
}

std::map<std::string, std::vector<double>> moments_from(const std::map<std::string, Tensor>& table) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : table) out.emplace(name, std::vector<double>(t.data().begin(), t.data().end()));
  return out;
}

std::map<std::string, Tensor> snapshot(const LayerGraph& graph) {
  std::map<std::string, Tensor> out;
  for (const auto& name : graph.param_names()) out.emplace(name, graph.param(name).detach());
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const LayerGraph& graph,
                     const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  save_params(graph, dir / "params.cunetp");
  byteio::write_file(dir / "adam_m.cunetp", encode_tensor_table(moments_table(ckpt.adam.m)));
  byteio::write_file(dir / "adam_v.cunetp", encode_tensor_table(moments_table(ckpt.adam.v)));
  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : ckpt.log) log.push_back(to_json(e));
  nlohmann::json j = {
      {"epochs_done", ckpt.epochs_done},
      {"adam", {{"t", ckpt.adam.t}, {"m", "adam_m.cunetp"}, {"v", "adam_v.cunetp"}}},
      {"schedule",
       {{"lr", ckpt.schedule.lr},
        {"factor", ckpt.schedule.factor},
        {"patience", ckpt.schedule.patience},
        {"delta", ckpt.schedule.delta},
        {"best", ckpt.schedule.best ? nlohmann::json(*ckpt.schedule.best) : nlohmann::json(nullptr)},
        {"bad_epochs", ckpt.schedule.bad_epochs},
        {"reductions", ckpt.schedule.reductions}}},
      {"best_score", ckpt.best_score},
      {"best_epoch", ckpt.best_epoch ? nlohmann::json(*ckpt.best_epoch) : nlohmann::json(nullptr)},
      {"rng", ckpt.rng_state},
      {"log", log}};
  write_text(dir / "state.json", j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, LayerGraph& graph) {
  load_params(graph, dir / "params.cunetp");
  std::ifstream f(dir / "state.json");
  if (!f) throw FormatError("checkpoint: cannot open " + (dir / "state.json").string());
  nlohmann::json j;
  try {
    f >> j;
    Checkpoint c;
    c.epochs_done = j.at("epochs_done").get<std::size_t>();
    const auto& adam = j.at("adam");
    c.adam.t = adam.at("t").get<std::uint64_t>();
    c.adam.m = moments_from(
        decode_tensor_table(byteio::read_file(dir / adam.at("m").get<std::string>())));
    c.adam.v = moments_from(
        decode_tensor_table(byteio::read_file(dir / adam.at("v").get<std::string>())));
    const auto& s = j.at("schedule");
    c.schedule.lr = s.at("lr").get<double>();
    c.schedule.factor = s.at("factor").get<double>();
    c.schedule.patience = s.at("patience").get<std::size_t>();
    c.schedule.delta = s.at("delta").get<double>();
    if (!s.at("best").is_null()) c.schedule.best = s.at("best").get<double>();
    c.schedule.bad_epochs = s.at("bad_epochs").get<std::size_t>();
    c.schedule.reductions = s.at("reductions").get<std::size_t>();
    c.best_score = j.at("best_score").get<double>();
    if (!j.at("best_epoch").is_null()) c.best_epoch = j.at("best_epoch").get<std::size_t>();
    c.rng_state = j.at("rng").get<std::string>();
    for (const auto& e : j.at("log")) c.log.push_back(epoch_log_from_json(e));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + dir.string() + ": " + e.what());
  }
}

ValidationResult validate_model(const LayerGraph& graph, const std::vector<VolumeSample>& val_set,
                                const Grid& patch, double dice_smooth) {
  ValidationResult res;
  if (val_set.empty()) return res;
  for (const auto& sample : val_set) {
    if (!sample.labels) throw ContractError("validation sample " + sample.id + " has no labels");
    const Tensor probs = predict_volume(graph, sample, make_sliding_plan(sample.grid, patch));
    const Tensor truth = one_hot(encode_labels(*sample.labels), sample.grid, probs.dim(1));
    {
      NoGradGuard no_grad;
      res.loss += dice_loss(probs, truth, dice_smooth).item();
    }
    res.mean_dice += evaluate(probs_to_labels(probs), *sample.labels).mean_dsc;
  }
  res.loss /= static_cast<double>(val_set.size());
  res.mean_dice /= static_cast<double>(val_set.size());
  return res;
}

TrainResult train(LayerGraph& graph, const TrainConfig& cfg,
                  const std::vector<VolumeSample>& train_set,
                  const std::vector<VolumeSample>& val_set, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training set");
  graph.check_patch({cfg.patch.d, cfg.patch.h, cfg.patch.w});
  for (const auto& s : train_set) {
    if (!s.labels) throw ContractError("train: sample " + s.id + " has no labels");
  }

  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps};
  Checkpoint state;
  state.schedule.lr = cfg.lr0;
  state.schedule.factor = cfg.plateau_factor;
  state.schedule.patience = cfg.plateau_patience;
  state.schedule.delta = cfg.plateau_delta;
  Rng rng(cfg.seed);
  TrainResult result;
  if (opts.resume_from) {
    state = load_checkpoint(*opts.resume_from, graph);
    rng = Rng::deserialize(state.rng_state);
    result.best_params = decode_tensor_table(byteio::read_file(*opts.resume_from / "best_params.cunetp"));
  }
  result.log = state.log;

  std::ofstream metrics;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    metrics.open(*opts.out_dir / "metrics.jsonl", opts.resume_from ? std::ios::app : std::ios::trunc);
    if (!metrics) throw FormatError("cannot open metrics log in " + opts.out_dir->string());
  }

  graph.set_requires_grad(true);
  const std::size_t last_epoch = std::min(cfg.epochs, opts.stop_after.value_or(cfg.epochs));
  const std::size_t classes = graph.output_channels();
  for (std::size_t epoch = state.epochs_done; epoch < last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = state.schedule.lr;
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch; ++step) {
      std::vector<double> x, t;
      std::vector<std::string> ids;
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const VolumeSample& sample = train_set[rng.below(train_set.size())];
        const auto origin = sample_patch_origin(sample, cfg.patch, rng, cfg.foreground_bias);
        const VolumeSample patch = augment(extract_patch(sample, origin, cfg.patch), rng, cfg.augment);
        const Tensor in = patch.to_input();
        const Tensor oh = one_hot(encode_labels(*patch.labels), patch.grid, classes);
        x.insert(x.end(), in.data().begin(), in.data().end());
        t.insert(t.end(), oh.data().begin(), oh.data().end());
        ids.push_back(sample.id);
      }
      const std::size_t nb = cfg.batch_size;
      const Tensor input = Tensor::from_data(
          {nb, graph.input_channels(), cfg.patch.d, cfg.patch.h, cfg.patch.w}, std::move(x));
      const Tensor truth =
          Tensor::from_data({nb, classes, cfg.patch.d, cfg.patch.h, cfg.patch.w}, std::move(t));
      graph.zero_grad();
      const Tensor probs = graph.forward(input, {true, &rng});
      const Tensor loss = dice_loss(probs, truth, cfg.dice_smooth);
      if (!std::isfinite(loss.item())) {
        std::string who;
        for (const auto& id : ids) who += (who.empty() ? "" : ",") + id;
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + " patch " + who + " loss " +
                           std::to_string(loss.item()));
      }
      loss_sum += loss.item();
      backward(loss);
      adam_step(named_parameters(graph), state.adam, lr, hyper);
    }

    const ValidationResult val =
        val_set.empty() ? ValidationResult{} : validate_model(graph, val_set, cfg.patch, cfg.dice_smooth);
    state.schedule.observe(val.loss);

    const double score = cfg.selection == Selection::ValLoss ? val.loss : val.mean_dice;
    const bool improved = !state.best_epoch || (cfg.selection == Selection::ValLoss
                                                    ? score < state.best_score
                                                    : score > state.best_score);
    if (improved) {
      state.best_score = score;
      state.best_epoch = epoch;
      result.best_params = snapshot(graph);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(cfg.steps_per_epoch);
    entry.val_loss = val.loss;
    entry.val_mean_dice = val.mean_dice;
    entry.lr = lr;
    entry.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);
    state.log = result.log;
    state.epochs_done = epoch + 1;
    state.rng_state = rng.serialize();

    if (opts.out_dir) {
      metrics << to_json(entry).dump() << "\n";
      metrics.flush();
      save_checkpoint(*opts.out_dir / "last", graph, state);
      byteio::write_file(*opts.out_dir / "last" / "best_params.cunetp",
                         encode_tensor_table(result.best_params));
      if (improved) save_params(graph, *opts.out_dir / "best" / "params.cunetp");
    }
    if (opts.on_epoch) opts.on_epoch(entry);
  }
  graph.set_requires_grad(false);
  result.best_epoch = state.best_epoch.value_or(0);
  result.best_score = state.best_score;
  return result;
}

Tensor ensemble_average(const std::vector<Tensor>& probs) {
  if (probs.empty()) throw ContractError("ensemble_average: no inputs");
  const Shape& shape = probs[0].shape();
  std::vector<double> acc(probs[0].numel(), 0.0);
  for (const auto& p : probs) {
    if (p.shape() != shape) {
      throw ContractError("ensemble_average: shape mismatch " + shape_str(p.shape()) + " vs " +
                          shape_str(shape));
    }
    const auto d = p.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += d[i];
  }
  const double n = static_cast<double>(probs.size());
  for (double& v : acc) v /= n;
  return Tensor::from_data(shape, std::move(acc));
}

}  // namespace cunet
