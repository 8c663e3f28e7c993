#include "cunet/config.hpp"

#include <set>

#include "cunet/error.hpp"

namespace cunet {

namespace {

using nlohmann::json;

// Reads a section, rejecting keys outside `allowed`.
class Section {
 public:
  Section(const json& j, std::string path, std::set<std::string> allowed)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ContractError("config: " + where() + " must be an object");
    for (const auto& [key, value] : j_.items()) {
      if (!allowed.count(key)) throw ContractError("config: unknown key " + where(key));
    }
  }

  template <typename T>
  void read(const std::string& key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ContractError("config: wrong type for " + where(key));
    }
  }

  void read_grid(const std::string& key, Grid& out) const {
    if (!j_.contains(key)) return;
    std::vector<std::size_t> v;
    read(key, v);
    if (v.size() != 3) throw ContractError("config: " + where(key) + " must be [d, h, w]");
    out = {v[0], v[1], v[2]};
  }

  void read_path(const std::string& key, std::filesystem::path& out) const {
    std::string s;
    if (!j_.contains(key)) return;
    read(key, s);
    out = s;
  }

  bool has(const std::string& key) const { return j_.contains(key); }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string where(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
};

json grid_json(const Grid& g) { return json::array({g.d, g.h, g.w}); }

}  // namespace

void RunConfig::finalize() {
  net.init_seed = seed;
  train.seed = seed;
  net.validate();
  train.validate();
  if (phantom.count == 0) throw ContractError("config: phantom.count must be positive");
  if (phantom.grid.size() == 0) throw ContractError("config: phantom.grid extents must be positive");
  if (phantom.noise_sigma < 0.0) throw ContractError("config: phantom.noise_sigma must be >= 0");
  if (postprocess.connectivity != 6 && postprocess.connectivity != 26) {
    throw ContractError("config: postprocess.connectivity must be 6 or 26");
  }
  if (!(gradcheck.eps > 0.0)) throw ContractError("config: gradcheck.eps must be positive");
}

RunConfig desk_preset() {
  RunConfig cfg;
  cfg.net = NetConfig::desk();
  cfg.train.patch = {16, 16, 16};
  cfg.train.epochs = 20;
  cfg.train.steps_per_epoch = 50;
  cfg.train.lr0 = 3e-3;
  return cfg;
}

RunConfig parse_config(const nlohmann::json& j, RunConfig cfg) {
  const Section root(j, "",
                     {"seed", "net", "train", "phantom", "data", "predict", "postprocess",
                      "evaluate", "gradcheck"});
  root.read("seed", cfg.seed);

  if (root.has("net")) {
    const Section s(root.at("net"), "net",
                    {"in_modalities", "num_classes", "base_width", "encoder_widths", "rib_rates",
                     "dropout_rate", "depth"});
    NetConfig& n = cfg.net;
    const bool reshaped = s.has("base_width") || s.has("depth");
    s.read("in_modalities", n.in_modalities);
    s.read("num_classes", n.num_classes);
    s.read("base_width", n.base_width);
    s.read("depth", n.depth);
    if (reshaped && !s.has("encoder_widths")) {
      n.encoder_widths = NetConfig::scaled(n.base_width, n.depth).encoder_widths;
    }
    s.read("encoder_widths", n.encoder_widths);
    s.read("rib_rates", n.rib_rates);
    s.read("dropout_rate", n.dropout_rate);
  }

  if (root.has("train")) {
    const Section s(root.at("train"), "train",
                    {"lr0", "plateau_factor", "plateau_patience", "plateau_delta", "epochs",
                     "batch_size", "beta1", "beta2", "adam_eps", "patch", "steps_per_epoch", "fold",
                     "folds", "foreground_bias", "augment", "dice_smooth", "selection"});
    TrainConfig& t = cfg.train;
    s.read("lr0", t.lr0);
    s.read("plateau_factor", t.plateau_factor);
    s.read("plateau_patience", t.plateau_patience);
    s.read("plateau_delta", t.plateau_delta);
    s.read("epochs", t.epochs);
    s.read("batch_size", t.batch_size);
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("adam_eps", t.adam_eps);
    s.read_grid("patch", t.patch);
    s.read("steps_per_epoch", t.steps_per_epoch);
    s.read("fold", t.fold);
    s.read("folds", t.folds);
    s.read("foreground_bias", t.foreground_bias);
    s.read("dice_smooth", t.dice_smooth);
    if (s.has("augment")) {
      const Section a(s.at("augment"), "train.augment", {"max_angle_deg", "flip_prob"});
      a.read("max_angle_deg", t.augment.max_angle_deg);
      a.read("flip_prob", t.augment.flip_prob);
    }
    if (s.has("selection")) {
      std::string sel;
      s.read("selection", sel);
      if (sel == "val_loss") t.selection = Selection::ValLoss;
      else if (sel == "mean_dice") t.selection = Selection::MeanDice;
      else throw ContractError("config: train.selection must be \"val_loss\" or \"mean_dice\"");
    }
  }

  if (root.has("phantom")) {
    const Section s(root.at("phantom"), "phantom", {"count", "grid", "noise_sigma"});
    s.read("count", cfg.phantom.count);
    s.read_grid("grid", cfg.phantom.grid);
    s.read("noise_sigma", cfg.phantom.noise_sigma);
  }
  if (root.has("data")) {
    const Section s(root.at("data"), "data", {"manifest"});
    s.read_path("manifest", cfg.data.manifest);
  }
  if (root.has("predict")) {
    const Section s(root.at("predict"), "predict",
                    {"checkpoints", "stride", "write_probs", "postprocess"});
    if (s.has("checkpoints")) {
      std::vector<std::string> v;
      s.read("checkpoints", v);
      cfg.predict.checkpoints.assign(v.begin(), v.end());
    }
    s.read_grid("stride", cfg.predict.stride);
    s.read("write_probs", cfg.predict.write_probs);
    s.read("postprocess", cfg.predict.postprocess);
  }
  if (root.has("postprocess")) {
    const Section s(root.at("postprocess"), "postprocess", {"input", "min_voxels", "connectivity"});
    s.read_path("input", cfg.postprocess.input);
    s.read("min_voxels", cfg.postprocess.min_voxels);
    s.read("connectivity", cfg.postprocess.connectivity);
  }
  if (root.has("evaluate")) {
    const Section s(root.at("evaluate"), "evaluate", {"pred", "truth"});
    s.read_path("pred", cfg.evaluate.pred);
    s.read_path("truth", cfg.evaluate.truth);
  }
  if (root.has("gradcheck")) {
    const Section s(root.at("gradcheck"), "gradcheck",
                    {"eps", "op_tolerance", "net_tolerance", "net_samples"});
    s.read("eps", cfg.gradcheck.eps);
    s.read("op_tolerance", cfg.gradcheck.op_tolerance);
    s.read("net_tolerance", cfg.gradcheck.net_tolerance);
    s.read("net_samples", cfg.gradcheck.net_samples);
  }
  return cfg;
}

nlohmann::json to_json(const RunConfig& cfg) {
  std::vector<std::string> ckpts;
  for (const auto& p : cfg.predict.checkpoints) ckpts.push_back(p.generic_string());
  return {
      {"seed", cfg.seed},
      {"net",
       {{"in_modalities", cfg.net.in_modalities},
        {"num_classes", cfg.net.num_classes},
        {"base_width", cfg.net.base_width},
        {"encoder_widths", cfg.net.encoder_widths},
        {"rib_rates", cfg.net.rib_rates},
        {"dropout_rate", cfg.net.dropout_rate},
        {"depth", cfg.net.depth}}},
      {"train",
       {{"lr0", cfg.train.lr0},
        {"plateau_factor", cfg.train.plateau_factor},
        {"plateau_patience", cfg.train.plateau_patience},
        {"plateau_delta", cfg.train.plateau_delta},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"adam_eps", cfg.train.adam_eps},
        {"patch", grid_json(cfg.train.patch)},
        {"steps_per_epoch", cfg.train.steps_per_epoch},
        {"fold", cfg.train.fold},
        {"folds", cfg.train.folds},
        {"foreground_bias", cfg.train.foreground_bias},
        {"augment",
         {{"max_angle_deg", cfg.train.augment.max_angle_deg},
          {"flip_prob", cfg.train.augment.flip_prob}}},
        {"dice_smooth", cfg.train.dice_smooth},
        {"selection", cfg.train.selection == Selection::ValLoss ? "val_loss" : "mean_dice"}}},
      {"phantom",
       {{"count", cfg.phantom.count},
        {"grid", grid_json(cfg.phantom.grid)},
        {"noise_sigma", cfg.phantom.noise_sigma}}},
      {"data", {{"manifest", cfg.data.manifest.generic_string()}}},
      {"predict",
       {{"checkpoints", ckpts},
        {"stride", grid_json(cfg.predict.stride)},
        {"write_probs", cfg.predict.write_probs},
        {"postprocess", cfg.predict.postprocess}}},
      {"postprocess",
       {{"input", cfg.postprocess.input.generic_string()},
        {"min_voxels", cfg.postprocess.min_voxels},
        {"connectivity", cfg.postprocess.connectivity}}},
      {"evaluate",
       {{"pred", cfg.evaluate.pred.generic_string()},
        {"truth", cfg.evaluate.truth.generic_string()}}},
      {"gradcheck",
       {{"eps", cfg.gradcheck.eps},
        {"op_tolerance", cfg.gradcheck.op_tolerance},
        {"net_tolerance", cfg.gradcheck.net_tolerance},
        {"net_samples", cfg.gradcheck.net_samples}}},
  };
}

}  // namespace cunet
