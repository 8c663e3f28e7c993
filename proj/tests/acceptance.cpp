// Acceptance gate: one PASS/FAIL line per primary criterion.
// Usage: acceptance [--skip-e2e]   (the end-to-end run takes several minutes)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cunet/byteio.hpp"
#include "cunet/gradcheck.hpp"
#include "cunet/inference.hpp"
#include "cunet/loss.hpp"
#include "cunet/metrics.hpp"
#include "cunet/network.hpp"
#include "cunet/ops.hpp"
#include "cunet/parallel.hpp"
#include "cunet/training.hpp"
#include "cunet/data.hpp"
#include "oracles.hpp"

using namespace cunet;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

// Optional copy of the result lines (--report PATH).
std::FILE* report_copy = nullptr;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (report_copy) {
    std::fprintf(report_copy, "%s\n", line.c_str());
    std::fflush(report_copy);
  }
}

void report(const char* name, bool ok, const std::string& detail) {
  char head[64];
  std::snprintf(head, sizeof head, "[%s] %-28s ", ok ? "PASS" : "FAIL", name);
  emit(head + detail);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Tensor random_tensor(const Shape& s, Rng& rng) {
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data(s, std::move(v));
}

std::vector<std::uint8_t> random_labels(Rng& rng, std::size_t n) {
  static const std::uint8_t raw[4] = {0, 1, 2, 4};
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = raw[rng.below(4)];
  return v;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto rows = run_gradcheck_suite();
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  double op_err = 0.0, net_err = 0.0;
  bool ok = true;
  for (const auto& r : rows) {
    const bool net = r.name.rfind("network", 0) == 0;
    (net ? net_err : op_err) = std::max(net ? net_err : op_err, r.result.max_rel_error);
    ok = ok && r.result.max_rel_error < (net ? 1e-3 : 1e-4);
  }
  ok = ok && secs < 120.0;
  report("gradient-suite", ok,
         fmt("%.0f checks; max op err %.2e (<1e-4); ", static_cast<double>(rows.size()), op_err) +
             fmt("network err %.2e (<1e-3); %.1f s (<120 s)", net_err, secs));
}

void conv_oracle() {
  Rng rng(2024);
  const Tensor x = random_tensor({1, 2, 11, 12, 13}, rng);
  const Tensor k = random_tensor({3, 2, 3, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  double worst = 0.0;
  int cases = 0;
  for (std::size_t stride : {1, 2})
    for (std::size_t dil : {1, 2, 3, 5})
      for (std::size_t pad : {0, 1, 2}) {
        const Tensor y = ops::conv3d(x, k, b, {{stride, stride, stride}, {dil, dil, dil}, {pad, pad, pad}});
        const auto ref = oracle::conv3d(values(x), {1, 2, 11, 12, 13}, values(k), {3, 2, 3, 3, 3},
                                        values(b), stride, dil, pad);
        if (y.shape() != Shape(ref.shape.begin(), ref.shape.end())) {
          worst = INFINITY;
          continue;
        }
        for (std::size_t i = 0; i < ref.data.size(); ++i)
          worst = std::max(worst, std::abs(y.data()[i] - ref.data[i]));
        ++cases;
      }
  report("conv-oracle", worst < 1e-9 && cases == 24,
         fmt("%.0f stride/dilation/padding cases; max abs diff %.2e (<1e-9)", cases, worst));
}

void loss_closed_forms() {
  const std::size_t n = 8;
  std::vector<double> t(4 * n, 0.0), disjoint(4 * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    t[(j % 4) * n + j] = 1.0;
    disjoint[((j + 1) % 4) * n + j] = 1.0;
  }
  const Tensor truth = Tensor::from_data({1, 4, 2, 2, 2}, t);
  const double perfect = dice_loss(truth, truth, 0.0).item();
  const double none = dice_loss(Tensor::from_data({1, 4, 2, 2, 2}, disjoint), truth, 0.0).item();
  const double ref = oracle::dice_loss({{0.25}, {0.25}, {0.25}, {0.25}}, {{1}, {0}, {0}, {0}}, 0.0);
  const double uniform = dice_loss(Tensor::full({1, 4, 1, 1, 1}, 0.25),
                                   Tensor::from_data({1, 4, 1, 1, 1}, {1, 0, 0, 0}), 0.0)
                             .item();
  const bool ok = std::abs(perfect + 1.0) <= 1e-12 && std::abs(none) <= 1e-12 &&
                  std::abs(ref + 0.1) <= 1e-12 && std::abs(uniform - ref) <= 1e-12;
  report("loss-closed-forms", ok, fmt("perfect %.15f, disjoint %.1e, single-voxel uniform %.15f", perfect, none, uniform));
}

void architecture_audit() {
  const LayerGraph full_net = build_network(NetConfig::full());
  const ArchReport pr = inspect(full_net, {128, 128, 128});
  const LayerGraph desk = build_network(NetConfig::desk());
  const std::size_t hand = oracle::network_params(4, 3);
  const bool widths = pr.encoder_widths == std::vector<std::size_t>{32, 64, 128, 256, 512};
  std::string w;
  for (auto v : pr.encoder_widths) w += (w.empty() ? "" : "/") + std::to_string(v);
  const bool ok = widths && pr.stem_width == 16 && desk.parameter_count() == hand;
  report("architecture-audit", ok,
         "encoder widths " + w + "; stem " + std::to_string(pr.stem_width) + "; desk params " +
             std::to_string(desk.parameter_count()) + " vs hand count " + std::to_string(hand) +
             "; full-width conv layers " + std::to_string(pr.conv_layers));
}

void postprocessing() {
  const Grid g{20, 20, 20};
  std::vector<std::uint8_t> l(g.size(), 0);
  auto blob = [&](std::size_t z0, std::size_t n) {
    for (std::size_t z = z0; z < g.d && n; ++z)
      for (std::size_t y = 0; y < g.h && n; ++y)
        for (std::size_t x = 0; x < g.w && n; ++x, --n) l[g.index(z, y, x)] = 4;
  };
  blob(0, 499);
  blob(12, 500);
  const FilterResult f = filter_enhancing(l, g);
  const bool rule = f.audit.sizes == std::vector<std::size_t>{499, 500} &&
                    f.audit.components_relabeled == 1 &&
                    std::count(f.labels.begin(), f.labels.end(), 4) == 500 &&
                    std::count(f.labels.begin(), f.labels.end(), 1) == 499;
  bool idempotent = filter_enhancing(f.labels, g).labels == f.labels;

  Rng rng(100);
  const Grid cube{16, 16, 16};
  int agree = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::uint8_t> mask(cube.size());
    const double p = 0.05 + 0.3 * rng.uniform();
    for (auto& v : mask) v = rng.bernoulli(p);
    const auto comps = connected_components(mask, cube, 26);
    const auto ref = oracle::propagate_labels(mask, 16, 16, 16, 26);
    bool same = comps.size() == *std::max_element(ref.begin(), ref.end());
    for (std::size_t k = 0; k < comps.size() && same; ++k)
      for (std::size_t v : comps[k].voxels) same = same && ref[v] == k + 1;
    agree += same;
    std::vector<std::uint8_t> labels(cube.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = mask[i] ? 4 : (rng.bernoulli(0.2) ? 2 : 0);
    const auto once = filter_enhancing(labels, cube, 5).labels;
    idempotent = idempotent && filter_enhancing(once, cube, 5).labels == once;
  }
  report("post-processing", rule && idempotent && agree == 100,
         std::string("499 relabeled / 500 kept: ") + (rule ? "yes" : "no") + "; flood-fill agreement " +
             std::to_string(agree) + "/100; idempotent: " + (idempotent ? "yes" : "no"));
}

void metrics() {
  Rng rng(50);
  int exact = 0;
  bool nested = true;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 16 * 16 * 16;
    const auto pred = random_labels(rng, n), truth = random_labels(rng, n);
    const EvalReport r = evaluate(pred, truth);
    bool ok = true;
    const RegionMasks pm = compose_regions(pred), tm = compose_regions(truth);
    const std::pair<const RegionScores*, std::pair<const Mask*, const Mask*>> regions[3] = {
        {&r.wt, {&pm.wt, &tm.wt}}, {&r.tc, {&pm.tc, &tm.tc}}, {&r.et, {&pm.et, &tm.et}}};
    // Region masks re-derived from raw labels for the oracle.
    auto region = [](const std::vector<std::uint8_t>& l, int which) {
      std::vector<std::uint8_t> m(l.size());
      for (std::size_t i = 0; i < l.size(); ++i)
        m[i] = which == 0 ? (l[i] == 1 || l[i] == 2 || l[i] == 4) : which == 1 ? (l[i] == 1 || l[i] == 4) : l[i] == 4;
      return m;
    };
    for (int k = 0; k < 3; ++k) {
      const auto c = oracle::count(region(pred, k), region(truth, k));
      const RegionScores& s = *regions[k].first;
      ok = ok && s.counts.tp == c.tp && s.counts.fp == c.fp && s.counts.fn == c.fn && s.counts.tn == c.tn;
      ok = ok && s.dsc == 2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn);
      ok = ok && s.sensitivity == static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
      ok = ok && s.specificity == static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
    }
    exact += ok;
    for (const auto* m : {&pm, &tm})
      for (std::size_t i = 0; i < n; ++i) nested = nested && m->et[i] <= m->tc[i] && m->tc[i] <= m->wt[i];
  }
  report("metrics", exact == 50 && nested,
         "confusion-oracle agreement " + std::to_string(exact) + "/50; ET<=TC<=WT: " + (nested ? "yes" : "no"));
}

void schedule() {
  PlateauSchedule s;
  s.lr = 7e-5;
  s.factor = 0.5;
  s.patience = 30;
  std::vector<std::size_t> drops;
  std::vector<double> lrs;
  double prev = s.lr;
  for (std::size_t epoch = 0; epoch < 61; ++epoch) {
    const double next = s.observe(1.0);  // never improves after epoch 0
    if (next != prev) {
      drops.push_back(epoch);
      lrs.push_back(next);
    }
    prev = next;
  }
  const bool ok = drops == std::vector<std::size_t>{30, 60} && lrs == std::vector<double>{3.5e-5, 1.75e-5};
  std::string d;
  for (std::size_t i = 0; i < drops.size(); ++i)
    d += (i ? ", " : "") + fmt("%.3g after epoch %.0f", lrs[i], static_cast<double>(drops[i]));
  report("schedule-conformance", ok, "7e-05 -> " + d);
}

void five_fold() {
  std::vector<std::string> ids;
  for (int i = 0; i < 369; ++i) ids.push_back("case" + std::to_string(i));
  const FoldSplit split = make_folds(ids, 5, 0);
  std::vector<std::size_t> sizes;
  std::vector<std::string> all;
  for (const auto& f : split.folds) {
    sizes.push_back(f.size());
    all.insert(all.end(), f.begin(), f.end());
  }
  std::sort(all.begin(), all.end());
  std::vector<std::string> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  const bool partition = all == sorted;

  Rng rng(5);
  const std::size_t n = 6 * 6 * 6;
  std::vector<Tensor> probs;
  for (int k = 0; k < 5; ++k) {
    std::vector<double> p(4 * n);
    for (std::size_t v = 0; v < n; ++v) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += (p[c * n + v] = rng.uniform());
      for (std::size_t c = 0; c < 4; ++c) p[c * n + v] /= s;
    }
    probs.push_back(Tensor::from_data({1, 4, 6, 6, 6}, std::move(p)));
  }
  const Tensor avg = ensemble_average(probs);
  double worst = 0.0, simplex = 0.0;
  for (std::size_t i = 0; i < 4 * n; ++i) {
    double direct = 0.0;
    for (const auto& p : probs) direct += p.data()[i];
    worst = std::max(worst, std::abs(avg.data()[i] - direct / 5.0));
  }
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) s += avg.data()[c * n + v];
    simplex = std::max(simplex, std::abs(s - 1.0));
  }
  const bool ok = sizes == std::vector<std::size_t>{74, 74, 74, 74, 73} && partition && worst <= 1e-12 &&
                  simplex <= 1e-12;
  std::string sz;
  for (auto v : sizes) sz += (sz.empty() ? "" : ",") + std::to_string(v);
  report("five-fold-machinery", ok,
         "fold sizes {" + sz + "}; partition: " + (partition ? "yes" : "no") +
             fmt("; ensemble vs direct mean %.1e; simplex dev %.1e", worst, simplex));
}

// Runs `cunet train --desk` and returns the parsed stdout document.
json run_train(const fs::path& out, double& seconds) {
  const std::string cmd = std::string(CUNET_CLI_PATH) + " train --desk --seed 1 --out " + out.string() +
                          " 2>" + (out / "train.log").string();
  fs::create_directories(out);
  const auto t0 = Clock::now();
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string text;
  char buf[4096];
  while (pipe && !std::feof(pipe)) {
    const std::size_t n = std::fread(buf, 1, sizeof buf, pipe);
    text.append(buf, n);
  }
  const int status = pipe ? pclose(pipe) : -1;
  seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (status != 0) return json{{"status", "error"}, {"raw", text}};
  return json::parse(text);
}

std::string losses_only(const fs::path& metrics) {
  std::ifstream in(metrics);
  std::string line, out;
  while (std::getline(in, line)) {
    json j = json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

void end_to_end() {
  const fs::path base = fs::temp_directory_path() / "cunet_acceptance_e2e";
  fs::remove_all(base);
  double s1 = 0.0, s2 = 0.0;
  const json a = run_train(base / "first", s1);
  const json b = run_train(base / "second", s2);
  if (a.value("status", "") != "ok" || b.value("status", "") != "ok") {
    report("phantom-learning", false, "training command failed: " + a.dump().substr(0, 300));
    return;
  }
  const fs::path ra = a.at("run_dir").get<std::string>(), rb = b.at("run_dir").get<std::string>();
  const json& res = a.at("result");
  const double dsc = res.at("heldout_mean_dsc").get<double>();
  const std::size_t epochs = res.at("epochs").get<std::size_t>();
  const bool same_log = losses_only(ra / "train/metrics.jsonl") == losses_only(rb / "train/metrics.jsonl");
  const bool same_params = byteio::read_file(ra / "train/best/params.cunetp") ==
                           byteio::read_file(rb / "train/best/params.cunetp") &&
                           byteio::read_file(ra / "train/last/params.cunetp") ==
                               byteio::read_file(rb / "train/last/params.cunetp");
  const bool same_eval = byteio::read_file(ra / "heldout_eval.json") == byteio::read_file(rb / "heldout_eval.json");
  const json heldout = res.at("heldout");
  const bool ok = dsc >= 0.70 && epochs <= 20 && s1 <= 900.0 && same_log && same_params && same_eval;
  report("phantom-learning", ok,
         fmt("held-out mean DSC %.4f (>=0.70; WT %.3f ", dsc, heldout.at("wt").get<double>()) +
             fmt("TC %.3f ET %.3f); ", heldout.at("tc").get<double>(), heldout.at("et").get<double>()) +
             fmt("%.0f epochs; %.0f s (<=900 s) on ", static_cast<double>(epochs), s1) +
             std::to_string(worker_count()) + " worker(s); reproducible: " +
             (same_log && same_params && same_eval ? "yes" : "no"));
  if (ok) fs::remove_all(base);
}

}  // namespace

int main(int argc, char** argv) {
  bool skip_e2e = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--skip-e2e") == 0) {
      skip_e2e = true;
    } else if (std::strcmp(argv[i], "--report") == 0 && i + 1 < argc) {
      report_copy = std::fopen(argv[++i], "w");
      if (!report_copy) {
        std::fprintf(stderr, "cannot write %s\n", argv[i]);
        return 2;
      }
    } else {
      std::fprintf(stderr, "usage: acceptance [--skip-e2e] [--report PATH]\n");
      return 2;
    }
  }
  gradient_suite();
  conv_oracle();
  loss_closed_forms();
  architecture_audit();
  postprocessing();
  metrics();
  schedule();
  five_fold();
  if (skip_e2e) emit("[SKIP] phantom-learning             requested with --skip-e2e");
  else end_to_end();
  emit(std::string(failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED") + ": " +
       std::to_string(failures) + " failure(s)");
  if (report_copy) std::fclose(report_copy);
  return failures ? 1 : 0;
}
