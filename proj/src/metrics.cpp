#include "cunet/metrics.hpp"

#include <string>

#include "cunet/error.hpp"

namespace cunet {

namespace {

void require_same_size(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw ContractError("mask size mismatch: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
}

double ratio_or_one(double num, double den) { return den == 0.0 ? 1.0 : num / den; }

}  // namespace

Confusion confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  require_same_size(pred, truth);
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  const Confusion c = confusion(pred, truth);
  return ratio_or_one(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn);
}

double sensitivity(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  const Confusion c = confusion(pred, truth);
  return ratio_or_one(c.tp, c.tp + c.fn);
}

double specificity(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  const Confusion c = confusion(pred, truth);
  return ratio_or_one(c.tn, c.tn + c.fp);
}

RegionMasks compose_regions(std::span<const std::uint8_t> labels) {
  RegionMasks m;
  m.wt.resize(labels.size());
  m.tc.resize(labels.size());
  m.et.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i]) {
      case 0: break;
      case 1: m.wt[i] = m.tc[i] = 1; break;
      case 2: m.wt[i] = 1; break;
      case 4: m.wt[i] = m.tc[i] = m.et[i] = 1; break;
      default:
        throw ContractError("unexpected label value " + std::to_string(labels[i]) +
                            " at voxel " + std::to_string(i));
    }
  }
  return m;
}

namespace {

RegionScores score_region(const Mask& pred, const Mask& truth, const std::string& region,
                          std::vector<std::string>& flags) {
  RegionScores s;
  s.counts = confusion(pred, truth);
  const Confusion& c = s.counts;
  const double dsc_den = 2.0 * c.tp + c.fp + c.fn;
  if (dsc_den == 0.0) flags.push_back(region + ".dsc:empty");
  if (c.tp + c.fn == 0) flags.push_back(region + ".sensitivity:empty");
  if (c.tn + c.fp == 0) flags.push_back(region + ".specificity:empty");
  s.dsc = ratio_or_one(2.0 * c.tp, dsc_den);
  s.sensitivity = ratio_or_one(c.tp, c.tp + c.fn);
  s.specificity = ratio_or_one(c.tn, c.tn + c.fp);
  return s;
}

}  // namespace

EvalReport evaluate(std::span<const std::uint8_t> pred_labels,
                    std::span<const std::uint8_t> truth_labels) {
  require_same_size(pred_labels, truth_labels);
  const RegionMasks p = compose_regions(pred_labels);
  const RegionMasks t = compose_regions(truth_labels);
  EvalReport r;
  r.wt = score_region(p.wt, t.wt, "wt", r.flags);
  r.tc = score_region(p.tc, t.tc, "tc", r.flags);
  r.et = score_region(p.et, t.et, "et", r.flags);
  r.mean_dsc = (r.wt.dsc + r.tc.dsc + r.et.dsc) / 3.0;
  return r;
}

EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("average_reports: no reports");
  EvalReport avg;
  const double n = static_cast<double>(reports.size());
  auto mean_of = [&](auto get) {
    double acc = 0.0;
    for (const auto& r : reports) acc += get(r);
    return acc / n;
  };
  RegionScores EvalReport::*regions[3] = {&EvalReport::wt, &EvalReport::tc, &EvalReport::et};
  for (auto region : regions) {
    RegionScores& dst = avg.*region;
    dst.dsc = mean_of([&](const EvalReport& r) { return (r.*region).dsc; });
    dst.sensitivity = mean_of([&](const EvalReport& r) { return (r.*region).sensitivity; });
    dst.specificity = mean_of([&](const EvalReport& r) { return (r.*region).specificity; });
    for (const auto& r : reports) {
      const Confusion& c = (r.*region).counts;
      dst.counts.tp += c.tp;
      dst.counts.fp += c.fp;
      dst.counts.fn += c.fn;
      dst.counts.tn += c.tn;
    }
  }
  avg.mean_dsc = mean_of([](const EvalReport& r) { return r.mean_dsc; });
  for (std::size_t i = 0; i < reports.size(); ++i)
    for (const auto& f : reports[i].flags) avg.flags.push_back("case" + std::to_string(i) + "." + f);
  avg.cases = reports.size();
  avg.fold = reports.front().fold;
  avg.checkpoint = reports.front().checkpoint;
  avg.postprocessed = reports.front().postprocessed;
  return avg;
}

nlohmann::json to_json(const EvalReport& report) {
  auto region = [](const RegionScores& s) {
    return nlohmann::json{{"dsc", s.dsc},
                          {"sensitivity", s.sensitivity},
                          {"specificity", s.specificity},
                          {"tp", s.counts.tp},
                          {"fp", s.counts.fp},
                          {"fn", s.counts.fn},
                          {"tn", s.counts.tn}};
  };
  nlohmann::json j;
  j["wt"] = region(report.wt);
  j["tc"] = region(report.tc);
  j["et"] = region(report.et);
  j["mean_dsc"] = report.mean_dsc;
  j["flags"] = report.flags;
  j["cases"] = report.cases;
  j["provenance"] = {{"fold", report.fold ? nlohmann::json(*report.fold) : nlohmann::json(nullptr)},
                     {"checkpoint", report.checkpoint},
                     {"postprocessed", report.postprocessed}};
  return j;
}

}  // namespace cunet
