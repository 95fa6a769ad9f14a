#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include <nlohmann/json.hpp>

#include "worldtrack/bench.hpp"

namespace worldtrack {

/// 64-bit FNV-1a, used to fingerprint the evaluation configuration.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::ordered_json subset_json(const SubsetMetrics& m) {
  return {{"apd_percent", m.apd_percent},
          {"epe_meters", m.epe_meters},
          {"per_threshold", m.per_threshold},
          {"num_pairs", m.num_pairs}};
}

/// `config` is embedded verbatim and fingerprinted from its compact dump.
inline nlohmann::ordered_json report_json(const MetricReport& r, const nlohmann::ordered_json& config) {
  nlohmann::ordered_json j;
  j["config"] = config;
  j["config_fingerprint"] = hex64(fnv1a64(config.dump()));
  nlohmann::ordered_json align;
  align["mode"] = to_string(r.alignment.mode);
  align["scale"] = r.alignment.scale;
  if (r.alignment.mode == AlignmentMode::Sim3) {
    nlohmann::ordered_json rot = nlohmann::ordered_json::array();
    for (int a = 0; a < 3; ++a) rot.push_back({r.alignment.rotation(a, 0), r.alignment.rotation(a, 1), r.alignment.rotation(a, 2)});
    align["rotation"] = rot;
    align["translation"] = {r.alignment.translation.x(), r.alignment.translation.y(), r.alignment.translation.z()};
  }
  j["alignment"] = align;
  j["median_statistic"] = r.median_statistic;
  j["thresholds"] = r.thresholds.deltas;
  j["num_points"] = r.num_points;
  j["num_frames"] = r.num_frames;
  j["all"] = subset_json(r.all);
  j["dynamic"] = r.dynamic ? subset_json(*r.dynamic) : nlohmann::ordered_json(nullptr);
  return j;
}

/// One row per subset: subset, apd_percent, epe_meters, num_pairs, then one column per threshold.
inline std::string report_csv(const MetricReport& r) {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string out = "subset,apd_percent,epe_meters,num_pairs";
  for (double d : r.thresholds.deltas) out += ",frac_lt_" + num(d);
  out += "\n";
  auto row = [&](const char* name, const SubsetMetrics& m) {
    out += std::string(name) + "," + num(m.apd_percent) + "," + num(m.epe_meters) + "," + std::to_string(m.num_pairs);
    for (double f : m.per_threshold) out += "," + num(f);
    out += "\n";
  };
  row("all", r.all);
  if (r.dynamic) row("dynamic", *r.dynamic);
  return out;
}

}  // namespace worldtrack
