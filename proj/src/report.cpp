#include "mopa/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace mopa {

namespace fs = std::filesystem;
using nlohmann::json;

std::string json_hash(const json& j) {
  const std::string s = j.dump();
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx",
                static_cast<unsigned long long>(fnv1a64(s.data(), s.size())));
  return std::string(out);
}

namespace {

void flatten(const json& j, const std::string& prefix, std::ofstream& csv) {
  if (j.is_object()) {
    for (const auto& [key, value] : j.items()) {
      flatten(value, prefix.empty() ? key : prefix + "." + key, csv);
    }
  } else if (j.is_array()) {
    int i = 0;
    for (const auto& value : j) flatten(value, prefix + "[" + std::to_string(i++) + "]", csv);
  } else {
    csv << prefix << "," << j.dump() << "\n";
  }
}

}  // namespace

void write_report(const std::string& out_dir, const Report& r) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail("cannot create output directory '" + out_dir + "'");

  json j;
  j["command"] = r.command;
  j["config"] = r.config;
  j["config_hash"] = json_hash(r.config);
  if (!r.checkpoint_hash.empty()) j["checkpoint_hash"] = r.checkpoint_hash;
  j["metrics"] = r.metrics;

  std::ofstream out(fs::path(out_dir) / "report.json");
  if (!out) fail("cannot write report.json in '" + out_dir + "'");
  out << j.dump(2) << "\n";

  std::ofstream csv(fs::path(out_dir) / "report.csv");
  if (!csv) fail("cannot write report.csv in '" + out_dir + "'");
  csv << "metric,value\n";
  flatten(r.metrics, "", csv);
}

void write_effective_config(const std::string& out_dir, const json& config) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail("cannot create output directory '" + out_dir + "'");
  std::ofstream out(fs::path(out_dir) / "effective_config.json");
  if (!out) fail("cannot write effective_config.json in '" + out_dir + "'");
  out << config.dump(2) << "\n";
}

}  // namespace mopa
