#pragma once

#include "mopa/common.hpp"

#include "json.hpp"

#include <string>

namespace mopa {

// Self-describing evaluation report: metrics plus the effective config and
// content hashes, written as report.json and a flat report.csv.
struct Report {
  std::string command;
  nlohmann::json config;
  std::string checkpoint_hash;  // empty when no checkpoint involved
  nlohmann::json metrics;
};

std::string json_hash(const nlohmann::json& j);

void write_report(const std::string& out_dir, const Report& r);

// Echoes the effective config into the output directory for provenance.
void write_effective_config(const std::string& out_dir, const nlohmann::json& config);

}  // namespace mopa
