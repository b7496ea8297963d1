// report.hpp - final run report assembly (config echo + metrics + artifacts).
#pragma once

#include <map>
#include <string>

#include "kv2ct/eval.hpp"

namespace kv2ct {

struct RunReport {
    std::string config_hash;
    std::string config_json;  // canonical config echo (JSON text)
    MetricReport metrics;
    std::map<std::string, std::string> artifacts;  // logical name -> relative path
    std::map<std::string, double> extras;          // scalar diagnostics (losses, region stats)
};

// Deterministic serialization: sorted keys, no timestamps; identical inputs
// produce byte-identical files.
std::string run_report_json(const RunReport& rep);
void write_run_report(const RunReport& rep, const std::string& path);

}  // namespace kv2ct
