#include "kv2ct/report.hpp"

#include <fstream>

#include "json.hpp"

namespace kv2ct {

std::string run_report_json(const RunReport& rep) {
    nlohmann::json j;
    j["config_hash"] = rep.config_hash;
    j["config"] = nlohmann::json::parse(rep.config_json);
    j["metrics"] = nlohmann::json::parse(metric_report_json(rep.metrics));
    j["artifacts"] = rep.artifacts;
    j["extras"] = rep.extras;
    return j.dump(2) + "\n";
}

void write_run_report(const RunReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << run_report_json(rep);
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace kv2ct
