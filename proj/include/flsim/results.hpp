#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flsim/engine.hpp"
#include "flsim/error.hpp"

namespace flsim {

/// 17 significant digits: enough to round-trip any double exactly.
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string json_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size() + 2);
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default:
                if (static_cast<unsigned char>(c) < 0x20) {
                    char buf[8];
                    std::snprintf(buf, sizeof(buf), "\\u%04x", c);
                    out += buf;
                } else {
                    out += c;
                }
        }
    }
    return out;
}

/// One rounds.jsonl line. Key order is fixed: round, global_loss, global_acc,
/// per_client, wire_bytes, wire_tensor_names.
inline std::string round_report_json_line(const RoundReport& r) {
    std::ostringstream os;
    os << "{\"round\":" << r.round;
    os << ",\"global_loss\":" << format_double(r.global_loss);
    os << ",\"global_acc\":" << format_double(r.global_acc);
    os << ",\"per_client\":[";
    for (std::size_t i = 0; i < r.per_client.size(); ++i) {
        const auto& pc = r.per_client[i];
        if (i) os << ",";
        os << "{\"client_id\":" << pc.client_id;
        os << ",\"test_loss\":" << format_double(pc.test_loss);
        os << ",\"test_acc\":" << format_double(pc.test_acc);
        os << ",\"n_test\":" << pc.n_test << "}";
    }
    os << "],\"wire_bytes\":" << r.wire_bytes;
    os << ",\"wire_tensor_names\":[";
    for (std::size_t i = 0; i < r.wire_tensor_names.size(); ++i) {
        if (i) os << ",";
        os << "\"" << json_escape(r.wire_tensor_names[i]) << "\"";
    }
    os << "]}";
    return os.str();
}

inline void write_rounds_jsonl(const std::filesystem::path& path,
                               const std::vector<RoundReport>& reports) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    for (const auto& r : reports) out << round_report_json_line(r) << "\n";
}

inline std::vector<RoundReport> read_rounds_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::vector<RoundReport> reports;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
            RoundReport r;
            r.round = j.at("round").get<std::size_t>();
            r.global_loss = j.at("global_loss").get<double>();
            r.global_acc = j.at("global_acc").get<double>();
            for (const auto& pc : j.at("per_client")) {
                r.per_client.push_back({pc.at("client_id").get<int>(),
                                        pc.at("test_loss").get<double>(),
                                        pc.at("test_acc").get<double>(),
                                        pc.at("n_test").get<std::size_t>()});
            }
            r.wire_bytes = j.at("wire_bytes").get<std::size_t>();
            for (const auto& name : j.at("wire_tensor_names")) {
                r.wire_tensor_names.push_back(name.get<std::string>());
            }
            reports.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptFileError(path.string() + " line " + std::to_string(lineno) + ": " +
                                       e.what(),
                                   lineno);
        }
    }
    return reports;
}

inline std::string topology_label(const TopologySpec& topo) {
    return topo.fixture ? fixture_name_str(*topo.fixture) : "custom";
}

/// summary.json: the final report, a config echo, and the wall time.
inline void write_summary_json(const std::filesystem::path& path, const ExperimentConfig& cfg,
                               const RoundReport& final_report, double wall_seconds) {
    std::ostringstream os;
    os << "{\"experiment\":\"" << json_escape(topology_label(cfg.topology)) << "\"";
    os << ",\"clients\":" << final_report.per_client.size();
    os << ",\"final_round\":" << round_report_json_line(final_report);
    os << ",\"config\":{";
    os << "\"seed\":" << cfg.seed;
    os << ",\"strategy\":\"" << strategy_name(cfg.strategy) << "\"";
    os << ",\"arch\":\"" << arch_name(cfg.arch) << "\"";
    os << ",\"topology\":\"" << json_escape(topology_label(cfg.topology)) << "\"";
    os << ",\"scale\":" << format_double(cfg.scale);
    os << ",\"rounds\":" << cfg.rounds;
    os << ",\"hyper\":{";
    os << "\"lr_local\":" << format_double(cfg.hyper.lr_local);
    os << ",\"lr_meta\":" << format_double(cfg.hyper.lr_meta);
    os << ",\"local_epochs\":" << cfg.hyper.local_epochs;
    os << ",\"batch_size\":" << cfg.hyper.batch_size;
    os << ",\"hessian_mode\":\""
       << (cfg.hyper.hessian_mode == HessianMode::full_hvp ? "full_hvp" : "first_order") << "\"";
    os << "},\"test_fraction\":" << format_double(cfg.test_fraction);
    os << ",\"eval_personalize_steps\":" << cfg.eval_personalize_steps;
    os << ",\"element_type\":\"" << element_type_name(cfg.element_type) << "\"";
    os << "},\"wall_seconds\":" << format_double(wall_seconds);
    os << "}";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << os.str() << "\n";
}

}  // namespace flsim
