#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flsim/engine.hpp"
#include "flsim/error.hpp"

namespace flsim {

/// Malformed JSON input; carries the 1-based line and column of the failure.
struct JsonParseError : Error {
    std::size_t line, column;

    JsonParseError(const std::string& what, std::size_t line_, std::size_t column_)
        : Error(what + " (line " + std::to_string(line_) + ", column " +
                std::to_string(column_) + ")"),
          line(line_),
          column(column_) {}
};

namespace detail {

inline std::pair<std::size_t, std::size_t> line_column_of(const std::string& text,
                                                          std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline nlohmann::json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        auto [line, col] = line_column_of(text, e.byte > 0 ? e.byte - 1 : 0);
        throw JsonParseError(what + ": " + e.what(), line, col);
    }
}

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& known,
                                const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError(path + it.key() + ": unknown field");
        }
    }
}

template <typename V>
V get_field(const nlohmann::json& obj, const std::string& key, const std::string& path) {
    try {
        return obj.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(path + key + ": missing or has the wrong type");
    }
}

template <typename V>
V get_field_or(const nlohmann::json& obj, const std::string& key, const std::string& path,
               V fallback) {
    if (!obj.contains(key)) return fallback;
    return get_field<V>(obj, key, path);
}

inline SkewParams parse_skew(const nlohmann::json& j, const std::string& path,
                             const SkewParams& fallback) {
    reject_unknown_keys(j, {"bg_offset", "blob_radius", "speed_scale"}, path);
    SkewParams s;
    s.bg_offset = get_field_or<double>(j, "bg_offset", path, fallback.bg_offset);
    s.blob_radius = get_field_or<std::size_t>(j, "blob_radius", path, fallback.blob_radius);
    s.speed_scale = get_field_or<double>(j, "speed_scale", path, fallback.speed_scale);
    return s;
}

inline ClientSpec parse_client_spec(const nlohmann::json& j, const std::string& path) {
    reject_unknown_keys(j, {"client_id", "fight", "nonfight", "skew"}, path);
    ClientSpec spec;
    spec.client_id = get_field<int>(j, "client_id", path);
    spec.fight_count = get_field<std::size_t>(j, "fight", path);
    spec.nonfight_count = get_field<std::size_t>(j, "nonfight", path);
    spec.skew = default_skew(spec.client_id);
    if (j.contains("skew")) {
        spec.skew = parse_skew(j.at("skew"), path + "skew.", spec.skew);
    }
    return spec;
}

}  // namespace detail

/// Parses an experiment config from JSON text. Structural JSON problems throw
/// JsonParseError; semantic problems throw ConfigError naming the field.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
    nlohmann::json j = detail::parse_json_text(text, "config");
    if (!j.is_object()) throw ConfigError("config root must be an object");
    detail::reject_unknown_keys(
        j,
        {"seed", "strategy", "arch", "topology", "scale", "rounds", "hyper", "test_fraction",
         "eval_personalize_steps", "element_type"},
        "");

    ExperimentConfig cfg;
    cfg.seed = detail::get_field_or<std::uint64_t>(j, "seed", "", cfg.seed);

    const std::string strat = detail::get_field<std::string>(j, "strategy", "");
    if (auto s = parse_strategy(strat)) {
        cfg.strategy = *s;
    } else {
        throw ConfigError("strategy: unknown value '" + strat + "'");
    }
    const std::string arch = detail::get_field<std::string>(j, "arch", "");
    if (auto a = parse_arch(arch)) {
        cfg.arch = *a;
    } else {
        throw ConfigError("arch: unknown value '" + arch + "'");
    }

    if (!j.contains("topology")) throw ConfigError("topology: missing");
    const auto& topo = j.at("topology");
    if (topo.is_string()) {
        if (auto f = parse_fixture_name(topo.get<std::string>())) {
            cfg.topology.fixture = *f;
        } else {
            throw ConfigError("topology: unknown fixture '" + topo.get<std::string>() + "'");
        }
    } else if (topo.is_object()) {
        detail::reject_unknown_keys(topo, {"clients"}, "topology.");
        if (!topo.contains("clients") || !topo.at("clients").is_array() ||
            topo.at("clients").empty()) {
            throw ConfigError("topology.clients: must be a non-empty array");
        }
        for (const auto& jc : topo.at("clients")) {
            cfg.topology.explicit_clients.push_back(
                detail::parse_client_spec(jc, "topology.clients."));
        }
    } else {
        throw ConfigError("topology: must be a fixture name or an object with clients");
    }

    cfg.scale = detail::get_field_or<double>(j, "scale", "", cfg.scale);
    cfg.rounds = detail::get_field_or<std::size_t>(j, "rounds", "", cfg.rounds);
    cfg.test_fraction = detail::get_field_or<double>(j, "test_fraction", "", cfg.test_fraction);
    cfg.eval_personalize_steps = detail::get_field_or<std::size_t>(
        j, "eval_personalize_steps", "", cfg.eval_personalize_steps);

    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        detail::reject_unknown_keys(
            h, {"lr_local", "lr_meta", "local_epochs", "batch_size", "hessian_mode"}, "hyper.");
        cfg.hyper.lr_local = detail::get_field_or<double>(h, "lr_local", "hyper.",
                                                          cfg.hyper.lr_local);
        cfg.hyper.lr_meta = detail::get_field_or<double>(h, "lr_meta", "hyper.",
                                                         cfg.hyper.lr_meta);
        cfg.hyper.local_epochs = detail::get_field_or<std::size_t>(h, "local_epochs", "hyper.",
                                                                   cfg.hyper.local_epochs);
        cfg.hyper.batch_size = detail::get_field_or<std::size_t>(h, "batch_size", "hyper.",
                                                                 cfg.hyper.batch_size);
        const std::string mode = detail::get_field_or<std::string>(h, "hessian_mode", "hyper.",
                                                                   "first_order");
        if (mode == "full_hvp") {
            cfg.hyper.hessian_mode = HessianMode::full_hvp;
        } else if (mode == "first_order") {
            cfg.hyper.hessian_mode = HessianMode::first_order;
        } else {
            throw ConfigError("hyper.hessian_mode: unknown value '" + mode + "'");
        }
    }

    if (j.contains("element_type")) {
        const std::string et = detail::get_field<std::string>(j, "element_type", "");
        if (auto t = parse_element_type(et)) {
            cfg.element_type = *t;
        } else {
            throw ConfigError("element_type: unknown value '" + et + "'");
        }
    }

    validate_config(cfg);
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str());
}

/// The three bundled experiment configurations: one per topology fixture,
/// trained with fedper on the full-size model at scale 1.
inline ExperimentConfig make_preset(FixtureName name) {
    ExperimentConfig cfg;
    cfg.seed = 1;
    cfg.strategy = Strategy::fedper;
    cfg.arch = Arch::diffgated53;
    cfg.topology.fixture = name;
    cfg.scale = 1.0;
    return cfg;
}

/// Input of the dataset generation command: dims, a seed, and a client list.
struct MakeDataSpec {
    ChunkDims dims;
    std::uint64_t seed = 1;
    ElementType element_type = ElementType::f32;
    std::vector<ClientSpec> clients;
};

inline MakeDataSpec parse_make_data_spec(const std::string& text) {
    nlohmann::json j = detail::parse_json_text(text, "spec");
    if (!j.is_object()) throw ConfigError("spec root must be an object");
    detail::reject_unknown_keys(j, {"dims", "seed", "element_type", "clients"}, "");
    MakeDataSpec spec;
    if (j.contains("dims")) {
        const auto& d = j.at("dims");
        if (!d.is_array() || d.size() != 3) {
            throw ConfigError("dims: must be [frames, height, width]");
        }
        spec.dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
    }
    spec.seed = detail::get_field_or<std::uint64_t>(j, "seed", "", spec.seed);
    if (j.contains("element_type")) {
        const std::string et = detail::get_field<std::string>(j, "element_type", "");
        if (auto t = parse_element_type(et)) {
            spec.element_type = *t;
        } else {
            throw ConfigError("element_type: unknown value '" + et + "'");
        }
    }
    if (!j.contains("clients") || !j.at("clients").is_array() || j.at("clients").empty()) {
        throw ConfigError("clients: must be a non-empty array");
    }
    std::set<int> ids;
    for (const auto& jc : j.at("clients")) {
        auto c = detail::parse_client_spec(jc, "clients.");
        if (!ids.insert(c.client_id).second) {
            throw ConfigError("clients: duplicate client_id " + std::to_string(c.client_id));
        }
        spec.clients.push_back(std::move(c));
    }
    return spec;
}

}  // namespace flsim
