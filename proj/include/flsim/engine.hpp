#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "flsim/data.hpp"
#include "flsim/error.hpp"
#include "flsim/model.hpp"
#include "flsim/nn.hpp"
#include "flsim/rng.hpp"
#include "flsim/serialize.hpp"
#include "flsim/strategies.hpp"

namespace flsim {

enum class Strategy { fedavg, fedper, perfedavg, fedmetaper };

inline std::optional<Strategy> parse_strategy(std::string_view s) {
    if (s == "fedavg") return Strategy::fedavg;
    if (s == "fedper") return Strategy::fedper;
    if (s == "perfedavg") return Strategy::perfedavg;
    if (s == "fedmetaper") return Strategy::fedmetaper;
    return std::nullopt;
}

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedper: return "fedper";
        case Strategy::perfedavg: return "perfedavg";
        case Strategy::fedmetaper: return "fedmetaper";
    }
    return "?";
}

inline bool strategy_keeps_personal_state(Strategy s) {
    return s == Strategy::fedper || s == Strategy::fedmetaper;
}

enum class ElementType { f32, f64 };

inline std::optional<ElementType> parse_element_type(std::string_view s) {
    if (s == "f32") return ElementType::f32;
    if (s == "f64") return ElementType::f64;
    return std::nullopt;
}

inline const char* element_type_name(ElementType t) {
    return t == ElementType::f32 ? "f32" : "f64";
}

/// Either a named fixture or an explicit client list.
struct TopologySpec {
    std::optional<FixtureName> fixture;
    std::vector<ClientSpec> explicit_clients;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    Strategy strategy = Strategy::fedavg;
    Arch arch = Arch::mini;
    TopologySpec topology;
    double scale = 1.0;
    std::size_t rounds = 20;
    Hyper hyper;
    double test_fraction = 0.2;
    std::size_t eval_personalize_steps = 3;
    ElementType element_type = ElementType::f32;
};

/// Validates everything that does not require the datasets; throws
/// ConfigError whose message starts with the offending field path.
inline void validate_config(const ExperimentConfig& cfg) {
    if (cfg.rounds < 1) throw ConfigError("rounds: must be >= 1");
    if (!(cfg.test_fraction > 0.0) || !(cfg.test_fraction < 1.0)) {
        throw ConfigError("test_fraction: must be in (0, 1)");
    }
    if (!(cfg.scale > 0.0) || cfg.scale > 1.0) throw ConfigError("scale: must be in (0, 1]");
    if (cfg.hyper.lr_local < 0) throw ConfigError("hyper.lr_local: must be non-negative");
    if (cfg.hyper.lr_meta < 0) throw ConfigError("hyper.lr_meta: must be non-negative");
    if (cfg.hyper.local_epochs < 1) throw ConfigError("hyper.local_epochs: must be >= 1");
    if (cfg.hyper.batch_size < 1) throw ConfigError("hyper.batch_size: must be >= 1");
    if (!cfg.topology.fixture && cfg.topology.explicit_clients.empty()) {
        throw ConfigError("topology: must name a fixture or list clients");
    }
    if (!cfg.topology.fixture && cfg.scale != 1.0) {
        throw ConfigError("scale: only applies to fixture topologies");
    }
    if (!cfg.topology.fixture) {
        std::set<int> ids;
        for (const auto& c : cfg.topology.explicit_clients) {
            if (c.client_id < 1) throw ConfigError("topology.clients: client_id must be >= 1");
            if (!ids.insert(c.client_id).second) {
                throw ConfigError("topology.clients: duplicate client_id " +
                                  std::to_string(c.client_id));
            }
            if (c.fight_count + c.nonfight_count == 0) {
                throw ConfigError("topology.clients: client " + std::to_string(c.client_id) +
                                  " has no samples");
            }
        }
    }
}

struct PerClientEval {
    int client_id = 0;
    double test_loss = 0;
    double test_acc = 0;
    std::size_t n_test = 0;
};

struct RoundReport {
    std::size_t round = 0;
    double global_loss = 0;
    double global_acc = 0;
    std::vector<PerClientEval> per_client;
    std::size_t wire_bytes = 0;
    std::vector<std::string> wire_tensor_names;  // sorted, unique
};

template <typename T>
struct ClientState {
    int client_id = 0;
    std::optional<ParamSet<T>> personal;  // present for fedper/fedmetaper
    ChunkDataset<T> train;
    ChunkDataset<T> test;
    std::uint64_t rng_seed = 0;
};

template <typename T>
struct ExperimentState {
    ExperimentConfig config;
    SplitModel<T> prototype;  // layer stack + shapes; current params irrelevant
    ParamSet<T> server;       // full (fedavg/perfedavg) or base (fedper/fedmetaper)
    std::vector<ClientState<T>> clients;
    std::size_t next_round = 1;  // 1-based
};

/// Accuracy (argmax match rate, ties resolve to class 0) and mean loss of a
/// logits block.
template <typename T>
std::pair<double, double> accuracy_and_loss(const Tensor<T>& logits,
                                            const std::vector<int>& labels) {
    const double loss = loss_softmax_ce(logits, labels);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const T* z = logits.data() + i * kNumClasses;
        int pred = 0;
        for (int j = 1; j < kNumClasses; ++j) {
            if (z[j] > z[pred]) pred = j;
        }
        if (pred == labels[i]) ++hits;
    }
    return {static_cast<double>(hits) / static_cast<double>(labels.size()), loss};
}

namespace detail {

inline constexpr std::size_t kEvalChunk = 64;

template <typename T>
std::pair<double, double> eval_on_dataset(const std::vector<LayerSpec>& specs,
                                          const std::vector<Tensor<T>>& params,
                                          const ChunkDataset<T>& ds) {
    const std::size_t n = ds.size();
    if (n == 0) throw ShapeError("cannot evaluate on an empty dataset");
    std::vector<std::uint32_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i);
    double loss_sum = 0;
    std::size_t hits = 0;
    for (std::size_t at = 0; at < n; at += kEvalChunk) {
        const std::size_t count = std::min(kEvalChunk, n - at);
        Batch<T> batch = make_batch(ds, idx.data() + at, count);
        auto cache = forward(params, specs, batch);
        auto [acc, loss] = accuracy_and_loss(cache.logits(), batch.labels);
        loss_sum += loss * static_cast<double>(count);
        hits += static_cast<std::size_t>(acc * static_cast<double>(count) + 0.5);
    }
    return {static_cast<double>(hits) / static_cast<double>(n), loss_sum / static_cast<double>(n)};
}

}  // namespace detail

/// Per-client test metrics under the given strategy's evaluation rule.
template <typename T>
std::vector<PerClientEval> evaluate(const SplitModel<T>& prototype, const ParamSet<T>& server,
                                    const std::vector<ClientState<T>>& clients, Strategy strategy,
                                    const Hyper& hyper, std::size_t eval_personalize_steps) {
    std::vector<PerClientEval> out;
    out.reserve(clients.size());
    for (const auto& client : clients) {
        SplitModel<T> m = prototype;
        switch (strategy) {
            case Strategy::fedavg:
                load_full_inplace(m, server);
                break;
            case Strategy::perfedavg:
                load_full_inplace(m, server);
                m = personalize(std::move(m), client.train, eval_personalize_steps,
                                hyper.lr_local, UpdateScope::all_params);
                break;
            case Strategy::fedper:
            case Strategy::fedmetaper:
                load_base_inplace(m, server);
                if (!client.personal) {
                    throw ContractError("client " + std::to_string(client.client_id) +
                                        " has no personal state");
                }
                load_personal_inplace(m, *client.personal);
                break;
        }
        auto [acc, loss] = detail::eval_on_dataset(m.specs, m.params, client.test);
        out.push_back({client.client_id, loss, acc, client.test.size()});
    }
    return out;
}

namespace detail {

template <typename T>
struct ClientRoundOutput {
    std::optional<ClientUpdate<T>> update;
    std::optional<ParamSet<T>> personal_out;
    std::string skip_reason;
};

template <typename T>
ClientRoundOutput<T> run_client(const ExperimentState<T>& st, const ClientState<T>& client,
                                std::size_t round_idx) {
    const std::uint64_t round_seed = derive_seed(client.rng_seed, "shuffle", round_idx);
    ClientRoundOutput<T> out;
    switch (st.config.strategy) {
        case Strategy::fedavg: {
            SplitModel<T> m = st.prototype;
            load_full_inplace(m, st.server);
            auto r = client_update_fedavg(m, client.train, st.config.hyper, round_seed,
                                          client.client_id);
            out.update = std::move(r.update);
            out.skip_reason = std::move(r.skip_reason);
            break;
        }
        case Strategy::perfedavg: {
            SplitModel<T> m = st.prototype;
            load_full_inplace(m, st.server);
            auto r = client_update_perfedavg(m, client.train, st.config.hyper, round_seed,
                                             client.client_id);
            out.update = std::move(r.update);
            out.skip_reason = std::move(r.skip_reason);
            break;
        }
        case Strategy::fedper: {
            SplitModel<T> m = st.prototype;
            load_personal_inplace(m, *client.personal);
            auto r = client_update_fedper(m, st.server, client.train, st.config.hyper,
                                          round_seed, client.client_id);
            out.update = std::move(r.update);
            out.personal_out = std::move(r.personal);
            out.skip_reason = std::move(r.skip_reason);
            break;
        }
        case Strategy::fedmetaper: {
            SplitModel<T> m = st.prototype;
            load_personal_inplace(m, *client.personal);
            auto r = client_update_fedmetaper(m, st.server, client.train, st.config.hyper,
                                              round_seed, client.client_id);
            out.update = std::move(r.update);
            out.personal_out = std::move(r.personal);
            out.skip_reason = std::move(r.skip_reason);
            break;
        }
    }
    return out;
}

}  // namespace detail

/// One distribution / local update / aggregation / evaluation cycle. Client
/// updates may run on up to `jobs` threads; results are identical for any job
/// count because updates are pure and aggregation consumes them in ascending
/// client_id order.
template <typename T>
RoundReport run_round(ExperimentState<T>& st, std::size_t jobs = 1) {
    const std::size_t round_idx = st.next_round;
    const std::size_t n_clients = st.clients.size();

    std::vector<detail::ClientRoundOutput<T>> outputs(n_clients);
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n_clients));
    if (workers == 1) {
        for (std::size_t i = 0; i < n_clients; ++i) {
            outputs[i] = detail::run_client(st, st.clients[i], round_idx);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= n_clients) return;
                    outputs[i] = detail::run_client(st, st.clients[i], round_idx);
                }
            });
        }
        for (auto& t : pool) t.join();
    }

    // Wire log: the server set goes down to every client; each produced
    // payload comes back up.
    std::set<std::string> wire_names;
    std::size_t wire_bytes = serialized_size(st.server) * n_clients;
    for (const auto& e : st.server.entries) wire_names.insert(e.name);

    std::vector<ClientUpdate<T>> updates;
    for (std::size_t i = 0; i < n_clients; ++i) {
        auto& out = outputs[i];
        if (out.personal_out) st.clients[i].personal = std::move(out.personal_out);
        if (!out.update) {
            std::cerr << "round " << round_idx << ": client " << st.clients[i].client_id
                      << " skipped: " << out.skip_reason << "\n";
            continue;
        }
        wire_bytes += serialized_size(out.update->payload);
        for (const auto& e : out.update->payload.entries) wire_names.insert(e.name);
        updates.push_back(std::move(*out.update));
    }
    if (updates.empty()) {
        throw ProtocolError("round " + std::to_string(round_idx) + ": all clients skipped");
    }

    if (strategy_keeps_personal_state(st.config.strategy)) {
        st.server = server_round_fedper(st.server, updates);
    } else {
        st.server = aggregate_weighted(updates);
    }

    RoundReport report;
    report.round = round_idx;
    report.per_client = evaluate(st.prototype, st.server, st.clients, st.config.strategy,
                                 st.config.hyper, st.config.eval_personalize_steps);
    double acc_sum = 0, loss_sum = 0;
    std::size_t n_test = 0;
    for (const auto& pc : report.per_client) {
        acc_sum += pc.test_acc * static_cast<double>(pc.n_test);
        loss_sum += pc.test_loss * static_cast<double>(pc.n_test);
        n_test += pc.n_test;
    }
    report.global_acc = acc_sum / static_cast<double>(n_test);
    report.global_loss = loss_sum / static_cast<double>(n_test);
    report.wire_bytes = wire_bytes;
    report.wire_tensor_names.assign(wire_names.begin(), wire_names.end());

    st.next_round = round_idx + 1;
    return report;
}

/// Builds datasets, splits, the model, and the initial server/client state
/// from the config's derived seed streams.
template <typename T>
ExperimentState<T> init_experiment(const ExperimentConfig& cfg) {
    validate_config(cfg);
    ExperimentState<T> st;
    st.config = cfg;
    st.prototype = build_model<T>(cfg.arch, derive_seed(cfg.seed, "init", 0));
    const ChunkDims dims{st.prototype.input_dims[0], st.prototype.input_dims[1],
                         st.prototype.input_dims[2]};

    std::vector<ChunkDataset<T>> datasets;
    std::vector<int> client_ids;
    if (cfg.topology.fixture) {
        datasets = build_topology<T>(fixture(*cfg.topology.fixture), cfg.scale, dims, cfg.seed);
        for (std::size_t i = 0; i < datasets.size(); ++i) {
            client_ids.push_back(static_cast<int>(i) + 1);
        }
    } else {
        for (const auto& spec : cfg.topology.explicit_clients) {
            datasets.push_back(generate_client_data<T>(
                spec, dims, derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(spec.client_id))));
            client_ids.push_back(spec.client_id);
        }
    }

    std::size_t min_train = 0;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        const int id = client_ids[i];
        auto [train, test] = train_test_split(datasets[i], cfg.test_fraction,
                                              derive_seed(cfg.seed, "split",
                                                          static_cast<std::uint64_t>(id)));
        ClientState<T> client;
        client.client_id = id;
        client.train = std::move(train);
        client.test = std::move(test);
        client.rng_seed = derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(id));
        if (strategy_keeps_personal_state(cfg.strategy)) {
            auto personal_init =
                build_model<T>(cfg.arch, derive_seed(cfg.seed, "init",
                                                     static_cast<std::uint64_t>(id)));
            client.personal = split_params(personal_init).second;
        }
        min_train = min_train == 0 ? client.train.size()
                                   : std::min(min_train, client.train.size());
        st.clients.push_back(std::move(client));
    }
    if (cfg.hyper.batch_size > min_train) {
        throw ConfigError("hyper.batch_size: " + std::to_string(cfg.hyper.batch_size) +
                          " exceeds the smallest client training set (" +
                          std::to_string(min_train) + ")");
    }

    if (strategy_keeps_personal_state(cfg.strategy)) {
        st.server = split_params(st.prototype).first;
    } else {
        st.server = full_params(st.prototype);
    }
    return st;
}

template <typename T>
std::vector<RoundReport> run_experiment_impl(const ExperimentConfig& cfg, std::size_t jobs = 1) {
    ExperimentState<T> st = init_experiment<T>(cfg);
    std::vector<RoundReport> reports;
    reports.reserve(cfg.rounds);
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        reports.push_back(run_round(st, jobs));
    }
    return reports;
}

/// Runs the whole experiment; a pure function of the config.
inline std::vector<RoundReport> run_experiment(const ExperimentConfig& cfg, std::size_t jobs = 1) {
    if (cfg.element_type == ElementType::f32) return run_experiment_impl<float>(cfg, jobs);
    return run_experiment_impl<double>(cfg, jobs);
}

// --- checkpointing ---

inline constexpr int kManifestFormat = 1;

/// Writes server parameters, every client's personal set, and a manifest into
/// `dir`. The recorded round is the number of completed rounds.
template <typename T>
void write_checkpoint(const std::filesystem::path& dir, const ExperimentState<T>& st) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format"] = kManifestFormat;
    manifest["round"] = st.next_round - 1;
    manifest["strategy"] = strategy_name(st.config.strategy);
    manifest["arch"] = arch_name(st.config.arch);
    manifest["element_type"] = element_type_name(st.config.element_type);
    manifest["server_file"] = "server.flpk";
    write_bytes_file(dir / "server.flpk", serialize(st.server));
    auto clients = nlohmann::ordered_json::array();
    for (const auto& c : st.clients) {
        nlohmann::ordered_json jc;
        jc["id"] = c.client_id;
        if (c.personal) {
            const std::string fname = "client_" + std::to_string(c.client_id) + "_personal.flpk";
            write_bytes_file(dir / fname, serialize(*c.personal));
            jc["personal_file"] = fname;
        }
        clients.push_back(jc);
    }
    manifest["clients"] = clients;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw Error("cannot write manifest to '" + dir.string() + "'");
    out << manifest.dump(2) << "\n";
}

/// Rebuilds experiment state from a checkpoint directory; datasets and seeds
/// are regenerated from the config, so subsequent rounds replay exactly.
template <typename T>
ExperimentState<T> restore_checkpoint(const std::filesystem::path& dir,
                                      const ExperimentConfig& cfg) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw MissingStateError("manifest not found: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError("manifest is not valid JSON: " + std::string(e.what()), 0);
    }
    if (manifest.value("format", -1) != kManifestFormat) {
        throw CorruptFileError("unsupported manifest format", 0);
    }
    if (manifest.value("strategy", "") != strategy_name(cfg.strategy) ||
        manifest.value("arch", "") != arch_name(cfg.arch) ||
        manifest.value("element_type", "") != element_type_name(cfg.element_type)) {
        throw ConfigError("checkpoint was written by a different experiment configuration");
    }

    ExperimentState<T> st = init_experiment<T>(cfg);
    st.server = deserialize<T>(read_bytes_file(dir / manifest.at("server_file").get<std::string>()));
    for (const auto& jc : manifest.at("clients")) {
        const int id = jc.at("id").get<int>();
        auto it = std::find_if(st.clients.begin(), st.clients.end(),
                               [&](const auto& c) { return c.client_id == id; });
        if (it == st.clients.end()) {
            throw ConfigError("checkpoint lists client " + std::to_string(id) +
                              " which the config does not produce");
        }
        if (strategy_keeps_personal_state(cfg.strategy)) {
            if (!jc.contains("personal_file")) {
                throw MissingStateError("manifest has no personal state for client " +
                                        std::to_string(id));
            }
            const auto path = dir / jc.at("personal_file").get<std::string>();
            if (!std::filesystem::exists(path)) {
                throw MissingStateError("personal state of client " + std::to_string(id) +
                                        " missing: " + path.string());
            }
            it->personal = deserialize<T>(read_bytes_file(path));
        }
    }
    st.next_round = manifest.at("round").get<std::size_t>() + 1;
    return st;
}

}  // namespace flsim
