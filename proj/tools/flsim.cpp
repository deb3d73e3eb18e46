#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "flsim/config.hpp"
#include "flsim/engine.hpp"
#include "flsim/results.hpp"

namespace {

namespace fs = std::filesystem;
using namespace flsim;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;    // input / parse errors
constexpr int kExitSemantic = 3; // validation / semantic errors
constexpr int kExitNumeric = 4;  // runtime numeric errors

template <typename T>
void run_and_write(const ExperimentConfig& cfg, const fs::path& out_dir, std::size_t jobs) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentState<T> state = init_experiment<T>(cfg);
    std::vector<RoundReport> reports;
    reports.reserve(cfg.rounds);
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
        reports.push_back(run_round(state, jobs));
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_rounds_jsonl(out_dir / "rounds.jsonl", reports);
    write_summary_json(out_dir / "summary.json", cfg, reports.back(), wall);
    write_checkpoint(out_dir / "checkpoints", state);
}

int cmd_run(const std::string& config_path, const std::string& preset,
            std::optional<double> scale, const std::string& out_dir, std::size_t jobs,
            std::optional<std::uint64_t> seed_flag) {
    ExperimentConfig cfg;
    if (!preset.empty()) {
        auto f = parse_fixture_name(preset);
        if (!f) {
            std::cerr << "unknown preset '" << preset << "'\n";
            return kExitInput;
        }
        cfg = make_preset(*f);
    } else {
        cfg = load_experiment_config(config_path);
    }
    if (const char* env = std::getenv("FLSIM_SEED")) {
        char* end = nullptr;
        const std::uint64_t v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') {
            std::cerr << "FLSIM_SEED is not a valid integer: '" << env << "'\n";
            return kExitInput;
        }
        cfg.seed = v;
    }
    if (seed_flag) cfg.seed = *seed_flag;  // flag wins over the environment
    if (scale) cfg.scale = *scale;
    validate_config(cfg);

    fs::create_directories(out_dir);
    if (cfg.element_type == ElementType::f32) {
        run_and_write<float>(cfg, out_dir, jobs);
    } else {
        run_and_write<double>(cfg, out_dir, jobs);
    }
    std::cout << "wrote " << (fs::path(out_dir) / "rounds.jsonl").string() << "\n";
    return kExitOk;
}

int cmd_gradcheck(const std::string& arch_str, std::uint64_t seed) {
    auto arch = parse_arch(arch_str);
    if (!arch) {
        std::cerr << "unknown architecture '" << arch_str << "'\n";
        return kExitInput;
    }
    const double eps = 1e-5;
    auto model = build_model<double>(*arch, derive_seed(seed, "init", 0));

    Batch<double> batch;
    batch.inputs = Tensor<double>(
        {2, model.input_dims[0], model.input_dims[1], model.input_dims[2]});
    Rng rng(derive_seed(seed, "data", 0));
    for (std::size_t i = 0; i < batch.inputs.size(); ++i) batch.inputs[i] = rng.uniform();
    batch.labels = {static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))};

    GradReport report = grad_check(model.specs, model.params, batch, eps);
    std::cout << "arch=" << arch_name(*arch) << " seed=" << seed << " eps=" << eps << "\n";
    std::cout << "max_rel_err=" << format_double(report.max_rel_err)
              << " worst_param_index=" << report.worst_param_index
              << " analytic=" << format_double(report.analytic)
              << " numeric=" << format_double(report.numeric) << "\n";
    if (report.max_rel_err < 1e-4) {
        std::cout << "gradcheck OK\n";
        return kExitOk;
    }
    std::cout << "gradcheck FAILED (threshold 1e-4)\n";
    return kExitNumeric;
}

int cmd_partition(const std::string& table) {
    auto name = parse_fixture_name(table);
    if (!name) {
        std::cerr << "unknown table '" << table << "'\n";
        return kExitInput;
    }
    const TopologyFixture& fix = fixture(*name);
    std::cout << "client,fight,nonfight,total\n";
    for (std::size_t i = 0; i < fix.clients.size(); ++i) {
        const auto [fight, nonfight] = fix.clients[i];
        std::cout << (i + 1) << "," << fight << "," << nonfight << "," << (fight + nonfight)
                  << "\n";
    }
    return kExitOk;
}

template <typename T>
void write_datasets(const MakeDataSpec& spec, const fs::path& out_dir) {
    nlohmann::ordered_json index;
    index["dims"] = {spec.dims.frames, spec.dims.height, spec.dims.width};
    index["seed"] = spec.seed;
    index["element_type"] = element_type_name(spec.element_type);
    auto clients = nlohmann::ordered_json::array();
    for (const auto& c : spec.clients) {
        auto ds = generate_client_data<T>(
            c, spec.dims, derive_seed(spec.seed, "data", static_cast<std::uint64_t>(c.client_id)));
        const std::string fname = "client_" + std::to_string(c.client_id) + ".flpk";
        write_bytes_file(out_dir / fname, export_dataset(ds));
        nlohmann::ordered_json jc;
        jc["client_id"] = c.client_id;
        jc["fight"] = c.fight_count;
        jc["nonfight"] = c.nonfight_count;
        jc["total"] = c.fight_count + c.nonfight_count;
        jc["file"] = fname;
        clients.push_back(jc);
    }
    index["clients"] = clients;
    std::ofstream out(out_dir / "index.json");
    if (!out) throw Error("cannot write index.json");
    out << index.dump(2) << "\n";
}

int cmd_make_data(const std::string& spec_path, const std::string& out_dir) {
    std::ifstream in(spec_path);
    if (!in) {
        std::cerr << "cannot open spec '" << spec_path << "'\n";
        return kExitInput;
    }
    std::stringstream ss;
    ss << in.rdbuf();
    MakeDataSpec spec = parse_make_data_spec(ss.str());
    fs::create_directories(out_dir);
    if (spec.element_type == ElementType::f32) {
        write_datasets<float>(spec, out_dir);
    } else {
        write_datasets<double>(spec, out_dir);
    }
    std::cout << "wrote " << spec.clients.size() << " dataset files to " << out_dir << "\n";
    return kExitOk;
}

int cmd_report(const std::string& in_dir, const std::string& format) {
    const fs::path rounds_path = fs::path(in_dir) / "rounds.jsonl";
    if (!fs::exists(rounds_path)) {
        std::cerr << "no rounds.jsonl in '" << in_dir << "'\n";
        return kExitInput;
    }
    auto reports = read_rounds_jsonl(rounds_path);
    if (reports.empty()) {
        std::cerr << "rounds.jsonl is empty\n";
        return kExitInput;
    }

    if (format == "csv") {
        std::cout << "round,global_acc,global_loss,wire_bytes";
        for (const auto& pc : reports.front().per_client) {
            std::cout << ",client" << pc.client_id << "_acc,client" << pc.client_id << "_loss";
        }
        std::cout << "\n";
        for (const auto& r : reports) {
            std::cout << r.round << "," << format_double(r.global_acc) << ","
                      << format_double(r.global_loss) << "," << r.wire_bytes;
            for (const auto& pc : r.per_client) {
                std::cout << "," << format_double(pc.test_acc) << ","
                          << format_double(pc.test_loss);
            }
            std::cout << "\n";
        }
        return kExitOk;
    }

    // summary: one line shaped like the experiment summary table
    std::string experiment = "custom";
    const fs::path summary_path = fs::path(in_dir) / "summary.json";
    if (fs::exists(summary_path)) {
        std::ifstream sin(summary_path);
        try {
            nlohmann::json sj;
            sin >> sj;
            experiment = sj.value("experiment", experiment);
        } catch (const nlohmann::json::exception&) {
            // fall back to "custom"; rounds.jsonl is the authoritative input
        }
    }
    const RoundReport& last = reports.back();
    std::cout << "experiment=" << experiment << " clients=" << last.per_client.size()
              << " accuracy=" << format_double(last.global_acc)
              << " loss=" << format_double(last.global_loss) << "\n";
    return kExitOk;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"Personalized federated learning simulator"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "Run an experiment from a config or preset");
    std::string config_path, preset, out_dir;
    std::size_t jobs = 1;
    std::optional<double> scale;
    std::optional<std::uint64_t> seed_flag;
    auto* copt = run->add_option("--config", config_path, "Experiment config JSON");
    auto* popt = run->add_option("--preset", preset, "Bundled preset: table1|table2|table3");
    copt->excludes(popt);
    run->add_option("--scale", scale, "Override the topology scale");
    run->add_option("--out", out_dir, "Output directory")->required();
    run->add_option("--jobs", jobs, "Max parallel client updates")
        ->check(CLI::PositiveNumber);
    run->add_option("--seed", seed_flag, "Override the master seed");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
    std::string gc_arch;
    std::uint64_t gc_seed = 1;
    gradcheck->add_option("--arch", gc_arch, "mini|diffgated53")->required();
    gradcheck->add_option("--seed", gc_seed, "Seed for init and batch");

    auto* partition = app.add_subcommand("partition", "Print a topology fixture as CSV");
    std::string table;
    partition->add_option("--table", table, "table1|table2|table3")->required();

    auto* make_data = app.add_subcommand("make-data", "Generate client dataset files");
    std::string spec_path, md_out;
    make_data->add_option("--spec", spec_path, "Client spec JSON")->required();
    make_data->add_option("--out", md_out, "Output directory")->required();

    auto* report = app.add_subcommand("report", "Extract results from a run directory");
    std::string in_dir, format = "summary";
    report->add_option("--in", in_dir, "Results directory")->required();
    report->add_option("--format", format, "csv|summary")
        ->check(CLI::IsMember({"csv", "summary"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n";
        return kExitInput;
    }

    if (run->parsed()) {
        if (config_path.empty() && preset.empty()) {
            std::cerr << "run needs --config or --preset\n";
            return kExitInput;
        }
        return cmd_run(config_path, preset, scale, out_dir, jobs, seed_flag);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(gc_arch, gc_seed);
    if (partition->parsed()) return cmd_partition(table);
    if (make_data->parsed()) return cmd_make_data(spec_path, md_out);
    if (report->parsed()) return cmd_report(in_dir, format);
    return kExitInput;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const flsim::JsonParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const flsim::CorruptFileError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const flsim::MissingStateError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const flsim::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const flsim::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::ProtocolError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::SplitError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::IncompatibleParamsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::PrecisionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    } catch (const flsim::Error& e) {
        // remaining Error uses are file-system level input problems
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSemantic;
    }
}
