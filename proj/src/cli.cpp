#include "patchsim/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace patchsim {

namespace {

void parse_size(const std::string& size, int& h, int& w) {
    const auto x = size.find('x');
    if (x == std::string::npos)
        throw CLI::ValidationError("--size", "expected HxW, e.g. 48x48");
    try {
        h = std::stoi(size.substr(0, x));
        w = std::stoi(size.substr(x + 1));
    } catch (const std::exception&) {
        throw CLI::ValidationError("--size", "expected HxW, e.g. 48x48");
    }
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "mode") cfg.run.mode = parse_run_mode(value);
    else if (key == "devices") cfg.run.n_devices = std::stoi(value);
    else if (key == "steps") cfg.run.num_steps = std::stoi(value);
    else if (key == "warmup") cfg.run.warmup = std::stoi(value);
    else if (key == "size") parse_size(value, cfg.run.h, cfg.run.w);
    else if (key == "model-seed") cfg.run.model_seed = std::stoull(value);
    else if (key == "noise-seed") cfg.run.noise_seed = std::stoull(value);
    else if (key == "cond-seed") cfg.run.cond_seed = std::stoull(value);
    else if (key == "gn-scheme") cfg.run.gn_scheme = parse_gn_scheme(value);
    else throw std::invalid_argument("matrix: unknown key '" + key + "'");
}

std::vector<ExperimentConfig> parse_matrix_file(const ExperimentConfig& base,
                                                const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("matrix: cannot open " + path);
    std::vector<ExperimentConfig> configs;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string token;
        ExperimentConfig cfg = base;
        bool any = false;
        while (ls >> token) {
            if (token[0] == '#') break;
            const auto eq = token.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("matrix: expected key=value, got '" + token + "'");
            apply_override(cfg, token.substr(0, eq), token.substr(eq + 1));
            any = true;
        }
        if (any) {
            cfg.run.validate();
            configs.push_back(cfg);
        }
    }
    return configs;
}

}  // namespace

int cli_run(const std::vector<std::string>& args) {
    CLI::App app{"Patch-parallel diffusion inference simulator"};
    app.set_config("--config", "", "plain 'key = value' file mirroring the flags");

    std::string mode = "reference";
    std::string size = "48x48";
    std::string gn_scheme = "corrected";
    std::string out_dir = "out";
    std::string compare_against, cost_profile, matrix_file;
    std::vector<std::string> emit;
    ExperimentConfig cfg;

    app.add_option("--mode", mode, "reference|naive|sync-pp|displaced")
        ->capture_default_str();
    app.add_option("--devices", cfg.run.n_devices, "simulated device count")
        ->capture_default_str();
    app.add_option("--steps", cfg.run.num_steps, "denoising steps")->capture_default_str();
    app.add_option("--warmup", cfg.run.warmup, "synchronous warm-up steps (displaced)")
        ->capture_default_str();
    app.add_option("--size", size, "image size HxW")->capture_default_str();
    app.add_option("--model-seed", cfg.run.model_seed, "weight seed")->capture_default_str();
    app.add_option("--noise-seed", cfg.run.noise_seed, "initial noise seed")
        ->capture_default_str();
    app.add_option("--cond-seed", cfg.run.cond_seed, "condition vector seed")
        ->capture_default_str();
    app.add_option("--out", out_dir, "output directory")->capture_default_str();
    app.add_option("--compare-against", compare_against,
                   "TNSR reference for PSNR (peak = reference range)");
    app.add_option("--cost-profile", cost_profile, "cost model 'key = value' file");
    app.add_option("--emit", emit, "artifacts to write: image tensor trace metrics")
        ->delimiter(',');
    app.add_option("--gn-scheme", gn_scheme, "corrected|stale|separate (displaced)")
        ->capture_default_str();
    app.add_flag("--stress-sched", cfg.run.stress,
                 "inject scheduling noise into the collectives (determinism check)");
    app.add_option("--matrix", matrix_file,
                   "experiment list file; each line holds key=value overrides");

    // argv-style parse keeps CLI11's config-file precedence rules.
    std::vector<const char*> argv;
    argv.push_back("patchsim");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        cfg.run.mode = parse_run_mode(mode);
        cfg.run.gn_scheme = parse_gn_scheme(gn_scheme);
        parse_size(size, cfg.run.h, cfg.run.w);
        cfg.out_dir = out_dir;
        cfg.compare_against = compare_against;
        if (!emit.empty()) {
            for (const auto& e : emit)
                if (e != "image" && e != "tensor" && e != "trace" && e != "metrics")
                    throw std::invalid_argument("--emit: unknown artifact '" + e + "'");
            cfg.emit = emit;
        }
        if (!cost_profile.empty()) cfg.cost = parse_cost_profile(cost_profile);

        if (!matrix_file.empty()) {
            const auto configs = parse_matrix_file(cfg, matrix_file);
            const std::string csv = run_matrix(configs);
            std::filesystem::create_directories(cfg.out_dir);
            std::ofstream os(cfg.out_dir + "/metrics.csv", std::ios::binary);
            os << csv;
            if (!os) throw std::runtime_error("matrix: cannot write metrics.csv");
            return 0;
        }

        cfg.run.validate();
        const ExperimentOutcome outcome = execute_experiment(cfg);
        write_artifacts(cfg, outcome);
        return 0;
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace patchsim
