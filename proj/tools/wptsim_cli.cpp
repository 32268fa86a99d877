// Command-line front end: run, sweep, validate and tune-table.

#include "wptsim/errors.hpp"
#include "wptsim/scenario.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct Overrides {
    std::optional<double> dt;
    bool lossy = false;
    bool param_free = false;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--dt", o.dt, "Base time step in seconds");
    cmd->add_flag("--lossy", o.lossy, "Use the lossy switch model");
    cmd->add_flag("--param-free", o.param_free, "Run the controller without circuit parameters");
}

wptsim::ScenarioConfig load(const std::string& path, const Overrides& o) {
    auto config = wptsim::load_scenario_file(path);
    if (o.dt) config.simulation.dt = *o.dt;
    if (o.lossy) config.lossy = true;
    if (o.param_free && config.interceptor) config.interceptor->controller.parameter_free = true;
    config.finalize();
    return config;
}

void print_summary(const wptsim::MetricsReport& report) {
    for (const auto& h : report.hops) {
        std::printf("hop %.6g Hz [%.6g s, %.6g s]: cycles=%zu", h.frequency, h.start, h.end, h.cycles);
        if (h.no_field) std::printf(" no field");
        if (h.lock_time_cycles) std::printf(" lock=%d", *h.lock_time_cycles);
        if (h.match_cycles) std::printf(" match=%d", *h.match_cycles);
        if (h.trail_cycles) std::printf(" trail=%d", *h.trail_cycles);
        if (h.hacking_efficiency) std::printf(" efficiency=%.4f", *h.hacking_efficiency);
        if (h.locked_t_on) std::printf(" t_on=%.6g s", *h.locked_t_on);
        if (!h.final_mode.empty()) std::printf(" mode=%s", h.final_mode.c_str());
        std::printf("\n");
        for (const auto& l : h.loads) {
            std::printf("  %-8s P=%.6g W ratio=%.4f\n", l.coil.c_str(), l.power, l.ratio);
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transient simulator for a frequency-hopping wireless power link and its interceptor"};
    app.require_subcommand(1);

    std::string scenario;
    Overrides overrides;

    auto* run = app.add_subcommand("run", "Simulate a scenario and write outputs");
    std::string out_dir;
    run->add_option("scenario", scenario, "Scenario JSON file")->required();
    run->add_option("--out", out_dir, "Output directory");
    add_overrides(run, overrides);

    auto* sweep = app.add_subcommand("sweep", "Sweep the drive frequency");
    double f_from = 0.0;
    double f_to = 0.0;
    double f_step = 0.0;
    std::string mode;
    unsigned threads = 0;
    std::string sweep_out;
    sweep->add_option("scenario", scenario, "Scenario JSON file")->required();
    sweep->add_option("--from", f_from, "First frequency, Hz")->required();
    sweep->add_option("--to", f_to, "Last frequency, Hz")->required();
    sweep->add_option("--step", f_step, "Frequency step, Hz")->required();
    sweep->add_option("--mode", mode, "persistent or independent")->check(CLI::IsMember({"persistent", "independent"}));
    sweep->add_option("--threads", threads, "Worker threads for independent mode (0: all cores)");
    sweep->add_option("--out", sweep_out, "Write sweep.csv and sweep.json here");
    add_overrides(sweep, overrides);

    auto* validate = app.add_subcommand("validate", "Static checks only");
    validate->add_option("scenario", scenario, "Scenario JSON file")->required();
    add_overrides(validate, overrides);

    auto* tune = app.add_subcommand("tune-table", "Closed-form on-time over the tunable range");
    std::size_t points = 21;
    tune->add_option("scenario", scenario, "Scenario JSON file")->required();
    tune->add_option("--points", points, "Number of rows");
    add_overrides(tune, overrides);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const auto config = load(scenario, overrides);
        if (*validate) {
            std::cout << wptsim::scenario_to_json(config);
            return 0;
        }
        if (*tune) {
            std::cout << "frequency_hz,t_on_s\n";
            for (const auto& r : wptsim::tune_table(config, points)) {
                std::cout << wptsim::format_double(r.frequency) << "," << wptsim::format_double(r.t_on) << "\n";
            }
            return 0;
        }
        if (*run) {
            const auto result = wptsim::run_scenario(config);
            if (!out_dir.empty()) wptsim::emit_outputs(result, config, out_dir);
            print_summary(result.report);
            return 0;
        }
        std::optional<wptsim::SweepMode> m;
        if (mode == "persistent") m = wptsim::SweepMode::persistent;
        if (mode == "independent") m = wptsim::SweepMode::independent;
        const auto result = wptsim::sweep_frequencies(config, f_from, f_to, f_step, m,
                                                      threads ? std::optional<unsigned>(threads) : std::nullopt);
        const auto csv = wptsim::sweep_to_csv(result);
        if (!sweep_out.empty()) {
            std::filesystem::create_directories(sweep_out);
            std::ofstream(std::filesystem::path(sweep_out) / "sweep.csv", std::ios::binary) << csv;
            std::ofstream(std::filesystem::path(sweep_out) / "sweep.json", std::ios::binary)
                << wptsim::sweep_to_json(result);
        }
        std::cout << csv;
        return 0;
    } catch (const wptsim::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
