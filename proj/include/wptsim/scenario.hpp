#pragma once

// Declarative scenarios: loading, co-simulation of engine and controller,
// per-hop metrics, frequency sweeps and file output.

#include "wptsim/controller.hpp"
#include "wptsim/transient_engine.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wptsim {

inline constexpr int kSchemaVersion = 1;

struct InterceptorSpec {
    std::string coil;
    SwitchedCapacitorBranch branch;
    LoadModel load;
    ControllerConfig controller;
};

struct ReceiverSpec {
    std::string coil;
    double capacitance = 0.0;
    LoadModel load;
    double resonance = 0.0;  // derived, Hz
};

/// Device parameters applied to the switch in lossy mode.
struct LossyDevice {
    double switch_on_resistance = 0.05;
    double diode_drop = 0.7;
};

struct SimulationSettings {
    std::optional<double> dt;  // default: shortest carrier period / 1000
    double end_time = 0.0;
    double event_tolerance = 1e-12;
    std::size_t sample_every = 10;
    std::vector<std::string> probes;  // empty: every probe
};

struct MetricsSettings {
    std::size_t steady_cycles = 10;
    double lock_fraction = 0.9;  // of steady power (or of the matched receiver's current)
    std::size_t hold_cycles = 2;
};

enum class SweepMode { persistent, independent };

struct SweepSettings {
    std::size_t cycles_per_point = 60;
    SweepMode mode = SweepMode::persistent;
    unsigned threads = 0;  // 0: hardware concurrency
};

struct ScenarioConfig {
    int schema_version = kSchemaVersion;
    std::string name;
    std::vector<CoilSpec> coils;
    std::vector<CouplingSpec> couplings;
    bool cross_coupling = true;
    std::string transmitter;
    std::string sensor;
    double amplitude = 0.0;
    double phase = 0.0;
    std::vector<DriveProgram::Hop> hops;
    std::optional<InterceptorSpec> interceptor;
    std::vector<ReceiverSpec> receivers;
    LossyDevice lossy_device;
    bool lossy = false;
    SimulationSettings simulation;
    MetricsSettings metrics;
    SweepSettings sweep;

    /// Validates everything and fills the derived fields. Idempotent.
    void finalize();

    // Available after finalize().
    [[nodiscard]] const MagneticLinkModel& link() const { return link_; }
    [[nodiscard]] std::optional<FrequencyRange> tunable() const { return range_; }
    [[nodiscard]] CircuitTopology topology() const;
    [[nodiscard]] DriveProgram drive() const;
    [[nodiscard]] SimConfig sim_config() const;
    [[nodiscard]] double max_frequency() const;

private:
    MagneticLinkModel link_;
    std::optional<FrequencyRange> range_;
};

/// Parses a JSON scenario document. Throws ValidationError with a path to the
/// offending field.
[[nodiscard]] ScenarioConfig load_scenario_text(const std::string& text);
[[nodiscard]] ScenarioConfig load_scenario_file(const std::filesystem::path& path);
/// Resolved configuration, including derived quantities, as JSON text.
[[nodiscard]] std::string scenario_to_json(const ScenarioConfig& config);

struct LoadMetrics {
    std::string coil;
    bool interceptor = false;
    double resonance = 0.0;   // Hz; interceptor: 0
    double power = 0.0;       // mean load power over the steady window, W
    double rms_current = 0.0; // sqrt(power / load resistance), A
    double ratio = 0.0;       // power / max power over all loads
    std::optional<int> lock_time_cycles;
};

struct HopMetrics {
    double start = 0.0;
    double end = 0.0;
    double frequency = 0.0;
    std::size_t cycles = 0;  // complete sensor cycles inside the hop
    bool no_field = false;
    std::vector<LoadMetrics> loads;  // interceptor first, then receivers
    std::optional<std::string> matched_receiver;
    std::optional<int> lock_time_cycles;   // interceptor, own steady power
    std::optional<int> match_cycles;       // interceptor current vs matched receiver
    std::optional<int> trail_cycles;       // interceptor lock minus matched receiver lock
    std::optional<double> hacking_efficiency;
    std::optional<double> locked_t_on;
    std::optional<double> phase_error;     // last regulator error in the hop, rad
    std::optional<int> fsm_lock_cycles;    // first LOCKED tick, cycles after the hop
    std::string final_mode;
    double max_cycle_energy_residual = 0.0;            // relative to the source energy of the cycle
    std::optional<double> peak_energy_mismatch;        // interceptor loop, steady window
    std::optional<double> sensor_lead_over_vh1_deg;    // steady window
    bool reverse_rectifier_current = false;
};

struct MetricsReport {
    std::string scenario;
    std::vector<std::pair<std::string, double>> couplings;  // "a-b" -> k
    std::optional<FrequencyRange> tunable;
    std::vector<HopMetrics> hops;
};

/// Per sensor cycle boundary snapshot.
struct CycleSample {
    double time = 0.0;
    double source = 0.0;
    double coil_loss = 0.0;
    double device_loss = 0.0;
    double stored = 0.0;
    std::vector<double> load;
};

struct RunResult {
    TraceBuffer trace;
    MetricsReport report;
    std::vector<CycleSample> cycles;
    std::vector<ControllerRecord> controller;
    std::vector<std::pair<std::string, double>> crossings;  // upward crossings, time ordered
};

struct RunOptions {
    bool trace = true;
};

[[nodiscard]] RunResult run_scenario(const ScenarioConfig& config, const RunOptions& options = {});

/// Ratios normalised to the maximum (all zero when every power is zero).
[[nodiscard]] std::vector<double> power_ratios(std::span<const double> powers);

/// Mean load power over [t0, t1] from the E_load_<coil> trace columns; the
/// window must cover at least one period.
[[nodiscard]] std::vector<double> power_metrics(const TraceBuffer& trace, const std::vector<std::string>& coils,
                                                double t0, double t1, double period);

struct SweepRow {
    double frequency = 0.0;
    std::vector<double> power;   // interceptor first, then receivers
    std::vector<double> ratio;
    std::optional<double> hacking_efficiency;
    std::optional<double> locked_t_on;
};

struct SweepResult {
    std::vector<std::string> loads;
    std::vector<SweepRow> rows;
};

/// Frequencies f_lo, f_lo + step, ... up to f_hi. Persistent mode hops the drive
/// through every point in one run so controller state carries over; independent
/// mode simulates each point from a cold start, in parallel.
[[nodiscard]] SweepResult sweep_frequencies(const ScenarioConfig& config, double f_lo, double f_hi, double step,
                                            std::optional<SweepMode> mode = std::nullopt,
                                            std::optional<unsigned> threads = std::nullopt);

struct TuneRow {
    double frequency = 0.0;
    double t_on = 0.0;
};
/// Closed-form on-time over the interceptor's tunable range.
[[nodiscard]] std::vector<TuneRow> tune_table(const ScenarioConfig& config, std::size_t points = 21);

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Shortest decimal text that round-trips to the same double.
[[nodiscard]] std::string format_double(double value);

[[nodiscard]] std::string trace_to_csv(const TraceBuffer& trace);
[[nodiscard]] std::string metrics_to_json(const MetricsReport& report);
[[nodiscard]] std::string sweep_to_csv(const SweepResult& sweep);
[[nodiscard]] std::string sweep_to_json(const SweepResult& sweep);

/// waveform.csv, metrics.json, scenario.json (resolved), crossings.csv,
/// controller.csv. Throws SimulationError on I/O failure.
void emit_outputs(const RunResult& result, const ScenarioConfig& config, const std::filesystem::path& dir);

}  // namespace wptsim
