#pragma once

// Interceptor controller: frequency detection from sensor zero crossings,
// on-time initialisation, phase regulation and gate scheduling.

#include "wptsim/gate_schedule.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wptsim {

struct FrequencyEstimate {
    double f_est = 0.0;                // Hz
    double last_upward_crossing = 0.0; // s
    std::size_t crossings_used = 0;
    bool stable = false;  // the last two period measurements agree within the stability tolerance

    [[nodiscard]] double period() const { return 1.0 / f_est; }
};

/// f_est = (n-1)/(t_n - t_1) over the last `window` crossings. Returns nullopt
/// with fewer than two crossings.
[[nodiscard]] std::optional<FrequencyEstimate> detect_frequency(std::span<const double> upward_crossings,
                                                                std::size_t window = 3,
                                                                double stability = 0.01);

/// Closed-form on-time that tunes the switched branch to resonance at f. The
/// arcsin argument is clamped to [0, 1] and the result to [0, 1/(2f)].
[[nodiscard]] double init_t_on(double f, double l, double c1, double c2);

struct PhaseError {
    double delta_phi = 0.0;  // rad in (-pi, pi]; positive: load voltage leads the sensor
    bool stale = false;
};

/// delta_phi = 2*pi*(t_vs - t_vhr)/period wrapped to (-pi, pi]. Stale when the
/// two crossings are a period or more apart.
[[nodiscard]] PhaseError phase_error(double vs_upward_crossing, double vhr_upward_crossing, double period);

[[nodiscard]] double wrap_phase(double phi);

enum class ControllerMode { detect, init, track, locked };

[[nodiscard]] const char* to_string(ControllerMode mode);

struct RegulatorConfig {
    double deadband = 2.0 * 3.14159265358979323846 / 180.0;  // rad
    double gain = 0.12;                // on-time change per radian, in periods
    double max_step_fraction = 0.25;   // TRACK step bound, fraction of the half period
    double quantum_fraction = 1.0 / 256.0;
    int lock_hold = 2;                 // consecutive in-deadband cycles before LOCKED
    double fine_deadband = 0.05 * 3.14159265358979323846 / 180.0;  // LOCKED stepping threshold
    double unlock_factor = 2.0;        // LOCKED -> TRACK when |error| > factor * deadband

    void validate() const;
};

struct RegulatorState {
    double t_on = 0.0;  // s
    double step = 0.0;  // s, present bound on one adjustment
    ControllerMode mode = ControllerMode::detect;
    int lock_counter = 0;
    bool saturated = false;
};

/// One step quantum for carrier period `period`.
[[nodiscard]] double step_quantum(double period, const RegulatorConfig& config);

/// One regulation update from a fresh phase error. Positive error lengthens t_on.
[[nodiscard]] RegulatorState regulate_step(const PhaseError& error, RegulatorState state, double period,
                                           const RegulatorConfig& config);

/// Windows of width t_on centred at centre_reference + k/(2f), directions
/// alternating (positive at k = 0), covering [t_from, t_to]. t_on beyond the half
/// period is clamped and flagged; t_on = 0 gives an empty schedule.
[[nodiscard]] GateSchedule schedule_gates(double f, double t_on, double centre_reference, double t_from,
                                          double t_to);

struct SwitchParameters {
    double inductance = 0.0;  // H
    double c_h1 = 0.0;        // F
    double c_h2 = 0.0;        // F
};

struct ControllerConfig {
    bool parameter_free = true;
    std::optional<SwitchParameters> parameters;  // required unless parameter_free
    RegulatorConfig regulator;
    std::size_t detect_window = 3;
    double stability = 0.01;
    double hop_threshold = 0.02;
    double horizon_periods = 1.5;   // each tick schedules this far ahead
    double blanking_fraction = 0.25;  // sensor crossings closer than this many periods are chatter
    std::optional<double> fixed_t_on;  // open-loop operation, regulator disabled

    void validate() const;
};

/// One controller decision, logged per sensor tick.
struct ControllerRecord {
    double time = 0.0;
    ControllerMode mode = ControllerMode::detect;
    double f_est = 0.0;
    double t_on = 0.0;
    double delta_phi = 0.0;
    bool stale = true;
    bool saturated = false;
};

/// Event-driven controller. Feed it upward zero crossings of the sensor voltage
/// and of the load voltage; every sensor crossing yields a refreshed schedule.
class InterceptorController {
public:
    explicit InterceptorController(ControllerConfig config);

    void on_load_crossing(double t);
    /// False for a crossing inside the blanking interval after the last accepted one.
    [[nodiscard]] bool accepts_sensor_crossing(double t) const;
    /// Returns the schedule to apply from now on; blanked crossings leave it unchanged.
    GateSchedule on_sensor_crossing(double t);

    [[nodiscard]] const RegulatorState& state() const { return state_; }
    [[nodiscard]] ControllerMode mode() const { return state_.mode; }
    [[nodiscard]] const std::optional<FrequencyEstimate>& estimate() const { return estimate_; }
    [[nodiscard]] const std::vector<ControllerRecord>& history() const { return history_; }
    [[nodiscard]] const PhaseError& last_error() const { return last_error_; }
    [[nodiscard]] const ControllerConfig& config() const { return config_; }
    [[nodiscard]] const GateSchedule& schedule() const { return schedule_; }

    /// Replays recorded crossing streams (both sorted) and returns the history.
    static std::vector<ControllerRecord> replay(ControllerConfig config, std::span<const double> sensor,
                                                std::span<const double> load);

private:
    [[nodiscard]] double initial_t_on(double f) const;
    GateSchedule build(double t);
    void redetect(double t);

    ControllerConfig config_;
    RegulatorState state_;
    std::optional<FrequencyEstimate> estimate_;
    std::vector<double> sensor_;
    std::optional<double> last_load_;
    std::optional<double> suspect_period_;
    PhaseError last_error_{0.0, true};
    GateSchedule schedule_;
    std::vector<ControllerRecord> history_;
};

}  // namespace wptsim
