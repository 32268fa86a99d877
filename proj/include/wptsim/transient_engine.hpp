#pragma once

// Fixed-step RK4 integration of the piecewise-linear link with bisection
// localisation of gate edges, diode commutations and probe zero crossings.

#include "wptsim/gate_schedule.hpp"
#include "wptsim/link_model.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace wptsim {

/// Prescribed transmitter current A*sin(phase(t)) with phase-continuous hops.
class DriveProgram {
public:
    struct Hop {
        double start = 0.0;
        double frequency = 0.0;
    };

    DriveProgram() = default;
    /// The first hop must start at or before every simulated time.
    DriveProgram(double amplitude, double phase, std::vector<Hop> hops);
    explicit DriveProgram(const TransmitterDrive& drive)
        : DriveProgram(drive.amplitude, drive.phase, {{0.0, drive.frequency}}) {}

    [[nodiscard]] double current(double t) const;
    [[nodiscard]] double slope(double t) const;  // dI_T/dt
    [[nodiscard]] double frequency(double t) const;
    [[nodiscard]] std::optional<double> next_hop_after(double t) const;
    [[nodiscard]] double amplitude() const { return amplitude_; }
    [[nodiscard]] const std::vector<Hop>& hops() const { return hops_; }
    [[nodiscard]] double max_frequency() const;

private:
    [[nodiscard]] std::size_t segment(double t) const;

    double amplitude_ = 0.0;
    std::vector<Hop> hops_;
    std::vector<double> start_phase_;
};

struct SimConfig {
    double dt = 0.0;                 // base step, s
    double event_tolerance = 1e-12;  // s
    int max_step_subdivisions = 64;  // events allowed inside one base step

    /// dt > 0, event_tolerance < dt, dt <= shortest carrier period / 200.
    void validate(double max_frequency) const;
    /// dt = shortest carrier period / 1000.
    static SimConfig defaults_for(double max_frequency);
};

struct CircuitState {
    double time = 0.0;
    Eigen::VectorXd x;  // StateLayout ordering
    ConductionState conduction;
};

enum class EventKind { gate_on, gate_off, diode_commutation, signal_zero_cross };

[[nodiscard]] const char* to_string(EventKind kind);

struct Event {
    EventKind kind = EventKind::signal_zero_cross;
    double time = 0.0;
    std::string signal;
    int direction = 0;  // new conduction direction, or +1 for an upward crossing
};

/// Cumulative energies since the engine was constructed, J.
struct EnergyTally {
    double source = 0.0;
    double coil_loss = 0.0;
    double device_loss = 0.0;      // switch, bridge diodes, charge sharing
    std::vector<double> load;      // per loop
};

/// Uniformly sampled records of time, states and probe outputs.
class TraceBuffer {
public:
    TraceBuffer() = default;
    TraceBuffer(std::vector<std::string> columns, double sample_interval)
        : columns_(std::move(columns)), sample_interval_(sample_interval) {}

    void append(double time, const std::vector<double>& values);

    [[nodiscard]] const std::vector<std::string>& columns() const { return columns_; }
    [[nodiscard]] double sample_interval() const { return sample_interval_; }
    [[nodiscard]] std::size_t rows() const { return times_.size(); }
    [[nodiscard]] double time(std::size_t row) const { return times_[row]; }
    [[nodiscard]] const std::vector<double>& times() const { return times_; }
    [[nodiscard]] std::optional<std::size_t> find(std::string_view column) const;
    [[nodiscard]] double value(std::size_t row, std::size_t column) const {
        return data_[row * columns_.size() + column];
    }
    /// Throws ValidationError for an unknown column.
    [[nodiscard]] std::vector<double> column(std::string_view name) const;
    /// Rows with t0 <= time <= t1.
    [[nodiscard]] std::pair<std::size_t, std::size_t> window(double t0, double t1) const;

private:
    std::vector<std::string> columns_;
    double sample_interval_ = 0.0;
    std::vector<double> times_;
    std::vector<double> data_;
};

/// Classical RK4 step of d(state)/dt = A*state + B*[drive slope, 1]; with
/// `substeps` > 1 the interval is split evenly. Throws SimulationError on a
/// non-finite result.
[[nodiscard]] Eigen::VectorXd integrate_interval(const Eigen::VectorXd& x, const StateSpace& system,
                                                 const DriveProgram& drive, double t, double h,
                                                 int substeps = 1);

/// Bisection for the sign change of `signal` on [t_lo, t_hi]. Returns the end of
/// the final bracket on the t_hi side, within `tol` of the crossing.
[[nodiscard]] double locate_event(const std::function<double(double)>& signal, double t_lo, double t_hi,
                                  double tol, int max_iterations = 200);

/// Open-circuit sensor voltage: M_TS*dI_T/dt minus the flux-derivative terms of
/// the loop currents (generator-convention loop currents).
[[nodiscard]] double sensor_voltage(const CircuitTopology& topology, const StateLayout& layout,
                                    const Eigen::VectorXd& xdot, double drive_slope);

/// Magnetic energy of the loop currents plus capacitor and filter energies.
[[nodiscard]] double stored_energy(const CircuitTopology& topology, const StateLayout& layout,
                                   const Eigen::VectorXd& x);

class TransientEngine {
public:
    using Observer = std::function<void(const Event&, TransientEngine&)>;

    TransientEngine(CircuitTopology topology, DriveProgram drive, SimConfig config);

    [[nodiscard]] const CircuitTopology& topology() const { return topology_; }
    [[nodiscard]] const StateLayout& layout() const { return layout_; }
    [[nodiscard]] const CircuitState& state() const { return state_; }
    [[nodiscard]] const DriveProgram& drive() const { return drive_; }
    [[nodiscard]] const SimConfig& config() const { return config_; }
    [[nodiscard]] const EnergyTally& energies() const { return energy_; }
    [[nodiscard]] const TraceBuffer& trace() const { return trace_; }
    [[nodiscard]] const std::vector<Event>& events() const { return events_; }

    /// Replaces the state; the conduction state is re-resolved against it.
    void set_state(CircuitState state);
    /// Takes effect at the current time (gate edges at "now" are applied immediately).
    void set_gate_schedule(std::size_t loop, GateSchedule schedule);
    [[nodiscard]] const GateSchedule& gate_schedule(std::size_t loop) const;
    /// Which state discontinuities may also count as an upward crossing.
    enum class JumpCrossings { none, commutation, any };
    /// Emits a signal_zero_cross event at every upward zero crossing of the probe,
    /// and at steps through zero caused by the selected discontinuities.
    void watch_upward_crossing(const std::string& probe, JumpCrossings jumps = JumpCrossings::none);
    void set_observer(Observer observer) { observer_ = std::move(observer); }
    /// Records every `sample_every` base steps; empty `columns` selects all probes.
    void enable_trace(std::size_t sample_every, std::vector<std::string> columns = {});
    void record_events(bool on) { record_events_ = on; }

    /// Integrates to the first base-grid point at or after t_end.
    void advance_to(double t_end);

    [[nodiscard]] std::vector<std::string> probe_names() const;
    /// Probe value at the current state. Names: state names, I_<tx>, V_<sensor>,
    /// V_<coil>R (load voltage), G_<coil> (gate), D_<coil> (switch conduction),
    /// B_<coil> (bridge conduction), E_src, E_coil, E_dev, E_load_<coil>, E_stored.
    [[nodiscard]] double probe(std::string_view name) const;
    [[nodiscard]] Eigen::VectorXd derivative() const;
    [[nodiscard]] std::size_t loop_index(std::string_view coil) const;

private:
    struct Cached {
        StateSpace system;
        double spectral_radius = 0.0;
    };
    enum class GuardKind { branch_on, branch_off, bridge_on, bridge_off };
    struct Guard {
        GuardKind kind;
        std::size_t loop;
        int direction;
    };
    struct ProbeRef {
        enum class Kind {
            state, drive_current, sensor, load_voltage, gate, branch, bridge, e_src, e_coil, e_dev, e_load, e_stored
        };
        Kind kind = Kind::state;
        std::size_t index = 0;
    };
    struct Watch {
        std::string name;
        ProbeRef ref;
        double previous = 0.0;
        JumpCrossings jumps = JumpCrossings::none;
    };

    const Cached& system_for(const ConductionState& c) const;
    [[nodiscard]] int substeps_for(const Cached& sys, double h) const;
    void rk4(const Eigen::VectorXd& x0, double t0, double h, const Cached& sys, const ConductionState& c,
             Eigen::VectorXd& out, EnergyTally* tally) const;
    void powers(const Eigen::VectorXd& x, double slope, const ConductionState& c, double* p) const;
    [[nodiscard]] double guard_value(const Guard& g, const Eigen::VectorXd& x, const Eigen::VectorXd& xdot,
                                     double slope) const;
    [[nodiscard]] double probe_value(const ProbeRef& ref, const Eigen::VectorXd& x, const Eigen::VectorXd& xdot,
                                     double t, const ConductionState& c) const;
    [[nodiscard]] ProbeRef resolve_probe(std::string_view name) const;
    [[nodiscard]] std::vector<Guard> guards() const;
    void sync_gates();
    void resolve_conduction(int& budget);
    void apply_guard(const Guard& g, int& budget);
    void emit(Event e);
    // `cause` is none for continuous motion, else the discontinuity just applied.
    void refresh_watches(JumpCrossings cause = JumpCrossings::none);
    void sample();

    CircuitTopology topology_;
    StateLayout layout_;
    DriveProgram drive_;
    SimConfig config_;
    CircuitState state_;
    EnergyTally energy_;
    mutable std::map<std::uint64_t, Cached> cache_;
    std::vector<GateSchedule> schedules_;
    bool gates_dirty_ = true;
    std::vector<Watch> watches_;
    Observer observer_;
    std::vector<Event> events_;
    bool record_events_ = true;
    TraceBuffer trace_;
    std::vector<ProbeRef> trace_refs_;
    std::size_t sample_every_ = 0;
    double origin_ = 0.0;
    long long step_index_ = 0;
    std::vector<double> scratch_;
    double voltage_eps_ = 1e-9;
    double current_eps_ = 1e-12;
};

/// One-shot form: integrates `state` to t_end under a fixed gate schedule for
/// every switched loop and returns the final state with the emitted events.
std::pair<CircuitState, std::vector<Event>> advance_with_events(const CircuitTopology& topology,
                                                                const DriveProgram& drive,
                                                                const SimConfig& config, CircuitState state,
                                                                const GateSchedule& schedule, double t_end);

struct LoopPeakEnergy {
    std::string coil;
    double coil_peak = 0.0;       // 1/2 L I_max^2
    double capacitor_peak = 0.0;  // sum of 1/2 C V_peak^2 over the loop's capacitors
    [[nodiscard]] double relative_mismatch() const;
};

struct EnergyAudit {
    double source = 0.0;
    double load = 0.0;
    double coil_loss = 0.0;
    double device_loss = 0.0;
    double stored_change = 0.0;
    double residual = 0.0;  // source - dissipated - stored change
    std::vector<LoopPeakEnergy> peaks;
    [[nodiscard]] double relative_residual() const;
};

/// Energy bookkeeping over the trace rows inside [t0, t1]; the trace must carry
/// the E_* columns and the state columns of every loop.
[[nodiscard]] EnergyAudit energy_audit(const TraceBuffer& trace, const CircuitTopology& topology,
                                       const StateLayout& layout, double t0, double t1);

}  // namespace wptsim
