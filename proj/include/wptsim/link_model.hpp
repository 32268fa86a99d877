#pragma once

// Coils, magnetic couplings, compensation networks and loads of a wireless
// power link, plus assembly of the per-conduction-state linear system.

#include "wptsim/errors.hpp"

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace wptsim {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kDefaultCoilResistance = 0.1;

struct CoilSpec {
    std::string name;
    double self_inductance = 0.0;                       // H
    double series_resistance = kDefaultCoilResistance;  // ohm
};

/// One coupling entry. Exactly one of `mutual` (H) or `coefficient` (k) is set.
struct CouplingSpec {
    std::string a;
    std::string b;
    std::optional<double> mutual;
    std::optional<double> coefficient;
};

/// Symmetric, positive-definite inductance matrix over an ordered coil list.
class MagneticLinkModel {
public:
    MagneticLinkModel() = default;

    [[nodiscard]] const std::vector<CoilSpec>& coils() const { return coils_; }
    [[nodiscard]] std::size_t size() const { return coils_.size(); }
    [[nodiscard]] const CoilSpec& coil(std::size_t i) const { return coils_.at(i); }

    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const;
    /// Throws ValidationError for unknown names.
    [[nodiscard]] std::size_t index_of(std::string_view name) const;

    [[nodiscard]] double mutual(std::size_t i, std::size_t j) const { return matrix_(i, j); }
    [[nodiscard]] double mutual(std::string_view a, std::string_view b) const {
        return matrix_(index_of(a), index_of(b));
    }
    [[nodiscard]] double coupling(std::size_t i, std::size_t j) const;
    [[nodiscard]] const Eigen::MatrixXd& inductance_matrix() const { return matrix_; }

private:
    friend MagneticLinkModel build_link_model(std::vector<CoilSpec>, const Eigen::MatrixXd&);

    std::vector<CoilSpec> coils_;
    Eigen::MatrixXd matrix_;
};

/// Builds and validates a link from pairwise couplings (unlisted pairs are uncoupled).
/// Rejects |k| >= 1, conflicting duplicate entries and non-positive-definite matrices.
MagneticLinkModel build_link_model(std::vector<CoilSpec> coils,
                                   const std::vector<CouplingSpec>& couplings);

/// Builds from a full matrix. Off-diagonals are mutual inductances; the diagonal
/// must equal the coil self inductances. Rejects non-symmetric input.
MagneticLinkModel build_link_model(std::vector<CoilSpec> coils, const Eigen::MatrixXd& mutuals);

[[nodiscard]] double mutual_from_coupling(double k, double l1, double l2);
[[nodiscard]] double coupling_from_mutual(double m, double l1, double l2);
[[nodiscard]] double resonant_frequency(double inductance, double capacitance);

// ---------------------------------------------------------------------------
// Compensation and load networks
// ---------------------------------------------------------------------------

/// C_H1 in series with the coil loop; C_H2 in series with a bidirectional switch
/// (two FETs, two diodes), that pair in parallel with C_H1. The gate of each FET
/// enables one conduction direction; the series diode of the opposite FET makes
/// the switch turn on only once it is forward biased.
struct SwitchedCapacitorBranch {
    double c_h1 = 0.0;                  // F
    double c_h2 = 0.0;                  // F
    double switch_on_resistance = 0.0;  // ohm
    double diode_drop = 0.0;            // V

    void validate() const;
};

struct FixedCapacitor {
    double capacitance = 0.0;  // F
};

using Compensation = std::variant<FixedCapacitor, SwitchedCapacitorBranch>;

enum class LoadKind { resistive, rectified };

struct LoadModel {
    LoadKind kind = LoadKind::resistive;
    double resistance = 10.0;          // R_H / R_L, ohm
    double filter_capacitance = 0.0;   // F, rectified only
    double diode_drop = 0.0;           // per bridge diode, V; rectified only

    void validate() const;
};

/// Ideal sinusoidal current source on the transmitter coil.
struct TransmitterDrive {
    double amplitude = 0.0;  // A
    double frequency = 0.0;  // Hz
    double phase = 0.0;      // rad

    void validate() const;
};

struct FrequencyRange {
    double f_min = 0.0;
    double f_max = 0.0;
    [[nodiscard]] bool contains(double f) const { return f >= f_min && f <= f_max; }
};

/// f_max with the switch never conducting (C_H1 alone), f_min with full
/// conduction (C_H1 + C_H2).
[[nodiscard]] FrequencyRange tunable_range(const SwitchedCapacitorBranch& branch, double inductance);

struct LoopSpec {
    std::string coil;
    Compensation compensation;
    LoadModel load;
};

struct CircuitTopology {
    MagneticLinkModel link;
    TransmitterDrive drive;
    std::string transmitter;
    std::string sensor;
    std::vector<LoopSpec> loops;

    /// Sensor and transmitter carry no loop; every other coil has exactly one.
    void validate() const;
};

// ---------------------------------------------------------------------------
// State layout and conduction state
// ---------------------------------------------------------------------------

/// Deterministic state ordering: loop currents (transmitter and sensor excluded),
/// then compensation capacitor voltages loop by loop, then rectifier filter voltages.
struct StateLayout {
    struct Loop {
        std::size_t coil = 0;              // index into the link
        std::size_t current = 0;           // state index of the loop current
        std::optional<std::size_t> cap;    // fixed capacitor or C_H1 voltage
        std::optional<std::size_t> cap2;   // C_H2 voltage (switched branch only)
        std::optional<std::size_t> filter; // rectifier DC voltage
    };

    std::size_t transmitter = 0;
    std::size_t sensor = 0;
    std::vector<Loop> loops;
    std::vector<std::string> names;

    [[nodiscard]] std::size_t size() const { return names.size(); }
    [[nodiscard]] std::optional<std::size_t> find(std::string_view name) const;

    static StateLayout from(const CircuitTopology& topology);
};

enum class GateMask : std::uint8_t { none = 0, positive = 1, negative = 2, both = 3 };

[[nodiscard]] constexpr bool allows(GateMask mask, int direction) {
    const auto bits = static_cast<std::uint8_t>(mask);
    return direction > 0 ? (bits & 1U) != 0 : direction < 0 ? (bits & 2U) != 0 : false;
}

/// Discrete conduction configuration. Direction +1 means current leaving the
/// coil's dotted terminal into the compensation network (the loop current sign).
struct LoopConduction {
    GateMask gate = GateMask::none;  // switched branch: enabled directions
    int branch = 0;                  // switched branch: 0 blocking, +1/-1 conducting
    int bridge = 0;                  // rectified load: 0 blocked, +1/-1 conducting

    friend bool operator==(const LoopConduction&, const LoopConduction&) = default;
};

struct ConductionState {
    std::vector<LoopConduction> loops;

    friend bool operator==(const ConductionState&, const ConductionState&) = default;
    /// Initial state: gates off, switch blocking, bridges blocked.
    static ConductionState initial(const CircuitTopology& topology);
    /// Encodes the diode/switch conduction flags (not the gates): equal keys give
    /// equal state-space matrices.
    [[nodiscard]] std::uint64_t dynamics_key() const;
};

/// d(state)/dt = A * state + B * u with u = [dI_T/dt, 1]; the second input column
/// carries constant diode drops.
struct StateSpace {
    Eigen::MatrixXd a;
    Eigen::MatrixXd b;
};

/// Throws ValidationError for structurally impossible conduction states
/// (conduction against a disabled gate, bridge states on resistive loads, ...).
StateSpace assemble_state_space(const CircuitTopology& topology, const StateLayout& layout,
                                const ConductionState& conduction);

/// Voltage across the external network of loop `loop` (generator convention):
/// R*i + compensation voltage + load voltage, evaluated on the state vector.
[[nodiscard]] double loop_network_voltage(const CircuitTopology& topology, const StateLayout& layout,
                                          const ConductionState& conduction, std::size_t loop,
                                          const Eigen::VectorXd& x);

/// Bridge input voltage of a blocked rectifier loop: the coil terminal voltage
/// minus the compensation voltage, given the state derivative.
[[nodiscard]] double blocked_bridge_voltage(const CircuitTopology& topology, const StateLayout& layout,
                                            std::size_t loop, const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& xdot, double drive_slope);

/// Rejects a conduction state that contradicts the instantaneous state: a
/// conducting diode with reverse current or a blocked one with forward voltage
/// beyond its drop (tolerances in volts / amperes).
void check_conduction_consistency(const CircuitTopology& topology, const StateLayout& layout,
                                  const ConductionState& conduction, const Eigen::VectorXd& x,
                                  double drive_slope, double voltage_tol = 1e-6,
                                  double current_tol = 1e-9);

}  // namespace wptsim
