#include "wptsim/transient_engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace wptsim {

namespace {

constexpr int kMaxStates = 16;
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxStates, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxStates, kMaxStates>;

bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) { return v.allFinite(); }

double switch_current(const SwitchedCapacitorBranch& br, int d, double i_loop, double v1, double v2) {
    if (d == 0) return 0.0;
    if (br.switch_on_resistance == 0.0) return i_loop * br.c_h2 / (br.c_h1 + br.c_h2);
    return (v1 - v2 - d * br.diode_drop) / br.switch_on_resistance;
}

}  // namespace

// ---------------------------------------------------------------------------
// DriveProgram
// ---------------------------------------------------------------------------

DriveProgram::DriveProgram(double amplitude, double phase, std::vector<Hop> hops)
    : amplitude_(amplitude), hops_(std::move(hops)) {
    if (!(amplitude_ >= 0.0) || !std::isfinite(amplitude_)) throw ValidationError("drive amplitude must be >= 0");
    if (hops_.empty()) throw ValidationError("drive needs at least one frequency segment");
    start_phase_.resize(hops_.size());
    start_phase_[0] = phase;
    for (std::size_t i = 0; i < hops_.size(); ++i) {
        if (!(hops_[i].frequency > 0.0) || !std::isfinite(hops_[i].frequency)) {
            throw ValidationError("drive frequency must be positive");
        }
        if (i > 0) {
            if (!(hops_[i].start > hops_[i - 1].start)) throw ValidationError("hop times must be strictly increasing");
            start_phase_[i] = start_phase_[i - 1] +
                              2.0 * kPi * hops_[i - 1].frequency * (hops_[i].start - hops_[i - 1].start);
        }
    }
}

std::size_t DriveProgram::segment(double t) const {
    const auto it = std::upper_bound(hops_.begin(), hops_.end(), t,
                                     [](double value, const Hop& h) { return value < h.start; });
    return it == hops_.begin() ? 0 : static_cast<std::size_t>(it - hops_.begin()) - 1;
}

double DriveProgram::current(double t) const {
    const auto s = segment(t);
    return amplitude_ * std::sin(start_phase_[s] + 2.0 * kPi * hops_[s].frequency * (t - hops_[s].start));
}

double DriveProgram::slope(double t) const {
    const auto s = segment(t);
    const double w = 2.0 * kPi * hops_[s].frequency;
    return amplitude_ * w * std::cos(start_phase_[s] + w * (t - hops_[s].start));
}

double DriveProgram::frequency(double t) const { return hops_[segment(t)].frequency; }

std::optional<double> DriveProgram::next_hop_after(double t) const {
    const auto it = std::upper_bound(hops_.begin(), hops_.end(), t,
                                     [](double value, const Hop& h) { return value < h.start; });
    if (it == hops_.end()) return std::nullopt;
    return it->start;
}

double DriveProgram::max_frequency() const {
    double f = 0.0;
    for (const auto& h : hops_) f = std::max(f, h.frequency);
    return f;
}

// ---------------------------------------------------------------------------
// SimConfig / misc
// ---------------------------------------------------------------------------

void SimConfig::validate(double max_frequency) const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dt must be positive");
    if (!(event_tolerance > 0.0) || !(event_tolerance < dt)) {
        throw ValidationError("event tolerance must be positive and smaller than dt");
    }
    if (max_step_subdivisions < 1) throw ValidationError("max_step_subdivisions must be >= 1");
    if (max_frequency > 0.0 && dt > 1.0 / (200.0 * max_frequency) * (1.0 + 1e-12)) {
        throw ValidationError("dt must not exceed 1/200 of the shortest carrier period");
    }
}

SimConfig SimConfig::defaults_for(double max_frequency) {
    SimConfig c;
    c.dt = 1.0 / (1000.0 * max_frequency);
    c.event_tolerance = std::min(1e-12, c.dt * 1e-3);
    return c;
}

const char* to_string(EventKind kind) {
    switch (kind) {
        case EventKind::gate_on: return "gate-on";
        case EventKind::gate_off: return "gate-off";
        case EventKind::diode_commutation: return "diode-commutation";
        case EventKind::signal_zero_cross: return "signal-zero-cross";
    }
    return "unknown";
}

void TraceBuffer::append(double time, const std::vector<double>& values) {
    if (values.size() != columns_.size()) throw SimulationError("trace row width mismatch");
    if (!times_.empty() && !(time > times_.back())) throw SimulationError("trace timestamps must increase");
    times_.push_back(time);
    data_.insert(data_.end(), values.begin(), values.end());
}

std::optional<std::size_t> TraceBuffer::find(std::string_view column) const {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (columns_[i] == column) return i;
    }
    return std::nullopt;
}

std::vector<double> TraceBuffer::column(std::string_view name) const {
    const auto c = find(name);
    if (!c) throw ValidationError("trace has no column '" + std::string(name) + "'");
    std::vector<double> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) out[r] = value(r, *c);
    return out;
}

std::pair<std::size_t, std::size_t> TraceBuffer::window(double t0, double t1) const {
    const auto lo = std::lower_bound(times_.begin(), times_.end(), t0);
    const auto hi = std::upper_bound(times_.begin(), times_.end(), t1);
    return {static_cast<std::size_t>(lo - times_.begin()), static_cast<std::size_t>(hi - times_.begin())};
}

// ---------------------------------------------------------------------------
// Free functions
// ---------------------------------------------------------------------------

Eigen::VectorXd integrate_interval(const Eigen::VectorXd& x0, const StateSpace& system, const DriveProgram& drive,
                                   double t, double h, int substeps) {
    substeps = std::max(1, substeps);
    const double hs = h / substeps;
    Eigen::VectorXd x = x0;
    const Eigen::VectorXd b0 = system.b.col(0);
    const Eigen::VectorXd b1 = system.b.col(1);
    for (int s = 0; s < substeps; ++s) {
        const double ts = t + s * hs;
        const double u1 = drive.slope(ts);
        const double um = drive.slope(ts + 0.5 * hs);
        const double u4 = drive.slope(ts + hs);
        const Eigen::VectorXd k1 = system.a * x + b0 * u1 + b1;
        const Eigen::VectorXd k2 = system.a * (x + 0.5 * hs * k1) + b0 * um + b1;
        const Eigen::VectorXd k3 = system.a * (x + 0.5 * hs * k2) + b0 * um + b1;
        const Eigen::VectorXd k4 = system.a * (x + hs * k3) + b0 * u4 + b1;
        x += (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!all_finite(x)) {
        std::ostringstream os;
        os << "non-finite state after integrating [" << t << ", " << t + h << "]";
        throw SimulationError(os.str());
    }
    return x;
}

double locate_event(const std::function<double(double)>& signal, double t_lo, double t_hi, double tol,
                    int max_iterations) {
    if (!(t_hi > t_lo)) throw SimulationError("event bracket is empty");
    double s_lo = signal(t_lo);
    const double s_hi = signal(t_hi);
    const bool lo_side = s_lo <= 0.0;
    if (lo_side == (s_hi <= 0.0)) throw SimulationError("no sign change inside the event bracket");
    for (int it = 0; it < max_iterations; ++it) {
        if (t_hi - t_lo <= tol) return t_hi;
        const double mid = 0.5 * (t_lo + t_hi);
        if (mid <= t_lo || mid >= t_hi) return t_hi;
        s_lo = signal(mid);
        if ((s_lo <= 0.0) == lo_side) {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    if (t_hi - t_lo <= tol) return t_hi;
    throw SimulationError("event localisation did not converge");
}

double sensor_voltage(const CircuitTopology& topology, const StateLayout& layout, const Eigen::VectorXd& xdot,
                      double drive_slope) {
    double v = topology.link.mutual(layout.sensor, layout.transmitter) * drive_slope;
    for (const auto& loop : layout.loops) {
        v -= topology.link.mutual(layout.sensor, loop.coil) * xdot(static_cast<Eigen::Index>(loop.current));
    }
    return v;
}

double stored_energy(const CircuitTopology& topology, const StateLayout& layout, const Eigen::VectorXd& x) {
    double e = 0.0;
    for (std::size_t a = 0; a < layout.loops.size(); ++a) {
        const double ia = x(static_cast<Eigen::Index>(layout.loops[a].current));
        for (std::size_t b = 0; b < layout.loops.size(); ++b) {
            const double ib = x(static_cast<Eigen::Index>(layout.loops[b].current));
            e += 0.5 * topology.link.mutual(layout.loops[a].coil, layout.loops[b].coil) * ia * ib;
        }
        const auto& comp = topology.loops[a].compensation;
        const double v1 = x(static_cast<Eigen::Index>(*layout.loops[a].cap));
        if (const auto* fixed = std::get_if<FixedCapacitor>(&comp)) {
            e += 0.5 * fixed->capacitance * v1 * v1;
        } else {
            const auto& br = std::get<SwitchedCapacitorBranch>(comp);
            const double v2 = x(static_cast<Eigen::Index>(*layout.loops[a].cap2));
            e += 0.5 * br.c_h1 * v1 * v1 + 0.5 * br.c_h2 * v2 * v2;
        }
        if (layout.loops[a].filter) {
            const double vf = x(static_cast<Eigen::Index>(*layout.loops[a].filter));
            e += 0.5 * topology.loops[a].load.filter_capacitance * vf * vf;
        }
    }
    return e;
}

// ---------------------------------------------------------------------------
// TransientEngine
// ---------------------------------------------------------------------------

TransientEngine::TransientEngine(CircuitTopology topology, DriveProgram drive, SimConfig config)
    : topology_(std::move(topology)), drive_(std::move(drive)), config_(config) {
    topology_.validate();
    config_.validate(drive_.max_frequency());
    layout_ = StateLayout::from(topology_);
    if (layout_.size() > static_cast<std::size_t>(kMaxStates)) {
        throw ValidationError("topology has more than 16 states");
    }
    state_.time = drive_.hops().front().start > 0.0 ? drive_.hops().front().start : 0.0;
    origin_ = state_.time;
    state_.x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout_.size()));
    state_.conduction = ConductionState::initial(topology_);
    energy_.load.assign(topology_.loops.size(), 0.0);
    schedules_.resize(topology_.loops.size());
    scratch_.resize(3 + topology_.loops.size());
    int budget = 8 * static_cast<int>(topology_.loops.size()) + 8;
    resolve_conduction(budget);
}

std::size_t TransientEngine::loop_index(std::string_view coil) const {
    for (std::size_t k = 0; k < topology_.loops.size(); ++k) {
        if (topology_.loops[k].coil == coil) return k;
    }
    throw ValidationError("no loop on coil '" + std::string(coil) + "'");
}

void TransientEngine::set_state(CircuitState state) {
    if (state.x.size() != static_cast<Eigen::Index>(layout_.size())) throw ValidationError("state size mismatch");
    if (state.conduction.loops.size() != topology_.loops.size()) {
        state.conduction = ConductionState::initial(topology_);
    }
    state_ = std::move(state);
    origin_ = state_.time;
    step_index_ = 0;
    int budget = 8 * static_cast<int>(topology_.loops.size()) + 8;
    sync_gates();
    resolve_conduction(budget);
    refresh_watches();
}

void TransientEngine::set_gate_schedule(std::size_t loop, GateSchedule schedule) {
    if (loop >= schedules_.size()) throw ValidationError("gate schedule for unknown loop");
    if (!std::holds_alternative<SwitchedCapacitorBranch>(topology_.loops[loop].compensation)) {
        throw ValidationError("loop on coil '" + topology_.loops[loop].coil + "' has no switch");
    }
    if (!schedule.well_formed()) throw ValidationError("gate windows must be ordered and non-overlapping");
    schedules_[loop] = std::move(schedule);
    gates_dirty_ = true;
}

const GateSchedule& TransientEngine::gate_schedule(std::size_t loop) const { return schedules_.at(loop); }

void TransientEngine::watch_upward_crossing(const std::string& probe, JumpCrossings jumps) {
    Watch w{probe, resolve_probe(probe), 0.0, jumps};
    const Eigen::VectorXd xd = derivative();
    w.previous = probe_value(w.ref, state_.x, xd, state_.time, state_.conduction);
    watches_.push_back(std::move(w));
}

void TransientEngine::enable_trace(std::size_t sample_every, std::vector<std::string> columns) {
    if (sample_every == 0) throw ValidationError("trace sample_every must be >= 1");
    if (columns.empty()) columns = probe_names();
    trace_refs_.clear();
    for (const auto& c : columns) trace_refs_.push_back(resolve_probe(c));
    sample_every_ = sample_every;
    trace_ = TraceBuffer(std::move(columns), config_.dt * static_cast<double>(sample_every));
    if (step_index_ % static_cast<long long>(sample_every_) == 0) sample();
}

std::vector<std::string> TransientEngine::probe_names() const {
    std::vector<std::string> names = layout_.names;
    names.push_back("I_" + topology_.transmitter);
    names.push_back("V_" + topology_.sensor);
    for (const auto& l : topology_.loops) names.push_back("V_" + l.coil + "R");
    for (const auto& l : topology_.loops) {
        if (std::holds_alternative<SwitchedCapacitorBranch>(l.compensation)) {
            names.push_back("G_" + l.coil);
            names.push_back("D_" + l.coil);
        }
        if (l.load.kind == LoadKind::rectified) names.push_back("B_" + l.coil);
    }
    names.insert(names.end(), {"E_src", "E_coil", "E_dev"});
    for (const auto& l : topology_.loops) names.push_back("E_load_" + l.coil);
    names.push_back("E_stored");
    return names;
}

TransientEngine::ProbeRef TransientEngine::resolve_probe(std::string_view name) const {
    using K = ProbeRef::Kind;
    if (auto i = layout_.find(name)) return {K::state, *i};
    if (name == "I_" + topology_.transmitter) return {K::drive_current, 0};
    if (name == "V_" + topology_.sensor) return {K::sensor, 0};
    if (name == "E_src") return {K::e_src, 0};
    if (name == "E_coil") return {K::e_coil, 0};
    if (name == "E_dev") return {K::e_dev, 0};
    if (name == "E_stored") return {K::e_stored, 0};
    for (std::size_t k = 0; k < topology_.loops.size(); ++k) {
        const auto& coil = topology_.loops[k].coil;
        if (name == "V_" + coil + "R") return {K::load_voltage, k};
        if (name == "E_load_" + coil) return {K::e_load, k};
        const bool switched = std::holds_alternative<SwitchedCapacitorBranch>(topology_.loops[k].compensation);
        if (switched && name == "G_" + coil) return {K::gate, k};
        if (switched && name == "D_" + coil) return {K::branch, k};
        if (topology_.loops[k].load.kind == LoadKind::rectified && name == "B_" + coil) return {K::bridge, k};
    }
    throw ValidationError("unknown probe '" + std::string(name) + "'");
}

Eigen::VectorXd TransientEngine::derivative() const {
    const auto& ss = system_for(state_.conduction).system;
    return ss.a * state_.x + ss.b.col(0) * drive_.slope(state_.time) + ss.b.col(1);
}

double TransientEngine::probe(std::string_view name) const {
    const auto ref = resolve_probe(name);
    if (ref.kind == ProbeRef::Kind::state || ref.kind == ProbeRef::Kind::e_stored) {
        return probe_value(ref, state_.x, state_.x, state_.time, state_.conduction);
    }
    return probe_value(ref, state_.x, derivative(), state_.time, state_.conduction);
}

double TransientEngine::probe_value(const ProbeRef& ref, const Eigen::VectorXd& x, const Eigen::VectorXd& xdot,
                                    double t, const ConductionState& c) const {
    using K = ProbeRef::Kind;
    switch (ref.kind) {
        case K::state: return x(static_cast<Eigen::Index>(ref.index));
        case K::drive_current: return drive_.current(t);
        case K::sensor: return sensor_voltage(topology_, layout_, xdot, drive_.slope(t));
        case K::load_voltage: {
            const auto& load = topology_.loops[ref.index].load;
            const auto& lay = layout_.loops[ref.index];
            if (load.kind == LoadKind::resistive) return load.resistance * x(static_cast<Eigen::Index>(lay.current));
            const int d = c.loops[ref.index].bridge;
            if (d != 0) return d * (x(static_cast<Eigen::Index>(*lay.filter)) + 2.0 * load.diode_drop);
            return blocked_bridge_voltage(topology_, layout_, ref.index, x, xdot, drive_.slope(t));
        }
        case K::gate: {
            switch (c.loops[ref.index].gate) {
                case GateMask::none: return 0.0;
                case GateMask::positive: return 1.0;
                case GateMask::negative: return -1.0;
                case GateMask::both: return 2.0;
            }
            return 0.0;
        }
        case K::branch: return c.loops[ref.index].branch;
        case K::bridge: return c.loops[ref.index].bridge;
        case K::e_src: return energy_.source;
        case K::e_coil: return energy_.coil_loss;
        case K::e_dev: return energy_.device_loss;
        case K::e_load: return energy_.load[ref.index];
        case K::e_stored: return stored_energy(topology_, layout_, x);
    }
    return 0.0;
}

const TransientEngine::Cached& TransientEngine::system_for(const ConductionState& c) const {
    const auto key = c.dynamics_key();
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Cached entry;
    entry.system = assemble_state_space(topology_, layout_, c);
    if (entry.system.a.size() > 0) {
        const Eigen::EigenSolver<Eigen::MatrixXd> es(entry.system.a, false);
        entry.spectral_radius = es.eigenvalues().cwiseAbs().maxCoeff();
    }
    return cache_.emplace(key, std::move(entry)).first->second;
}

int TransientEngine::substeps_for(const Cached& sys, double h) const {
    // Keep h*|lambda| <= 1 so stiff switch-resistance modes stay inside the RK4 region.
    const double n = std::ceil(h * sys.spectral_radius);
    return n > 1.0 ? static_cast<int>(std::min(n, 1e6)) : 1;
}

void TransientEngine::powers(const Eigen::VectorXd& x, double slope, const ConductionState& c, double* p) const {
    double src = 0.0;
    double coil = 0.0;
    double dev = 0.0;
    for (std::size_t k = 0; k < layout_.loops.size(); ++k) {
        const auto& lay = layout_.loops[k];
        const auto& spec = topology_.loops[k];
        const double i = x(static_cast<Eigen::Index>(lay.current));
        src += topology_.link.mutual(layout_.transmitter, lay.coil) * i;
        coil += topology_.link.coil(lay.coil).series_resistance * i * i;
        if (spec.load.kind == LoadKind::resistive) {
            p[3 + k] = spec.load.resistance * i * i;
        } else {
            const double vf = x(static_cast<Eigen::Index>(*lay.filter));
            p[3 + k] = vf * vf / spec.load.resistance;
            if (c.loops[k].bridge != 0) dev += 2.0 * spec.load.diode_drop * std::abs(i);
        }
        if (const auto* br = std::get_if<SwitchedCapacitorBranch>(&spec.compensation)) {
            const int d = c.loops[k].branch;
            if (d != 0) {
                const double v1 = x(static_cast<Eigen::Index>(*lay.cap));
                const double v2 = x(static_cast<Eigen::Index>(*lay.cap2));
                const double i2 = switch_current(*br, d, i, v1, v2);
                dev += br->diode_drop * d * i2 + br->switch_on_resistance * i2 * i2;
            }
        }
    }
    p[0] = src * slope;
    p[1] = coil;
    p[2] = dev;
}

void TransientEngine::rk4(const Eigen::VectorXd& x0, double t0, double h, const Cached& sys,
                          const ConductionState& c, Eigen::VectorXd& out, EnergyTally* tally) const {
    const int n = substeps_for(sys, h);
    const double hs = h / n;
    const Mat a = sys.system.a;
    const Vec b0 = sys.system.b.col(0);
    const Vec b1 = sys.system.b.col(1);
    Vec x = x0;
    Vec k1, k2, k3, k4, xs;
    const std::size_t np = 3 + layout_.loops.size();
    std::vector<double> p1(np), p2(np), p3(np), p4(np);
    Eigen::VectorXd tmp(x0.size());
    for (int s = 0; s < n; ++s) {
        const double ts = t0 + s * hs;
        const double u1 = drive_.slope(ts);
        const double um = drive_.slope(ts + 0.5 * hs);
        const double u4 = drive_.slope(ts + hs);
        k1.noalias() = a * x;
        k1 += b0 * u1 + b1;
        xs = x + 0.5 * hs * k1;
        if (tally) {
            tmp = x;
            powers(tmp, u1, c, p1.data());
            tmp = xs;
            powers(tmp, um, c, p2.data());
        }
        k2.noalias() = a * xs;
        k2 += b0 * um + b1;
        xs = x + 0.5 * hs * k2;
        if (tally) {
            tmp = xs;
            powers(tmp, um, c, p3.data());
        }
        k3.noalias() = a * xs;
        k3 += b0 * um + b1;
        xs = x + hs * k3;
        if (tally) {
            tmp = xs;
            powers(tmp, u4, c, p4.data());
        }
        k4.noalias() = a * xs;
        k4 += b0 * u4 + b1;
        x += (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (tally) {
            auto q = [&](std::size_t j) { return hs / 6.0 * (p1[j] + 2.0 * p2[j] + 2.0 * p3[j] + p4[j]); };
            tally->source += q(0);
            tally->coil_loss += q(1);
            tally->device_loss += q(2);
            for (std::size_t k = 0; k < layout_.loops.size(); ++k) tally->load[k] += q(3 + k);
        }
    }
    out = x;
    if (!out.allFinite()) {
        std::ostringstream os;
        os << "non-finite state after integrating [" << t0 << ", " << t0 + h << "]";
        throw SimulationError(os.str());
    }
}

std::vector<TransientEngine::Guard> TransientEngine::guards() const {
    std::vector<Guard> out;
    for (std::size_t k = 0; k < topology_.loops.size(); ++k) {
        const auto& c = state_.conduction.loops[k];
        if (std::holds_alternative<SwitchedCapacitorBranch>(topology_.loops[k].compensation)) {
            if (c.branch == 0) {
                for (int d : {1, -1}) {
                    if (allows(c.gate, d)) out.push_back({GuardKind::branch_on, k, d});
                }
            } else {
                out.push_back({GuardKind::branch_off, k, c.branch});
            }
        }
        if (topology_.loops[k].load.kind == LoadKind::rectified) {
            if (c.bridge == 0) {
                out.push_back({GuardKind::bridge_on, k, 1});
                out.push_back({GuardKind::bridge_on, k, -1});
            } else {
                out.push_back({GuardKind::bridge_off, k, c.bridge});
            }
        }
    }
    return out;
}

double TransientEngine::guard_value(const Guard& g, const Eigen::VectorXd& x, const Eigen::VectorXd& xdot,
                                    double slope) const {
    const auto& lay = layout_.loops[g.loop];
    const double i = x(static_cast<Eigen::Index>(lay.current));
    switch (g.kind) {
        case GuardKind::branch_on: {
            const auto& br = std::get<SwitchedCapacitorBranch>(topology_.loops[g.loop].compensation);
            const double dv = x(static_cast<Eigen::Index>(*lay.cap)) - x(static_cast<Eigen::Index>(*lay.cap2));
            return g.direction * dv - br.diode_drop - voltage_eps_;
        }
        case GuardKind::branch_off: {
            const auto& br = std::get<SwitchedCapacitorBranch>(topology_.loops[g.loop].compensation);
            const double i2 = switch_current(br, g.direction, i, x(static_cast<Eigen::Index>(*lay.cap)),
                                             x(static_cast<Eigen::Index>(*lay.cap2)));
            return -g.direction * i2 - current_eps_;
        }
        case GuardKind::bridge_on: {
            const auto& load = topology_.loops[g.loop].load;
            const double vb = blocked_bridge_voltage(topology_, layout_, g.loop, x, xdot, slope);
            return g.direction * vb - (x(static_cast<Eigen::Index>(*lay.filter)) + 2.0 * load.diode_drop) -
                   voltage_eps_;
        }
        case GuardKind::bridge_off: return -g.direction * i - current_eps_;
    }
    return -1.0;
}

void TransientEngine::emit(Event e) {
    if (record_events_) events_.push_back(e);
    if (observer_) observer_(e, *this);
}

void TransientEngine::sync_gates() {
    gates_dirty_ = false;
    for (std::size_t k = 0; k < schedules_.size(); ++k) {
        if (!std::holds_alternative<SwitchedCapacitorBranch>(topology_.loops[k].compensation)) continue;
        const GateMask mask = schedules_[k].at(state_.time);
        auto& c = state_.conduction.loops[k];
        if (mask == c.gate) continue;
        c.gate = mask;
        const int dir = mask == GateMask::positive ? 1 : mask == GateMask::negative ? -1 : mask == GateMask::both ? 2 : 0;
        emit({mask == GateMask::none ? EventKind::gate_off : EventKind::gate_on, state_.time,
              "G_" + topology_.loops[k].coil, dir});
    }
}

void TransientEngine::resolve_conduction(int& budget) {
    bool changed = true;
    while (changed) {
        changed = false;
        Eigen::VectorXd& x = state_.x;
        for (std::size_t k = 0; k < topology_.loops.size() && !changed; ++k) {
            auto& c = state_.conduction.loops[k];
            const auto& lay = layout_.loops[k];
            const auto ci = static_cast<Eigen::Index>(lay.current);
            const auto& coil = topology_.loops[k].coil;
            if (const auto* br = std::get_if<SwitchedCapacitorBranch>(&topology_.loops[k].compensation)) {
                const auto i1 = static_cast<Eigen::Index>(*lay.cap);
                const auto i2 = static_cast<Eigen::Index>(*lay.cap2);
                if (c.branch != 0) {
                    const double is = switch_current(*br, c.branch, x(ci), x(i1), x(i2));
                    if (!allows(c.gate, c.branch) || -c.branch * is > current_eps_) {
                        c.branch = 0;
                        changed = true;
                    }
                } else {
                    for (int d : {1, -1}) {
                        if (!allows(c.gate, d)) continue;
                        const double f = d * (x(i1) - x(i2)) - br->diode_drop;
                        if (f > voltage_eps_) {
                            if (br->switch_on_resistance == 0.0) {
                                // Hard closure: instantaneous charge sharing at constant total charge.
                                const double before = 0.5 * br->c_h1 * x(i1) * x(i1) + 0.5 * br->c_h2 * x(i2) * x(i2);
                                const double q = br->c_h1 * x(i1) + br->c_h2 * x(i2);
                                const double v1 = (q + br->c_h2 * d * br->diode_drop) / (br->c_h1 + br->c_h2);
                                x(i1) = v1;
                                x(i2) = v1 - d * br->diode_drop;
                                const double after = 0.5 * br->c_h1 * x(i1) * x(i1) + 0.5 * br->c_h2 * x(i2) * x(i2);
                                energy_.device_loss += before - after;
                            }
                            c.branch = d;
                            changed = true;
                            break;
                        }
                        if (br->switch_on_resistance == 0.0 && f >= -voltage_eps_ && d * x(ci) > current_eps_) {
                            x(i2) = x(i1) - d * br->diode_drop;
                            c.branch = d;
                            changed = true;
                            break;
                        }
                    }
                }
                if (changed) {
                    emit({EventKind::diode_commutation, state_.time, "D_" + coil, c.branch});
                }
            }
            if (!changed && topology_.loops[k].load.kind == LoadKind::rectified) {
                const auto& load = topology_.loops[k].load;
                if (c.bridge != 0) {
                    if (-c.bridge * x(ci) > current_eps_) {
                        c.bridge = 0;
                        x(ci) = 0.0;
                        changed = true;
                    }
                } else {
                    x(ci) = 0.0;
                    const auto& sys = system_for(state_.conduction);
                    const Eigen::VectorXd xd =
                        sys.system.a * x + sys.system.b.col(0) * drive_.slope(state_.time) + sys.system.b.col(1);
                    const double vb = blocked_bridge_voltage(topology_, layout_, k, x, xd, drive_.slope(state_.time));
                    const double thr = x(static_cast<Eigen::Index>(*lay.filter)) + 2.0 * load.diode_drop;
                    for (int d : {1, -1}) {
                        if (d * vb - thr > voltage_eps_) {
                            c.bridge = d;
                            changed = true;
                            break;
                        }
                    }
                }
                if (changed) emit({EventKind::diode_commutation, state_.time, "B_" + coil, c.bridge});
            }
        }
        if (changed && --budget < 0) {
            std::ostringstream os;
            os << "commutation livelock at t=" << state_.time;
            throw SimulationError(os.str());
        }
    }
}

void TransientEngine::apply_guard(const Guard& g, int& budget) {
    auto& c = state_.conduction.loops[g.loop];
    const auto& lay = layout_.loops[g.loop];
    const auto& coil = topology_.loops[g.loop].coil;
    switch (g.kind) {
        case GuardKind::branch_on: {
            const auto& br = std::get<SwitchedCapacitorBranch>(topology_.loops[g.loop].compensation);
            if (br.switch_on_resistance == 0.0) {
                state_.x(static_cast<Eigen::Index>(*lay.cap2)) =
                    state_.x(static_cast<Eigen::Index>(*lay.cap)) - g.direction * br.diode_drop;
            }
            c.branch = g.direction;
            emit({EventKind::diode_commutation, state_.time, "D_" + coil, c.branch});
            break;
        }
        case GuardKind::branch_off:
            c.branch = 0;
            emit({EventKind::diode_commutation, state_.time, "D_" + coil, 0});
            break;
        case GuardKind::bridge_on:
            c.bridge = g.direction;
            emit({EventKind::diode_commutation, state_.time, "B_" + coil, c.bridge});
            break;
        case GuardKind::bridge_off:
            c.bridge = 0;
            state_.x(static_cast<Eigen::Index>(lay.current)) = 0.0;
            emit({EventKind::diode_commutation, state_.time, "B_" + coil, 0});
            break;
    }
    --budget;
    resolve_conduction(budget);
}

void TransientEngine::refresh_watches(JumpCrossings cause) {
    if (watches_.empty()) return;
    const auto& sys = system_for(state_.conduction);
    const double slope = drive_.slope(state_.time);
    const Eigen::VectorXd xd = sys.system.a * state_.x + sys.system.b.col(0) * slope + sys.system.b.col(1);
    std::vector<std::size_t> jumped;
    for (std::size_t i = 0; i < watches_.size(); ++i) {
        auto& w = watches_[i];
        const double now = probe_value(w.ref, state_.x, xd, state_.time, state_.conduction);
        // A commutation can step a probe through zero (e.g. a bridge voltage).
        const bool counts = cause != JumpCrossings::none && (w.jumps == JumpCrossings::any || w.jumps == cause);
        if (counts && w.previous <= 0.0 && now > 0.0) jumped.push_back(i);
        w.previous = now;
    }
    for (std::size_t i : jumped) emit({EventKind::signal_zero_cross, state_.time, watches_[i].name, 1});
}

void TransientEngine::sample() {
    if (sample_every_ == 0) return;
    const Eigen::VectorXd xd = derivative();
    auto& row = scratch_;
    row.resize(trace_refs_.size());
    for (std::size_t i = 0; i < trace_refs_.size(); ++i) {
        row[i] = probe_value(trace_refs_[i], state_.x, xd, state_.time, state_.conduction);
    }
    if (trace_.rows() > 0 && !(state_.time > trace_.times().back())) return;
    trace_.append(state_.time, row);
}

void TransientEngine::advance_to(double t_end) {
    const double dt = config_.dt;
    const auto target = static_cast<long long>(std::ceil((t_end - origin_) / dt - 1e-9));
    Eigen::VectorXd trial(state_.x.size());
    Eigen::VectorXd probe_x(state_.x.size());
    const double tol = config_.event_tolerance;

    while (step_index_ < target) {
        const double t_step_end = origin_ + static_cast<double>(step_index_ + 1) * dt;
        int budget = config_.max_step_subdivisions;
        for (;;) {
            const ConductionState before = state_.conduction;
            probe_x = state_.x;
            sync_gates();
            resolve_conduction(budget);
            // A gate edge can close the switch with charge sharing; re-baseline the
            // watches so the step is not mistaken for a crossing.
            if (!(state_.conduction == before) || state_.x != probe_x) refresh_watches(JumpCrossings::any);
            if (gates_dirty_) continue;  // observer replaced a schedule
            const double t0 = state_.time;
            if (t0 >= t_step_end) break;
            double t1 = t_step_end;
            for (const auto& s : schedules_) {
                if (auto e = s.next_edge_after(t0)) t1 = std::min(t1, *e);
            }
            if (auto hop = drive_.next_hop_after(t0)) t1 = std::min(t1, *hop);
            if (t_step_end - t1 < 1e-6 * tol) t1 = t_step_end;

            const Cached& sys = system_for(state_.conduction);
            const ConductionState cond = state_.conduction;
            rk4(state_.x, t0, t1 - t0, sys, cond, trial, nullptr);

            const auto gs = guards();
            auto derivative_at = [&](const Eigen::VectorXd& x, double t) -> Eigen::VectorXd {
                return sys.system.a * x + sys.system.b.col(0) * drive_.slope(t) + sys.system.b.col(1);
            };
            const Eigen::VectorXd xd_end = derivative_at(trial, t1);
            const double slope_end = drive_.slope(t1);

            // Earliest triggered crossing: diodes take precedence over probes at equal times.
            double t_event = std::numeric_limits<double>::infinity();
            int which_guard = -1;
            int which_watch = -1;
            for (std::size_t gi = 0; gi < gs.size(); ++gi) {
                if (guard_value(gs[gi], trial, xd_end, slope_end) <= 0.0) continue;
                auto signal = [&](double t) {
                    if (t <= t0) {
                        return guard_value(gs[gi], state_.x, derivative_at(state_.x, t0), drive_.slope(t0));
                    }
                    rk4(state_.x, t0, t - t0, sys, cond, probe_x, nullptr);
                    return guard_value(gs[gi], probe_x, derivative_at(probe_x, t), drive_.slope(t));
                };
                if (signal(t0) > 0.0) {
                    // Already active at the interval start (e.g. after a jump); handle now.
                    t_event = t0;
                    which_guard = static_cast<int>(gi);
                    break;
                }
                const double te = locate_event(signal, t0, t1, tol);
                if (te < t_event) {
                    t_event = te;
                    which_guard = static_cast<int>(gi);
                }
            }
            for (std::size_t wi = 0; wi < watches_.size(); ++wi) {
                auto& w = watches_[wi];
                if (!(w.previous <= 0.0)) continue;
                const double end_value = probe_value(w.ref, trial, xd_end, t1, cond);
                if (!(end_value > 0.0)) continue;
                auto signal = [&](double t) {
                    if (t <= t0) return w.previous;
                    rk4(state_.x, t0, t - t0, sys, cond, probe_x, nullptr);
                    return probe_value(w.ref, probe_x, derivative_at(probe_x, t), t, cond);
                };
                const double te = locate_event(signal, t0, t1, tol);
                if (te < t_event) {
                    t_event = te;
                    which_guard = -1;
                    which_watch = static_cast<int>(wi);
                }
            }

            if (which_guard < 0 && which_watch < 0) {
                rk4(state_.x, t0, t1 - t0, sys, cond, state_.x, &energy_);
                state_.time = (t1 == t_step_end) ? t_step_end : t1;
                refresh_watches();
                continue;
            }

            if (t_event > t0) {
                rk4(state_.x, t0, t_event - t0, sys, cond, state_.x, &energy_);
                state_.time = t_event;
            }
            if (--budget < 0) {
                std::ostringstream os;
                os << "more than " << config_.max_step_subdivisions << " events inside the step ending at t="
                   << t_step_end;
                throw SimulationError(os.str());
            }
            if (which_guard >= 0) {
                apply_guard(gs[static_cast<std::size_t>(which_guard)], budget);
                refresh_watches(JumpCrossings::commutation);
            } else {
                refresh_watches();
                // The probe is now just above zero; emit after refreshing so the observer sees a clean state.
                emit({EventKind::signal_zero_cross, state_.time, watches_[static_cast<std::size_t>(which_watch)].name, 1});
            }
        }
        ++step_index_;
        state_.time = t_step_end;
        if (sample_every_ != 0 && step_index_ % static_cast<long long>(sample_every_) == 0) sample();
    }
}

std::pair<CircuitState, std::vector<Event>> advance_with_events(const CircuitTopology& topology,
                                                                const DriveProgram& drive, const SimConfig& config,
                                                                CircuitState state, const GateSchedule& schedule,
                                                                double t_end) {
    TransientEngine engine(topology, drive, config);
    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        if (std::holds_alternative<SwitchedCapacitorBranch>(topology.loops[k].compensation)) {
            engine.set_gate_schedule(k, schedule);
        }
    }
    engine.set_state(std::move(state));
    engine.advance_to(t_end);
    return {engine.state(), engine.events()};
}

// ---------------------------------------------------------------------------
// Energy audit
// ---------------------------------------------------------------------------

double LoopPeakEnergy::relative_mismatch() const {
    return coil_peak > 0.0 ? std::abs(coil_peak - capacitor_peak) / coil_peak : 0.0;
}

double EnergyAudit::relative_residual() const { return source != 0.0 ? std::abs(residual / source) : std::abs(residual); }

EnergyAudit energy_audit(const TraceBuffer& trace, const CircuitTopology& topology, const StateLayout& layout,
                         double t0, double t1) {
    const auto [lo, hi] = trace.window(t0, t1);
    if (hi <= lo + 1) throw ValidationError("energy audit window holds fewer than two trace samples");
    auto col = [&](const std::string& name) {
        const auto c = trace.find(name);
        if (!c) throw ValidationError("energy audit needs trace column '" + name + "'");
        return *c;
    };
    auto delta = [&](const std::string& name) {
        const auto c = col(name);
        return trace.value(hi - 1, c) - trace.value(lo, c);
    };
    EnergyAudit a;
    a.source = delta("E_src");
    a.coil_loss = delta("E_coil");
    a.device_loss = delta("E_dev");
    for (const auto& l : topology.loops) a.load += delta("E_load_" + l.coil);
    a.stored_change = delta("E_stored");
    a.residual = a.source - a.load - a.coil_loss - a.device_loss - a.stored_change;

    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        const auto& spec = topology.loops[k];
        const auto ci = col(layout.names[layout.loops[k].current]);
        const auto c1 = col(layout.names[*layout.loops[k].cap]);
        double imax = 0.0;
        double v1max = 0.0;
        double v2max = 0.0;
        std::optional<std::size_t> c2;
        if (layout.loops[k].cap2) c2 = col(layout.names[*layout.loops[k].cap2]);
        for (std::size_t r = lo; r < hi; ++r) {
            imax = std::max(imax, std::abs(trace.value(r, ci)));
            v1max = std::max(v1max, std::abs(trace.value(r, c1)));
            if (c2) v2max = std::max(v2max, std::abs(trace.value(r, *c2)));
        }
        LoopPeakEnergy p;
        p.coil = spec.coil;
        p.coil_peak = 0.5 * topology.link.coil(layout.loops[k].coil).self_inductance * imax * imax;
        if (const auto* fixed = std::get_if<FixedCapacitor>(&spec.compensation)) {
            p.capacitor_peak = 0.5 * fixed->capacitance * v1max * v1max;
        } else {
            const auto& br = std::get<SwitchedCapacitorBranch>(spec.compensation);
            p.capacitor_peak = 0.5 * br.c_h1 * v1max * v1max + 0.5 * br.c_h2 * v2max * v2max;
        }
        a.peaks.push_back(p);
    }
    return a;
}

}  // namespace wptsim
