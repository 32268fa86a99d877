#include "wptsim/link_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace wptsim {

namespace {

[[noreturn]] void reject(const std::string& what) { throw ValidationError(what); }

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) {
        std::ostringstream os;
        os << what << " must be positive and finite (got " << v << ")";
        reject(os.str());
    }
}

void require_non_negative(double v, const char* what) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
        std::ostringstream os;
        os << what << " must be non-negative and finite (got " << v << ")";
        reject(os.str());
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// MagneticLinkModel
// ---------------------------------------------------------------------------

std::optional<std::size_t> MagneticLinkModel::find(std::string_view name) const {
    for (std::size_t i = 0; i < coils_.size(); ++i) {
        if (coils_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t MagneticLinkModel::index_of(std::string_view name) const {
    if (auto i = find(name)) return *i;
    reject("unknown coil '" + std::string(name) + "'");
}

double MagneticLinkModel::coupling(std::size_t i, std::size_t j) const {
    return coupling_from_mutual(matrix_(i, j), matrix_(i, i), matrix_(j, j));
}

MagneticLinkModel build_link_model(std::vector<CoilSpec> coils, const Eigen::MatrixXd& mutuals) {
    const auto n = static_cast<Eigen::Index>(coils.size());
    if (n == 0) reject("link needs at least one coil");
    if (mutuals.rows() != n || mutuals.cols() != n) reject("inductance matrix size does not match coil count");

    for (std::size_t i = 0; i < coils.size(); ++i) {
        const auto& c = coils[i];
        if (c.name.empty()) reject("coil name must not be empty");
        require_positive(c.self_inductance, ("self inductance of coil '" + c.name + "'").c_str());
        require_non_negative(c.series_resistance, ("series resistance of coil '" + c.name + "'").c_str());
        for (std::size_t j = 0; j < i; ++j) {
            if (coils[j].name == c.name) reject("duplicate coil name '" + c.name + "'");
        }
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        const double l = coils[static_cast<std::size_t>(i)].self_inductance;
        if (std::abs(mutuals(i, i) - l) > 1e-12 * l) {
            reject("inductance matrix diagonal must equal the self inductance of coil '" +
                   coils[static_cast<std::size_t>(i)].name + "'");
        }
        for (Eigen::Index j = 0; j < i; ++j) {
            const double mij = mutuals(i, j);
            const double mji = mutuals(j, i);
            if (!std::isfinite(mij) || !std::isfinite(mji)) reject("mutual inductance must be finite");
            if (mij != mji) {
                reject("inductance matrix is not symmetric between '" +
                       coils[static_cast<std::size_t>(i)].name + "' and '" +
                       coils[static_cast<std::size_t>(j)].name + "'");
            }
            const double k = mij / std::sqrt(mutuals(i, i) * mutuals(j, j));
            if (!(std::abs(k) < 1.0)) {
                std::ostringstream os;
                os << "coupling coefficient between '" << coils[static_cast<std::size_t>(i)].name << "' and '"
                   << coils[static_cast<std::size_t>(j)].name << "' is " << k << "; |k| must be < 1";
                reject(os.str());
            }
        }
    }

    Eigen::LLT<Eigen::MatrixXd> llt(mutuals);
    if (llt.info() != Eigen::Success) reject("inductance matrix is not positive definite");

    MagneticLinkModel model;
    model.coils_ = std::move(coils);
    model.matrix_ = mutuals;
    return model;
}

MagneticLinkModel build_link_model(std::vector<CoilSpec> coils,
                                   const std::vector<CouplingSpec>& couplings) {
    const auto n = static_cast<Eigen::Index>(coils.size());
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXi seen = Eigen::MatrixXi::Zero(n, n);
    auto index = [&](const std::string& name) -> Eigen::Index {
        for (std::size_t i = 0; i < coils.size(); ++i) {
            if (coils[i].name == name) return static_cast<Eigen::Index>(i);
        }
        reject("coupling references unknown coil '" + name + "'");
    };
    for (std::size_t i = 0; i < coils.size(); ++i) {
        require_positive(coils[i].self_inductance, ("self inductance of coil '" + coils[i].name + "'").c_str());
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = coils[i].self_inductance;
    }
    for (const auto& c : couplings) {
        const auto i = index(c.a);
        const auto j = index(c.b);
        if (i == j) reject("coupling of coil '" + c.a + "' with itself");
        if (c.mutual.has_value() == c.coefficient.has_value()) {
            reject("coupling '" + c.a + "'-'" + c.b + "' needs exactly one of mutual or coefficient");
        }
        const double li = m(i, i);
        const double lj = m(j, j);
        double value = 0.0;
        if (c.coefficient) {
            if (!(std::abs(*c.coefficient) < 1.0)) {
                std::ostringstream os;
                os << "coupling coefficient '" << c.a << "'-'" << c.b << "' is " << *c.coefficient
                   << "; |k| must be < 1";
                reject(os.str());
            }
            value = mutual_from_coupling(*c.coefficient, li, lj);
        } else {
            value = *c.mutual;
        }
        if (seen(i, j) != 0 && m(i, j) != value) {
            reject("conflicting couplings given for '" + c.a + "'-'" + c.b + "'");
        }
        seen(i, j) = seen(j, i) = 1;
        m(i, j) = m(j, i) = value;
    }
    return build_link_model(std::move(coils), m);
}

double mutual_from_coupling(double k, double l1, double l2) {
    if (!(std::abs(k) < 1.0)) reject("coupling coefficient must satisfy |k| < 1");
    require_positive(l1, "inductance");
    require_positive(l2, "inductance");
    return k * std::sqrt(l1 * l2);
}

double coupling_from_mutual(double m, double l1, double l2) {
    require_positive(l1, "inductance");
    require_positive(l2, "inductance");
    return m / std::sqrt(l1 * l2);
}

double resonant_frequency(double inductance, double capacitance) {
    require_positive(inductance, "inductance");
    require_positive(capacitance, "capacitance");
    return 1.0 / (2.0 * kPi * std::sqrt(inductance * capacitance));
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

void SwitchedCapacitorBranch::validate() const {
    require_positive(c_h1, "C_H1");
    require_positive(c_h2, "C_H2");
    require_non_negative(switch_on_resistance, "switch on-resistance");
    require_non_negative(diode_drop, "switch diode drop");
}

void LoadModel::validate() const {
    require_positive(resistance, "load resistance");
    if (kind == LoadKind::rectified) {
        require_positive(filter_capacitance, "rectifier filter capacitance");
        require_non_negative(diode_drop, "bridge diode drop");
    }
}

void TransmitterDrive::validate() const {
    // Zero amplitude is accepted: it models the field switched off.
    require_non_negative(amplitude, "transmitter current amplitude");
    require_positive(frequency, "transmitter frequency");
    if (!std::isfinite(phase)) reject("transmitter phase must be finite");
}

FrequencyRange tunable_range(const SwitchedCapacitorBranch& branch, double inductance) {
    require_positive(inductance, "inductance");
    require_positive(branch.c_h1, "C_H1");
    require_non_negative(branch.c_h2, "C_H2");
    return {resonant_frequency(inductance, branch.c_h1 + branch.c_h2),
            resonant_frequency(inductance, branch.c_h1)};
}

void CircuitTopology::validate() const {
    const auto t = link.index_of(transmitter);
    const auto s = link.index_of(sensor);
    if (t == s) reject("transmitter and sensor must be different coils");
    drive.validate();
    std::vector<int> count(link.size(), 0);
    for (const auto& loop : loops) {
        const auto c = link.index_of(loop.coil);
        if (c == t) reject("transmitter coil carries a prescribed current and cannot have a loop");
        if (c == s) reject("sensor coil is open-circuited and cannot have a compensation or load");
        ++count[c];
        loop.load.validate();
        std::visit(
            [](const auto& comp) {
                using T = std::decay_t<decltype(comp)>;
                if constexpr (std::is_same_v<T, FixedCapacitor>) {
                    require_positive(comp.capacitance, "compensation capacitance");
                } else {
                    comp.validate();
                }
            },
            loop.compensation);
    }
    for (std::size_t i = 0; i < link.size(); ++i) {
        if (i == t || i == s) continue;
        if (count[i] != 1) {
            reject("coil '" + link.coil(i).name + "' must have exactly one compensation branch and load");
        }
    }
}

// ---------------------------------------------------------------------------
// Layout / conduction
// ---------------------------------------------------------------------------

std::optional<std::size_t> StateLayout::find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return i;
    }
    return std::nullopt;
}

StateLayout StateLayout::from(const CircuitTopology& topology) {
    StateLayout layout;
    layout.transmitter = topology.link.index_of(topology.transmitter);
    layout.sensor = topology.link.index_of(topology.sensor);
    layout.loops.resize(topology.loops.size());
    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        layout.loops[k].coil = topology.link.index_of(topology.loops[k].coil);
        layout.loops[k].current = layout.names.size();
        layout.names.push_back("I_" + topology.loops[k].coil);
    }
    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        const auto& coil = topology.loops[k].coil;
        if (std::holds_alternative<SwitchedCapacitorBranch>(topology.loops[k].compensation)) {
            layout.loops[k].cap = layout.names.size();
            layout.names.push_back("V_" + coil + "1");
            layout.loops[k].cap2 = layout.names.size();
            layout.names.push_back("V_" + coil + "2");
        } else {
            layout.loops[k].cap = layout.names.size();
            layout.names.push_back("V_" + coil + "C");
        }
    }
    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        if (topology.loops[k].load.kind == LoadKind::rectified) {
            layout.loops[k].filter = layout.names.size();
            layout.names.push_back("V_" + topology.loops[k].coil + "DC");
        }
    }
    return layout;
}

ConductionState ConductionState::initial(const CircuitTopology& topology) {
    ConductionState c;
    c.loops.resize(topology.loops.size());
    return c;
}

std::uint64_t ConductionState::dynamics_key() const {
    auto code = [](int d) -> std::uint64_t { return d > 0 ? 1U : d < 0 ? 2U : 0U; };
    std::uint64_t key = 0;
    unsigned shift = 0;
    for (const auto& l : loops) {
        key |= (code(l.branch) | (code(l.bridge) << 2U)) << shift;
        shift += 4;
        if (shift >= 64) break;
    }
    return key;
}

namespace {

struct NetworkRow {
    Eigen::RowVectorXd coeff;
    double constant = 0.0;
};

/// Loop network voltage as an affine function of the state.
NetworkRow network_row(const CircuitTopology& topology, const StateLayout& layout,
                       const ConductionState& conduction, std::size_t k) {
    const auto& spec = topology.loops[k];
    const auto& lay = layout.loops[k];
    const auto& cond = conduction.loops[k];
    NetworkRow row{Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(layout.size())), 0.0};
    const auto ci = static_cast<Eigen::Index>(lay.current);
    row.coeff(ci) += topology.link.coil(lay.coil).series_resistance;
    if (spec.load.kind == LoadKind::resistive) {
        row.coeff(ci) += spec.load.resistance;
    } else if (cond.bridge != 0) {
        row.coeff(static_cast<Eigen::Index>(*lay.filter)) += cond.bridge;
        row.constant += cond.bridge * 2.0 * spec.load.diode_drop;
    }
    row.coeff(static_cast<Eigen::Index>(*lay.cap)) += 1.0;
    return row;
}

bool loop_active(const CircuitTopology& topology, const ConductionState& conduction, std::size_t k) {
    return topology.loops[k].load.kind == LoadKind::resistive || conduction.loops[k].bridge != 0;
}

}  // namespace

StateSpace assemble_state_space(const CircuitTopology& topology, const StateLayout& layout,
                                const ConductionState& conduction) {
    const std::size_t nloops = topology.loops.size();
    if (conduction.loops.size() != nloops) reject("conduction state does not match topology");
    const auto n = static_cast<Eigen::Index>(layout.size());
    StateSpace ss{Eigen::MatrixXd::Zero(n, n), Eigen::MatrixXd::Zero(n, 2)};

    for (std::size_t k = 0; k < nloops; ++k) {
        const auto& cond = conduction.loops[k];
        const bool switched = std::holds_alternative<SwitchedCapacitorBranch>(topology.loops[k].compensation);
        if (cond.branch < -1 || cond.branch > 1 || cond.bridge < -1 || cond.bridge > 1) {
            reject("conduction directions must be -1, 0 or +1");
        }
        if (!switched && (cond.branch != 0 || cond.gate != GateMask::none)) {
            reject("fixed compensation of coil '" + topology.loops[k].coil + "' has no switch");
        }
        if (switched && cond.branch != 0 && !allows(cond.gate, cond.branch)) {
            reject("switch of coil '" + topology.loops[k].coil + "' conducts against a disabled gate");
        }
        if (topology.loops[k].load.kind == LoadKind::resistive && cond.bridge != 0) {
            reject("resistive load of coil '" + topology.loops[k].coil + "' has no rectifier");
        }
    }

    // Inductive rows: active loops share the coupled inductance sub-matrix.
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < nloops; ++k) {
        if (loop_active(topology, conduction, k)) active.push_back(k);
    }
    if (!active.empty()) {
        const auto na = static_cast<Eigen::Index>(active.size());
        Eigen::MatrixXd l_act(na, na);
        Eigen::MatrixXd rhs_x(na, n);
        Eigen::MatrixXd rhs_u(na, 2);
        for (Eigen::Index r = 0; r < na; ++r) {
            const auto k = active[static_cast<std::size_t>(r)];
            const auto ck = layout.loops[k].coil;
            for (Eigen::Index c = 0; c < na; ++c) {
                l_act(r, c) = topology.link.mutual(ck, layout.loops[active[static_cast<std::size_t>(c)]].coil);
            }
            const auto row = network_row(topology, layout, conduction, k);
            rhs_x.row(r) = -row.coeff;
            rhs_u(r, 0) = topology.link.mutual(ck, layout.transmitter);
            rhs_u(r, 1) = -row.constant;
        }
        const Eigen::LLT<Eigen::MatrixXd> llt(l_act);
        const Eigen::MatrixXd ax = llt.solve(rhs_x);
        const Eigen::MatrixXd bu = llt.solve(rhs_u);
        for (Eigen::Index r = 0; r < na; ++r) {
            const auto si = static_cast<Eigen::Index>(layout.loops[active[static_cast<std::size_t>(r)]].current);
            ss.a.row(si) = ax.row(r);
            ss.b.row(si) = bu.row(r);
        }
    }

    // Capacitive rows.
    for (std::size_t k = 0; k < nloops; ++k) {
        const auto& lay = layout.loops[k];
        const auto ci = static_cast<Eigen::Index>(lay.current);
        const auto v1 = static_cast<Eigen::Index>(*lay.cap);
        if (const auto* fixed = std::get_if<FixedCapacitor>(&topology.loops[k].compensation)) {
            ss.a(v1, ci) = 1.0 / fixed->capacitance;
        } else {
            const auto& br = std::get<SwitchedCapacitorBranch>(topology.loops[k].compensation);
            const auto v2 = static_cast<Eigen::Index>(*lay.cap2);
            const int d = conduction.loops[k].branch;
            if (d == 0) {
                ss.a(v1, ci) = 1.0 / br.c_h1;
            } else if (br.switch_on_resistance == 0.0) {
                // Switch closed: C_H1 and C_H2 share the loop current, v_H1 - v_H2 = d * drop.
                const double c = br.c_h1 + br.c_h2;
                ss.a(v1, ci) = 1.0 / c;
                ss.a(v2, ci) = 1.0 / c;
            } else {
                // i_2 = (v_H1 - v_H2 - d*drop) / R_on
                const double g = 1.0 / br.switch_on_resistance;
                ss.a(v1, ci) = 1.0 / br.c_h1;
                ss.a(v1, v1) = -g / br.c_h1;
                ss.a(v1, v2) = g / br.c_h1;
                ss.b(v1, 1) = g * d * br.diode_drop / br.c_h1;
                ss.a(v2, v1) = g / br.c_h2;
                ss.a(v2, v2) = -g / br.c_h2;
                ss.b(v2, 1) = -g * d * br.diode_drop / br.c_h2;
            }
        }
        if (lay.filter) {
            const auto& load = topology.loops[k].load;
            const auto vf = static_cast<Eigen::Index>(*lay.filter);
            ss.a(vf, vf) = -1.0 / (load.resistance * load.filter_capacitance);
            ss.a(vf, ci) = conduction.loops[k].bridge / load.filter_capacitance;
        }
    }
    return ss;
}

double loop_network_voltage(const CircuitTopology& topology, const StateLayout& layout,
                            const ConductionState& conduction, std::size_t loop, const Eigen::VectorXd& x) {
    const auto row = network_row(topology, layout, conduction, loop);
    return row.coeff.dot(x) + row.constant;
}

double blocked_bridge_voltage(const CircuitTopology& topology, const StateLayout& layout, std::size_t loop,
                              const Eigen::VectorXd& x, const Eigen::VectorXd& xdot, double drive_slope) {
    const auto ck = layout.loops[loop].coil;
    double terminal = topology.link.mutual(ck, layout.transmitter) * drive_slope;
    for (std::size_t j = 0; j < layout.loops.size(); ++j) {
        if (j == loop) continue;
        terminal -= topology.link.mutual(ck, layout.loops[j].coil) *
                    xdot(static_cast<Eigen::Index>(layout.loops[j].current));
    }
    return terminal - x(static_cast<Eigen::Index>(*layout.loops[loop].cap));
}

void check_conduction_consistency(const CircuitTopology& topology, const StateLayout& layout,
                                  const ConductionState& conduction, const Eigen::VectorXd& x,
                                  double drive_slope, double voltage_tol, double current_tol) {
    const auto ss = assemble_state_space(topology, layout, conduction);
    Eigen::Vector2d u(drive_slope, 1.0);
    const Eigen::VectorXd xdot = ss.a * x + ss.b * u;
    for (std::size_t k = 0; k < topology.loops.size(); ++k) {
        const auto& lay = layout.loops[k];
        const auto& cond = conduction.loops[k];
        const double i = x(static_cast<Eigen::Index>(lay.current));
        const auto& coil = topology.loops[k].coil;
        if (const auto* br = std::get_if<SwitchedCapacitorBranch>(&topology.loops[k].compensation)) {
            const double dv = x(static_cast<Eigen::Index>(*lay.cap)) - x(static_cast<Eigen::Index>(*lay.cap2));
            if (cond.branch != 0) {
                const double i2 = br->switch_on_resistance == 0.0
                                      ? i * br->c_h2 / (br->c_h1 + br->c_h2)
                                      : (dv - cond.branch * br->diode_drop) / br->switch_on_resistance;
                if (cond.branch * i2 < -current_tol) reject("switch of coil '" + coil + "' conducts reverse current");
            } else {
                for (int d : {1, -1}) {
                    if (allows(cond.gate, d) && d * dv - br->diode_drop > voltage_tol) {
                        reject("switch of coil '" + coil + "' blocks with forward voltage");
                    }
                }
            }
        }
        if (topology.loops[k].load.kind == LoadKind::rectified) {
            const double vdc = x(static_cast<Eigen::Index>(*lay.filter));
            const double threshold = vdc + 2.0 * topology.loops[k].load.diode_drop;
            if (cond.bridge != 0) {
                if (cond.bridge * i < -current_tol) reject("rectifier of coil '" + coil + "' conducts reverse current");
            } else {
                if (std::abs(i) > current_tol) reject("blocked rectifier of coil '" + coil + "' carries current");
                const double vb = blocked_bridge_voltage(topology, layout, k, x, xdot, drive_slope);
                if (std::abs(vb) - threshold > voltage_tol) {
                    reject("rectifier of coil '" + coil + "' blocks with forward voltage");
                }
            }
        }
    }
}

}  // namespace wptsim
