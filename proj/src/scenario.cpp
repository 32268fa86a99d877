#include "wptsim/scenario.hpp"

#include "wptsim/errors.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace wptsim {

namespace {

bool is_probe_coil(const ScenarioConfig& c, const std::string& name) {
    return name == c.transmitter || name == c.sensor;
}

const CoilSpec& coil_named(const std::vector<CoilSpec>& coils, const std::string& name) {
    for (const auto& c : coils) {
        if (c.name == name) return c;
    }
    throw ValidationError("unknown coil '" + name + "'");
}

std::string hz(double f) {
    std::ostringstream os;
    os << f / 1e3 << " kHz";
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// ScenarioConfig
// ---------------------------------------------------------------------------

void ScenarioConfig::finalize() {
    if (schema_version != kSchemaVersion) {
        throw ValidationError("unsupported schema_version " + std::to_string(schema_version));
    }
    if (coils.empty()) throw ValidationError("scenario defines no coils");
    (void)coil_named(coils, transmitter);
    (void)coil_named(coils, sensor);
    if (transmitter == sensor) throw ValidationError("transmitter and sensor must be different coils");
    if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) throw ValidationError("drive.amplitude must be >= 0");
    if (!std::isfinite(phase)) throw ValidationError("drive.phase must be finite");
    if (hops.empty()) throw ValidationError("hop schedule is empty");
    if (!(hops.front().start >= 0.0)) throw ValidationError("first hop must start at t >= 0");
    for (std::size_t i = 0; i < hops.size(); ++i) {
        if (!(hops[i].frequency > 0.0) || !std::isfinite(hops[i].frequency)) {
            throw ValidationError("hop " + std::to_string(i) + ": frequency must be positive");
        }
        if (i > 0 && !(hops[i].start > hops[i - 1].start)) {
            throw ValidationError("hop times must be strictly increasing (hop " + std::to_string(i) + ")");
        }
    }
    if (!(simulation.end_time > hops.back().start)) {
        throw ValidationError("simulation.end_time must lie after the last hop start");
    }
    if (simulation.sample_every == 0) throw ValidationError("simulation.sample_every must be >= 1");
    if (metrics.steady_cycles == 0) throw ValidationError("metrics.steady_cycles must be >= 1");
    if (!(metrics.lock_fraction > 0.0 && metrics.lock_fraction <= 1.0)) {
        throw ValidationError("metrics.lock_fraction must lie in (0, 1]");
    }
    if (metrics.hold_cycles == 0) throw ValidationError("metrics.hold_cycles must be >= 1");
    if (sweep.cycles_per_point <= metrics.steady_cycles) {
        throw ValidationError("sweep.cycles_per_point must exceed metrics.steady_cycles");
    }
    for (std::size_t i = 0; i < hops.size(); ++i) {
        const double end = i + 1 < hops.size() ? hops[i + 1].start : simulation.end_time;
        const double needed = static_cast<double>(metrics.steady_cycles + 1) / hops[i].frequency;
        if (end - hops[i].start < needed) {
            throw ValidationError("hop " + std::to_string(i) + " at " + hz(hops[i].frequency) +
                                  " is shorter than the steady metrics window");
        }
    }

    std::vector<CouplingSpec> used;
    for (const auto& c : couplings) {
        const bool cross = !is_probe_coil(*this, c.a) && !is_probe_coil(*this, c.b);
        if (!cross_coupling && cross) continue;
        used.push_back(c);
    }
    link_ = build_link_model(coils, used);

    range_.reset();
    if (interceptor) {
        auto& h = *interceptor;
        if (is_probe_coil(*this, h.coil)) throw ValidationError("interceptor cannot sit on the transmitter or sensor");
        h.branch.validate();
        h.load.validate();
        const double l = coil_named(coils, h.coil).self_inductance;
        range_ = tunable_range(h.branch, l);
        h.controller.parameters = SwitchParameters{l, h.branch.c_h1, h.branch.c_h2};
        h.controller.validate();
        std::ostringstream bad;
        for (std::size_t i = 0; i < hops.size(); ++i) {
            if (!range_->contains(hops[i].frequency)) bad << (bad.tellp() > 0 ? ", " : "") << i << " (" << hz(hops[i].frequency) << ")";
        }
        if (bad.tellp() > 0) {
            std::ostringstream os;
            os << "hops outside the interceptor tunable range [" << hz(range_->f_min) << ", " << hz(range_->f_max)
               << "]: " << bad.str();
            throw ValidationError(os.str());
        }
    }
    for (auto& r : receivers) {
        if (is_probe_coil(*this, r.coil)) throw ValidationError("receiver cannot sit on the transmitter or sensor");
        if (!(r.capacitance > 0.0)) throw ValidationError("receiver '" + r.coil + "': capacitance must be positive");
        r.load.validate();
        r.resonance = resonant_frequency(coil_named(coils, r.coil).self_inductance, r.capacitance);
    }
    if (lossy) {
        if (!(lossy_device.switch_on_resistance >= 0.0) || !(lossy_device.diode_drop >= 0.0)) {
            throw ValidationError("lossy device parameters must be >= 0");
        }
    }
    topology().validate();
    sim_config().validate(max_frequency());
    if (!simulation.probes.empty()) {
        TransientEngine probe_check(topology(), drive(), sim_config());
        const auto names = probe_check.probe_names();
        for (const auto& p : simulation.probes) {
            if (std::find(names.begin(), names.end(), p) == names.end()) {
                throw ValidationError("unknown probe '" + p + "'");
            }
        }
    }
}

double ScenarioConfig::max_frequency() const {
    double f = 0.0;
    for (const auto& h : hops) f = std::max(f, h.frequency);
    return f;
}

CircuitTopology ScenarioConfig::topology() const {
    CircuitTopology t;
    t.link = link_;
    t.transmitter = transmitter;
    t.sensor = sensor;
    t.drive = {amplitude, hops.front().frequency, phase};
    if (interceptor) {
        SwitchedCapacitorBranch br = interceptor->branch;
        if (lossy) {
            br.switch_on_resistance = lossy_device.switch_on_resistance;
            br.diode_drop = lossy_device.diode_drop;
        }
        t.loops.push_back({interceptor->coil, br, interceptor->load});
    }
    for (const auto& r : receivers) t.loops.push_back({r.coil, FixedCapacitor{r.capacitance}, r.load});
    return t;
}

DriveProgram ScenarioConfig::drive() const { return DriveProgram(amplitude, phase, hops); }

SimConfig ScenarioConfig::sim_config() const {
    SimConfig c = SimConfig::defaults_for(max_frequency());
    if (simulation.dt) c.dt = *simulation.dt;
    c.event_tolerance = simulation.event_tolerance;
    return c;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

namespace {

std::optional<int> first_hold(const std::vector<double>& values, double threshold, std::size_t hold) {
    if (!(threshold > 0.0)) return std::nullopt;
    for (std::size_t k = 0; k + hold <= values.size(); ++k) {
        bool ok = true;
        for (std::size_t j = k; j < k + hold; ++j) ok = ok && values[j] >= threshold;
        if (ok) return static_cast<int>(k + 1);
    }
    return std::nullopt;
}

double load_resistance(const LoadModel& m) { return m.resistance; }

}  // namespace

std::vector<double> power_ratios(std::span<const double> powers) {
    std::vector<double> out(powers.size(), 0.0);
    double top = 0.0;
    for (double p : powers) top = std::max(top, p);
    if (!(top > 0.0)) return out;
    for (std::size_t i = 0; i < powers.size(); ++i) out[i] = powers[i] / top;
    return out;
}

std::vector<double> power_metrics(const TraceBuffer& trace, const std::vector<std::string>& coils, double t0,
                                  double t1, double period) {
    if (!(period > 0.0) || t1 - t0 < period * (1.0 - 1e-9)) {
        throw ValidationError("power window is shorter than one cycle");
    }
    const auto [lo, hi] = trace.window(t0, t1);
    if (hi <= lo + 1) throw ValidationError("power window holds fewer than two trace samples");
    const double span = trace.time(hi - 1) - trace.time(lo);
    std::vector<double> out;
    for (const auto& c : coils) {
        const auto col = trace.find("E_load_" + c);
        if (!col) throw ValidationError("trace has no load energy column for '" + c + "'");
        out.push_back((trace.value(hi - 1, *col) - trace.value(lo, *col)) / span);
    }
    return out;
}

RunResult run_scenario(const ScenarioConfig& input, const RunOptions& options) {
    ScenarioConfig config = input;
    config.finalize();
    const CircuitTopology topology = config.topology();
    TransientEngine engine(topology, config.drive(), config.sim_config());
    engine.record_events(false);

    RunResult result;
    const std::string vs = "V_" + config.sensor;
    std::optional<std::size_t> h_loop;
    std::optional<InterceptorController> controller;
    std::string vhr;
    std::string vh1;
    if (config.interceptor) {
        h_loop = engine.loop_index(config.interceptor->coil);
        controller.emplace(config.interceptor->controller);
        vhr = "V_" + config.interceptor->coil + "R";
        vh1 = engine.layout().names[*engine.layout().loops[*h_loop].cap];
    }
    // Gate-edge steps are the controller's own doing and are left to its blanking.
    engine.watch_upward_crossing(vs, TransientEngine::JumpCrossings::commutation);
    if (controller) {
        engine.watch_upward_crossing(vhr, TransientEngine::JumpCrossings::any);
        engine.watch_upward_crossing(vh1);
    }
    std::vector<double> vh1_crossings;
    engine.set_observer([&](const Event& ev, TransientEngine& e) {
        if (ev.kind != EventKind::signal_zero_cross) return;
        if (ev.signal == vs) {
            if (controller && !controller->accepts_sensor_crossing(ev.time)) return;
            result.crossings.emplace_back(ev.signal, ev.time);
            CycleSample s;
            s.time = ev.time;
            s.source = e.energies().source;
            s.coil_loss = e.energies().coil_loss;
            s.device_loss = e.energies().device_loss;
            s.load = e.energies().load;
            s.stored = e.probe("E_stored");
            result.cycles.push_back(std::move(s));
            if (controller) e.set_gate_schedule(*h_loop, controller->on_sensor_crossing(ev.time));
        } else if (ev.signal == vhr) {
            result.crossings.emplace_back(ev.signal, ev.time);
            controller->on_load_crossing(ev.time);
        } else if (ev.signal == vh1) {
            result.crossings.emplace_back(ev.signal, ev.time);
            vh1_crossings.push_back(ev.time);
        }
    });
    if (options.trace) engine.enable_trace(config.simulation.sample_every, config.simulation.probes);

    try {
        engine.advance_to(config.simulation.end_time);
    } catch (const SimulationError& err) {
        std::ostringstream os;
        os << err.what() << " (scenario '" << config.name << "', drive at " << hz(engine.drive().frequency(engine.state().time))
           << ")";
        throw SimulationError(os.str());
    }
    if (controller) result.controller = controller->history();
    result.trace = engine.trace();

    // Report header.
    MetricsReport& report = result.report;
    report.scenario = config.name;
    report.tunable = config.tunable();
    for (const auto& c : config.couplings) {
        report.couplings.emplace_back(c.a + "-" + c.b, config.link().coupling(config.link().index_of(c.a),
                                                                              config.link().index_of(c.b)));
    }

    const auto& cycles = result.cycles;
    const std::size_t n_loads = topology.loops.size();
    for (std::size_t hi = 0; hi < config.hops.size(); ++hi) {
        HopMetrics m;
        m.start = config.hops[hi].start;
        m.end = hi + 1 < config.hops.size() ? config.hops[hi + 1].start : config.simulation.end_time;
        m.frequency = config.hops[hi].frequency;
        const double period = 1.0 / m.frequency;

        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < cycles.size(); ++j) {
            if (cycles[j].time >= m.start && cycles[j].time <= m.end) idx.push_back(j);
        }
        m.cycles = idx.size() >= 2 ? idx.size() - 1 : 0;
        for (std::size_t k = 0; k < n_loads; ++k) {
            LoadMetrics lm;
            lm.coil = topology.loops[k].coil;
            lm.interceptor = h_loop && *h_loop == k;
            if (!lm.interceptor) lm.resonance = config.receivers[k - (h_loop ? 1 : 0)].resonance;
            m.loads.push_back(lm);
        }
        if (m.cycles < config.metrics.steady_cycles) {
            m.no_field = true;
            m.final_mode = controller ? to_string(ControllerMode::detect) : "";
            report.hops.push_back(std::move(m));
            continue;
        }

        // Per-cycle load powers.
        std::vector<std::vector<double>> per_cycle(n_loads);
        for (std::size_t c = 0; c + 1 < idx.size(); ++c) {
            const auto& a = cycles[idx[c]];
            const auto& b = cycles[idx[c + 1]];
            for (std::size_t k = 0; k < n_loads; ++k) per_cycle[k].push_back((b.load[k] - a.load[k]) / (b.time - a.time));
            const double src = b.source - a.source;
            double out = b.coil_loss - a.coil_loss + b.device_loss - a.device_loss + b.stored - a.stored;
            for (std::size_t k = 0; k < n_loads; ++k) out += b.load[k] - a.load[k];
            if (std::abs(src) > 0.0) {
                m.max_cycle_energy_residual = std::max(m.max_cycle_energy_residual, std::abs(src - out) / std::abs(src));
            }
        }
        const auto& w0 = cycles[idx[idx.size() - 1 - config.metrics.steady_cycles]];
        const auto& w1 = cycles[idx.back()];
        std::vector<double> powers(n_loads);
        for (std::size_t k = 0; k < n_loads; ++k) {
            powers[k] = (w1.load[k] - w0.load[k]) / (w1.time - w0.time);
            m.loads[k].power = powers[k];
            m.loads[k].rms_current = std::sqrt(std::max(0.0, powers[k]) / load_resistance(topology.loops[k].load));
            m.loads[k].lock_time_cycles =
                first_hold(per_cycle[k], config.metrics.lock_fraction * powers[k], config.metrics.hold_cycles);
        }
        const auto ratios = power_ratios(powers);
        for (std::size_t k = 0; k < n_loads; ++k) m.loads[k].ratio = ratios[k];
        double best_rx = 0.0;
        for (std::size_t k = 0; k < n_loads; ++k) {
            if (!m.loads[k].interceptor) best_rx = std::max(best_rx, powers[k]);
        }
        m.no_field = std::all_of(powers.begin(), powers.end(), [](double p) { return !(p > 0.0); });

        if (h_loop) {
            const std::size_t h = *h_loop;
            m.lock_time_cycles = m.loads[h].lock_time_cycles;
            if (best_rx > 0.0) m.hacking_efficiency = powers[h] / best_rx;
            // Matched receiver: resonance closest to the hop frequency.
            std::optional<std::size_t> matched;
            for (std::size_t k = 0; k < n_loads; ++k) {
                if (m.loads[k].interceptor) continue;
                if (!matched || std::abs(m.loads[k].resonance - m.frequency) <
                                    std::abs(m.loads[*matched].resonance - m.frequency)) {
                    matched = k;
                }
            }
            if (matched) {
                m.matched_receiver = m.loads[*matched].coil;
                std::vector<double> current(per_cycle[h].size());
                const double r = load_resistance(topology.loops[h].load);
                for (std::size_t c = 0; c < current.size(); ++c) current[c] = std::sqrt(std::max(0.0, per_cycle[h][c]) / r);
                m.match_cycles = first_hold(current, config.metrics.lock_fraction * m.loads[*matched].rms_current,
                                            config.metrics.hold_cycles);
                if (m.lock_time_cycles && m.loads[*matched].lock_time_cycles) {
                    m.trail_cycles = *m.lock_time_cycles - *m.loads[*matched].lock_time_cycles;
                }
            }
            // Controller state at the end of the hop.
            const ControllerRecord* last = nullptr;
            for (const auto& rec : result.controller) {
                if (rec.time < m.start || rec.time > m.end) continue;
                last = &rec;
                if (!m.fsm_lock_cycles && rec.mode == ControllerMode::locked) {
                    int n = 0;
                    for (std::size_t c : idx) n += cycles[c].time < rec.time ? 1 : 0;
                    m.fsm_lock_cycles = n;
                }
                if (!rec.stale) m.phase_error = rec.delta_phi;
            }
            if (last) {
                // LOCKED dithers by one quantum, so report the steady-window mean.
                const double steady_from = cycles[idx[idx.size() - 1 - config.metrics.steady_cycles]].time;
                double sum = 0.0;
                int n = 0;
                for (const auto& rec : result.controller) {
                    if (rec.time < steady_from || rec.time > m.end || rec.mode != ControllerMode::locked) continue;
                    sum += rec.t_on;
                    ++n;
                }
                m.locked_t_on = n > 0 ? sum / n : last->t_on;
                m.final_mode = to_string(last->mode);
            }
            // Sensor lead over the C_H1 voltage in the steady window.
            double acc = 0.0;
            int count = 0;
            for (std::size_t c = idx.size() - 1 - config.metrics.steady_cycles; c + 1 < idx.size(); ++c) {
                const double t_vs = cycles[idx[c]].time;
                const auto it = std::lower_bound(vh1_crossings.begin(), vh1_crossings.end(), t_vs);
                if (it == vh1_crossings.end() || *it - t_vs >= period) continue;
                acc += (*it - t_vs) / period * 360.0;
                ++count;
            }
            if (count > 0) m.sensor_lead_over_vh1_deg = acc / count;
        }

        if (options.trace) {
            const auto& tr = result.trace;
            bool have = true;
            for (const auto& name : engine.layout().names) have = have && tr.find(name).has_value();
            for (const char* e : {"E_src", "E_coil", "E_dev", "E_stored"}) have = have && tr.find(e).has_value();
            for (const auto& l : topology.loops) have = have && tr.find("E_load_" + l.coil).has_value();
            if (have && h_loop) {
                try {
                    const auto audit = energy_audit(tr, topology, engine.layout(), w0.time, w1.time);
                    m.peak_energy_mismatch = audit.peaks[*h_loop].relative_mismatch();
                } catch (const ValidationError&) {
                    // Trace too sparse for the window.
                }
            }
            for (std::size_t k = 0; k < n_loads; ++k) {
                if (topology.loops[k].load.kind != LoadKind::rectified) continue;
                const auto bc = tr.find("B_" + topology.loops[k].coil);
                const auto ic = tr.find(engine.layout().names[engine.layout().loops[k].current]);
                if (!bc || !ic) continue;
                const auto [lo, hi2] = tr.window(m.start, m.end);
                for (std::size_t r = lo; r < hi2; ++r) {
                    if (tr.value(r, *bc) * tr.value(r, *ic) < -1e-9) m.reverse_rectifier_current = true;
                }
            }
        }
        report.hops.push_back(std::move(m));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

namespace {

SweepRow row_from(const HopMetrics& m) {
    SweepRow r;
    r.frequency = m.frequency;
    for (const auto& l : m.loads) {
        r.power.push_back(l.power);
        r.ratio.push_back(l.ratio);
    }
    r.hacking_efficiency = m.hacking_efficiency;
    r.locked_t_on = m.locked_t_on;
    return r;
}

}  // namespace

SweepResult sweep_frequencies(const ScenarioConfig& input, double f_lo, double f_hi, double step,
                              std::optional<SweepMode> mode_override, std::optional<unsigned> threads_override) {
    if (!(step > 0.0)) throw ValidationError("sweep step must be positive");
    if (!(f_lo > 0.0) || !(f_hi >= f_lo)) throw ValidationError("sweep needs 0 < from <= to");
    ScenarioConfig base = input;
    base.finalize();
    const SweepMode mode = mode_override.value_or(base.sweep.mode);
    std::vector<double> freqs;
    for (long long k = 0;; ++k) {
        const double f = f_lo + static_cast<double>(k) * step;
        if (f > f_hi * (1.0 + 1e-12)) break;
        freqs.push_back(f);
    }
    const double cycles = static_cast<double>(base.sweep.cycles_per_point);

    SweepResult out;
    {
        std::vector<std::string> names;
        if (base.interceptor) names.push_back(base.interceptor->coil);
        for (const auto& r : base.receivers) names.push_back(r.coil);
        out.loads = names;
    }

    if (mode == SweepMode::persistent) {
        ScenarioConfig c = base;
        c.hops.clear();
        double t = 0.0;
        for (double f : freqs) {
            c.hops.push_back({t, f});
            t += cycles / f;
        }
        c.simulation.end_time = t;
        c.simulation.dt = base.simulation.dt;
        if (!c.simulation.dt) c.simulation.dt = SimConfig::defaults_for(*std::max_element(freqs.begin(), freqs.end())).dt;
        const auto run = run_scenario(c, RunOptions{false});
        for (const auto& m : run.report.hops) out.rows.push_back(row_from(m));
        return out;
    }

    out.rows.resize(freqs.size());
    unsigned n_threads = threads_override.value_or(base.sweep.threads);
    if (n_threads == 0) n_threads = std::max(1U, std::thread::hardware_concurrency());
    n_threads = std::min<unsigned>(n_threads, static_cast<unsigned>(freqs.size()));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= freqs.size()) return;
            try {
                ScenarioConfig c = base;
                c.hops = {{0.0, freqs[i]}};
                c.simulation.end_time = cycles / freqs[i];
                const auto run = run_scenario(c, RunOptions{false});
                out.rows[i] = row_from(run.report.hops.front());
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

std::vector<TuneRow> tune_table(const ScenarioConfig& input, std::size_t points) {
    ScenarioConfig c = input;
    c.finalize();
    if (!c.interceptor) throw ValidationError("tune-table needs an interceptor");
    if (points < 2) throw ValidationError("tune table needs at least two points");
    const auto range = *c.tunable();
    const auto& p = *c.interceptor->controller.parameters;
    std::vector<TuneRow> rows;
    for (std::size_t i = 0; i < points; ++i) {
        const double f = range.f_min + (range.f_max - range.f_min) * static_cast<double>(i) / static_cast<double>(points - 1);
        rows.push_back({f, init_t_on(f, p.inductance, p.c_h1, p.c_h2)});
    }
    return rows;
}

}  // namespace wptsim
