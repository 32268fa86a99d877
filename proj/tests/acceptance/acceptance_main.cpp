// Acceptance suite. One PASS/FAIL line per criterion; exit status is the number
// of failed criteria. `--criterion N` runs a single one.

#include "wptsim/controller.hpp"
#include "wptsim/errors.hpp"
#include "wptsim/scenario.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace wptsim;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        if (!ok) pass = false;
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    }
    void info(const std::string& what) { notes.push_back("     " + what); }
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

json scenario_json(const std::string& name) {
    std::ifstream in(std::string(WPTSIM_SCENARIO_DIR) + "/" + name);
    if (!in) throw SimulationError("missing scenario " + name);
    return json::parse(in);
}

ScenarioConfig config_from(const json& j) {
    auto c = load_scenario_text(j.dump());
    c.finalize();
    return c;
}

const HopMetrics& hop_at(const RunResult& r, double f) {
    for (const auto& h : r.report.hops) {
        if (std::abs(h.frequency - f) < 1.0) return h;
    }
    throw SimulationError(fmt("no hop at %g Hz", f));
}

std::string opt(const std::optional<int>& v) { return v ? std::to_string(*v) : std::string("none"); }

// Transmitter, sensor and one interceptor loop; no receivers.
struct LoopParams {
    double l = 93e-6;
    double c1 = 5e-9;
    double c2 = 100e-9;
    double r = 50.0;
    double k = 0.1;
};

json oracle_scenario(const LoopParams& p, double f, double cycles, const json& controller) {
    json j = {
        {"schema_version", 1},
        {"name", "oracle"},
        {"coils",
         {{{"name", "T"}, {"inductance", 140e-6}},
          {{"name", "S"}, {"inductance", 1e-6}},
          {{"name", "H"}, {"inductance", p.l}}}},
        {"couplings",
         {{{"a", "T"}, {"b", "H"}, {"k", p.k}},
          {{"a", "T"}, {"b", "S"}, {"k", 0.05}},
          {{"a", "H"}, {"b", "S"}, {"k", 0.02}}}},
        {"transmitter", "T"},
        {"sensor", "S"},
        {"drive", {{"amplitude", 1.0}, {"phase", 0.0}}},
        {"hops", {{{"start", 0.0}, {"frequency", f}}}},
        {"interceptor",
         {{"coil", "H"},
          {"c_h1", p.c1},
          {"c_h2", p.c2},
          {"load", {{"kind", "resistive"}, {"resistance", p.r}}},
          {"controller", controller}}},
        {"receivers", json::array()},
        {"simulation", {{"end_time", cycles / f}, {"sample_every", 10}}},
        {"metrics", {{"steady_cycles", 10}}},
    };
    return j;
}

constexpr double kOracleCycles = 40.0;
constexpr std::size_t kPhaseAverage = 10;

// Mean steady phase error (rad) with the on-time held fixed.
double open_loop_phase(const LoopParams& p, double f, double t_on) {
    const auto cfg = config_from(oracle_scenario(p, f, kOracleCycles, {{"parameter_free", true}, {"fixed_t_on", t_on}}));
    const auto run = run_scenario(cfg, RunOptions{false});
    double sum = 0.0;
    std::size_t n = 0;
    for (auto it = run.controller.rbegin(); it != run.controller.rend() && n < kPhaseAverage; ++it) {
        if (it->stale) continue;
        sum += it->delta_phi;
        ++n;
    }
    if (n == 0) throw SimulationError(fmt("no phase measurement at %g Hz, t_on %g s", f, t_on));
    return sum / static_cast<double>(n);
}

// Brute-force zero of the open-loop phase error over [0, T/2]: a grid scan for
// the sign change, then bisection to a small fraction of the step quantum.
std::optional<double> zero_phase_t_on(const LoopParams& p, double f, std::size_t grid = 16) {
    const double half = 0.5 / f;
    const double quantum = step_quantum(1.0 / f, RegulatorConfig{});
    double lo = 0.0;
    double g_lo = open_loop_phase(p, f, lo);
    double hi = -1.0;
    for (std::size_t k = 1; k <= grid; ++k) {
        const double t = half * static_cast<double>(k) / static_cast<double>(grid);
        const double g = open_loop_phase(p, f, t);
        if ((g_lo > 0.0) != (g > 0.0)) {
            hi = t;
            break;
        }
        lo = t;
        g_lo = g;
    }
    if (hi < 0.0) return std::nullopt;
    while (hi - lo > 0.01 * quantum) {
        const double mid = 0.5 * (lo + hi);
        const double g = open_loop_phase(p, f, mid);
        if ((g > 0.0) == (g_lo > 0.0)) {
            lo = mid;
            g_lo = g;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

// Closed-loop run; returns the controller history.
std::vector<ControllerRecord> closed_loop(const LoopParams& p, double f, double cycles, const json& controller) {
    const auto cfg = config_from(oracle_scenario(p, f, cycles, controller));
    return run_scenario(cfg, RunOptions{false}).controller;
}

const json kParameterised = {{"parameter_free", false}};
const json kParameterFree = {{"parameter_free", true}};

// ---------------------------------------------------------------------------

Outcome criterion_1() {
    Outcome o;
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> log_u(0.0, 1.0);
    auto draw = [&](double lo, double hi) { return lo * std::pow(hi / lo, log_u(rng)); };
    double worst_hi = 0.0;
    double worst_lo = 0.0;
    std::vector<std::array<double, 3>> sets{{93e-6, 5e-9, 100e-9}, {37e-6, 10e-9, 122e-9}};
    for (int k = 0; k < 200; ++k) sets.push_back({draw(1e-6, 1e-3), draw(100e-12, 1e-6), draw(100e-12, 10e-6)});
    for (const auto& [l, c1, c2] : sets) {
        const double f_max = 1.0 / (2.0 * kPi * std::sqrt(l * c1));
        const double f_min = 1.0 / (2.0 * kPi * std::sqrt(l * (c1 + c2)));
        worst_hi = std::max(worst_hi, std::abs(init_t_on(f_max, l, c1, c2)) * 2.0 * f_max);
        worst_lo = std::max(worst_lo, std::abs(init_t_on(f_min, l, c1, c2) * 2.0 * f_min - 1.0));
    }
    o.check(worst_hi <= 1e-9, fmt("T_ON(f_max) = 0: worst |T_ON|*2f = %.3g over %zu parameter sets", worst_hi, sets.size()));
    o.check(worst_lo <= 1e-9, fmt("T_ON(f_min) = 1/(2f): worst relative error %.3g", worst_lo));
    return o;
}

Outcome criterion_2() {
    Outcome o;
    const LoopParams p;
    for (double f : {60e3, 100e3, 150e3, 200e3}) {
        const double quantum = step_quantum(1.0 / f, RegulatorConfig{});
        const auto oracle = zero_phase_t_on(p, f);
        if (!oracle) {
            o.check(false, fmt("%.0f kHz: no zero-phase on-time inside [0, T/2]", f / 1e3));
            continue;
        }
        const auto h = closed_loop(p, f, 200.0, kParameterFree);
        const double final_t_on = h.back().t_on;
        double worst_tail = 0.0;
        for (std::size_t k = h.size() - 20; k < h.size(); ++k) worst_tail = std::max(worst_tail, std::abs(h[k].t_on - *oracle));
        o.info(fmt("%.0f kHz: oracle %.5g s, closed-form %.5g s, closed loop %.5g s (%s), quantum %.4g s", f / 1e3,
                   *oracle, init_t_on(f, p.l, p.c1, p.c2), final_t_on, to_string(h.back().mode), quantum));
        o.check(std::abs(final_t_on - *oracle) <= quantum,
                fmt("%.0f kHz: |closed loop - oracle| = %.3f quanta <= 1 (worst of last 20 ticks %.3f)", f / 1e3,
                    std::abs(final_t_on - *oracle) / quantum, worst_tail / quantum));
    }
    return o;
}

Outcome criterion_3() {
    Outcome o;
    auto j = scenario_json("fast_lock_hop.json");
    j["interceptor"]["controller"]["parameter_free"] = true;
    const auto run = run_scenario(config_from(j));
    const auto& a = hop_at(run, 233e3);
    const auto& b = hop_at(run, 51e3);
    o.info(fmt("233 kHz: match=%s lock=%s efficiency=%.3f mode=%s", opt(a.match_cycles).c_str(),
               opt(a.lock_time_cycles).c_str(), a.hacking_efficiency.value_or(0.0), a.final_mode.c_str()));
    o.info(fmt("51 kHz: match=%s lock=%s efficiency=%.3f mode=%s", opt(b.match_cycles).c_str(),
               opt(b.lock_time_cycles).c_str(), b.hacking_efficiency.value_or(0.0), b.final_mode.c_str()));
    o.check(a.match_cycles && *a.match_cycles <= 10, "233 kHz: >= 90% of the matched receiver current within hard bound 10");
    o.info(std::string("233 kHz target <= 7: ") + (a.match_cycles && *a.match_cycles <= 7 ? "met" : "missed"));
    o.check(b.match_cycles && *b.match_cycles <= 12, "51 kHz after the hop: within hard bound 12");
    o.info(std::string("51 kHz target <= 6: ") + (b.match_cycles && *b.match_cycles <= 6 ? "met" : "missed"));
    return o;
}

Outcome criterion_4() {
    Outcome o;
    const auto run = run_scenario(config_from(scenario_json("bank_hop.json")));
    const auto& h = hop_at(run, 75e3);
    o.info(fmt("75 kHz: matched=%s hacker lock=%s trail=%s efficiency=%.3f", h.matched_receiver.value_or("?").c_str(),
               opt(h.lock_time_cycles).c_str(), opt(h.trail_cycles).c_str(), h.hacking_efficiency.value_or(0.0)));
    o.check(h.trail_cycles.has_value() && *h.trail_cycles <= 5, "hacker trails the dedicated 75 kHz receiver by <= 5 cycles");
    return o;
}

Outcome criterion_6() {
    Outcome o;
    for (const char* name : {"fast_lock_hop.json", "bank_hop.json", "rectified.json"}) {
        auto j = scenario_json(name);
        j["lossy"] = false;
        const auto run = run_scenario(config_from(j));
        for (const auto& h : run.report.hops) {
            const std::string tag = fmt("%s @ %.0f kHz", name, h.frequency / 1e3);
            o.check(h.max_cycle_energy_residual < 0.005,
                    fmt("%s: worst per-cycle energy residual %.3g < 0.5%%", tag.c_str(), h.max_cycle_energy_residual));
            if (run.report.hops.size() && h.locked_t_on) {
                o.check(h.peak_energy_mismatch && *h.peak_energy_mismatch < 0.05,
                        fmt("%s: peak L/C energy mismatch %.3g < 5%% (mode %s)", tag.c_str(),
                            h.peak_energy_mismatch.value_or(-1.0), h.final_mode.c_str()));
            }
            o.check(!h.reverse_rectifier_current, tag + ": no reverse rectifier current");
        }
    }
    return o;
}

// Fundamental-frequency effective capacitance of the switched network:
// |I1| / (w |V1|) over the last ten periods of a fixed on-time run.
double effective_capacitance(const LoopParams& p, double f, double t_on) {
    json j = oracle_scenario(p, f, kOracleCycles, {{"parameter_free", true}, {"fixed_t_on", t_on}});
    j["simulation"]["probes"] = {"I_H", "V_H1"};
    j["simulation"]["sample_every"] = 1;
    const auto run = run_scenario(config_from(j));
    const auto& tr = run.trace;
    const double t1 = tr.times().back();
    const auto [r0, r1] = tr.window(t1 - 10.0 / f, t1);
    const auto i = tr.column("I_H");
    const auto v = tr.column("V_H1");
    const double w = 2.0 * kPi * f;
    double ir = 0, ii = 0, vr = 0, vi = 0;
    for (std::size_t k = r0; k < r1; ++k) {  // half-open: whole periods
        const double c = std::cos(w * tr.time(k));
        const double s = std::sin(w * tr.time(k));
        ir += i[k] * c;
        ii += i[k] * s;
        vr += v[k] * c;
        vi += v[k] * s;
    }
    return std::hypot(ir, ii) / (w * std::hypot(vr, vi));
}

Outcome criterion_7() {
    Outcome o;
    const RegulatorConfig reg;

    // Sign of the on-time correction under forced detuning.
    std::mt19937_64 rng(20240611);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto log_draw = [&](double lo, double hi) { return lo * std::pow(hi / lo, u(rng)); };
    int correct = 0;
    for (int n = 0; n < 20; ++n) {
        LoopParams p;
        p.l = log_draw(30e-6, 200e-6);
        p.c1 = log_draw(2e-9, 20e-9);
        p.c2 = p.c1 * log_draw(3.0, 30.0);
        p.k = 0.05 + 0.15 * u(rng);
        const double arg = 0.25 + 0.5 * u(rng);  // keeps the zero-phase on-time interior
        const double s1 = 1.0 / p.c1;
        const double s12 = 1.0 / (p.c1 + p.c2);
        const double f = std::sqrt((s1 - arg * (s1 - s12)) / p.l) / (2.0 * kPi);
        p.r = 2.0 * kPi * f * p.l / (2.0 + 8.0 * u(rng));  // loop Q between 2 and 10
        const double half = 0.5 / f;
        const auto oracle = zero_phase_t_on(p, f, 12);
        if (!oracle) {
            o.check(false, fmt("point %d (%.1f kHz): no zero-phase on-time", n, f / 1e3));
            continue;
        }
        const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
        double detuned = *oracle + sign * (0.05 + 0.25 * u(rng)) * half;
        detuned = std::clamp(detuned, 0.02 * half, 0.98 * half);
        const double phi = open_loop_phase(p, f, detuned);
        RegulatorState s;
        s.mode = ControllerMode::track;
        s.t_on = detuned;
        const auto next = regulate_step({phi, false}, s, 1.0 / f, reg);
        const double move = next.t_on - detuned;
        const bool ok = move != 0.0 && (move > 0.0) == (*oracle > detuned);
        if (ok) ++correct;
        o.info(fmt("point %2d: f=%.1f kHz L=%.3g C1=%.3g C2=%.3g R=%.3g oracle=%.4g detuned=%.4g dphi=%+.2f deg move=%+.3g %s",
                   n, f / 1e3, p.l, p.c1, p.c2, p.r, *oracle, detuned, phi * 180.0 / kPi, move, ok ? "" : "WRONG"));
    }
    o.check(correct == 20, fmt("correction points toward the zero-phase on-time at %d/20 random operating points", correct));

    // Effective capacitance grows with the on-time.
    {
        const LoopParams p;
        const double f = 100e3;
        const double half = 0.5 / f;
        std::vector<double> c_eff;
        for (int k = 0; k <= 16; ++k) c_eff.push_back(effective_capacitance(p, f, half * k / 16.0));
        bool monotone = true;
        for (std::size_t k = 1; k < c_eff.size(); ++k) monotone = monotone && c_eff[k] > c_eff[k - 1];
        std::string row;
        for (double c : c_eff) row += fmt(" %.4g", c * 1e9);
        o.info("C_eff (nF) at T_ON = k/16 * T/2:" + row);
        o.check(monotone, "C_eff(T_ON) strictly increasing over 17 on-times");
        o.info(fmt("endpoints at 100 kHz: %.4g nF and %.4g nF (full conduction is only in phase with I_H at f_min)",
                   c_eff.front() * 1e9, c_eff.back() * 1e9));
        const double f_min = 1.0 / (2.0 * kPi * std::sqrt(p.l * (p.c1 + p.c2)));
        const double f_max = 1.0 / (2.0 * kPi * std::sqrt(p.l * p.c1));
        const double c_open = effective_capacitance(p, f_max, 0.0);
        const double c_full = effective_capacitance(p, f_min, 0.5 / f_min);
        o.check(std::abs(c_open / p.c1 - 1.0) < 0.01, fmt("C_eff(0) = C1 within 1%% at f_max (%.4g nF)", c_open * 1e9));
        o.check(std::abs(c_full / (p.c1 + p.c2) - 1.0) < 0.01,
                fmt("C_eff(T/2) = C1 + C2 within 1%% at f_min (%.4g nF)", c_full * 1e9));
    }

    // Parameter-free and closed-form-initialised controllers settle on the same on-time.
    {
        const LoopParams p;
        for (double f : {60e3, 100e3, 150e3, 200e3}) {
            const double quantum = step_quantum(1.0 / f, reg);
            const auto a = closed_loop(p, f, 200.0, kParameterFree).back();
            const auto b = closed_loop(p, f, 200.0, kParameterised).back();
            o.check(a.mode == ControllerMode::locked && b.mode == ControllerMode::locked &&
                        std::abs(a.t_on - b.t_on) <= quantum,
                    fmt("%.0f kHz: parameter-free %.5g s vs closed-form start %.5g s, %.2f quanta apart", f / 1e3, a.t_on,
                        b.t_on, std::abs(a.t_on - b.t_on) / quantum));
        }
        for (const char* name : {"fast_lock_hop.json", "bank_hop.json"}) {
            auto ja = scenario_json(name);
            auto jb = ja;
            ja["interceptor"]["controller"]["parameter_free"] = true;
            jb["interceptor"]["controller"]["parameter_free"] = false;
            const auto ra = run_scenario(config_from(ja), RunOptions{false});
            const auto rb = run_scenario(config_from(jb), RunOptions{false});
            for (std::size_t k = 0; k < ra.report.hops.size(); ++k) {
                const auto& ha = ra.report.hops[k];
                const auto& hb = rb.report.hops[k];
                const double quantum = step_quantum(1.0 / ha.frequency, reg);
                const bool ok = ha.locked_t_on && hb.locked_t_on && std::abs(*ha.locked_t_on - *hb.locked_t_on) <= quantum;
                o.check(ok, fmt("%s @ %.0f kHz: locked T_ON %.5g s vs %.5g s, %.2f quanta apart", name, ha.frequency / 1e3,
                                ha.locked_t_on.value_or(-1.0), hb.locked_t_on.value_or(-1.0),
                                std::abs(ha.locked_t_on.value_or(0.0) - hb.locked_t_on.value_or(0.0)) / quantum));
            }
        }
    }
    return o;
}

Outcome criterion_5() {
    Outcome o;
    auto cfg = config_from(scenario_json("bank_sweep.json"));
    cfg.lossy = true;
    cfg.finalize();
    const auto sweep = sweep_frequencies(cfg, 75e3, 220e3, 1e3);
    o.check(sweep.rows.size() == 146, fmt("%zu sweep points from 75 to 220 kHz", sweep.rows.size()));
    auto column = [&](const std::string& name) {
        const auto it = std::find(sweep.loads.begin(), sweep.loads.end(), name);
        if (it == sweep.loads.end()) throw SimulationError("sweep has no load " + name);
        return static_cast<std::size_t>(it - sweep.loads.begin());
    };
    const std::size_t h = 0;
    const std::size_t r75 = column("R75");
    const std::size_t r220 = column("R220");

    double worst = 1e9;
    double worst_f = 0.0;
    for (const auto& row : sweep.rows) {
        const double e = row.hacking_efficiency.value_or(0.0);
        if (e < worst) {
            worst = e;
            worst_f = row.frequency;
        }
    }
    o.check(worst >= 0.70, fmt("hacker / best receiver >= 0.70 everywhere (worst %.3f at %.0f kHz)", worst, worst_f / 1e3));

    auto row_at = [&](double f) -> const SweepRow& {
        for (const auto& r : sweep.rows) {
            if (std::abs(r.frequency - f) < 1.0) return r;
        }
        throw SimulationError("sweep point missing");
    };
    const auto& lo = row_at(75e3);
    const auto& hi = row_at(220e3);
    o.check(lo.ratio[r220] <= 0.05, fmt("R220 at 75 kHz: ratio %.4f <= 0.05", lo.ratio[r220]));
    o.check(hi.ratio[r75] <= 0.05, fmt("R75 at 220 kHz: ratio %.4f <= 0.05", hi.ratio[r75]));
    const auto& mid = row_at(150e3);
    const double ph = mid.power[h];
    o.check(mid.power[h] > mid.power[r75] && mid.power[r75] > mid.power[r220],
            fmt("150 kHz ordering hacker > R75 > R220 (1 : %.3f : %.3f)", mid.power[r75] / ph, mid.power[r220] / ph));
    return o;
}

// RMS over [t0, t1] by trapezoidal integration, so sample spacing does not matter.
double rms(const TraceBuffer& tr, const std::vector<double>& v, double t0, double t1) {
    const auto [lo, hi] = tr.window(t0, t1);
    double acc = 0.0;
    for (std::size_t k = lo; k + 1 < hi; ++k) {
        acc += 0.5 * (v[k] * v[k] + v[k + 1] * v[k + 1]) * (tr.time(k + 1) - tr.time(k));
    }
    return std::sqrt(acc / (tr.time(hi - 1) - tr.time(lo)));
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Outcome criterion_8() {
    Outcome o;
    namespace fs = std::filesystem;

    {
        const auto cfg = config_from(scenario_json("fast_lock_hop.json"));
        const auto root = fs::temp_directory_path() / "wptsim_acceptance_determinism";
        fs::remove_all(root);
        emit_outputs(run_scenario(cfg), cfg, root / "a");
        emit_outputs(run_scenario(cfg), cfg, root / "b");
        bool same = true;
        int files = 0;
        for (const auto& entry : fs::directory_iterator(root / "a")) {
            ++files;
            same = same && slurp(entry.path()) == slurp(root / "b" / entry.path().filename());
        }
        o.check(same && files >= 5, fmt("repeated run: %d output files byte-identical", files));
        fs::remove_all(root);
    }

    {
        auto cfg = config_from(scenario_json("bank_sweep.json"));
        const auto serial = sweep_to_csv(sweep_frequencies(cfg, 75e3, 220e3, 5e3, SweepMode::independent, 1));
        const auto parallel = sweep_to_csv(sweep_frequencies(cfg, 75e3, 220e3, 5e3, SweepMode::independent, 4));
        o.check(serial == parallel, "independent sweep: 1 thread and 4 threads byte-identical");
        const auto p1 = sweep_to_csv(sweep_frequencies(cfg, 75e3, 220e3, 5e3, SweepMode::persistent));
        const auto p2 = sweep_to_csv(sweep_frequencies(cfg, 75e3, 220e3, 5e3, SweepMode::persistent));
        o.check(p1 == p2, "persistent sweep: repeated runs byte-identical");
    }

    for (const char* name : {"fast_lock_hop.json", "bank_hop.json"}) {
        json j = scenario_json(name);
        j["simulation"]["sample_every"] = 1;
        auto coarse_cfg = config_from(j);
        const double dt = coarse_cfg.sim_config().dt;
        j["simulation"]["dt"] = 0.5 * dt;
        const auto fine_cfg = config_from(j);
        const auto coarse = run_scenario(coarse_cfg);
        const auto fine = run_scenario(fine_cfg);
        double worst = 0.0;
        std::string where;
        for (const auto& hop : coarse.report.hops) {
            const double t1 = hop.end;
            const double t0 = t1 - static_cast<double>(coarse_cfg.metrics.steady_cycles) / hop.frequency;
            for (const auto& col : coarse.trace.columns()) {
                if (col.rfind("I_", 0) != 0 && col.rfind("V_", 0) != 0) continue;
                const double a = rms(coarse.trace, coarse.trace.column(col), t0, t1);
                const double b = rms(fine.trace, fine.trace.column(col), t0, t1);
                if (!(a > 0.0)) continue;
                const double d = std::abs(b - a) / a;
                if (d > worst) {
                    worst = d;
                    where = fmt("%s at %.0f kHz", col.c_str(), hop.frequency / 1e3);
                }
            }
        }
        o.check(worst < 1e-3, fmt("%s: dt %.3g s -> %.3g s changes steady RMS by at most %.2e (%s)", name, dt,
                                  0.5 * dt, worst, where.c_str()));
    }
    return o;
}

// ---------------------------------------------------------------------------

struct Criterion {
    int id;
    const char* title;
    double budget_s;
    std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> list{
        {1, "on-time closed form endpoint identities", 1.0, criterion_1},
        {2, "closed-loop on-time against the brute-force oracle", 120.0, criterion_2},
        {3, "lock speed after start-up and after a hop", 30.0, criterion_3},
        {4, "hop response against the dedicated receiver", 30.0, criterion_4},
        {5, "sweep power ratios in lossy device mode", 300.0, criterion_5},
        {6, "energy invariants", 60.0, criterion_6},
        {7, "regulator properties", 180.0, criterion_7},
        {8, "determinism and time-step convergence", 120.0, criterion_8},
    };
    return list;
}

}  // namespace

int main(int argc, char** argv) {
    int only = 0;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--criterion" && i + 1 < argc) only = std::atoi(argv[++i]);
    }
    int failed = 0;
    bool ran = false;
    for (const auto& c : criteria()) {
        if (only && c.id != only) continue;
        ran = true;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.check(elapsed < c.budget_s, fmt("runtime %.2f s < %.0f s", elapsed, c.budget_s));
        for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
        std::printf("criterion %d: %s  %s (%.2f s)\n", c.id, o.pass ? "PASS" : "FAIL", c.title, elapsed);
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    if (!ran) {
        std::fprintf(stderr, "no criterion %d\n", only);
        return 1;
    }
    return failed;
}
