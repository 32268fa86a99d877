#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wptsim/transient_engine.hpp"

#include <algorithm>
#include <cmath>

using namespace wptsim;

namespace {

LoadModel resistor(double r) {
    LoadModel l;
    l.resistance = r;
    return l;
}

// Transmitter, sensor and one receiver loop with a fixed capacitor.
CircuitTopology receiver_link(double c, double r_load, double k_tr = 0.1) {
    CircuitTopology t;
    t.link = build_link_model({{"T", 140e-6, 0.1}, {"S", 1e-6, 0.1}, {"R", 93e-6, 0.1}},
                              {{"T", "R", std::nullopt, k_tr}, {"T", "S", std::nullopt, 0.05},
                               {"R", "S", std::nullopt, 0.02}});
    t.drive = {1.0, 100e3, 0.0};
    t.transmitter = "T";
    t.sensor = "S";
    t.loops.push_back({"R", FixedCapacitor{c}, resistor(r_load)});
    return t;
}

CircuitTopology switched_link(double r_load, double r_on = 0.0, double drop = 0.0) {
    CircuitTopology t;
    t.link = build_link_model({{"T", 140e-6, 0.1}, {"S", 1e-6, 0.1}, {"H", 93e-6, 0.1}},
                              {{"T", "H", std::nullopt, 0.1}, {"T", "S", std::nullopt, 0.05},
                               {"H", "S", std::nullopt, 0.02}});
    t.drive = {1.0, 100e3, 0.0};
    t.transmitter = "T";
    t.sensor = "S";
    t.loops.push_back({"H", SwitchedCapacitorBranch{5e-9, 100e-9, r_on, drop}, resistor(r_load)});
    return t;
}

SimConfig fine(double dt) {
    SimConfig c;
    c.dt = dt;
    c.event_tolerance = 1e-13;
    return c;
}

double max_abs(const std::vector<double>& v, std::size_t from = 0) {
    double m = 0.0;
    for (std::size_t i = from; i < v.size(); ++i) m = std::max(m, std::abs(v[i]));
    return m;
}

}  // namespace

TEST_CASE("drive program is phase continuous across hops") {
    const DriveProgram d(2.0, 0.0, {{0.0, 100e3}, {33.3e-6, 60e3}});
    CHECK(d.frequency(10e-6) == 100e3);
    CHECK(d.frequency(40e-6) == 60e3);
    CHECK(d.current(33.3e-6 - 1e-12) == doctest::Approx(d.current(33.3e-6 + 1e-12)).epsilon(1e-6));
    CHECK(d.slope(0.0) == doctest::Approx(2.0 * 2.0 * kPi * 100e3));
    CHECK(d.next_hop_after(0.0).value() == doctest::Approx(33.3e-6));
    CHECK_FALSE(d.next_hop_after(40e-6).has_value());
    CHECK(d.max_frequency() == 100e3);
}

TEST_CASE("time step validation") {
    SimConfig c;
    c.dt = 1e-7;
    c.event_tolerance = 1e-12;
    CHECK_NOTHROW(c.validate(50e3));
    CHECK_THROWS_AS(c.validate(100e3), ValidationError);  // 1e-7 > 10 us / 200
    c.dt = -1.0;
    CHECK_THROWS_AS(c.validate(1e3), ValidationError);
    const auto d = SimConfig::defaults_for(250e3);
    CHECK(d.dt == doctest::Approx(4e-9));
}

TEST_CASE("zero crossing localisation of a sinusoid") {
    const double f = 123e3;
    auto s = [f](double t) { return std::sin(2.0 * kPi * f * t); };
    const double t = locate_event(s, 0.4 / f, 0.6 / f, 1e-15);
    CHECK(std::abs(t - 0.5 / f) < 2e-15);
}

TEST_CASE("free RLC decay matches the analytic solution") {
    const double c = 10e-9;
    const double r = 0.1 + 20.0;
    const double l = 93e-6;
    auto topology = receiver_link(c, 20.0);
    topology.drive.amplitude = 0.0;
    const DriveProgram drive(0.0, 0.0, {{0.0, 100e3}});
    TransientEngine engine(topology, drive, fine(1e-9));
    CircuitState s = engine.state();
    s.x(0) = 1.0;
    engine.set_state(s);
    engine.advance_to(20e-6);

    const double t = engine.state().time;
    const double alpha = r / (2.0 * l);
    const double wd = std::sqrt(1.0 / (l * c) - alpha * alpha);
    const double expected = std::exp(-alpha * t) * (std::cos(wd * t) - alpha / wd * std::sin(wd * t));
    CHECK(engine.state().x(0) == doctest::Approx(expected).epsilon(1e-6));
    const double v_expected = std::exp(-alpha * t) * std::sin(wd * t) / (wd * c);
    CHECK(engine.state().x(1) == doctest::Approx(v_expected).epsilon(1e-6));
}

TEST_CASE("driven resonant receiver reaches the phasor amplitude") {
    const double l = 93e-6;
    const double c = 10e-9;
    const double f = resonant_frequency(l, c);
    auto topology = receiver_link(c, 10.0);
    topology.drive.frequency = f;
    const DriveProgram drive(1.0, 0.0, {{0.0, f}});
    TransientEngine engine(topology, drive, SimConfig::defaults_for(f));
    engine.enable_trace(1, {"I_R"});
    engine.advance_to(400e-6);
    const auto i = engine.trace().column("I_R");
    const double m = topology.link.mutual("T", "R");
    const double expected = 2.0 * kPi * f * m * 1.0 / (10.0 + 0.1);
    const std::size_t last_period = static_cast<std::size_t>(std::ceil(1.0 / f / engine.trace().sample_interval()));
    CHECK(max_abs(i, i.size() - last_period) == doctest::Approx(expected).epsilon(1e-3));
}

TEST_CASE("always-on switch reproduces the fixed parallel capacitor") {
    const double f = 60e3;
    const DriveProgram drive(1.0, 0.0, {{0.0, f}});
    const SimConfig cfg = SimConfig::defaults_for(f);

    auto fixed = receiver_link(105e-9, 50.0);
    fixed.link = build_link_model({{"T", 140e-6, 0.1}, {"S", 1e-6, 0.1}, {"H", 93e-6, 0.1}},
                                  {{"T", "H", std::nullopt, 0.1}, {"T", "S", std::nullopt, 0.05},
                                   {"H", "S", std::nullopt, 0.02}});
    fixed.loops[0].coil = "H";
    TransientEngine a(fixed, drive, cfg);
    a.enable_trace(1, {"I_H", "V_S"});
    a.advance_to(100e-6);

    TransientEngine b(switched_link(50.0), drive, cfg);
    b.set_gate_schedule(0, GateSchedule::always_on(1.0));
    b.enable_trace(1, {"I_H", "V_S"});
    b.advance_to(100e-6);

    const auto ia = a.trace().column("I_H");
    const auto ib = b.trace().column("I_H");
    REQUIRE(ia.size() == ib.size());
    double diff = 0.0;
    for (std::size_t k = 0; k < ia.size(); ++k) diff = std::max(diff, std::abs(ia[k] - ib[k]));
    CHECK(diff <= 1e-9 * max_abs(ia));
    CHECK(a.state().x(1) == doctest::Approx(b.state().x(1)).epsilon(1e-9));
}

TEST_CASE("sensor voltage carries the interceptor back-EMF with a negative sign") {
    const auto topology = switched_link(50.0);
    const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
    TransientEngine engine(topology, drive, SimConfig::defaults_for(100e3));
    const double m_ts = topology.link.mutual("T", "S");
    const double m_hs = topology.link.mutual("H", "S");
    for (double t : {3.3e-6, 17.1e-6, 42.5e-6}) {
        engine.advance_to(t);
        const double slope = drive.slope(engine.state().time);
        const double di = engine.derivative()(0);
        CHECK(engine.probe("V_S") == doctest::Approx(m_ts * slope - m_hs * di).epsilon(1e-12));
        CHECK(engine.probe("V_S") - m_ts * slope == doctest::Approx(-m_hs * di).epsilon(1e-9));
    }
}

TEST_CASE("upward crossings of the sensor voltage without a secondary") {
    CircuitTopology t;
    t.link = build_link_model({{"T", 140e-6, 0.1}, {"S", 1e-6, 0.1}, {"R", 93e-6, 0.1}},
                              {{"T", "S", std::nullopt, 0.05}});
    t.drive = {1.0, 100e3, 0.0};
    t.transmitter = "T";
    t.sensor = "S";
    t.loops.push_back({"R", FixedCapacitor{10e-9}, resistor(10.0)});
    const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
    SimConfig cfg = SimConfig::defaults_for(100e3);
    cfg.event_tolerance = 1e-13;
    TransientEngine engine(t, drive, cfg);
    engine.watch_upward_crossing("V_S");
    std::vector<double> crossings;
    engine.set_observer([&](const Event& e, TransientEngine&) {
        if (e.kind == EventKind::signal_zero_cross) crossings.push_back(e.time);
    });
    engine.advance_to(35e-6);
    // V_S = M*A*w*cos(w t): upward zero crossings at 3T/4 + kT.
    REQUIRE(crossings.size() == 3);
    for (std::size_t k = 0; k < crossings.size(); ++k) {
        CHECK(std::abs(crossings[k] - (7.5e-6 + 10e-6 * static_cast<double>(k))) < 1e-11);
    }
}

TEST_CASE("gate edges become events at the scheduled times") {
    const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
    TransientEngine engine(switched_link(50.0), drive, SimConfig::defaults_for(100e3));
    GateSchedule s{{{2.0e-6, 4.5e-6, GateMask::positive}, {7.3e-6, 9.1e-6, GateMask::negative}}, false};
    engine.set_gate_schedule(0, s);
    engine.advance_to(12e-6);
    std::vector<double> edges;
    for (const auto& e : engine.events()) {
        if (e.kind == EventKind::gate_on || e.kind == EventKind::gate_off) edges.push_back(e.time);
    }
    REQUIRE(edges.size() == 4);
    CHECK(edges[0] == doctest::Approx(2.0e-6).epsilon(1e-12));
    CHECK(edges[1] == doctest::Approx(4.5e-6).epsilon(1e-12));
    CHECK(edges[2] == doctest::Approx(7.3e-6).epsilon(1e-12));
    CHECK(edges[3] == doctest::Approx(9.1e-6).epsilon(1e-12));
    CHECK(engine.probe("G_H") == 0.0);
}

TEST_CASE("energy bookkeeping closes") {
    SUBCASE("ideal switch with charge sharing") {
        const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
        TransientEngine engine(switched_link(50.0), drive, SimConfig::defaults_for(100e3));
        GateSchedule s;
        for (int k = 0; k < 20; ++k) {
            const double c = 2.5e-6 + 5e-6 * k;
            s.windows.push_back({c - 1.5e-6, c + 1.5e-6, k % 2 == 0 ? GateMask::positive : GateMask::negative});
        }
        engine.set_gate_schedule(0, s);
        engine.advance_to(100e-6);
        const auto& e = engine.energies();
        const double balance = e.source - e.coil_loss - e.device_loss - e.load[0] - engine.probe("E_stored");
        CHECK(std::abs(balance) < 1e-6 * e.source);
        CHECK(e.load[0] > 0.0);
    }
    SUBCASE("lossy switch") {
        const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
        TransientEngine engine(switched_link(50.0, 0.05, 0.7), drive, SimConfig::defaults_for(100e3));
        engine.set_gate_schedule(0, GateSchedule::always_on(1.0));
        engine.advance_to(100e-6);
        const auto& e = engine.energies();
        const double balance = e.source - e.coil_loss - e.device_loss - e.load[0] - engine.probe("E_stored");
        CHECK(std::abs(balance) < 1e-6 * e.source);
        CHECK(e.device_loss > 0.0);
    }
}

TEST_CASE("bridge rectifier never conducts backwards") {
    CircuitTopology t = receiver_link(10e-9, 50.0);
    t.loops[0].load.kind = LoadKind::rectified;
    t.loops[0].load.filter_capacitance = 1e-6;
    t.loops[0].load.diode_drop = 0.3;
    const double f = resonant_frequency(93e-6, 10e-9);
    const DriveProgram drive(3.0, 0.0, {{0.0, f}});
    TransientEngine engine(t, drive, SimConfig::defaults_for(f));
    engine.enable_trace(1, {"I_R", "B_R", "V_RDC"});
    engine.advance_to(200e-6);
    const auto i = engine.trace().column("I_R");
    const auto b = engine.trace().column("B_R");
    const auto v = engine.trace().column("V_RDC");
    bool reverse = false;
    for (std::size_t k = 0; k < i.size(); ++k) {
        if (b[k] * i[k] < -1e-9) reverse = true;
        if (b[k] == 0.0 && std::abs(i[k]) > 1e-9) reverse = true;
    }
    CHECK_FALSE(reverse);
    CHECK(v.back() > 0.5);
}

TEST_CASE("identical runs are bit-identical") {
    auto run = [] {
        const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}, {50e-6, 70e3}});
        TransientEngine engine(switched_link(50.0, 0.05, 0.7), drive, SimConfig::defaults_for(100e3));
        GateSchedule s;
        for (int k = 0; k < 30; ++k) {
            const double c = 2.5e-6 + 5e-6 * k;
            s.windows.push_back({c - 1e-6, c + 1e-6, k % 2 == 0 ? GateMask::positive : GateMask::negative});
        }
        engine.set_gate_schedule(0, s);
        engine.enable_trace(3);
        engine.advance_to(120e-6);
        return engine.trace();
    };
    const auto a = run();
    const auto b = run();
    REQUIRE(a.rows() == b.rows());
    bool same = true;
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.columns().size(); ++c) same = same && a.value(r, c) == b.value(r, c);
    }
    CHECK(same);
}

TEST_CASE("unknown probe names are rejected") {
    const DriveProgram drive(1.0, 0.0, {{0.0, 100e3}});
    TransientEngine engine(switched_link(50.0), drive, SimConfig::defaults_for(100e3));
    CHECK_THROWS_AS((void)engine.probe("V_nope"), ValidationError);
    const auto names = engine.probe_names();
    CHECK(std::find(names.begin(), names.end(), "V_HR") != names.end());
    CHECK(std::find(names.begin(), names.end(), "E_load_H") != names.end());
}
