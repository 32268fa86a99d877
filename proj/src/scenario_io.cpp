#include "wptsim/errors.hpp"
#include "wptsim/scenario.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>

namespace wptsim {

using nlohmann::json;

namespace {

// Strict field access with a dotted path in every error message.
class Node {
public:
    Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

    [[nodiscard]] const std::string& path() const { return path_; }

    void require_object(std::initializer_list<const char*> allowed) const {
        if (!j_.is_object()) fail("must be an object");
        const std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& [key, value] : j_.items()) {
            if (!ok.count(key)) throw ValidationError(path_ + "." + key + ": unknown field");
        }
    }
    [[nodiscard]] bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
    [[nodiscard]] Node at(const char* key) const {
        if (!has(key)) throw ValidationError(path_ + "." + key + ": missing required field");
        return {j_.at(key), path_ + "." + key};
    }
    [[nodiscard]] std::vector<Node> items() const {
        if (!j_.is_array()) fail("must be an array");
        std::vector<Node> out;
        for (std::size_t i = 0; i < j_.size(); ++i) out.emplace_back(j_[i], path_ + "[" + std::to_string(i) + "]");
        return out;
    }
    [[nodiscard]] double number() const {
        if (!j_.is_number()) fail("must be a number");
        return j_.get<double>();
    }
    [[nodiscard]] long long integer() const {
        if (!j_.is_number_integer()) fail("must be an integer");
        return j_.get<long long>();
    }
    [[nodiscard]] std::size_t count() const {
        const long long v = integer();
        if (v < 0) fail("must be >= 0");
        return static_cast<std::size_t>(v);
    }
    [[nodiscard]] bool boolean() const {
        if (!j_.is_boolean()) fail("must be true or false");
        return j_.get<bool>();
    }
    [[nodiscard]] std::string string() const {
        if (!j_.is_string()) fail("must be a string");
        return j_.get<std::string>();
    }

    double number(const char* key, double fallback) const { return has(key) ? at(key).number() : fallback; }
    [[noreturn]] void fail(const std::string& what) const { throw ValidationError(path_ + ": " + what); }

private:
    const json& j_;
    std::string path_;
};

constexpr double kDeg = kPi / 180.0;

LoadModel parse_load(const Node& n) {
    n.require_object({"kind", "resistance", "filter_capacitance", "diode_drop"});
    LoadModel m;
    const std::string kind = n.has("kind") ? n.at("kind").string() : "resistive";
    if (kind == "resistive") {
        m.kind = LoadKind::resistive;
    } else if (kind == "rectified") {
        m.kind = LoadKind::rectified;
    } else {
        n.at("kind").fail("must be \"resistive\" or \"rectified\"");
    }
    m.resistance = n.number("resistance", m.resistance);
    m.filter_capacitance = n.number("filter_capacitance", 0.0);
    m.diode_drop = n.number("diode_drop", 0.0);
    return m;
}

ControllerConfig parse_controller(const Node& n) {
    n.require_object({"parameter_free", "deadband_deg", "gain", "max_step_fraction", "quantum_fraction", "lock_hold",
                      "fine_deadband_deg", "unlock_factor", "detect_window", "stability", "hop_threshold",
                      "horizon_periods", "blanking_fraction", "fixed_t_on"});
    ControllerConfig c;
    if (n.has("parameter_free")) c.parameter_free = n.at("parameter_free").boolean();
    auto& r = c.regulator;
    r.deadband = n.number("deadband_deg", r.deadband / kDeg) * kDeg;
    r.gain = n.number("gain", r.gain);
    r.max_step_fraction = n.number("max_step_fraction", r.max_step_fraction);
    r.quantum_fraction = n.number("quantum_fraction", r.quantum_fraction);
    if (n.has("lock_hold")) r.lock_hold = static_cast<int>(n.at("lock_hold").count());
    r.fine_deadband = n.number("fine_deadband_deg", r.fine_deadband / kDeg) * kDeg;
    r.unlock_factor = n.number("unlock_factor", r.unlock_factor);
    if (n.has("detect_window")) c.detect_window = n.at("detect_window").count();
    c.stability = n.number("stability", c.stability);
    c.hop_threshold = n.number("hop_threshold", c.hop_threshold);
    c.horizon_periods = n.number("horizon_periods", c.horizon_periods);
    c.blanking_fraction = n.number("blanking_fraction", c.blanking_fraction);
    if (n.has("fixed_t_on")) c.fixed_t_on = n.at("fixed_t_on").number();
    return c;
}

ScenarioConfig parse(const json& doc) {
    const Node root(doc, "$");
    // Derived quantities written by scenario_to_json are accepted and recomputed.
    root.require_object({"schema_version", "name", "coils", "couplings", "cross_coupling", "transmitter", "sensor",
                         "drive", "hops", "interceptor", "receivers", "lossy_device", "lossy", "simulation", "metrics",
                         "sweep", "derived"});
    ScenarioConfig c;
    c.schema_version = static_cast<int>(root.at("schema_version").integer());
    if (c.schema_version != kSchemaVersion) {
        root.at("schema_version").fail("unsupported version " + std::to_string(c.schema_version));
    }
    c.name = root.has("name") ? root.at("name").string() : "scenario";

    for (const auto& n : root.at("coils").items()) {
        n.require_object({"name", "inductance", "resistance"});
        c.coils.push_back(
            {n.at("name").string(), n.at("inductance").number(), n.number("resistance", kDefaultCoilResistance)});
    }
    if (root.has("couplings")) {
        for (const auto& n : root.at("couplings").items()) {
            n.require_object({"a", "b", "k", "mutual", "resolved_mutual", "resolved_k"});
            CouplingSpec s;
            s.a = n.at("a").string();
            s.b = n.at("b").string();
            if (n.has("k")) s.coefficient = n.at("k").number();
            if (n.has("mutual")) s.mutual = n.at("mutual").number();
            if (s.coefficient.has_value() == s.mutual.has_value()) n.fail("give exactly one of k or mutual");
            c.couplings.push_back(s);
        }
    }
    if (root.has("cross_coupling")) c.cross_coupling = root.at("cross_coupling").boolean();
    c.transmitter = root.at("transmitter").string();
    c.sensor = root.at("sensor").string();

    const Node drive = root.at("drive");
    drive.require_object({"amplitude", "phase"});
    c.amplitude = drive.at("amplitude").number();
    c.phase = drive.number("phase", 0.0);

    for (const auto& n : root.at("hops").items()) {
        n.require_object({"start", "frequency"});
        c.hops.push_back({n.at("start").number(), n.at("frequency").number()});
    }

    if (root.has("interceptor")) {
        const Node n = root.at("interceptor");
        n.require_object({"coil", "c_h1", "c_h2", "switch_on_resistance", "diode_drop", "load", "controller"});
        InterceptorSpec h;
        h.coil = n.at("coil").string();
        h.branch.c_h1 = n.at("c_h1").number();
        h.branch.c_h2 = n.at("c_h2").number();
        h.branch.switch_on_resistance = n.number("switch_on_resistance", 0.0);
        h.branch.diode_drop = n.number("diode_drop", 0.0);
        if (n.has("load")) h.load = parse_load(n.at("load"));
        if (n.has("controller")) h.controller = parse_controller(n.at("controller"));
        c.interceptor = h;
    }
    if (root.has("receivers")) {
        for (const auto& n : root.at("receivers").items()) {
            n.require_object({"coil", "capacitance", "load", "resonance"});
            ReceiverSpec r;
            r.coil = n.at("coil").string();
            r.capacitance = n.at("capacitance").number();
            if (n.has("load")) r.load = parse_load(n.at("load"));
            c.receivers.push_back(r);
        }
    }
    if (root.has("lossy_device")) {
        const Node n = root.at("lossy_device");
        n.require_object({"switch_on_resistance", "diode_drop"});
        c.lossy_device.switch_on_resistance = n.number("switch_on_resistance", c.lossy_device.switch_on_resistance);
        c.lossy_device.diode_drop = n.number("diode_drop", c.lossy_device.diode_drop);
    }
    if (root.has("lossy")) c.lossy = root.at("lossy").boolean();

    const Node sim = root.at("simulation");
    sim.require_object({"dt", "end_time", "event_tolerance", "sample_every", "probes"});
    if (sim.has("dt")) c.simulation.dt = sim.at("dt").number();
    c.simulation.end_time = sim.at("end_time").number();
    c.simulation.event_tolerance = sim.number("event_tolerance", c.simulation.event_tolerance);
    if (sim.has("sample_every")) c.simulation.sample_every = sim.at("sample_every").count();
    if (sim.has("probes")) {
        for (const auto& p : sim.at("probes").items()) c.simulation.probes.push_back(p.string());
    }
    if (root.has("metrics")) {
        const Node n = root.at("metrics");
        n.require_object({"steady_cycles", "lock_fraction", "hold_cycles"});
        if (n.has("steady_cycles")) c.metrics.steady_cycles = n.at("steady_cycles").count();
        c.metrics.lock_fraction = n.number("lock_fraction", c.metrics.lock_fraction);
        if (n.has("hold_cycles")) c.metrics.hold_cycles = n.at("hold_cycles").count();
    }
    if (root.has("sweep")) {
        const Node n = root.at("sweep");
        n.require_object({"cycles_per_point", "mode", "threads"});
        if (n.has("cycles_per_point")) c.sweep.cycles_per_point = n.at("cycles_per_point").count();
        if (n.has("mode")) {
            const auto m = n.at("mode").string();
            if (m == "persistent") {
                c.sweep.mode = SweepMode::persistent;
            } else if (m == "independent") {
                c.sweep.mode = SweepMode::independent;
            } else {
                n.at("mode").fail("must be \"persistent\" or \"independent\"");
            }
        }
        if (n.has("threads")) c.sweep.threads = static_cast<unsigned>(n.at("threads").count());
    }
    c.finalize();
    return c;
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <class T>
json opt(const std::optional<T>& v) {
    if (!v) return nullptr;
    if constexpr (std::is_floating_point_v<T>) {
        return num(*v);
    } else {
        return json(*v);
    }
}

json load_json(const LoadModel& m) {
    json j{{"kind", m.kind == LoadKind::resistive ? "resistive" : "rectified"}, {"resistance", m.resistance}};
    if (m.kind == LoadKind::rectified) {
        j["filter_capacitance"] = m.filter_capacitance;
        j["diode_drop"] = m.diode_drop;
    }
    return j;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw SimulationError("cannot open '" + path.string() + "' for writing");
    out << text;
    out.close();
    if (!out) throw SimulationError("failed writing '" + path.string() + "'");
}

}  // namespace

ScenarioConfig load_scenario_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("scenario is not valid JSON: ") + e.what());
    }
    return parse(doc);
}

ScenarioConfig load_scenario_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot read scenario file '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return load_scenario_text(os.str());
}

std::string scenario_to_json(const ScenarioConfig& c) {
    json j;
    j["schema_version"] = c.schema_version;
    j["name"] = c.name;
    for (const auto& coil : c.coils) {
        j["coils"].push_back({{"name", coil.name}, {"inductance", coil.self_inductance}, {"resistance", coil.series_resistance}});
    }
    j["couplings"] = json::array();
    for (const auto& cp : c.couplings) {
        json e{{"a", cp.a}, {"b", cp.b}};
        if (cp.coefficient) e["k"] = *cp.coefficient;
        if (cp.mutual) e["mutual"] = *cp.mutual;
        const auto& link = c.link();
        if (link.size() > 0) {
            const auto ia = link.index_of(cp.a);
            const auto ib = link.index_of(cp.b);
            e["resolved_mutual"] = link.mutual(ia, ib);
            e["resolved_k"] = link.coupling(ia, ib);
        }
        j["couplings"].push_back(e);
    }
    j["cross_coupling"] = c.cross_coupling;
    j["transmitter"] = c.transmitter;
    j["sensor"] = c.sensor;
    j["drive"] = {{"amplitude", c.amplitude}, {"phase", c.phase}};
    for (const auto& h : c.hops) j["hops"].push_back({{"start", h.start}, {"frequency", h.frequency}});
    if (c.interceptor) {
        const auto& h = *c.interceptor;
        const auto& r = h.controller.regulator;
        json ctl{{"parameter_free", h.controller.parameter_free},
                 {"deadband_deg", r.deadband / kDeg},
                 {"gain", r.gain},
                 {"max_step_fraction", r.max_step_fraction},
                 {"quantum_fraction", r.quantum_fraction},
                 {"lock_hold", r.lock_hold},
                 {"fine_deadband_deg", r.fine_deadband / kDeg},
                 {"unlock_factor", r.unlock_factor},
                 {"detect_window", h.controller.detect_window},
                 {"stability", h.controller.stability},
                 {"hop_threshold", h.controller.hop_threshold},
                 {"horizon_periods", h.controller.horizon_periods},
                 {"blanking_fraction", h.controller.blanking_fraction}};
        if (h.controller.fixed_t_on) ctl["fixed_t_on"] = *h.controller.fixed_t_on;
        j["interceptor"] = {{"coil", h.coil},
                            {"c_h1", h.branch.c_h1},
                            {"c_h2", h.branch.c_h2},
                            {"switch_on_resistance", h.branch.switch_on_resistance},
                            {"diode_drop", h.branch.diode_drop},
                            {"load", load_json(h.load)},
                            {"controller", ctl}};
        if (const auto range = c.tunable()) {
            j["derived"]["tunable_range"] = {{"f_min", range->f_min}, {"f_max", range->f_max}};
        }
    }
    j["receivers"] = json::array();
    for (const auto& r : c.receivers) {
        j["receivers"].push_back(
            {{"coil", r.coil}, {"capacitance", r.capacitance}, {"load", load_json(r.load)}, {"resonance", r.resonance}});
    }
    j["lossy"] = c.lossy;
    j["lossy_device"] = {{"switch_on_resistance", c.lossy_device.switch_on_resistance},
                         {"diode_drop", c.lossy_device.diode_drop}};
    j["simulation"] = {{"dt", c.sim_config().dt},
                       {"end_time", c.simulation.end_time},
                       {"event_tolerance", c.simulation.event_tolerance},
                       {"sample_every", c.simulation.sample_every},
                       {"probes", c.simulation.probes}};
    j["metrics"] = {{"steady_cycles", c.metrics.steady_cycles},
                    {"lock_fraction", c.metrics.lock_fraction},
                    {"hold_cycles", c.metrics.hold_cycles}};
    j["sweep"] = {{"cycles_per_point", c.sweep.cycles_per_point},
                  {"mode", c.sweep.mode == SweepMode::persistent ? "persistent" : "independent"},
                  {"threads", c.sweep.threads}};
    return j.dump(2) + "\n";
}

std::string format_double(double value) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

std::string trace_to_csv(const TraceBuffer& trace) {
    std::string out = "time_s";
    for (const auto& c : trace.columns()) out += "," + c;
    out += "\n";
    const std::size_t cols = trace.columns().size();
    for (std::size_t r = 0; r < trace.rows(); ++r) {
        out += format_double(trace.time(r));
        for (std::size_t c = 0; c < cols; ++c) {
            out += ',';
            out += format_double(trace.value(r, c));
        }
        out += '\n';
    }
    return out;
}

std::string metrics_to_json(const MetricsReport& report) {
    json j;
    j["scenario"] = report.scenario;
    j["couplings"] = json::object();
    for (const auto& [name, k] : report.couplings) j["couplings"][name] = k;
    if (report.tunable) j["tunable_range"] = {{"f_min", report.tunable->f_min}, {"f_max", report.tunable->f_max}};
    j["hops"] = json::array();
    for (const auto& m : report.hops) {
        json h{{"start", m.start},
               {"end", m.end},
               {"frequency", m.frequency},
               {"cycles", m.cycles},
               {"no_field", m.no_field},
               {"matched_receiver", opt(m.matched_receiver)},
               {"lock_time_cycles", opt(m.lock_time_cycles)},
               {"match_cycles", opt(m.match_cycles)},
               {"trail_cycles", opt(m.trail_cycles)},
               {"hacking_efficiency", opt(m.hacking_efficiency)},
               {"locked_t_on", opt(m.locked_t_on)},
               {"phase_error", opt(m.phase_error)},
               {"fsm_lock_cycles", opt(m.fsm_lock_cycles)},
               {"final_mode", m.final_mode},
               {"max_cycle_energy_residual", num(m.max_cycle_energy_residual)},
               {"peak_energy_mismatch", opt(m.peak_energy_mismatch)},
               {"sensor_lead_over_vh1_deg", opt(m.sensor_lead_over_vh1_deg)},
               {"reverse_rectifier_current", m.reverse_rectifier_current}};
        h["loads"] = json::array();
        for (const auto& l : m.loads) {
            h["loads"].push_back({{"coil", l.coil},
                                  {"role", l.interceptor ? "interceptor" : "receiver"},
                                  {"resonance", l.interceptor ? json(nullptr) : num(l.resonance)},
                                  {"power", num(l.power)},
                                  {"rms_current", num(l.rms_current)},
                                  {"ratio", num(l.ratio)},
                                  {"lock_time_cycles", opt(l.lock_time_cycles)}});
        }
        j["hops"].push_back(h);
    }
    return j.dump(2) + "\n";
}

std::string sweep_to_csv(const SweepResult& sweep) {
    std::string out = "frequency_hz";
    for (const auto& l : sweep.loads) out += ",P_" + l;
    for (const auto& l : sweep.loads) out += ",ratio_" + l;
    out += ",hacking_efficiency,locked_t_on_s\n";
    for (const auto& r : sweep.rows) {
        out += format_double(r.frequency);
        for (double p : r.power) out += "," + format_double(p);
        for (double p : r.ratio) out += "," + format_double(p);
        out += "," + (r.hacking_efficiency ? format_double(*r.hacking_efficiency) : std::string());
        out += "," + (r.locked_t_on ? format_double(*r.locked_t_on) : std::string());
        out += "\n";
    }
    return out;
}

std::string sweep_to_json(const SweepResult& sweep) {
    json j;
    j["loads"] = sweep.loads;
    j["rows"] = json::array();
    for (const auto& r : sweep.rows) {
        json row{{"frequency", r.frequency},
                 {"hacking_efficiency", opt(r.hacking_efficiency)},
                 {"locked_t_on", opt(r.locked_t_on)}};
        row["power"] = json::array();
        row["ratio"] = json::array();
        for (double p : r.power) row["power"].push_back(num(p));
        for (double p : r.ratio) row["ratio"].push_back(num(p));
        j["rows"].push_back(row);
    }
    return j.dump(2) + "\n";
}

void emit_outputs(const RunResult& result, const ScenarioConfig& config, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw SimulationError("cannot create output directory '" + dir.string() + "': " + ec.message());
    write_file(dir / "waveform.csv", trace_to_csv(result.trace));
    write_file(dir / "metrics.json", metrics_to_json(result.report));
    write_file(dir / "scenario.json", scenario_to_json(config));

    std::string crossings = "signal,time_s\n";
    for (const auto& [signal, t] : result.crossings) crossings += signal + "," + format_double(t) + "\n";
    write_file(dir / "crossings.csv", crossings);

    std::string ctl = "time_s,mode,f_est_hz,t_on_s,delta_phi_rad,stale,saturated\n";
    for (const auto& r : result.controller) {
        ctl += format_double(r.time) + "," + to_string(r.mode) + "," + format_double(r.f_est) + "," +
               format_double(r.t_on) + "," + format_double(r.delta_phi) + "," + (r.stale ? "1" : "0") + "," +
               (r.saturated ? "1" : "0") + "\n";
    }
    write_file(dir / "controller.csv", ctl);
}

}  // namespace wptsim
