#include "wptsim/controller.hpp"

#include "wptsim/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace wptsim {

std::optional<FrequencyEstimate> detect_frequency(std::span<const double> crossings, std::size_t window,
                                                  double stability) {
    if (crossings.size() < 2) return std::nullopt;
    window = std::max<std::size_t>(2, window);
    const std::size_t n = std::min(window, crossings.size());
    const auto recent = crossings.subspan(crossings.size() - n);
    const double span = recent.back() - recent.front();
    if (!(span > 0.0)) return std::nullopt;
    FrequencyEstimate e;
    e.f_est = static_cast<double>(n - 1) / span;
    e.last_upward_crossing = recent.back();
    e.crossings_used = n;
    if (crossings.size() >= 3) {
        const double p1 = crossings[crossings.size() - 1] - crossings[crossings.size() - 2];
        const double p0 = crossings[crossings.size() - 2] - crossings[crossings.size() - 3];
        e.stable = std::abs(p1 - p0) <= stability * std::max(p0, p1);
    }
    return e;
}

double init_t_on(double f, double l, double c1, double c2) {
    if (!(f > 0.0) || !(l > 0.0) || !(c1 > 0.0) || !(c2 > 0.0)) {
        throw ValidationError("init_t_on needs positive frequency, inductance and capacitances");
    }
    const double w = 2.0 * kPi * f;
    // Elastance interpolation between C_H1 alone and C_H1 + C_H2.
    const double s1 = 1.0 / c1;
    const double s12 = 1.0 / (c1 + c2);
    // asin has infinite slope at full conduction, where the rounding of f alone
    // (amplified by C1/C2) would shift t_on by far more than an ulp.
    if (std::abs(w * w * l * (c1 + c2) - 1.0) <= 4.0 * std::numeric_limits<double>::epsilon()) return 0.5 / f;
    const double arg = std::clamp((s1 - w * w * l) / (s1 - s12), 0.0, 1.0);
    const double t_on = 2.0 / w * std::asin(arg);
    return std::clamp(t_on, 0.0, 0.5 / f);
}

double wrap_phase(double phi) {
    phi = std::fmod(phi, 2.0 * kPi);
    if (phi <= -kPi) phi += 2.0 * kPi;
    if (phi > kPi) phi -= 2.0 * kPi;
    return phi;
}

PhaseError phase_error(double vs, double vhr, double period) {
    if (!(period > 0.0)) throw ValidationError("phase_error needs a positive period");
    if (std::abs(vs - vhr) >= period) return {0.0, true};
    return {wrap_phase(2.0 * kPi * (vs - vhr) / period), false};
}

const char* to_string(ControllerMode mode) {
    switch (mode) {
        case ControllerMode::detect: return "DETECT";
        case ControllerMode::init: return "INIT";
        case ControllerMode::track: return "TRACK";
        case ControllerMode::locked: return "LOCKED";
    }
    return "?";
}

void RegulatorConfig::validate() const {
    if (!(deadband >= 0.0)) throw ValidationError("deadband must be >= 0");
    if (!(gain > 0.0)) throw ValidationError("regulator gain must be positive");
    if (!(max_step_fraction > 0.0) || max_step_fraction > 1.0) {
        throw ValidationError("max_step_fraction must lie in (0, 1]");
    }
    if (!(quantum_fraction > 0.0) || quantum_fraction > max_step_fraction) {
        throw ValidationError("quantum_fraction must lie in (0, max_step_fraction]");
    }
    if (lock_hold < 1) throw ValidationError("lock_hold must be >= 1");
    if (!(fine_deadband >= 0.0) || fine_deadband > deadband) {
        throw ValidationError("fine_deadband must lie in [0, deadband]");
    }
    if (!(unlock_factor >= 1.0)) throw ValidationError("unlock_factor must be >= 1");
}

double step_quantum(double period, const RegulatorConfig& config) { return 0.5 * period * config.quantum_fraction; }

RegulatorState regulate_step(const PhaseError& error, RegulatorState s, double period, const RegulatorConfig& cfg) {
    if (error.stale) return s;
    const double half = 0.5 * period;
    const double quantum = step_quantum(period, cfg);
    const double mag = std::abs(error.delta_phi);
    const double sign = error.delta_phi > 0.0 ? 1.0 : -1.0;
    double delta = 0.0;

    if (s.mode == ControllerMode::locked && mag > cfg.unlock_factor * cfg.deadband) {
        s.mode = ControllerMode::track;
        s.lock_counter = 0;
    }
    if (s.mode == ControllerMode::locked) {
        s.step = quantum;
        if (mag > cfg.fine_deadband) delta = sign * quantum;
    } else {
        s.mode = ControllerMode::track;
        s.step = cfg.max_step_fraction * half;
        if (mag > cfg.deadband) {
            delta = sign * std::max(quantum, std::min(s.step, mag * cfg.gain * period));
            s.lock_counter = 0;
        } else {
            ++s.lock_counter;
            if (s.lock_counter >= cfg.lock_hold) {
                s.mode = ControllerMode::locked;
                s.step = quantum;
            }
        }
    }
    const double next = s.t_on + delta;
    s.saturated = next < 0.0 || next > half;
    s.t_on = std::clamp(next, 0.0, half);
    return s;
}

GateSchedule schedule_gates(double f, double t_on, double centre, double t_from, double t_to) {
    if (!(f > 0.0)) throw ValidationError("schedule_gates needs a positive frequency");
    if (!(t_on >= 0.0)) throw ValidationError("t_on must be >= 0");
    GateSchedule s;
    const double half = 0.5 / f;
    if (t_on > half) {
        t_on = half;
        s.clamped = true;
    }
    if (t_on == 0.0 || !(t_to > t_from)) return s;
    const auto k0 = static_cast<long long>(std::floor((t_from - centre - 0.5 * t_on) / half));
    for (long long k = k0;; ++k) {
        const double c = centre + static_cast<double>(k) * half;
        GateWindow w{c - 0.5 * t_on, c + 0.5 * t_on, (k % 2 == 0) ? GateMask::positive : GateMask::negative};
        if (w.on > t_to) break;
        if (w.off <= t_from) continue;
        if (!s.windows.empty() && w.on < s.windows.back().off) w.on = s.windows.back().off;
        s.windows.push_back(w);
    }
    return s;
}

void ControllerConfig::validate() const {
    regulator.validate();
    if (!parameter_free && !parameters) throw ValidationError("parameterised controller needs switch parameters");
    if (parameters && (!(parameters->inductance > 0.0) || !(parameters->c_h1 > 0.0) || !(parameters->c_h2 > 0.0))) {
        throw ValidationError("switch parameters must be positive");
    }
    if (detect_window < 2) throw ValidationError("detect_window must be >= 2");
    if (!(stability > 0.0)) throw ValidationError("stability tolerance must be positive");
    if (!(hop_threshold > 0.0)) throw ValidationError("hop threshold must be positive");
    if (!(horizon_periods >= 1.0)) throw ValidationError("horizon must cover at least one period");
    if (fixed_t_on && !(*fixed_t_on >= 0.0)) throw ValidationError("fixed_t_on must be >= 0");
    if (!(blanking_fraction >= 0.0) || !(blanking_fraction < 0.5)) {
        throw ValidationError("blanking_fraction must lie in [0, 0.5)");
    }
}

InterceptorController::InterceptorController(ControllerConfig config) : config_(std::move(config)) {
    config_.validate();
}

void InterceptorController::on_load_crossing(double t) { last_load_ = t; }

bool InterceptorController::accepts_sensor_crossing(double t) const {
    // A switching step right after a crossing can pull the sensor voltage back
    // below zero for a moment; the re-crossing is not a new cycle.
    if (sensor_.empty() || !estimate_) return true;
    return t - sensor_.back() >= config_.blanking_fraction * estimate_->period();
}

double InterceptorController::initial_t_on(double f) const {
    if (config_.fixed_t_on) return std::min(*config_.fixed_t_on, 0.5 / f);
    if (!config_.parameter_free) {
        const auto& p = *config_.parameters;
        return init_t_on(f, p.inductance, p.c_h1, p.c_h2);
    }
    return 0.25 / f;  // half of the half period
}

GateSchedule InterceptorController::build(double t) {
    const double period = estimate_->period();
    // At resonance the loop current rises with the sensor voltage, so its next
    // peak is predicted a quarter period after the sensor crossing.
    return schedule_gates(estimate_->f_est, state_.t_on, t + 0.25 * period, t,
                          t + config_.horizon_periods * period);
}

void InterceptorController::redetect(double t) {
    // Keep the crossings that established the new period.
    const std::size_t keep = std::min<std::size_t>(2, sensor_.size());
    sensor_.erase(sensor_.begin(), sensor_.end() - static_cast<std::ptrdiff_t>(keep));
    sensor_.push_back(t);
    suspect_period_.reset();
    estimate_.reset();
    state_.mode = ControllerMode::detect;
    state_.lock_counter = 0;
    state_.t_on = 0.0;
    schedule_ = {};
}

GateSchedule InterceptorController::on_sensor_crossing(double t) {
    if (!sensor_.empty() && !(t > sensor_.back())) throw ValidationError("sensor crossings must increase");
    if (!accepts_sensor_crossing(t)) return schedule_;
    ControllerRecord rec;
    rec.time = t;

    if (state_.mode != ControllerMode::detect && estimate_) {
        // A hop needs two consecutive deviating periods that agree with each
        // other; a single outlier (a phase step of the sensor voltage) is held.
        const double measured = t - sensor_.back();
        const double period = estimate_->period();
        if (std::abs(measured - period) > config_.hop_threshold * period) {
            const bool confirmed =
                suspect_period_ &&
                std::abs(measured - *suspect_period_) <= config_.stability * std::max(measured, *suspect_period_);
            if (!confirmed) {
                suspect_period_ = measured;
                sensor_.push_back(t);
                schedule_ = build(t);
                rec.mode = state_.mode;
                rec.f_est = estimate_->f_est;
                rec.t_on = state_.t_on;
                rec.stale = true;
                rec.saturated = state_.saturated || schedule_.clamped;
                history_.push_back(rec);
                return schedule_;
            }
            redetect(t);
        } else {
            suspect_period_.reset();
        }
    }
    if (state_.mode == ControllerMode::detect) {
        if (sensor_.empty() || sensor_.back() != t) sensor_.push_back(t);  // redetect already holds t
        estimate_ = detect_frequency(sensor_, config_.detect_window, config_.stability);
        if (estimate_ && estimate_->stable) {
            state_.mode = ControllerMode::init;
            state_.t_on = initial_t_on(estimate_->f_est);
            state_.step = config_.regulator.max_step_fraction * 0.5 * estimate_->period();
            state_.lock_counter = 0;
            state_.saturated = false;
            schedule_ = build(t);
        } else {
            schedule_ = {};
        }
    } else {
        sensor_.push_back(t);
        if (sensor_.size() > 16) sensor_.erase(sensor_.begin(), sensor_.end() - 8);
        estimate_ = detect_frequency(sensor_, config_.detect_window, config_.stability);
        const double period = estimate_->period();
        last_error_ = last_load_ ? phase_error(t, *last_load_, period) : PhaseError{0.0, true};
        if (config_.fixed_t_on) {
            state_.mode = ControllerMode::track;
            state_.t_on = std::min(*config_.fixed_t_on, 0.5 * period);
        } else {
            state_ = regulate_step(last_error_, state_, period, config_.regulator);
        }
        schedule_ = build(t);
    }

    rec.mode = state_.mode;
    rec.f_est = estimate_ ? estimate_->f_est : 0.0;
    rec.t_on = state_.t_on;
    rec.delta_phi = last_error_.delta_phi;
    rec.stale = last_error_.stale || state_.mode == ControllerMode::detect || state_.mode == ControllerMode::init;
    rec.saturated = state_.saturated || schedule_.clamped;
    history_.push_back(rec);
    return schedule_;
}

std::vector<ControllerRecord> InterceptorController::replay(ControllerConfig config, std::span<const double> sensor,
                                                            std::span<const double> load) {
    InterceptorController c(std::move(config));
    std::size_t j = 0;
    for (double t : sensor) {
        // Load crossings at the same instant as a sensor crossing count as earlier.
        while (j < load.size() && load[j] <= t) c.on_load_crossing(load[j++]);
        (void)c.on_sensor_crossing(t);
    }
    return c.history();
}

}  // namespace wptsim
