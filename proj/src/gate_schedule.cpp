#include "wptsim/gate_schedule.hpp"

#include <algorithm>

namespace wptsim {

namespace {

// First window whose off edge lies after t.
auto first_open(const std::vector<GateWindow>& windows, double t) {
    return std::upper_bound(windows.begin(), windows.end(), t,
                            [](double value, const GateWindow& w) { return value < w.off; });
}

}  // namespace

GateMask GateSchedule::at(double t) const {
    const auto it = first_open(windows, t);
    if (it != windows.end() && it->on <= t) return it->direction;
    return GateMask::none;
}

std::optional<double> GateSchedule::next_edge_after(double t) const {
    const auto it = first_open(windows, t);
    if (it == windows.end()) return std::nullopt;
    return it->on > t ? it->on : it->off;
}

bool GateSchedule::well_formed() const {
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (!(windows[i].off >= windows[i].on)) return false;
        if (i > 0 && windows[i].on < windows[i - 1].off) return false;
    }
    return true;
}

}  // namespace wptsim
