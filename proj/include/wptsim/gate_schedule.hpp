#pragma once

#include "wptsim/link_model.hpp"

#include <optional>
#include <vector>

namespace wptsim {

/// One conduction window of S_H: gate enabled for `direction` on [on, off).
struct GateWindow {
    double on = 0.0;
    double off = 0.0;
    GateMask direction = GateMask::both;

    friend bool operator==(const GateWindow&, const GateWindow&) = default;
};

/// Time-ordered, non-overlapping windows.
struct GateSchedule {
    std::vector<GateWindow> windows;
    bool clamped = false;  // requested on-time exceeded the half period

    [[nodiscard]] bool empty() const { return windows.empty(); }
    [[nodiscard]] GateMask at(double t) const;
    /// First window edge strictly after t.
    [[nodiscard]] std::optional<double> next_edge_after(double t) const;

    /// Windows sorted, non-overlapping and of non-negative width.
    [[nodiscard]] bool well_formed() const;

    static GateSchedule always_on(double t_end, GateMask direction = GateMask::both) {
        return GateSchedule{{GateWindow{0.0, t_end, direction}}, false};
    }
};

}  // namespace wptsim
