#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vitdrive/sim/geometry.hpp"
#include "vitdrive/sim/map.hpp"

namespace vitdrive::sim {

// Lane sequence materialized as one continuous centerline.
struct Route {
    std::vector<int> lane_ids;
    Polyline path;

    static Route from_lanes(const MapGraph& map, std::vector<int> ids, double start_s = 0.0) {
        std::vector<Vec2> pts;
        for (size_t k = 0; k < ids.size(); ++k) {
            const auto& lane_pts = map.lane(ids[k]).center.points();
            for (size_t i = (k == 0 ? 0 : 1); i < lane_pts.size(); ++i) pts.push_back(lane_pts[i]);
        }
        Route r;
        r.lane_ids = std::move(ids);
        if (start_s > 0.0) {
            Polyline full(pts);
            auto tail = full.slice(start_s, full.length());
            r.path = Polyline(std::move(tail));
        } else {
            r.path = Polyline(std::move(pts));
        }
        return r;
    }

    // Appends a lane to the end of the route.
    void extend(const MapGraph& map, int lane_id) {
        auto pts = path.points();
        const auto& lane_pts = map.lane(lane_id).center.points();
        for (size_t i = 1; i < lane_pts.size(); ++i) pts.push_back(lane_pts[i]);
        path = Polyline(std::move(pts));
        lane_ids.push_back(lane_id);
    }
};

struct VehicleState {
    Vec2 pos;
    double heading = 0.0;
    double speed = 0.0;  // never negative
    double length = 4.5;
    double width = 2.0;
    double wheelbase = 2.8;
    Route route;
    double progress = 0.0;  // arc length along route.path, non-decreasing

    Obb footprint() const { return {pos, heading, length / 2.0, width / 2.0}; }
};

inline bool collision_check(const VehicleState& a, const VehicleState& b) {
    return obb_overlap(a.footprint(), b.footprint());
}

struct PidGains {
    double kp = 0.6;   // cross-track
    double kd = 0.1;   // cross-track rate
    double kh = 1.2;   // heading error
    double max_steer = 0.5;  // rad
};

// steering = -(Kp*e_ct + Kd*de_ct + Kh*e_heading), clamped. The cross-track
// rate uses the kinematic identity de_ct = v*sin(e_heading), which keeps the
// controller stateless. Positive e_ct (left of lane) steers right (negative).
inline double pid_steering(const VehicleState& vehicle, const Route& route,
                           const PidGains& gains = {}) {
    if (route.path.points().size() < 2)
        throw std::invalid_argument("pid_steering: route is empty");
    const auto proj = route.path.project(vehicle.pos);
    const double e_ct = proj.lateral;
    const double e_heading = wrap_angle(vehicle.heading - route.path.heading_at(proj.s));
    const double e_ct_rate = vehicle.speed * std::sin(e_heading);
    const double steer = -(gains.kp * e_ct + gains.kd * e_ct_rate + gains.kh * e_heading);
    return std::clamp(steer, -gains.max_steer, gains.max_steer);
}

// Kinematic bicycle, explicit Euler. The pose advances with the current
// speed, then speed tracks the command under acceleration/braking limits, so
// a vehicle at rest stays put for the step regardless of the command.
inline VehicleState kinematic_update(const VehicleState& vehicle, double speed_cmd,
                                     double steering, double dt, double accel_limit = 3.0,
                                     double brake_limit = 6.0) {
    if (dt <= 0.0) throw std::invalid_argument("kinematic_update: dt must be positive");
    VehicleState next = vehicle;
    next.pos.x += vehicle.speed * std::cos(vehicle.heading) * dt;
    next.pos.y += vehicle.speed * std::sin(vehicle.heading) * dt;
    next.heading = wrap_angle(vehicle.heading +
                              vehicle.speed / vehicle.wheelbase * std::tan(steering) * dt);
    speed_cmd = std::max(0.0, speed_cmd);
    if (speed_cmd > vehicle.speed)
        next.speed = std::min(speed_cmd, vehicle.speed + accel_limit * dt);
    else
        next.speed = std::max(speed_cmd, vehicle.speed - brake_limit * dt);
    return next;
}

}  // namespace vitdrive::sim
