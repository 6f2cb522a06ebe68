#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitdrive/sim/geometry.hpp"

namespace vitdrive::sim {

struct Lane {
    int id = 0;
    Polyline center;
    double speed_limit = 6.0;
    bool connector = false;   // lies inside the intersection box
    std::vector<int> next;    // successor lane ids
};

struct SpawnZone {
    int lane = 0;
    double s_min = 0.0;
    double s_max = 0.0;
};

// Static road network: lane centerlines plus the painted geometry (drivable
// polygons, curb polylines) and the intersection region used for yielding.
struct MapGraph {
    std::string id;
    std::vector<Lane> lanes;
    std::vector<std::vector<Vec2>> drivable;
    std::vector<std::vector<Vec2>> curbs;
    std::vector<Vec2> intersection_box;
    SpawnZone ego_spawn;
    std::vector<SpawnZone> npc_zones;

    const Lane& lane(int id_) const {
        for (const auto& l : lanes)
            if (l.id == id_) return l;
        throw std::invalid_argument("map '" + id + "' has no lane " + std::to_string(id_));
    }

    bool in_intersection(Vec2 p) const { return point_in_polygon(p, intersection_box); }
};

// ---------------------------------------------------------------------------
// Built-in scenarios. Two-lane roads (one lane per direction, centers 1.75 m
// off the road axis), 40 m arms, a 16 m square intersection box. Connector
// radii stay above wheelbase/tan(max_steer) so the PID can track every turn.
// ---------------------------------------------------------------------------
namespace detail {

constexpr double kArmLen = 40.0;
constexpr double kBoxHalf = 8.0;
constexpr double kLaneOff = 1.75;
constexpr double kRoadHalf = 3.5;
constexpr double kLaneSpeed = 6.0;
constexpr double kTurnSpeed = 4.0;

// Arm directions: 0=south, 1=east, 2=north, 3=west (unit vector pointing
// outward from the box center).
inline Vec2 arm_dir(int arm) {
    switch (arm) {
        case 0: return {0, -1};
        case 1: return {1, 0};
        case 2: return {0, 1};
        default: return {-1, 0};
    }
}

struct ArmLanes {
    int inbound = -1;
    int outbound = -1;
};

}  // namespace detail

// Assembles a junction with the given arms present (4-way or T). On sides
// with no arm the box shrinks to the road edge so the junction stays flush
// with the through road.
inline MapGraph make_junction(const std::string& id, const std::vector<int>& arms) {
    using namespace detail;
    MapGraph map;
    map.id = id;
    const double edge = kBoxHalf;
    const double far = kBoxHalf + kArmLen;
    auto present = [&arms](int arm) {
        for (int a : arms)
            if (a == arm) return true;
        return false;
    };

    std::vector<ArmLanes> per_arm(4);
    int next_id = 0;
    for (int arm : arms) {
        const Vec2 out = arm_dir(arm);
        const Vec2 left{-out.y, out.x};
        // Right-hand traffic: each lane sits right of its travel direction,
        // which is left-of-outward for the inbound lane.
        Lane in;
        in.id = next_id++;
        in.center = Polyline({out * far + left * kLaneOff, out * edge + left * kLaneOff});
        in.speed_limit = kLaneSpeed;
        per_arm[arm].inbound = in.id;
        map.lanes.push_back(std::move(in));
        Lane ob;
        ob.id = next_id++;
        ob.center = Polyline({out * edge + left * -kLaneOff, out * far + left * -kLaneOff});
        ob.speed_limit = kLaneSpeed;
        per_arm[arm].outbound = ob.id;
        map.lanes.push_back(std::move(ob));
    }

    // Connectors between every inbound and every other arm's outbound:
    // straight through, or a tangent quarter arc for turns.
    for (int from : arms) {
        const int in_id = per_arm[from].inbound;
        const Vec2 a = map.lane(in_id).center.points().back();
        for (int to : arms) {
            if (to == from) continue;
            const int out_id = per_arm[to].outbound;
            const Vec2 b = map.lane(out_id).center.points().front();
            Lane conn;
            conn.id = next_id++;
            conn.connector = true;
            conn.speed_limit = kTurnSpeed;
            const int turn = ((to - from) % 4 + 4) % 4;  // 1=right, 2=straight, 3=left
            if (turn == 2) {
                conn.center = Polyline({a, b});
            } else {
                // Arc center: perpendicular to the entry tangent at a and to
                // the exit tangent at b.
                const Vec2 travel = arm_dir(from) * -1.0;
                const Vec2 center = std::abs(travel.x) > 0.5 ? Vec2{a.x, b.y} : Vec2{b.x, a.y};
                const double radius = (a - center).norm();
                const double a0 = std::atan2(a.y - center.y, a.x - center.x);
                const double a1 = std::atan2(b.y - center.y, b.x - center.x);
                conn.center = Polyline(arc_points(center, radius, a0, a0 + wrap_angle(a1 - a0)));
            }
            for (auto& l : map.lanes)
                if (l.id == in_id) l.next.push_back(conn.id);
            conn.next.push_back(out_id);
            map.lanes.push_back(std::move(conn));
        }
    }

    // Intersection box, flush with the road edge on armless sides.
    const double x_max = present(1) ? kBoxHalf : kRoadHalf;
    const double y_max = present(2) ? kBoxHalf : kRoadHalf;
    const double x_min = present(3) ? -kBoxHalf : -kRoadHalf;
    const double y_min = present(0) ? -kBoxHalf : -kRoadHalf;
    map.intersection_box = {{x_min, y_min}, {x_max, y_min}, {x_max, y_max}, {x_min, y_max}};

    // Drivable area: one rectangle per arm plus the box.
    for (int arm : arms) {
        const Vec2 out = arm_dir(arm);
        const Vec2 left{-out.y, out.x};
        map.drivable.push_back({out * edge + left * kRoadHalf, out * far + left * kRoadHalf,
                                out * far + left * -kRoadHalf, out * edge + left * -kRoadHalf});
    }
    map.drivable.push_back(map.intersection_box);

    // Curbs: both long edges of each arm, plus a closing curb across any
    // side without an arm.
    for (int arm : arms) {
        const Vec2 out = arm_dir(arm);
        const Vec2 left{-out.y, out.x};
        map.curbs.push_back({out * edge + left * kRoadHalf, out * far + left * kRoadHalf});
        map.curbs.push_back({out * edge + left * -kRoadHalf, out * far + left * -kRoadHalf});
    }
    for (int arm = 0; arm < 4; ++arm) {
        if (present(arm)) continue;
        const Vec2 out = arm_dir(arm);
        const Vec2 left{-out.y, out.x};
        map.curbs.push_back({out * kRoadHalf + left * kBoxHalf, out * kRoadHalf + left * -kBoxHalf});
    }

    // Ego approaches from the south arm; NPCs may spawn on any arm lane.
    map.ego_spawn = {per_arm[0].inbound, kArmLen - 20.0, kArmLen - 10.0};
    for (int arm : arms) {
        map.npc_zones.push_back({per_arm[arm].inbound, 0.0, kArmLen - 6.0});
        map.npc_zones.push_back({per_arm[arm].outbound, 6.0, kArmLen - 2.0});
    }
    return map;
}

inline MapGraph make_fourway() { return make_junction("fourway", {0, 1, 2, 3}); }
inline MapGraph make_t_intersection() { return make_junction("t_intersection", {0, 1, 3}); }

inline MapGraph make_scenario(const std::string& name) {
    if (name == "fourway") return make_fourway();
    if (name == "t_intersection") return make_t_intersection();
    throw std::invalid_argument("unknown scenario '" + name + "' (expected fourway or t_intersection)");
}

// --- Scenario file round trip ------------------------------------------------

inline nlohmann::json to_json(const MapGraph& map) {
    nlohmann::json j;
    j["id"] = map.id;
    auto pts_to_json = [](const std::vector<Vec2>& pts) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& p : pts) a.push_back({p.x, p.y});
        return a;
    };
    for (const auto& l : map.lanes) {
        nlohmann::json lj;
        lj["id"] = l.id;
        lj["points"] = pts_to_json(l.center.points());
        lj["speed_limit"] = l.speed_limit;
        lj["connector"] = l.connector;
        lj["next"] = l.next;
        j["lanes"].push_back(lj);
    }
    for (const auto& poly : map.drivable) j["drivable"].push_back(pts_to_json(poly));
    for (const auto& c : map.curbs) j["curbs"].push_back(pts_to_json(c));
    j["intersection_box"] = pts_to_json(map.intersection_box);
    j["ego_spawn"] = {{"lane", map.ego_spawn.lane},
                      {"s_min", map.ego_spawn.s_min},
                      {"s_max", map.ego_spawn.s_max}};
    for (const auto& z : map.npc_zones)
        j["npc_zones"].push_back({{"lane", z.lane}, {"s_min", z.s_min}, {"s_max", z.s_max}});
    return j;
}

inline MapGraph map_from_json(const nlohmann::json& j) {
    MapGraph map;
    map.id = j.at("id").get<std::string>();
    auto pts_from = [](const nlohmann::json& a) {
        std::vector<Vec2> pts;
        for (const auto& p : a) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        return pts;
    };
    for (const auto& lj : j.at("lanes")) {
        Lane l;
        l.id = lj.at("id").get<int>();
        l.center = Polyline(pts_from(lj.at("points")));
        l.speed_limit = lj.at("speed_limit").get<double>();
        l.connector = lj.at("connector").get<bool>();
        l.next = lj.at("next").get<std::vector<int>>();
        map.lanes.push_back(std::move(l));
    }
    for (const auto& pj : j.at("drivable")) map.drivable.push_back(pts_from(pj));
    for (const auto& cj : j.at("curbs")) map.curbs.push_back(pts_from(cj));
    map.intersection_box = pts_from(j.at("intersection_box"));
    map.ego_spawn = {j.at("ego_spawn").at("lane").get<int>(),
                     j.at("ego_spawn").at("s_min").get<double>(),
                     j.at("ego_spawn").at("s_max").get<double>()};
    for (const auto& zj : j.at("npc_zones"))
        map.npc_zones.push_back({zj.at("lane").get<int>(), zj.at("s_min").get<double>(),
                                 zj.at("s_max").get<double>()});
    return map;
}

}  // namespace vitdrive::sim
