#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitdrive/rng.hpp"
#include "vitdrive/sim/map.hpp"
#include "vitdrive/sim/vehicle.hpp"

namespace vitdrive::sim {

struct SpawnError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class EgoAction { Move = 0, Stop = 1 };

enum class TerminalCause { None, Collision, Destination, Timeout };

inline const char* to_string(TerminalCause c) {
    switch (c) {
        case TerminalCause::Collision: return "collision";
        case TerminalCause::Destination: return "destination";
        case TerminalCause::Timeout: return "timeout";
        default: return "none";
    }
}

struct SimParams {
    double dt = 0.1;
    double v_const = 8.0;       // ego speed under Move
    double ego_accel = 80.0;    // Move reaches v_const within one step
    double npc_accel = 3.0;
    double brake = 6.0;         // both ego Stop and NPC braking
    double gap_min = 5.0;       // bumper gap below which a follower stops
    double lead_lookahead = 20.0;
    double corridor_half_width = 1.6;  // lateral window for leader detection
    double request_distance = 12.0;    // stop-line distance at which arrival order is taken
    double hold_distance = 5.5;        // stop-line distance at which an ungranted NPC brakes
    int npc_count = 30;
    int max_steps = 600;
    double car_length = 4.5;
    double car_width = 2.0;
    double wheelbase = 2.8;
    double dest_min = 4.0;   // destination draw range along the exit lane (m)
    double dest_max = 18.0;
    int spawn_retries = 200;
    PidGains pid;
};

// Reward components of one step; reward == r_collision + r_distance always.
struct SimStep {
    float reward = 0.0f;
    float r_collision = 0.0f;
    float r_distance = 0.0f;
    bool terminal = false;
    TerminalCause cause = TerminalCause::None;
};

// Deterministic multi-vehicle intersection world. All randomness flows from
// the reset seed; stepping a terminal episode is a contract error.
class World {
public:
    World(std::shared_ptr<const MapGraph> map, SimParams params = {})
        : map_(std::move(map)), params_(params) {}

    World(const std::string& scenario, SimParams params = {})
        : World(std::make_shared<const MapGraph>(make_scenario(scenario)), params) {}

    void reset(uint64_t seed) {
        rng_ = Rng(mix_seed(seed, 0xd21e));
        step_count_ = 0;
        cause_ = TerminalCause::None;
        claim_holder_ = -1;
        agents_.clear();
        spawn_ego();
        for (int i = 0; i < params_.npc_count; ++i) spawn_npc();
    }

    SimStep step(EgoAction action) {
        if (terminal()) throw std::logic_error("step on a terminal episode");
        ++step_count_;

        register_arrivals();
        update_claims();

        // Commands from the pre-step snapshot; everyone moves simultaneously.
        const Vec2 ego_prev = ego_.v.pos;
        std::vector<double> npc_cmd(agents_.size());
        for (size_t i = 0; i < agents_.size(); ++i) npc_cmd[i] = npc_policy(static_cast<int>(i));
        const double ego_cmd = action == EgoAction::Move ? params_.v_const : 0.0;

        const double ego_steer = pid_steering(ego_.v, ego_.v.route, params_.pid);
        VehicleState ego_next = kinematic_update(ego_.v, ego_cmd, ego_steer, params_.dt,
                                                 params_.ego_accel, params_.brake);
        std::vector<VehicleState> npc_next;
        npc_next.reserve(agents_.size());
        for (size_t i = 0; i < agents_.size(); ++i) {
            const double steer = pid_steering(agents_[i].v, agents_[i].v.route, params_.pid);
            npc_next.push_back(kinematic_update(agents_[i].v, npc_cmd[i], steer, params_.dt,
                                                params_.npc_accel, params_.brake));
        }
        ego_.v = std::move(ego_next);
        for (size_t i = 0; i < agents_.size(); ++i) agents_[i].v = std::move(npc_next[i]);

        advance_progress(ego_);
        for (auto& a : agents_) advance_progress(a);
        maintain_npc_routes();

        SimStep out;
        out.r_distance = static_cast<float>((ego_.v.pos - ego_prev).norm());
        bool collided = false;
        for (const auto& a : agents_) collided = collided || collision_check(ego_.v, a.v);
        if (collided) {
            out.r_collision = -100.0f;
            cause_ = TerminalCause::Collision;
        } else if (ego_.v.progress >= ego_dest_s_) {
            cause_ = TerminalCause::Destination;
        } else if (step_count_ >= params_.max_steps) {
            cause_ = TerminalCause::Timeout;
        }
        out.reward = out.r_collision + out.r_distance;
        out.terminal = cause_ != TerminalCause::None;
        out.cause = cause_;
        return out;
    }

    bool terminal() const { return cause_ != TerminalCause::None; }
    TerminalCause cause() const { return cause_; }
    int step_count() const { return step_count_; }
    const MapGraph& map() const { return *map_; }
    const SimParams& params() const { return params_; }
    const VehicleState& ego() const { return ego_.v; }
    double ego_destination_s() const { return ego_dest_s_; }

    std::vector<const VehicleState*> npcs() const {
        std::vector<const VehicleState*> out;
        out.reserve(agents_.size());
        for (const auto& a : agents_) out.push_back(&a.v);
        return out;
    }

    // Remaining planned route, for rendering.
    std::vector<Vec2> remaining_route() const {
        return ego_.v.route.path.slice(ego_.v.progress, ego_dest_s_);
    }

    bool any_npc_npc_collision() const {
        for (size_t i = 0; i < agents_.size(); ++i)
            for (size_t j = i + 1; j < agents_.size(); ++j)
                if (collision_check(agents_[i].v, agents_[j].v)) return true;
        return false;
    }

private:
    struct Agent {
        VehicleState v;
        std::vector<double> lane_end_s;  // arc length at which each route lane ends
        size_t lane_cursor = 0;
        int arrival_step = -1;  // stop-line arrival order; -1 when not waiting
        bool granted = false;
    };

    void spawn_ego() {
        const auto& zone = map_->ego_spawn;
        const auto& lane = map_->lane(zone.lane);
        const double s = rng_.uniform(zone.s_min, zone.s_max);
        ego_ = Agent{};
        ego_.v = make_vehicle(lane, s);
        // Route: approach lane, one random connector, its exit lane.
        const auto& conns = lane.next;
        const int conn_id = conns[rng_.uniform_int(static_cast<int>(conns.size()))];
        const int exit_id = map_->lane(conn_id).next.front();
        ego_.v.route = Route::from_lanes(*map_, {lane.id, conn_id, exit_id});
        ego_.v.progress = s;
        set_lane_ends(ego_);
        const double exit_start = lane.center.length() + map_->lane(conn_id).center.length();
        ego_dest_s_ = exit_start + rng_.uniform(params_.dest_min, params_.dest_max);
    }

    void spawn_npc() {
        for (int attempt = 0; attempt < params_.spawn_retries; ++attempt) {
            const auto& zone = map_->npc_zones[static_cast<size_t>(
                rng_.uniform_int(static_cast<int>(map_->npc_zones.size())))];
            const auto& lane = map_->lane(zone.lane);
            const double s = rng_.uniform(zone.s_min, zone.s_max);
            Agent cand;
            cand.v = make_vehicle(lane, s);
            cand.v.route = Route::from_lanes(*map_, {lane.id});
            cand.v.progress = s;
            set_lane_ends(cand);
            if (!placement_free(cand.v)) continue;
            agents_.push_back(std::move(cand));
            extend_route(agents_.back());
            return;
        }
        throw SpawnError("could not place NPC " + std::to_string(agents_.size()) + " within " +
                         std::to_string(params_.spawn_retries) + " attempts");
    }

    VehicleState make_vehicle(const Lane& lane, double s) const {
        VehicleState v;
        v.pos = lane.center.point_at(s);
        v.heading = lane.center.heading_at(s);
        v.speed = 0.0;
        v.length = params_.car_length;
        v.width = params_.car_width;
        v.wheelbase = params_.wheelbase;
        return v;
    }

    bool placement_free(const VehicleState& cand) const {
        // Inflated footprint keeps spawn gaps comfortable.
        Obb probe = cand.footprint();
        probe.half_length += 1.5;
        probe.half_width += 0.3;
        if (obb_overlap(probe, ego_.v.footprint())) return false;
        for (const auto& a : agents_)
            if (obb_overlap(probe, a.v.footprint())) return false;
        return true;
    }

    void set_lane_ends(Agent& a) {
        a.lane_end_s.clear();
        double acc = 0.0;
        for (int id : a.v.route.lane_ids) {
            acc += map_->lane(id).center.length();
            a.lane_end_s.push_back(acc);
        }
        a.lane_cursor = 0;
        while (a.lane_cursor + 1 < a.lane_end_s.size() &&
               a.v.progress > a.lane_end_s[a.lane_cursor])
            ++a.lane_cursor;
    }

    int current_lane_id(const Agent& a) const {
        return a.v.route.lane_ids[std::min(a.lane_cursor, a.v.route.lane_ids.size() - 1)];
    }

    void advance_progress(Agent& a) {
        const auto proj = a.v.route.path.project(a.v.pos);
        a.v.progress = std::max(a.v.progress, proj.s);
        while (a.lane_cursor + 1 < a.lane_end_s.size() &&
               a.v.progress > a.lane_end_s[a.lane_cursor])
            ++a.lane_cursor;
    }

    void extend_route(Agent& a) {
        while (a.v.route.path.length() - a.v.progress < 60.0) {
            const auto& last = map_->lane(a.v.route.lane_ids.back());
            if (last.next.empty()) return;
            const int next_id = last.next[rng_.uniform_int(static_cast<int>(last.next.size()))];
            a.v.route.extend(*map_, next_id);
            a.lane_end_s.push_back(a.lane_end_s.back() + map_->lane(next_id).center.length());
        }
    }

    void maintain_npc_routes() {
        for (size_t i = 0; i < agents_.size(); ++i) {
            Agent& a = agents_[i];
            extend_route(a);
            if (a.v.route.path.length() - a.v.progress < 5.5 && a.v.speed == 0.0 &&
                map_->lane(a.v.route.lane_ids.back()).next.empty()) {
                respawn(static_cast<int>(i));
            }
        }
    }

    // A finished NPC re-enters at the far end of a random inbound lane; the
    // fleet size stays fixed for the whole episode.
    void respawn(int idx) {
        Agent& a = agents_[static_cast<size_t>(idx)];
        if (claim_holder_ == idx) claim_holder_ = -1;
        for (int attempt = 0; attempt < 10; ++attempt) {
            const auto& zone = map_->npc_zones[static_cast<size_t>(
                rng_.uniform_int(static_cast<int>(map_->npc_zones.size())))];
            const auto& lane = map_->lane(zone.lane);
            if (lane.next.empty()) continue;  // inbound zones only
            const double s = rng_.uniform(0.0, 8.0);
            Agent cand;
            cand.v = make_vehicle(lane, s);
            cand.v.route = Route::from_lanes(*map_, {lane.id});
            cand.v.progress = s;
            set_lane_ends(cand);
            if (!placement_free(cand.v)) continue;
            a = std::move(cand);
            extend_route(a);
            return;
        }
        // No free slot this step; the car waits at the lane end and retries.
    }

    // --- intersection management ---------------------------------------------

    bool on_connector(const Agent& a) const { return map_->lane(current_lane_id(a)).connector; }

    // Distance to the stop line when the agent's next route lane is a
    // connector; empty otherwise.
    std::optional<double> stop_line_distance(const Agent& a) const {
        const size_t cur = a.lane_cursor;
        if (cur + 1 >= a.v.route.lane_ids.size()) return std::nullopt;
        if (map_->lane(a.v.route.lane_ids[cur]).connector) return std::nullopt;
        if (!map_->lane(a.v.route.lane_ids[cur + 1]).connector) return std::nullopt;
        return a.lane_end_s[cur] - a.v.progress;
    }

    void register_arrivals() {
        for (auto& a : agents_) {
            const auto d = stop_line_distance(a);
            if (d && *d < params_.request_distance) {
                if (a.arrival_step < 0) a.arrival_step = step_count_;
            }
        }
    }

    void update_claims() {
        // Release once the holder has cleared its connector (or vanished).
        if (claim_holder_ >= 0) {
            Agent& h = agents_[static_cast<size_t>(claim_holder_)];
            const bool past = !on_connector(h) && !stop_line_distance(h).has_value();
            if (past) {
                h.granted = false;
                h.arrival_step = -1;
                claim_holder_ = -1;
            }
        }
        if (claim_holder_ >= 0) return;
        // The box is occupied while any car (the ego included) is inside it.
        bool occupied = map_->in_intersection(ego_.v.pos);
        for (const auto& a : agents_) occupied = occupied || on_connector(a);
        if (occupied) return;
        // First come, first served; simultaneous arrivals yield to the car on
        // the right.
        int best = -1;
        int best_score = -1;
        for (size_t i = 0; i < agents_.size(); ++i) {
            if (agents_[i].arrival_step < 0 || agents_[i].granted) continue;
            if (best >= 0 && agents_[i].arrival_step > agents_[static_cast<size_t>(best)].arrival_step)
                continue;
            // right-hand score among same-step arrivals
            int score = 0;
            for (size_t j = 0; j < agents_.size(); ++j) {
                if (j == i || agents_[j].arrival_step != agents_[i].arrival_step) continue;
                const Vec2 rel = agents_[i].v.pos - agents_[j].v.pos;
                if (heading_vec(agents_[j].v.heading).cross(rel) < 0) ++score;
            }
            if (best < 0 || agents_[i].arrival_step < agents_[static_cast<size_t>(best)].arrival_step ||
                (agents_[i].arrival_step == agents_[static_cast<size_t>(best)].arrival_step &&
                 score > best_score)) {
                best = static_cast<int>(i);
                best_score = score;
            }
        }
        if (best >= 0) {
            agents_[static_cast<size_t>(best)].granted = true;
            claim_holder_ = best;
        }
    }

    // Longitudinal command for one NPC: lane speed, unless a leader sits
    // within gap_min or the stop line demands a halt.
    double npc_policy(int idx) const {
        const Agent& a = agents_[static_cast<size_t>(idx)];
        double cmd = map_->lane(current_lane_id(a)).speed_limit;
        // Leader gap rule along this agent's own route, the ego included.
        const double front_gap = leader_gap(a, idx);
        if (front_gap < params_.gap_min) cmd = 0.0;
        // Yield at the stop line until granted.
        const auto d = stop_line_distance(a);
        if (d && !a.granted && *d < params_.hold_distance) cmd = 0.0;
        // Hold at a dead-end (extension keeps live routes 60 m deep, so a
        // short remainder means the lane ends); respawn picks the car up.
        if (a.v.route.path.length() - a.v.progress < 5.0) cmd = 0.0;
        return cmd;
    }

    double leader_gap(const Agent& a, int self_idx) const {
        double best = std::numeric_limits<double>::infinity();
        auto consider = [&](const VehicleState& other) {
            const auto proj = a.v.route.path.project(other.pos);
            if (std::abs(proj.lateral) > params_.corridor_half_width) return;
            const double ahead = proj.s - a.v.progress;
            if (ahead <= 0.0 || ahead > params_.lead_lookahead) return;
            best = std::min(best, ahead - (a.v.length + other.length) / 2.0);
        };
        consider(ego_.v);
        for (size_t j = 0; j < agents_.size(); ++j)
            if (static_cast<int>(j) != self_idx) consider(agents_[j].v);
        return best;
    }

    std::shared_ptr<const MapGraph> map_;
    SimParams params_;
    Rng rng_{0};
    Agent ego_;
    std::vector<Agent> agents_;
    double ego_dest_s_ = 0.0;
    int step_count_ = 0;
    int claim_holder_ = -1;
    TerminalCause cause_ = TerminalCause::None;
};

}  // namespace vitdrive::sim
