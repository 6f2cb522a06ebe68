#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>

#include "vitdrive/bev_render.hpp"

namespace vitdrive {

// One step of the RL-facing environment: the rendered next state plus the
// reward split into its collision and distance terms (reward is their sum,
// and r_collision is -100 exactly on collision-terminal steps).
struct StepResult {
    BEVFrame frame;
    float reward = 0.0f;
    float r_collision = 0.0f;
    float r_distance = 0.0f;
    bool terminal = false;
    sim::TerminalCause cause = sim::TerminalCause::None;
};

struct TraceRow {
    int step = 0;
    int action = 0;
    float reward = 0.0f;
    float r_collision = 0.0f;
    float r_distance = 0.0f;
    std::string cause;
    double ego_x = 0, ego_y = 0, ego_heading = 0, ego_speed = 0;
    std::vector<std::array<double, 3>> npc_poses;  // x, y, heading
};

inline void write_trace(const std::string& path, const std::vector<TraceRow>& rows, int npc_count) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_trace: cannot open " + path);
    out << "step,action,reward,r_collision,r_distance,cause,ego_x,ego_y,ego_heading,ego_speed";
    for (int i = 0; i < npc_count; ++i)
        out << ",npc" << i << "_x,npc" << i << "_y,npc" << i << "_heading";
    out << "\n";
    out << std::setprecision(17);
    for (const auto& r : rows) {
        out << r.step << ',' << r.action << ',' << r.reward << ',' << r.r_collision << ','
            << r.r_distance << ',' << r.cause << ',' << r.ego_x << ',' << r.ego_y << ','
            << r.ego_heading << ',' << r.ego_speed;
        for (const auto& p : r.npc_poses) out << ',' << p[0] << ',' << p[1] << ',' << p[2];
        out << "\n";
    }
}

// Driving environment: the simulator plus the BEV camera. Satisfies the
// trainer's Env shape with State = BEVFrame.
class DrivingEnv {
public:
    using State = BEVFrame;

    DrivingEnv(const std::string& scenario, sim::SimParams params = {}, RenderStyle style = {},
               Viewport viewport = {})
        : world_(scenario, params), style_(style), viewport_(viewport) {}

    DrivingEnv(std::shared_ptr<const sim::MapGraph> map, sim::SimParams params = {},
               RenderStyle style = {}, Viewport viewport = {})
        : world_(std::move(map), params), style_(style), viewport_(viewport) {}

    int num_actions() const { return 2; }

    BEVFrame reset(uint64_t seed) {
        world_.reset(seed);
        trace_.clear();
        return render(world_, style_, viewport_);
    }

    struct Step {
        BEVFrame next;
        float reward = 0.0f;
        bool terminal = false;
    };

    Step step(int action) {
        auto full = step_full(action);
        return {std::move(full.frame), full.reward, full.terminal};
    }

    StepResult step_full(int action) {
        const auto sim_out =
            world_.step(action == 0 ? sim::EgoAction::Move : sim::EgoAction::Stop);
        StepResult out;
        out.reward = sim_out.reward;
        out.r_collision = sim_out.r_collision;
        out.r_distance = sim_out.r_distance;
        out.terminal = sim_out.terminal;
        out.cause = sim_out.cause;
        out.frame = render(world_, style_, viewport_);
        append_trace(action, out);
        return out;
    }

    const sim::World& world() const { return world_; }
    const Viewport& viewport() const { return viewport_; }
    const RenderStyle& style() const { return style_; }
    const std::vector<TraceRow>& trace() const { return trace_; }

private:
    void append_trace(int action, const StepResult& r) {
        TraceRow row;
        row.step = world_.step_count();
        row.action = action;
        row.reward = r.reward;
        row.r_collision = r.r_collision;
        row.r_distance = r.r_distance;
        row.cause = sim::to_string(r.cause);
        row.ego_x = world_.ego().pos.x;
        row.ego_y = world_.ego().pos.y;
        row.ego_heading = world_.ego().heading;
        row.ego_speed = world_.ego().speed;
        for (const auto* v : world_.npcs())
            row.npc_poses.push_back({v->pos.x, v->pos.y, v->heading});
        trace_.push_back(std::move(row));
    }

    sim::World world_;
    RenderStyle style_;
    Viewport viewport_;
    std::vector<TraceRow> trace_;
};

}  // namespace vitdrive
