#pragma once

#include "vitdrive/bev.hpp"
#include "vitdrive/sim/world.hpp"

namespace vitdrive {

namespace detail {

inline double dist_to_polyline(sim::Vec2 p, const std::vector<sim::Vec2>& pts) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i + 1 < pts.size(); ++i)
        best = std::min(best, sim::dist_point_segment(p, pts[i], pts[i + 1]));
    return best;
}

inline bool point_in_obb(sim::Vec2 p, const sim::Obb& box) {
    const sim::Vec2 d = p - box.center;
    const sim::Vec2 f = sim::heading_vec(box.heading);
    const double lon = d.dot(f);
    const double lat = d.cross(f);
    return std::abs(lon) <= box.half_length && std::abs(lat) <= box.half_width;
}

}  // namespace detail

// Paints the scene by sampling pixel centers, in fixed layer order:
// background, drivable area, curbs, planned route, NPC boxes, ego box.
// Later layers overwrite earlier ones, so an ego pixel is never covered.
inline BEVFrame render(const sim::World& world, const RenderStyle& style = {},
                       const Viewport& viewport = {}) {
    BEVFrame frame;
    frame.width = viewport.width;
    frame.height = viewport.height;
    frame.channels = 3;
    frame.meters_per_pixel = viewport.meters_per_pixel;
    frame.world_to_image = viewport_transform(viewport);
    frame.pixels.resize(static_cast<size_t>(frame.width) * frame.height * 3);

    {
        const sim::Vec2 ego = world.ego().pos;
        const double half_w = viewport.width * viewport.meters_per_pixel / 2.0;
        const double half_h = viewport.height * viewport.meters_per_pixel / 2.0;
        if (std::abs(ego.x - viewport.center_x) > half_w ||
            std::abs(ego.y - viewport.center_y) > half_h)
            throw std::invalid_argument("render: viewport does not cover the ego position");
    }

    const auto route_pts = world.remaining_route();
    const double curb_r = 0.45;
    const double route_r = 0.7;

    std::vector<sim::Obb> npc_boxes;
    for (const auto* v : world.npcs()) npc_boxes.push_back(v->footprint());
    const sim::Obb ego_box = world.ego().footprint();

    auto put = [&frame](int y, int x, const Rgb& c) {
        frame.at(y, x, 0) = c[0];
        frame.at(y, x, 1) = c[1];
        frame.at(y, x, 2) = c[2];
    };

    for (int y = 0; y < frame.height; ++y) {
        for (int x = 0; x < frame.width; ++x) {
            sim::Vec2 p;
            pixel_center_world(viewport, y, x, p.x, p.y);
            put(y, x, style.background);
            for (const auto& poly : world.map().drivable)
                if (sim::point_in_polygon(p, poly)) {
                    put(y, x, style.drivable);
                    break;
                }
            for (const auto& curb : world.map().curbs)
                if (detail::dist_to_polyline(p, curb) <= curb_r) {
                    put(y, x, style.curb);
                    break;
                }
            if (route_pts.size() >= 2 && detail::dist_to_polyline(p, route_pts) <= route_r)
                put(y, x, style.route);
            for (const auto& box : npc_boxes)
                if (detail::point_in_obb(p, box)) {
                    put(y, x, style.npc);
                    break;
                }
            if (detail::point_in_obb(p, ego_box)) put(y, x, style.ego);
        }
    }
    return frame;
}

inline void export_image(const BEVFrame& frame, const std::string& path) {
    write_ppm(frame, path);
}

}  // namespace vitdrive
