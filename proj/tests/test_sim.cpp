#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vitdrive/env.hpp"
#include "vitdrive/sim/world.hpp"

using namespace vitdrive;
using namespace vitdrive::sim;

namespace {

// Single straight lane with pinned spawn points; the workhorse for
// deterministic interaction tests.
std::shared_ptr<const MapGraph> straight_map(double ego_s, std::vector<double> npc_s,
                                             double lane_speed = 6.0) {
    MapGraph map;
    map.id = "straight_test";
    Lane a;
    a.id = 0;
    a.center = Polyline({{0, 0}, {200, 0}});
    a.speed_limit = lane_speed;
    Lane b;  // successor so the ego route builder finds a connector + exit
    b.id = 1;
    b.center = Polyline({{200, 0}, {210, 0}});
    b.connector = true;
    Lane c;
    c.id = 2;
    c.center = Polyline({{210, 0}, {260, 0}});
    a.next = {1};
    b.next = {2};
    map.lanes = {a, b, c};
    map.drivable = {{{0, -3.5}, {260, -3.5}, {260, 3.5}, {0, 3.5}}};
    map.curbs = {{{0, 3.5}, {260, 3.5}}, {{0, -3.5}, {260, -3.5}}};
    map.intersection_box = {{300, 300}, {301, 300}, {301, 301}, {300, 301}};
    map.ego_spawn = {0, ego_s, ego_s};
    for (double s : npc_s) map.npc_zones.push_back({0, s, s});
    return std::make_shared<const MapGraph>(std::move(map));
}

SimParams no_npc_params() {
    SimParams p;
    p.npc_count = 0;
    return p;
}

}  // namespace

TEST_CASE("collision_check is a symmetric OBB test") {
    VehicleState a;
    a.pos = {0, 0};
    a.length = 4;
    a.width = 2;
    VehicleState b = a;

    SECTION("identical poses collide") { CHECK(collision_check(a, b)); }

    SECTION("far apart do not") {
        b.pos = {100, 0};
        CHECK_FALSE(collision_check(a, b));
        CHECK_FALSE(collision_check(b, a));
    }

    SECTION("axis-aligned boxes separate at the half-width sum") {
        b.pos = {0, 1.9};  // half widths 1.0 + 1.0 = 2.0
        CHECK(collision_check(a, b));
        CHECK(collision_check(b, a));
        b.pos = {0, 2.1};
        CHECK_FALSE(collision_check(a, b));
        CHECK_FALSE(collision_check(b, a));
    }
}

TEST_CASE("kinematic_update integrates the bicycle model") {
    VehicleState v;
    v.pos = {3, 4};
    v.heading = 0.7;
    v.speed = 0.0;

    SECTION("zero speed leaves the pose unchanged") {
        auto next = kinematic_update(v, 8.0, 0.3, 0.1);
        CHECK(next.pos.x == v.pos.x);
        CHECK(next.pos.y == v.pos.y);
        CHECK(next.heading == v.heading);
        CHECK(next.speed > 0.0);  // command begins to take effect next step
    }

    SECTION("straight motion advances v*dt exactly") {
        v.heading = 0.0;
        v.speed = 8.0;
        auto next = kinematic_update(v, 8.0, 0.0, 0.1);
        CHECK(next.pos.x == Catch::Approx(3.8).margin(1e-12));
        CHECK(next.pos.y == 4.0);
    }

    SECTION("constant steering traces the closed-form circle radius") {
        // Many revolutions so the centroid estimate of the circle center is
        // unbiased by the fractional final arc.
        const double steer = 0.3;
        VehicleState car;
        car.speed = 8.0;
        std::vector<Vec2> pts;
        double turned = 0.0;
        while (turned < 40 * 2 * M_PI) {
            const double before = car.heading;
            car = kinematic_update(car, 8.0, steer, 0.1, 100.0);
            turned += std::abs(wrap_angle(car.heading - before));
            pts.push_back(car.pos);
        }
        Vec2 centroid{0, 0};
        for (const auto& p : pts) centroid = centroid + p;
        centroid = centroid * (1.0 / static_cast<double>(pts.size()));
        const double expected = car.wheelbase / std::tan(steer);
        for (const auto& p : pts) {
            const double r = (p - centroid).norm();
            CHECK(std::abs(r - expected) / expected < 0.01);
        }
    }
}

TEST_CASE("pid_steering sign conventions and convergence") {
    MapGraph map = *straight_map(10, {});
    Route route = Route::from_lanes(map, {0});

    SECTION("on the centerline, aligned: zero steering") {
        VehicleState v;
        v.pos = {50, 0};
        v.heading = 0.0;
        v.speed = 8.0;
        CHECK(pid_steering(v, route) == Catch::Approx(0.0).margin(1e-12));
    }

    SECTION("left of lane steers right") {
        VehicleState v;
        v.pos = {50, 0.8};  // left of the +x lane
        v.heading = 0.0;
        v.speed = 8.0;
        CHECK(pid_steering(v, route) < 0.0);
    }

    SECTION("0.5 m offset converges below 0.05 m within 100 steps") {
        VehicleState v;
        v.pos = {20, 0.5};
        v.heading = 0.0;
        v.speed = 8.0;
        bool converged = false;
        for (int i = 0; i < 100; ++i) {
            const double steer = pid_steering(v, route);
            v = kinematic_update(v, 8.0, steer, 0.1, 100.0);
            if (std::abs(v.pos.y) < 0.05 && i > 10) {
                converged = true;
            }
        }
        CHECK(std::abs(v.pos.y) < 0.05);
        CHECK(converged);
    }
}

TEST_CASE("reset is deterministic and overlap-free") {
    World w("fourway");
    w.reset(42);

    SECTION("npc count matches the default") { CHECK(w.npcs().size() == 30); }

    SECTION("no spawn overlaps") {
        auto vehicles = w.npcs();
        for (size_t i = 0; i < vehicles.size(); ++i) {
            CHECK_FALSE(collision_check(w.ego(), *vehicles[i]));
            for (size_t j = i + 1; j < vehicles.size(); ++j)
                CHECK_FALSE(collision_check(*vehicles[i], *vehicles[j]));
        }
    }

    SECTION("same seed reproduces every pose") {
        World w2("fourway");
        w2.reset(42);
        CHECK(w.ego().pos.x == w2.ego().pos.x);
        CHECK(w.ego().pos.y == w2.ego().pos.y);
        auto a = w.npcs();
        auto b = w2.npcs();
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i]->pos.x == b[i]->pos.x);
            CHECK(a[i]->pos.y == b[i]->pos.y);
            CHECK(a[i]->heading == b[i]->heading);
        }
    }

    SECTION("different seeds differ") {
        World w2("fourway");
        w2.reset(43);
        bool any_diff = w.ego().pos.x != w2.ego().pos.x || w.ego().pos.y != w2.ego().pos.y;
        auto a = w.npcs();
        auto b = w2.npcs();
        for (size_t i = 0; i < a.size() && !any_diff; ++i)
            any_diff = a[i]->pos.x != b[i]->pos.x;
        CHECK(any_diff);
    }
}

TEST_CASE("spawn failure surfaces as an error") {
    SimParams p;
    p.npc_count = 500;  // cannot fit
    p.spawn_retries = 50;
    World w("fourway", p);
    CHECK_THROWS_AS(w.reset(1), SpawnError);
}

TEST_CASE("episode-long Stop earns zero reward and no collisions") {
    World w("fourway");
    w.reset(7);
    for (int i = 0; i < 600; ++i) {
        auto out = w.step(EgoAction::Stop);
        CHECK(out.reward == 0.0f);
        CHECK(out.r_collision == 0.0f);
        if (i % 25 == 0) CHECK_FALSE(w.any_npc_npc_collision());
        if (out.terminal) {
            CHECK(out.cause == TerminalCause::Timeout);
            CHECK(w.step_count() == 600);
            break;
        }
    }
    CHECK(w.terminal());
}

TEST_CASE("stepping a terminal episode is a contract error") {
    SimParams p = no_npc_params();
    p.max_steps = 3;
    World w("fourway", p);
    w.reset(1);
    for (int i = 0; i < 3; ++i) w.step(EgoAction::Stop);
    CHECK(w.terminal());
    CHECK_THROWS_AS(w.step(EgoAction::Stop), std::logic_error);
}

TEST_CASE("deterministic stepping under a fixed action sequence") {
    auto run = [](uint64_t seed) {
        World w("fourway");
        w.reset(seed);
        std::vector<float> rewards;
        Rng rng(123);
        for (int i = 0; i < 120 && !w.terminal(); ++i) {
            auto out = w.step(rng.bernoulli(0.5) ? EgoAction::Move : EgoAction::Stop);
            rewards.push_back(out.reward);
        }
        return rewards;
    };
    CHECK(run(11) == run(11));
}

TEST_CASE("rear-end collision pays -100 plus the step distance, exactly decomposed") {
    // Parked car ahead on the ego lane: driving Move-only must strike it.
    SimParams p;
    p.npc_count = 1;
    p.max_steps = 600;
    World w(straight_map(10, {24}, /*lane_speed=*/0.0), p);
    w.reset(3);
    REQUIRE(w.npcs().size() == 1);

    SimStep last;
    int steps = 0;
    while (!w.terminal()) {
        last = w.step(EgoAction::Move);
        ++steps;
    }
    CHECK(last.cause == TerminalCause::Collision);
    CHECK(last.r_collision == -100.0f);
    CHECK(last.reward == last.r_collision + last.r_distance);
    CHECK(last.r_distance > 0.0f);
    CHECK(last.r_distance < 1.0f);
    // gap 14 m center-to-center, overlap at 4.5 m, ego cruises at 8 m/s
    CHECK(steps < 50);
}

TEST_CASE("npc stops behind a leader inside the minimum gap") {
    // NPC 2 m (bumper) behind a parked ego; it must hold still.
    SimParams p;
    p.npc_count = 1;
    World w(straight_map(20, {13.5}), p);  // center gap 6.5 = 2 + car length
    w.reset(5);
    for (int i = 0; i < 30; ++i) {
        auto out = w.step(EgoAction::Stop);
        CHECK(out.r_collision == 0.0f);
    }
    CHECK(w.npcs()[0]->speed == 0.0);
    CHECK(w.npcs()[0]->pos.x == Catch::Approx(13.5).margin(1e-9));
}

TEST_CASE("npc follows on an empty road at lane speed") {
    SimParams p;
    p.npc_count = 1;
    World w(straight_map(190, {10}), p);
    w.reset(5);
    for (int i = 0; i < 40; ++i) w.step(EgoAction::Stop);
    CHECK(w.npcs()[0]->speed == Catch::Approx(6.0).margin(1e-9));
    CHECK(w.npcs()[0]->pos.x > 20.0);
}

namespace {

// Two perpendicular single-lane approaches meeting at a box around the
// origin; spawn points equidistant so both cars arrive simultaneously.
std::shared_ptr<const MapGraph> crossing_map(double spawn_dist) {
    MapGraph map;
    map.id = "crossing_test";
    // northbound: approach, connector, exit
    Lane na{0, Polyline({{0, -60}, {0, -8}}), 6.0, false, {1}};
    Lane nc{1, Polyline({{0, -8}, {0, 8}}), 6.0, true, {2}};
    Lane nx{2, Polyline({{0, 8}, {0, 60}}), 6.0, false, {}};
    // westbound: approach from +x, connector, exit
    Lane wa{3, Polyline({{60, 0.0}, {8, 0.0}}), 6.0, false, {4}};
    Lane wc{4, Polyline({{8, 0.0}, {-8, 0.0}}), 6.0, true, {5}};
    Lane wx{5, Polyline({{-8, 0.0}, {-60, 0.0}}), 6.0, false, {}};
    // far-away ego pen so the ego cannot interfere
    Lane ea{6, Polyline({{1000, 1000}, {1040, 1000}}), 6.0, false, {7}};
    Lane ec{7, Polyline({{1040, 1000}, {1050, 1000}}), 6.0, true, {8}};
    Lane ex{8, Polyline({{1050, 1000}, {1100, 1000}}), 6.0, false, {}};
    map.lanes = {na, nc, nx, wa, wc, wx, ea, ec, ex};
    map.drivable = {{{-60, -3.5}, {60, -3.5}, {60, 3.5}, {-60, 3.5}},
                    {{-3.5, -60}, {3.5, -60}, {3.5, 60}, {-3.5, 60}}};
    map.intersection_box = {{-8, -8}, {8, -8}, {8, 8}, {-8, 8}};
    map.ego_spawn = {6, 5, 5};
    const double s = 52.0 - spawn_dist;  // arc length to put the car spawn_dist before the box
    map.npc_zones = {{0, s, s}, {3, s, s}};
    return std::make_shared<const MapGraph>(std::move(map));
}

}  // namespace

TEST_CASE("simultaneous arrivals yield to the right-hand vehicle") {
    SimParams p;
    p.npc_count = 2;
    World w(crossing_map(20.0), p);
    w.reset(9);
    REQUIRE(w.npcs().size() == 2);
    // One car heads north from the south arm, the other west from the east
    // arm. The westbound car approaches from the northbound car's right, so
    // it must cross first.
    const VehicleState* north = w.npcs()[0];
    const VehicleState* west = w.npcs()[1];
    if (north->pos.y >= -8) std::swap(north, west);
    REQUIRE(north->pos.y < -8);
    REQUIRE(west->pos.x > 8);

    bool west_entered_first = false;
    for (int i = 0; i < 200 && !w.terminal(); ++i) {
        w.step(EgoAction::Stop);
        const bool north_in = std::abs(north->pos.y) < 8 && std::abs(north->pos.x) < 8;
        const bool west_in = std::abs(west->pos.x) < 8 && std::abs(west->pos.y) < 8;
        if (west_in && !north_in && !west_entered_first) west_entered_first = true;
        if (north_in) {
            CHECK(west_entered_first);
            break;
        }
    }
    CHECK(west_entered_first);
}

TEST_CASE("intersection is granted one car at a time in the stop-and-go flow") {
    SimParams p;
    p.npc_count = 2;
    World w(crossing_map(20.0), p);
    w.reset(9);
    for (int i = 0; i < 400 && !w.terminal(); ++i) {
        w.step(EgoAction::Stop);
        CHECK_FALSE(w.any_npc_npc_collision());
    }
}

TEST_CASE("scenario maps build and round-trip through json") {
    for (const char* name : {"fourway", "t_intersection"}) {
        MapGraph map = make_scenario(name);
        CHECK(map.id == name);
        auto j = to_json(map);
        MapGraph back = map_from_json(j);
        REQUIRE(back.lanes.size() == map.lanes.size());
        for (size_t i = 0; i < map.lanes.size(); ++i) {
            CHECK(back.lanes[i].id == map.lanes[i].id);
            CHECK(back.lanes[i].connector == map.lanes[i].connector);
            CHECK(back.lanes[i].next == map.lanes[i].next);
            REQUIRE(back.lanes[i].center.points().size() == map.lanes[i].center.points().size());
            for (size_t k = 0; k < map.lanes[i].center.points().size(); ++k) {
                CHECK(back.lanes[i].center.points()[k].x == map.lanes[i].center.points()[k].x);
                CHECK(back.lanes[i].center.points()[k].y == map.lanes[i].center.points()[k].y);
            }
        }
        CHECK(back.npc_zones.size() == map.npc_zones.size());
    }
    CHECK_THROWS_AS(make_scenario("roundabout"), std::invalid_argument);
}

TEST_CASE("unknown scenario and bad lane lookups fail loudly") {
    MapGraph map = make_fourway();
    CHECK_THROWS_AS(map.lane(999), std::invalid_argument);
}

TEST_CASE("driving env produces frames and traces") {
    SimParams p;
    p.npc_count = 4;
    DrivingEnv env("fourway", p);
    auto frame = env.reset(17);
    CHECK(frame.width == 80);
    CHECK(frame.height == 80);
    CHECK(frame.pixels.size() == 80u * 80u * 3u);

    auto out = env.step_full(0);  // Move
    CHECK(out.frame.pixels.size() == frame.pixels.size());
    CHECK(out.reward == out.r_collision + out.r_distance);
    CHECK(env.trace().size() == 1);
    CHECK(env.trace()[0].npc_poses.size() == 4);
}
