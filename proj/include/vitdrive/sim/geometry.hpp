#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace vitdrive::sim {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double cross(Vec2 o) const { return x * o.y - y * o.x; }
    double norm() const { return std::hypot(x, y); }
    Vec2 normalized() const {
        const double n = norm();
        return n > 0 ? Vec2{x / n, y / n} : Vec2{1, 0};
    }
};

inline Vec2 heading_vec(double heading) { return {std::cos(heading), std::sin(heading)}; }

inline double wrap_angle(double a) {
    while (a > M_PI) a -= 2 * M_PI;
    while (a < -M_PI) a += 2 * M_PI;
    return a;
}

inline double dist_point_segment(Vec2 p, Vec2 a, Vec2 b) {
    const Vec2 ab = b - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (p - (a + ab * t)).norm();
}

// Even-odd rule; points exactly on an edge are implementation-defined, which
// is fine for raster sampling at pixel centers.
inline bool point_in_polygon(Vec2 p, const std::vector<Vec2>& poly) {
    bool inside = false;
    const size_t n = poly.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        const Vec2& a = poly[i];
        const Vec2& b = poly[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

// Polyline with cumulative arc length: the backbone of lanes and routes.
class Polyline {
public:
    Polyline() = default;
    explicit Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
        if (pts_.size() < 2) throw std::invalid_argument("polyline needs at least two points");
        cum_.resize(pts_.size());
        cum_[0] = 0.0;
        for (size_t i = 1; i < pts_.size(); ++i)
            cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
    }

    const std::vector<Vec2>& points() const { return pts_; }
    double length() const { return cum_.back(); }

    Vec2 point_at(double s) const {
        const auto [i, t] = locate(s);
        return pts_[i] + (pts_[i + 1] - pts_[i]) * t;
    }

    double heading_at(double s) const {
        const auto [i, t] = locate(s);
        (void)t;
        const Vec2 d = pts_[i + 1] - pts_[i];
        return std::atan2(d.y, d.x);
    }

    struct Projection {
        double s = 0.0;        // arc length of the closest point
        double lateral = 0.0;  // signed offset, positive left of travel
        double distance = 0.0;
    };

    Projection project(Vec2 p) const {
        Projection best;
        best.distance = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i + 1 < pts_.size(); ++i) {
            const Vec2 a = pts_[i];
            const Vec2 ab = pts_[i + 1] - a;
            const double len2 = ab.dot(ab);
            double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const Vec2 foot = a + ab * t;
            const double d = (p - foot).norm();
            if (d < best.distance) {
                best.distance = d;
                best.s = cum_[i] + ab.norm() * t;
            }
        }
        // lateral sign: positive when p lies left of the travel direction
        const auto [i, t] = locate(best.s);
        (void)t;
        const Vec2 tang = (pts_[i + 1] - pts_[i]).normalized();
        best.lateral = tang.cross(p - point_at(best.s)) >= 0 ? best.distance : -best.distance;
        return best;
    }

    // Sub-polyline between two arc lengths (clamped), for route rendering.
    std::vector<Vec2> slice(double s0, double s1) const {
        s0 = std::clamp(s0, 0.0, length());
        s1 = std::clamp(s1, 0.0, length());
        if (s1 <= s0) return {};
        std::vector<Vec2> out;
        out.push_back(point_at(s0));
        for (size_t i = 0; i < pts_.size(); ++i)
            if (cum_[i] > s0 && cum_[i] < s1) out.push_back(pts_[i]);
        out.push_back(point_at(s1));
        return out;
    }

private:
    std::pair<size_t, double> locate(double s) const {
        s = std::clamp(s, 0.0, length());
        size_t lo = 0, hi = pts_.size() - 1;
        while (lo + 1 < hi) {
            const size_t mid = (lo + hi) / 2;
            if (cum_[mid] <= s)
                lo = mid;
            else
                hi = mid;
        }
        const double seg = cum_[lo + 1] - cum_[lo];
        return {lo, seg > 0 ? (s - cum_[lo]) / seg : 0.0};
    }

    std::vector<Vec2> pts_;
    std::vector<double> cum_;
};

// Oriented bounding box for vehicle footprints.
struct Obb {
    Vec2 center;
    double heading = 0.0;
    double half_length = 0.0;
    double half_width = 0.0;

    std::array<Vec2, 4> corners() const {
        const Vec2 f = heading_vec(heading);
        const Vec2 l{-f.y, f.x};
        const Vec2 a = f * half_length;
        const Vec2 b = l * half_width;
        return {center + a + b, center + a - b, center - a - b, center - a + b};
    }
};

// Separating-axis test over the four face normals; symmetric by construction.
inline bool obb_overlap(const Obb& p, const Obb& q) {
    const auto pc = p.corners();
    const auto qc = q.corners();
    const Vec2 axes[4] = {heading_vec(p.heading), {-std::sin(p.heading), std::cos(p.heading)},
                          heading_vec(q.heading), {-std::sin(q.heading), std::cos(q.heading)}};
    for (const Vec2& axis : axes) {
        double pmin = std::numeric_limits<double>::infinity(), pmax = -pmin;
        double qmin = pmin, qmax = -pmin;
        for (const Vec2& c : pc) {
            const double v = c.dot(axis);
            pmin = std::min(pmin, v);
            pmax = std::max(pmax, v);
        }
        for (const Vec2& c : qc) {
            const double v = c.dot(axis);
            qmin = std::min(qmin, v);
            qmax = std::max(qmax, v);
        }
        if (pmax < qmin || qmax < pmin) return false;
    }
    return true;
}

// Quarter-arc sampled as a polyline, used for intersection connectors.
inline std::vector<Vec2> arc_points(Vec2 center, double radius, double a0, double a1, int n = 12) {
    std::vector<Vec2> pts;
    pts.reserve(static_cast<size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
        const double a = a0 + (a1 - a0) * i / n;
        pts.push_back({center.x + radius * std::cos(a), center.y + radius * std::sin(a)});
    }
    return pts;
}

}  // namespace vitdrive::sim
