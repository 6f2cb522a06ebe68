#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdrive {

// Birds-eye-view raster: the RL state. 8-bit RGB row-major; carries the
// world->image affine so downstream tooling can map attention cells back to
// world coordinates.
struct BEVFrame {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<uint8_t> pixels;  // height * width * channels
    double meters_per_pixel = 0.8;
    // px = m[0]*x + m[1]*y + m[2];  py = m[3]*x + m[4]*y + m[5]
    std::array<double, 6> world_to_image{1, 0, 0, 0, 1, 0};

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    bool same_pixels(const BEVFrame& o) const {
        return width == o.width && height == o.height && channels == o.channels &&
               pixels == o.pixels;
    }
};

using Rgb = std::array<uint8_t, 3>;

struct RenderStyle {
    Rgb background{0, 0, 0};
    Rgb drivable{90, 90, 90};
    Rgb curb{255, 255, 255};
    Rgb route{0, 200, 0};
    Rgb npc{220, 40, 40};
    Rgb ego{40, 90, 255};  // the ego car is the blue one
};

struct Viewport {
    double center_x = 0.0;
    double center_y = 0.0;
    double meters_per_pixel = 0.8;
    int width = 80;
    int height = 80;
};

// World y points up, image y points down.
inline std::array<double, 6> viewport_transform(const Viewport& vp) {
    const double s = 1.0 / vp.meters_per_pixel;
    return {s, 0.0, -vp.center_x * s + vp.width / 2.0,
            0.0, -s, vp.center_y * s + vp.height / 2.0};
}

// World coordinates of the center of pixel (row, col).
inline void pixel_center_world(const Viewport& vp, int row, int col, double& x, double& y) {
    x = (col + 0.5 - vp.width / 2.0) * vp.meters_per_pixel + vp.center_x;
    y = (vp.height / 2.0 - (row + 0.5)) * vp.meters_per_pixel + vp.center_y;
}

// Binary PPM (P6): lossless, payload is the raw pixel buffer.
inline void write_ppm(const BEVFrame& frame, const std::string& path) {
    if (frame.channels != 3) throw std::runtime_error("write_ppm: frame must be 3-channel RGB");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << frame.width << " " << frame.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(frame.pixels.data()),
              static_cast<std::streamsize>(frame.pixels.size()));
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline BEVFrame read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
        throw std::runtime_error("read_ppm: unsupported format in " + path);
    in.get();  // single whitespace after header
    BEVFrame frame;
    frame.width = w;
    frame.height = h;
    frame.channels = 3;
    frame.pixels.resize(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(frame.pixels.data()),
            static_cast<std::streamsize>(frame.pixels.size()));
    if (!in) throw std::runtime_error("read_ppm: truncated payload in " + path);
    return frame;
}

}  // namespace vitdrive
