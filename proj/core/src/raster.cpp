#include "micl/raster.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>

#include "micl/common.hpp"

namespace micl {

namespace {

// 5x7 bitmaps, one row per byte, low 5 bits used (msb-left).
struct FontGlyph {
    char ch;
    std::array<std::uint8_t, 7> rows;
};

constexpr FontGlyph kFont[] = {
    {'0', {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110}},
    {'1', {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110}},
    {'2', {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111}},
    {'3', {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110}},
    {'4', {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010}},
    {'5', {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110}},
    {'6', {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110}},
    {'7', {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000}},
    {'8', {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110}},
    {'9', {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100}},
    {'?', {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b00000, 0b00100}},
};

const FontGlyph& font_glyph(char ch) {
    for (const auto& g : kFont) {
        if (g.ch == ch) return g;
    }
    throw PreconditionError(std::string("render: no 5x7 bitmap for character '") + ch + "'");
}

void require_bounds(const Image& img, int x0, int y0, int x1, int y1, const char* what) {
    if (x0 < 0 || y0 < 0 || x1 >= static_cast<int>(img.width) || y1 >= static_cast<int>(img.height)) {
        throw PreconditionError(std::string("render: ") + what + " bounding box [" +
                                std::to_string(x0) + "," + std::to_string(y0) + "]..[" +
                                std::to_string(x1) + "," + std::to_string(y1) +
                                "] leaves the canvas");
    }
}

std::uint8_t fill_value(FillLevel f, int x, int y) {
    switch (f) {
        case FillLevel::white: return 255;
        case FillLevel::gray: return 170;
        case FillLevel::black: return 0;
        case FillLevel::dotted: return ((x / 2 + y / 2) % 2 == 0) ? 255 : 0;
    }
    return 0;
}

// Mask-based fill: paints pixels satisfying `inside`, then (for outlined
// shapes) re-inks mask pixels with a 4-neighbour outside the mask.
void paint_mask(Image& img, int x0, int y0, int x1, int y1,
                const std::function<bool(int, int)>& inside, FillLevel fill, bool outlined) {
    const int w = x1 - x0 + 1, h = y1 - y0 + 1;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(w * h), 0);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (inside(x, y)) mask[static_cast<std::size_t>((y - y0) * w + (x - x0))] = 1;

    auto in_mask = [&](int x, int y) {
        if (x < x0 || y < y0 || x > x1 || y > y1) return false;
        return mask[static_cast<std::size_t>((y - y0) * w + (x - x0))] != 0;
    };
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if (!in_mask(x, y)) continue;
            img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = fill_value(fill, x, y);
        }
    }
    if (!outlined) return;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            if (!in_mask(x, y)) continue;
            if (!in_mask(x - 1, y) || !in_mask(x + 1, y) || !in_mask(x, y - 1) || !in_mask(x, y + 1)) {
                img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = kInk;
            }
        }
    }
}

void draw(Image& img, const CirclePrim& p) {
    require_bounds(img, p.cx - p.r, p.cy - p.r, p.cx + p.r, p.cy + p.r, "circle");
    paint_mask(
        img, p.cx - p.r, p.cy - p.r, p.cx + p.r, p.cy + p.r,
        [&](int x, int y) {
            const int dx = x - p.cx, dy = y - p.cy;
            return dx * dx + dy * dy <= p.r * p.r;
        },
        p.fill, p.outlined);
}

void draw(Image& img, const SquarePrim& p) {
    require_bounds(img, p.cx - p.half, p.cy - p.half, p.cx + p.half, p.cy + p.half, "square");
    paint_mask(
        img, p.cx - p.half, p.cy - p.half, p.cx + p.half, p.cy + p.half,
        [&](int x, int y) {
            return std::abs(x - p.cx) <= p.half && std::abs(y - p.cy) <= p.half;
        },
        p.fill, p.outlined);
}

void draw(Image& img, const TrianglePrim& p) {
    require_bounds(img, p.cx - p.half, p.cy - p.half, p.cx + p.half, p.cy + p.half, "triangle");
    paint_mask(
        img, p.cx - p.half, p.cy - p.half, p.cx + p.half, p.cy + p.half,
        [&](int x, int y) {
            const int dy = y - (p.cy - p.half);  // 0 at apex row
            if (dy < 0 || dy > 2 * p.half) return false;
            return std::abs(x - p.cx) * 2 <= dy;
        },
        p.fill, p.outlined);
}

void draw(Image& img, const SegmentPrim& p) {
    const int lo_x = std::min(p.x0, p.x1), hi_x = std::max(p.x0, p.x1) + p.width - 1;
    const int lo_y = std::min(p.y0, p.y1), hi_y = std::max(p.y0, p.y1) + p.width - 1;
    require_bounds(img, lo_x, lo_y, hi_x, hi_y, "segment");
    int x = p.x0, y = p.y0;
    const int dx = std::abs(p.x1 - p.x0), sx = p.x0 < p.x1 ? 1 : -1;
    const int dy = -std::abs(p.y1 - p.y0), sy = p.y0 < p.y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        for (int oy = 0; oy < p.width; ++oy)
            for (int ox = 0; ox < p.width; ++ox)
                img.at(static_cast<std::size_t>(x + ox), static_cast<std::size_t>(y + oy)) = kInk;
        if (x == p.x1 && y == p.y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y += sy;
        }
    }
}

void draw(Image& img, const GlyphPrim& p) {
    if (p.scale < 1) throw PreconditionError("render: glyph scale must be >= 1");
    require_bounds(img, p.x, p.y, p.x + 5 * p.scale - 1, p.y + 7 * p.scale - 1, "glyph");
    const FontGlyph& g = font_glyph(p.ch);
    for (int r = 0; r < 7; ++r) {
        for (int c = 0; c < 5; ++c) {
            if (!(g.rows[static_cast<std::size_t>(r)] & (1u << (4 - c)))) continue;
            for (int sy = 0; sy < p.scale; ++sy)
                for (int sx = 0; sx < p.scale; ++sx)
                    img.at(static_cast<std::size_t>(p.x + c * p.scale + sx),
                           static_cast<std::size_t>(p.y + r * p.scale + sy)) = kInk;
        }
    }
}

}  // namespace

const char* fill_name(FillLevel f) {
    switch (f) {
        case FillLevel::white: return "white";
        case FillLevel::gray: return "gray";
        case FillLevel::black: return "black";
        case FillLevel::dotted: return "dotted";
    }
    return "?";
}

const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
    }
    return "?";
}

Image render(std::size_t width, std::size_t height, const std::vector<Primitive>& scene) {
    Image img(width, height, 0);
    for (const auto& prim : scene) {
        std::visit([&](const auto& p) { draw(img, p); }, prim);
    }
    return img;
}

std::pair<int, int> clock_direction(int hour) {
    // sin/cos of 30-degree multiples, scaled by 1000; y axis points down.
    static constexpr std::array<std::pair<int, int>, 12> table = {{
        {500, -866},   // 1
        {866, -500},   // 2
        {1000, 0},     // 3
        {866, 500},    // 4
        {500, 866},    // 5
        {0, 1000},     // 6
        {-500, 866},   // 7
        {-866, 500},   // 8
        {-1000, 0},    // 9
        {-866, -500},  // 10
        {-500, -866},  // 11
        {0, -1000},    // 12
    }};
    if (hour < 1 || hour > 12) throw PreconditionError("clock_direction: hour outside 1..12");
    return table[static_cast<std::size_t>(hour - 1)];
}

std::vector<std::uint8_t> pgm_bytes(const Image& img) {
    std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                         "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

void write_pgm(const std::filesystem::path& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("write_pgm: cannot open " + path.string());
    const auto bytes = pgm_bytes(img);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("read_pgm: cannot open " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P5") throw ConfigError("read_pgm: not a binary PGM: " + path.string());
    std::size_t w = 0, h = 0;
    int maxval = 0;
    f >> w >> h >> maxval;
    if (maxval != 255) throw ConfigError("read_pgm: expected maxval 255 in " + path.string());
    f.get();  // single whitespace after header
    Image img(w, h);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw ConfigError("read_pgm: truncated pixel data in " + path.string());
    return img;
}

}  // namespace micl
