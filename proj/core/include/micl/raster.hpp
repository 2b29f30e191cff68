#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

namespace micl {

// Grayscale raster image, row-major, values drawn from kPalette.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::uint8_t fill = 0)
        : width(w), height(h), pixels(w * h, fill) {}

    std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
    bool operator==(const Image& o) const = default;
};

// Fixed 4-level palette; every rendered pixel holds one of these values.
inline constexpr std::array<std::uint8_t, 4> kPalette = {0, 85, 170, 255};
inline constexpr std::uint8_t kInk = 255;
inline constexpr std::uint8_t kTick = 85;

// Named fill levels standing in for the paper's colors.
enum class FillLevel : std::uint8_t { white, gray, black, dotted };
const char* fill_name(FillLevel f);

enum class ShapeKind : std::uint8_t { circle, square, triangle };
const char* shape_name(ShapeKind s);

struct CirclePrim {
    int cx, cy, r;
    FillLevel fill;
    bool outlined;
};
struct SquarePrim {
    int cx, cy, half;
    FillLevel fill;
    bool outlined;
};
struct TrianglePrim {
    int cx, cy, half;  // up-pointing, vertices (cx, cy-half), (cx+-half, cy+half)
    FillLevel fill;
    bool outlined;
};
struct SegmentPrim {
    int x0, y0, x1, y1;
    int width = 1;  // stamp size along the Bresenham walk
};
struct GlyphPrim {
    int x, y;   // top-left corner
    int scale;  // integer magnification of the 5x7 bitmap
    char ch;    // '0'..'9' or '?'
};

using Primitive = std::variant<CirclePrim, SquarePrim, TrianglePrim, SegmentPrim, GlyphPrim>;

// Deterministic integer rasterization onto a black canvas; no anti-aliasing.
// Primitives extending past the canvas are rejected.
Image render(std::size_t width, std::size_t height, const std::vector<Primitive>& scene);

// Direction of clock hour mark h (1..12), scaled by 1000; y grows downward.
std::pair<int, int> clock_direction(int hour);

// Binary PGM (P5), written and parsed bit-exactly.
void write_pgm(const std::filesystem::path& path, const Image& img);
Image read_pgm(const std::filesystem::path& path);
std::vector<std::uint8_t> pgm_bytes(const Image& img);

}  // namespace micl
