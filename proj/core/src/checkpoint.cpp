#include "micl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "micl/common.hpp"

namespace micl {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'C', 'L', 'T', 'E', 'N', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

template <typename T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& f, const std::filesystem::path& path) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw ConfigError("tensor file truncated: " + path.string());
    return v;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open tensor file for writing: " + path.string());
    f.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put<std::uint32_t>(f, static_cast<std::uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(f, static_cast<std::uint32_t>(t->rank()));
        for (auto e : t->shape()) put<std::uint64_t>(f, static_cast<std::uint64_t>(e));
        f.write(reinterpret_cast<const char*>(t->data()),
                static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!f) throw ConfigError("short write on tensor file: " + path.string());
}

std::vector<std::pair<std::string, Tensor>> read_tensor_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open tensor file: " + path.string());
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ConfigError("not a micl tensor file: " + path.string());
    }
    const auto count = get<std::uint32_t>(f, path);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(f, path);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        if (!f) throw ConfigError("tensor file truncated: " + path.string());
        const auto rank = get<std::uint32_t>(f, path);
        std::vector<std::size_t> shape(rank);
        for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(f, path));
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!f) throw ConfigError("tensor file truncated: " + path.string());
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace micl
