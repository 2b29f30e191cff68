#include "micl/truemicl.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "micl/common.hpp"

namespace micl {

using nlohmann::json;

namespace {

int div_round(int a, int b) { return a >= 0 ? (a + b / 2) / b : -((-a + b / 2) / b); }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return Rng::hash64(a ^ (b * 0x9e3779b97f4a7c15ull)); }

std::uint64_t task_salt(TaskKind kind) { return Rng::hash64(0x5eedu + static_cast<std::uint64_t>(kind)); }

int rule_index(const std::vector<std::string>& rules, std::string_view rule) {
    for (std::size_t i = 0; i < rules.size(); ++i) {
        if (rules[i] == rule) return static_cast<int>(i);
    }
    return -1;
}

}  // namespace

std::string_view task_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::operator_induction: return "operator";
        case TaskKind::clock: return "clock";
        case TaskKind::outlier: return "outlier";
        case TaskKind::clevr: return "clevr";
        case TaskKind::sudoku: return "sudoku";
        case TaskKind::palindrome: return "palindrome";
        case TaskKind::character: return "character";
    }
    return "?";
}

TaskKind task_from_name(std::string_view name) {
    for (TaskKind k : kAllTasks) {
        if (task_name(k) == name) return k;
    }
    throw ConfigError("unknown task name: " + std::string(name));
}

bool numeric_labels(TaskKind kind) {
    return kind != TaskKind::outlier && kind != TaskKind::character;
}

std::string_view task_instruction(TaskKind kind) {
    switch (kind) {
        case TaskKind::operator_induction: return "what is the result";
        case TaskKind::clock: return "what do the hands show";
        case TaskKind::outlier: return "what is the outlier";
        case TaskKind::clevr: return "how many";
        case TaskKind::sudoku: return "what is the missing row";
        case TaskKind::palindrome: return "what is the missing digit";
        case TaskKind::character: return "who is this";
    }
    return "";
}

std::vector<std::string> rules_of(TaskKind kind, const TaskGenConfig& cfg) {
    switch (kind) {
        case TaskKind::operator_induction: return cfg.operator_rules;
        case TaskKind::clock: return cfg.clock_rules;
        case TaskKind::outlier: return {"fill", "shape"};
        case TaskKind::clevr: return {"circle", "square", "triangle"};
        case TaskKind::sudoku: return {"ap"};
        case TaskKind::palindrome: return {"pal"};
        case TaskKind::character: return {"name"};
    }
    return {};
}

std::string SampleMeta::identity() const {
    std::ostringstream os;
    os << task_name(kind) << '/' << rule;
    for (auto v : values) os << '/' << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Value drawing
// ---------------------------------------------------------------------------

SampleMeta draw_meta(TaskKind kind, std::string_view rule, const TaskGenConfig& cfg, Rng& rng) {
    const auto rules = rules_of(kind, cfg);
    if (rule_index(rules, rule) < 0) {
        throw PreconditionError("generate_sample: rule '" + std::string(rule) + "' is invalid for task " +
                                std::string(task_name(kind)));
    }
    SampleMeta meta;
    meta.kind = kind;
    meta.rule = std::string(rule);
    switch (kind) {
        case TaskKind::operator_induction: {
            meta.values = {rng.range(0, cfg.operator_digit_max), rng.range(0, cfg.operator_digit_max)};
            break;
        }
        case TaskKind::clock: {
            const std::int64_t a = rng.range(1, 12);
            std::int64_t b = rng.range(1, 11);
            if (b >= a) ++b;
            meta.values = {a, b};
            break;
        }
        case TaskKind::outlier: {
            const int cells = cfg.outlier_grid * cfg.outlier_grid;
            const std::int64_t base_shape = rng.range(0, 2);
            const std::int64_t base_fill = rng.range(0, 3);
            const std::int64_t shape_cell = rng.range(0, cells - 1);
            std::int64_t fill_cell = rng.range(0, cells - 2);
            if (fill_cell >= shape_cell) ++fill_cell;
            std::int64_t shape_kind = rng.range(0, 1);
            if (shape_kind >= base_shape) ++shape_kind;
            std::int64_t fill_kind = rng.range(0, 2);
            if (fill_kind >= base_fill) ++fill_kind;
            meta.values = {base_shape, base_fill, shape_cell, shape_kind, fill_cell, fill_kind};
            break;
        }
        case TaskKind::clevr: {
            std::int64_t nc = 0, ns = 0, nt = 0;
            do {
                nc = rng.range(0, cfg.clevr_count_max);
                ns = rng.range(0, cfg.clevr_count_max);
                nt = rng.range(0, cfg.clevr_count_max);
            } while (nc + ns + nt < 1 || nc + ns + nt > 12);
            meta.values = {nc, ns, nt, static_cast<std::int64_t>(rng.below(1u << 20))};
            break;
        }
        case TaskKind::sudoku: {
            meta.values = {rng.range(0, 9), rng.range(0, 9), rng.range(0, 9),
                           rng.range(1, cfg.sudoku_step_max), rng.range(1, cfg.sudoku_step_max),
                           rng.range(1, cfg.sudoku_step_max)};
            break;
        }
        case TaskKind::palindrome: {
            meta.values = {rng.range(0, 9), rng.range(0, 9), rng.range(0, 9)};
            break;
        }
        case TaskKind::character: {
            const std::int64_t cls = rng.range(0, cfg.character_eval_classes - 1);
            const std::int64_t inst = rng.range(0, 1 << 20);
            const auto glyphs = static_cast<std::int64_t>(rng.next_u64() >> 1);
            const auto naming = static_cast<std::int64_t>(rng.next_u64() >> 1);
            meta.values = {cls, inst, glyphs, naming};
            break;
        }
    }
    meta.seed = mix(fnv1a(meta.identity().data(), meta.identity().size()), task_salt(kind));
    return meta;
}

// ---------------------------------------------------------------------------
// Rendering + generator-side labels
// ---------------------------------------------------------------------------

namespace {

// Scales a coordinate laid out on the 32-pixel reference canvas.
int sc(int v32, int image_size) { return v32 * image_size / 32; }

void render_two_digits(std::vector<Primitive>& scene, int a, int b, int s) {
    const int scale = std::max(1, s / 16);
    const int w = 5 * scale, h = 7 * scale;
    const int y = (s - h) / 2;
    scene.push_back(GlyphPrim{sc(3, s), y, scale, static_cast<char>('0' + a)});
    scene.push_back(GlyphPrim{s - sc(3, s) - w, y, scale, static_cast<char>('0' + b)});
    // neutral separator dot between the operands
    scene.push_back(SquarePrim{s / 2, s / 2, std::max(1, s / 32), FillLevel::white, false});
}

Image render_operator(const SampleMeta& m, int s) {
    std::vector<Primitive> scene;
    render_two_digits(scene, static_cast<int>(m.values[0]), static_cast<int>(m.values[1]), s);
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Image render_clock(const SampleMeta& m, int s) {
    const int cx = s / 2, cy = s / 2;
    const int r = s / 2 - 2;
    std::vector<Primitive> scene;
    scene.push_back(CirclePrim{cx, cy, r, FillLevel::black, true});
    std::vector<Primitive> hands;
    for (int h = 1; h <= 12; ++h) {
        const auto [dx, dy] = clock_direction(h);
        const int tx = cx + div_round(dx * (r - 2), 1000);
        const int ty = cy + div_round(dy * (r - 2), 1000);
        hands.push_back(SquarePrim{tx, ty, 0, FillLevel::gray, false});
    }
    const auto hand = [&](int hour, int len, int width) {
        const auto [dx, dy] = clock_direction(hour);
        hands.push_back(SegmentPrim{cx, cy, cx + div_round(dx * len, 1000),
                                    cy + div_round(dy * len, 1000), width});
    };
    hand(static_cast<int>(m.values[0]), r * 5 / 10, 2);  // short hand
    hand(static_cast<int>(m.values[1]), r * 8 / 10, 1);  // long hand
    scene.insert(scene.end(), hands.begin(), hands.end());
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Primitive make_shape(ShapeKind kind, int cx, int cy, int half, FillLevel fill) {
    switch (kind) {
        case ShapeKind::circle: return CirclePrim{cx, cy, half, fill, true};
        case ShapeKind::square: return SquarePrim{cx, cy, half, fill, true};
        case ShapeKind::triangle: return TrianglePrim{cx, cy, half, fill, true};
    }
    throw PreconditionError("make_shape: bad kind");
}

Image render_outlier(const SampleMeta& m, int s, int grid) {
    const int cell = s / grid;
    const int half = cell / 3;
    const auto base_shape = static_cast<ShapeKind>(m.values[0]);
    const auto base_fill = static_cast<FillLevel>(m.values[1]);
    const int shape_cell = static_cast<int>(m.values[2]);
    const auto shape_kind = static_cast<ShapeKind>(m.values[3]);
    const int fill_cell = static_cast<int>(m.values[4]);
    const auto fill_kind = static_cast<FillLevel>(m.values[5]);
    std::vector<Primitive> scene;
    for (int c = 0; c < grid * grid; ++c) {
        const int cx = (c % grid) * cell + cell / 2;
        const int cy = (c / grid) * cell + cell / 2;
        const ShapeKind sk = (c == shape_cell) ? shape_kind : base_shape;
        const FillLevel fl = (c == fill_cell) ? fill_kind : base_fill;
        scene.push_back(make_shape(sk, cx, cy, half, fl));
    }
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Image render_clevr(const SampleMeta& m, int s) {
    const int nc = static_cast<int>(m.values[0]);
    const int ns = static_cast<int>(m.values[1]);
    const int nt = static_cast<int>(m.values[2]);
    const int total = nc + ns + nt;
    Rng layout = Rng::stream(m.seed, 0xc1e7);
    const auto cells = layout.permutation(16);
    const int cell = s / 4;
    std::vector<Primitive> scene;
    for (int i = 0; i < total; ++i) {
        const int cx = (static_cast<int>(cells[static_cast<std::size_t>(i)]) % 4) * cell + cell / 2 +
                       static_cast<int>(layout.range(-1, 1));
        const int cy = (static_cast<int>(cells[static_cast<std::size_t>(i)]) / 4) * cell + cell / 2 +
                       static_cast<int>(layout.range(-1, 1));
        const ShapeKind kind = i < nc            ? ShapeKind::circle
                               : i < nc + ns     ? ShapeKind::square
                                                 : ShapeKind::triangle;
        scene.push_back(make_shape(kind, cx, cy, std::max(2, cell / 4), FillLevel::white));
    }
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Image render_sudoku(const SampleMeta& m, int s) {
    const int scale = std::max(1, s / 32);
    std::vector<Primitive> scene;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            const int x = sc(4 + 10 * c, s);
            const int y = sc(2 + 10 * r, s);
            char ch = '?';
            if (r != 1) {
                const auto top = m.values[static_cast<std::size_t>(c)];
                const auto step = m.values[static_cast<std::size_t>(3 + c)];
                ch = static_cast<char>('0' + (top + r * step) % 10);
            }
            scene.push_back(GlyphPrim{x, y, scale, ch});
        }
    }
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Image render_palindrome(const SampleMeta& m, int s) {
    const int scale = std::max(1, s / 32);
    const char d0 = static_cast<char>('0' + m.values[0]);
    const char d1 = static_cast<char>('0' + m.values[1]);
    const char d2 = static_cast<char>('0' + m.values[2]);
    const char digits[5] = {d0, d1, d2, d1, '?'};
    std::vector<Primitive> scene;
    for (int i = 0; i < 5; ++i) {
        scene.push_back(GlyphPrim{sc(2 + 6 * i, s), sc(12, s), scale, digits[i]});
    }
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

Image render_character(const SampleMeta& m, int s) {
    const auto cls = static_cast<std::uint64_t>(m.values[0]);
    const auto glyph_seed = static_cast<std::uint64_t>(m.values[2]);
    Rng strokes = Rng::stream(mix(glyph_seed, 0x917f), cls);
    const int n_strokes = static_cast<int>(strokes.range(4, 7));
    Rng jitter = Rng::stream(m.seed, 0xc0de);
    const int ox = static_cast<int>(jitter.range(-2, 2));
    const int oy = static_cast<int>(jitter.range(-2, 2));
    std::vector<Primitive> scene;
    for (int i = 0; i < n_strokes; ++i) {
        const int x0 = sc(static_cast<int>(strokes.range(7, 24)), s);
        const int y0 = sc(static_cast<int>(strokes.range(7, 24)), s);
        const int x1 = sc(static_cast<int>(strokes.range(7, 24)), s);
        const int y1 = sc(static_cast<int>(strokes.range(7, 24)), s);
        const int jx0 = static_cast<int>(jitter.range(-1, 1));
        const int jy0 = static_cast<int>(jitter.range(-1, 1));
        const int jx1 = static_cast<int>(jitter.range(-1, 1));
        const int jy1 = static_cast<int>(jitter.range(-1, 1));
        scene.push_back(SegmentPrim{x0 + ox + jx0, y0 + oy + jy0, x1 + ox + jx1, y1 + oy + jy1, 2});
    }
    return render(static_cast<std::size_t>(s), static_cast<std::size_t>(s), scene);
}

std::int64_t apply_rule(std::string_view rule, std::int64_t a, std::int64_t b) {
    if (rule == "add") return a + b;
    if (rule == "sub") return a - b;
    if (rule == "mul") return a * b;
    throw PreconditionError("apply_rule: unknown arithmetic rule '" + std::string(rule) + "'");
}

}  // namespace

std::vector<std::string> character_name_table(std::uint64_t naming_seed, int n_classes) {
    static constexpr std::string_view consonants = "bdfgklmnprstvz";
    static constexpr std::string_view vowels = "aeiou";
    Rng rng = Rng::stream(naming_seed, 0x7ab1e);
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(n_classes));
    while (static_cast<int>(names.size()) < n_classes) {
        const int syllables = rng.uniform() < 0.5 ? 2 : 3;
        std::string name;
        for (int i = 0; i < syllables; ++i) {
            name += consonants[static_cast<std::size_t>(rng.below(consonants.size()))];
            name += vowels[static_cast<std::size_t>(rng.below(vowels.size()))];
        }
        bool clash = false;
        for (const auto& prev : names) {
            if (prev == name || prev.find(name) != std::string::npos ||
                name.find(prev) != std::string::npos) {
                clash = true;
                break;
            }
        }
        if (!clash) names.push_back(std::move(name));
    }
    return names;
}

GeneratedSample materialize(const SampleMeta& meta, const TaskGenConfig& cfg) {
    GeneratedSample out;
    out.meta = meta;
    out.instruction = std::string(task_instruction(meta.kind));
    const int s = cfg.image_size;
    switch (meta.kind) {
        case TaskKind::operator_induction: {
            out.image = render_operator(meta, s);
            out.label = std::to_string(apply_rule(meta.rule, meta.values[0], meta.values[1]));
            break;
        }
        case TaskKind::clock: {
            out.image = render_clock(meta, s);
            out.label = std::to_string(apply_rule(meta.rule, meta.values[0], meta.values[1]));
            break;
        }
        case TaskKind::outlier: {
            out.image = render_outlier(meta, s, cfg.outlier_grid);
            out.label = meta.rule == "fill" ? fill_name(static_cast<FillLevel>(meta.values[5]))
                                            : shape_name(static_cast<ShapeKind>(meta.values[3]));
            break;
        }
        case TaskKind::clevr: {
            out.image = render_clevr(meta, s);
            const auto rules = rules_of(TaskKind::clevr, cfg);
            out.label = std::to_string(meta.values[static_cast<std::size_t>(rule_index(rules, meta.rule))]);
            break;
        }
        case TaskKind::sudoku: {
            out.image = render_sudoku(meta, s);
            std::string row;
            for (int c = 0; c < 3; ++c) {
                row += static_cast<char>('0' + (meta.values[static_cast<std::size_t>(c)] +
                                                meta.values[static_cast<std::size_t>(3 + c)]) %
                                                   10);
            }
            out.label = row;
            break;
        }
        case TaskKind::palindrome: {
            out.image = render_palindrome(meta, s);
            out.label = std::to_string(meta.values[0]);
            break;
        }
        case TaskKind::character: {
            out.image = render_character(meta, s);
            const auto cls = static_cast<int>(meta.values[0]);
            const auto table =
                character_name_table(static_cast<std::uint64_t>(meta.values[3]), cls + 1);
            out.label = table[static_cast<std::size_t>(cls)];
            break;
        }
    }
    return out;
}

GeneratedSample generate_sample(TaskKind kind, std::string_view rule, const TaskGenConfig& cfg,
                                Rng& rng) {
    return materialize(draw_meta(kind, rule, cfg, rng), cfg);
}

// ---------------------------------------------------------------------------
// Independent label oracle: straight-line recomputation from the raw values.
// ---------------------------------------------------------------------------

std::string oracle_label(const SampleMeta& meta) {
    const auto& v = meta.values;
    switch (meta.kind) {
        case TaskKind::operator_induction:
        case TaskKind::clock: {
            std::int64_t r = 0;
            if (meta.rule == "add") r = v[0] + v[1];
            else if (meta.rule == "sub") r = v[0] - v[1];
            else if (meta.rule == "mul") r = v[0] * v[1];
            else throw PreconditionError("oracle_label: unknown rule " + meta.rule);
            return std::to_string(r);
        }
        case TaskKind::outlier: {
            if (meta.rule == "fill") {
                switch (v[5]) {
                    case 0: return "white";
                    case 1: return "gray";
                    case 2: return "black";
                    case 3: return "dotted";
                }
            } else {
                switch (v[3]) {
                    case 0: return "circle";
                    case 1: return "square";
                    case 2: return "triangle";
                }
            }
            throw PreconditionError("oracle_label: bad outlier meta");
        }
        case TaskKind::clevr: {
            if (meta.rule == "circle") return std::to_string(v[0]);
            if (meta.rule == "square") return std::to_string(v[1]);
            if (meta.rule == "triangle") return std::to_string(v[2]);
            throw PreconditionError("oracle_label: unknown clevr rule " + meta.rule);
        }
        case TaskKind::sudoku: {
            std::string row;
            row += static_cast<char>('0' + (v[0] + v[3]) % 10);
            row += static_cast<char>('0' + (v[1] + v[4]) % 10);
            row += static_cast<char>('0' + (v[2] + v[5]) % 10);
            return row;
        }
        case TaskKind::palindrome: {
            // displayed stem is d0 d1 d2 d1 ?, the mirror digit is d0
            return std::to_string(v[0]);
        }
        case TaskKind::character: {
            const auto cls = static_cast<int>(v[0]);
            return character_name_table(static_cast<std::uint64_t>(v[3]), cls + 1)
                [static_cast<std::size_t>(cls)];
        }
    }
    throw PreconditionError("oracle_label: bad task kind");
}

std::uint64_t novelty_key(const SampleMeta& meta) {
    const auto& v = meta.values;
    const std::uint64_t salt = task_salt(meta.kind);
    switch (meta.kind) {
        case TaskKind::operator_induction:
        case TaskKind::clock:
            return mix(salt, static_cast<std::uint64_t>(v[0] * 100 + v[1]));
        case TaskKind::outlier:
            return mix(salt, static_cast<std::uint64_t>(((v[0] * 4 + v[1]) * 4 + v[5]) * 4 + v[3]));
        case TaskKind::clevr:
            return mix(salt, static_cast<std::uint64_t>((v[0] * 16 + v[1]) * 16 + v[2]));
        case TaskKind::sudoku: {
            std::uint64_t key = 0;
            for (auto x : v) key = key * 16 + static_cast<std::uint64_t>(x);
            return mix(salt, key);
        }
        case TaskKind::palindrome:
            return mix(salt, static_cast<std::uint64_t>((v[0] * 10 + v[1]) * 10 + v[2]));
        case TaskKind::character:
            return mix(static_cast<std::uint64_t>(v[2]), static_cast<std::uint64_t>(v[0]));  // glyph class
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Split construction
// ---------------------------------------------------------------------------

namespace {

// Round-robin distribution of `total` over `k` buckets.
std::vector<std::size_t> distribute(std::size_t total, std::size_t k) {
    std::vector<std::size_t> out(k, total / k);
    for (std::size_t i = 0; i < total % k; ++i) ++out[i];
    return out;
}

// Balanced novelty partition: keys ranked by seeded hash, first half -> eval.
bool in_eval_pool(std::uint64_t key, std::uint64_t master_seed,
                  const std::vector<std::uint64_t>& all_keys) {
    // rank of this key among all keys under the seeded hash
    const std::uint64_t my = mix(key, master_seed);
    std::size_t rank = 0;
    for (auto k : all_keys) {
        const std::uint64_t h = mix(k, master_seed);
        if (h < my || (h == my && k < key)) ++rank;
    }
    return rank < (all_keys.size() + 1) / 2;
}

struct DomainPools {
    // metas available per rule, already restricted to one side of the novelty
    // partition and deterministically shuffled
    std::vector<std::deque<SampleMeta>> eval_by_rule;
    std::vector<std::deque<SampleMeta>> train_by_rule;
};

void finalize_meta(SampleMeta& m, std::uint64_t master_seed) {
    const std::string id = m.identity();
    m.seed = mix(fnv1a(id.data(), id.size()), master_seed);
}

void shuffle_pool(std::deque<SampleMeta>& pool, std::uint64_t seed) {
    std::vector<SampleMeta> v(pool.begin(), pool.end());
    Rng rng(seed);
    const auto perm = rng.permutation(v.size());
    pool.clear();
    for (auto idx : perm) pool.push_back(std::move(v[idx]));
}

// Enumerates the full value domain for tasks with enumerable pools and
// partitions it by novelty key.
DomainPools enumerate_pools(TaskKind kind, const TaskGenConfig& cfg, std::uint64_t master_seed) {
    const auto rules = rules_of(kind, cfg);
    DomainPools pools;
    pools.eval_by_rule.resize(rules.size());
    pools.train_by_rule.resize(rules.size());

    std::vector<std::vector<std::int64_t>> domain;  // value tuples (rule-independent)
    switch (kind) {
        case TaskKind::operator_induction: {
            for (std::int64_t a = 0; a <= cfg.operator_digit_max; ++a)
                for (std::int64_t b = 0; b <= cfg.operator_digit_max; ++b) domain.push_back({a, b});
            break;
        }
        case TaskKind::clock: {
            for (std::int64_t a = 1; a <= 12; ++a)
                for (std::int64_t b = 1; b <= 12; ++b)
                    if (a != b) domain.push_back({a, b});
            break;
        }
        case TaskKind::outlier: {
            const int cells = cfg.outlier_grid * cfg.outlier_grid;
            for (std::int64_t bs = 0; bs < 3; ++bs)
                for (std::int64_t bf = 0; bf < 4; ++bf)
                    for (std::int64_t scell = 0; scell < cells; ++scell)
                        for (std::int64_t sk = 0; sk < 3; ++sk) {
                            if (sk == bs) continue;
                            for (std::int64_t fcell = 0; fcell < cells; ++fcell) {
                                if (fcell == scell) continue;
                                for (std::int64_t fk = 0; fk < 4; ++fk) {
                                    if (fk == bf) continue;
                                    domain.push_back({bs, bf, scell, sk, fcell, fk});
                                }
                            }
                        }
            break;
        }
        case TaskKind::sudoku: {
            for (std::int64_t t0 = 0; t0 <= 9; ++t0)
                for (std::int64_t t1 = 0; t1 <= 9; ++t1)
                    for (std::int64_t t2 = 0; t2 <= 9; ++t2)
                        for (std::int64_t s0 = 1; s0 <= cfg.sudoku_step_max; ++s0)
                            for (std::int64_t s1 = 1; s1 <= cfg.sudoku_step_max; ++s1)
                                for (std::int64_t s2 = 1; s2 <= cfg.sudoku_step_max; ++s2)
                                    domain.push_back({t0, t1, t2, s0, s1, s2});
            break;
        }
        case TaskKind::palindrome: {
            for (std::int64_t d0 = 0; d0 <= 9; ++d0)
                for (std::int64_t d1 = 0; d1 <= 9; ++d1)
                    for (std::int64_t d2 = 0; d2 <= 9; ++d2) domain.push_back({d0, d1, d2});
            break;
        }
        default:
            throw PreconditionError("enumerate_pools: task has a dedicated pool builder");
    }

    // novelty keys over the value domain (rule-independent)
    std::vector<std::uint64_t> keys;
    keys.reserve(domain.size());
    for (const auto& vals : domain) {
        SampleMeta probe{kind, std::string(rules.front()), vals, 0};
        keys.push_back(novelty_key(probe));
    }
    std::vector<std::uint64_t> unique_keys = keys;
    std::sort(unique_keys.begin(), unique_keys.end());
    unique_keys.erase(std::unique(unique_keys.begin(), unique_keys.end()), unique_keys.end());

    // rank-based membership: sort unique keys by seeded hash once
    std::vector<std::uint64_t> hashed(unique_keys.size());
    std::vector<std::size_t> order(unique_keys.size());
    for (std::size_t i = 0; i < unique_keys.size(); ++i) hashed[i] = mix(unique_keys[i], master_seed);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return hashed[x] != hashed[y] ? hashed[x] < hashed[y] : unique_keys[x] < unique_keys[y];
    });
    std::map<std::uint64_t, bool> eval_member;
    for (std::size_t r = 0; r < order.size(); ++r)
        eval_member[unique_keys[order[r]]] = r < (order.size() + 1) / 2;

    for (std::size_t ri = 0; ri < rules.size(); ++ri) {
        for (const auto& vals : domain) {
            SampleMeta m{kind, rules[ri], vals, 0};
            finalize_meta(m, master_seed);
            if (eval_member[novelty_key(m)]) {
                pools.eval_by_rule[ri].push_back(std::move(m));
            } else {
                pools.train_by_rule[ri].push_back(std::move(m));
            }
        }
        shuffle_pool(pools.eval_by_rule[ri], mix(master_seed, task_salt(kind) + 2 * ri));
        shuffle_pool(pools.train_by_rule[ri], mix(master_seed, task_salt(kind) + 2 * ri + 1));
    }
    return pools;
}

std::vector<GeneratedSample> take_samples(DomainPools& pools, bool eval_side, std::size_t total,
                                          const std::vector<std::string>& rules,
                                          const TaskGenConfig& cfg, TaskKind kind,
                                          std::string_view split) {
    auto quota = distribute(total, rules.size());
    std::vector<GeneratedSample> out;
    out.reserve(total);
    for (std::size_t ri = 0; ri < rules.size(); ++ri) {
        auto& pool = eval_side ? pools.eval_by_rule[ri] : pools.train_by_rule[ri];
        for (std::size_t i = 0; i < quota[ri]; ++i) {
            if (pool.empty()) {
                throw PreconditionError("build_splits: " + std::string(task_name(kind)) + " " +
                                        std::string(split) + " needs more '" + rules[ri] +
                                        "' samples than the value pool holds");
            }
            out.push_back(materialize(pool.front(), cfg));
            pool.pop_front();
        }
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<std::uint32_t>(i);
    return out;
}

// clevr pools are unbounded in the variant index; counts are partitioned.
struct ClevrPool {
    std::vector<std::vector<std::int64_t>> counts;  // one side of the partition, shuffled
    std::map<std::uint64_t, std::int64_t> next_variant;
    std::size_t cursor = 0;
};

SplitSet build_clevr(const SplitSizes& sizes, const TaskGenConfig& cfg, std::uint64_t master_seed) {
    std::vector<std::vector<std::int64_t>> domain;
    for (std::int64_t nc = 0; nc <= cfg.clevr_count_max; ++nc)
        for (std::int64_t ns = 0; ns <= cfg.clevr_count_max; ++ns)
            for (std::int64_t nt = 0; nt <= cfg.clevr_count_max; ++nt) {
                if (nc + ns + nt < 1 || nc + ns + nt > 12) continue;
                domain.push_back({nc, ns, nt});
            }
    std::vector<std::uint64_t> keys;
    for (const auto& vals : domain) {
        SampleMeta probe{TaskKind::clevr, "circle", {vals[0], vals[1], vals[2], 0}, 0};
        keys.push_back(novelty_key(probe));
    }
    ClevrPool eval_pool, train_pool;
    {
        std::vector<std::size_t> order(domain.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<std::uint64_t> hashed(domain.size());
        for (std::size_t i = 0; i < domain.size(); ++i) hashed[i] = mix(keys[i], master_seed);
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            return hashed[x] != hashed[y] ? hashed[x] < hashed[y] : keys[x] < keys[y];
        });
        for (std::size_t r = 0; r < order.size(); ++r) {
            (r < (order.size() + 1) / 2 ? eval_pool : train_pool).counts.push_back(domain[order[r]]);
        }
    }
    const auto rules = rules_of(TaskKind::clevr, cfg);
    auto take = [&](ClevrPool& pool, std::size_t total, std::string_view) {
        auto quota = distribute(total, rules.size());
        std::vector<GeneratedSample> out;
        for (std::size_t ri = 0; ri < rules.size(); ++ri) {
            for (std::size_t i = 0; i < quota[ri]; ++i) {
                const auto& vals = pool.counts[pool.cursor % pool.counts.size()];
                ++pool.cursor;
                SampleMeta probe{TaskKind::clevr, rules[ri], {vals[0], vals[1], vals[2], 0}, 0};
                const auto nk = novelty_key(probe);
                SampleMeta m = probe;
                m.values[3] = pool.next_variant[nk]++;
                finalize_meta(m, master_seed);
                out.push_back(materialize(m, cfg));
            }
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<std::uint32_t>(i);
        return out;
    };
    SplitSet set;
    set.kind = TaskKind::clevr;
    set.support = take(eval_pool, sizes.support, "support");
    set.test = take(eval_pool, sizes.test, "test");
    set.train_support = take(train_pool, sizes.train_support, "train_support");
    set.train_query = take(train_pool, sizes.train_query, "train_query");
    return set;
}

SplitSet build_character(const SplitSizes& sizes, const TaskGenConfig& cfg,
                         std::uint64_t master_seed) {
    const std::uint64_t eval_glyphs = mix(master_seed, 0x617f) >> 1;
    const std::uint64_t eval_naming = mix(master_seed, 0xe7a1) >> 1;
    const std::uint64_t train_glyphs = mix(master_seed, 0x617e) >> 1;
    const std::uint64_t train_naming = mix(master_seed, 0x7261) >> 1;
    auto build = [&](std::uint64_t glyphs, std::uint64_t naming, int n_classes, std::size_t total,
                     std::int64_t inst0) {
        std::vector<GeneratedSample> out;
        const auto per_class = distribute(total, static_cast<std::size_t>(n_classes));
        std::size_t max_per = 0;
        for (auto q : per_class) max_per = std::max(max_per, q);
        for (std::size_t inst = 0; inst < max_per; ++inst) {
            for (int cls = 0; cls < n_classes; ++cls) {
                if (inst >= per_class[static_cast<std::size_t>(cls)]) continue;
                SampleMeta m{TaskKind::character,
                             "name",
                             {cls, inst0 + static_cast<std::int64_t>(inst),
                              static_cast<std::int64_t>(glyphs), static_cast<std::int64_t>(naming)},
                             0};
                finalize_meta(m, master_seed);
                out.push_back(materialize(m, cfg));
            }
        }
        for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<std::uint32_t>(i);
        return out;
    };
    SplitSet set;
    set.kind = TaskKind::character;
    set.support = build(eval_glyphs, eval_naming, cfg.character_eval_classes, sizes.support, 0);
    set.test = build(eval_glyphs, eval_naming, cfg.character_eval_classes, sizes.character_test, 1000);
    set.train_support =
        build(train_glyphs, train_naming, cfg.character_train_classes, sizes.train_support, 0);
    set.train_query =
        build(train_glyphs, train_naming, cfg.character_train_classes, sizes.train_query, 1000);
    return set;
}

}  // namespace

const std::vector<GeneratedSample>& SplitSet::split(std::string_view name) const {
    if (name == "support") return support;
    if (name == "test") return test;
    if (name == "train_support") return train_support;
    if (name == "train_query") return train_query;
    throw ConfigError("unknown split name: " + std::string(name));
}

std::vector<GeneratedSample>& SplitSet::split(std::string_view name) {
    return const_cast<std::vector<GeneratedSample>&>(std::as_const(*this).split(name));
}

SplitSet build_splits(TaskKind kind, const SplitSizes& sizes, const TaskGenConfig& cfg,
                      std::uint64_t master_seed) {
    if (kind == TaskKind::clevr) return build_clevr(sizes, cfg, master_seed);
    if (kind == TaskKind::character) return build_character(sizes, cfg, master_seed);

    DomainPools pools = enumerate_pools(kind, cfg, master_seed);
    const auto rules = rules_of(kind, cfg);

    // train_query is an artifact knob, clamped to what the pool can serve
    std::size_t train_capacity = 0;
    for (const auto& pool : pools.train_by_rule) train_capacity += pool.size();
    const std::size_t train_query =
        std::min(sizes.train_query, train_capacity > sizes.train_support
                                        ? train_capacity - sizes.train_support
                                        : 0);

    SplitSet set;
    set.kind = kind;
    set.support = take_samples(pools, true, sizes.support, rules, cfg, kind, "support");
    set.test = take_samples(pools, true, sizes.test, rules, cfg, kind, "test");
    set.train_support =
        take_samples(pools, false, sizes.train_support, rules, cfg, kind, "train_support");
    set.train_query = take_samples(pools, false, train_query, rules, cfg, kind, "train_query");
    return set;
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

namespace {

json meta_to_json(const SampleMeta& m) {
    return json{{"kind", std::string(task_name(m.kind))},
                {"rule", m.rule},
                {"values", m.values},
                {"seed", hex64(m.seed)}};
}

SampleMeta meta_from_json(const json& j) {
    SampleMeta m;
    m.kind = task_from_name(j.at("kind").get<std::string>());
    m.rule = j.at("rule").get<std::string>();
    m.values = j.at("values").get<std::vector<std::int64_t>>();
    m.seed = std::stoull(j.at("seed").get<std::string>(), nullptr, 16);
    return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& data, std::uint64_t master_seed,
                  const TaskGenConfig& cfg, const SplitSizes& sizes) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json manifest;
    manifest["generator_version"] = std::string(kGeneratorVersion);
    manifest["master_seed"] = hex64(master_seed);
    manifest["config"] = {{"image_size", cfg.image_size},
                          {"operator_digit_max", cfg.operator_digit_max},
                          {"operator_rules", cfg.operator_rules},
                          {"clock_rules", cfg.clock_rules},
                          {"outlier_grid", cfg.outlier_grid},
                          {"clevr_count_max", cfg.clevr_count_max},
                          {"sudoku_step_max", cfg.sudoku_step_max},
                          {"character_eval_classes", cfg.character_eval_classes},
                          {"character_train_classes", cfg.character_train_classes}};
    manifest["sizes"] = {{"support", sizes.support},
                         {"test", sizes.test},
                         {"character_test", sizes.character_test},
                         {"train_support", sizes.train_support},
                         {"train_query", sizes.train_query}};
    json tasks = json::object();

    for (const auto& [kind, set] : data) {
        const std::string tname(task_name(kind));
        json split_sizes = json::object();
        for (auto split : kSplitNames) {
            const auto& samples = set.split(split);
            split_sizes[std::string(split)] = samples.size();
            const fs::path split_dir = dir / tname / split;
            fs::create_directories(split_dir);
            std::ofstream jsonl(dir / tname / (std::string(split) + ".jsonl"));
            if (!jsonl) throw ConfigError("save_dataset: cannot write under " + dir.string());
            for (const auto& s : samples) {
                char name[16];
                std::snprintf(name, sizeof(name), "%06u.pgm", s.id);
                const fs::path img_rel = fs::path(tname) / split / name;
                write_pgm(dir / img_rel, s.image);
                json line{{"id", s.id},
                          {"image_path", img_rel.generic_string()},
                          {"instruction", s.instruction},
                          {"label", s.label},
                          {"meta", meta_to_json(s.meta)},
                          {"seed", hex64(s.meta.seed)}};
                jsonl << line.dump() << '\n';
            }
        }
        tasks[tname] = split_sizes;
    }
    manifest["tasks"] = tasks;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw ConfigError("load_dataset: missing manifest at " + (dir / "manifest.json").string());
    json manifest = json::parse(mf);
    Dataset data;
    for (const auto& [tname, _] : manifest.at("tasks").items()) {
        const TaskKind kind = task_from_name(tname);
        SplitSet set;
        set.kind = kind;
        for (auto split : kSplitNames) {
            std::ifstream jsonl(dir / tname / (std::string(split) + ".jsonl"));
            if (!jsonl) throw ConfigError("load_dataset: missing split file for " + tname);
            std::string line;
            std::vector<GeneratedSample> samples;
            while (std::getline(jsonl, line)) {
                if (line.empty()) continue;
                json j = json::parse(line);
                GeneratedSample s;
                s.id = j.at("id").get<std::uint32_t>();
                s.instruction = j.at("instruction").get<std::string>();
                s.label = j.at("label").get<std::string>();
                s.meta = meta_from_json(j.at("meta"));
                s.image = read_pgm(dir / j.at("image_path").get<std::string>());
                samples.push_back(std::move(s));
            }
            set.split(split) = std::move(samples);
        }
        data[kind] = std::move(set);
    }
    return data;
}

}  // namespace micl
