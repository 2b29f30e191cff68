#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "micl/raster.hpp"
#include "micl/rng.hpp"

namespace micl {

enum class TaskKind : std::uint8_t {
    operator_induction,
    clock,
    outlier,
    clevr,
    sudoku,
    palindrome,
    character,
};

inline constexpr std::array<TaskKind, 7> kAllTasks = {
    TaskKind::operator_induction, TaskKind::clock,      TaskKind::outlier, TaskKind::clevr,
    TaskKind::sudoku,             TaskKind::palindrome, TaskKind::character,
};

std::string_view task_name(TaskKind kind);
TaskKind task_from_name(std::string_view name);

// Whether predictions for this task are scored by exact string match
// (numeric labels) or by whole-word keyword containment (textual labels).
bool numeric_labels(TaskKind kind);

// Raw values behind one sample; enough to recompute the label without the
// image. Value layout per task:
//   operator   rule add|sub|mul      values {a, b}
//   clock      rule add|mul          values {short_hand, long_hand}   (1..12, distinct)
//   outlier    rule fill|shape       values {base_shape, base_fill, shape_cell,
//                                            shape_kind, fill_cell, fill_kind}
//   clevr      rule circle|square|triangle
//                                    values {n_circle, n_square, n_triangle, variant}
//   sudoku     rule ap               values {t0, t1, t2, s0, s1, s2}
//   palindrome rule pal              values {d0, d1, d2}   (digits of "d0 d1 d2 d1 ?")
//   character  rule name             values {class_id, instance_id, glyph_seed, naming_seed}
// `seed` drives layout/jitter where the values do not pin every pixel.
struct SampleMeta {
    TaskKind kind = TaskKind::operator_induction;
    std::string rule;
    std::vector<std::int64_t> values;
    std::uint64_t seed = 0;

    // Canonical identity string; split disjointness is defined over this.
    std::string identity() const;
};

struct GeneratedSample {
    std::uint32_t id = 0;
    Image image;
    std::string instruction;
    std::string label;
    SampleMeta meta;
};

// Difficulty and size knobs.
struct TaskGenConfig {
    int image_size = 32;
    int operator_digit_max = 9;
    std::vector<std::string> operator_rules = {"add", "sub", "mul"};
    std::vector<std::string> clock_rules = {"add", "mul"};
    int outlier_grid = 3;
    int clevr_count_max = 4;
    int sudoku_step_max = 4;
    int character_eval_classes = 5;
    int character_train_classes = 10;
};

struct SplitSizes {
    std::size_t support = 30;
    std::size_t test = 100;            // character uses character_test
    std::size_t character_test = 50;
    std::size_t train_support = 30;
    std::size_t train_query = 120;     // clamped to per-task pool capacity
};

struct SplitSet {
    TaskKind kind = TaskKind::operator_induction;
    std::vector<GeneratedSample> support;
    std::vector<GeneratedSample> test;
    std::vector<GeneratedSample> train_support;
    std::vector<GeneratedSample> train_query;

    const std::vector<GeneratedSample>& split(std::string_view name) const;
    std::vector<GeneratedSample>& split(std::string_view name);
};

std::vector<std::string> rules_of(TaskKind kind, const TaskGenConfig& cfg);

// Fixed per-task query text; contains no information about the hidden rule.
std::string_view task_instruction(TaskKind kind);

// Draws raw values for one sample from the unrestricted domain.
SampleMeta draw_meta(TaskKind kind, std::string_view rule, const TaskGenConfig& cfg, Rng& rng);

// Renders a sample from its meta; label is computed by the generation logic
// (the independent check is oracle_label). Deterministic given the meta.
GeneratedSample materialize(const SampleMeta& meta, const TaskGenConfig& cfg);

GeneratedSample generate_sample(TaskKind kind, std::string_view rule, const TaskGenConfig& cfg,
                                Rng& rng);

// Recomputes the label from rule and raw values only; never touches pixels.
std::string oracle_label(const SampleMeta& meta);

// Key identifying the value pool a sample draws from; the pretraining and
// evaluation pools are disjoint in this key (novelty partition).
std::uint64_t novelty_key(const SampleMeta& meta);

// Builds the four mutually disjoint splits. support/test draw from the
// evaluation pool, train_support/train_query from the pretraining pool.
SplitSet build_splits(TaskKind kind, const SplitSizes& sizes, const TaskGenConfig& cfg,
                      std::uint64_t master_seed);

// Invented names for character classes; index k names class k.
std::vector<std::string> character_name_table(std::uint64_t naming_seed, int n_classes);

using Dataset = std::map<TaskKind, SplitSet>;

inline constexpr std::string_view kGeneratorVersion = "truemicl-1";
inline constexpr std::array<std::string_view, 4> kSplitNames = {"support", "test", "train_support",
                                                                "train_query"};

// On-disk layout: <dir>/manifest.json, and per task one directory of PGM
// images per split plus a <split>.jsonl metadata file.
void save_dataset(const std::filesystem::path& dir, const Dataset& data, std::uint64_t master_seed,
                  const TaskGenConfig& cfg, const SplitSizes& sizes);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace micl
