#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "micl/model.hpp"
#include "micl/tensor.hpp"
#include "micl/tokens.hpp"

namespace micl {

// How the learned factors act on the score matrix.
//   algorithm1      multiply image columns, leave text columns untouched
//   prose_zero_text study-only variant: additionally zero every non-visual
//                   column of active (layer, head) pairs before the mask
enum class DaraMode : std::uint8_t { algorithm1, prose_zero_text };

// Learnable per-(layer, head, image_slot) attention scale factors. Inactive
// (layer, head) pairs hold exactly 1 and are never trained; everything is
// initialized to 1, which leaves the model bit-identical to the hook-free
// forward pass.
struct DaraFactors {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t n_slots = 0;  // shots + 1 (query image last)
    std::vector<std::uint8_t> layer_active;
    std::vector<std::uint8_t> head_active;
    Tensor values;  // [n_layers, n_heads, n_slots]

    DaraFactors() = default;
    // Empty active lists mean "all layers" / "all heads".
    DaraFactors(std::size_t layers, std::size_t heads, std::size_t slots,
                const std::vector<std::size_t>& active_layers,
                const std::vector<std::size_t>& active_heads);

    bool active(std::size_t l, std::size_t h) const {
        return layer_active[l] != 0 && head_active[h] != 0;
    }
    // (slots) x |active heads| x |active layers|
    std::size_t trainable_count() const;
    std::uint64_t checksum() const { return values.checksum(); }
};

// Derives the image spans of an assembled sequence from its modality tags and
// IMG_START/IMG_END brackets; rejects inconsistent tag structure.
ImageSpanMap image_span_map(const TokenSequence& seq);

// Multiplies every column of each span by its slot factor; all other columns
// are unchanged. Pure single-matrix form of the mechanism.
Tensor apply_factors(const Tensor& scores, const ImageSpanMap& spans,
                     std::span<const double> slot_factors);

// Expands factors+spans into the per-column multipliers consumed by forward().
ScoreScaling build_score_scaling(const DaraFactors& factors, const ImageSpanMap& spans,
                                 std::size_t seq_len, DaraMode mode,
                                 std::span<const Modality> modality);

// Collapses per-column multiplier gradients back onto factor entries;
// inactive (layer, head) entries stay at zero gradient.
void accumulate_factor_grads(const ScoreScalingGrad& col_grads, const ImageSpanMap& spans,
                             const DaraFactors& factors, Tensor& factor_grads);

// Comparison arm: for the lowest floor(fraction * n_heads) heads of the given
// layers, text columns receive -inf before the softmax.
struct HardMaskSpec {
    double head_fraction = 0.5;
    std::vector<std::size_t> layers = {0};
};

ScoreScaling hard_attention_scaling(const HardMaskSpec& spec, std::size_t n_layers,
                                    std::size_t n_heads, std::size_t seq_len,
                                    std::span<const Modality> modality);

// Factor export: CSV with columns layer,head,image_slot,value.
void write_factor_csv(const std::filesystem::path& path, const DaraFactors& factors);

// Factor checkpoints share the binary tensor container.
void save_factors(const std::filesystem::path& path, const DaraFactors& factors);
DaraFactors load_factors(const std::filesystem::path& path);

}  // namespace micl
