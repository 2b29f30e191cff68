#include "micl/dara.hpp"

#include <cmath>
#include <fstream>

#include "micl/checkpoint.hpp"
#include "micl/vocab.hpp"

namespace micl {

DaraFactors::DaraFactors(std::size_t layers, std::size_t heads, std::size_t slots,
                         const std::vector<std::size_t>& active_layers,
                         const std::vector<std::size_t>& active_heads)
    : n_layers(layers),
      n_heads(heads),
      n_slots(slots),
      layer_active(layers, active_layers.empty() ? 1 : 0),
      head_active(heads, active_heads.empty() ? 1 : 0),
      values(Tensor::full({layers, heads, slots}, 1.0)) {
    for (auto l : active_layers) {
        if (l >= layers) throw PreconditionError("DaraFactors: active layer out of range");
        layer_active[l] = 1;
    }
    for (auto h : active_heads) {
        if (h >= heads) throw PreconditionError("DaraFactors: active head out of range");
        head_active[h] = 1;
    }
}

std::size_t DaraFactors::trainable_count() const {
    std::size_t la = 0, ha = 0;
    for (auto v : layer_active) la += v;
    for (auto v : head_active) ha += v;
    return n_slots * ha * la;
}

ImageSpanMap image_span_map(const TokenSequence& seq) {
    ImageSpanMap map;
    const std::size_t L = seq.length();
    std::size_t pos = 0;
    std::size_t slot = 0;
    while (pos < L) {
        if (seq.modality[pos] == Modality::visual) {
            throw PreconditionError("image_span_map: visual token outside IMG brackets at " +
                                    std::to_string(pos));
        }
        if (seq.ids[pos] == kTokImgStart) {
            const std::size_t begin = pos + 1;
            std::size_t end = begin;
            while (end < L && seq.modality[end] == Modality::visual) ++end;
            if (end == begin || end >= L || seq.ids[end] != kTokImgEnd) {
                throw PreconditionError("image_span_map: IMG_START at " + std::to_string(pos) +
                                        " is not followed by visual tokens and IMG_END");
            }
            map.spans.push_back({slot++, begin, end});
            pos = end + 1;
        } else {
            ++pos;
        }
    }
    return map;
}

Tensor apply_factors(const Tensor& scores, const ImageSpanMap& spans,
                     std::span<const double> slot_factors) {
    if (scores.rank() != 2) throw ShapeError("apply_factors: scores must be a matrix");
    for (const auto& s : spans.spans) {
        if (s.end > scores.cols()) {
            throw PreconditionError("apply_factors: span beyond score columns");
        }
        if (s.image_slot >= slot_factors.size()) {
            throw PreconditionError("apply_factors: " + std::to_string(spans.size()) +
                                    " spans but only " + std::to_string(slot_factors.size()) +
                                    " slot factors");
        }
    }
    Tensor out = scores;
    for (const auto& s : spans.spans) {
        const double f = slot_factors[s.image_slot];
        for (std::size_t i = 0; i < out.rows(); ++i) {
            double* row = out.data() + i * out.cols();
            for (std::size_t j = s.begin; j < s.end; ++j) row[j] *= f;
        }
    }
    return out;
}

ScoreScaling build_score_scaling(const DaraFactors& factors, const ImageSpanMap& spans,
                                 std::size_t seq_len, DaraMode mode,
                                 std::span<const Modality> modality) {
    for (const auto& s : spans.spans) {
        if (s.image_slot >= factors.n_slots) {
            throw PreconditionError("build_score_scaling: image slot " +
                                    std::to_string(s.image_slot) + " exceeds the " +
                                    std::to_string(factors.n_slots) + " factor slots");
        }
        if (s.end > seq_len) throw PreconditionError("build_score_scaling: span beyond sequence");
    }
    ScoreScaling scaling(factors.n_layers, factors.n_heads, seq_len);
    for (std::size_t l = 0; l < factors.n_layers; ++l) {
        for (std::size_t h = 0; h < factors.n_heads; ++h) {
            // inactive pairs hold exactly 1, so writing them is a no-op by the
            // factor invariant; the prose variant only applies where active
            for (const auto& s : spans.spans) {
                const double f = factors.values(l, h, s.image_slot);
                for (std::size_t j = s.begin; j < s.end; ++j) scaling.mul(l, h, j) = f;
            }
            if (mode == DaraMode::prose_zero_text && factors.active(l, h)) {
                for (std::size_t j = 0; j < seq_len; ++j) {
                    if (modality[j] != Modality::visual) scaling.mul(l, h, j) = 0.0;
                }
            }
        }
    }
    return scaling;
}

void accumulate_factor_grads(const ScoreScalingGrad& col_grads, const ImageSpanMap& spans,
                             const DaraFactors& factors, Tensor& factor_grads) {
    if (factor_grads.shape() != factors.values.shape()) {
        throw ShapeError("accumulate_factor_grads: gradient tensor shape mismatch");
    }
    for (std::size_t l = 0; l < factors.n_layers; ++l) {
        for (std::size_t h = 0; h < factors.n_heads; ++h) {
            if (!factors.active(l, h)) continue;
            for (const auto& s : spans.spans) {
                double acc = 0.0;
                for (std::size_t j = s.begin; j < s.end; ++j) {
                    acc += col_grads.col_mul[(l * factors.n_heads + h) * col_grads.seq_len + j];
                }
                factor_grads(l, h, s.image_slot) += acc;
            }
        }
    }
}

ScoreScaling hard_attention_scaling(const HardMaskSpec& spec, std::size_t n_layers,
                                    std::size_t n_heads, std::size_t seq_len,
                                    std::span<const Modality> modality) {
    if (!(spec.head_fraction > 0.0 && spec.head_fraction <= 1.0)) {
        throw PreconditionError("hard_attention_scaling: head_fraction must lie in (0, 1]");
    }
    const auto masked_heads =
        static_cast<std::size_t>(std::floor(spec.head_fraction * static_cast<double>(n_heads)));
    ScoreScaling scaling(n_layers, n_heads, seq_len);
    for (auto l : spec.layers) {
        if (l >= n_layers) throw PreconditionError("hard_attention_scaling: layer out of range");
        for (std::size_t h = 0; h < masked_heads; ++h) {  // lowest-index heads first
            for (std::size_t j = 0; j < seq_len; ++j) {
                if (modality[j] == Modality::text) scaling.block(l, h, j) = 1;
            }
        }
    }
    return scaling;
}

void write_factor_csv(const std::filesystem::path& path, const DaraFactors& factors) {
    std::ofstream f(path);
    if (!f) throw ConfigError("write_factor_csv: cannot open " + path.string());
    f << "layer,head,image_slot,value\n";
    for (std::size_t l = 0; l < factors.n_layers; ++l) {
        for (std::size_t h = 0; h < factors.n_heads; ++h) {
            for (std::size_t s = 0; s < factors.n_slots; ++s) {
                char buf[64];
                std::snprintf(buf, sizeof(buf), "%.17g", factors.values(l, h, s));
                f << l << ',' << h << ',' << s << ',' << buf << '\n';
            }
        }
    }
}

void save_factors(const std::filesystem::path& path, const DaraFactors& factors) {
    Tensor layer_mask({factors.n_layers});
    for (std::size_t i = 0; i < factors.n_layers; ++i) layer_mask[i] = factors.layer_active[i];
    Tensor head_mask({factors.n_heads});
    for (std::size_t i = 0; i < factors.n_heads; ++i) head_mask[i] = factors.head_active[i];
    write_tensor_file(path, {{"dara/values", &factors.values},
                             {"dara/layer_active", &layer_mask},
                             {"dara/head_active", &head_mask}});
}

DaraFactors load_factors(const std::filesystem::path& path) {
    auto tensors = read_tensor_file(path);
    DaraFactors f;
    for (auto& [name, t] : tensors) {
        if (name == "dara/values") {
            if (t.rank() != 3) throw ConfigError("load_factors: values tensor must be rank 3");
            f.values = std::move(t);
        } else if (name == "dara/layer_active") {
            f.layer_active.resize(t.size());
            for (std::size_t i = 0; i < t.size(); ++i) f.layer_active[i] = t[i] != 0.0;
        } else if (name == "dara/head_active") {
            f.head_active.resize(t.size());
            for (std::size_t i = 0; i < t.size(); ++i) f.head_active[i] = t[i] != 0.0;
        }
    }
    if (f.values.rank() != 3 || f.layer_active.empty() || f.head_active.empty()) {
        throw ConfigError("load_factors: incomplete factor checkpoint " + path.string());
    }
    f.n_layers = f.values.extent(0);
    f.n_heads = f.values.extent(1);
    f.n_slots = f.values.extent(2);
    return f;
}

}  // namespace micl
