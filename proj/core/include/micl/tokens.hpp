#pragma once

#include <cstdint>
#include <vector>

#include "micl/common.hpp"

namespace micl {

enum class Modality : std::uint8_t { text, visual, special };

// Half-open range of sequence positions.
struct TokenRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool empty() const { return end <= begin; }
};

// Contiguous visual-token columns of one image.
struct ImageSpan {
    std::size_t image_slot = 0;  // demo 0..n-1, query last
    std::size_t begin = 0;
    std::size_t end = 0;
};

// Spans in demo order, query image last.
struct ImageSpanMap {
    std::vector<ImageSpan> spans;
    std::size_t size() const { return spans.size(); }
    bool empty() const { return spans.empty(); }
    // -1 when the column is not inside any image span
    int slot_of_column(std::size_t col) const {
        for (const auto& s : spans) {
            if (col >= s.begin && col < s.end) return static_cast<int>(s.image_slot);
        }
        return -1;
    }
};

// Interleaved token ids with per-position modality tags. Visual positions
// carry their raw patch vector (patch_size^2 pixel values mapped to [-1, 1])
// and the placeholder id kTokPatch.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<Modality> modality;
    std::vector<std::vector<double>> patches;  // empty at non-visual positions

    std::size_t length() const { return ids.size(); }

    void push_token(int id, Modality m) {
        ids.push_back(id);
        modality.push_back(m);
        patches.emplace_back();
    }
    void push_patch(int id, std::vector<double> patch) {
        ids.push_back(id);
        modality.push_back(Modality::visual);
        patches.push_back(std::move(patch));
    }

    void validate(std::size_t max_seq, std::size_t patch_dim) const {
        if (ids.size() != modality.size() || ids.size() != patches.size()) {
            throw ShapeError("TokenSequence: parallel arrays out of sync");
        }
        if (ids.size() > max_seq) {
            throw PreconditionError("TokenSequence: length " + std::to_string(ids.size()) +
                                    " exceeds max_seq " + std::to_string(max_seq));
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const bool visual = modality[i] == Modality::visual;
            if (visual && patches[i].size() != patch_dim) {
                throw ShapeError("TokenSequence: visual position " + std::to_string(i) +
                                 " carries no patch vector");
            }
            if (!visual && !patches[i].empty()) {
                throw ShapeError("TokenSequence: non-visual position " + std::to_string(i) +
                                 " carries a patch vector");
            }
        }
    }
};

}  // namespace micl
