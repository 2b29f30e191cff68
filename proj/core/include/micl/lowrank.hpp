#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "micl/model.hpp"
#include "micl/rng.hpp"
#include "micl/tensor.hpp"

namespace micl {

// a . b low-rank factorization of a weight update.
struct LowRankUpdate {
    Tensor a;  // [d_in, r]
    Tensor b;  // [r, d]
    std::size_t rank() const { return a.cols(); }
    Tensor product() const { return matmul(a, b); }
};

struct EquivalenceReport {
    double relative_error = 0.0;  // ||s2 - s.diag(f)||_F / max(1e-30, ||s.diag(f)||_F)
    double x_condition = 0.0;
    double x_sigma_min = 0.0;
    double r_condition = 0.0;
    std::size_t seq_len = 0, d_in = 0, d = 0;

    // Flat key-value text record, one "key = value" per line.
    std::string to_text() const;
};

struct EquivalentUpdate {
    Tensor wq_new, wk_new;    // the modified projections
    Tensor delta_wq, delta_wk;
};

// Constructive equivalence: for scores s = x.wq (x.wk)^T / sqrt(d) and any
// invertible r, wq' = wq.r and wk' = x+ diag(f) x wk r^{-T} reproduce
// s'' = s.diag(f) exactly when x has full row rank with seq_len <= d_in
// (then x.x+ = I). Rank-deficient x or ill-conditioned r is rejected with
// diagnostics.
EquivalentUpdate construct_equivalent_update(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                             std::span<const double> f, const Tensor& r);

EquivalenceReport verify_equivalence(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                     const Tensor& wq_new, const Tensor& wk_new,
                                     std::span<const double> f);

// SVD factorization of an update: a = u_r sigma_r, b = v_r^T. At full rank the
// product reconstructs delta exactly (within fp error); truncation error
// equals the discarded singular-value tail.
LowRankUpdate factorize_update(const Tensor& delta, std::size_t r);

// ---------------------------------------------------------------------------
// Budget-matched LoRA baseline
// ---------------------------------------------------------------------------

// LoRA weights on the layer-0 q/k projections plus entry-wise trainable masks.
// Exactly round(budget_fraction * entries) entries are trainable (seeded
// choice without replacement); the rest stay frozen at initialization.
struct LoraAdapter {
    LoraWeights weights;
    std::vector<std::uint8_t> mask_aq, mask_bq, mask_ak, mask_bk;  // 1 -> trainable

    std::size_t trainable_count() const;
    std::size_t total_entries() const;
    std::uint64_t checksum() const;
    // checksum over the frozen (masked-out) entries only
    std::uint64_t frozen_checksum() const;
};

struct LoraInit {
    std::size_t layer = 0;
    std::size_t rank = 2;
    double alpha = 16.0;
    double budget_fraction = 1.0;
    std::uint64_t seed = 1;
};

// a ~ N(0, 1/rank), b = 0 (so the initial additive update is exactly zero).
LoraAdapter init_lora(const ModelConfig& cfg, const LoraInit& init);

void save_lora(const std::filesystem::path& path, const LoraAdapter& adapter);
LoraAdapter load_lora(const std::filesystem::path& path);

}  // namespace micl
