#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "micl/dara.hpp"
#include "micl/episodes.hpp"
#include "micl/lowrank.hpp"
#include "micl/model.hpp"
#include "micl/truemicl.hpp"

namespace micl {

// Adam with linear warmup and linear decay to zero; weight decay is decoupled
// and applied only where the caller says so.
struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t warmup = 5;
    std::size_t grad_accum = 4;
    std::size_t epochs = 5;
};

double lr_at(const OptimConfig& cfg, std::size_t step, std::size_t total_steps);

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// One update over a flat parameter vector. Entries with mask 0 are frozen
// (their moments stay zero as well). decay_mask selects weight-decayed
// entries; empty spans mean all-trainable / no-decay.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, const OptimConfig& cfg, std::span<const std::uint8_t> trainable,
               std::span<const std::uint8_t> decayed);

struct TrainLogEntry {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

// ---------------------------------------------------------------------------
// Pretraining: full-parameter training on a mixed-task episode curriculum
// drawn from the train_support / train_query splits.
// ---------------------------------------------------------------------------

struct PretrainConfig {
    std::size_t steps = 3000;
    OptimConfig optim{.lr = 1e-3, .weight_decay = 0.01, .warmup = 5, .grad_accum = 4};
    std::vector<double> shot_weights = {2, 3, 3, 2, 2};  // weight of 0..4 shots
    TemplateVariant template_variant = TemplateVariant::minimal;
    std::uint64_t seed = 3407;
    std::size_t workers = 0;  // 0 = hardware concurrency (capped at grad_accum)
    std::size_t log_every = 25;
};

// Deterministic for a fixed seed; aborts with the offending step on NaN loss.
ModelParams pretrain(const ModelConfig& cfg, const Dataset& data, const PretrainConfig& pcfg,
                     std::vector<TrainLogEntry>* trace = nullptr);

// ---------------------------------------------------------------------------
// Fine-tuning on one task's support split; the backbone stays frozen.
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    OptimConfig optim{.lr = 1e-3, .warmup = 5, .grad_accum = 4, .epochs = 5};
    std::size_t shots = 4;
    TemplateVariant template_variant = TemplateVariant::minimal;
    SelectorKind train_selector = SelectorKind::random;
    DaraMode dara_mode = DaraMode::algorithm1;
    std::vector<std::size_t> dara_layers = {0};
    std::vector<std::size_t> dara_heads = {};  // empty = all heads
    std::size_t lora_rank = 2;
    double lora_alpha = 16.0;
    double lora_budget_fraction = 1.0;
    std::uint64_t seed = 3407;
    std::size_t workers = 0;
};

// Trains only the factor entries of active (layer, head) pairs; the model
// checksum is untouched. Epochs cycle the support split as queries.
DaraFactors train_dara(const ModelParams& frozen, const SplitSet& task,
                       const FinetuneConfig& cfg, std::vector<TrainLogEntry>* trace = nullptr);

// Budget-masked LoRA on the layer-0 q/k projections.
LoraAdapter train_lora(const ModelParams& frozen, const SplitSet& task, const FinetuneConfig& cfg,
                       std::vector<TrainLogEntry>* trace = nullptr);

// Joint training of both adapter parameter sets; everything else frozen.
std::pair<LoraAdapter, DaraFactors> train_lora_plus_dara(
    const ModelParams& frozen, const SplitSet& task, const FinetuneConfig& cfg,
    std::vector<TrainLogEntry>* trace = nullptr);

// Runs fn(0..n-1) on a bounded pool; results must be written to per-index
// slots, which keeps every reduction order fixed.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace micl
