#include "micl/training.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace micl {

double lr_at(const OptimConfig& cfg, std::size_t step, std::size_t total_steps) {
    if (total_steps == 0) return cfg.lr;
    if (cfg.warmup > 0 && step <= cfg.warmup) {
        return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
    }
    if (total_steps <= cfg.warmup) return cfg.lr;
    const double remain = static_cast<double>(total_steps - step);
    const double span = static_cast<double>(total_steps - cfg.warmup);
    return cfg.lr * std::max(0.0, remain) / span;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, const OptimConfig& cfg, std::span<const std::uint8_t> trainable,
               std::span<const std::uint8_t> decayed) {
    ++state.t;
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!trainable.empty() && !trainable[i]) continue;
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = state.m[i] / bias1;
        const double vhat = state.v[i] / bias2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        if (cfg.weight_decay != 0.0 && (decayed.empty() || decayed[i])) {
            params[i] -= lr * cfg.weight_decay * params[i];
        }
    }
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (workers == 0) workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    workers = std::min(workers, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

namespace {

// One training example: a fully assembled episode plus its supervision spans.
struct TrainItem {
    AssembledEpisode assembled;
    std::vector<TokenRange> spans;
};

// episodes of one support split: every sample serves once per epoch as the
// query, demos drawn from the remaining same-rule support samples.
TrainItem make_support_item(const ModelParams& frozen, const SplitSet& task,
                            const FinetuneConfig& cfg, std::size_t support_index, Rng& rng) {
    const auto& support = task.support;
    Episode ep;
    ep.kind = task.kind;
    ep.query = &support[support_index];
    ep.gold = support[support_index].label;
    ep.demos = select_demos(cfg.train_selector, *ep.query, support, cfg.shots, rng);
    AssemblyOptions opts;
    opts.prompt.variant = cfg.template_variant;
    opts.include_gold = true;
    TrainItem item;
    item.assembled = assemble_prompt(ep, frozen.config, opts);
    item.spans = {item.assembled.query_answer};
    return item;
}

void check_finite_loss(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw NumericalError("training diverged: non-finite loss at optimizer step " +
                             std::to_string(step));
    }
}

std::size_t resolve_workers(std::size_t configured, std::size_t batch) {
    std::size_t w = configured == 0 ? std::max<std::size_t>(1, std::thread::hardware_concurrency())
                                    : configured;
    return std::min(w, batch);
}

// Shared mini-batch engine for the adapter trainers. Builders fill per-episode
// gradient buffers in parallel; the reducer folds them in index order, so runs
// are bit-identical regardless of worker count.
struct AdapterGradBuffers {
    Tensor factor_grads;  // matches factors.values when dara is trained
    LoraGrads lora;       // sized when lora is trained
    double loss = 0.0;
};

struct AdapterTrainer {
    const ModelParams& frozen;
    const SplitSet& task;
    const FinetuneConfig& cfg;
    DaraFactors* factors;     // nullptr -> dara not trained
    LoraAdapter* adapter;     // nullptr -> lora not trained
    std::vector<TrainLogEntry>* trace;

    void run() {
        const auto& support = task.support;
        if (support.empty()) throw PreconditionError("fine-tuning: empty support set rejected");
        const std::size_t per_epoch = support.size();
        const std::size_t total_episodes = per_epoch * cfg.optim.epochs;
        const std::size_t total_steps =
            (total_episodes + cfg.optim.grad_accum - 1) / cfg.optim.grad_accum;

        // flat trainable views
        std::vector<std::uint8_t> factor_mask;
        if (factors) {
            factor_mask.assign(factors->values.size(), 0);
            for (std::size_t l = 0; l < factors->n_layers; ++l) {
                for (std::size_t h = 0; h < factors->n_heads; ++h) {
                    if (!factors->active(l, h)) continue;
                    for (std::size_t s = 0; s < factors->n_slots; ++s) {
                        factor_mask[(l * factors->n_heads + h) * factors->n_slots + s] = 1;
                    }
                }
            }
        }
        AdamState factor_state(factors ? factors->values.size() : 0);
        std::vector<std::uint8_t> lora_mask;
        std::vector<double> lora_params;
        if (adapter) {
            lora_mask.reserve(adapter->total_entries());
            for (const auto* m : {&adapter->mask_aq, &adapter->mask_bq, &adapter->mask_ak,
                                  &adapter->mask_bk}) {
                lora_mask.insert(lora_mask.end(), m->begin(), m->end());
            }
        }
        AdamState lora_state(adapter ? adapter->total_entries() : 0);

        std::size_t step = 0;
        std::size_t episode_counter = 0;
        std::vector<std::size_t> batch_indices;
        std::vector<Rng> batch_rngs;
        for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
            Rng order_rng = Rng::stream(cfg.seed, 0xe90c + epoch);
            const auto order = order_rng.permutation(per_epoch);
            std::size_t cursor = 0;
            while (cursor < per_epoch) {
                const std::size_t batch =
                    std::min(cfg.optim.grad_accum, per_epoch - cursor);
                batch_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                     order.begin() + static_cast<std::ptrdiff_t>(cursor + batch));
                batch_rngs.clear();
                for (std::size_t b = 0; b < batch; ++b) {
                    batch_rngs.push_back(Rng::stream(cfg.seed, 0xd3e0 + episode_counter + b));
                }

                std::vector<AdapterGradBuffers> buffers(batch);
                const std::size_t workers = resolve_workers(cfg.workers, batch);
                parallel_for(batch, workers, [&](std::size_t b) {
                    AdapterGradBuffers& buf = buffers[b];
                    Rng rng = batch_rngs[b];
                    TrainItem item = make_support_item(frozen, task, cfg, batch_indices[b], rng);
                    const std::size_t L = item.assembled.seq.length();

                    ForwardHooks hooks;
                    ScoreScaling scaling;
                    if (factors) {
                        scaling = build_score_scaling(*factors, item.assembled.spans, L,
                                                      cfg.dara_mode, item.assembled.seq.modality);
                        hooks.scaling = &scaling;
                    }
                    if (adapter) hooks.lora = &adapter->weights;

                    GradRequest req;
                    req.scaling = factors != nullptr;
                    req.lora = adapter != nullptr;
                    ScoreScalingGrad sgrads;
                    if (factors) {
                        sgrads = ScoreScalingGrad(factors->n_layers, factors->n_heads, L);
                    }
                    if (adapter) {
                        buf.lora.a_q = Tensor(adapter->weights.a_q.shape());
                        buf.lora.b_q = Tensor(adapter->weights.b_q.shape());
                        buf.lora.a_k = Tensor(adapter->weights.a_k.shape());
                        buf.lora.b_k = Tensor(adapter->weights.b_k.shape());
                    }
                    buf.loss = loss_and_gradients(frozen, item.assembled.seq, item.spans, hooks,
                                                  req, nullptr, factors ? &sgrads : nullptr,
                                                  adapter ? &buf.lora : nullptr);
                    if (factors) {
                        buf.factor_grads = Tensor(factors->values.shape());
                        accumulate_factor_grads(sgrads, item.assembled.spans, *factors,
                                                buf.factor_grads);
                    }
                });

                ++step;
                double loss = 0.0;
                const double inv_batch = 1.0 / static_cast<double>(batch);
                for (const auto& buf : buffers) loss += buf.loss * inv_batch;
                check_finite_loss(loss, step);
                const double lr = lr_at(cfg.optim, step, total_steps);

                if (factors) {
                    Tensor grads(factors->values.shape());
                    for (const auto& buf : buffers) {
                        for (std::size_t i = 0; i < grads.size(); ++i) {
                            grads[i] += buf.factor_grads[i] * inv_batch;
                        }
                    }
                    adam_step(factors->values.values(), grads.values(), factor_state, lr,
                              cfg.optim, factor_mask, {});
                }
                if (adapter) {
                    std::vector<double> params, grads;
                    flatten_lora(*adapter, params);
                    grads.assign(params.size(), 0.0);
                    for (const auto& buf : buffers) {
                        std::size_t cursor2 = 0;
                        for (const Tensor* g : {&buf.lora.a_q, &buf.lora.b_q, &buf.lora.a_k,
                                                &buf.lora.b_k}) {
                            for (std::size_t i = 0; i < g->size(); ++i) {
                                grads[cursor2 + i] += (*g)[i] * inv_batch;
                            }
                            cursor2 += g->size();
                        }
                    }
                    adam_step(params, grads, lora_state, lr, cfg.optim, lora_mask, {});
                    unflatten_lora(params, *adapter);
                }
                if (trace) trace->push_back({step, lr, loss});
                cursor += batch;
                episode_counter += batch;
            }
        }
    }

    static void flatten_lora(const LoraAdapter& adapter, std::vector<double>& out) {
        out.clear();
        for (const Tensor* t : {&adapter.weights.a_q, &adapter.weights.b_q, &adapter.weights.a_k,
                                &adapter.weights.b_k}) {
            out.insert(out.end(), t->values().begin(), t->values().end());
        }
    }
    static void unflatten_lora(std::span<const double> in, LoraAdapter& adapter) {
        std::size_t cursor = 0;
        for (Tensor* t : {&adapter.weights.a_q, &adapter.weights.b_q, &adapter.weights.a_k,
                          &adapter.weights.b_k}) {
            std::copy(in.begin() + static_cast<std::ptrdiff_t>(cursor),
                      in.begin() + static_cast<std::ptrdiff_t>(cursor + t->size()),
                      t->values().begin());
            cursor += t->size();
        }
    }
};

}  // namespace

DaraFactors train_dara(const ModelParams& frozen, const SplitSet& task, const FinetuneConfig& cfg,
                       std::vector<TrainLogEntry>* trace) {
    DaraFactors factors(frozen.config.n_layers, frozen.config.n_heads, cfg.shots + 1,
                        cfg.dara_layers, cfg.dara_heads);
    AdapterTrainer trainer{frozen, task, cfg, &factors, nullptr, trace};
    trainer.run();
    return factors;
}

LoraAdapter train_lora(const ModelParams& frozen, const SplitSet& task, const FinetuneConfig& cfg,
                       std::vector<TrainLogEntry>* trace) {
    LoraInit init;
    init.layer = 0;
    init.rank = cfg.lora_rank;
    init.alpha = cfg.lora_alpha;
    init.budget_fraction = cfg.lora_budget_fraction;
    init.seed = cfg.seed;
    LoraAdapter adapter = init_lora(frozen.config, init);
    AdapterTrainer trainer{frozen, task, cfg, nullptr, &adapter, trace};
    trainer.run();
    return adapter;
}

std::pair<LoraAdapter, DaraFactors> train_lora_plus_dara(const ModelParams& frozen,
                                                         const SplitSet& task,
                                                         const FinetuneConfig& cfg,
                                                         std::vector<TrainLogEntry>* trace) {
    DaraFactors factors(frozen.config.n_layers, frozen.config.n_heads, cfg.shots + 1,
                        cfg.dara_layers, cfg.dara_heads);
    LoraInit init;
    init.layer = 0;
    init.rank = cfg.lora_rank;
    init.alpha = cfg.lora_alpha;
    init.budget_fraction = cfg.lora_budget_fraction;
    init.seed = cfg.seed;
    LoraAdapter adapter = init_lora(frozen.config, init);
    AdapterTrainer trainer{frozen, task, cfg, &factors, &adapter, trace};
    trainer.run();
    return {std::move(adapter), std::move(factors)};
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

namespace {

struct CurriculumIndex {
    // per (task, rule): indices into train_query / train_support
    struct RulePool {
        TaskKind kind;
        std::string rule;
        std::vector<std::size_t> query_indices;
    };
    std::vector<RulePool> pools;  // only pools with at least one query sample
};

CurriculumIndex build_curriculum(const Dataset& data) {
    CurriculumIndex idx;
    for (const auto& [kind, set] : data) {
        for (const auto& rule : [&] {
                 std::vector<std::string> rules;
                 for (const auto& s : set.train_query) {
                     if (std::find(rules.begin(), rules.end(), s.meta.rule) == rules.end()) {
                         rules.push_back(s.meta.rule);
                     }
                 }
                 return rules;
             }()) {
            CurriculumIndex::RulePool pool;
            pool.kind = kind;
            pool.rule = rule;
            for (std::size_t i = 0; i < set.train_query.size(); ++i) {
                if (set.train_query[i].meta.rule == rule) pool.query_indices.push_back(i);
            }
            if (!pool.query_indices.empty()) idx.pools.push_back(std::move(pool));
        }
    }
    if (idx.pools.empty()) throw PreconditionError("pretrain: dataset has no train_query samples");
    return idx;
}

struct PretrainItem {
    TaskKind kind;
    std::size_t query_index;
    std::size_t shots;
    std::uint64_t demo_seed;
};

}  // namespace

ModelParams pretrain(const ModelConfig& cfg, const Dataset& data, const PretrainConfig& pcfg,
                     std::vector<TrainLogEntry>* trace) {
    cfg.validate();
    Rng init_rng = Rng::stream(pcfg.seed, 0x1417);
    ModelParams params = ModelParams::init(cfg, init_rng);
    if (pcfg.steps == 0) return params;

    const CurriculumIndex curriculum = build_curriculum(data);
    double weight_total = 0.0;
    for (double w : pcfg.shot_weights) weight_total += w;
    if (weight_total <= 0.0) throw ConfigError("pretrain: shot weights must sum to a positive value");

    // weight decay applies to weight matrices only (rank >= 2 tensors)
    std::vector<std::uint8_t> decay_mask;
    {
        ModelParams probe = ModelParams::zeros_like(params);
        for (const auto& [name, t] : probe.named_tensors()) {
            const std::uint8_t flag = t->rank() >= 2 ? 1 : 0;
            decay_mask.insert(decay_mask.end(), t->size(), flag);
        }
    }

    std::vector<double> flat;
    params.flatten_to(flat);
    AdamState state(flat.size());

    Rng sampler = Rng::stream(pcfg.seed, 0xc022);
    std::size_t episode_counter = 0;
    for (std::size_t step = 1; step <= pcfg.steps; ++step) {
        // draw the batch descriptors up front so workers stay deterministic
        std::vector<PretrainItem> batch(pcfg.optim.grad_accum);
        for (auto& item : batch) {
            const auto& pool = curriculum.pools[sampler.below(curriculum.pools.size())];
            item.kind = pool.kind;
            item.query_index = pool.query_indices[sampler.below(pool.query_indices.size())];
            double pick = sampler.uniform() * weight_total;
            std::size_t shots = 0;
            for (std::size_t s = 0; s < pcfg.shot_weights.size(); ++s) {
                pick -= pcfg.shot_weights[s];
                if (pick <= 0.0) {
                    shots = s;
                    break;
                }
            }
            item.shots = shots;
            item.demo_seed = 0xde30 + episode_counter;
            ++episode_counter;
        }

        std::vector<ModelParams> grads;
        std::vector<double> losses(batch.size(), 0.0);
        grads.reserve(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) grads.push_back(ModelParams::zeros_like(params));

        const std::size_t workers = resolve_workers(pcfg.workers, batch.size());
        parallel_for(batch.size(), workers, [&](std::size_t b) {
            const PretrainItem& item = batch[b];
            const SplitSet& set = data.at(item.kind);
            Rng rng = Rng::stream(pcfg.seed, item.demo_seed);
            Episode ep;
            ep.kind = item.kind;
            ep.query = &set.train_query[item.query_index];
            ep.gold = ep.query->label;
            ep.demos = select_demos(item.shots == 0 ? SelectorKind::zero_shot : SelectorKind::random,
                                    *ep.query, set.train_support, item.shots, rng);
            AssemblyOptions opts;
            opts.prompt.variant = pcfg.template_variant;
            opts.include_gold = true;
            AssembledEpisode assembled = assemble_prompt(ep, cfg, opts);
            // every response is supervised; the query also learns its EOS
            std::vector<TokenRange> spans = assembled.demo_answers;
            spans.push_back(assembled.query_answer);
            GradRequest req;
            req.model_params = true;
            losses[b] = loss_and_gradients(params, assembled.seq, spans, {}, req, &grads[b],
                                           nullptr, nullptr);
        });

        double loss = 0.0;
        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (double l : losses) loss += l * inv_batch;
        check_finite_loss(loss, step);

        std::vector<double> flat_grads(flat.size(), 0.0);
        std::vector<double> buf;
        for (const auto& g : grads) {
            g.flatten_to(buf);
            for (std::size_t i = 0; i < flat.size(); ++i) flat_grads[i] += buf[i] * inv_batch;
        }
        const double lr = lr_at(pcfg.optim, step, pcfg.steps);
        adam_step(flat, flat_grads, state, lr, pcfg.optim, {}, decay_mask);
        params.unflatten_from(flat);

        if (trace && (step % std::max<std::size_t>(1, pcfg.log_every) == 0 || step == pcfg.steps)) {
            trace->push_back({step, lr, loss});
        }
    }
    return params;
}

}  // namespace micl
