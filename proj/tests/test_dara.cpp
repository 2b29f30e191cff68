#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "micl/dara.hpp"
#include "micl/episodes.hpp"
#include "micl/grad_check.hpp"
#include "micl/training.hpp"
#include "micl/truemicl.hpp"
#include "micl/vocab.hpp"

using namespace micl;

namespace {

const TaskGenConfig kGen;

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.vocab_size = 64;
    cfg.max_seq = 512;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    return cfg;
}

AssembledEpisode sample_episode(const SplitSet& task, const ModelConfig& cfg, std::size_t shots,
                                std::uint64_t seed, bool include_gold) {
    Rng rng(seed);
    Episode ep;
    ep.kind = task.kind;
    ep.query = &task.test[0];
    ep.gold = task.test[0].label;
    ep.demos = select_demos(shots == 0 ? SelectorKind::zero_shot : SelectorKind::random, *ep.query,
                            task.support, shots, rng);
    AssemblyOptions opts;
    opts.include_gold = include_gold;
    return assemble_prompt(ep, cfg, opts);
}

}  // namespace

TEST_CASE("trainable count follows (shots+1) x heads x layers") {
    DaraFactors toy(2, 8, 5, {0}, {});
    CHECK(toy.trainable_count() == 40);  // 4-shot, 8 heads, 1 layer
    DaraFactors reference(24, 32, 5, {0}, {});
    CHECK(reference.trainable_count() == 160);  // the paper's 5 x 32
    DaraFactors two_layers(2, 8, 3, {0, 1}, {1, 2, 3});
    CHECK(two_layers.trainable_count() == 3 * 3 * 2);
    for (std::size_t i = 0; i < toy.values.size(); ++i) CHECK(toy.values[i] == 1.0);
}

TEST_CASE("image_span_map: span counts per episode shape") {
    SplitSizes sizes;
    sizes.support = 12;
    sizes.test = 6;
    sizes.train_support = 6;
    sizes.train_query = 6;
    const SplitSet task = build_splits(TaskKind::operator_induction, sizes, kGen, 11);
    const ModelConfig cfg = small_config();

    const auto zero = sample_episode(task, cfg, 0, 1, false);
    CHECK(image_span_map(zero.seq).size() == 1);

    const auto four = sample_episode(task, cfg, 4, 2, false);
    const ImageSpanMap spans = image_span_map(four.seq);
    CHECK(spans.size() == 5);
    for (const auto& s : spans.spans) CHECK(s.end - s.begin == cfg.visual_tokens_per_image());
    // assembly agrees with the tag-derived reconstruction
    REQUIRE(spans.size() == four.spans.size());
    for (std::size_t i = 0; i < spans.size(); ++i) {
        CHECK(spans.spans[i].begin == four.spans.spans[i].begin);
        CHECK(spans.spans[i].end == four.spans.spans[i].end);
        CHECK(spans.spans[i].image_slot == four.spans.spans[i].image_slot);
    }

    Rng rng(3);
    Episode ep;
    ep.kind = task.kind;
    ep.query = &task.test[0];
    ep.gold = task.test[0].label;
    ep.demos = select_demos(SelectorKind::no_image, *ep.query, task.support, 4, rng);
    ep.demos_without_images = true;
    AssemblyOptions opts;
    const auto noimg = assemble_prompt(ep, cfg, opts);
    CHECK(noimg.spans.size() == 1);  // only the query image remains
}

TEST_CASE("image_span_map rejects inconsistent tags") {
    TokenSequence bad;
    bad.push_token(kTokBos, Modality::special);
    bad.push_patch(kTokPatch, std::vector<double>(64, 0.0));  // visual outside brackets
    CHECK_THROWS_AS(image_span_map(bad), PreconditionError);

    TokenSequence bad2;
    bad2.push_token(kTokImgStart, Modality::special);
    bad2.push_token(kTokImgEnd, Modality::special);  // empty span
    CHECK_THROWS_AS(image_span_map(bad2), PreconditionError);
}

TEST_CASE("apply_factors: identity, column doubling, annihilation, locality") {
    Tensor s({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    ImageSpanMap spans;
    spans.spans.push_back({0, 1, 2});  // column 1 only

    const Tensor same = apply_factors(s, spans, std::vector<double>{1.0});
    CHECK(max_abs_diff(same, s) == 0.0);

    const Tensor doubled = apply_factors(s, spans, std::vector<double>{2.0});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(doubled(i, 0) == s(i, 0));
        CHECK(doubled(i, 1) == 2.0 * s(i, 1));
        CHECK(doubled(i, 2) == s(i, 2));
    }

    const Tensor zeroed = apply_factors(s, spans, std::vector<double>{0.0});
    for (std::size_t i = 0; i < 3; ++i) CHECK(zeroed(i, 1) == 0.0);

    CHECK_THROWS_AS(apply_factors(s, spans, std::vector<double>{}), PreconditionError);
}

TEST_CASE("identity initialization leaves logits bitwise equal to the hook-free model") {
    SplitSizes sizes;
    sizes.support = 12;
    sizes.test = 4;
    sizes.train_support = 6;
    sizes.train_query = 6;
    const SplitSet task = build_splits(TaskKind::clock, sizes, kGen, 5);
    const ModelConfig cfg = small_config();
    Rng rng(7);
    const ModelParams params = ModelParams::init(cfg, rng);

    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const auto ep = sample_episode(task, cfg, 2, seed, false);
        DaraFactors factors(cfg.n_layers, cfg.n_heads, 3, {0}, {});
        const ScoreScaling scaling = build_score_scaling(factors, ep.spans, ep.seq.length(),
                                                         DaraMode::algorithm1, ep.seq.modality);
        ForwardOptions with;
        with.hooks.scaling = &scaling;
        CHECK(forward(params, ep.seq, with).checksum() == forward(params, ep.seq).checksum());
    }
}

TEST_CASE("prose variant zeroes non-visual columns of active pairs only") {
    DaraFactors factors(2, 2, 1, {0}, {});
    ImageSpanMap spans;
    spans.spans.push_back({0, 2, 4});
    std::vector<Modality> modality = {Modality::special, Modality::text, Modality::visual,
                                      Modality::visual, Modality::text};
    factors.values(0, 0, 0) = 1.5;
    const ScoreScaling sc =
        build_score_scaling(factors, spans, modality.size(), DaraMode::prose_zero_text, modality);
    CHECK(sc.mul(0, 0, 1) == 0.0);   // text column on active layer
    CHECK(sc.mul(0, 0, 0) == 0.0);   // special column zeroed too (non-visual)
    CHECK(sc.mul(0, 0, 2) == 1.5);   // image column carries the factor
    CHECK(sc.mul(1, 0, 1) == 1.0);   // inactive layer untouched
}

TEST_CASE("factor gradients match finite differences through the full model") {
    ModelConfig cfg = small_config();
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    Rng rng(9);
    const ModelParams params = ModelParams::init(cfg, rng);

    SplitSizes sizes;
    sizes.support = 12;
    sizes.test = 4;
    sizes.train_support = 6;
    sizes.train_query = 6;
    const SplitSet task = build_splits(TaskKind::palindrome, sizes, kGen, 13);
    const auto ep = sample_episode(task, cfg, 2, 21, true);
    const TokenRange spans[1] = {ep.query_answer};

    DaraFactors factors(cfg.n_layers, cfg.n_heads, 3, {0}, {});
    Rng frng(23);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        for (std::size_t s = 0; s < 3; ++s) factors.values(0, h, s) = frng.uniform(0.6, 1.7);
    }

    const std::size_t L = ep.seq.length();
    const ScoreScaling scaling =
        build_score_scaling(factors, ep.spans, L, DaraMode::algorithm1, ep.seq.modality);
    ForwardHooks hooks;
    hooks.scaling = &scaling;
    ScoreScalingGrad sg(cfg.n_layers, cfg.n_heads, L);
    GradRequest req;
    req.scaling = true;
    loss_and_gradients(params, ep.seq, spans, hooks, req, nullptr, &sg, nullptr);
    Tensor factor_grads(factors.values.shape());
    accumulate_factor_grads(sg, ep.spans, factors, factor_grads);

    DaraFactors probe = factors;
    auto loss_fn = [&](std::span<const double> p) {
        std::copy(p.begin(), p.end(), probe.values.values().begin());
        const ScoreScaling s2 =
            build_score_scaling(probe, ep.spans, L, DaraMode::algorithm1, ep.seq.modality);
        ForwardOptions opts;
        opts.hooks.scaling = &s2;
        return answer_loss(forward(params, ep.seq, opts), ep.seq, ep.query_answer);
    };
    const GradCheckReport rep =
        grad_check(loss_fn, factors.values.values(), factor_grads.values());
    CHECK(rep.norm_rel_err(factor_grads.values(), 0, factor_grads.size()) <= 1e-6);
    CHECK(rep.max_rel_err <= 1e-4);
    // inactive layer-1 entries carry no gradient
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        for (std::size_t s = 0; s < 3; ++s) CHECK(factor_grads(1, h, s) == 0.0);
    }
}

TEST_CASE("monotone shift: amplifying columns with positive scores raises their softmax mass") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t L = 12;
        Tensor s({L, L});
        ImageSpanMap spans;
        spans.spans.push_back({0, 2, 6});
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t j = 0; j < L; ++j) {
                const bool image_col = j >= 2 && j < 6;
                // the documented sign condition: amplification raises mass only
                // where the pre-softmax image scores are positive
                s(i, j) = image_col ? rng.uniform(0.05, 1.5) : rng.uniform(-1.5, 1.5);
            }
        }
        const double c = rng.uniform(1.05, 2.0);
        const Tensor base = row_softmax(s);
        const Tensor boosted = row_softmax(apply_factors(s, spans, std::vector<double>{c}));
        for (std::size_t i = 0; i < L; ++i) {
            double m0 = 0.0, m1 = 0.0;
            for (std::size_t j = 2; j < 6; ++j) {
                m0 += base(i, j);
                m1 += boosted(i, j);
            }
            REQUIRE(m1 > m0);
        }
    }
}

TEST_CASE("hard attention ablation: head selection and mass placement") {
    CHECK_THROWS_AS(hard_attention_scaling(HardMaskSpec{0.0, {0}}, 2, 8, 4,
                                           std::vector<Modality>(4, Modality::text)),
                    PreconditionError);

    std::vector<Modality> modality(6, Modality::text);
    modality[0] = Modality::special;
    const ScoreScaling sc = hard_attention_scaling(HardMaskSpec{0.5, {0}}, 1, 8, 6, modality);
    for (std::size_t h = 0; h < 8; ++h) {
        const bool masked = h < 4;  // heads 0..3, lowest-index first
        CHECK(sc.blocked(0, h, 1) == masked);
        CHECK(!sc.blocked(0, h, 0));  // specials never blocked
    }

    // through the real model: masked heads put (almost) all mass on visual+special
    SplitSizes sizes;
    sizes.support = 12;
    sizes.test = 4;
    sizes.train_support = 6;
    sizes.train_query = 6;
    const SplitSet task = build_splits(TaskKind::outlier, sizes, kGen, 3);
    const ModelConfig cfg = small_config();
    Rng rng(37);
    const ModelParams params = ModelParams::init(cfg, rng);
    const auto ep = sample_episode(task, cfg, 2, 5, false);
    const ScoreScaling hard = hard_attention_scaling(HardMaskSpec{0.5, {0}}, cfg.n_layers,
                                                     cfg.n_heads, ep.seq.length(),
                                                     ep.seq.modality);
    AttentionTrace trace;
    ForwardOptions opts;
    opts.hooks.scaling = &hard;
    opts.trace = &trace;
    forward(params, ep.seq, opts);
    for (std::size_t h = 0; h < cfg.n_heads / 2; ++h) {
        const Tensor& p = trace.at(0, h);
        for (std::size_t i = 0; i < p.rows(); ++i) {
            double non_text = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                if (ep.seq.modality[j] != Modality::text) non_text += p(i, j);
            }
            REQUIRE(non_text >= 1.0 - 1e-9);
        }
    }
}

TEST_CASE("train_dara: loss decreases, factors move, backbone untouched") {
    SplitSizes sizes;
    sizes.support = 12;
    sizes.test = 4;
    sizes.train_support = 6;
    sizes.train_query = 6;
    const SplitSet task = build_splits(TaskKind::operator_induction, sizes, kGen, 41);
    ModelConfig cfg = small_config();
    cfg.n_layers = 1;
    Rng rng(43);
    const ModelParams params = ModelParams::init(cfg, rng);
    const std::uint64_t before = params.checksum();

    FinetuneConfig fcfg;
    fcfg.shots = 1;
    fcfg.optim.epochs = 3;
    fcfg.seed = 7;
    std::vector<TrainLogEntry> trace;
    const DaraFactors factors = train_dara(params, task, fcfg, &trace);

    CHECK(params.checksum() == before);  // gradient isolation
    REQUIRE(!trace.empty());
    CHECK(trace.back().loss < trace.front().loss);
    double max_dev = 0.0;
    for (std::size_t i = 0; i < factors.values.size(); ++i) {
        max_dev = std::max(max_dev, std::abs(factors.values[i] - 1.0));
    }
    CHECK(max_dev > 1e-3);

    // zero epochs leave the factors at the all-ones initialization
    FinetuneConfig zero = fcfg;
    zero.optim.epochs = 0;
    const DaraFactors untouched = train_dara(params, task, zero, nullptr);
    for (std::size_t i = 0; i < untouched.values.size(); ++i) CHECK(untouched.values[i] == 1.0);

    // determinism: same seed, same result
    const DaraFactors again = train_dara(params, task, fcfg, nullptr);
    CHECK(again.checksum() == factors.checksum());
}

TEST_CASE("train_dara rejects an empty support set") {
    SplitSet empty;
    empty.kind = TaskKind::operator_induction;
    ModelConfig cfg = small_config();
    Rng rng(1);
    const ModelParams params = ModelParams::init(cfg, rng);
    CHECK_THROWS_AS(train_dara(params, empty, FinetuneConfig{}, nullptr), PreconditionError);
}

TEST_CASE("factor checkpoint and csv round-trip") {
    namespace fs = std::filesystem;
    DaraFactors factors(2, 4, 3, {0}, {1, 3});
    factors.values(0, 1, 2) = 1.25;
    factors.values(0, 3, 0) = 0.75;
    const fs::path bin = fs::temp_directory_path() / "micl_factors.bin";
    save_factors(bin, factors);
    const DaraFactors loaded = load_factors(bin);
    CHECK(loaded.checksum() == factors.checksum());
    CHECK(loaded.n_slots == 3);
    CHECK(loaded.layer_active == factors.layer_active);
    CHECK(loaded.head_active == factors.head_active);
    fs::remove(bin);

    const fs::path csv = fs::temp_directory_path() / "micl_factors.csv";
    write_factor_csv(csv, factors);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    CHECK(header == "layer,head,image_slot,value");
    std::size_t rows = 0;
    for (std::string line; std::getline(f, line);) ++rows;
    CHECK(rows == factors.values.size());
    fs::remove(csv);
}
