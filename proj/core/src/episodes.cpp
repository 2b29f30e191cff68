#include "micl/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "micl/vocab.hpp"

namespace micl {

SelectorKind selector_from_name(std::string_view name) {
    if (name == "zero_shot") return SelectorKind::zero_shot;
    if (name == "no_image") return SelectorKind::no_image;
    if (name == "random") return SelectorKind::random;
    if (name == "rices") return SelectorKind::rices;
    throw ConfigError("unknown selector: " + std::string(name));
}

std::string_view selector_name(SelectorKind s) {
    switch (s) {
        case SelectorKind::zero_shot: return "zero_shot";
        case SelectorKind::no_image: return "no_image";
        case SelectorKind::random: return "random";
        case SelectorKind::rices: return "rices";
    }
    return "?";
}

TemplateVariant template_from_name(std::string_view name) {
    if (name == "minimal") return TemplateVariant::minimal;
    if (name == "instructed") return TemplateVariant::instructed;
    throw ConfigError("unknown template variant: " + std::string(name));
}

std::string PromptTemplate::system_line() const {
    if (variant == TemplateVariant::minimal) {
        return "learn from the demos and give only the answer";
    }
    return "the following image text pairs show how to answer the questions learn the rule "
           "from the demos and answer the query";
}

std::string PromptTemplate::demo_prefix(std::size_t demo_index) const {
    if (variant == TemplateVariant::minimal) return "";
    return "here is demo " + std::to_string(demo_index + 1) + " ";
}

std::string PromptTemplate::question_prefix() const {
    return variant == TemplateVariant::minimal ? "" : "the question is ";
}

std::string PromptTemplate::query_prefix() const {
    return variant == TemplateVariant::minimal ? "" : "now answer the query ";
}

// ---------------------------------------------------------------------------
// Demo selection
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> rule_candidates(const GeneratedSample& query,
                                         const std::vector<GeneratedSample>& support) {
    std::vector<std::size_t> out;
    const std::string query_id = query.meta.identity();
    for (std::size_t i = 0; i < support.size(); ++i) {
        if (support[i].meta.rule != query.meta.rule) continue;
        if (support[i].meta.identity() == query_id) continue;  // never the query itself
        out.push_back(i);
    }
    return out;
}

double cosine(const Image& a, const Image& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double x = a.pixels[i], y = b.pixels[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

}  // namespace

std::vector<std::size_t> cosine_argsort(const GeneratedSample& query,
                                        const std::vector<GeneratedSample>& support) {
    std::vector<std::size_t> order(support.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> sim(support.size());
    for (std::size_t i = 0; i < support.size(); ++i) sim[i] = cosine(query.image, support[i].image);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (sim[a] != sim[b]) return sim[a] > sim[b];
        return support[a].id < support[b].id;  // ties by lower sample id
    });
    return order;
}

std::vector<const GeneratedSample*> select_demos(SelectorKind strategy,
                                                 const GeneratedSample& query,
                                                 const std::vector<GeneratedSample>& support,
                                                 std::size_t n, Rng& rng) {
    if (strategy == SelectorKind::zero_shot || n == 0) return {};
    if (n > support.size()) {
        throw PreconditionError("select_demos: requested " + std::to_string(n) + " demos from " +
                                std::to_string(support.size()) + " support samples");
    }
    const auto candidates = rule_candidates(query, support);
    if (n > candidates.size()) {
        throw PreconditionError("select_demos: only " + std::to_string(candidates.size()) +
                                " same-rule candidates for " + std::to_string(n) + " demos");
    }
    std::vector<const GeneratedSample*> out;
    out.reserve(n);
    if (strategy == SelectorKind::rices) {
        // rank candidates by similarity, pick top n, order most-similar-last
        std::vector<std::size_t> order;
        for (std::size_t idx : cosine_argsort(query, support)) {
            if (std::find(candidates.begin(), candidates.end(), idx) != candidates.end()) {
                order.push_back(idx);
            }
        }
        for (std::size_t i = 0; i < n; ++i) out.push_back(&support[order[i]]);
        std::reverse(out.begin(), out.end());
        return out;
    }
    // random / no_image: uniform without replacement, sampling order kept
    std::vector<std::size_t> pool = candidates;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        out.push_back(&support[pool[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt assembly
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<double>> image_patches(const Image& img, const ModelConfig& cfg) {
    const std::size_t P = cfg.patch_size;
    const std::size_t grid = cfg.image_size / P;
    if (img.width != cfg.image_size || img.height != cfg.image_size) {
        throw PreconditionError("assemble_prompt: image is " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + ", model expects " +
                                std::to_string(cfg.image_size));
    }
    std::vector<std::vector<double>> patches;
    patches.reserve(grid * grid);
    for (std::size_t gr = 0; gr < grid; ++gr) {
        for (std::size_t gc = 0; gc < grid; ++gc) {
            std::vector<double> patch(P * P);
            for (std::size_t y = 0; y < P; ++y) {
                for (std::size_t x = 0; x < P; ++x) {
                    // pixels map linearly onto [-1, 1]
                    patch[y * P + x] = static_cast<double>(img.at(gc * P + x, gr * P + y)) / 127.5 - 1.0;
                }
            }
            patches.push_back(std::move(patch));
        }
    }
    return patches;
}

void append_text(AssembledEpisode& ep, const std::string& text) {
    for (int id : encode_text(text)) ep.seq.push_token(id, Modality::text);
    ep.rendered_text += text;
}

void append_image(AssembledEpisode& ep, const Image& img, const ModelConfig& cfg) {
    ep.seq.push_token(kTokImgStart, Modality::special);
    const std::size_t begin = ep.seq.length();
    for (auto& patch : image_patches(img, cfg)) ep.seq.push_patch(kTokPatch, std::move(patch));
    ep.spans.spans.push_back({ep.spans.size(), begin, ep.seq.length()});
    ep.seq.push_token(kTokImgEnd, Modality::special);
}

}  // namespace

AssembledEpisode assemble_prompt(const Episode& episode, const ModelConfig& cfg,
                                 const AssemblyOptions& opts) {
    if (!episode.query) throw PreconditionError("assemble_prompt: episode has no query");
    AssembledEpisode ep;
    ep.seq.push_token(kTokBos, Modality::special);
    append_text(ep, opts.prompt.system_line());
    ep.seq.push_token(kTokSep, Modality::special);

    for (std::size_t i = 0; i < episode.demos.size(); ++i) {
        const GeneratedSample& demo = *episode.demos[i];
        const std::string prefix = opts.prompt.demo_prefix(i);
        if (!prefix.empty()) append_text(ep, prefix);
        if (!episode.demos_without_images) append_image(ep, demo.image, cfg);
        append_text(ep, opts.prompt.question_prefix() + demo.instruction);
        ep.seq.push_token(kTokAns, Modality::special);
        const std::size_t resp_begin = ep.seq.length();
        append_text(ep, demo.label);
        ep.demo_answers.push_back({resp_begin, ep.seq.length()});
        ep.seq.push_token(kTokSep, Modality::special);
    }

    const std::string qprefix = opts.prompt.query_prefix();
    if (!qprefix.empty() && !episode.demos.empty()) append_text(ep, qprefix);
    append_image(ep, episode.query->image, cfg);
    append_text(ep, opts.prompt.question_prefix() + episode.query->instruction);
    ep.seq.push_token(kTokAns, Modality::special);

    if (opts.include_gold) {
        const std::size_t begin = ep.seq.length();
        append_text(ep, episode.gold);
        ep.seq.push_token(kTokEos, Modality::special);
        ep.query_answer = {begin, ep.seq.length()};
    }

    if (ep.seq.length() > cfg.max_seq) {
        throw PreconditionError("assemble_prompt: episode needs " + std::to_string(ep.seq.length()) +
                                " tokens (" + std::to_string(episode.demos.size()) + " demos, " +
                                std::to_string(ep.spans.size()) + " images) but max_seq is " +
                                std::to_string(cfg.max_seq));
    }
    ep.seq.validate(cfg.max_seq, cfg.patch_dim());
    return ep;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

ScoreMode score_mode_for(TaskKind kind) {
    return numeric_labels(kind) ? ScoreMode::strict : ScoreMode::keyword;
}

namespace {

char lower(char c) { return c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c; }

bool is_word_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

}  // namespace

bool score(const std::string& prediction, const std::string& gold, ScoreMode mode) {
    if (mode == ScoreMode::strict) return prediction == gold;
    // keyword: gold as a whole word, case-insensitive
    std::string p(prediction.size(), '\0'), g(gold.size(), '\0');
    std::transform(prediction.begin(), prediction.end(), p.begin(), lower);
    std::transform(gold.begin(), gold.end(), g.begin(), lower);
    if (g.empty()) return false;
    for (std::size_t pos = p.find(g); pos != std::string::npos; pos = p.find(g, pos + 1)) {
        const bool left_ok = pos == 0 || !is_word_char(p[pos - 1]);
        const std::size_t end = pos + g.size();
        const bool right_ok = end == p.size() || !is_word_char(p[end]);
        if (left_ok && right_ok) return true;
    }
    return false;
}

double accuracy_percent(const std::vector<Verdict>& verdicts) {
    if (verdicts.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& v : verdicts) correct += v.correct ? 1 : 0;
    return 100.0 * static_cast<double>(correct) / static_cast<double>(verdicts.size());
}

AttentionRatio attention_ratio(const AttentionTrace& trace, const ImageSpanMap& spans,
                               std::size_t answer_rows_begin) {
    if (trace.probs.empty() || trace.seq_len == 0) {
        throw PreconditionError("attention_ratio: empty trace");
    }
    if (answer_rows_begin >= trace.seq_len) {
        throw PreconditionError("attention_ratio: no answer rows in trace");
    }
    std::vector<std::uint8_t> visual(trace.seq_len, 0);
    for (const auto& s : spans.spans) {
        for (std::size_t j = s.begin; j < s.end && j < trace.seq_len; ++j) visual[j] = 1;
    }
    double image_mass = 0.0, text_mass = 0.0;
    for (const auto& p : trace.probs) {
        for (std::size_t i = answer_rows_begin; i < trace.seq_len; ++i) {
            const double* row = p.data() + i * trace.seq_len;
            for (std::size_t j = 0; j < trace.seq_len; ++j) {
                if (visual[j]) {
                    image_mass += row[j];
                } else if (trace.modality[j] == Modality::text) {
                    text_mass += row[j];
                }
            }
        }
    }
    const double total = image_mass + text_mass;
    if (total <= 0.0) return {0.0, 0.0};
    return {image_mass / total, text_mass / total};
}

}  // namespace micl
