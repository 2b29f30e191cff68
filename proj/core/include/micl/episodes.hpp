#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "micl/model.hpp"
#include "micl/tokens.hpp"
#include "micl/truemicl.hpp"

namespace micl {

// One evaluation unit: selected demos, a query, its gold answer. All members
// share the task kind and the hidden rule.
struct Episode {
    std::vector<const GeneratedSample*> demos;
    const GeneratedSample* query = nullptr;
    std::string gold;
    TaskKind kind = TaskKind::operator_induction;
    bool demos_without_images = false;  // no-image baseline keeps demo text only
};

enum class SelectorKind : std::uint8_t { zero_shot, no_image, random, rices };
SelectorKind selector_from_name(std::string_view name);
std::string_view selector_name(SelectorKind s);

enum class TemplateVariant : std::uint8_t { minimal, instructed };
TemplateVariant template_from_name(std::string_view name);

// Fixed phrasing of the two prompt templates; neither mentions the hidden rule.
struct PromptTemplate {
    TemplateVariant variant = TemplateVariant::minimal;
    std::string system_line() const;
    std::string demo_prefix(std::size_t demo_index) const;  // text before the demo image
    std::string question_prefix() const;                    // text between image and instruction
    std::string query_prefix() const;                       // text before the query image
};

// Demo selection from the same-task, same-rule support candidates; never
// returns the query itself and never repeats a sample.
//   random    uniform without replacement, sampling order kept
//   rices     top-n by cosine similarity of flattened pixels (ties broken by
//             lower sample id), ordered most-similar-last
//   no_image  random selection, images stripped at assembly
//   zero_shot empty
std::vector<const GeneratedSample*> select_demos(SelectorKind strategy,
                                                 const GeneratedSample& query,
                                                 const std::vector<GeneratedSample>& support,
                                                 std::size_t n, Rng& rng);

// Brute-force cosine ranking over all candidates (test oracle for rices).
std::vector<std::size_t> cosine_argsort(const GeneratedSample& query,
                                        const std::vector<GeneratedSample>& support);

struct AssembledEpisode {
    TokenSequence seq;
    ImageSpanMap spans;
    TokenRange query_answer;              // gold tokens + EOS when gold included
    std::vector<TokenRange> demo_answers; // response tokens of each demo
    std::string rendered_text;            // all text segments, in order
};

struct AssemblyOptions {
    PromptTemplate prompt;
    bool include_gold = false;  // training assembly appends gold + EOS after ANS
};

// Layout per demo: IMG_START, visual tokens, IMG_END, instruction, ANS,
// response, SEP. The query repeats the frame with the response omitted after
// ANS. A system line opens the sequence after BOS.
AssembledEpisode assemble_prompt(const Episode& episode, const ModelConfig& cfg,
                                 const AssemblyOptions& opts);

enum class ScoreMode : std::uint8_t { strict, keyword };
ScoreMode score_mode_for(TaskKind kind);

// strict: exact string equality; keyword: gold appears as a whole word in the
// prediction, case-insensitive.
bool score(const std::string& prediction, const std::string& gold, ScoreMode mode);

struct Verdict {
    std::uint32_t sample_id = 0;
    std::string prediction;
    std::string gold;
    bool correct = false;
};

double accuracy_percent(const std::vector<Verdict>& verdicts);

// Normalized post-softmax attention mass on visual vs text columns (special
// tokens excluded), summed over every row at or after `answer_rows_begin`,
// averaged over all layers and heads. image + text == 1.
struct AttentionRatio {
    double image_mass = 0.0;
    double text_mass = 0.0;
};
AttentionRatio attention_ratio(const AttentionTrace& trace, const ImageSpanMap& spans,
                               std::size_t answer_rows_begin);

}  // namespace micl
