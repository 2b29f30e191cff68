#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>

#include "micl/rng.hpp"
#include "micl/tensor.hpp"
#include "micl/tokens.hpp"
#include "micl/vocab.hpp"

namespace micl {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 8;
    std::size_t vocab_size = 64;
    std::size_t max_seq = 512;
    std::size_t image_size = 32;
    std::size_t patch_size = 8;

    std::size_t d_head() const { return d_model / n_heads; }
    std::size_t patch_dim() const { return patch_size * patch_size; }
    std::size_t visual_tokens_per_image() const {
        const std::size_t g = image_size / patch_size;
        return g * g;
    }
    std::size_t mlp_hidden() const { return 4 * d_model; }

    void validate() const;
};

// All trainable weights. The output head is tied to the token embedding.
struct ModelParams {
    ModelConfig config;

    Tensor tok_emb;   // [vocab, d]
    Tensor patch_w;   // [patch_dim, d]
    Tensor patch_b;   // [d]
    Tensor pos_emb;   // [max_seq, d]
    struct Layer {
        Tensor ln1_g, ln1_b;          // [d]
        Tensor wq, wk, wv, wo;        // [d, d]
        Tensor ln2_g, ln2_b;          // [d]
        Tensor fc1_w;                 // [d, 4d]
        Tensor fc1_b;                 // [4d]
        Tensor fc2_w;                 // [4d, d]
        Tensor fc2_b;                 // [d]
    };
    std::vector<Layer> layers;
    Tensor lnf_g, lnf_b;  // [d]

    static ModelParams init(const ModelConfig& cfg, Rng& rng);
    static ModelParams zeros_like(const ModelParams& other);

    // Stable (name, tensor) enumeration used by checkpoints, the optimizer
    // and gradient checks.
    std::vector<std::pair<std::string, Tensor*>> named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;

    std::size_t parameter_count() const;
    std::uint64_t checksum() const;

    void flatten_to(std::vector<double>& out) const;
    void unflatten_from(std::span<const double> in);
};

// Per-(layer, head, column) multiplicative adjustment of the pre-mask
// attention scores, plus an optional hard block (-inf before softmax).
// Multipliers default to 1; built by the dara module from factors and spans.
struct ScoreScaling {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t seq_len = 0;
    std::vector<double> col_mul;           // [layer][head][col]
    std::vector<std::uint8_t> col_block;   // 1 -> column receives -inf pre-softmax

    ScoreScaling() = default;
    ScoreScaling(std::size_t layers, std::size_t heads, std::size_t len)
        : n_layers(layers),
          n_heads(heads),
          seq_len(len),
          col_mul(layers * heads * len, 1.0),
          col_block(layers * heads * len, 0) {}

    std::size_t index(std::size_t l, std::size_t h, std::size_t c) const {
        return (l * n_heads + h) * seq_len + c;
    }
    double& mul(std::size_t l, std::size_t h, std::size_t c) { return col_mul[index(l, h, c)]; }
    double mul(std::size_t l, std::size_t h, std::size_t c) const { return col_mul[index(l, h, c)]; }
    std::uint8_t& block(std::size_t l, std::size_t h, std::size_t c) { return col_block[index(l, h, c)]; }
    bool blocked(std::size_t l, std::size_t h, std::size_t c) const {
        return col_block[index(l, h, c)] != 0;
    }
};

// Gradient of the loss w.r.t. each column multiplier; same layout.
struct ScoreScalingGrad {
    std::size_t n_layers = 0, n_heads = 0, seq_len = 0;
    std::vector<double> col_mul;
    ScoreScalingGrad() = default;
    ScoreScalingGrad(std::size_t layers, std::size_t heads, std::size_t len)
        : n_layers(layers), n_heads(heads), seq_len(len), col_mul(layers * heads * len, 0.0) {}
    double& at(std::size_t l, std::size_t h, std::size_t c) {
        return col_mul[(l * n_heads + h) * seq_len + c];
    }
};

// Additive low-rank update on the layer-0 query/key projections; weights are
// used as w + (alpha/rank) * a.b when present.
struct LoraWeights {
    std::size_t layer = 0;
    std::size_t rank = 0;
    double alpha = 0.0;
    Tensor a_q, b_q;  // [d, r], [r, d]
    Tensor a_k, b_k;
};

struct LoraGrads {
    Tensor a_q, b_q, a_k, b_k;
};

// Post-softmax attention matrices for a recorded forward pass.
struct AttentionTrace {
    std::size_t n_layers = 0, n_heads = 0, seq_len = 0;
    std::vector<Tensor> probs;  // [layer*heads + head], each L x L, causal rows
    ImageSpanMap spans;
    std::vector<Modality> modality;

    const Tensor& at(std::size_t l, std::size_t h) const { return probs[l * n_heads + h]; }
};

struct ForwardHooks {
    const ScoreScaling* scaling = nullptr;
    const LoraWeights* lora = nullptr;
};

struct ForwardOptions {
    ForwardHooks hooks;
    AttentionTrace* trace = nullptr;  // filled when non-null; never perturbs values
};

// Full forward pass; logits over the vocabulary at every position.
Tensor forward(const ModelParams& params, const TokenSequence& seq, const ForwardOptions& opts = {});

// Embedding only (text/special rows from the token table, visual rows from
// the patch projection, positional embedding added everywhere).
Tensor embed(const ModelParams& params, const TokenSequence& seq);

// Mean cross-entropy over the gold positions in `answer`. For a gold token at
// position p the predicting row is p-1. Demo and question positions outside
// the range contribute nothing.
double answer_loss(const Tensor& logits, const TokenSequence& seq, const TokenRange& answer);

struct GradRequest {
    bool model_params = false;
    bool scaling = false;
    bool lora = false;
};

// Fused loss + backward over one or more supervised spans; gradients are
// accumulated (+=) into whichever sinks the request names.
double loss_and_gradients(const ModelParams& params, const TokenSequence& seq,
                          std::span<const TokenRange> supervised, const ForwardHooks& hooks,
                          const GradRequest& req, ModelParams* param_grads,
                          ScoreScalingGrad* scaling_grads, LoraGrads* lora_grads);

struct DecodeResult {
    std::string text;            // characters of generated text tokens
    std::vector<int> ids;        // every generated id, including the stop token
};

// Greedy decoding from a prefix that ends at the answer marker. Ties break
// toward the lowest token id; generation stops at EOS (or any other control
// token, which cannot extend the answer text) or after max_new tokens.
DecodeResult greedy_decode(const ModelParams& params, const TokenSequence& prefix,
                           std::size_t max_new, const ForwardHooks& hooks = {},
                           AttentionTrace* final_trace = nullptr,
                           TokenSequence* final_seq = nullptr);

// Single-head attention primitive: s = q.k^T / sqrt(d_head), s' = hook(s),
// o = row_softmax(s' + mask) . v. The hook (identity when absent) is applied
// before the mask is added. Returns the output and the recorded s'.
std::pair<Tensor, Tensor> attention_head(
    const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
    const std::function<Tensor(const Tensor&)>& scale_hook = nullptr);

// Additive causal mask: 0 on and below the diagonal, -inf above.
Tensor causal_mask(std::size_t n);

}  // namespace micl
