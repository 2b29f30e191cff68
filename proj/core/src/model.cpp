#include "micl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace micl {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kNegInf = -1e30;  // finite stand-in for -inf in score space
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace

void ModelConfig::validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0) {
        throw ConfigError("model config: zero-size dimension");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("model config: image_size " + std::to_string(image_size) +
                          " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (vocab_size < static_cast<std::size_t>(kMinVocab)) {
        throw ConfigError("model config: vocab_size must cover the fixed alphabet (>= " +
                          std::to_string(kMinVocab) + ")");
    }
    if (max_seq < 4) throw ConfigError("model config: max_seq too small");
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const std::size_t d = cfg.d_model;
    p.tok_emb = Tensor({cfg.vocab_size, d});
    p.patch_w = Tensor({cfg.patch_dim(), d});
    p.patch_b = Tensor({d});
    p.pos_emb = Tensor({cfg.max_seq, d});
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.ln1_g = Tensor({d});
        l.ln1_b = Tensor({d});
        l.wq = Tensor({d, d});
        l.wk = Tensor({d, d});
        l.wv = Tensor({d, d});
        l.wo = Tensor({d, d});
        l.ln2_g = Tensor({d});
        l.ln2_b = Tensor({d});
        l.fc1_w = Tensor({d, cfg.mlp_hidden()});
        l.fc1_b = Tensor({cfg.mlp_hidden()});
        l.fc2_w = Tensor({cfg.mlp_hidden(), d});
        l.fc2_b = Tensor({d});
    }
    p.lnf_g = Tensor({d});
    p.lnf_b = Tensor({d});

    constexpr double kInitStd = 0.08;
    for (auto& [name, t] : p.named_tensors()) {
        const bool is_gain = name.ends_with("_g");
        const bool is_bias = name.ends_with("_b");
        for (std::size_t i = 0; i < t->size(); ++i) {
            (*t)[i] = is_gain ? 1.0 : is_bias ? 0.0 : rng.normal() * kInitStd;
        }
    }
    return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
    ModelParams p = other;
    for (auto& [name, t] : p.named_tensors()) {
        std::fill(t->values().begin(), t->values().end(), 0.0);
    }
    return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("patch_w", &patch_w);
    out.emplace_back("patch_b", &patch_b);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string prefix = "layer" + std::to_string(i) + ".";
        auto& l = layers[i];
        out.emplace_back(prefix + "ln1_g", &l.ln1_g);
        out.emplace_back(prefix + "ln1_b", &l.ln1_b);
        out.emplace_back(prefix + "wq", &l.wq);
        out.emplace_back(prefix + "wk", &l.wk);
        out.emplace_back(prefix + "wv", &l.wv);
        out.emplace_back(prefix + "wo", &l.wo);
        out.emplace_back(prefix + "ln2_g", &l.ln2_g);
        out.emplace_back(prefix + "ln2_b", &l.ln2_b);
        out.emplace_back(prefix + "fc1_w", &l.fc1_w);
        out.emplace_back(prefix + "fc1_b", &l.fc1_b);
        out.emplace_back(prefix + "fc2_w", &l.fc2_w);
        out.emplace_back(prefix + "fc2_b", &l.fc2_b);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_tensors() const {
    auto mutable_view = const_cast<ModelParams*>(this)->named_tensors();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mutable_view.size());
    for (auto& [name, t] : mutable_view) out.emplace_back(name, t);
    return out;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t->size();
    return n;
}

std::uint64_t ModelParams::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : named_tensors()) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t->values(), h);
    }
    return h;
}

void ModelParams::flatten_to(std::vector<double>& out) const {
    out.clear();
    out.reserve(parameter_count());
    for (const auto& [name, t] : named_tensors()) {
        out.insert(out.end(), t->values().begin(), t->values().end());
    }
}

void ModelParams::unflatten_from(std::span<const double> in) {
    std::size_t cursor = 0;
    for (auto& [name, t] : named_tensors()) {
        if (cursor + t->size() > in.size()) throw ShapeError("unflatten_from: parameter vector too short");
        std::copy(in.begin() + static_cast<std::ptrdiff_t>(cursor),
                  in.begin() + static_cast<std::ptrdiff_t>(cursor + t->size()), t->values().begin());
        cursor += t->size();
    }
    if (cursor != in.size()) throw ShapeError("unflatten_from: parameter vector too long");
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

struct LayerCache {
    Tensor x_in;          // input to the layer
    Tensor xhat1;         // LN1 normalized rows
    std::vector<double> rstd1;
    Tensor a;             // post-LN1
    Tensor q, k, v;
    std::vector<Tensor> p;      // per head, L x L post-softmax (upper zero)
    std::vector<Tensor> s_raw;  // per head, pre-scaling scores; only when needed
    Tensor o_cat;         // concatenated head outputs
    Tensor x_mid;         // after attention residual
    Tensor xhat2;
    std::vector<double> rstd2;
    Tensor bnorm;         // post-LN2
    Tensor h1;            // pre-GELU
    Tensor h2;            // post-GELU
};

struct Workspace {
    Tensor x0;
    std::vector<LayerCache> layers;
    Tensor x_final;  // pre-final-LN
    Tensor xhatf;
    std::vector<double> rstdf;
    Tensor fnorm;
    Tensor logits;
};

void layer_norm(const Tensor& x, const Tensor& g, const Tensor& b, Tensor& xhat,
                std::vector<double>& rstd, Tensor& out) {
    const std::size_t L = x.rows(), d = x.cols();
    xhat = Tensor({L, d});
    out = Tensor({L, d});
    rstd.assign(L, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        const double* row = x.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double r = 1.0 / std::sqrt(var + kLnEps);
        rstd[i] = r;
        double* xh = xhat.data() + i * d;
        double* o = out.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mean) * r;
            o[j] = g[j] * xh[j] + b[j];
        }
    }
}

// dx accumulated in place from dy; dg/db optional sinks
void layer_norm_backward(const Tensor& dy, const Tensor& xhat, const std::vector<double>& rstd,
                         const Tensor& g, Tensor* dg, Tensor* db, Tensor& dx) {
    const std::size_t L = dy.rows(), d = dy.cols();
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < L; ++i) {
        const double* dyr = dy.data() + i * d;
        const double* xh = xhat.data() + i * d;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            if (dg) (*dg)[j] += dyr[j] * xh[j];
            if (db) (*db)[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        double* dxr = dx.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            dxr[j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
}

Tensor effective_weight(const Tensor& w, const Tensor& a, const Tensor& b, double alpha_over_r) {
    Tensor eff = w;
    Tensor delta({a.rows(), b.cols()});
    kernels::mm_acc(delta.data(), a.data(), b.data(), a.rows(), a.cols(), b.cols());
    for (std::size_t i = 0; i < eff.size(); ++i) eff[i] += alpha_over_r * delta[i];
    return eff;
}

void run_forward(const ModelParams& params, const TokenSequence& seq, const ForwardHooks& hooks,
                 bool keep_sraw, Workspace& ws, AttentionTrace* trace) {
    const ModelConfig& cfg = params.config;
    seq.validate(cfg.max_seq, cfg.patch_dim());
    const std::size_t L = seq.length();
    const std::size_t D = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.d_head();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    if (hooks.scaling) {
        if (hooks.scaling->n_layers != cfg.n_layers || hooks.scaling->n_heads != H) {
            throw ShapeError("forward: score scaling sized for a different model");
        }
    }

    if (trace) {
        trace->n_layers = cfg.n_layers;
        trace->n_heads = H;
        trace->seq_len = L;
        trace->probs.assign(cfg.n_layers * H, Tensor());
    }

    // embedding
    ws.x0 = Tensor({L, D});
    for (std::size_t pos = 0; pos < L; ++pos) {
        double* row = ws.x0.data() + pos * D;
        if (seq.modality[pos] == Modality::visual) {
            const auto& patch = seq.patches[pos];
            for (std::size_t j = 0; j < D; ++j) row[j] = params.patch_b[j];
            kernels::mm_acc(row, patch.data(), params.patch_w.data(), 1, cfg.patch_dim(), D);
        } else {
            const int id = seq.ids[pos];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
                throw PreconditionError("embed: unknown token id " + std::to_string(id));
            }
            const double* emb = params.tok_emb.data() + static_cast<std::size_t>(id) * D;
            for (std::size_t j = 0; j < D; ++j) row[j] = emb[j];
        }
        const double* pe = params.pos_emb.data() + pos * D;
        for (std::size_t j = 0; j < D; ++j) row[j] += pe[j];
    }

    ws.layers.assign(cfg.n_layers, LayerCache{});
    Tensor x = ws.x0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = ws.layers[l];
        const auto& lp = params.layers[l];
        lc.x_in = x;
        layer_norm(x, lp.ln1_g, lp.ln1_b, lc.xhat1, lc.rstd1, lc.a);

        const bool lora_here = hooks.lora && hooks.lora->layer == l && hooks.lora->rank > 0;
        Tensor wq_eff, wk_eff;
        const Tensor* wq = &lp.wq;
        const Tensor* wk = &lp.wk;
        if (lora_here) {
            const double s = hooks.lora->alpha / static_cast<double>(hooks.lora->rank);
            wq_eff = effective_weight(lp.wq, hooks.lora->a_q, hooks.lora->b_q, s);
            wk_eff = effective_weight(lp.wk, hooks.lora->a_k, hooks.lora->b_k, s);
            wq = &wq_eff;
            wk = &wk_eff;
        }

        lc.q = Tensor({L, D});
        lc.k = Tensor({L, D});
        lc.v = Tensor({L, D});
        kernels::mm_acc(lc.q.data(), lc.a.data(), wq->data(), L, D, D);
        kernels::mm_acc(lc.k.data(), lc.a.data(), wk->data(), L, D, D);
        kernels::mm_acc(lc.v.data(), lc.a.data(), lp.wv.data(), L, D, D);

        lc.p.assign(H, Tensor());
        if (keep_sraw) lc.s_raw.assign(H, Tensor());
        lc.o_cat = Tensor({L, D});
        std::vector<double> srow(L);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t hs = h * dh;
            Tensor& p = lc.p[h];
            p = Tensor({L, L});
            Tensor* sraw = keep_sraw ? &lc.s_raw[h] : nullptr;
            if (sraw) *sraw = Tensor({L, L});
            for (std::size_t i = 0; i < L; ++i) {
                const double* qi = lc.q.data() + i * D + hs;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = lc.k.data() + j * D + hs;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt_dh;
                    if (sraw) (*sraw)(i, j) = s;
                    if (hooks.scaling) {
                        const std::size_t sl = hooks.scaling->seq_len;
                        if (j < sl) {
                            if (hooks.scaling->blocked(l, h, j)) {
                                s = kNegInf;
                            } else {
                                s *= hooks.scaling->mul(l, h, j);
                            }
                        }
                    }
                    srow[j] = s;
                    mx = std::max(mx, s);
                }
                double sum = 0.0;
                double* prow = p.data() + i * L;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double e = std::exp(srow[j] - mx);
                    prow[j] = e;
                    sum += e;
                }
                const double inv = 1.0 / sum;
                for (std::size_t j = 0; j <= i; ++j) prow[j] *= inv;
                // o_i = sum_j p_ij v_j
                double* orow = lc.o_cat.data() + i * D + hs;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double pij = prow[j];
                    if (pij == 0.0) continue;
                    const double* vj = lc.v.data() + j * D + hs;
                    for (std::size_t c = 0; c < dh; ++c) orow[c] += pij * vj[c];
                }
            }
            if (trace) trace->probs[l * H + h] = p;
        }

        lc.x_mid = lc.x_in;
        kernels::mm_acc(lc.x_mid.data(), lc.o_cat.data(), lp.wo.data(), L, D, D);

        layer_norm(lc.x_mid, lp.ln2_g, lp.ln2_b, lc.xhat2, lc.rstd2, lc.bnorm);
        const std::size_t M = cfg.mlp_hidden();
        lc.h1 = Tensor({L, M});
        for (std::size_t i = 0; i < L; ++i) {
            double* row = lc.h1.data() + i * M;
            for (std::size_t j = 0; j < M; ++j) row[j] = lp.fc1_b[j];
        }
        kernels::mm_acc(lc.h1.data(), lc.bnorm.data(), lp.fc1_w.data(), L, D, M);
        lc.h2 = Tensor({L, M});
        for (std::size_t i = 0; i < lc.h1.size(); ++i) lc.h2[i] = gelu(lc.h1[i]);

        x = lc.x_mid;
        for (std::size_t i = 0; i < L; ++i) {
            double* row = x.data() + i * D;
            for (std::size_t j = 0; j < D; ++j) row[j] += lp.fc2_b[j];
        }
        kernels::mm_acc(x.data(), lc.h2.data(), lp.fc2_w.data(), L, cfg.mlp_hidden(), D);
    }

    ws.x_final = x;
    layer_norm(ws.x_final, params.lnf_g, params.lnf_b, ws.xhatf, ws.rstdf, ws.fnorm);
    ws.logits = Tensor({L, cfg.vocab_size});
    kernels::mm_bt_acc(ws.logits.data(), ws.fnorm.data(), params.tok_emb.data(), L, D,
                       cfg.vocab_size);
    ws.logits.require_finite("forward logits");
}

double supervised_loss(const Tensor& logits, const TokenSequence& seq,
                       std::span<const TokenRange> spans, Tensor* dlogits) {
    const std::size_t L = logits.rows();
    const std::size_t V = logits.cols();
    std::size_t count = 0;
    for (const auto& r : spans) {
        if (r.empty()) throw PreconditionError("answer_loss: empty answer range rejected");
        if (r.begin == 0) throw PreconditionError("answer_loss: position 0 has no predicting row");
        if (r.end > L) throw PreconditionError("answer_loss: range exceeds sequence length");
        count += r.size();
    }
    if (count == 0) throw PreconditionError("answer_loss: no supervised positions");
    const double inv_count = 1.0 / static_cast<double>(count);

    double loss = 0.0;
    std::vector<double> sm(V);
    for (const auto& r : spans) {
        for (std::size_t p = r.begin; p < r.end; ++p) {
            const std::size_t row = p - 1;
            const int target = seq.ids[p];
            const double* z = logits.data() + row * V;
            double mx = z[0];
            for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, z[j]);
            double sum = 0.0;
            for (std::size_t j = 0; j < V; ++j) {
                sm[j] = std::exp(z[j] - mx);
                sum += sm[j];
            }
            const double lse = mx + std::log(sum);
            loss += (lse - z[static_cast<std::size_t>(target)]) * inv_count;
            if (dlogits) {
                double* dz = dlogits->data() + row * V;
                const double inv_sum = 1.0 / sum;
                for (std::size_t j = 0; j < V; ++j) dz[j] += sm[j] * inv_sum * inv_count;
                dz[static_cast<std::size_t>(target)] -= inv_count;
            }
        }
    }
    return loss;
}

void run_backward(const ModelParams& params, const TokenSequence& seq, const ForwardHooks& hooks,
                  const GradRequest& req, const Workspace& ws, const Tensor& dlogits,
                  ModelParams* pg, ScoreScalingGrad* sg, LoraGrads* lg) {
    const ModelConfig& cfg = params.config;
    const std::size_t L = seq.length();
    const std::size_t D = cfg.d_model;
    const std::size_t H = cfg.n_heads;
    const std::size_t dh = cfg.d_head();
    const std::size_t M = cfg.mlp_hidden();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // head: logits = fnorm . tok_emb^T
    Tensor dfnorm({L, D});
    kernels::mm_acc(dfnorm.data(), dlogits.data(), params.tok_emb.data(), L, cfg.vocab_size, D);
    if (req.model_params) {
        kernels::mm_at_acc(pg->tok_emb.data(), dlogits.data(), ws.fnorm.data(), L, cfg.vocab_size, D);
    }

    Tensor dx({L, D});
    layer_norm_backward(dfnorm, ws.xhatf, ws.rstdf, params.lnf_g,
                        req.model_params ? &pg->lnf_g : nullptr,
                        req.model_params ? &pg->lnf_b : nullptr, dx);

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const LayerCache& lc = ws.layers[li];
        const auto& lp = params.layers[li];
        auto* lpg = req.model_params ? &pg->layers[li] : nullptr;

        // MLP block: x_out = x_mid + h2 . fc2 + b2
        Tensor dh2({L, M});
        kernels::mm_bt_acc(dh2.data(), dx.data(), lp.fc2_w.data(), L, D, M);
        if (lpg) {
            kernels::mm_at_acc(lpg->fc2_w.data(), lc.h2.data(), dx.data(), L, M, D);
            for (std::size_t i = 0; i < L; ++i) {
                const double* row = dx.data() + i * D;
                for (std::size_t j = 0; j < D; ++j) lpg->fc2_b[j] += row[j];
            }
        }
        Tensor dh1({L, M});
        for (std::size_t i = 0; i < dh1.size(); ++i) dh1[i] = dh2[i] * gelu_grad(lc.h1[i]);
        Tensor dbnorm({L, D});
        kernels::mm_bt_acc(dbnorm.data(), dh1.data(), lp.fc1_w.data(), L, M, D);
        if (lpg) {
            kernels::mm_at_acc(lpg->fc1_w.data(), lc.bnorm.data(), dh1.data(), L, D, M);
            for (std::size_t i = 0; i < L; ++i) {
                const double* row = dh1.data() + i * M;
                for (std::size_t j = 0; j < M; ++j) lpg->fc1_b[j] += row[j];
            }
        }
        // dx currently holds d(x_out); residual passes it into d(x_mid) and LN2 adds its part
        layer_norm_backward(dbnorm, lc.xhat2, lc.rstd2, lp.ln2_g, lpg ? &lpg->ln2_g : nullptr,
                            lpg ? &lpg->ln2_b : nullptr, dx);

        // attention block: x_mid = x_in + o_cat . wo
        Tensor do_cat({L, D});
        kernels::mm_bt_acc(do_cat.data(), dx.data(), lp.wo.data(), L, D, D);
        if (lpg) kernels::mm_at_acc(lpg->wo.data(), lc.o_cat.data(), dx.data(), L, D, D);

        const bool lora_here = hooks.lora && hooks.lora->layer == li && hooks.lora->rank > 0;
        Tensor wq_eff, wk_eff;
        const Tensor* wq = &lp.wq;
        const Tensor* wk = &lp.wk;
        if (lora_here) {
            const double s = hooks.lora->alpha / static_cast<double>(hooks.lora->rank);
            wq_eff = effective_weight(lp.wq, hooks.lora->a_q, hooks.lora->b_q, s);
            wk_eff = effective_weight(lp.wk, hooks.lora->a_k, hooks.lora->b_k, s);
            wq = &wq_eff;
            wk = &wk_eff;
        }

        Tensor dq({L, D}), dk({L, D}), dv({L, D});
        std::vector<double> dp_row;
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t hs = h * dh;
            const Tensor& p = lc.p[h];
            dp_row.assign(L, 0.0);
            for (std::size_t i = 0; i < L; ++i) {
                const double* doi = do_cat.data() + i * D + hs;
                const double* prow = p.data() + i * L;
                // dP and dV
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* vj = lc.v.data() + j * D + hs;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                    dp_row[j] = acc;
                    dot += prow[j] * acc;
                    double* dvj = dv.data() + j * D + hs;
                    const double pij = prow[j];
                    if (pij != 0.0) {
                        for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * doi[c];
                    }
                }
                // softmax backward, then the scaling hook, then q/k
                const double* qi = lc.q.data() + i * D + hs;
                double* dqi = dq.data() + i * D + hs;
                for (std::size_t j = 0; j <= i; ++j) {
                    double ds_adj = prow[j] * (dp_row[j] - dot);
                    double ds = ds_adj;
                    if (hooks.scaling && j < hooks.scaling->seq_len) {
                        if (hooks.scaling->blocked(li, h, j)) {
                            ds = 0.0;
                        } else {
                            const double mul = hooks.scaling->mul(li, h, j);
                            if (sg && req.scaling) {
                                sg->at(li, h, j) += ds_adj * lc.s_raw[h](i, j);
                            }
                            ds = ds_adj * mul;
                        }
                    }
                    if (ds == 0.0) continue;
                    const double dss = ds * inv_sqrt_dh;
                    const double* kj = lc.k.data() + j * D + hs;
                    double* dkj = dk.data() + j * D + hs;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dqi[c] += dss * kj[c];
                        dkj[c] += dss * qi[c];
                    }
                }
            }
        }

        // back through the projections into d(a)
        Tensor da({L, D});
        kernels::mm_bt_acc(da.data(), dq.data(), wq->data(), L, D, D);
        kernels::mm_bt_acc(da.data(), dk.data(), wk->data(), L, D, D);
        kernels::mm_bt_acc(da.data(), dv.data(), lp.wv.data(), L, D, D);
        if (lpg) {
            kernels::mm_at_acc(lpg->wq.data(), lc.a.data(), dq.data(), L, D, D);
            kernels::mm_at_acc(lpg->wk.data(), lc.a.data(), dk.data(), L, D, D);
            kernels::mm_at_acc(lpg->wv.data(), lc.a.data(), dv.data(), L, D, D);
        }
        if (lora_here && req.lora && lg) {
            const double s = hooks.lora->alpha / static_cast<double>(hooks.lora->rank);
            Tensor dwq({D, D}), dwk({D, D});
            kernels::mm_at_acc(dwq.data(), lc.a.data(), dq.data(), L, D, D);
            kernels::mm_at_acc(dwk.data(), lc.a.data(), dk.data(), L, D, D);
            // d(a_q) = s * dW . b^T ; d(b_q) = s * a^T . dW
            Tensor tmp_aq({D, hooks.lora->rank});
            kernels::mm_bt_acc(tmp_aq.data(), dwq.data(), hooks.lora->b_q.data(), D, D,
                               hooks.lora->rank);
            Tensor tmp_bq({hooks.lora->rank, D});
            kernels::mm_at_acc(tmp_bq.data(), hooks.lora->a_q.data(), dwq.data(), D,
                               hooks.lora->rank, D);
            Tensor tmp_ak({D, hooks.lora->rank});
            kernels::mm_bt_acc(tmp_ak.data(), dwk.data(), hooks.lora->b_k.data(), D, D,
                               hooks.lora->rank);
            Tensor tmp_bk({hooks.lora->rank, D});
            kernels::mm_at_acc(tmp_bk.data(), hooks.lora->a_k.data(), dwk.data(), D,
                               hooks.lora->rank, D);
            for (std::size_t i = 0; i < tmp_aq.size(); ++i) lg->a_q[i] += s * tmp_aq[i];
            for (std::size_t i = 0; i < tmp_bq.size(); ++i) lg->b_q[i] += s * tmp_bq[i];
            for (std::size_t i = 0; i < tmp_ak.size(); ++i) lg->a_k[i] += s * tmp_ak[i];
            for (std::size_t i = 0; i < tmp_bk.size(); ++i) lg->b_k[i] += s * tmp_bk[i];
        }

        // LN1 backward adds into the residual stream gradient
        layer_norm_backward(da, lc.xhat1, lc.rstd1, lp.ln1_g, lpg ? &lpg->ln1_g : nullptr,
                            lpg ? &lpg->ln1_b : nullptr, dx);
    }

    if (req.model_params) {
        for (std::size_t pos = 0; pos < L; ++pos) {
            const double* row = dx.data() + pos * D;
            if (seq.modality[pos] == Modality::visual) {
                const auto& patch = seq.patches[pos];
                kernels::mm_at_acc(pg->patch_w.data(), patch.data(), row, 1, cfg.patch_dim(), D);
                for (std::size_t j = 0; j < D; ++j) pg->patch_b[j] += row[j];
            } else {
                double* emb = pg->tok_emb.data() + static_cast<std::size_t>(seq.ids[pos]) * D;
                for (std::size_t j = 0; j < D; ++j) emb[j] += row[j];
            }
            double* pe = pg->pos_emb.data() + pos * D;
            for (std::size_t j = 0; j < D; ++j) pe[j] += row[j];
        }
    }
}

}  // namespace

Tensor embed(const ModelParams& params, const TokenSequence& seq) {
    const ModelConfig& cfg = params.config;
    seq.validate(cfg.max_seq, cfg.patch_dim());
    const std::size_t L = seq.length(), D = cfg.d_model;
    Tensor x({L, D});
    for (std::size_t pos = 0; pos < L; ++pos) {
        double* row = x.data() + pos * D;
        if (seq.modality[pos] == Modality::visual) {
            for (std::size_t j = 0; j < D; ++j) row[j] = params.patch_b[j];
            kernels::mm_acc(row, seq.patches[pos].data(), params.patch_w.data(), 1, cfg.patch_dim(), D);
        } else {
            const int id = seq.ids[pos];
            if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
                throw PreconditionError("embed: unknown token id " + std::to_string(id));
            }
            const double* emb = params.tok_emb.data() + static_cast<std::size_t>(id) * D;
            for (std::size_t j = 0; j < D; ++j) row[j] = emb[j];
        }
        const double* pe = params.pos_emb.data() + pos * D;
        for (std::size_t j = 0; j < D; ++j) row[j] += pe[j];
    }
    return x;
}

Tensor forward(const ModelParams& params, const TokenSequence& seq, const ForwardOptions& opts) {
    Workspace ws;
    run_forward(params, seq, opts.hooks, false, ws, opts.trace);
    if (opts.trace) {
        opts.trace->modality = seq.modality;
    }
    return std::move(ws.logits);
}

double answer_loss(const Tensor& logits, const TokenSequence& seq, const TokenRange& answer) {
    const TokenRange spans[1] = {answer};
    return supervised_loss(logits, seq, spans, nullptr);
}

double loss_and_gradients(const ModelParams& params, const TokenSequence& seq,
                          std::span<const TokenRange> supervised, const ForwardHooks& hooks,
                          const GradRequest& req, ModelParams* param_grads,
                          ScoreScalingGrad* scaling_grads, LoraGrads* lora_grads) {
    if (req.model_params && !param_grads) throw PreconditionError("loss_and_gradients: missing param sink");
    if (req.scaling && (!scaling_grads || !hooks.scaling)) {
        throw PreconditionError("loss_and_gradients: scaling gradients need an active scaling hook");
    }
    if (req.lora && (!lora_grads || !hooks.lora)) {
        throw PreconditionError("loss_and_gradients: lora gradients need lora weights");
    }
    Workspace ws;
    run_forward(params, seq, hooks, req.scaling, ws, nullptr);
    Tensor dlogits({seq.length(), params.config.vocab_size});
    const double loss = supervised_loss(ws.logits, seq, supervised, &dlogits);
    run_backward(params, seq, hooks, req, ws, dlogits, param_grads, scaling_grads, lora_grads);
    return loss;
}

DecodeResult greedy_decode(const ModelParams& params, const TokenSequence& prefix,
                           std::size_t max_new, const ForwardHooks& hooks,
                           AttentionTrace* final_trace, TokenSequence* final_seq) {
    if (prefix.length() == 0 || prefix.ids.back() != kTokAns) {
        throw PreconditionError("greedy_decode: prefix must end at the answer marker");
    }
    TokenSequence seq = prefix;
    DecodeResult out;
    for (std::size_t step = 0; step < max_new; ++step) {
        if (seq.length() >= params.config.max_seq) break;
        ForwardOptions opts;
        opts.hooks = hooks;
        opts.trace = final_trace;
        const Tensor logits = forward(params, seq, opts);
        const std::size_t row = seq.length() - 1;
        const double* z = logits.data() + row * params.config.vocab_size;
        int best = 0;
        for (std::size_t j = 1; j < params.config.vocab_size; ++j) {
            if (z[j] > z[best]) best = static_cast<int>(j);  // ties keep the lowest id
        }
        out.ids.push_back(best);
        const char c = token_char(best);
        if (c == '\0') break;  // EOS or another control token ends the answer
        out.text.push_back(c);
        seq.push_token(best, Modality::text);
    }
    if (final_seq) *final_seq = seq;
    return out;
}

std::pair<Tensor, Tensor> attention_head(const Tensor& q, const Tensor& k, const Tensor& v,
                                         const Tensor& mask,
                                         const std::function<Tensor(const Tensor&)>& scale_hook) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.cols() != k.cols() ||
        k.rows() != v.rows()) {
        throw ShapeError("attention_head: inconsistent q/k/v shapes " + shape_string(q.shape()) +
                         ", " + shape_string(k.shape()) + ", " + shape_string(v.shape()));
    }
    if (mask.rank() != 2 || mask.rows() != q.rows() || mask.cols() != k.rows()) {
        throw ShapeError("attention_head: mask shape " + shape_string(mask.shape()) +
                         " does not match scores");
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Tensor s({q.rows(), k.rows()});
    kernels::mm_bt_acc(s.data(), q.data(), k.data(), q.rows(), q.cols(), k.rows());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] *= inv;
    Tensor s_adj = scale_hook ? scale_hook(s) : s;
    if (!s_adj.same_shape(s)) {
        throw ShapeError("attention_head: hook returned shape " + shape_string(s_adj.shape()) +
                         ", expected " + shape_string(s.shape()));
    }
    Tensor masked = s_adj;
    for (std::size_t i = 0; i < masked.size(); ++i) masked[i] += mask[i];
    return {matmul(row_softmax(masked), v), std::move(s_adj)};
}

Tensor causal_mask(std::size_t n) {
    Tensor m({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) m(i, j) = -1e30;
    }
    return m;
}

}  // namespace micl
