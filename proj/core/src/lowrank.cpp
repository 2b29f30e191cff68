#include "micl/lowrank.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "micl/checkpoint.hpp"
#include "micl/linalg.hpp"

namespace micl {

namespace {

constexpr double kXRankTol = 1e-10;      // sigma_min/sigma_max below this -> rank deficient
constexpr double kRCondLimit = 1e6;

Tensor scores(const Tensor& x, const Tensor& w_q, const Tensor& w_k) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(w_q.cols()));
    Tensor q = matmul(x, w_q);
    Tensor k = matmul(x, w_k);
    Tensor s({q.rows(), k.rows()});
    kernels::mm_bt_acc(s.data(), q.data(), k.data(), q.rows(), q.cols(), k.rows());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] *= inv;
    return s;
}

}  // namespace

std::string EquivalenceReport::to_text() const {
    std::ostringstream os;
    os << "relative_error = " << relative_error << '\n';
    os << "x_condition = " << x_condition << '\n';
    os << "x_sigma_min = " << x_sigma_min << '\n';
    os << "r_condition = " << r_condition << '\n';
    os << "seq_len = " << seq_len << '\n';
    os << "d_in = " << d_in << '\n';
    os << "d = " << d << '\n';
    return os.str();
}

EquivalentUpdate construct_equivalent_update(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                             std::span<const double> f, const Tensor& r) {
    const std::size_t L = x.rows(), d_in = x.cols();
    if (f.size() != L) {
        throw PreconditionError("construct_equivalent_update: need one factor per sequence row");
    }
    if (L > d_in) {
        throw PreconditionError(
            "construct_equivalent_update: seq_len " + std::to_string(L) + " > d_in " +
            std::to_string(d_in) + "; x cannot have a right inverse, the identity is not exact");
    }
    const auto [x_max, x_min] = singular_extents(x);
    if (x_min <= kXRankTol * x_max) {
        throw PreconditionError("construct_equivalent_update: x is rank deficient (sigma_min=" +
                                std::to_string(x_min) + ", sigma_max=" + std::to_string(x_max) + ")");
    }
    const double r_cond = condition_number(r);
    if (!(r_cond <= kRCondLimit)) {
        throw PreconditionError("construct_equivalent_update: r condition number " +
                                std::to_string(r_cond) + " exceeds 1e6");
    }

    // wq' = wq . r
    Tensor wq_new = matmul(wq, r);
    // wk' = x+ . diag(f) . x . wk . r^{-T}
    Tensor fx = x;
    for (std::size_t i = 0; i < L; ++i) {
        double* row = fx.data() + i * d_in;
        for (std::size_t j = 0; j < d_in; ++j) row[j] *= f[i];
    }
    Tensor wk_new = matmul(matmul(pinv(x), fx), matmul(wk, transpose(pinv(r))));

    EquivalentUpdate out;
    out.delta_wq = sub(wq_new, wq);
    out.delta_wk = sub(wk_new, wk);
    out.wq_new = std::move(wq_new);
    out.wk_new = std::move(wk_new);
    return out;
}

EquivalenceReport verify_equivalence(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                     const Tensor& wq_new, const Tensor& wk_new,
                                     std::span<const double> f) {
    EquivalenceReport rep;
    rep.seq_len = x.rows();
    rep.d_in = x.cols();
    rep.d = wq.cols();

    Tensor s = scores(x, wq, wk);
    Tensor s_new = scores(x, wq_new, wk_new);
    // target: s . diag(f) scales column j by f[j]
    Tensor target = s;
    for (std::size_t i = 0; i < target.rows(); ++i) {
        double* row = target.data() + i * target.cols();
        for (std::size_t j = 0; j < target.cols(); ++j) row[j] *= f[j];
    }
    rep.relative_error =
        frobenius_norm(sub(s_new, target)) / std::max(1e-30, frobenius_norm(target));
    const auto [x_max, x_min] = singular_extents(x);
    rep.x_condition = x_min > 0.0 ? x_max / x_min : std::numeric_limits<double>::infinity();
    rep.x_sigma_min = x_min;
    rep.r_condition = 0.0;  // filled by callers that know r
    return rep;
}

LowRankUpdate factorize_update(const Tensor& delta, std::size_t r) {
    if (r < 1) throw PreconditionError("factorize_update: rank must be at least 1");
    if (r > std::min(delta.rows(), delta.cols())) {
        throw PreconditionError("factorize_update: rank " + std::to_string(r) +
                                " exceeds min extent of " + shape_string(delta.shape()));
    }
    const SvdResult s = svd(delta);
    LowRankUpdate out;
    out.a = Tensor({delta.rows(), r});
    out.b = Tensor({r, delta.cols()});
    for (std::size_t k = 0; k < r; ++k) {
        for (std::size_t i = 0; i < delta.rows(); ++i) out.a(i, k) = s.u(i, k) * s.sigma[k];
        for (std::size_t j = 0; j < delta.cols(); ++j) out.b(k, j) = s.v(j, k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// LoRA adapter
// ---------------------------------------------------------------------------

std::size_t LoraAdapter::total_entries() const {
    return weights.a_q.size() + weights.b_q.size() + weights.a_k.size() + weights.b_k.size();
}

std::size_t LoraAdapter::trainable_count() const {
    std::size_t n = 0;
    for (const auto* m : {&mask_aq, &mask_bq, &mask_ak, &mask_bk}) {
        for (auto v : *m) n += v;
    }
    return n;
}

std::uint64_t LoraAdapter::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const Tensor* t : {&weights.a_q, &weights.b_q, &weights.a_k, &weights.b_k}) {
        h = fnv1a(t->values(), h);
    }
    return h;
}

std::uint64_t LoraAdapter::frozen_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    const std::pair<const Tensor*, const std::vector<std::uint8_t>*> parts[] = {
        {&weights.a_q, &mask_aq}, {&weights.b_q, &mask_bq},
        {&weights.a_k, &mask_ak}, {&weights.b_k, &mask_bk}};
    for (const auto& [t, m] : parts) {
        for (std::size_t i = 0; i < t->size(); ++i) {
            if ((*m)[i]) continue;
            const double v = (*t)[i];
            h = fnv1a(&v, sizeof(v), h);
        }
    }
    return h;
}

LoraAdapter init_lora(const ModelConfig& cfg, const LoraInit& init) {
    if (init.rank < 1) throw PreconditionError("init_lora: rank must be at least 1");
    if (!(init.budget_fraction > 0.0 && init.budget_fraction <= 1.0)) {
        throw PreconditionError("init_lora: budget_fraction must lie in (0, 1]");
    }
    if (init.layer >= cfg.n_layers) throw PreconditionError("init_lora: layer out of range");
    const std::size_t d = cfg.d_model;
    LoraAdapter adapter;
    adapter.weights.layer = init.layer;
    adapter.weights.rank = init.rank;
    adapter.weights.alpha = init.alpha;
    adapter.weights.a_q = Tensor({d, init.rank});
    adapter.weights.b_q = Tensor({init.rank, d});
    adapter.weights.a_k = Tensor({d, init.rank});
    adapter.weights.b_k = Tensor({init.rank, d});

    Rng rng = Rng::stream(init.seed, 0x10ad);
    const double std_a = 1.0 / std::sqrt(static_cast<double>(init.rank));
    for (auto* t : {&adapter.weights.a_q, &adapter.weights.a_k}) {
        for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * std_a;
    }
    // b stays zero: the additive update starts at exactly zero

    const std::size_t total = adapter.total_entries();
    auto budget = static_cast<std::size_t>(std::llround(init.budget_fraction * static_cast<double>(total)));
    if (budget == 0) {
        throw PreconditionError("init_lora: budget_fraction " + std::to_string(init.budget_fraction) +
                                " leaves zero trainable entries");
    }
    budget = std::min(budget, total);
    // exact-count mask: seeded permutation of all entries, first `budget` train
    std::vector<std::uint8_t> flat(total, 0);
    Rng mask_rng = Rng::stream(init.seed, 0x5a5c);
    const auto perm = mask_rng.permutation(total);
    for (std::size_t i = 0; i < budget; ++i) flat[perm[i]] = 1;

    std::size_t cursor = 0;
    for (auto* m : {&adapter.mask_aq, &adapter.mask_bq, &adapter.mask_ak, &adapter.mask_bk}) {
        const std::size_t n =
            m == &adapter.mask_aq   ? adapter.weights.a_q.size()
            : m == &adapter.mask_bq ? adapter.weights.b_q.size()
            : m == &adapter.mask_ak ? adapter.weights.a_k.size()
                                    : adapter.weights.b_k.size();
        m->assign(flat.begin() + static_cast<std::ptrdiff_t>(cursor),
                  flat.begin() + static_cast<std::ptrdiff_t>(cursor + n));
        cursor += n;
    }
    return adapter;
}

void save_lora(const std::filesystem::path& path, const LoraAdapter& adapter) {
    Tensor meta({4});
    meta[0] = static_cast<double>(adapter.weights.layer);
    meta[1] = static_cast<double>(adapter.weights.rank);
    meta[2] = adapter.weights.alpha;
    meta[3] = static_cast<double>(adapter.trainable_count());
    auto mask_tensor = [](const std::vector<std::uint8_t>& m) {
        Tensor t({m.size()});
        for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i];
        return t;
    };
    const Tensor maq = mask_tensor(adapter.mask_aq), mbq = mask_tensor(adapter.mask_bq);
    const Tensor mak = mask_tensor(adapter.mask_ak), mbk = mask_tensor(adapter.mask_bk);
    write_tensor_file(path, {{"lora/meta", &meta},
                             {"lora/a_q", &adapter.weights.a_q},
                             {"lora/b_q", &adapter.weights.b_q},
                             {"lora/a_k", &adapter.weights.a_k},
                             {"lora/b_k", &adapter.weights.b_k},
                             {"lora/mask_a_q", &maq},
                             {"lora/mask_b_q", &mbq},
                             {"lora/mask_a_k", &mak},
                             {"lora/mask_b_k", &mbk}});
}

LoraAdapter load_lora(const std::filesystem::path& path) {
    auto tensors = read_tensor_file(path);
    LoraAdapter adapter;
    auto to_mask = [](const Tensor& t) {
        std::vector<std::uint8_t> m(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) m[i] = t[i] != 0.0;
        return m;
    };
    for (auto& [name, t] : tensors) {
        if (name == "lora/meta") {
            adapter.weights.layer = static_cast<std::size_t>(t[0]);
            adapter.weights.rank = static_cast<std::size_t>(t[1]);
            adapter.weights.alpha = t[2];
        } else if (name == "lora/a_q") adapter.weights.a_q = std::move(t);
        else if (name == "lora/b_q") adapter.weights.b_q = std::move(t);
        else if (name == "lora/a_k") adapter.weights.a_k = std::move(t);
        else if (name == "lora/b_k") adapter.weights.b_k = std::move(t);
        else if (name == "lora/mask_a_q") adapter.mask_aq = to_mask(t);
        else if (name == "lora/mask_b_q") adapter.mask_bq = to_mask(t);
        else if (name == "lora/mask_a_k") adapter.mask_ak = to_mask(t);
        else if (name == "lora/mask_b_k") adapter.mask_bk = to_mask(t);
    }
    if (adapter.weights.rank == 0 || adapter.weights.a_q.size() == 0) {
        throw ConfigError("load_lora: incomplete adapter checkpoint " + path.string());
    }
    return adapter;
}

}  // namespace micl
