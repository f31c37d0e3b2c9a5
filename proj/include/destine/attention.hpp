#pragma once

// One disentangled self-attention interaction layer over the M field
// embeddings of a single sample.
//
// Per head, field embeddings are projected to queries, keys, an extra set of
// unary queries and values. Pairwise scores whiten queries and keys by
// subtracting their across-field means before the dot product; unary scores
// rate each key against the mean unary query. The two softmaxed terms are
// combined per variant, heads aggregate values, and a residual projection of
// the raw embeddings plus ReLU closes the layer.
//
// The backward pass is exact reverse-mode differentiation, including the
// softmax Jacobians and the coupling through the mean vectors (each field's
// projection contributes to every mean).

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "destine/errors.hpp"
#include "destine/numerics.hpp"

namespace destine {

enum class AttentionVariant { full, pairwise_only, unary_only, multiplicative, shared_query };

inline std::string to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::full: return "full";
        case AttentionVariant::pairwise_only: return "pairwise_only";
        case AttentionVariant::unary_only: return "unary_only";
        case AttentionVariant::multiplicative: return "multiplicative";
        case AttentionVariant::shared_query: return "shared_query";
    }
    return "full";
}

inline AttentionVariant attention_variant_from_string(const std::string& s) {
    if (s == "full") return AttentionVariant::full;
    if (s == "pairwise_only") return AttentionVariant::pairwise_only;
    if (s == "unary_only") return AttentionVariant::unary_only;
    if (s == "multiplicative") return AttentionVariant::multiplicative;
    if (s == "shared_query") return AttentionVariant::shared_query;
    throw DomainError("unknown attention variant '" + s + "'");
}

struct HeadParams {
    Matrix w_q;        // [head_dim x input_dim]
    Matrix w_k;        // [head_dim x input_dim]
    Matrix w_q_prime;  // [head_dim x input_dim], unary query projection
    Matrix w_v;        // [head_dim x input_dim]
};

struct LayerParams {
    std::vector<HeadParams> heads;
    Matrix w_r;  // [head_dim*H x input_dim], residual projection

    std::size_t num_heads() const { return heads.size(); }
};

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch", {a.rows(), a.cols()},
                         {b.rows(), b.cols()});
    }
}

// rows of projected = rows of e times w^T (each row m is w * e_m).
inline Matrix project(const Matrix& e, const Matrix& w) {
    if (w.cols() != e.cols()) {
        throw ShapeError("projection input width mismatch", {w.rows(), w.cols()},
                         {e.rows(), e.cols()});
    }
    Matrix out(e.rows(), w.rows());
    for (std::size_t m = 0; m < e.rows(); ++m) {
        for (std::size_t r = 0; r < w.rows(); ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < w.cols(); ++c) acc += w(r, c) * e(m, c);
            out(m, r) = acc;
        }
    }
    return out;
}

inline Matrix center_rows(const Matrix& a, const std::vector<double>& mean) {
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) - mean[j];
    return out;
}

// Backward of row-wise softmax: given p = softmax(s) and dL/dp, return dL/ds.
inline std::vector<double> softmax_backward(std::span<const double> p,
                                            std::span<const double> dp) {
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * dp[i];
    std::vector<double> ds(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) ds[i] = p[i] * (dp[i] - dot);
    return ds;
}

// Backward of per-row mean-centering: centering a row subtracts the mean of
// all rows, so each row's gradient loses the column-mean of all row gradients.
inline Matrix center_rows_backward(const Matrix& d_centered) {
    const auto mean = column_means(d_centered);
    return center_rows(d_centered, mean);
}

}  // namespace detail

// Row-stochastic pairwise attention: raw score of query field m against key
// field n is the dot product of the mean-centered projections, softmaxed per
// row. q and k are the already-projected [M x head_dim] matrices.
inline Matrix pairwise_scores(const Matrix& q, const Matrix& k, bool scale_scores = false) {
    detail::require_same_shape(q, k, "pairwise_scores");
    const auto mu_q = column_means(q);
    const auto mu_k = column_means(k);
    const double scale = scale_scores ? 1.0 / std::sqrt(static_cast<double>(q.cols())) : 1.0;

    const std::size_t m_fields = q.rows();
    Matrix scores(m_fields, m_fields);
    std::vector<double> raw(m_fields);
    for (std::size_t m = 0; m < m_fields; ++m) {
        for (std::size_t n = 0; n < m_fields; ++n) {
            double acc = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) {
                acc += (q(m, c) - mu_q[c]) * (k(n, c) - mu_k[c]);
            }
            raw[n] = scale * acc;
        }
        const auto row = softmax(raw);
        for (std::size_t n = 0; n < m_fields; ++n) scores(m, n) = row[n];
    }
    return scores;
}

// Softmax over keys of (mean unary query) . k_n. The same distribution serves
// every query row, which is what makes the term unary.
inline std::vector<double> unary_scores(const Matrix& q_prime, const Matrix& k,
                                        bool scale_scores = false) {
    detail::require_same_shape(q_prime, k, "unary_scores");
    const auto mu = column_means(q_prime);
    const double scale = scale_scores ? 1.0 / std::sqrt(static_cast<double>(k.cols())) : 1.0;
    std::vector<double> raw(k.rows());
    for (std::size_t n = 0; n < k.rows(); ++n) {
        double acc = 0.0;
        for (std::size_t c = 0; c < k.cols(); ++c) acc += mu[c] * k(n, c);
        raw[n] = scale * acc;
    }
    return softmax(raw);
}

// Combined attention map. `shared_q_mean_scores` is the softmax of
// (mean query) . k_n computed from w_q, required by the shared_query variant.
inline Matrix combine_scores(const Matrix& p, const std::vector<double>& u,
                             AttentionVariant variant,
                             const std::vector<double>* shared_q_mean_scores = nullptr) {
    const std::size_t m_fields = p.rows();
    if (p.cols() != m_fields || u.size() != m_fields) {
        throw ShapeError("combine_scores: p must be MxM and u length M",
                         {p.rows(), p.cols()}, {u.size(), 1});
    }
    Matrix a(m_fields, m_fields);
    switch (variant) {
        case AttentionVariant::full:
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t n = 0; n < m_fields; ++n) a(m, n) = p(m, n) + u[n];
            break;
        case AttentionVariant::pairwise_only:
            a = p;
            break;
        case AttentionVariant::unary_only:
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t n = 0; n < m_fields; ++n) a(m, n) = u[n];
            break;
        case AttentionVariant::multiplicative:
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t n = 0; n < m_fields; ++n) a(m, n) = p(m, n) * u[n];
            break;
        case AttentionVariant::shared_query:
            if (shared_q_mean_scores == nullptr || shared_q_mean_scores->size() != m_fields) {
                throw DomainError("shared_query variant needs shared query mean scores");
            }
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t n = 0; n < m_fields; ++n)
                    a(m, n) = p(m, n) + (*shared_q_mean_scores)[n];
            break;
    }
    return a;
}

struct HeadCache {
    Matrix q, k, q_prime, v;       // [M x head_dim] projections
    Matrix pairwise;               // [M x M] softmaxed pairwise term
    std::vector<double> unary;     // length M; empty when the variant skips it
    std::vector<double> shared;    // shared_query only: softmax((mean q) . k_n)
    Matrix combined;               // [M x M] final attention map
};

struct LayerCache {
    Matrix input;                  // [M x input_dim]
    std::vector<HeadCache> heads;
    Matrix preact;                 // [M x head_dim*H], before ReLU
    AttentionVariant variant = AttentionVariant::full;
    bool scale_scores = false;
};

inline bool variant_uses_unary(AttentionVariant v) {
    return v == AttentionVariant::full || v == AttentionVariant::unary_only ||
           v == AttentionVariant::multiplicative;
}

// z_m = sum_k combined(m, k) * v_k for one head.
inline std::pair<Matrix, HeadCache> head_forward(const Matrix& e, const HeadParams& head,
                                                 AttentionVariant variant,
                                                 bool scale_scores = false) {
    HeadCache cache;
    cache.q = detail::project(e, head.w_q);
    cache.k = detail::project(e, head.w_k);
    cache.q_prime = detail::project(e, head.w_q_prime);
    cache.v = detail::project(e, head.w_v);

    cache.pairwise = pairwise_scores(cache.q, cache.k, scale_scores);
    if (variant_uses_unary(variant)) {
        cache.unary = unary_scores(cache.q_prime, cache.k, scale_scores);
    }
    if (variant == AttentionVariant::shared_query) {
        // Same formula as the unary term but driven by w_q's mean.
        cache.shared = unary_scores(cache.q, cache.k, scale_scores);
    }
    const std::vector<double> no_unary(e.rows(), 0.0);
    cache.combined = combine_scores(
        cache.pairwise, cache.unary.empty() ? no_unary : cache.unary, variant,
        cache.shared.empty() ? nullptr : &cache.shared);

    Matrix z = matmul(cache.combined, cache.v);
    return {std::move(z), std::move(cache)};
}

// Concatenate head outputs (head index order), add the residual projection of
// the raw input and apply ReLU.
inline std::pair<Matrix, LayerCache> layer_forward(const Matrix& e, const LayerParams& layer,
                                                   AttentionVariant variant,
                                                   bool scale_scores = false) {
    if (layer.heads.empty()) throw DomainError("layer needs at least one head");
    const std::size_t head_dim = layer.heads.front().w_q.rows();
    const std::size_t out_dim = head_dim * layer.heads.size();
    if (layer.w_r.rows() != out_dim || layer.w_r.cols() != e.cols()) {
        throw ShapeError("residual projection shape mismatch",
                         {layer.w_r.rows(), layer.w_r.cols()}, {out_dim, e.cols()});
    }

    LayerCache cache;
    cache.input = e;
    cache.variant = variant;
    cache.scale_scores = scale_scores;
    cache.preact = detail::project(e, layer.w_r);

    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        auto [z, head_cache] = head_forward(e, layer.heads[h], variant, scale_scores);
        for (std::size_t m = 0; m < e.rows(); ++m)
            for (std::size_t c = 0; c < head_dim; ++c)
                cache.preact(m, h * head_dim + c) += z(m, c);
        cache.heads.push_back(std::move(head_cache));
    }

    Matrix out(e.rows(), out_dim);
    for (std::size_t m = 0; m < e.rows(); ++m)
        for (std::size_t c = 0; c < out_dim; ++c) out(m, c) = relu(cache.preact(m, c));
    return {std::move(out), std::move(cache)};
}

inline LayerParams zeros_like(const LayerParams& layer) {
    LayerParams grads;
    grads.heads.reserve(layer.heads.size());
    for (const auto& head : layer.heads) {
        grads.heads.push_back(HeadParams{
            Matrix(head.w_q.rows(), head.w_q.cols()),
            Matrix(head.w_k.rows(), head.w_k.cols()),
            Matrix(head.w_q_prime.rows(), head.w_q_prime.cols()),
            Matrix(head.w_v.rows(), head.w_v.cols()),
        });
    }
    grads.w_r = Matrix(layer.w_r.rows(), layer.w_r.cols());
    return grads;
}

struct LayerBackwardResult {
    Matrix d_input;        // gradient wrt the layer input embeddings
    LayerParams d_params;  // structure-mirrored parameter gradients
};

namespace detail {

// dW += d_proj^T * e and d_e += d_proj * w for proj = e * w^T.
inline void project_backward(const Matrix& e, const Matrix& w, const Matrix& d_proj,
                             Matrix& d_w, Matrix& d_e) {
    for (std::size_t m = 0; m < e.rows(); ++m) {
        for (std::size_t r = 0; r < w.rows(); ++r) {
            const double g = d_proj(m, r);
            if (g == 0.0) continue;
            for (std::size_t c = 0; c < w.cols(); ++c) {
                d_w(r, c) += g * e(m, c);
                d_e(m, c) += g * w(r, c);
            }
        }
    }
}

// Backward of the softmaxed unary-style score vector u = softmax(mean . k_n)
// given d_u. Accumulates into the mean's source projection and the keys.
inline void unary_backward(const std::vector<double>& u, const std::vector<double>& d_u,
                           const Matrix& k, const std::vector<double>& mean_vec,
                           double scale, Matrix& d_mean_proj, Matrix& d_k) {
    const auto d_raw = softmax_backward(u, d_u);
    const std::size_t m_fields = k.rows();
    const std::size_t dim = k.cols();
    std::vector<double> d_mean(dim, 0.0);
    for (std::size_t n = 0; n < m_fields; ++n) {
        const double g = scale * d_raw[n];
        for (std::size_t c = 0; c < dim; ++c) {
            d_mean[c] += g * k(n, c);
            d_k(n, c) += g * mean_vec[c];
        }
    }
    // The mean is the average over rows of the source projection.
    const double inv_m = 1.0 / static_cast<double>(m_fields);
    for (std::size_t m = 0; m < m_fields; ++m)
        for (std::size_t c = 0; c < dim; ++c) d_mean_proj(m, c) += inv_m * d_mean[c];
}

}  // namespace detail

// Exact gradients of layer_forward with respect to the input and every layer
// parameter, given the gradient of the loss with respect to the layer output.
inline LayerBackwardResult layer_backward(const LayerCache& cache, const LayerParams& layer,
                                          const Matrix& d_output) {
    if (!d_output.same_shape(cache.preact)) {
        throw ShapeError("layer_backward: upstream gradient shape mismatch",
                         {d_output.rows(), d_output.cols()},
                         {cache.preact.rows(), cache.preact.cols()});
    }
    if (cache.heads.size() != layer.heads.size()) {
        throw ShapeError("layer_backward: cache does not match layer",
                         {cache.heads.size(), 0}, {layer.heads.size(), 0});
    }

    const Matrix& e = cache.input;
    const std::size_t m_fields = e.rows();
    const std::size_t head_dim = layer.heads.front().w_q.rows();
    const double scale =
        cache.scale_scores ? 1.0 / std::sqrt(static_cast<double>(head_dim)) : 1.0;

    LayerBackwardResult result;
    result.d_input = Matrix(e.rows(), e.cols());
    result.d_params = zeros_like(layer);

    // ReLU gate.
    Matrix d_preact(d_output.rows(), d_output.cols());
    for (std::size_t m = 0; m < d_output.rows(); ++m)
        for (std::size_t c = 0; c < d_output.cols(); ++c)
            d_preact(m, c) = cache.preact(m, c) > 0.0 ? d_output(m, c) : 0.0;

    // Residual projection.
    detail::project_backward(e, layer.w_r, d_preact, result.d_params.w_r, result.d_input);

    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
        const HeadCache& hc = cache.heads[h];
        const HeadParams& hp = layer.heads[h];
        HeadParams& hg = result.d_params.heads[h];

        // Slice this head's block of the upstream gradient: d z_h.
        Matrix d_z(m_fields, head_dim);
        for (std::size_t m = 0; m < m_fields; ++m)
            for (std::size_t c = 0; c < head_dim; ++c)
                d_z(m, c) = d_preact(m, h * head_dim + c);

        // z = A v  =>  dA = d_z v^T, dv = A^T d_z.
        Matrix d_combined = matmul(d_z, transpose(hc.v));
        Matrix d_v = matmul(transpose(hc.combined), d_z);

        // Split dA onto the pairwise map and the unary/shared vector.
        Matrix d_pairwise(m_fields, m_fields);
        std::vector<double> d_u(m_fields, 0.0);
        bool unary_used = false;
        bool shared_used = false;
        switch (cache.variant) {
            case AttentionVariant::full:
                d_pairwise = d_combined;
                for (std::size_t m = 0; m < m_fields; ++m)
                    for (std::size_t n = 0; n < m_fields; ++n) d_u[n] += d_combined(m, n);
                unary_used = true;
                break;
            case AttentionVariant::pairwise_only:
                d_pairwise = d_combined;
                break;
            case AttentionVariant::unary_only:
                for (std::size_t m = 0; m < m_fields; ++m)
                    for (std::size_t n = 0; n < m_fields; ++n) d_u[n] += d_combined(m, n);
                unary_used = true;
                break;
            case AttentionVariant::multiplicative:
                for (std::size_t m = 0; m < m_fields; ++m) {
                    for (std::size_t n = 0; n < m_fields; ++n) {
                        d_pairwise(m, n) = d_combined(m, n) * hc.unary[n];
                        d_u[n] += d_combined(m, n) * hc.pairwise(m, n);
                    }
                }
                unary_used = true;
                break;
            case AttentionVariant::shared_query:
                d_pairwise = d_combined;
                for (std::size_t m = 0; m < m_fields; ++m)
                    for (std::size_t n = 0; n < m_fields; ++n) d_u[n] += d_combined(m, n);
                shared_used = true;
                break;
        }

        Matrix d_q(m_fields, head_dim);
        Matrix d_k(m_fields, head_dim);
        Matrix d_q_prime(m_fields, head_dim);

        // Pairwise path unless the variant dropped it.
        if (cache.variant != AttentionVariant::unary_only) {
            const auto mu_q = column_means(hc.q);
            const auto mu_k = column_means(hc.k);
            const Matrix q_centered = detail::center_rows(hc.q, mu_q);
            const Matrix k_centered = detail::center_rows(hc.k, mu_k);

            Matrix d_q_centered(m_fields, head_dim);
            Matrix d_k_centered(m_fields, head_dim);
            for (std::size_t m = 0; m < m_fields; ++m) {
                std::vector<double> d_p_row(m_fields);
                for (std::size_t n = 0; n < m_fields; ++n) d_p_row[n] = d_pairwise(m, n);
                const auto d_raw = detail::softmax_backward(hc.pairwise.row(m), d_p_row);
                for (std::size_t n = 0; n < m_fields; ++n) {
                    const double g = scale * d_raw[n];
                    if (g == 0.0) continue;
                    for (std::size_t c = 0; c < head_dim; ++c) {
                        d_q_centered(m, c) += g * k_centered(n, c);
                        d_k_centered(n, c) += g * q_centered(m, c);
                    }
                }
            }
            d_q += detail::center_rows_backward(d_q_centered);
            d_k += detail::center_rows_backward(d_k_centered);
        }

        if (unary_used) {
            const auto mu_q_prime = column_means(hc.q_prime);
            detail::unary_backward(hc.unary, d_u, hc.k, mu_q_prime, scale, d_q_prime, d_k);
        }
        if (shared_used) {
            const auto mu_q = column_means(hc.q);
            detail::unary_backward(hc.shared, d_u, hc.k, mu_q, scale, d_q, d_k);
        }

        detail::project_backward(e, hp.w_q, d_q, hg.w_q, result.d_input);
        detail::project_backward(e, hp.w_k, d_k, hg.w_k, result.d_input);
        detail::project_backward(e, hp.w_q_prime, d_q_prime, hg.w_q_prime, result.d_input);
        detail::project_backward(e, hp.w_v, d_v, hg.w_v, result.d_input);
    }

    return result;
}

}  // namespace destine
