#pragma once

// End-to-end network: embedding lookup, stacked disentangled self-attention
// layers, an optional DNN branch with batch normalization, and a logistic
// output head trained with binary cross-entropy plus L2.
//
// Forward and backward are written out by hand; `training::grad_check`
// verifies every parameter gradient against central finite differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "destine/attention.hpp"
#include "destine/errors.hpp"
#include "destine/features.hpp"
#include "destine/numerics.hpp"

namespace destine {

enum class Mode { train, eval };

struct ModelConfig {
    std::size_t num_fields = 0;      // M, derived from the data schema
    std::size_t embed_dim = 64;      // d
    std::size_t head_dim = 32;       // d'
    std::size_t num_heads = 2;       // H
    std::size_t num_layers = 3;      // L; 0 degenerates to a first-order model
    AttentionVariant variant = AttentionVariant::full;
    bool scale_scores = false;       // divide raw attention scores by sqrt(head_dim)
    double dropout_rate = 0.2;       // applied to each interaction layer output
    bool use_dnn = false;
    std::vector<std::size_t> dnn_widths = {400, 400};
    double l2_weight = 5e-4;
    std::size_t total_features = 0;  // embedding rows, derived from the vocabulary

    // Width of one field's representation after the interaction stack.
    std::size_t stack_out_dim() const {
        return num_layers == 0 ? embed_dim : head_dim * num_heads;
    }

    // Width of one field's representation entering the output head.
    std::size_t rep_dim() const {
        return use_dnn ? head_dim * num_heads : stack_out_dim();
    }

    std::size_t layer_input_dim(std::size_t layer) const {
        return layer == 0 ? embed_dim : head_dim * num_heads;
    }

    std::size_t dnn_out_width() const { return num_fields * head_dim * num_heads; }

    void validate() const {
        if (num_fields < 1) throw ConfigError("model.num_fields", "must be >= 1");
        if (embed_dim < 1) throw ConfigError("model.embed_dim", "must be >= 1");
        if (head_dim < 1) throw ConfigError("model.head_dim", "must be >= 1");
        if (num_heads < 1) throw ConfigError("model.num_heads", "must be >= 1");
        if (total_features < 1) throw ConfigError("model.total_features", "must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
            throw ConfigError("model.dropout_rate", "must lie in [0, 1)");
        }
        if (l2_weight < 0.0) throw ConfigError("model.l2_weight", "must be >= 0");
        if (use_dnn) {
            if (dnn_widths.empty()) {
                throw ConfigError("model.dnn_widths", "must be nonempty when use_dnn is set");
            }
            for (std::size_t w : dnn_widths) {
                if (w < 1) throw ConfigError("model.dnn_widths", "widths must be >= 1");
            }
        }
    }
};

// Hidden DNN block: linear map into batch norm. The linear map carries no
// bias; a bias in front of batch normalization cancels against the batch mean
// and would sit in the model as a parameter with an identically zero gradient
// (beta provides the shift instead).
struct DnnBlockParams {
    Matrix weight;                     // [width x prev_width]
    std::vector<double> gamma;         // batch-norm scale
    std::vector<double> beta;          // batch-norm shift
    std::vector<double> running_mean;  // inference statistics, not trained
    std::vector<double> running_var;
};

struct DnnParams {
    std::vector<DnnBlockParams> blocks;
    Matrix out_w;                // [num_fields*head_dim*H x last_width]
    std::vector<double> out_b;   // [num_fields*head_dim*H]
    Matrix merge;                // [head_dim*H x (stack_out_dim + head_dim*H)]
};

struct ModelParams {
    Matrix embedding;                  // [total_features x embed_dim]
    std::vector<LayerParams> layers;
    std::vector<double> out_w;         // [num_fields * rep_dim]
    double out_b = 0.0;
    std::optional<DnnParams> dnn;
};

// Gradients mirror the parameter structure tensor-for-tensor.
using GradientSet = ModelParams;

constexpr double kBatchNormEpsilon = 1e-5;
constexpr double kBatchNormMomentum = 0.9;
constexpr double kScoreClamp = 1e-12;

// ---------------------------------------------------------------------------
// Parameter tensor enumeration. Order is fixed; checkpoints, Adam state and
// the parameter accounting all walk tensors through this single path.
// ---------------------------------------------------------------------------

struct TensorView {
    std::string name;
    double* data = nullptr;
    std::size_t size = 0;
    std::vector<std::size_t> shape;
    bool decay = false;  // participates in the L2 penalty
};

namespace detail {

template <class Params>
void collect_param_views(Params& p, std::vector<TensorView>& out) {
    auto add_matrix = [&](const std::string& name, auto& m, bool decay) {
        out.push_back({name, const_cast<double*>(m.data().data()), m.size(),
                       {m.rows(), m.cols()}, decay});
    };
    auto add_vector = [&](const std::string& name, auto& v, bool decay) {
        out.push_back({name, const_cast<double*>(v.data()), v.size(), {v.size()}, decay});
    };

    add_matrix("embedding", p.embedding, true);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string base = "layers." + std::to_string(l);
        for (std::size_t h = 0; h < p.layers[l].heads.size(); ++h) {
            const std::string hb = base + ".heads." + std::to_string(h);
            add_matrix(hb + ".w_q", p.layers[l].heads[h].w_q, true);
            add_matrix(hb + ".w_k", p.layers[l].heads[h].w_k, true);
            add_matrix(hb + ".w_q_prime", p.layers[l].heads[h].w_q_prime, true);
            add_matrix(hb + ".w_v", p.layers[l].heads[h].w_v, true);
        }
        add_matrix(base + ".w_r", p.layers[l].w_r, true);
    }
    add_vector("out_w", p.out_w, true);
    out.push_back({"out_b", const_cast<double*>(&p.out_b), 1, {1}, false});
    if (p.dnn.has_value()) {
        auto& dnn = *p.dnn;
        for (std::size_t b = 0; b < dnn.blocks.size(); ++b) {
            const std::string bb = "dnn.blocks." + std::to_string(b);
            add_matrix(bb + ".weight", dnn.blocks[b].weight, true);
            add_vector(bb + ".gamma", dnn.blocks[b].gamma, false);
            add_vector(bb + ".beta", dnn.blocks[b].beta, false);
        }
        add_matrix("dnn.out_w", dnn.out_w, true);
        add_vector("dnn.out_b", dnn.out_b, false);
        add_matrix("dnn.merge", dnn.merge, true);
    }
}

template <class Params>
void collect_state_views(Params& p, std::vector<TensorView>& out) {
    if (!p.dnn.has_value()) return;
    auto& dnn = *p.dnn;
    for (std::size_t b = 0; b < dnn.blocks.size(); ++b) {
        const std::string bb = "dnn.blocks." + std::to_string(b);
        out.push_back({bb + ".running_mean", const_cast<double*>(dnn.blocks[b].running_mean.data()),
                       dnn.blocks[b].running_mean.size(), {dnn.blocks[b].running_mean.size()}, false});
        out.push_back({bb + ".running_var", const_cast<double*>(dnn.blocks[b].running_var.data()),
                       dnn.blocks[b].running_var.size(), {dnn.blocks[b].running_var.size()}, false});
    }
}

}  // namespace detail

// Trainable tensors in a fixed order. Views into `p`; do not outlive it.
inline std::vector<TensorView> param_views(ModelParams& p) {
    std::vector<TensorView> out;
    detail::collect_param_views(p, out);
    return out;
}

inline std::vector<TensorView> param_views(const ModelParams& p) {
    std::vector<TensorView> out;
    detail::collect_param_views(p, out);  // views are read-only by convention
    return out;
}

// Non-trainable state (batch-norm running statistics).
inline std::vector<TensorView> state_views(ModelParams& p) {
    std::vector<TensorView> out;
    detail::collect_state_views(p, out);
    return out;
}

inline std::vector<TensorView> state_views(const ModelParams& p) {
    std::vector<TensorView> out;
    detail::collect_state_views(p, out);
    return out;
}

inline GradientSet zeros_like(const ModelParams& p) {
    GradientSet g;
    g.embedding = Matrix(p.embedding.rows(), p.embedding.cols());
    g.layers.reserve(p.layers.size());
    for (const auto& layer : p.layers) g.layers.push_back(zeros_like(layer));
    g.out_w.assign(p.out_w.size(), 0.0);
    g.out_b = 0.0;
    if (p.dnn.has_value()) {
        DnnParams d;
        for (const auto& block : p.dnn->blocks) {
            DnnBlockParams b;
            b.weight = Matrix(block.weight.rows(), block.weight.cols());
            b.gamma.assign(block.gamma.size(), 0.0);
            b.beta.assign(block.beta.size(), 0.0);
            b.running_mean.assign(block.running_mean.size(), 0.0);
            b.running_var.assign(block.running_var.size(), 0.0);
            d.blocks.push_back(std::move(b));
        }
        d.out_w = Matrix(p.dnn->out_w.rows(), p.dnn->out_w.cols());
        d.out_b.assign(p.dnn->out_b.size(), 0.0);
        d.merge = Matrix(p.dnn->merge.rows(), p.dnn->merge.cols());
        g.dnn = std::move(d);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix xavier_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                             std::size_t fan_out, SeededRng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.uniform(-bound, bound);
    return m;
}

}  // namespace detail

// Projection matrices are fan-balanced uniform, embeddings small normal,
// biases and batch-norm shifts zero, batch-norm scales one. Deterministic
// given the rng seed; draw order follows the tensor enumeration order.
inline ModelParams init_params(const ModelConfig& config, SeededRng& rng) {
    config.validate();
    ModelParams p;

    p.embedding = Matrix(config.total_features, config.embed_dim);
    for (double& v : p.embedding.data()) v = rng.normal(0.0, 0.01);

    const std::size_t head_dim = config.head_dim;
    const std::size_t concat_dim = config.head_dim * config.num_heads;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const std::size_t in_dim = config.layer_input_dim(l);
        LayerParams layer;
        for (std::size_t h = 0; h < config.num_heads; ++h) {
            HeadParams head;
            head.w_q = detail::xavier_uniform(head_dim, in_dim, in_dim, head_dim, rng);
            head.w_k = detail::xavier_uniform(head_dim, in_dim, in_dim, head_dim, rng);
            head.w_q_prime = detail::xavier_uniform(head_dim, in_dim, in_dim, head_dim, rng);
            head.w_v = detail::xavier_uniform(head_dim, in_dim, in_dim, head_dim, rng);
            layer.heads.push_back(std::move(head));
        }
        layer.w_r = detail::xavier_uniform(concat_dim, in_dim, in_dim, concat_dim, rng);
        p.layers.push_back(std::move(layer));
    }

    const std::size_t head_in = config.num_fields * config.rep_dim();
    {
        const double bound = std::sqrt(6.0 / static_cast<double>(head_in + 1));
        p.out_w.resize(head_in);
        for (double& v : p.out_w) v = rng.uniform(-bound, bound);
    }
    p.out_b = 0.0;

    if (config.use_dnn) {
        DnnParams dnn;
        std::size_t prev = config.num_fields * config.embed_dim;
        for (std::size_t width : config.dnn_widths) {
            DnnBlockParams block;
            block.weight = detail::xavier_uniform(width, prev, prev, width, rng);
            block.gamma.assign(width, 1.0);
            block.beta.assign(width, 0.0);
            block.running_mean.assign(width, 0.0);
            block.running_var.assign(width, 1.0);
            dnn.blocks.push_back(std::move(block));
            prev = width;
        }
        const std::size_t out_width = config.dnn_out_width();
        dnn.out_w = detail::xavier_uniform(out_width, prev, prev, out_width, rng);
        dnn.out_b.assign(out_width, 0.0);
        const std::size_t merge_in = config.stack_out_dim() + concat_dim;
        dnn.merge = detail::xavier_uniform(concat_dim, merge_in, merge_in, concat_dim, rng);
        p.dnn = std::move(dnn);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

// Row m of the result is the embedding-table row for the sample's m-th field.
inline Matrix embed(const EncodedSample& sample, const Matrix& embedding) {
    Matrix e(sample.indices.size(), embedding.cols());
    for (std::size_t m = 0; m < sample.indices.size(); ++m) {
        const std::size_t idx = sample.indices[m];
        if (idx >= embedding.rows()) {
            throw IndexError("feature index " + std::to_string(idx) + " of field " +
                             std::to_string(m) + " exceeds embedding table");
        }
        for (std::size_t c = 0; c < embedding.cols(); ++c) e(m, c) = embedding(idx, c);
    }
    return e;
}

struct SampleCache {
    Matrix embedded;                    // M x d
    std::vector<LayerCache> layers;
    std::vector<Matrix> dropout_masks;  // per layer; empty matrix when not applied
    Matrix base;                        // field representations after the stack
};

struct DnnBlockCache {
    Matrix input;               // batch x prev_width
    Matrix affine;              // batch x width, before normalization
    std::vector<double> mean;   // batch statistics used for normalization
    std::vector<double> var;
    Matrix normalized;          // x_hat
    Matrix activated;           // relu(gamma*x_hat + beta)
};

struct DnnCache {
    Matrix x0;                       // batch x (M*d) flattened embeddings
    std::vector<DnnBlockCache> blocks;
    Matrix out;                      // batch x (M*head_dim*H)
};

struct BatchCache {
    Mode mode = Mode::eval;
    std::vector<SampleCache> samples;
    std::optional<DnnCache> dnn;
    std::vector<Matrix> field_reps;  // per sample, M x rep_dim, feeds the head
    std::vector<double> scores;
};

namespace detail {

// y = x * w^T + bias, rows are batch entries.
inline Matrix affine_forward(const Matrix& x, const Matrix& w,
                             const std::vector<double>& bias) {
    Matrix y = matmul(x, transpose(w));
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += bias[j];
    return y;
}

inline void batchnorm_forward(const Matrix& x, DnnBlockParams& block, Mode mode,
                              DnnBlockCache& cache) {
    const std::size_t batch = x.rows();
    const std::size_t width = x.cols();
    cache.normalized = Matrix(batch, width);

    if (mode == Mode::train) {
        if (batch < 2) {
            throw DomainError("batch normalization needs batch size >= 2 in train mode");
        }
        cache.mean.assign(width, 0.0);
        cache.var.assign(width, 0.0);
        for (std::size_t i = 0; i < batch; ++i)
            for (std::size_t j = 0; j < width; ++j) cache.mean[j] += x(i, j);
        for (double& v : cache.mean) v /= static_cast<double>(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                const double c = x(i, j) - cache.mean[j];
                cache.var[j] += c * c;
            }
        }
        for (double& v : cache.var) v /= static_cast<double>(batch);
        for (std::size_t j = 0; j < width; ++j) {
            block.running_mean[j] = kBatchNormMomentum * block.running_mean[j] +
                                    (1.0 - kBatchNormMomentum) * cache.mean[j];
            block.running_var[j] = kBatchNormMomentum * block.running_var[j] +
                                   (1.0 - kBatchNormMomentum) * cache.var[j];
        }
    } else {
        cache.mean = block.running_mean;
        cache.var = block.running_var;
    }

    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
            cache.normalized(i, j) =
                (x(i, j) - cache.mean[j]) / std::sqrt(cache.var[j] + kBatchNormEpsilon);
        }
    }
}

}  // namespace detail

// DNN branch over the flattened first-order embeddings: a stack of
// (linear -> batch norm -> relu) blocks and a final affine, one row per
// sample. The caller reshapes each row into per-field blocks of width
// head_dim*H. Train mode normalizes with batch statistics and updates the
// running ones; eval mode uses the running statistics.
inline Matrix dnn_branch_forward(const Matrix& x0, DnnParams& dnn, Mode mode,
                                 DnnCache& cache) {
    cache.x0 = x0;
    Matrix cur = x0;
    for (auto& block : dnn.blocks) {
        DnnBlockCache bc;
        bc.input = cur;
        bc.affine = matmul(cur, transpose(block.weight));
        detail::batchnorm_forward(bc.affine, block, mode, bc);
        bc.activated = Matrix(bc.affine.rows(), bc.affine.cols());
        for (std::size_t i = 0; i < bc.affine.rows(); ++i) {
            for (std::size_t j = 0; j < bc.affine.cols(); ++j) {
                bc.activated(i, j) = relu(block.gamma[j] * bc.normalized(i, j) + block.beta[j]);
            }
        }
        cur = bc.activated;
        cache.blocks.push_back(std::move(bc));
    }
    cache.out = detail::affine_forward(cur, dnn.out_w, dnn.out_b);
    return cache.out;
}

// Predicted click probabilities for a batch. In train mode dropout is active
// (when rate > 0 and rng given) and batch normalization uses batch statistics,
// updating the running ones; eval mode is fully deterministic.
inline std::vector<double> forward(std::span<const EncodedSample> batch, ModelParams& params,
                                   const ModelConfig& config, Mode mode, SeededRng* rng,
                                   BatchCache* cache_out) {
    if (batch.empty()) throw DomainError("forward needs a nonempty batch");
    config.validate();

    const std::size_t m_fields = config.num_fields;
    const std::size_t concat_dim = config.head_dim * config.num_heads;
    const std::size_t rep_dim = config.rep_dim();
    const bool apply_dropout = mode == Mode::train && config.dropout_rate > 0.0;
    if (apply_dropout && rng == nullptr) {
        throw DomainError("train-mode forward with dropout needs an rng");
    }

    BatchCache local;
    BatchCache& cache = cache_out ? *cache_out : local;
    cache = BatchCache{};
    cache.mode = mode;
    cache.samples.resize(batch.size());
    cache.field_reps.resize(batch.size());

    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].indices.size() != m_fields) {
            throw ShapeError("sample field count does not match config",
                             {batch[i].indices.size(), 1}, {m_fields, 1});
        }
        SampleCache& sc = cache.samples[i];
        sc.embedded = embed(batch[i], params.embedding);
        Matrix h = sc.embedded;
        for (std::size_t l = 0; l < config.num_layers; ++l) {
            auto [z, layer_cache] = layer_forward(h, params.layers[l], config.variant,
                                                  config.scale_scores);
            sc.layers.push_back(std::move(layer_cache));
            if (apply_dropout) {
                const auto mask_data = dropout_mask(z.size(), config.dropout_rate, *rng);
                Matrix mask(z.rows(), z.cols(), mask_data);
                for (std::size_t idx = 0; idx < z.size(); ++idx) {
                    z.data()[idx] *= mask.data()[idx];
                }
                sc.dropout_masks.push_back(std::move(mask));
            } else {
                sc.dropout_masks.emplace_back();
            }
            h = std::move(z);
        }
        sc.base = std::move(h);
    }

    if (config.use_dnn) {
        if (!params.dnn.has_value()) throw DomainError("config enables DNN but params lack it");
        Matrix x0(batch.size(), m_fields * config.embed_dim);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Matrix& e = cache.samples[i].embedded;
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t c = 0; c < config.embed_dim; ++c)
                    x0(i, m * config.embed_dim + c) = e(m, c);
        }

        DnnCache dnn_cache;
        (void)dnn_branch_forward(x0, *params.dnn, mode, dnn_cache);

        // Merge the stack output with the DNN branch field by field.
        const Matrix& merge = params.dnn->merge;
        const std::size_t base_dim = config.stack_out_dim();
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Matrix& base = cache.samples[i].base;
            Matrix rep(m_fields, concat_dim);
            for (std::size_t m = 0; m < m_fields; ++m) {
                for (std::size_t r = 0; r < concat_dim; ++r) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < base_dim; ++c) {
                        acc += merge(r, c) * base(m, c);
                    }
                    for (std::size_t c = 0; c < concat_dim; ++c) {
                        acc += merge(r, base_dim + c) * dnn_cache.out(i, m * concat_dim + c);
                    }
                    rep(m, r) = acc;
                }
            }
            cache.field_reps[i] = std::move(rep);
        }
        cache.dnn = std::move(dnn_cache);
    } else {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            cache.field_reps[i] = cache.samples[i].base;
        }
    }

    std::vector<double> scores(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        double logit = params.out_b;
        const Matrix& rep = cache.field_reps[i];
        for (std::size_t m = 0; m < m_fields; ++m)
            for (std::size_t j = 0; j < rep_dim; ++j)
                logit += params.out_w[m * rep_dim + j] * rep(m, j);
        scores[i] = sigmoid(logit);
    }
    cache.scores = scores;
    return scores;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean binary cross-entropy with scores clamped away from 0 and 1.
inline double mean_bce(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ShapeError("scores/labels length mismatch", {scores.size(), 1},
                         {labels.size(), 1});
    }
    if (scores.empty()) throw DomainError("mean_bce of empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double p = std::clamp(scores[i], kScoreClamp, 1.0 - kScoreClamp);
        total += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
    }
    return total / static_cast<double>(scores.size());
}

// Sum of squares over the tensors subject to weight decay (projection
// matrices and embeddings; biases and batch-norm scales/shifts excluded).
inline double l2_penalty(const ModelParams& params) {
    double total = 0.0;
    for (const auto& view : param_views(params)) {
        if (!view.decay) continue;
        for (std::size_t i = 0; i < view.size; ++i) total += view.data[i] * view.data[i];
    }
    return total;
}

inline double loss(std::span<const double> scores, std::span<const int> labels,
                   const ModelParams& params, double l2_weight) {
    const double bce = mean_bce(scores, labels);
    return l2_weight == 0.0 ? bce : bce + l2_weight * l2_penalty(params);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

inline void accumulate(LayerParams& into, const LayerParams& delta) {
    for (std::size_t h = 0; h < into.heads.size(); ++h) {
        into.heads[h].w_q += delta.heads[h].w_q;
        into.heads[h].w_k += delta.heads[h].w_k;
        into.heads[h].w_q_prime += delta.heads[h].w_q_prime;
        into.heads[h].w_v += delta.heads[h].w_v;
    }
    into.w_r += delta.w_r;
}

// Backward of y = x * w^T (+ bias when d_bias given).
inline Matrix affine_backward(const Matrix& x, const Matrix& w, const Matrix& d_y,
                              Matrix& d_w, std::vector<double>* d_bias) {
    for (std::size_t i = 0; i < d_y.rows(); ++i) {
        for (std::size_t j = 0; j < d_y.cols(); ++j) {
            const double g = d_y(i, j);
            if (d_bias) (*d_bias)[j] += g;
            for (std::size_t c = 0; c < x.cols(); ++c) d_w(j, c) += g * x(i, c);
        }
    }
    return matmul(d_y, w);
}

// Backward through train-mode batch normalization (batch statistics are a
// function of the inputs) and the gamma/beta affine.
inline Matrix batchnorm_backward(const DnnBlockCache& cache, const DnnBlockParams& block,
                                 const Matrix& d_out, std::vector<double>& d_gamma,
                                 std::vector<double>& d_beta) {
    const std::size_t batch = d_out.rows();
    const std::size_t width = d_out.cols();
    const double inv_batch = 1.0 / static_cast<double>(batch);

    Matrix d_x(batch, width);
    std::vector<double> sum_dxhat(width, 0.0);
    std::vector<double> sum_dxhat_xhat(width, 0.0);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
            const double xhat = cache.normalized(i, j);
            const double g = d_out(i, j);
            d_gamma[j] += g * xhat;
            d_beta[j] += g;
            const double dxhat = g * block.gamma[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * xhat;
        }
    }
    for (std::size_t j = 0; j < width; ++j) {
        const double inv_std = 1.0 / std::sqrt(cache.var[j] + kBatchNormEpsilon);
        for (std::size_t i = 0; i < batch; ++i) {
            const double dxhat = d_out(i, j) * block.gamma[j];
            d_x(i, j) = inv_std * (dxhat - inv_batch * sum_dxhat[j] -
                                   cache.normalized(i, j) * inv_batch * sum_dxhat_xhat[j]);
        }
    }
    return d_x;
}

}  // namespace detail

// Exact gradients of `loss` (including the L2 term) for every parameter
// tensor, given a cache from a matching train-mode forward pass.
inline GradientSet backward(std::span<const EncodedSample> batch, const ModelParams& params,
                            const ModelConfig& config, const BatchCache& cache,
                            std::span<const int> labels) {
    if (cache.samples.size() != batch.size() || cache.scores.size() != batch.size() ||
        labels.size() != batch.size()) {
        throw ShapeError("backward: cache/batch/labels size mismatch",
                         {cache.samples.size(), labels.size()}, {batch.size(), batch.size()});
    }
    const std::size_t m_fields = config.num_fields;
    const std::size_t rep_dim = config.rep_dim();
    const std::size_t concat_dim = config.head_dim * config.num_heads;
    const std::size_t base_dim = config.stack_out_dim();
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    GradientSet grads = zeros_like(params);

    // Head: d loss / d logit_i = (score_i - y_i) / batch.
    std::vector<double> d_logit(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        d_logit[i] = (cache.scores[i] - static_cast<double>(labels[i])) * inv_batch;
    }

    std::vector<Matrix> d_rep(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        grads.out_b += d_logit[i];
        const Matrix& rep = cache.field_reps[i];
        d_rep[i] = Matrix(m_fields, rep_dim);
        for (std::size_t m = 0; m < m_fields; ++m) {
            for (std::size_t j = 0; j < rep_dim; ++j) {
                grads.out_w[m * rep_dim + j] += d_logit[i] * rep(m, j);
                d_rep[i](m, j) = d_logit[i] * params.out_w[m * rep_dim + j];
            }
        }
    }

    // Per-sample gradient wrt the interaction-stack output, and the DNN
    // path's gradient wrt the raw embeddings.
    std::vector<Matrix> d_base(batch.size());
    std::vector<Matrix> d_embedded_dnn;

    if (config.use_dnn) {
        const DnnCache& dnn_cache = *cache.dnn;
        const DnnParams& dnn = *params.dnn;
        DnnParams& dnn_grads = *grads.dnn;

        Matrix d_dnn_out(batch.size(), config.dnn_out_width());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Matrix& base = cache.samples[i].base;
            d_base[i] = Matrix(m_fields, base_dim);
            for (std::size_t m = 0; m < m_fields; ++m) {
                for (std::size_t r = 0; r < concat_dim; ++r) {
                    const double g = d_rep[i](m, r);
                    if (g == 0.0) continue;
                    for (std::size_t c = 0; c < base_dim; ++c) {
                        dnn_grads.merge(r, c) += g * base(m, c);
                        d_base[i](m, c) += g * dnn.merge(r, c);
                    }
                    for (std::size_t c = 0; c < concat_dim; ++c) {
                        const double ztilde = dnn_cache.out(i, m * concat_dim + c);
                        dnn_grads.merge(r, base_dim + c) += g * ztilde;
                        d_dnn_out(i, m * concat_dim + c) += g * dnn.merge(r, base_dim + c);
                    }
                }
            }
        }

        const Matrix& last_activation =
            dnn_cache.blocks.empty() ? dnn_cache.x0 : dnn_cache.blocks.back().activated;
        Matrix d_cur = detail::affine_backward(last_activation, dnn.out_w, d_dnn_out,
                                               dnn_grads.out_w, &dnn_grads.out_b);

        for (std::size_t b = dnn.blocks.size(); b-- > 0;) {
            const DnnBlockCache& bc = dnn_cache.blocks[b];
            // ReLU gate.
            for (std::size_t i = 0; i < d_cur.rows(); ++i)
                for (std::size_t j = 0; j < d_cur.cols(); ++j)
                    if (!(bc.activated(i, j) > 0.0)) d_cur(i, j) = 0.0;
            Matrix d_affine = detail::batchnorm_backward(bc, dnn.blocks[b], d_cur,
                                                         dnn_grads.blocks[b].gamma,
                                                         dnn_grads.blocks[b].beta);
            d_cur = detail::affine_backward(bc.input, dnn.blocks[b].weight, d_affine,
                                            dnn_grads.blocks[b].weight, nullptr);
        }

        // d_cur is now the gradient wrt the flattened embeddings.
        d_embedded_dnn.resize(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Matrix d_e(m_fields, config.embed_dim);
            for (std::size_t m = 0; m < m_fields; ++m)
                for (std::size_t c = 0; c < config.embed_dim; ++c)
                    d_e(m, c) = d_cur(i, m * config.embed_dim + c);
            d_embedded_dnn[i] = std::move(d_e);
        }
    } else {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            d_base[i] = std::move(d_rep[i]);
        }
    }

    // Attention stack backward, sample by sample.
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const SampleCache& sc = cache.samples[i];
        Matrix d_h = std::move(d_base[i]);
        for (std::size_t l = config.num_layers; l-- > 0;) {
            const Matrix& mask = sc.dropout_masks[l];
            if (!mask.empty()) {
                for (std::size_t idx = 0; idx < d_h.size(); ++idx)
                    d_h.data()[idx] *= mask.data()[idx];
            }
            auto res = layer_backward(sc.layers[l], params.layers[l], d_h);
            detail::accumulate(grads.layers[l], res.d_params);
            d_h = std::move(res.d_input);
        }
        if (config.use_dnn) {
            d_h += d_embedded_dnn[i];
        }
        for (std::size_t m = 0; m < m_fields; ++m) {
            const std::size_t row = batch[i].indices[m];
            for (std::size_t c = 0; c < config.embed_dim; ++c)
                grads.embedding(row, c) += d_h(m, c);
        }
    }

    // L2 term: d/dw of l2_weight * sum(w^2) = 2*l2_weight*w on decayed tensors.
    if (config.l2_weight > 0.0) {
        const auto param_list = param_views(params);
        auto grad_list = param_views(grads);
        for (std::size_t t = 0; t < param_list.size(); ++t) {
            if (!param_list[t].decay) continue;
            for (std::size_t j = 0; j < param_list[t].size; ++j) {
                grad_list[t].data[j] += 2.0 * config.l2_weight * param_list[t].data[j];
            }
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamCountReport {
    long long embedding = 0;
    std::vector<long long> layers;             // per-layer totals (heads + residual)
    std::vector<long long> layer_unary_query;  // per-layer share held by w_q_prime
    long long output = 0;
    long long dnn = 0;
    long long total = 0;
};

// Closed-form trainable parameter counts per component.
inline ParamCountReport param_count(const ModelConfig& config) {
    config.validate();
    ParamCountReport report;
    const auto M = static_cast<long long>(config.num_fields);
    const auto d = static_cast<long long>(config.embed_dim);
    const auto dp = static_cast<long long>(config.head_dim);
    const auto H = static_cast<long long>(config.num_heads);

    report.embedding = static_cast<long long>(config.total_features) * d;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        const auto in_dim = static_cast<long long>(config.layer_input_dim(l));
        report.layers.push_back(H * 4 * dp * in_dim + dp * H * in_dim);
        report.layer_unary_query.push_back(H * dp * in_dim);
    }
    report.output = static_cast<long long>(config.rep_dim()) * M + 1;
    if (config.use_dnn) {
        long long prev = M * d;
        long long count = 0;
        for (std::size_t width : config.dnn_widths) {
            const auto w = static_cast<long long>(width);
            count += w * prev;  // linear map (bias-free in front of batch norm)
            count += 2 * w;     // gamma, beta
            prev = w;
        }
        const auto out_width = static_cast<long long>(config.dnn_out_width());
        count += out_width * prev + out_width;
        count += dp * H * (static_cast<long long>(config.stack_out_dim()) + dp * H);
        report.dnn = count;
    }
    report.total = report.embedding + report.output + report.dnn;
    for (long long c : report.layers) report.total += c;
    return report;
}

}  // namespace destine
