#pragma once

// Mini-batch training with Adam, exact rank-based AUC, early stopping on
// validation AUC, and the finite-difference gradient-check harness.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "destine/errors.hpp"
#include "destine/features.hpp"
#include "destine/model.hpp"
#include "destine/numerics.hpp"

namespace destine {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    GradientSet m;  // first moments, shape-mirrors of the parameters
    GradientSet v;  // second moments
    long long t = 0;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

inline AdamState make_adam_state(const ModelParams& params, double learning_rate) {
    AdamState state;
    state.m = zeros_like(params);
    state.v = zeros_like(params);
    state.learning_rate = learning_rate;
    return state;
}

// Bias-corrected Adam update, elementwise over every parameter tensor.
inline void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state) {
    auto p_views = param_views(params);
    const auto g_views = param_views(grads);
    auto m_views = param_views(state.m);
    auto v_views = param_views(state.v);
    if (p_views.size() != g_views.size()) {
        throw ShapeError("adam_step: gradient structure mismatch", {p_views.size(), 0},
                         {g_views.size(), 0});
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < p_views.size(); ++i) {
        if (p_views[i].size != g_views[i].size) {
            throw ShapeError("adam_step: tensor '" + p_views[i].name + "' size mismatch",
                             {p_views[i].size, 0}, {g_views[i].size, 0});
        }
        double* p = p_views[i].data;
        const double* g = g_views[i].data;
        double* m = m_views[i].data;
        double* v = v_views[i].data;
        for (std::size_t j = 0; j < p_views[i].size; ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Probability that a uniformly random positive outranks a uniformly random
// negative, ties counted one half. Exact, via average ranks of tied groups.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ShapeError("auc: scores/labels length mismatch", {scores.size(), 1},
                         {labels.size(), 1});
    }
    std::size_t positives = 0;
    for (int y : labels) positives += y == 1 ? 1 : 0;
    const std::size_t negatives = labels.size() - positives;
    if (positives == 0 || negatives == 0) {
        throw DomainError("auc undefined without both classes");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double positive_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]] == 1) positive_rank_sum += avg_rank;
        }
        i = j;
    }
    const auto p = static_cast<double>(positives);
    const auto n = static_cast<double>(negatives);
    return (positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

// Evaluation-side binary cross-entropy; the identical formula `model::loss`
// uses, with no regularization term.
inline double logloss(std::span<const double> scores, std::span<const int> labels) {
    return mean_bce(scores, labels);
}

// The regularization strengths swept in model selection.
inline std::vector<double> l2_grid() { return {5e-3, 5e-4, 5e-5, 5e-6}; }

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::size_t batch_size = 256;
    std::size_t max_epochs = 20;
    std::size_t patience = 3;  // epochs without validation-AUC improvement
    std::uint64_t seed = 1;
    double learning_rate = 0.001;

    void validate(bool dnn_enabled) const {
        if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
        if (dnn_enabled && batch_size < 2) {
            throw ConfigError("train.batch_size", "must be >= 2 when the DNN branch is on");
        }
        if (patience < 1) throw ConfigError("train.patience", "must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
    }
};

struct EpochRow {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_auc = 0.0;
    double val_logloss = 0.0;
};

struct MetricsReport {
    std::vector<EpochRow> epochs;
    std::size_t best_epoch = 0;  // 0 when no epoch ran
    double test_auc = 0.0;
    double test_logloss = 0.0;
    double wall_seconds = 0.0;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

inline std::pair<double, double> evaluate_metrics(const std::vector<EncodedSample>& samples,
                                                  ModelParams& params,
                                                  const ModelConfig& config,
                                                  std::size_t batch_size) {
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(samples.size());
    labels.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::span<const EncodedSample> batch(samples.data() + start, end - start);
        const auto batch_scores = forward(batch, params, config, Mode::eval, nullptr, nullptr);
        scores.insert(scores.end(), batch_scores.begin(), batch_scores.end());
        for (const auto& s : batch) labels.push_back(s.label);
    }
    return {auc(scores, labels), logloss(scores, labels)};
}

}  // namespace detail

// `epoch,train_loss,val_auc,val_logloss` rows, then a `test,,auc,logloss` row.
inline std::string metrics_to_csv(const MetricsReport& report) {
    std::string out = "epoch,train_loss,val_auc,val_logloss\n";
    for (const auto& row : report.epochs) {
        out += std::to_string(row.epoch) + "," + detail::format_double(row.train_loss) + "," +
               detail::format_double(row.val_auc) + "," +
               detail::format_double(row.val_logloss) + "\n";
    }
    out += "test,," + detail::format_double(report.test_auc) + "," +
           detail::format_double(report.test_logloss) + "\n";
    return out;
}

// Seeded mini-batch training with early stopping on validation AUC. Keeps the
// parameters of the best validation epoch and reports test metrics with them.
// Epoch shuffling and dropout draw from an rng seeded with seed+epoch, so runs
// are reproducible end to end.
inline std::pair<ModelParams, MetricsReport> train(const Dataset& train_split,
                                                   const Dataset& validation_split,
                                                   const Dataset& test_split,
                                                   const ModelConfig& model_config,
                                                   const TrainConfig& train_config,
                                                   std::ostream* log = nullptr) {
    model_config.validate();
    train_config.validate(model_config.use_dnn);
    if (train_split.samples.empty()) throw DomainError("empty training split");

    const auto started = std::chrono::steady_clock::now();

    SeededRng init_rng(train_config.seed);
    ModelParams params = init_params(model_config, init_rng);
    AdamState adam = make_adam_state(params, train_config.learning_rate);

    ModelParams best_params = params;
    double best_auc = -1.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_since_best = 0;

    MetricsReport report;
    std::vector<std::size_t> order(train_split.samples.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
        SeededRng epoch_rng(train_config.seed + epoch);
        epoch_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        std::vector<EncodedSample> batch;
        std::vector<int> labels;
        for (std::size_t start = 0; start < order.size(); start += train_config.batch_size) {
            const std::size_t end = std::min(order.size(), start + train_config.batch_size);
            batch.clear();
            labels.clear();
            for (std::size_t k = start; k < end; ++k) {
                batch.push_back(train_split.samples[order[k]]);
                labels.push_back(batch.back().label);
            }
            if (model_config.use_dnn && batch.size() < 2) continue;  // BN needs >= 2 rows

            BatchCache cache;
            const auto scores =
                forward(batch, params, model_config, Mode::train, &epoch_rng, &cache);
            loss_sum += loss(scores, labels, params, model_config.l2_weight);
            ++batches;
            const GradientSet grads = backward(batch, params, model_config, cache, labels);
            adam_step(params, grads, adam);
        }

        const auto [val_auc, val_ll] = detail::evaluate_metrics(
            validation_split.samples, params, model_config, train_config.batch_size);
        const double train_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
        report.epochs.push_back({epoch, train_loss, val_auc, val_ll});
        if (log) {
            *log << "epoch " << epoch << " train_loss=" << train_loss << " val_auc=" << val_auc
                 << " val_logloss=" << val_ll << "\n";
        }

        if (val_auc > best_auc) {
            best_auc = val_auc;
            best_params = params;
            best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            ++epochs_since_best;
            if (epochs_since_best >= train_config.patience) break;
        }
    }

    const auto [test_auc, test_ll] = detail::evaluate_metrics(
        test_split.samples, best_params, model_config, train_config.batch_size);
    report.best_epoch = best_epoch;
    report.test_auc = test_auc;
    report.test_logloss = test_ll;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {std::move(best_params), std::move(report)};
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckRow {
    std::string tensor;
    double max_rel_error = 0.0;
    std::size_t entries_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckRow> tensors;
    double tolerance = 1e-4;
    double step = 1e-5;

    bool passed() const {
        for (const auto& row : tensors) {
            if (!(row.max_rel_error <= tolerance)) return false;
        }
        return !tensors.empty();
    }

    double max_rel_error() const {
        double worst = 0.0;
        for (const auto& row : tensors) worst = std::max(worst, row.max_rel_error);
        return worst;
    }
};

constexpr std::size_t kGradCheckMaxParams = 5000;
constexpr std::size_t kGradCheckSubsample = 200;

// Central-difference check of `backward` against the scalar loss, tensor by
// tensor. Dropout is disabled and batch norm runs in train mode on one fixed
// random batch. Tensors larger than `kGradCheckSubsample` entries are
// subsampled deterministically. `corrupt_backward` perturbs one analytic
// gradient entry and exists so tests can prove the check catches bad
// gradients.
inline GradCheckReport grad_check(const ModelConfig& model_config, std::uint64_t seed,
                                  double h = 1e-5, double tol = 1e-4,
                                  std::size_t batch_size = 4,
                                  double corrupt_backward = 0.0) {
    ModelConfig config = model_config;
    config.dropout_rate = 0.0;
    config.validate();
    if (config.use_dnn && batch_size < 2) {
        throw DomainError("grad_check with the DNN branch needs batch size >= 2");
    }

    const auto counts = param_count(config);
    if (counts.total > static_cast<long long>(kGradCheckMaxParams)) {
        throw DomainError("grad_check config has " + std::to_string(counts.total) +
                          " parameters; use a config with at most " +
                          std::to_string(kGradCheckMaxParams));
    }

    SeededRng rng(seed);
    ModelParams params = init_params(config, rng);
    // Training-scale embeddings (std 0.01) leave the attention score paths
    // with gradients near the relative-error floor, where finite differences
    // are pure roundoff; check the derivatives at a generic point instead.
    for (double& v : params.embedding.data()) v = rng.uniform(-0.5, 0.5);

    // Fixed random batch covering an arbitrary slice of the feature space.
    std::vector<EncodedSample> batch(batch_size);
    std::vector<int> labels(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        batch[i].indices.resize(config.num_fields);
        for (std::size_t m = 0; m < config.num_fields; ++m) {
            batch[i].indices[m] =
                static_cast<std::size_t>(rng.next_below(config.total_features));
        }
        batch[i].label = rng.bernoulli(0.5) ? 1 : 0;
        labels[i] = batch[i].label;
    }

    auto loss_at = [&](ModelParams& p) {
        const auto scores = forward(batch, p, config, Mode::train, nullptr, nullptr);
        return loss(scores, labels, p, config.l2_weight);
    };

    BatchCache cache;
    const auto scores = forward(batch, params, config, Mode::train, nullptr, &cache);
    (void)scores;
    GradientSet grads = backward(batch, params, config, cache, labels);
    if (corrupt_backward != 0.0) {
        grads.out_b += corrupt_backward;
    }

    GradCheckReport report;
    report.tolerance = tol;
    report.step = h;

    auto p_views = param_views(params);
    const auto g_views = param_views(grads);
    for (std::size_t t = 0; t < p_views.size(); ++t) {
        GradCheckRow row;
        row.tensor = p_views[t].name;

        std::vector<std::size_t> entries(p_views[t].size);
        std::iota(entries.begin(), entries.end(), 0);
        if (entries.size() > kGradCheckSubsample) {
            SeededRng pick(seed ^ (0x5bd1e995ULL * (t + 1)));
            pick.shuffle(entries);
            entries.resize(kGradCheckSubsample);
        }

        for (std::size_t j : entries) {
            double& theta = p_views[t].data[j];
            const double saved = theta;
            theta = saved + h;
            const double up = loss_at(params);
            theta = saved - h;
            const double down = loss_at(params);
            theta = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = g_views[t].data[j];
            const double rel = std::abs(analytic - numeric) /
                               std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            row.max_rel_error = std::max(row.max_rel_error, rel);
        }
        row.entries_checked = entries.size();
        report.tensors.push_back(std::move(row));
    }
    return report;
}

}  // namespace destine
