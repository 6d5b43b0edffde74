#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "scmbias/ceat.hpp"
#include "scmbias/corpus.hpp"
#include "scmbias/embed.hpp"
#include "scmbias/errors.hpp"
#include "scmbias/hash.hpp"
#include "scmbias/rng.hpp"

namespace scmbias {

struct DebiasConfig {
    double alpha = 0.2;
    double beta = 0.8;
    double learning_rate = 5e-5;
    int batch_size = 32;
    int epochs = 3;
    std::vector<int> layers;  // 1-based selection for the projection loss; empty = all
    std::vector<std::string> dimensions = {"warmth", "competence"};
    std::uint64_t seed = 0;

    void validate() const {
        if (alpha < 0.0 || alpha > 1.0 || beta < 0.0 || beta > 1.0)
            throw ValidationError("debias config: alpha and beta must lie in [0, 1]");
        if (std::abs(alpha + beta - 1.0) > 1e-9)
            throw ValidationError("debias config: alpha + beta must equal 1, got " +
                                  std::to_string(alpha + beta));
        if (learning_rate <= 0.0) throw ValidationError("debias config: learning_rate must be > 0");
        if (batch_size < 1) throw ValidationError("debias config: batch_size must be >= 1");
        if (epochs < 0) throw ValidationError("debias config: epochs must be >= 0");
        if (dimensions.empty()) throw ValidationError("debias config: no dimensions selected");
    }

    std::vector<int> selected_layers(int n_layers) const {
        std::vector<int> out;
        if (layers.empty()) {
            for (int i = 1; i <= n_layers; ++i) out.push_back(i);
            return out;
        }
        for (int l : layers) {
            if (l < 1 || l > n_layers)
                throw ValidationError("debias config: layer " + std::to_string(l) +
                                      " out of range 1.." + std::to_string(n_layers));
            out.push_back(l);
        }
        return out;
    }

    nlohmann::json to_json() const {
        return {{"alpha", alpha},
                {"beta", beta},
                {"learning_rate", learning_rate},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"layers", layers},
                {"dimensions", dimensions},
                {"seed", seed}};
    }

    static DebiasConfig from_json(const nlohmann::json& j) {
        DebiasConfig c;
        c.alpha = j.value("alpha", 0.2);
        c.beta = j.value("beta", 0.8);
        c.learning_rate = j.value("learning_rate", 5e-5);
        c.batch_size = j.value("batch_size", 32);
        c.epochs = j.value("epochs", 3);
        c.layers = j.value("layers", std::vector<int>{});
        c.dimensions = j.value("dimensions", std::vector<std::string>{"warmth", "competence"});
        c.seed = j.value("seed", std::uint64_t{0});
        c.validate();
        return c;
    }

    std::string hash() const { return digest_hex(to_json().dump()); }
};

struct TrainingStep {
    int step = 0;
    double loss_projection = 0.0;      // L_i summed over selected layers
    double loss_regularization = 0.0;  // L_reg over all layers
    double loss_total = 0.0;           // alpha * L_i + beta * L_reg
};

struct EpochSummary {
    int epoch = 0;
    int steps = 0;
    double mean_projection = 0.0;
    double mean_regularization = 0.0;
    double mean_total = 0.0;
};

struct TrainingLog {
    std::vector<TrainingStep> steps;
    std::vector<EpochSummary> epochs;
    std::vector<std::string> warnings;
    double wall_seconds = 0.0;
    std::string config_hash;
    std::uint64_t seed = 0;
};

// ------------------------------------------------------------------
// Loss components
// ------------------------------------------------------------------

struct ProjectionLoss {
    double total = 0.0;
    std::vector<double> per_layer;  // aligned with the layer selection
};

// First loss component: squared inner products of every target embedding
// with every attribute direction, over the selected layers and all
// configured dimensions. Zero iff all targets are orthogonal to all
// directions at all selected layers.
inline ProjectionLoss projection_loss(const std::vector<StimulusEmbedding>& target_embeddings,
                                      const AttributeDirections& directions,
                                      const std::vector<int>& layer_selection) {
    ProjectionLoss out;
    out.per_layer.assign(layer_selection.size(), 0.0);
    for (const auto& emb : target_embeddings) {
        for (std::size_t li = 0; li < layer_selection.size(); ++li) {
            const int layer = layer_selection[li];
            if (layer < 1 || static_cast<std::size_t>(layer) > emb.per_layer.size())
                throw ValidationError("projection_loss: layer " + std::to_string(layer) +
                                      " not present in embedding");
            const auto& e = emb.per_layer[static_cast<std::size_t>(layer - 1)];
            for (const auto& block : directions.blocks()) {
                const auto& m = block.per_layer.at(static_cast<std::size_t>(layer - 1));
                if (m.cols() != e.size())
                    throw ValidationError("projection_loss: dimension mismatch between directions (" +
                                          std::to_string(m.cols()) + ") and embedding (" +
                                          std::to_string(e.size()) + ")");
                out.per_layer[li] += (m * e).squaredNorm();
            }
        }
    }
    for (double v : out.per_layer) out.total += v;
    return out;
}

// Second loss component: squared l2 drift of every token piece of every
// given sentence, at every layer, between the current parameters and the
// pre-training reference.
inline double regularization_loss(const EncoderBackend& current, const EncoderBackend& reference,
                                  const std::vector<std::string>& attribute_sentences) {
    if (current.layer_count() != reference.layer_count() ||
        current.hidden_dim() != reference.hidden_dim() || current.kind() != reference.kind())
        throw ValidationError("regularization_loss: current and reference backends differ in architecture");
    double total = 0.0;
    for (const auto& text : attribute_sentences) {
        auto cur = current.encode(text);
        auto ref = reference.encode(text);
        for (std::size_t i = 0; i < cur.size(); ++i) total += (cur[i] - ref[i]).squaredNorm();
    }
    return total;
}

inline double total_loss(double loss_projection, double loss_regularization, const DebiasConfig& config) {
    config.validate();
    return config.alpha * loss_projection + config.beta * loss_regularization;
}

// ------------------------------------------------------------------
// Training loop
// ------------------------------------------------------------------

namespace detail {

inline std::vector<SentenceRecord> flatten_pool(const SentencePool& pool) {
    std::vector<SentenceRecord> out;
    for (const auto& [_, records] : pool.entries)
        out.insert(out.end(), records.begin(), records.end());
    return out;
}

}  // namespace detail

// Fine-tunes the encoder on L = alpha * L_i + beta * L_reg. One optimization
// step consumes one target batch (projection term, frozen directions) and one
// attribute batch (drift term against the theta_pre snapshot taken at entry);
// the shorter side cycles within the epoch. Directions must be precomputed
// from theta_pre by the caller.
inline TrainingLog train(TrainableEncoder& backend, const SentencePool& target_pool,
                         const SentencePool& attribute_pool, const AttributeDirections& directions,
                         const DebiasConfig& config) {
    config.validate();
    if (!backend.trainable()) throw ValidationError("train: backend is not trainable");
    if (target_pool.total_records() == 0) throw ValidationError("train: target pool is empty");
    if (attribute_pool.total_records() == 0) throw ValidationError("train: attribute pool is empty");

    const auto t_start = std::chrono::steady_clock::now();
    TrainingLog log;
    log.config_hash = config.hash();
    log.seed = config.seed;
    if (config.epochs == 0) return log;  // parameters untouched, empty log

    const int n_layers = backend.layer_count();
    const auto layer_sel = config.selected_layers(n_layers);

    auto target_records = detail::flatten_pool(target_pool);
    auto attribute_records = detail::flatten_pool(attribute_pool);

    // theta_pre reference: immutable clone used for the drift term. Reference
    // activations per attribute sentence are fixed, so compute them once.
    auto reference = backend.clone();
    std::vector<std::vector<Eigen::MatrixXd>> reference_layers;
    reference_layers.reserve(attribute_records.size());
    for (const auto& rec : attribute_records) reference_layers.push_back(reference->encode(rec.text));

    const std::size_t batch = static_cast<std::size_t>(config.batch_size);
    int global_step = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::size_t> t_order(target_records.size());
        for (std::size_t i = 0; i < t_order.size(); ++i) t_order[i] = i;
        std::vector<std::size_t> a_order(attribute_records.size());
        for (std::size_t i = 0; i < a_order.size(); ++i) a_order[i] = i;
        {
            Rng rt(derive_seed(config.seed, "train.shuffle.target", static_cast<std::uint64_t>(epoch)));
            rt.shuffle(t_order);
            Rng ra(derive_seed(config.seed, "train.shuffle.attribute", static_cast<std::uint64_t>(epoch)));
            ra.shuffle(a_order);
        }
        const std::size_t n_tb = (t_order.size() + batch - 1) / batch;
        const std::size_t n_ab = (a_order.size() + batch - 1) / batch;
        const std::size_t steps = std::max(n_tb, n_ab);

        double epoch_li = 0.0, epoch_lreg = 0.0, epoch_total = 0.0;

        for (std::size_t s = 0; s < steps; ++s) {
            backend.zero_grad();
            double step_li = 0.0, step_lreg = 0.0;

            // --- projection term over one target batch ---
            const std::size_t tb = s % n_tb;
            for (std::size_t bi = tb * batch; bi < std::min((tb + 1) * batch, t_order.size()); ++bi) {
                const auto& rec = target_records[t_order[bi]];
                auto pieces = backend.tokenize(rec.text);
                auto span_idx = pieces_overlapping_span(pieces, rec.span_begin, rec.span_end);
                if (span_idx.empty())
                    throw DataError("train: span of record '" + rec.source_id +
                                    "' maps to zero token pieces");
                auto layers = backend.encode(rec.text);
                std::vector<Eigen::MatrixXd> grads(static_cast<std::size_t>(n_layers));
                for (int i = 0; i < n_layers; ++i)
                    grads[static_cast<std::size_t>(i)] =
                        Eigen::MatrixXd::Zero(layers[static_cast<std::size_t>(i)].rows(),
                                              layers[static_cast<std::size_t>(i)].cols());
                const double inv_k = 1.0 / static_cast<double>(span_idx.size());
                for (int layer : layer_sel) {
                    const auto& mat = layers[static_cast<std::size_t>(layer - 1)];
                    Eigen::VectorXd e = Eigen::VectorXd::Zero(backend.hidden_dim());
                    for (std::size_t pi : span_idx) e += mat.row(static_cast<Eigen::Index>(pi)).transpose();
                    e *= inv_k;
                    Eigen::VectorXd grad_e = Eigen::VectorXd::Zero(e.size());
                    for (const auto& dim_name : config.dimensions) {
                        const auto& block = directions.block(dim_name);
                        const auto& m = block.per_layer.at(static_cast<std::size_t>(layer - 1));
                        Eigen::VectorXd r = m * e;  // per-attribute inner products
                        step_li += r.squaredNorm();
                        grad_e.noalias() += 2.0 * (m.transpose() * r);
                    }
                    grad_e *= config.alpha * inv_k;  // distribute the pooled-mean gradient
                    auto& g = grads[static_cast<std::size_t>(layer - 1)];
                    for (std::size_t pi : span_idx)
                        g.row(static_cast<Eigen::Index>(pi)) += grad_e.transpose();
                }
                backend.accumulate_gradient(rec.text, grads);
            }

            // --- drift term over one attribute batch ---
            const std::size_t ab = s % n_ab;
            for (std::size_t bi = ab * batch; bi < std::min((ab + 1) * batch, a_order.size()); ++bi) {
                const std::size_t ri = a_order[bi];
                const auto& rec = attribute_records[ri];
                auto layers = backend.encode(rec.text);
                const auto& ref = reference_layers[ri];
                std::vector<Eigen::MatrixXd> grads(static_cast<std::size_t>(n_layers));
                for (int i = 0; i < n_layers; ++i) {
                    const auto& diff = layers[static_cast<std::size_t>(i)] - ref[static_cast<std::size_t>(i)];
                    step_lreg += diff.squaredNorm();
                    grads[static_cast<std::size_t>(i)] = 2.0 * config.beta * diff;
                }
                backend.accumulate_gradient(rec.text, grads);
            }

            const double step_total = config.alpha * step_li + config.beta * step_lreg;
            if (!std::isfinite(step_total))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                   " step " + std::to_string(s + 1) + " (L_i=" + std::to_string(step_li) +
                                   ", L_reg=" + std::to_string(step_lreg) + ")");
            backend.gradient_step(config.learning_rate);

            ++global_step;
            log.steps.push_back({global_step, step_li, step_lreg, step_total});
            epoch_li += step_li;
            epoch_lreg += step_lreg;
            epoch_total += step_total;
        }

        EpochSummary summary;
        summary.epoch = epoch + 1;
        summary.steps = static_cast<int>(steps);
        summary.mean_projection = epoch_li / static_cast<double>(steps);
        summary.mean_regularization = epoch_lreg / static_cast<double>(steps);
        summary.mean_total = epoch_total / static_cast<double>(steps);
        log.epochs.push_back(summary);
    }

    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return log;
}

// Writes the per-step log as JSON-lines; epoch summaries carry an "epoch" key.
inline void write_training_log(const TrainingLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("training log: cannot write '" + path + "'");
    nlohmann::json header{{"config_hash", log.config_hash},
                          {"seed", log.seed},
                          {"wall_seconds", log.wall_seconds}};
    out << header.dump() << "\n";
    for (const auto& s : log.steps) {
        nlohmann::json j{{"step", s.step},
                         {"loss_projection", s.loss_projection},
                         {"loss_regularization", s.loss_regularization},
                         {"loss_total", s.loss_total}};
        out << j.dump() << "\n";
    }
    for (const auto& e : log.epochs) {
        nlohmann::json j{{"epoch", e.epoch},
                         {"steps", e.steps},
                         {"mean_projection", e.mean_projection},
                         {"mean_regularization", e.mean_regularization},
                         {"mean_total", e.mean_total}};
        out << j.dump() << "\n";
    }
}

// Parameter archive + manifest, reloadable via the embed/toy loaders with
// bit-identical encode outputs.
inline CheckpointManifest export_checkpoint(const EncoderBackend& backend, const std::string& dir) {
    return save_checkpoint(backend, dir);
}

}  // namespace scmbias
