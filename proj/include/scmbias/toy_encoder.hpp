#pragma once

#include <cctype>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "scmbias/embed.hpp"
#include "scmbias/errors.hpp"
#include "scmbias/hash.hpp"
#include "scmbias/rng.hpp"

namespace scmbias {

// Deterministic differentiable encoder for desk-scale experiments.
//
// Pipeline per sentence:
//   1. whitespace tokenization; words longer than max_piece_chars are split
//      into consecutive chunks (subword pieces),
//   2. fixed hashed bag-of-character-n-gram features per piece,
//   3. a window average over neighboring pieces (makes embeddings contextual),
//   4. N trainable affine layers; encode() returns their outputs.
//
// The feature map is seed-independent, so outputs depend only on (config,
// parameters). The seed initializes the affine layers.
struct ToyEncoderConfig {
    std::uint64_t seed = 0;
    int n_layers = 2;
    int hidden_dim = 16;
    int context_window = 1;   // pieces averaged on each side
    int max_piece_chars = 10;
    int ngram_min = 1;
    int ngram_max = 3;
    double init_noise = 0.05;

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"n_layers", n_layers},
                {"hidden_dim", hidden_dim},
                {"context_window", context_window},
                {"max_piece_chars", max_piece_chars},
                {"ngram_min", ngram_min},
                {"ngram_max", ngram_max},
                {"init_noise", init_noise}};
    }

    static ToyEncoderConfig from_json(const nlohmann::json& j) {
        ToyEncoderConfig c;
        c.seed = j.value("seed", std::uint64_t{0});
        c.n_layers = j.value("n_layers", 2);
        c.hidden_dim = j.value("hidden_dim", 16);
        c.context_window = j.value("context_window", 1);
        c.max_piece_chars = j.value("max_piece_chars", 10);
        c.ngram_min = j.value("ngram_min", 1);
        c.ngram_max = j.value("ngram_max", 3);
        c.init_noise = j.value("init_noise", 0.05);
        return c;
    }
};

class ToyEncoder final : public TrainableEncoder {
public:
    explicit ToyEncoder(const ToyEncoderConfig& config) : config_(config) {
        if (config.n_layers < 1) throw ValidationError("toy encoder: n_layers must be >= 1");
        if (config.hidden_dim < 2) throw ValidationError("toy encoder: hidden_dim must be >= 2");
        if (config.context_window < 0) throw ValidationError("toy encoder: context_window must be >= 0");
        if (config.max_piece_chars < 1) throw ValidationError("toy encoder: max_piece_chars must be >= 1");
        if (config.ngram_min < 1 || config.ngram_max < config.ngram_min)
            throw ValidationError("toy encoder: bad n-gram range");

        const int h = config.hidden_dim;
        weights_.reserve(static_cast<std::size_t>(config.n_layers));
        biases_.reserve(static_cast<std::size_t>(config.n_layers));
        for (int layer = 0; layer < config.n_layers; ++layer) {
            Rng rng(derive_seed(config.seed, "toy.init", static_cast<std::uint64_t>(layer)));
            Eigen::MatrixXd w = Eigen::MatrixXd::Identity(h, h);
            const double scale = config.init_noise / std::sqrt(static_cast<double>(h));
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < h; ++c) w(r, c) += scale * rng.next_normal();
            weights_.push_back(std::move(w));
            biases_.push_back(Eigen::VectorXd::Zero(h));
        }
        zero_grad();
    }

    const ToyEncoderConfig& config() const { return config_; }

    // --- EncoderBackend ---

    int layer_count() const override { return config_.n_layers; }
    int hidden_dim() const override { return config_.hidden_dim; }
    bool trainable() const override { return true; }
    std::string kind() const override { return "toy"; }

    std::string config_hash() const override { return digest_hex(config_.to_json().dump()); }

    nlohmann::json backend_config() const override { return config_.to_json(); }

    std::vector<TokenPiece> tokenize(std::string_view text) const override {
        std::vector<TokenPiece> pieces;
        std::size_t i = 0;
        const std::size_t max_chars = static_cast<std::size_t>(config_.max_piece_chars);
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            if (i >= text.size()) break;
            std::size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            for (std::size_t b = i; b < j; b += max_chars) {
                std::size_t e = std::min(j, b + max_chars);
                pieces.push_back({std::string(text.substr(b, e - b)), b, e});
            }
            i = j;
        }
        return pieces;
    }

    std::vector<Eigen::MatrixXd> encode(std::string_view text) const override {
        return forward(text).layers;
    }

    ParameterSnapshot snapshot() const override {
        ParameterSnapshot snap;
        snap.architecture_hash = architecture_hash();
        snap.values.reserve(parameter_count());
        for (int l = 0; l < config_.n_layers; ++l) {
            const auto& w = weights_[static_cast<std::size_t>(l)];
            snap.values.insert(snap.values.end(), w.data(), w.data() + w.size());
            const auto& b = biases_[static_cast<std::size_t>(l)];
            snap.values.insert(snap.values.end(), b.data(), b.data() + b.size());
        }
        return snap;
    }

    void restore(const ParameterSnapshot& snap) override {
        if (snap.architecture_hash != architecture_hash())
            throw ValidationError("toy encoder: snapshot architecture mismatch (expected " +
                                  architecture_hash() + ", got " + snap.architecture_hash + ")");
        if (snap.values.size() != parameter_count())
            throw ValidationError("toy encoder: snapshot has wrong parameter count");
        std::size_t off = 0;
        for (int l = 0; l < config_.n_layers; ++l) {
            auto& w = weights_[static_cast<std::size_t>(l)];
            std::copy(snap.values.begin() + static_cast<std::ptrdiff_t>(off),
                      snap.values.begin() + static_cast<std::ptrdiff_t>(off + w.size()), w.data());
            off += static_cast<std::size_t>(w.size());
            auto& b = biases_[static_cast<std::size_t>(l)];
            std::copy(snap.values.begin() + static_cast<std::ptrdiff_t>(off),
                      snap.values.begin() + static_cast<std::ptrdiff_t>(off + b.size()), b.data());
            off += static_cast<std::size_t>(b.size());
        }
    }

    std::unique_ptr<EncoderBackend> clone() const override {
        auto copy = std::make_unique<ToyEncoder>(config_);
        copy->weights_ = weights_;
        copy->biases_ = biases_;
        return copy;
    }

    // --- TrainableEncoder ---

    void zero_grad() override {
        grad_weights_.assign(weights_.size(),
                             Eigen::MatrixXd::Zero(config_.hidden_dim, config_.hidden_dim));
        grad_biases_.assign(biases_.size(), Eigen::VectorXd::Zero(config_.hidden_dim));
    }

    void accumulate_gradient(std::string_view text,
                             const std::vector<Eigen::MatrixXd>& dl_dlayers) override {
        auto acts = forward_full(text);
        if (dl_dlayers.size() != static_cast<std::size_t>(config_.n_layers))
            throw ValidationError("toy encoder: gradient needs one matrix per layer");
        const std::size_t n = static_cast<std::size_t>(config_.n_layers);
        // states[0] = mixed features, states[i] = layer i output
        Eigen::MatrixXd running = dl_dlayers[n - 1];
        for (std::size_t l = n; l-- > 0;) {
            grad_weights_[l].noalias() += running.transpose() * acts.states[l];
            grad_biases_[l] += running.colwise().sum().transpose();
            if (l > 0) running = (running * weights_[l]).eval() + dl_dlayers[l - 1];
        }
    }

    void gradient_step(double learning_rate) override {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            weights_[l] -= learning_rate * grad_weights_[l];
            biases_[l] -= learning_rate * grad_biases_[l];
        }
    }

    // --- toy-specific helpers ---

    struct Forward {
        std::vector<TokenPiece> pieces;
        std::vector<Eigen::MatrixXd> layers;  // N matrices (pieces x H)
    };

    Forward forward(std::string_view text) const {
        auto acts = forward_full(text);
        Forward out;
        out.pieces = std::move(acts.pieces);
        out.layers.assign(acts.states.begin() + 1, acts.states.end());
        return out;
    }

    // Fixed (parameter-free) featurization: hashed signed character n-grams,
    // normalized, then window-averaged with neighbors.
    Eigen::MatrixXd mixed_features(const std::vector<TokenPiece>& pieces) const {
        const Eigen::Index p = static_cast<Eigen::Index>(pieces.size());
        const int h = config_.hidden_dim;
        Eigen::MatrixXd raw(p, h);
        for (Eigen::Index i = 0; i < p; ++i) raw.row(i) = piece_features(pieces[static_cast<std::size_t>(i)].text).transpose();
        Eigen::MatrixXd mixed(p, h);
        const Eigen::Index w = config_.context_window;
        for (Eigen::Index i = 0; i < p; ++i) {
            Eigen::Index lo = std::max<Eigen::Index>(0, i - w);
            Eigen::Index hi = std::min<Eigen::Index>(p - 1, i + w);
            mixed.row(i) = raw.middleRows(lo, hi - lo + 1).colwise().mean();
        }
        return mixed;
    }

    Eigen::VectorXd piece_features(std::string_view piece) const {
        const int h = config_.hidden_dim;
        Eigen::VectorXd phi = Eigen::VectorXd::Zero(h);
        std::string marked = "^" + std::string(piece) + "$";
        std::size_t grams = 0;
        for (int n = config_.ngram_min; n <= config_.ngram_max; ++n) {
            if (static_cast<std::size_t>(n) > marked.size()) break;
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= marked.size(); ++i) {
                std::uint64_t hv = fnv1a64(std::string_view(marked).substr(i, static_cast<std::size_t>(n)),
                                           fnv1a64_mix(0x5c3bb1a5u));
                double sign = ((hv >> 62) & 1u) ? 1.0 : -1.0;
                phi[static_cast<Eigen::Index>(hv % static_cast<std::uint64_t>(h))] += sign;
                ++grams;
            }
        }
        if (grams > 0) phi /= std::sqrt(static_cast<double>(grams));
        return phi;
    }

    std::size_t parameter_count() const {
        const std::size_t h = static_cast<std::size_t>(config_.hidden_dim);
        return static_cast<std::size_t>(config_.n_layers) * (h * h + h);
    }

    std::string architecture_hash() const {
        nlohmann::json j{{"kind", kind()}, {"n_layers", config_.n_layers}, {"hidden_dim", config_.hidden_dim}};
        return digest_hex(j.dump());
    }

private:
    struct FullForward {
        std::vector<TokenPiece> pieces;
        std::vector<Eigen::MatrixXd> states;  // [mixed, layer1, ..., layerN]
    };

    FullForward forward_full(std::string_view text) const {
        FullForward out;
        out.pieces = tokenize(text);
        if (out.pieces.empty())
            throw DataError("toy encoder: no token pieces in text '" + std::string(text) + "'");
        out.states.reserve(static_cast<std::size_t>(config_.n_layers) + 1);
        out.states.push_back(mixed_features(out.pieces));
        for (int l = 0; l < config_.n_layers; ++l) {
            const auto& prev = out.states.back();
            Eigen::MatrixXd next = prev * weights_[static_cast<std::size_t>(l)].transpose();
            next.rowwise() += biases_[static_cast<std::size_t>(l)].transpose();
            out.states.push_back(std::move(next));
        }
        return out;
    }

    ToyEncoderConfig config_;
    std::vector<Eigen::MatrixXd> weights_;
    std::vector<Eigen::VectorXd> biases_;
    std::vector<Eigen::MatrixXd> grad_weights_;
    std::vector<Eigen::VectorXd> grad_biases_;
};

inline std::unique_ptr<ToyEncoder> make_toy_encoder(std::uint64_t seed, int n_layers, int hidden_dim,
                                                    int context_window = 1) {
    ToyEncoderConfig c;
    c.seed = seed;
    c.n_layers = n_layers;
    c.hidden_dim = hidden_dim;
    c.context_window = context_window;
    return std::make_unique<ToyEncoder>(c);
}

// Reconstructs a toy encoder from an exported checkpoint. Encode outputs are
// bit-identical to the exported backend's.
inline std::unique_ptr<ToyEncoder> load_toy_checkpoint(const std::string& dir) {
    auto manifest = read_checkpoint_manifest(dir);
    if (manifest.backend_kind != "toy")
        throw ValidationError("checkpoint: backend kind '" + manifest.backend_kind + "' is not 'toy'");
    auto enc = std::make_unique<ToyEncoder>(ToyEncoderConfig::from_json(manifest.backend_config));
    enc->restore(read_checkpoint_parameters(dir));
    return enc;
}

}  // namespace scmbias
