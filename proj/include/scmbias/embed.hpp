#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "scmbias/corpus.hpp"
#include "scmbias/errors.hpp"
#include "scmbias/lexicon.hpp"

namespace scmbias {

struct TokenPiece {
    std::string text;
    std::size_t begin = 0;  // [begin, end) character offsets in the source text
    std::size_t end = 0;
};

// Flat parameter snapshot. restore(snapshot()) must reproduce encode outputs
// bit-for-bit; architecture is checked via the hash.
struct ParameterSnapshot {
    std::string architecture_hash;
    std::vector<double> values;

    bool operator==(const ParameterSnapshot&) const = default;
};

// Contract every encoder satisfies: per-layer contextual embeddings with
// deterministic outputs for fixed parameters. "Layer i" is the hidden state
// emitted by encoder layer i; the raw input features (layer 0) are excluded.
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;

    virtual int layer_count() const = 0;  // N
    virtual int hidden_dim() const = 0;   // H
    virtual std::vector<TokenPiece> tokenize(std::string_view text) const = 0;
    // N matrices, one per layer, each (pieces x H).
    virtual std::vector<Eigen::MatrixXd> encode(std::string_view text) const = 0;
    virtual bool trainable() const = 0;
    virtual ParameterSnapshot snapshot() const = 0;
    virtual void restore(const ParameterSnapshot& snap) = 0;
    virtual std::string kind() const = 0;
    virtual std::string config_hash() const = 0;
    // Enough configuration to reconstruct this backend (checkpoint manifests).
    virtual nlohmann::json backend_config() const = 0;
    virtual std::unique_ptr<EncoderBackend> clone() const = 0;
};

// Gradient surface for fine-tuning. Adapters bring their own autograd; the
// contract only requires exact gradients of scalar losses of layer outputs.
class TrainableEncoder : public EncoderBackend {
public:
    virtual void zero_grad() = 0;
    // dl_dlayers[i] has the shape of encode(text)[i]; accumulates parameter grads.
    virtual void accumulate_gradient(std::string_view text,
                                     const std::vector<Eigen::MatrixXd>& dl_dlayers) = 0;
    virtual void gradient_step(double learning_rate) = 0;
};

// Per-layer embedding of one stimulus occurrence: mean over the subword
// pieces that overlap the record's character span.
struct StimulusEmbedding {
    StimulusTerm stimulus;
    std::vector<Eigen::VectorXd> per_layer;
    std::string source_id;
};

inline std::vector<std::size_t> pieces_overlapping_span(const std::vector<TokenPiece>& pieces,
                                                        std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (pieces[i].begin < end && begin < pieces[i].end) out.push_back(i);
    }
    return out;
}

inline StimulusEmbedding embed_stimulus(const EncoderBackend& backend, const SentenceRecord& record) {
    auto pieces = backend.tokenize(record.text);
    auto idx = pieces_overlapping_span(pieces, record.span_begin, record.span_end);
    if (idx.empty())
        throw DataError("embed_stimulus: span [" + std::to_string(record.span_begin) + "," +
                        std::to_string(record.span_end) + ") of record '" + record.source_id +
                        "' maps to zero token pieces");
    auto layers = backend.encode(record.text);
    StimulusEmbedding out;
    out.stimulus = record.stimulus;
    out.source_id = record.source_id;
    out.per_layer.reserve(layers.size());
    for (const auto& layer : layers) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(backend.hidden_dim());
        for (std::size_t i : idx) v += layer.row(static_cast<Eigen::Index>(i)).transpose();
        v /= static_cast<double>(idx.size());
        out.per_layer.push_back(std::move(v));
    }
    return out;
}

// v_i(a) for every attribute a of every dimension: the mean embedding of the
// attribute term over its pool sentences, per layer. Also exposes the stacked
// (attributes x H) matrix per (dimension, layer) used by the projection loss.
class AttributeDirections {
public:
    struct DimensionBlock {
        std::string dimension;
        std::vector<std::string> attribute_surfaces;   // row order of the matrices
        std::vector<Eigen::MatrixXd> per_layer;        // N matrices, (n_attr x H)
    };

    const std::vector<DimensionBlock>& blocks() const { return blocks_; }
    int layer_count() const { return layer_count_; }
    int hidden_dim() const { return hidden_dim_; }

    const DimensionBlock& block(const std::string& dimension) const {
        for (const auto& b : blocks_)
            if (b.dimension == dimension) return b;
        throw DataError("AttributeDirections: no dimension '" + dimension + "'");
    }

    // v_i(a): layer is 1-based (layer 1 .. N).
    Eigen::VectorXd vector_for(const std::string& dimension, const std::string& attribute,
                               int layer) const {
        const auto& b = block(dimension);
        for (std::size_t r = 0; r < b.attribute_surfaces.size(); ++r) {
            if (b.attribute_surfaces[r] == attribute)
                return b.per_layer.at(static_cast<std::size_t>(layer - 1))
                    .row(static_cast<Eigen::Index>(r))
                    .transpose();
        }
        throw DataError("AttributeDirections: no attribute '" + attribute + "' in dimension '" +
                        dimension + "'");
    }

    void add_block(DimensionBlock b) {
        if (blocks_.empty()) {
            layer_count_ = static_cast<int>(b.per_layer.size());
            hidden_dim_ = b.per_layer.empty() ? 0 : static_cast<int>(b.per_layer.front().cols());
        }
        blocks_.push_back(std::move(b));
    }

private:
    std::vector<DimensionBlock> blocks_;
    int layer_count_ = 0;
    int hidden_dim_ = 0;
};

inline AttributeDirections attribute_directions(const EncoderBackend& backend,
                                                const SentencePool& pool,
                                                const std::vector<AttributeDimension>& dimensions) {
    std::vector<std::string> missing;
    for (const auto& dim : dimensions) {
        for (const auto& term : dim.all_terms()) {
            const auto* records = pool.find(term.surface);
            if (records == nullptr || records->empty()) missing.push_back(term.surface);
        }
    }
    if (!missing.empty()) {
        std::string msg = "attribute_directions: no pool sentences for:";
        for (const auto& s : missing) msg += " '" + s + "'";
        throw DataError(msg);
    }

    const int n_layers = backend.layer_count();
    const int hidden = backend.hidden_dim();
    AttributeDirections dirs;
    for (const auto& dim : dimensions) {
        auto terms = dim.all_terms();
        AttributeDirections::DimensionBlock block;
        block.dimension = dim.name;
        block.per_layer.assign(static_cast<std::size_t>(n_layers),
                               Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(terms.size()), hidden));
        for (std::size_t r = 0; r < terms.size(); ++r) {
            block.attribute_surfaces.push_back(terms[r].surface);
            const auto& records = *pool.find(terms[r].surface);
            for (const auto& rec : records) {
                auto emb = embed_stimulus(backend, rec);
                for (int i = 0; i < n_layers; ++i)
                    block.per_layer[static_cast<std::size_t>(i)].row(static_cast<Eigen::Index>(r)) +=
                        emb.per_layer[static_cast<std::size_t>(i)].transpose();
            }
            for (int i = 0; i < n_layers; ++i)
                block.per_layer[static_cast<std::size_t>(i)].row(static_cast<Eigen::Index>(r)) /=
                    static_cast<double>(records.size());
        }
        for (const auto& m : block.per_layer) {
            if (!m.allFinite())
                throw NumericError("attribute_directions: non-finite direction in dimension '" +
                                   dim.name + "'");
        }
        dirs.add_block(std::move(block));
    }
    return dirs;
}

// ------------------------------------------------------------------
// Embedding dump: JSON-lines, one record per stimulus occurrence per layer.
// ------------------------------------------------------------------

inline void write_embedding_dump(std::ostream& out, const std::vector<StimulusEmbedding>& embeddings) {
    for (const auto& e : embeddings) {
        for (std::size_t i = 0; i < e.per_layer.size(); ++i) {
            nlohmann::json j;
            j["surface"] = e.stimulus.surface;
            j["layer"] = i + 1;
            j["source_id"] = e.source_id;
            std::vector<double> v(e.per_layer[i].data(), e.per_layer[i].data() + e.per_layer[i].size());
            j["vector"] = v;
            out << j.dump() << "\n";
        }
    }
}

// ------------------------------------------------------------------
// Checkpoints: parameter archive + manifest {backend_kind, N, H, config_hash}.
// ------------------------------------------------------------------

struct CheckpointManifest {
    std::string backend_kind;
    int n_layers = 0;
    int hidden_dim = 0;
    std::string config_hash;
    nlohmann::json backend_config;  // enough to reconstruct the backend
};

inline CheckpointManifest save_checkpoint(const EncoderBackend& backend, const std::string& dir) {
    auto snap = backend.snapshot();
    nlohmann::json manifest{{"backend_kind", backend.kind()},
                            {"n_layers", backend.layer_count()},
                            {"hidden_dim", backend.hidden_dim()},
                            {"config_hash", backend.config_hash()},
                            {"backend_config", backend.backend_config()}};
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) throw DataError("checkpoint: cannot write '" + dir + "/manifest.json'");
    mf << manifest.dump(2) << "\n";

    nlohmann::json params{{"architecture_hash", snap.architecture_hash}, {"values", snap.values}};
    std::ofstream pf(dir + "/checkpoint.json");
    if (!pf) throw DataError("checkpoint: cannot write '" + dir + "/checkpoint.json'");
    pf << params.dump() << "\n";

    CheckpointManifest m;
    m.backend_kind = backend.kind();
    m.n_layers = backend.layer_count();
    m.hidden_dim = backend.hidden_dim();
    m.config_hash = backend.config_hash();
    m.backend_config = backend.backend_config();
    return m;
}

inline CheckpointManifest read_checkpoint_manifest(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw DataError("checkpoint: cannot open '" + dir + "/manifest.json'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("checkpoint: parse error in '" + dir + "/manifest.json': " + e.what());
    }
    CheckpointManifest m;
    m.backend_kind = j.at("backend_kind").get<std::string>();
    m.n_layers = j.at("n_layers").get<int>();
    m.hidden_dim = j.at("hidden_dim").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.backend_config = j.value("backend_config", nlohmann::json::object());
    return m;
}

inline ParameterSnapshot read_checkpoint_parameters(const std::string& dir) {
    std::ifstream pf(dir + "/checkpoint.json");
    if (!pf) throw DataError("checkpoint: cannot open '" + dir + "/checkpoint.json'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(pf);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("checkpoint: parse error in '" + dir + "/checkpoint.json': " + e.what());
    }
    ParameterSnapshot snap;
    snap.architecture_hash = j.at("architecture_hash").get<std::string>();
    snap.values = j.at("values").get<std::vector<double>>();
    return snap;
}

}  // namespace scmbias
