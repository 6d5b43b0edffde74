#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "scmbias/errors.hpp"
#include "scmbias/hash.hpp"
#include "scmbias/lexicon.hpp"
#include "scmbias/rng.hpp"

namespace scmbias {

// One sentence that contains exactly one stimulus occurrence.
struct SentenceRecord {
    std::string text;
    StimulusTerm stimulus;
    std::size_t span_begin = 0;  // [begin, end) character offsets of the occurrence
    std::size_t span_end = 0;
    int token_count = 0;
    std::string source_id;

    bool operator==(const SentenceRecord&) const = default;
};

struct PoolProvenance {
    std::string corpus_id;
    std::uint64_t seed = 0;
    std::string config_hash;

    bool operator==(const PoolProvenance&) const = default;
};

// Stimulus -> contextualization sentences. Keys are ordered by surface, so
// iteration (and the JSON layout) is deterministic.
struct SentencePool {
    std::map<std::string, std::vector<SentenceRecord>> entries;
    PoolProvenance provenance;

    bool operator==(const SentencePool&) const = default;

    std::size_t total_records() const {
        std::size_t n = 0;
        for (const auto& [_, recs] : entries) n += recs.size();
        return n;
    }

    const std::vector<SentenceRecord>* find(const std::string& surface) const {
        auto it = entries.find(surface);
        return it == entries.end() ? nullptr : &it->second;
    }
};

using TokenCounter = std::function<int(std::string_view)>;

inline int whitespace_token_count(std::string_view text) {
    int n = 0;
    bool in_token = false;
    for (char c : text) {
        bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (!ws && !in_token) ++n;
        in_token = !ws;
    }
    return n;
}

// ------------------------------------------------------------------
// Matching rules: whole-word boundary match, case-sensitive for targets
// (proper names), case-insensitive for attributes. Morphological variants
// never match ("warmly" does not contain an occurrence of "warm").
// ------------------------------------------------------------------

namespace detail {

inline bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '\'';
}

inline char fold(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

inline bool equals_at(std::string_view text, std::size_t pos, std::string_view surface,
                      bool case_sensitive) {
    if (pos + surface.size() > text.size()) return false;
    for (std::size_t i = 0; i < surface.size(); ++i) {
        char a = text[pos + i], b = surface[i];
        if (case_sensitive ? a != b : fold(a) != fold(b)) return false;
    }
    return true;
}

}  // namespace detail

// All whole-word occurrences of `term` in `text`, as [begin, end) spans.
inline std::vector<std::pair<std::size_t, std::size_t>> find_occurrences(std::string_view text,
                                                                         const StimulusTerm& term) {
    const bool case_sensitive = term.kind == TermKind::target;
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    const std::size_t len = term.surface.size();
    if (len == 0 || len > text.size()) return spans;
    for (std::size_t pos = 0; pos + len <= text.size(); ++pos) {
        if (!detail::equals_at(text, pos, term.surface, case_sensitive)) continue;
        bool left_ok = pos == 0 || !detail::is_word_char(text[pos - 1]);
        bool right_ok = pos + len == text.size() || !detail::is_word_char(text[pos + len]);
        if (left_ok && right_ok) spans.emplace_back(pos, pos + len);
    }
    return spans;
}

// ------------------------------------------------------------------
// Sentence segmentation: newlines normalized to spaces, then split on
// [.!?] runs followed by whitespace. Terminators stay with their sentence.
// ------------------------------------------------------------------

inline std::vector<std::string> split_sentences(std::string_view document) {
    std::string normalized;
    normalized.reserve(document.size());
    for (std::size_t i = 0; i < document.size(); ++i) {
        char c = document[i];
        if (c == '\r') {
            if (i + 1 < document.size() && document[i + 1] == '\n') continue;
            c = '\n';
        }
        normalized += (c == '\n') ? ' ' : c;
    }

    auto is_terminator = [](char c) { return c == '.' || c == '!' || c == '?'; };
    std::vector<std::string> sentences;
    std::size_t start = 0;
    for (std::size_t i = 0; i < normalized.size(); ++i) {
        if (!is_terminator(normalized[i])) continue;
        std::size_t j = i;
        while (j + 1 < normalized.size() && is_terminator(normalized[j + 1])) ++j;
        bool at_end = j + 1 == normalized.size();
        if (at_end || std::isspace(static_cast<unsigned char>(normalized[j + 1]))) {
            sentences.push_back(normalized.substr(start, j + 1 - start));
            start = j + 1;
        }
        i = j;
    }
    if (start < normalized.size()) sentences.push_back(normalized.substr(start));

    std::vector<std::string> out;
    out.reserve(sentences.size());
    for (auto& s : sentences) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        if (e > b) out.push_back(s.substr(b, e - b));
    }
    return out;
}

// ------------------------------------------------------------------
// Extraction
// ------------------------------------------------------------------

struct ExtractionConfig {
    int max_tokens = 128;
    std::string corpus_id = "corpus";

    std::string hash() const {
        nlohmann::json j{{"max_tokens", max_tokens}, {"corpus_id", corpus_id}};
        return digest_hex(j.dump());
    }
};

struct ExtractionStats {
    std::size_t documents_read = 0;
    std::size_t documents_skipped = 0;   // unreadable / malformed, counted, never fatal
    std::size_t sentences_seen = 0;
    std::size_t rejected_multi_stimulus = 0;
    std::size_t rejected_over_budget = 0;
    std::size_t accepted = 0;
};

struct ExtractionResult {
    SentencePool pool;
    ExtractionStats stats;
};

// Parses a corpus line: plain text, or newline-delimited JSON with a `body`
// field (comment-dump style). Returns nullopt for unusable lines.
inline std::optional<std::string> document_body(const std::string& line) {
    std::size_t first = line.find_first_not_of(" \t");
    if (first == std::string::npos) return std::nullopt;
    if (line[first] == '{') {
        try {
            auto j = nlohmann::json::parse(line);
            if (!j.is_object() || !j.contains("body") || !j.at("body").is_string()) return std::nullopt;
            return j.at("body").get<std::string>();
        } catch (const nlohmann::json::parse_error&) {
            return std::nullopt;
        }
    }
    return line;
}

// Streams documents and keeps every sentence that contains exactly one
// occurrence of exactly one configured stimulus within the token budget.
inline ExtractionResult extract_pool(std::istream& documents,
                                     const std::vector<StimulusTerm>& stimuli,
                                     const ExtractionConfig& config = {},
                                     const TokenCounter& token_counter = whitespace_token_count) {
    if (stimuli.empty()) throw ValidationError("extract_pool: no stimuli configured");
    if (!token_counter) throw ValidationError("extract_pool: token counter not set");
    if (config.max_tokens <= 0) throw ValidationError("extract_pool: max_tokens must be positive");

    ExtractionResult result;
    result.pool.provenance.corpus_id = config.corpus_id;
    result.pool.provenance.config_hash = config.hash();

    std::string line;
    std::size_t doc_index = 0;
    while (std::getline(documents, line)) {
        ++doc_index;
        ++result.stats.documents_read;
        auto body = document_body(line);
        if (!body) {
            ++result.stats.documents_skipped;
            continue;
        }
        auto sentences = split_sentences(*body);
        std::size_t sentence_index = 0;
        for (const auto& sentence : sentences) {
            ++sentence_index;
            ++result.stats.sentences_seen;

            // Exactly-one rule: one occurrence of one stimulus, across all
            // configured stimuli. Anything else is discarded.
            const StimulusTerm* matched = nullptr;
            std::pair<std::size_t, std::size_t> span{0, 0};
            std::size_t occurrences = 0;
            for (const auto& term : stimuli) {
                auto spans = find_occurrences(sentence, term);
                occurrences += spans.size();
                if (occurrences > 1) break;
                if (spans.size() == 1) {
                    matched = &term;
                    span = spans.front();
                }
            }
            if (occurrences != 1) {
                if (occurrences > 1) ++result.stats.rejected_multi_stimulus;
                continue;
            }

            int tokens = token_counter(sentence);
            if (tokens > config.max_tokens) {
                ++result.stats.rejected_over_budget;
                continue;
            }

            SentenceRecord rec;
            rec.text = sentence;
            rec.stimulus = *matched;
            rec.span_begin = span.first;
            rec.span_end = span.second;
            rec.token_count = tokens;
            {
                // Zero-padded so lexicographic source_id order == stream order;
                // shard-parallel extraction can merge on this key.
                std::ostringstream id;
                id << config.corpus_id << ":";
                id.fill('0');
                id.width(9);
                id << doc_index;
                id << ":";
                id.width(4);
                id << sentence_index;
                rec.source_id = id.str();
            }
            result.pool.entries[matched->surface].push_back(std::move(rec));
            ++result.stats.accepted;
        }
    }
    return result;
}

// ------------------------------------------------------------------
// Dev subsampling
// ------------------------------------------------------------------

// Keeps min(n, available) records per stimulus, seeded draw without
// replacement. Selected records stay in their original (source_id) order.
inline SentencePool subsample_dev(const SentencePool& pool, std::size_t n, std::uint64_t seed) {
    SentencePool out;
    out.provenance = pool.provenance;
    out.provenance.seed = seed;
    for (const auto& [surface, records] : pool.entries) {
        if (records.size() <= n) {
            out.entries[surface] = records;
            continue;
        }
        Rng rng(derive_seed(seed, "corpus.subsample." + surface));
        auto chosen = rng.sample_without_replacement(records.size(), n);
        std::sort(chosen.begin(), chosen.end());
        auto& dst = out.entries[surface];
        dst.reserve(n);
        for (std::size_t idx : chosen) dst.push_back(records[idx]);
    }
    return out;
}

// ------------------------------------------------------------------
// Pool statistics
// ------------------------------------------------------------------

struct GroupCount {
    std::string name;
    TermKind kind = TermKind::target;
    std::size_t count = 0;
    bool sufficient = false;
};

struct PoolStats {
    std::map<std::string, std::size_t> per_term;
    std::vector<GroupCount> per_dimension;  // target sets and attribute dimensions
    std::size_t floor = 24000;

    bool all_sufficient() const {
        for (const auto& g : per_dimension)
            if (!g.sufficient) return false;
        return !per_dimension.empty();
    }
};

// Counts per stimulus and per dimension (each target set is one dimension;
// each attribute dimension aggregates both poles). Flags run on aggregates.
inline PoolStats pool_stats(const SentencePool& pool, const Lexicon& lex, std::size_t floor = 24000) {
    PoolStats stats;
    stats.floor = floor;
    for (const auto& [surface, records] : pool.entries) stats.per_term[surface] = records.size();

    auto count_for = [&](const std::vector<StimulusTerm>& terms) {
        std::size_t n = 0;
        for (const auto& t : terms) {
            auto it = pool.entries.find(t.surface);
            if (it != pool.entries.end()) n += it->second.size();
        }
        return n;
    };

    for (const auto& set : lex.stimulus_sets) {
        GroupCount g{set.name, set.kind, count_for(set.terms), false};
        g.sufficient = g.count >= floor;
        stats.per_dimension.push_back(std::move(g));
    }
    for (const auto& dim : lex.attribute_dimensions) {
        GroupCount g{dim.name, TermKind::attribute, count_for(dim.all_terms()), false};
        g.sufficient = g.count >= floor;
        stats.per_dimension.push_back(std::move(g));
    }
    return stats;
}

// ------------------------------------------------------------------
// JSON persistence
// Layout: { "<surface>": [{text, start, end, token_count, source_id}, ...] }
// plus a reserved "__provenance__" entry. Loading resolves surfaces back to
// terms against the configured stimuli.
// ------------------------------------------------------------------

inline constexpr const char* kPoolProvenanceKey = "__provenance__";

inline nlohmann::json to_json(const SentencePool& pool) {
    nlohmann::json j = nlohmann::json::object();
    j[kPoolProvenanceKey] = {{"corpus_id", pool.provenance.corpus_id},
                             {"seed", pool.provenance.seed},
                             {"config_hash", pool.provenance.config_hash}};
    for (const auto& [surface, records] : pool.entries) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : records) {
            arr.push_back({{"text", r.text},
                           {"start", r.span_begin},
                           {"end", r.span_end},
                           {"token_count", r.token_count},
                           {"source_id", r.source_id}});
        }
        j[surface] = std::move(arr);
    }
    return j;
}

inline void save_pool(const SentencePool& pool, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("pool: cannot write '" + path + "'");
    out << to_json(pool).dump(2) << "\n";
}

inline SentencePool pool_from_json(const nlohmann::json& j, const std::vector<StimulusTerm>& stimuli) {
    if (!j.is_object()) throw ValidationError("pool: top level must be an object");
    std::map<std::string, const StimulusTerm*> by_surface;
    for (const auto& t : stimuli) by_surface[t.surface] = &t;

    SentencePool pool;
    for (const auto& [key, value] : j.items()) {
        if (key == kPoolProvenanceKey) {
            pool.provenance.corpus_id = value.value("corpus_id", std::string{});
            pool.provenance.seed = value.value("seed", std::uint64_t{0});
            pool.provenance.config_hash = value.value("config_hash", std::string{});
            continue;
        }
        auto it = by_surface.find(key);
        if (it == by_surface.end())
            throw DataError("pool: stimulus '" + key + "' is not in the configured lexicon");
        auto& dst = pool.entries[key];
        for (const auto& r : value) {
            SentenceRecord rec;
            rec.text = r.at("text").get<std::string>();
            rec.stimulus = *it->second;
            rec.span_begin = r.at("start").get<std::size_t>();
            rec.span_end = r.at("end").get<std::size_t>();
            rec.token_count = r.at("token_count").get<int>();
            rec.source_id = r.at("source_id").get<std::string>();
            dst.push_back(std::move(rec));
        }
    }
    return pool;
}

inline SentencePool load_pool(const std::string& path, const std::vector<StimulusTerm>& stimuli) {
    std::ifstream in(path);
    if (!in) throw DataError("pool: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("pool: parse error in '" + path + "': " + e.what());
    }
    try {
        return pool_from_json(j, stimuli);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("pool: malformed '" + path + "': " + e.what());
    }
}

}  // namespace scmbias
