#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scmbias/errors.hpp"

namespace scmbias {

enum class TermKind { target, attribute };

inline const char* to_string(TermKind k) { return k == TermKind::target ? "target" : "attribute"; }

inline TermKind term_kind_from_string(const std::string& s) {
    if (s == "target") return TermKind::target;
    if (s == "attribute") return TermKind::attribute;
    throw ValidationError("StimulusTerm: unknown kind '" + s + "'");
}

// One stimulus: a single word or name. Targets (proper names) keep their
// case; attribute terms are normalized to lowercase.
struct StimulusTerm {
    std::string surface;
    TermKind kind = TermKind::target;
    std::string group;

    auto operator<=>(const StimulusTerm&) const = default;
};

inline StimulusTerm make_term(std::string surface, TermKind kind, std::string group) {
    if (surface.empty()) throw ValidationError("StimulusTerm: empty surface");
    for (char c : surface) {
        if (std::isspace(static_cast<unsigned char>(c)))
            throw ValidationError("StimulusTerm: surface '" + surface + "' contains whitespace");
    }
    if (group.empty()) throw ValidationError("StimulusTerm '" + surface + "': empty group");
    if (kind == TermKind::attribute) {
        std::transform(surface.begin(), surface.end(), surface.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    }
    return StimulusTerm{std::move(surface), kind, std::move(group)};
}

// A named term list: one of the V_t target sets or an attribute word list.
struct StimulusSet {
    std::string name;
    TermKind kind = TermKind::target;
    std::vector<StimulusTerm> terms;

    bool operator==(const StimulusSet&) const = default;
};

// One SCM axis (warmth, competence): a high pole and a low pole of attribute
// terms, each capped (default 32 per the frequency selection).
struct AttributeDimension {
    std::string name;
    std::vector<StimulusTerm> pole_high;
    std::vector<StimulusTerm> pole_low;
    std::size_t pole_cap = 32;

    bool operator==(const AttributeDimension&) const = default;

    std::vector<StimulusTerm> all_terms() const {
        std::vector<StimulusTerm> out = pole_high;
        out.insert(out.end(), pole_low.begin(), pole_low.end());
        return out;
    }
};

// One association test: two target sets against two polar attribute sets.
// |X| == |Y| is not required; unequal sizes are permitted but flagged.
struct BiasTestSpec {
    std::string name;
    std::vector<StimulusTerm> targets_X;
    std::vector<StimulusTerm> targets_Y;
    std::vector<StimulusTerm> attributes_A;
    std::vector<StimulusTerm> attributes_B;

    bool operator==(const BiasTestSpec&) const = default;

    std::vector<StimulusTerm> all_terms() const {
        std::vector<StimulusTerm> out = targets_X;
        out.insert(out.end(), targets_Y.begin(), targets_Y.end());
        out.insert(out.end(), attributes_A.begin(), attributes_A.end());
        out.insert(out.end(), attributes_B.begin(), attributes_B.end());
        return out;
    }
};

struct Lexicon {
    std::vector<StimulusSet> stimulus_sets;
    std::vector<AttributeDimension> attribute_dimensions;
    std::vector<BiasTestSpec> bias_test_specs;

    bool operator==(const Lexicon&) const = default;

    // Every term that participates in fine-tuning data extraction: all
    // stimulus-set terms plus both poles of every dimension.
    std::vector<StimulusTerm> extraction_terms() const {
        std::vector<StimulusTerm> out;
        for (const auto& s : stimulus_sets) out.insert(out.end(), s.terms.begin(), s.terms.end());
        for (const auto& d : attribute_dimensions) {
            auto terms = d.all_terms();
            out.insert(out.end(), terms.begin(), terms.end());
        }
        return out;
    }

    // Fine-tuning terms plus every evaluation-spec term, deduplicated by
    // surface. This is the stimulus inventory corpus extraction runs with.
    std::vector<StimulusTerm> all_stimuli() const {
        std::vector<StimulusTerm> out;
        std::set<std::string> seen;
        auto add = [&](const std::vector<StimulusTerm>& terms) {
            for (const auto& t : terms)
                if (seen.insert(t.surface).second) out.push_back(t);
        };
        add(extraction_terms());
        for (const auto& spec : bias_test_specs) add(spec.all_terms());
        return out;
    }

    const AttributeDimension* find_dimension(const std::string& name) const {
        for (const auto& d : attribute_dimensions)
            if (d.name == name) return &d;
        return nullptr;
    }
};

namespace detail {

inline std::set<std::string> surfaces_of(const std::vector<StimulusTerm>& terms) {
    std::set<std::string> out;
    for (const auto& t : terms) out.insert(t.surface);
    return out;
}

}  // namespace detail

// ------------------------------------------------------------------
// Invariant validation
// ------------------------------------------------------------------

inline void validate(const AttributeDimension& d) {
    if (d.name.empty()) throw ValidationError("AttributeDimension: empty name");
    if (d.pole_high.empty())
        throw ValidationError("AttributeDimension '" + d.name + "': pole_high is empty");
    if (d.pole_low.empty())
        throw ValidationError("AttributeDimension '" + d.name + "': pole_low is empty");
    if (d.pole_high.size() > d.pole_cap || d.pole_low.size() > d.pole_cap)
        throw ValidationError("AttributeDimension '" + d.name + "': pole exceeds cap of " +
                              std::to_string(d.pole_cap));
    auto hi = detail::surfaces_of(d.pole_high);
    for (const auto& t : d.pole_low) {
        if (hi.count(t.surface))
            throw ValidationError("AttributeDimension '" + d.name + "': term '" + t.surface +
                                  "' appears in both poles");
    }
}

// Returns warnings (non-fatal findings); throws on invariant violations.
inline std::vector<std::string> validate(const BiasTestSpec& spec) {
    if (spec.name.empty()) throw ValidationError("BiasTestSpec: empty name");
    const std::vector<std::pair<const char*, const std::vector<StimulusTerm>*>> sets = {
        {"targets_X", &spec.targets_X},
        {"targets_Y", &spec.targets_Y},
        {"attributes_A", &spec.attributes_A},
        {"attributes_B", &spec.attributes_B},
    };
    for (const auto& [label, terms] : sets) {
        if (terms->empty())
            throw ValidationError("BiasTestSpec '" + spec.name + "': " + label + " is empty");
    }
    for (std::size_t i = 0; i < sets.size(); ++i) {
        auto si = detail::surfaces_of(*sets[i].second);
        for (std::size_t j = i + 1; j < sets.size(); ++j) {
            for (const auto& t : *sets[j].second) {
                if (si.count(t.surface))
                    throw ValidationError("BiasTestSpec '" + spec.name + "': '" + t.surface +
                                          "' appears in both " + sets[i].first + " and " +
                                          sets[j].first);
            }
        }
    }
    std::vector<std::string> warnings;
    if (spec.targets_X.size() != spec.targets_Y.size())
        warnings.push_back("BiasTestSpec '" + spec.name + "': unequal target sizes |X|=" +
                           std::to_string(spec.targets_X.size()) + " |Y|=" +
                           std::to_string(spec.targets_Y.size()));
    return warnings;
}

inline std::vector<std::string> validate(const Lexicon& lex) {
    std::vector<std::string> warnings;
    for (const auto& s : lex.stimulus_sets) {
        if (s.name.empty()) throw ValidationError("StimulusSet: empty name");
        if (s.terms.empty()) throw ValidationError("StimulusSet '" + s.name + "': no terms");
    }
    for (const auto& d : lex.attribute_dimensions) validate(d);
    for (const auto& spec : lex.bias_test_specs) {
        auto w = validate(spec);
        warnings.insert(warnings.end(), w.begin(), w.end());
    }
    return warnings;
}

// ------------------------------------------------------------------
// Operations
// ------------------------------------------------------------------

struct TopFrequentResult {
    std::vector<std::string> terms;   // highest count first, lexicographic tie-break
    bool undersupplied = false;       // fewer than k candidates were available
};

// Picks the k most frequent candidates. Every candidate must have an entry
// (possibly 0) in the frequency table.
inline TopFrequentResult select_top_frequent(const std::vector<std::string>& candidates,
                                             const std::map<std::string, long long>& frequency_table,
                                             int k) {
    if (k < 0) throw ValidationError("select_top_frequent: k must be >= 0, got " + std::to_string(k));
    std::vector<std::pair<long long, std::string>> ranked;
    ranked.reserve(candidates.size());
    for (const auto& c : candidates) {
        auto it = frequency_table.find(c);
        if (it == frequency_table.end())
            throw ValidationError("select_top_frequent: frequency table has no entry for '" + c + "'");
        ranked.emplace_back(it->second, c);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    TopFrequentResult out;
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    out.undersupplied = take < static_cast<std::size_t>(k);
    out.terms.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.terms.push_back(ranked[i].second);
    return out;
}

// Surfaces used both for fine-tuning and inside the evaluation spec. An empty
// report means the two stimulus inventories are disjoint; callers decide
// whether overlap is fatal.
inline std::vector<std::string> validate_disjoint(const std::vector<StimulusTerm>& debias_terms,
                                                  const BiasTestSpec& evaluation_spec) {
    auto left = detail::surfaces_of(debias_terms);
    auto right = detail::surfaces_of(evaluation_spec.all_terms());
    std::vector<std::string> overlap;
    std::set_intersection(left.begin(), left.end(), right.begin(), right.end(),
                          std::back_inserter(overlap));
    return overlap;
}

inline std::vector<std::string> validate_disjoint(const StimulusSet& debias_set,
                                                  const BiasTestSpec& evaluation_spec) {
    return validate_disjoint(debias_set.terms, evaluation_spec);
}

// ------------------------------------------------------------------
// JSON persistence
// ------------------------------------------------------------------

namespace detail {

inline nlohmann::json term_to_json(const StimulusTerm& t) {
    return nlohmann::json{{"surface", t.surface}, {"group", t.group}};
}

inline StimulusTerm term_from_json(const nlohmann::json& j, TermKind kind, const std::string& where) {
    if (!j.is_object() || !j.contains("surface") || !j.contains("group"))
        throw ValidationError("lexicon: " + where + ": term must be an object with surface and group");
    return make_term(j.at("surface").get<std::string>(), kind, j.at("group").get<std::string>());
}

inline nlohmann::json terms_to_json(const std::vector<StimulusTerm>& terms) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& t : terms) arr.push_back(term_to_json(t));
    return arr;
}

inline std::vector<StimulusTerm> terms_from_json(const nlohmann::json& arr, TermKind kind,
                                                 const std::string& where) {
    if (!arr.is_array()) throw ValidationError("lexicon: " + where + ": expected an array of terms");
    std::vector<StimulusTerm> out;
    out.reserve(arr.size());
    for (const auto& j : arr) out.push_back(term_from_json(j, kind, where));
    return out;
}

}  // namespace detail

inline nlohmann::json to_json(const Lexicon& lex) {
    nlohmann::json j;
    j["stimulus_sets"] = nlohmann::json::array();
    for (const auto& s : lex.stimulus_sets) {
        j["stimulus_sets"].push_back({{"name", s.name},
                                      {"kind", to_string(s.kind)},
                                      {"terms", detail::terms_to_json(s.terms)}});
    }
    j["attribute_dimensions"] = nlohmann::json::array();
    for (const auto& d : lex.attribute_dimensions) {
        j["attribute_dimensions"].push_back({{"name", d.name},
                                             {"pole_cap", d.pole_cap},
                                             {"pole_high", detail::terms_to_json(d.pole_high)},
                                             {"pole_low", detail::terms_to_json(d.pole_low)}});
    }
    j["bias_test_specs"] = nlohmann::json::array();
    for (const auto& t : lex.bias_test_specs) {
        j["bias_test_specs"].push_back({{"name", t.name},
                                        {"targets_X", detail::terms_to_json(t.targets_X)},
                                        {"targets_Y", detail::terms_to_json(t.targets_Y)},
                                        {"attributes_A", detail::terms_to_json(t.attributes_A)},
                                        {"attributes_B", detail::terms_to_json(t.attributes_B)}});
    }
    return j;
}

inline Lexicon lexicon_from_json(const nlohmann::json& j) {
    Lexicon lex;
    if (!j.is_object()) throw ValidationError("lexicon: top level must be an object");
    if (j.contains("stimulus_sets")) {
        for (const auto& s : j.at("stimulus_sets")) {
            StimulusSet set;
            set.name = s.at("name").get<std::string>();
            set.kind = term_kind_from_string(s.value("kind", std::string("target")));
            set.terms = detail::terms_from_json(s.at("terms"), set.kind, "stimulus_set '" + set.name + "'");
            lex.stimulus_sets.push_back(std::move(set));
        }
    }
    if (j.contains("attribute_dimensions")) {
        for (const auto& d : j.at("attribute_dimensions")) {
            AttributeDimension dim;
            dim.name = d.at("name").get<std::string>();
            dim.pole_cap = d.value("pole_cap", std::size_t{32});
            dim.pole_high = detail::terms_from_json(d.at("pole_high"), TermKind::attribute,
                                                    "dimension '" + dim.name + "' pole_high");
            dim.pole_low = detail::terms_from_json(d.at("pole_low"), TermKind::attribute,
                                                   "dimension '" + dim.name + "' pole_low");
            lex.attribute_dimensions.push_back(std::move(dim));
        }
    }
    if (j.contains("bias_test_specs")) {
        for (const auto& t : j.at("bias_test_specs")) {
            BiasTestSpec spec;
            spec.name = t.at("name").get<std::string>();
            const std::string where = "bias_test_spec '" + spec.name + "'";
            spec.targets_X = detail::terms_from_json(t.at("targets_X"), TermKind::target, where);
            spec.targets_Y = detail::terms_from_json(t.at("targets_Y"), TermKind::target, where);
            spec.attributes_A = detail::terms_from_json(t.at("attributes_A"), TermKind::attribute, where);
            spec.attributes_B = detail::terms_from_json(t.at("attributes_B"), TermKind::attribute, where);
            lex.bias_test_specs.push_back(std::move(spec));
        }
    }
    validate(lex);
    return lex;
}

inline Lexicon load_lexicon(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("lexicon: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("lexicon: parse error in '" + path + "': " + e.what());
    }
    try {
        return lexicon_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("lexicon: malformed '" + path + "': " + e.what());
    }
}

inline void save_lexicon(const Lexicon& lex, const std::string& path) {
    validate(lex);
    std::ofstream out(path);
    if (!out) throw DataError("lexicon: cannot write '" + path + "'");
    out << to_json(lex).dump(2) << "\n";
}

}  // namespace scmbias
