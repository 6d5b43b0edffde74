#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "scmbias/errors.hpp"
#include "scmbias/lexicon.hpp"
#include "scmbias/rng.hpp"

namespace scmbias {

// ------------------------------------------------------------------
// WEAT statistics over contextual embedding samples.
// ------------------------------------------------------------------

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine: zero-norm vector");
    return a.dot(b) / (na * nb);
}

// s(w, A, B) = mean_a cos(w, a) - mean_b cos(w, b). Result lies in [-2, 2].
inline double association(const Eigen::VectorXd& w, std::span<const Eigen::VectorXd> A,
                          std::span<const Eigen::VectorXd> B) {
    if (A.empty() || B.empty()) throw ValidationError("association: empty attribute set");
    double sa = 0.0, sb = 0.0;
    for (const auto& a : A) sa += cosine(w, a);
    for (const auto& b : B) sb += cosine(w, b);
    return sa / static_cast<double>(A.size()) - sb / static_cast<double>(B.size());
}

// d = [mean_X s - mean_Y s] / stdev_{X u Y} s, sample standard deviation.
// Antisymmetric under swapping X and Y, and under swapping A and B.
inline double weat_effect_size(std::span<const Eigen::VectorXd> X, std::span<const Eigen::VectorXd> Y,
                               std::span<const Eigen::VectorXd> A, std::span<const Eigen::VectorXd> B) {
    if (X.empty() || Y.empty()) throw ValidationError("weat_effect_size: empty target set");
    if (X.size() + Y.size() < 2)
        throw ValidationError("weat_effect_size: pooled stdev needs at least 2 target points");
    std::vector<double> s;
    s.reserve(X.size() + Y.size());
    double mean_x = 0.0, mean_y = 0.0;
    for (const auto& w : X) {
        s.push_back(association(w, A, B));
        mean_x += s.back();
    }
    for (const auto& w : Y) {
        s.push_back(association(w, A, B));
        mean_y += s.back();
    }
    mean_x /= static_cast<double>(X.size());
    mean_y /= static_cast<double>(Y.size());

    double mean = 0.0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    double ss = 0.0;
    for (double v : s) ss += (v - mean) * (v - mean);
    double stdev = std::sqrt(ss / static_cast<double>(s.size() - 1));
    if (stdev == 0.0)
        throw NumericError("weat_effect_size: association values are constant over X u Y");
    return (mean_x - mean_y) / stdev;
}

// ------------------------------------------------------------------
// Permutation significance.
// ------------------------------------------------------------------

struct PermutationPvalue {
    double one_sided = 1.0;  // Pr[ mean_{X*}s - mean_{Y*}s >= observed ]
    double two_sided = 1.0;  // same on |statistic|
    bool exact = false;
    std::uint64_t partitions = 0;  // enumerated partitions or Monte Carlo draws
};

namespace detail {

inline std::uint64_t partition_count(std::size_t n, std::size_t k, std::uint64_t cap) {
    // C(n, k), saturating at cap to avoid overflow.
    long double c = 1.0L;
    for (std::size_t i = 1; i <= k; ++i) {
        c = c * static_cast<long double>(n - k + i) / static_cast<long double>(i);
        if (c > static_cast<long double>(cap) * 2.0L) return cap * 2;
    }
    return static_cast<std::uint64_t>(c + 0.5L);
}

}  // namespace detail

// Significance of the differential association under the null that the
// labels X/Y are exchangeable: the share of size-|X| re-partitions of X u Y
// whose statistic reaches the observed one. Exact enumeration while the
// partition count fits the cap, seeded Monte Carlo beyond it.
inline PermutationPvalue weat_pvalue(std::span<const Eigen::VectorXd> X,
                                     std::span<const Eigen::VectorXd> Y,
                                     std::span<const Eigen::VectorXd> A,
                                     std::span<const Eigen::VectorXd> B,
                                     std::uint64_t max_exact_partitions = 200000,
                                     std::uint64_t mc_draws = 10000, std::uint64_t seed = 0) {
    if (X.empty() || Y.empty()) throw ValidationError("weat_pvalue: empty target set");
    std::vector<double> s;
    s.reserve(X.size() + Y.size());
    for (const auto& w : X) s.push_back(association(w, A, B));
    for (const auto& w : Y) s.push_back(association(w, A, B));

    const std::size_t nx = X.size();
    const std::size_t n = s.size();
    double total = 0.0;
    for (double v : s) total += v;

    // statistic for a chosen X*-index set, via its sum
    auto statistic = [&](double sum_x) {
        double sum_y = total - sum_x;
        return sum_x / static_cast<double>(nx) - sum_y / static_cast<double>(n - nx);
    };

    double observed_sum = 0.0;
    for (std::size_t i = 0; i < nx; ++i) observed_sum += s[i];
    const double observed = statistic(observed_sum);
    const double abs_observed = std::abs(observed);
    // tie tolerance: mirrored partitions reproduce the observed statistic up
    // to rounding, and ties must count as "reached"
    const double tie = 1e-12 * std::max(1.0, abs_observed);

    PermutationPvalue out;
    const std::uint64_t count = detail::partition_count(n, nx, max_exact_partitions);
    if (count <= max_exact_partitions) {
        // lexicographic enumeration of all C(n, nx) index subsets
        std::vector<std::size_t> idx(nx);
        for (std::size_t i = 0; i < nx; ++i) idx[i] = i;
        std::uint64_t ge = 0, abs_ge = 0, generated = 0;
        for (;;) {
            double sum_x = 0.0;
            for (std::size_t i : idx) sum_x += s[i];
            double t = statistic(sum_x);
            if (t >= observed - tie) ++ge;
            if (std::abs(t) >= abs_observed - tie) ++abs_ge;
            ++generated;

            std::size_t i = nx;
            while (i > 0 && idx[i - 1] == n - nx + i - 1) --i;
            if (i == 0) break;
            ++idx[i - 1];
            for (std::size_t j = i; j < nx; ++j) idx[j] = idx[j - 1] + 1;
        }
        out.one_sided = static_cast<double>(ge) / static_cast<double>(generated);
        out.two_sided = static_cast<double>(abs_ge) / static_cast<double>(generated);
        out.exact = true;
        out.partitions = generated;
        return out;
    }

    Rng rng(derive_seed(seed, "ceat.permutation"));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::uint64_t ge = 0, abs_ge = 0;
    for (std::uint64_t d = 0; d < mc_draws; ++d) {
        rng.shuffle(order);
        double sum_x = 0.0;
        for (std::size_t i = 0; i < nx; ++i) sum_x += s[order[i]];
        double t = statistic(sum_x);
        if (t >= observed - tie) ++ge;
        if (std::abs(t) >= abs_observed - tie) ++abs_ge;
    }
    out.one_sided = static_cast<double>(ge) / static_cast<double>(mc_draws);
    out.two_sided = static_cast<double>(abs_ge) / static_cast<double>(mc_draws);
    out.exact = false;
    out.partitions = mc_draws;
    return out;
}

// ------------------------------------------------------------------
// Combination sampling: the CEAT's distribution of effect sizes.
// ------------------------------------------------------------------

// One embedding occurrence available for drawing.
struct PooledEmbedding {
    Eigen::VectorXd vec;
    std::string id;  // source_id of the sentence occurrence
};

// surface -> available contextual embeddings (a single chosen layer)
using EmbeddingPools = std::map<std::string, std::vector<PooledEmbedding>>;

// Reads the embed module's JSON-lines dump, keeping the records of one
// layer. layer <= 0 selects the highest layer present.
inline EmbeddingPools load_embedding_dump(const std::string& path, int layer = 0) {
    std::ifstream in(path);
    if (!in) throw DataError("embedding dump: cannot open '" + path + "'");
    struct Row {
        std::string surface, id;
        int layer;
        Eigen::VectorXd vec;
    };
    std::vector<Row> rows;
    int max_layer = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ValidationError("embedding dump: parse error at '" + path + "' line " +
                                  std::to_string(line_no) + ": " + e.what());
        }
        Row row;
        row.surface = j.at("surface").get<std::string>();
        row.id = j.at("source_id").get<std::string>();
        row.layer = j.at("layer").get<int>();
        auto values = j.at("vector").get<std::vector<double>>();
        row.vec = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                                    static_cast<Eigen::Index>(values.size()));
        max_layer = std::max(max_layer, row.layer);
        rows.push_back(std::move(row));
    }
    const int wanted = layer <= 0 ? max_layer : layer;
    EmbeddingPools pools;
    for (auto& row : rows) {
        if (row.layer != wanted) continue;
        pools[row.surface].push_back({std::move(row.vec), std::move(row.id)});
    }
    if (pools.empty())
        throw DataError("embedding dump: no records for layer " + std::to_string(wanted) + " in '" +
                        path + "'");
    return pools;
}

struct EffectSizeSample {
    double es = 0.0;
    double variance = 0.0;
    std::uint64_t draw_seed = 0;
    std::vector<std::string> member_ids;
};

// Asymptotic variance of a standardized mean difference with group sizes
// n_x, n_y: (n_x+n_y)/(n_x*n_y) + d^2 / (2(n_x+n_y)).
inline double smd_variance(double d, std::size_t n_x, std::size_t n_y) {
    auto nx = static_cast<double>(n_x), ny = static_cast<double>(n_y);
    return (nx + ny) / (nx * ny) + d * d / (2.0 * (nx + ny));
}

// Draws n_samples WEAT instances: per sample, `per_term_draw` embeddings per
// stimulus (without replacement within a sample when supply allows, with
// replacement across samples). Per-sample seed substreams keep the result
// independent of evaluation order.
inline std::vector<EffectSizeSample> sample_combinations(const EmbeddingPools& pools,
                                                         const BiasTestSpec& spec, int n_samples,
                                                         int per_term_draw, std::uint64_t seed) {
    if (n_samples < 1) throw ValidationError("sample_combinations: n_samples must be >= 1");
    if (per_term_draw < 1) throw ValidationError("sample_combinations: per_term_draw must be >= 1");
    for (const auto& term : spec.all_terms()) {
        auto it = pools.find(term.surface);
        if (it == pools.end() || it->second.empty())
            throw DataError("sample_combinations: no embeddings for stimulus '" + term.surface +
                            "' (test '" + spec.name + "')");
    }

    std::vector<EffectSizeSample> samples;
    samples.reserve(static_cast<std::size_t>(n_samples));
    const std::size_t k = static_cast<std::size_t>(per_term_draw);

    for (int j = 0; j < n_samples; ++j) {
        EffectSizeSample sample;
        sample.draw_seed = derive_seed(seed, "ceat.sample", static_cast<std::uint64_t>(j));
        Rng rng(sample.draw_seed);

        auto draw_set = [&](const std::vector<StimulusTerm>& terms) {
            std::vector<Eigen::VectorXd> vecs;
            vecs.reserve(terms.size() * k);
            for (const auto& term : terms) {
                const auto& pool = pools.at(term.surface);
                if (pool.size() >= k) {
                    for (std::size_t idx : rng.sample_without_replacement(pool.size(), k)) {
                        vecs.push_back(pool[idx].vec);
                        sample.member_ids.push_back(pool[idx].id);
                    }
                } else {
                    for (std::size_t c = 0; c < k; ++c) {  // under-supplied: with replacement
                        std::size_t idx = static_cast<std::size_t>(rng.next_below(pool.size()));
                        vecs.push_back(pool[idx].vec);
                        sample.member_ids.push_back(pool[idx].id);
                    }
                }
            }
            return vecs;
        };

        auto X = draw_set(spec.targets_X);
        auto Y = draw_set(spec.targets_Y);
        auto A = draw_set(spec.attributes_A);
        auto B = draw_set(spec.attributes_B);
        sample.es = weat_effect_size(X, Y, A, B);
        sample.variance = smd_variance(sample.es, X.size(), Y.size());
        samples.push_back(std::move(sample));
    }
    return samples;
}

// ------------------------------------------------------------------
// Random-effects combination (DerSimonian-Laird).
// ------------------------------------------------------------------

enum class EffectClass { very_small, small, medium, large };

inline const char* to_string(EffectClass c) {
    switch (c) {
        case EffectClass::very_small: return "very_small";
        case EffectClass::small: return "small";
        case EffectClass::medium: return "medium";
        case EffectClass::large: return "large";
    }
    return "?";
}

inline EffectClass effect_class_from_string(const std::string& s) {
    if (s == "very_small") return EffectClass::very_small;
    if (s == "small") return EffectClass::small;
    if (s == "medium") return EffectClass::medium;
    if (s == "large") return EffectClass::large;
    throw ValidationError("unknown effect classification '" + s + "'");
}

// |ces| >= 0.8 large, >= 0.5 medium, >= 0.2 small, else very small.
inline EffectClass classify_effect(double ces) {
    double a = std::abs(ces);
    if (a >= 0.8) return EffectClass::large;
    if (a >= 0.5) return EffectClass::medium;
    if (a >= 0.2) return EffectClass::small;
    return EffectClass::very_small;
}

inline double normal_two_tailed_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

struct MetaAnalysisResult {
    double ces = 0.0;
    double tau2 = 0.0;
    double se = 0.0;
    double z = 0.0;
    double p = 1.0;  // two-tailed normal
    int n_samples = 0;
    EffectClass classification = EffectClass::very_small;
    int clamped_variances = 0;  // V_j <= 0 inputs clamped to the floor
};

// DerSimonian-Laird: W_j = 1/V_j; Q = sum W_j (es_j - es_FE)^2;
// C = sum W - sum W^2 / sum W; tau2 = max(0, (Q - (n-1))/C);
// v_j = 1/(V_j + tau2); CES = sum v es / sum v; SE = (sum v)^(-1/2).
inline MetaAnalysisResult combine_random_effects(const std::vector<EffectSizeSample>& samples,
                                                 double variance_floor = 1e-12) {
    if (samples.size() < 2)
        throw ValidationError("combine_random_effects: need at least 2 samples, got " +
                              std::to_string(samples.size()));
    MetaAnalysisResult r;
    r.n_samples = static_cast<int>(samples.size());

    std::vector<double> es(samples.size()), V(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        es[i] = samples[i].es;
        V[i] = samples[i].variance;
        if (!std::isfinite(es[i]) || !std::isfinite(V[i]))
            throw NumericError("combine_random_effects: non-finite sample " + std::to_string(i));
        if (V[i] < variance_floor) {
            V[i] = variance_floor;
            ++r.clamped_variances;
        }
    }

    double sum_w = 0.0, sum_w2 = 0.0, sum_wes = 0.0;
    for (std::size_t i = 0; i < es.size(); ++i) {
        double w = 1.0 / V[i];
        sum_w += w;
        sum_w2 += w * w;
        sum_wes += w * es[i];
    }
    const double fe = sum_wes / sum_w;
    double q = 0.0;
    for (std::size_t i = 0; i < es.size(); ++i) q += (es[i] - fe) * (es[i] - fe) / V[i];
    const double c = sum_w - sum_w2 / sum_w;
    const double df = static_cast<double>(es.size() - 1);
    r.tau2 = (c > 0.0) ? std::max(0.0, (q - df) / c) : 0.0;

    double sum_v = 0.0, sum_ves = 0.0;
    for (std::size_t i = 0; i < es.size(); ++i) {
        double v = 1.0 / (V[i] + r.tau2);
        sum_v += v;
        sum_ves += v * es[i];
    }
    r.ces = sum_ves / sum_v;
    r.se = 1.0 / std::sqrt(sum_v);
    r.z = r.ces / r.se;
    r.p = normal_two_tailed_p(r.z);
    r.classification = classify_effect(r.ces);
    return r;
}

// ------------------------------------------------------------------
// Results file: one row per bias test.
// ------------------------------------------------------------------

struct TestResult {
    std::string test_name;
    MetaAnalysisResult meta;
    std::string config_hash;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const TestResult& t) {
    return {{"test_name", t.test_name}, {"ces", t.meta.ces},
            {"tau2", t.meta.tau2},      {"se", t.meta.se},
            {"z", t.meta.z},            {"p", t.meta.p},
            {"n_samples", t.meta.n_samples},
            {"classification", to_string(t.meta.classification)},
            {"config_hash", t.config_hash},
            {"seed", t.seed}};
}

inline TestResult test_result_from_json(const nlohmann::json& j) {
    TestResult t;
    t.test_name = j.at("test_name").get<std::string>();
    t.meta.ces = j.at("ces").get<double>();
    t.meta.tau2 = j.at("tau2").get<double>();
    t.meta.se = j.at("se").get<double>();
    t.meta.z = j.at("z").get<double>();
    t.meta.p = j.at("p").get<double>();
    t.meta.n_samples = j.at("n_samples").get<int>();
    t.meta.classification = effect_class_from_string(j.at("classification").get<std::string>());
    t.config_hash = j.value("config_hash", std::string{});
    t.seed = j.value("seed", std::uint64_t{0});
    return t;
}

inline void write_results(const std::vector<TestResult>& results, const std::string& path,
                          const std::string& manifest_id = {}) {
    nlohmann::json j;
    if (!manifest_id.empty()) j["manifest_id"] = manifest_id;
    j["results"] = nlohmann::json::array();
    for (const auto& r : results) j["results"].push_back(to_json(r));
    std::ofstream out(path);
    if (!out) throw DataError("results: cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

inline std::vector<TestResult> load_results(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("results: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError("results: parse error in '" + path + "': " + e.what());
    }
    std::vector<TestResult> out;
    try {
        for (const auto& row : j.at("results")) out.push_back(test_result_from_json(row));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("results: malformed '" + path + "': " + e.what());
    }
    return out;
}

}  // namespace scmbias
