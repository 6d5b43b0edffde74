#pragma once

// Brute-force reference implementations used only by tests. Everything here
// is written directly from the statistic/loss definitions with plain loops
// and std::vector, independent of the library code paths it checks.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Vec& a, const Vec& b) { return dot(a, b) / (norm(a) * norm(b)); }

inline double association(const Vec& w, const std::vector<Vec>& A, const std::vector<Vec>& B) {
    double sa = 0.0;
    for (const auto& a : A) sa += cosine(w, a);
    sa /= static_cast<double>(A.size());
    double sb = 0.0;
    for (const auto& b : B) sb += cosine(w, b);
    sb /= static_cast<double>(B.size());
    return sa - sb;
}

inline double weat_effect_size(const std::vector<Vec>& X, const std::vector<Vec>& Y,
                               const std::vector<Vec>& A, const std::vector<Vec>& B) {
    std::vector<double> s;
    for (const auto& w : X) s.push_back(association(w, A, B));
    for (const auto& w : Y) s.push_back(association(w, A, B));
    double mx = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) mx += s[i];
    mx /= static_cast<double>(X.size());
    double my = 0.0;
    for (std::size_t i = X.size(); i < s.size(); ++i) my += s[i];
    my /= static_cast<double>(Y.size());
    double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    double ss = 0.0;
    for (double v : s) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / static_cast<double>(s.size() - 1));
    return (mx - my) / sd;
}

// Exact one- and two-sided permutation p-values by enumerating every size-|X|
// subset of X u Y via bitmask.
struct PermPair {
    double one_sided;
    double two_sided;
    std::uint64_t partitions;
};

inline PermPair exact_permutation_p(const std::vector<Vec>& X, const std::vector<Vec>& Y,
                                    const std::vector<Vec>& A, const std::vector<Vec>& B) {
    std::vector<double> s;
    for (const auto& w : X) s.push_back(association(w, A, B));
    for (const auto& w : Y) s.push_back(association(w, A, B));
    const std::size_t n = s.size(), nx = X.size();
    auto stat = [&](std::uint64_t mask) {
        double sx = 0.0, sy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask & (1ull << i))
                sx += s[i];
            else
                sy += s[i];
        }
        return sx / static_cast<double>(nx) - sy / static_cast<double>(n - nx);
    };
    std::uint64_t observed_mask = (1ull << nx) - 1;
    double observed = stat(observed_mask);
    const double tie = 1e-12 * std::max(1.0, std::abs(observed));
    std::uint64_t ge = 0, abs_ge = 0, total = 0;
    for (std::uint64_t mask = 0; mask < (1ull << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcountll(mask)) != nx) continue;
        ++total;
        double t = stat(mask);
        if (t >= observed - tie) ++ge;
        if (std::abs(t) >= std::abs(observed) - tie) ++abs_ge;
    }
    return {static_cast<double>(ge) / static_cast<double>(total),
            static_cast<double>(abs_ge) / static_cast<double>(total), total};
}

// L_i definitional quadruple loop: dims x targets x sentences x attributes,
// per layer. directions[d][a][layer] and targets[t][sentence][layer] are
// plain vectors.
inline double projection_loss(
    const std::vector<std::vector<std::vector<Vec>>>& target_layer_embeddings,  // [t][x][layer]
    const std::vector<std::vector<std::vector<Vec>>>& direction_layers,         // [d][a][layer]
    const std::vector<std::size_t>& layers)                                     // 0-based
{
    double total = 0.0;
    for (const auto& dim : direction_layers)
        for (const auto& target : target_layer_embeddings)
            for (const auto& sentence : target)
                for (const auto& attr : dim)
                    for (std::size_t li : layers) {
                        double ip = dot(attr[li], sentence[li]);
                        total += ip * ip;
                    }
    return total;
}

// L_reg definitional triple loop: sentences x pieces x layers.
inline double regularization_loss(
    const std::vector<std::vector<std::vector<Vec>>>& current,    // [x][layer][piece]
    const std::vector<std::vector<std::vector<Vec>>>& reference)  // same shape
{
    double total = 0.0;
    for (std::size_t x = 0; x < current.size(); ++x)
        for (std::size_t l = 0; l < current[x].size(); ++l)
            for (std::size_t p = 0; p < current[x][l].size(); ++p) {
                const Vec& c = current[x][l][p];
                const Vec& r = reference[x][l][p];
                for (std::size_t i = 0; i < c.size(); ++i) {
                    double d = c[i] - r[i];
                    total += d * d;
                }
            }
    return total;
}

// Whole-word occurrence counter used to re-check the exactly-one rule.
inline std::size_t count_word_occurrences(const std::string& text, const std::string& word,
                                          bool case_sensitive) {
    auto is_word_char = [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '\'';
    };
    auto eq = [&](char a, char b) {
        if (case_sensitive) return a == b;
        auto lo = [](char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; };
        return lo(a) == lo(b);
    };
    std::size_t count = 0;
    if (word.empty() || word.size() > text.size()) return 0;
    for (std::size_t pos = 0; pos + word.size() <= text.size(); ++pos) {
        bool match = true;
        for (std::size_t i = 0; i < word.size() && match; ++i) match = eq(text[pos + i], word[i]);
        if (!match) continue;
        bool left = pos == 0 || !is_word_char(text[pos - 1]);
        bool right = pos + word.size() == text.size() || !is_word_char(text[pos + word.size()]);
        if (left && right) ++count;
    }
    return count;
}

}  // namespace oracle
