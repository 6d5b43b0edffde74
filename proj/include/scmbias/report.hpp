#pragma once

#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "scmbias/ceat.hpp"
#include "scmbias/embed.hpp"
#include "scmbias/errors.hpp"

namespace scmbias {

// Before/after comparison, one row per bias test.
struct ComparisonRow {
    std::string test_name;
    double ces_before = 0.0;
    double p_before = 1.0;
    double ces_after = 0.0;
    double p_after = 1.0;
    EffectClass class_before = EffectClass::very_small;
    EffectClass class_after = EffectClass::very_small;
    bool reduced_to_very_small = false;  // |ces_after| < 0.2
};

struct ComparisonReport {
    std::vector<ComparisonRow> rows;
};

inline ComparisonReport build_comparison(const std::vector<TestResult>& before,
                                         const std::vector<TestResult>& after) {
    std::map<std::string, const TestResult*> after_by_name;
    for (const auto& r : after) after_by_name[r.test_name] = &r;
    if (after.size() != before.size())
        throw ValidationError("report: before has " + std::to_string(before.size()) +
                              " tests, after has " + std::to_string(after.size()));
    ComparisonReport report;
    for (const auto& b : before) {
        auto it = after_by_name.find(b.test_name);
        if (it == after_by_name.end())
            throw ValidationError("report: test '" + b.test_name + "' missing from the after results");
        const auto& a = *it->second;
        ComparisonRow row;
        row.test_name = b.test_name;
        row.ces_before = b.meta.ces;
        row.p_before = b.meta.p;
        row.ces_after = a.meta.ces;
        row.p_after = a.meta.p;
        row.class_before = b.meta.classification;
        row.class_after = a.meta.classification;
        row.reduced_to_very_small = std::abs(a.meta.ces) < 0.2;
        report.rows.push_back(std::move(row));
    }
    return report;
}

namespace detail {

inline std::string fixed2(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

inline std::string full_precision(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

// Text table, 2-decimal numbers. "*" marks two-tailed p < 0.05; rows whose
// post-debias |CES| dropped below 0.2 are flagged in the last column.
inline std::string render_text_report(const ComparisonReport& report) {
    std::size_t name_width = 4;
    for (const auto& r : report.rows) name_width = std::max(name_width, r.test_name.size());

    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(name_width)) << "Test"
       << "  " << std::right << std::setw(12) << "CES(before)" << std::setw(5) << "Sig"
       << std::setw(12) << "CES(after)" << std::setw(5) << "Sig" << "  " << "Reduced\n";
    for (const auto& r : report.rows) {
        os << std::left << std::setw(static_cast<int>(name_width)) << r.test_name << "  "
           << std::right << std::setw(12) << detail::fixed2(r.ces_before) << std::setw(5)
           << (r.p_before < 0.05 ? "*" : "-") << std::setw(12) << detail::fixed2(r.ces_after)
           << std::setw(5) << (r.p_after < 0.05 ? "*" : "-") << "  "
           << (r.reduced_to_very_small ? "yes" : "no") << "\n";
    }
    return os.str();
}

// Same rows, full precision.
inline std::string render_csv_report(const ComparisonReport& report) {
    std::ostringstream os;
    os << "test_name,ces_before,p_before,sig_before,ces_after,p_after,sig_after,"
          "class_before,class_after,reduced_to_very_small\n";
    for (const auto& r : report.rows) {
        os << r.test_name << "," << detail::full_precision(r.ces_before) << ","
           << detail::full_precision(r.p_before) << "," << (r.p_before < 0.05 ? "*" : "-") << ","
           << detail::full_precision(r.ces_after) << "," << detail::full_precision(r.p_after) << ","
           << (r.p_after < 0.05 ? "*" : "-") << "," << to_string(r.class_before) << ","
           << to_string(r.class_after) << "," << (r.reduced_to_very_small ? "true" : "false") << "\n";
    }
    return os.str();
}

// ------------------------------------------------------------------
// Projection-plot coordinates: each stimulus occurrence projected onto two
// attribute dimensions at one layer. Coordinate = mean cosine against the
// dimension's attribute directions (signed projection onto unit directions).
// ------------------------------------------------------------------

struct ProjectionPoint {
    std::string surface;
    std::string group;
    double x = 0.0;  // first dimension coordinate
    double y = 0.0;  // second dimension coordinate
};

inline double dimension_coordinate(const Eigen::VectorXd& embedding,
                                   const AttributeDirections::DimensionBlock& block, int layer) {
    const auto& m = block.per_layer.at(static_cast<std::size_t>(layer - 1));
    if (embedding.norm() == 0.0)
        throw NumericError("projection: zero-norm embedding");
    double acc = 0.0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Eigen::VectorXd dir = m.row(r).transpose();
        if (dir.norm() == 0.0)
            throw NumericError("projection: zero-norm direction in dimension '" + block.dimension + "'");
        acc += embedding.dot(dir) / (embedding.norm() * dir.norm());
    }
    return acc / static_cast<double>(m.rows());
}

inline std::vector<ProjectionPoint> emit_projection_coordinates(
    const std::vector<StimulusEmbedding>& embeddings, const AttributeDirections& directions,
    const std::string& dim_x, const std::string& dim_y, int layer) {
    const auto& bx = directions.block(dim_x);
    const auto& by = directions.block(dim_y);
    std::vector<ProjectionPoint> out;
    out.reserve(embeddings.size());
    for (const auto& e : embeddings) {
        if (layer < 1 || static_cast<std::size_t>(layer) > e.per_layer.size())
            throw ValidationError("projection: layer " + std::to_string(layer) + " not available");
        const auto& v = e.per_layer[static_cast<std::size_t>(layer - 1)];
        ProjectionPoint p;
        p.surface = e.stimulus.surface;
        p.group = e.stimulus.group;
        p.x = dimension_coordinate(v, bx, layer);
        p.y = dimension_coordinate(v, by, layer);
        out.push_back(std::move(p));
    }
    return out;
}

inline std::string render_projection_csv(const std::vector<ProjectionPoint>& points,
                                         const std::string& dim_x, const std::string& dim_y) {
    std::ostringstream os;
    os << "surface,group," << dim_x << "_coord," << dim_y << "_coord\n";
    for (const auto& p : points) {
        os << p.surface << "," << p.group << "," << detail::full_precision(p.x) << ","
           << detail::full_precision(p.y) << "\n";
    }
    return os.str();
}

}  // namespace scmbias
