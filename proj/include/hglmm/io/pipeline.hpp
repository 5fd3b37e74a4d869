#pragma once

#include "hglmm/design.hpp"
#include "hglmm/ebayes.hpp"
#include "hglmm/error.hpp"
#include "hglmm/moment_fit.hpp"
#include "hglmm/predict.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/features.hpp"
#include "hglmm/io/model_spec.hpp"

#include <optional>
#include <string>
#include <vector>

namespace hglmm::io {

/// Expands column tokens against a header. "1" is the intercept; a token
/// ending in '*' matches every column with that prefix, in header order.
inline std::vector<std::string> expand_columns(const Table& t, const std::vector<std::string>& tokens) {
    std::vector<std::string> out;
    for (const auto& tok : tokens) {
        if (tok == kIntercept) {
            out.push_back(tok);
        } else if (!tok.empty() && tok.back() == '*') {
            const std::string prefix = tok.substr(0, tok.size() - 1);
            std::size_t hits = 0;
            for (const auto& h : t.header)
                if (h.rfind(prefix, 0) == 0) out.push_back(h), ++hits;
            if (!hits) throw DataError("no column matches '" + tok + "'");
        } else {
            t.column(tok);
            out.push_back(tok);
        }
    }
    for (std::size_t a = 0; a < out.size(); ++a)
        for (std::size_t b = a + 1; b < out.size(); ++b)
            if (out[a] == out[b]) throw UsageError("column '" + out[a] + "' listed twice in one effect block");
    return out;
}

/// Spec with every column token expanded and checked against the table.
inline ModelSpec resolve_columns(const ModelSpec& spec, const Table& t) {
    ModelSpec r = spec;
    r.fixed = expand_columns(t, spec.fixed);
    for (auto& l : r.levels) {
        t.column(l.group);
        l.random = expand_columns(t, l.random);
    }
    t.column(spec.response);
    return r;
}

inline MatrixXd column_matrix(const Table& t, const std::vector<std::string>& cols) {
    MatrixXd X(static_cast<Eigen::Index>(t.n_rows()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (cols[c] == kIntercept) {
            X.col(static_cast<Eigen::Index>(c)).setOnes();
            continue;
        }
        const auto idx = t.column(cols[c]);
        for (std::size_t r = 0; r < t.n_rows(); ++r)
            X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = parse_cell(t, r, idx);
    }
    return X;
}

inline std::vector<std::vector<std::string>> group_labels(const Table& t, const ModelSpec& spec) {
    std::vector<std::size_t> cols;
    for (const auto& l : spec.levels) cols.push_back(t.column(l.group));
    std::vector<std::vector<std::string>> out(t.n_rows());
    for (std::size_t r = 0; r < t.n_rows(); ++r) {
        out[r].reserve(cols.size());
        for (std::size_t l = 0; l < cols.size(); ++l) {
            const auto& s = t.cell(r, cols[l]);
            if (s.empty())
                throw DataError("data row " + std::to_string(r + 1) + ": empty grouping label in column '" +
                                spec.levels[l].group + "'");
            out[r].push_back(s);
        }
    }
    return out;
}

/// Response column; binarized for the logistic family.
inline VectorXd response_vector(const Table& t, const ModelSpec& spec) {
    const auto c = t.column(spec.response);
    std::vector<double> y(t.n_rows());
    for (std::size_t r = 0; r < y.size(); ++r) y[r] = parse_cell(t, r, c);
    if (spec.family == Family::logistic) y = binarize(y, spec.binarize_threshold);
    return Eigen::Map<const VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
}

struct Ingested {
    ModelSpec spec;  // columns resolved
    Design design;
    MatrixXd X;
    VectorXd y;
};

/// Maps rows to leaf blocks over the declared hierarchy.
inline Ingested ingest(const Table& t, const ModelSpec& spec) {
    if (t.n_rows() == 0) throw DataError("no data rows");
    Ingested out;
    out.spec = resolve_columns(spec, t);
    out.X = column_matrix(t, out.spec.design_columns());
    out.y = response_vector(t, out.spec);
    out.design = assemble_design(group_labels(t, out.spec), out.X, out.y, out.spec.depth(), out.spec.nesting);
    return out;
}

struct FitResult {
    Ingested data;
    FittedModel fitted;
    RefinedEstimates refined;
};

inline FitResult fit_table(const Table& t, const ModelSpec& spec, std::size_t jobs = 1) {
    FitResult r{ingest(t, spec), {}, {}};
    r.fitted = fit(r.data.design.blocks, r.data.design.hierarchy, r.data.spec.dims(), r.data.spec.family,
                   r.data.spec.fit_options(jobs));
    r.refined = refine(r.fitted, jobs);
    return r;
}

struct Scores {
    std::vector<double> eta;
    std::vector<double> mean;
    std::vector<std::size_t> matched_depth;  // levels of the row's path known to the model
};

/// Linear predictor and mean for every row; unseen groups fall back to
/// their deepest known ancestor.
inline Scores score_table(const Table& t, const ModelSpec& resolved, const ScoringModel& model) {
    const MatrixXd X0 = column_matrix(t, resolved.fixed);
    std::vector<MatrixXd> Xl;
    for (const auto& l : resolved.levels) Xl.push_back(column_matrix(t, l.random));
    const auto labels = group_labels(t, resolved);
    Scores s;
    s.eta.resize(t.n_rows());
    s.mean.resize(t.n_rows());
    s.matched_depth.resize(t.n_rows());
    PredictionRequest req;
    req.x_levels.resize(Xl.size());
    for (std::size_t r = 0; r < t.n_rows(); ++r) {
        const auto i = static_cast<Eigen::Index>(r);
        req.x = X0.row(i).transpose();
        for (std::size_t l = 0; l < Xl.size(); ++l) req.x_levels[l] = Xl[l].row(i).transpose();
        req.node = model.hierarchy.resolve(labels[r]);
        s.matched_depth[r] = req.node.depth();
        s.eta[r] = linear_predictor(req, model);
        s.mean[r] = predict_response(s.eta[r], model.family);
    }
    return s;
}

struct TableEvaluation {
    std::size_t n = 0;
    std::optional<Misclassification> misclassification;  // logistic
    double mean_squared_error = 0.0;
    double mean_log_loss = 0.0;  // logistic
};

inline TableEvaluation evaluate_scores(const Scores& s, const VectorXd& y, Family family) {
    TableEvaluation ev;
    ev.n = s.mean.size();
    if (ev.n == 0) throw UsageError("evaluation set is empty");
    std::vector<double> labels(y.data(), y.data() + y.size());
    double se = 0.0, ll = 0.0;
    for (std::size_t k = 0; k < ev.n; ++k) {
        const double d = labels[k] - s.mean[k];
        se += d * d;
        if (family == Family::logistic) {
            const double p = std::clamp(s.mean[k], 1e-15, 1.0 - 1e-15);
            ll -= labels[k] * std::log(p) + (1.0 - labels[k]) * std::log1p(-p);
        }
    }
    ev.mean_squared_error = se / static_cast<double>(ev.n);
    if (family == Family::logistic) {
        ev.misclassification = misclassification(s.mean, labels);
        ev.mean_log_loss = ll / static_cast<double>(ev.n);
    }
    return ev;
}

inline TableEvaluation evaluate_table(const Table& t, const ModelSpec& resolved, const ScoringModel& model) {
    return evaluate_scores(score_table(t, resolved, model), response_vector(t, resolved), model.family);
}

}  // namespace hglmm::io
