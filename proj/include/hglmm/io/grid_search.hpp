#pragma once

#include "hglmm/error.hpp"
#include "hglmm/parallel.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/model_spec.hpp"
#include "hglmm/io/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <optional>
#include <string>
#include <vector>

namespace hglmm::io {

/// One model in the search: grouping levels and, per level, the candidate
/// groups used as random effects (an intercept is always included).
struct SearchCell {
    std::vector<std::string> groups;
    std::vector<std::vector<std::string>> random_groups;  // candidate names per level
    ModelSpec spec;
};

/// Random-effect columns for a subset mask over the candidates.
inline std::vector<std::string> subset_columns(const SearchSpec& s, std::size_t mask,
                                               std::vector<std::string>* names = nullptr) {
    std::vector<std::string> cols{kIntercept};
    for (std::size_t k = 0; k < s.candidates.size(); ++k)
        if (mask >> k & 1u) {
            cols.insert(cols.end(), s.candidates[k].second.begin(), s.candidates[k].second.end());
            if (names) names->push_back(s.candidates[k].first);
        }
    return cols;
}

/// Every 1-level model (levels x 2^k subsets) followed, when max_depth is 2,
/// by every nested pair of levels with independent subsets at each level
/// (C(L,2) x 2^k x 2^k). Fixed effects are the base spec's.
inline std::vector<SearchCell> enumerate_cells(const ModelSpec& base) {
    if (!base.search) throw UsageError("grid search needs [search] and [candidates] sections");
    const auto& s = *base.search;
    const std::size_t k = s.candidates.size();
    if (k >= 20) throw UsageError("too many candidate predictor groups for an exhaustive search");
    const std::size_t subsets = std::size_t{1} << k;
    const std::size_t L = s.levels.size();
    std::vector<SearchCell> cells;
    auto make = [&](std::vector<std::size_t> lv, std::vector<std::size_t> masks) {
        SearchCell c;
        c.spec = base;
        c.spec.search.reset();
        c.spec.levels.clear();
        for (std::size_t j = 0; j < lv.size(); ++j) {
            std::vector<std::string> names;
            c.spec.levels.push_back({s.levels[lv[j]], subset_columns(s, masks[j], &names)});
            c.groups.push_back(s.levels[lv[j]]);
            c.random_groups.push_back(std::move(names));
        }
        cells.push_back(std::move(c));
    };
    for (std::size_t a = 0; a < L; ++a)
        for (std::size_t m = 0; m < subsets; ++m) make({a}, {m});
    if (s.max_depth >= 2)
        for (std::size_t a = 0; a < L; ++a)
            for (std::size_t b = a + 1; b < L; ++b)
                for (std::size_t m1 = 0; m1 < subsets; ++m1)
                    for (std::size_t m2 = 0; m2 < subsets; ++m2) make({a, b}, {m1, m2});
    return cells;
}

struct SearchResult {
    SearchCell cell;
    std::string description;
    std::size_t random_params = 0;  // sum of q_l (q_l + 1) / 2
    std::optional<double> dev_error;  // misclassification (logistic) or MSE (gaussian)
    double dev_se = 0.0;
    std::string failure;
    double seconds = 0.0;
};

inline std::size_t random_parameter_count(const ModelSpec& resolved) {
    std::size_t n = 0;
    for (const auto& l : resolved.levels) n += l.random.size() * (l.random.size() + 1) / 2;
    return n;
}

/// Fits every cell on `train`, scores `dev`, and ranks by dev error, then
/// fewer random-effect parameters, then description. Failed cells are kept
/// (ranked last) with their error message.
inline std::vector<SearchResult> run_grid_search(const Table& train, const Table& dev, const ModelSpec& base,
                                                 std::size_t jobs = 1) {
    if (dev.n_rows() == 0) throw UsageError("grid search needs a nonempty development set");
    auto cells = enumerate_cells(base);
    std::vector<SearchResult> results(cells.size());
    parallel_for(cells.size(), jobs, [&](std::size_t i) {
        SearchResult& r = results[i];
        r.cell = std::move(cells[i]);
        r.description = r.cell.spec.describe();
        const auto t0 = std::chrono::steady_clock::now();
        try {
            const auto resolved = resolve_columns(r.cell.spec, train);
            r.random_params = random_parameter_count(resolved);
            FitResult fr = fit_table(train, resolved, 1);
            const auto ev = evaluate_table(dev, fr.data.spec, ScoringModel::from_fit(fr.fitted, fr.refined));
            if (ev.misclassification) {
                r.dev_error = ev.misclassification->rate;
                r.dev_se = ev.misclassification->standard_error();
            } else {
                r.dev_error = ev.mean_squared_error;
            }
        } catch (const std::exception& e) {
            r.failure = e.what();
        }
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });
    std::stable_sort(results.begin(), results.end(), [](const SearchResult& a, const SearchResult& b) {
        if (a.dev_error.has_value() != b.dev_error.has_value()) return a.dev_error.has_value();
        if (a.dev_error && *a.dev_error != *b.dev_error) return *a.dev_error < *b.dev_error;
        if (a.random_params != b.random_params) return a.random_params < b.random_params;
        return a.description < b.description;
    });
    return results;
}

}  // namespace hglmm::io
