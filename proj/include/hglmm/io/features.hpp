#pragma once

#include "hglmm/error.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/model_spec.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace hglmm::io {

/// Upper edges of the age bins (0,26], (26,32], (32,38], (38,47], (47,101].
inline constexpr std::array<double, 6> kAgeEdges{0, 26, 32, 38, 47, 101};
inline const std::array<std::string, 5> kAgeColumns{"age_0_26", "age_26_32", "age_32_38", "age_38_47",
                                                   "age_47_101"};
inline const std::array<std::string, 6> kContinents{"africa", "asia", "europe", "north_america", "oceania",
                                                   "south_america"};

inline bool is_missing(const std::string& s) {
    std::string t;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) t += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return t.empty() || t == "na" || t == "nan" || t == "null";
}

/// Index of the age bin, or -1 when the age is outside (0, 101].
inline int age_bin(double age) {
    for (int b = 0; b < 5; ++b)
        if (age > kAgeEdges[static_cast<std::size_t>(b)] && age <= kAgeEdges[static_cast<std::size_t>(b) + 1]) return b;
    return -1;
}

/// Canonical continent key ("North America" -> "north_america"), or -1.
inline int continent_index(const std::string& label) {
    std::string key;
    for (char c : label) {
        if (std::isalpha(static_cast<unsigned char>(c))) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        else if ((c == ' ' || c == '_' || c == '-') && !key.empty() && key.back() != '_') key += '_';
    }
    while (!key.empty() && key.back() == '_') key.pop_back();
    for (std::size_t k = 0; k < kContinents.size(); ++k)
        if (kContinents[k] == key) return static_cast<int>(k);
    return -1;
}

/// Binary response: values already in {0, 1} are kept, anything else is
/// thresholded at `threshold` (rating >= threshold -> 1).
inline std::vector<double> binarize(const std::vector<double>& v, double threshold) {
    const bool binary = std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0 || x == 1.0; });
    if (binary) return v;
    std::vector<double> out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] >= threshold ? 1.0 : 0.0;
    return out;
}

/// Training-set statistics behind the `prev` and `dist` predictors.
struct FeatureStats {
    std::map<std::string, std::pair<double, double>> user_counts;  // user -> (positives p, ratings n)
    std::map<std::pair<std::string, std::string>, double> user_category_counts;  // (user, category) -> k
    std::size_t n_categories = 0;

    bool operator==(const FeatureStats&) const = default;
};

/// Counts from training rows only.
inline FeatureStats fit_feature_stats(const Table& train, const ModelSpec& spec) {
    if (!spec.features) throw UsageError("feature statistics need a [features] section");
    const auto& fs = *spec.features;
    const auto cu = train.column(fs.user);
    const auto cc = train.column(fs.category);
    const auto cy = train.column(spec.response);
    std::vector<double> y(train.n_rows());
    for (std::size_t r = 0; r < y.size(); ++r) y[r] = parse_cell(train, r, cy);
    y = binarize(y, spec.binarize_threshold);
    FeatureStats st;
    std::set<std::string> categories;
    for (std::size_t r = 0; r < train.n_rows(); ++r) {
        const auto& user = train.cell(r, cu);
        const auto& cat = train.cell(r, cc);
        auto& pn = st.user_counts[user];
        pn.first += y[r];
        pn.second += 1.0;
        st.user_category_counts[{user, cat}] += 1.0;
        categories.insert(cat);
    }
    st.n_categories = categories.size();
    return st;
}

/// prev = log((p + 1) / (n + 2)).
inline double prev_feature(double positives, double ratings) { return std::log((positives + 1.0) / (ratings + 2.0)); }

/// dist = log((k + 1) / (n + m)).
inline double dist_feature(double k, double ratings, double categories) {
    return std::log((k + 1.0) / (ratings + categories));
}

/// Adds age_*, geo_*, prev and dist columns. A missing age gives five zero
/// indicators; an unknown continent gives six zeros and a warning.
inline void apply_features(Table& t, const FeatureSpec& fs, const FeatureStats& st,
                           std::vector<std::string>* warnings = nullptr) {
    const auto n = t.n_rows();
    const auto ca = t.column(fs.age);
    const auto cg = t.column(fs.continent);
    const auto cu = t.column(fs.user);
    const auto cc = t.column(fs.category);
    std::vector<std::vector<std::string>> age(5, std::vector<std::string>(n, "0"));
    std::vector<std::vector<std::string>> geo(6, std::vector<std::string>(n, "0"));
    std::vector<std::string> prev(n), dist(n);
    std::set<std::string> unknown;
    const double m = static_cast<double>(std::max<std::size_t>(st.n_categories, 1));
    for (std::size_t r = 0; r < n; ++r) {
        const auto& a = t.cell(r, ca);
        if (!is_missing(a)) {
            const double v = parse_cell(t, r, ca);
            const int b = age_bin(v);
            if (b >= 0) age[static_cast<std::size_t>(b)][r] = "1";
        }
        const auto& g = t.cell(r, cg);
        if (!is_missing(g)) {
            const int k = continent_index(g);
            if (k >= 0) geo[static_cast<std::size_t>(k)][r] = "1";
            else unknown.insert(g);
        }
        const auto& user = t.cell(r, cu);
        double p = 0.0, nr = 0.0, k = 0.0;
        if (auto it = st.user_counts.find(user); it != st.user_counts.end()) std::tie(p, nr) = it->second;
        if (auto it = st.user_category_counts.find({user, t.cell(r, cc)}); it != st.user_category_counts.end())
            k = it->second;
        prev[r] = format_double(prev_feature(p, nr));
        dist[r] = format_double(dist_feature(k, nr, m));
    }
    for (std::size_t b = 0; b < 5; ++b) t.set_column(kAgeColumns[b], std::move(age[b]));
    for (std::size_t k = 0; k < 6; ++k) t.set_column("geo_" + kContinents[k], std::move(geo[k]));
    t.set_column("prev", std::move(prev));
    t.set_column("dist", std::move(dist));
    if (warnings)
        for (const auto& u : unknown) warnings->push_back("unknown continent '" + u + "'; geographic indicators set to zero");
}

inline nlohmann::json to_json(const FeatureStats& st) {
    nlohmann::json users = nlohmann::json::array();
    for (const auto& [u, pn] : st.user_counts) users.push_back({u, pn.first, pn.second});
    nlohmann::json cats = nlohmann::json::array();
    for (const auto& [key, k] : st.user_category_counts) cats.push_back({key.first, key.second, k});
    return {{"users", users}, {"user_categories", cats}, {"n_categories", st.n_categories}};
}

inline FeatureStats feature_stats_from_json(const nlohmann::json& j) {
    try {
        FeatureStats st;
        for (const auto& u : j.at("users")) st.user_counts[u.at(0).get<std::string>()] = {u.at(1).get<double>(), u.at(2).get<double>()};
        for (const auto& c : j.at("user_categories"))
            st.user_category_counts[{c.at(0).get<std::string>(), c.at(1).get<std::string>()}] = c.at(2).get<double>();
        st.n_categories = j.at("n_categories").get<std::size_t>();
        return st;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model archive: malformed feature statistics: ") + e.what());
    }
}

}  // namespace hglmm::io
