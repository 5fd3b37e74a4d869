#pragma once

#include "hglmm/ebayes.hpp"
#include "hglmm/error.hpp"
#include "hglmm/predict.hpp"
#include "hglmm/io/features.hpp"
#include "hglmm/io/model_spec.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace hglmm::io {

inline constexpr std::array<char, 8> kArchiveMagic{'H', 'G', 'L', 'M', 'M', '\0', '\r', '\n'};
inline constexpr std::uint32_t kArchiveVersion = 1;

/// A fitted model with everything needed to score new rows.
struct ModelArchive {
    ModelSpec spec;  // columns resolved
    ScoringModel model;
    double phi_scale = 1.0;
    std::optional<FeatureStats> features;
    std::vector<std::string> warnings;
    nlohmann::json metadata = nlohmann::json::object();
};

inline ModelArchive make_archive(const ModelSpec& resolved, const FittedModel& fitted, const RefinedEstimates& refined,
                                 std::optional<FeatureStats> features = std::nullopt,
                                 nlohmann::json metadata = nlohmann::json::object()) {
    ModelArchive a;
    a.spec = resolved;
    a.model = ScoringModel::from_fit(fitted, refined);
    a.phi_scale = fitted.phi_scale;
    a.features = std::move(features);
    a.warnings = fitted.warnings;
    a.metadata = std::move(metadata);
    return a;
}

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
    std::array<char, sizeof(T)> b;
    for (std::size_t k = 0; k < sizeof(T); ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xff);
    out.write(b.data(), b.size());
}

template <class T>
T get_le(std::istream& in, const char* what) {
    std::array<unsigned char, sizeof(T)> b;
    if (!in.read(reinterpret_cast<char*>(b.data()), b.size()))
        throw DataError(std::string("model archive truncated while reading ") + what);
    T v = 0;
    for (std::size_t k = 0; k < sizeof(T); ++k) v |= static_cast<T>(b[k]) << (8 * k);
    return v;
}

inline void put_doubles(std::ostream& out, const double* p, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) put_le(out, std::bit_cast<std::uint64_t>(p[k]));
}

inline void get_doubles(std::istream& in, double* p, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) p[k] = std::bit_cast<double>(get_le<std::uint64_t>(in, "numeric data"));
}

inline std::vector<std::vector<std::string>> leaf_paths(const Hierarchy& h) {
    const std::size_t d = h.depth();
    std::vector<std::vector<std::string>> paths;
    paths.reserve(h.level_size(d));
    for (std::size_t i = 0; i < h.level_size(d); ++i) {
        const auto idx = h.path_indices(d, i);
        std::vector<std::string> p;
        for (std::size_t l = 1; l <= d; ++l) p.push_back(h.node(l, idx[l]).label);
        paths.push_back(std::move(p));
    }
    return paths;
}

}  // namespace detail

/// Binary layout: magic, u32 version, u64 header length, JSON header, then
/// little-endian IEEE-754 doubles: beta, Sigma_l (column-major) for each
/// level, and for every level and node u_hat followed by its posterior
/// covariance.
inline void save_archive(std::ostream& out, const ModelArchive& a) {
    const auto& m = a.model;
    const std::size_t d = m.dims.depth();
    nlohmann::json h;
    h["format"] = "hglmm-model";
    h["spec"] = to_json(a.spec);
    std::vector<std::size_t> q;
    for (std::size_t l = 0; l <= d; ++l) q.push_back(m.dims.q(l));
    h["dims"] = q;
    h["phi"] = format_double(m.phi);
    h["phi_scale"] = format_double(a.phi_scale);
    h["leaves"] = detail::leaf_paths(m.hierarchy);
    std::vector<std::size_t> counts;
    for (const auto& n : m.hierarchy.level(d)) counts.push_back(n.n_obs);
    h["leaf_counts"] = counts;
    std::vector<std::size_t> level_sizes;
    for (std::size_t l = 0; l <= d; ++l) level_sizes.push_back(m.hierarchy.level_size(l));
    h["level_sizes"] = level_sizes;
    if (a.features) h["features"] = to_json(*a.features);
    h["warnings"] = a.warnings;
    h["metadata"] = a.metadata;
    std::size_t n_doubles = static_cast<std::size_t>(m.beta.size());
    for (std::size_t l = 1; l <= d; ++l) {
        const std::size_t ql = m.dims.q(l);
        n_doubles += ql * ql + m.hierarchy.level_size(l) * (ql + ql * ql);
    }
    h["n_doubles"] = n_doubles;
    const std::string header = h.dump();

    out.write(kArchiveMagic.data(), kArchiveMagic.size());
    detail::put_le<std::uint32_t>(out, kArchiveVersion);
    detail::put_le<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::put_doubles(out, m.beta.data(), static_cast<std::size_t>(m.beta.size()));
    for (std::size_t l = 1; l <= d; ++l)
        detail::put_doubles(out, m.sigma[l - 1].data(), static_cast<std::size_t>(m.sigma[l - 1].size()));
    for (std::size_t l = 1; l <= d; ++l)
        for (std::size_t i = 0; i < m.hierarchy.level_size(l); ++i) {
            detail::put_doubles(out, m.u_hat[l][i].data(), static_cast<std::size_t>(m.u_hat[l][i].size()));
            detail::put_doubles(out, m.posterior_cov[l][i].data(),
                                static_cast<std::size_t>(m.posterior_cov[l][i].size()));
        }
    if (!out) throw DataError("failed to write model archive");
}

inline ModelArchive load_archive(std::istream& in) {
    std::array<char, 8> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kArchiveMagic)
        throw DataError("not a model archive (bad magic bytes)");
    const auto version = detail::get_le<std::uint32_t>(in, "version");
    if (version != kArchiveVersion)
        throw DataError("model archive version " + std::to_string(version) + " is not supported (expected " +
                        std::to_string(kArchiveVersion) + ")");
    const auto len = detail::get_le<std::uint64_t>(in, "header length");
    if (len > (std::uint64_t{1} << 34)) throw DataError("model archive header length is implausible");
    std::string header(static_cast<std::size_t>(len), '\0');
    if (!in.read(header.data(), static_cast<std::streamsize>(len))) throw DataError("model archive truncated in header");

    ModelArchive a;
    try {
        const auto h = nlohmann::json::parse(header);
        a.spec = model_spec_from_json(h.at("spec"));
        const auto q = h.at("dims").get<std::vector<std::size_t>>();
        if (q.size() < 2 || q.size() - 1 != a.spec.depth())
            throw DataError("model archive: dimensions disagree with the spec");
        const std::size_t d = q.size() - 1;
        auto& m = a.model;
        m.family = a.spec.family;
        m.dims = EffectDims(q);
        auto phi = try_parse_double(h.at("phi").get<std::string>());
        auto phi_scale = try_parse_double(h.at("phi_scale").get<std::string>());
        if (!phi || !phi_scale) throw DataError("model archive: bad dispersion field");
        m.phi = *phi;
        a.phi_scale = *phi_scale;
        m.hierarchy = Hierarchy::from_leaves(h.at("leaves").get<std::vector<std::vector<std::string>>>(),
                                             h.at("leaf_counts").get<std::vector<std::size_t>>(), d);
        const auto level_sizes = h.at("level_sizes").get<std::vector<std::size_t>>();
        for (std::size_t l = 0; l <= d; ++l)
            if (level_sizes.at(l) != m.hierarchy.level_size(l))
                throw DataError("model archive: hierarchy does not match recorded level sizes");
        if (h.contains("features")) a.features = feature_stats_from_json(h["features"]);
        a.warnings = h.at("warnings").get<std::vector<std::string>>();
        a.metadata = h.at("metadata");

        m.beta.resize(static_cast<Eigen::Index>(q[0]));
        detail::get_doubles(in, m.beta.data(), q[0]);
        m.sigma.resize(d);
        for (std::size_t l = 1; l <= d; ++l) {
            const auto ql = static_cast<Eigen::Index>(q[l]);
            m.sigma[l - 1].resize(ql, ql);
            detail::get_doubles(in, m.sigma[l - 1].data(), q[l] * q[l]);
        }
        m.u_hat.assign(d + 1, {});
        m.posterior_cov.assign(d + 1, {});
        for (std::size_t l = 1; l <= d; ++l) {
            const auto ql = static_cast<Eigen::Index>(q[l]);
            for (std::size_t i = 0; i < m.hierarchy.level_size(l); ++i) {
                VectorXd u(ql);
                MatrixXd c(ql, ql);
                detail::get_doubles(in, u.data(), q[l]);
                detail::get_doubles(in, c.data(), q[l] * q[l]);
                m.u_hat[l].push_back(std::move(u));
                m.posterior_cov[l].push_back(std::move(c));
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("model archive: malformed header: ") + e.what());
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DataError("model archive has trailing bytes");
    return a;
}

inline void save_archive_file(const std::string& path, const ModelArchive& a) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    save_archive(out, a);
}

inline ModelArchive load_archive_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open model archive '" + path + "'");
    return load_archive(in);
}

/// Node-effect table for one random-effect column of a level, sorted by
/// observation count.
inline std::vector<NodeEffectRow> archive_effect_report(const ModelArchive& a, std::size_t level,
                                                        const std::string& column) {
    const auto& m = a.model;
    if (level < 1 || level > m.dims.depth())
        throw UsageError("report level must be in 1.." + std::to_string(m.dims.depth()));
    const auto& cols = a.spec.levels[level - 1].random;
    std::size_t covariate = cols.size();
    for (std::size_t k = 0; k < cols.size(); ++k)
        if (cols[k] == column) covariate = k;
    if (covariate == cols.size())
        throw UsageError("level " + std::to_string(level) + " has no random effect '" + column + "'");
    RefinedEstimates r;
    r.levels.resize(m.dims.depth() + 1);
    r.levels[0].push_back({m.beta, VectorXd(0), MatrixXd(0, 0)});
    for (std::size_t l = 1; l <= m.dims.depth(); ++l)
        for (std::size_t i = 0; i < m.u_hat[l].size(); ++i)
            r.levels[l].push_back({VectorXd(0), m.u_hat[l][i], m.posterior_cov[l][i]});
    return node_effect_report(r, m.hierarchy, level, covariate);
}

}  // namespace hglmm::io
