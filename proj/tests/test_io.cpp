#include "hglmm/io/archive.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/features.hpp"
#include "hglmm/io/grid_search.hpp"
#include "hglmm/io/model_spec.hpp"
#include "hglmm/io/pipeline.hpp"
#include "hglmm/io/sim_export.hpp"
#include "hglmm/io/split.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>
#include <sstream>

using namespace hglmm;
using namespace hglmm::io;

namespace {

Table csv(const std::string& text) {
    std::istringstream in(text);
    return read_csv(in);
}

template <class E, class F>
std::string error_of(F&& f) {
    try {
        f();
    } catch (const E& e) {
        return e.what();
    }
    return "";
}

// Two-level logistic table with groups a/b, leaves nested, and predictors x, w.
Table toy_logistic(std::uint64_t seed, std::size_t n) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> N;
    std::bernoulli_distribution coin(0.5);
    Table t;
    t.header = {"g1", "g2", "x", "w", "y"};
    const std::vector<double> u1{0.8, -0.8, 0.3};
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t a = r % 3, b = (r / 3) % 4;
        const double x = N(g), w = N(g);
        const double eta = 0.2 + 0.7 * x + u1[a] * (1 + 0.5 * w) + 0.3 * (b % 2 ? 1 : -1);
        const double p = 1 / (1 + std::exp(-eta));
        const double y = std::uniform_real_distribution<double>()(g) < p ? 1 : 0;
        t.rows.push_back({"a" + std::to_string(a), "b" + std::to_string(b), format_double(x), format_double(w),
                          format_double(y)});
    }
    return t;
}

}  // namespace

TEST(Csv, QuotedFieldsAndLineEndings) {
    const Table t = csv("a,b,c\r\n1,\"x, y\",\"he said \"\"hi\"\"\"\r\n2,\"multi\nline\",\r\n");
    ASSERT_EQ(t.n_rows(), 2u);
    EXPECT_EQ(t.cell(0, 1), "x, y");
    EXPECT_EQ(t.cell(0, 2), "he said \"hi\"");
    EXPECT_EQ(t.cell(1, 1), "multi\nline");
    EXPECT_EQ(t.cell(1, 2), "");
}

TEST(Csv, RaggedRowReportsLine) {
    const auto msg = error_of<DataError>([] { csv("a,b\n1,2\n3\n"); });
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_THROW(csv(""), DataError);
    EXPECT_THROW(csv("a,a\n1,2\n"), DataError);
    EXPECT_THROW(csv("a\n\"open\n"), DataError);
}

TEST(Csv, NumericCellsAndMissingColumns) {
    const Table t = csv("x,y\n1.5,abc\n-2e3, 4 \n");
    EXPECT_EQ(parse_cell(t, 0, 0), 1.5);
    EXPECT_EQ(parse_cell(t, 1, 0), -2000.0);
    EXPECT_EQ(parse_cell(t, 1, 1), 4.0);
    const auto msg = error_of<DataError>([&] { parse_cell(t, 0, 1); });
    EXPECT_NE(msg.find("data row 1"), std::string::npos) << msg;
    EXPECT_THROW(t.column("z"), DataError);
    EXPECT_FALSE(try_parse_double("inf"));
    EXPECT_FALSE(try_parse_double("1,5"));
}

TEST(Csv, WriteReadRoundTrip) {
    Table t;
    t.header = {"name", "value"};
    std::mt19937_64 g(1);
    std::normal_distribution<double> N(0, 1e3);
    for (int k = 0; k < 200; ++k) t.rows.push_back({k % 2 ? "plain" : "needs, \"quotes\"", format_double(N(g))});
    std::stringstream ss;
    write_csv(ss, t);
    const Table back = read_csv(ss);
    EXPECT_EQ(back.header, t.header);
    EXPECT_EQ(back.rows, t.rows);
    for (std::size_t r = 0; r < t.n_rows(); ++r) {
        const double v = *try_parse_double(t.cell(r, 1));
        EXPECT_EQ(std::memcmp(&v, &*std::make_unique<double>(parse_cell(back, r, 1)), sizeof v), 0);
    }
}

TEST(ModelSpecParse, FullExample) {
    const auto s = parse_model_spec_string(R"(
# book ratings
family = "logistic"
response = rating
binarize_threshold = 8
fixed = ["1", "age_*", "prev"]
weights = "identity"
nesting = strict
firth_max_iter = 40

[level1]
group = "author"
random = ["1", "geo_*"]

[level2]
group = book
random = [1]

[features]
category = "subgenre"
)");
    EXPECT_EQ(s.family, Family::logistic);
    EXPECT_EQ(s.response, "rating");
    EXPECT_EQ(s.fixed, (std::vector<std::string>{"1", "age_*", "prev"}));
    EXPECT_EQ(s.weights, WeightKind::identity);
    EXPECT_EQ(s.nesting, NestingMode::strict);
    EXPECT_EQ(s.firth_max_iter, 40);
    ASSERT_EQ(s.depth(), 2u);
    EXPECT_EQ(s.levels[1].group, "book");
    EXPECT_EQ(s.levels[1].random, std::vector<std::string>{"1"});
    ASSERT_TRUE(s.features);
    EXPECT_EQ(s.features->category, "subgenre");
    EXPECT_EQ(s.features->user, "user");
}

TEST(ModelSpecParse, DefaultsAndErrors) {
    const auto s = parse_model_spec_string("response = y\n[level1]\ngroup = g\nrandom = [\"1\"]\n");
    EXPECT_EQ(s.binarize_threshold, 8.0);
    EXPECT_EQ(s.fixed, std::vector<std::string>{"1"});
    EXPECT_EQ(s.family, Family::logistic);
    EXPECT_EQ(s.weights, WeightKind::semi_weighted);
    EXPECT_EQ(s.nesting, NestingMode::normalize);

    EXPECT_THROW(parse_model_spec_string("response = y\ncolour = red\n[level1]\ngroup=g\nrandom=[1]\n"), UsageError);
    EXPECT_THROW(parse_model_spec_string("response = y\n[level2]\ngroup=g\nrandom=[1]\n"), UsageError);
    EXPECT_THROW(parse_model_spec_string("family = poisson\nresponse = y\n[level1]\ngroup=g\nrandom=[1]\n"), UsageError);
    EXPECT_THROW(parse_model_spec_string("response = y\n"), UsageError);
    EXPECT_THROW(parse_model_spec_string("response = y\n[level1]\ngroup=g\n"), UsageError);
    EXPECT_THROW(parse_model_spec_string("response = y\nresponse = z\n[level1]\ngroup=g\nrandom=[1]\n"), UsageError);
    const auto msg = error_of<UsageError>([] { parse_model_spec_string("response = y\nfixed = [\"a\"\n"); });
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
}

TEST(ModelSpecParse, JsonRoundTrip) {
    ModelSpec s;
    s.family = Family::gaussian;
    s.response = "r";
    s.fixed = {"1", "x"};
    s.levels = {{"g", {"1"}}, {"h", {"1", "x"}}};
    s.features = FeatureSpec{};
    s.firth_tol = 1e-9;
    EXPECT_EQ(model_spec_from_json(to_json(s)), s);
}

TEST(Ingest, ToyCsvMapsRowsToDeclaredHierarchy) {
    const Table t = csv("grp,sub,x,y\na,p,1,0.5\nb,q,2,1.5\na,r,3,2.5\n");
    auto s = parse_model_spec_string("family = gaussian\nresponse = y\nfixed = [1, x]\n[level1]\ngroup = grp\nrandom = [1]\n[level2]\ngroup = sub\nrandom = [x]\n");
    const auto in = ingest(t, s);
    EXPECT_EQ(in.design.hierarchy.root().n_obs, 3u);
    EXPECT_EQ(in.design.hierarchy.level_size(1), 2u);
    EXPECT_EQ(in.design.hierarchy.level_size(2), 3u);
    EXPECT_EQ(in.design.hierarchy.node(1, 0).label, "a");
    EXPECT_EQ(in.design.hierarchy.node(1, 0).n_obs, 2u);
    ASSERT_EQ(in.X.cols(), 4);
    EXPECT_EQ(in.X.row(2), Eigen::RowVector4d(1, 3, 1, 3));
    EXPECT_EQ(in.y, Eigen::Vector3d(0.5, 1.5, 2.5));
    // Row 3 sits in leaf a/r, the second leaf under a.
    EXPECT_EQ(in.design.blocks[1].leaf, NodeId({1, 2}));
}

TEST(Ingest, BinarizesOnlyNonBinaryResponses) {
    auto s = parse_model_spec_string("response = y\n[level1]\ngroup = g\nrandom = [1]\n");
    const auto rated = response_vector(csv("g,y\na,3\na,8\nb,10\nb,7.5\n"), s);
    EXPECT_EQ(rated, Eigen::Vector4d(0, 1, 1, 0));
    const auto binary = response_vector(csv("g,y\na,0\na,1\nb,1\n"), s);
    EXPECT_EQ(binary, Eigen::Vector3d(0, 1, 1));
    s.binarize_threshold = 5;
    EXPECT_EQ(response_vector(csv("g,y\na,4\na,5\n"), s), Eigen::Vector2d(0, 1));
}

TEST(Ingest, ColumnErrors) {
    auto s = parse_model_spec_string("family = gaussian\nresponse = y\nfixed = [1, x]\n[level1]\ngroup = g\nrandom = [1]\n");
    EXPECT_THROW(ingest(csv("g,y\na,1\n"), s), DataError);
    const auto msg = error_of<DataError>([&] { ingest(csv("g,x,y\na,1,2\nb,oops,3\n"), s); });
    EXPECT_NE(msg.find("data row 2"), std::string::npos) << msg;
    EXPECT_THROW(ingest(csv("g,x,y\n,1,2\n"), s), DataError);
    s.fixed = {"1", "x", "x"};
    EXPECT_THROW(ingest(csv("g,x,y\na,1,2\n"), s), UsageError);
}

TEST(Ingest, GlobExpansionFollowsHeaderOrder) {
    const Table t = csv("a_2,b,a_1,y,g\n1,2,3,4,k\n");
    EXPECT_EQ(expand_columns(t, {"1", "a_*"}), (std::vector<std::string>{"1", "a_2", "a_1"}));
    EXPECT_THROW(expand_columns(t, {"c_*"}), DataError);
}

TEST(Features, AgeBinsAndMissingAge) {
    EXPECT_EQ(age_bin(30), 1);
    EXPECT_EQ(age_bin(26), 0);
    EXPECT_EQ(age_bin(26.5), 1);
    EXPECT_EQ(age_bin(101), 4);
    EXPECT_EQ(age_bin(0), -1);
    EXPECT_EQ(age_bin(150), -1);
    Table t = csv("user,age,continent,genre,rating\nu1,30,Europe,g,9\nu2,,asia,g,3\nu3,NA,Atlantis,h,8\n");
    ModelSpec spec;
    spec.response = "rating";
    spec.features = FeatureSpec{};
    const auto st = fit_feature_stats(t, spec);
    std::vector<std::string> warnings;
    apply_features(t, *spec.features, st, &warnings);
    for (std::size_t b = 0; b < 5; ++b) {
        EXPECT_EQ(t.cell(0, t.column(kAgeColumns[b])), b == 1 ? "1" : "0");
        EXPECT_EQ(t.cell(1, t.column(kAgeColumns[b])), "0");
        EXPECT_EQ(t.cell(2, t.column(kAgeColumns[b])), "0");
    }
    EXPECT_EQ(t.cell(0, t.column("geo_europe")), "1");
    EXPECT_EQ(t.cell(1, t.column("geo_asia")), "1");
    for (const auto& c : kContinents) EXPECT_EQ(t.cell(2, t.column("geo_" + c)), "0");
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("Atlantis"), std::string::npos);
    EXPECT_EQ(continent_index("North America"), 3);
    EXPECT_EQ(continent_index("south_america"), 5);
}

TEST(Features, SmoothedProportions) {
    EXPECT_DOUBLE_EQ(prev_feature(0, 0), std::log(0.5));
    EXPECT_DOUBLE_EQ(dist_feature(1, 4, 10), std::log(2.0 / 14.0));
    // u1 rates 4 books (3 positive), 1 in genre "a"; 10 genres overall.
    std::string text = "user,age,continent,genre,rating\n";
    text += "u1,20,Europe,a,9\nu1,20,Europe,b,8\nu1,20,Europe,c,10\nu1,20,Europe,d,2\n";
    for (int k = 0; k < 6; ++k) text += "u2,40,Asia,g" + std::to_string(k) + ",5\n";
    Table t = csv(text);
    ModelSpec spec;
    spec.response = "rating";
    spec.features = FeatureSpec{};
    const auto st = fit_feature_stats(t, spec);
    EXPECT_EQ(st.n_categories, 10u);
    apply_features(t, *spec.features, st);
    EXPECT_DOUBLE_EQ(parse_cell(t, 0, t.column("prev")), std::log(4.0 / 6.0));
    EXPECT_DOUBLE_EQ(parse_cell(t, 0, t.column("dist")), std::log(2.0 / 14.0));
    // Unknown users fall back to the smoothing floor.
    Table fresh = csv("user,age,continent,genre,rating\nu9,20,Europe,a,9\n");
    apply_features(fresh, *spec.features, st);
    EXPECT_DOUBLE_EQ(parse_cell(fresh, 0, fresh.column("prev")), std::log(0.5));
    EXPECT_DOUBLE_EQ(parse_cell(fresh, 0, fresh.column("dist")), std::log(1.0 / 10.0));
}

TEST(Features, TrainingRowsOnly) {
    std::string text = "user,age,continent,genre,rating\n";
    std::mt19937_64 g(4);
    for (int k = 0; k < 60; ++k)
        text += "u" + std::to_string(k % 7) + ",30,Europe,g" + std::to_string(k % 5) + "," + std::to_string(k % 11) + "\n";
    const Table all = csv(text);
    const auto sp = split_rows(all.n_rows(), 0.8, 0.1, 9);
    ModelSpec spec;
    spec.response = "rating";
    spec.features = FeatureSpec{};
    Table train = all.select_rows(sp.train);
    const auto st = fit_feature_stats(train, spec);
    Table with_all = all;
    apply_features(with_all, *spec.features, st);
    Table train_only = train;
    apply_features(train_only, *spec.features, fit_feature_stats(train, spec));
    for (std::size_t k = 0; k < sp.train.size(); ++k)
        EXPECT_EQ(with_all.rows[sp.train[k]], train_only.rows[k]);
}

TEST(Split, SizesDeterminismAndCoverage) {
    const auto s = split_rows(10, 0.8, 0.1, 42);
    EXPECT_EQ(s.train.size(), 8u);
    EXPECT_EQ(s.dev.size(), 1u);
    EXPECT_EQ(s.test.size(), 1u);
    const auto again = split_rows(10, 0.8, 0.1, 42);
    EXPECT_EQ(s.train, again.train);
    EXPECT_EQ(s.dev, again.dev);
    const auto big = split_rows(1000, 0.8, 0.1, 1);
    std::set<std::size_t> all(big.train.begin(), big.train.end());
    all.insert(big.dev.begin(), big.dev.end());
    all.insert(big.test.begin(), big.test.end());
    EXPECT_EQ(all.size(), 1000u);
    EXPECT_EQ(*all.rbegin(), 999u);
    EXPECT_NE(split_rows(1000, 0.8, 0.1, 2).dev, big.dev);
    EXPECT_THROW(split_rows(10, 0.8, 0.3, 0), UsageError);
}

TEST(GridSearch, CellCounts) {
    ModelSpec base;
    base.response = "y";
    base.search = SearchSpec{};
    for (const char* c : {"age", "geo", "prev", "dist"}) base.search->candidates.push_back({c, {std::string(c) + "_*"}});
    base.search->levels = {"genre", "subgenre", "subsubgenre", "author", "book"};
    base.search->max_depth = 1;
    EXPECT_EQ(enumerate_cells(base).size(), 80u);
    base.search->max_depth = 2;
    const auto cells = enumerate_cells(base);
    EXPECT_EQ(cells.size(), 80u + 2560u);
    std::size_t two = 0;
    std::set<std::string> unique;
    for (const auto& c : cells) {
        two += c.spec.depth() == 2;
        unique.insert(c.spec.describe());
        EXPECT_EQ(c.spec.levels[0].random.front(), "1");
    }
    EXPECT_EQ(two, 2560u);
    EXPECT_EQ(unique.size(), cells.size());
}

TEST(GridSearch, RankingMatchesManualFits) {
    Table all = toy_logistic(11, 900);
    const auto sp = split_rows(all.n_rows(), 0.8, 0.1, 5);
    const Table train = all.select_rows(sp.train), dev = all.select_rows(sp.dev);
    auto base = parse_model_spec_string(R"(
response = y
fixed = [1, x, w]
[candidates]
x = [x]
w = [w]
[search]
levels = [g1, g2]
)");
    const auto results = run_grid_search(train, dev, base);
    ASSERT_EQ(results.size(), 2u * 4u + 16u);
    for (const auto& r : results) {
        ASSERT_TRUE(r.dev_error) << r.failure;
        auto fr = fit_table(train, r.cell.spec);
        const auto ev = evaluate_table(dev, fr.data.spec, ScoringModel::from_fit(fr.fitted, fr.refined));
        EXPECT_EQ(ev.misclassification->rate, *r.dev_error);
        EXPECT_EQ(random_parameter_count(fr.data.spec), r.random_params);
    }
    for (std::size_t k = 1; k < results.size(); ++k) {
        const auto &a = results[k - 1], &b = results[k];
        const bool ordered = *a.dev_error < *b.dev_error ||
                             (*a.dev_error == *b.dev_error &&
                              (a.random_params < b.random_params ||
                               (a.random_params == b.random_params && a.description < b.description)));
        EXPECT_TRUE(ordered) << k;
    }
    const auto parallel = run_grid_search(train, dev, base, 3);
    for (std::size_t k = 0; k < results.size(); ++k) {
        EXPECT_EQ(parallel[k].description, results[k].description);
        EXPECT_EQ(parallel[k].dev_error, results[k].dev_error);
    }
}

TEST(GridSearch, FailedCellsAreRecorded) {
    const Table train = csv("g,x,y\na,1,0\na,2,1\nb,3,1\n");
    const Table dev = csv("g,x,y\na,1,0\n");
    auto base = parse_model_spec_string("response = y\nfixed = [1]\n[candidates]\nmissing = [nope]\n[search]\nlevels = [g]\nmax_depth = 1\n");
    const auto r = run_grid_search(train, dev, base);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_TRUE(r[0].dev_error);
    EXPECT_FALSE(r[1].dev_error);
    EXPECT_NE(r[1].failure.find("nope"), std::string::npos);
}

TEST(Archive, RoundTripIsBitwise) {
    for (auto fam : {Family::gaussian, Family::logistic}) {
        SimConfig cfg;
        cfg.N = 3000;
        cfg.family = fam;
        cfg.seed = 8;
        const Table t = simulation_table(simulate(cfg));
        const ModelSpec spec = simulation_spec(cfg);
        auto fr = fit_table(t, spec);
        const auto a = make_archive(fr.data.spec, fr.fitted, fr.refined, std::nullopt, {{"seed", 8}});
        std::stringstream ss;
        save_archive(ss, a);
        const auto b = load_archive(ss);
        EXPECT_EQ(b.spec, a.spec);
        EXPECT_EQ(b.model.beta, a.model.beta);
        EXPECT_EQ(b.model.sigma, a.model.sigma);
        EXPECT_EQ(b.model.phi, a.model.phi);
        EXPECT_EQ(b.model.u_hat, a.model.u_hat);
        EXPECT_EQ(b.model.posterior_cov, a.model.posterior_cov);
        EXPECT_EQ(b.metadata["seed"], 8);
        for (std::size_t l = 0; l <= 2; ++l) {
            ASSERT_EQ(b.model.hierarchy.level_size(l), a.model.hierarchy.level_size(l));
            for (std::size_t i = 0; i < a.model.hierarchy.level_size(l); ++i) {
                EXPECT_EQ(b.model.hierarchy.node(l, i).id, a.model.hierarchy.node(l, i).id);
                EXPECT_EQ(b.model.hierarchy.node(l, i).label, a.model.hierarchy.node(l, i).label);
                EXPECT_EQ(b.model.hierarchy.node(l, i).n_obs, a.model.hierarchy.node(l, i).n_obs);
            }
        }
        const auto p1 = score_table(t, a.spec, a.model);
        const auto p2 = score_table(t, b.spec, b.model);
        ASSERT_EQ(p1.eta.size(), p2.eta.size());
        EXPECT_EQ(std::memcmp(p1.eta.data(), p2.eta.data(), p1.eta.size() * sizeof(double)), 0);
    }
}

TEST(Archive, FeatureStatsSurvive) {
    Table t = csv("user,age,continent,genre,rating\nu1,30,Europe,a,9\nu1,30,Europe,b,2\nu2,50,Asia,a,8\nu2,50,Asia,a,9\n");
    auto spec = parse_model_spec_string("response = rating\nfixed = [1, prev]\n[level1]\ngroup = genre\nrandom = [1]\n[features]\n");
    const auto st = fit_feature_stats(t, spec);
    apply_features(t, *spec.features, st);
    auto fr = fit_table(t, spec);
    std::stringstream ss;
    save_archive(ss, make_archive(fr.data.spec, fr.fitted, fr.refined, st));
    const auto b = load_archive(ss);
    ASSERT_TRUE(b.features);
    EXPECT_EQ(*b.features, st);
}

TEST(Archive, RejectsBadInput) {
    std::stringstream junk("not an archive at all");
    EXPECT_THROW(load_archive(junk), DataError);

    SimConfig cfg;
    cfg.N = 500;
    cfg.family = Family::gaussian;
    const Table t = simulation_table(simulate(cfg));
    auto fr = fit_table(t, simulation_spec(cfg));
    std::stringstream ss;
    save_archive(ss, make_archive(fr.data.spec, fr.fitted, fr.refined));
    std::string bytes = ss.str();

    std::string wrong_version = bytes;
    wrong_version[8] = 9;
    std::stringstream v(wrong_version);
    const auto msg = error_of<DataError>([&] { load_archive(v); });
    EXPECT_NE(msg.find("version 9"), std::string::npos) << msg;

    std::stringstream truncated(bytes.substr(0, bytes.size() - 4));
    EXPECT_THROW(load_archive(truncated), DataError);
    std::stringstream trailing(bytes + "x");
    EXPECT_THROW(load_archive(trailing), DataError);
}

TEST(Archive, EffectReport) {
    SimConfig cfg;
    cfg.N = 4000;
    cfg.family = Family::gaussian;
    cfg.seed = 3;
    const Table t = simulation_table(simulate(cfg));
    auto fr = fit_table(t, simulation_spec(cfg));
    const auto a = make_archive(fr.data.spec, fr.fitted, fr.refined);
    const auto rows = archive_effect_report(a, 1, "z2");
    ASSERT_EQ(rows.size(), a.model.hierarchy.level_size(1));
    for (std::size_t k = 1; k < rows.size(); ++k) EXPECT_GE(rows[k - 1].n_obs, rows[k].n_obs);
    const auto i = a.model.hierarchy.find(rows[0].node);
    EXPECT_EQ(rows[0].effect, a.model.u_hat[1][i](1));
    EXPECT_THROW(archive_effect_report(a, 1, "x1"), UsageError);
    EXPECT_THROW(archive_effect_report(a, 3, "z1"), UsageError);
}

TEST(SimExport, IngestReproducesLeafBlocks) {
    for (auto fam : {Family::gaussian, Family::logistic}) {
        SimConfig cfg;
        cfg.N = 2500;
        cfg.family = fam;
        cfg.seed = 6;
        const auto ds = simulate(cfg);
        const Design direct = simulation_design(ds);
        std::stringstream ss;
        write_csv(ss, simulation_table(ds));
        const auto in = ingest(read_csv(ss), simulation_spec(cfg));
        ASSERT_EQ(in.design.blocks.size(), direct.blocks.size());
        for (std::size_t k = 0; k < direct.blocks.size(); ++k) {
            EXPECT_EQ(in.design.blocks[k].leaf, direct.blocks[k].leaf);
            EXPECT_EQ(in.design.blocks[k].X, direct.blocks[k].X);
            EXPECT_EQ(in.design.blocks[k].y, direct.blocks[k].y);
        }
    }
}

TEST(Scoring, UnseenGroupsFallBack) {
    std::string text = "g,h,x,y\n";
    const char* leaves[] = {"a,p", "a,q", "b,r", "b,s"};
    for (int k = 0; k < 16; ++k)
        text += std::string(leaves[k % 4]) + "," + std::to_string(k % 5) + "," + std::to_string(0.5 * k + (k % 3) * 0.3 + (k % 4 < 2 ? 1 : 0)) + "\n";
    const Table train = csv(text);
    auto spec = parse_model_spec_string("family = gaussian\nresponse = y\nfixed = [1, x]\n[level1]\ngroup = g\nrandom = [1]\n[level2]\ngroup = h\nrandom = [1]\n");
    auto fr = fit_table(train, spec);
    const auto model = ScoringModel::from_fit(fr.fitted, fr.refined);
    const Table fresh = csv("g,h,x,y\na,zz,1,0\nzz,zz,1,0\na,p,1,0\n");
    const auto s = score_table(fresh, fr.data.spec, model);
    EXPECT_EQ(s.matched_depth, (std::vector<std::size_t>{1, 0, 2}));
    EXPECT_DOUBLE_EQ(s.eta[1], model.beta(0) + model.beta(1));
    EXPECT_DOUBLE_EQ(s.eta[0], s.eta[1] + model.u_hat[1][0](0));
}
