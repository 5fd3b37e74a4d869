#include "hglmm/ebayes.hpp"
#include "hglmm/error.hpp"
#include "hglmm/moment_fit.hpp"
#include "hglmm/predict.hpp"
#include "hglmm/simulate.hpp"
#include "hglmm/io/archive.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/features.hpp"
#include "hglmm/io/grid_search.hpp"
#include "hglmm/io/model_spec.hpp"
#include "hglmm/io/pipeline.hpp"
#include "hglmm/io/sim_export.hpp"
#include "hglmm/io/split.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

using namespace hglmm;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kData = 2, kFit = 3, kUsage = 4 };

struct Common {
    std::string data, spec, out, model;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

json matrix_json(const MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return rows;
}

json evaluation_json(const io::TableEvaluation& ev) {
    json j{{"n", ev.n}, {"mean_squared_error", ev.mean_squared_error}};
    if (ev.misclassification) {
        const auto& m = *ev.misclassification;
        j["misclassification"] = {{"rate", m.rate}, {"se", m.standard_error()}, {"ci95", {m.ci_low, m.ci_high}}};
        j["mean_log_loss"] = ev.mean_log_loss;
    }
    return j;
}

void emit(const std::string& path, const json& j) {
    if (path.empty() || path == "-") {
        std::cout << j.dump(2) << '\n';
        return;
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

void emit_table(const std::string& path, const io::Table& t) {
    if (path.empty() || path == "-") io::write_csv(std::cout, t);
    else io::write_csv_file(path, t);
}

/// Training statistics and feature columns, when the spec asks for them.
std::optional<io::FeatureStats> prepare_features(const io::ModelSpec& spec, io::Table& train,
                                                 std::vector<io::Table*> others, std::vector<std::string>& warnings) {
    if (!spec.features) return std::nullopt;
    io::FeatureStats st = io::fit_feature_stats(train, spec);
    io::apply_features(train, *spec.features, st, &warnings);
    for (auto* t : others) io::apply_features(*t, *spec.features, st, &warnings);
    return st;
}

io::Table load_scoring_table(const std::string& path, const io::ModelArchive& a) {
    io::Table t = io::read_csv_file(path);
    if (a.features && a.spec.features) {
        std::vector<std::string> warnings;
        io::apply_features(t, *a.spec.features, *a.features, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    }
    return t;
}

json fit_summary(const io::FitResult& fr, double seconds) {
    const auto& f = fr.fitted;
    json j;
    j["model"] = fr.data.spec.describe();
    j["family"] = to_string(f.family);
    j["n_obs"] = f.hierarchy.root().n_obs;
    json sizes = json::array();
    for (std::size_t l = 1; l <= f.hierarchy.depth(); ++l) sizes.push_back(f.hierarchy.level_size(l));
    j["level_sizes"] = sizes;
    j["fixed"] = {{"columns", fr.data.spec.fixed},
                  {"estimate", std::vector<double>(f.beta_bar.data(), f.beta_bar.data() + f.beta_bar.size())}};
    json cov = json::array();
    for (std::size_t l = 1; l <= f.hierarchy.depth(); ++l)
        cov.push_back({{"level", l},
                       {"group", fr.data.spec.levels[l - 1].group},
                       {"columns", fr.data.spec.levels[l - 1].random},
                       {"sigma", matrix_json(f.sigma(l))}});
    j["covariance"] = cov;
    if (f.family == Family::gaussian) j["dispersion"] = f.phi_bar;
    j["warnings"] = f.warnings;
    j["seconds"] = seconds;
    return j;
}

int cmd_fit(const Common& c, bool split) {
    io::ModelSpec spec = io::parse_model_spec_file(c.spec);
    if (spec.levels.empty()) throw UsageError("fit needs [level1]...: the spec defines no hierarchy");
    io::Table all = io::read_csv_file(c.data);
    io::Table train, dev, test;
    if (split) {
        const double tr = spec.search ? spec.search->train : 0.8, dv = spec.search ? spec.search->dev : 0.1;
        const auto s = io::split_rows(all.n_rows(), tr, dv, c.seed);
        train = all.select_rows(s.train);
        dev = all.select_rows(s.dev);
        test = all.select_rows(s.test);
    } else {
        train = std::move(all);
    }
    std::vector<std::string> warnings;
    auto stats = prepare_features(spec, train, {&dev, &test}, warnings);
    const auto t0 = std::chrono::steady_clock::now();
    io::FitResult fr = io::fit_table(train, spec, c.jobs);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fr.fitted.warnings.insert(fr.fitted.warnings.begin(), warnings.begin(), warnings.end());
    json summary = fit_summary(fr, secs);
    const auto scoring = ScoringModel::from_fit(fr.fitted, fr.refined);
    if (split) {
        summary["split"] = {{"seed", c.seed}, {"train", train.n_rows()}, {"dev", dev.n_rows()}, {"test", test.n_rows()}};
        if (dev.n_rows()) summary["dev"] = evaluation_json(io::evaluate_table(dev, fr.data.spec, scoring));
        if (test.n_rows()) summary["test"] = evaluation_json(io::evaluate_table(test, fr.data.spec, scoring));
    }
    if (!c.out.empty()) {
        json meta{{"seed", c.seed}, {"fit_seconds", secs}, {"training_rows", train.n_rows()}, {"data", c.data}};
        io::save_archive_file(c.out, io::make_archive(fr.data.spec, fr.fitted, fr.refined, stats, meta));
        summary["archive"] = c.out;
    }
    emit("-", summary);
    return kOk;
}

int cmd_predict(const Common& c) {
    const io::ModelArchive a = io::load_archive_file(c.model);
    const io::Table t = load_scoring_table(c.data, a);
    const auto s = io::score_table(t, a.spec, a.model);
    io::Table out;
    out.header = {"row", "eta", "mean", "matched_depth"};
    for (std::size_t r = 0; r < s.eta.size(); ++r)
        out.rows.push_back({std::to_string(r + 1), io::format_double(s.eta[r]), io::format_double(s.mean[r]),
                            std::to_string(s.matched_depth[r])});
    emit_table(c.out, out);
    return kOk;
}

int cmd_evaluate(const Common& c) {
    const io::ModelArchive a = io::load_archive_file(c.model);
    const io::Table t = load_scoring_table(c.data, a);
    json j = evaluation_json(io::evaluate_table(t, a.spec, a.model));
    j["model"] = a.spec.describe();
    emit(c.out, j);
    return kOk;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    auto num = [&](const std::string& tok) {
        auto v = io::try_parse_double(tok);
        if (!v || *v < 1 || *v != std::floor(*v)) throw UsageError("bad sample size '" + tok + "'");
        return static_cast<std::size_t>(*v);
    };
    if (auto dots = s.find(".."); dots != std::string::npos) {
        // a..b: a, 10a, 100a, ... up to b
        const std::size_t lo = num(s.substr(0, dots)), hi = num(s.substr(dots + 2));
        if (hi < lo) throw UsageError("empty sample-size range '" + s + "'");
        for (std::size_t n = lo; n <= hi; n *= 10) out.push_back(n);
        return out;
    }
    std::string tok;
    for (char ch : s + ",") {
        if (ch == ',') {
            if (!tok.empty()) out.push_back(num(tok));
            tok.clear();
        } else {
            tok += ch;
        }
    }
    if (out.empty()) throw UsageError("no sample sizes given");
    return out;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int cmd_simulate(const Common& c, const std::string& family, const std::string& sizes, std::size_t replicates,
                 const std::string& dump) {
    SimConfig base;
    base.family = io::parse_family(family);
    base.seed = c.seed;
    const auto Ns = parse_sizes(sizes);
    if (replicates < 1) throw UsageError("--replicates must be at least 1");
    if (!dump.empty()) {
        SimConfig cfg = base;
        cfg.N = Ns.front();
        io::write_csv_file(dump, io::simulation_table(simulate(cfg)));
    }
    io::Table t;
    t.header = {"family", "N", "replicates", "fixed_effect_loss", "covariance_loss_1", "covariance_loss_2",
                "random_effect_loss_1", "random_effect_loss_2", "prediction_loss", "mean_seconds"};
    for (auto N : Ns) {
        std::vector<EvalReport> reps(replicates);
        parallel_for(replicates, c.jobs, [&](std::size_t k) {
            SimConfig cfg = base;
            cfg.N = N;
            cfg.replicate = k;
            reps[k] = run_replicate(cfg);
        });
        std::vector<double> fe, c1, c2, r1, r2, pl;
        double secs = 0.0;
        for (const auto& r : reps) {
            fe.push_back(r.fixed_effect_loss);
            c1.push_back(r.covariance_loss[0]);
            c2.push_back(r.covariance_loss[1]);
            r1.push_back(r.random_effect_loss[0]);
            r2.push_back(r.random_effect_loss[1]);
            pl.push_back(r.prediction_loss);
            secs += r.seconds;
        }
        t.rows.push_back({family, std::to_string(N), std::to_string(replicates), io::format_double(median(fe)),
                          io::format_double(median(c1)), io::format_double(median(c2)), io::format_double(median(r1)),
                          io::format_double(median(r2)), io::format_double(median(pl)),
                          io::format_double(secs / static_cast<double>(replicates))});
    }
    emit_table(c.out, t);
    return kOk;
}

int cmd_search(const Common& c, const std::string& table_out) {
    io::ModelSpec spec = io::parse_model_spec_file(c.spec);
    if (!spec.search) throw UsageError("search needs [search] and [candidates] sections in the spec");
    const io::Table all = io::read_csv_file(c.data);
    const auto s = io::split_rows(all.n_rows(), spec.search->train, spec.search->dev, c.seed);
    io::Table train = all.select_rows(s.train), dev = all.select_rows(s.dev), test = all.select_rows(s.test);
    std::vector<std::string> warnings;
    const auto stats = prepare_features(spec, train, {&dev, &test}, warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    const auto results = io::run_grid_search(train, dev, spec, c.jobs);

    io::Table t;
    t.header = {"rank", "depth", "groups", "random_effects", "dev_error", "dev_se", "random_params", "seconds", "failure"};
    for (std::size_t k = 0; k < results.size(); ++k) {
        const auto& r = results[k];
        std::string groups, features;
        for (std::size_t l = 0; l < r.cell.groups.size(); ++l) {
            groups += (l ? ":" : "") + r.cell.groups[l];
            std::string f = "1";
            for (const auto& name : r.cell.random_groups[l]) f += "+" + name;
            features += (l ? " / " : "") + f;
        }
        t.rows.push_back({std::to_string(k + 1), std::to_string(r.cell.groups.size()), groups, features,
                          r.dev_error ? io::format_double(*r.dev_error) : "", io::format_double(r.dev_se),
                          std::to_string(r.random_params), io::format_double(r.seconds), r.failure});
    }
    if (!table_out.empty()) io::write_csv_file(table_out, t);

    json j{{"cells", results.size()},
           {"failed", std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.dev_error; })},
           {"split", {{"seed", c.seed}, {"train", train.n_rows()}, {"dev", dev.n_rows()}, {"test", test.n_rows()}}}};
    if (!results.empty() && results.front().dev_error) {
        const auto& best = results.front();
        io::FitResult fr = io::fit_table(train, best.cell.spec, c.jobs);
        j["best"] = {{"model", fr.data.spec.describe()}, {"dev_error", *best.dev_error}};
        if (test.n_rows())
            j["best"]["test"] = evaluation_json(
                io::evaluate_table(test, fr.data.spec, ScoringModel::from_fit(fr.fitted, fr.refined)));
        if (!c.out.empty()) {
            io::save_archive_file(c.out, io::make_archive(fr.data.spec, fr.fitted, fr.refined, stats,
                                                          {{"seed", c.seed}, {"selected_by", "grid search"}}));
            j["archive"] = c.out;
        }
    }
    emit("-", j);
    return kOk;
}

int cmd_report(const Common& c, std::size_t level, const std::string& feature, std::size_t top) {
    const io::ModelArchive a = io::load_archive_file(c.model);
    auto rows = io::archive_effect_report(a, level, feature);
    if (top && rows.size() > top) rows.resize(top);
    io::Table t;
    t.header = {"node", "label", "n_obs", "effect", "posterior_sd"};
    for (const auto& r : rows)
        t.rows.push_back({r.node.to_string(), r.label, std::to_string(r.n_obs), io::format_double(r.effect),
                          io::format_double(r.posterior_sd)});
    emit_table(c.out, t);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical GLMM fitting by the method of moments"};
    app.require_subcommand(1);
    Common c;

    auto* fit = app.add_subcommand("fit", "Fit a model and write an archive");
    bool split = false;
    fit->add_option("--data", c.data, "Training CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--spec", c.spec, "Model spec file")->required()->check(CLI::ExistingFile);
    fit->add_option("--out", c.out, "Archive path");
    fit->add_option("--seed", c.seed, "Split seed");
    fit->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
    fit->add_flag("--split", split, "Hold out dev/test rows (80/10/10) and report their errors");

    auto* predict = app.add_subcommand("predict", "Score a CSV with a fitted archive");
    predict->add_option("--model", c.model, "Archive path")->required()->check(CLI::ExistingFile);
    predict->add_option("--data", c.data, "CSV to score")->required()->check(CLI::ExistingFile);
    predict->add_option("--out", c.out, "Output CSV (default stdout)");

    auto* evaluate = app.add_subcommand("evaluate", "Error rates of an archive on labelled data");
    evaluate->add_option("--model", c.model, "Archive path")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--data", c.data, "Labelled CSV")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--out", c.out, "Output JSON (default stdout)");

    auto* sim = app.add_subcommand("simulate", "Loss-versus-N table on simulated hierarchies");
    std::string family = "logistic", sizes = "1000..100000", dump;
    std::size_t replicates = 20;
    sim->add_option("--family", family, "logistic or gaussian");
    sim->add_option("--N", sizes, "Sample sizes: a,b,c or a..b (decades)");
    sim->add_option("--replicates", replicates, "Replicates per N");
    sim->add_option("--seed", c.seed, "Base seed");
    sim->add_option("--jobs", c.jobs, "Replicates run concurrently")->check(CLI::PositiveNumber);
    sim->add_option("--out", c.out, "Output CSV (default stdout)");
    sim->add_option("--dump", dump, "Write the first replicate at the first N as CSV");

    auto* search = app.add_subcommand("search", "Grid search over grouping levels and random effects");
    std::string table_out;
    search->add_option("--data", c.data, "CSV with all rows")->required()->check(CLI::ExistingFile);
    search->add_option("--spec", c.spec, "Spec with [search] and [candidates]")->required()->check(CLI::ExistingFile);
    search->add_option("--seed", c.seed, "Split seed");
    search->add_option("--jobs", c.jobs, "Cells fitted concurrently")->check(CLI::PositiveNumber);
    search->add_option("--table", table_out, "Ranked table CSV");
    search->add_option("--out", c.out, "Archive of the selected model");

    auto* report = app.add_subcommand("report", "Per-node random effects of one column");
    std::size_t level = 1, top = 0;
    std::string feature = io::kIntercept;
    report->add_option("--model", c.model, "Archive path")->required()->check(CLI::ExistingFile);
    report->add_option("--level", level, "Hierarchy level (1 = coarsest)");
    report->add_option("--feature", feature, "Random-effect column");
    report->add_option("--top", top, "Keep the first N rows (0 = all)");
    report->add_option("--out", c.out, "Output CSV (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*fit) return cmd_fit(c, split);
        if (*predict) return cmd_predict(c);
        if (*evaluate) return cmd_evaluate(c);
        if (*sim) return cmd_simulate(c, family, sizes, replicates, dump);
        if (*search) return cmd_search(c, table_out);
        if (*report) return cmd_report(c, level, feature, top);
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const FitError& e) {
        std::cerr << "fit error: " << e.what() << '\n';
        return kFit;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
    return kUsage;
}
