#pragma once

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <thread>
#include <vector>

#include "subdiff/common.hpp"
#include "subdiff/constructive_approx.hpp"
#include "subdiff/eval_metrics.hpp"
#include "subdiff/oracle_scores.hpp"
#include "subdiff/sampler.hpp"
#include "subdiff/score_network.hpp"
#include "subdiff/subspace_data.hpp"
#include "subdiff/trainer.hpp"

namespace subdiff {

using nlohmann::json;

// configuration problems exit with code 2; check failures with code 1
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

enum class ExperimentKind { validate, sweep_n, sweep_t0, sweep_grid };

namespace detail {

inline void require_keys(const json& obj, const std::string& where,
                         const std::vector<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

template <typename T>
T get_req(const json& obj, const std::string& where, const std::string& key) {
    if (!obj.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::validate;
    std::uint64_t seed = 0;

    int D = 4;
    int d = 1;
    LatentDistribution latent = LatentDistribution::diag_gaussian(VectorXd::Ones(1));
    bool has_explicit_A = false;
    MatrixXd explicit_A;  // optional override; validated by run_validate

    double T = 5.0, t0 = 0.1, eta = 0.01;

    TrainConfig train;
    std::vector<double> sweep_values;

    long n_eval = 4096;  // sample count for metrics / generation
    long mc = 8;         // Monte Carlo repetitions per point where applicable

    double grid_R = 3.0;  // sweep_grid: truncation radius and time resolution
    int grid_N2 = 8;

    json to_json() const {
        json j;
        switch (experiment) {
            case ExperimentKind::validate: j["experiment"] = "validate"; break;
            case ExperimentKind::sweep_n: j["experiment"] = "sweep_n"; break;
            case ExperimentKind::sweep_t0: j["experiment"] = "sweep_t0"; break;
            case ExperimentKind::sweep_grid: j["experiment"] = "sweep_grid"; break;
        }
        j["seed"] = seed;
        json m;
        m["D"] = D;
        m["d"] = d;
        json lat;
        if (latent.kind == LatentKind::gaussian_diag) {
            lat["kind"] = "gaussian_diag";
            lat["variances"] = std::vector<double>(latent.variances.begin(),
                                                   latent.variances.end());
        } else {
            lat["kind"] = "gaussian_mixture";
            lat["weights"] = latent.weights;
            std::vector<std::vector<double>> means;
            for (const auto& mu : latent.means)
                means.emplace_back(mu.begin(), mu.end());
            lat["means"] = means;
            lat["component_variances"] = std::vector<double>(
                latent.component_variances.begin(), latent.component_variances.end());
        }
        m["latent"] = lat;
        if (has_explicit_A) {
            std::vector<std::vector<double>> rows;
            for (long i = 0; i < explicit_A.rows(); ++i)
                rows.emplace_back(explicit_A.row(i).begin(), explicit_A.row(i).end());
            m["A"] = rows;
        }
        j["model"] = m;
        j["schedule"] = {{"T", T}, {"t0", t0}, {"eta", eta}};
        j["train"] = {{"n_steps", train.n_steps},
                      {"batch_size", train.batch_size},
                      {"times_per_sample", train.times_per_sample},
                      {"lr", train.lr},
                      {"optimizer", train.optimizer == Optimizer::adam ? "adam" : "sgd_momentum"},
                      {"v_mode", train.v_mode == VMode::learned ? "learned" : "fixed"},
                      {"kappa", train.kappa},
                      {"output_clip", train.output_clip}};
        if (!sweep_values.empty()) j["sweep"] = {{"values", sweep_values}};
        j["eval"] = {{"n_samples", n_eval}, {"mc", mc}};
        if (experiment == ExperimentKind::sweep_grid)
            j["grid"] = {{"R", grid_R}, {"N2", grid_N2}};
        return j;
    }
};

inline ExperimentConfig parse_config(const json& j) {
    detail::require_keys(j, "config",
                         {"experiment", "seed", "model", "schedule", "train", "sweep", "eval",
                          "grid"});
    ExperimentConfig cfg;

    std::string kind = detail::get_req<std::string>(j, "config", "experiment");
    if (kind == "validate") cfg.experiment = ExperimentKind::validate;
    else if (kind == "sweep_n") cfg.experiment = ExperimentKind::sweep_n;
    else if (kind == "sweep_t0") cfg.experiment = ExperimentKind::sweep_t0;
    else if (kind == "sweep_grid") cfg.experiment = ExperimentKind::sweep_grid;
    else throw ConfigError("experiment must be one of validate|sweep_n|sweep_t0|sweep_grid");

    cfg.seed = detail::get_or<std::uint64_t>(j, "seed", 0);

    if (j.contains("model")) {
        const json& m = j.at("model");
        detail::require_keys(m, "model", {"D", "d", "latent", "A"});
        cfg.D = detail::get_req<int>(m, "model", "D");
        cfg.d = detail::get_req<int>(m, "model", "d");
        if (cfg.d < 1 || cfg.d >= cfg.D)
            throw ConfigError("model: need 1 <= d < D");
        const json& lat = detail::get_req<json>(m, "model", "latent");
        detail::require_keys(lat, "model.latent",
                             {"kind", "variances", "weights", "means", "component_variances"});
        std::string lkind = detail::get_req<std::string>(lat, "model.latent", "kind");
        try {
            if (lkind == "gaussian_diag") {
                auto vars = detail::get_req<std::vector<double>>(lat, "model.latent", "variances");
                cfg.latent = LatentDistribution::diag_gaussian(
                    Eigen::Map<VectorXd>(vars.data(), long(vars.size())));
            } else if (lkind == "gaussian_mixture") {
                auto weights = detail::get_req<std::vector<double>>(lat, "model.latent", "weights");
                auto means = detail::get_req<std::vector<std::vector<double>>>(lat, "model.latent",
                                                                               "means");
                auto cvars = detail::get_req<std::vector<double>>(lat, "model.latent",
                                                                  "component_variances");
                std::vector<VectorXd> mu;
                for (auto& row : means)
                    mu.push_back(Eigen::Map<VectorXd>(row.data(), long(row.size())));
                cfg.latent = LatentDistribution::mixture(
                    weights, mu, Eigen::Map<VectorXd>(cvars.data(), long(cvars.size())));
            } else {
                throw ConfigError("model.latent.kind must be gaussian_diag|gaussian_mixture");
            }
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("model.latent: ") + e.what());
        }
        if (cfg.latent.dim() != cfg.d) throw ConfigError("model.latent: dimension != d");
        if (m.contains("A")) {
            auto rows = detail::get_req<std::vector<std::vector<double>>>(m, "model", "A");
            if (long(rows.size()) != cfg.D)
                throw ConfigError("model.A: need D rows");
            cfg.explicit_A.resize(cfg.D, cfg.d);
            for (long i = 0; i < cfg.D; ++i) {
                if (long(rows[size_t(i)].size()) != cfg.d)
                    throw ConfigError("model.A: need d columns in every row");
                for (int k = 0; k < cfg.d; ++k) cfg.explicit_A(i, k) = rows[size_t(i)][size_t(k)];
            }
            cfg.has_explicit_A = true;
        }
    }

    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        detail::require_keys(s, "schedule", {"T", "t0", "eta"});
        cfg.T = detail::get_req<double>(s, "schedule", "T");
        cfg.t0 = detail::get_req<double>(s, "schedule", "t0");
        cfg.eta = detail::get_req<double>(s, "schedule", "eta");
    }
    try {
        TimeSchedule probe(cfg.T, cfg.t0, cfg.eta);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        detail::require_keys(t, "train",
                             {"n_steps", "batch_size", "times_per_sample", "lr", "optimizer",
                              "v_mode", "kappa", "output_clip"});
        cfg.train.n_steps = detail::get_or<long>(t, "n_steps", cfg.train.n_steps);
        cfg.train.batch_size = detail::get_or<long>(t, "batch_size", cfg.train.batch_size);
        cfg.train.times_per_sample =
            detail::get_or<long>(t, "times_per_sample", cfg.train.times_per_sample);
        cfg.train.lr = detail::get_or<double>(t, "lr", cfg.train.lr);
        std::string opt = detail::get_or<std::string>(t, "optimizer", "adam");
        if (opt == "adam") cfg.train.optimizer = Optimizer::adam;
        else if (opt == "sgd_momentum") cfg.train.optimizer = Optimizer::sgd_momentum;
        else throw ConfigError("train.optimizer must be adam|sgd_momentum");
        std::string vm = detail::get_or<std::string>(t, "v_mode", "learned");
        if (vm == "learned") cfg.train.v_mode = VMode::learned;
        else if (vm == "fixed") cfg.train.v_mode = VMode::fixed;
        else throw ConfigError("train.v_mode must be learned|fixed");
        cfg.train.kappa = detail::get_or<double>(t, "kappa", 0.0);
        cfg.train.output_clip = detail::get_or<double>(t, "output_clip", 0.0);
        try {
            cfg.train.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("train: ") + e.what());
        }
    }

    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        detail::require_keys(s, "sweep", {"values"});
        cfg.sweep_values = detail::get_req<std::vector<double>>(s, "sweep", "values");
    }

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        detail::require_keys(e, "eval", {"n_samples", "mc"});
        cfg.n_eval = detail::get_or<long>(e, "n_samples", cfg.n_eval);
        cfg.mc = detail::get_or<long>(e, "mc", cfg.mc);
        if (cfg.n_eval < 1 || cfg.mc < 1) throw ConfigError("eval: counts must be >= 1");
    }

    if (j.contains("grid")) {
        const json& g = j.at("grid");
        detail::require_keys(g, "grid", {"R", "N2"});
        cfg.grid_R = detail::get_or<double>(g, "R", cfg.grid_R);
        cfg.grid_N2 = detail::get_or<int>(g, "N2", cfg.grid_N2);
        if (cfg.grid_R <= 0.0 || cfg.grid_N2 < 1) throw ConfigError("grid: need R > 0, N2 >= 1");
    }

    // experiment-specific sweep preconditions
    if (cfg.experiment == ExperimentKind::sweep_n) {
        if (cfg.sweep_values.size() < 4)
            throw ConfigError("sweep_n: need >= 4 ascending sample sizes");
        for (size_t i = 0; i < cfg.sweep_values.size(); ++i) {
            if (cfg.sweep_values[i] < 2.0 ||
                cfg.sweep_values[i] != std::floor(cfg.sweep_values[i]))
                throw ConfigError("sweep_n: values must be integers >= 2");
            if (i > 0 && cfg.sweep_values[i] <= cfg.sweep_values[i - 1])
                throw ConfigError("sweep_n: values must be strictly ascending");
        }
    }
    if (cfg.experiment == ExperimentKind::sweep_t0) {
        if (cfg.sweep_values.size() < 2)
            throw ConfigError("sweep_t0: need >= 2 descending stopping times");
        for (size_t i = 0; i < cfg.sweep_values.size(); ++i) {
            double v = cfg.sweep_values[i];
            if (!(v > 0.0) || v >= cfg.T)
                throw ConfigError("sweep_t0: every t0 must lie in (0, T)");
            if (i > 0 && v >= cfg.sweep_values[i - 1])
                throw ConfigError("sweep_t0: values must be strictly descending");
            try {
                TimeSchedule probe(cfg.T, v, cfg.eta);
            } catch (const std::exception& e) {
                throw ConfigError("sweep_t0: t0=" + std::to_string(v) + ": " + e.what());
            }
        }
        if (cfg.d > 2) throw ConfigError("sweep_t0: latent metrics require d <= 2");
    }
    if (cfg.experiment == ExperimentKind::sweep_grid) {
        if (cfg.sweep_values.size() < 3)
            throw ConfigError("sweep_grid: need >= 3 ascending grid resolutions");
        for (size_t i = 0; i < cfg.sweep_values.size(); ++i) {
            if (cfg.sweep_values[i] < 2.0 ||
                cfg.sweep_values[i] != std::floor(cfg.sweep_values[i]))
                throw ConfigError("sweep_grid: values must be integers >= 2");
            if (i > 0 && cfg.sweep_values[i] <= cfg.sweep_values[i - 1])
                throw ConfigError("sweep_grid: values must be strictly ascending");
        }
        if (cfg.d > 2) throw ConfigError("sweep_grid: quadrature oracle requires d <= 2");
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------- output --

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& columns,
                      const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_csv: cannot open " + path);
    for (size_t c = 0; c < columns.size(); ++c)
        out << (c ? "," : "") << columns[c];
    out << "\n";
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); ++c)
            out << (c ? "," : "") << fmt17(row[c]);
        out << "\n";
    }
}

inline void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

inline void write_samples_csv(const std::string& path, const MatrixXd& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_samples_csv: cannot open " + path);
    for (long i = 0; i < samples.rows(); ++i) {
        for (long c = 0; c < samples.cols(); ++c)
            out << (c ? "," : "") << fmt17(samples(i, c));
        out << "\n";
    }
}

// Self-contained SVG line chart; values mapped on log10 axes when requested.
inline void write_svg_chart(const std::string& path, const std::string& title,
                            const std::vector<double>& xs,
                            const std::map<std::string, std::vector<double>>& series,
                            bool log_x, bool log_y) {
    const double W = 640, H = 440, ml = 70, mr = 20, mt = 40, mb = 50;
    auto tr_x = [&](double v) { return log_x ? std::log10(v) : v; };
    auto tr_y = [&](double v) { return log_y ? std::log10(v) : v; };
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (double x : xs) {
        xmin = std::min(xmin, tr_x(x));
        xmax = std::max(xmax, tr_x(x));
    }
    for (const auto& [name, ys] : series)
        for (double y : ys) {
            if (log_y && y <= 0.0) continue;
            ymin = std::min(ymin, tr_y(y));
            ymax = std::max(ymax, tr_y(y));
        }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    if (!(ymax > ymin)) ymax = ymin + 1.0;
    auto px = [&](double x) { return ml + (tr_x(x) - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto py = [&](double y) { return H - mb - (tr_y(y) - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_svg_chart: cannot open " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
        << title << "</text>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    int si = 0;
    double legend_y = mt + 6;
    for (const auto& [name, ys] : series) {
        const char* color = colors[si % 5];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < xs.size() && i < ys.size(); ++i) {
            if (log_y && ys[i] <= 0.0) continue;
            out << px(xs[i]) << "," << py(ys[i]) << " ";
        }
        out << "\"/>\n";
        out << "<text x=\"" << W - mr - 150 << "\" y=\"" << legend_y
            << "\" font-size=\"12\" fill=\"" << color << "\">" << name << "</text>\n";
        legend_y += 16;
        ++si;
    }
    out << "<text x=\"" << ml << "\" y=\"" << H - mb + 18 << "\" font-size=\"11\">"
        << fmt17(xs.empty() ? 0.0 : xs.front()) << "</text>\n";
    out << "<text x=\"" << W - mr << "\" y=\"" << H - mb + 18
        << "\" text-anchor=\"end\" font-size=\"11\">" << fmt17(xs.empty() ? 0.0 : xs.back())
        << "</text>\n";
    out << "</svg>\n";
}

struct CheckResult {
    std::string name;
    bool pass;
    std::string detail;
};

struct RunReport {
    std::vector<CheckResult> checks;
    bool all_pass() const {
        for (const auto& c : checks)
            if (!c.pass) return false;
        return true;
    }
    json to_json() const {
        json arr = json::array();
        for (const auto& c : checks)
            arr.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
        return {{"checks", arr}, {"all_pass", all_pass()}};
    }
};

inline void emit_run_artifacts(const ExperimentConfig& cfg, const std::string& out_dir,
                               const RunReport& report,
                               const std::vector<std::string>& extra_files) {
    write_json(out_dir + "/config.resolved.json", cfg.to_json());
    write_json(out_dir + "/report.json", report.to_json());
    json manifest;
    manifest["artifact"] = "subdiff";
    manifest["version"] = "1.0.0";
    manifest["format"] = 1;
    manifest["seed"] = cfg.seed;
    manifest["experiment"] = cfg.to_json()["experiment"];
    std::vector<std::string> files = {"config.resolved.json", "report.json", "manifest.json"};
    files.insert(files.end(), extra_files.begin(), extra_files.end());
    manifest["files"] = files;
    write_json(out_dir + "/manifest.json", manifest);
}

namespace detail {

// static scheduling: deterministic regardless of worker count
inline void parallel_for(long n, int n_workers, const std::function<void(long)>& body) {
    if (n_workers <= 1 || n <= 1) {
        for (long i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<long> next{0};
    for (int w = 0; w < n_workers; ++w)
        pool.emplace_back([&] {
            for (long i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
        });
    for (auto& t : pool) t.join();
}

inline SubspaceModel make_model(const ExperimentConfig& cfg) {
    if (cfg.has_explicit_A) return SubspaceModel(cfg.explicit_A, cfg.latent);
    Rng rng = split_rng(cfg.seed, 0x6d6f64656cULL);
    return SubspaceModel::random(cfg.D, cfg.d, cfg.latent, rng);
}

}  // namespace detail

// ------------------------------------------------------------- validate --

inline int run_validate(const ExperimentConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    RunReport report;
    auto add = [&report](const std::string& name, bool pass, const std::string& detail) {
        report.checks.push_back({name, pass, detail});
    };

    // the A invariant is a named check so that injected corruption is
    // reported rather than thrown
    MatrixXd A;
    if (cfg.has_explicit_A) {
        A = cfg.explicit_A;
    } else {
        Rng rng = split_rng(cfg.seed, 0x6d6f64656cULL);
        A = random_orthonormal(cfg.D, cfg.d, rng);
    }
    double ortho_dev =
        (A.transpose() * A - MatrixXd::Identity(cfg.d, cfg.d)).lpNorm<Eigen::Infinity>();
    bool a_ok = ortho_dev <= 1e-10;
    add("model.A_orthonormal", a_ok, "max |A^T A - I| = " + fmt17(ortho_dev));

    std::vector<std::vector<double>> csv_rows;
    TimeSchedule sched(cfg.T, cfg.t0, cfg.eta);

    if (a_ok) {
        SubspaceModel model(A, cfg.latent);

        if (cfg.d <= 2) {
            Rng rng = split_rng(cfg.seed, 1);
            std::uniform_real_distribution<double> ut(cfg.t0, cfg.T);
            double worst = 0.0;
            for (int i = 0; i < 20; ++i) {
                VectorXd x = 2.0 * gaussian_vector(cfg.D, rng);
                double t = ut(rng);
                VectorXd closed = oracle_score(model, sched, t, x).total();
                VectorXd quad = quadrature_score(model, sched, t, x).score.total();
                worst = std::max(worst,
                                 (closed - quad).norm() / std::max(1.0, closed.norm()));
            }
            add("oracle.quadrature_equivalence", worst <= 1e-6,
                "max rel deviation = " + fmt17(worst));
            csv_rows.push_back({1.0, worst});
        }

        {  // fixed closed-form substitution, independent of the config model
            MatrixXd e1 = MatrixXd::Identity(2, 1);
            SubspaceModel spot(e1, LatentDistribution::diag_gaussian(VectorXd::Constant(1, 4.0)));
            VectorXd x(2);
            x << 1.0, 1.0;
            TimeSchedule s5(5.0, 0.1, 0.01);
            VectorXd got = gaussian_score(spot, s5, std::log(2.0), x).total();
            double dev = std::max(std::abs(got[0] + 0.4), std::abs(got[1] + 2.0));
            add("oracle.example_spot_value", dev <= 1e-12, "max coord deviation = " + fmt17(dev));
            csv_rows.push_back({2.0, dev});
        }

        {
            Rng rng = split_rng(cfg.seed, 2);
            double t_mid = 0.5 * (cfg.t0 + cfg.T);
            auto res = score_moment_identity(model, sched, t_mid, 20000, rng);
            bool ok = true;
            double worst_sigma = 0.0;
            for (int i = 0; i < cfg.d; ++i)
                for (int k = 0; k < cfg.d; ++k) {
                    double expect = i == k ? -1.0 : 0.0;
                    double sig = std::abs(res.estimate(i, k) - expect) /
                                 std::max(res.se(i, k), 1e-300);
                    worst_sigma = std::max(worst_sigma, sig);
                    if (sig > 4.0) ok = false;
                }
            add("oracle.moment_identity", ok, "worst deviation = " + fmt17(worst_sigma) + " se");

            Rng rng2 = split_rng(cfg.seed, 3);
            auto sm = score_second_moment(model, sched, t_mid, 20000, rng2);
            bool bok = sm.estimate <= sm.bound + 4.0 * sm.se;
            add("oracle.second_moment_bound", bok,
                "estimate = " + fmt17(sm.estimate) + ", bound = " + fmt17(sm.bound));
            csv_rows.push_back({3.0, worst_sigma});
            csv_rows.push_back({4.0, sm.estimate});
        }

        {
            auto chk = orthogonal_empirical_check(sched, 20000, cfg.seed + 11);
            double se = chk.recursion_var * std::sqrt(2.0 / 20000.0);
            bool ok = std::abs(chk.empirical_var - chk.recursion_var) <= 4.0 * se;
            add("sampler.variance_recursion_empirical", ok,
                "empirical = " + fmt17(chk.empirical_var) +
                    ", recursion = " + fmt17(chk.recursion_var));
            double vK = chk.recursion_var;
            bool bounds = vK <= std::exp(1.0) * (cfg.t0 + cfg.eta) &&
                          vK <= std::exp(cfg.t0 + cfg.eta) - 1.0 + 1e-12;
            add("sampler.recursion_bounds", bounds, "V_K = " + fmt17(vK));
            double cont = continuous_orthogonal_variance(cfg.T, cfg.T - cfg.t0);
            bool cont_ok = std::abs(vK - cont) <= 0.05 * cont + 5.0 * cfg.eta;
            add("sampler.continuous_limit", cont_ok,
                "discrete = " + fmt17(vK) + ", continuous = " + fmt17(cont));
            csv_rows.push_back({5.0, chk.empirical_var});
            csv_rows.push_back({6.0, vK});
        }

        {
            Rng rng = split_rng(cfg.seed, 4);
            bool ok = true;
            for (int trial = 0; trial < 200 && ok; ++trial) {
                MatrixXd Ar = random_orthonormal(cfg.D, cfg.d, rng);
                MatrixXd Vr = random_orthonormal(cfg.D, cfg.d, rng);
                ok = ortho_lemma_check(Ar, Vr).holds;
            }
            add("lemma.ortho_matrix", ok, "200 random orthonormal pairs");
        }

        {
            Rng rng = split_rng(cfg.seed, 5);
            GridApproximant approx(std::min(cfg.d, 2), 2.0, 10, 6, cfg.T, 1);
            double dev = partition_of_unity_check(approx, 2000, rng);
            add("approx.partition_of_unity", dev <= 1e-12, "max |sum - 1| = " + fmt17(dev));
            csv_rows.push_back({7.0, dev});
        }

        {
            bool ok = true;
            for (int dd : {1, 2})
                for (double C : {0.5, 1.0, 2.0})
                    for (double R : {2.0, 3.0, 4.0}) {
                        auto r = gaussian_tail_check(dd, C, R);
                        if (r.lhs1 > r.rhs1 || r.lhs2 > r.rhs2) ok = false;
                    }
            add("tail.gaussian_bounds", ok, "d in {1,2}, C in {0.5,1,2}, R in {2,3,4}");
        }
    }

    write_csv(out_dir + "/checks.csv", {"check_index", "value"}, csv_rows);
    emit_run_artifacts(cfg, out_dir, report, {"checks.csv"});
    return report.all_pass() ? 0 : 1;
}

// -------------------------------------------------------------- sweep_n --

inline int run_sweep_n(const ExperimentConfig& cfg, const std::string& out_dir, int n_workers = 1) {
    std::filesystem::create_directories(out_dir);
    SubspaceModel model = detail::make_model(cfg);
    TimeSchedule sched(cfg.T, cfg.t0, cfg.eta);
    long n_points = long(cfg.sweep_values.size());

    struct Point {
        double n = 0.0, subspace_err = 0.0, explicit_loss = 0.0;
        bool diverged = false;
        std::vector<double> loss_trace;
    };
    std::vector<Point> points{size_t(n_points)};

    detail::parallel_for(n_points, n_workers, [&](long i) {
        Point& pt = points[size_t(i)];
        long n = long(cfg.sweep_values[size_t(i)]);
        pt.n = double(n);
        Rng data_rng = split_rng(cfg.seed, 1000 + std::uint64_t(i));
        MatrixXd data = sample_data(model, n, data_rng);
        // the per-point sample budget is n data rows x times_per_sample fixed
        // denoising tuples; fresh noise every step would erase the
        // n-dependence of the trained estimator
        DsmTuples tuples = make_dsm_tuples(data, cfg.train.times_per_sample, sched, data_rng);

        Rng init_rng = split_rng(cfg.seed, 2000 + std::uint64_t(i));
        ScoreNetwork net = init_network(cfg.D, cfg.d, {3, 64, cfg.train.kappa,
                                        cfg.train.output_clip},
                                        VInit::random, init_rng, nullptr, cfg.train.v_mode);
        TrainConfig tc = cfg.train;
        tc.seed = cfg.seed * 1000003ULL + std::uint64_t(i);
        try {
            TrainResult res = train_tuples(net, tuples, tc, sched);
            pt.loss_trace = std::move(res.loss_trace);
        } catch (const std::runtime_error&) {
            pt.diverged = true;
            return;
        }
        pt.subspace_err = subspace_error(net.V, model.A);
        auto field = [&](const VectorXd& x, double t) { return eval_score(net, sched, x, t); };
        Rng eval_rng = split_rng(cfg.seed, 3000 + std::uint64_t(i));
        pt.explicit_loss =
            explicit_score_loss(field, model, sched, cfg.n_eval / 4, cfg.mc, eval_rng).mean;
    });

    std::vector<std::vector<double>> rows;
    std::vector<double> ns, errs, losses;
    for (const auto& pt : points) {
        rows.push_back({pt.n, pt.subspace_err, pt.explicit_loss, pt.diverged ? 1.0 : 0.0});
        if (!pt.diverged) {
            ns.push_back(pt.n);
            errs.push_back(std::max(pt.subspace_err, 1e-300));
            losses.push_back(std::max(pt.explicit_loss, 1e-300));
        }
    }
    write_csv(out_dir + "/sweep_n.csv", {"n", "subspace_error", "explicit_loss", "diverged"},
              rows);
    for (const auto& pt : points) {
        if (pt.loss_trace.empty()) continue;
        std::vector<std::vector<double>> trace;
        for (size_t s = 0; s < pt.loss_trace.size(); ++s)
            trace.push_back({double(s), pt.loss_trace[s]});
        write_csv(out_dir + "/loss_trace_n" + std::to_string(long(pt.n)) + ".csv",
                  {"step", "dsm_loss"}, trace);
    }

    RunReport report;
    json summary;
    if (ns.size() >= 3) {
        auto fit_err = rate_fit(ns, errs);
        auto fit_loss = rate_fit(ns, losses);
        int decreasing = 0;
        for (size_t i = 1; i < errs.size(); ++i)
            if (errs[i] < errs[i - 1]) ++decreasing;
        int needed = int(errs.size()) - 2;  // "3 of 4" scaled to the grid size
        report.checks.push_back({"sweep_n.error_decreasing",
                                 decreasing >= needed,
                                 std::to_string(decreasing) + " of " +
                                     std::to_string(errs.size() - 1) + " steps decreasing"});
        report.checks.push_back(
            {"sweep_n.subspace_slope_negative", fit_err.slope < 0.0,
             "slope = " + fmt17(fit_err.slope)});
        report.checks.push_back(
            {"sweep_n.score_error_slope_negative", fit_loss.slope < 0.0,
             "slope = " + fmt17(fit_loss.slope)});
        summary["subspace_slope"] = fit_err.slope;
        summary["explicit_loss_slope"] = fit_loss.slope;
        summary["decreasing_steps"] = decreasing;
    } else {
        report.checks.push_back(
            {"sweep_n.enough_points", false, "too many diverged points to fit a rate"});
    }
    long n_div = 0;
    for (const auto& pt : points)
        if (pt.diverged) ++n_div;
    summary["diverged_points"] = n_div;
    write_json(out_dir + "/summary.json", summary);

    if (!ns.empty())
        write_svg_chart(out_dir + "/sweep_n.svg", "subspace recovery vs sample size", ns,
                        {{"subspace_error", errs}, {"explicit_loss", losses}}, true, true);
    emit_run_artifacts(cfg, out_dir, report, {"sweep_n.csv", "summary.json", "sweep_n.svg"});
    return report.all_pass() ? 0 : 1;
}

// ------------------------------------------------------------- sweep_t0 --

inline int run_sweep_t0(const ExperimentConfig& cfg, const std::string& out_dir,
                        int n_workers = 1) {
    std::filesystem::create_directories(out_dir);
    SubspaceModel model = detail::make_model(cfg);
    long n_points = long(cfg.sweep_values.size());

    // common random numbers across grid points: the W2 bias comparison uses
    // the same latent draws and smoothing noise at every t0
    long n_w2 = cfg.d == 2 ? std::min(cfg.n_eval, 2048L) : cfg.n_eval;
    Rng base_rng = split_rng(cfg.seed, 0x74300ULL);
    MatrixXd z0 = sample_latent(cfg.latent, n_w2, base_rng);
    MatrixXd xi = gaussian_matrix(n_w2, cfg.d, base_rng);

    struct Point {
        double t0 = 0.0, w2 = 0.0, tv = 0.0, ortho = 0.0, ortho_bound = 0.0;
    };
    std::vector<Point> points{size_t(n_points)};

    detail::parallel_for(n_points, n_workers, [&](long i) {
        Point& pt = points[size_t(i)];
        double t0 = cfg.sweep_values[size_t(i)];
        pt.t0 = t0;
        TimeSchedule sched(cfg.T, t0, cfg.eta);
        auto [a, h] = sched.alpha_h(t0);

        // W2(P^LD_{t0}, P_z) on shared draws; sqrt(h) noise is the only
        // difference between the two clouds as t0 -> 0
        MatrixXd smoothed = a * z0 + std::sqrt(h) * xi;
        pt.w2 = w2_latent(smoothed, z0);

        ScoreField truth = [&](const VectorXd& x, double t) {
            return oracle_score(model, sched, t, x).total();
        };
        long n_gen = std::min(cfg.n_eval, 4096L);
        auto run = backward_sample(truth, sched, n_gen, cfg.D,
                                   cfg.seed * 7919ULL + std::uint64_t(i));
        MatrixXd ortho = run.samples - (run.samples * model.A) * model.A.transpose();
        pt.ortho = ortho.squaredNorm() / double(n_gen * (cfg.D - cfg.d));
        pt.ortho_bound = std::exp(1.0) * (t0 + cfg.eta);

        // generated latent coordinates against fresh oracle draws of P^LD_{t0}
        MatrixXd gen_latent = run.samples * model.A;
        Rng ref_rng = split_rng(cfg.seed, 0x74376ULL + std::uint64_t(i));
        MatrixXd ref_latent =
            a * sample_latent(cfg.latent, n_gen, ref_rng) +
            std::sqrt(h) * gaussian_matrix(n_gen, cfg.d, ref_rng);
        pt.tv = tv_latent_histogram(gen_latent, ref_latent);

        write_samples_csv(out_dir + "/samples_" + std::to_string(i) + ".csv", run.samples);
        json sidecar;
        sidecar["schedule"] = {{"T", cfg.T}, {"t0", t0}, {"eta", cfg.eta}};
        sidecar["score"] = "oracle";
        sidecar["n"] = n_gen;
        sidecar["seed"] = cfg.seed * 7919ULL + std::uint64_t(i);
        write_json(out_dir + "/samples_" + std::to_string(i) + ".json", sidecar);
    });

    std::vector<std::vector<double>> rows;
    for (const auto& pt : points)
        rows.push_back({pt.t0, pt.w2, pt.tv, pt.ortho, pt.ortho_bound});
    write_csv(out_dir + "/sweep_t0.csv",
              {"t0", "w2_latent", "tv_latent", "ortho_second_moment", "ortho_bound"}, rows);

    RunReport report;
    bool monotone = true;
    for (size_t i = 1; i < points.size(); ++i)
        if (points[i].w2 >= points[i - 1].w2) monotone = false;
    report.checks.push_back({"sweep_t0.w2_bias_decreasing", monotone,
                             "W2 along the descending t0 grid"});
    bool ortho_ok = true;
    for (const auto& pt : points)
        if (pt.ortho > 1.25 * pt.ortho_bound) ortho_ok = false;
    report.checks.push_back({"sweep_t0.ortho_moment_bounded", ortho_ok,
                             "second moment <= 1.25 e (t0 + eta) at every point"});

    std::vector<double> t0s, w2s, orthos;
    for (const auto& pt : points) {
        t0s.push_back(pt.t0);
        w2s.push_back(pt.w2);
        orthos.push_back(pt.ortho);
    }
    write_svg_chart(out_dir + "/sweep_t0.svg", "early-stopping tradeoff", t0s,
                    {{"w2_latent", w2s}, {"ortho_second_moment", orthos}}, false, false);
    emit_run_artifacts(cfg, out_dir, report, {"sweep_t0.csv", "sweep_t0.svg"});
    return report.all_pass() ? 0 : 1;
}

// ------------------------------------------------------------ sweep_grid --

inline int run_sweep_grid(const ExperimentConfig& cfg, const std::string& out_dir,
                          int n_workers = 1) {
    std::filesystem::create_directories(out_dir);
    TimeSchedule sched(cfg.T, cfg.t0, cfg.eta);
    long n_points = long(cfg.sweep_values.size());

    // target: the evolved latent score field, the object the theory grids
    LatentField target = [&cfg, &sched](const VectorXd& z, double t) {
        auto [a, h] = sched.alpha_h(t);
        return latent_score(evolved_latent(cfg.latent, a, h), z);
    };
    double lambda_min = cfg.latent.kind == LatentKind::gaussian_diag
                            ? cfg.latent.variances.minCoeff()
                            : cfg.latent.component_variances.minCoeff();
    double beta = std::max(1.0 / lambda_min, 1.0);
    double tau_hat = measure_tau(target, cfg.d, cfg.grid_R, sched);

    struct Point {
        double N1 = 0.0, sup_err = 0.0, budget = 0.0;
        bool compiled_ok = true;
    };
    std::vector<Point> points{size_t(n_points)};

    detail::parallel_for(n_points, n_workers, [&](long i) {
        Point& pt = points[size_t(i)];
        int N1 = int(cfg.sweep_values[size_t(i)]);
        pt.N1 = double(N1);
        auto approx = build_approximant(target, cfg.d, cfg.d, cfg.grid_R, N1, cfg.grid_N2, sched);

        // interior probe cloud, deterministic per point
        Rng rng = split_rng(cfg.seed, 0x67726964ULL + std::uint64_t(i));
        double cell_z = 2.0 * cfg.grid_R / N1;
        double cell_t = cfg.T / cfg.grid_N2;
        std::uniform_real_distribution<double> uz(-cfg.grid_R + cell_z, cfg.grid_R - cell_z);
        std::uniform_real_distribution<double> ut(std::max(cfg.t0, cell_t), cfg.T - cell_t);
        double sup = 0.0;
        for (long p = 0; p < 3000; ++p) {
            VectorXd z(cfg.d);
            for (int k = 0; k < cfg.d; ++k) z[k] = uz(rng);
            double t = ut(rng);
            sup = std::max(sup, (approx.evaluate(z, t) - target(z, t)).norm());
        }
        pt.sup_err = sup;
        pt.budget = approximation_error_budget(cfg.grid_R, beta, cfg.d, cfg.T, tau_hat, N1,
                                               cfg.grid_N2);

        if (cfg.d == 1) {
            double t_slice = 0.5 * (std::max(cfg.t0, cell_t) + cfg.T - cell_t);
            ScoreNetwork compiled = compile_relu_1d(approx, t_slice);
            save_checkpoint(compiled, out_dir + "/compiled_N" + std::to_string(N1) + ".ckpt");
            Rng prng = split_rng(cfg.seed, 0x636f6d70ULL + std::uint64_t(i));
            std::uniform_real_distribution<double> uz2(-cfg.grid_R, cfg.grid_R);
            for (int p = 0; p < 2000; ++p) {
                VectorXd z = VectorXd::Constant(1, uz2(prng));
                if (std::abs(mlp_forward(compiled, z, t_slice)[0] -
                             approx.evaluate(z, t_slice)[0]) > 1e-10)
                    pt.compiled_ok = false;
            }
        }
    });

    std::vector<std::vector<double>> rows;
    std::vector<double> n1s, errs, budgets;
    for (const auto& pt : points) {
        rows.push_back({pt.N1, pt.sup_err, pt.budget, tau_hat});
        n1s.push_back(pt.N1);
        errs.push_back(std::max(pt.sup_err, 1e-300));
        budgets.push_back(pt.budget);
    }
    write_csv(out_dir + "/sweep_grid.csv", {"N1", "sup_error", "budget", "tau_hat"}, rows);

    RunReport report;
    bool within = true;
    for (const auto& pt : points)
        if (pt.sup_err > pt.budget) within = false;
    report.checks.push_back({"sweep_grid.error_within_budget", within,
                             "sup error <= 2R(1+beta)sqrt(d)/N1 + T tau/N2 at every N1"});
    auto fit = rate_fit(n1s, errs);
    report.checks.push_back({"sweep_grid.error_slope_negative", fit.slope < 0.0,
                             "slope = " + fmt17(fit.slope)});
    if (cfg.d == 1) {
        bool comp = true;
        for (const auto& pt : points)
            if (!pt.compiled_ok) comp = false;
        report.checks.push_back({"sweep_grid.relu_compilation_exact", comp,
                                 "compiled network matches the grid field to 1e-10"});
    }

    json summary;
    summary["error_slope"] = fit.slope;
    summary["tau_hat"] = tau_hat;
    summary["beta"] = beta;
    write_json(out_dir + "/summary.json", summary);
    write_svg_chart(out_dir + "/sweep_grid.svg", "approximation error vs grid resolution", n1s,
                    {{"sup_error", errs}, {"budget", budgets}}, true, true);
    emit_run_artifacts(cfg, out_dir, report,
                       {"sweep_grid.csv", "summary.json", "sweep_grid.svg"});
    return report.all_pass() ? 0 : 1;
}

inline int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                          int n_workers = 1) {
    switch (cfg.experiment) {
        case ExperimentKind::validate: return run_validate(cfg, out_dir);
        case ExperimentKind::sweep_n: return run_sweep_n(cfg, out_dir, n_workers);
        case ExperimentKind::sweep_t0: return run_sweep_t0(cfg, out_dir, n_workers);
        case ExperimentKind::sweep_grid: return run_sweep_grid(cfg, out_dir, n_workers);
    }
    return 2;
}

}  // namespace subdiff
