#pragma once

// Drivers behind the pcdde-lab commands. Each run_* resolves a config,
// echoes it to manifest.json in the output directory, and emits CSV bodies
// that are byte-identical across reruns of the same config; wall-clock
// timestamps appear only in the manifest. A manifest is itself a valid
// --config input for the command that produced it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pcdde/adjoint.hpp"
#include "pcdde/csv.hpp"
#include "pcdde/dynamics.hpp"
#include "pcdde/field.hpp"
#include "pcdde/solver.hpp"
#include "pcdde/tensor.hpp"
#include "pcdde/threading.hpp"
#include "pcdde/training.hpp"

namespace pcdde {

using Json = nlohmann::json;

// Exit code 2 territory: unreadable files, malformed JSON, unknown keys,
// out-of-range values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One verdict a command reports; any failed line turns the exit code to 1.
struct CheckLine {
    std::string text;
    bool ok = true;
};

inline bool all_ok(const std::vector<CheckLine>& checks) {
    for (const CheckLine& c : checks)
        if (!c.ok) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

namespace detail {

// Pulls typed values out of a config object and rejects keys it never asked
// for, so typos fail loudly instead of silently running defaults.
class JsonReader {
  public:
    explicit JsonReader(const Json& j) : j_(j) {
        if (!j_.is_object()) throw ConfigError("config must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const Json::exception& e) {
            throw ConfigError(std::string("config key \"") + key + "\": " + e.what());
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key \"" + it.key() + "\"");
    }

  private:
    const Json& j_;
    std::set<std::string> seen_;
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of empty sample");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string timestamp_utc() {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

// Accepts either a bare config object or a manifest emitted by an earlier
// run of the same command.
inline Json load_run_config(const std::filesystem::path& path, const std::string& command) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    Json j;
    try {
        j = Json::parse(f);
    } catch (const Json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (j.contains("command")) {
        if (!j["command"].is_string() || j["command"].get<std::string>() != command)
            throw ConfigError("manifest was written by command \"" +
                              (j["command"].is_string() ? j["command"].get<std::string>() : "?") +
                              "\", not \"" + command + "\"");
        if (!j.contains("config") || !j["config"].is_object())
            throw ConfigError("manifest is missing its config object");
        return j["config"];
    }
    return j;
}

inline void write_manifest(const std::filesystem::path& out_dir, const std::string& command,
                           const Json& resolved_config) {
    std::filesystem::create_directories(out_dir);
    Json m;
    m["command"] = command;
    m["config"] = resolved_config;
    m["generated_at"] = detail::timestamp_utc();
    std::ofstream f(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
    f << m.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write manifest in " + out_dir.string());
}

inline void write_history_csv(const std::filesystem::path& path, const TrainHistory& h) {
    std::string header = "step,train_loss";
    for (const std::string& name : h.test_names) header += "," + name;
    CsvWriter csv(path, header);
    for (std::size_t i = 0; i < h.steps.size(); ++i) {
        std::string line = std::to_string(h.steps[i]) + "," + format_double(h.train_loss[i]);
        if (!h.test_names.empty())
            for (double v : h.test_loss[i]) line += "," + format_double(v);
        csv.row(line);
    }
    csv.close();
}

namespace detail {

// Per-step rows collected through the train hook. A divergence restart
// replays steps from the last finite checkpoint, so rows at or past the
// replayed step are dropped before the new row lands.
template <class Row>
struct StepLog {
    std::vector<std::pair<std::size_t, Row>> rows;
    void add(std::size_t step, Row row) {
        while (!rows.empty() && rows.back().first >= step) rows.pop_back();
        rows.emplace_back(step, std::move(row));
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// gradcheck: adjoint vs whole-solve tape vs finite differences
// ---------------------------------------------------------------------------

struct GradcheckConfig {
    std::size_t cases = 50;
    std::uint64_t seed = 0;
    bool sabotage = false;

    static GradcheckConfig from_json(const Json& j) {
        GradcheckConfig c;
        detail::JsonReader r(j);
        r.get("cases", c.cases);
        r.get("seed", c.seed);
        r.get("sabotage", c.sabotage);
        r.finish();
        if (c.cases == 0) throw ConfigError("cases must be at least 1");
        return c;
    }

    Json to_json() const {
        return Json{{"cases", cases}, {"seed", seed}, {"sabotage", sabotage}};
    }
};

inline constexpr double kGradcheckTapeTol = 1e-6;
inline constexpr double kGradcheckFdTol = 1e-4;

struct GradcheckCaseRow {
    std::size_t id = 0;
    std::string kind;
    std::string integrator;
    std::size_t intervals = 0, substeps = 0, state_dim = 0, batch = 1;
    double err_tape = 0.0, err_fd = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckCaseRow> rows;
    double worst_tape = 0.0, worst_fd = 0.0;
    std::size_t worst_tape_case = 0, worst_fd_case = 0;
    std::vector<CheckLine> checks;
    bool ok() const { return all_ok(checks); }
};

namespace detail {

struct GradVariant {
    ModelKind kind;
    Integrator integ;
    std::size_t delay_args;
    bool use_current;
    std::size_t augment;
};

// One row per family x integrator combination the adjoint must cover.
inline const std::vector<GradVariant>& gradcheck_variants() {
    static const std::vector<GradVariant> v = {
        {ModelKind::Node, Integrator::Rk4, 1, true, 0},
        {ModelKind::Anode, Integrator::Rk4, 1, true, 1},
        {ModelKind::NpcddeSimple, Integrator::Rk4, 1, false, 0},
        {ModelKind::NpcddeSimple, Integrator::Euler, 1, false, 0},
        {ModelKind::NpcddeSkip, Integrator::Rk4, 2, false, 0},
        {ModelKind::NpcddeGeneric, Integrator::Rk4, 1, true, 0},
        {ModelKind::NpcddeGeneric, Integrator::Euler, 2, true, 0},
        {ModelKind::Unpcdde, Integrator::Rk4, 1, true, 0},
        {ModelKind::Unpcdde, Integrator::ExactConstantField, 2, false, 0},
    };
    return v;
}

inline ModelSpec random_gradcheck_spec(const GradVariant& v, Rng& rng) {
    static const std::size_t interval_choices[] = {1, 2, 3, 5};
    ModelSpec spec;
    spec.kind = v.kind;
    spec.integrator = v.integ;
    spec.delay_args = v.delay_args;
    spec.use_current = v.use_current;
    spec.augment_dim = v.augment;
    spec.tau = rng.uniform(0.4, 1.5);
    spec.n_intervals = interval_choices[rng.index(4)];
    spec.substeps = 2 + rng.index(3);
    spec.state_dim = 1 + rng.index(4);
    if (spec.augment_dim >= spec.state_dim) spec.state_dim = spec.augment_dim + 1;

    std::size_t n_args = arg_specs(spec).size();
    std::size_t width = 3 + rng.index(6);
    bool with_bias = rng.index(2) == 1;
    std::size_t sets = v.kind == ModelKind::Unpcdde ? spec.n_intervals : 1;
    for (std::size_t s = 0; s < sets; ++s)
        spec.params.push_back(make_mlp({n_args * spec.state_dim, width, spec.state_dim},
                                       Activation::Tanh, with_bias, InitScheme::XavierUniform, rng));
    return spec;
}

// Vector for batch 1, column-batched matrix otherwise.
inline Tensor random_normal_state(std::size_t rows, std::size_t batch, Rng& rng) {
    std::vector<double> v(rows * batch);
    for (double& e : v) e = rng.normal();
    return batch == 1 ? Tensor::vector(std::move(v))
                      : Tensor::matrix(rows, batch, std::move(v));
}

// Central differences of the fixed-cotangent loss, tensor by tensor; shares
// nothing with the adjoint walk or the tape.
inline BackwardResult fd_backward(const ModelSpec& spec, const Tensor& x,
                                  const std::vector<std::pair<double, Tensor>>& lg, double step) {
    BackwardResult out;
    for (std::size_t s = 0; s < spec.params.size(); ++s) {
        std::vector<Tensor> base = param_tensors(spec.params[s]);
        std::vector<Tensor> grads;
        for (std::size_t ti = 0; ti < base.size(); ++ti) {
            auto fn = [&, ti](const Tensor& w) {
                ModelSpec sp = spec;
                std::vector<Tensor> cur = base;
                cur[ti] = w;
                set_param_tensors(sp.params[s], cur);
                return cotangent_loss(sp, x, lg);
            };
            grads.push_back(finite_diff_grad(fn, base[ti], step));
        }
        MlpGrads mg;
        std::size_t pi = 0;
        for (const MlpLayer& l : spec.params[s].layers) {
            MlpLayer gl;
            gl.weight = grads[pi++];
            if (l.bias) gl.bias = grads[pi++];
            mg.layers.push_back(std::move(gl));
        }
        out.param_grads.push_back(std::move(mg));
    }
    out.input_grad =
        finite_diff_grad([&](const Tensor& xx) { return cotangent_loss(spec, xx, lg); }, x, step);
    return out;
}

}  // namespace detail

inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg,
                                     const std::filesystem::path& out) {
    write_manifest(out, "gradcheck", cfg.to_json());
    CsvWriter csv(out / "gradcheck.csv",
                  "case,kind,integrator,intervals,substeps,state_dim,batch,"
                  "err_adjoint_vs_tape,err_adjoint_vs_fd");

    GradcheckReport rep;
    const auto& variants = detail::gradcheck_variants();
    for (std::size_t c = 0; c < cfg.cases; ++c) {
        Rng rng(cfg.seed * 1000003 + 1000 + 17 * c);
        ModelSpec spec = detail::random_gradcheck_spec(variants[c % variants.size()], rng);
        std::size_t batch = c % 4 == 3 ? 2 + rng.index(2) : 1;
        Tensor x = detail::random_normal_state(spec.data_dim(), batch, rng);

        ForwardRecord rec = forward(spec, x);
        std::vector<std::pair<double, Tensor>> lg{
            {spec.horizon(), detail::random_normal_state(spec.state_dim, batch, rng)}};
        if (c % 3 == 0 && rec.grid.node_count() > 2) {
            std::size_t mid = rec.grid.node_count() / 2;
            lg.emplace_back(rec.time_of(mid),
                            detail::random_normal_state(spec.state_dim, batch, rng));
        }

        BackwardResult adj = backward(spec, rec, lg);
        if (cfg.sabotage) adj.param_grads[0].layers[0].weight.values()[0] += 1e-2;
        BackwardResult tape = grads_via_bptt(spec, x, lg);
        BackwardResult fd = detail::fd_backward(spec, x, lg, 1e-5);

        GradcheckCaseRow row;
        row.id = c;
        row.kind = kind_name(spec.kind);
        row.integrator = integrator_name(spec.integrator);
        row.intervals = spec.n_intervals;
        row.substeps = grid_for(spec).m;
        row.state_dim = spec.state_dim;
        row.batch = batch;
        row.err_tape = backward_rel_error(adj, tape);
        row.err_fd = backward_rel_error(adj, fd);
        csv.row(row.id, row.kind, row.integrator, row.intervals, row.substeps, row.state_dim,
                row.batch, row.err_tape, row.err_fd);

        if (row.err_tape > rep.worst_tape) {
            rep.worst_tape = row.err_tape;
            rep.worst_tape_case = c;
        }
        if (row.err_fd > rep.worst_fd) {
            rep.worst_fd = row.err_fd;
            rep.worst_fd_case = c;
        }
        rep.rows.push_back(std::move(row));
    }
    csv.close();

    rep.checks.push_back(
        {"adjoint-vs-tape worst " + format_double(rep.worst_tape) + " <= " +
             format_double(kGradcheckTapeTol) + " (worst case " +
             std::to_string(rep.worst_tape_case) + ", " + rep.rows[rep.worst_tape_case].kind + ")",
         rep.worst_tape <= kGradcheckTapeTol});
    rep.checks.push_back(
        {"adjoint-vs-fd worst " + format_double(rep.worst_fd) + " <= " +
             format_double(kGradcheckFdTol) + " (worst case " +
             std::to_string(rep.worst_fd_case) + ", " + rep.rows[rep.worst_fd_case].kind + ")",
         rep.worst_fd <= kGradcheckFdTol});
    return rep;
}

// ---------------------------------------------------------------------------
// fig1: the 16x linear fitting task at horizons tau and 2*tau
// ---------------------------------------------------------------------------

struct Fig1Config {
    std::size_t iterations = 3000;
    double learning_rate = 0.01;

    static Fig1Config from_json(const Json& j) {
        Fig1Config c;
        detail::JsonReader r(j);
        r.get("iterations", c.iterations);
        r.get("learning_rate", c.learning_rate);
        r.finish();
        if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        return c;
    }

    Json to_json() const {
        return Json{{"iterations", iterations}, {"learning_rate", learning_rate}};
    }
};

struct Fig1VariantResult {
    std::string name;
    std::size_t n_intervals = 0;
    double a = 0.0, b = 0.0;
    double initial_loss = 0.0, final_loss = 0.0;
};

struct Fig1Report {
    std::vector<Fig1VariantResult> variants;
    std::vector<CheckLine> checks;
    bool ok() const { return all_ok(checks); }
};

namespace detail {

// Scalar frozen-argument model z' = a z(floor(t)) + b; one Euler substep per
// unit interval integrates it exactly.
inline ModelSpec sixteen_x_spec(std::size_t n_intervals) {
    ModelSpec spec;
    spec.kind = ModelKind::NpcddeSimple;
    spec.tau = 1.0;
    spec.n_intervals = n_intervals;
    spec.substeps = 1;
    spec.integrator = Integrator::Euler;
    spec.state_dim = 1;
    MlpParams p;
    p.activation = Activation::Identity;
    MlpLayer l;
    l.weight = Tensor::zeros({1, 1});
    l.bias = Tensor::zeros({1});
    p.layers.push_back(std::move(l));
    spec.params.push_back(std::move(p));
    return spec;
}

inline Dataset sixteen_x_dataset(double horizon) {
    std::vector<double> xs{2.0, -2.0, 1.0, -1.0, 0.5, -0.5, 0.25, -0.25};
    std::vector<double> ys(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = 16.0 * xs[i];
    Dataset d;
    d.inputs = Tensor::matrix(1, 8, std::move(xs));
    d.times = {horizon};
    d.targets = {Tensor::matrix(1, 8, std::move(ys))};
    return d;
}

}  // namespace detail

inline Fig1Report run_fig1(const Fig1Config& cfg, const std::filesystem::path& out) {
    write_manifest(out, "fig1", cfg.to_json());

    struct VariantDef {
        std::string name;
        std::size_t n;
        double a_target, a_tol;
    };
    const std::vector<VariantDef> defs = {{"T2tau", 2, 3.0, 0.05}, {"Ttau", 1, 15.0, 0.1}};

    Fig1Report rep;
    for (const VariantDef& def : defs) {
        ModelSpec init = detail::sixteen_x_spec(def.n);
        Dataset data = detail::sixteen_x_dataset(init.horizon());

        TrainConfig tc;
        tc.iterations = cfg.iterations;
        tc.learning_rate = cfg.learning_rate;
        tc.log_every = 1;

        struct Row {
            double loss, a, b;
        };
        detail::StepLog<Row> log;
        TrainResult res = train(init, tc, data, std::nullopt, nullptr,
                                [&](std::size_t step, double loss, const ModelSpec& spec,
                                    const std::optional<AffineReadout>&) {
                                    log.add(step, Row{loss, spec.params[0].layers[0].weight[0],
                                                      (*spec.params[0].layers[0].bias)[0]});
                                });

        std::filesystem::path dir = out / def.name;
        CsvWriter loss_csv(dir / "loss.csv", "step,train_loss");
        CsvWriter params_csv(dir / "params.csv", "step,a,b");
        for (const auto& [step, row] : log.rows) {
            loss_csv.row(step, row.loss);
            params_csv.row(step, row.a, row.b);
        }
        loss_csv.close();
        params_csv.close();

        Fig1VariantResult vr;
        vr.name = def.name;
        vr.n_intervals = def.n;
        vr.a = res.spec.params[0].layers[0].weight[0];
        vr.b = (*res.spec.params[0].layers[0].bias)[0];
        vr.initial_loss = evaluate_loss(init, std::nullopt, data);
        vr.final_loss = res.final_loss;
        rep.variants.push_back(vr);

        rep.checks.push_back({def.name + " a = " + format_double(vr.a) + " within " +
                                  format_double(def.a_target) + " +/- " + format_double(def.a_tol),
                              std::abs(vr.a - def.a_target) <= def.a_tol});
        if (def.n == 2)
            rep.checks.push_back({def.name + " b = " + format_double(vr.b) + " within 0 +/- 0.05",
                                  std::abs(vr.b) <= 0.05});
        rep.checks.push_back({def.name + " final loss " + format_double(vr.final_loss) +
                                  " < initial " + format_double(vr.initial_loss),
                              cfg.iterations == 0 || vr.final_loss < vr.initial_loss});
    }
    return rep;
}

// ---------------------------------------------------------------------------
// annuli: two-ring classification, four model families
// ---------------------------------------------------------------------------

struct AnnuliRunConfig {
    std::size_t iterations = 500;
    double learning_rate = 0.01;
    std::size_t batch_size = 64;
    std::size_t width = 10;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::uint64_t data_seed = 2024;
    std::size_t per_class = 512;
    double r1 = 1.0, r2 = 2.0, r3 = 3.0;
    std::vector<std::size_t> feature_epochs = {0, 1, 2, 3, 5, 10, 15, 20, 25, 31};

    static AnnuliRunConfig from_json(const Json& j) {
        AnnuliRunConfig c;
        detail::JsonReader r(j);
        r.get("iterations", c.iterations);
        r.get("learning_rate", c.learning_rate);
        r.get("batch_size", c.batch_size);
        r.get("width", c.width);
        r.get("seeds", c.seeds);
        r.get("data_seed", c.data_seed);
        r.get("per_class", c.per_class);
        r.get("r1", c.r1);
        r.get("r2", c.r2);
        r.get("r3", c.r3);
        r.get("feature_epochs", c.feature_epochs);
        r.finish();
        if (c.seeds.empty()) throw ConfigError("seeds must be nonempty");
        if (c.width == 0) throw ConfigError("width must be at least 1");
        if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        return c;
    }

    Json to_json() const {
        return Json{{"iterations", iterations},
                    {"learning_rate", learning_rate},
                    {"batch_size", batch_size},
                    {"width", width},
                    {"seeds", seeds},
                    {"data_seed", data_seed},
                    {"per_class", per_class},
                    {"r1", r1},
                    {"r2", r2},
                    {"r3", r3},
                    {"feature_epochs", feature_epochs}};
    }
};

struct AnnuliModelResult {
    std::uint64_t seed = 0;
    std::string model;
    double final_loss = 0.0;
    double accuracy = 0.0;
};

struct AnnuliReport {
    std::vector<AnnuliModelResult> results;  // seed-major, model order fixed
    double median_skip_accuracy = 0.0;
    double median_skip_loss = 0.0, median_node_loss = 0.0;
    std::vector<CheckLine> checks;
    bool ok() const { return all_ok(checks); }
};

namespace detail {

struct ExperimentModelDef {
    std::string name;
    ModelSpec proto;  // params filled per seed
};

inline std::vector<ExperimentModelDef> annuli_models() {
    std::vector<ExperimentModelDef> defs;
    {
        ModelSpec s;
        s.kind = ModelKind::Node;
        s.tau = 1.0;
        s.n_intervals = 1;
        s.substeps = 32;
        s.integrator = Integrator::Rk4;
        s.state_dim = 2;
        defs.push_back({"NODE", s});
    }
    {
        ModelSpec s;
        s.kind = ModelKind::NpcddeSimple;
        s.tau = 1.0;
        s.n_intervals = 1;
        s.integrator = Integrator::ExactConstantField;
        s.state_dim = 2;
        defs.push_back({"NPCDDE_n1", s});
    }
    {
        ModelSpec s;
        s.kind = ModelKind::NpcddeSimple;
        s.tau = 0.5;
        s.n_intervals = 2;
        s.integrator = Integrator::ExactConstantField;
        s.state_dim = 2;
        defs.push_back({"NPCDDE_n2", s});
    }
    {
        ModelSpec s;
        s.kind = ModelKind::NpcddeSkip;
        s.tau = 0.5;
        s.n_intervals = 2;
        s.integrator = Integrator::ExactConstantField;
        s.state_dim = 2;
        defs.push_back({"NPCDDE_skip", s});
    }
    return defs;
}

inline void init_model_params(ModelSpec& spec, std::size_t width, Rng& rng) {
    std::size_t in = arg_specs(spec).size() * spec.state_dim;
    std::size_t sets = spec.kind == ModelKind::Unpcdde ? spec.n_intervals : 1;
    spec.params.clear();
    for (std::size_t s = 0; s < sets; ++s)
        spec.params.push_back(make_mlp({in, width, width, spec.state_dim}, Activation::Tanh, true,
                                       InitScheme::XavierUniform, rng));
}

inline AffineReadout random_readout(std::size_t out_dim, std::size_t in_dim, Rng& rng) {
    AffineReadout r;
    r.w = Tensor::zeros({out_dim, in_dim});
    double bound = std::sqrt(6.0 / static_cast<double>(out_dim + in_dim));
    for (std::size_t i = 0; i < r.w.size(); ++i) r.w[i] = rng.uniform(-bound, bound);
    r.c = Tensor::zeros({out_dim});
    return r;
}

inline void write_feature_snapshot(const std::filesystem::path& path, const ModelSpec& spec,
                                   const Tensor& points, const std::vector<double>& labels) {
    std::vector<double> obs{spec.horizon()};
    ForwardRecord rec = forward(spec, points, obs);
    Tensor z = project_state(spec, rec.state(rec.observation_indices[0]));
    std::string header = "id";
    for (std::size_t r = 0; r < z.rows(); ++r) header += ",z" + std::to_string(r + 1);
    header += ",label";
    CsvWriter csv(path, header);
    for (std::size_t i = 0; i < z.cols(); ++i) {
        std::string line = std::to_string(i);
        for (std::size_t r = 0; r < z.rows(); ++r) line += "," + format_double(z.at(r, i));
        line += "," + format_double(labels[i]);
        csv.row(line);
    }
    csv.close();
}

inline double sign_accuracy(const Tensor& pred, const std::vector<double>& labels) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        correct += ((pred[i] >= 0.0 ? 1.0 : -1.0) == labels[i]) ? 1 : 0;
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

}  // namespace detail

inline AnnuliReport run_annuli(const AnnuliRunConfig& cfg, const std::filesystem::path& out) {
    write_manifest(out, "annuli", cfg.to_json());

    AnnuliSpec dspec;
    dspec.r1 = cfg.r1;
    dspec.r2 = cfg.r2;
    dspec.r3 = cfg.r3;
    dspec.per_class = cfg.per_class;
    dspec.seed = cfg.data_seed;
    AnnuliDataset ds = gen_annuli(dspec);
    const std::size_t n_points = ds.points.cols();

    {
        CsvWriter csv(out / "data.csv", "x1,x2,label");
        for (std::size_t i = 0; i < n_points; ++i)
            csv.row(ds.points.at(0, i), ds.points.at(1, i), ds.labels[i]);
        csv.close();
    }

    Dataset data;
    data.inputs = ds.points;
    data.times = {1.0};
    data.targets = {Tensor::matrix(1, n_points, std::vector<double>(ds.labels))};

    const std::vector<detail::ExperimentModelDef> defs = detail::annuli_models();
    const std::size_t batch = cfg.batch_size == 0 ? n_points : cfg.batch_size;
    const std::size_t steps_per_epoch = (n_points + batch - 1) / batch;
    const std::set<std::size_t> snap_epochs(cfg.feature_epochs.begin(), cfg.feature_epochs.end());

    std::vector<std::vector<AnnuliModelResult>> by_seed(cfg.seeds.size());
    run_jobs(cfg.seeds.size(), [&](std::size_t si) {
        std::uint64_t seed = cfg.seeds[si];
        std::filesystem::path seed_dir = out / ("seed" + std::to_string(seed));
        for (std::size_t mi = 0; mi < defs.size(); ++mi) {
            ModelSpec spec = defs[mi].proto;
            Rng rng(seed * 7919 + mi * 104729 + 13);
            detail::init_model_params(spec, cfg.width, rng);
            AffineReadout readout = detail::random_readout(1, spec.state_dim, rng);

            std::filesystem::path dir = seed_dir / defs[mi].name;
            std::filesystem::create_directories(dir);
            if (snap_epochs.count(0))
                detail::write_feature_snapshot(dir / "features_epoch0.csv", spec, ds.points,
                                               ds.labels);

            TrainConfig tc;
            tc.iterations = cfg.iterations;
            tc.learning_rate = cfg.learning_rate;
            tc.batch_size = cfg.batch_size;
            tc.seed = seed;
            tc.log_every = cfg.iterations == 0 ? 1 : cfg.iterations;

            detail::StepLog<double> loss_log;
            TrainResult res =
                train(spec, tc, data, readout, nullptr,
                      [&](std::size_t step, double loss, const ModelSpec& cur,
                          const std::optional<AffineReadout>&) {
                          loss_log.add(step, loss);
                          if (step % steps_per_epoch == 0) {
                              std::size_t epoch = step / steps_per_epoch;
                              if (snap_epochs.count(epoch))
                                  detail::write_feature_snapshot(
                                      dir / ("features_epoch" + std::to_string(epoch) + ".csv"),
                                      cur, ds.points, ds.labels);
                          }
                      });

            CsvWriter loss_csv(dir / "loss.csv", "step,train_loss");
            for (const auto& [step, loss] : loss_log.rows) loss_csv.row(step, loss);
            loss_csv.close();

            AnnuliModelResult r;
            r.seed = seed;
            r.model = defs[mi].name;
            r.final_loss = evaluate_loss(res.spec, res.readout, data);
            Tensor pred = predict(res.spec, res.readout, data.inputs, data.times)[0];
            r.accuracy = detail::sign_accuracy(pred, ds.labels);
            by_seed[si].push_back(std::move(r));
        }
    });

    AnnuliReport rep;
    {
        CsvWriter csv(out / "summary.csv", "seed,model,final_train_loss,train_accuracy");
        for (const auto& seed_results : by_seed)
            for (const AnnuliModelResult& r : seed_results) {
                csv.row(r.seed, r.model, r.final_loss, r.accuracy);
                rep.results.push_back(r);
            }
        csv.close();
    }

    auto collect = [&](const std::string& model, auto field) {
        std::vector<double> v;
        for (const AnnuliModelResult& r : rep.results)
            if (r.model == model) v.push_back(field(r));
        return v;
    };
    rep.median_skip_accuracy = detail::median(
        collect("NPCDDE_skip", [](const AnnuliModelResult& r) { return r.accuracy; }));
    rep.median_skip_loss = detail::median(
        collect("NPCDDE_skip", [](const AnnuliModelResult& r) { return r.final_loss; }));
    rep.median_node_loss =
        detail::median(collect("NODE", [](const AnnuliModelResult& r) { return r.final_loss; }));

    rep.checks.push_back({"NPCDDE_skip median train accuracy " +
                              format_double(rep.median_skip_accuracy) + " >= 0.99",
                          rep.median_skip_accuracy >= 0.99});
    rep.checks.push_back({"NODE median final loss " + format_double(rep.median_node_loss) +
                              " > NPCDDE_skip median final loss " +
                              format_double(rep.median_skip_loss),
                          rep.median_node_loss > rep.median_skip_loss});
    return rep;
}

// ---------------------------------------------------------------------------
// population: interval-frozen growth dynamics, two regimes, four families
// ---------------------------------------------------------------------------

struct PopulationRunConfig {
    std::size_t iterations = 2000;
    double learning_rate = 0.01;
    std::size_t width = 10;
    std::size_t substeps = 10;
    std::size_t eval_every = 250;
    std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
    std::uint64_t data_seed = 4242;
    std::size_t n_traj = 100;
    std::vector<double> regimes = {2.0, 3.2};

    static PopulationRunConfig from_json(const Json& j) {
        PopulationRunConfig c;
        detail::JsonReader r(j);
        r.get("iterations", c.iterations);
        r.get("learning_rate", c.learning_rate);
        r.get("width", c.width);
        r.get("substeps", c.substeps);
        r.get("eval_every", c.eval_every);
        r.get("seeds", c.seeds);
        r.get("data_seed", c.data_seed);
        r.get("n_traj", c.n_traj);
        r.get("regimes", c.regimes);
        r.finish();
        if (c.seeds.empty()) throw ConfigError("seeds must be nonempty");
        if (c.regimes.empty()) throw ConfigError("regimes must be nonempty");
        if (c.n_traj == 0) throw ConfigError("n_traj must be at least 1");
        if (c.substeps == 0 || c.substeps % 10 != 0)
            throw ConfigError("substeps must be a positive multiple of 10 so the solver grid "
                              "contains the 0.1-spaced sample times");
        if (c.eval_every == 0) throw ConfigError("eval_every must be at least 1");
        return c;
    }

    Json to_json() const {
        return Json{{"iterations", iterations},
                    {"learning_rate", learning_rate},
                    {"width", width},
                    {"substeps", substeps},
                    {"eval_every", eval_every},
                    {"seeds", seeds},
                    {"data_seed", data_seed},
                    {"n_traj", n_traj},
                    {"regimes", regimes}};
    }
};

struct PopulationModelResult {
    double regime = 0.0;
    std::uint64_t seed = 0;
    std::string model;
    double final_train_loss = 0.0;
    double test_h[4] = {0.0, 0.0, 0.0, 0.0};  // horizons 1, 2, 5, 10
};

struct PopulationReport {
    std::vector<PopulationModelResult> results;
    std::vector<CheckLine> checks;
    bool ok() const { return all_ok(checks); }
};

namespace detail {

inline std::vector<ExperimentModelDef> population_models(std::size_t substeps) {
    std::vector<ExperimentModelDef> defs;
    auto base = [&](ModelKind kind) {
        ModelSpec s;
        s.kind = kind;
        s.tau = 1.0;
        s.n_intervals = 3;
        s.substeps = substeps;
        s.integrator = Integrator::Rk4;
        s.state_dim = 1;
        return s;
    };
    {
        ModelSpec s = base(ModelKind::NpcddeGeneric);
        s.delay_args = 1;
        s.use_current = true;
        defs.push_back({"NPCDDE", s});
    }
    defs.push_back({"NODE", base(ModelKind::Node)});
    defs.push_back({"NDDE", base(ModelKind::Ndde)});
    {
        ModelSpec s = base(ModelKind::Anode);
        s.state_dim = 2;
        s.augment_dim = 1;
        defs.push_back({"ANODE", s});
    }
    return defs;
}

inline void write_series_csv(const std::filesystem::path& path,
                             const std::vector<PopulationSeries>& series) {
    CsvWriter csv(path, "series_id,t,x");
    for (const PopulationSeries& s : series)
        for (std::size_t i = 0; i < s.t.size(); ++i) csv.row(s.id, s.t[i], s.x[i]);
    csv.close();
}

struct PopulationEvalData {
    Tensor inputs;                   // [1 x n_traj] initial states
    std::vector<double> test_times;  // 3.1 .. 13.0
    std::vector<Tensor> test_targets;
    std::vector<std::size_t> window_counts;  // times per horizon window
};

// Free-running evaluation: integrate from t = 0 with the trained field out to
// t = 13 and score the windows (3, 3+h] without teacher forcing.
inline std::vector<double> windowed_test_losses(const ModelSpec& spec,
                                                const PopulationEvalData& ev) {
    ModelSpec long_spec = spec;
    long_spec.n_intervals = 13;
    std::vector<double> out;
    try {
        std::vector<Tensor> preds =
            predict(long_spec, std::nullopt, ev.inputs, ev.test_times);
        for (std::size_t w = 0; w < ev.window_counts.size(); ++w) {
            std::size_t count = ev.window_counts[w];
            out.push_back(mse_loss_pooled(std::span(preds.data(), count),
                                          std::span(ev.test_targets.data(), count))
                              .value);
        }
    } catch (const NonFiniteError&) {
        out.assign(ev.window_counts.size(), std::numeric_limits<double>::infinity());
    }
    return out;
}

}  // namespace detail

inline PopulationReport run_population(const PopulationRunConfig& cfg,
                                       const std::filesystem::path& out) {
    write_manifest(out, "population", cfg.to_json());

    struct RegimeData {
        PopulationDataset ds;
        Dataset train;
        detail::PopulationEvalData eval;
    };
    std::vector<RegimeData> regimes(cfg.regimes.size());
    for (std::size_t ri = 0; ri < cfg.regimes.size(); ++ri) {
        RegimeData& rd = regimes[ri];
        rd.ds = gen_population_dataset(cfg.regimes[ri], cfg.n_traj, cfg.data_seed);

        std::filesystem::path rdir = out / ("a" + format_double(cfg.regimes[ri]));
        detail::write_series_csv(rdir / "data_train.csv", rd.ds.train);
        detail::write_series_csv(rdir / "data_test.csv", rd.ds.test);

        std::vector<double> x0(cfg.n_traj);
        for (std::size_t i = 0; i < cfg.n_traj; ++i) x0[i] = rd.ds.train[i].x[0];
        rd.train.inputs = Tensor::matrix(1, cfg.n_traj, std::move(x0));
        const std::size_t train_samples = rd.ds.train[0].t.size();
        for (std::size_t s = 0; s < train_samples; ++s) {
            rd.train.times.push_back(rd.ds.train[0].t[s]);
            std::vector<double> col(cfg.n_traj);
            for (std::size_t i = 0; i < cfg.n_traj; ++i) col[i] = rd.ds.train[i].x[s];
            rd.train.targets.push_back(Tensor::matrix(1, cfg.n_traj, std::move(col)));
        }

        rd.eval.inputs = rd.train.inputs;
        const std::size_t test_samples = rd.ds.test[0].t.size();
        for (std::size_t s = 0; s < test_samples; ++s) {
            rd.eval.test_times.push_back(rd.ds.test[0].t[s]);
            std::vector<double> col(cfg.n_traj);
            for (std::size_t i = 0; i < cfg.n_traj; ++i) col[i] = rd.ds.test[i].x[s];
            rd.eval.test_targets.push_back(Tensor::matrix(1, cfg.n_traj, std::move(col)));
        }
        rd.eval.window_counts = {10, 20, 50, 100};
        for (std::size_t& c : rd.eval.window_counts) c = std::min(c, test_samples);
    }

    const std::vector<detail::ExperimentModelDef> defs =
        detail::population_models(cfg.substeps);
    const std::vector<std::string> horizon_names = {"test_loss_h1", "test_loss_h2",
                                                    "test_loss_h5", "test_loss_h10"};

    std::vector<std::vector<PopulationModelResult>> by_job(cfg.regimes.size() *
                                                           cfg.seeds.size());
    run_jobs(by_job.size(), [&](std::size_t job) {
        std::size_t ri = job / cfg.seeds.size();
        std::size_t si = job % cfg.seeds.size();
        const RegimeData& rd = regimes[ri];
        std::uint64_t seed = cfg.seeds[si];
        std::filesystem::path sdir =
            out / ("a" + format_double(cfg.regimes[ri])) / ("seed" + std::to_string(seed));

        for (std::size_t mi = 0; mi < defs.size(); ++mi) {
            ModelSpec spec = defs[mi].proto;
            Rng rng(seed * 7919 + mi * 104729 + 29);
            detail::init_model_params(spec, cfg.width, rng);

            TestEval ev;
            ev.names = horizon_names;
            ev.fn = [&rd](const ModelSpec& cur, const std::optional<AffineReadout>&) {
                return detail::windowed_test_losses(cur, rd.eval);
            };

            TrainConfig tc;
            tc.iterations = cfg.iterations;
            tc.learning_rate = cfg.learning_rate;
            tc.seed = seed;
            tc.log_every = cfg.eval_every;

            TrainResult res = train(spec, tc, rd.train, std::nullopt, &ev);

            std::filesystem::path dir = sdir / defs[mi].name;
            write_history_csv(dir / "loss.csv", res.history);

            // Predicted-vs-true free run over the whole time axis, one row
            // per series and sample.
            {
                ModelSpec long_spec = res.spec;
                long_spec.n_intervals = 13;
                std::vector<double> all_times;
                for (std::size_t s = 1; s < rd.ds.train[0].t.size(); ++s)
                    all_times.push_back(rd.ds.train[0].t[s]);
                for (double t : rd.eval.test_times) all_times.push_back(t);
                std::vector<Tensor> preds =
                    predict(long_spec, std::nullopt, rd.eval.inputs, all_times);
                CsvWriter csv(dir / "trajectory.csv", "series_id,t,x_true,x_pred");
                for (std::size_t i = 0; i < cfg.n_traj; ++i)
                    for (std::size_t s = 0; s < all_times.size(); ++s) {
                        const std::size_t train_tail = rd.ds.train[0].t.size() - 1;
                        double truth = s < train_tail ? rd.ds.train[i].x[s + 1]
                                                      : rd.ds.test[i].x[s - train_tail];
                        csv.row(i, all_times[s], truth, preds[s].at(0, i));
                    }
                csv.close();
            }

            PopulationModelResult r;
            r.regime = cfg.regimes[ri];
            r.seed = seed;
            r.model = defs[mi].name;
            r.final_train_loss = res.final_loss;
            std::vector<double> h = detail::windowed_test_losses(res.spec, rd.eval);
            for (std::size_t w = 0; w < 4; ++w) r.test_h[w] = h[w];
            by_job[job].push_back(std::move(r));
        }
    });

    PopulationReport rep;
    {
        CsvWriter csv(out / "summary.csv",
                      "regime,seed,model,final_train_loss,test_loss_h1,test_loss_h2,"
                      "test_loss_h5,test_loss_h10");
        for (const auto& job_results : by_job)
            for (const PopulationModelResult& r : job_results) {
                csv.row(r.regime, r.seed, r.model, r.final_train_loss, r.test_h[0], r.test_h[1],
                        r.test_h[2], r.test_h[3]);
                rep.results.push_back(r);
            }
        csv.close();
    }

    auto median_of = [&](double regime, const std::string& model, auto field) {
        std::vector<double> v;
        for (const PopulationModelResult& r : rep.results)
            if (r.regime == regime && r.model == model) v.push_back(field(r));
        return detail::median(v);
    };
    auto final_loss = [](const PopulationModelResult& r) { return r.final_train_loss; };
    auto h1 = [](const PopulationModelResult& r) { return r.test_h[0]; };

    for (double regime : cfg.regimes) {
        if (regime == 2.0) {
            double np = median_of(2.0, "NPCDDE", final_loss);
            double node = median_of(2.0, "NODE", final_loss);
            rep.checks.push_back({"a=2: NPCDDE median final train loss " + format_double(np) +
                                      " <= 0.1 * NODE's " + format_double(node),
                                  np <= 0.1 * node});
            double nph1 = median_of(2.0, "NPCDDE", h1);
            rep.checks.push_back(
                {"a=2: NPCDDE median horizon-1 test loss " + format_double(nph1) + " < 1e-2",
                 nph1 < 1e-2});
        } else if (regime == 3.2) {
            double nph1 = median_of(3.2, "NPCDDE", h1);
            for (const char* rival : {"NODE", "NDDE", "ANODE"}) {
                double rh1 = median_of(3.2, rival, h1);
                rep.checks.push_back({"a=3.2: NPCDDE median horizon-1 test loss " +
                                          format_double(nph1) + " < " + rival + "'s " +
                                          format_double(rh1),
                                      nph1 < rh1});
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// map: growth-map scan with recurrence detection
// ---------------------------------------------------------------------------

struct MapConfig {
    double a_min = 0.4;
    double a_max = 3.6;
    double a_step = 0.02;
    std::vector<double> extra_a = {3.11670};
    double x0 = 0.3;
    std::size_t burn_in = 500;
    std::size_t samples = 64;
    std::size_t max_period = 64;
    double tol = 1e-3;

    static MapConfig from_json(const Json& j) {
        MapConfig c;
        detail::JsonReader r(j);
        r.get("a_min", c.a_min);
        r.get("a_max", c.a_max);
        r.get("a_step", c.a_step);
        r.get("extra_a", c.extra_a);
        r.get("x0", c.x0);
        r.get("burn_in", c.burn_in);
        r.get("samples", c.samples);
        r.get("max_period", c.max_period);
        r.get("tol", c.tol);
        r.finish();
        if (!(c.a_step > 0.0)) throw ConfigError("a_step must be positive");
        if (!(c.a_min > 0.0) || c.a_max < c.a_min)
            throw ConfigError("need 0 < a_min <= a_max");
        if (c.samples == 0 || c.max_period == 0)
            throw ConfigError("samples and max_period must be at least 1");
        if (!(c.tol > 0.0)) throw ConfigError("tol must be positive");
        if (!(c.x0 >= 0.0)) throw ConfigError("x0 must be nonnegative");
        for (double a : c.extra_a)
            if (!(a > 0.0)) throw ConfigError("extra_a entries must be positive");
        return c;
    }

    Json to_json() const {
        return Json{{"a_min", a_min},   {"a_max", a_max},
                    {"a_step", a_step}, {"extra_a", extra_a},
                    {"x0", x0},         {"burn_in", burn_in},
                    {"samples", samples}, {"max_period", max_period},
                    {"tol", tol}};
    }
};

struct MapReport {
    std::size_t a_count = 0;
    std::size_t rows = 0;
};

inline MapReport run_map(const MapConfig& cfg, const std::filesystem::path& out) {
    write_manifest(out, "map", cfg.to_json());

    std::vector<double> a_values;
    for (std::size_t i = 0;; ++i) {
        double a = cfg.a_min + static_cast<double>(i) * cfg.a_step;
        if (a > cfg.a_max + 1e-12) break;
        a_values.push_back(a);
    }
    for (double a : cfg.extra_a) a_values.push_back(a);
    std::sort(a_values.begin(), a_values.end());
    a_values.erase(std::unique(a_values.begin(), a_values.end(),
                               [](double x, double y) { return std::abs(x - y) < 1e-12; }),
                   a_values.end());

    CsvWriter csv(out / "bifurcation.csv", "a,sample,x,period");
    MapReport rep;
    for (double a : a_values) {
        std::optional<std::size_t> period =
            detect_period(a, cfg.x0, cfg.max_period, cfg.burn_in, cfg.tol);
        double y = cfg.x0;
        for (std::size_t i = 0; i < cfg.burn_in; ++i) y = map_fa(a, y);
        for (std::size_t s = 0; s < cfg.samples; ++s) {
            y = map_fa(a, y);
            csv.row(a, s, y, period);
            ++rep.rows;
        }
        ++rep.a_count;
    }
    csv.close();
    return rep;
}

}  // namespace pcdde
