// Command-line front end. Every command resolves defaults, then the JSON
// config (or a manifest from an earlier run), then explicit flags, writes the
// resolved config back out as manifest.json, and exits 0 when every reported
// check passed, 1 when one failed, 2 on a config problem.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcdde/experiments.hpp"

namespace {

using namespace pcdde;

int report_checks(const std::vector<CheckLine>& checks) {
    for (const CheckLine& c : checks)
        std::printf("%s  %s\n", c.ok ? "PASS" : "FAIL", c.text.c_str());
    return all_ok(checks) ? 0 : 1;
}

Json config_or_empty(const std::string& path, const std::string& command) {
    if (path.empty()) return Json::object();
    return load_run_config(path, command);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"piecewise-constant delay model lab"};
    app.require_subcommand(1);

    struct Common {
        std::string config;
        std::string out;
    };

    auto add_common = [](CLI::App* cmd, Common& c, const std::string& default_out) {
        cmd->add_option("--config", c.config, "JSON config file (or a manifest.json)");
        cmd->add_option("--out", c.out, "output directory")->default_val(default_out);
    };

    Common g_common;
    std::size_t g_cases = 0;
    std::uint64_t g_seed = 0;
    CLI::App* grad = app.add_subcommand("gradcheck", "compare adjoint, tape, and finite-difference gradients");
    add_common(grad, g_common, "runs/gradcheck");
    CLI::Option* g_cases_opt = grad->add_option("--cases", g_cases, "number of randomized cases");
    CLI::Option* g_seed_opt = grad->add_option("--seed", g_seed, "base seed for case generation");
    CLI::Option* g_sab_opt = grad->add_flag("--sabotage", "corrupt one adjoint gradient; the check must then fail");

    Common f_common;
    std::size_t f_iters = 0;
    double f_lr = 0.0;
    CLI::App* fig1 = app.add_subcommand("fig1", "fit 16x with frozen-argument linear models at horizons tau and 2 tau");
    add_common(fig1, f_common, "runs/fig1");
    CLI::Option* f_iters_opt = fig1->add_option("--iterations", f_iters, "optimizer steps");
    CLI::Option* f_lr_opt = fig1->add_option("--lr", f_lr, "learning rate");

    Common a_common;
    std::size_t a_iters = 0, a_batch = 0;
    double a_lr = 0.0;
    std::uint64_t a_dseed = 0;
    CLI::App* annuli = app.add_subcommand("annuli", "two-ring classification across four model families");
    add_common(annuli, a_common, "runs/annuli");
    CLI::Option* a_iters_opt = annuli->add_option("--iterations", a_iters, "optimizer steps per model");
    CLI::Option* a_batch_opt = annuli->add_option("--batch-size", a_batch, "minibatch size (0 = full batch)");
    CLI::Option* a_lr_opt = annuli->add_option("--lr", a_lr, "learning rate");
    CLI::Option* a_seed_opt = annuli->add_option("--seed", a_dseed, "dataset seed");

    Common p_common;
    std::size_t p_iters = 0;
    double p_lr = 0.0;
    std::uint64_t p_dseed = 0;
    CLI::App* pop = app.add_subcommand("population", "interval-frozen growth dynamics forecasting, two regimes");
    add_common(pop, p_common, "runs/population");
    CLI::Option* p_iters_opt = pop->add_option("--iterations", p_iters, "optimizer steps per model");
    CLI::Option* p_lr_opt = pop->add_option("--lr", p_lr, "learning rate");
    CLI::Option* p_seed_opt = pop->add_option("--seed", p_dseed, "dataset seed");

    Common m_common;
    double m_amin = 0.0, m_amax = 0.0, m_astep = 0.0;
    CLI::App* map = app.add_subcommand("map", "scan the growth map over a, recording orbits and detected periods");
    add_common(map, m_common, "runs/map");
    CLI::Option* m_amin_opt = map->add_option("--a-min", m_amin, "scan start");
    CLI::Option* m_amax_opt = map->add_option("--a-max", m_amax, "scan end");
    CLI::Option* m_astep_opt = map->add_option("--a-step", m_astep, "scan step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (grad->parsed()) {
            GradcheckConfig cfg = GradcheckConfig::from_json(config_or_empty(g_common.config, "gradcheck"));
            if (g_cases_opt->count()) cfg.cases = g_cases;
            if (g_seed_opt->count()) cfg.seed = g_seed;
            if (g_sab_opt->count()) cfg.sabotage = true;
            if (cfg.cases == 0) throw ConfigError("cases must be at least 1");
            GradcheckReport rep = run_gradcheck(cfg, g_common.out);
            std::printf("gradcheck: %zu cases\n", rep.rows.size());
            return report_checks(rep.checks);
        }
        if (fig1->parsed()) {
            Fig1Config cfg = Fig1Config::from_json(config_or_empty(f_common.config, "fig1"));
            if (f_iters_opt->count()) cfg.iterations = f_iters;
            if (f_lr_opt->count()) cfg.learning_rate = f_lr;
            Fig1Report rep = run_fig1(cfg, f_common.out);
            for (const Fig1VariantResult& v : rep.variants)
                std::printf("%s: a %s, b %s, loss %s -> %s\n", v.name.c_str(),
                            format_double(v.a).c_str(), format_double(v.b).c_str(),
                            format_double(v.initial_loss).c_str(),
                            format_double(v.final_loss).c_str());
            return report_checks(rep.checks);
        }
        if (annuli->parsed()) {
            AnnuliRunConfig cfg = AnnuliRunConfig::from_json(config_or_empty(a_common.config, "annuli"));
            if (a_iters_opt->count()) cfg.iterations = a_iters;
            if (a_batch_opt->count()) cfg.batch_size = a_batch;
            if (a_lr_opt->count()) cfg.learning_rate = a_lr;
            if (a_seed_opt->count()) cfg.data_seed = a_dseed;
            AnnuliReport rep = run_annuli(cfg, a_common.out);
            for (const AnnuliModelResult& r : rep.results)
                std::printf("seed %llu %s: train loss %s, accuracy %s\n",
                            static_cast<unsigned long long>(r.seed), r.model.c_str(),
                            format_double(r.final_loss).c_str(),
                            format_double(r.accuracy).c_str());
            return report_checks(rep.checks);
        }
        if (pop->parsed()) {
            PopulationRunConfig cfg =
                PopulationRunConfig::from_json(config_or_empty(p_common.config, "population"));
            if (p_iters_opt->count()) cfg.iterations = p_iters;
            if (p_lr_opt->count()) cfg.learning_rate = p_lr;
            if (p_seed_opt->count()) cfg.data_seed = p_dseed;
            PopulationReport rep = run_population(cfg, p_common.out);
            for (const PopulationModelResult& r : rep.results)
                std::printf("a=%s seed %llu %s: train %s, h1 %s, h10 %s\n",
                            format_double(r.regime).c_str(),
                            static_cast<unsigned long long>(r.seed), r.model.c_str(),
                            format_double(r.final_train_loss).c_str(),
                            format_double(r.test_h[0]).c_str(),
                            format_double(r.test_h[3]).c_str());
            return report_checks(rep.checks);
        }
        if (map->parsed()) {
            MapConfig cfg = MapConfig::from_json(config_or_empty(m_common.config, "map"));
            if (m_amin_opt->count()) cfg.a_min = m_amin;
            if (m_amax_opt->count()) cfg.a_max = m_amax;
            if (m_astep_opt->count()) cfg.a_step = m_astep;
            if (!(cfg.a_step > 0.0) || !(cfg.a_min > 0.0) || cfg.a_max < cfg.a_min)
                throw ConfigError("need 0 < a_min <= a_max and a_step > 0");
            MapReport rep = run_map(cfg, m_common.out);
            std::printf("map: %zu parameter values, %zu rows\n", rep.a_count, rep.rows);
            return 0;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
