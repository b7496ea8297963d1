// Command-line front end: pipeline stages as subcommands plus standalone
// metric tools that operate on volume files.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 numeric failure,
// 4 I/O failure.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kv2ct/config.hpp"
#include "kv2ct/eval.hpp"
#include "kv2ct/phantom.hpp"
#include "kv2ct/pipeline.hpp"
#include "kv2ct/volume.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string workspace;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("-c,--config", o.config_path, "Run configuration file (TOML)");
    cmd->add_option("-w,--workspace", o.workspace, "Workspace directory (overrides the config)");
    cmd->add_option("-s,--seed", o.seed,
                    "Run seed override (also re-seeds the phantom)");
    cmd->add_flag("-f,--force", o.force, "Recompute even when cached results match");
    cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress output");
}

kv2ct::RunConfig make_config(const CommonOpts& o) {
    kv2ct::RunConfig cfg =
        o.config_path.empty() ? kv2ct::default_desk_config() : kv2ct::load_run_config(o.config_path);
    if (!o.workspace.empty()) cfg.workspace = o.workspace;
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.phantom.seed = *o.seed;
        cfg.train_primary.seed = *o.seed * 100 + 1;
        cfg.train_secondary.seed = *o.seed * 100 + 2;
    }
    cfg.validate();
    return cfg;
}

std::ostream* log_stream(const CommonOpts& o) { return o.quiet ? nullptr : &std::cerr; }

void print_summary(const kv2ct::PipelineResult& result) {
    std::cout << "MAE: " << result.metrics.mae_hu << " HU\n";
    for (const auto& [label, row] : result.metrics.gamma_pass_percent) {
        const auto it = row.find("mean");
        if (it != row.end())
            std::cout << "gamma " << label << ": " << it->second << " % (mean)\n";
    }
    std::cout << "shift error: " << result.metrics.shift_error_mm << " mm (delta "
              << result.metrics.shift_delta_mm << " mm)\n";
    const auto hi = result.extras.find("head_improvement_percent");
    if (hi != result.extras.end())
        std::cout << "head-region improvement: " << hi->second << " %\n";
    std::cout << "report: " << result.report_path << "\n";
}

int dispatch(int argc, char** argv) {
    CLI::App app{"kv2ct: 3D CT synthesis from two orthogonal kV projections"};
    app.require_subcommand(1);

    // ---- pipeline stages ----
    CommonOpts opts;
    bool dry_run = false;
    std::string train_model = "both";

    CLI::App* phantom = app.add_subcommand("phantom", "Generate the digital phantom");
    CLI::App* project = app.add_subcommand("project", "Compute the reference projections");
    CLI::App* augment =
        app.add_subcommand("augment", "Expand the training set by shift/phase enumeration");
    augment->add_flag("--dry-run", dry_run, "Print the pair counts without computing anything");
    CLI::App* train = app.add_subcommand("train", "Fit the converter models");
    train->add_option("-m,--model", train_model, "Which model to train: primary|secondary|both")
        ->check(CLI::IsMember({"primary", "secondary", "both"}));
    CLI::App* synth =
        app.add_subcommand("synthesize", "Run the trained models on the held-out projections");
    CLI::App* compose = app.add_subcommand("compose", "Assemble the final synthetic CT");
    CLI::App* evaluate = app.add_subcommand("evaluate", "Compute the metric suite");
    CLI::App* report = app.add_subcommand("report", "Assemble report.json from stage outputs");
    CLI::App* run = app.add_subcommand("run", "Full pipeline end to end");
    run->add_flag("--dry-run", dry_run, "Print the resolved config hash and stage plan only");
    for (CLI::App* cmd : {phantom, project, augment, train, synth, compose, evaluate, run, report})
        add_common(cmd, opts);

    // ---- standalone metric tools ----
    CLI::App* metric = app.add_subcommand("metric", "Standalone metrics on volume files");
    metric->require_subcommand(1);
    std::string ref_stem, eval_stem, dose_stem, masks_stem, out_path;
    double body_threshold = 0.0;
    bool use_body_threshold = false;
    kv2ct::GammaCriteria crit;
    bool gamma_both = false;

    CLI::App* m_mae = metric->add_subcommand("mae", "Mean absolute error between two volumes");
    CLI::App* m_cdvh =
        metric->add_subcommand("cdvh", "Cumulative |difference|-volume histogram (CSV)");
    CLI::App* m_gamma = metric->add_subcommand("gamma", "3D gamma pass rate");
    CLI::App* m_dvh = metric->add_subcommand("dvh", "DVH indices of a dose volume per structure");
    CLI::App* m_shift =
        metric->add_subcommand("shift", "Residual S-I shift between two volumes");

    for (CLI::App* cmd : {m_mae, m_cdvh, m_gamma, m_shift}) {
        cmd->add_option("--ref", ref_stem, "Reference volume stem (<stem>.json + <stem>.raw)")
            ->required();
        cmd->add_option("--eval", eval_stem, "Evaluated volume stem")->required();
    }
    for (CLI::App* cmd : {m_mae, m_cdvh})
        cmd->add_option("--body-threshold", body_threshold,
                        "Restrict to reference voxels above this value")
            ->each([&](const std::string&) { use_body_threshold = true; });
    m_cdvh->add_option("-o,--out", out_path, "Output CSV path (stdout when omitted)");
    m_gamma->add_option("--dd", crit.dd_percent, "Intensity criterion, % of the reference max")
        ->capture_default_str();
    m_gamma->add_option("--dta", crit.dta_mm, "Distance to agreement, mm")->capture_default_str();
    m_gamma->add_option("--low", crit.low_threshold_percent,
                        "Low-intensity cutoff, % of the reference max")
        ->capture_default_str();
    m_gamma->add_flag("--both", gamma_both, "Evaluate both reference choices and their mean");
    m_dvh->add_option("--dose", dose_stem, "Dose volume stem")->required();
    m_dvh->add_option("--masks", masks_stem, "Structure mask stem (<stem>.masks.json)")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? 0 : 2;
    }

    using namespace kv2ct;
    if (metric->parsed()) {
        if (m_mae->parsed() || m_cdvh->parsed() || m_gamma->parsed() || m_shift->parsed()) {
            const Volume3D ref = read_volume(ref_stem);
            const Volume3D evl = read_volume(eval_stem);
            std::vector<std::uint8_t> mask;
            const std::vector<std::uint8_t>* mask_ptr = nullptr;
            if (use_body_threshold) {
                mask.resize(std::size_t(ref.voxel_count()));
                for (std::size_t i = 0; i < mask.size(); ++i)
                    mask[i] = ref.data[i] > body_threshold ? 1 : 0;
                mask_ptr = &mask;
            }
            if (m_mae->parsed()) {
                std::printf("%.9g\n", mae(ref, evl, mask_ptr));
            } else if (m_cdvh->parsed()) {
                const CdvhCurve curve = cdvh(ref, evl, mask_ptr);
                if (out_path.empty()) {
                    std::printf("threshold,fraction_above\n");
                    for (std::size_t i = 0; i < curve.threshold.size(); ++i)
                        std::printf("%g,%.9g\n", curve.threshold[i], curve.fraction[i]);
                } else {
                    write_cdvh_csv(curve, out_path);
                    std::printf("%s\n", out_path.c_str());
                }
            } else if (m_gamma->parsed()) {
                if (gamma_both) {
                    const GammaBothWays g = gamma3d_both(ref, evl, crit);
                    std::printf("ref_first %.9g\nref_second %.9g\nmean %.9g\n",
                                g.ref_first.pass_percent, g.ref_second.pass_percent,
                                g.mean_percent);
                } else {
                    std::printf("%.9g\n", gamma3d(ref, evl, crit).pass_percent);
                }
            } else {
                const ShiftErrorResult r = shift_error(evl, ref);
                nlohmann::json j;
                j["delta_mm"] = r.delta_mm;
                j["se_mm"] = r.se_mm;
                j["mae_at_min"] = r.mae_at_min;
                std::printf("%s\n", j.dump().c_str());
            }
        } else if (m_dvh->parsed()) {
            const Volume3D dose = read_volume(dose_stem);
            const StructureMaskSet masks = read_masks(masks_stem);
            nlohmann::json j(dvh_indices(dose, masks, DvhSpec{}));
            std::printf("%s\n", j.dump(2).c_str());
        }
        return 0;
    }

    const RunConfig cfg = make_config(opts);
    std::ostream* log = log_stream(opts);

    if (augment->parsed() && dry_run) {
        const auto count = [](const GrssConfig& g) {
            const std::size_t shifts = g.shift_schedule().size();
            const std::size_t phases =
                g.phase_enumeration ? std::size_t(g.kv_downsample[0]) * g.kv_downsample[1] : 1;
            return shifts * phases;
        };
        std::cout << "primary pairs: " << count(cfg.grss_primary) << "\n";
        std::cout << "secondary pairs: " << count(cfg.grss_secondary) << "\n";
        return 0;
    }
    if (run->parsed() && dry_run) {
        std::cout << "config hash: " << cfg.config_hash() << "\n";
        std::cout << "workspace: " << cfg.workspace << "\n";
        std::cout << "stages: phantom project augment train synthesize compose evaluate report\n";
        return 0;
    }

    if (phantom->parsed()) {
        stage_phantom(cfg, opts.force, log);
    } else if (project->parsed()) {
        stage_project(cfg, opts.force, log);
    } else if (augment->parsed()) {
        stage_augment(cfg, opts.force, log);
    } else if (train->parsed()) {
        stage_train(cfg, train_model, opts.force, log);
    } else if (synth->parsed()) {
        stage_synthesize(cfg, opts.force, log);
    } else if (compose->parsed()) {
        stage_compose(cfg, opts.force, log);
    } else if (evaluate->parsed()) {
        const MetricReport rep = stage_evaluate(cfg, opts.force, log);
        std::cout << metric_report_json(rep);
    } else if (report->parsed()) {
        print_summary(stage_report(cfg, log));
    } else if (run->parsed()) {
        print_summary(run_pipeline(cfg, opts.force, log));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const kv2ct::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const kv2ct::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const kv2ct::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const kv2ct::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
