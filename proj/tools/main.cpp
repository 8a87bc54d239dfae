// Command-line surface: gen-data, pretrain, finetune, sample, eval, recipes,
// ablate, report. Global flags: --config, --seed, --out, --deterministic.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "iomm/checkpoint.hpp"
#include "iomm/evalsuite.hpp"
#include "iomm/runconfig.hpp"
#include "iomm/sampling.hpp"
#include "iomm/shapeworld.hpp"

namespace fs = std::filesystem;
using namespace iomm;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::string out_dir;
    bool deterministic = false;
};

RunConfig load_config(const GlobalArgs& g) {
    RunConfig cfg = g.config_path.empty() ? default_config() : parse_config(g.config_path);
    if (g.seed) {
        // All randomness funnels through --seed.
        cfg.trainer.seed = *g.seed;
        cfg.sampler.seed = derive_seed(*g.seed, 1);
        cfg.data.seed = derive_seed(*g.seed, 2);
    }
    if (g.deterministic) {
        cfg.deterministic = true;
        cfg.trainer.deterministic = true;
    }
    if (!g.out_dir.empty()) {
        cfg.output_dir = g.out_dir;
    } else if (const char* env = std::getenv("IOMM_OUT"); env && *env) {
        cfg.output_dir = env;
    }
    finalize_config(cfg);
    return cfg;
}

std::string dataset_dir(const RunConfig& cfg) {
    return (fs::path(cfg.output_dir) / "dataset").string();
}

shapeworld::Dataset load_or_make_dataset(const RunConfig& cfg) {
    const std::string dir = dataset_dir(cfg);
    if (fs::exists(fs::path(dir) / "manifest.json")) {
        return shapeworld::read_dataset(dir);
    }
    std::cerr << "[iomm] dataset not found under " << dir << ", generating\n";
    shapeworld::Dataset ds =
        shapeworld::make_dataset(cfg.data.train_items, cfg.data.val_items,
                                 cfg.model.denoiser.resolution, cfg.data.seed,
                                 cfg.data.allowed_counts);
    shapeworld::write_dataset(ds, dir);
    return ds;
}

void print_progress(const StepMetrics& m, int64_t total) {
    if (m.step % 100 == 0 || m.step == total) {
        std::cerr << "[iomm] " << m.stage << " step " << m.step << "/" << total
                  << " loss=" << m.loss << " grad_norm=" << m.grad_norm << "\n";
    }
}

int cmd_gen_data(const RunConfig& cfg) {
    shapeworld::Dataset ds =
        shapeworld::make_dataset(cfg.data.train_items, cfg.data.val_items,
                                 cfg.model.denoiser.resolution, cfg.data.seed,
                                 cfg.data.allowed_counts);
    shapeworld::write_dataset(ds, dataset_dir(cfg));
    std::cout << "wrote " << ds.items.size() << " items ("
              << ds.split("train").size() << " train, " << ds.split("val").size()
              << " val) to " << dataset_dir(cfg) << "\n";
    return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
    const auto ds = load_or_make_dataset(cfg);
    TrainState state = make_train_state(cfg.model, cfg.trainer.seed, cfg.digest);
    state.train_rng = Rng(derive_seed(cfg.trainer.seed, 0x5354414745ull + 0));
    state.data_rng = Rng(derive_seed(cfg.trainer.seed, 0x4241544348ull + 0));
    const std::string out = (fs::path(cfg.output_dir) / "pretrain").string();
    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
        print_progress(m, cfg.trainer.pretrain_steps);
    };
    auto metrics = run_stage(state, "pretrain", cfg.recipe.pretrain,
                             cfg.trainer.pretrain_steps, cfg.trainer,
                             ds.split("train"), out, hooks);
    std::cout << "pretrain done: " << metrics.size() << " steps, final checkpoint "
              << out << "/checkpoints/final\n";
    return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& from, bool allow_config_change) {
    const auto ds = load_or_make_dataset(cfg);
    const std::string src = from.empty()
        ? (fs::path(cfg.output_dir) / "pretrain" / "checkpoints" / "final").string()
        : from;
    TrainState state = load_checkpoint(src, cfg.model, cfg.digest, allow_config_change);
    state.train_rng = Rng(derive_seed(cfg.trainer.seed, 0x5354414745ull + 1));
    state.data_rng = Rng(derive_seed(cfg.trainer.seed, 0x4241544348ull + 1));
    const std::string out = (fs::path(cfg.output_dir) / "finetune").string();
    TrainHooks hooks;
    hooks.on_step = [&](const StepMetrics& m) {
        print_progress(m, cfg.trainer.finetune_steps);
    };
    auto metrics = run_stage(state, "finetune", cfg.recipe.finetune,
                             cfg.trainer.finetune_steps, cfg.trainer,
                             ds.split("train"), out, hooks);
    std::cout << "finetune done: " << metrics.size() << " steps, final checkpoint "
              << out << "/checkpoints/final\n";
    return 0;
}

std::string default_model_checkpoint(const RunConfig& cfg) {
    const auto fin = fs::path(cfg.output_dir) / "finetune" / "checkpoints" / "final";
    if (fs::exists(fin / "manifest.json")) return fin.string();
    return (fs::path(cfg.output_dir) / "pretrain" / "checkpoints" / "final").string();
}

int cmd_sample(const RunConfig& cfg, const std::string& from, int64_t n) {
    const std::string src = from.empty() ? default_model_checkpoint(cfg) : from;
    TrainState state = load_checkpoint(src, cfg.model, cfg.digest, true);
    Model em = ema_model(state);

    shapeworld::Dataset out_ds;
    out_ds.resolution = cfg.model.denoiser.resolution;
    Rng scene_rng(derive_seed(cfg.sampler.seed, 0x7363656eull));
    for (int64_t i = 0; i < n; ++i) {
        shapeworld::DatasetItem item;
        item.scene = shapeworld::sample_scene(scene_rng, cfg.data.allowed_counts);
        item.caption = shapeworld::encode_caption(item.scene);
        SamplerConfig sc = cfg.sampler;
        sc.seed = derive_seed(cfg.sampler.seed, uint64_t(i));
        SampleRequest req;
        req.caption = &item.caption;
        item.image = sample_image(em, req, sc);
        out_ds.items.push_back(std::move(item));
    }
    out_ds.splits["samples"] = {0, n, cfg.sampler.seed};
    const std::string dir = (fs::path(cfg.output_dir) / "samples").string();
    shapeworld::write_dataset(out_ds, dir);
    std::cout << "wrote " << n << " samples to " << dir << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& from, int prompts_per_category) {
    const std::string src = from.empty() ? default_model_checkpoint(cfg) : from;
    TrainState state = load_checkpoint(src, cfg.model, cfg.digest, true);
    Model em = ema_model(state);
    const auto prompts = eval::build_prompt_set(prompts_per_category, cfg.sampler.seed);
    const auto report = eval::geneval_mini(eval::model_sampler(em, cfg.sampler), prompts,
                                           cfg.sampler.seed, cfg.trainer.threads);
    const std::string dir = (fs::path(cfg.output_dir) / "eval").string();
    fs::create_directories(dir);
    const std::string path = (fs::path(dir) / "score.json").string();
    std::ofstream(path) << report.to_json() << "\n";
    std::cout << report.to_json() << "\n";
    std::cout << "score report written to " << path << "\n";
    return 0;
}

int cmd_recipes(const RunConfig& cfg, int prompts_per_category) {
    const std::string dir = (fs::path(cfg.output_dir) / "recipes").string();
    const auto rows = eval::recipe_matrix(cfg, dir, prompts_per_category,
                                          cfg.sampler.seed);
    for (const auto& row : rows) {
        std::cout << to_string(row.recipe.pretrain) << " -> "
                  << to_string(row.recipe.finetune) << ": overall="
                  << row.score.overall << (row.failed ? " (FAILED: " + row.error + ")" : "")
                  << "\n";
    }
    std::cout << "recipe matrix written to " << dir << "/recipe_matrix.csv\n";
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& axis_str,
               std::vector<std::string> values, int prompts_per_category) {
    const auto axis = eval::ablation_axis_from_string(axis_str);
    if (values.empty()) values = eval::default_ablation_values(axis);
    const std::string dir = (fs::path(cfg.output_dir) / "ablate").string();
    const auto rows =
        eval::ablate(axis, values, cfg, dir, prompts_per_category, cfg.sampler.seed);
    for (const auto& row : rows) {
        std::cout << axis_str << "=" << row.value << ": final_loss=" << row.final_loss
                  << " overall=" << row.overall
                  << (row.failed ? " (FAILED: " + row.error + ")" : "") << "\n";
    }
    return 0;
}

int cmd_report(const RunConfig& cfg, const std::string& metrics_dir) {
    const std::string src = metrics_dir.empty() ? cfg.output_dir : metrics_dir;
    const auto result =
        eval::write_report(src, (fs::path(cfg.output_dir) / "report").string());
    std::cout << "report: " << result.stages << " stages, " << result.points
              << " points, " << result.warnings << " warnings\n"
              << result.markdown_path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"iomm: flow-matching image generation with a frozen conditioning "
                 "backbone, masked self-conditioning, and two-stage data recipes"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalArgs g;
    app.add_option("--config", g.config_path, "JSON config path (strict schema)");
    uint64_t seed_value = 0;
    auto* seed_opt = app.add_option("--seed", seed_value, "master seed (overrides config)");
    app.add_option("--out", g.out_dir, "output directory (default: $IOMM_OUT or config)");
    app.add_flag("--deterministic", g.deterministic,
                 "single-worker, fixed-order batching");

    auto* gen = app.add_subcommand("gen-data", "generate the procedural dataset");
    auto* pre = app.add_subcommand("pretrain", "run the pretrain stage");
    auto* fin = app.add_subcommand("finetune", "run the finetune stage from a checkpoint");
    std::string from;
    bool allow_config_change = false;
    fin->add_option("--from", from, "checkpoint to start from");
    fin->add_flag("--allow-config-change", allow_config_change,
                  "permit config digest mismatch when warm starting");
    auto* sam = app.add_subcommand("sample", "generate images from seeded prompts");
    std::string sample_from;
    int64_t n_samples = 8;
    sam->add_option("--from", sample_from, "checkpoint to sample from");
    sam->add_option("-n,--num", n_samples, "number of images");
    auto* eva = app.add_subcommand("eval", "run GenEval-mini on a checkpoint");
    std::string eval_from;
    int ppc = 10;
    eva->add_option("--from", eval_from, "checkpoint to evaluate");
    eva->add_option("--prompts", ppc, "prompts per category");
    auto* rec = app.add_subcommand("recipes", "train + score all six data recipes");
    int rec_ppc = 10;
    rec->add_option("--prompts", rec_ppc, "prompts per category");
    auto* abl = app.add_subcommand("ablate", "sweep one axis with shortened budgets");
    std::string axis;
    std::vector<std::string> values;
    int abl_ppc = 10;
    abl->add_option("--axis", axis, "mask_ratio|mix_ratio|adapter")->required();
    abl->add_option("--values", values, "values to sweep (default: built-in grid)");
    abl->add_option("--prompts", abl_ppc, "prompts per category");
    auto* rep = app.add_subcommand("report", "summarize metrics JSONL into md + SVG");
    std::string metrics_dir;
    rep->add_option("--metrics", metrics_dir, "directory to scan (default: --out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*seed_opt) g.seed = seed_value;
        const RunConfig cfg = load_config(g);
        if (gen->parsed()) return cmd_gen_data(cfg);
        if (pre->parsed()) return cmd_pretrain(cfg);
        if (fin->parsed()) return cmd_finetune(cfg, from, allow_config_change);
        if (sam->parsed()) return cmd_sample(cfg, sample_from, n_samples);
        if (eva->parsed()) return cmd_eval(cfg, eval_from, ppc);
        if (rec->parsed()) return cmd_recipes(cfg, rec_ppc);
        if (abl->parsed()) return cmd_ablate(cfg, axis, values, abl_ppc);
        if (rep->parsed()) return cmd_report(cfg, metrics_dir);
        std::cerr << app.help() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
