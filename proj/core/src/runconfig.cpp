#include "iomm/runconfig.hpp"

#include <fstream>

#include <json.hpp>

#include "iomm/binio.hpp"
#include "iomm/sha256.hpp"

namespace iomm {

using nlohmann::json;

void RunConfig::validate() const {
    model.validate();
    trainer.validate();
    data.validate();
    sampler.validate();
    recipe.validate();
    if (model.denoiser.resolution != 32 && model.denoiser.resolution != 64)
        throw ConfigError("model.resolution must be 32 or 64");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

RunConfig default_config() {
    RunConfig cfg;
    // Struct defaults are the documented defaults; wire the cross-module dims.
    cfg.model.denoiser.cond_dim = cfg.model.backbone.width;
    cfg.model.adapter.width = cfg.model.backbone.width;
    cfg.sampler.guidance_scale = 2.0f;
    finalize_config(cfg);
    return cfg;
}

namespace {

// Strict-object walker: every key must be consumed exactly once.
struct ObjectReader {
    const json& obj;
    std::string path;
    std::set<std::string> seen;

    ObjectReader(const json& o, std::string p) : obj(o), path(std::move(p)) {
        if (!o.is_object())
            throw ConfigError("config: expected an object at '" + path + "'");
    }

    const json* find(const std::string& key) {
        seen.insert(key);
        const auto it = obj.find(key);
        return it == obj.end() ? nullptr : &*it;
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (const json* v = find(key)) {
            try {
                out = v->get<T>();
            } catch (const json::exception&) {
                throw ConfigError("config: bad value type for '" + path + key + "'");
            }
        }
    }

    ObjectReader section(const std::string& key) {
        seen.insert(key);
        const auto it = obj.find(key);
        if (it == obj.end()) {
            static const json empty = json::object();
            return ObjectReader(empty, path + key + ".");
        }
        return ObjectReader(*it, path + key + ".");
    }

    bool has(const std::string& key) const { return obj.contains(key); }

    void finish() const {
        for (const auto& [key, value] : obj.items()) {
            if (!seen.count(key)) {
                throw ConfigError("config: unknown key '" + key + "' at '" +
                                  (path.empty() ? "(root)" : path) + "'");
            }
        }
    }
};

RunConfig from_json(const json& doc) {
    RunConfig cfg;
    ObjectReader root(doc, "");

    {
        ObjectReader model = root.section("model");
        int64_t resolution = 32, patch_size = 4;
        model.get("resolution", resolution);
        model.get("patch_size", patch_size);
        {
            ObjectReader dn = model.section("denoiser");
            dn.get("blocks", cfg.model.denoiser.blocks);
            dn.get("width", cfg.model.denoiser.width);
            dn.get("heads", cfg.model.denoiser.heads);
            dn.get("time_dim", cfg.model.denoiser.time_dim);
            dn.get("mlp_mult", cfg.model.denoiser.mlp_mult);
            dn.get("omega_max", cfg.model.denoiser.omega_max);
            dn.get("init_seed", cfg.model.denoiser.init_seed);
            dn.finish();
        }
        {
            ObjectReader bb = model.section("backbone");
            bb.get("layers", cfg.model.backbone.layers);
            bb.get("width", cfg.model.backbone.width);
            bb.get("heads", cfg.model.backbone.heads);
            bb.get("ffn_mult", cfg.model.backbone.ffn_mult);
            bb.get("aux_tokens", cfg.model.backbone.aux_tokens);
            bb.get("init_seed", cfg.model.backbone.init_seed);
            bb.finish();
        }
        {
            ObjectReader ad = model.section("adapter");
            ad.get("queries", cfg.model.adapter.queries);
            ad.get("heads", cfg.model.adapter.heads);
            ad.get("ffn_mult", cfg.model.adapter.ffn_mult);
            ad.get("init_seed", cfg.model.adapter.init_seed);
            ad.finish();
        }
        model.get("use_adapter", cfg.model.cond.use_adapter);
        std::string cond_tokens = "all";
        model.get("condition_tokens", cond_tokens);
        if (cond_tokens == "all") {
            cfg.model.cond.query_only = false;
        } else if (cond_tokens == "query_only") {
            cfg.model.cond.query_only = true;
        } else {
            throw ConfigError(
                "config: model.condition_tokens must be 'all' or 'query_only'");
        }
        model.finish();

        cfg.model.denoiser.resolution = resolution;
        cfg.model.denoiser.patch = patch_size;
        cfg.model.backbone.resolution = resolution;
        cfg.model.backbone.patch = patch_size;
        cfg.model.denoiser.cond_dim = cfg.model.backbone.width;
        cfg.model.adapter.width = cfg.model.backbone.width;
    }

    {
        ObjectReader tr = root.section("trainer");
        tr.get("learning_rate", cfg.trainer.learning_rate);
        if (const json* betas = tr.find("adam_betas")) {
            if (!betas->is_array() || betas->size() != 2)
                throw ConfigError("config: trainer.adam_betas must be [beta1, beta2]");
            cfg.trainer.adam_beta1 = (*betas)[0].get<double>();
            cfg.trainer.adam_beta2 = (*betas)[1].get<double>();
        }
        tr.get("adam_eps", cfg.trainer.adam_eps);
        tr.get("weight_decay", cfg.trainer.weight_decay);
        tr.get("max_grad_norm", cfg.trainer.max_grad_norm);
        tr.get("ema_decay", cfg.trainer.ema_decay);
        tr.get("mask_ratio", cfg.trainer.mask_ratio);
        tr.get("mix_ratio", cfg.trainer.mix_ratio);
        tr.get("uncond_prob", cfg.trainer.uncond_prob);
        tr.get("batch_size", cfg.trainer.batch_size);
        tr.get("pretrain_steps", cfg.trainer.pretrain_steps);
        tr.get("finetune_steps", cfg.trainer.finetune_steps);
        tr.get("checkpoint_every", cfg.trainer.checkpoint_every);
        tr.get("seed", cfg.trainer.seed);
        tr.get("threads", cfg.trainer.threads);
        tr.finish();
    }

    {
        ObjectReader da = root.section("data");
        da.get("train_items", cfg.data.train_items);
        da.get("val_items", cfg.data.val_items);
        if (const json* counts = da.find("allowed_counts")) {
            if (!counts->is_array() || counts->empty())
                throw ConfigError("config: data.allowed_counts must be a non-empty array");
            cfg.data.allowed_counts.clear();
            for (const auto& c : *counts) cfg.data.allowed_counts.insert(c.get<int>());
        }
        da.get("seed", cfg.data.seed);
        da.finish();
    }

    {
        ObjectReader sa = root.section("sampler");
        sa.get("steps", cfg.sampler.steps);
        cfg.sampler.guidance_scale = 2.0f;
        sa.get("guidance_scale", cfg.sampler.guidance_scale);
        sa.get("seed", cfg.sampler.seed);
        sa.finish();
    }

    {
        ObjectReader re = root.section("recipe");
        std::string pre = "image-only", fin = "mixed";
        re.get("pretrain", pre);
        re.get("finetune", fin);
        cfg.recipe.pretrain = stage_data_from_string(pre);
        cfg.recipe.finetune = stage_data_from_string(fin);
        re.finish();
    }

    root.get("output_dir", cfg.output_dir);
    root.get("deterministic", cfg.deterministic);
    root.finish();

    cfg.trainer.deterministic = cfg.deterministic;
    cfg.validate();
    finalize_config(cfg);
    return cfg;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("config: invalid JSON: " + std::string(e.what()));
    }
    return from_json(doc);
}

RunConfig parse_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config file not found: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

std::string canonical_config_json(const RunConfig& cfg) {
    // nlohmann::json objects keep keys sorted, so dump() is canonical.
    json doc;
    doc["model"] = {
        {"resolution", cfg.model.denoiser.resolution},
        {"patch_size", cfg.model.denoiser.patch},
        {"denoiser",
         {{"blocks", cfg.model.denoiser.blocks},
          {"width", cfg.model.denoiser.width},
          {"heads", cfg.model.denoiser.heads},
          {"time_dim", cfg.model.denoiser.time_dim},
          {"mlp_mult", cfg.model.denoiser.mlp_mult},
          {"omega_max", cfg.model.denoiser.omega_max},
          {"init_seed", cfg.model.denoiser.init_seed}}},
        {"backbone",
         {{"layers", cfg.model.backbone.layers},
          {"width", cfg.model.backbone.width},
          {"heads", cfg.model.backbone.heads},
          {"ffn_mult", cfg.model.backbone.ffn_mult},
          {"aux_tokens", cfg.model.backbone.aux_tokens},
          {"init_seed", cfg.model.backbone.init_seed}}},
        {"adapter",
         {{"queries", cfg.model.adapter.queries},
          {"heads", cfg.model.adapter.heads},
          {"ffn_mult", cfg.model.adapter.ffn_mult},
          {"init_seed", cfg.model.adapter.init_seed}}},
        {"use_adapter", cfg.model.cond.use_adapter},
        {"condition_tokens", cfg.model.cond.query_only ? "query_only" : "all"}};
    doc["trainer"] = {{"learning_rate", cfg.trainer.learning_rate},
                      {"adam_betas", {cfg.trainer.adam_beta1, cfg.trainer.adam_beta2}},
                      {"adam_eps", cfg.trainer.adam_eps},
                      {"weight_decay", cfg.trainer.weight_decay},
                      {"max_grad_norm", cfg.trainer.max_grad_norm},
                      {"ema_decay", cfg.trainer.ema_decay},
                      {"mask_ratio", cfg.trainer.mask_ratio},
                      {"mix_ratio", cfg.trainer.mix_ratio},
                      {"uncond_prob", cfg.trainer.uncond_prob},
                      {"batch_size", cfg.trainer.batch_size},
                      {"pretrain_steps", cfg.trainer.pretrain_steps},
                      {"finetune_steps", cfg.trainer.finetune_steps},
                      {"checkpoint_every", cfg.trainer.checkpoint_every},
                      {"seed", cfg.trainer.seed},
                      {"threads", cfg.trainer.threads}};
    doc["data"] = {{"train_items", cfg.data.train_items},
                   {"val_items", cfg.data.val_items},
                   {"allowed_counts", cfg.data.allowed_counts},
                   {"seed", cfg.data.seed}};
    doc["sampler"] = {{"steps", cfg.sampler.steps},
                      {"guidance_scale", cfg.sampler.guidance_scale},
                      {"seed", cfg.sampler.seed}};
    doc["recipe"] = {{"pretrain", to_string(cfg.recipe.pretrain)},
                     {"finetune", to_string(cfg.recipe.finetune)}};
    doc["output_dir"] = cfg.output_dir;
    doc["deterministic"] = cfg.deterministic;
    return doc.dump();
}

std::string config_digest(const RunConfig& cfg) {
    return sha256_hex(canonical_config_json(cfg));
}

void finalize_config(RunConfig& cfg) { cfg.digest = config_digest(cfg); }

}  // namespace iomm
