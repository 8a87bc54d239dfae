#include "iomm/checkpoint.hpp"

#include <filesystem>
#include <map>

#include <json.hpp>

#include "iomm/binio.hpp"

namespace iomm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct NamedTensor {
    std::string name;
    std::string dtype;  // "f32" | "f64"
    const std::vector<int64_t>* shape;
    void* data;
    size_t bytes;
};

std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Canonical tensor order: trainable weights, Adam first/second moments, EMA.
std::vector<NamedTensor> collect(TrainState& st) {
    std::vector<NamedTensor> out;
    size_t idx = 0;
    st.model.for_each_trainable([&](const std::string& name, Param<float>& p) {
        out.push_back({name, "f32", &p.w.shape, p.w.data(), p.w.v.size() * 4});
        ++idx;
    });
    idx = 0;
    st.model.for_each_trainable([&](const std::string& name, Param<float>& p) {
        Tensor<float>& m = st.adam_m[idx];
        Tensor<float>& v = st.adam_v[idx];
        ++idx;
        (void)p;
        out.push_back({"adam.m." + name, "f32", &m.shape, m.data(), m.v.size() * 4});
        out.push_back({"adam.v." + name, "f32", &v.shape, v.data(), v.v.size() * 4});
    });
    idx = 0;
    st.model.for_each_trainable([&](const std::string& name, Param<float>& p) {
        Tensor<double>& e = st.ema[idx];
        ++idx;
        (void)p;
        out.push_back({"ema." + name, "f64", &e.shape, e.data(), e.v.size() * 8});
    });
    return out;
}

}  // namespace

void save_checkpoint(TrainState& state, const std::string& dir) {
    fs::create_directories(dir);
    const auto tensors = collect(state);

    std::string payload;
    json index = json::array();
    for (const auto& t : tensors) {
        json entry;
        entry["name"] = t.name;
        entry["dtype"] = t.dtype;
        entry["shape"] = *t.shape;
        entry["file"] = "weights.bin";
        entry["offset"] = payload.size();
        index.push_back(entry);
        if (t.dtype == "f32") {
            const float* p = static_cast<const float*>(t.data);
            for (size_t i = 0; i < t.bytes / 4; ++i) put_f32le(payload, p[i]);
        } else {
            const double* p = static_cast<const double*>(t.data);
            for (size_t i = 0; i < t.bytes / 8; ++i) put_f64le(payload, p[i]);
        }
    }

    json manifest;
    manifest["format_version"] = kCheckpointFormatVersion;
    manifest["step"] = state.step;
    manifest["config_digest"] = state.config_digest;
    manifest["backbone_digest"] = state.model.backbone.digest();
    manifest["rng"] = {{"train", state.train_rng.save_state()},
                       {"data", state.data_rng.save_state()}};
    manifest["tensors"] = index;
    write_file_bytes((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    write_file_bytes((fs::path(dir) / "weights.bin").string(), payload);
}

int64_t checkpoint_step(const std::string& dir) {
    const json manifest =
        json::parse(read_file_bytes((fs::path(dir) / "manifest.json").string()));
    return manifest.at("step").get<int64_t>();
}

TrainState load_checkpoint(const std::string& dir, const ModelConfig& cfg,
                           const std::string& expected_digest,
                           bool allow_digest_mismatch) {
    json manifest;
    try {
        manifest = json::parse(read_file_bytes((fs::path(dir) / "manifest.json").string()));
    } catch (const json::exception& e) {
        throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
    }
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
        throw FormatError("unsupported checkpoint format_version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
    }

    struct Entry {
        std::string dtype;
        std::vector<int64_t> shape;
        size_t offset;
        bool used = false;
    };
    std::map<std::string, Entry> index;
    for (const auto& e : manifest.at("tensors")) {
        index[e.at("name").get<std::string>()] =
            Entry{e.at("dtype").get<std::string>(),
                  e.at("shape").get<std::vector<int64_t>>(),
                  e.at("offset").get<size_t>()};
    }

    const std::string payload =
        read_file_bytes((fs::path(dir) / "weights.bin").string());

    TrainState st = make_train_state(cfg, 0, expected_digest);
    const auto tensors = collect(st);
    for (const auto& t : tensors) {
        auto it = index.find(t.name);
        if (it == index.end()) {
            throw FormatError("incompatible checkpoint: missing tensor " + t.name);
        }
        Entry& e = it->second;
        if (e.shape != *t.shape) {
            throw FormatError("incompatible checkpoint: tensor " + t.name +
                              " has shape " + shape_str(e.shape) +
                              ", model expects " + shape_str(*t.shape));
        }
        if (e.dtype != t.dtype) {
            throw FormatError("incompatible checkpoint: tensor " + t.name +
                              " has dtype " + e.dtype + ", expected " + t.dtype);
        }
        if (e.offset + t.bytes > payload.size()) {
            throw FormatError("corrupt checkpoint: weights.bin truncated at offset " +
                              std::to_string(payload.size()) + " while reading " +
                              t.name + " (needs " +
                              std::to_string(e.offset + t.bytes) + " bytes)");
        }
        ByteReader r(payload, "weights.bin");
        r.pos = e.offset;
        if (t.dtype == "f32") {
            float* p = static_cast<float*>(t.data);
            for (size_t i = 0; i < t.bytes / 4; ++i) p[i] = r.f32();
        } else {
            double* p = static_cast<double*>(t.data);
            for (size_t i = 0; i < t.bytes / 8; ++i) p[i] = r.f64();
        }
        e.used = true;
    }
    for (const auto& [name, e] : index) {
        if (!e.used) {
            throw FormatError("incompatible checkpoint: unexpected tensor " + name);
        }
    }

    const std::string stored_digest = manifest.at("config_digest").get<std::string>();
    if (!allow_digest_mismatch && stored_digest != expected_digest) {
        throw FormatError("incompatible checkpoint: config digest mismatch (stored " +
                          stored_digest + ", expected " + expected_digest + ")");
    }
    if (manifest.contains("backbone_digest")) {
        const std::string bd = manifest.at("backbone_digest").get<std::string>();
        if (bd != st.model.backbone.digest()) {
            throw FormatError("incompatible checkpoint: frozen backbone digest mismatch");
        }
    }

    st.step = manifest.at("step").get<int64_t>();
    st.train_rng.load_state(manifest.at("rng").at("train").get<std::string>());
    st.data_rng.load_state(manifest.at("rng").at("data").get<std::string>());
    return st;
}

}  // namespace iomm
