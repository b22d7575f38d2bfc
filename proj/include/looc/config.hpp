#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "looc/augment.hpp"
#include "looc/error.hpp"
#include "looc/model.hpp"
#include "looc/probes.hpp"
#include "looc/synthdata.hpp"
#include "looc/train.hpp"
#include "looc/viewgen.hpp"

namespace looc {

inline constexpr int kSchemaVersion = 1;

struct DataCfg {
    FactorSpec spec;
    std::size_t n_per_combo = 2;
    std::array<double, 3> split{0.6, 0.2, 0.2};  // train / val / test
    std::uint64_t split_seed = 0;
};

struct ProbeTask {
    Factor target = Factor::Shape;
    FeatureSource features;
};

/// The single document describing a run.
struct RunConfig {
    DataCfg data;
    AugConfig aug;
    EncoderCfg model;
    TrainCfg train;
    ViewScheme scheme;
    std::vector<ProbeTask> probes;
    LinearProbeCfg probe;
};

namespace config_detail {

inline std::string escape_pointer(const std::string& key) {
    std::string out;
    for (char c : key) {
        if (c == '~') out += "~0";
        else if (c == '/') out += "~1";
        else out += c;
    }
    return out;
}

// Reads an object, tracking which keys were consumed so leftovers can be rejected.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string pointer) : j_(j), ptr_(std::move(pointer)) {
        if (!j_.is_object()) throw ConfigError(ptr_.empty() ? "/" : ptr_, "expected an object");
    }

    std::string at(const std::string& key) const { return ptr_ + "/" + escape_pointer(key); }

    const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        const nlohmann::json* v = find(key);
        if (!v) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v->is_boolean()) throw ConfigError(at(key), "expected a boolean");
            } else if constexpr (std::is_unsigned_v<T>) {
                if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0))
                    throw ConfigError(at(key), "expected a non-negative integer");
            } else if constexpr (std::is_integral_v<T>) {
                if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v->is_number()) throw ConfigError(at(key), "expected a number");
            }
            out = v->get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(at(key), std::string("wrong type: ") + e.what());
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }

private:
    const nlohmann::json& j_;
    std::string ptr_;
    std::set<std::string> seen_;
};

// Attach the pointer of a section to validation errors raised inside it.
template <typename Fn>
void validated(const std::string& pointer, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const ValidationError& e) {
        throw ConfigError(pointer, e.what());
    }
}

}  // namespace config_detail

/// Missing keys take their defaults; unknown keys, wrong types and invalid
/// values raise ConfigError carrying a JSON pointer.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
    using config_detail::ObjectReader;
    using config_detail::validated;
    RunConfig cfg;
    ObjectReader root(doc, "");
    {
        const nlohmann::json* v = root.find("schema_version");
        if (!v) throw ConfigError("/schema_version", "missing");
        if (!v->is_number_integer() || v->get<int>() != kSchemaVersion)
            throw ConfigError("/schema_version", "unsupported schema version (expected " + std::to_string(kSchemaVersion) + ")");
    }
    if (const auto* d = root.find("data")) {
        ObjectReader r(*d, "/data");
        r.get("n_shapes", cfg.data.spec.n_shapes);
        r.get("n_colors", cfg.data.spec.n_colors);
        r.get("n_textures", cfg.data.spec.n_textures);
        r.get("image_size", cfg.data.spec.image_size);
        r.get("seed", cfg.data.spec.seed);
        r.get("n_per_combo", cfg.data.n_per_combo);
        r.get("split", cfg.data.split);
        r.get("split_seed", cfg.data.split_seed);
        r.finish();
        validated("/data", [&] {
            cfg.data.spec.validate();
            if (cfg.data.n_per_combo < 1) throw ValidationError("n_per_combo must be >= 1");
        });
    }
    if (const auto* a = root.find("aug")) {
        ObjectReader r(*a, "/aug");
        r.get("color_prob", cfg.aug.color_prob);
        r.get("color_strength", cfg.aug.color_strength);
        r.get("grayscale_prob", cfg.aug.grayscale_prob);
        r.get("rotation_prob", cfg.aug.rotation_prob);
        r.get("texture_prob", cfg.aug.texture_prob);
        r.get("crop_scale_range", cfg.aug.crop_scale_range);
        r.get("blur_prob", cfg.aug.blur_prob);
        r.get("hflip_prob", cfg.aug.hflip_prob);
        r.get("texture_alpha_range", cfg.aug.texture_alpha_range);
        r.get("texture_patterns", cfg.aug.texture_patterns);
        r.finish();
        validated("/aug", [&] { cfg.aug.validate(); });
    }
    if (const auto* m = root.find("model")) {
        ObjectReader r(*m, "/model");
        r.get("trunk", cfg.model.trunk);
        r.get("v_dim", cfg.model.v_dim);
        r.get("head_hidden", cfg.model.head_hidden);
        r.get("z_dim", cfg.model.z_dim);
        r.get("plusplus", cfg.model.plusplus);
        r.get("adapter_width", cfg.model.adapter_width);
        r.get("input_mean", cfg.model.input_mean);
        r.get("input_std", cfg.model.input_std);
        r.finish();
        validated("/model", [&] { cfg.model.validate(); });
    }
    if (const auto* t = root.find("train")) {
        ObjectReader r(*t, "/train");
        r.get("epochs", cfg.train.epochs);
        r.get("batch", cfg.train.batch);
        r.get("lr", cfg.train.lr);
        r.get("momentum", cfg.train.momentum);
        r.get("lr_drops", cfg.train.lr_drops);
        r.get("seed", cfg.train.seed);
        r.get("checkpoint_every", cfg.train.checkpoint_every);
        r.get("queue_size", cfg.train.queue_size);
        r.get("temperature", cfg.train.temperature);
        r.get("key_momentum", cfg.train.key_momentum);
        std::string enq = "per_head_key";
        r.get("enqueue", enq);
        if (enq == "per_head_key") cfg.train.enqueue = EnqueuePolicy::PerHeadKey;
        else if (enq == "key_zero") cfg.train.enqueue = EnqueuePolicy::KeyZero;
        else throw ConfigError("/train/enqueue", "expected per_head_key|key_zero");
        r.finish();
        validated("/train", [&] { cfg.train.validate(); });
    }
    if (const auto* s = root.find("scheme")) {
        ObjectReader r(*s, "/scheme");
        std::string kind = to_string(cfg.scheme.kind);
        r.get("kind", kind);
        validated("/scheme/kind", [&] { cfg.scheme.kind = scheme_kind_from_string(kind); });
        std::vector<std::string> names;
        r.get("designated", names);
        cfg.scheme.designated.clear();
        for (std::size_t i = 0; i < names.size(); ++i)
            validated("/scheme/designated/" + std::to_string(i),
                      [&] { cfg.scheme.designated.push_back(aug_kind_from_string(names[i])); });
        r.get("addone_plain_query", cfg.scheme.addone_plain_query);
        r.finish();
    }
    validated("/scheme", [&] { cfg.scheme.validate(); });
    cfg.model.n_heads = cfg.scheme.n_heads();
    if (const auto* p = root.find("probes")) {
        if (!p->is_array()) throw ConfigError("/probes", "expected an array");
        for (std::size_t i = 0; i < p->size(); ++i) {
            const std::string ptr = "/probes/" + std::to_string(i);
            ObjectReader r((*p)[i], ptr);
            std::string target = "shape_id", features = "looc_v";
            r.get("target", target);
            r.get("features", features);
            r.finish();
            ProbeTask task;
            validated(ptr + "/target", [&] { task.target = factor_from_string(target); });
            validated(ptr + "/features", [&] { task.features = FeatureSource::parse(features); });
            for (std::size_t h : task.features.heads)
                if (h >= cfg.scheme.n_heads())
                    throw ConfigError(ptr + "/features", "head index " + std::to_string(h) + " out of range for " +
                                                             std::to_string(cfg.scheme.n_heads()) + " heads");
            if (task.features.kind != FeatureSource::Kind::LoocV && !cfg.model.plusplus)
                throw ConfigError(ptr + "/features", "needs model.plusplus = true");
            cfg.probes.push_back(task);
        }
    }
    if (const auto* p = root.find("probe")) {
        ObjectReader r(*p, "/probe");
        r.get("epochs", cfg.probe.epochs);
        r.get("batch", cfg.probe.batch);
        r.get("lrs", cfg.probe.lrs);
        r.get("momentum", cfg.probe.momentum);
        r.get("seed", cfg.probe.seed);
        std::string norm = "center_l2";
        r.get("feature_norm", norm);
        if (norm == "center_l2") cfg.probe.norm = FeatureNorm::CenterL2;
        else if (norm == "standardize") cfg.probe.norm = FeatureNorm::Standardize;
        else throw ConfigError("/probe/feature_norm", "expected center_l2|standardize");
        r.finish();
        if (cfg.probe.epochs < 1 || cfg.probe.batch < 1 || cfg.probe.lrs.empty())
            throw ConfigError("/probe", "epochs and batch must be >= 1 and lrs non-empty");
    }
    root.finish();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("", std::string("malformed JSON: ") + e.what());
    }
    return parse_run_config(doc);
}

/// Fully resolved document; parse_run_config(to_json(c)) reproduces c.
inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json designated = nlohmann::json::array();
    for (AugKind k : c.scheme.designated) designated.push_back(to_string(k));
    nlohmann::json probes = nlohmann::json::array();
    for (const auto& p : c.probes) probes.push_back({{"target", to_string(p.target)}, {"features", p.features.str()}});
    return {
        {"schema_version", kSchemaVersion},
        {"data",
         {{"n_shapes", c.data.spec.n_shapes},
          {"n_colors", c.data.spec.n_colors},
          {"n_textures", c.data.spec.n_textures},
          {"image_size", c.data.spec.image_size},
          {"seed", c.data.spec.seed},
          {"n_per_combo", c.data.n_per_combo},
          {"split", c.data.split},
          {"split_seed", c.data.split_seed}}},
        {"aug",
         {{"color_prob", c.aug.color_prob},
          {"color_strength", c.aug.color_strength},
          {"grayscale_prob", c.aug.grayscale_prob},
          {"rotation_prob", c.aug.rotation_prob},
          {"texture_prob", c.aug.texture_prob},
          {"crop_scale_range", c.aug.crop_scale_range},
          {"blur_prob", c.aug.blur_prob},
          {"hflip_prob", c.aug.hflip_prob},
          {"texture_alpha_range", c.aug.texture_alpha_range},
          {"texture_patterns", c.aug.texture_patterns}}},
        {"model",
         {{"trunk", c.model.trunk},
          {"v_dim", c.model.v_dim},
          {"head_hidden", c.model.head_hidden},
          {"z_dim", c.model.z_dim},
          {"plusplus", c.model.plusplus},
          {"adapter_width", c.model.adapter_width},
          {"input_mean", c.model.input_mean},
          {"input_std", c.model.input_std}}},
        {"train",
         {{"epochs", c.train.epochs},
          {"batch", c.train.batch},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"lr_drops", c.train.lr_drops},
          {"seed", c.train.seed},
          {"checkpoint_every", c.train.checkpoint_every},
          {"queue_size", c.train.queue_size},
          {"temperature", c.train.temperature},
          {"key_momentum", c.train.key_momentum},
          {"enqueue", c.train.enqueue == EnqueuePolicy::PerHeadKey ? "per_head_key" : "key_zero"}}},
        {"scheme",
         {{"kind", to_string(c.scheme.kind)},
          {"designated", designated},
          {"addone_plain_query", c.scheme.addone_plain_query}}},
        {"probes", probes},
        {"probe",
         {{"epochs", c.probe.epochs},
          {"batch", c.probe.batch},
          {"lrs", c.probe.lrs},
          {"momentum", c.probe.momentum},
          {"seed", c.probe.seed},
          {"feature_norm", c.probe.norm == FeatureNorm::CenterL2 ? "center_l2" : "standardize"}}},
    };
}

inline RunSetup make_run_setup(const RunConfig& c) {
    RunSetup s;
    s.train = c.train;
    s.encoder = c.model;
    s.aug = c.aug;
    s.scheme = c.scheme;
    s.config_echo = to_json(c);
    return s;
}

inline DatasetSplits make_splits(const RunConfig& c) {
    return split(generate_dataset(c.data.spec, c.data.n_per_combo), c.data.split, c.data.split_seed);
}

}  // namespace looc
