// SPDX-License-Identifier: Apache-2.0

#include "tva/config.hpp"

#include "json.hpp"

#include <cstdio>
#include <set>

#include "tva/tensor_file.hpp"

namespace tva {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

namespace {

// Tracks the dotted path of the value being read for error messages.
class Reader {
public:
    Reader(const json& value, std::string path) : value_(value), path_(std::move(path)) {}

    void allow(std::initializer_list<std::string_view> keys) const {
        require_object();
        const std::set<std::string_view> known(keys);
        for (const auto& [k, _] : value_.items()) {
            if (!known.contains(k)) throw ConfigError("unknown config key '" + join(k) + "'");
        }
    }

    bool has(const std::string& key) const { return value_.contains(key); }
    Reader at(const std::string& key) const { return Reader(value_.at(key), join(key)); }
    Reader index(std::size_t i) const { return Reader(value_.at(i), path_ + "[" + std::to_string(i) + "]"); }
    const json& raw() const { return value_; }
    const std::string& path() const { return path_; }

    template <typename T>
    void read(const std::string& key, T& out) const {
        if (!has(key)) return;
        at(key).get(out);
    }

    void get(double& out) const {
        if (!value_.is_number()) fail("a number");
        out = value_.get<double>();
    }
    void get(bool& out) const {
        if (!value_.is_boolean()) fail("a boolean");
        out = value_.get<bool>();
    }
    void get(std::string& out) const {
        if (!value_.is_string()) fail("a string");
        out = value_.get<std::string>();
    }
    void get(std::uint64_t& out) const {
        if (!value_.is_number_unsigned() && !(value_.is_number_integer() && value_.get<std::int64_t>() >= 0)) {
            fail("a non-negative integer");
        }
        out = value_.get<std::uint64_t>();
    }
    template <typename T>
    void get(std::vector<T>& out) const {
        if (!value_.is_array()) fail("an array");
        out.clear();
        for (std::size_t i = 0; i < value_.size(); ++i) {
            T item{};
            index(i).get(item);
            out.push_back(std::move(item));
        }
    }

    [[noreturn]] void fail(const std::string& expected) const {
        throw ConfigError("config key '" + path_ + "' must be " + expected);
    }
    void require_object() const {
        if (!value_.is_object()) fail("an object");
    }

private:
    std::string join(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

    const json& value_;
    std::string path_;
};

std::string activation_name(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

void read_frame(const Reader& r, FrameShape& f) {
    r.read("channels", f.channels);
    r.read("height", f.height);
    r.read("width", f.width);
}

void read_data(const Reader& r, DataSpec& d) {
    r.allow({"videos", "frames", "channels", "height", "width", "classes", "blob", "noise", "seed"});
    r.read("videos", d.videos);
    r.read("frames", d.frames);
    read_frame(r, d.frame);
    r.read("classes", d.classes);
    r.read("blob", d.blob);
    r.read("noise", d.noise);
    r.read("seed", d.seed);
}

void read_encoder(const Reader& r, EncoderSpec& e) {
    r.allow({"blocks", "patch_height", "patch_width", "hidden", "embed_dim", "activation", "zero_bias", "seed"});
    r.read("blocks", e.blocks);
    r.read("patch_height", e.patch_height);
    r.read("patch_width", e.patch_width);
    r.read("hidden", e.hidden);
    r.read("embed_dim", e.embed_dim);
    if (r.has("activation")) {
        std::string a;
        r.read("activation", a);
        if (a == "tanh") e.activation = Activation::tanh;
        else if (a == "identity") e.activation = Activation::identity;
        else r.at("activation").fail("\"tanh\" or \"identity\"");
    }
    r.read("zero_bias", e.zero_bias);
    r.read("seed", e.seed);
}

VictimSpec read_victim(const Reader& r) {
    r.allow({"name", "form", "delta_scale", "classes", "head_init", "seed"});
    if (!r.has("name")) throw ConfigError("config key '" + r.path() + ".name' is required");
    if (!r.has("form")) throw ConfigError("config key '" + r.path() + ".form' is required");
    VictimSpec v;
    r.read("name", v.name);
    std::string form;
    r.read("form", form);
    r.read("seed", v.seed);
    if (form == "A") {
        if (r.has("classes") || r.has("head_init")) {
            throw ConfigError("config key '" + r.path() + "': classes/head_init apply to form B only");
        }
        FormA a;
        r.read("delta_scale", a.delta_scale);
        v.form = a;
    } else if (form == "B") {
        FormB b;
        r.read("delta_scale", b.delta_scale);
        r.read("classes", b.classes);
        if (r.has("head_init")) {
            std::string init;
            r.read("head_init", init);
            if (init == "random") b.init = HeadInit::random;
            else if (init == "identity") b.init = HeadInit::identity;
            else r.at("head_init").fail("\"random\" or \"identity\"");
        }
        v.form = b;
    } else {
        r.at("form").fail("\"A\" or \"B\"");
    }
    return v;
}

void read_attack(const Reader& r, AttackConfig& a) {
    r.allow({"name", "base", "transforms", "epsilon", "alpha", "iterations", "momentum", "di_probability",
             "di_min_scale", "ti_kernel", "si_copies", "temperature", "weights", "normalize_embeddings", "seed"});
    r.read("name", a.name);
    if (r.has("base")) {
        std::string base;
        r.read("base", base);
        if (base == "i-fgsm") a.base = BaseOptimizer::i_fgsm;
        else if (base == "mi-fgsm") a.base = BaseOptimizer::mi_fgsm;
        else r.at("base").fail("\"i-fgsm\" or \"mi-fgsm\"");
    }
    if (r.has("transforms")) {
        std::vector<std::string> ts;
        r.read("transforms", ts);
        a.di = a.ti = a.si = false;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (ts[i] == "di") a.di = true;
            else if (ts[i] == "ti") a.ti = true;
            else if (ts[i] == "si") a.si = true;
            else r.at("transforms").index(i).fail("one of \"di\", \"ti\", \"si\"");
        }
    }
    r.read("epsilon", a.epsilon);
    r.read("alpha", a.alpha);
    r.read("iterations", a.iterations);
    r.read("momentum", a.momentum);
    r.read("di_probability", a.di_probability);
    r.read("di_min_scale", a.di_min_scale);
    r.read("ti_kernel", a.ti_kernel);
    r.read("si_copies", a.si_copies);
    if (r.has("temperature")) {
        const Reader t = r.at("temperature");
        t.allow({"mode", "start", "end"});
        std::string mode = a.schedule.mode == TemperatureSchedule::Mode::constant ? "constant" : "exponential";
        t.read("mode", mode);
        if (mode == "constant") a.schedule.mode = TemperatureSchedule::Mode::constant;
        else if (mode == "exponential") a.schedule.mode = TemperatureSchedule::Mode::exponential;
        else t.at("mode").fail("\"constant\" or \"exponential\"");
        t.read("start", a.schedule.start);
        a.schedule.end = a.schedule.start;
        t.read("end", a.schedule.end);
        if (a.schedule.mode == TemperatureSchedule::Mode::constant) a.schedule.end = a.schedule.start;
    }
    if (r.has("weights")) {
        const Reader w = r.at("weights");
        w.allow({"l1", "bicon", "tc"});
        w.read("l1", a.weights.l1);
        w.read("bicon", a.weights.bicon);
        w.read("tc", a.weights.tc);
    }
    r.read("normalize_embeddings", a.normalize_embeddings);
    r.read("seed", a.seed);
}

void read_verify(const Reader& r, VerifySettings& v) {
    r.allow({"linear_tolerance", "tanh_tolerance", "theorem2_tolerance", "bicon_tolerance", "weight_sum_tolerance",
             "min_asymmetry", "theorem1_trials", "theorem2_trials", "seed"});
    r.read("linear_tolerance", v.linear_tolerance);
    r.read("tanh_tolerance", v.tanh_tolerance);
    r.read("theorem2_tolerance", v.theorem2_tolerance);
    r.read("bicon_tolerance", v.bicon_tolerance);
    r.read("weight_sum_tolerance", v.weight_sum_tolerance);
    r.read("min_asymmetry", v.min_asymmetry);
    r.read("theorem1_trials", v.theorem1_trials);
    r.read("theorem2_trials", v.theorem2_trials);
    r.read("seed", v.seed);
}

ordered attack_json(const AttackConfig& a) {
    ordered t = ordered::array();
    if (a.di) t.push_back("di");
    if (a.ti) t.push_back("ti");
    if (a.si) t.push_back("si");
    return ordered{
        {"name", a.name},
        {"base", a.base == BaseOptimizer::i_fgsm ? "i-fgsm" : "mi-fgsm"},
        {"transforms", t},
        {"epsilon", a.epsilon},
        {"alpha", a.alpha},
        {"iterations", a.iterations},
        {"momentum", a.momentum},
        {"di_probability", a.di_probability},
        {"di_min_scale", a.di_min_scale},
        {"ti_kernel", a.ti_kernel},
        {"si_copies", a.si_copies},
        {"temperature",
         {{"mode", a.schedule.mode == TemperatureSchedule::Mode::constant ? "constant" : "exponential"},
          {"start", a.schedule.start},
          {"end", a.schedule.end}}},
        {"weights", {{"l1", a.weights.l1}, {"bicon", a.weights.bicon}, {"tc", a.weights.tc}}},
        {"normalize_embeddings", a.normalize_embeddings},
        {"seed", a.seed},
    };
}

ordered victim_json(const VictimSpec& v) {
    ordered j{{"name", v.name}};
    if (const auto* a = std::get_if<FormA>(&v.form)) {
        j["form"] = "A";
        j["delta_scale"] = a->delta_scale;
    } else {
        const auto& b = std::get<FormB>(v.form);
        j["form"] = "B";
        j["delta_scale"] = b.delta_scale;
        j["classes"] = b.classes;
        j["head_init"] = b.init == HeadInit::random ? "random" : "identity";
    }
    j["seed"] = v.seed;
    return j;
}

}  // namespace

RunConfig parse_config(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    const Reader r(doc, "");
    r.allow({"data", "train_videos", "surrogate", "include_surrogate", "victims", "attacks", "ablation",
             "ablation_base", "sweep", "seeds", "head_ridge", "thresholds", "verify"});
    RunConfig cfg;
    auto& p = cfg.plan;
    if (r.has("data")) read_data(r.at("data"), p.data);
    r.read("train_videos", p.train_videos);
    if (r.has("surrogate")) read_encoder(r.at("surrogate"), p.surrogate);
    p.surrogate.frame = p.data.frame;
    r.read("include_surrogate", p.include_surrogate);
    if (r.has("victims")) {
        const Reader vs = r.at("victims");
        if (!vs.raw().is_array()) vs.fail("an array");
        p.victims.clear();
        for (std::size_t i = 0; i < vs.raw().size(); ++i) p.victims.push_back(read_victim(vs.index(i)));
    }
    if (r.has("attacks")) {
        const Reader as = r.at("attacks");
        if (!as.raw().is_array()) as.fail("an array");
        p.attacks.clear();
        for (std::size_t i = 0; i < as.raw().size(); ++i) {
            AttackConfig a;
            read_attack(as.index(i), a);
            p.attacks.push_back(std::move(a));
        }
    }
    r.read("ablation", p.ablation);
    if (r.has("ablation_base")) read_attack(r.at("ablation_base"), p.ablation_base);
    if (r.has("sweep")) {
        const Reader s = r.at("sweep");
        s.allow({"taus", "decayed", "decay_start", "decay_end", "enabled"});
        s.read("taus", p.sweep_taus);
        s.read("decayed", p.sweep_decayed);
        s.read("decay_start", p.sweep_decay.start);
        s.read("decay_end", p.sweep_decay.end);
        s.read("enabled", cfg.sweep);
    }
    r.read("seeds", p.seeds);
    r.read("head_ridge", p.head_ridge);
    if (r.has("thresholds")) {
        const Reader t = r.at("thresholds");
        t.allow({"ablation_min_seeds", "momentum_min_seeds"});
        t.read("ablation_min_seeds", p.ablation_min_seeds);
        t.read("momentum_min_seeds", p.momentum_min_seeds);
    }
    if (r.has("verify")) read_verify(r.at("verify"), cfg.verify);

    try {
        p.validate();
        for (const auto& m : p.ablation) ablation_weights(m);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(read_file(path)); }

std::string dump_attack(const AttackConfig& attack) { return attack_json(attack).dump(); }

std::string dump_config(const RunConfig& cfg) {
    const auto& p = cfg.plan;
    ordered victims = ordered::array();
    for (const auto& v : p.victims) victims.push_back(victim_json(v));
    ordered attacks = ordered::array();
    for (const auto& a : p.attacks) attacks.push_back(attack_json(a));
    const auto& s = p.surrogate;
    const auto& v = cfg.verify;
    ordered doc{
        {"data",
         {{"videos", p.data.videos},
          {"frames", p.data.frames},
          {"channels", p.data.frame.channels},
          {"height", p.data.frame.height},
          {"width", p.data.frame.width},
          {"classes", p.data.classes},
          {"blob", p.data.blob},
          {"noise", p.data.noise},
          {"seed", p.data.seed}}},
        {"train_videos", p.train_videos},
        {"surrogate",
         {{"blocks", s.blocks},
          {"patch_height", s.patch_height},
          {"patch_width", s.patch_width},
          {"hidden", s.hidden},
          {"embed_dim", s.embed_dim},
          {"activation", activation_name(s.activation)},
          {"zero_bias", s.zero_bias},
          {"seed", s.seed}}},
        {"include_surrogate", p.include_surrogate},
        {"victims", victims},
        {"attacks", attacks},
        {"ablation", p.ablation},
        {"ablation_base", attack_json(p.ablation_base)},
        {"sweep",
         {{"enabled", cfg.sweep},
          {"taus", p.sweep_taus},
          {"decayed", p.sweep_decayed},
          {"decay_start", p.sweep_decay.start},
          {"decay_end", p.sweep_decay.end}}},
        {"seeds", p.seeds},
        {"head_ridge", p.head_ridge},
        {"thresholds", {{"ablation_min_seeds", p.ablation_min_seeds}, {"momentum_min_seeds", p.momentum_min_seeds}}},
        {"verify",
         {{"linear_tolerance", v.linear_tolerance},
          {"tanh_tolerance", v.tanh_tolerance},
          {"theorem2_tolerance", v.theorem2_tolerance},
          {"bicon_tolerance", v.bicon_tolerance},
          {"weight_sum_tolerance", v.weight_sum_tolerance},
          {"min_asymmetry", v.min_asymmetry},
          {"theorem1_trials", v.theorem1_trials},
          {"theorem2_trials", v.theorem2_trials},
          {"seed", v.seed}}},
    };
    return doc.dump(2) + "\n";
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string attack_config_hash(const ExperimentPlan& plan) {
    std::string canon;
    for (const auto& a : plan.expanded_attacks()) canon += dump_attack(a) + "\n";
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canon)));
    return buf;
}

}  // namespace tva
