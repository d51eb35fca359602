#include "emd/cli_config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace emd {

nlohmann::json to_flat_json(const PipelineConfig& c) {
    return {{"image_size", c.synth.image_size},
            {"class_count", c.synth.class_count},
            {"n_expression_train", c.synth.n_expression_train},
            {"n_expression_test", c.synth.n_expression_test},
            {"n_manip_train", c.synth.n_manip_train},
            {"n_manip_test", c.synth.n_manip_test},
            {"manip_fraction", c.synth.manip_fraction},
            {"quality", c.synth.quality},
            {"seed", c.synth.seed},
            {"fer_variant", to_string(c.fer.variant)},
            {"branches", c.fer.branches},
            {"trunk_channels", c.fer.trunk_channels},
            {"branch_channels", c.fer.branch_channels},
            {"feature_channels", c.fer.feature_channels},
            {"encoder_channels", c.manip.encoder_channels},
            {"fusion", to_string(c.manip.fusion)},
            {"spp_rates", c.manip.spp_rates},
            {"spp_global_branch", c.manip.spp_global_branch},
            {"decoder_channels", c.manip.decoder_channels},
            {"clamp", c.manip.clamp},
            {"lr", c.train.lr},
            {"lr_manip", c.train.lr_manip},
            {"batch_size", c.train.batch_size},
            {"adam_beta1", c.train.adam_beta1},
            {"adam_beta2", c.train.adam_beta2},
            {"adam_eps", c.train.adam_eps},
            {"epochs_frozen_head", c.train.epochs_frozen_head},
            {"epochs", c.train.epochs},
            {"fer_epochs", c.train.fer_epochs},
            {"val_fraction", c.train.val_fraction}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    PipelineConfig c;
    using Setter = std::function<void(const nlohmann::json&)>;
    auto integer = [](int& dst) -> Setter {
        return [&dst](const nlohmann::json& v) {
            if (!v.is_number_integer()) throw ConfigError("expected an integer");
            dst = v.get<int>();
        };
    };
    auto real = [](double& dst) -> Setter {
        return [&dst](const nlohmann::json& v) {
            if (!v.is_number()) throw ConfigError("expected a number");
            dst = v.get<double>();
        };
    };
    auto int_list = [](std::vector<int>& dst) -> Setter {
        return [&dst](const nlohmann::json& v) {
            if (!v.is_array()) throw ConfigError("expected a list of integers");
            dst.clear();
            for (const auto& e : v) {
                if (!e.is_number_integer()) throw ConfigError("expected a list of integers");
                dst.push_back(e.get<int>());
            }
        };
    };
    const std::map<std::string, Setter> setters{
        {"image_size", integer(c.synth.image_size)},
        {"class_count", integer(c.synth.class_count)},
        {"n_expression_train", integer(c.synth.n_expression_train)},
        {"n_expression_test", integer(c.synth.n_expression_test)},
        {"n_manip_train", integer(c.synth.n_manip_train)},
        {"n_manip_test", integer(c.synth.n_manip_test)},
        {"manip_fraction", real(c.synth.manip_fraction)},
        {"quality", integer(c.synth.quality)},
        {"seed",
         [&c](const nlohmann::json& v) {
             if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
                 throw ConfigError("expected a non-negative integer");
             }
             c.synth.seed = v.get<std::uint64_t>();
         }},
        {"fer_variant",
         [&c](const nlohmann::json& v) {
             if (!v.is_string()) throw ConfigError("expected a string");
             c.fer.variant = parse_fer_variant(v.get<std::string>());
         }},
        {"branches", integer(c.fer.branches)},
        {"trunk_channels", integer(c.fer.trunk_channels)},
        {"branch_channels", integer(c.fer.branch_channels)},
        {"feature_channels", integer(c.fer.feature_channels)},
        {"encoder_channels", int_list(c.manip.encoder_channels)},
        {"fusion",
         [&c](const nlohmann::json& v) {
             if (!v.is_string()) throw ConfigError("expected a string");
             c.manip.fusion = parse_fusion_mode(v.get<std::string>());
         }},
        {"spp_rates", int_list(c.manip.spp_rates)},
        {"spp_global_branch",
         [&c](const nlohmann::json& v) {
             if (!v.is_boolean()) throw ConfigError("expected true or false");
             c.manip.spp_global_branch = v.get<bool>();
         }},
        {"decoder_channels", integer(c.manip.decoder_channels)},
        {"clamp", real(c.manip.clamp)},
        {"lr", real(c.train.lr)},
        {"lr_manip", real(c.train.lr_manip)},
        {"batch_size", integer(c.train.batch_size)},
        {"adam_beta1", real(c.train.adam_beta1)},
        {"adam_beta2", real(c.train.adam_beta2)},
        {"adam_eps", real(c.train.adam_eps)},
        {"epochs_frozen_head", integer(c.train.epochs_frozen_head)},
        {"epochs", integer(c.train.epochs)},
        {"fer_epochs", integer(c.train.fer_epochs)},
        {"val_fraction", real(c.train.val_fraction)},
    };
    for (const auto& [key, value] : j.items()) {
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
        try {
            it->second(value);
        } catch (const ConfigError& e) {
            throw ConfigError("config key '" + key + "': " + e.what());
        }
    }
    c.fer.input_size = c.synth.image_size;
    c.manip.input_size = c.synth.image_size;
    c.fer.class_count = c.synth.class_count;
    c.manip.fer_feature_channels = c.fer.feature_channels;
    c.train.seed = c.synth.seed;
    c.validate();
    return c;
}

nlohmann::json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    try {
        nlohmann::json j = nlohmann::json::parse(in);
        if (!j.is_object()) throw ConfigError("config " + path.string() + " must hold a JSON object");
        return j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    j[key] = value.is_discarded() ? nlohmann::json(text) : value;
}

}  // namespace emd
