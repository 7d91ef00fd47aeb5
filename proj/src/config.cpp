#include "robself/config.hpp"

#include <istream>
#include <sstream>

#include "robself/tensor.hpp"

namespace robself::model {

using diff::ContractError;

void validate(const RobSelfConfig& cfg) {
    if (cfg.kernel_m < cfg.kernel_n || cfg.kernel_n < 1)
        throw ContractError("config: kernel sizes must satisfy m >= n >= 1");
    if (cfg.kernel_m % 2 == 0 || cfg.kernel_n % 2 == 0)
        throw ContractError("config: kernel sizes must be odd");
    if (cfg.level_i < 1) throw ContractError("config: level_i must be >= 1");
    if (cfg.eta && *cfg.eta <= 0.0) throw ContractError("config: eta must be > 0 when enabled");
    if (cfg.sr_factor != 2 && cfg.sr_factor != 4 && cfg.sr_factor != 8)
        throw ContractError("config: sr_factor must be one of {2,4,8}");
    if (cfg.channels_C < 1 || cfg.phi < 1 || cfg.psi < 1)
        throw ContractError("config: channel counts must be positive");
    if (cfg.iterations < 0) throw ContractError("config: iterations must be >= 0");
    if (cfg.lr_decay_every < 1) throw ContractError("config: lr_decay_every must be >= 1");
}

RobSelfConfig preset(const std::string& name) {
    RobSelfConfig c;  // defaults carry optimizer schedule, lambda, C, channels
    if (name == "syn-depth-x4") {
        c.level_i = 4;
        c.kernel_m = 7;
        c.kernel_n = 5;
        c.eta = 0.7;
        c.sr_factor = 4;
    } else if (name == "syn-depth-x8") {
        c.level_i = 5;
        c.kernel_m = 13;
        c.kernel_n = 7;
        c.eta = 0.7;
        c.sr_factor = 8;
    } else if (name == "real-depth-x2") {
        c.level_i = 3;
        c.kernel_m = 7;
        c.kernel_n = 5;
        c.eta = 0.7;
        c.sr_factor = 2;
    } else if (name == "real-depth-x4") {
        c.level_i = 4;
        c.kernel_m = 7;
        c.kernel_n = 5;
        c.eta = 0.7;
        c.sr_factor = 4;
    } else if (name == "real-nir-x2") {
        c.level_i = 4;
        c.kernel_m = 3;
        c.kernel_n = 3;
        c.eta = std::nullopt;
        c.separate_heads = true;
        c.sr_factor = 2;
    } else if (name == "real-nir-x4") {
        c.level_i = 5;
        c.kernel_m = 3;
        c.kernel_n = 3;
        c.eta = std::nullopt;
        c.separate_heads = true;
        c.sr_factor = 4;
    } else {
        throw ContractError("unknown preset '" + name + "'");
    }
    validate(c);
    return c;
}

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"syn-depth-x4", "syn-depth-x8", "real-depth-x2",
                                                   "real-depth-x4", "real-nir-x2", "real-nir-x4"};
    return names;
}

std::string variant_name(Variant v) { return v == Variant::Re ? "re" : "de"; }

std::string ablation_name(AblationMode m) {
    switch (m) {
        case AblationMode::none: return "none";
        case AblationMode::no_translator: return "no-translator";
        case AblationMode::no_filter: return "no-filter";
        case AblationMode::no_translator_no_filter: return "no-translator-no-filter";
    }
    return "none";
}

AblationMode parse_ablation(const std::string& name) {
    if (name == "none") return AblationMode::none;
    if (name == "no-translator") return AblationMode::no_translator;
    if (name == "no-filter") return AblationMode::no_filter;
    if (name == "no-translator-no-filter") return AblationMode::no_translator_no_filter;
    throw ContractError("unknown ablation mode '" + name + "'");
}

std::string dump_config(const RobSelfConfig& cfg) {
    std::ostringstream out;
    out << "variant=" << variant_name(cfg.variant) << "\n";
    out << "level_i=" << cfg.level_i << "\n";
    if (cfg.eta)
        out << "eta=" << *cfg.eta << "\n";
    else
        out << "eta=none\n";
    out << "kernel_m=" << cfg.kernel_m << "\n";
    out << "kernel_n=" << cfg.kernel_n << "\n";
    out << "sr_factor=" << cfg.sr_factor << "\n";
    out << "channels=" << cfg.channels_C << "\n";
    out << "phi=" << cfg.phi << "\n";
    out << "psi=" << cfg.psi << "\n";
    out << "separate_heads=" << (cfg.separate_heads ? 1 : 0) << "\n";
    out << "lambda=" << cfg.lambda << "\n";
    out << "iterations=" << cfg.iterations << "\n";
    out << "lr_init=" << cfg.lr_init << "\n";
    out << "lr_decay=" << cfg.lr_decay << "\n";
    out << "lr_decay_every=" << cfg.lr_decay_every << "\n";
    out << "seed=" << cfg.seed << "\n";
    return out.str();
}

void apply_config_entry(RobSelfConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&](const std::string& v) { return std::stoi(v); };
    auto as_real = [&](const std::string& v) { return std::stod(v); };
    if (key == "variant") {
        if (value == "re")
            cfg.variant = Variant::Re;
        else if (value == "de")
            cfg.variant = Variant::De;
        else
            throw ContractError("config: variant must be 're' or 'de'");
    } else if (key == "level_i")
        cfg.level_i = as_int(value);
    else if (key == "eta")
        cfg.eta = (value == "none") ? std::nullopt : std::optional<double>(as_real(value));
    else if (key == "kernel_m")
        cfg.kernel_m = as_int(value);
    else if (key == "kernel_n")
        cfg.kernel_n = as_int(value);
    else if (key == "sr_factor")
        cfg.sr_factor = as_int(value);
    else if (key == "channels")
        cfg.channels_C = as_int(value);
    else if (key == "phi")
        cfg.phi = as_int(value);
    else if (key == "psi")
        cfg.psi = as_int(value);
    else if (key == "separate_heads")
        cfg.separate_heads = as_int(value) != 0;
    else if (key == "lambda")
        cfg.lambda = as_real(value);
    else if (key == "iterations")
        cfg.iterations = as_int(value);
    else if (key == "lr_init")
        cfg.lr_init = as_real(value);
    else if (key == "lr_decay")
        cfg.lr_decay = as_real(value);
    else if (key == "lr_decay_every")
        cfg.lr_decay_every = as_int(value);
    else if (key == "seed")
        cfg.seed = std::stoull(value);
    else
        throw ContractError("config: unknown key '" + key + "'");
}

RobSelfConfig parse_config(std::istream& in, RobSelfConfig base) {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config: line " + std::to_string(lineno) + " is not key=value");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            auto a = s.find_first_not_of(" \t");
            auto b = s.find_last_not_of(" \t");
            s = (a == std::string::npos) ? "" : s.substr(a, b - a + 1);
        };
        trim(key);
        trim(value);
        apply_config_entry(base, key, value);
    }
    validate(base);
    return base;
}

}  // namespace robself::model
