#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace robself::model {

enum class Variant { Re, De };

// Which model blocks participate. `none` is the full model; the other modes
// mirror the ablation table: without the translator the guide feature is used
// unaligned, without the filter source and guidance features are fused by a
// 1x1 convolution.
enum class AblationMode { none, no_translator, no_filter, no_translator_no_filter };

struct RobSelfConfig {
    Variant variant = Variant::Re;
    int level_i = 4;                   // misalignment estimator depth
    std::optional<double> eta = 0.7;   // threshold scale; nullopt disables thresholding
    int kernel_m = 7;
    int kernel_n = 5;
    int sr_factor = 4;
    int channels_C = 32;
    int phi = 1;                       // source channels
    int psi = 3;                       // guide channels
    bool separate_heads = false;
    double lambda = 1.0;
    int iterations = 1000;
    double lr_init = 0.002;
    double lr_decay = 0.9998;
    int lr_decay_every = 5;
    std::uint64_t seed = 0;
};

// Throws ContractError when field invariants are violated.
void validate(const RobSelfConfig& cfg);

// Named task presets; throws ContractError for unknown names.
RobSelfConfig preset(const std::string& name);
const std::vector<std::string>& preset_names();

// key=value serialization ('#' comments, eta accepts "none").
std::string dump_config(const RobSelfConfig& cfg);
RobSelfConfig parse_config(std::istream& in, RobSelfConfig base = {});
void apply_config_entry(RobSelfConfig& cfg, const std::string& key, const std::string& value);

std::string variant_name(Variant v);
std::string ablation_name(AblationMode m);
AblationMode parse_ablation(const std::string& name);

}  // namespace robself::model
