#pragma once

// Layer-wise residual-stream norm profiling and the training-free EMA norm
// calibration for fed-back latents.

#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gap/model.hpp"

namespace gap {

enum class TokenClass { Text, Vision };

std::string to_string(TokenClass c);
TokenClass token_class_from_string(const std::string& s);

struct NormCell {
    double mean_log_norm = 0.0;
    double std_log_norm = 0.0;
    std::size_t count = 0;
};

/// Log-L2-norm statistics per (layer boundary, token class). Layer 0 is the
/// input embedding; layer l >= 1 is the residual stream after block l.
struct NormProfile {
    std::size_t n_layers = 0;
    std::map<std::pair<std::size_t, TokenClass>, NormCell> cells;

    const NormCell& at(std::size_t layer, TokenClass cls) const;
    /// CSV columns: layer,class,mean_log_norm,std_log_norm,count
    void write_csv(std::ostream& os) const;
};

struct LabeledSequence {
    std::vector<InputSlot> slots;
    std::vector<TokenClass> classes;  // one per slot
};

NormProfile profile_norms(const ModelParams& params, const ModelConfig& config,
                          std::span<const LabeledSequence> batch);

/// exp(mean_log_a - mean_log_b): ratio of geometric-mean L2 norms.
double norm_ratio(const NormProfile& profile, std::size_t layer_a, TokenClass class_a, std::size_t layer_b,
                  TokenClass class_b);

/// Per-sublayer decomposition of the residual stream.
struct AccumulationReport {
    std::size_t positions = 0;
    double mean_initial_sq = 0.0;             // mean ||x_0||^2
    std::vector<double> mean_update_sq;       // mean ||u_l||^2 per sublayer step
    double mean_final_sq = 0.0;               // mean ||x_L||^2
    double predicted_final_sq = 0.0;          // mean ||x_0||^2 + sum_l mean ||u_l||^2
    double max_step_identity_error = 0.0;     // worst relative error of the exact per-step identity
};

AccumulationReport residual_accumulation(const ModelParams& params, const ModelConfig& config,
                                         std::span<const std::vector<InputSlot>> batch);

struct EmaState {
    double mean_norm = 0.0;
    double decay = 0.9;
    std::size_t count = 0;
};

EmaState ema_init(std::span<const double> query_vision_norms, double decay = 0.9);
EmaState ema_update(const EmaState& state, double observed_norm);
/// mean_norm * v / ||v||
Vec ema_rescale(const EmaState& state, std::span<const double> v_hat);

}  // namespace gap
