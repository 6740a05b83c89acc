#pragma once

// Joint language-modeling + latent-alignment objective, teacher forcing,
// scheduled sampling, AdamW with warmup/cosine schedule, gradient checking.

#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gap/data.hpp"
#include "gap/model.hpp"
#include "gap/pca.hpp"

namespace gap {

struct LossBreakdown {
    double lm_loss = 0.0;
    double latent_loss = 0.0;
    double total = 0.0;
    double lambda_latent = 1.0;
    std::size_t latent_positions = 0;
    std::size_t lm_positions = 0;
};

/// (1/|T|) sum_t || P_k c_t + mu - v_t ||^2
double latent_loss(const PcaBasis& basis, std::span<const Vec> coeff_predictions, std::span<const Vec> targets);

/// Mean next-token NLL over positions where mask is true.
double lm_loss(std::span<const Vec> logit_rows, std::span<const TokenId> target_tokens, const std::vector<bool>& mask);

double log_sum_exp(std::span<const double> x);

struct StepResult {
    LossBreakdown loss;
    ModelParams grads;
};

/// Loss and gradients of L_LM + lambda * L_latent with pads fed their targets.
StepResult teacher_forced_step(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                               const TrainingExample& example, double lambda_latent);

/// Loss only (no tape kept for backward); used by finite differences.
LossBreakdown teacher_forced_loss(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                  const TrainingExample& example, double lambda_latent);

/// Teacher-forced layout whose pad inputs are each replaced, with probability
/// mix, by the model's own PCA-decoded prediction from a first pass.
SequenceLayout sample_latent_inputs(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                    const TrainingExample& example, double mix, Rng& rng,
                                    std::size_t* replaced = nullptr);

/// Two passes: the first predicts every latent; each pad input is replaced by
/// its PCA-decoded prediction with probability mix; the second pass produces the
/// loss and gradients. Replacements are treated as constants.
StepResult scheduled_sampling_step(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                   const TrainingExample& example, double lambda_latent, double mix, Rng& rng,
                                   std::size_t* replaced = nullptr);

// ---- optimizer ------------------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-5;
    double latent_lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double warmup_ratio = 0.03;
    std::size_t total_steps = 1;
};

/// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0.
double scheduled_lr(double peak, std::size_t step, std::size_t total_steps, double warmup_ratio);

/// One decoupled-weight-decay Adam update; t is the 1-based step count.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                  double lr, double weight_decay, std::size_t t, const AdamWConfig& cfg);

struct OptimState {
    AdamWConfig config;
    ModelParams m;
    ModelParams v;
    std::size_t step = 0;
};

OptimState make_optim_state(const ModelConfig& model, const AdamWConfig& config);

class NonFiniteGradient : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Updates params in place and returns the base learning rate used. Refuses
/// (throws NonFiniteGradient, leaving params and state untouched) on NaN/Inf.
double optimizer_step(ModelParams& params, OptimState& state, const ModelParams& grads);

// ---- gradient check ------------------------------------------------------------------------

struct GradCheckOptions {
    double fd_step = 1e-5;
    std::size_t entries_per_group = 8;
    double lambda_latent = 1.0;
    std::uint64_t seed = 12345;
    /// Applied to the analytic gradient before comparison (fault injection).
    std::function<void(ModelParams&)> corrupt;
};

struct GroupError {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

struct GradCheckReport {
    std::vector<GroupError> groups;
    double max_rel_error = 0.0;
};

/// Central differences on sampled entries of every parameter group (always
/// including the largest analytic entry). A group's error is
/// max|analytic - numeric| / max(max|analytic|, max|numeric|).
GradCheckReport grad_check(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                           std::span<const TrainingExample> examples, const GradCheckOptions& options = {});

// ---- training loop ----------------------------------------------------------------------------

struct TrainConfig {
    std::size_t epochs = 2;
    std::size_t batch_size = 8;
    double lambda_latent = 1.0;
    double mix = 0.0;  // scheduled-sampling probability; 0 means pure teacher forcing
    AdamWConfig optim;
    std::uint64_t seed = 12345;
    std::size_t workers = 1;
};

struct TrainLogRow {
    std::size_t step = 0;
    double lm_loss = 0.0;
    double latent_loss = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

std::vector<TrainLogRow> train(ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                               std::span<const TrainingExample> dataset, const TrainConfig& train_config);

/// CSV columns: step,lm_loss,latent_loss,total,lr
void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows);

}  // namespace gap
