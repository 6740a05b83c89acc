#pragma once

// Interleaved text/latent decoding, latent-content interventions, and the
// latent-budget sweep harness.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gap/data.hpp"
#include "gap/model.hpp"
#include "gap/pca.hpp"

namespace gap {

struct InterventionMode {
    enum class Kind { Clean, ZeroLatent, Noise };
    Kind kind = Kind::Clean;
    double noise_scale = 1.0;  // multiplies the spectrum-matched std sqrt(lambda_j)
    bool norm_match = true;

    static InterventionMode clean() { return {}; }
    static InterventionMode zero_latent() { return {Kind::ZeroLatent, 1.0, true}; }
    static InterventionMode noise(double scale = 1.0, bool norm_match = true) { return {Kind::Noise, scale, norm_match}; }

    friend bool operator==(const InterventionMode&, const InterventionMode&) = default;
};

std::string to_string(const InterventionMode& mode);
/// Accepts "clean", "zero_latent", "noise".
InterventionMode intervention_from_string(const std::string& name, double noise_scale = 1.0, bool norm_match = true);

/// clean: reconstruct(c). noise: reconstruct(gaussian coefficients), optionally
/// rescaled about mu so the centered norm equals ||reconstruct(c) - mu||.
Vec apply_intervention(const InterventionMode& mode, std::span<const double> coeffs, const PcaBasis& basis, Rng& rng);

struct DecodeOptions {
    std::size_t budget = 4;
    InterventionMode mode;
    bool ema = false;
    double ema_decay = 0.9;
    std::size_t max_tokens = 64;  // generated positions, latents included
    bool force_span = false;      // emit <|latent_start|> right after the prompt
};

struct TranscriptEvent {
    enum class Kind { PromptToken, PromptEmbedding, Token, Latent };
    Kind kind = Kind::Token;
    std::size_t position = 0;
    TokenId token = -1;
    Vec coeffs;    // latent: predicted coefficients c_t
    Vec injected;  // latent: vector fed back; prompt embedding: the embedding
    double ema_norm = 0.0;  // latent with calibration: n_EMA after the update
};

struct Transcript {
    std::vector<TranscriptEvent> events;
    InterventionMode mode;
    bool ema = false;
    std::size_t budget = 0;
    std::size_t prompt_length = 0;
    std::string stop_reason;  // "answer_end", "max_tokens", "max_seq_len"

    std::vector<TokenId> generated_tokens() const;
    std::size_t latent_count() const;
    /// Tokens between the first generated <answer> and the following </answer>.
    std::optional<std::vector<TokenId>> answer() const;
};

/// Greedy decode from a prompt. Throws invalid_argument on a non-square budget
/// or an over-long prompt, and length_error on context overflow mid-span.
Transcript decode(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                  std::span<const InputSlot> prompt, const DecodeOptions& options, Rng& rng);

void write_transcript_jsonl(std::ostream& os, const Transcript& transcript);

/// Exact match of the extracted answer against the gold answer tokens.
bool score_answer(const Transcript& transcript, std::span<const TokenId> gold);

/// Prompt used for evaluation: bos, query image, query tokens, <think>, think prefix.
std::vector<InputSlot> eval_prompt(const TrainingExample& example);

struct EvalResult {
    Accuracy accuracy;
    std::vector<std::optional<std::vector<TokenId>>> predictions;
};

/// Decodes every example with rng seeded from (seed, index) and scores it.
EvalResult evaluate(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                    std::span<const TrainingExample> examples, const DecodeOptions& options, std::uint64_t seed,
                    std::size_t workers = 1);

// ---- budget sweep -------------------------------------------------------------------

/// Throws invalid_argument("budget must be a perfect square ...") for any
/// positive non-square entry.
void validate_budgets(std::span<const std::size_t> budgets);

struct SweepCell {
    std::size_t budget = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::size_t n_examples = 0;
    std::vector<std::optional<std::vector<TokenId>>> predictions;
};

struct SweepSummary {
    std::size_t budget = 0;
    double mean = 0.0;
    double std = 0.0;  // sample std over seeds, 0 for a single seed
    std::size_t n_seeds = 0;
};

struct SweepTable {
    std::vector<SweepCell> cells;
    std::vector<SweepSummary> summary;
};

/// Budget 0 runs zero_latent; positive budgets use options.mode with force_span
/// as configured.
SweepTable budget_sweep(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                        std::span<const TrainingExample> eval_set, std::span<const std::size_t> budgets,
                        std::span<const std::uint64_t> seeds, const DecodeOptions& options, std::size_t workers = 1);

/// Columns: budget,seed,accuracy,n_examples
void write_sweep_csv(std::ostream& os, const SweepTable& table);
/// Columns: budget,mean,std,n_seeds
void write_sweep_summary_csv(std::ostream& os, const SweepTable& table);

}  // namespace gap
