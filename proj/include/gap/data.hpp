#pragma once

// Latent-supervision data: response serialization, difficulty-aware routing,
// quality filtering, leakage auditing, and a synthetic latent-necessary task.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gap/model.hpp"
#include "gap/numerics.hpp"

namespace gap {

namespace vocab {
inline constexpr TokenId kThink = 0;
inline constexpr TokenId kThinkEnd = 1;
inline constexpr TokenId kAnswer = 2;
inline constexpr TokenId kAnswerEnd = 3;
inline constexpr TokenId kParser = 4;
inline constexpr TokenId kParserEnd = 5;
inline constexpr TokenId kLatentStart = 6;
inline constexpr TokenId kLatentPad = 7;
inline constexpr TokenId kLatentEnd = 8;
inline constexpr TokenId kBos = 9;
inline constexpr TokenId kFirstContent = 10;

inline bool is_special(TokenId t) { return t >= 0 && t < kFirstContent; }
/// The latent-span and parser markers that stripped examples must not contain.
inline bool is_latent_marker(TokenId t) {
    return t == kLatentStart || t == kLatentPad || t == kLatentEnd || t == kParser || t == kParserEnd;
}
std::string token_name(TokenId t);
}  // namespace vocab

bool is_perfect_square(std::size_t n);

struct LatentSpan {
    std::size_t budget = 0;     // pad count T, a perfect square
    std::vector<Vec> targets;   // empty or exactly T auxiliary targets

    friend bool operator==(const LatentSpan&, const LatentSpan&) = default;
};

/// think -> latent span -> parser -> continued think -> answer.
struct ResponseSegments {
    std::vector<TokenId> think_prefix;
    std::optional<LatentSpan> latent;
    std::vector<TokenId> parser_text;
    std::vector<TokenId> think_suffix;
    std::vector<TokenId> answer;

    friend bool operator==(const ResponseSegments&, const ResponseSegments&) = default;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::string code, std::size_t position, const std::string& message)
        : std::runtime_error(message + " (at token " + std::to_string(position) + ")"),
          code_(std::move(code)), position_(position) {}
    const std::string& code() const { return code_; }
    std::size_t position() const { return position_; }

private:
    std::string code_;
    std::size_t position_;
};

std::vector<TokenId> serialize_response(const ResponseSegments& segments);
/// Inverse of serialize_response; latent targets are not part of the stream.
ResponseSegments parse_response(std::span<const TokenId> tokens);

struct Accuracy {
    std::uint32_t correct = 0;
    std::uint32_t total = 0;
    double value() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
    friend bool operator==(const Accuracy&, const Accuracy&) = default;
};

enum class SupervisionMode { TextOnly, Latent };
std::string to_string(SupervisionMode m);
SupervisionMode supervision_mode_from_string(const std::string& s);

struct ExampleMetadata {
    std::string source_id;
    std::string question_text;
    std::string image_hash;
    std::string text_hash;
    double base_skill = 0.0;  // success probability of the simulated base model

    friend bool operator==(const ExampleMetadata&, const ExampleMetadata&) = default;
};

struct TrainingExample {
    std::vector<TokenId> query_tokens;
    std::vector<Vec> query_image;  // query vision embeddings
    ResponseSegments segments;
    Accuracy accuracy;
    SupervisionMode mode = SupervisionMode::Latent;
    ExampleMetadata meta;

    friend bool operator==(const TrainingExample&, const TrainingExample&) = default;
};

/// Answer oracle for one attempt; must be deterministic in the attempt index.
using AnswerSampler = std::function<bool(std::uint32_t attempt)>;

class SamplerFailure : public std::runtime_error {
public:
    SamplerFailure(std::uint32_t attempt, const std::string& what)
        : std::runtime_error("sampler failed at attempt " + std::to_string(attempt) + ": " + what),
          attempt_(attempt) {}
    std::uint32_t attempt() const { return attempt_; }

private:
    std::uint32_t attempt_;
};

Accuracy estimate_accuracy(const AnswerSampler& sampler, std::uint32_t n);

/// text-only iff accuracy > tau; the boundary goes to latent.
SupervisionMode assign_supervision(double accuracy, double tau);
SupervisionMode assign_supervision(const Accuracy& accuracy, double tau);

struct StripResult {
    TrainingExample example;
    bool already_stripped = false;
};
/// Drops the latent span, its targets and the parser segment.
StripResult strip_latent(const TrainingExample& example);

struct FilterConfig {
    double tau = 0.0;
    std::size_t min_parser_len = 3;
    std::size_t max_parser_len = 512;
    double min_target_norm = 1e-8;
};

enum class FilterOutcome { Keep, RouteTextOnly, RejectDegenerateEmbedding, RejectParserLength };
std::string to_string(FilterOutcome o);
FilterOutcome quality_filter(const TrainingExample& example, const FilterConfig& config = {});

/// Lowercase, drop ASCII punctuation, collapse whitespace runs, trim.
std::string normalize_question(const std::string& text);
std::string fnv1a_hex(std::span<const unsigned char> bytes);
/// Fills meta.image_hash (query image bytes) and meta.text_hash (normalized question).
void compute_hashes(TrainingExample& example);

struct Collision {
    std::string hash;
    std::size_t train_index = 0;
    std::size_t eval_index = 0;
    std::string train_id;
    std::string eval_id;
};

struct AuditReport {
    std::vector<Collision> image_collisions;
    std::vector<Collision> text_collisions;
    bool empty() const { return image_collisions.empty() && text_collisions.empty(); }
    std::string to_json() const;
};

AuditReport leakage_audit(std::span<const TrainingExample> train, std::span<const TrainingExample> eval);

// ---- synthetic latent-necessary task ------------------------------------------

struct SyntheticTaskConfig {
    std::size_t d_model = 64;
    std::size_t n_classes = 8;
    std::size_t budget = 4;
    std::size_t query_image_tokens = 4;
    std::size_t question_tokens = 2;
    double control_fraction = 0.25;
    std::size_t target_rank = 16;
    double class_scale = 3.0;
    double position_scale = 1.0;
    double within_scale = 0.3;
    double isotropic_noise = 0.02;
    std::uint64_t world_seed = 2024;
};

/// Fixed generative world shared by train and eval splits: class prototypes for
/// the auxiliary targets and an independent code for the query image.
class SyntheticWorld {
public:
    explicit SyntheticWorld(const SyntheticTaskConfig& config);

    const SyntheticTaskConfig& config() const { return config_; }
    std::size_t vocab_size_needed() const;

    Vec target(std::size_t cls, std::size_t slot, Rng& rng) const;
    Vec query_vector(std::size_t cls, std::size_t slot, Rng& rng) const;
    /// Class recovered from auxiliary targets alone; defines the label.
    std::size_t label_from_targets(std::span<const Vec> targets) const;

    TokenId question_token(std::size_t i) const;
    TokenId attribute_token(std::size_t cls) const;
    TokenId answer_token(std::size_t cls) const;
    TokenId hint_token(std::size_t cls) const;
    TokenId look_token() const;
    TokenId so_token() const;
    TokenId region_token() const;
    TokenId shows_token() const;

private:
    Vec position_code(std::size_t slot) const;

    SyntheticTaskConfig config_;
    Mat target_basis_;  // d x r
    Mat query_basis_;   // d x r
    Vec target_center_;
    Vec query_center_;
    std::vector<Vec> query_codes_;  // per class, r-dim
};

/// Examples carry full latent spans; controls also carry a hint token that
/// reveals the answer in text and a high simulated base-model skill.
std::vector<TrainingExample> gen_synthetic_task(Rng& rng, std::size_t count, const SyntheticTaskConfig& config,
                                                double control_fraction);
std::vector<TrainingExample> gen_synthetic_task(Rng& rng, std::size_t count, const SyntheticTaskConfig& config);

struct PipelineConfig {
    double tau = 0.0;
    std::uint32_t n_samples = 8;
    FilterConfig filter;
    std::uint64_t seed = 12345;
};

struct PipelineReport {
    std::size_t input = 0;
    std::size_t latent = 0;
    std::size_t text_only = 0;
    std::size_t rejected_degenerate = 0;
    std::size_t rejected_parser = 0;
};

/// Simulated base model: attempt j on example i succeeds with probability
/// meta.base_skill, drawn from a stream keyed by (seed, i, j).
AnswerSampler simulated_sampler(const TrainingExample& example, std::uint64_t seed, std::size_t index);

/// Estimate accuracy, route by tau, strip text-only examples, and filter.
std::vector<TrainingExample> run_pipeline(std::vector<TrainingExample> examples, const PipelineConfig& config,
                                          PipelineReport* report = nullptr);

// ---- sequence layout ------------------------------------------------------------

/// Prompt slots: <bos>, query image embeddings, query tokens, <think> and the
/// think prefix (when include_think_prefix is set).
std::vector<InputSlot> build_prompt(const TrainingExample& example, bool include_think_prefix);

struct SequenceLayout {
    std::vector<InputSlot> inputs;
    std::vector<TokenId> next_token;              // LM target per position, -1 when masked
    std::vector<std::ptrdiff_t> latent_target;    // target index predicted at this position, -1 otherwise
    std::vector<std::size_t> pad_positions;       // input positions holding latent pads
    std::size_t prompt_length = 0;
};

/// Teacher-forced training sequence: pads carry the auxiliary targets.
SequenceLayout layout_training_sequence(const TrainingExample& example);

// ---- persistence ------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;
void write_dataset(const std::filesystem::path& path, std::span<const TrainingExample> examples);
std::vector<TrainingExample> read_dataset(const std::filesystem::path& path);

void write_vectors(const std::filesystem::path& path, std::span<const Vec> vectors);
std::vector<Vec> read_vectors(const std::filesystem::path& path);

}  // namespace gap
