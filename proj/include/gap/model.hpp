#pragma once

// Toy pre-norm decoder: token embeddings, RoPE causal attention, SwiGLU MLPs,
// a final RMSNorm shared by the language head and the PCA-aligned latent head.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gap/numerics.hpp"
#include "gap/pca.hpp"

namespace gap {

using TokenId = std::int32_t;

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t vocab_size = 64;
    std::size_t latent_k = 16;
    std::size_t adapter_width = 0;  // 0 means latent_k
    std::size_t max_seq_len = 256;
    double rms_eps = 1e-6;
    double rope_base = 10000.0;
    std::uint64_t init_seed = 12345;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t adapter_dim() const { return adapter_width == 0 ? latent_k : adapter_width; }
    /// Throws std::invalid_argument naming the offending field.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
    Vec attn_norm;
    Mat wq, wk, wv, wo;
    Vec mlp_norm;
    Mat w_gate, w_up, w_down;

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// F_theta: z = down * h_bar + bias, c = z + out * (silu(gate * z) * (up * z)).
struct LatentHeadParams {
    Mat down;  // k x d
    Vec bias;  // k
    Mat gate;  // a x k
    Mat up;    // a x k
    Mat out;   // k x a
    bool ready = false;

    friend bool operator==(const LatentHeadParams&, const LatentHeadParams&) = default;
};

struct ModelParams {
    Mat tok_emb;  // vocab x d
    std::vector<LayerParams> layers;
    Vec final_norm;
    Mat lm_head;  // vocab x d
    LatentHeadParams latent;

    /// Zero-valued parameters with the shapes implied by config.
    static ModelParams zeros(const ModelConfig& config);

    /// Visits every parameter array in checkpoint order.
    using Visitor = std::function<void(std::string_view name, std::span<double> values, bool latent_head)>;
    using ConstVisitor =
        std::function<void(std::string_view name, std::span<const double> values, bool latent_head)>;
    void visit(const Visitor& fn);
    void visit(const ConstVisitor& fn) const;

    std::size_t parameter_count() const;
    void fill(double value);
    /// this += other (same shapes).
    void add(const ModelParams& other);
    void scale(double factor);

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Scaled-normal initialization; the latent head is left zeroed and not ready.
ModelParams init_params(const ModelConfig& config);

/// Sets the down-projection to P_k^T and the adapter to a seeded near-identity.
/// With perturbation == 0 the head computes exactly P_k^T h_bar.
void init_latent_head(ModelParams& params, const ModelConfig& config, const PcaBasis& basis, Rng& rng,
                      double perturbation = 1e-2);

/// One input position: a vocabulary token or a raw d-dimensional embedding.
struct InputSlot {
    enum class Kind { Token, Embedding };
    Kind kind = Kind::Token;
    TokenId token = 0;
    Vec embedding;

    static InputSlot of_token(TokenId id) { return {Kind::Token, id, {}}; }
    static InputSlot of_embedding(Vec v) { return {Kind::Embedding, 0, std::move(v)}; }
    bool is_token() const { return kind == Kind::Token; }

    friend bool operator==(const InputSlot&, const InputSlot&) = default;
};

/// Append-only per-layer keys (RoPE applied) and values for consumed positions.
struct KvCache {
    std::vector<std::vector<Vec>> keys;    // [layer][position]
    std::vector<std::vector<Vec>> values;  // [layer][position]
    std::size_t length = 0;

    explicit KvCache(std::size_t n_layers = 0) : keys(n_layers), values(n_layers) {}
    std::size_t size() const { return length; }
};

/// Residual-stream states per position: entry 0 is the input embedding, entry
/// 2l+1 follows attention of block l, entry 2l+2 follows its MLP.
struct ResidualTrace {
    std::vector<std::vector<Vec>> states;
};

struct ForwardOutput {
    std::vector<Vec> h_last;  // pre-final-norm
    std::vector<Vec> h_bar;   // final RMSNorm output
};

ForwardOutput forward_prefix(const ModelParams& params, const ModelConfig& config,
                             std::span<const InputSlot> inputs, KvCache& cache,
                             ResidualTrace* trace = nullptr);

Vec lm_logits(const ModelParams& params, std::span<const double> h_bar);
Vec latent_coeffs(const ModelParams& params, std::span<const double> h_bar);

// ---- Differentiable full-sequence path -------------------------------------

struct SequenceTape;  // activations stored for backward

class SequenceForward {
public:
    SequenceForward(const ModelParams& params, const ModelConfig& config, std::span<const InputSlot> inputs);
    ~SequenceForward();
    SequenceForward(SequenceForward&&) noexcept;
    SequenceForward& operator=(SequenceForward&&) noexcept;

    std::size_t length() const;
    const Vec& h_bar(std::size_t pos) const;
    const Vec& h_last(std::size_t pos) const;

    /// Accumulates parameter gradients given dLoss/d h_bar for every position.
    void backward(std::span<const Vec> d_h_bar, ModelParams& grads) const;

private:
    const ModelParams* params_;
    const ModelConfig* config_;
    std::vector<InputSlot> inputs_;
    std::unique_ptr<SequenceTape> tape_;
};

struct LatentHeadTape {
    Vec h_bar, z, gate, up, act, c;
};
LatentHeadTape latent_head_forward(const ModelParams& params, std::span<const double> h_bar);
/// Returns dLoss/d h_bar and accumulates head gradients.
Vec latent_head_backward(const ModelParams& params, const LatentHeadTape& tape, std::span<const double> d_c,
                         ModelParams& grads);

/// Returns dLoss/d h_bar and accumulates the language-head gradient.
Vec lm_head_backward(const ModelParams& params, std::span<const double> h_bar, std::span<const double> d_logits,
                     ModelParams& grads);

// ---- Checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params);
struct Checkpoint {
    ModelConfig config;
    ModelParams params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gap
