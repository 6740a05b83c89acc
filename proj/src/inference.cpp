#include "gap/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdio>
#include <stdexcept>

#include <json.hpp>

#include "gap/norm_diagnostics.hpp"
#include "gap/parallel.hpp"

namespace gap {

std::string to_string(const InterventionMode& mode) {
    switch (mode.kind) {
        case InterventionMode::Kind::Clean: return "clean";
        case InterventionMode::Kind::ZeroLatent: return "zero_latent";
        case InterventionMode::Kind::Noise: return "noise";
    }
    return "unknown";
}

InterventionMode intervention_from_string(const std::string& name, double noise_scale, bool norm_match) {
    if (name == "clean") return InterventionMode::clean();
    if (name == "zero_latent") return InterventionMode::zero_latent();
    if (name == "noise") {
        if (!(noise_scale > 0.0) || !std::isfinite(noise_scale)) {
            throw std::invalid_argument("noise_scale must be positive");
        }
        return InterventionMode::noise(noise_scale, norm_match);
    }
    throw std::invalid_argument("unknown intervention mode '" + name + "' (expected clean, zero_latent, noise)");
}

Vec apply_intervention(const InterventionMode& mode, std::span<const double> coeffs, const PcaBasis& basis, Rng& rng) {
    switch (mode.kind) {
        case InterventionMode::Kind::Clean: return reconstruct(basis, coeffs);
        case InterventionMode::Kind::ZeroLatent:
            throw std::logic_error("apply_intervention: zero_latent never produces latents");
        case InterventionMode::Kind::Noise: break;
    }
    const std::size_t k = basis.rank();
    if (coeffs.size() != k) throw std::invalid_argument("apply_intervention: coefficient count does not match rank");
    Vec noise(k);
    for (std::size_t j = 0; j < k; ++j) {
        noise[j] = mode.noise_scale * std::sqrt(std::max(0.0, basis.eigenvalues()[j])) * rng.normal();
    }
    Vec out = reconstruct(basis, noise);
    if (!mode.norm_match) return out;

    const Vec& mu = basis.mean();
    const Vec clean = reconstruct(basis, coeffs);
    double clean_norm = 0.0, noise_norm = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        clean_norm += (clean[i] - mu[i]) * (clean[i] - mu[i]);
        noise_norm += (out[i] - mu[i]) * (out[i] - mu[i]);
    }
    clean_norm = std::sqrt(clean_norm);
    noise_norm = std::sqrt(noise_norm);
    if (clean_norm == 0.0 || noise_norm == 0.0) {
        throw std::domain_error("apply_intervention: zero-norm centered reconstruction under norm matching");
    }
    const double s = clean_norm / noise_norm;
    for (std::size_t i = 0; i < mu.size(); ++i) out[i] = mu[i] + (out[i] - mu[i]) * s;
    return out;
}

// ---- transcript ---------------------------------------------------------------------

std::vector<TokenId> Transcript::generated_tokens() const {
    std::vector<TokenId> out;
    for (const auto& e : events)
        if (e.kind == TranscriptEvent::Kind::Token) out.push_back(e.token);
    return out;
}

std::size_t Transcript::latent_count() const {
    std::size_t n = 0;
    for (const auto& e : events) n += e.kind == TranscriptEvent::Kind::Latent;
    return n;
}

std::optional<std::vector<TokenId>> Transcript::answer() const {
    const auto toks = generated_tokens();
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i] != vocab::kAnswer) continue;
        for (std::size_t j = i + 1; j < toks.size(); ++j) {
            if (toks[j] == vocab::kAnswerEnd) return std::vector<TokenId>(toks.begin() + i + 1, toks.begin() + j);
        }
        return std::nullopt;
    }
    return std::nullopt;
}

bool score_answer(const Transcript& transcript, std::span<const TokenId> gold) {
    const auto a = transcript.answer();
    return a && std::equal(a->begin(), a->end(), gold.begin(), gold.end());
}

// ---- decoding -------------------------------------------------------------------------

namespace {

TokenId greedy(const Vec& logits, bool allow_span) {
    TokenId best = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto t = static_cast<TokenId>(i);
        if (t == vocab::kLatentPad || t == vocab::kLatentEnd) continue;
        if (t == vocab::kLatentStart && !allow_span) continue;
        if (logits[i] > best_v) {
            best_v = logits[i];
            best = t;
        }
    }
    if (best < 0) throw std::runtime_error("decode: no admissible token (non-finite logits)");
    return best;
}

}  // namespace

Transcript decode(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                  std::span<const InputSlot> prompt, const DecodeOptions& opt, Rng& rng) {
    const bool latents_on = opt.mode.kind != InterventionMode::Kind::ZeroLatent;
    if (latents_on && (opt.budget == 0 || !is_perfect_square(opt.budget))) {
        throw std::invalid_argument("budget must be a perfect square (got " + std::to_string(opt.budget) + ")");
    }
    if (prompt.empty()) throw std::invalid_argument("decode: empty prompt");
    if (prompt.size() > config.max_seq_len) throw std::invalid_argument("decode: prompt exceeds max_seq_len");
    if (latents_on && basis.dim() != config.d_model) throw std::invalid_argument("decode: basis dimension mismatch");

    Transcript tr;
    tr.mode = opt.mode;
    tr.ema = opt.ema;
    tr.budget = latents_on ? opt.budget : 0;
    tr.prompt_length = prompt.size();

    std::vector<double> vision_norms;
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        TranscriptEvent e;
        e.position = i;
        if (prompt[i].is_token()) {
            e.kind = TranscriptEvent::Kind::PromptToken;
            e.token = prompt[i].token;
        } else {
            e.kind = TranscriptEvent::Kind::PromptEmbedding;
            e.injected = prompt[i].embedding;
            vision_norms.push_back(l2_norm(prompt[i].embedding));
        }
        tr.events.push_back(std::move(e));
    }
    std::optional<EmaState> ema;
    if (opt.ema && latents_on) {
        if (vision_norms.empty()) throw std::invalid_argument("decode: EMA calibration needs vision embeddings in the prompt");
        ema = ema_init(vision_norms, opt.ema_decay);
    }

    KvCache cache(config.n_layers);
    Vec h = forward_prefix(params, config, prompt, cache).h_bar.back();
    std::size_t pos = prompt.size();
    std::size_t generated = 0;

    auto feed = [&](InputSlot slot) {
        const InputSlot one[1] = {std::move(slot)};
        h = forward_prefix(params, config, one, cache).h_bar.back();
        ++pos;
    };
    auto emit_token = [&](TokenId t) {
        TranscriptEvent e;
        e.kind = TranscriptEvent::Kind::Token;
        e.position = pos;
        e.token = t;
        tr.events.push_back(std::move(e));
        ++generated;
    };

    bool first = true;
    while (true) {
        if (generated >= opt.max_tokens) {
            tr.stop_reason = "max_tokens";
            break;
        }
        if (pos >= config.max_seq_len) {
            tr.stop_reason = "max_seq_len";
            break;
        }
        TokenId tok = (first && opt.force_span && latents_on) ? vocab::kLatentStart : greedy(lm_logits(params, h), latents_on);
        first = false;
        emit_token(tok);
        if (tok == vocab::kAnswerEnd) {
            tr.stop_reason = "answer_end";
            break;
        }
        if (tok != vocab::kLatentStart) {
            feed(InputSlot::of_token(tok));
            continue;
        }
        // Latent span: the start marker, T latents, then a forced end marker.
        if (pos + opt.budget + 2 > config.max_seq_len) {
            throw std::length_error("decode: context overflow inside a latent span");
        }
        feed(InputSlot::of_token(tok));
        for (std::size_t t = 0; t < opt.budget; ++t) {
            TranscriptEvent e;
            e.kind = TranscriptEvent::Kind::Latent;
            e.position = pos;
            e.coeffs = latent_coeffs(params, h);
            Vec v = apply_intervention(opt.mode, e.coeffs, basis, rng);
            if (ema) {
                *ema = ema_update(*ema, l2_norm(v));
                v = ema_rescale(*ema, v);
                e.ema_norm = ema->mean_norm;
            }
            e.injected = v;
            tr.events.push_back(std::move(e));
            ++generated;
            feed(InputSlot::of_embedding(std::move(v)));
        }
        emit_token(vocab::kLatentEnd);
        feed(InputSlot::of_token(vocab::kLatentEnd));
    }
    return tr;
}

void write_transcript_jsonl(std::ostream& os, const Transcript& tr) {
    using nlohmann::json;
    for (const auto& e : tr.events) {
        json j;
        j["pos"] = e.position;
        switch (e.kind) {
            case TranscriptEvent::Kind::PromptToken:
                j["kind"] = "prompt_token";
                j["token"] = e.token;
                j["name"] = vocab::token_name(e.token);
                break;
            case TranscriptEvent::Kind::PromptEmbedding:
                j["kind"] = "prompt_embedding";
                j["embedding"] = e.injected;
                break;
            case TranscriptEvent::Kind::Token:
                j["kind"] = "token";
                j["token"] = e.token;
                j["name"] = vocab::token_name(e.token);
                break;
            case TranscriptEvent::Kind::Latent:
                j["kind"] = "latent";
                j["mode"] = to_string(tr.mode);
                j["coeffs"] = e.coeffs;
                j["v_hat"] = e.injected;
                if (tr.ema) j["ema_norm"] = e.ema_norm;
                break;
        }
        os << j.dump() << '\n';
    }
    json s;
    s["kind"] = "summary";
    s["mode"] = to_string(tr.mode);
    s["ema"] = tr.ema;
    s["budget"] = tr.budget;
    s["stop_reason"] = tr.stop_reason;
    s["latent_events"] = tr.latent_count();
    if (auto a = tr.answer()) {
        s["answer"] = *a;
    } else {
        s["answer"] = nullptr;
    }
    os << s.dump() << '\n';
}

std::vector<InputSlot> eval_prompt(const TrainingExample& example) { return build_prompt(example, true); }

EvalResult evaluate(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                    std::span<const TrainingExample> examples, const DecodeOptions& options, std::uint64_t seed,
                    std::size_t workers) {
    EvalResult r;
    r.predictions.resize(examples.size());
    std::vector<char> hit(examples.size(), 0);
    parallel_for(examples.size(), workers, [&](std::size_t i) {
        Rng rng(mix_seed(seed, i));
        const Transcript tr = decode(params, config, basis, eval_prompt(examples[i]), options, rng);
        r.predictions[i] = tr.answer();
        hit[i] = score_answer(tr, examples[i].segments.answer) ? 1 : 0;
    });
    r.accuracy.total = static_cast<std::uint32_t>(examples.size());
    for (char h : hit) r.accuracy.correct += static_cast<std::uint32_t>(h);
    return r;
}

// ---- sweep --------------------------------------------------------------------------

void validate_budgets(std::span<const std::size_t> budgets) {
    if (budgets.empty()) throw std::invalid_argument("budget list is empty");
    for (std::size_t b : budgets) {
        if (b != 0 && !is_perfect_square(b)) {
            throw std::invalid_argument("budget must be a perfect square (got " + std::to_string(b) + ")");
        }
    }
}

SweepTable budget_sweep(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                        std::span<const TrainingExample> eval_set, std::span<const std::size_t> budgets,
                        std::span<const std::uint64_t> seeds, const DecodeOptions& options, std::size_t workers) {
    validate_budgets(budgets);
    if (seeds.empty()) throw std::invalid_argument("sweep: seed list is empty");
    if (eval_set.empty()) throw std::invalid_argument("sweep: empty eval set");

    SweepTable table;
    for (std::size_t b : budgets) {
        DecodeOptions o = options;
        if (b == 0) {
            o.mode = InterventionMode::zero_latent();
            o.budget = 0;
        } else {
            o.budget = b;
        }
        SweepSummary s;
        s.budget = b;
        s.n_seeds = seeds.size();
        std::vector<double> accs;
        for (std::uint64_t seed : seeds) {
            EvalResult r = evaluate(params, config, basis, eval_set, o, seed, workers);
            SweepCell cell{b, seed, r.accuracy.value(), eval_set.size(), std::move(r.predictions)};
            accs.push_back(cell.accuracy);
            table.cells.push_back(std::move(cell));
        }
        for (double a : accs) s.mean += a;
        s.mean /= static_cast<double>(accs.size());
        if (accs.size() > 1) {
            double ss = 0.0;
            for (double a : accs) ss += (a - s.mean) * (a - s.mean);
            s.std = std::sqrt(ss / static_cast<double>(accs.size() - 1));
        }
        table.summary.push_back(s);
    }
    return table;
}

void write_sweep_csv(std::ostream& os, const SweepTable& table) {
    os << "budget,seed,accuracy,n_examples\n";
    char buf[128];
    for (const auto& c : table.cells) {
        std::snprintf(buf, sizeof buf, "%zu,%llu,%.17g,%zu\n", c.budget, static_cast<unsigned long long>(c.seed),
                      c.accuracy, c.n_examples);
        os << buf;
    }
}

void write_sweep_summary_csv(std::ostream& os, const SweepTable& table) {
    os << "budget,mean,std,n_seeds\n";
    char buf[128];
    for (const auto& s : table.summary) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%zu\n", s.budget, s.mean, s.std, s.n_seeds);
        os << buf;
    }
}

}  // namespace gap
