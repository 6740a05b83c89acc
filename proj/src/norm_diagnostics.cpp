#include "gap/norm_diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace gap {

std::string to_string(TokenClass c) { return c == TokenClass::Text ? "text" : "vision"; }

TokenClass token_class_from_string(const std::string& s) {
    if (s == "text") return TokenClass::Text;
    if (s == "vision") return TokenClass::Vision;
    throw std::invalid_argument("unknown token class: " + s);
}

const NormCell& NormProfile::at(std::size_t layer, TokenClass cls) const {
    auto it = cells.find({layer, cls});
    if (it == cells.end() || it->second.count == 0) {
        throw std::out_of_range("norm profile: no samples for layer " + std::to_string(layer) + " class " +
                                to_string(cls));
    }
    return it->second;
}

void NormProfile::write_csv(std::ostream& os) const {
    os << "layer,class,mean_log_norm,std_log_norm,count\n";
    char buf[128];
    for (const auto& [key, cell] : cells) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", cell.mean_log_norm, cell.std_log_norm);
        os << key.first << ',' << to_string(key.second) << ',' << buf << ',' << cell.count << '\n';
    }
}

NormProfile profile_norms(const ModelParams& params, const ModelConfig& config,
                          std::span<const LabeledSequence> batch) {
    if (batch.empty()) throw std::invalid_argument("profile_norms: empty batch");
    struct Acc {
        double sum = 0.0, sum_sq = 0.0;
        std::size_t n = 0;
    };
    std::map<std::pair<std::size_t, TokenClass>, Acc> acc;
    for (const auto& seq : batch) {
        if (seq.classes.size() != seq.slots.size()) {
            throw std::invalid_argument("profile_norms: every position needs a class label");
        }
        KvCache cache(config.n_layers);
        ResidualTrace trace;
        forward_prefix(params, config, seq.slots, cache, &trace);
        for (std::size_t i = 0; i < seq.slots.size(); ++i) {
            const auto& states = trace.states[i];
            // Block boundaries are states 0, 2, 4, ... (after each MLP).
            for (std::size_t layer = 0; layer <= config.n_layers; ++layer) {
                const double ln = log_l2(states[2 * layer]);
                auto& a = acc[{layer, seq.classes[i]}];
                a.sum += ln;
                a.sum_sq += ln * ln;
                a.n += 1;
            }
        }
    }
    NormProfile out;
    out.n_layers = config.n_layers;
    for (const auto& [key, a] : acc) {
        const double n = static_cast<double>(a.n);
        const double mean = a.sum / n;
        const double var = std::max(0.0, a.sum_sq / n - mean * mean);
        out.cells[key] = NormCell{mean, std::sqrt(var), a.n};
    }
    return out;
}

double norm_ratio(const NormProfile& profile, std::size_t layer_a, TokenClass class_a, std::size_t layer_b,
                  TokenClass class_b) {
    const auto& a = profile.at(layer_a, class_a);
    const auto& b = profile.at(layer_b, class_b);
    return std::exp(a.mean_log_norm - b.mean_log_norm);
}

AccumulationReport residual_accumulation(const ModelParams& params, const ModelConfig& config,
                                         std::span<const std::vector<InputSlot>> batch) {
    AccumulationReport r;
    const std::size_t steps = 2 * config.n_layers;
    r.mean_update_sq.assign(steps, 0.0);
    for (const auto& seq : batch) {
        KvCache cache(config.n_layers);
        ResidualTrace trace;
        forward_prefix(params, config, seq, cache, &trace);
        for (const auto& states : trace.states) {
            r.positions += 1;
            r.mean_initial_sq += dot(states.front(), states.front());
            r.mean_final_sq += dot(states.back(), states.back());
            for (std::size_t s = 0; s < steps; ++s) {
                const Vec& x = states[s];
                const Vec& next = states[s + 1];
                Vec u(x.size());
                for (std::size_t i = 0; i < x.size(); ++i) u[i] = next[i] - x[i];
                const double uu = dot(u, u);
                r.mean_update_sq[s] += uu;
                const double lhs = dot(next, next);
                const double rhs = dot(x, x) + uu + 2.0 * dot(x, u);
                const double err = std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
                r.max_step_identity_error = std::max(r.max_step_identity_error, err);
            }
        }
    }
    if (r.positions == 0) throw std::invalid_argument("residual_accumulation: empty batch");
    const double n = static_cast<double>(r.positions);
    r.mean_initial_sq /= n;
    r.mean_final_sq /= n;
    r.predicted_final_sq = r.mean_initial_sq;
    for (auto& u : r.mean_update_sq) {
        u /= n;
        r.predicted_final_sq += u;
    }
    return r;
}

EmaState ema_init(std::span<const double> norms, double decay) {
    if (norms.empty()) throw std::invalid_argument("ema_init: no reference norms");
    if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema_init: decay must be in [0, 1]");
    double s = 0.0;
    for (double n : norms) {
        if (!(n > 0.0)) throw std::invalid_argument("ema_init: norms must be positive");
        s += n;
    }
    return EmaState{s / static_cast<double>(norms.size()), decay, norms.size()};
}

EmaState ema_update(const EmaState& state, double observed_norm) {
    if (!(observed_norm > 0.0)) throw std::invalid_argument("ema_update: observed norm must be positive");
    EmaState next = state;
    next.mean_norm = state.decay * state.mean_norm + (1.0 - state.decay) * observed_norm;
    next.count += 1;
    return next;
}

Vec ema_rescale(const EmaState& state, std::span<const double> v_hat) {
    if (!(state.mean_norm > 0.0)) throw std::invalid_argument("ema_rescale: EMA state not initialized");
    double m = 0.0;
    for (double x : v_hat) m = std::max(m, std::abs(x));
    if (!(m > 0.0) || !std::isfinite(m)) throw std::invalid_argument("ema_rescale: zero-norm latent");
    // Dividing by the max magnitude first makes the result independent of any
    // exactly representable rescaling of the input.
    Vec out(v_hat.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_hat[i] / m;
    const double s = state.mean_norm / l2_norm(out);
    for (auto& x : out) x *= s;
    return out;
}

}  // namespace gap
