#include "gap/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "gap/parallel.hpp"

namespace gap {

double log_sum_exp(std::span<const double> x) {
    if (x.empty()) throw std::invalid_argument("log_sum_exp: empty input");
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

double latent_loss(const PcaBasis& basis, std::span<const Vec> coeffs, std::span<const Vec> targets) {
    if (coeffs.size() != targets.size()) throw std::invalid_argument("latent_loss: prediction/target count mismatch");
    if (coeffs.empty()) throw std::invalid_argument("latent_loss: no latent positions");
    double total = 0.0;
    for (std::size_t t = 0; t < coeffs.size(); ++t) {
        if (targets[t].size() != basis.dim()) throw std::invalid_argument("latent_loss: target dimension mismatch");
        const Vec v = reconstruct(basis, coeffs[t]);
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double e = v[i] - targets[t][i];
            total += e * e;
        }
    }
    return total / static_cast<double>(coeffs.size());
}

double lm_loss(std::span<const Vec> rows, std::span<const TokenId> targets, const std::vector<bool>& mask) {
    if (rows.size() != targets.size() || mask.size() != rows.size()) {
        throw std::invalid_argument("lm_loss: length mismatch");
    }
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!mask[i]) continue;
        const auto t = static_cast<std::size_t>(targets[i]);
        if (targets[i] < 0 || t >= rows[i].size()) throw std::invalid_argument("lm_loss: target out of range");
        total += log_sum_exp(rows[i]) - rows[i][t];
        ++n;
    }
    if (n == 0) throw std::invalid_argument("lm_loss: all positions masked");
    return total / static_cast<double>(n);
}

namespace {

struct Objective {
    LossBreakdown loss;
    std::vector<Vec> d_h_bar;
};

/// Evaluates the joint objective on a laid-out sequence. When grads is non-null
/// the head gradients are accumulated and d_h_bar is filled for the backbone.
Objective evaluate(const ModelParams& params, const SequenceForward& fwd, const SequenceLayout& layout,
                   const PcaBasis& basis, std::span<const Vec> targets, double lambda, ModelParams* grads) {
    const std::size_t n = fwd.length();
    Objective obj;
    obj.loss.lambda_latent = lambda;
    if (grads) obj.d_h_bar.assign(n, Vec());

    std::size_t n_lm = 0, n_lat = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (layout.next_token[i] >= 0) ++n_lm;
        if (layout.latent_target[i] >= 0) ++n_lat;
    }
    if (n_lm == 0) throw std::invalid_argument("objective: all positions masked");
    if (n_lat > 0 && targets.size() != n_lat) throw std::invalid_argument("objective: target/budget mismatch");

    auto add_to = [](Vec& acc, const Vec& g) {
        if (acc.empty()) {
            acc = g;
        } else {
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
        }
    };

    const double inv_lm = 1.0 / static_cast<double>(n_lm);
    double lm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const TokenId tgt = layout.next_token[i];
        if (tgt < 0) continue;
        const Vec& hb = fwd.h_bar(i);
        Vec logits = lm_logits(params, hb);
        const double lse = log_sum_exp(logits);
        lm += lse - logits[static_cast<std::size_t>(tgt)];
        if (grads) {
            for (auto& z : logits) z = std::exp(z - lse) * inv_lm;
            logits[static_cast<std::size_t>(tgt)] -= inv_lm;
            add_to(obj.d_h_bar[i], lm_head_backward(params, hb, logits, *grads));
        }
    }
    obj.loss.lm_loss = lm * inv_lm;
    obj.loss.lm_positions = n_lm;

    double lat = 0.0;
    if (n_lat > 0) {
        const double inv_lat = 1.0 / static_cast<double>(n_lat);
        for (std::size_t i = 0; i < n; ++i) {
            const auto ti = layout.latent_target[i];
            if (ti < 0) continue;
            const Vec& target = targets[static_cast<std::size_t>(ti)];
            const LatentHeadTape tape = latent_head_forward(params, fwd.h_bar(i));
            const Vec v_hat = reconstruct(basis, tape.c);
            Vec diff(v_hat.size());
            double sq = 0.0;
            for (std::size_t j = 0; j < diff.size(); ++j) {
                diff[j] = v_hat[j] - target[j];
                sq += diff[j] * diff[j];
            }
            lat += sq;
            if (grads) {
                for (auto& x : diff) x *= 2.0 * lambda * inv_lat;
                const Vec d_c = matvec_t(basis.components(), diff);
                add_to(obj.d_h_bar[i], latent_head_backward(params, tape, d_c, *grads));
            }
        }
        lat *= inv_lat;
    }
    obj.loss.latent_loss = lat;
    obj.loss.latent_positions = n_lat;
    obj.loss.total = obj.loss.lm_loss + lambda * obj.loss.latent_loss;
    return obj;
}

std::span<const Vec> example_targets(const TrainingExample& ex) {
    if (!ex.segments.latent) return {};
    return ex.segments.latent->targets;
}

StepResult run_step(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                    const SequenceLayout& layout, std::span<const Vec> targets, double lambda) {
    const SequenceForward fwd(params, config, layout.inputs);
    StepResult r{{}, ModelParams::zeros(config)};
    Objective obj = evaluate(params, fwd, layout, basis, targets, lambda, &r.grads);
    fwd.backward(obj.d_h_bar, r.grads);
    r.loss = obj.loss;
    return r;
}

}  // namespace

StepResult teacher_forced_step(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                               const TrainingExample& example, double lambda_latent) {
    const SequenceLayout layout = layout_training_sequence(example);
    return run_step(params, config, basis, layout, example_targets(example), lambda_latent);
}

LossBreakdown teacher_forced_loss(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                  const TrainingExample& example, double lambda_latent) {
    const SequenceLayout layout = layout_training_sequence(example);
    const SequenceForward fwd(params, config, layout.inputs);
    return evaluate(params, fwd, layout, basis, example_targets(example), lambda_latent, nullptr).loss;
}

SequenceLayout sample_latent_inputs(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                    const TrainingExample& example, double mix, Rng& rng, std::size_t* replaced) {
    if (!(mix >= 0.0 && mix <= 1.0)) throw std::invalid_argument("scheduled sampling: mix must be in [0, 1]");
    SequenceLayout layout = layout_training_sequence(example);
    std::size_t swaps = 0;
    if (mix > 0.0 && !layout.pad_positions.empty()) {
        const SequenceForward first(params, config, layout.inputs);
        for (std::size_t i = 0; i < layout.inputs.size(); ++i) {
            const auto ti = layout.latent_target[i];
            if (ti < 0 || !rng.bernoulli(mix)) continue;
            Vec v_hat = reconstruct(basis, latent_coeffs(params, first.h_bar(i)));
            layout.inputs[layout.pad_positions[static_cast<std::size_t>(ti)]] = InputSlot::of_embedding(std::move(v_hat));
            ++swaps;
        }
    }
    if (replaced) *replaced = swaps;
    return layout;
}

StepResult scheduled_sampling_step(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                                   const TrainingExample& example, double lambda_latent, double mix, Rng& rng,
                                   std::size_t* replaced) {
    const SequenceLayout layout = sample_latent_inputs(params, config, basis, example, mix, rng, replaced);
    return run_step(params, config, basis, layout, example_targets(example), lambda_latent);
}

// ---- optimizer ----------------------------------------------------------------------------

double scheduled_lr(double peak, std::size_t step, std::size_t total_steps, double warmup_ratio) {
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup) return peak * static_cast<double>(step) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(std::span<double> p, std::span<const double> g, std::span<double> m, std::span<double> v,
                  double lr, double weight_decay, std::size_t t, const AdamWConfig& c) {
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        p[i] -= lr * weight_decay * p[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
}

OptimState make_optim_state(const ModelConfig& model, const AdamWConfig& config) {
    return OptimState{config, ModelParams::zeros(model), ModelParams::zeros(model), 0};
}

double optimizer_step(ModelParams& params, OptimState& state, const ModelParams& grads) {
    bool finite = true;
    grads.visit([&](std::string_view, std::span<const double> g, bool) {
        for (double x : g) finite = finite && std::isfinite(x);
    });
    if (!finite) throw NonFiniteGradient("optimizer step refused: non-finite gradient at step " + std::to_string(state.step));

    const auto& c = state.config;
    const double lr = scheduled_lr(c.lr, state.step, c.total_steps, c.warmup_ratio);
    const double latent_lr = scheduled_lr(c.latent_lr, state.step, c.total_steps, c.warmup_ratio);
    state.step += 1;

    std::vector<std::span<const double>> gs, ms, vs;
    grads.visit([&](std::string_view, std::span<const double> g, bool) { gs.push_back(g); });
    std::vector<std::span<double>> mm, vv;
    state.m.visit([&](std::string_view, std::span<double> x, bool) { mm.push_back(x); });
    state.v.visit([&](std::string_view, std::span<double> x, bool) { vv.push_back(x); });
    std::size_t idx = 0;
    params.visit([&](std::string_view name, std::span<double> p, bool latent_head) {
        // Norm gains and biases are not decayed.
        const bool vector_param = name.ends_with("norm") || name == "latent.bias";
        const double wd = vector_param ? 0.0 : c.weight_decay;
        adamw_update(p, gs[idx], mm[idx], vv[idx], latent_head ? latent_lr : lr, wd, state.step, c);
        ++idx;
    });
    return lr;
}

// ---- gradient check ------------------------------------------------------------------------------

GradCheckReport grad_check(const ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                           std::span<const TrainingExample> examples, const GradCheckOptions& opt) {
    if (examples.empty()) throw std::invalid_argument("grad_check: no examples");
    GradCheckReport report;
    ModelParams work = params;

    std::vector<std::string> names;
    std::vector<std::span<double>> slots;
    work.visit([&](std::string_view name, std::span<double> v, bool) {
        names.emplace_back(name);
        slots.push_back(v);
    });
    std::vector<double> max_diff(names.size(), 0.0), max_mag(names.size(), 0.0);
    std::vector<std::size_t> checked(names.size(), 0);

    Rng rng(opt.seed);
    for (const auto& ex : examples) {
        StepResult analytic = teacher_forced_step(params, config, basis, ex, opt.lambda_latent);
        if (opt.corrupt) opt.corrupt(analytic.grads);
        std::vector<std::span<const double>> grads;
        analytic.grads.visit([&](std::string_view, std::span<const double> g, bool) { grads.push_back(g); });

        for (std::size_t gi = 0; gi < slots.size(); ++gi) {
            const auto& g = grads[gi];
            std::vector<std::size_t> idx;
            std::size_t arg = 0;
            for (std::size_t j = 1; j < g.size(); ++j)
                if (std::abs(g[j]) > std::abs(g[arg])) arg = j;
            idx.push_back(arg);
            for (std::size_t s = 0; s < opt.entries_per_group && s < g.size(); ++s) idx.push_back(rng.below(g.size()));

            for (std::size_t j : idx) {
                double& p = slots[gi][j];
                const double saved = p;
                p = saved + opt.fd_step;
                const double up = teacher_forced_loss(work, config, basis, ex, opt.lambda_latent).total;
                p = saved - opt.fd_step;
                const double down = teacher_forced_loss(work, config, basis, ex, opt.lambda_latent).total;
                p = saved;
                const double numeric = (up - down) / (2.0 * opt.fd_step);
                max_diff[gi] = std::max(max_diff[gi], std::abs(numeric - g[j]));
                max_mag[gi] = std::max({max_mag[gi], std::abs(numeric), std::abs(g[j])});
                ++checked[gi];
            }
        }
    }
    for (std::size_t gi = 0; gi < names.size(); ++gi) {
        const double err = max_mag[gi] > 0.0 ? max_diff[gi] / max_mag[gi] : max_diff[gi];
        report.groups.push_back({names[gi], err, checked[gi]});
        report.max_rel_error = std::max(report.max_rel_error, err);
    }
    return report;
}

// ---- training loop ------------------------------------------------------------------------------

std::vector<TrainLogRow> train(ModelParams& params, const ModelConfig& config, const PcaBasis& basis,
                               std::span<const TrainingExample> dataset, const TrainConfig& tc) {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    if (tc.batch_size == 0 || tc.epochs == 0) throw std::invalid_argument("train: batch_size and epochs must be >= 1");
    const std::size_t per_epoch = (dataset.size() + tc.batch_size - 1) / tc.batch_size;
    AdamWConfig oc = tc.optim;
    oc.total_steps = per_epoch * tc.epochs;
    OptimState state = make_optim_state(config, oc);
    Rng order_rng(mix_seed(tc.seed, 0x5eed));

    std::vector<TrainLogRow> log;
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * tc.batch_size;
            const std::size_t hi = std::min(order.size(), lo + tc.batch_size);
            const std::size_t step_id = state.step;
            std::vector<StepResult> results(hi - lo);
            parallel_for(hi - lo, tc.workers, [&](std::size_t j) {
                const TrainingExample& ex = dataset[order[lo + j]];
                if (tc.mix > 0.0) {
                    Rng rng(mix_seed(mix_seed(tc.seed, step_id), j));
                    results[j] = scheduled_sampling_step(params, config, basis, ex, tc.lambda_latent, tc.mix, rng);
                } else {
                    results[j] = teacher_forced_step(params, config, basis, ex, tc.lambda_latent);
                }
            });
            ModelParams grads = std::move(results[0].grads);
            TrainLogRow row;
            row.lm_loss = results[0].loss.lm_loss;
            row.latent_loss = results[0].loss.latent_loss;
            row.total = results[0].loss.total;
            for (std::size_t j = 1; j < results.size(); ++j) {
                grads.add(results[j].grads);
                row.lm_loss += results[j].loss.lm_loss;
                row.latent_loss += results[j].loss.latent_loss;
                row.total += results[j].loss.total;
            }
            const double inv = 1.0 / static_cast<double>(results.size());
            grads.scale(inv);
            row.lm_loss *= inv;
            row.latent_loss *= inv;
            row.total *= inv;
            row.step = step_id;
            row.lr = optimizer_step(params, state, grads);
            log.push_back(row);
        }
    }
    return log;
}

void write_train_log(std::ostream& os, std::span<const TrainLogRow> rows) {
    os << "step,lm_loss,latent_loss,total,lr\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lm_loss, r.latent_loss, r.total, r.lr);
        os << buf;
    }
}

}  // namespace gap
