#include "gap/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <string>

#include "binary_io.hpp"

namespace gap {

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("model config: " + field + " " + why);
    };
    if (d_model == 0) fail("d_model", "must be positive");
    if (n_heads == 0) fail("n_heads", "must be positive");
    if (d_model % n_heads != 0) fail("n_heads", "must divide d_model");
    if (head_dim() % 2 != 0) fail("n_heads", "must leave an even head dimension for rotary encoding");
    if (d_ff == 0) fail("d_ff", "must be positive");
    if (vocab_size < 10) fail("vocab_size", "must cover the special tokens");
    if (latent_k == 0 || latent_k > d_model) fail("latent_k", "must be in [1, d_model]");
    if (max_seq_len == 0) fail("max_seq_len", "must be positive");
    if (!(rms_eps >= 0.0)) fail("rms_eps", "must be non-negative");
    if (!(rope_base > 0.0)) fail("rope_base", "must be positive");
}

// ---- parameter container --------------------------------------------------

ModelParams ModelParams::zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    const std::size_t d = c.d_model;
    p.tok_emb = Mat(c.vocab_size, d);
    p.layers.resize(c.n_layers);
    for (auto& l : p.layers) {
        l.attn_norm = Vec(d, 0.0);
        l.wq = Mat(d, d);
        l.wk = Mat(d, d);
        l.wv = Mat(d, d);
        l.wo = Mat(d, d);
        l.mlp_norm = Vec(d, 0.0);
        l.w_gate = Mat(c.d_ff, d);
        l.w_up = Mat(c.d_ff, d);
        l.w_down = Mat(d, c.d_ff);
    }
    p.final_norm = Vec(d, 0.0);
    p.lm_head = Mat(c.vocab_size, d);
    const std::size_t k = c.latent_k;
    const std::size_t a = c.adapter_dim();
    p.latent.down = Mat(k, d);
    p.latent.bias = Vec(k, 0.0);
    p.latent.gate = Mat(a, k);
    p.latent.up = Mat(a, k);
    p.latent.out = Mat(k, a);
    return p;
}

namespace {

template <class Params, class Fn>
void visit_impl(Params& p, Fn&& fn) {
    fn("tok_emb", p.tok_emb.data(), false);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string pre = "layers." + std::to_string(i) + ".";
        fn(pre + "attn_norm", l.attn_norm, false);
        fn(pre + "wq", l.wq.data(), false);
        fn(pre + "wk", l.wk.data(), false);
        fn(pre + "wv", l.wv.data(), false);
        fn(pre + "wo", l.wo.data(), false);
        fn(pre + "mlp_norm", l.mlp_norm, false);
        fn(pre + "w_gate", l.w_gate.data(), false);
        fn(pre + "w_up", l.w_up.data(), false);
        fn(pre + "w_down", l.w_down.data(), false);
    }
    fn("final_norm", p.final_norm, false);
    fn("lm_head", p.lm_head.data(), false);
    fn("latent.down", p.latent.down.data(), true);
    fn("latent.bias", p.latent.bias, true);
    fn("latent.gate", p.latent.gate.data(), true);
    fn("latent.up", p.latent.up.data(), true);
    fn("latent.out", p.latent.out.data(), true);
}

}  // namespace

void ModelParams::visit(const Visitor& fn) {
    visit_impl(*this, [&](const std::string& name, std::vector<double>& v, bool lh) {
        fn(name, std::span<double>(v), lh);
    });
}

void ModelParams::visit(const ConstVisitor& fn) const {
    visit_impl(*this, [&](const std::string& name, const std::vector<double>& v, bool lh) {
        fn(name, std::span<const double>(v), lh);
    });
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    visit([&](std::string_view, std::span<const double> v, bool) { n += v.size(); });
    return n;
}

void ModelParams::fill(double value) {
    visit([&](std::string_view, std::span<double> v, bool) {
        for (auto& x : v) x = value;
    });
}

void ModelParams::add(const ModelParams& other) {
    std::vector<std::span<const double>> src;
    other.visit([&](std::string_view, std::span<const double> v, bool) { src.push_back(v); });
    std::size_t i = 0;
    visit([&](std::string_view, std::span<double> v, bool) {
        if (i >= src.size() || src[i].size() != v.size()) throw std::invalid_argument("ModelParams::add: shape mismatch");
        const auto& s = src[i++];
        for (std::size_t j = 0; j < v.size(); ++j) v[j] += s[j];
    });
}

void ModelParams::scale(double factor) {
    visit([&](std::string_view, std::span<double> v, bool) {
        for (auto& x : v) x *= factor;
    });
}

ModelParams init_params(const ModelConfig& c) {
    ModelParams p = ModelParams::zeros(c);
    Rng rng(c.init_seed);
    auto normal_fill = [&](Mat& m, double std) {
        for (auto& x : m.data()) x = std * rng.normal();
    };
    const double sd = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    const double sff = 1.0 / std::sqrt(static_cast<double>(c.d_ff));
    normal_fill(p.tok_emb, sd);
    for (auto& l : p.layers) {
        l.attn_norm.assign(c.d_model, 1.0);
        l.mlp_norm.assign(c.d_model, 1.0);
        normal_fill(l.wq, sd);
        normal_fill(l.wk, sd);
        normal_fill(l.wv, sd);
        normal_fill(l.wo, sd);
        normal_fill(l.w_gate, sd);
        normal_fill(l.w_up, sd);
        normal_fill(l.w_down, sff);
    }
    p.final_norm.assign(c.d_model, 1.0);
    normal_fill(p.lm_head, sd);
    return p;
}

void init_latent_head(ModelParams& params, const ModelConfig& c, const PcaBasis& basis, Rng& rng,
                      double perturbation) {
    if (basis.dim() != c.d_model) throw std::invalid_argument("init_latent_head: basis dimension != d_model");
    if (basis.rank() != c.latent_k) throw std::invalid_argument("init_latent_head: basis rank != latent_k");
    if (perturbation < 0.0) throw std::invalid_argument("init_latent_head: perturbation must be >= 0");
    auto& h = params.latent;
    const std::size_t k = c.latent_k;
    const std::size_t a = c.adapter_dim();
    h.down = basis.components().transposed();
    h.bias.assign(k, 0.0);
    h.gate = Mat(a, k);
    h.up = Mat(a, k);
    h.out = Mat(k, a);
    const double sk = 1.0 / std::sqrt(static_cast<double>(k));
    for (auto& x : h.gate.data()) x = sk * rng.normal();
    for (auto& x : h.up.data()) x = sk * rng.normal();
    const double so = perturbation / std::sqrt(static_cast<double>(a));
    for (auto& x : h.out.data()) x = so * rng.normal();
    h.ready = true;
}

// ---- kernels ------------------------------------------------------------------

namespace {

double silu(double z) { return z / (1.0 + std::exp(-z)); }

double silu_grad(double z) {
    const double s = 1.0 / (1.0 + std::exp(-z));
    return s * (1.0 + z * (1.0 - s));
}

double inv_rms(std::span<const double> x, double eps) {
    const double ms = dot(x, x) / static_cast<double>(x.size());
    const double denom = std::sqrt(ms + eps);
    return denom > 0.0 ? 1.0 / denom : 0.0;
}

void apply_norm(std::span<const double> x, std::span<const double> g, double r, std::span<double> out) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] * (x[i] * r);
}

// dx += d(g * x * r)/dx . dn ; dg += dn * x * r
void norm_backward(std::span<const double> x, std::span<const double> g, double r, std::span<const double> dn,
                   std::span<double> dg, std::span<double> dx) {
    const std::size_t d = x.size();
    double t = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        dg[j] += dn[j] * x[j] * r;
        t += g[j] * dn[j] * x[j];
    }
    const double c = r * r * r * t / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[j] += r * g[j] * dn[j] - c * x[j];
}

void add_outer(Mat& g, std::span<const double> a, std::span<const double> b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ai = a[i];
        if (ai == 0.0) continue;
        auto row = g.row(i);
        for (std::size_t j = 0; j < b.size(); ++j) row[j] += ai * b[j];
    }
}

// y += W^T x
void matvec_t_acc(const Mat& w, std::span<const double> x, std::span<double> y) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        const auto row = w.row(r);
        for (std::size_t c = 0; c < w.cols(); ++c) y[c] += row[c] * xr;
    }
}

/// Rotates each head's (i, i + half) pairs by pos * base^(-2i/hd); sign = -1 inverts.
void rope(std::span<double> v, std::size_t pos, const ModelConfig& c, double sign = 1.0) {
    const std::size_t hd = c.head_dim();
    const std::size_t half = hd / 2;
    for (std::size_t m = 0; m < half; ++m) {
        const double freq = std::pow(c.rope_base, -2.0 * static_cast<double>(m) / static_cast<double>(hd));
        const double ang = static_cast<double>(pos) * freq;
        const double cs = std::cos(ang);
        const double sn = sign * std::sin(ang);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            double& a = v[h * hd + m];
            double& b = v[h * hd + m + half];
            const double a0 = a;
            const double b0 = b;
            a = a0 * cs - b0 * sn;
            b = a0 * sn + b0 * cs;
        }
    }
}

}  // namespace

struct LayerActs {
    Vec x_in;
    double r1 = 0.0;
    Vec n1, q, k, v;
    std::vector<Vec> probs;  // per head, length pos + 1
    Vec o;
    Vec y;
    double r2 = 0.0;
    Vec n2, gate, up, act;
};

struct PosActs {
    std::vector<LayerActs> layers;
    Vec h;
    double rf = 0.0;
    Vec h_bar;
};

struct SequenceTape {
    std::vector<PosActs> pos;
};

namespace {

Vec embed(const ModelParams& p, const ModelConfig& c, const InputSlot& slot) {
    if (slot.is_token()) {
        if (slot.token < 0 || static_cast<std::size_t>(slot.token) >= c.vocab_size) {
            throw std::invalid_argument("forward: token id out of range");
        }
        const auto row = p.tok_emb.row(static_cast<std::size_t>(slot.token));
        return Vec(row.begin(), row.end());
    }
    if (slot.embedding.size() != c.d_model) throw std::invalid_argument("forward: latent slot has wrong dimension");
    return slot.embedding;
}

/// Runs one position through the stack, extending the cache.
void run_position(const ModelParams& p, const ModelConfig& c, const InputSlot& slot, KvCache& cache,
                  PosActs& acts, std::vector<Vec>* trace) {
    const std::size_t d = c.d_model;
    const std::size_t hd = c.head_dim();
    const std::size_t pos = cache.length;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Vec x = embed(p, c, slot);
    if (trace) trace->push_back(x);
    acts.layers.resize(c.n_layers);

    for (std::size_t li = 0; li < c.n_layers; ++li) {
        const LayerParams& lp = p.layers[li];
        LayerActs& a = acts.layers[li];
        a.x_in = x;
        a.r1 = inv_rms(x, c.rms_eps);
        a.n1.resize(d);
        apply_norm(x, lp.attn_norm, a.r1, a.n1);
        a.q = matvec(lp.wq, a.n1);
        a.k = matvec(lp.wk, a.n1);
        a.v = matvec(lp.wv, a.n1);
        rope(a.q, pos, c);
        rope(a.k, pos, c);
        cache.keys[li].push_back(a.k);
        cache.values[li].push_back(a.v);

        const auto& keys = cache.keys[li];
        const auto& vals = cache.values[li];
        const std::size_t n = keys.size();
        a.o.assign(d, 0.0);
        a.probs.assign(c.n_heads, Vec(n));
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const std::size_t off = h * hd;
            Vec& pr = a.probs[h];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t t = 0; t < hd; ++t) s += a.q[off + t] * keys[j][off + t];
                pr[j] = s * scale;
                mx = std::max(mx, pr[j]);
            }
            double z = 0.0;
            for (auto& s : pr) {
                s = std::exp(s - mx);
                z += s;
            }
            for (auto& s : pr) s /= z;
            for (std::size_t j = 0; j < n; ++j) {
                const double w = pr[j];
                for (std::size_t t = 0; t < hd; ++t) a.o[off + t] += w * vals[j][off + t];
            }
        }
        const Vec attn = matvec(lp.wo, a.o);
        for (std::size_t i = 0; i < d; ++i) x[i] += attn[i];
        if (trace) trace->push_back(x);
        a.y = x;

        a.r2 = inv_rms(x, c.rms_eps);
        a.n2.resize(d);
        apply_norm(x, lp.mlp_norm, a.r2, a.n2);
        a.gate = matvec(lp.w_gate, a.n2);
        a.up = matvec(lp.w_up, a.n2);
        a.act.resize(c.d_ff);
        for (std::size_t i = 0; i < c.d_ff; ++i) a.act[i] = silu(a.gate[i]) * a.up[i];
        const Vec mlp = matvec(lp.w_down, a.act);
        for (std::size_t i = 0; i < d; ++i) x[i] += mlp[i];
        if (trace) trace->push_back(x);
    }
    cache.length += 1;

    acts.h = x;
    acts.rf = inv_rms(x, c.rms_eps);
    acts.h_bar.resize(d);
    apply_norm(x, p.final_norm, acts.rf, acts.h_bar);
}

}  // namespace

ForwardOutput forward_prefix(const ModelParams& params, const ModelConfig& config, std::span<const InputSlot> inputs,
                             KvCache& cache, ResidualTrace* trace) {
    if (cache.keys.size() != config.n_layers) throw std::invalid_argument("forward: cache layer count mismatch");
    if (cache.length + inputs.size() > config.max_seq_len) {
        throw std::length_error("forward: sequence exceeds max_seq_len");
    }
    ForwardOutput out;
    out.h_last.reserve(inputs.size());
    out.h_bar.reserve(inputs.size());
    PosActs acts;
    for (const auto& slot : inputs) {
        std::vector<Vec>* states = nullptr;
        if (trace) {
            trace->states.emplace_back();
            states = &trace->states.back();
        }
        run_position(params, config, slot, cache, acts, states);
        out.h_last.push_back(std::move(acts.h));
        out.h_bar.push_back(std::move(acts.h_bar));
    }
    return out;
}

Vec lm_logits(const ModelParams& params, std::span<const double> h_bar) {
    if (h_bar.size() != params.lm_head.cols()) throw std::invalid_argument("lm_logits: dimension mismatch");
    return matvec(params.lm_head, h_bar);
}

LatentHeadTape latent_head_forward(const ModelParams& params, std::span<const double> h_bar) {
    const auto& h = params.latent;
    if (!h.ready) throw std::logic_error("latent head is not initialized");
    if (h_bar.size() != h.down.cols()) throw std::invalid_argument("latent_coeffs: dimension mismatch");
    LatentHeadTape t;
    t.h_bar.assign(h_bar.begin(), h_bar.end());
    t.z = matvec(h.down, h_bar);
    for (std::size_t i = 0; i < t.z.size(); ++i) t.z[i] += h.bias[i];
    t.gate = matvec(h.gate, t.z);
    t.up = matvec(h.up, t.z);
    t.act.resize(t.gate.size());
    for (std::size_t i = 0; i < t.act.size(); ++i) t.act[i] = silu(t.gate[i]) * t.up[i];
    t.c = matvec(h.out, t.act);
    for (std::size_t i = 0; i < t.c.size(); ++i) t.c[i] += t.z[i];
    return t;
}

Vec latent_coeffs(const ModelParams& params, std::span<const double> h_bar) {
    return latent_head_forward(params, h_bar).c;
}

Vec latent_head_backward(const ModelParams& params, const LatentHeadTape& t, std::span<const double> d_c,
                         ModelParams& grads) {
    const auto& h = params.latent;
    auto& g = grads.latent;
    add_outer(g.out, d_c, t.act);
    Vec d_act = matvec_t(h.out, d_c);
    Vec d_gate(d_act.size()), d_up(d_act.size());
    for (std::size_t i = 0; i < d_act.size(); ++i) {
        d_gate[i] = d_act[i] * t.up[i] * silu_grad(t.gate[i]);
        d_up[i] = d_act[i] * silu(t.gate[i]);
    }
    add_outer(g.gate, d_gate, t.z);
    add_outer(g.up, d_up, t.z);
    Vec d_z(d_c.begin(), d_c.end());
    matvec_t_acc(h.gate, d_gate, d_z);
    matvec_t_acc(h.up, d_up, d_z);
    for (std::size_t i = 0; i < d_z.size(); ++i) g.bias[i] += d_z[i];
    add_outer(g.down, d_z, t.h_bar);
    return matvec_t(h.down, d_z);
}

Vec lm_head_backward(const ModelParams& params, std::span<const double> h_bar, std::span<const double> d_logits,
                     ModelParams& grads) {
    add_outer(grads.lm_head, d_logits, h_bar);
    return matvec_t(params.lm_head, d_logits);
}

// ---- full-sequence forward / backward ---------------------------------------------

SequenceForward::SequenceForward(const ModelParams& params, const ModelConfig& config,
                                 std::span<const InputSlot> inputs)
    : params_(&params), config_(&config), inputs_(inputs.begin(), inputs.end()),
      tape_(std::make_unique<SequenceTape>()) {
    if (inputs.size() > config.max_seq_len) throw std::length_error("forward: sequence exceeds max_seq_len");
    KvCache cache(config.n_layers);
    tape_->pos.resize(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) run_position(params, config, inputs[i], cache, tape_->pos[i], nullptr);
}

SequenceForward::~SequenceForward() = default;
SequenceForward::SequenceForward(SequenceForward&&) noexcept = default;
SequenceForward& SequenceForward::operator=(SequenceForward&&) noexcept = default;

std::size_t SequenceForward::length() const { return tape_->pos.size(); }
const Vec& SequenceForward::h_bar(std::size_t pos) const { return tape_->pos.at(pos).h_bar; }
const Vec& SequenceForward::h_last(std::size_t pos) const { return tape_->pos.at(pos).h; }

void SequenceForward::backward(std::span<const Vec> d_h_bar, ModelParams& grads) const {
    const ModelParams& p = *params_;
    const ModelConfig& c = *config_;
    const std::size_t n = length();
    const std::size_t d = c.d_model;
    const std::size_t hd = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (d_h_bar.size() != n) throw std::invalid_argument("backward: gradient count != sequence length");

    std::vector<Vec> dx(n, Vec(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const PosActs& a = tape_->pos[i];
        if (d_h_bar[i].empty()) continue;
        norm_backward(a.h, p.final_norm, a.rf, d_h_bar[i], grads.final_norm, dx[i]);
    }

    std::vector<Vec> dy(n), dq(n), dk(n), dv(n), dn1(n);
    for (std::size_t li = c.n_layers; li-- > 0;) {
        const LayerParams& lp = p.layers[li];
        LayerParams& lg = grads.layers[li];

        // MLP branch
        for (std::size_t i = 0; i < n; ++i) {
            const LayerActs& a = tape_->pos[i].layers[li];
            add_outer(lg.w_down, dx[i], a.act);
            const Vec d_act = matvec_t(lp.w_down, dx[i]);
            Vec d_gate(c.d_ff), d_up(c.d_ff);
            for (std::size_t j = 0; j < c.d_ff; ++j) {
                d_gate[j] = d_act[j] * a.up[j] * silu_grad(a.gate[j]);
                d_up[j] = d_act[j] * silu(a.gate[j]);
            }
            add_outer(lg.w_gate, d_gate, a.n2);
            add_outer(lg.w_up, d_up, a.n2);
            Vec dn2(d, 0.0);
            matvec_t_acc(lp.w_gate, d_gate, dn2);
            matvec_t_acc(lp.w_up, d_up, dn2);
            dy[i] = dx[i];
            norm_backward(a.y, lp.mlp_norm, a.r2, dn2, lg.mlp_norm, dy[i]);
        }

        // Attention branch
        for (std::size_t i = 0; i < n; ++i) {
            dq[i].assign(d, 0.0);
            dk[i].assign(d, 0.0);
            dv[i].assign(d, 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const LayerActs& a = tape_->pos[i].layers[li];
            add_outer(lg.wo, dy[i], a.o);
            const Vec d_o = matvec_t(lp.wo, dy[i]);
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                const std::size_t off = h * hd;
                const Vec& pr = a.probs[h];
                Vec dp(i + 1);
                double sum = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    const LayerActs& aj = tape_->pos[j].layers[li];
                    double s = 0.0;
                    for (std::size_t t = 0; t < hd; ++t) {
                        s += d_o[off + t] * aj.v[off + t];
                        dv[j][off + t] += pr[j] * d_o[off + t];
                    }
                    dp[j] = s;
                    sum += pr[j] * s;
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    const double ds = pr[j] * (dp[j] - sum) * scale;
                    if (ds == 0.0) continue;
                    const LayerActs& aj = tape_->pos[j].layers[li];
                    for (std::size_t t = 0; t < hd; ++t) {
                        dq[i][off + t] += ds * aj.k[off + t];
                        dk[j][off + t] += ds * a.q[off + t];
                    }
                }
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            const LayerActs& a = tape_->pos[i].layers[li];
            rope(dq[i], i, c, -1.0);
            rope(dk[i], i, c, -1.0);
            add_outer(lg.wq, dq[i], a.n1);
            add_outer(lg.wk, dk[i], a.n1);
            add_outer(lg.wv, dv[i], a.n1);
            dn1[i].assign(d, 0.0);
            matvec_t_acc(lp.wq, dq[i], dn1[i]);
            matvec_t_acc(lp.wk, dk[i], dn1[i]);
            matvec_t_acc(lp.wv, dv[i], dn1[i]);
            dx[i] = dy[i];
            norm_backward(a.x_in, lp.attn_norm, a.r1, dn1[i], lg.attn_norm, dx[i]);
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!inputs_[i].is_token()) continue;
        auto row = grads.tok_emb.row(static_cast<std::size_t>(inputs_[i].token));
        for (std::size_t j = 0; j < d; ++j) row[j] += dx[i][j];
    }
}

// ---- checkpoints ----------------------------------------------------------------------

// Layout: magic "GAPCKPT", u32 version, u32 reserved, u64 d_model, n_layers,
// n_heads, d_ff, vocab_size, latent_k, adapter_width, max_seq_len, init_seed,
// f64 rms_eps, rope_base, u64 latent_head_ready, then every parameter array in
// ModelParams::visit order as LE doubles.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& c, const ModelParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    io::write_magic(os, "GAPCKPT");
    io::write_u32(os, kCheckpointVersion);
    io::write_u32(os, 0);
    for (std::uint64_t v : {std::uint64_t{c.d_model}, std::uint64_t{c.n_layers}, std::uint64_t{c.n_heads},
                            std::uint64_t{c.d_ff}, std::uint64_t{c.vocab_size}, std::uint64_t{c.latent_k},
                            std::uint64_t{c.adapter_width}, std::uint64_t{c.max_seq_len}, c.init_seed}) {
        io::write_u64(os, v);
    }
    io::write_f64(os, c.rms_eps);
    io::write_f64(os, c.rope_base);
    io::write_u64(os, params.latent.ready ? 1 : 0);
    params.visit([&](std::string_view, std::span<const double> v, bool) { io::write_f64s(os, v); });
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    io::expect_magic(is, "GAPCKPT", "checkpoint");
    if (io::read_u32(is) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
    io::read_u32(is);
    Checkpoint ck;
    ModelConfig& c = ck.config;
    c.d_model = io::read_u64(is);
    c.n_layers = io::read_u64(is);
    c.n_heads = io::read_u64(is);
    c.d_ff = io::read_u64(is);
    c.vocab_size = io::read_u64(is);
    c.latent_k = io::read_u64(is);
    c.adapter_width = io::read_u64(is);
    c.max_seq_len = io::read_u64(is);
    c.init_seed = io::read_u64(is);
    c.rms_eps = io::read_f64(is);
    c.rope_base = io::read_f64(is);
    if (c.d_model > 4096 || c.n_layers > 256 || c.d_ff > 65536 || c.vocab_size > (1u << 20)) {
        throw std::runtime_error("checkpoint: implausible header");
    }
    c.validate();
    const bool ready = io::read_u64(is) != 0;
    ck.params = ModelParams::zeros(c);
    ck.params.visit([&](std::string_view, std::span<double> v, bool) { io::read_f64s(is, v); });
    ck.params.latent.ready = ready;
    return ck;
}

}  // namespace gap
