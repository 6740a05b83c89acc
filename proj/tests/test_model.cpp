#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gap/model.hpp"
#include "gap/pca.hpp"

using namespace gap;

namespace {

ModelConfig small_config(std::size_t layers = 2) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = layers;
    c.n_heads = 4;
    c.d_ff = 32;
    c.vocab_size = 24;
    c.latent_k = 5;
    c.max_seq_len = 32;
    c.init_seed = 99;
    return c;
}

std::vector<InputSlot> mixed_inputs(const ModelConfig& c, Rng& rng, std::size_t n) {
    std::vector<InputSlot> in;
    for (std::size_t i = 0; i < n; ++i) {
        if (i % 3 == 1) {
            in.push_back(InputSlot::of_embedding(gaussian_vec(rng, c.d_model, 1.0)));
        } else {
            in.push_back(InputSlot::of_token(static_cast<TokenId>(rng.below(c.vocab_size))));
        }
    }
    return in;
}

PcaBasis random_basis(Rng& rng, std::size_t d, std::size_t k) {
    std::vector<Vec> s;
    for (int n = 0; n < 200; ++n) {
        Vec v(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = (1.0 + static_cast<double>(i % 5)) * rng.normal() + 0.3;
        s.push_back(v);
    }
    return fit_pca_rank(s, k);
}

ForwardOutput full_forward(const ModelParams& p, const ModelConfig& c, const std::vector<InputSlot>& in) {
    KvCache cache(c.n_layers);
    return forward_prefix(p, c, in, cache);
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("config validation names the offending field") {
    ModelConfig c = small_config();
    CHECK_NOTHROW(c.validate());
    c.n_heads = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), std::invalid_argument);
    c = small_config();
    c.latent_k = 17;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("latent_k"), std::invalid_argument);
    c = small_config();
    c.vocab_size = 5;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vocab_size"), std::invalid_argument);
}

TEST_CASE("zeroed sublayers leave the residual stream at the input embedding") {
    const ModelConfig c = small_config(3);
    ModelParams p = init_params(c);
    for (auto& l : p.layers) {
        l.wo.data().assign(l.wo.size(), 0.0);
        l.w_down.data().assign(l.w_down.size(), 0.0);
    }
    Rng rng(1);
    const auto in = mixed_inputs(c, rng, 7);
    const auto out = full_forward(p, c, in);
    for (std::size_t i = 0; i < in.size(); ++i) {
        const auto row = in[i].is_token() ? Vec(p.tok_emb.row(in[i].token).begin(), p.tok_emb.row(in[i].token).end())
                                          : in[i].embedding;
        CHECK(out.h_last[i] == row);
    }
}

TEST_CASE("zero layers: h_last is the embedding and h_bar its final RMSNorm") {
    const ModelConfig c = small_config(0);
    const ModelParams p = init_params(c);
    Rng rng(2);
    const auto in = mixed_inputs(c, rng, 5);
    const auto out = full_forward(p, c, in);
    for (std::size_t i = 0; i < in.size(); ++i) {
        const Vec e = in[i].is_token() ? Vec(p.tok_emb.row(in[i].token).begin(), p.tok_emb.row(in[i].token).end())
                                       : in[i].embedding;
        CHECK(out.h_last[i] == e);
        CHECK(out.h_bar[i] == rmsnorm(e, p.final_norm, c.rms_eps));
    }
}

TEST_CASE("incremental decoding with a cache matches the full forward") {
    const ModelConfig c = small_config(3);
    const ModelParams p = init_params(c);
    Rng rng(3);
    const auto in = mixed_inputs(c, rng, 12);
    const auto full = full_forward(p, c, in);

    KvCache cache(c.n_layers);
    const std::span<const InputSlot> all(in);
    auto first = forward_prefix(p, c, all.subspan(0, 5), cache);
    CHECK(cache.size() == 5);
    std::vector<Vec> inc = first.h_bar;
    for (std::size_t i = 5; i < in.size(); ++i) {
        const auto step = forward_prefix(p, c, all.subspan(i, 1), cache);
        inc.push_back(step.h_bar[0]);
    }
    CHECK(cache.size() == in.size());
    for (std::size_t i = 0; i < in.size(); ++i)
        for (std::size_t j = 0; j < c.d_model; ++j) CHECK(std::abs(inc[i][j] - full.h_bar[i][j]) < 1e-10);

    const SequenceForward seq(p, c, in);
    CHECK(seq.length() == in.size());
    for (std::size_t i = 0; i < in.size(); ++i)
        for (std::size_t j = 0; j < c.d_model; ++j) {
            CHECK(std::abs(seq.h_bar(i)[j] - full.h_bar[i][j]) < 1e-12);
            CHECK(std::abs(seq.h_last(i)[j] - full.h_last[i][j]) < 1e-12);
        }
}

TEST_CASE("causality: perturbing slot j leaves earlier outputs bitwise unchanged") {
    const ModelConfig c = small_config(2);
    const ModelParams p = init_params(c);
    Rng rng(4);
    auto in = mixed_inputs(c, rng, 9);
    const auto base = full_forward(p, c, in);
    in[6] = InputSlot::of_embedding(gaussian_vec(rng, c.d_model, 3.0));
    const auto pert = full_forward(p, c, in);
    for (std::size_t i = 0; i < 6; ++i) CHECK(base.h_bar[i] == pert.h_bar[i]);
    CHECK(base.h_bar[6] != pert.h_bar[6]);
}

TEST_CASE("latent slots bypass the token embedding table") {
    const ModelConfig c = small_config(2);
    ModelParams p = init_params(c);
    Rng rng(5);
    std::vector<InputSlot> in;
    for (int i = 0; i < 4; ++i) in.push_back(InputSlot::of_embedding(gaussian_vec(rng, c.d_model, 1.0)));
    const auto base = full_forward(p, c, in);
    p.tok_emb.data().assign(p.tok_emb.size(), 0.0);
    const auto zeroed = full_forward(p, c, in);
    for (std::size_t i = 0; i < in.size(); ++i) CHECK(base.h_bar[i] == zeroed.h_bar[i]);
}

TEST_CASE("forward errors") {
    const ModelConfig c = small_config(1);
    const ModelParams p = init_params(c);
    KvCache cache(c.n_layers);
    std::vector<InputSlot> too_long(c.max_seq_len + 1, InputSlot::of_token(0));
    CHECK_THROWS_AS(forward_prefix(p, c, too_long, cache), std::length_error);
    std::vector<InputSlot> bad{InputSlot::of_embedding(Vec(c.d_model + 1, 0.0))};
    CHECK_THROWS_AS(forward_prefix(p, c, bad, cache), std::invalid_argument);
    std::vector<InputSlot> bad_tok{InputSlot::of_token(static_cast<TokenId>(c.vocab_size))};
    CHECK_THROWS_AS(forward_prefix(p, c, bad_tok, cache), std::invalid_argument);

    std::vector<InputSlot> fill(c.max_seq_len, InputSlot::of_token(1));
    KvCache full_cache(c.n_layers);
    forward_prefix(p, c, fill, full_cache);
    std::vector<InputSlot> one{InputSlot::of_token(1)};
    CHECK_THROWS_AS(forward_prefix(p, c, one, full_cache), std::length_error);
}

TEST_CASE("lm_logits") {
    const ModelConfig c = small_config(1);
    ModelParams p = init_params(c);
    Rng rng(6);
    const Vec h = gaussian_vec(rng, c.d_model, 1.0);
    const Vec logits = lm_logits(p, h);
    REQUIRE(logits.size() == c.vocab_size);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
        double s = 0.0;
        for (std::size_t j = 0; j < c.d_model; ++j) s += p.lm_head(v, j) * h[j];
        CHECK(std::abs(logits[v] - s) < 1e-12);
    }
    p.lm_head.data().assign(p.lm_head.size(), 0.0);
    for (double z : lm_logits(p, h)) CHECK(z == 0.0);
    p.lm_head(3, 7) = 1.0;
    CHECK(lm_logits(p, h)[3] == h[7]);
    CHECK_THROWS_AS(lm_logits(p, Vec(3, 0.0)), std::invalid_argument);
}

TEST_CASE("latent head initialization and evaluation") {
    ModelConfig c = small_config(1);
    Rng brng(7);
    const PcaBasis basis = random_basis(brng, c.d_model, c.latent_k);
    ModelParams p = init_params(c);
    Rng rng(8);
    const Vec h = gaussian_vec(rng, c.d_model, 1.0);
    CHECK_THROWS_AS(latent_coeffs(p, h), std::logic_error);

    Rng r0(1);
    init_latent_head(p, c, basis, r0, 0.0);
    const Vec exact = latent_coeffs(p, h);
    const Vec pt_h = matvec_t(basis.components(), h);
    CHECK(exact == pt_h);
    for (double z : latent_coeffs(p, Vec(c.d_model, 0.0))) CHECK(z == 0.0);

    Rng r1(2), r2(2);
    ModelParams a = init_params(c), b = init_params(c);
    init_latent_head(a, c, basis, r1);
    init_latent_head(b, c, basis, r2);
    CHECK(a == b);

    // Composed oracle for the perturbed head.
    const auto& L = a.latent;
    Vec z(c.latent_k);
    for (std::size_t i = 0; i < c.latent_k; ++i) {
        z[i] = L.bias[i];
        for (std::size_t j = 0; j < c.d_model; ++j) z[i] += L.down(i, j) * h[j];
    }
    Vec act(c.adapter_dim());
    for (std::size_t r = 0; r < act.size(); ++r) {
        double g = 0.0, u = 0.0;
        for (std::size_t i = 0; i < c.latent_k; ++i) {
            g += L.gate(r, i) * z[i];
            u += L.up(r, i) * z[i];
        }
        act[r] = silu(g) * u;
    }
    const Vec got = latent_coeffs(a, h);
    for (std::size_t i = 0; i < c.latent_k; ++i) {
        double o = z[i];
        for (std::size_t r = 0; r < act.size(); ++r) o += L.out(i, r) * act[r];
        CHECK(std::abs(got[i] - o) < 1e-10);
        CHECK(std::abs(got[i] - pt_h[i]) < 0.1);
    }
    // The decoded vector lies in the affine span of the basis.
    CHECK(out_of_subspace_norm(basis, reconstruct(basis, got)) < 1e-8);

    CHECK_THROWS_AS(latent_coeffs(a, Vec(2, 0.0)), std::invalid_argument);
    ModelConfig wrong = c;
    wrong.latent_k = 4;
    ModelParams w = init_params(wrong);
    Rng r3(3);
    CHECK_THROWS_AS(init_latent_head(w, wrong, basis, r3), std::invalid_argument);
}

TEST_CASE("init is seeded and parameter visiting is exhaustive") {
    const ModelConfig c = small_config(2);
    CHECK(init_params(c) == init_params(c));
    ModelConfig other = c;
    other.init_seed = 100;
    CHECK(!(init_params(c) == init_params(other)));

    const ModelParams p = init_params(c);
    std::size_t total = 0;
    std::vector<std::string> names;
    p.visit([&](std::string_view name, std::span<const double> v, bool) {
        names.emplace_back(name);
        total += v.size();
    });
    CHECK(total == p.parameter_count());
    CHECK(names.front() == "tok_emb");
    CHECK(names.back() == "latent.out");
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const ModelConfig c = small_config(2);
    ModelParams p = init_params(c);
    Rng brng(9);
    const PcaBasis basis = random_basis(brng, c.d_model, c.latent_k);
    Rng rng(10);
    init_latent_head(p, c, basis, rng);
    const auto path = std::filesystem::temp_directory_path() / "gap_test_ckpt.bin";
    save_checkpoint(path, c, p);
    const Checkpoint ck = load_checkpoint(path);
    CHECK(ck.config == c);
    CHECK(ck.params == p);
    CHECK(ck.params.latent.ready);
    std::filesystem::resize_file(path, 100);
    CHECK_THROWS(load_checkpoint(path));
    std::filesystem::remove(path);
}
