#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gap/norm_diagnostics.hpp"

using namespace gap;

namespace {

ModelConfig toy(std::size_t layers) {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = layers;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 20;
    c.latent_k = 4;
    c.max_seq_len = 64;
    c.init_seed = 5;
    return c;
}

std::vector<LabeledSequence> batch_for(const ModelConfig& c, Rng& rng, std::size_t n_seq, std::size_t len) {
    std::vector<LabeledSequence> out;
    for (std::size_t s = 0; s < n_seq; ++s) {
        LabeledSequence seq;
        for (std::size_t i = 0; i < len; ++i) {
            if (i % 2 == 0) {
                seq.slots.push_back(InputSlot::of_token(static_cast<TokenId>(rng.below(c.vocab_size))));
                seq.classes.push_back(TokenClass::Text);
            } else {
                seq.slots.push_back(InputSlot::of_embedding(gaussian_vec(rng, c.d_model, 2.0)));
                seq.classes.push_back(TokenClass::Vision);
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace

TEST_CASE("zero-sublayer model: every layer matches the input row") {
    const ModelConfig c = toy(3);
    ModelParams p = init_params(c);
    for (auto& l : p.layers) {
        l.wo.data().assign(l.wo.size(), 0.0);
        l.w_down.data().assign(l.w_down.size(), 0.0);
    }
    Rng rng(1);
    const auto batch = batch_for(c, rng, 3, 8);
    const NormProfile prof = profile_norms(p, c, batch);
    CHECK(prof.n_layers == 3);
    for (auto cls : {TokenClass::Text, TokenClass::Vision}) {
        const NormCell& in = prof.at(0, cls);
        CHECK(in.count == 12);
        for (std::size_t l = 1; l <= 3; ++l) {
            CHECK(prof.at(l, cls).mean_log_norm == in.mean_log_norm);
            CHECK(prof.at(l, cls).std_log_norm == in.std_log_norm);
        }
        CHECK(norm_ratio(prof, 3, cls, 0, cls) == 1.0);
    }
}

TEST_CASE("input-embedding row is independent of depth") {
    Rng r1(2), r2(2);
    const ModelConfig a = toy(1), b = toy(4);
    const NormProfile pa = profile_norms(init_params(a), a, batch_for(a, r1, 2, 6));
    const NormProfile pb = profile_norms(init_params(b), b, batch_for(b, r2, 2, 6));
    for (auto cls : {TokenClass::Text, TokenClass::Vision}) {
        CHECK(pa.at(0, cls).mean_log_norm == pb.at(0, cls).mean_log_norm);
        CHECK(pa.at(0, cls).std_log_norm == pb.at(0, cls).std_log_norm);
    }
}

TEST_CASE("profile statistics match a hand computation") {
    // Zero-layer model; vision embeddings with norms 2 and 8.
    const ModelConfig c = toy(0);
    const ModelParams p = init_params(c);
    LabeledSequence seq;
    Vec a(c.d_model, 0.0), b(c.d_model, 0.0);
    a[0] = 2.0;
    b[3] = -8.0;
    seq.slots = {InputSlot::of_embedding(a), InputSlot::of_embedding(b)};
    seq.classes = {TokenClass::Vision, TokenClass::Vision};
    const NormProfile prof = profile_norms(p, c, std::vector<LabeledSequence>{seq});
    const NormCell& cell = prof.at(0, TokenClass::Vision);
    const double m = 0.5 * (std::log(2.0) + std::log(8.0));
    CHECK(std::abs(cell.mean_log_norm - m) < 1e-15);
    CHECK(std::abs(cell.std_log_norm - 0.5 * (std::log(8.0) - std::log(2.0))) < 1e-15);
    CHECK(cell.count == 2);
    CHECK_THROWS_AS(prof.at(0, TokenClass::Text), std::out_of_range);
}

TEST_CASE("norm_ratio reproduces geometric-mean ratios") {
    NormProfile prof;
    prof.n_layers = 1;
    prof.cells[{0, TokenClass::Vision}] = {std::log(50.5), 0.0, 1};
    prof.cells[{1, TokenClass::Vision}] = {std::log(441.4), 0.0, 1};
    prof.cells[{1, TokenClass::Text}] = {std::log(441.4), 0.0, 1};
    CHECK(norm_ratio(prof, 1, TokenClass::Vision, 0, TokenClass::Vision) == doctest::Approx(441.4 / 50.5));
    CHECK(norm_ratio(prof, 1, TokenClass::Vision, 0, TokenClass::Vision) == doctest::Approx(8.74).epsilon(1e-3));
    CHECK(norm_ratio(prof, 1, TokenClass::Vision, 1, TokenClass::Text) == 1.0);
    CHECK_THROWS_AS(norm_ratio(prof, 0, TokenClass::Text, 1, TokenClass::Text), std::out_of_range);
}

TEST_CASE("profile errors") {
    const ModelConfig c = toy(1);
    const ModelParams p = init_params(c);
    CHECK_THROWS_AS(profile_norms(p, c, std::vector<LabeledSequence>{}), std::invalid_argument);
    LabeledSequence bad;
    bad.slots = {InputSlot::of_token(1)};
    CHECK_THROWS_AS(profile_norms(p, c, std::vector<LabeledSequence>{bad}), std::invalid_argument);
    LabeledSequence zero;
    zero.slots = {InputSlot::of_embedding(Vec(c.d_model, 0.0))};
    zero.classes = {TokenClass::Vision};
    CHECK_THROWS_AS(profile_norms(p, c, std::vector<LabeledSequence>{zero}), std::invalid_argument);
}

TEST_CASE("profile CSV layout") {
    const ModelConfig c = toy(1);
    Rng rng(3);
    const NormProfile prof = profile_norms(init_params(c), c, batch_for(c, rng, 1, 4));
    std::ostringstream os;
    prof.write_csv(os);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "layer,class,mean_log_norm,std_log_norm,count");
    std::size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 4);
    CHECK(token_class_from_string(to_string(TokenClass::Vision)) == TokenClass::Vision);
    CHECK_THROWS(token_class_from_string("audio"));
}

TEST_CASE("residual accumulation on a random deep stack") {
    const ModelConfig c = toy(8);
    const ModelParams p = init_params(c);
    Rng rng(4);
    std::vector<std::vector<InputSlot>> seqs;
    for (const auto& s : batch_for(c, rng, 8, 40)) seqs.push_back(s.slots);
    const AccumulationReport rep = residual_accumulation(p, c, seqs);
    CHECK(rep.positions == 320);
    CHECK(rep.mean_update_sq.size() == 16);
    CHECK(rep.max_step_identity_error < 1e-9);
    CHECK(std::abs(rep.mean_final_sq - rep.predicted_final_sq) / rep.predicted_final_sq < 0.10);

    std::vector<LabeledSequence> labeled;
    for (const auto& s : seqs) {
        LabeledSequence l;
        l.slots = s;
        l.classes.assign(s.size(), TokenClass::Text);
        labeled.push_back(l);
    }
    const NormProfile prof = profile_norms(p, c, labeled);
    CHECK(prof.at(8, TokenClass::Text).mean_log_norm > prof.at(0, TokenClass::Text).mean_log_norm);
}

TEST_CASE("ema_init") {
    CHECK(ema_init(std::vector<double>{50.5}).mean_norm == 50.5);
    CHECK(ema_init(std::vector<double>{1, 1, 1}).mean_norm == 1.0);
    const EmaState s = ema_init(std::vector<double>{2, 4}, 0.5);
    CHECK(s.mean_norm == 3.0);
    CHECK(s.count == 2);
    CHECK(s.decay == 0.5);
    CHECK_THROWS_AS(ema_init(std::vector<double>{}), std::invalid_argument);
    CHECK_THROWS_AS(ema_init(std::vector<double>{1.0, 0.0}), std::invalid_argument);
    CHECK_THROWS_AS(ema_init(std::vector<double>{1.0}, 1.5), std::invalid_argument);
}

TEST_CASE("ema_update") {
    EmaState s = ema_init(std::vector<double>{10.0}, 1.0);
    CHECK(ema_update(s, 20.0).mean_norm == 10.0);
    s.decay = 0.0;
    CHECK(ema_update(s, 20.0).mean_norm == 20.0);
    s.decay = 0.9;
    const EmaState n = ema_update(s, 20.0);
    CHECK(std::abs(n.mean_norm - 11.0) < 1e-12);
    CHECK(n.count == s.count + 1);
    CHECK_THROWS_AS(ema_update(s, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(ema_update(s, -1.0), std::invalid_argument);
}

TEST_CASE("ema_rescale contract") {
    Rng rng(5);
    const EmaState s{50.5, 0.9, 1};
    for (int trial = 0; trial < 200; ++trial) {
        const Vec v = gaussian_vec(rng, 32, std::exp(rng.normal() * 3.0));
        const Vec out = ema_rescale(s, v);
        CHECK(std::abs(l2_norm(out) - 50.5) < 1e-10);
        CHECK(std::abs(dot(out, v) / (l2_norm(out) * l2_norm(v)) - 1.0) < 1e-12);
    }

    // Entries whose tenfold is exact give bitwise-identical outputs.
    Vec v{3.0, -1.5, 0.25, 7.0, -2.0};
    Vec v10 = v;
    for (auto& x : v10) x *= 10.0;
    CHECK(ema_rescale(s, v) == ema_rescale(s, v10));

    Vec w = gaussian_vec(rng, 8, 1.0);
    const double n = l2_norm(w);
    const Vec same = ema_rescale(EmaState{n, 0.9, 1}, w);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(same[i] - w[i]) < 1e-14);

    Vec big(4, 0.0);
    big[0] = 441.4;
    CHECK(std::abs(l2_norm(ema_rescale(s, big)) - 50.5) < 1e-10);
    CHECK_THROWS_AS(ema_rescale(s, Vec(4, 0.0)), std::invalid_argument);
}
