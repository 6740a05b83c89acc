#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "gap/data.hpp"

using namespace gap;

namespace {

std::vector<TokenId> random_text(Rng& rng, std::size_t max_len) {
    std::vector<TokenId> t(rng.below(max_len + 1));
    for (auto& x : t) x = vocab::kFirstContent + static_cast<TokenId>(rng.below(40));
    return t;
}

ResponseSegments random_segments(Rng& rng, bool with_latent) {
    ResponseSegments s;
    s.think_prefix = random_text(rng, 6);
    if (with_latent) {
        const std::size_t side = 1 + rng.below(6);
        s.latent = LatentSpan{side * side, {}};
        s.parser_text = random_text(rng, 5);
        s.think_suffix = random_text(rng, 4);
    }
    s.answer = random_text(rng, 3);
    return s;
}

TrainingExample latent_example(Rng& rng, std::size_t budget, std::size_t d = 8) {
    TrainingExample ex;
    ex.query_tokens = {12, 13};
    ex.query_image = {gaussian_vec(rng, d, 1.0), gaussian_vec(rng, d, 1.0)};
    ex.segments.think_prefix = {20, 21};
    LatentSpan span{budget, {}};
    for (std::size_t t = 0; t < budget; ++t) span.targets.push_back(gaussian_vec(rng, d, 1.0));
    ex.segments.latent = span;
    ex.segments.parser_text = {30, 31, 32};
    ex.segments.think_suffix = {22};
    ex.segments.answer = {40};
    ex.meta.question_text = "Q" + std::to_string(rng.next_u64());
    ex.meta.source_id = ex.meta.question_text;
    compute_hashes(ex);
    return ex;
}

}  // namespace

TEST_CASE("perfect squares") {
    for (std::size_t n : {0u, 1u, 4u, 9u, 16u, 36u, 64u, 144u}) CHECK(is_perfect_square(n));
    for (std::size_t n : {2u, 3u, 5u, 8u, 35u, 37u}) CHECK(!is_perfect_square(n));
}

TEST_CASE("serialize places exactly T pads between the span markers") {
    ResponseSegments s;
    s.latent = LatentSpan{4, {}};
    const auto toks = serialize_response(s);
    using namespace vocab;
    const std::vector<TokenId> expect{kThink,     kLatentStart, kLatentPad, kLatentPad, kLatentPad, kLatentPad,
                                      kLatentEnd, kParser,      kParserEnd, kThinkEnd,  kAnswer,    kAnswerEnd};
    CHECK(toks == expect);
    CHECK(parse_response(toks).latent->budget == 4);

    ResponseSegments main;
    main.latent = LatentSpan{36, {}};
    const auto m = serialize_response(main);
    CHECK(std::count(m.begin(), m.end(), vocab::kLatentPad) == 36);
}

TEST_CASE("serialize/parse round-trips random segments") {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const ResponseSegments s = random_segments(rng, rng.bernoulli(0.7));
        const auto toks = serialize_response(s);
        CHECK(parse_response(toks) == s);
        CHECK(serialize_response(parse_response(toks)) == toks);
    }
}

TEST_CASE("serialize rejects malformed segments") {
    ResponseSegments s;
    s.latent = LatentSpan{0, {}};
    CHECK_THROWS_AS(serialize_response(s), std::invalid_argument);
    s.latent = LatentSpan{5, {}};
    CHECK_THROWS_WITH_AS(serialize_response(s), doctest::Contains("perfect square"), std::invalid_argument);
    s.latent = LatentSpan{4, {Vec{1.0}}};
    CHECK_THROWS_AS(serialize_response(s), std::invalid_argument);
    s.latent.reset();
    s.parser_text = {20};
    CHECK_THROWS_AS(serialize_response(s), std::invalid_argument);
    s.parser_text.clear();
    s.think_suffix = {20};
    CHECK_THROWS_AS(serialize_response(s), std::invalid_argument);
    s.think_suffix.clear();
    s.answer = {vocab::kLatentPad};
    CHECK_THROWS_AS(serialize_response(s), std::invalid_argument);
}

TEST_CASE("parse reports structured errors") {
    using namespace vocab;
    auto code_of = [](std::vector<TokenId> toks) {
        try {
            parse_response(toks);
        } catch (const ParseError& e) {
            return e.code();
        }
        return std::string("none");
    };
    CHECK(code_of({kThink, kLatentStart, kLatentPad, kParser, kParserEnd, kThinkEnd, kAnswer, kAnswerEnd}) ==
          "unterminated_span");
    CHECK(code_of({kThink, kLatentStart, kLatentStart, kLatentPad, kLatentEnd}) == "nested_span");
    CHECK(code_of({kThink, kLatentStart, kLatentEnd, kParser, kParserEnd, kThinkEnd, kAnswer, kAnswerEnd}) ==
          "empty_span");
    CHECK(code_of({kThink, kThinkEnd, kAnswer, 20}) == "missing_answer_end");
    CHECK(code_of({kThinkEnd, kAnswer, kAnswerEnd}) == "missing_think");
    CHECK(code_of({kThink, kLatentPad, kThinkEnd, kAnswer, kAnswerEnd}) == "stray_pad");
    CHECK(code_of({kThink, kThinkEnd, kAnswer, kAnswerEnd, 20}) == "trailing_tokens");
    CHECK(code_of({kThink, kLatentStart, kLatentPad, kLatentEnd, kThinkEnd, kAnswer, kAnswerEnd}) ==
          "missing_parser");
    CHECK(code_of({kThink, kThinkEnd, kAnswer, kAnswerEnd}) == "none");
}

TEST_CASE("estimate_accuracy") {
    auto k_of_8 = [](std::uint32_t k) { return [k](std::uint32_t a) { return a < k; }; };
    CHECK(estimate_accuracy(k_of_8(8), 8).value() == 1.0);
    CHECK(estimate_accuracy(k_of_8(0), 8).value() == 0.0);
    const Accuracy a = estimate_accuracy(k_of_8(3), 8);
    CHECK(a.correct == 3);
    CHECK(a.total == 8);
    CHECK(a.value() == 0.375);
    CHECK_THROWS_AS(estimate_accuracy(k_of_8(1), 0), std::invalid_argument);
    try {
        estimate_accuracy(
            [](std::uint32_t attempt) -> bool {
                if (attempt == 5) throw std::runtime_error("backend down");
                return true;
            },
            8);
        FAIL("expected a sampler failure");
    } catch (const SamplerFailure& e) {
        CHECK(e.attempt() == 5);
    }
}

TEST_CASE("assign_supervision follows the threshold rule") {
    CHECK(assign_supervision(0.0, 0.0) == SupervisionMode::Latent);
    CHECK(assign_supervision(0.375, 0.0) == SupervisionMode::TextOnly);
    CHECK(assign_supervision(0.25, 0.25) == SupervisionMode::Latent);
    CHECK(assign_supervision(Accuracy{3, 8}, 0.0) == SupervisionMode::TextOnly);
    CHECK(supervision_mode_from_string(to_string(SupervisionMode::TextOnly)) == SupervisionMode::TextOnly);
    CHECK(to_string(SupervisionMode::Latent) == "latent");
}

TEST_CASE("strip_latent") {
    Rng rng(2);
    const TrainingExample ex = latent_example(rng, 9);
    const auto before = serialize_response(ex.segments);
    const StripResult r = strip_latent(ex);
    CHECK(!r.already_stripped);
    CHECK(r.example.mode == SupervisionMode::TextOnly);
    CHECK(!r.example.segments.latent);
    const auto after = serialize_response(r.example.segments);
    for (TokenId t : after) CHECK(!vocab::is_latent_marker(t));
    CHECK(before.size() - after.size() == 9 + 4 + ex.segments.parser_text.size());

    const StripResult again = strip_latent(r.example);
    CHECK(again.already_stripped);
    CHECK(again.example == r.example);
}

TEST_CASE("quality_filter outcomes") {
    Rng rng(3);
    TrainingExample ex = latent_example(rng, 4);
    CHECK(quality_filter(ex) == FilterOutcome::Keep);

    TrainingExample zero = ex;
    zero.segments.latent->targets[2].assign(8, 0.0);
    CHECK(quality_filter(zero) == FilterOutcome::RejectDegenerateEmbedding);
    TrainingExample nan = ex;
    nan.segments.latent->targets[0][1] = std::nan("");
    CHECK(quality_filter(nan) == FilterOutcome::RejectDegenerateEmbedding);

    TrainingExample empty_parser = ex;
    empty_parser.segments.parser_text.clear();
    CHECK(quality_filter(empty_parser) == FilterOutcome::RejectParserLength);

    TrainingExample solved = ex;
    solved.accuracy = {3, 8};
    CHECK(quality_filter(solved) == FilterOutcome::RouteTextOnly);
    CHECK(quality_filter(strip_latent(ex).example) == FilterOutcome::Keep);
}

TEST_CASE("quality_filter on a planted corpus matches the enumerated oracle") {
    Rng rng(4);
    std::vector<TrainingExample> corpus;
    std::vector<FilterOutcome> oracle;
    for (int i = 0; i < 300; ++i) {
        TrainingExample ex = latent_example(rng, 4);
        const int kind = static_cast<int>(rng.below(4));
        FilterOutcome expect = FilterOutcome::Keep;
        if (kind == 1) {
            ex.segments.latent->targets[rng.below(4)].assign(8, 0.0);
            expect = FilterOutcome::RejectDegenerateEmbedding;
        } else if (kind == 2) {
            ex.segments.parser_text.resize(rng.below(3));
            expect = FilterOutcome::RejectParserLength;
        } else if (kind == 3) {
            ex.accuracy = {static_cast<std::uint32_t>(1 + rng.below(8)), 8};
            expect = FilterOutcome::RouteTextOnly;
        }
        corpus.push_back(ex);
        oracle.push_back(expect);
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(quality_filter(corpus[i]) == oracle[i]);
}

TEST_CASE("question normalization and hashing") {
    CHECK(normalize_question("  What IS   shown,\there?! ") == "what is shown here");
    CHECK(normalize_question("a-b") == "ab");
    const std::string s = "hello";
    // Published FNV-1a 64-bit test vector.
    CHECK(fnv1a_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(""), 0)) ==
          "cbf29ce484222325");
    CHECK(fnv1a_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>("a"), 1)) ==
          "af63dc4c8601ec8c");
    (void)s;

    Rng rng(5);
    TrainingExample a = latent_example(rng, 4);
    TrainingExample b = a;
    b.meta.question_text = "  " + a.meta.question_text + "?? ";
    compute_hashes(b);
    CHECK(a.meta.text_hash == b.meta.text_hash);
    CHECK(a.meta.image_hash == b.meta.image_hash);
    b.query_image[0][0] += 1e-12;
    compute_hashes(b);
    CHECK(a.meta.image_hash != b.meta.image_hash);
}

TEST_CASE("leakage_audit") {
    Rng rng(6);
    std::vector<TrainingExample> train, eval;
    for (int i = 0; i < 20; ++i) train.push_back(latent_example(rng, 1));
    for (int i = 0; i < 10; ++i) eval.push_back(latent_example(rng, 1));
    CHECK(leakage_audit(train, eval).empty());

    eval[3] = train[7];
    const AuditReport one = leakage_audit(train, eval);
    REQUIRE(one.image_collisions.size() == 1);
    REQUIRE(one.text_collisions.size() == 1);
    CHECK(one.image_collisions[0].train_index == 7);
    CHECK(one.image_collisions[0].eval_index == 3);
    CHECK(one.to_json().find("image_collisions") != std::string::npos);

    eval[4].meta.text_hash.clear();
    CHECK_THROWS_AS(leakage_audit(train, eval), std::invalid_argument);
}

TEST_CASE("synthetic task: determinism, labels, controls") {
    SyntheticTaskConfig cfg;
    Rng a(7), b(7);
    const auto da = gen_synthetic_task(a, 200, cfg), db = gen_synthetic_task(b, 200, cfg);
    CHECK(da == db);

    const SyntheticWorld world(cfg);
    CHECK(world.vocab_size_needed() <= 64);
    std::size_t controls = 0;
    std::set<std::string> questions;
    for (const auto& ex : da) {
        const std::size_t label = world.label_from_targets(ex.segments.latent->targets);
        CHECK(ex.segments.answer == std::vector<TokenId>{world.answer_token(label)});
        CHECK(ex.segments.parser_text.back() == world.attribute_token(label));
        const bool control = ex.meta.base_skill > 0.0;
        controls += control;
        const bool has_hint = std::find(ex.query_tokens.begin(), ex.query_tokens.end(), world.hint_token(label)) !=
                              ex.query_tokens.end();
        CHECK(has_hint == control);
        CHECK(ex.query_image.size() == cfg.query_image_tokens);
        CHECK(ex.segments.latent->targets.size() == cfg.budget);
        questions.insert(ex.meta.question_text);
        for (TokenId t : ex.query_tokens) CHECK(static_cast<std::size_t>(t) < world.vocab_size_needed());
    }
    CHECK(questions.size() == da.size());
    CHECK(controls > 25);
    CHECK(controls < 75);

    Rng c(8);
    for (const auto& ex : gen_synthetic_task(c, 50, cfg, 0.0)) CHECK(ex.meta.base_skill == 0.0);
    SyntheticTaskConfig bad = cfg;
    bad.budget = 5;
    CHECK_THROWS_AS(SyntheticWorld{bad}, std::invalid_argument);
    CHECK_THROWS_AS(gen_synthetic_task(c, 0, cfg), std::invalid_argument);
}

TEST_CASE("run_pipeline split counts match a planted-accuracy oracle") {
    Rng rng(9);
    std::vector<TrainingExample> corpus;
    for (int i = 0; i < 100; ++i) {
        TrainingExample ex = latent_example(rng, 4);
        ex.meta.base_skill = (i % 4 == 0) ? 1.0 : 0.0;
        corpus.push_back(ex);
    }
    PipelineReport rep;
    const auto out = run_pipeline(corpus, PipelineConfig{}, &rep);
    CHECK(rep.input == 100);
    CHECK(rep.text_only == 25);
    CHECK(rep.latent == 75);
    CHECK(out.size() == 100);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool solved = i % 4 == 0;
        CHECK(out[i].accuracy.value() == (solved ? 1.0 : 0.0));
        CHECK((out[i].mode == SupervisionMode::TextOnly) == solved);
        CHECK(out[i].segments.latent.has_value() == !solved);
    }
}

TEST_CASE("training layout: teacher forcing and masks") {
    Rng rng(10);
    const TrainingExample ex = latent_example(rng, 4);
    const SequenceLayout L = layout_training_sequence(ex);
    const auto stream = serialize_response(ex.segments);
    CHECK(L.prompt_length == 1 + ex.query_image.size() + ex.query_tokens.size());
    CHECK(L.inputs.size() == L.prompt_length + stream.size());
    REQUIRE(L.pad_positions.size() == 4);
    for (std::size_t t = 0; t < 4; ++t) {
        const std::size_t pos = L.pad_positions[t];
        CHECK(!L.inputs[pos].is_token());
        CHECK(L.inputs[pos].embedding == ex.segments.latent->targets[t]);
        CHECK(L.latent_target[pos - 1] == static_cast<std::ptrdiff_t>(t));
        CHECK(L.next_token[pos - 1] == -1);
    }
    std::size_t supervised = 0;
    for (std::size_t i = 0; i < L.inputs.size(); ++i) {
        if (L.next_token[i] < 0) continue;
        ++supervised;
        CHECK(L.next_token[i] != vocab::kLatentPad);
        CHECK(i + 1 >= L.prompt_length);
    }
    CHECK(supervised == stream.size() - 4);
    CHECK(L.next_token[L.inputs.size() - 2] == vocab::kAnswerEnd);
    CHECK(L.next_token.back() == -1);

    TrainingExample bad = ex;
    bad.segments.latent->targets.pop_back();
    CHECK_THROWS_AS(layout_training_sequence(bad), std::invalid_argument);
}

TEST_CASE("dataset and vector files round-trip bit-exactly") {
    Rng rng(11);
    auto data = gen_synthetic_task(rng, 30, SyntheticTaskConfig{});
    data = run_pipeline(std::move(data), PipelineConfig{});
    const auto dir = std::filesystem::temp_directory_path();
    write_dataset(dir / "gap_test.gapd", data);
    CHECK(read_dataset(dir / "gap_test.gapd") == data);

    std::vector<Vec> vecs{gaussian_vec(rng, 5, 1.0), gaussian_vec(rng, 5, 1.0)};
    write_vectors(dir / "gap_test.vec", vecs);
    CHECK(read_vectors(dir / "gap_test.vec") == vecs);

    std::filesystem::resize_file(dir / "gap_test.gapd", 40);
    CHECK_THROWS(read_dataset(dir / "gap_test.gapd"));
    std::filesystem::remove(dir / "gap_test.gapd");
    std::filesystem::remove(dir / "gap_test.vec");
    CHECK_THROWS(read_vectors(dir / "gap_test.vec"));
}
