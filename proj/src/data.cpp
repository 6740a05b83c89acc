#include "gap/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "binary_io.hpp"

namespace gap {

using json = nlohmann::json;

namespace vocab {
std::string token_name(TokenId t) {
    static const char* names[] = {"<think>",  "</think>",          "<answer>",         "</answer>",
                                  "<parser>", "</parser>",         "<|latent_start|>", "<|latent_pad|>",
                                  "<|latent_end|>", "<bos>"};
    if (is_special(t)) return names[t];
    return "t" + std::to_string(t);
}
}  // namespace vocab

bool is_perfect_square(std::size_t n) {
    auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    while (r * r > n) --r;
    while ((r + 1) * (r + 1) <= n) ++r;
    return r * r == n;
}

// ---- serialization ------------------------------------------------------------

namespace {

void check_content(std::span<const TokenId> tokens, const char* segment) {
    for (TokenId t : tokens) {
        if (t < 0 || vocab::is_special(t)) {
            throw std::invalid_argument(std::string("serialize_response: special or invalid token in ") + segment);
        }
    }
}

}  // namespace

std::vector<TokenId> serialize_response(const ResponseSegments& s) {
    check_content(s.think_prefix, "think prefix");
    check_content(s.parser_text, "parser text");
    check_content(s.think_suffix, "think suffix");
    check_content(s.answer, "answer");
    if (s.latent) {
        const auto t = s.latent->budget;
        if (t == 0) throw std::invalid_argument("serialize_response: latent span with zero budget");
        if (!is_perfect_square(t)) throw std::invalid_argument("serialize_response: budget must be a perfect square");
        if (!s.latent->targets.empty() && s.latent->targets.size() != t) {
            throw std::invalid_argument("serialize_response: target count does not match budget");
        }
    } else {
        if (!s.parser_text.empty()) throw std::invalid_argument("serialize_response: parser text without latent span");
        if (!s.think_suffix.empty()) {
            throw std::invalid_argument("serialize_response: think suffix without latent span (fold it into the prefix)");
        }
    }

    std::vector<TokenId> out;
    out.push_back(vocab::kThink);
    out.insert(out.end(), s.think_prefix.begin(), s.think_prefix.end());
    if (s.latent) {
        out.push_back(vocab::kLatentStart);
        out.insert(out.end(), s.latent->budget, vocab::kLatentPad);
        out.push_back(vocab::kLatentEnd);
        out.push_back(vocab::kParser);
        out.insert(out.end(), s.parser_text.begin(), s.parser_text.end());
        out.push_back(vocab::kParserEnd);
        out.insert(out.end(), s.think_suffix.begin(), s.think_suffix.end());
    }
    out.push_back(vocab::kThinkEnd);
    out.push_back(vocab::kAnswer);
    out.insert(out.end(), s.answer.begin(), s.answer.end());
    out.push_back(vocab::kAnswerEnd);
    return out;
}

ResponseSegments parse_response(std::span<const TokenId> tokens) {
    std::size_t i = 0;
    const std::size_t n = tokens.size();
    auto expect = [&](TokenId want, const char* code) {
        if (i >= n) throw ParseError(code, i, "expected " + vocab::token_name(want) + " but stream ended");
        if (tokens[i] != want) {
            throw ParseError(code, i, "expected " + vocab::token_name(want) + ", found " + vocab::token_name(tokens[i]));
        }
        ++i;
    };
    auto read_content = [&](std::vector<TokenId>& dst) {
        while (i < n && !vocab::is_special(tokens[i])) {
            if (tokens[i] < 0) throw ParseError("invalid_token", i, "negative token id");
            dst.push_back(tokens[i++]);
        }
    };

    ResponseSegments s;
    expect(vocab::kThink, "missing_think");
    read_content(s.think_prefix);
    if (i < n && tokens[i] == vocab::kLatentStart) {
        const std::size_t start = i++;
        LatentSpan span;
        while (i < n && tokens[i] == vocab::kLatentPad) {
            ++span.budget;
            ++i;
        }
        if (i >= n) throw ParseError("unterminated_span", start, "<|latent_start|> without <|latent_end|>");
        if (tokens[i] == vocab::kLatentStart) throw ParseError("nested_span", i, "nested <|latent_start|>");
        if (tokens[i] != vocab::kLatentEnd) {
            throw ParseError("unterminated_span", i,
                             "<|latent_start|> without <|latent_end|>; found " + vocab::token_name(tokens[i]));
        }
        ++i;
        if (span.budget == 0) throw ParseError("empty_span", start, "latent span without pads");
        s.latent = std::move(span);
        expect(vocab::kParser, "missing_parser");
        read_content(s.parser_text);
        expect(vocab::kParserEnd, "missing_parser_end");
        read_content(s.think_suffix);
    }
    if (i < n && tokens[i] == vocab::kLatentPad) throw ParseError("stray_pad", i, "<|latent_pad|> outside a span");
    if (i < n && tokens[i] == vocab::kLatentStart) throw ParseError("nested_span", i, "second latent span");
    expect(vocab::kThinkEnd, "missing_think_end");
    expect(vocab::kAnswer, "missing_answer");
    read_content(s.answer);
    if (i >= n) throw ParseError("missing_answer_end", i, "missing </answer>");
    expect(vocab::kAnswerEnd, "missing_answer_end");
    if (i != n) throw ParseError("trailing_tokens", i, "tokens after </answer>");
    return s;
}

// ---- difficulty-aware supervision ------------------------------------------------------

std::string to_string(SupervisionMode m) { return m == SupervisionMode::Latent ? "latent" : "text-only"; }

SupervisionMode supervision_mode_from_string(const std::string& s) {
    if (s == "latent") return SupervisionMode::Latent;
    if (s == "text-only") return SupervisionMode::TextOnly;
    throw std::invalid_argument("unknown supervision mode: " + s);
}

Accuracy estimate_accuracy(const AnswerSampler& sampler, std::uint32_t n) {
    if (n == 0) throw std::invalid_argument("estimate_accuracy: N must be >= 1");
    Accuracy acc{0, n};
    for (std::uint32_t a = 0; a < n; ++a) {
        bool ok = false;
        try {
            ok = sampler(a);
        } catch (const std::exception& e) {
            throw SamplerFailure(a, e.what());
        }
        if (ok) ++acc.correct;
    }
    return acc;
}

SupervisionMode assign_supervision(double accuracy, double tau) {
    return accuracy > tau ? SupervisionMode::TextOnly : SupervisionMode::Latent;
}

SupervisionMode assign_supervision(const Accuracy& accuracy, double tau) {
    // correct / total > tau, compared without forming the quotient.
    const double lhs = static_cast<double>(accuracy.correct);
    const double rhs = tau * static_cast<double>(accuracy.total);
    return lhs > rhs ? SupervisionMode::TextOnly : SupervisionMode::Latent;
}

StripResult strip_latent(const TrainingExample& example) {
    StripResult r{example, !example.segments.latent.has_value()};
    auto& s = r.example.segments;
    s.think_prefix.insert(s.think_prefix.end(), s.think_suffix.begin(), s.think_suffix.end());
    s.think_suffix.clear();
    s.parser_text.clear();
    s.latent.reset();
    r.example.mode = SupervisionMode::TextOnly;
    return r;
}

std::string to_string(FilterOutcome o) {
    switch (o) {
        case FilterOutcome::Keep: return "keep";
        case FilterOutcome::RouteTextOnly: return "route-text-only";
        case FilterOutcome::RejectDegenerateEmbedding: return "reject-degenerate-embedding";
        case FilterOutcome::RejectParserLength: return "reject-parser-length";
    }
    return "unknown";
}

FilterOutcome quality_filter(const TrainingExample& ex, const FilterConfig& cfg) {
    const auto& seg = ex.segments;
    if (!seg.latent) return FilterOutcome::Keep;
    if (ex.accuracy.total > 0 && assign_supervision(ex.accuracy, cfg.tau) == SupervisionMode::TextOnly) {
        return FilterOutcome::RouteTextOnly;
    }
    for (const auto& t : seg.latent->targets) {
        bool finite = std::all_of(t.begin(), t.end(), [](double x) { return std::isfinite(x); });
        if (!finite || !(l2_norm(t) >= cfg.min_target_norm)) return FilterOutcome::RejectDegenerateEmbedding;
    }
    if (seg.parser_text.size() < cfg.min_parser_len || seg.parser_text.size() > cfg.max_parser_len) {
        return FilterOutcome::RejectParserLength;
    }
    return FilterOutcome::Keep;
}

// ---- hashing and leakage audit -----------------------------------------------------------

std::string normalize_question(const std::string& text) {
    std::string out;
    bool pending_space = false;
    for (unsigned char ch : text) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (std::ispunct(ch)) continue;
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    return out;
}

std::string fnv1a_hex(std::span<const unsigned char> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void compute_hashes(TrainingExample& ex) {
    if (!ex.query_image.empty()) {
        std::vector<unsigned char> bytes;
        for (const auto& v : ex.query_image) {
            for (double x : v) {
                const auto u = std::bit_cast<std::uint64_t>(x);
                for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<unsigned char>((u >> (8 * k)) & 0xFF));
            }
        }
        ex.meta.image_hash = fnv1a_hex(bytes);
    }
    const std::string norm = normalize_question(ex.meta.question_text);
    ex.meta.text_hash =
        fnv1a_hex(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(norm.data()), norm.size()));
}

std::string AuditReport::to_json() const {
    auto dump = [](const std::vector<Collision>& cs) {
        json arr = json::array();
        for (const auto& c : cs) {
            arr.push_back({{"hash", c.hash},
                           {"train_index", c.train_index},
                           {"eval_index", c.eval_index},
                           {"train_id", c.train_id},
                           {"eval_id", c.eval_id}});
        }
        return arr;
    };
    json j{{"image_collisions", dump(image_collisions)}, {"text_collisions", dump(text_collisions)}};
    return j.dump(2);
}

AuditReport leakage_audit(std::span<const TrainingExample> train, std::span<const TrainingExample> eval) {
    auto check = [](const TrainingExample& ex, const char* split, std::size_t i) {
        if (ex.meta.image_hash.empty() || ex.meta.text_hash.empty()) {
            throw std::invalid_argument(std::string("leakage_audit: missing hash fields in ") + split + " example " +
                                        std::to_string(i));
        }
    };
    std::unordered_map<std::string, std::vector<std::size_t>> by_image, by_text;
    for (std::size_t i = 0; i < train.size(); ++i) {
        check(train[i], "train", i);
        by_image[train[i].meta.image_hash].push_back(i);
        by_text[train[i].meta.text_hash].push_back(i);
    }
    AuditReport r;
    for (std::size_t e = 0; e < eval.size(); ++e) {
        check(eval[e], "eval", e);
        auto emit = [&](const auto& index, const std::string& hash, std::vector<Collision>& out) {
            auto it = index.find(hash);
            if (it == index.end()) return;
            for (std::size_t t : it->second) {
                out.push_back({hash, t, e, train[t].meta.source_id, eval[e].meta.source_id});
            }
        };
        emit(by_image, eval[e].meta.image_hash, r.image_collisions);
        emit(by_text, eval[e].meta.text_hash, r.text_collisions);
    }
    return r;
}

// ---- synthetic task -----------------------------------------------------------------------

namespace {

Mat random_orthonormal(std::size_t d, std::size_t r, Rng& rng) {
    Mat q(d, r);
    for (std::size_t j = 0; j < r; ++j) {
        for (;;) {
            Vec v(d);
            for (auto& x : v) x = rng.normal();
            for (std::size_t p = 0; p < j; ++p) {
                double s = 0.0;
                for (std::size_t i = 0; i < d; ++i) s += v[i] * q(i, p);
                for (std::size_t i = 0; i < d; ++i) v[i] -= s * q(i, p);
            }
            const double n = l2_norm(v);
            if (n < 1e-6) continue;
            for (std::size_t i = 0; i < d; ++i) q(i, j) = v[i] / n;
            break;
        }
    }
    return q;
}

Vec random_direction(std::size_t d, double norm, Rng& rng) {
    Vec v(d);
    for (auto& x : v) x = rng.normal();
    const double n = l2_norm(v);
    for (auto& x : v) x *= norm / n;
    return v;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

constexpr std::size_t kQuestionWords = 16;

}  // namespace

SyntheticWorld::SyntheticWorld(const SyntheticTaskConfig& c) : config_(c) {
    if (c.n_classes < 2) throw std::invalid_argument("synthetic task: need at least 2 classes");
    if (c.target_rank < c.n_classes + 1 || c.target_rank > c.d_model) {
        throw std::invalid_argument("synthetic task: target_rank must be in (n_classes, d_model]");
    }
    if (c.budget == 0 || !is_perfect_square(c.budget)) {
        throw std::invalid_argument("synthetic task: budget must be a positive perfect square");
    }
    Rng rng(c.world_seed);
    target_basis_ = random_orthonormal(c.d_model, c.target_rank, rng);
    query_basis_ = random_orthonormal(c.d_model, c.target_rank, rng);
    target_center_ = random_direction(c.d_model, c.class_scale, rng);
    query_center_ = random_direction(c.d_model, c.class_scale, rng);
    for (std::size_t k = 0; k < c.n_classes; ++k) query_codes_.push_back(random_direction(c.target_rank, c.class_scale, rng));
}

std::size_t SyntheticWorld::vocab_size_needed() const {
    return static_cast<std::size_t>(vocab::kFirstContent) + kQuestionWords + 3 * config_.n_classes + 4;
}

Vec SyntheticWorld::position_code(std::size_t slot) const {
    // Position codes live in the coordinates not used by class codes.
    Rng rng(mix_seed(config_.world_seed, 0x1000 + slot));
    Vec code(config_.target_rank, 0.0);
    const std::size_t free = config_.target_rank - config_.n_classes;
    const double s = config_.position_scale / std::sqrt(static_cast<double>(free));
    for (std::size_t i = config_.n_classes; i < config_.target_rank; ++i) code[i] = s * rng.normal();
    return code;
}

Vec SyntheticWorld::target(std::size_t cls, std::size_t slot, Rng& rng) const {
    Vec coef = position_code(slot);
    coef[cls] += config_.class_scale;
    for (auto& x : coef) x += config_.within_scale * rng.normal();
    Vec v = matvec(target_basis_, coef);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += target_center_[i] + config_.isotropic_noise * rng.normal();
    return v;
}

Vec SyntheticWorld::query_vector(std::size_t cls, std::size_t slot, Rng& rng) const {
    Rng pos_rng(mix_seed(config_.world_seed, 0x2000 + slot));
    Vec coef = query_codes_.at(cls);
    for (auto& x : coef) x += config_.position_scale / std::sqrt(static_cast<double>(coef.size())) * pos_rng.normal();
    for (auto& x : coef) x += config_.within_scale * rng.normal();
    Vec v = matvec(query_basis_, coef);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += query_center_[i] + config_.isotropic_noise * rng.normal();
    return v;
}

std::size_t SyntheticWorld::label_from_targets(std::span<const Vec> targets) const {
    if (targets.empty()) throw std::invalid_argument("label_from_targets: no targets");
    Vec mean(config_.d_model, 0.0);
    for (const auto& t : targets) {
        if (t.size() != config_.d_model) throw std::invalid_argument("label_from_targets: dimension mismatch");
        for (std::size_t i = 0; i < t.size(); ++i) mean[i] += (t[i] - target_center_[i]) / static_cast<double>(targets.size());
    }
    const Vec coef = matvec_t(target_basis_, mean);
    std::size_t best = 0;
    for (std::size_t k = 1; k < config_.n_classes; ++k)
        if (coef[k] > coef[best]) best = k;
    return best;
}

TokenId SyntheticWorld::question_token(std::size_t i) const {
    return vocab::kFirstContent + static_cast<TokenId>(i % kQuestionWords);
}
TokenId SyntheticWorld::attribute_token(std::size_t cls) const {
    return vocab::kFirstContent + static_cast<TokenId>(kQuestionWords + cls);
}
TokenId SyntheticWorld::answer_token(std::size_t cls) const {
    return vocab::kFirstContent + static_cast<TokenId>(kQuestionWords + config_.n_classes + cls);
}
TokenId SyntheticWorld::hint_token(std::size_t cls) const {
    return vocab::kFirstContent + static_cast<TokenId>(kQuestionWords + 2 * config_.n_classes + cls);
}
TokenId SyntheticWorld::look_token() const {
    return vocab::kFirstContent + static_cast<TokenId>(kQuestionWords + 3 * config_.n_classes);
}
TokenId SyntheticWorld::so_token() const { return look_token() + 1; }
TokenId SyntheticWorld::region_token() const { return look_token() + 2; }
TokenId SyntheticWorld::shows_token() const { return look_token() + 3; }

std::vector<TrainingExample> gen_synthetic_task(Rng& rng, std::size_t count, const SyntheticTaskConfig& config,
                                                double control_fraction) {
    if (count == 0) throw std::invalid_argument("gen_synthetic_task: count must be >= 1");
    const SyntheticWorld world(config);
    std::vector<TrainingExample> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const std::uint64_t uid = rng.next_u64();
        const std::size_t cls = rng.below(config.n_classes);
        const bool control = rng.uniform() < control_fraction;
        // Controls see an unrelated query image; their answer comes from a hint token.
        const std::size_t image_cls = control ? rng.below(config.n_classes) : cls;

        TrainingExample ex;
        for (std::size_t i = 0; i < config.query_image_tokens; ++i) ex.query_image.push_back(world.query_vector(image_cls, i, rng));
        LatentSpan span;
        span.budget = config.budget;
        for (std::size_t t = 0; t < config.budget; ++t) span.targets.push_back(world.target(cls, t, rng));
        const std::size_t label = world.label_from_targets(span.targets);

        for (std::size_t q = 0; q < config.question_tokens; ++q) ex.query_tokens.push_back(world.question_token(rng.below(kQuestionWords)));
        if (control) ex.query_tokens.push_back(world.hint_token(label));

        std::string words;
        for (TokenId t : ex.query_tokens) words += " " + vocab::token_name(t);
        ex.meta.question_text = "Scene " + hex64(uid) + ": which attribute is shown?" + words;
        ex.meta.source_id = "syn-" + hex64(uid);
        ex.meta.base_skill = control ? 0.9 : 0.0;

        auto& seg = ex.segments;
        seg.think_prefix = {world.look_token()};
        seg.latent = std::move(span);
        seg.parser_text = {world.region_token(), world.shows_token(), world.attribute_token(label)};
        seg.think_suffix = {world.so_token()};
        seg.answer = {world.answer_token(label)};
        ex.mode = SupervisionMode::Latent;
        compute_hashes(ex);
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<TrainingExample> gen_synthetic_task(Rng& rng, std::size_t count, const SyntheticTaskConfig& config) {
    return gen_synthetic_task(rng, count, config, config.control_fraction);
}

AnswerSampler simulated_sampler(const TrainingExample& example, std::uint64_t seed, std::size_t index) {
    const double skill = example.meta.base_skill;
    return [skill, seed, index](std::uint32_t attempt) {
        Rng r(mix_seed(mix_seed(seed, index), attempt));
        return r.uniform() < skill;
    };
}

std::vector<TrainingExample> run_pipeline(std::vector<TrainingExample> examples, const PipelineConfig& config,
                                          PipelineReport* report) {
    PipelineReport rep;
    rep.input = examples.size();
    FilterConfig filter = config.filter;
    filter.tau = config.tau;
    std::vector<TrainingExample> kept;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        TrainingExample ex = std::move(examples[i]);
        ex.accuracy = estimate_accuracy(simulated_sampler(ex, config.seed, i), config.n_samples);
        ex.mode = assign_supervision(ex.accuracy, config.tau);
        switch (quality_filter(ex, filter)) {
            case FilterOutcome::RouteTextOnly:
                ex = strip_latent(ex).example;
                break;
            case FilterOutcome::RejectDegenerateEmbedding:
                ++rep.rejected_degenerate;
                continue;
            case FilterOutcome::RejectParserLength:
                ++rep.rejected_parser;
                continue;
            case FilterOutcome::Keep:
                if (!ex.segments.latent) ex.mode = SupervisionMode::TextOnly;
                break;
        }
        if (ex.mode == SupervisionMode::Latent) ++rep.latent; else ++rep.text_only;
        kept.push_back(std::move(ex));
    }
    if (report) *report = rep;
    return kept;
}

// ---- sequence layout --------------------------------------------------------------------------

std::vector<InputSlot> build_prompt(const TrainingExample& ex, bool include_think_prefix) {
    std::vector<InputSlot> slots;
    slots.push_back(InputSlot::of_token(vocab::kBos));
    for (const auto& v : ex.query_image) slots.push_back(InputSlot::of_embedding(v));
    for (TokenId t : ex.query_tokens) slots.push_back(InputSlot::of_token(t));
    if (include_think_prefix) {
        slots.push_back(InputSlot::of_token(vocab::kThink));
        for (TokenId t : ex.segments.think_prefix) slots.push_back(InputSlot::of_token(t));
    }
    return slots;
}

SequenceLayout layout_training_sequence(const TrainingExample& ex) {
    SequenceLayout L;
    L.inputs = build_prompt(ex, false);
    L.prompt_length = L.inputs.size();
    const auto stream = serialize_response(ex.segments);
    const std::vector<Vec>* targets = nullptr;
    if (ex.segments.latent) {
        targets = &ex.segments.latent->targets;
        if (targets->size() != ex.segments.latent->budget) {
            throw std::invalid_argument("training sequence: latent targets do not match the budget");
        }
    }
    std::size_t pad = 0;
    for (TokenId t : stream) {
        if (t == vocab::kLatentPad) {
            L.pad_positions.push_back(L.inputs.size());
            L.inputs.push_back(InputSlot::of_embedding((*targets)[pad++]));
        } else {
            L.inputs.push_back(InputSlot::of_token(t));
        }
    }
    const std::size_t n = L.inputs.size();
    L.next_token.assign(n, -1);
    L.latent_target.assign(n, -1);
    pad = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const InputSlot& next = L.inputs[i + 1];
        if (i + 1 < L.prompt_length) continue;
        if (next.is_token()) {
            L.next_token[i] = next.token;
        } else {
            L.latent_target[i] = static_cast<std::ptrdiff_t>(pad++);
        }
    }
    return L;
}

// ---- persistence -------------------------------------------------------------------------------

namespace {

json example_header(const TrainingExample& ex) {
    const auto& s = ex.segments;
    json j;
    j["source_id"] = ex.meta.source_id;
    j["question_text"] = ex.meta.question_text;
    j["image_hash"] = ex.meta.image_hash;
    j["text_hash"] = ex.meta.text_hash;
    j["base_skill"] = ex.meta.base_skill;
    j["query_tokens"] = ex.query_tokens;
    j["think_prefix"] = s.think_prefix;
    j["parser_text"] = s.parser_text;
    j["think_suffix"] = s.think_suffix;
    j["answer"] = s.answer;
    j["budget"] = s.latent ? json(s.latent->budget) : json(nullptr);
    j["n_targets"] = s.latent ? s.latent->targets.size() : 0;
    j["n_query_image"] = ex.query_image.size();
    j["dim"] = ex.query_image.empty() ? (s.latent && !s.latent->targets.empty() ? s.latent->targets[0].size() : 0)
                                      : ex.query_image[0].size();
    j["accuracy"] = {{"correct", ex.accuracy.correct}, {"total", ex.accuracy.total}};
    j["mode"] = to_string(ex.mode);
    return j;
}

}  // namespace

// Layout: magic "GAPDATA", u32 version, u32 reserved, u64 count; per record:
// u64 header length, JSON header bytes, u64 payload length (doubles), LE
// doubles holding the query image vectors followed by the latent targets.
void write_dataset(const std::filesystem::path& path, std::span<const TrainingExample> examples) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open dataset for writing: " + path.string());
    io::write_magic(os, "GAPDATA");
    io::write_u32(os, kDatasetVersion);
    io::write_u32(os, 0);
    io::write_u64(os, examples.size());
    for (const auto& ex : examples) {
        const std::string header = example_header(ex).dump();
        io::write_u64(os, header.size());
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        std::size_t payload = 0;
        for (const auto& v : ex.query_image) payload += v.size();
        if (ex.segments.latent)
            for (const auto& v : ex.segments.latent->targets) payload += v.size();
        io::write_u64(os, payload);
        for (const auto& v : ex.query_image) io::write_f64s(os, v);
        if (ex.segments.latent)
            for (const auto& v : ex.segments.latent->targets) io::write_f64s(os, v);
    }
    if (!os) throw std::runtime_error("failed writing dataset: " + path.string());
}

std::vector<TrainingExample> read_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path.string());
    io::expect_magic(is, "GAPDATA", "dataset");
    if (io::read_u32(is) != kDatasetVersion) throw std::runtime_error("dataset: unsupported version");
    io::read_u32(is);
    const auto count = io::read_u64(is);
    std::vector<TrainingExample> out;
    for (std::uint64_t r = 0; r < count; ++r) {
        const auto hlen = io::read_u64(is);
        if (hlen > (1u << 24)) throw std::runtime_error("dataset: oversized record header");
        std::string header(hlen, '\0');
        io::read_exact(is, header.data(), hlen);
        const json j = json::parse(header);
        TrainingExample ex;
        ex.meta.source_id = j.at("source_id").get<std::string>();
        ex.meta.question_text = j.at("question_text").get<std::string>();
        ex.meta.image_hash = j.at("image_hash").get<std::string>();
        ex.meta.text_hash = j.at("text_hash").get<std::string>();
        ex.meta.base_skill = j.at("base_skill").get<double>();
        ex.query_tokens = j.at("query_tokens").get<std::vector<TokenId>>();
        auto& s = ex.segments;
        s.think_prefix = j.at("think_prefix").get<std::vector<TokenId>>();
        s.parser_text = j.at("parser_text").get<std::vector<TokenId>>();
        s.think_suffix = j.at("think_suffix").get<std::vector<TokenId>>();
        s.answer = j.at("answer").get<std::vector<TokenId>>();
        ex.accuracy.correct = j.at("accuracy").at("correct").get<std::uint32_t>();
        ex.accuracy.total = j.at("accuracy").at("total").get<std::uint32_t>();
        ex.mode = supervision_mode_from_string(j.at("mode").get<std::string>());
        const auto n_img = j.at("n_query_image").get<std::size_t>();
        const auto n_tgt = j.at("n_targets").get<std::size_t>();
        const auto dim = j.at("dim").get<std::size_t>();
        const auto payload = io::read_u64(is);
        if (payload != (n_img + n_tgt) * dim) throw std::runtime_error("dataset: payload size mismatch");
        for (std::size_t i = 0; i < n_img; ++i) {
            Vec v(dim);
            io::read_f64s(is, v);
            ex.query_image.push_back(std::move(v));
        }
        if (!j.at("budget").is_null()) {
            LatentSpan span;
            span.budget = j.at("budget").get<std::size_t>();
            for (std::size_t i = 0; i < n_tgt; ++i) {
                Vec v(dim);
                io::read_f64s(is, v);
                span.targets.push_back(std::move(v));
            }
            s.latent = std::move(span);
        }
        out.push_back(std::move(ex));
    }
    return out;
}

// Layout: magic "GAPVECS", u32 version, u32 reserved, u64 n, u64 d, n*d LE doubles.
void write_vectors(const std::filesystem::path& path, std::span<const Vec> vectors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open vector file for writing: " + path.string());
    const std::size_t d = vectors.empty() ? 0 : vectors.front().size();
    io::write_magic(os, "GAPVECS");
    io::write_u32(os, 1);
    io::write_u32(os, 0);
    io::write_u64(os, vectors.size());
    io::write_u64(os, d);
    for (const auto& v : vectors) {
        if (v.size() != d) throw std::invalid_argument("write_vectors: inconsistent dimensions");
        io::write_f64s(os, v);
    }
}

std::vector<Vec> read_vectors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open vector file: " + path.string());
    io::expect_magic(is, "GAPVECS", "vector file");
    if (io::read_u32(is) != 1) throw std::runtime_error("vector file: unsupported version");
    io::read_u32(is);
    const auto n = io::read_u64(is);
    const auto d = io::read_u64(is);
    if (d > (1u << 20) || n > (1u << 28)) throw std::runtime_error("vector file: implausible header");
    std::vector<Vec> out(n, Vec(d));
    for (auto& v : out) io::read_f64s(is, v);
    return out;
}

}  // namespace gap
