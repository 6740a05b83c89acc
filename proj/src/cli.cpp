#include "gap/cli.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gap/data.hpp"
#include "gap/inference.hpp"
#include "gap/model.hpp"
#include "gap/norm_diagnostics.hpp"
#include "gap/parallel.hpp"
#include "gap/pca.hpp"
#include "gap/training.hpp"

namespace gap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// A resolved setting failed validation; reported with exit status 2.
class ConfigInvalid : public std::runtime_error {
public:
    ConfigInvalid(const std::string& key, const std::string& msg)
        : std::runtime_error("invalid config key '" + key + "': " + msg) {}
};

struct Common {
    std::string config;
    std::uint64_t seed = 12345;
    std::size_t workers = 1;
    std::string out;
};

void add_common(CLI::App& app, Common& c) {
    app.set_config("--config", "", "flat key = value file; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.add_option("--seed", c.seed, "master seed")->capture_default_str();
    app.add_option("--workers", c.workers, "worker threads (results do not depend on it)")->capture_default_str();
    app.add_option("--out", c.out, "run directory")->required();
}

void require_file(const std::string& key, const std::string& path) {
    if (path.empty()) throw ConfigInvalid(key, "path is required");
    if (!fs::is_regular_file(path)) throw ConfigInvalid(key, "no such file: " + path);
}

void require(bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw ConfigInvalid(key, msg);
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

void write_text(const fs::path& path, const std::string& text) {
    auto os = open_out(path);
    os << text;
}

/// Creates the run directory and records the resolved configuration.
fs::path prepare_run_dir(const CLI::App& app, const Common& c) {
    require(c.workers >= 1, "workers", "must be >= 1");
    const fs::path dir(c.out);
    fs::create_directories(dir);
    write_text(dir / "config.txt", app.config_to_str(true, false));
    return dir;
}

std::vector<TrainingExample> head(std::vector<TrainingExample> v, std::size_t max_examples) {
    if (max_examples > 0 && v.size() > max_examples) v.resize(max_examples);
    return v;
}

// ---- commands ------------------------------------------------------------------------

using Command = std::function<int(CLI::App&, int, const char* const*, std::ostream&)>;

int cmd_pca_fit(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string samples;
    double variance_target = 0.95;
    std::size_t rank = 0;
    add_common(app, c);
    app.add_option("--samples", samples, "vector file of auxiliary embeddings");
    app.add_option("--variance-target,--variance_target", variance_target)->capture_default_str();
    app.add_option("--rank", rank, "fixed rank; 0 selects k from the variance target")->capture_default_str();
    app.parse(argc, argv);

    require_file("samples", samples);
    require(variance_target > 0.0 && variance_target <= 1.0, "variance_target", "must be in (0, 1]");
    const auto dir = prepare_run_dir(app, c);

    const auto data = read_vectors(samples);
    const PcaBasis basis = rank > 0 ? fit_pca_rank(data, rank) : fit_pca(data, variance_target);
    basis.save(dir / "basis.bin");
    json rep = {{"d", basis.dim()},
                {"k", basis.rank()},
                {"variance_target", variance_target},
                {"relmse", rel_mse(basis, data)},
                {"spectral_relmse", spectral_rel_mse(basis)},
                {"n_samples", data.size()}};
    write_text(dir / "pca_report.json", rep.dump(2) + "\n");
    out << rep.dump() << '\n';
    return kOk;
}

int cmd_build_data(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::size_t n_train = 2000, n_eval = 500;
    SyntheticTaskConfig task;
    PipelineConfig pipe;
    add_common(app, c);
    app.add_option("--n-train,--n_train", n_train)->capture_default_str();
    app.add_option("--n-eval,--n_eval", n_eval)->capture_default_str();
    app.add_option("--budget", task.budget)->capture_default_str();
    app.add_option("--n-classes,--n_classes", task.n_classes)->capture_default_str();
    app.add_option("--d-model,--d_model", task.d_model)->capture_default_str();
    app.add_option("--control-fraction,--control_fraction", task.control_fraction)->capture_default_str();
    app.add_option("--world-seed,--world_seed", task.world_seed)->capture_default_str();
    app.add_option("--tau", pipe.tau)->capture_default_str();
    app.add_option("--n-samples,--n_samples", pipe.n_samples)->capture_default_str();
    app.parse(argc, argv);

    require(n_train >= 1, "n_train", "must be >= 1");
    require(n_eval >= 1, "n_eval", "must be >= 1");
    require(task.budget >= 1 && is_perfect_square(task.budget), "budget", "budget must be a perfect square");
    require(pipe.tau >= 0.0 && pipe.tau <= 1.0, "tau", "must be in [0, 1]");
    require(pipe.n_samples >= 1, "n_samples", "must be >= 1");
    require(task.control_fraction >= 0.0 && task.control_fraction <= 1.0, "control_fraction", "must be in [0, 1]");
    const auto dir = prepare_run_dir(app, c);

    Rng rng(c.seed);
    auto train_raw = gen_synthetic_task(rng, n_train, task);
    auto eval_set = gen_synthetic_task(rng, n_eval, task, 0.0);
    pipe.seed = mix_seed(c.seed, 1);
    PipelineReport rep;
    const auto train_set = run_pipeline(std::move(train_raw), pipe, &rep);

    std::vector<Vec> aux;
    for (const auto& ex : train_set)
        if (ex.segments.latent)
            for (const auto& v : ex.segments.latent->targets) aux.push_back(v);

    write_dataset(dir / "train.gapd", train_set);
    write_dataset(dir / "eval.gapd", eval_set);
    if (!aux.empty()) write_vectors(dir / "aux_targets.vec", aux);
    json j = {{"input", rep.input},
              {"latent", rep.latent},
              {"text_only", rep.text_only},
              {"rejected_degenerate", rep.rejected_degenerate},
              {"rejected_parser", rep.rejected_parser},
              {"eval", eval_set.size()},
              {"aux_vectors", aux.size()}};
    write_text(dir / "pipeline.json", j.dump(2) + "\n");
    out << j.dump() << '\n';
    return kOk;
}

struct ModelFlags {
    ModelConfig model;
    double head_perturbation = 1e-2;

    void add(CLI::App& app) {
        app.add_option("--d-model,--d_model", model.d_model)->capture_default_str();
        app.add_option("--n-layers,--n_layers", model.n_layers)->capture_default_str();
        app.add_option("--n-heads,--n_heads", model.n_heads)->capture_default_str();
        app.add_option("--d-ff,--d_ff", model.d_ff)->capture_default_str();
        app.add_option("--vocab-size,--vocab_size", model.vocab_size)->capture_default_str();
        app.add_option("--max-seq-len,--max_seq_len", model.max_seq_len)->capture_default_str();
        app.add_option("--adapter-width,--adapter_width", model.adapter_width, "0 means k")->capture_default_str();
        app.add_option("--head-perturbation,--head_perturbation", head_perturbation)->capture_default_str();
    }

    /// Fresh parameters with the latent head aligned to the basis.
    ModelParams init(const PcaBasis& basis, std::uint64_t seed) {
        model.latent_k = basis.rank();
        model.init_seed = seed;
        require(model.d_model == basis.dim(), "d_model", "does not match the basis dimension");
        try {
            model.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigInvalid("model", e.what());
        }
        ModelParams p = init_params(model);
        Rng rng(mix_seed(seed, 0x4ead));
        init_latent_head(p, model, basis, rng, head_perturbation);
        return p;
    }
};

int cmd_train(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string dataset, basis_path;
    TrainConfig tc;
    ModelFlags mf;
    add_common(app, c);
    app.add_option("--dataset", dataset);
    app.add_option("--basis", basis_path);
    app.add_option("--epochs", tc.epochs)->capture_default_str();
    app.add_option("--batch-size,--batch_size", tc.batch_size)->capture_default_str();
    app.add_option("--lambda-latent,--lambda_latent", tc.lambda_latent)->capture_default_str();
    app.add_option("--mix", tc.mix, "scheduled-sampling probability")->capture_default_str();
    app.add_option("--lr", tc.optim.lr)->capture_default_str();
    app.add_option("--latent-lr,--latent_lr", tc.optim.latent_lr)->capture_default_str();
    app.add_option("--weight-decay,--weight_decay", tc.optim.weight_decay)->capture_default_str();
    app.add_option("--warmup-ratio,--warmup_ratio", tc.optim.warmup_ratio)->capture_default_str();
    mf.add(app);
    app.parse(argc, argv);

    require_file("dataset", dataset);
    require_file("basis", basis_path);
    require(tc.epochs >= 1, "epochs", "must be >= 1");
    require(tc.batch_size >= 1, "batch_size", "must be >= 1");
    require(tc.lambda_latent >= 0.0, "lambda_latent", "must be >= 0");
    require(tc.mix >= 0.0 && tc.mix <= 1.0, "mix", "must be in [0, 1]");
    require(tc.optim.lr > 0.0, "lr", "must be positive");
    require(tc.optim.latent_lr > 0.0, "latent_lr", "must be positive");
    require(tc.optim.warmup_ratio >= 0.0 && tc.optim.warmup_ratio <= 1.0, "warmup_ratio", "must be in [0, 1]");
    const auto dir = prepare_run_dir(app, c);

    const auto data = read_dataset(dataset);
    const PcaBasis basis = PcaBasis::load(basis_path);
    ModelParams params = mf.init(basis, c.seed);
    tc.seed = c.seed;
    tc.workers = c.workers;
    const auto log = train(params, mf.model, basis, data, tc);

    save_checkpoint(dir / "checkpoint.bin", mf.model, params);
    auto os = open_out(dir / "train_log.csv");
    write_train_log(os, log);
    json j = {{"steps", log.size()},
              {"final_lm_loss", log.back().lm_loss},
              {"final_latent_loss", log.back().latent_loss},
              {"final_total", log.back().total}};
    out << j.dump() << '\n';
    return kOk;
}

int cmd_profile_norms(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string checkpoint, dataset;
    std::size_t max_examples = 256;
    add_common(app, c);
    app.add_option("--checkpoint", checkpoint);
    app.add_option("--dataset", dataset);
    app.add_option("--max-examples,--max_examples", max_examples, "0 means all")->capture_default_str();
    app.parse(argc, argv);

    require_file("checkpoint", checkpoint);
    require_file("dataset", dataset);
    const auto dir = prepare_run_dir(app, c);

    const auto ck = load_checkpoint(checkpoint);
    const auto data = head(read_dataset(dataset), max_examples);
    std::vector<LabeledSequence> batch;
    std::vector<std::vector<InputSlot>> slots;
    for (const auto& ex : data) {
        LabeledSequence s;
        s.slots = layout_training_sequence(ex).inputs;
        for (const auto& slot : s.slots) s.classes.push_back(slot.is_token() ? TokenClass::Text : TokenClass::Vision);
        slots.push_back(s.slots);
        batch.push_back(std::move(s));
    }
    const NormProfile profile = profile_norms(ck.params, ck.config, batch);
    auto os = open_out(dir / "norms.csv");
    profile.write_csv(os);

    const AccumulationReport acc = residual_accumulation(ck.params, ck.config, slots);
    json j = {{"positions", acc.positions},
              {"mean_initial_sq", acc.mean_initial_sq},
              {"mean_update_sq", acc.mean_update_sq},
              {"mean_final_sq", acc.mean_final_sq},
              {"predicted_final_sq", acc.predicted_final_sq},
              {"max_step_identity_error", acc.max_step_identity_error}};
    write_text(dir / "accumulation.json", j.dump(2) + "\n");
    out << j.dump() << '\n';
    return kOk;
}

struct DecodeFlags {
    std::string mode = "clean";
    double noise_scale = 1.0;
    bool norm_match = true;
    bool ema = false;
    double ema_decay = 0.9;
    bool force_span = true;
    std::size_t max_tokens = 64;

    void add(CLI::App& app) {
        app.add_option("--mode", mode, "clean | zero_latent | noise")->capture_default_str();
        app.add_option("--noise-scale,--noise_scale", noise_scale)->capture_default_str();
        app.add_option("--norm-match,--norm_match", norm_match)->capture_default_str();
        app.add_option("--ema", ema, "EMA norm calibration")->capture_default_str();
        app.add_option("--ema-decay,--ema_decay", ema_decay)->capture_default_str();
        app.add_option("--force-span,--force_span", force_span)->capture_default_str();
        app.add_option("--max-tokens,--max_tokens", max_tokens)->capture_default_str();
    }

    DecodeOptions resolve(std::size_t budget) const {
        DecodeOptions o;
        try {
            o.mode = intervention_from_string(mode, noise_scale, norm_match);
        } catch (const std::invalid_argument& e) {
            throw ConfigInvalid("mode", e.what());
        }
        require(ema_decay >= 0.0 && ema_decay <= 1.0, "ema_decay", "must be in [0, 1]");
        require(max_tokens >= 1, "max_tokens", "must be >= 1");
        o.budget = budget;
        o.ema = ema;
        o.ema_decay = ema_decay;
        o.force_span = force_span;
        o.max_tokens = max_tokens;
        return o;
    }
};

int cmd_intervene(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string checkpoint, basis_path, dataset;
    std::size_t budget = 4, max_examples = 0;
    DecodeFlags df;
    add_common(app, c);
    app.add_option("--checkpoint", checkpoint);
    app.add_option("--basis", basis_path);
    app.add_option("--dataset", dataset);
    app.add_option("--budget", budget)->capture_default_str();
    app.add_option("--max-examples,--max_examples", max_examples, "0 means all")->capture_default_str();
    df.add(app);
    app.parse(argc, argv);

    require_file("checkpoint", checkpoint);
    require_file("basis", basis_path);
    require_file("dataset", dataset);
    DecodeOptions opt = df.resolve(budget);
    if (opt.mode.kind != InterventionMode::Kind::ZeroLatent) {
        require(budget >= 1 && is_perfect_square(budget), "budget", "budget must be a perfect square");
    }
    const auto dir = prepare_run_dir(app, c);

    const auto ck = load_checkpoint(checkpoint);
    const PcaBasis basis = PcaBasis::load(basis_path);
    const auto data = head(read_dataset(dataset), max_examples);

    std::vector<Transcript> transcripts(data.size());
    std::vector<char> hit(data.size(), 0);
    parallel_for(data.size(), c.workers, [&](std::size_t i) {
        Rng rng(mix_seed(c.seed, i));
        transcripts[i] = decode(ck.params, ck.config, basis, eval_prompt(data[i]), opt, rng);
        hit[i] = score_answer(transcripts[i], data[i].segments.answer) ? 1 : 0;
    });
    auto os = open_out(dir / "transcripts.jsonl");
    Accuracy acc;
    for (std::size_t i = 0; i < data.size(); ++i) {
        os << json{{"kind", "example"}, {"index", i}, {"correct", hit[i] != 0}}.dump() << '\n';
        write_transcript_jsonl(os, transcripts[i]);
        acc.correct += static_cast<std::uint32_t>(hit[i]);
    }
    acc.total = static_cast<std::uint32_t>(data.size());
    json j = {{"mode", to_string(opt.mode)}, {"ema", opt.ema},        {"budget", budget},
              {"correct", acc.correct},       {"total", acc.total},   {"accuracy", acc.value()}};
    write_text(dir / "accuracy.json", j.dump(2) + "\n");
    out << j.dump() << '\n';
    return kOk;
}

int cmd_sweep(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string checkpoint, basis_path, dataset;
    std::vector<std::size_t> budgets{0, 4, 16, 36};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t max_examples = 0;
    DecodeFlags df;
    add_common(app, c);
    app.add_option("--checkpoint", checkpoint);
    app.add_option("--basis", basis_path);
    app.add_option("--dataset", dataset);
    app.add_option("--budgets", budgets)->delimiter(',')->capture_default_str();
    app.add_option("--seeds", seeds)->delimiter(',')->capture_default_str();
    app.add_option("--max-examples,--max_examples", max_examples, "0 means all")->capture_default_str();
    df.add(app);
    app.parse(argc, argv);

    try {
        validate_budgets(budgets);
    } catch (const std::invalid_argument& e) {
        throw ConfigInvalid("budgets", e.what());
    }
    require(!seeds.empty(), "seeds", "at least one seed is required");
    require_file("checkpoint", checkpoint);
    require_file("basis", basis_path);
    require_file("dataset", dataset);
    const DecodeOptions opt = df.resolve(4);
    const auto dir = prepare_run_dir(app, c);

    const auto ck = load_checkpoint(checkpoint);
    const PcaBasis basis = PcaBasis::load(basis_path);
    const auto data = head(read_dataset(dataset), max_examples);
    const SweepTable table = budget_sweep(ck.params, ck.config, basis, data, budgets, seeds, opt, c.workers);
    auto os = open_out(dir / "sweep.csv");
    write_sweep_csv(os, table);
    auto ss = open_out(dir / "sweep_summary.csv");
    write_sweep_summary_csv(ss, table);
    write_sweep_summary_csv(out, table);
    return kOk;
}

int cmd_audit(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string train_path, eval_path;
    add_common(app, c);
    app.add_option("--train", train_path);
    app.add_option("--eval", eval_path);
    app.parse(argc, argv);

    require_file("train", train_path);
    require_file("eval", eval_path);
    const auto dir = prepare_run_dir(app, c);
    const auto train_set = read_dataset(train_path);
    const auto eval_set = read_dataset(eval_path);
    const AuditReport rep = leakage_audit(train_set, eval_set);
    write_text(dir / "audit.json", rep.to_json() + "\n");
    out << json{{"image_collisions", rep.image_collisions.size()}, {"text_collisions", rep.text_collisions.size()}}.dump()
        << '\n';
    return kOk;
}

int cmd_grad_check(CLI::App& app, int argc, const char* const* argv, std::ostream& out) {
    Common c;
    std::string checkpoint, basis_path, dataset;
    std::size_t n_examples = 3;
    GradCheckOptions gc;
    double tolerance = 1e-4;
    ModelFlags mf;
    add_common(app, c);
    app.add_option("--checkpoint", checkpoint, "omit to check a fresh initialization");
    app.add_option("--basis", basis_path);
    app.add_option("--dataset", dataset);
    app.add_option("--examples", n_examples)->capture_default_str();
    app.add_option("--entries-per-group,--entries_per_group", gc.entries_per_group)->capture_default_str();
    app.add_option("--fd-step,--fd_step", gc.fd_step)->capture_default_str();
    app.add_option("--lambda-latent,--lambda_latent", gc.lambda_latent)->capture_default_str();
    app.add_option("--tolerance", tolerance)->capture_default_str();
    mf.add(app);
    app.parse(argc, argv);

    if (!checkpoint.empty()) require_file("checkpoint", checkpoint);
    require_file("basis", basis_path);
    require_file("dataset", dataset);
    require(n_examples >= 1, "examples", "must be >= 1");
    require(gc.fd_step > 0.0, "fd_step", "must be positive");
    const auto dir = prepare_run_dir(app, c);

    const PcaBasis basis = PcaBasis::load(basis_path);
    ModelConfig cfg;
    ModelParams params;
    if (!checkpoint.empty()) {
        auto ck = load_checkpoint(checkpoint);
        cfg = ck.config;
        params = std::move(ck.params);
    } else {
        params = mf.init(basis, c.seed);
        cfg = mf.model;
    }
    const auto data = head(read_dataset(dataset), n_examples);
    gc.seed = c.seed;
    const GradCheckReport rep = grad_check(params, cfg, basis, data, gc);

    auto os = open_out(dir / "grad_check.csv");
    os << "group,max_rel_error,checked\n";
    char buf[256];
    for (const auto& g : rep.groups) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%zu\n", g.name.c_str(), g.max_rel_error, g.checked);
        os << buf;
    }
    const bool ok = rep.max_rel_error < tolerance;
    out << json{{"max_rel_error", rep.max_rel_error}, {"tolerance", tolerance}, {"pass", ok}}.dump() << '\n';
    return ok ? kOk : kRuntimeFailure;
}

const std::map<std::string, Command>& commands() {
    static const std::map<std::string, Command> table = {
        {"pca-fit", cmd_pca_fit},           {"build-data", cmd_build_data}, {"train", cmd_train},
        {"profile-norms", cmd_profile_norms}, {"intervene", cmd_intervene},   {"sweep", cmd_sweep},
        {"audit", cmd_audit},               {"grad-check", cmd_grad_check},
    };
    return table;
}

void usage(std::ostream& os) {
    os << "usage: gap <command> [options]\ncommands:";
    for (const auto& [name, _] : commands()) os << ' ' << name;
    os << "\nrun 'gap <command> --help' for options\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    if (argc < 2) {
        usage(err);
        return kUsageError;
    }
    const std::string name = argv[1];
    if (name == "--help" || name == "-h") {
        usage(out);
        return kOk;
    }
    const auto it = commands().find(name);
    if (it == commands().end()) {
        err << "unknown command '" << name << "'\n";
        usage(err);
        return kUsageError;
    }

    CLI::App app("gap " + name, "gap " + name);
    try {
        // CLI11 expects argv[0] to be the program name; the command plays that role.
        return it->second(app, argc - 1, argv + 1, out);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const ConfigInvalid& e) {
        err << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << json{{"error", {{"command", name}, {"message", e.what()}}}}.dump() << '\n';
        return kRuntimeFailure;
    }
}

}  // namespace gap::cli
