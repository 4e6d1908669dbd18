// Command-line entry point: generate | train | eval | curve | predict.
//
// Exit codes: 0 success, 2 bad flags or malformed input, 3 I/O failure,
// 4 non-finite training loss (last good checkpoint retained), 5 evaluation
// failed hard. Data paths and summaries go to stdout, diagnostics to stderr.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "nanotfm/checkpoint.hpp"
#include "nanotfm/csvio.hpp"
#include "nanotfm/eval.hpp"
#include "nanotfm/train.hpp"

using nlohmann::json;
using namespace nanotfm;

namespace {

struct GlobalOpts {
    std::uint64_t seed = 0;
    bool deterministic = false;
    std::string precision = "f32";
};

void apply_global(const GlobalOpts& g) {
    if (g.precision != "f32" && g.precision != "f64")
        throw ConfigError("--precision must be f32 or f64");
    set_deterministic(g.deterministic);
}

json global_json(const GlobalOpts& g) {
    return {{"seed", g.seed},
            {"deterministic", g.deterministic},
            {"precision", g.precision},
            {"kernel_backend", kernels::backend_name(kernels::active())},
            {"threads", ThreadPool::instance().threads()}};
}

// Every run echoes its effective configuration next to its primary output so
// it can be reproduced exactly.
void write_config_echo(const std::string& primary_output, json j) {
    const std::string path = primary_output + ".config.json";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write config echo: " + path);
    f << j.dump(2) << "\n";
    std::cout << "config " << path << "\n";
}

json model_json(const ModelConfig& m) {
    return {{"embedding_size", m.embedding_size},
            {"num_attention_heads", m.num_attention_heads},
            {"mlp_hidden_size", m.mlp_hidden_size},
            {"num_layers", m.num_layers},
            {"num_outputs", m.num_outputs},
            {"clip_z", m.clip_z},
            {"activation", activation_name(m.activation)}};
}

json train_json(const TrainConfig& t) {
    return {{"lr", t.lr},
            {"num_steps", t.num_steps},
            {"batch_size", t.batch_size},
            {"warmup_steps", t.warmup_steps},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"weight_decay", t.weight_decay},
            {"seed", t.seed},
            {"checkpoint_every", t.checkpoint_every},
            {"micro_batch", t.micro_batch},
            {"grad_clip", t.grad_clip}};
}

// Paper-style constructor flags; names mirror the model arguments verbatim.
void add_model_flags(CLI::App* app, ModelConfig& m, std::string& activation) {
    app->add_option("--embedding_size", m.embedding_size, "embedding size E");
    app->add_option("--num_attention_heads", m.num_attention_heads, "attention heads");
    app->add_option("--mlp_hidden_size", m.mlp_hidden_size, "MLP hidden width");
    app->add_option("--num_layers", m.num_layers, "transformer layers");
    app->add_option("--num_outputs", m.num_outputs, "output classes");
    app->add_option("--clip-z", m.clip_z, "feature z-score clip threshold");
    app->add_option("--activation", activation, "gelu|relu");
}

ModelConfig finish_model(ModelConfig m, const std::string& activation) {
    if (activation == "gelu") m.activation = Activation::gelu;
    else if (activation == "relu") m.activation = Activation::relu;
    else throw ConfigError("--activation must be gelu or relu");
    m.validate();
    return m;
}

void add_train_flags(CLI::App* app, TrainConfig& t) {
    app->add_option("--lr", t.lr, "learning rate");
    app->add_option("--num-steps", t.num_steps, "optimizer steps");
    app->add_option("--batch-size", t.batch_size, "datasets per batch");
    app->add_option("--warmup-steps", t.warmup_steps, "linear warmup steps");
    app->add_option("--beta1", t.beta1, "first-moment coefficient");
    app->add_option("--beta2", t.beta2, "second-moment coefficient");
    app->add_option("--eps", t.eps, "adaptive denominator epsilon");
    app->add_option("--weight-decay", t.weight_decay, "decoupled weight decay");
    app->add_option("--micro-batch", t.micro_batch,
                    "gradient-accumulation slice (0 = whole batch)");
    app->add_option("--grad-clip", t.grad_clip, "global gradient-norm clip (0 = off)");
    app->add_option("--checkpoint-every", t.checkpoint_every,
                    "write a snapshot every N steps (0 = final only)");
}

std::vector<int> parse_step_list(const std::string& csv) {
    std::vector<int> out;
    std::size_t start = 0;
    while (start <= csv.size() && !csv.empty()) {
        std::size_t comma = csv.find(',', start);
        if (comma == std::string::npos) comma = csv.size();
        const std::string tok = csv.substr(start, comma - start);
        if (!tok.empty()) out.push_back(std::stoi(tok));
        start = comma + 1;
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

struct GenerateOpts {
    SyntheticPriorConfig prior;
    std::int64_t datasets = 16000;
    std::string out;
};

int cmd_generate(const GlobalOpts& g, GenerateOpts o) {
    apply_global(g);
    o.prior.seed = g.seed;
    if (o.out.empty()) o.out = default_dump_name(o.prior);
    write_dump(o.out, o.prior, o.datasets);

    const auto hd = read_dump_header(o.out);
    std::cout << o.out << "\n"
              << "datasets " << hd.num_datasets << " rows " << hd.rows << " cols "
              << hd.cols << " classes " << hd.num_classes << "\n";
    write_config_echo(o.out, json{{"command", "generate"},
                                  {"global", global_json(g)},
                                  {"datasets", o.datasets},
                                  {"rows", o.prior.rows},
                                  {"cols", o.prior.cols},
                                  {"classes", o.prior.num_classes},
                                  {"latent_dim", o.prior.latent_dim},
                                  {"hidden_dim", o.prior.hidden_dim},
                                  {"noise_scale", o.prior.noise_scale},
                                  {"out", o.out}});
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string data = "dump_150x5_2.h5";
    std::string out = "model.ntpf";
    std::string loss_csv;
    std::string resume;
    bool prefetch = true;
    ModelConfig model;
    std::string activation = "gelu";
    TrainConfig train;
};

template <class T>
int run_train(const GlobalOpts& g, const TrainOpts& o, const ModelConfig& mcfg) {
    TrainConfig tcfg = o.train;
    tcfg.seed = g.seed;
    tcfg.validate();

    ModelParameters<T> params;
    std::optional<ScheduleFreeAdamW<T>> opt;
    std::uint64_t resume_steps = 0;
    if (!o.resume.empty()) {
        auto lc = load_checkpoint<T>(o.resume);
        if (!lc.has_optimizer)
            throw ConfigError("cannot resume from a model-only checkpoint: " + o.resume);
        params = std::move(lc.params);
        params.set_requires_grad(true);
        tcfg = lc.train_config;
        opt.emplace(params.named(), tcfg);
        opt->restore(lc.step, lc.gamma_sq_sum, std::move(lc.z), std::move(lc.x),
                     std::move(lc.v));
        resume_steps = lc.step;
        std::cerr << "resuming from " << o.resume << " at step " << lc.step << "\n";
    } else {
        Rng rng(g.seed);
        params = ModelParameters<T>::init(mcfg, rng);
        opt.emplace(params.named(), tcfg);
    }

    PriorDumpLoader loader(o.data, tcfg.num_steps, tcfg.batch_size, tcfg.seed);
    if (loader.header().num_classes > mcfg.num_outputs)
        throw ConfigError("dump has " + std::to_string(loader.header().num_classes) +
                          " classes but the model has " +
                          std::to_string(mcfg.num_outputs) + " outputs");
    if (resume_steps > 0) loader.skip(static_cast<std::int64_t>(resume_steps));

    std::vector<int> snapshot_steps;
    if (tcfg.checkpoint_every > 0)
        for (int s = tcfg.checkpoint_every; s < tcfg.num_steps; s += tcfg.checkpoint_every)
            snapshot_steps.push_back(s);

    auto save_snapshot = [&](int step, double, ModelParameters<T>& p) {
        const std::string path = o.out + ".step" + std::to_string(step);
        save_checkpoint(path, mcfg, p, &*opt);
        std::cout << "snapshot " << path << "\n";
    };

    TrainResult res;
    try {
        if (o.prefetch) {
            PrefetchingSource pf(loader);
            res = train<T>(params, mcfg, pf, tcfg, *opt, snapshot_steps, save_snapshot);
        } else {
            res = train<T>(params, mcfg, loader, tcfg, *opt, snapshot_steps,
                           save_snapshot);
        }
    } catch (const NumericError& e) {
        const std::string rescue = o.out + ".lastgood";
        save_checkpoint(rescue, mcfg, params, &*opt);
        std::cerr << "training aborted: " << e.what() << "\n"
                  << "last good state written to " << rescue << "\n";
        return 4;
    }

    save_checkpoint(o.out, mcfg, params, &*opt);
    std::cout << "checkpoint " << o.out << "\n";

    const std::string loss_path = o.loss_csv.empty() ? o.out + ".loss.csv" : o.loss_csv;
    std::vector<std::vector<std::string>> rows{{"step", "loss", "cumulative_seconds"}};
    for (std::size_t i = 0; i < res.loss_history.size(); ++i)
        rows.push_back({std::to_string(resume_steps + i + 1),
                        fmt_double(res.loss_history[i]),
                        fmt_double(res.cumulative_seconds[i])});
    write_csv(loss_path, rows);
    std::cout << "loss " << loss_path << "\n";
    if (!res.loss_history.empty())
        std::cout << "final_loss " << fmt_metric(res.loss_history.back()) << "\n";

    write_config_echo(o.out, json{{"command", "train"},
                                  {"global", global_json(g)},
                                  {"data", o.data},
                                  {"out", o.out},
                                  {"resume", o.resume},
                                  {"prefetch", o.prefetch},
                                  {"model", model_json(mcfg)},
                                  {"train", train_json(tcfg)}});
    return 0;
}

// ---------------------------------------------------------------------------
// eval / curve
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string checkpoint;
    std::vector<std::string> task_files;
    int synthetic_tasks = 0;
    SyntheticPriorConfig synthetic;
    std::uint64_t synthetic_seed = 9000;
    std::string methods = "nano,knn,tree,forest";
    eval::EvalProtocol protocol;
    std::string report = "report.csv";
    std::string aggregate = "aggregate.csv";
};

std::vector<eval::EvalTask> collect_tasks(const EvalOpts& o) {
    std::vector<eval::EvalTask> tasks;
    for (const auto& f : o.task_files) tasks.push_back(read_task_csv(f));
    if (o.synthetic_tasks > 0) {
        auto synth = eval::make_holdout_tasks(o.synthetic, o.synthetic_tasks,
                                              o.synthetic_seed);
        tasks.insert(tasks.end(), synth.begin(), synth.end());
    }
    if (tasks.empty())
        throw ConfigError("no tasks: pass --tasks files and/or --synthetic-tasks N");
    return tasks;
}

void write_report_files(const eval::MetricReport& report, const std::string& report_path,
                        const std::string& aggregate_path, double train_seconds) {
    std::vector<std::vector<std::string>> rows{
        {"task", "fold", "repetition", "method", "roc_auc", "accuracy"}};
    for (const auto& r : report.rows)
        rows.push_back({r.task, std::to_string(r.fold), std::to_string(r.repetition),
                        r.method, fmt_metric(r.roc_auc), fmt_metric(r.accuracy)});
    write_csv(report_path, rows);

    std::vector<std::vector<std::string>> agg{
        {"method", "cumulative_train_seconds", "mean_roc_auc", "mean_accuracy"}};
    for (const auto& a : report.aggregates)
        agg.push_back({a.method,
                       fmt_double(a.method == "nano" ? train_seconds : 0.0),
                       fmt_metric(a.mean_roc_auc), fmt_metric(a.mean_accuracy)});
    write_csv(aggregate_path, agg);
}

int cmd_eval(const GlobalOpts& g, EvalOpts o) {
    apply_global(g);
    o.protocol.seed = g.seed;
    const auto methods = eval::parse_methods(o.methods);
    const auto tasks = collect_tasks(o);

    std::optional<eval::NanoModel> nano;
    const bool wants_nano =
        std::find(methods.begin(), methods.end(), eval::Method::nano) != methods.end();
    if (wants_nano) {
        if (o.checkpoint.empty())
            throw ConfigError("--checkpoint required when evaluating the nano method");
        auto lc = load_checkpoint<float>(o.checkpoint);
        nano.emplace(eval::NanoModel{lc.config, std::move(lc.params)});
    }

    const auto report =
        eval::evaluate_tasks(tasks, methods, nano ? &*nano : nullptr, o.protocol);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
    write_report_files(report, o.report, o.aggregate, 0.0);
    std::cout << "report " << o.report << "\n" << "aggregate " << o.aggregate << "\n";
    for (const auto& a : report.aggregates)
        std::cout << a.method << " mean_roc_auc " << fmt_metric(a.mean_roc_auc)
                  << " mean_accuracy " << fmt_metric(a.mean_accuracy) << "\n";

    write_config_echo(o.report, json{{"command", "eval"},
                                     {"global", global_json(g)},
                                     {"checkpoint", o.checkpoint},
                                     {"tasks", o.task_files},
                                     {"synthetic_tasks", o.synthetic_tasks},
                                     {"synthetic_seed", o.synthetic_seed},
                                     {"methods", o.methods},
                                     {"folds", o.protocol.folds},
                                     {"repetitions", o.protocol.repetitions},
                                     {"subsample", o.protocol.subsample},
                                     {"knn_k", o.protocol.knn_k},
                                     {"report", o.report},
                                     {"aggregate", o.aggregate}});
    return 0;
}

struct CurveOpts {
    TrainOpts train_opts;
    EvalOpts eval_opts;
    std::string snapshot_steps;
    std::string curve_out = "curve.csv";
};

int cmd_curve(const GlobalOpts& g, CurveOpts o, const ModelConfig& mcfg) {
    apply_global(g);
    o.eval_opts.protocol.seed = g.seed;
    TrainConfig tcfg = o.train_opts.train;
    tcfg.seed = g.seed;
    tcfg.validate();

    std::vector<int> steps = parse_step_list(o.snapshot_steps);
    if (steps.empty()) {
        // default: eight roughly log-spaced snapshots ending at num_steps
        int s = std::max(1, tcfg.num_steps / 128);
        while (s < tcfg.num_steps) {
            steps.push_back(s);
            s *= 2;
        }
        steps.push_back(tcfg.num_steps);
    }

    const auto methods = eval::parse_methods(o.eval_opts.methods);
    const auto tasks = collect_tasks(o.eval_opts);
    PriorDumpLoader loader(o.train_opts.data, tcfg.num_steps, tcfg.batch_size, tcfg.seed);

    const auto points = eval::learning_curve(mcfg, tcfg, loader, tasks, steps, methods,
                                             o.eval_opts.protocol, g.seed);

    std::vector<std::vector<std::string>> rows{
        {"method", "step", "cumulative_train_seconds", "mean_roc_auc"}};
    for (const auto& p : points)
        rows.push_back({p.method, std::to_string(p.step), fmt_double(p.seconds),
                        fmt_metric(p.mean_roc_auc)});
    write_csv(o.curve_out, rows);
    std::cout << "curve " << o.curve_out << "\n";

    write_config_echo(o.curve_out, json{{"command", "curve"},
                                        {"global", global_json(g)},
                                        {"data", o.train_opts.data},
                                        {"model", model_json(mcfg)},
                                        {"train", train_json(tcfg)},
                                        {"methods", o.eval_opts.methods},
                                        {"snapshot_steps", steps},
                                        {"synthetic_tasks", o.eval_opts.synthetic_tasks},
                                        {"curve_out", o.curve_out}});
    return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictOpts {
    std::string checkpoint;
    std::string train_csv;
    std::string test_csv;
    std::string out = "probabilities.csv";
};

int cmd_predict(const GlobalOpts& g, const PredictOpts& o) {
    apply_global(g);
    auto lc = load_checkpoint<float>(o.checkpoint);
    const eval::EvalTask train_task = read_task_csv(o.train_csv);
    const CsvMatrix test = read_numeric_csv(o.test_csv);
    if (test.cols != train_task.cols)
        throw FormatError(o.test_csv + ": has " + std::to_string(test.cols) +
                          " feature columns, training file has " +
                          std::to_string(train_task.cols));
    if (train_task.num_classes > lc.config.num_outputs)
        throw ConfigError("training file has " + std::to_string(train_task.num_classes) +
                          " classes but the model has " +
                          std::to_string(lc.config.num_outputs) + " outputs");

    eval::NanoModel nano{lc.config, std::move(lc.params)};
    const auto probs =
        eval::nano_predict(nano, train_task.x.data(), train_task.y.data(),
                           train_task.rows, train_task.cols, test.values.data(),
                           test.rows);

    const int k = lc.config.num_outputs;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header;
    for (int c = 0; c < k; ++c) header.push_back("p_class_" + std::to_string(c));
    rows.push_back(header);
    for (std::int64_t i = 0; i < test.rows; ++i) {
        std::vector<std::string> row;
        for (int c = 0; c < k; ++c) row.push_back(fmt_double(probs[i * k + c]));
        rows.push_back(std::move(row));
    }
    write_csv(o.out, rows);
    std::cout << "probabilities " << o.out << "\n";

    write_config_echo(o.out, json{{"command", "predict"},
                                  {"global", global_json(g)},
                                  {"checkpoint", o.checkpoint},
                                  {"train", o.train_csv},
                                  {"test", o.test_csv},
                                  {"out", o.out}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tabular in-context learner: pretraining, evaluation and prediction"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may appear after the subcommand

    GlobalOpts g;
    app.add_option("--seed", g.seed, "global seed")->capture_default_str();
    app.add_flag("--deterministic", g.deterministic,
                 "pin backend/threads for bit-reproducible runs");
    app.add_option("--precision", g.precision, "f32|f64")->capture_default_str();

    GenerateOpts gen;
    auto* cgen = app.add_subcommand("generate", "write a synthetic prior dump");
    cgen->add_option("--datasets", gen.datasets, "number of datasets");
    cgen->add_option("--rows", gen.prior.rows, "rows per dataset");
    cgen->add_option("--cols", gen.prior.cols, "feature columns");
    cgen->add_option("--classes", gen.prior.num_classes, "label classes");
    cgen->add_option("--latent-dim", gen.prior.latent_dim, "generator latent width");
    cgen->add_option("--hidden-dim", gen.prior.hidden_dim, "generator hidden width");
    cgen->add_option("--noise-scale", gen.prior.noise_scale, "feature noise scale");
    cgen->add_option("--out", gen.out, "output path (default dump_RxC_K.h5)");

    TrainOpts tr;
    auto* ctrain = app.add_subcommand("train", "pretrain on a prior dump");
    ctrain->add_option("--data", tr.data, "prior dump path")->capture_default_str();
    ctrain->add_option("--out", tr.out, "checkpoint path")->capture_default_str();
    ctrain->add_option("--loss-csv", tr.loss_csv, "loss history CSV path");
    ctrain->add_option("--resume", tr.resume, "resume from a training checkpoint");
    ctrain->add_flag("!--no-prefetch", tr.prefetch, "disable the prefetch worker");
    add_model_flags(ctrain, tr.model, tr.activation);
    add_train_flags(ctrain, tr.train);

    EvalOpts ev;
    auto* ceval = app.add_subcommand("eval", "cross-validated evaluation");
    ceval->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
    ceval->add_option("--tasks", ev.task_files, "task CSV files (label = last column)");
    ceval->add_option("--synthetic-tasks", ev.synthetic_tasks, "held-out synthetic tasks");
    ceval->add_option("--synthetic-seed", ev.synthetic_seed, "seed for the holdout suite");
    ceval->add_option("--rows", ev.synthetic.rows, "synthetic task rows");
    ceval->add_option("--cols", ev.synthetic.cols, "synthetic task cols");
    ceval->add_option("--noise-scale", ev.synthetic.noise_scale, "synthetic noise scale");
    ceval->add_option("--methods", ev.methods, "comma list of nano,knn,tree,forest")
        ->capture_default_str();
    ceval->add_option("--folds", ev.protocol.folds, "stratified folds");
    ceval->add_option("--repetitions", ev.protocol.repetitions, "CV repetitions");
    ceval->add_option("--subsample", ev.protocol.subsample, "max rows per task");
    ceval->add_option("--knn-k", ev.protocol.knn_k, "neighbors for knn");
    ceval->add_option("--report", ev.report, "per-fold report CSV")->capture_default_str();
    ceval->add_option("--aggregate", ev.aggregate, "aggregate CSV")->capture_default_str();

    CurveOpts cv;
    auto* ccurve = app.add_subcommand("curve", "learning-curve experiment");
    ccurve->add_option("--data", cv.train_opts.data, "prior dump path")
        ->capture_default_str();
    add_model_flags(ccurve, cv.train_opts.model, cv.train_opts.activation);
    add_train_flags(ccurve, cv.train_opts.train);
    ccurve->add_option("--snapshot-steps", cv.snapshot_steps,
                       "comma list of snapshot steps (default log-spaced)");
    ccurve->add_option("--tasks", cv.eval_opts.task_files, "task CSV files");
    ccurve->add_option("--synthetic-tasks", cv.eval_opts.synthetic_tasks,
                       "held-out synthetic tasks");
    ccurve->add_option("--synthetic-seed", cv.eval_opts.synthetic_seed,
                       "seed for the holdout suite");
    ccurve->add_option("--methods", cv.eval_opts.methods, "methods to include")
        ->capture_default_str();
    ccurve->add_option("--folds", cv.eval_opts.protocol.folds, "stratified folds");
    ccurve->add_option("--repetitions", cv.eval_opts.protocol.repetitions,
                       "CV repetitions");
    ccurve->add_option("--subsample", cv.eval_opts.protocol.subsample,
                       "max rows per task");
    ccurve->add_option("--curve-out", cv.curve_out, "curve CSV")->capture_default_str();

    PredictOpts pr;
    auto* cpred = app.add_subcommand("predict", "predict probabilities for a test CSV");
    cpred->add_option("--checkpoint", pr.checkpoint, "model checkpoint")->required();
    cpred->add_option("--train", pr.train_csv, "training CSV (features + label)")
        ->required();
    cpred->add_option("--test", pr.test_csv, "test CSV (features only)")->required();
    cpred->add_option("--out", pr.out, "output CSV")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cgen->parsed()) return cmd_generate(g, gen);
        if (ctrain->parsed()) {
            const ModelConfig mcfg = finish_model(tr.model, tr.activation);
            apply_global(g);
            return g.precision == "f64" ? run_train<double>(g, tr, mcfg)
                                        : run_train<float>(g, tr, mcfg);
        }
        if (ceval->parsed()) return cmd_eval(g, ev);
        if (ccurve->parsed()) {
            const ModelConfig mcfg =
                finish_model(cv.train_opts.model, cv.train_opts.activation);
            return cmd_curve(g, cv, mcfg);
        }
        if (cpred->parsed()) return cmd_predict(g, pr);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ceval->parsed() || ccurve->parsed() ? 5 : 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return ceval->parsed() || ccurve->parsed() ? 5 : 2;
    }
    return 2;
}
