// ttrbody: command-line driver for data generation, backbone pretraining,
// pre-adaptation, stream refinement, prediction, evaluation and reporting.
//
// Exit codes: 0 success, 1 runtime or data failure, 2 usage error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ttrbody/adaptation.hpp"
#include "ttrbody/body_template_io.hpp"
#include "ttrbody/dataset.hpp"
#include "ttrbody/metrics.hpp"
#include "ttrbody/nnet.hpp"
#include "ttrbody/pretrain.hpp"
#include "ttrbody/records.hpp"

namespace fs = std::filesystem;
using namespace ttrbody;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int verbosity = 0;

void note(const std::string& msg) {
    if (verbosity > 0) std::cerr << msg << "\n";
}

// Refuses to write over any of the inputs.
void guard_outputs(const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
    for (const auto& out : outputs) {
        if (out.empty() || !fs::exists(out)) continue;
        for (const auto& in : inputs)
            if (!in.empty() && fs::exists(in) && fs::equivalent(in, out))
                throw DataError("output path " + out + " would overwrite input " + in);
    }
}

BodyTemplate template_or_default(const std::string& path, std::uint64_t seed) {
    return path.empty() ? BodyTemplate::generate(seed) : load_template(path);
}

void check_template(const SequenceStream& stream, const BodyTemplate& tmpl, const std::string& data_path) {
    if (!stream.template_hash.empty() && stream.template_hash != template_hash(tmpl))
        throw DataError(data_path + " was generated with body template " + stream.template_hash +
                        ", but the loaded template hashes to " + template_hash(tmpl));
}

ModelWeights load_role(const std::string& path, std::initializer_list<Role> allowed) {
    ModelWeights w = load_weights(path);
    for (Role r : allowed)
        if (w.role == r) return w;
    std::string want;
    for (Role r : allowed) want += (want.empty() ? "" : " or ") + to_string(r);
    throw DataError(path + " carries role tag '" + to_string(w.role) + "', expected " + want);
}

std::vector<RefinedFrame> predict_stream(const ModelWeights& w, const SequenceStream& stream) {
    std::vector<RefinedFrame> out;
    out.reserve(stream.size());
    if (w.role == Role::teacher) {
        for (const auto& r : sequence_ranges(stream))
            for (std::size_t i = r.begin; i < r.end; ++i)
                out.push_back({stream.frames[i].sequence, stream.frames[i].index,
                               teacher_forward(w, window_at(stream, r, i))});
    } else {
        for (const auto& f : stream.frames) out.push_back({f.sequence, f.index, learner_forward(w, f.feature)});
    }
    return out;
}

// Expands `--config file.json` into flag tokens placed right after the
// subcommand name, so flags given on the command line (which come later) win.
std::vector<std::string> expand_config(int argc, char** argv, const std::vector<std::string>& subcommands) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::optional<std::string> config;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a file argument");
            config = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (!config) return args;

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(*config));
    } catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config file " + *config + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file " + *config + " must hold a JSON object");

    std::vector<std::string> injected;
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        auto scalar = [&](const nlohmann::json& v) -> std::string {
            if (v.is_string()) return v.get<std::string>();
            if (v.is_number_integer()) return std::to_string(v.get<long long>());
            if (v.is_number()) return format_real(v.get<double>());
            throw UsageError("config key '" + key + "' has an unsupported value");
        };
        if (value.is_boolean()) {
            if (value.get<bool>()) injected.push_back(flag);
        } else if (value.is_array()) {
            injected.push_back(flag);
            for (const auto& v : value) injected.push_back(scalar(v));
        } else {
            injected.push_back(flag);
            injected.push_back(scalar(value));
        }
    }
    auto pos = args.begin();
    for (; pos != args.end(); ++pos)
        if (std::find(subcommands.begin(), subcommands.end(), *pos) != subcommands.end()) break;
    if (pos == args.end()) throw UsageError("--config needs a subcommand");
    args.insert(pos + 1, injected.begin(), injected.end());
    return args;
}

// --- subcommand options ---

struct SeedOpt {
    std::uint64_t seed = 0;
};

void add_seed(CLI::App* app, SeedOpt& s) {
    app->add_option("--seed", s.seed, "Random seed (falls back to $TTRBODY_SEED)")->envname("TTRBODY_SEED");
}

struct TemplateOpts {
    std::string path;
    std::uint64_t seed = 0;
};

void add_template(CLI::App* app, TemplateOpts& t) {
    app->add_option("--template", t.path, "Body template file (template.v1); default is the built-in template");
    app->add_option("--template-seed", t.seed, "Seed of the built-in template when --template is not given");
}

struct TemplateCmd {
    SeedOpt seed;
    std::string out;
};

struct GenCmd {
    SeedOpt seed;
    TemplateOpts tmpl;
    std::string split = "target";
    std::optional<int> sequences;
    int frames = 120;
    double smoothness = 0.3;
    double detector_noise = 0.05;
    double dropout = 0.05;
    double nuisance = 0.05;
    std::uint64_t world_seed = 2024;
    std::string out;

    GenConfig config() const {
        GenConfig c = GenConfig::defaults(split_from_string(split));
        if (sequences) c.n_sequences = *sequences;
        c.frames_per_sequence = frames;
        c.motion_smoothness = smoothness;
        c.detector_noise_std = detector_noise;
        c.detector_dropout = dropout;
        c.feature_nuisance_std = nuisance;
        c.seed = seed.seed;
        c.world_seed = world_seed;
        return c;
    }
};

struct PretrainCmd {
    SeedOpt seed;
    TemplateOpts tmpl;
    std::string data;
    PretrainConfig cfg;
    std::string out_learner;
    std::string out_teacher;
};

struct PreadaptCmd {
    SeedOpt seed;
    TemplateOpts tmpl;
    std::string backbone;
    std::string teacher;
    std::string data;
    PreAdaptConfig cfg;
    std::string out;
    std::string log;
};

struct RefineCmd {
    TemplateOpts tmpl;
    std::string weights;
    std::string teacher;
    std::string data;
    BilevelConfig cfg;
    bool no_regenerate = false;
    std::string out;
    std::string log;
    std::string final_weights;
};

struct PredictCmd {
    std::string weights;
    std::string data;
    std::string out;
};

struct EvalCmd {
    TemplateOpts tmpl;
    std::string pred;
    std::string data;
    std::optional<double> baseline;
    std::string baseline_pred;
    std::string label = "teacher";
    double sigma = 35.0;
    std::int64_t epochs = 600;
    std::string out;
};

struct ReportCmd {
    std::vector<std::string> reports;
    std::string out;
};

struct PipelineCmd {
    SeedOpt seed;
    std::string out_dir;
    int source_sequences = 80;
    int target_sequences = 40;
    int frames = 120;
    int pretrain_epochs = 80;
    PreAdaptConfig pre;
    BilevelConfig bilevel;
    std::string label = "teacher";
};

void add_loss_weights(CLI::App* app, LossWeights& w) {
    app->add_option("--lambda-theta", w.lambda1, "Weight of the pose term")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-beta", w.lambda2, "Weight of the shape term")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-cam", w.lambda3, "Weight of the camera term")->check(CLI::NonNegativeNumber);
    app->add_option("--lambda-2d", w.lambda4, "Weight of the 2D guide term")->check(CLI::NonNegativeNumber);
}

void add_preadapt_opts(CLI::App* app, PreAdaptConfig& c) {
    app->add_option("--epochs", c.epochs, "Pre-adaptation epochs")->check(CLI::NonNegativeNumber);
    app->add_option("--sigma", c.noise.sigma_pixel, "Input corruption strength on the 0-255 scale")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--lr", c.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
    app->add_option("--sequences-per-epoch", c.sequences_per_epoch)->check(CLI::PositiveNumber);
    app->add_option("--frames-per-sequence", c.frames_per_sequence)->check(CLI::PositiveNumber);
    app->add_option("--eval-every", c.eval_every, "Log target MPJPE every N epochs (0: only the last)")
        ->check(CLI::NonNegativeNumber);
    add_loss_weights(app, c.loss_weights);
}

void add_bilevel_opts(CLI::App* app, BilevelConfig& c) {
    app->add_option("--lr-inner", c.lr_inner, "Step size of the 2D-guide probe")->check(CLI::NonNegativeNumber);
    app->add_option("--lr-outer", c.lr_outer, "Step size of the consistency update")->check(CLI::NonNegativeNumber);
    app->add_option("--steps", c.steps_per_frame, "Updates per frame")->check(CLI::PositiveNumber);
}

// --- runners ---

void run_template(const TemplateCmd& c) {
    const BodyTemplate t = BodyTemplate::generate(c.seed.seed);
    save_template(t, c.out);
    std::cout << "template " << template_hash(t) << " (" << t.num_joints() << " joints, " << t.vertex_bone.size()
              << " vertices) -> " << c.out << "\n";
}

void run_gen(const GenCmd& c) {
    const GenConfig cfg = c.config();
    cfg.validate();
    guard_outputs({c.tmpl.path}, {c.out});
    const BodyTemplate tmpl = template_or_default(c.tmpl.path, c.tmpl.seed);
    SequenceStream s = gen_synthetic_dataset(cfg, split_from_string(c.split), tmpl);
    s.template_hash = template_hash(tmpl);
    save_stream(s, c.out);
    std::cout << "generated " << s.size() << " frames in " << cfg.n_sequences << " sequences (split " << c.split
              << ") -> " << c.out << "\n";
}

void run_pretrain(PretrainCmd c) {
    c.cfg.seed = c.seed.seed;
    c.cfg.validate();
    guard_outputs({c.data, c.tmpl.path}, {c.out_learner, c.out_teacher});
    const BodyTemplate tmpl = template_or_default(c.tmpl.path, c.tmpl.seed);
    const SequenceStream src = load_stream(c.data);
    check_template(src, tmpl, c.data);
    note("pretraining on " + std::to_string(src.size()) + " frames");
    const Backbones b = pretrain_backbones(src, c.cfg, tmpl);
    save_weights(b.learner, c.out_learner);
    save_weights(b.teacher, c.out_teacher);
    std::cout << "f0 " << weights_hash(b.learner) << " -> " << c.out_learner << "\n"
              << "teacher " << weights_hash(b.teacher) << " -> " << c.out_teacher << "\n";
}

void run_preadapt(PreadaptCmd c) {
    c.cfg.seed = c.seed.seed;
    c.cfg.validate();
    guard_outputs({c.backbone, c.teacher, c.data, c.tmpl.path}, {c.out, c.log});
    const BodyTemplate tmpl = template_or_default(c.tmpl.path, c.tmpl.seed);
    const ModelWeights f0 = load_role(c.backbone, {Role::f0});
    const ModelWeights teacher = load_role(c.teacher, {Role::teacher});
    const SequenceStream tgt = load_stream(c.data);
    check_template(tgt, tmpl, c.data);
    const PreAdaptResult r = preadapt_run(f0, teacher, tgt, c.cfg, tmpl);
    save_weights(r.fs, c.out);
    if (!c.log.empty()) write_file(c.log, preadapt_log_csv(r.log));
    std::cout << "f_s " << weights_hash(r.fs) << " after " << c.cfg.epochs << " epochs -> " << c.out << "\n";
    for (auto it = r.log.rbegin(); it != r.log.rend(); ++it)
        if (it->mpjpe_mm) {
            std::cout << "target MPJPE " << format_fixed2(*it->mpjpe_mm) << " mm at epoch " << it->epoch << "\n";
            break;
        }
}

void run_refine(RefineCmd c) {
    c.cfg.regenerate = !c.no_regenerate;
    c.cfg.validate();
    guard_outputs({c.weights, c.teacher, c.data, c.tmpl.path}, {c.out, c.log, c.final_weights});
    const BodyTemplate tmpl = template_or_default(c.tmpl.path, c.tmpl.seed);
    const ModelWeights fs_w = load_role(c.weights, {Role::fs, Role::f0});
    const ModelWeights teacher = load_role(c.teacher, {Role::teacher});
    const SequenceStream tgt = load_stream(c.data);
    check_template(tgt, tmpl, c.data);
    const RefineResult r = refine_stream(fs_w, tgt, teacher, c.cfg, tmpl);
    write_file(c.out, dump_predictions(r.outputs, weights_hash(fs_w)));
    if (!c.log.empty()) write_file(c.log, refine_log_csv(r.log));
    if (!c.final_weights.empty()) save_weights(r.final_fa, c.final_weights);
    std::cout << "refined " << r.outputs.size() << " frames, " << r.regenerations << " regenerations -> " << c.out
              << "\n";
    if (tgt.has_ground_truth())
        std::cout << "refined MPJPE " << format_fixed2(refined_metrics(r).mpjpe_mm) << " mm\n";
}

void run_predict(const PredictCmd& c) {
    guard_outputs({c.weights, c.data}, {c.out});
    const ModelWeights w = load_weights(c.weights);
    const SequenceStream s = load_stream(c.data);
    write_file(c.out, dump_predictions(predict_stream(w, s), weights_hash(w)));
    std::cout << "predicted " << s.size() << " frames with " << to_string(w.role) << " -> " << c.out << "\n";
}

void run_eval(const EvalCmd& c) {
    if (!c.baseline && c.baseline_pred.empty()) throw UsageError("eval needs --baseline or --baseline-pred");
    guard_outputs({c.pred, c.data, c.baseline_pred, c.tmpl.path}, {c.out});
    const BodyTemplate tmpl = template_or_default(c.tmpl.path, c.tmpl.seed);
    const SequenceStream s = load_stream(c.data);
    check_template(s, tmpl, c.data);
    const Predictions p = parse_predictions(read_file(c.pred));
    double baseline = c.baseline.value_or(0.0);
    if (!c.baseline_pred.empty())
        baseline = summarize(score_predictions(parse_predictions(read_file(c.baseline_pred)), s, tmpl)).mpjpe_mm;
    const MetricsReport r =
        build_report(score_predictions(p, s, tmpl), ReportConfig{c.label, c.sigma, c.epochs, p.weights_hash}, baseline);
    write_file(c.out, dump_report(r));
    std::cout << "MPJPE " << format_fixed2(r.mean_mpjpe_mm) << " mm, PA-MPJPE " << format_fixed2(r.mean_pa_mpjpe_mm)
              << " mm, gap " << format_fixed2(r.gap_vs_initial_mm) << " mm -> " << c.out << "\n";
}

void run_report(const ReportCmd& c) {
    guard_outputs(c.reports, {c.out});
    std::vector<MetricsReport> reports;
    for (const auto& path : c.reports) reports.push_back(parse_report(read_file(path)));
    write_file(c.out, grid_csv(reports));
    std::cout << "grid of " << reports.size() << " runs -> " << c.out << "\n";
}

void run_pipeline(PipelineCmd c) {
    c.pre.seed = c.seed.seed;
    c.pre.validate();
    c.bilevel.validate();
    if (c.source_sequences < 1 || c.target_sequences < 1 || c.frames < 1 || c.pretrain_epochs < 0)
        throw ConfigError("sequence, frame and epoch counts must be positive");
    fs::create_directories(c.out_dir);
    auto at = [&](const char* name) { return (fs::path(c.out_dir) / name).string(); };

    const BodyTemplate tmpl = BodyTemplate::generate(0);
    save_template(tmpl, at("template.json"));
    const std::string thash = template_hash(tmpl);

    GenConfig sc = GenConfig::defaults(Split::source);
    sc.n_sequences = c.source_sequences;
    sc.frames_per_sequence = c.frames;
    sc.seed = c.seed.seed;
    GenConfig tc = GenConfig::defaults(Split::target);
    tc.n_sequences = c.target_sequences;
    tc.frames_per_sequence = c.frames;
    tc.seed = c.seed.seed;
    SequenceStream src = gen_synthetic_dataset(sc, Split::source, tmpl);
    SequenceStream tgt = gen_synthetic_dataset(tc, Split::target, tmpl);
    src.template_hash = thash;
    tgt.template_hash = thash;
    save_stream(src, at("source.jsonl"));
    save_stream(tgt, at("target.jsonl"));
    note("data written");

    PretrainConfig pc;
    pc.epochs = c.pretrain_epochs;
    pc.seed = c.seed.seed;
    const Backbones b = pretrain_backbones(src, pc, tmpl);
    save_weights(b.learner, at("f0.json"));
    save_weights(b.teacher, at("teacher.json"));
    note("backbones written");

    const PreAdaptResult pre = preadapt_run(b.learner, b.teacher, tgt, c.pre, tmpl);
    save_weights(pre.fs, at("fs.json"));
    write_file(at("preadapt_log.csv"), preadapt_log_csv(pre.log));

    const RefineResult ref = refine_stream(pre.fs, tgt, b.teacher, c.bilevel, tmpl);
    write_file(at("refine_log.csv"), refine_log_csv(ref.log));

    const auto initial_pred = predict_stream(b.learner, tgt);
    const auto pre_pred = predict_stream(pre.fs, tgt);
    write_file(at("initial.jsonl"), dump_predictions(initial_pred, weights_hash(b.learner)));
    write_file(at("preadapted.jsonl"), dump_predictions(pre_pred, weights_hash(pre.fs)));
    write_file(at("refined.jsonl"), dump_predictions(ref.outputs, weights_hash(pre.fs)));

    auto score = [&](const std::vector<RefinedFrame>& frames, const std::string& hash) {
        return score_predictions(Predictions{hash, frames}, tgt, tmpl);
    };
    const double initial = summarize(score(initial_pred, weights_hash(b.learner))).mpjpe_mm;
    const MetricsReport r_init =
        build_report(score(initial_pred, weights_hash(b.learner)),
                     ReportConfig{c.label, c.pre.noise.sigma_pixel, 0, weights_hash(b.learner)}, initial);
    const MetricsReport r_pre =
        build_report(score(pre_pred, weights_hash(pre.fs)),
                     ReportConfig{c.label, c.pre.noise.sigma_pixel, c.pre.epochs, weights_hash(pre.fs)}, initial);
    const MetricsReport r_ref =
        build_report(score(ref.outputs, weights_hash(pre.fs)),
                     ReportConfig{c.label + "+refine", c.pre.noise.sigma_pixel, c.pre.epochs, weights_hash(pre.fs)},
                     initial);
    write_file(at("report_initial.json"), dump_report(r_init));
    write_file(at("report_preadapted.json"), dump_report(r_pre));
    write_file(at("report_refined.json"), dump_report(r_ref));
    write_file(at("grid.csv"), grid_csv({r_init, r_pre, r_ref}));

    std::cout << "stage,mpjpe_mm,pa_mpjpe_mm,gap_mm\n";
    for (const auto* r : {&r_init, &r_pre, &r_ref})
        std::cout << (r == &r_init ? "initial" : r == &r_pre ? "preadapted" : "refined") << ","
                  << format_fixed2(r->mean_mpjpe_mm) << "," << format_fixed2(r->mean_pa_mpjpe_mm) << ","
                  << format_fixed2(r->gap_vs_initial_mm) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time refinement of a simplified 3D body regressor on synthetic streams", "ttrbody"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.add_flag("-v,--verbose", verbosity, "Print progress to stderr");
    app.add_option("--config", "JSON file whose keys match flag names; explicit flags win");

    TemplateCmd tc;
    auto* s_tmpl = app.add_subcommand("template", "Write the seeded body template");
    add_seed(s_tmpl, tc.seed);
    s_tmpl->add_option("--out", tc.out)->required();

    GenCmd gc;
    auto* s_gen = app.add_subcommand("gen-data", "Generate a synthetic source or target stream");
    add_seed(s_gen, gc.seed);
    add_template(s_gen, gc.tmpl);
    s_gen->add_option("--split", gc.split)->check(CLI::IsMember({"source", "target"}));
    s_gen->add_option("--sequences", gc.sequences, "Number of sequences (default 80 source, 40 target)")
        ->check(CLI::PositiveNumber);
    s_gen->add_option("--frames", gc.frames, "Frames per sequence")->check(CLI::PositiveNumber);
    s_gen->add_option("--smoothness", gc.smoothness)->check(CLI::Range(1e-12, 1.0));
    s_gen->add_option("--detector-noise", gc.detector_noise)->check(CLI::NonNegativeNumber);
    s_gen->add_option("--dropout", gc.dropout)->check(CLI::Range(0.0, 0.999999));
    s_gen->add_option("--nuisance", gc.nuisance)->check(CLI::NonNegativeNumber);
    s_gen->add_option("--world-seed", gc.world_seed);
    s_gen->add_option("--out", gc.out)->required();

    PretrainCmd pc;
    auto* s_pre = app.add_subcommand("pretrain", "Train f0 and the temporal teacher on a labelled source stream");
    add_seed(s_pre, pc.seed);
    add_template(s_pre, pc.tmpl);
    s_pre->add_option("--data", pc.data)->required();
    s_pre->add_option("--epochs", pc.cfg.epochs)->check(CLI::NonNegativeNumber);
    s_pre->add_option("--lr", pc.cfg.lr)->check(CLI::NonNegativeNumber);
    s_pre->add_option("--batch-size", pc.cfg.batch_size)->check(CLI::PositiveNumber);
    s_pre->add_option("--learner-noise", pc.cfg.learner_input_noise)->check(CLI::NonNegativeNumber);
    add_loss_weights(s_pre, pc.cfg.loss_weights);
    s_pre->add_option("--out-learner", pc.out_learner)->required();
    s_pre->add_option("--out-teacher", pc.out_teacher)->required();

    PreadaptCmd ac;
    auto* s_ada = app.add_subcommand("preadapt", "Pre-adapt a copy of f0 towards the frozen teacher on a target stream");
    add_seed(s_ada, ac.seed);
    add_template(s_ada, ac.tmpl);
    s_ada->add_option("--backbone", ac.backbone, "f0 weights")->required();
    s_ada->add_option("--teacher", ac.teacher, "Teacher weights")->required();
    s_ada->add_option("--data", ac.data, "Target stream")->required();
    add_preadapt_opts(s_ada, ac.cfg);
    s_ada->add_option("--out", ac.out, "Pre-adapted weights")->required();
    s_ada->add_option("--log", ac.log, "Per-epoch CSV log");

    RefineCmd rc;
    auto* s_ref = app.add_subcommand("refine", "Refine a stream frame by frame with regeneration at sequence changes");
    add_template(s_ref, rc.tmpl);
    s_ref->add_option("--weights", rc.weights, "Pre-adapted weights")->required();
    s_ref->add_option("--teacher", rc.teacher)->required();
    s_ref->add_option("--data", rc.data)->required();
    add_bilevel_opts(s_ref, rc.cfg);
    add_loss_weights(s_ref, rc.cfg.loss_weights);
    s_ref->add_flag("--no-regenerate", rc.no_regenerate, "Keep adapting across sequence boundaries");
    s_ref->add_option("--out", rc.out, "Refined outputs (JSON Lines)")->required();
    s_ref->add_option("--log", rc.log, "Per-frame CSV log");
    s_ref->add_option("--final-weights", rc.final_weights, "Write the last f_a");

    PredictCmd dc;
    auto* s_pred = app.add_subcommand("predict", "Plain forward pass of a learner or teacher over a stream");
    s_pred->add_option("--weights", dc.weights)->required();
    s_pred->add_option("--data", dc.data)->required();
    s_pred->add_option("--out", dc.out)->required();

    EvalCmd ec;
    auto* s_eval = app.add_subcommand("eval", "Score predictions against ground truth and write report.v1");
    add_template(s_eval, ec.tmpl);
    s_eval->add_option("--pred", ec.pred)->required();
    s_eval->add_option("--data", ec.data)->required();
    s_eval->add_option("--baseline", ec.baseline, "Initial MPJPE in mm for the gap");
    s_eval->add_option("--baseline-pred", ec.baseline_pred, "Predictions whose MPJPE is the gap baseline");
    s_eval->add_option("--label", ec.label, "Row label (teacher choice)");
    s_eval->add_option("--sigma", ec.sigma)->check(CLI::NonNegativeNumber);
    s_eval->add_option("--epochs", ec.epochs)->check(CLI::NonNegativeNumber);
    s_eval->add_option("--out", ec.out)->required();

    ReportCmd gc2;
    auto* s_rep = app.add_subcommand("report", "Tabulate report.v1 files into an (epoch x sigma) CSV grid");
    s_rep->add_option("--reports", gc2.reports)->required()->expected(1, -1)->multi_option_policy(
        CLI::MultiOptionPolicy::TakeAll);
    s_rep->add_option("--out", gc2.out)->required();

    PipelineCmd lc;
    auto* s_pipe = app.add_subcommand("pipeline", "Generate, pretrain, pre-adapt, refine and evaluate in one go");
    add_seed(s_pipe, lc.seed);
    s_pipe->add_option("--out-dir", lc.out_dir)->required();
    s_pipe->add_option("--source-sequences", lc.source_sequences)->check(CLI::PositiveNumber);
    s_pipe->add_option("--target-sequences", lc.target_sequences)->check(CLI::PositiveNumber);
    s_pipe->add_option("--frames", lc.frames)->check(CLI::PositiveNumber);
    s_pipe->add_option("--pretrain-epochs", lc.pretrain_epochs)->check(CLI::NonNegativeNumber);
    add_preadapt_opts(s_pipe, lc.pre);
    add_bilevel_opts(s_pipe, lc.bilevel);
    s_pipe->add_option("--label", lc.label);

    const std::vector<std::string> names = {"template", "gen-data", "pretrain", "preadapt", "refine",
                                            "predict",  "eval",     "report",   "pipeline"};
    try {
        std::vector<std::string> args = expand_config(argc, argv, names);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    CLI::App* sub = app.get_subcommands().front();
    try {
        if (sub == s_tmpl) run_template(tc);
        else if (sub == s_gen) run_gen(gc);
        else if (sub == s_pre) run_pretrain(pc);
        else if (sub == s_ada) run_preadapt(ac);
        else if (sub == s_ref) run_refine(rc);
        else if (sub == s_pred) run_predict(dc);
        else if (sub == s_eval) run_eval(ec);
        else if (sub == s_rep) run_report(gc2);
        else if (sub == s_pipe) run_pipeline(lc);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << sub->help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
