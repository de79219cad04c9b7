#include "produce/cli.hpp"

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "produce/dataset.hpp"
#include "produce/error.hpp"
#include "produce/eval.hpp"
#include "produce/kiosk.hpp"
#include "produce/model.hpp"
#include "produce/service.hpp"
#include "produce/trainer.hpp"

namespace produce {

namespace fs = std::filesystem;

namespace {

struct SynthArgs {
    std::string out = "synth";
    std::string classes = "10";
    std::size_t per_class = 50;
    std::size_t size = 32;
    std::uint64_t seed = 42;
};

struct SplitArgs {
    double test_fraction = 0.2;
    std::uint64_t split_seed = 42;
};

struct TrainArgs {
    std::string data;
    std::string out_model = "model.json";
    TrainConfig config;
    SplitArgs split;
};

struct EvalArgs {
    std::string data;
    std::string model;
    std::string log = "eval_log.jsonl";
    std::string report = "report";
    std::string manifest;
    SplitArgs split;
};

struct BenchArgs {
    std::string model;
    std::size_t images = 100;
    std::size_t runs = 5;
    std::string out = "bench_log.jsonl";
    std::string data;
    std::uint64_t seed = 42;
};

struct ServeArgs {
    std::string model;
    std::string catalog;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string labels = "labels.jsonl";
    std::string captures;
};

// "--classes 4" takes the first 4 canonical names; a comma list names them.
std::vector<std::string> class_list(const std::string& spec) {
    if (!spec.empty() && spec.find_first_not_of("0123456789") == std::string::npos) {
        const std::size_t n = std::stoul(spec);
        if (n < 2) {
            throw InvalidArgument("--classes needs at least 2 classes");
        }
        const auto& canonical = canonical_class_names();
        if (n <= canonical.size()) {
            return {canonical.begin(), canonical.begin() + static_cast<std::ptrdiff_t>(n)};
        }
        return placeholder_class_names(n);
    }
    std::vector<std::string> names;
    std::size_t start = 0;
    while (start <= spec.size()) {
        const std::size_t comma = std::min(spec.find(',', start), spec.size());
        std::string name = spec.substr(start, comma - start);
        if (name.empty()) {
            throw InvalidArgument(fmt::format("--classes '{}' contains an empty name", spec));
        }
        names.push_back(std::move(name));
        start = comma + 1;
    }
    if (names.size() < 2) {
        throw InvalidArgument("--classes needs at least 2 classes");
    }
    return names;
}

std::vector<LabeledImage> fitted(std::vector<LabeledImage> images, const Shape3& input) {
    for (auto& li : images) {
        const auto& s = li.image.shape();
        if (s[0] != input.height || s[1] != input.width) {
            li.image = resize_nearest(li.image, input.height, input.width);
        }
    }
    return images;
}

Dataset load_with_warnings(const std::string& root, std::ostream& err) {
    Dataset ds = load_dataset(root);
    for (const auto& w : ds.warnings) {
        fmt::print(err, "warning: {}\n", w);
    }
    return ds;
}

int do_synth(const SynthArgs& a, std::ostream& out) {
    SynthOptions o;
    o.class_names = class_list(a.classes);
    o.per_class = a.per_class;
    o.size = a.size;
    o.seed = a.seed;
    const DatasetManifest m = synth_generate(o, a.out);
    fmt::print(out, "wrote {} images in {} classes to {}\n", m.entries.size(), m.class_names.size(), a.out);
    return kExitOk;
}

int do_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    Dataset ds = load_with_warnings(a.data, err);
    ds.manifest = split_dataset(ds.manifest, a.split.test_fraction, a.split.split_seed);
    const Model base = build_micro_mobilenet(ds.manifest.class_names, a.config.seed);
    const auto train = fitted(select_split(ds, Split::train), base.spec().input_shape);

    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    for (const auto& li : train) {
        images.push_back(li.image);
        labels.push_back(li.label);
    }
    const FeatureSet features = extract_features(base, images, std::move(labels));
    const TrainResult result = train_head(features, a.config);
    const Model trained = attach_head(base, result.head);
    save_model(trained, a.out_model);
    const std::string manifest_path = a.out_model + ".manifest.json";
    save_manifest(ds.manifest, manifest_path);
    fmt::print(out, "trained on {} images, {} classes; final loss {:.6f}, train accuracy {:.4f}\n",
               features.samples(), features.class_names.size(), result.loss_history.back(),
               head_accuracy(head_of(trained), features));
    fmt::print(out, "model: {}\nsplit manifest: {}\n", a.out_model, manifest_path);
    return kExitOk;
}

int do_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const Model model = load_model(a.model);
    Dataset ds = load_with_warnings(a.data, err);
    if (ds.manifest.class_names != model.spec().class_names) {
        throw InvalidArgument("dataset classes do not match the classes the model was trained on");
    }
    if (!a.manifest.empty()) {
        const DatasetManifest saved = load_manifest(a.manifest);
        if (saved.class_names != ds.manifest.class_names || saved.entries.size() != ds.manifest.entries.size()) {
            throw InvalidArgument(fmt::format("manifest {} does not describe dataset {}", a.manifest, a.data));
        }
        for (std::size_t i = 0; i < saved.entries.size(); ++i) {
            if (saved.entries[i].path != ds.manifest.entries[i].path) {
                throw InvalidArgument(fmt::format("manifest {} lists {} where the dataset has {}", a.manifest,
                                                  saved.entries[i].path, ds.manifest.entries[i].path));
            }
        }
        ds.manifest = saved;
    } else {
        ds.manifest = split_dataset(ds.manifest, a.split.test_fraction, a.split.split_seed);
    }
    const auto test = fitted(select_split(ds, Split::test), model.spec().input_shape);
    if (test.empty()) {
        throw InvalidArgument("the test split is empty");
    }
    const Clock clock = steady_clock_ms();
    std::vector<PredictionRecord> log;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const double start = clock();
        const Tensor scores = forward_scores(model, test[i].image);
        const double stop = clock();
        log.push_back({test[i].label, rank_scores(scores.data()), stop - start, 0, i});
    }
    write_log(log, a.log);
    const EvaluationReport report = build_report(log, model.spec().class_names);
    render_report(report, a.report);
    fmt::print(out, "evaluated {} held-out images: top-1 {:.4f}, top-3 {:.4f}\n", report.samples, report.top1(),
               report.top3());
    fmt::print(out, "log: {}\nreport: {}\n", a.log, a.report);
    return kExitOk;
}

int do_bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
    const Model model = load_model(a.model);
    std::vector<LabeledImage> pool;
    if (!a.data.empty()) {
        pool = load_with_warnings(a.data, err).images;
    } else {
        SynthOptions o;
        o.class_names = model.spec().class_names;
        o.per_class = (a.images + o.class_names.size() - 1) / o.class_names.size();
        o.size = model.spec().input_shape.height;
        o.seed = a.seed;
        pool = synth_images(o);
    }
    if (pool.empty()) {
        throw InvalidArgument("no images to benchmark");
    }
    std::vector<LabeledImage> images;
    for (std::size_t i = 0; i < a.images; ++i) {
        images.push_back(pool[i % pool.size()]);
    }
    images = fitted(std::move(images), model.spec().input_shape);
    const BenchResult r = bench_propagation(model, images, a.runs);
    write_log(r.samples, a.out);
    fmt::print(out, "{} samples over {} runs\n", r.timing.samples, r.timing.per_run_means.size());
    for (std::size_t i = 0; i < r.timing.per_run_means.size(); ++i) {
        fmt::print(out, "  run {}: mean {:.4f} ms\n", i, r.timing.per_run_means[i]);
    }
    fmt::print(out, "overall mean {:.4f} ms, first-sample mean {:.4f} ms", r.timing.overall_mean,
               r.timing.first_sample_mean);
    if (r.timing.steady_state_mean) {
        fmt::print(out, ", steady-state mean {:.4f} ms", *r.timing.steady_state_mean);
    }
    fmt::print(out, "\nlog: {}\n", a.out);
    return kExitOk;
}

int do_serve(const ServeArgs& a, std::ostream& out) {
    Model model = load_model(a.model);
    Catalog catalog = load_catalog(a.catalog);
    KioskService service(model_service_options(std::move(model), std::move(catalog), a.labels, a.captures));

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    sigset_t previous;
    pthread_sigmask(SIG_BLOCK, &signals, &previous);
    const int port = service.bind(a.host, a.port);
    service.start();
    fmt::print(out, "serving on http://{}:{}  (Ctrl-C to stop)\n", a.host, port);
    out.flush();
    int sig = 0;
    sigwait(&signals, &sig);
    service.stop();
    pthread_sigmask(SIG_SETMASK, &previous, nullptr);
    fmt::print(out, "stopped\n");
    return kExitOk;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Produce recognition toolkit: synthetic data, head training, evaluation, benchmarking and the "
                 "kiosk service"};
    app.name("produce");
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic produce image dataset");
    s->add_option("--out", synth.out, "Output directory")->capture_default_str();
    s->add_option("--classes", synth.classes, "Class count (first N canonical names) or comma-separated names")
        ->capture_default_str();
    s->add_option("--per-class", synth.per_class, "Images per class")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--size", synth.size, "Image side in pixels")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train the classifier head on frozen MicroMobileNet features");
    t->add_option("--data", train.data, "Dataset root (<root>/<class>/*.ppm)")->required();
    t->add_option("--out-model", train.out_model, "Model file to write")->capture_default_str();
    t->add_option("--epochs", train.config.epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
    t->add_option("--lr", train.config.learning_rate, "SGD learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    t->add_option("--batch", train.config.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
    t->add_option("--seed", train.config.seed, "Seed for weight init and shuffling")->capture_default_str();
    t->add_option("--l2", train.config.l2, "L2 penalty on head weights")->capture_default_str()->check(CLI::NonNegativeNumber);
    t->add_option("--test-fraction", train.split.test_fraction, "Held-out fraction per class")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    t->add_option("--split-seed", train.split.split_seed, "Split seed")->capture_default_str();

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Evaluate a model on the held-out split and write a report");
    e->add_option("--data", eval.data, "Dataset root")->required();
    e->add_option("--model", eval.model, "Model file")->required();
    e->add_option("--log", eval.log, "Prediction log (JSON lines)")->capture_default_str();
    e->add_option("--report", eval.report, "Report directory")->capture_default_str();
    e->add_option("--manifest", eval.manifest, "Split manifest written by train (default: recompute the split)");
    e->add_option("--test-fraction", eval.split.test_fraction, "Held-out fraction per class")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    e->add_option("--split-seed", eval.split.split_seed, "Split seed")->capture_default_str();

    BenchArgs bench;
    auto* b = app.add_subcommand("bench", "Time forward propagation over repeated runs");
    b->add_option("--model", bench.model, "Model file")->required();
    b->add_option("--images", bench.images, "Images per run")->capture_default_str()->check(CLI::PositiveNumber);
    b->add_option("--runs", bench.runs, "Number of runs")->capture_default_str()->check(CLI::PositiveNumber);
    b->add_option("--out", bench.out, "Timing log (JSON lines)")->capture_default_str();
    b->add_option("--data", bench.data, "Dataset root to draw images from (default: synthetic)");
    b->add_option("--seed", bench.seed, "Seed for synthetic images")->capture_default_str();

    ServeArgs serve;
    auto* v = app.add_subcommand("serve", "Run the kiosk HTTP service");
    v->add_option("--model", serve.model, "Model file")->required();
    v->add_option("--catalog", serve.catalog, "Catalog JSON")->required();
    v->add_option("--host", serve.host, "Listen address")->capture_default_str();
    v->add_option("--port", serve.port, "Listen port (0 picks a free one)")->capture_default_str()->check(CLI::Range(0, 65535));
    v->add_option("--labels", serve.labels, "Label journal (JSON lines, appended)")->capture_default_str();
    v->add_option("--captures", serve.captures, "Directory of .ppm camera captures, consumed in name order");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& pe) {
        const int code = app.exit(pe, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*s) {
            return do_synth(synth, out);
        }
        if (*t) {
            return do_train(train, out, err);
        }
        if (*e) {
            return do_eval(eval, out, err);
        }
        if (*b) {
            return do_bench(bench, out, err);
        }
        return do_serve(serve, out);
    } catch (const std::exception& ex) {
        fmt::print(err, "error: {}\n", ex.what());
        return kExitRuntime;
    }
}

int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cout, std::cerr); }

} // namespace produce
