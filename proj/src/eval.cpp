#include "produce/eval.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "produce/error.hpp"

namespace produce {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Position of the true class in the ranking (0 = top).
std::size_t rank_of_truth(const PredictionRecord& r) {
    for (std::size_t i = 0; i < r.ranking.size(); ++i) {
        if (r.ranking[i].class_index == r.true_class) {
            return i;
        }
    }
    throw InvalidArgument(fmt::format("record {}/{}: true class {} missing from ranking", r.run_index,
                                      r.sample_index, r.true_class));
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot write {}", path.string()));
    }
    out << text;
    if (!out) {
        throw IoError(fmt::format("failed writing {}", path.string()));
    }
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        out += c;
        if (c == '"') {
            out += '"';
        }
    }
    return out + "\"";
}

std::string fixed(double v) { return fmt::format("{:.6f}", v); }

} // namespace

void validate_record(const PredictionRecord& record, std::size_t num_classes) {
    if (record.ranking.size() != num_classes) {
        throw InvalidArgument(fmt::format("record {}/{} ranks {} classes, expected {}", record.run_index,
                                          record.sample_index, record.ranking.size(), num_classes));
    }
    if (record.true_class >= num_classes) {
        throw InvalidArgument(fmt::format("record {}/{}: true class {} outside {} classes", record.run_index,
                                          record.sample_index, record.true_class, num_classes));
    }
    if (!(record.latency_ms >= 0.0)) {
        throw InvalidArgument(fmt::format("record {}/{}: negative latency", record.run_index, record.sample_index));
    }
    std::vector<bool> seen(num_classes, false);
    for (std::size_t i = 0; i < record.ranking.size(); ++i) {
        const auto& entry = record.ranking[i];
        if (entry.class_index >= num_classes || seen[entry.class_index]) {
            throw InvalidArgument(fmt::format("record {}/{}: ranking is not a permutation of the classes",
                                              record.run_index, record.sample_index));
        }
        seen[entry.class_index] = true;
        if (i > 0 && entry.score > record.ranking[i - 1].score) {
            throw InvalidArgument(fmt::format("record {}/{}: ranking scores increase at position {}",
                                              record.run_index, record.sample_index, i));
        }
    }
}

std::size_t log_class_count(std::span<const PredictionRecord> log) {
    if (log.empty()) {
        throw InvalidArgument("prediction log is empty");
    }
    const std::size_t k = log.front().ranking.size();
    if (k == 0) {
        throw InvalidArgument("prediction log ranks no classes");
    }
    for (const auto& r : log) {
        validate_record(r, k);
    }
    return k;
}

PredictionRecord make_record(std::size_t true_class, const ClassificationResult& result, std::size_t run,
                             std::size_t index) {
    return {true_class, result.ranking, result.latency_ms, run, index};
}

ordered_json record_to_json(const PredictionRecord& record) {
    ordered_json ranking = ordered_json::array();
    for (const auto& e : record.ranking) {
        ranking.push_back(ordered_json{{"class", e.class_index}, {"score", e.score}});
    }
    return ordered_json{{"true", record.true_class},
                        {"ranking", std::move(ranking)},
                        {"latency_ms", record.latency_ms},
                        {"run", record.run_index},
                        {"index", record.sample_index}};
}

PredictionRecord record_from_json(const json& j) {
    PredictionRecord r;
    try {
        r.true_class = j.at("true").get<std::size_t>();
        for (const auto& e : j.at("ranking")) {
            r.ranking.push_back({e.at("class").get<std::size_t>(), e.at("score").get<float>()});
        }
        r.latency_ms = j.at("latency_ms").get<double>();
        r.run_index = j.at("run").get<std::size_t>();
        r.sample_index = j.at("index").get<std::size_t>();
    } catch (const json::exception& e) {
        throw InvalidArgument(fmt::format("bad prediction record: {}", e.what()));
    }
    return r;
}

std::string log_to_jsonl(std::span<const PredictionRecord> log) {
    std::string out;
    for (const auto& r : log) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

std::vector<PredictionRecord> log_from_jsonl(std::string_view text) {
    std::vector<PredictionRecord> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const std::string_view line = text.substr(pos, end - pos);
        if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
            json j;
            try {
                j = json::parse(line);
            } catch (const json::parse_error& e) {
                throw ParseError(fmt::format("bad JSON on log line starting here: {}", e.what()), pos);
            }
            try {
                out.push_back(record_from_json(j));
            } catch (const InvalidArgument& e) {
                throw ParseError(e.what(), pos);
            }
        }
        pos = end + 1;
    }
    return out;
}

void write_log(std::span<const PredictionRecord> log, const fs::path& path) {
    write_text(path, log_to_jsonl(log));
}

std::vector<PredictionRecord> read_log(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open prediction log {}", path.string()));
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return log_from_jsonl(buf.str());
}

std::size_t ConfusionMatrix::row_sum(std::size_t t) const noexcept {
    std::size_t s = 0;
    for (std::size_t p = 0; p < classes; ++p) {
        s += at(t, p);
    }
    return s;
}

std::size_t ConfusionMatrix::total() const noexcept {
    return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

ConfusionMatrix confusion_matrix(std::span<const PredictionRecord> log) {
    ConfusionMatrix m(log_class_count(log));
    for (const auto& r : log) {
        ++m.at(r.true_class, r.ranking.front().class_index);
    }
    return m;
}

std::size_t topk_hits(std::span<const PredictionRecord> log, std::size_t k) {
    const std::size_t classes = log_class_count(log);
    if (k < 1 || k > classes) {
        throw InvalidArgument(fmt::format("k = {} outside [1, {}]", k, classes));
    }
    return static_cast<std::size_t>(
        std::count_if(log.begin(), log.end(), [k](const PredictionRecord& r) { return rank_of_truth(r) < k; }));
}

double topk_accuracy(std::span<const PredictionRecord> log, std::size_t k) {
    return static_cast<double>(topk_hits(log, k)) / static_cast<double>(log.size());
}

std::vector<double> cmc_curve(std::span<const PredictionRecord> log, std::optional<std::size_t> class_filter) {
    const std::size_t classes = log_class_count(log);
    if (class_filter && *class_filter >= classes) {
        throw InvalidArgument(fmt::format("class filter {} outside {} classes", *class_filter, classes));
    }
    std::vector<std::size_t> at_rank(classes, 0);
    std::size_t n = 0;
    for (const auto& r : log) {
        if (class_filter && r.true_class != *class_filter) {
            continue;
        }
        ++at_rank[rank_of_truth(r)];
        ++n;
    }
    if (n == 0) {
        throw InvalidArgument(fmt::format("no records with true class {}", *class_filter));
    }
    std::vector<double> curve(classes);
    std::size_t running = 0;
    for (std::size_t i = 0; i < classes; ++i) {
        running += at_rank[i];
        curve[i] = static_cast<double>(running) / static_cast<double>(n);
    }
    return curve;
}

std::string_view marking_name(Marking marking) {
    switch (marking) {
    case Marking::green:
        return "green";
    case Marking::blue:
        return "blue";
    case Marking::red:
        return "red";
    default:
        return "untested";
    }
}

Marking marking_for(double accuracy) {
    if (accuracy > 0.9) {
        return Marking::green;
    }
    if (accuracy > 0.5) {
        return Marking::blue;
    }
    return Marking::red;
}

std::vector<Marking> class_markings(const ConfusionMatrix& confusion) {
    if (confusion.classes == 0 || confusion.counts.size() != confusion.classes * confusion.classes) {
        throw InvalidArgument("confusion matrix is empty or malformed");
    }
    std::vector<Marking> out;
    for (std::size_t t = 0; t < confusion.classes; ++t) {
        const std::size_t n = confusion.row_sum(t);
        out.push_back(n == 0 ? Marking::untested
                             : marking_for(static_cast<double>(confusion.at(t, t)) / static_cast<double>(n)));
    }
    return out;
}

TimingStats timing_stats(std::span<const PredictionRecord> log) {
    if (log.empty()) {
        throw InvalidArgument("no timing samples");
    }
    std::map<std::size_t, std::vector<const PredictionRecord*>> runs;
    for (const auto& r : log) {
        runs[r.run_index].push_back(&r);
    }
    TimingStats stats;
    stats.samples = log.size();
    std::vector<double> all, firsts, steady;
    for (auto& [run, records] : runs) {
        std::stable_sort(records.begin(), records.end(),
                         [](const auto* a, const auto* b) { return a->sample_index < b->sample_index; });
        std::vector<double> lat;
        for (const auto* r : records) {
            lat.push_back(r->latency_ms);
        }
        stats.per_run_means.push_back(mean_of(lat));
        firsts.push_back(lat.front());
        steady.insert(steady.end(), lat.begin() + 1, lat.end());
        all.insert(all.end(), lat.begin(), lat.end());
    }
    stats.overall_mean = mean_of(all);
    stats.first_sample_mean = mean_of(firsts);
    if (!steady.empty()) {
        stats.steady_state_mean = mean_of(steady);
    }
    return stats;
}

Clock steady_clock_ms() {
    return [] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now().time_since_epoch()).count();
    };
}

BenchResult bench_propagation(const Model& model, std::span<const LabeledImage> images, std::size_t runs,
                              const Clock& clock) {
    if (runs == 0) {
        throw InvalidArgument("runs must be >= 1");
    }
    if (images.empty()) {
        throw InvalidArgument("no images to benchmark");
    }
    if (!clock) {
        throw InvalidArgument("no clock supplied");
    }
    BenchResult out;
    out.samples.reserve(runs * images.size());
    for (std::size_t run = 0; run < runs; ++run) {
        for (std::size_t i = 0; i < images.size(); ++i) {
            const double start = clock();
            const Tensor scores = forward_scores(model, images[i].image);
            const double stop = clock();
            if (stop < start) {
                throw InvalidArgument("clock went backwards");
            }
            PredictionRecord rec{images[i].label, rank_scores(scores.data()), stop - start, run, i};
            out.samples.push_back(std::move(rec));
        }
    }
    out.timing = timing_stats(out.samples);
    return out;
}

double slowdown_ratio(double slow_mean_ms, double fast_mean_ms) {
    if (!(fast_mean_ms > 0.0) || !(slow_mean_ms >= 0.0)) {
        throw InvalidArgument("slowdown ratio needs a positive baseline and a nonnegative mean");
    }
    return slow_mean_ms / fast_mean_ms;
}

double EvaluationReport::top1() const noexcept {
    return samples == 0 ? 0.0 : static_cast<double>(topk_hits.at(0)) / static_cast<double>(samples);
}

double EvaluationReport::top3() const noexcept {
    if (samples == 0 || topk_hits.empty()) {
        return 0.0;
    }
    const std::size_t k = std::min<std::size_t>(3, topk_hits.size());
    return static_cast<double>(topk_hits[k - 1]) / static_cast<double>(samples);
}

EvaluationReport build_report(std::span<const PredictionRecord> log, std::vector<std::string> class_names) {
    const std::size_t classes = log_class_count(log);
    if (class_names.size() != classes) {
        throw InvalidArgument(
            fmt::format("log ranks {} classes but {} class names were given", classes, class_names.size()));
    }
    EvaluationReport rep;
    rep.class_names = std::move(class_names);
    rep.samples = log.size();
    rep.confusion_top1 = confusion_matrix(log);
    for (std::size_t k = 1; k <= classes; ++k) {
        rep.topk_hits.push_back(topk_hits(log, k));
    }
    rep.cmc = cmc_curve(log);
    rep.class_samples.assign(classes, 0);
    rep.class_top3_hits.assign(classes, 0);
    const std::size_t top3 = std::min<std::size_t>(3, classes);
    for (const auto& r : log) {
        ++rep.class_samples[r.true_class];
        if (rank_of_truth(r) < top3) {
            ++rep.class_top3_hits[r.true_class];
        }
    }
    for (std::size_t c = 0; c < classes; ++c) {
        rep.class_cmc.push_back(rep.class_samples[c] == 0 ? std::nullopt
                                                          : std::optional(cmc_curve(log, c)));
    }
    rep.markings = class_markings(rep.confusion_top1);
    rep.timing = timing_stats(log);
    return rep;
}

void render_report(const EvaluationReport& report, const fs::path& out_dir) {
    const std::size_t classes = report.class_names.size();
    if (classes == 0 || report.confusion_top1.classes != classes || report.markings.size() != classes ||
        report.class_cmc.size() != classes || report.class_samples.size() != classes ||
        report.class_top3_hits.size() != classes) {
        throw InvalidArgument("report fields disagree on the number of classes");
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) {
        throw IoError(fmt::format("cannot create report directory {}", out_dir.string()));
    }

    std::string confusion = "true\\predicted";
    for (const auto& name : report.class_names) {
        confusion += "," + csv_field(name);
    }
    confusion += "\n";
    for (std::size_t t = 0; t < classes; ++t) {
        confusion += csv_field(report.class_names[t]);
        for (std::size_t p = 0; p < classes; ++p) {
            confusion += fmt::format(",{}", report.confusion_top1.at(t, p));
        }
        confusion += "\n";
    }
    write_text(out_dir / "confusion.csv", confusion);

    std::string markings = "class,samples,top1_correct,top1_accuracy,top3_accuracy,marking\n";
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t n = report.class_samples[c];
        const std::size_t hit = report.confusion_top1.at(c, c);
        const auto ratio = [n](std::size_t h) { return n == 0 ? std::string{} : fixed(static_cast<double>(h) / static_cast<double>(n)); };
        markings += fmt::format("{},{},{},{},{},{}\n", csv_field(report.class_names[c]), n, hit, ratio(hit),
                                ratio(report.class_top3_hits[c]), marking_name(report.markings[c]));
    }
    write_text(out_dir / "markings.csv", markings);

    std::string cmc = "class";
    for (std::size_t r = 1; r <= classes; ++r) {
        cmc += fmt::format(",rank{}", r);
    }
    cmc += "\n";
    const auto cmc_row = [&](const std::string& label, const std::optional<std::vector<double>>& curve) {
        std::string row = csv_field(label);
        for (std::size_t r = 0; r < classes; ++r) {
            row += ",";
            if (curve) {
                row += fixed((*curve)[r]);
            }
        }
        return row + "\n";
    };
    for (std::size_t c = 0; c < classes; ++c) {
        cmc += cmc_row(report.class_names[c], report.class_cmc[c]);
    }
    cmc += cmc_row("(all)", report.cmc);
    write_text(out_dir / "cmc.csv", cmc);

    ordered_json timing{{"samples", report.timing.samples},
                        {"runs", report.timing.per_run_means.size()},
                        {"per_run_means_ms", report.timing.per_run_means},
                        {"overall_mean_ms", report.timing.overall_mean},
                        {"first_sample_mean_ms", report.timing.first_sample_mean},
                        {"steady_state_mean_ms", nullptr}};
    if (report.timing.steady_state_mean) {
        timing["steady_state_mean_ms"] = *report.timing.steady_state_mean;
    }
    write_text(out_dir / "timing.json", timing.dump(2) + "\n");

    std::string summary;
    summary += fmt::format("samples: {}\nclasses: {}\n", report.samples, classes);
    for (std::size_t k = 1; k <= std::min<std::size_t>(5, report.topk_hits.size()); ++k) {
        const std::size_t hits = report.topk_hits[k - 1];
        summary += fmt::format("top-{} accuracy: {} ({}/{})\n", k,
                               fixed(static_cast<double>(hits) / static_cast<double>(report.samples)), hits,
                               report.samples);
    }
    summary += "\nper-class top-1:\n";
    for (std::size_t c = 0; c < classes; ++c) {
        summary += fmt::format("  {:<14} {:>4}/{:<4} {}\n", report.class_names[c], report.confusion_top1.at(c, c),
                               report.class_samples[c], marking_name(report.markings[c]));
    }
    summary += fmt::format("\nlatency: overall mean {} ms, first-sample mean {} ms", fixed(report.timing.overall_mean),
                           fixed(report.timing.first_sample_mean));
    if (report.timing.steady_state_mean) {
        summary += fmt::format(", steady-state mean {} ms", fixed(*report.timing.steady_state_mean));
    }
    summary += "\n";
    write_text(out_dir / "summary.txt", summary);
}

} // namespace produce
