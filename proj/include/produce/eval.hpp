#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "produce/dataset.hpp"
#include "produce/model.hpp"

namespace produce {

/// One logged classification. `ranking` covers every class, best first.
struct PredictionRecord {
    std::size_t true_class = 0;
    std::vector<ScoredClass> ranking;
    double latency_ms = 0.0;
    std::size_t run_index = 0;
    std::size_t sample_index = 0;

    friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

// Throws InvalidArgument unless the ranking is a permutation of 0..K-1 with
// non-increasing scores, true_class < K and latency_ms >= 0.
void validate_record(const PredictionRecord& record, std::size_t num_classes);

// Number of classes shared by every record. Throws on an empty or mixed log.
std::size_t log_class_count(std::span<const PredictionRecord> log);

PredictionRecord make_record(std::size_t true_class, const ClassificationResult& result, std::size_t run,
                             std::size_t index);

// {"true", "ranking": [{"class", "score"}...], "latency_ms", "run", "index"}
nlohmann::ordered_json record_to_json(const PredictionRecord& record);
PredictionRecord record_from_json(const nlohmann::json& j);

// One JSON object per line. Parse errors carry the byte offset of the bad line.
std::string log_to_jsonl(std::span<const PredictionRecord> log);
std::vector<PredictionRecord> log_from_jsonl(std::string_view text);
void write_log(std::span<const PredictionRecord> log, const std::filesystem::path& path);
std::vector<PredictionRecord> read_log(const std::filesystem::path& path);

/// K x K tally, rows = true class, columns = rank-1 prediction.
struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::size_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t k) : classes(k), counts(k * k, 0) {}

    std::size_t at(std::size_t t, std::size_t p) const noexcept { return counts[t * classes + p]; }
    std::size_t& at(std::size_t t, std::size_t p) noexcept { return counts[t * classes + p]; }
    std::size_t row_sum(std::size_t t) const noexcept;
    std::size_t total() const noexcept;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion_matrix(std::span<const PredictionRecord> log);

// Records whose true class is among the first k ranking entries; 1 <= k <= K.
std::size_t topk_hits(std::span<const PredictionRecord> log, std::size_t k);
double topk_accuracy(std::span<const PredictionRecord> log, std::size_t k);

/// Entry r is the fraction of records (optionally only those of one true
/// class) whose truth sits within the first r + 1 ranks.
std::vector<double> cmc_curve(std::span<const PredictionRecord> log,
                              std::optional<std::size_t> class_filter = std::nullopt);

enum class Marking { green, blue, red, untested };

std::string_view marking_name(Marking marking);

// green: a > 0.9, blue: 0.5 < a <= 0.9, red: a <= 0.5.
Marking marking_for(double accuracy);

// Per-class rank-1 accuracy from the diagonal; empty rows are "untested".
std::vector<Marking> class_markings(const ConfusionMatrix& confusion);

struct TimingStats {
    std::vector<double> per_run_means; // ordered by run index
    double overall_mean = 0.0;
    double first_sample_mean = 0.0;   // mean of each run's first sample
    std::optional<double> steady_state_mean; // every sample except each run's first
    std::size_t samples = 0;
};

// Runs are grouped by run_index; a run's first sample has its lowest sample_index.
TimingStats timing_stats(std::span<const PredictionRecord> log);

// Milliseconds from an arbitrary origin; must not go backwards.
using Clock = std::function<double()>;
Clock steady_clock_ms();

struct BenchResult {
    std::vector<PredictionRecord> samples;
    TimingStats timing;
};

/// Forwards every image once per run, one at a time, timing each forward with
/// `clock`. Produces runs * images.size() records.
BenchResult bench_propagation(const Model& model, std::span<const LabeledImage> images, std::size_t runs,
                              const Clock& clock = steady_clock_ms());

// How many times slower `slow` is than `fast`.
double slowdown_ratio(double slow_mean_ms, double fast_mean_ms);

struct EvaluationReport {
    std::vector<std::string> class_names;
    std::size_t samples = 0;
    ConfusionMatrix confusion_top1;
    std::vector<std::size_t> topk_hits;        // index k - 1
    std::vector<double> cmc;                   // whole log
    std::vector<std::size_t> class_samples;
    std::vector<std::size_t> class_top3_hits;
    std::vector<std::optional<std::vector<double>>> class_cmc; // nullopt when untested
    std::vector<Marking> markings;
    TimingStats timing;

    double top1() const noexcept;
    double top3() const noexcept;
};

EvaluationReport build_report(std::span<const PredictionRecord> log, std::vector<std::string> class_names);

/// Writes confusion.csv, markings.csv, cmc.csv, timing.json and summary.txt
/// into `out_dir` (created if missing). Output bytes depend only on the report.
void render_report(const EvaluationReport& report, const std::filesystem::path& out_dir);

} // namespace produce
