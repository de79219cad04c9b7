#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "produce/model.hpp"

namespace produce {

// Money is integer cents throughout; "24.95" <-> 2495.
std::int64_t parse_cents(std::string_view decimal);
std::string format_cents(std::int64_t cents);

struct Product {
    std::string class_id; // matches a model class name
    std::string display_name;
    std::int64_t price_per_kg_cents = 0;
    bool frequent = false;

    friend bool operator==(const Product&, const Product&) = default;
};

struct Catalog {
    std::vector<Product> products;

    const Product* find(std::string_view class_id) const noexcept;
};

/// JSON array of {class_id, display_name, price_per_kg, frequent}. price_per_kg
/// may be a number or a decimal string with at most two fraction digits.
Catalog catalog_from_json(const nlohmann::json& j);
nlohmann::ordered_json catalog_to_json(const Catalog& catalog);
nlohmann::ordered_json product_to_json(const Product& product);
Catalog load_catalog(const std::filesystem::path& path);

/// Case-insensitive substring match on display_name. Prefix matches come
/// first, then interior ones, each group in name order. An empty query lists
/// the frequent products.
std::vector<Product> search_products(const Catalog& catalog, std::string_view query);

struct ScaleReading {
    double grams = 0.0;
    double timestamp_ms = 0.0; // monotonic

    friend bool operator==(const ScaleReading&, const ScaleReading&) = default;
};

enum class KioskState { idle, weighing, classifying, presenting, printed };

std::string_view state_name(KioskState state);

struct Candidate {
    Product product;
    float score = 0.0f;

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct LabelRecord {
    std::string timestamp; // wall clock, ISO-8601
    std::uint64_t session_id = 0;
    std::string class_id;
    std::string name;
    std::int64_t weight_mg = 0;
    std::int64_t unit_price_cents = 0; // per kg
    std::int64_t total_cents = 0;

    friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

// round_half_up(weight_mg / 1e6 kg * price cents), exact in integers.
std::int64_t label_total_cents(std::int64_t weight_mg, std::int64_t price_per_kg_cents);

// {timestamp, session_id, class_id, name, weight_g, price_per_kg, total_price}
nlohmann::ordered_json label_to_json(const LabelRecord& label);
LabelRecord label_from_json(const nlohmann::json& j);

// Append-only JSON-lines journal.
void append_label(const std::filesystem::path& journal, const LabelRecord& label);
std::vector<LabelRecord> read_labels(const std::filesystem::path& journal);

inline constexpr double kTriggerGrams = 25.0;
inline constexpr double kStableSpreadGrams = 2.0;
inline constexpr std::size_t kStableReadings = 3;
inline constexpr double kRemovalGrams = 5.0;
inline constexpr double kDriftGrams = 50.0;
inline constexpr std::size_t kCandidateCount = 3;

/// Value type; every operation returns an updated copy and leaves its input
/// untouched, so a rejected request cannot half-apply.
struct KioskSession {
    std::uint64_t session_id = 0; // bumped each time the scale leaves Idle
    std::uint64_t epoch = 0;      // bumped on entering Classifying and on every reset
    KioskState state = KioskState::idle;
    // While Weighing this tracks the latest reading; from Classifying on it is
    // the mean of the stable window.
    std::optional<double> stable_weight_g;
    std::vector<ScaleReading> window;
    std::optional<std::vector<Candidate>> candidates;
    std::optional<Product> selected;
    std::optional<LabelRecord> label;
    std::optional<double> started_at_ms;
    std::optional<double> printed_at_ms;
    std::string error_note;

    friend bool operator==(const KioskSession&, const KioskSession&) = default;
};

// Throws std::logic_error naming the first broken invariant.
void check_invariants(const KioskSession& session);

/// Rejected kiosk request. code() is "invalid_transition", "no_selection" or
/// "unknown_product"; what() is meant for the person at the kiosk.
class KioskError : public std::runtime_error {
public:
    KioskError(std::string code, const std::string& message) : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

KioskSession on_scale_reading(const KioskSession& session, const ScaleReading& reading);

// Identifies which classification a result belongs to.
struct IdentificationTicket {
    std::uint64_t session_id = 0;
    std::uint64_t epoch = 0;

    friend bool operator==(const IdentificationTicket&, const IdentificationTicket&) = default;
};

// Requires state Classifying.
IdentificationTicket begin_identification(const KioskSession& session);
bool ticket_is_current(const KioskSession& session, const IdentificationTicket& ticket) noexcept;

struct IdentificationOutcome {
    std::optional<ClassificationResult> result; // empty on failure
    std::string error;
};

// Top `count` ranking entries that exist in the catalog, unknown classes skipped.
std::vector<Candidate> candidates_from_ranking(const std::vector<ScoredClass>& ranking,
                                               const std::vector<std::string>& class_names, const Catalog& catalog,
                                               std::size_t count = kCandidateCount);

/// Delivers a classification. A stale ticket (cancelled, removed or re-weighed
/// since) returns the session unchanged. Failure goes back to Weighing with an
/// error note; success moves to Presenting. Never prints.
KioskSession complete_identification(const KioskSession& session, const IdentificationTicket& ticket,
                                     const IdentificationOutcome& outcome,
                                     const std::vector<std::string>& class_names, const Catalog& catalog);

using Classifier = std::function<ClassificationResult(const Tensor&)>;

// begin + classify + complete in one call.
KioskSession start_identification(const KioskSession& session, const Tensor& image, const Classifier& classifier,
                                  const std::vector<std::string>& class_names, const Catalog& catalog);

// Presenting only. Any catalog product may be chosen, not just the candidates.
KioskSession select_product(const KioskSession& session, const Catalog& catalog, std::string_view class_id);

struct KioskClocks {
    std::function<double()> monotonic_ms;
    std::function<std::string()> wall_iso8601;
};

KioskClocks system_clocks();

std::pair<KioskSession, LabelRecord> print_label(const KioskSession& session, const KioskClocks& clocks);

// Seconds from the reading that left Idle to printing. Printed only.
double session_duration(const KioskSession& session);

// Back to Idle from anywhere; a pending classification is discarded.
KioskSession cancel_session(const KioskSession& session);

} // namespace produce
