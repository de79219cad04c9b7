#include "produce/kiosk.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "produce/error.hpp"

namespace produce {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::int64_t cents_from_json(const json& v) {
    if (v.is_string()) {
        return parse_cents(v.get<std::string>());
    }
    if (!v.is_number()) {
        throw InvalidArgument("price must be a number or a decimal string");
    }
    const double d = v.get<double>();
    const double scaled = d * 100.0;
    const double rounded = std::round(scaled);
    if (!std::isfinite(d) || std::fabs(scaled - rounded) > 1e-6 * std::max(1.0, std::fabs(scaled))) {
        throw InvalidArgument(fmt::format("price {} has more than two fraction digits", d));
    }
    return static_cast<std::int64_t>(rounded);
}

// Nearest double; prints back with at most two decimals.
double cents_as_number(std::int64_t cents) { return static_cast<double>(cents) / 100.0; }

// Idle with nothing carried over except the session counter.
KioskSession reset(const KioskSession& s) {
    KioskSession out;
    out.session_id = s.session_id;
    out.epoch = s.epoch + 1;
    return out;
}

KioskSession restart_weighing(const KioskSession& s, const ScaleReading& r, std::string note = {}) {
    KioskSession out = reset(s);
    out.state = KioskState::weighing;
    out.started_at_ms = s.started_at_ms;
    out.stable_weight_g = r.grams;
    out.window = {r};
    out.error_note = std::move(note);
    return out;
}

[[noreturn]] void bad_transition(const KioskSession& s, std::string_view action) {
    throw KioskError("invalid_transition",
                     fmt::format("Cannot {} while the kiosk is {}.", action, state_name(s.state)));
}

} // namespace

std::int64_t parse_cents(std::string_view text) {
    const auto fail = [&] { return InvalidArgument(fmt::format("'{}' is not a price with up to two decimals", text)); };
    if (text.empty()) {
        throw fail();
    }
    std::int64_t units = 0;
    std::size_t i = 0;
    std::size_t int_digits = 0;
    for (; i < text.size() && text[i] != '.'; ++i, ++int_digits) {
        if (text[i] < '0' || text[i] > '9' || int_digits >= 12) {
            throw fail();
        }
        units = units * 10 + (text[i] - '0');
    }
    std::int64_t frac = 0;
    std::size_t frac_digits = 0;
    if (i < text.size()) {
        ++i;
        for (; i < text.size(); ++i, ++frac_digits) {
            if (text[i] < '0' || text[i] > '9' || frac_digits >= 2) {
                throw fail();
            }
            frac = frac * 10 + (text[i] - '0');
        }
        if (frac_digits == 0) {
            throw fail();
        }
    }
    if (int_digits == 0) {
        throw fail();
    }
    if (frac_digits == 1) {
        frac *= 10;
    }
    return units * 100 + frac;
}

std::string format_cents(std::int64_t cents) {
    const char* sign = cents < 0 ? "-" : "";
    const std::uint64_t mag = cents < 0 ? static_cast<std::uint64_t>(-(cents + 1)) + 1 : static_cast<std::uint64_t>(cents);
    return fmt::format("{}{}.{:02}", sign, mag / 100, mag % 100);
}

const Product* Catalog::find(std::string_view class_id) const noexcept {
    for (const auto& p : products) {
        if (p.class_id == class_id) {
            return &p;
        }
    }
    return nullptr;
}

Catalog catalog_from_json(const json& j) {
    if (!j.is_array()) {
        throw InvalidArgument("catalog must be a JSON array of products");
    }
    Catalog c;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const json& e = j[i];
        Product p;
        try {
            p.class_id = e.at("class_id").get<std::string>();
            p.display_name = e.at("display_name").get<std::string>();
            p.price_per_kg_cents = cents_from_json(e.at("price_per_kg"));
            p.frequent = e.value("frequent", false);
        } catch (const json::exception& ex) {
            throw InvalidArgument(fmt::format("catalog entry {}: {}", i, ex.what()));
        }
        if (p.class_id.empty() || p.display_name.empty()) {
            throw InvalidArgument(fmt::format("catalog entry {}: class_id and display_name must be nonempty", i));
        }
        if (p.price_per_kg_cents <= 0) {
            throw InvalidArgument(fmt::format("catalog entry {} ({}): price_per_kg must be positive", i, p.class_id));
        }
        if (c.find(p.class_id) != nullptr) {
            throw InvalidArgument(fmt::format("catalog lists class_id '{}' twice", p.class_id));
        }
        c.products.push_back(std::move(p));
    }
    return c;
}

ordered_json product_to_json(const Product& p) {
    return ordered_json{{"class_id", p.class_id},
                        {"display_name", p.display_name},
                        {"price_per_kg", cents_as_number(p.price_per_kg_cents)},
                        {"frequent", p.frequent}};
}

ordered_json catalog_to_json(const Catalog& catalog) {
    ordered_json out = ordered_json::array();
    for (const auto& p : catalog.products) {
        out.push_back(product_to_json(p));
    }
    return out;
}

Catalog load_catalog(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open catalog {}", path.string()));
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(fmt::format("catalog {} is not valid JSON", path.string()), e.byte);
    }
    return catalog_from_json(j);
}

std::vector<Product> search_products(const Catalog& catalog, std::string_view query) {
    const auto by_name = [](const Product& a, const Product& b) {
        const auto la = lower(a.display_name);
        const auto lb = lower(b.display_name);
        return la != lb ? la < lb : a.display_name < b.display_name;
    };
    std::vector<Product> prefix, interior;
    const std::string q = lower(query);
    for (const auto& p : catalog.products) {
        if (q.empty()) {
            if (p.frequent) {
                prefix.push_back(p);
            }
            continue;
        }
        const auto at = lower(p.display_name).find(q);
        if (at == 0) {
            prefix.push_back(p);
        } else if (at != std::string::npos) {
            interior.push_back(p);
        }
    }
    std::stable_sort(prefix.begin(), prefix.end(), by_name);
    std::stable_sort(interior.begin(), interior.end(), by_name);
    prefix.insert(prefix.end(), interior.begin(), interior.end());
    return prefix;
}

std::string_view state_name(KioskState state) {
    switch (state) {
    case KioskState::idle:
        return "idle";
    case KioskState::weighing:
        return "weighing";
    case KioskState::classifying:
        return "classifying";
    case KioskState::presenting:
        return "presenting";
    case KioskState::printed:
        return "printed";
    }
    return "unknown";
}

std::int64_t label_total_cents(std::int64_t weight_mg, std::int64_t price_per_kg_cents) {
    if (weight_mg < 0 || price_per_kg_cents < 0) {
        throw InvalidArgument("weight and price must be nonnegative");
    }
    // mg * cents/kg = 1e-6 cents; add half a cent before truncating
    return (weight_mg * price_per_kg_cents + 500000) / 1000000;
}

ordered_json label_to_json(const LabelRecord& l) {
    return ordered_json{{"timestamp", l.timestamp},
                        {"session_id", l.session_id},
                        {"class_id", l.class_id},
                        {"name", l.name},
                        {"weight_g", static_cast<double>(l.weight_mg) / 1000.0},
                        {"price_per_kg", cents_as_number(l.unit_price_cents)},
                        {"total_price", cents_as_number(l.total_cents)}};
}

LabelRecord label_from_json(const json& j) {
    LabelRecord l;
    try {
        l.timestamp = j.at("timestamp").get<std::string>();
        l.session_id = j.at("session_id").get<std::uint64_t>();
        l.class_id = j.at("class_id").get<std::string>();
        l.name = j.at("name").get<std::string>();
        l.weight_mg = std::llround(j.at("weight_g").get<double>() * 1000.0);
        l.unit_price_cents = cents_from_json(j.at("price_per_kg"));
        l.total_cents = cents_from_json(j.at("total_price"));
    } catch (const json::exception& e) {
        throw InvalidArgument(fmt::format("bad label record: {}", e.what()));
    }
    return l;
}

void append_label(const fs::path& journal, const LabelRecord& label) {
    std::ofstream out(journal, std::ios::binary | std::ios::app);
    if (!out) {
        throw IoError(fmt::format("cannot open label journal {}", journal.string()));
    }
    out << label_to_json(label).dump() << '\n';
    out.flush();
    if (!out) {
        throw IoError(fmt::format("failed appending to label journal {}", journal.string()));
    }
}

std::vector<LabelRecord> read_labels(const fs::path& journal) {
    std::vector<LabelRecord> out;
    if (!fs::exists(journal)) {
        return out;
    }
    std::ifstream in(journal, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open label journal {}", journal.string()));
    }
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            try {
                out.push_back(label_from_json(json::parse(line)));
            } catch (const std::exception& e) {
                throw ParseError(fmt::format("bad label journal line: {}", e.what()), offset);
            }
        }
        offset += line.size() + 1;
    }
    return out;
}

void check_invariants(const KioskSession& s) {
    const auto fail = [&](std::string_view what) {
        throw std::logic_error(fmt::format("session {} in {}: {}", s.session_id, state_name(s.state), what));
    };
    const bool idle = s.state == KioskState::idle;
    const bool shown = s.state == KioskState::presenting || s.state == KioskState::printed;
    const bool printed = s.state == KioskState::printed;
    if (s.stable_weight_g.has_value() == idle) {
        fail("weight must be present exactly outside Idle");
    }
    if (s.started_at_ms.has_value() == idle) {
        fail("start time must be present exactly outside Idle");
    }
    if (s.candidates.has_value() != shown) {
        fail("candidates only in Presenting/Printed");
    }
    if (s.selected && !shown) {
        fail("selection only in Presenting/Printed");
    }
    if (s.label.has_value() != printed || s.printed_at_ms.has_value() != printed) {
        fail("label and print time only in Printed");
    }
    if (printed && !s.selected) {
        fail("printed without a selection");
    }
    if (s.candidates && s.candidates->size() > kCandidateCount) {
        fail("more than three candidates");
    }
}

KioskSession on_scale_reading(const KioskSession& s, const ScaleReading& r) {
    if (!(r.grams >= 0.0) || !std::isfinite(r.grams)) {
        throw InvalidArgument(fmt::format("scale reading must be a nonnegative weight, got {}", r.grams));
    }
    if (s.state == KioskState::idle) {
        if (r.grams <= kTriggerGrams) {
            return s;
        }
        KioskSession out = reset(s);
        out.session_id = s.session_id + 1;
        out.state = KioskState::weighing;
        out.started_at_ms = r.timestamp_ms;
        out.stable_weight_g = r.grams;
        out.window = {r};
        return out;
    }
    if (r.grams < kRemovalGrams) {
        return reset(s);
    }
    switch (s.state) {
    case KioskState::weighing: {
        KioskSession out = s;
        out.window.push_back(r);
        if (out.window.size() > kStableReadings) {
            out.window.erase(out.window.begin());
        }
        out.stable_weight_g = r.grams;
        if (out.window.size() == kStableReadings) {
            const auto [lo, hi] = std::minmax_element(out.window.begin(), out.window.end(),
                                                      [](const auto& a, const auto& b) { return a.grams < b.grams; });
            if (hi->grams - lo->grams <= kStableSpreadGrams) {
                double sum = 0.0;
                for (const auto& w : out.window) {
                    sum += w.grams;
                }
                out.stable_weight_g = sum / static_cast<double>(kStableReadings);
                out.state = KioskState::classifying;
                out.epoch = s.epoch + 1;
                out.error_note.clear();
            }
        }
        return out;
    }
    case KioskState::classifying:
    case KioskState::presenting:
        if (std::fabs(r.grams - *s.stable_weight_g) > kDriftGrams) {
            return restart_weighing(s, r);
        }
        return s;
    default:
        return s; // Printed: the label stands until the item is lifted
    }
}

IdentificationTicket begin_identification(const KioskSession& s) {
    if (s.state != KioskState::classifying) {
        bad_transition(s, "start identification");
    }
    return {s.session_id, s.epoch};
}

bool ticket_is_current(const KioskSession& s, const IdentificationTicket& t) noexcept {
    return s.state == KioskState::classifying && s.session_id == t.session_id && s.epoch == t.epoch;
}

std::vector<Candidate> candidates_from_ranking(const std::vector<ScoredClass>& ranking,
                                               const std::vector<std::string>& class_names, const Catalog& catalog,
                                               std::size_t count) {
    std::vector<Candidate> out;
    for (const auto& entry : ranking) {
        if (out.size() == count) {
            break;
        }
        if (entry.class_index >= class_names.size()) {
            continue;
        }
        if (const Product* p = catalog.find(class_names[entry.class_index])) {
            out.push_back({*p, entry.score});
        }
    }
    return out;
}

KioskSession complete_identification(const KioskSession& s, const IdentificationTicket& ticket,
                                     const IdentificationOutcome& outcome,
                                     const std::vector<std::string>& class_names, const Catalog& catalog) {
    if (!ticket_is_current(s, ticket)) {
        return s;
    }
    if (!outcome.result) {
        const std::string note = outcome.error.empty() ? "Identification failed. Please place the item again."
                                                       : fmt::format("Identification failed: {}", outcome.error);
        KioskSession out = s;
        out.state = KioskState::weighing;
        out.window.clear();
        out.epoch = s.epoch + 1;
        out.error_note = note;
        return out;
    }
    KioskSession out = s;
    out.state = KioskState::presenting;
    out.candidates = candidates_from_ranking(outcome.result->ranking, class_names, catalog);
    out.error_note.clear();
    return out;
}

KioskSession start_identification(const KioskSession& s, const Tensor& image, const Classifier& classifier,
                                  const std::vector<std::string>& class_names, const Catalog& catalog) {
    const IdentificationTicket ticket = begin_identification(s);
    IdentificationOutcome outcome;
    try {
        outcome.result = classifier(image);
    } catch (const std::exception& e) {
        outcome.error = e.what();
    }
    return complete_identification(s, ticket, outcome, class_names, catalog);
}

KioskSession select_product(const KioskSession& s, const Catalog& catalog, std::string_view class_id) {
    if (s.state != KioskState::presenting) {
        bad_transition(s, "select a product");
    }
    const Product* p = catalog.find(class_id);
    if (p == nullptr) {
        throw KioskError("unknown_product", fmt::format("There is no product '{}' in the catalog.", class_id));
    }
    KioskSession out = s;
    out.selected = *p;
    return out;
}

KioskClocks system_clocks() {
    return {[] {
                return std::chrono::duration<double, std::milli>(
                           std::chrono::steady_clock::now().time_since_epoch())
                    .count();
            },
            [] {
                const auto now = std::chrono::system_clock::now();
                const std::time_t t = std::chrono::system_clock::to_time_t(now);
                const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
                std::tm tm{};
                gmtime_r(&t, &tm);
                return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}.{:03}Z", tm.tm_year + 1900, tm.tm_mon + 1,
                                   tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, ms);
            }};
}

std::pair<KioskSession, LabelRecord> print_label(const KioskSession& s, const KioskClocks& clocks) {
    if (s.state != KioskState::presenting) {
        bad_transition(s, "print a label");
    }
    if (!s.selected) {
        throw KioskError("no_selection", "Choose a product before printing the label.");
    }
    LabelRecord label;
    label.timestamp = clocks.wall_iso8601();
    label.session_id = s.session_id;
    label.class_id = s.selected->class_id;
    label.name = s.selected->display_name;
    label.weight_mg = std::llround(*s.stable_weight_g * 1000.0);
    label.unit_price_cents = s.selected->price_per_kg_cents;
    label.total_cents = label_total_cents(label.weight_mg, label.unit_price_cents);

    KioskSession out = s;
    out.state = KioskState::printed;
    out.printed_at_ms = std::max(clocks.monotonic_ms(), *s.started_at_ms);
    out.label = label;
    return {std::move(out), std::move(label)};
}

double session_duration(const KioskSession& s) {
    if (s.state != KioskState::printed) {
        throw KioskError("invalid_transition",
                         fmt::format("A session duration exists only after printing; the kiosk is {}.",
                                     state_name(s.state)));
    }
    return (*s.printed_at_ms - *s.started_at_ms) / 1000.0;
}

KioskSession cancel_session(const KioskSession& s) {
    return s.state == KioskState::idle ? s : reset(s);
}

} // namespace produce
