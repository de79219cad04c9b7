#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "produce/kiosk.hpp"
#include "produce/model.hpp"

namespace produce {

/// {session_id, state, weight_g, candidates: [{class_id, name, score,
/// price_per_kg}], selected_class_id, label, error_note}; absent values are null.
nlohmann::ordered_json session_view(const KioskSession& session);

struct ServiceOptions {
    Catalog catalog;
    std::vector<std::string> class_names;
    Classifier classifier;
    std::size_t input_height = 32; // camera images are resized to this
    std::size_t input_width = 32;
    std::filesystem::path labels_path;
    std::filesystem::path captures_dir; // stub camera; may be empty
    KioskClocks clocks = system_clocks();
};

// Options that classify with `model`.
ServiceOptions model_service_options(Model model, Catalog catalog, std::filesystem::path labels_path,
                                     std::filesystem::path captures_dir);

struct Reply {
    int status = 200;
    nlohmann::ordered_json body;
};

/// One kiosk behind an HTTP API. Every session mutation happens under one
/// mutex; classification runs on a worker thread and reports back through the
/// same lock, where stale results are dropped.
///
///   GET  /api/catalog           GET /api/session      GET /api/search?q=
///   POST /api/scale             POST /api/session/select
///   POST /api/session/print     POST /api/session/cancel
///   GET  /api/labels
class KioskService {
public:
    explicit KioskService(ServiceOptions options);
    ~KioskService();

    KioskService(const KioskService&) = delete;
    KioskService& operator=(const KioskService&) = delete;

    // Binds host:port (0 picks a free port) and returns the bound port.
    int bind(const std::string& host, int port);
    // Serves on the calling thread until stop().
    void run();
    // Serves on a background thread.
    void start();
    void stop();

    KioskSession snapshot() const;

    // Transport-independent handlers behind the routes.
    Reply get_catalog() const;
    Reply get_session() const;
    Reply post_scale(const std::string& body);
    Reply post_select(const std::string& body);
    Reply post_print();
    Reply post_cancel();
    Reply get_search(const std::string& query) const;
    Reply get_labels() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace produce
