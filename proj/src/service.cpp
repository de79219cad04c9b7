#include "produce/service.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>

#include "produce/base64.hpp"
#include "produce/dataset.hpp"
#include "produce/error.hpp"

namespace produce {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

Reply error_reply(int status, std::string_view code, std::string_view message) {
    return {status, ordered_json{{"code", code}, {"message", message}}};
}

Reply kiosk_error_reply(const KioskError& e) {
    const int status = e.code() == "unknown_product" ? 400 : 409;
    return error_reply(status, e.code(), e.what());
}

std::optional<json> parse_body(const std::string& body) {
    try {
        json j = json::parse(body);
        if (j.is_object()) {
            return j;
        }
    } catch (const json::parse_error&) {
    }
    return std::nullopt;
}

} // namespace

ordered_json session_view(const KioskSession& s) {
    ordered_json candidates = ordered_json::array();
    if (s.candidates) {
        for (const auto& c : *s.candidates) {
            candidates.push_back(ordered_json{{"class_id", c.product.class_id},
                                              {"name", c.product.display_name},
                                              {"score", c.score},
                                              {"price_per_kg", static_cast<double>(c.product.price_per_kg_cents) / 100.0}});
        }
    }
    ordered_json view{{"session_id", s.session_id},
                      {"state", state_name(s.state)},
                      {"weight_g", nullptr},
                      {"candidates", std::move(candidates)},
                      {"selected_class_id", nullptr},
                      {"label", nullptr},
                      {"error_note", nullptr}};
    if (s.stable_weight_g) {
        view["weight_g"] = *s.stable_weight_g;
    }
    if (s.selected) {
        view["selected_class_id"] = s.selected->class_id;
    }
    if (s.label) {
        view["label"] = label_to_json(*s.label);
    }
    if (!s.error_note.empty()) {
        view["error_note"] = s.error_note;
    }
    return view;
}

ServiceOptions model_service_options(Model model, Catalog catalog, fs::path labels_path, fs::path captures_dir) {
    ServiceOptions o;
    o.class_names = model.spec().class_names;
    o.input_height = model.spec().input_shape.height;
    o.input_width = model.spec().input_shape.width;
    auto shared = std::make_shared<const Model>(std::move(model));
    o.classifier = [shared](const Tensor& image) { return forward(*shared, image); };
    o.catalog = std::move(catalog);
    o.labels_path = std::move(labels_path);
    o.captures_dir = std::move(captures_dir);
    return o;
}

struct KioskService::Impl {
    struct Job {
        IdentificationTicket ticket;
        Tensor image;
    };

    ServiceOptions options;
    mutable std::mutex mutex; // guards session, last_capture and the journal
    KioskSession session;
    std::string last_capture;

    std::mutex queue_mutex;
    std::condition_variable queue_cv;
    std::deque<Job> jobs;
    bool stopping = false;
    std::thread worker;

    httplib::Server server;
    std::thread http_thread;
    bool bound = false;

    explicit Impl(ServiceOptions o) : options(std::move(o)) {
        if (!options.classifier) {
            throw InvalidArgument("service needs a classifier");
        }
        if (options.labels_path.empty()) {
            throw InvalidArgument("labels: a label journal path is required");
        }
        if (!options.captures_dir.empty() && !fs::is_directory(options.captures_dir)) {
            throw InvalidArgument(
                fmt::format("captures: {} is not a directory", options.captures_dir.string()));
        }
        worker = std::thread([this] { work(); });
    }

    ~Impl() {
        {
            std::lock_guard lock(queue_mutex);
            stopping = true;
        }
        queue_cv.notify_all();
        if (worker.joinable()) {
            worker.join();
        }
    }

    void work() {
        for (;;) {
            Job job;
            {
                std::unique_lock lock(queue_mutex);
                queue_cv.wait(lock, [this] { return stopping || !jobs.empty(); });
                if (stopping) {
                    return;
                }
                job = std::move(jobs.front());
                jobs.pop_front();
            }
            {
                std::lock_guard lock(mutex);
                if (!ticket_is_current(session, job.ticket)) {
                    continue;
                }
            }
            IdentificationOutcome outcome;
            try {
                outcome.result = options.classifier(job.image);
            } catch (const std::exception& e) {
                outcome.error = e.what();
            }
            std::lock_guard lock(mutex);
            session = complete_identification(session, job.ticket, outcome, options.class_names, options.catalog);
        }
    }

    // Next capture file after the last one used, in name order. Caller holds `mutex`.
    std::optional<fs::path> next_capture() {
        if (options.captures_dir.empty()) {
            return std::nullopt;
        }
        std::optional<fs::path> best;
        for (const auto& e : fs::directory_iterator(options.captures_dir)) {
            const std::string name = e.path().filename().string();
            if (!e.is_regular_file() || e.path().extension() != ".ppm" || name <= last_capture) {
                continue;
            }
            if (!best || name < best->filename().string()) {
                best = e.path();
            }
        }
        if (best) {
            last_capture = best->filename().string();
        }
        return best;
    }

    Tensor fit_input(const Tensor& image) const {
        if (image.shape().size() == 3 && image.shape()[0] == options.input_height &&
            image.shape()[1] == options.input_width) {
            return image;
        }
        return resize_nearest(image, options.input_height, options.input_width);
    }
};

KioskService::KioskService(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {
    auto& srv = impl_->server;
    const auto send = [](httplib::Response& res, const Reply& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    srv.Get("/api/catalog", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_catalog()); });
    srv.Get("/api/session", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_session()); });
    srv.Post("/api/scale",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_scale(req.body)); });
    srv.Post("/api/session/select",
             [this, send](const httplib::Request& req, httplib::Response& res) { send(res, post_select(req.body)); });
    srv.Post("/api/session/print",
             [this, send](const httplib::Request&, httplib::Response& res) { send(res, post_print()); });
    srv.Post("/api/session/cancel",
             [this, send](const httplib::Request&, httplib::Response& res) { send(res, post_cancel()); });
    srv.Get("/api/search", [this, send](const httplib::Request& req, httplib::Response& res) {
        send(res, get_search(req.has_param("q") ? req.get_param_value("q") : std::string{}));
    });
    srv.Get("/api/labels", [this, send](const httplib::Request&, httplib::Response& res) { send(res, get_labels()); });
    srv.set_exception_handler([send](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        send(res, error_reply(500, "internal", what));
    });
}

KioskService::~KioskService() { stop(); }

int KioskService::bind(const std::string& host, int port) {
    int bound = -1;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
    } else if (impl_->server.bind_to_port(host, port)) {
        bound = port;
    }
    if (bound <= 0) {
        throw IoError(fmt::format("port: cannot listen on {}:{}", host, port));
    }
    impl_->bound = true;
    return bound;
}

void KioskService::run() {
    if (!impl_->bound) {
        throw InvalidArgument("bind() must be called before run()");
    }
    impl_->server.listen_after_bind();
}

void KioskService::start() {
    if (!impl_->bound) {
        throw InvalidArgument("bind() must be called before start()");
    }
    impl_->http_thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void KioskService::stop() {
    if (!impl_) {
        return;
    }
    if (impl_->bound) {
        impl_->server.stop();
    }
    if (impl_->http_thread.joinable()) {
        impl_->http_thread.join();
    }
}

KioskSession KioskService::snapshot() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->session;
}

Reply KioskService::get_catalog() const { return {200, catalog_to_json(impl_->options.catalog)}; }

Reply KioskService::get_session() const { return {200, session_view(snapshot())}; }

Reply KioskService::post_scale(const std::string& body) {
    const auto j = parse_body(body);
    if (!j || !j->contains("weight_g") || !(*j)["weight_g"].is_number()) {
        return error_reply(400, "bad_request", "Expected a JSON object with a numeric weight_g.");
    }
    const double grams = (*j)["weight_g"].get<double>();
    if (!(grams >= 0.0)) {
        return error_reply(400, "bad_request", "weight_g must be nonnegative.");
    }
    std::optional<Tensor> uploaded;
    if (j->contains("image_b64") && !(*j)["image_b64"].is_null()) {
        if (!(*j)["image_b64"].is_string()) {
            return error_reply(400, "bad_request", "image_b64 must be a base64 string.");
        }
        try {
            const auto bytes = base64::decode((*j)["image_b64"].get<std::string>());
            uploaded = decode_ppm(bytes);
        } catch (const std::exception& e) {
            return error_reply(400, "bad_image", fmt::format("image_b64 is not a base64 P6 image: {}", e.what()));
        }
    }

    std::lock_guard lock(impl_->mutex);
    const KioskSession before = impl_->session;
    KioskSession next = on_scale_reading(before, {grams, impl_->options.clocks.monotonic_ms()});
    if (next.state == KioskState::classifying && next.epoch != before.epoch) {
        const IdentificationTicket ticket = begin_identification(next);
        std::optional<Tensor> image;
        std::string problem;
        try {
            if (uploaded) {
                image = impl_->fit_input(*uploaded);
            } else if (const auto path = impl_->next_capture()) {
                image = impl_->fit_input(read_ppm(*path));
            } else {
                problem = "no camera image available";
            }
        } catch (const std::exception& e) {
            problem = e.what();
        }
        if (image) {
            {
                std::lock_guard qlock(impl_->queue_mutex);
                impl_->jobs.push_back({ticket, std::move(*image)});
            }
            impl_->queue_cv.notify_one();
        } else {
            next = complete_identification(next, ticket, {std::nullopt, problem}, impl_->options.class_names,
                                           impl_->options.catalog);
        }
    }
    impl_->session = next;
    return {202, session_view(next)};
}

Reply KioskService::post_select(const std::string& body) {
    const auto j = parse_body(body);
    if (!j || !j->contains("class_id") || !(*j)["class_id"].is_string()) {
        return error_reply(400, "bad_request", "Expected a JSON object with a string class_id.");
    }
    std::lock_guard lock(impl_->mutex);
    try {
        impl_->session = select_product(impl_->session, impl_->options.catalog, (*j)["class_id"].get<std::string>());
    } catch (const KioskError& e) {
        return kiosk_error_reply(e);
    }
    return {200, session_view(impl_->session)};
}

Reply KioskService::post_print() {
    std::lock_guard lock(impl_->mutex);
    try {
        auto [next, label] = print_label(impl_->session, impl_->options.clocks);
        append_label(impl_->options.labels_path, label);
        impl_->session = std::move(next);
        return {200, label_to_json(label)};
    } catch (const KioskError& e) {
        return kiosk_error_reply(e);
    } catch (const IoError& e) {
        return error_reply(500, "journal_unavailable", e.what());
    }
}

Reply KioskService::post_cancel() {
    std::lock_guard lock(impl_->mutex);
    impl_->session = cancel_session(impl_->session);
    return {200, session_view(impl_->session)};
}

Reply KioskService::get_search(const std::string& query) const {
    ordered_json out = ordered_json::array();
    for (const auto& p : search_products(impl_->options.catalog, query)) {
        out.push_back(product_to_json(p));
    }
    return {200, std::move(out)};
}

Reply KioskService::get_labels() const {
    std::vector<LabelRecord> labels;
    {
        std::lock_guard lock(impl_->mutex);
        labels = read_labels(impl_->options.labels_path);
    }
    ordered_json out = ordered_json::array();
    for (const auto& l : labels) {
        out.push_back(label_to_json(l));
    }
    return {200, std::move(out)};
}

} // namespace produce
