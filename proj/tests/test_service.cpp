#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "produce/base64.hpp"
#include "produce/dataset.hpp"
#include "produce/error.hpp"
#include "produce/service.hpp"

using namespace produce;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kCatalog = fs::path(PRODUCE_SOURCE_DIR) / "data" / "catalog.json";

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("produce_service_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

ClassificationResult ranking_for(const std::vector<std::size_t>& top, std::size_t classes) {
    ClassificationResult r;
    std::vector<bool> used(classes, false);
    float score = 0.8f;
    for (std::size_t c : top) {
        r.ranking.push_back({c, score});
        used[c] = true;
        score /= 2.0f;
    }
    for (std::size_t c = 0; c < classes; ++c) {
        if (!used[c]) {
            r.ranking.push_back({c, 0.0f});
        }
    }
    return r;
}

// Blocks each classification until release() when gated.
struct GatedClassifier {
    std::mutex m;
    std::condition_variable cv;
    bool open = true;
    std::atomic<int> calls{0};

    void close() {
        std::lock_guard l(m);
        open = false;
    }
    void release() {
        {
            std::lock_guard l(m);
            open = true;
        }
        cv.notify_all();
    }
};

struct Harness {
    fs::path dir;
    std::shared_ptr<GatedClassifier> gate = std::make_shared<GatedClassifier>();
    std::unique_ptr<KioskService> service;
    std::unique_ptr<httplib::Client> client;
    double now = 1000.0;

    explicit Harness(const std::string& name, bool fresh = true, bool captures = false) {
        dir = fresh ? temp_dir(name) : fs::temp_directory_path() / ("produce_service_" + name);
        if (captures) {
            fs::create_directories(dir / "captures");
        }
        ServiceOptions o;
        o.catalog = load_catalog(kCatalog);
        o.class_names = canonical_class_names();
        auto gate_ref = gate;
        // banana, pear, apple
        o.classifier = [gate_ref](const Tensor& image) {
            EXPECT_EQ(image.shape(), (std::vector<std::size_t>{32, 32, 3}));
            std::unique_lock l(gate_ref->m);
            gate_ref->cv.wait(l, [&] { return gate_ref->open; });
            ++gate_ref->calls;
            return ranking_for({2, 7, 0}, 10);
        };
        o.labels_path = dir / "labels.jsonl";
        if (captures) {
            o.captures_dir = dir / "captures";
        }
        o.clocks = {[this] { return now += 250.0; }, [] { return std::string("2026-05-01T12:00:00.000Z"); }};
        service = std::make_unique<KioskService>(std::move(o));
        const int port = service->bind("127.0.0.1", 0);
        service->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(10, 0);
    }

    std::pair<int, json> get(const std::string& path) {
        auto r = client->Get(path);
        EXPECT_TRUE(r) << path;
        return {r->status, json::parse(r->body)};
    }

    std::pair<int, json> post(const std::string& path, const std::string& body = "{}") {
        auto r = client->Post(path, body, "application/json");
        EXPECT_TRUE(r) << path;
        return {r->status, json::parse(r->body)};
    }

    json wait_for(const std::string& state) {
        json view;
        for (int i = 0; i < 400; ++i) {
            view = get("/api/session").second;
            if (view["state"] == state) {
                return view;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        }
        ADD_FAILURE() << "never reached " << state << ", last " << view.dump();
        return view;
    }
};

std::string image_b64(std::size_t h = 32, std::size_t w = 32) {
    Tensor t({h, w, 3});
    for (std::size_t i = 0; i < t.data().size(); ++i) {
        t.data()[i] = static_cast<float>(i % 256) / 255.0f;
    }
    const auto bytes = encode_ppm(t);
    return base64::encode(bytes);
}

std::string scale_body(double grams, bool with_image = true) {
    json j{{"weight_g", grams}};
    if (with_image) {
        j["image_b64"] = image_b64();
    }
    return j.dump();
}

void reach_presenting(Harness& h) {
    EXPECT_EQ(h.post("/api/scale", scale_body(200.0)).first, 202);
    EXPECT_EQ(h.post("/api/scale", scale_body(201.0)).first, 202);
    EXPECT_EQ(h.post("/api/scale", scale_body(200.0)).first, 202);
    h.wait_for("presenting");
}

std::size_t journal_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) {
        n += !line.empty();
    }
    return n;
}

} // namespace

TEST(Service, IdleViewBeforeEvents) {
    Harness h("idle");
    const auto [status, view] = h.get("/api/session");
    EXPECT_EQ(status, 200);
    EXPECT_EQ(view["state"], "idle");
    EXPECT_TRUE(view["weight_g"].is_null());
    EXPECT_TRUE(view["label"].is_null());
    EXPECT_EQ(view["candidates"], json::array());
    // parsed json sorts keys; the raw body keeps the declared order
    const std::string raw = h.client->Get("/api/session")->body;
    EXPECT_LT(raw.find("session_id"), raw.find("state"));
    EXPECT_LT(raw.find("state"), raw.find("weight_g"));
    EXPECT_LT(raw.find("selected_class_id"), raw.find("error_note"));
    EXPECT_EQ(h.post("/api/session/cancel").first, 200);
}

TEST(Service, HappyPathWritesOneLabel) {
    Harness h("happy");
    reach_presenting(h);
    const json view = h.get("/api/session").second;
    ASSERT_EQ(view["candidates"].size(), 3u);
    EXPECT_EQ(view["candidates"][0]["class_id"], "banana");
    EXPECT_EQ(view["candidates"][1]["class_id"], "pear");
    EXPECT_EQ(view["candidates"][0]["price_per_kg"], 2.29);
    EXPECT_NEAR(view["weight_g"].get<double>(), 200.333, 0.001);
    EXPECT_EQ(h.post("/api/session/select", R"({"class_id":"pear"})").first, 200);
    const auto [status, label] = h.post("/api/session/print");
    EXPECT_EQ(status, 200);
    EXPECT_EQ(label["class_id"], "pear");
    EXPECT_EQ(label["total_price"], 0.76); // 0.200333 kg * 3.79
    EXPECT_EQ(h.get("/api/session").second["state"], "printed");
    const json labels = h.get("/api/labels").second;
    ASSERT_EQ(labels.size(), 1u);
    EXPECT_EQ(labels[0], label);
    EXPECT_EQ(journal_lines(h.dir / "labels.jsonl"), 1u);
    EXPECT_EQ(h.gate->calls.load(), 1);
    // lifting the item ends the session
    h.post("/api/scale", scale_body(0.0, false));
    EXPECT_EQ(h.get("/api/session").second["state"], "idle");
}

TEST(Service, PrintWithoutSelectionIs409AndChangesNothing) {
    Harness h("noselect");
    reach_presenting(h);
    const KioskSession before = h.service->snapshot();
    const auto [status, body] = h.post("/api/session/print");
    EXPECT_EQ(status, 409);
    EXPECT_EQ(body["code"], "no_selection");
    EXPECT_FALSE(body["message"].get<std::string>().empty());
    EXPECT_EQ(h.service->snapshot(), before);
    EXPECT_EQ(journal_lines(h.dir / "labels.jsonl"), 0u);

    Harness idle("idle409");
    const KioskSession empty = idle.service->snapshot();
    EXPECT_EQ(idle.post("/api/session/select", R"({"class_id":"pear"})").first, 409);
    EXPECT_EQ(idle.post("/api/session/print").second["code"], "invalid_transition");
    EXPECT_EQ(idle.service->snapshot(), empty);
}

TEST(Service, MalformedPayloadsAre400) {
    Harness h("malformed");
    const KioskSession before = h.service->snapshot();
    EXPECT_EQ(h.post("/api/scale", "not json").first, 400);
    EXPECT_EQ(h.post("/api/scale", R"({"grams": 100})").first, 400);
    EXPECT_EQ(h.post("/api/scale", R"({"weight_g": -3})").first, 400);
    const auto [status, body] = h.post("/api/scale", R"({"weight_g": 100, "image_b64": "!!!"})");
    EXPECT_EQ(status, 400);
    EXPECT_EQ(body["code"], "bad_image");
    EXPECT_EQ(h.post("/api/session/select", R"({"class":"pear"})").first, 400);
    EXPECT_EQ(h.service->snapshot(), before);
    reach_presenting(h);
    const KioskSession presenting = h.service->snapshot();
    EXPECT_EQ(h.post("/api/session/select", R"({"class_id":"durian"})").second["code"], "unknown_product");
    EXPECT_EQ(h.service->snapshot(), presenting);
}

TEST(Service, LightReadingStaysIdle) {
    Harness h("light");
    EXPECT_EQ(h.post("/api/scale", scale_body(10.0)).first, 202);
    EXPECT_EQ(h.get("/api/session").second["state"], "idle");
    EXPECT_EQ(h.gate->calls.load(), 0);
}

TEST(Service, ConcurrentPrintsExactlyOneWins) {
    Harness h("race");
    reach_presenting(h);
    ASSERT_EQ(h.post("/api/session/select", R"({"class_id":"apple"})").first, 200);
    const int port = h.client->port();
    std::vector<int> statuses(8, 0);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < statuses.size(); ++i) {
        threads.emplace_back([&, i] {
            httplib::Client c("127.0.0.1", port);
            auto r = c.Post("/api/session/print", "{}", "application/json");
            statuses[i] = r ? r->status : -1;
        });
    }
    for (auto& t : threads) {
        t.join();
    }
    EXPECT_EQ(std::count(statuses.begin(), statuses.end(), 200), 1);
    EXPECT_EQ(std::count(statuses.begin(), statuses.end(), 409), 7);
    EXPECT_EQ(journal_lines(h.dir / "labels.jsonl"), 1u);
}

TEST(Service, CancelDuringClassificationDropsResult) {
    Harness h("cancel");
    h.gate->close();
    h.post("/api/scale", scale_body(300.0));
    h.post("/api/scale", scale_body(300.0));
    h.post("/api/scale", scale_body(300.0));
    // reads answer while the classifier is blocked
    EXPECT_EQ(h.get("/api/session").second["state"], "classifying");
    EXPECT_EQ(h.post("/api/session/cancel").second["state"], "idle");
    h.gate->release();
    for (int i = 0; i < 100 && h.gate->calls.load() == 0; ++i) {
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    EXPECT_EQ(h.gate->calls.load(), 1);
    EXPECT_EQ(h.get("/api/session").second["state"], "idle");
}

TEST(Service, StubCameraConsumesCapturesInOrder) {
    Harness h("captures", true, true);
    // no capture yet: identification fails back to weighing with a note
    for (int i = 0; i < 3; ++i) {
        h.post("/api/scale", scale_body(150.0, false));
    }
    json view = h.get("/api/session").second;
    EXPECT_EQ(view["state"], "weighing");
    EXPECT_FALSE(view["error_note"].is_null());

    Tensor big({64, 48, 3});
    write_ppm(big, h.dir / "captures" / "0002.ppm");
    write_ppm(big, h.dir / "captures" / "0001.ppm");
    for (int i = 0; i < 3; ++i) {
        h.post("/api/scale", scale_body(150.0, false));
    }
    view = h.wait_for("presenting");
    EXPECT_TRUE(view["error_note"].is_null());
    EXPECT_EQ(h.gate->calls.load(), 1);
}

TEST(Service, SearchAndCatalog) {
    Harness h("search");
    const json found = h.get("/api/search?q=pe").second;
    ASSERT_EQ(found.size(), 2u);
    EXPECT_EQ(found[0]["display_name"], "Pear");
    EXPECT_EQ(found[1]["display_name"], "Bell pepper");
    const json catalog = h.get("/api/catalog").second;
    EXPECT_EQ(catalog.size(), 10u);
    EXPECT_TRUE(catalog[0].contains("frequent"));
    EXPECT_FALSE(h.get("/api/search?q=").second.empty());
}

TEST(Service, JournalSurvivesRestart) {
    {
        Harness h("restart");
        reach_presenting(h);
        h.post("/api/session/select", R"({"class_id":"kiwi"})");
        ASSERT_EQ(h.post("/api/session/print").first, 200);
    }
    Harness again("restart", false);
    const json labels = again.get("/api/labels").second;
    ASSERT_EQ(labels.size(), 1u);
    EXPECT_EQ(labels[0]["class_id"], "kiwi");
    reach_presenting(again);
    again.post("/api/session/select", R"({"class_id":"apple"})");
    ASSERT_EQ(again.post("/api/session/print").first, 200);
    EXPECT_EQ(again.get("/api/labels").second.size(), 2u);
}

TEST(Service, ViewSerializationIsDeterministic) {
    KioskSession s;
    s = on_scale_reading(s, {120.0, 0.0});
    EXPECT_EQ(session_view(s).dump(), session_view(s).dump());
    KioskSession copy = s;
    EXPECT_EQ(session_view(copy).dump(), session_view(s).dump());
}

TEST(Service, BadConfigNamesField) {
    ServiceOptions o;
    o.catalog = load_catalog(kCatalog);
    o.class_names = canonical_class_names();
    o.classifier = [](const Tensor&) { return ranking_for({0}, 10); };
    o.labels_path = temp_dir("badcfg") / "labels.jsonl";
    o.captures_dir = temp_dir("badcfg") / "missing";
    try {
        KioskService s(o);
        FAIL();
    } catch (const InvalidArgument& e) {
        EXPECT_NE(std::string(e.what()).find("captures"), std::string::npos);
    }
}
