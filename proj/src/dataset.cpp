#include "produce/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include <fmt/format.h>

#include "produce/error.hpp"
#include "produce/rng.hpp"

namespace produce {

namespace fs = std::filesystem;

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Header scanner for the PNM family: whitespace and '#' comments between tokens.
class HeaderReader {
public:
    explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }

    void skip_space() {
        while (pos_ < bytes_.size()) {
            const auto c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') {
                    ++pos_;
                }
            } else if (std::isspace(c) != 0) {
                ++pos_;
            } else {
                return;
            }
        }
    }

    unsigned long number(const char* what) {
        skip_space();
        const std::size_t start = pos_;
        unsigned long value = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_]) != 0) {
            value = value * 10 + (bytes_[pos_] - '0');
            if (value > 1'000'000) {
                throw ParseError(fmt::format("PPM {} is out of range", what), start);
            }
            ++pos_;
        }
        if (pos_ == start) {
            throw ParseError(fmt::format("PPM header: expected {}", what), pos_);
        }
        return value;
    }

    void single_whitespace() {
        if (pos_ >= bytes_.size() || std::isspace(bytes_[pos_]) == 0) {
            throw ParseError("PPM header must end with one whitespace byte", pos_);
        }
        ++pos_;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::uint8_t quantize(float v) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

float from_byte(std::uint8_t b) {
    return static_cast<float>(b) / 255.0f;
}

const char* split_name(Split s) {
    switch (s) {
    case Split::train:
        return "train";
    case Split::test:
        return "test";
    default:
        return "unassigned";
    }
}

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double hue_deg, double s, double v) {
    double h = std::fmod(hue_deg, 360.0);
    if (h < 0) {
        h += 360.0;
    }
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    Rgb rgb{0, 0, 0};
    if (hp < 1) {
        rgb = {c, x, 0};
    } else if (hp < 2) {
        rgb = {x, c, 0};
    } else if (hp < 3) {
        rgb = {0, c, x};
    } else if (hp < 4) {
        rgb = {0, x, c};
    } else if (hp < 5) {
        rgb = {x, 0, c};
    } else {
        rgb = {c, 0, x};
    }
    const double m = v - c;
    return {rgb.r + m, rgb.g + m, rgb.b + m};
}

constexpr double kBackgroundNoise = 0.06;

float noisy_byte(double value, SplitMix64& rng, double amplitude) {
    const double v = std::clamp(value + rng.uniform(-amplitude, amplitude), 0.0, 1.0);
    return from_byte(static_cast<std::uint8_t>(std::lround(v * 255.0)));
}

} // namespace

const std::vector<std::string>& canonical_class_names() {
    static const std::vector<std::string> names{"apple",  "avocado", "banana", "bell pepper", "clementine",
                                                "kiwi",   "orange",  "pear",   "potato",      "tomato"};
    return names;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P') {
        throw ParseError("not a PPM file: bad magic", 0);
    }
    if (bytes[1] == '3') {
        throw UnsupportedFormat("ASCII PPM (P3) is not supported; expected binary P6");
    }
    if (bytes[1] != '6') {
        throw ParseError(fmt::format("not a PPM file: magic P{}", static_cast<char>(bytes[1])), 1);
    }
    HeaderReader header(bytes.subspan(2));
    const auto width = header.number("width");
    const auto height = header.number("height");
    const auto maxval = header.number("maxval");
    header.single_whitespace();
    if (width == 0 || height == 0) {
        throw ParseError("PPM image has a zero dimension", 2 + header.offset());
    }
    if (maxval != 255) {
        throw UnsupportedFormat(fmt::format("PPM maxval {} is not supported; only 255", maxval));
    }
    const std::size_t data_start = 2 + header.offset();
    const std::size_t needed = width * height * 3;
    if (bytes.size() - data_start < needed) {
        throw ParseError(fmt::format("PPM pixel data truncated: {} of {} bytes", bytes.size() - data_start, needed),
                         bytes.size());
    }
    Tensor image({height, width, 3});
    auto out = image.data();
    for (std::size_t i = 0; i < needed; ++i) {
        out[i] = from_byte(bytes[data_start + i]);
    }
    return image;
}

std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
    if (image.rank() != 3 || image.channels() != 3) {
        throw InvalidArgument(fmt::format("PPM needs an H x W x 3 image, got {}", image.shape_string()));
    }
    const std::string header = fmt::format("P6\n{} {}\n255\n", image.width(), image.height());
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(header.size() + image.size());
    for (float v : image.data()) {
        bytes.push_back(quantize(v));
    }
    return bytes;
}

Tensor read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError(fmt::format("cannot open {}", path.string()));
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_ppm(bytes);
}

void write_ppm(const Tensor& image, const fs::path& path) {
    const auto bytes = encode_ppm(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot write {}", path.string()));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError(fmt::format("failed writing {}", path.string()));
    }
}

Tensor resize_nearest(const Tensor& image, std::size_t height, std::size_t width) {
    if (image.rank() != 3) {
        throw InvalidArgument(fmt::format("resize_nearest needs a rank-3 image, got {}", image.shape_string()));
    }
    if (height == 0 || width == 0) {
        throw InvalidArgument("resize target must be positive");
    }
    const std::size_t c = image.channels();
    Tensor out({height, width, c});
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = image.height() * y / height;
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t sx = image.width() * x / width;
            for (std::size_t ch = 0; ch < c; ++ch) {
                out.at(y, x, ch) = image.at(sy, sx, ch);
            }
        }
    }
    return out;
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].split == split) {
            out.push_back(i);
        }
    }
    return out;
}

std::size_t DatasetManifest::count(std::size_t label) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.label == label; }));
}

ordered_json manifest_to_json(const DatasetManifest& m) {
    ordered_json files = ordered_json::object();
    for (std::size_t k = 0; k < m.class_names.size(); ++k) {
        ordered_json list = ordered_json::array();
        for (const auto& e : m.entries) {
            if (e.label == k) {
                list.push_back(e.path);
            }
        }
        files[m.class_names[k]] = std::move(list);
    }
    ordered_json splits = ordered_json::object();
    for (Split s : {Split::train, Split::test}) {
        ordered_json list = ordered_json::array();
        for (const auto& e : m.entries) {
            if (e.split == s) {
                list.push_back(e.path);
            }
        }
        splits[split_name(s)] = std::move(list);
    }
    ordered_json j;
    j["classes"] = m.class_names;
    j["files"] = std::move(files);
    j["splits"] = std::move(splits);
    j["seed"] = m.split_seed ? ordered_json(*m.split_seed) : ordered_json(nullptr);
    return j;
}

DatasetManifest manifest_from_json(const json& j) {
    DatasetManifest m;
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    const json& files = j.at("files");
    std::map<std::string, std::size_t> where;
    for (std::size_t k = 0; k < m.class_names.size(); ++k) {
        for (const auto& p : files.at(m.class_names[k])) {
            ManifestEntry e{p.get<std::string>(), k, Split::unassigned};
            if (!where.emplace(e.path, m.entries.size()).second) {
                throw InvalidArgument(fmt::format("manifest lists {} twice", e.path));
            }
            m.entries.push_back(std::move(e));
        }
    }
    if (j.contains("splits")) {
        for (Split s : {Split::train, Split::test}) {
            const json& splits = j.at("splits");
            if (!splits.contains(split_name(s))) {
                continue;
            }
            for (const auto& p : splits.at(split_name(s))) {
                const auto it = where.find(p.get<std::string>());
                if (it == where.end()) {
                    throw InvalidArgument(fmt::format("split lists unknown file {}", p.get<std::string>()));
                }
                ManifestEntry& e = m.entries[it->second];
                if (e.split != Split::unassigned) {
                    throw InvalidArgument(fmt::format("{} appears in more than one split", e.path));
                }
                e.split = s;
            }
        }
    }
    if (j.contains("seed") && !j.at("seed").is_null()) {
        m.split_seed = j.at("seed").get<std::uint64_t>();
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError(fmt::format("cannot write manifest {}", path.string()));
    }
    out << manifest_to_json(manifest).dump(2) << '\n';
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError(fmt::format("cannot open manifest {}", path.string()));
    }
    try {
        return manifest_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw ParseError(fmt::format("manifest {}: {}", path.string(), e.what()), e.byte);
    } catch (const json::exception& e) {
        throw InvalidArgument(fmt::format("manifest {}: {}", path.string(), e.what()));
    }
}

Dataset load_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) {
        throw IoError(fmt::format("dataset root {} is not a directory", root.string()));
    }
    std::vector<std::string> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            class_dirs.push_back(entry.path().filename().string());
        }
    }
    std::sort(class_dirs.begin(), class_dirs.end());

    Dataset ds;
    for (const auto& name : class_dirs) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(root / name)) {
            if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
                files.push_back(entry.path().filename().string());
            }
        }
        if (files.empty()) {
            ds.warnings.push_back(fmt::format("class directory '{}' has no .ppm files; excluded", name));
            continue;
        }
        std::sort(files.begin(), files.end());
        const std::size_t label = ds.manifest.class_names.size();
        ds.manifest.class_names.push_back(name);
        for (const auto& file : files) {
            const std::string rel = name + "/" + file;
            Tensor image;
            try {
                image = read_ppm(root / name / file);
            } catch (const std::exception& e) {
                throw IoError(fmt::format("cannot read dataset image {}: {}", (root / rel).string(), e.what()));
            }
            ds.manifest.entries.push_back({rel, label, Split::unassigned});
            ds.images.push_back({std::move(image), label, rel});
        }
    }
    return ds;
}

DatasetManifest split_dataset(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw InvalidArgument(fmt::format("test_fraction must be in (0, 1), got {}", test_fraction));
    }
    DatasetManifest out = manifest;
    out.split_seed = seed;
    SplitMix64 rng(seed);
    for (std::size_t k = 0; k < out.class_names.size(); ++k) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < out.entries.size(); ++i) {
            if (out.entries[i].label == k) {
                members.push_back(i);
            }
        }
        const std::size_t n = members.size();
        const auto rounded = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
        const std::size_t n_test = std::max<std::size_t>(1, rounded);
        if (n_test >= n) {
            throw InvalidArgument(fmt::format(
                "class '{}' has {} item(s), too few for a train/test split at fraction {}", out.class_names[k], n,
                test_fraction));
        }
        rng.shuffle(std::span<std::size_t>(members));
        for (std::size_t i = 0; i < n; ++i) {
            out.entries[members[i]].split = i < n_test ? Split::test : Split::train;
        }
    }
    return out;
}

std::vector<LabeledImage> select_split(const Dataset& dataset, Split split) {
    std::vector<LabeledImage> out;
    for (std::size_t i : dataset.manifest.indices(split)) {
        out.push_back(dataset.images[i]);
    }
    return out;
}

double synth_hue_jitter(std::size_t num_classes) {
    if (num_classes == 0) {
        return 0.0;
    }
    const double k = static_cast<double>(num_classes);
    const double spacing = 360.0 / k;
    const double required = 1.8 * k;
    return std::clamp((spacing - required) / 2.0, 0.0, 10.0);
}

std::vector<LabeledImage> synth_images(const SynthOptions& options) {
    if (options.per_class == 0) {
        throw InvalidArgument("per_class must be >= 1");
    }
    if (options.size == 0) {
        throw InvalidArgument("image size must be >= 1");
    }
    if (options.class_names.empty()) {
        throw InvalidArgument("at least one class is required");
    }
    const std::size_t n_classes = options.class_names.size();
    const double jitter = synth_hue_jitter(n_classes);
    const auto size = static_cast<double>(options.size);
    SplitMix64 rng(options.seed);
    std::vector<LabeledImage> out;
    out.reserve(n_classes * options.per_class);

    for (std::size_t k = 0; k < n_classes; ++k) {
        const double centre_hue = 360.0 * static_cast<double>(k) / static_cast<double>(n_classes);
        for (std::size_t i = 0; i < options.per_class; ++i) {
            const double hue = centre_hue + rng.uniform(-jitter, jitter);
            const double sat = rng.uniform(0.825, 1.0);
            const double val = rng.uniform(0.8, 1.0);
            const double cy = size * rng.uniform(0.35, 0.65);
            const double cx = size * rng.uniform(0.35, 0.65);
            const double ry = size * rng.uniform(0.72, 0.88);
            const double rx = size * rng.uniform(0.72, 0.88);
            const double background = rng.uniform(0.08, 0.12);
            const Rgb fruit = hsv_to_rgb(hue, sat, val);

            // The fruit is a flat fill; only the background carries noise.
            Tensor image({options.size, options.size, 3});
            for (std::size_t y = 0; y < options.size; ++y) {
                for (std::size_t x = 0; x < options.size; ++x) {
                    const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
                    const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
                    const bool inside = dx * dx + dy * dy <= 1.0;
                    const Rgb px = inside ? fruit : Rgb{background, background, background};
                    const double noise = inside ? 0.0 : kBackgroundNoise;
                    image.at(y, x, 0) = noisy_byte(px.r, rng, noise);
                    image.at(y, x, 1) = noisy_byte(px.g, rng, noise);
                    image.at(y, x, 2) = noisy_byte(px.b, rng, noise);
                }
            }
            out.push_back({std::move(image), k, fmt::format("synth:{}:{:04}", options.class_names[k], i)});
        }
    }
    return out;
}

DatasetManifest synth_generate(const SynthOptions& options, const fs::path& root) {
    const auto images = synth_images(options);
    DatasetManifest manifest;
    manifest.class_names = options.class_names;
    std::vector<std::size_t> next(options.class_names.size(), 0);
    for (const auto& li : images) {
        const auto& name = options.class_names[li.label];
        const fs::path dir = root / name;
        fs::create_directories(dir);
        const std::string file = fmt::format("{:04}.ppm", next[li.label]++);
        write_ppm(li.image, dir / file);
        manifest.entries.push_back({name + "/" + file, li.label, Split::unassigned});
    }
    return manifest;
}

} // namespace produce
