#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "produce/tensor.hpp"

namespace produce {

// apple, avocado, banana, bell pepper, clementine, kiwi, orange, pear, potato, tomato
const std::vector<std::string>& canonical_class_names();

/// H x W x 3 image with values in [0, 1] and its class.
struct LabeledImage {
    Tensor image;
    std::size_t label = 0;
    std::string source; // relative file path or synthetic id
};

// Binary PPM ("P6", maxval 255) to/from an H x W x 3 tensor scaled to [0, 1].
Tensor decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const Tensor& image, const std::filesystem::path& path);

// Nearest-neighbour sampling: src index = floor(src_extent * dst_index / dst_extent).
Tensor resize_nearest(const Tensor& image, std::size_t height, std::size_t width);

enum class Split { unassigned, train, test };

struct ManifestEntry {
    std::string path; // relative to the dataset root, "<class>/<file>.ppm"
    std::size_t label = 0;
    Split split = Split::unassigned;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries; // class-major, files sorted within a class
    std::optional<std::uint64_t> split_seed;

    std::vector<std::size_t> indices(Split split) const;
    std::size_t count(std::size_t label) const;

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// {classes, files: {class: [paths]}, splits: {train: [...], test: [...]}, seed}
nlohmann::ordered_json manifest_to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct Dataset {
    DatasetManifest manifest;
    std::vector<LabeledImage> images; // parallel to manifest.entries
    std::vector<std::string> warnings;
};

/// Reads root/<class_name>/*.ppm. Classes come out in sorted name order and
/// files sorted within each class. Empty class directories are skipped with a
/// warning; an unreadable image throws IoError naming its path.
Dataset load_dataset(const std::filesystem::path& root);

/// Stratified split: each class is shuffled by one SplitMix64 stream (classes
/// in manifest order) and its first max(1, round(n * test_fraction)) items go
/// to test. Throws InvalidArgument naming a class that cannot keep at least one
/// item on each side.
DatasetManifest split_dataset(const DatasetManifest& manifest, double test_fraction, std::uint64_t seed);

// Copies of the images assigned to `split`, in manifest order.
std::vector<LabeledImage> select_split(const Dataset& dataset, Split split);

struct SynthOptions {
    std::vector<std::string> class_names = canonical_class_names();
    std::size_t per_class = 50;
    std::size_t size = 32;
    std::uint64_t seed = 42;
};

// Largest hue jitter (degrees) that keeps adjacent classes 1.8 * K degrees apart.
double synth_hue_jitter(std::size_t num_classes);

/// Hue-coded flat ellipses on a dark, noisy grey background. Class k of K
/// is centred on hue 360 k / K. Pixel values are multiples of 1/255 so that the
/// images survive a PPM round trip unchanged.
std::vector<LabeledImage> synth_images(const SynthOptions& options);

// Writes synth_images to root/<class>/NNNN.ppm and returns the manifest.
DatasetManifest synth_generate(const SynthOptions& options, const std::filesystem::path& root);

} // namespace produce
