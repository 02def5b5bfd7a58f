#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crowdctx/core/tensor.hpp"

namespace crowdctx {

struct Dot {
    int x = 0;
    int y = 0;
    bool operator==(const Dot&) const = default;
};

struct Person {
    int x = 0;
    int y = 0;
    double size = 1.0;
};

struct Scene {
    std::size_t image_h = 0;
    std::size_t image_w = 0;
    std::vector<Person> persons;
    std::uint64_t background_seed = 0;

    std::vector<Dot> dots() const;
};

struct SceneConfig {
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::size_t count_min = 5;
    std::size_t count_max = 60;
    double base_size = 6.0;       // person size at y = 0
    double size_gradient = 0.05;  // size lost per pixel of y
    double min_size = 1.5;

    void validate() const;
};

// Person count uniform in [count_min, count_max], positions uniform over the
// image, size = max(min_size, base_size - size_gradient * y).
Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

// [3, h, w] in [0, 1], quantized to multiples of 1/255.
Tensor render(const Scene& scene);

// Dots per cell on a ceil(h/stride) x ceil(w/stride) grid.
Tensor bin_dots(const std::vector<Dot>& dots, std::size_t h, std::size_t w, std::size_t stride);

struct CrowdSample {
    std::string id;
    Tensor image;           // [3, h, w]
    std::vector<Dot> dots;
    Tensor gt;              // dots per cell
    std::size_t stride = 4;

    std::size_t height() const { return image.dim(1); }
    std::size_t width() const { return image.dim(2); }
    double count() const { return static_cast<double>(dots.size()); }
};

CrowdSample make_sample(std::string id, Tensor image, std::vector<Dot> dots, std::size_t stride);

struct AugmentConfig {
    std::size_t crop_h = 64;
    std::size_t crop_w = 64;
    double hflip_prob = 0.5;

    void validate() const;
};

// Uniform crop offset, then a horizontal flip with probability hflip_prob.
// Always consumes the same number of draws from rng.
CrowdSample augment(const CrowdSample& sample, const AugmentConfig& cfg, std::mt19937_64& rng);

struct Dataset {
    std::size_t stride = 4;
    std::vector<CrowdSample> samples;
};

// n scenes; sample i uses a seed derived from (seed, i).
Dataset generate_dataset(std::uint64_t seed, std::size_t n, const SceneConfig& cfg, std::size_t stride);

// dir/manifest.txt, dir/images/NNNN.ppm, dir/dots/NNNN.txt
void write_dataset(const std::string& dir, const Dataset& data);
Dataset read_dataset(const std::string& dir);

// Binary 8-bit PPM (P6).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);
Tensor decode_ppm(const std::string& bytes);
// 16-bit binary PGM (P5, maxval 65535), big-endian samples.
void write_pgm16(const std::string& path, const std::vector<std::uint16_t>& pixels, std::size_t h,
                 std::size_t w);
std::vector<std::uint16_t> read_pgm16(const std::string& path, std::size_t* h, std::size_t* w);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace crowdctx
