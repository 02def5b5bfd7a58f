#include <algorithm>
#include <cmath>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/data.hpp"

namespace crowdctx {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Blob {
    double cx, cy, sigma;
    double color[3];
};

void paint(std::vector<double>& img, std::size_t h, std::size_t w, const Blob& b) {
    const double reach = 3.0 * b.sigma;
    const int y0 = std::max(0, static_cast<int>(std::floor(b.cy - reach)));
    const int y1 = std::min(static_cast<int>(h) - 1, static_cast<int>(std::ceil(b.cy + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(b.cx - reach)));
    const int x1 = std::min(static_cast<int>(w) - 1, static_cast<int>(std::ceil(b.cx + reach)));
    const double inv = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - b.cx, dy = y - b.cy;
            const double alpha = std::exp(-(dx * dx + dy * dy) * inv);
            for (std::size_t c = 0; c < 3; ++c) {
                double& px = img[(c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
                px = px * (1.0 - alpha) + b.color[c] * alpha;
            }
        }
    }
}

}  // namespace

std::vector<Dot> Scene::dots() const {
    std::vector<Dot> out;
    out.reserve(persons.size());
    for (const auto& p : persons) out.push_back({p.x, p.y});
    return out;
}

void SceneConfig::validate() const {
    if (image_h == 0 || image_w == 0) throw ConfigError("scene size must be positive");
    if (count_min > count_max) throw ConfigError("count range is empty");
    if (base_size <= 0.0 || min_size <= 0.0) throw ConfigError("person sizes must be positive");
    if (size_gradient < 0.0) throw ConfigError("size_gradient must be >= 0");
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Scene scene;
    scene.image_h = cfg.image_h;
    scene.image_w = cfg.image_w;
    const auto n = std::uniform_int_distribution<std::size_t>(cfg.count_min, cfg.count_max)(rng);
    scene.background_seed = rng();
    std::uniform_int_distribution<int> px(0, static_cast<int>(cfg.image_w) - 1);
    std::uniform_int_distribution<int> py(0, static_cast<int>(cfg.image_h) - 1);
    for (std::size_t i = 0; i < n; ++i) {
        Person p;
        p.x = px(rng);
        p.y = py(rng);
        p.size = std::max(cfg.min_size, cfg.base_size - cfg.size_gradient * p.y);
        scene.persons.push_back(p);
    }
    return scene;
}

Tensor render(const Scene& scene) {
    const std::size_t h = scene.image_h, w = scene.image_w;
    std::mt19937_64 rng(scene.background_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> img(3 * h * w);

    double base[3];
    for (auto& b : base) b = 0.15 + 0.25 * u(rng);
    struct Wave {
        double fx, fy, phase, amp[3];
    };
    std::vector<Wave> waves(3);
    for (auto& wv : waves) {
        wv.fx = (u(rng) - 0.5) * 0.4;
        wv.fy = (u(rng) - 0.5) * 0.4;
        wv.phase = u(rng) * 6.283185307179586;
        for (auto& a : wv.amp) a = 0.05 * u(rng);
    }
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double v = base[c];
                for (const auto& wv : waves) {
                    v += wv.amp[c] * std::sin(wv.fx * static_cast<double>(x) + wv.fy * static_cast<double>(y) +
                                              wv.phase);
                }
                img[(c * h + y) * w + x] = v + 0.03 * (u(rng) - 0.5);
            }
        }
    }

    // Far (top) rows first so nearer people overlap them.
    std::vector<std::size_t> order(scene.persons.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scene.persons[a].y < scene.persons[b].y; });
    for (std::size_t i : order) {
        const Person& p = scene.persons[i];
        Blob body{static_cast<double>(p.x), p.y + 1.2 * p.size, 0.6 * p.size, {0.0, 0.0, 0.0}};
        for (auto& c : body.color) c = 0.1 + 0.35 * u(rng);
        Blob head{static_cast<double>(p.x), static_cast<double>(p.y), 0.45 * p.size, {0.95, 0.82, 0.68}};
        const double tint = 0.05 * u(rng);
        for (auto& c : head.color) c -= tint;
        paint(img, h, w, body);
        paint(img, h, w, head);
    }
    for (auto& v : img) v = quantize(v);
    return Tensor::from({3, h, w}, std::move(img));
}

Tensor bin_dots(const std::vector<Dot>& dots, std::size_t h, std::size_t w, std::size_t stride) {
    if (stride == 0) throw ContractError("bin stride must be >= 1");
    const std::size_t gh = (h + stride - 1) / stride, gw = (w + stride - 1) / stride;
    std::vector<double> grid(gh * gw, 0.0);
    for (const auto& d : dots) {
        if (d.x < 0 || d.y < 0 || static_cast<std::size_t>(d.x) >= w || static_cast<std::size_t>(d.y) >= h) {
            throw ContractError("dot (" + std::to_string(d.x) + ", " + std::to_string(d.y) + ") outside " +
                                std::to_string(w) + "x" + std::to_string(h) + " image");
        }
        grid[(static_cast<std::size_t>(d.y) / stride) * gw + static_cast<std::size_t>(d.x) / stride] += 1.0;
    }
    return Tensor::from({gh, gw}, std::move(grid));
}

CrowdSample make_sample(std::string id, Tensor image, std::vector<Dot> dots, std::size_t stride) {
    if (image.rank() != 3) throw DimensionError("image must be [c, h, w], got " + shape_string(image.shape()));
    CrowdSample s;
    s.id = std::move(id);
    s.gt = bin_dots(dots, image.dim(1), image.dim(2), stride);
    s.image = std::move(image);
    s.dots = std::move(dots);
    s.stride = stride;
    return s;
}

void AugmentConfig::validate() const {
    if (crop_h == 0 || crop_w == 0) throw ConfigError("crop size must be positive");
    if (hflip_prob < 0.0 || hflip_prob > 1.0) throw ConfigError("hflip_prob must lie in [0, 1]");
}

CrowdSample augment(const CrowdSample& sample, const AugmentConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t h = sample.height(), w = sample.width(), c = sample.image.dim(0);
    if (cfg.crop_h > h || cfg.crop_w > w) {
        throw ConfigError("crop " + std::to_string(cfg.crop_w) + "x" + std::to_string(cfg.crop_h) +
                          " larger than image " + std::to_string(w) + "x" + std::to_string(h));
    }
    const auto oy = std::uniform_int_distribution<std::size_t>(0, h - cfg.crop_h)(rng);
    const auto ox = std::uniform_int_distribution<std::size_t>(0, w - cfg.crop_w)(rng);
    const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.hflip_prob;

    const std::size_t ch = cfg.crop_h, cw = cfg.crop_w;
    std::vector<double> img(c * ch * cw);
    const auto src = sample.image.data();
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t y = 0; y < ch; ++y) {
            for (std::size_t x = 0; x < cw; ++x) {
                const std::size_t sx = ox + (flip ? cw - 1 - x : x);
                img[(k * ch + y) * cw + x] = src[(k * h + oy + y) * w + sx];
            }
        }
    }
    std::vector<Dot> dots;
    for (const auto& d : sample.dots) {
        const int x = d.x - static_cast<int>(ox), y = d.y - static_cast<int>(oy);
        if (x < 0 || y < 0 || x >= static_cast<int>(cw) || y >= static_cast<int>(ch)) continue;
        dots.push_back({flip ? static_cast<int>(cw) - 1 - x : x, y});
    }
    return make_sample(sample.id, Tensor::from({c, ch, cw}, std::move(img)), std::move(dots), sample.stride);
}

Dataset generate_dataset(std::uint64_t seed, std::size_t n, const SceneConfig& cfg, std::size_t stride) {
    Dataset data;
    data.stride = stride;
    for (std::size_t i = 0; i < n; ++i) {
        const Scene scene = generate_scene(splitmix64(seed * 0x100000001b3ULL + i), cfg);
        char id[24];
        std::snprintf(id, sizeof id, "%04zu", i);
        data.samples.push_back(make_sample(id, render(scene), scene.dots(), stride));
    }
    return data;
}

}  // namespace crowdctx
