#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "muse/world.hpp"

namespace muse {

// 8-bit binary portable pixmap
template <class Real>
inline void write_ppm(const Image<Real>& img, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("ppm: cannot open for write: " + path);
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(static_cast<double>(img.at(y, x, c)), 0.0, 1.0);
                os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
    if (!os) throw std::runtime_error("ppm: write failed: " + path);
}

template <class Real>
inline Image<Real> read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("ppm: cannot open: " + path);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255) throw std::runtime_error("ppm: unsupported format in " + path);
    is.get();
    Image<Real> img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                int b = is.get();
                if (b < 0) throw std::runtime_error("ppm: truncated file " + path);
                img.at(y, x, c) = static_cast<Real>(b) / static_cast<Real>(255);
            }
    return img;
}

// JSON sidecar describing the conditioning that produced a sampled image
template <class Real>
inline void write_sample_sidecar(const std::string& path, const Scene<Real>& scene, uint64_t seed, int conditioned,
                                 double lambda_scale, double cfg_weight) {
    nlohmann::json j;
    j["seed"] = seed;
    j["prompt_tokens"] = scene.prompt_tokens;
    j["lambda"] = lambda_scale;
    j["cfg_weight"] = cfg_weight;
    j["conditioned_subjects"] = conditioned;
    for (const auto& sub : scene.subjects) {
        nlohmann::json s;
        s["class_id"] = sub.class_id;
        s["class_name"] = class_name(sub.class_id);
        s["identity_id"] = sub.identity_id;
        s["box"] = {sub.box.x0, sub.box.y0, sub.box.x1, sub.box.y1};
        j["subjects"].push_back(s);
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("sidecar: cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

} // namespace muse
