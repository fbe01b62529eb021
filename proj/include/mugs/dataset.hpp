#pragma once

// Dataset container, binary format, and the synthetic hierarchical dataset.
//
// On-disk layout (images.bin): magic "MGDS" (4 bytes), version u32 LE,
// count u32 LE, H u32 LE, W u32 LE, channels u32 LE (always 3), then
// count*H*W*3 bytes of u8 pixels in HWC order. Labels live next to it in
// labels.csv with header "index,label" and one row per image.
//
// The synthetic set carries a 3-level hierarchy: coarse class -> base color
// palette, mid class -> stripe frequency, fine class -> overlaid shape, plus
// per-image noise. Labels are fine-class indices; coarse/mid are recoverable
// as label/4 and (label/2)%2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mugs/io.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

constexpr uint32_t kDatasetVersion = 1;

struct ImageView {
    const uint8_t* data;  // H*W*3, HWC
    int64_t height;
    int64_t width;
};

struct Dataset {
    int64_t count = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> pixels;  // count*H*W*3
    std::vector<int32_t> labels;
    int32_t class_count = 0;

    ImageView view(int64_t i) const {
        if (i < 0 || i >= count) throw Error("Dataset::view: index " + std::to_string(i) + " out of range");
        return {pixels.data() + i * height * width * 3, height, width};
    }

    void validate() const {
        if (count < 0 || height < 1 || width < 1) throw Error("Dataset: empty or malformed");
        if (static_cast<int64_t>(pixels.size()) != count * height * width * 3)
            throw Error("Dataset: pixel payload size mismatch");
        if (static_cast<int64_t>(labels.size()) != count) throw Error("Dataset: label count mismatch");
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || labels[i] >= class_count)
                throw Error("Dataset: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(class_count) + ")");
    }
};

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    const std::string bin_path = dir + "/images.bin";
    {
        std::ofstream os = open_for_write(bin_path);
        os.write("MGDS", 4);
        write_u32le(os, kDatasetVersion);
        write_u32le(os, static_cast<uint32_t>(ds.count));
        write_u32le(os, static_cast<uint32_t>(ds.height));
        write_u32le(os, static_cast<uint32_t>(ds.width));
        write_u32le(os, 3);
        os.write(reinterpret_cast<const char*>(ds.pixels.data()),
                 static_cast<std::streamsize>(ds.pixels.size()));
        if (!os) throw Error("write failed: " + bin_path);
    }
    const std::string csv_path = dir + "/labels.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw Error("cannot open for writing: " + csv_path);
    csv << "index,label\n";
    for (int64_t i = 0; i < ds.count; ++i) csv << i << "," << ds.labels[static_cast<size_t>(i)] << "\n";
    if (!csv) throw Error("write failed: " + csv_path);
}

inline Dataset load_dataset(const std::string& dir) {
    const std::string bin_path = dir + "/images.bin";
    std::ifstream is = open_for_read(bin_path);
    expect_magic(is, "MGDS", bin_path);
    const uint32_t version = read_u32le(is, bin_path + " version");
    if (version != kDatasetVersion)
        throw Error(bin_path + ": unsupported version " + std::to_string(version) + ", expected " +
                    std::to_string(kDatasetVersion));
    Dataset ds;
    ds.count = read_u32le(is, bin_path + " count");
    ds.height = read_u32le(is, bin_path + " height");
    ds.width = read_u32le(is, bin_path + " width");
    const uint32_t channels = read_u32le(is, bin_path + " channels");
    if (channels != 3)
        throw Error(bin_path + ": expected 3 channels, got " + std::to_string(channels));
    const size_t payload = static_cast<size_t>(ds.count) * ds.height * ds.width * 3;
    ds.pixels.resize(payload);
    if (!read_exact(is, ds.pixels.data(), payload)) {
        const size_t got = static_cast<size_t>(is.gcount());
        throw Error(bin_path + ": truncated payload at byte offset " +
                    std::to_string(24 + got) + " (expected " + std::to_string(payload) +
                    " pixel bytes, got " + std::to_string(got) + ")");
    }

    const std::string csv_path = dir + "/labels.csv";
    std::ifstream csv(csv_path);
    if (!csv) throw Error("cannot open for reading: " + csv_path);
    std::string line;
    if (!std::getline(csv, line) || (line != "index,label" && line != "index,label\r"))
        throw Error(csv_path + ": expected header 'index,label'");
    ds.labels.reserve(static_cast<size_t>(ds.count));
    int32_t max_label = -1;
    while (std::getline(csv, line)) {
        if (line.empty() || line == "\r") continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) throw Error(csv_path + ": malformed row '" + line + "'");
        const int64_t idx = std::stoll(line.substr(0, comma));
        const int32_t label = static_cast<int32_t>(std::stol(line.substr(comma + 1)));
        if (idx != static_cast<int64_t>(ds.labels.size()))
            throw Error(csv_path + ": non-sequential index " + std::to_string(idx) + " at row " +
                        std::to_string(ds.labels.size()));
        if (label < 0) throw Error(csv_path + ": negative label at row " + std::to_string(idx));
        ds.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    if (static_cast<int64_t>(ds.labels.size()) != ds.count)
        throw Error(csv_path + ": " + std::to_string(ds.labels.size()) + " labels for " +
                    std::to_string(ds.count) + " images");
    ds.class_count = max_label + 1;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic hierarchical dataset
// ---------------------------------------------------------------------------

namespace detail {

// two well-separated base palettes; mean-pixel gap far above 30 u8 levels
inline const float kCoarsePalette[2][3] = {{200.0f, 60.0f, 50.0f}, {40.0f, 80.0f, 200.0f}};
// stripe period in pixels per mid class (low vs high spatial frequency)
inline const float kMidPeriod[2] = {16.0f, 5.0f};
constexpr float kStripeAmp = 36.0f;
constexpr float kNoiseAmp = 10.0f;

inline uint8_t to_u8(float v) {
    return static_cast<uint8_t>(std::clamp(v, 0.0f, 255.0f) + 0.5f);
}

}  // namespace detail

inline Dataset synth_hierarchical_dataset(uint64_t seed, int64_t coarse = 2,
                                          int64_t mid_per_coarse = 2, int64_t fine_per_mid = 2,
                                          int64_t n_per_fine = 16, int64_t size = 32) {
    if (coarse < 1 || mid_per_coarse < 1 || fine_per_mid < 1 || n_per_fine < 1 || size < 8)
        throw Error("synth_hierarchical_dataset: counts must be >= 1 and size >= 8");
    Dataset ds;
    ds.height = ds.width = size;
    ds.class_count = static_cast<int32_t>(coarse * mid_per_coarse * fine_per_mid);
    ds.count = ds.class_count * n_per_fine;
    ds.pixels.resize(static_cast<size_t>(ds.count * size * size * 3));
    ds.labels.resize(static_cast<size_t>(ds.count));

    int64_t img = 0;
    for (int64_t c = 0; c < coarse; ++c)
        for (int64_t m = 0; m < mid_per_coarse; ++m)
            for (int64_t f = 0; f < fine_per_mid; ++f)
                for (int64_t n = 0; n < n_per_fine; ++n, ++img) {
                    // per-image stream, independent of generation order
                    Rng rng(derive_seed(seed, {0x73796e74u, static_cast<uint64_t>(img)}));
                    const float* base = detail::kCoarsePalette[c % 2];
                    const float period = detail::kMidPeriod[m % 2];
                    // small per-image palette jitter keeps classes non-degenerate
                    float tint[3];
                    for (int ch = 0; ch < 3; ++ch)
                        tint[ch] = base[ch] + static_cast<float>(rng.uniform(-12.0, 12.0));
                    const float phase = static_cast<float>(rng.uniform(0.0, period));
                    const float cx =
                        size * 0.5f + static_cast<float>(rng.uniform(-2.5, 2.5));
                    const float cy =
                        size * 0.5f + static_cast<float>(rng.uniform(-2.5, 2.5));
                    const float half = size * 0.22f + static_cast<float>(rng.uniform(-1.0, 1.0));
                    const bool bright_shape = base[0] + base[1] + base[2] < 360.0f;
                    const float shape_level = bright_shape ? 235.0f : 25.0f;

                    uint8_t* px = ds.pixels.data() + img * size * size * 3;
                    for (int64_t y = 0; y < size; ++y)
                        for (int64_t x = 0; x < size; ++x) {
                            const float stripe =
                                detail::kStripeAmp *
                                std::sin(2.0f * 3.14159265f * (static_cast<float>(y) + phase) / period);
                            // fine class 0: disc; fine class 1: square
                            const float dx = static_cast<float>(x) - cx;
                            const float dy = static_cast<float>(y) - cy;
                            const bool inside = (f % 2 == 0)
                                                    ? (dx * dx + dy * dy <= half * half)
                                                    : (std::abs(dx) <= half && std::abs(dy) <= half);
                            for (int ch = 0; ch < 3; ++ch) {
                                float v = inside ? (0.25f * tint[ch] + 0.75f * shape_level)
                                                 : tint[ch] + stripe;
                                v += static_cast<float>(rng.uniform(-detail::kNoiseAmp,
                                                                    detail::kNoiseAmp));
                                px[(y * size + x) * 3 + ch] = detail::to_u8(v);
                            }
                        }
                    ds.labels[static_cast<size_t>(img)] =
                        static_cast<int32_t>((c * mid_per_coarse + m) * fine_per_mid + f);
                }
    ds.validate();
    return ds;
}

// coarse/mid projections of a fine label under the default 2x2x2 hierarchy
inline int32_t coarse_of(int32_t fine_label, int32_t mid_per_coarse = 2,
                         int32_t fine_per_mid = 2) {
    return fine_label / (mid_per_coarse * fine_per_mid);
}

}  // namespace mugs
