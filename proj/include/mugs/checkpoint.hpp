#pragma once

// Self-describing checkpoints. Layout: magic "MGCK", version u32 LE,
// header-length u32 LE, then header-length bytes of JSON, then the f32 LE
// payload in tensor-table order. The JSON header carries the full run
// config, the trainer counters, and a tensor table of (name, shape, element
// offset, numel), so a checkpoint can be loaded and evaluated without the
// original config file. Buffer contents are stored oldest-first, which
// normalizes the ring offset; RNG streams are derived statelessly from
// (seed, step), so the counters in the header are the complete RNG state.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mugs/config.hpp"
#include "mugs/io.hpp"
#include "mugs/params.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

constexpr uint32_t kCheckpointVersion = 1;

// a parsed checkpoint: header fields plus raw named tensors
struct CheckpointData {
    TrainConfig config;
    int64_t step = 0;
    int64_t epoch = 0;
    int64_t adamw_step_count = 0;
    std::vector<std::string> order;  // table order
    std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;

    const std::vector<float>& values(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("checkpoint: missing tensor '" + name + "'");
        return it->second.second;
    }

    const Shape& shape(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("checkpoint: missing tensor '" + name + "'");
        return it->second.first;
    }

    bool has(const std::string& name) const { return tensors.find(name) != tensors.end(); }

    void add(const std::string& name, Shape shape, std::vector<float> data) {
        if (tensors.count(name)) throw Error("checkpoint: duplicate tensor '" + name + "'");
        order.push_back(name);
        tensors[name] = {std::move(shape), std::move(data)};
    }

    void add(const std::string& name, const Tensor& t) { add(name, t.shape(), t.data()); }

    // copies stored values into an existing leaf tensor, validating shape
    void apply_to(const std::string& name, const Tensor& dst) const {
        const Shape& s = shape(name);
        if (s != dst.shape())
            throw Error("checkpoint: shape mismatch for '" + name + "': file has " + shape_str(s) +
                        ", model expects " + shape_str(dst.shape()));
        dst.raw_data() = values(name);
    }
};

inline void save_checkpoint(const CheckpointData& ckpt, const std::string& path) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["config"] = ckpt.config.to_json();
    header["trainer"] = {{"step", ckpt.step},
                         {"epoch", ckpt.epoch},
                         {"adamw_step_count", ckpt.adamw_step_count},
                         {"rng", "stateless (derived from seed and step)"}};
    nlohmann::json table = nlohmann::json::array();
    int64_t offset = 0;
    for (const std::string& name : ckpt.order) {
        const auto& [shape, data] = ckpt.tensors.at(name);
        table.push_back({{"name", name},
                         {"shape", shape},
                         {"offset", offset},
                         {"numel", static_cast<int64_t>(data.size())}});
        offset += static_cast<int64_t>(data.size());
    }
    header["tensors"] = table;
    const std::string header_bytes = header.dump();

    std::ofstream os = open_for_write(path);
    os.write("MGCK", 4);
    write_u32le(os, kCheckpointVersion);
    write_u32le(os, static_cast<uint32_t>(header_bytes.size()));
    os.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const std::string& name : ckpt.order) write_f32le_array(os, ckpt.tensors.at(name).second);
    if (!os) throw Error("checkpoint: write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream is = open_for_read(path);
    expect_magic(is, "MGCK", path);
    const uint32_t version = read_u32le(is, path + " version");
    if (version != kCheckpointVersion)
        throw Error(path + ": unsupported checkpoint version " + std::to_string(version) +
                    ", expected " + std::to_string(kCheckpointVersion));
    const uint32_t header_len = read_u32le(is, path + " header length");
    std::string header_bytes(header_len, '\0');
    if (!read_exact(is, header_bytes.data(), header_len))
        throw Error(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw Error(path + ": corrupt JSON header: " + e.what());
    }

    CheckpointData ckpt;
    ckpt.config = TrainConfig::from_json(header.at("config"));
    ckpt.step = header.at("trainer").at("step").get<int64_t>();
    ckpt.epoch = header.at("trainer").at("epoch").get<int64_t>();
    ckpt.adamw_step_count = header.at("trainer").at("adamw_step_count").get<int64_t>();
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        const int64_t numel = entry.at("numel").get<int64_t>();
        if (numel != shape_numel(shape))
            throw Error(path + ": table entry '" + name + "' numel " + std::to_string(numel) +
                        " does not match shape " + shape_str(shape));
        std::vector<float> data;
        try {
            data = read_f32le_array(is, static_cast<size_t>(numel), "tensor '" + name + "'");
        } catch (const Error& e) {
            throw Error(path + ": " + e.what());
        }
        ckpt.add(name, std::move(shape), std::move(data));
    }
    return ckpt;
}

}  // namespace mugs
