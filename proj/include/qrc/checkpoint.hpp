#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "qrc/tensor.hpp"

namespace qrc {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Named-tensor container: a compact JSON manifest listing
// {name, shape, dtype, offset, length} per tensor, a single newline after
// the manifest's closing brace, then the raw little-endian float32 payload.
// Offsets are relative to the start of the payload.
inline void save_tensors(const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors,
                         const std::string& path) {
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        std::uint64_t length = t->numel() * sizeof(float);
        manifest["tensors"].push_back({{"name", name},
                                       {"shape", t->shape},
                                       {"dtype", "f32"},
                                       {"offset", offset},
                                       {"length", length}});
        offset += length;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
    out << manifest.dump() << "\n";
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t->data.data()),
                  static_cast<std::streamsize>(t->numel() * sizeof(float)));
    if (!out) throw CheckpointError("checkpoint write failed: " + path);
}

inline std::map<std::string, Tensor<float>> load_tensors(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t sep = blob.find('\n');
    if (sep == std::string::npos) throw CheckpointError("checkpoint has no manifest separator");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(blob.substr(0, sep));
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad checkpoint manifest: ") + e.what());
    }
    const char* payload = blob.data() + sep + 1;
    std::uint64_t payload_size = blob.size() - sep - 1;

    std::map<std::string, Tensor<float>> out;
    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        std::string dtype = entry.at("dtype").get<std::string>();
        std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
        std::uint64_t length = entry.at("length").get<std::uint64_t>();
        if (dtype != "f32") throw CheckpointError("unsupported dtype in checkpoint: " + dtype);
        auto numel = static_cast<std::uint64_t>(Tensor<float>::numel_of(shape));
        if (length != numel * sizeof(float))
            throw CheckpointError("manifest length disagrees with shape for " + name);
        if (offset + length > payload_size)
            throw CheckpointError("truncated checkpoint payload at tensor " + name);
        std::vector<float> data(numel);
        std::memcpy(data.data(), payload + offset, length);
        Tensor<float> t(shape, std::move(data));
        if (!t.all_finite()) throw CheckpointError("non-finite values in checkpoint tensor " + name);
        out.emplace(std::move(name), std::move(t));
    }
    return out;
}

} // namespace qrc
