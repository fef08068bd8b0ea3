#pragma once

// Tensor file format: an 8-byte little-endian manifest length, the manifest
// as one JSON object, then a raw blob of little-endian IEEE-754 f32 data.
// Offsets in the manifest are relative to the blob start. Tensor payloads are
// laid out in sorted-name order so identical contents give identical bytes.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace repe {

struct TensorEntry {
    std::vector<std::size_t> shape;
    std::vector<float> data;  // row-major
};

struct Container {
    nlohmann::json meta;  // embedded config / adapter metadata
    std::map<std::string, TensorEntry> tensors;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace repe
