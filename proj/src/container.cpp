#include "repe/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "repe/common.hpp"

namespace repe {

static_assert(sizeof(float) == 4);

namespace {

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

}  // namespace

void write_container(const std::string& path, const Container& c) {
    nlohmann::json manifest;
    manifest["format"] = "repe-tensors-v1";
    manifest["meta"] = c.meta;

    std::string blob;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, entry] : c.tensors) {
        if (entry.data.size() != numel(entry.shape))
            throw DimensionMismatch("tensor '" + name + "' data does not match its shape");
        nlohmann::json t;
        t["dtype"] = "f32";
        t["shape"] = entry.shape;
        t["offset"] = blob.size();
        t["nbytes"] = entry.data.size() * 4;
        tensors[name] = t;
        for (float f : entry.data) put_u32_le(blob, std::bit_cast<std::uint32_t>(f));
    }
    manifest["tensors"] = tensors;

    const std::string header = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    std::uint64_t len = header.size();
    char len_bytes[8];
    for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(len_bytes, 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed: " + path);
}

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8) throw ParseError("container too short: " + path);

    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i)
        len |= std::uint64_t(static_cast<unsigned char>(bytes[i])) << (8 * i);
    if (8 + len > bytes.size()) throw ParseError("manifest length out of bounds: " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad container manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "repe-tensors-v1")
        throw ParseError("unknown container format in " + path);

    const unsigned char* blob =
        reinterpret_cast<const unsigned char*>(bytes.data()) + 8 + len;
    const std::size_t blob_size = bytes.size() - 8 - len;

    Container c;
    c.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& [name, t] : manifest.at("tensors").items()) {
        if (t.value("dtype", "") != "f32")
            throw ParseError("tensor '" + name + "': unsupported dtype");
        TensorEntry entry;
        entry.shape = t.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = t.at("offset").get<std::size_t>();
        const std::size_t nbytes = t.at("nbytes").get<std::size_t>();
        if (nbytes != numel(entry.shape) * 4)
            throw ParseError("tensor '" + name + "': nbytes does not match shape");
        if (offset + nbytes > blob_size)
            throw ParseError("tensor '" + name + "': data out of bounds");
        entry.data.resize(nbytes / 4);
        for (std::size_t i = 0; i < entry.data.size(); ++i)
            entry.data[i] = std::bit_cast<float>(get_u32_le(blob + offset + 4 * i));
        c.tensors.emplace(name, std::move(entry));
    }
    return c;
}

}  // namespace repe
