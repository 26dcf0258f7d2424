#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lefm/error.hpp"

namespace lefm::train {

struct NamedArray {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

/// Container: 8-byte magic, u32 format version, u64 header length, a JSON
/// header (metadata plus the array directory), then every array as raw
/// little-endian doubles in directory order.
struct Checkpoint {
    static constexpr char kMagic[8] = {'L', 'E', 'F', 'M', 'C', 'K', 'P', 'T'};
    static constexpr std::uint32_t kFormatVersion = 1;

    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const
    {
        for (const auto& a : arrays)
            if (a.name == name)
                return &a;
        return nullptr;
    }

    const NamedArray& at(const std::string& name) const
    {
        if (const auto* a = find(name))
            return *a;
        throw DataError("checkpoint has no array '" + name + "'");
    }

    template <typename T>
    void add(std::string name, std::vector<std::size_t> shape, const T& values)
    {
        arrays.push_back({std::move(name), std::move(shape), std::vector<double>(values.begin(), values.end())});
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck)
{
    static_assert(sizeof(double) == 8);
    nlohmann::json header;
    header["meta"] = ck.meta;
    header["arrays"] = nlohmann::json::array();
    for (const auto& a : ck.arrays)
        header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"count", a.values.size()}});
    const std::string text = header.dump();

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out)
            throw DataError("cannot write checkpoint " + path.string());
        out.write(Checkpoint::kMagic, sizeof Checkpoint::kMagic);
        const std::uint32_t version = Checkpoint::kFormatVersion;
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& a : ck.arrays)
            out.write(reinterpret_cast<const char*>(a.values.data()),
                      static_cast<std::streamsize>(a.values.size() * sizeof(double)));
        if (!out)
            throw DataError("error while writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, Checkpoint::kMagic, sizeof magic) != 0)
        throw DataError("not a checkpoint file: " + path.string());
    if (version != Checkpoint::kFormatVersion)
        throw DataError("unsupported checkpoint format version " + std::to_string(version) + ": " + path.string());
    if (len > (std::uint64_t{1} << 32))
        throw DataError("corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    Checkpoint ck;
    try {
        const auto header = nlohmann::json::parse(text);
        ck.meta = header.at("meta");
        for (const auto& entry : header.at("arrays")) {
            NamedArray a;
            a.name = entry.at("name").get<std::string>();
            a.shape = entry.at("shape").get<std::vector<std::size_t>>();
            a.values.resize(entry.at("count").get<std::size_t>());
            in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(double)));
            ck.arrays.push_back(std::move(a));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    if (!in)
        throw DataError("truncated checkpoint: " + path.string());
    return ck;
}

} // namespace lefm::train
