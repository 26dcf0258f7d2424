#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lefm/data/png_io.hpp"
#include "lefm/error.hpp"
#include "lefm/image.hpp"

namespace lefm::data {

struct AnnotatedSample {
    std::string id;
    Image<float> image; // H x W x 3, values in [0, 1]
    std::vector<Mask> annotations;
    Mask majority_label;
    std::string patient_id;
    std::optional<std::string> organ;

    std::size_t annotator_count() const noexcept { return annotations.size(); }
};

/// Votes needed for a positive label with A annotators: at least half, so an
/// even split resolves to the positive class.
inline std::size_t majority_threshold(std::size_t annotators) noexcept { return (annotators + 1) / 2; }

/// Per-pixel majority of binary masks (any nonzero value counts as a vote).
inline Mask majority_vote(std::span<const Mask> masks)
{
    if (masks.empty())
        throw DataError("majority_vote: no annotator masks");
    const auto& first = masks.front();
    for (const auto& m : masks)
        if (m.height() != first.height() || m.width() != first.width() || m.channels() != 1)
            throw ShapeError("majority_vote: annotator masks differ in shape");
    const std::size_t need = majority_threshold(masks.size());
    Mask out(first.height(), first.width(), 1);
    for (std::size_t p = 0; p < out.size(); ++p) {
        std::size_t votes = 0;
        for (const auto& m : masks)
            votes += m.storage()[p] != 0;
        out.storage()[p] = votes >= need ? 1 : 0;
    }
    return out;
}

/// File naming of the on-disk layout.
struct DatasetLayout {
    std::string image_file = "image.png";
    std::string annotator_prefix = "annotator_";
    std::string annotator_suffix = ".png";
    std::string metadata_file = "metadata.csv";
    /// Annotator files are numbered from this index without gaps.
    int first_annotator = 1;
};

struct SampleMetadata {
    std::string patient_id;
    std::optional<std::string> organ;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ','))
        cells.push_back(cell);
    if (!line.empty() && line.back() == ',')
        cells.emplace_back();
    for (auto& c : cells) {
        while (!c.empty() && (c.back() == '\r' || c.back() == ' '))
            c.pop_back();
        c.erase(0, c.find_first_not_of(' '));
    }
    return cells;
}

inline std::optional<int> annotator_index(const std::string& name, const DatasetLayout& layout)
{
    if (!name.starts_with(layout.annotator_prefix) || !name.ends_with(layout.annotator_suffix))
        return std::nullopt;
    const std::string digits =
        name.substr(layout.annotator_prefix.size(),
                    name.size() - layout.annotator_prefix.size() - layout.annotator_suffix.size());
    int k = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size())
        return std::nullopt;
    return k;
}

} // namespace detail

/// Reads `metadata.csv` (header row with sample_id, patient_id and optionally
/// organ). Plain comma separation, no quoting.
inline std::map<std::string, SampleMetadata> read_metadata(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line))
        throw DataError(path.string() + ": empty metadata file");
    const auto header = detail::split_csv_line(line);
    auto column = [&](const std::string& name) -> std::optional<std::size_t> {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto sid = column("sample_id"), pid = column("patient_id"), organ = column("organ");
    if (!sid || !pid)
        throw DataError(path.string() + ": header must contain sample_id and patient_id");
    std::map<std::string, SampleMetadata> out;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r")
            continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                            " columns, found " + std::to_string(cells.size()));
        SampleMetadata meta{cells[*pid], std::nullopt};
        if (organ && !cells[*organ].empty())
            meta.organ = cells[*organ];
        if (!out.emplace(cells[*sid], meta).second)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": duplicate sample_id " + cells[*sid]);
    }
    return out;
}

/// Converts 8-bit RGB to floats in [0, 1] by dividing by 255.
inline Image<float> to_unit_range(const Image<std::uint8_t>& rgb)
{
    Image<float> out(rgb.height(), rgb.width(), rgb.channels());
    for (std::size_t i = 0; i < rgb.size(); ++i)
        out.storage()[i] = static_cast<float>(rgb.storage()[i]) / 255.0f;
    return out;
}

/// Quantizes [0, 1] values to 8 bits (values outside the range are clamped).
inline Image<std::uint8_t> to_bytes(const Image<float>& img)
{
    Image<std::uint8_t> out(img.height(), img.width(), img.channels());
    for (std::size_t i = 0; i < img.size(); ++i)
        out.storage()[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.storage()[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

/// Loads every `<root>/<sample_id>/` folder, sorted by sample id.
inline std::vector<AnnotatedSample> load_dataset(const std::filesystem::path& root, const DatasetLayout& layout = {})
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(root))
        throw DataError("dataset root is not a directory: " + root.string());
    std::map<std::string, SampleMetadata> metadata;
    const fs::path meta_path = root / layout.metadata_file;
    const bool has_metadata = fs::exists(meta_path);
    if (has_metadata)
        metadata = read_metadata(meta_path);

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory())
            dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw DataError("dataset root contains no sample folders: " + root.string());

    std::vector<AnnotatedSample> samples;
    std::optional<std::size_t> expected_annotators;
    for (const auto& dir : dirs) {
        AnnotatedSample s;
        s.id = dir.filename().string();
        const fs::path image_path = dir / layout.image_file;
        if (!fs::exists(image_path))
            throw DataError("missing image file: " + image_path.string());
        s.image = to_unit_range(read_png_rgb(image_path));

        std::map<int, fs::path> masks;
        for (const auto& entry : fs::directory_iterator(dir)) {
            const auto name = entry.path().filename().string();
            if (!name.starts_with(layout.annotator_prefix))
                continue;
            const auto k = detail::annotator_index(name, layout);
            if (!k)
                throw DataError("unrecognized annotator file: " + entry.path().string());
            masks.emplace(*k, entry.path());
        }
        if (masks.empty())
            throw DataError("no annotator masks in " + dir.string());
        int expect_k = layout.first_annotator;
        for (const auto& [k, path] : masks) {
            if (k != expect_k)
                throw DataError("missing annotator mask " + (dir / (layout.annotator_prefix + std::to_string(expect_k) +
                                                                    layout.annotator_suffix))
                                                                .string());
            ++expect_k;
            auto m = read_png_gray(path);
            if (m.height() != s.image.height() || m.width() != s.image.width())
                throw DataError("mask size " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                                " does not match image " + std::to_string(s.image.height()) + "x" +
                                std::to_string(s.image.width()) + ": " + path.string());
            for (auto& v : m.storage())
                v = v != 0;
            s.annotations.push_back(std::move(m));
        }
        if (expected_annotators && *expected_annotators != s.annotations.size())
            throw DataError(dir.string() + " has " + std::to_string(s.annotations.size()) + " annotator masks, expected " +
                            std::to_string(*expected_annotators));
        expected_annotators = s.annotations.size();
        s.majority_label = majority_vote(s.annotations);

        if (has_metadata) {
            auto it = metadata.find(s.id);
            if (it == metadata.end())
                throw DataError(meta_path.string() + ": no row for sample " + s.id);
            s.patient_id = it->second.patient_id;
            s.organ = it->second.organ;
        } else {
            s.patient_id = s.id;
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

/// Writes samples in the layout read by load_dataset, including metadata.csv.
inline void save_dataset(const std::filesystem::path& root, std::span<const AnnotatedSample> samples,
                         const DatasetLayout& layout = {})
{
    namespace fs = std::filesystem;
    fs::create_directories(root);
    std::ofstream meta(root / layout.metadata_file, std::ios::binary);
    if (!meta)
        throw DataError("cannot write " + (root / layout.metadata_file).string());
    meta << "sample_id,patient_id,organ\n";
    for (const auto& s : samples) {
        const fs::path dir = root / s.id;
        fs::create_directories(dir);
        write_png(dir / layout.image_file, to_bytes(s.image));
        for (std::size_t k = 0; k < s.annotations.size(); ++k) {
            Mask m = s.annotations[k];
            for (auto& v : m.storage())
                v = v ? 255 : 0;
            write_png(dir / (layout.annotator_prefix + std::to_string(layout.first_annotator + static_cast<int>(k)) +
                             layout.annotator_suffix),
                      m);
        }
        meta << s.id << ',' << s.patient_id << ',' << s.organ.value_or("") << '\n';
    }
}

} // namespace lefm::data
