#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "capseg/data.hpp"
#include "capseg/error.hpp"
#include "capseg/io/png.hpp"

namespace capseg {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// Loader result: samples in filename order plus non-fatal warnings.
struct LoadedDataset {
    std::vector<SegSample> samples;
    std::vector<std::string> warnings;
    std::size_t missing_nonexpert = 0;
};

/// Splits a `caseID_sliceIndex` stem. Stems without a numeric suffix become
/// their own case with slice 0.
inline std::pair<std::string, int> parse_stem(const std::string& stem) {
    const auto pos = stem.rfind('_');
    if (pos == std::string::npos || pos + 1 == stem.size()) return {stem, 0};
    const std::string tail = stem.substr(pos + 1);
    if (!std::all_of(tail.begin(), tail.end(), [](unsigned char ch) { return std::isdigit(ch); })) return {stem, 0};
    return {stem.substr(0, pos), std::stoi(tail)};
}

inline std::string slice_stem(const SegSample& s) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "_%04d", s.slice_index);
    return s.case_id + buf;
}

namespace detail {

inline std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") out.emplace(e.path().stem().string(), e.path());
    }
    return out;
}

inline Mask load_mask(const fs::path& p) {
    const auto raw = io::read_gray_png(p);
    Mask m(raw.rows(), raw.cols());
    for (std::size_t i = 0; i < raw.size(); ++i) m[i] = raw[i] >= 128 ? 1 : 0;
    return m;
}

}  // namespace detail

/// Reads root/<split>/{images,masks_expert,masks_nonexpert}/<case>_<slice>.png.
/// A missing non-expert mask falls back to the expert mask (counted as a warning).
inline LoadedDataset load_dataset(const fs::path& root, Split split, Spacing spacing = {}) {
    const fs::path base = root / to_string(split);
    const auto images = detail::list_pngs(base / "images");
    const auto experts = detail::list_pngs(base / "masks_expert");
    const auto nonexperts = detail::list_pngs(base / "masks_nonexpert");
    LoadedDataset out;
    for (const auto& [stem, path] : experts) {
        if (!images.count(stem)) throw InvalidInput("expert mask without image: " + path.string());
    }
    for (const auto& [stem, img_path] : images) {
        auto ex = experts.find(stem);
        if (ex == experts.end()) throw InvalidInput("image without expert mask: " + img_path.string());
        SegSample s;
        std::tie(s.case_id, s.slice_index) = parse_stem(stem);
        s.spacing = spacing;
        const auto raw = io::read_gray_png(img_path);
        RealGrid img(raw.rows(), raw.cols());
        for (std::size_t i = 0; i < raw.size(); ++i) img[i] = raw[i] / 255.0;
        s.image = normalize(img);
        s.expert_mask = detail::load_mask(ex->second);
        if (auto ne = nonexperts.find(stem); ne != nonexperts.end()) {
            s.nonexpert_mask = detail::load_mask(ne->second);
        } else {
            s.nonexpert_mask = s.expert_mask;
            ++out.missing_nonexpert;
            out.warnings.push_back("no non-expert mask for " + stem + "; using the expert mask");
        }
        if (!s.image.same_shape(s.expert_mask) || !s.image.same_shape(s.nonexpert_mask))
            throw InvalidInput("image and mask sizes differ for " + img_path.string());
        out.samples.push_back(std::move(s));
    }
    if (out.samples.empty()) out.warnings.push_back("no samples found under " + base.string());
    return out;
}

/// Writes samples in the layout read by load_dataset.
inline void write_dataset(const fs::path& root, Split split, const std::vector<SegSample>& samples) {
    const fs::path base = root / to_string(split);
    for (const char* sub : {"images", "masks_expert", "masks_nonexpert"}) fs::create_directories(base / sub);
    for (const auto& s : samples) {
        const std::string name = slice_stem(s) + ".png";
        io::write_gray_png(base / "images" / name, io::to_u8(s.image));
        io::write_gray_png(base / "masks_expert" / name, io::mask_to_u8(s.expert_mask));
        io::write_gray_png(base / "masks_nonexpert" / name, io::mask_to_u8(s.nonexpert_mask));
    }
}

/// FNV-1a 64 over relative paths and contents of every regular file under
/// `root`, visited in sorted path order.
inline std::uint64_t content_hash(const fs::path& root) {
    std::vector<fs::path> files;
    if (fs::is_directory(root)) {
        for (const auto& e : fs::recursive_directory_iterator(root))
            if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](unsigned char byte) {
        h ^= byte;
        h *= 0x100000001b3ULL;
    };
    for (const auto& f : files) {
        for (char ch : fs::relative(f, root).generic_string()) mix(static_cast<unsigned char>(ch));
        std::ifstream in(f, std::ios::binary);
        for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) mix(static_cast<unsigned char>(*it));
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace capseg
