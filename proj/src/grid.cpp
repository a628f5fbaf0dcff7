#include "urbanet/grid.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <limits>
#include <sstream>

#include "urbanet/error.hpp"

namespace urbanet {

namespace {

constexpr std::array<char, 4> kMagic = {'W', 'G', 'R', 'D'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "WGRD codec assumes a little-endian host");

class Writer {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_text(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
    template <class T>
    void put_array(const std::vector<T>& v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
        bytes.insert(bytes.end(), p, p + v.size() * sizeof(T));
    }

    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_text(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    template <class T>
    std::vector<T> get_array(std::size_t n) {
        if (n > (bytes_.size() - pos_) / sizeof(T)) {
            throw FormatError("WGRD: truncated data (need " + std::to_string(n * sizeof(T)) +
                              " bytes at offset " + std::to_string(pos_) + ")");
        }
        std::vector<T> v(n);
        std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(T));
        pos_ += n * sizeof(T);
        return v;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw FormatError("WGRD: truncated data at offset " + std::to_string(pos_));
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::string pixel_text(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "," + std::to_string(c) + ")";
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

WorldGrid::WorldGrid(std::size_t h, std::size_t w)
    : height(h), width(w), mask(h * w, 0), regions(h * w, 0) {}

std::size_t WorldGrid::land_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

std::optional<std::size_t> WorldGrid::find_channel(std::string_view name) const {
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t WorldGrid::channel_index(std::string_view name) const {
    auto idx = find_channel(name);
    if (!idx) throw PreconditionError("grid has no channel named '" + std::string(name) + "'");
    return *idx;
}

const Channel& WorldGrid::channel(std::string_view name) const {
    return channels[channel_index(name)];
}

std::vector<std::string> WorldGrid::channel_names() const {
    std::vector<std::string> names;
    names.reserve(channels.size());
    for (const auto& ch : channels) names.push_back(ch.name);
    return names;
}

void WorldGrid::add_channel(std::string name, std::vector<double> plane) {
    if (plane.size() != size()) {
        throw IntegrityError("channel '" + name + "' has " + std::to_string(plane.size()) +
                             " values, expected " + std::to_string(size()));
    }
    if (find_channel(name)) throw IntegrityError("duplicate channel name '" + name + "'");
    channels.push_back({std::move(name), std::move(plane)});
}

std::optional<std::uint16_t> WorldGrid::region_code(std::string_view iso) const {
    for (const auto& [code, name] : region_table) {
        if (name == iso) return code;
    }
    return std::nullopt;
}

void WorldGrid::validate() const {
    if (channels.empty()) throw FormatError("grid must carry at least one channel");
    const std::size_t n = size();
    if (mask.size() != n || regions.size() != n) {
        throw IntegrityError("mask/regions shape does not match " + std::to_string(height) + "x" +
                             std::to_string(width));
    }
    std::set<std::string_view> seen;
    for (const auto& ch : channels) {
        if (ch.name.empty()) throw FormatError("channel names must be non-empty");
        if (!seen.insert(ch.name).second) throw FormatError("duplicate channel name '" + ch.name + "'");
        if (ch.plane.size() != n) {
            throw IntegrityError("channel '" + ch.name + "' shape does not match the grid");
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (mask[i] > 1) throw IntegrityError("mask values must be 0 or 1 at " + pixel_text(i / width, i % width));
        if (mask[i] == 0) {
            if (regions[i] != 0) {
                throw IntegrityError("water pixel " + pixel_text(i / width, i % width) + " has region " +
                                     std::to_string(regions[i]));
            }
            for (const auto& ch : channels) {
                if (ch.plane[i] != 0.0) {
                    throw IntegrityError("water pixel " + pixel_text(i / width, i % width) +
                                         " has nonzero value in channel '" + ch.name + "'");
                }
            }
        }
    }
}

std::vector<std::uint8_t> encode_grid(const WorldGrid& grid) {
    grid.validate();
    if (grid.height > std::numeric_limits<std::uint32_t>::max() ||
        grid.width > std::numeric_limits<std::uint32_t>::max() ||
        grid.channels.size() > std::numeric_limits<std::uint16_t>::max() ||
        grid.region_table.size() > std::numeric_limits<std::uint16_t>::max()) {
        throw FormatError("grid dimensions exceed WGRD limits");
    }

    Writer w;
    for (char c : kMagic) w.put(c);
    w.put(kVersion);
    w.put(static_cast<std::uint32_t>(grid.height));
    w.put(static_cast<std::uint32_t>(grid.width));
    w.put(static_cast<std::uint16_t>(grid.channels.size()));
    w.put(static_cast<std::uint16_t>(grid.region_table.size()));
    for (const auto& [code, iso] : grid.region_table) {
        if (iso.size() > 255) throw FormatError("region code text too long: " + iso);
        w.put(code);
        w.put(static_cast<std::uint8_t>(iso.size()));
        w.put_text(iso);
    }
    for (const auto& ch : grid.channels) {
        if (ch.name.size() > 255) throw FormatError("channel name too long: " + ch.name);
        w.put(static_cast<std::uint8_t>(ch.name.size()));
        w.put_text(ch.name);
    }
    w.put_array(grid.mask);
    w.put_array(grid.regions);
    for (const auto& ch : grid.channels) w.put_array(ch.plane);
    return std::move(w.bytes);
}

WorldGrid decode_grid(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    for (char c : kMagic) {
        if (r.get<char>() != c) throw FormatError("WGRD: bad magic");
    }
    const auto version = r.get<std::uint16_t>();
    if (version != kVersion) throw FormatError("WGRD: unsupported version " + std::to_string(version));

    const std::size_t h = r.get<std::uint32_t>();
    const std::size_t w = r.get<std::uint32_t>();
    const std::size_t n_channels = r.get<std::uint16_t>();
    const std::size_t n_regions = r.get<std::uint16_t>();
    if (n_channels == 0) throw FormatError("WGRD: at least one channel required");

    WorldGrid grid;
    grid.height = h;
    grid.width = w;
    for (std::size_t i = 0; i < n_regions; ++i) {
        const auto code = r.get<std::uint16_t>();
        const auto len = r.get<std::uint8_t>();
        if (!grid.region_table.emplace(code, r.get_text(len)).second) {
            throw FormatError("WGRD: duplicate region code " + std::to_string(code));
        }
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n_channels; ++i) {
        const auto len = r.get<std::uint8_t>();
        names.push_back(r.get_text(len));
    }

    // Each plane carries H*W entries; a stream that does not split into exactly
    // that layout is a shape mismatch between planes.
    const std::size_t n = h * w;
    const std::size_t expected = n + 2 * n + n_channels * 8 * n;
    if (r.remaining() != expected) {
        throw IntegrityError("WGRD: plane data is " + std::to_string(r.remaining()) + " bytes, expected " +
                             std::to_string(expected) + " for " + std::to_string(h) + "x" + std::to_string(w) +
                             " with " + std::to_string(n_channels) + " channels");
    }
    grid.mask = r.get_array<std::uint8_t>(n);
    grid.regions = r.get_array<std::uint16_t>(n);
    for (auto& name : names) grid.channels.push_back({std::move(name), r.get_array<double>(n)});
    grid.validate();
    return grid;
}

WorldGrid load_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open grid file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_grid(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const IntegrityError& e) {
        throw IntegrityError(path.string() + ": " + e.what());
    }
}

void save_grid(const WorldGrid& grid, const std::filesystem::path& path) {
    const auto bytes = encode_grid(grid);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

WorldGrid pad_grid(const WorldGrid& grid, std::size_t pad) {
    WorldGrid out(grid.height + 2 * pad, grid.width + 2 * pad);
    out.region_table = grid.region_table;
    for (std::size_t r = 0; r < grid.height; ++r) {
        const std::size_t src = grid.index(r, 0);
        const std::size_t dst = out.index(r + pad, pad);
        std::copy_n(grid.mask.begin() + src, grid.width, out.mask.begin() + dst);
        std::copy_n(grid.regions.begin() + src, grid.width, out.regions.begin() + dst);
    }
    for (const auto& ch : grid.channels) {
        std::vector<double> plane(out.size(), 0.0);
        for (std::size_t r = 0; r < grid.height; ++r) {
            std::copy_n(ch.plane.begin() + grid.index(r, 0), grid.width, plane.begin() + out.index(r + pad, pad));
        }
        out.channels.push_back({ch.name, std::move(plane)});
    }
    return out;
}

SplitAssignment assign_split(const WorldGrid& grid, const std::set<std::string>& test_regions) {
    SplitAssignment split;
    split.test_regions = test_regions;
    std::set<std::uint16_t> test_codes;
    for (const auto& iso : test_regions) {
        if (auto code = grid.region_code(iso)) {
            test_codes.insert(*code);
        } else {
            split.unknown_regions.push_back(iso);
            std::cerr << "warning: test region '" << iso << "' not present in the region table\n";
        }
    }
    split.labels.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid.mask[i] == 0) {
            split.labels[i] = SplitLabel::Water;
            ++split.water_count;
        } else if (test_codes.contains(grid.regions[i])) {
            split.labels[i] = SplitLabel::Test;
            ++split.test_count;
        } else {
            split.labels[i] = SplitLabel::Train;
            ++split.train_count;
        }
    }
    return split;
}

const ChannelStats* NormStats::find(std::string_view name) const {
    for (const auto& c : channels) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

Normalized normalize_channels(const WorldGrid& grid, const std::optional<NormStats>& stats,
                              const SplitAssignment& split, std::span<const std::string> channels) {
    if (split.labels.size() != grid.size()) throw ShapeError("split does not match grid shape");

    NormStats fitted;
    if (stats) {
        fitted = *stats;
        for (const auto& cs : fitted.channels) grid.channel_index(cs.name);
    } else {
        std::vector<std::string> names(channels.begin(), channels.end());
        if (names.empty()) names = grid.channel_names();
        for (const auto& name : names) {
            const auto& plane = grid.channel(name).plane;
            double lo = std::numeric_limits<double>::infinity();
            double hi = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < grid.size(); ++i) {
                if (split.labels[i] != SplitLabel::Train) continue;
                lo = std::min(lo, plane[i]);
                hi = std::max(hi, plane[i]);
            }
            if (!std::isfinite(lo)) {
                throw PreconditionError("channel '" + name + "' has no training land pixels to fit statistics");
            }
            if (hi == lo) throw DegenerateChannelError("channel '" + name + "' is constant over training land");
            fitted.channels.push_back({name, lo, hi});
        }
    }

    Normalized out{grid, fitted};
    for (const auto& cs : fitted.channels) {
        auto& plane = out.grid.channels[grid.channel_index(cs.name)].plane;
        if (fitted.mode == NormMode::MinMax) {
            if (cs.b == cs.a) throw DegenerateChannelError("channel '" + cs.name + "' has max == min");
            const double range = cs.b - cs.a;
            for (std::size_t i = 0; i < plane.size(); ++i) {
                plane[i] = grid.mask[i] ? (plane[i] - cs.a) / range : 0.0;
            }
        } else {
            if (!(cs.b > 0.0)) throw DegenerateChannelError("channel '" + cs.name + "' has zero stddev");
            for (std::size_t i = 0; i < plane.size(); ++i) {
                plane[i] = grid.mask[i] ? (plane[i] - cs.a) / cs.b : 0.0;
            }
        }
    }
    return out;
}

void save_norm_stats(const NormStats& stats, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& cs : stats.channels) {
        if (stats.mode == NormMode::MinMax) {
            out << "channel=" << cs.name << " min=" << format_double(cs.a) << " max=" << format_double(cs.b) << '\n';
        } else {
            out << "channel=" << cs.name << " mean=" << format_double(cs.a) << " std=" << format_double(cs.b)
                << '\n';
        }
    }
    if (!out) throw IoError("write failed for " + path.string());
}

NormStats load_norm_stats(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open stats file " + path.string());
    NormStats stats;
    std::string line;
    std::size_t lineno = 0;
    bool mode_set = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string field;
        ChannelStats cs;
        int seen = 0;
        NormMode mode = NormMode::MinMax;
        while (fields >> field) {
            const auto eq = field.find('=');
            if (eq == std::string::npos) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad field");
            const auto key = field.substr(0, eq);
            const auto value = field.substr(eq + 1);
            try {
                if (key == "channel") {
                    cs.name = value;
                    seen |= 1;
                } else if (key == "min" || key == "mean") {
                    cs.a = std::stod(value);
                    mode = key == "min" ? NormMode::MinMax : NormMode::ZScore;
                    seen |= 2;
                } else if (key == "max" || key == "std") {
                    cs.b = std::stod(value);
                    seen |= 4;
                } else {
                    throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unknown key " + key);
                }
            } catch (const std::logic_error&) {
                throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + value + "'");
            }
        }
        if (seen != 7) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": incomplete entry");
        if (mode_set && mode != stats.mode) throw FormatError(path.string() + ": mixed normalization modes");
        stats.mode = mode;
        mode_set = true;
        stats.channels.push_back(cs);
    }
    return stats;
}

}  // namespace urbanet
