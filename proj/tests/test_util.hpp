#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "golemm/core.hpp"
#include "golemm/ingest.hpp"
#include "golemm/model_types.hpp"

namespace golemm::testutil {

inline std::vector<std::optional<float>> row(std::initializer_list<std::optional<float>> vs) {
    return {vs};
}

/// Drives a compressor over dense per-member value rows starting at t0.
/// rows[k][m] is member m's value at tick k (nullopt = absent).
inline std::vector<Segment> run_rows(GroupCompressor& compressor, Timestamp t0, Timestamp si,
                                     const std::vector<std::vector<std::optional<float>>>& rows,
                                     bool flush = true) {
    std::vector<Segment> out;
    Timestamp ts = t0;
    for (const auto& r : rows) {
        for (auto& s : compressor.tick(ts, r)) out.push_back(std::move(s));
        ts += si;
    }
    if (flush)
        for (auto& s : compressor.flush()) out.push_back(std::move(s));
    return out;
}

/// Reconstructs every (tid-position, timestamp) cell of the segments.
inline std::map<std::pair<int, Timestamp>, float> reconstruct_cells(
    const std::vector<Segment>& segments, int group_size,
    const ModelTypeRegistry& registry = default_registry()) {
    std::map<std::pair<int, Timestamp>, float> cells;
    for (const auto& seg : segments) {
        for (int p = 0; p < group_size; ++p) {
            if (seg.gaps & (std::uint64_t{1} << p)) continue;
            for (const Timestamp t : segment_timestamps(seg)) {
                const auto key = std::make_pair(p, t);
                if (cells.count(key)) throw std::runtime_error("duplicate reconstructed cell");
                cells[key] = static_cast<float>(registry.evaluate(seg, group_size, t, p));
            }
        }
    }
    return cells;
}

/// Synthetic value streams used across the suites.
struct SeriesSpec {
    enum class Regime { Constant, Linear, Noisy, Mixed };
    Regime regime = Regime::Constant;
    std::size_t points = 200;
    double base = 10.0;
    std::uint32_t seed = 1;
    double gap_probability = 0.0;  // chance of starting a short gap at each tick
};

inline std::vector<std::optional<float>> synth_series(const SeriesSpec& spec) {
    std::mt19937 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> gap_len(1, 5);
    std::uniform_int_distribution<int> quantum(-40, 40);
    std::vector<std::optional<float>> out;
    out.reserve(spec.points);
    std::size_t gap_left = 0;
    double phase_base = spec.base;
    double slope = 0.0;
    int regime_phase = 0;
    for (std::size_t k = 0; k < spec.points; ++k) {
        if (gap_left > 0) {
            --gap_left;
            out.push_back(std::nullopt);
            continue;
        }
        if (spec.gap_probability > 0 && unit(rng) < spec.gap_probability)
            gap_left = static_cast<std::size_t>(gap_len(rng));

        double v = spec.base;
        switch (spec.regime) {
            case SeriesSpec::Regime::Constant:
                v = spec.base;
                break;
            case SeriesSpec::Regime::Linear:
                v = spec.base + 0.01 * spec.base * static_cast<double>(k);
                break;
            case SeriesSpec::Regime::Noisy:
                // ADC-style quantized noise: dyadic steps keep the XOR
                // codec realistic while defeating constant/linear fits.
                v = spec.base + 0.5 * quantum(rng);
                break;
            case SeriesSpec::Regime::Mixed: {
                if (k % 60 == 0) {
                    regime_phase = (regime_phase + 1) % 3;
                    phase_base = spec.base * (1.0 + 0.2 * unit(rng));
                    slope = 0.002 * spec.base * (unit(rng) - 0.5);
                }
                if (regime_phase == 0)
                    v = phase_base;
                else if (regime_phase == 1)
                    v = phase_base + slope * static_cast<double>(k % 60);
                else
                    v = phase_base + 0.5 * quantum(rng);
                break;
            }
        }
        out.push_back(static_cast<float>(v));
    }
    return out;
}

inline TimeSeriesGroup make_group(Gid gid, std::vector<Tid> tids, Timestamp si) {
    TimeSeriesGroup g;
    g.gid = gid;
    g.tids = std::move(tids);
    g.si = si;
    return g;
}

/// Scratch directory under the system temp root, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<unsigned> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("golemm-" + tag + "-" + std::to_string(::getpid()) + "-" +
                 std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline void write_series_csv(const std::filesystem::path& path,
                             const std::vector<DataPoint>& points) {
    std::ofstream out(path, std::ios::binary);
    out << "timestamp,value\n";
    for (const auto& p : points) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%lld,%.9g\n", static_cast<long long>(p.timestamp),
                      static_cast<double>(p.value));
        out << buf;
    }
}

inline std::string read_binary(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace golemm::testutil
