#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "golemm/core.hpp"
#include "golemm/model_types.hpp"

namespace golemm {

struct IngestConfig {
    std::vector<std::uint8_t> model_type_order = {kMidPmcMean, kMidSwing, kMidGorilla};
    ErrorSpec error;
    std::uint32_t length_bound = 50;
    double split_fraction = 10.0;  // split check when ratio < avg / split_fraction
    bool dynamic_grouping = true;
    bool track_error = true;
};

struct IngestStats {
    std::uint64_t points = 0;  // non-gap (timestamp, member) cells ingested
    std::uint64_t segments = 0;
    std::uint64_t payload_bytes = 0;
    std::uint64_t splits = 0;
    std::uint64_t merge_attempts = 0;
    std::uint64_t merges = 0;       // fused child sets (partial or full)
    std::uint64_t full_merges = 0;  // original group restored
    std::size_t buffer_high_water = 0;
    std::uint32_t max_lossy_run = 0;
    std::uint64_t split_merge_nanos = 0;
    std::map<std::uint8_t, std::uint64_t> segments_by_mid;
    double abs_error_sum = 0.0;  // sum |real - approx| over emitted cells
    double abs_value_sum = 0.0;  // sum |real|

    double average_error_percent() const {
        return abs_value_sum == 0.0 ? 0.0 : abs_error_sum / abs_value_sum * 100.0;
    }
};

/// Windowed multi-model fitter for one group (or one split subset of a
/// group). Buffers data points, keeps the active model covering the
/// whole buffer, and emits the best-compressing candidate whenever no
/// configured type can cover everything. Gap transitions cut segments.
class SegmentGenerator {
public:
    SegmentGenerator(Gid gid, int group_size, Timestamp si, std::vector<int> positions,
                     std::vector<double> scalings, const ModelTypeRegistry& registry,
                     const IngestConfig& config, IngestStats& stats);

    /// One sampling interval. values[i] belongs to positions()[i];
    /// nullopt marks an absent member. Emitted segments are appended.
    void tick(Timestamp ts, std::span<const std::optional<float>> values,
              std::vector<Segment>& out);

    /// Emits best candidates until the buffer drains.
    void flush(std::vector<Segment>& out);

    const std::vector<int>& positions() const { return positions_; }
    std::uint64_t live_mask() const { return live_mask_; }
    std::size_t buffer_length() const { return times_.size(); }
    bool buffer_empty() const { return times_.empty(); }
    std::uint64_t emitted_segments() const { return emitted_; }
    double last_ratio() const { return last_ratio_; }
    double average_ratio() const { return emitted_ ? ratio_sum_ / emitted_ : 0.0; }

    /// Buffered (scaled) values of one owned position; empty when the
    /// member is absent.
    std::span<const float> buffered(int position) const;

    const ErrorSpec& error_spec() const { return config_.error; }

private:
    friend class GroupCompressor;

    struct Column {
        int position = 0;
        double scaling = 1.0;
        bool live = false;
        std::vector<float> scaled;
        std::vector<float> raw;
    };

    struct Candidate {
        std::uint8_t mid = 0;
        int list_pos = 0;
        std::uint32_t points = 0;
        std::vector<std::uint8_t> payload;
    };

    int live_column_count() const;
    std::uint64_t recompute_live_mask() const;
    std::uint32_t replay(ModelFitState& state) const;
    void make_active();
    void ensure_cover(std::vector<Segment>& out);
    Segment emit_one();
    void accumulate_error(const Segment& segment) const;
    void drain(std::uint32_t points);

    Gid gid_;
    int group_size_;
    Timestamp si_;
    std::vector<int> positions_;
    const ModelTypeRegistry& registry_;
    const IngestConfig& config_;
    IngestStats& stats_;

    std::vector<Column> cols_;
    std::deque<Timestamp> times_;
    std::uint64_t live_mask_ = 0;
    std::optional<Timestamp> next_ts_;

    std::unique_ptr<ModelFitState> active_;
    std::size_t cursor_ = 0;
    std::vector<Candidate> candidates_;

    std::uint64_t emitted_ = 0;
    double ratio_sum_ = 0.0;
    double last_ratio_ = 0.0;
};

/// Drives one group end to end: forwards ticks to the current segment
/// generator(s), splits the group when a freshly emitted segment
/// compresses far below the running average, and merges split subsets
/// back once their streams re-converge.
class GroupCompressor {
public:
    GroupCompressor(const TimeSeriesGroup& group, std::vector<double> scalings,
                    const ModelTypeRegistry& registry, IngestConfig config);

    /// values[i] belongs to group position i (nullopt = absent).
    std::vector<Segment> tick(Timestamp ts, std::span<const std::optional<float>> values);

    std::vector<Segment> flush();

    const IngestStats& stats() const { return stats_; }
    bool is_split() const { return generators_.size() > 1; }
    std::size_t generator_count() const { return generators_.size(); }
    std::uint32_t merge_threshold() const { return merge_threshold_; }

private:
    void maybe_split_index(std::size_t index, std::vector<Segment>& out);
    void maybe_merge(std::span<const std::optional<float>> values, std::vector<Segment>& out);
    std::unique_ptr<SegmentGenerator> make_generator(const std::vector<int>& positions);
    bool pair_within_double_bound(std::span<const float> seed,
                                  std::span<const float> other) const;

    TimeSeriesGroup group_;
    std::vector<double> scalings_;
    const ModelTypeRegistry& registry_;
    IngestConfig config_;
    IngestStats stats_;

    std::vector<std::unique_ptr<SegmentGenerator>> generators_;
    std::vector<std::uint64_t> merge_baseline_;  // emitted count at last attempt
    std::uint32_t merge_threshold_ = 1;
};

}  // namespace golemm
