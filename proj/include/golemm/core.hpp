#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace golemm {

/// Milliseconds since the Unix epoch. All timestamps in the engine are
/// integer milliseconds.
using Timestamp = std::int64_t;

using Tid = std::int32_t;
using Gid = std::int32_t;

struct DataPoint {
    Timestamp timestamp = 0;
    float value = 0.0f;
};

enum class ErrorMode { Absolute, Relative };

/// Per-point uniform-norm error tolerance. In Relative mode epsilon is a
/// percentage of the real value; epsilon = 0 demands an exact match.
struct ErrorSpec {
    ErrorMode mode = ErrorMode::Relative;
    double epsilon = 0.0;

    double bound(double real) const;
};

/// True iff approx deviates from real by at most spec.bound(real).
/// In relative mode a real value of exactly 0 only admits approx == 0.
bool within_bound(double real, double approx, const ErrorSpec& spec);

/// Identity and metadata of one time series (one catalog row).
/// members[d][k] is the member at level k+1 of dimension d.
struct TimeSeriesMeta {
    Tid tid = 0;
    Gid gid = 0;
    double scaling = 1.0;
    Timestamp si = 0;
    std::string source;
    std::vector<std::vector<std::string>> members;
    std::optional<Timestamp> first_timestamp;
};

/// A named hierarchy of levels 1..n; the top element is the implicit
/// level 0 shared by every series.
struct DimensionHierarchy {
    std::string name;
    std::vector<std::string> level_names;

    int level_count() const { return static_cast<int>(level_names.size()); }
};

/// Checks that every series carries one member per level of every
/// dimension and that each member has a single parent across the data
/// set. Throws std::invalid_argument on violations.
void validate_dimensions(const std::vector<DimensionHierarchy>& dims,
                         const std::vector<TimeSeriesMeta>& series);

inline constexpr std::size_t kMaxGroupSize = 64;

/// An aligned set of series compressed together. Member order is fixed
/// at creation; the position of a tid is its bit index in segment gap
/// bitmasks.
struct TimeSeriesGroup {
    Gid gid = 0;
    std::vector<Tid> tids;
    Timestamp si = 0;

    int size() const { return static_cast<int>(tids.size()); }
};

/// One model-compressed, time-bounded chunk of a group. A set bit i in
/// gaps means the member at position i is absent for the whole segment.
struct Segment {
    Gid gid = 0;
    Timestamp start_time = 0;
    Timestamp end_time = 0;
    Timestamp si = 1;
    std::uint64_t gaps = 0;
    std::uint8_t mid = 0;
    std::vector<std::uint8_t> payload;

    std::int64_t size() const { return (end_time - start_time) / si; }
    std::int64_t point_count() const { return size() + 1; }
};

/// Bitmask with one set bit per group position < group_size.
std::uint64_t position_mask(int group_size);

/// Number of live (non-gap) members of a segment for a group of the
/// given size.
int live_member_count(const Segment& segment, int group_size);

/// Rank of a live member among the segment's live positions.
/// Throws std::invalid_argument if the member is absent.
int live_member_rank(const Segment& segment, int member_index);

Timestamp recompute_start_time(Timestamp end_time, std::int64_t size, Timestamp si);

std::vector<Timestamp> segment_timestamps(const Segment& segment);

}  // namespace golemm
