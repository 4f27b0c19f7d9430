#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "golemm/core.hpp"

namespace golemm {

/// Time series table, dimension schema and model registry names; the
/// durable metadata side of a store.
struct StoreCatalog {
    std::vector<TimeSeriesMeta> series;
    std::vector<DimensionHierarchy> dimensions;
    std::map<std::uint8_t, std::string> model_names;

    const TimeSeriesMeta& by_tid(Tid tid) const;
    bool has_tid(Tid tid) const;
    /// Group member tids in position order (ascending tid).
    std::vector<TimeSeriesGroup> groups() const;
    Tid next_tid() const;
    Gid next_gid() const;
};

struct TimeRange {
    Timestamp from;
    Timestamp to;  // inclusive
};

/// Durable segment storage. Layout: catalog.tsv, model_types.tsv and
/// append-only segments-<n>.bin batch files. (Gid, EndTime, Gaps) is the
/// primary key; duplicates are rejected.
class SegmentStore {
public:
    static SegmentStore create(const std::filesystem::path& dir, StoreCatalog catalog);
    static SegmentStore open(const std::filesystem::path& dir);

    /// Appends one durable batch file; the whole batch is validated
    /// before anything is written. Returns the record count.
    std::size_t insert_segments(std::span<const Segment> batch);

    /// Same, with a caller-chosen batch file number (parallel writers
    /// keep deterministic file names by striding their own sequence).
    std::size_t insert_segments_numbered(std::uint64_t file_seq, std::span<const Segment> batch);

    /// Segments with gid in gids whose [start, end] intersects the
    /// range, ordered by (gid, end_time, gaps).
    std::vector<Segment> query_segments(const std::set<Gid>& gids,
                                        const std::optional<TimeRange>& range = {}) const;

    /// Rewrites catalog.tsv and model_types.tsv.
    void save_catalog() const;

    const StoreCatalog& catalog() const { return catalog_; }
    void set_catalog(StoreCatalog catalog);
    std::size_t segment_count() const;
    std::uint64_t segment_file_bytes() const { return file_bytes_; }

private:
    explicit SegmentStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    using PrimaryKey = std::tuple<Gid, Timestamp, std::uint64_t>;
    void load_segments_file(const std::filesystem::path& file);

    std::filesystem::path dir_;
    StoreCatalog catalog_;
    std::vector<Segment> segments_;
    std::set<PrimaryKey> keys_;
    std::uint64_t next_file_seq_ = 0;
    std::uint64_t file_bytes_ = 0;
    mutable std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
};

/// Catalog text serialization, also used on its own by tests.
std::string catalog_to_tsv(const StoreCatalog& catalog);
StoreCatalog catalog_from_tsv(const std::string& series_tsv, const std::string& models_tsv);
std::string models_to_tsv(const StoreCatalog& catalog);

}  // namespace golemm
