#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "golemm/core.hpp"
#include "golemm/grouping.hpp"
#include "golemm/ingest.hpp"
#include "golemm/store.hpp"

namespace golemm {

struct EngineConfig {
    std::filesystem::path store;
    std::filesystem::path dimensions;
    std::optional<std::filesystem::path> grouping;
    ErrorSpec error{ErrorMode::Relative, 10.0};
    std::vector<std::string> model_types = {"pmc_mean", "swing", "gorilla"};
    std::uint32_t length_bound = 50;
    double split_fraction = 10.0;
    std::uint64_t batch_size = 50'000;
    int partitions = 1;
    bool dynamic_grouping = true;
};

/// Key-value config text, one `key = value` per line, '#' comments.
EngineConfig parse_engine_config(const std::string& text,
                                 const std::filesystem::path& base_dir);
EngineConfig load_engine_config(const std::filesystem::path& path);

struct DimensionsFile {
    std::vector<DimensionHierarchy> dimensions;
    std::vector<TimeSeriesMeta> series;
};

/// CSV with header tid,source,si,<Dim:Level>,... one row per series.
DimensionsFile load_dimensions_file(const std::filesystem::path& path);

/// Streaming reader for a `timestamp,value` series file. Validates the
/// header, monotonically increasing timestamps, SI-multiple steps and
/// finite values.
class CsvSeriesReader {
public:
    CsvSeriesReader(const std::filesystem::path& path, Timestamp si);
    ~CsvSeriesReader();
    CsvSeriesReader(CsvSeriesReader&&) noexcept;
    CsvSeriesReader& operator=(CsvSeriesReader&&) noexcept;

    std::optional<DataPoint> next();

private:
    std::filesystem::path path_;
    Timestamp si_;
    void* file_ = nullptr;
    std::optional<Timestamp> prev_ts_;
    std::size_t line_no_ = 1;
};

/// Whole series file in memory (tests and error verification).
std::vector<DataPoint> load_series_csv(const std::filesystem::path& path, Timestamp si);

struct IngestReport {
    std::size_t series = 0;
    std::size_t groups = 0;
    double average_group_size = 0.0;
    PartitionPlan plan;
    IngestStats stats;
    std::uint64_t store_bytes = 0;
    std::uint64_t raw_bytes = 0;  // 12 bytes per ingested data point
    double compression_ratio = 0.0;
    double elapsed_seconds = 0.0;
    double split_merge_share = 0.0;  // fraction of ingest wall time
};

/// Groups and partitions the sources, compresses every group (one
/// worker thread per partition) and writes the result as a new store.
IngestReport run_ingest(const EngineConfig& config,
                        const std::vector<std::filesystem::path>& sources);

/// Grouping and partitioning only, without touching the data files.
struct PlanReport {
    std::vector<TimeSeriesGroup> groups;
    PartitionPlan plan;
};
PlanReport run_plan(const EngineConfig& config,
                    const std::vector<std::filesystem::path>& sources);

IngestConfig make_ingest_config(const EngineConfig& config);

}  // namespace golemm
