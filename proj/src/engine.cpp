#include "golemm/engine.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "golemm/model_types.hpp"

namespace golemm {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

}  // namespace

EngineConfig parse_engine_config(const std::string& text, const std::filesystem::path& base_dir) {
    EngineConfig config;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    const auto resolve = [&](const std::string& p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "store") {
                config.store = resolve(value);
            } else if (key == "dimensions") {
                config.dimensions = resolve(value);
            } else if (key == "grouping") {
                config.grouping = resolve(value);
            } else if (key == "error_mode") {
                if (value == "absolute")
                    config.error.mode = ErrorMode::Absolute;
                else if (value == "relative")
                    config.error.mode = ErrorMode::Relative;
                else
                    throw std::invalid_argument("error_mode must be absolute or relative");
            } else if (key == "epsilon") {
                config.error.epsilon = std::stod(value);
                if (config.error.epsilon < 0) throw std::invalid_argument("epsilon must be >= 0");
            } else if (key == "model_types") {
                config.model_types.clear();
                for (auto& name : split(value, ','))
                    if (!trim(name).empty()) config.model_types.push_back(trim(name));
            } else if (key == "length_bound") {
                config.length_bound = static_cast<std::uint32_t>(std::stoul(value));
            } else if (key == "split_fraction") {
                config.split_fraction = std::stod(value);
            } else if (key == "batch_size") {
                config.batch_size = std::stoull(value);
            } else if (key == "partitions") {
                config.partitions = std::stoi(value);
            } else if (key == "dynamic_grouping") {
                config.dynamic_grouping = value == "true" || value == "1" || value == "on";
            } else {
                throw std::invalid_argument("unknown key '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception&) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": bad value for " + key);
        }
    }
    if (config.store.empty()) throw std::invalid_argument("config is missing the store path");
    if (config.dimensions.empty())
        throw std::invalid_argument("config is missing the dimensions file");
    return config;
}

EngineConfig load_engine_config(const std::filesystem::path& path) {
    EngineConfig config = parse_engine_config(read_text(path), path.parent_path());
    if (!std::filesystem::exists(config.dimensions))
        throw std::runtime_error("dimensions file does not exist: " +
                                 config.dimensions.string());
    if (config.grouping && !std::filesystem::exists(*config.grouping))
        throw std::runtime_error("grouping config does not exist: " + config.grouping->string());
    return config;
}

namespace {

DimensionsFile load_dimensions_from_text(const std::string& text, const std::string& origin) {
    DimensionsFile out;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(origin + ": empty dimensions file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split(line, ',');
    if (header.size() < 3 || trim(header[0]) != "tid" || trim(header[1]) != "source" ||
        trim(header[2]) != "si")
        throw std::runtime_error(origin + ": header must start with tid,source,si");
    std::vector<std::pair<std::size_t, std::size_t>> column_map;
    for (std::size_t c = 3; c < header.size(); ++c) {
        const std::string col = trim(header[c]);
        const auto colon = col.find(':');
        if (colon == std::string::npos)
            throw std::runtime_error(origin + ": dimension column '" + col +
                                     "' must be named dimension:level");
        const std::string dim = col.substr(0, colon);
        const std::string level = col.substr(colon + 1);
        if (out.dimensions.empty() || out.dimensions.back().name != dim) {
            for (const auto& d : out.dimensions)
                if (d.name == dim)
                    throw std::runtime_error(origin + ": columns of dimension '" + dim +
                                             "' are not contiguous");
            out.dimensions.push_back({dim, {}});
        }
        out.dimensions.back().level_names.push_back(level);
        column_map.emplace_back(out.dimensions.size() - 1,
                                out.dimensions.back().level_names.size() - 1);
    }
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size())
            throw std::runtime_error(origin + " row " + std::to_string(line_no) +
                                     ": expected " + std::to_string(header.size()) + " cells");
        TimeSeriesMeta meta;
        try {
            meta.tid = std::stoi(trim(cells[0]));
            meta.si = std::stoll(trim(cells[2]));
        } catch (const std::exception&) {
            throw std::runtime_error(origin + " row " + std::to_string(line_no) +
                                     ": bad tid or si");
        }
        if (meta.tid <= 0 || meta.si <= 0)
            throw std::runtime_error(origin + " row " + std::to_string(line_no) +
                                     ": tid and si must be positive");
        meta.source = trim(cells[1]);
        meta.members.resize(out.dimensions.size());
        for (std::size_t d = 0; d < out.dimensions.size(); ++d)
            meta.members[d].resize(out.dimensions[d].level_names.size());
        for (std::size_t c = 0; c < column_map.size(); ++c)
            meta.members[column_map[c].first][column_map[c].second] = trim(cells[3 + c]);
        out.series.push_back(std::move(meta));
    }
    for (std::size_t i = 0; i < out.series.size(); ++i)
        for (std::size_t j = i + 1; j < out.series.size(); ++j)
            if (out.series[i].tid == out.series[j].tid)
                throw std::runtime_error(origin + ": duplicate tid " +
                                         std::to_string(out.series[i].tid));
    validate_dimensions(out.dimensions, out.series);
    return out;
}

}  // namespace

DimensionsFile load_dimensions_file(const std::filesystem::path& path) {
    return load_dimensions_from_text(read_text(path), path.string());
}

// ---------------------------------------------------------------------------

CsvSeriesReader::CsvSeriesReader(const std::filesystem::path& path, Timestamp si)
    : path_(path), si_(si) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    file_ = f;
    char header[64];
    if (!std::fgets(header, sizeof header, f)) {
        std::fclose(f);
        file_ = nullptr;
        throw std::runtime_error(path.string() + ": empty file");
    }
    std::string h(header);
    while (!h.empty() && (h.back() == '\n' || h.back() == '\r')) h.pop_back();
    if (h != "timestamp,value") {
        std::fclose(f);
        file_ = nullptr;
        throw std::runtime_error(path.string() + ": expected header 'timestamp,value'");
    }
}

CsvSeriesReader::~CsvSeriesReader() {
    if (file_) std::fclose(static_cast<std::FILE*>(file_));
}

CsvSeriesReader::CsvSeriesReader(CsvSeriesReader&& other) noexcept
    : path_(std::move(other.path_)),
      si_(other.si_),
      file_(other.file_),
      prev_ts_(other.prev_ts_),
      line_no_(other.line_no_) {
    other.file_ = nullptr;
}

CsvSeriesReader& CsvSeriesReader::operator=(CsvSeriesReader&& other) noexcept {
    if (this != &other) {
        if (file_) std::fclose(static_cast<std::FILE*>(file_));
        path_ = std::move(other.path_);
        si_ = other.si_;
        file_ = other.file_;
        prev_ts_ = other.prev_ts_;
        line_no_ = other.line_no_;
        other.file_ = nullptr;
    }
    return *this;
}

std::optional<DataPoint> CsvSeriesReader::next() {
    auto* f = static_cast<std::FILE*>(file_);
    if (!f) return std::nullopt;
    char buf[128];
    while (std::fgets(buf, sizeof buf, f)) {
        ++line_no_;
        std::string line(buf);
        while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        const auto fail = [this](const std::string& why) {
            throw std::runtime_error(path_.string() + " line " + std::to_string(line_no_) +
                                     ": " + why);
        };
        if (comma == std::string::npos) fail("expected timestamp,value");
        DataPoint p;
        const char* ts_begin = line.data();
        const char* ts_end = line.data() + comma;
        if (auto [ptr, ec] = std::from_chars(ts_begin, ts_end, p.timestamp);
            ec != std::errc{} || ptr != ts_end)
            fail("bad timestamp '" + line.substr(0, comma) + "'");
        const char* v_begin = line.data() + comma + 1;
        const char* v_end = line.data() + line.size();
        if (auto [ptr, ec] = std::from_chars(v_begin, v_end, p.value);
            ec != std::errc{} || ptr != v_end)
            fail("bad value '" + line.substr(comma + 1) + "'");
        if (!std::isfinite(p.value)) fail("value is not finite");
        if (p.timestamp < 0) fail("negative timestamp");
        if (prev_ts_) {
            if (p.timestamp <= *prev_ts_) fail("timestamps must increase");
            if ((p.timestamp - *prev_ts_) % si_ != 0)
                fail("timestamp step " + std::to_string(p.timestamp - *prev_ts_) +
                     " is not a multiple of the sampling interval " + std::to_string(si_));
        }
        prev_ts_ = p.timestamp;
        return p;
    }
    std::fclose(f);
    file_ = nullptr;
    return std::nullopt;
}

std::vector<DataPoint> load_series_csv(const std::filesystem::path& path, Timestamp si) {
    CsvSeriesReader reader(path, si);
    std::vector<DataPoint> out;
    while (auto p = reader.next()) out.push_back(*p);
    return out;
}

// ---------------------------------------------------------------------------

IngestConfig make_ingest_config(const EngineConfig& config) {
    IngestConfig out;
    out.model_type_order.clear();
    for (const auto& name : config.model_types)
        out.model_type_order.push_back(default_registry().by_name(name).descriptor().mid);
    out.error = config.error;
    out.length_bound = config.length_bound;
    out.split_fraction = config.split_fraction;
    out.dynamic_grouping = config.dynamic_grouping;
    return out;
}

namespace {

struct ActiveSeries {
    std::vector<TimeSeriesMeta> series;  // only the sources being ingested
    std::vector<DimensionHierarchy> dimensions;
    GroupingConfig grouping;
};

ActiveSeries prepare_series(const EngineConfig& config,
                            const std::vector<std::filesystem::path>& sources,
                            bool prescan_first_timestamps) {
    ActiveSeries out;
    DimensionsFile dims = load_dimensions_file(config.dimensions);
    out.dimensions = std::move(dims.dimensions);

    if (sources.empty()) throw std::invalid_argument("no sources given");
    for (const auto& src : sources) {
        const std::string full = src.string();
        const std::string base = src.filename().string();
        const TimeSeriesMeta* match = nullptr;
        for (const auto& m : dims.series)
            if (m.source == full || m.source == base) {
                if (match) throw std::runtime_error("source " + full + " matches several rows");
                match = &m;
            }
        if (!match)
            throw std::runtime_error("source " + full + " has no row in the dimensions file");
        TimeSeriesMeta meta = *match;
        meta.source = full;
        out.series.push_back(std::move(meta));
    }
    for (std::size_t i = 0; i < out.series.size(); ++i)
        for (std::size_t j = i + 1; j < out.series.size(); ++j)
            if (out.series[i].tid == out.series[j].tid)
                throw std::runtime_error("tid " + std::to_string(out.series[i].tid) +
                                         " ingested twice");

    if (prescan_first_timestamps) {
        for (auto& meta : out.series) {
            CsvSeriesReader reader(meta.source, meta.si);
            if (const auto first = reader.next()) meta.first_timestamp = first->timestamp;
        }
    }

    if (config.grouping) out.grouping = parse_grouping_config(read_text(*config.grouping));
    resolve_scaling(out.series, out.dimensions, out.grouping.scaling_rules);
    return out;
}

// Feeds one group's readers tick by tick into its compressor.
class GroupDriver {
public:
    GroupDriver(const TimeSeriesGroup& group, const std::vector<const TimeSeriesMeta*>& metas,
                const ModelTypeRegistry& registry, const IngestConfig& config)
        : group_(group) {
        std::vector<double> scalings;
        for (const auto* m : metas) {
            readers_.emplace_back(m->source, m->si);
            scalings.push_back(m->scaling);
        }
        compressor_ = std::make_unique<GroupCompressor>(group, std::move(scalings), registry,
                                                        config);
        pending_.resize(readers_.size());
        for (std::size_t i = 0; i < readers_.size(); ++i) pending_[i] = readers_[i].next();
    }

    template <typename Sink>
    void run(Sink&& sink) {
        std::optional<Timestamp> clock;
        for (const auto& p : pending_)
            if (p && (!clock || p->timestamp < *clock)) clock = p->timestamp;
        if (!clock) return;  // all sources empty

        std::vector<std::optional<float>> values(readers_.size());
        while (true) {
            bool any_pending = false;
            for (std::size_t i = 0; i < readers_.size(); ++i) {
                values[i] = std::nullopt;
                if (pending_[i] && pending_[i]->timestamp == *clock) {
                    values[i] = pending_[i]->value;
                    pending_[i] = readers_[i].next();
                }
                if (pending_[i]) any_pending = true;
            }
            sink(compressor_->tick(*clock, values));
            if (!any_pending) break;
            *clock += group_.si;
        }
        sink(compressor_->flush());
    }

    const IngestStats& stats() const { return compressor_->stats(); }

private:
    TimeSeriesGroup group_;
    std::vector<CsvSeriesReader> readers_;
    std::vector<std::optional<DataPoint>> pending_;
    std::unique_ptr<GroupCompressor> compressor_;
};

void merge_stats(IngestStats& total, const IngestStats& part) {
    total.points += part.points;
    total.segments += part.segments;
    total.payload_bytes += part.payload_bytes;
    total.splits += part.splits;
    total.merge_attempts += part.merge_attempts;
    total.merges += part.merges;
    total.full_merges += part.full_merges;
    total.buffer_high_water = std::max(total.buffer_high_water, part.buffer_high_water);
    total.max_lossy_run = std::max(total.max_lossy_run, part.max_lossy_run);
    total.split_merge_nanos += part.split_merge_nanos;
    for (const auto& [mid, n] : part.segments_by_mid) total.segments_by_mid[mid] += n;
    total.abs_error_sum += part.abs_error_sum;
    total.abs_value_sum += part.abs_value_sum;
}

}  // namespace

PlanReport run_plan(const EngineConfig& config,
                    const std::vector<std::filesystem::path>& sources) {
    ActiveSeries active = prepare_series(config, sources, /*prescan=*/false);
    PlanReport report;
    report.groups = group_time_series(active.series, active.dimensions, active.grouping);
    report.plan = partition_groups(report.groups, config.partitions);
    return report;
}

IngestReport run_ingest(const EngineConfig& config,
                        const std::vector<std::filesystem::path>& sources) {
    const auto t0 = std::chrono::steady_clock::now();

    ActiveSeries active = prepare_series(config, sources, /*prescan=*/true);
    const auto groups = group_time_series(active.series, active.dimensions, active.grouping);
    const PartitionPlan plan = partition_groups(groups, config.partitions);

    StoreCatalog catalog;
    catalog.series = active.series;
    catalog.dimensions = active.dimensions;
    for (const auto& d : default_registry().descriptors()) catalog.model_names[d.mid] = d.name;
    SegmentStore store = SegmentStore::create(config.store, std::move(catalog));

    std::map<Tid, const TimeSeriesMeta*> by_tid;
    for (const auto& m : active.series) by_tid[m.tid] = &m;

    const IngestConfig ingest_config = make_ingest_config(config);
    const int k = config.partitions;
    IngestReport report;
    report.series = active.series.size();
    report.groups = groups.size();
    report.average_group_size =
        groups.empty() ? 0.0
                       : static_cast<double>(active.series.size()) /
                             static_cast<double>(groups.size());
    report.plan = plan;

    std::vector<IngestStats> partition_stats(static_cast<std::size_t>(k));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));

    const auto worker = [&](int partition) {
        try {
            std::vector<Segment> batch;
            std::uint64_t local_seq = 0;
            const auto flush_batch = [&] {
                if (batch.empty()) return;
                store.insert_segments_numbered(
                    static_cast<std::uint64_t>(partition) +
                        static_cast<std::uint64_t>(k) * local_seq++,
                    batch);
                batch.clear();
            };
            for (std::size_t g = 0; g < groups.size(); ++g) {
                if (plan.assignment[g] != partition) continue;
                std::vector<const TimeSeriesMeta*> metas;
                for (const Tid tid : groups[g].tids) metas.push_back(by_tid.at(tid));
                GroupDriver driver(groups[g], metas, default_registry(), ingest_config);
                driver.run([&](std::vector<Segment>&& segs) {
                    for (auto& s : segs) {
                        batch.push_back(std::move(s));
                        if (batch.size() >= config.batch_size) flush_batch();
                    }
                });
                merge_stats(partition_stats[static_cast<std::size_t>(partition)],
                            driver.stats());
            }
            flush_batch();
        } catch (...) {
            errors[static_cast<std::size_t>(partition)] = std::current_exception();
        }
    };

    std::vector<std::thread> threads;
    for (int p = 0; p < k; ++p) threads.emplace_back(worker, p);
    for (auto& t : threads) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    for (const auto& s : partition_stats) merge_stats(report.stats, s);
    report.store_bytes = store.segment_file_bytes();
    report.raw_bytes = report.stats.points * 12;  // 64-bit timestamp + 32-bit value
    report.compression_ratio =
        report.store_bytes == 0 ? 0.0
                                : static_cast<double>(report.raw_bytes) /
                                      static_cast<double>(report.store_bytes);
    report.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.split_merge_share =
        report.elapsed_seconds <= 0.0
            ? 0.0
            : static_cast<double>(report.stats.split_merge_nanos) / 1e9 / report.elapsed_seconds;
    return report;
}

}  // namespace golemm
