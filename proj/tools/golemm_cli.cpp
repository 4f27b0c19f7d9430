#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "golemm/engine.hpp"
#include "golemm/model_types.hpp"
#include "golemm/query.hpp"
#include "golemm/store.hpp"

namespace {

using namespace golemm;

struct OutputFormat {
    char sep = '\t';
};

std::string fmt_value(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

MemberFilter parse_member_filter(const std::string& text) {
    const auto eq = text.find('=');
    const auto colon = text.find(':');
    if (eq == std::string::npos || colon == std::string::npos || colon > eq)
        throw CLI::ValidationError("--member expects Dimension:Level=Value");
    MemberFilter f;
    f.dimension = text.substr(0, colon);
    f.level = std::stoi(text.substr(colon + 1, eq - colon - 1));
    f.value = text.substr(eq + 1);
    return f;
}

std::pair<std::string, int> parse_member_level(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos)
        throw CLI::ValidationError("--by-member expects Dimension:Level");
    return {text.substr(0, colon), std::stoi(text.substr(colon + 1))};
}

RollupLevel parse_rollup(const std::string& text) {
    if (text == "hour") return RollupLevel::Hour;
    if (text == "day") return RollupLevel::Day;
    if (text == "month") return RollupLevel::Month;
    if (text == "year") return RollupLevel::Year;
    throw CLI::ValidationError("--cube expects hour, day, month or year");
}

AggregateFunction parse_function(const std::string& text) {
    if (text == "count") return AggregateFunction::Count;
    if (text == "min") return AggregateFunction::Min;
    if (text == "max") return AggregateFunction::Max;
    if (text == "sum") return AggregateFunction::Sum;
    if (text == "avg") return AggregateFunction::Avg;
    throw CLI::ValidationError("unknown aggregate '" + text + "'");
}

void print_ingest_report(const IngestReport& report) {
    std::printf("series: %zu\n", report.series);
    std::printf("groups: %zu (%.2f time series on average)\n", report.groups,
                report.average_group_size);
    std::printf("partitions: %zu (load spread %.3f points/min)\n", report.plan.loads.size(),
                report.plan.spread);
    std::printf("points: %" PRIu64 "\n", report.stats.points);
    std::printf("segments: %" PRIu64 "\n", report.stats.segments);
    for (const auto& [mid, n] : report.stats.segments_by_mid)
        std::printf("  mid %u: %" PRIu64 " segments\n", mid, n);
    std::printf("raw bytes: %" PRIu64 "\n", report.raw_bytes);
    std::printf("stored bytes: %" PRIu64 "\n", report.store_bytes);
    std::printf("compression ratio: %.2f\n", report.compression_ratio);
    std::printf("average error: %.4f%%\n", report.stats.average_error_percent());
    std::printf("splits: %" PRIu64 ", merge attempts: %" PRIu64 ", merges: %" PRIu64
                " (%.2f%% of run time)\n",
                report.stats.splits, report.stats.merge_attempts, report.stats.merges,
                report.split_merge_share * 100.0);
    std::printf("elapsed: %.2f s\n", report.elapsed_seconds);
}

int cmd_ingest(const EngineConfig& config, const std::vector<std::string>& sources) {
    std::vector<std::filesystem::path> paths(sources.begin(), sources.end());
    print_ingest_report(run_ingest(config, paths));
    return 0;
}

int cmd_plan(const EngineConfig& config, const std::vector<std::string>& sources) {
    std::vector<std::filesystem::path> paths(sources.begin(), sources.end());
    if (paths.empty())
        for (const auto& meta : load_dimensions_file(config.dimensions).series)
            paths.emplace_back(meta.source);
    const PlanReport report = run_plan(config, paths);
    for (std::size_t p = 0; p < report.plan.loads.size(); ++p) {
        std::string gids;
        for (std::size_t g = 0; g < report.groups.size(); ++g)
            if (report.plan.assignment[g] == static_cast<int>(p)) {
                if (!gids.empty()) gids += ',';
                gids += std::to_string(report.groups[g].gid);
            }
        std::printf("partition %zu: load %.3f points/min, gids [%s]\n", p,
                    report.plan.loads[p], gids.c_str());
    }
    std::printf("spread: %.3f points/min\n", report.plan.spread);
    return 0;
}

int cmd_query(const EngineConfig& config, const std::string& function,
              const QueryPredicate& predicate, const AggregateRequest& request,
              const OutputFormat& format) {
    SegmentStore store = SegmentStore::open(config.store);
    QueryEngine engine(store, default_registry());
    const char sep = format.sep;

    if (function == "scan") {
        std::printf("tid%cts%cvalue", sep, sep);
        for (const auto& dim : store.catalog().dimensions)
            for (const auto& level : dim.level_names)
                std::printf("%c%s:%s", sep, dim.name.c_str(), level.c_str());
        std::printf("\n");
        engine.data_point_scan(
            predicate, [&](Tid tid, Timestamp ts, float value, const TimeSeriesMeta& meta) {
                std::printf("%d%c%" PRId64 "%c%s", tid, sep, ts, sep,
                            fmt_value(value).c_str());
                for (const auto& chain : meta.members)
                    for (const auto& member : chain) std::printf("%c%s", sep, member.c_str());
                std::printf("\n");
            });
        return 0;
    }

    AggregateRequest req = request;
    req.function = parse_function(function);
    const auto rows =
        req.rollup_level ? engine.cube_aggregate(req, predicate)
                         : engine.simple_aggregate(req, predicate);
    std::string header;
    if (req.rollup_level) header += std::string("bucket") + sep;
    if (req.group_by_tid) header += std::string("tid") + sep;
    if (req.group_by_member) header += std::string("member") + sep;
    header += function;
    std::printf("%s\n", header.c_str());
    for (const auto& row : rows) {
        std::string out;
        if (req.rollup_level) out += std::to_string(*row.bucket) + sep;
        if (req.group_by_tid) out += std::to_string(*row.tid) + sep;
        if (req.group_by_member) out += *row.member + sep;
        out += req.function == AggregateFunction::Count
                   ? std::to_string(row.count)
                   : fmt_value(row.value);
        std::printf("%s\n", out.c_str());
    }
    return 0;
}

int cmd_stats(const EngineConfig& config, const std::vector<std::string>& verify_sources) {
    SegmentStore store = SegmentStore::open(config.store);
    const auto& catalog = store.catalog();
    std::printf("series: %zu\n", catalog.series.size());
    std::printf("groups: %zu\n", catalog.groups().size());
    std::printf("segments: %zu\n", store.segment_count());
    std::printf("segment file bytes: %" PRIu64 "\n", store.segment_file_bytes());
    std::map<std::uint8_t, std::size_t> by_mid;
    std::uint64_t points = 0;
    for (const auto& group : catalog.groups()) {
        for (const auto& seg : store.query_segments({group.gid})) {
            ++by_mid[seg.mid];
            points += static_cast<std::uint64_t>(seg.point_count()) *
                      static_cast<std::uint64_t>(live_member_count(seg, group.size()));
        }
    }
    std::printf("points: %" PRIu64 "\n", points);
    for (const auto& [mid, n] : by_mid) {
        const auto it = catalog.model_names.find(mid);
        std::printf("  %s (mid %u): %zu segments\n",
                    it == catalog.model_names.end() ? "?" : it->second.c_str(), mid, n);
    }
    if (!verify_sources.empty()) {
        QueryEngine engine(store, default_registry());
        std::map<Tid, std::vector<DataPoint>> originals;
        for (const auto& src : verify_sources) {
            const std::filesystem::path path(src);
            const TimeSeriesMeta* match = nullptr;
            for (const auto& m : catalog.series)
                if (m.source == path.string() || m.source == path.filename().string())
                    match = &m;
            if (!match) throw std::runtime_error("no catalog row for " + src);
            originals[match->tid] = load_series_csv(path, match->si);
        }
        QueryPredicate predicate;
        predicate.full_scan = true;
        std::printf("average error: %.6f%%\n", engine.average_error(originals, predicate));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Model-based time series storage engine"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "Engine config file")->required();

    auto* ingest = app.add_subcommand("ingest", "Compress CSV series into a store");
    std::vector<std::string> sources;
    ingest->add_option("sources", sources, "Series CSV files")->required()->expected(-1);

    auto* plan = app.add_subcommand("plan", "Print the group partition plan");
    std::vector<std::string> plan_sources;
    plan->add_option("sources", plan_sources, "Series CSV files (default: all catalog rows)");

    auto* query = app.add_subcommand("query", "Run a query against a store");
    std::string function;
    query->add_option("function", function, "scan, count, min, max, sum or avg")->required();
    std::vector<Tid> tids;
    query->add_option("--tid", tids, "Restrict to these tids");
    std::vector<std::string> member_filters;
    query->add_option("--member", member_filters, "Filter Dimension:Level=Value");
    std::optional<Timestamp> from, to;
    query->add_option("--from", from, "Range start (ms, inclusive)");
    query->add_option("--to", to, "Range end (ms, inclusive)");
    bool by_tid = false;
    query->add_flag("--by-tid", by_tid, "Group results by tid");
    std::string by_member;
    query->add_option("--by-member", by_member, "Group results by Dimension:Level");
    std::string cube;
    query->add_option("--cube", cube, "Roll up in time: hour, day, month or year");
    bool full_scan = false;
    query->add_flag("--full-scan", full_scan, "Allow an empty predicate");
    std::string format = "tsv";
    query->add_option("--format", format, "tsv or csv")->check(CLI::IsMember({"tsv", "csv"}));

    auto* stats = app.add_subcommand("stats", "Print store statistics");
    std::vector<std::string> verify;
    stats->add_option("--verify", verify, "Recompute the average error against these originals");

    CLI11_PARSE(app, argc, argv);

    try {
        const EngineConfig config = golemm::load_engine_config(config_path);
        if (ingest->parsed()) return cmd_ingest(config, sources);
        if (plan->parsed()) return cmd_plan(config, plan_sources);
        if (stats->parsed()) return cmd_stats(config, verify);
        if (query->parsed()) {
            QueryPredicate predicate;
            if (!tids.empty()) predicate.tids = std::set<Tid>(tids.begin(), tids.end());
            for (const auto& m : member_filters)
                predicate.members.push_back(parse_member_filter(m));
            if (from || to)
                predicate.time_range =
                    TimeRange{from.value_or(0), to.value_or(std::numeric_limits<Timestamp>::max())};
            predicate.full_scan = full_scan;
            AggregateRequest request;
            request.group_by_tid = by_tid;
            if (!by_member.empty()) request.group_by_member = parse_member_level(by_member);
            if (!cube.empty()) request.rollup_level = parse_rollup(cube);
            OutputFormat of;
            of.sep = format == "csv" ? ',' : '\t';
            return cmd_query(config, function, predicate, request, of);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
