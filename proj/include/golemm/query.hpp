#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "golemm/core.hpp"
#include "golemm/model_types.hpp"
#include "golemm/store.hpp"

namespace golemm {

struct MemberFilter {
    std::string dimension;
    int level = 1;
    std::string value;
};

struct QueryPredicate {
    std::optional<std::set<Tid>> tids;
    std::vector<MemberFilter> members;  // ANDed
    std::optional<TimeRange> time_range;
    bool full_scan = false;
};

enum class AggregateFunction { Count, Min, Max, Sum, Avg };

enum class RollupLevel { Hour, Day, Month, Year };

struct AggregateRequest {
    AggregateFunction function = AggregateFunction::Count;
    bool group_by_tid = false;
    std::optional<RollupLevel> rollup_level;
    std::optional<std::pair<std::string, int>> group_by_member;  // (dimension, level)
};

/// One result row. Unset key parts were not grouped on.
struct AggregateRow {
    std::optional<Timestamp> bucket;  // rollup bucket start
    std::optional<Tid> tid;
    std::optional<std::string> member;
    double value = 0.0;
    std::int64_t count = 0;
};

/// Tids and members rewritten to gids with per-group member position
/// masks; queries and results themselves only speak tids.
struct RewriteResult {
    std::map<Gid, std::uint64_t> masks;
};

/// Start of the bucket containing ts (UTC, civil calendar for
/// month/year) and the smallest bucket boundary strictly greater.
Timestamp floor_to_level(Timestamp ts, RollupLevel level);
Timestamp next_level_boundary(Timestamp ts, RollupLevel level);

/// Read-only query execution over a segment store. Aggregates use the
/// models' closed forms where available and decode otherwise.
class QueryEngine {
public:
    QueryEngine(const SegmentStore& store, const ModelTypeRegistry& registry);

    RewriteResult rewrite(const QueryPredicate& predicate) const;

    using RowSink =
        std::function<void(Tid, Timestamp, float, const TimeSeriesMeta&)>;
    void data_point_scan(const QueryPredicate& predicate, const RowSink& sink) const;

    std::vector<AggregateRow> simple_aggregate(const AggregateRequest& request,
                                               const QueryPredicate& predicate) const;

    /// Aggregate rolled up in the time dimension: segments are cut at
    /// bucket boundaries, the final sub-interval keeps the segment end.
    std::vector<AggregateRow> cube_aggregate(const AggregateRequest& request,
                                             const QueryPredicate& predicate) const;

    /// Actual average error percent of the stored approximation against
    /// the original points, sum|rv - av| / sum|rv| * 100.
    double average_error(const std::map<Tid, std::vector<DataPoint>>& originals,
                         const QueryPredicate& predicate) const;

private:
    struct GroupInfo {
        TimeSeriesGroup group;
        std::vector<const TimeSeriesMeta*> metas;  // position order
    };

    struct Accumulator {
        std::int64_t count = 0;
        double sum = 0.0;
        double min = 0.0;
        double max = 0.0;
        bool any = false;

        void fold_value(double v);
        void fold_block(std::int64_t k, double s, double lo, double hi);
    };

    using KeyedAccumulators =
        std::map<std::tuple<std::optional<Timestamp>, std::optional<Tid>,
                            std::optional<std::string>>,
                 Accumulator>;

    void accumulate_segment(const Segment& segment, const GroupInfo& info,
                            std::uint64_t request_mask, Timestamp from, Timestamp to,
                            const std::optional<Timestamp>& bucket,
                            const AggregateRequest& request, KeyedAccumulators& acc) const;

    std::vector<AggregateRow> finalize_rows(const AggregateRequest& request,
                                            KeyedAccumulators& acc) const;

    std::optional<std::string> member_key(const TimeSeriesMeta& meta,
                                          const AggregateRequest& request) const;

    const SegmentStore& store_;
    const ModelTypeRegistry& registry_;
    std::map<Tid, const TimeSeriesMeta*> by_tid_;
    std::map<Gid, GroupInfo> by_gid_;
    std::map<Tid, std::pair<Gid, int>> tid_position_;
};

}  // namespace golemm
