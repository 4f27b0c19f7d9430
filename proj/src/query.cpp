#include "golemm/query.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace golemm {

namespace {

constexpr Timestamp kMsPerHour = 3'600'000;
constexpr Timestamp kMsPerDay = 86'400'000;

// Civil calendar conversions (proleptic Gregorian, UTC).
std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yr = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = static_cast<int>(yr + (m <= 2));
}

Timestamp floor_div(Timestamp ts, Timestamp unit) {
    Timestamp q = ts / unit;
    if (ts % unit != 0 && ts < 0) --q;
    return q;
}

}  // namespace

Timestamp floor_to_level(Timestamp ts, RollupLevel level) {
    switch (level) {
        case RollupLevel::Hour:
            return floor_div(ts, kMsPerHour) * kMsPerHour;
        case RollupLevel::Day:
            return floor_div(ts, kMsPerDay) * kMsPerDay;
        case RollupLevel::Month: {
            int y;
            unsigned m, d;
            civil_from_days(floor_div(ts, kMsPerDay), y, m, d);
            return days_from_civil(y, m, 1) * kMsPerDay;
        }
        case RollupLevel::Year: {
            int y;
            unsigned m, d;
            civil_from_days(floor_div(ts, kMsPerDay), y, m, d);
            return days_from_civil(y, 1, 1) * kMsPerDay;
        }
    }
    throw std::invalid_argument("unknown rollup level");
}

Timestamp next_level_boundary(Timestamp ts, RollupLevel level) {
    switch (level) {
        case RollupLevel::Hour:
            return floor_to_level(ts, level) + kMsPerHour;
        case RollupLevel::Day:
            return floor_to_level(ts, level) + kMsPerDay;
        case RollupLevel::Month: {
            int y;
            unsigned m, d;
            civil_from_days(floor_div(ts, kMsPerDay), y, m, d);
            if (++m > 12) {
                m = 1;
                ++y;
            }
            return days_from_civil(y, m, 1) * kMsPerDay;
        }
        case RollupLevel::Year: {
            int y;
            unsigned m, d;
            civil_from_days(floor_div(ts, kMsPerDay), y, m, d);
            return days_from_civil(y + 1, 1, 1) * kMsPerDay;
        }
    }
    throw std::invalid_argument("unknown rollup level");
}

void QueryEngine::Accumulator::fold_value(double v) {
    ++count;
    sum += v;
    min = any ? std::min(min, v) : v;
    max = any ? std::max(max, v) : v;
    any = true;
}

void QueryEngine::Accumulator::fold_block(std::int64_t k, double s, double lo, double hi) {
    if (k <= 0) return;
    count += k;
    sum += s;
    min = any ? std::min(min, lo) : lo;
    max = any ? std::max(max, hi) : hi;
    any = true;
}

QueryEngine::QueryEngine(const SegmentStore& store, const ModelTypeRegistry& registry)
    : store_(store), registry_(registry) {
    for (const auto& meta : store_.catalog().series) by_tid_[meta.tid] = &meta;
    for (auto& group : store_.catalog().groups()) {
        GroupInfo info;
        info.group = group;
        for (std::size_t p = 0; p < group.tids.size(); ++p) {
            info.metas.push_back(by_tid_.at(group.tids[p]));
            tid_position_[group.tids[p]] = {group.gid, static_cast<int>(p)};
        }
        by_gid_.emplace(group.gid, std::move(info));
    }
}

RewriteResult QueryEngine::rewrite(const QueryPredicate& predicate) const {
    if (!predicate.full_scan && !predicate.tids && predicate.members.empty() &&
        !predicate.time_range)
        throw std::invalid_argument("empty predicate requires the full-scan flag");

    const auto& dims = store_.catalog().dimensions;
    std::vector<std::pair<std::size_t, const MemberFilter*>> member_filters;
    for (const auto& f : predicate.members) {
        std::size_t d = dims.size();
        for (std::size_t i = 0; i < dims.size(); ++i)
            if (dims[i].name == f.dimension) d = i;
        if (d == dims.size())
            throw std::invalid_argument("unknown dimension '" + f.dimension + "'");
        if (f.level < 1 || f.level > dims[d].level_count())
            throw std::invalid_argument("dimension " + f.dimension + " has no level " +
                                        std::to_string(f.level));
        bool value_exists = false;
        for (const auto& meta : store_.catalog().series)
            if (meta.members[d][static_cast<std::size_t>(f.level - 1)] == f.value)
                value_exists = true;
        if (!value_exists)
            throw std::invalid_argument("no series has member '" + f.value + "' at " +
                                        f.dimension + " level " + std::to_string(f.level));
        member_filters.emplace_back(d, &f);
    }
    if (predicate.tids)
        for (const Tid tid : *predicate.tids)
            if (!by_tid_.count(tid))
                throw std::invalid_argument("unknown tid " + std::to_string(tid));

    RewriteResult result;
    for (const auto& [tid, meta] : by_tid_) {
        if (predicate.tids && !predicate.tids->count(tid)) continue;
        bool match = true;
        for (const auto& [d, f] : member_filters)
            if (meta->members[d][static_cast<std::size_t>(f->level - 1)] != f->value)
                match = false;
        if (!match) continue;
        const auto [gid, position] = tid_position_.at(tid);
        result.masks[gid] |= std::uint64_t{1} << position;
    }
    return result;
}

void QueryEngine::data_point_scan(const QueryPredicate& predicate, const RowSink& sink) const {
    const RewriteResult rewritten = rewrite(predicate);
    if (rewritten.masks.empty()) return;
    std::set<Gid> gids;
    for (const auto& [gid, mask] : rewritten.masks) gids.insert(gid);

    for (const auto& segment : store_.query_segments(gids, predicate.time_range)) {
        const GroupInfo& info = by_gid_.at(segment.gid);
        const std::uint64_t wanted =
            rewritten.masks.at(segment.gid) & ~segment.gaps & position_mask(info.group.size());
        if (wanted == 0) continue;

        Timestamp from = segment.start_time;
        Timestamp to = segment.end_time;
        if (predicate.time_range) {
            from = std::max(from, predicate.time_range->from);
            to = std::min(to, predicate.time_range->to);
        }
        const Timestamp offset = (from - segment.start_time) % segment.si;
        if (offset != 0) from += segment.si - offset;
        if (from > to) continue;

        const int live = live_member_count(segment, info.group.size());
        std::vector<int> positions;
        std::vector<int> ranks;
        for (int p = 0; p < info.group.size(); ++p)
            if (wanted & (std::uint64_t{1} << p)) {
                positions.push_back(p);
                ranks.push_back(live_member_rank(segment, p));
            }

        const bool lossy = registry_.by_mid(segment.mid).descriptor().lossy;
        std::vector<float> decoded;
        if (!lossy) decoded = registry_.decode(segment, info.group.size());

        for (Timestamp t = from; t <= to; t += segment.si) {
            const std::size_t t_index =
                static_cast<std::size_t>((t - segment.start_time) / segment.si);
            for (std::size_t i = 0; i < positions.size(); ++i) {
                const TimeSeriesMeta& meta = *info.metas[static_cast<std::size_t>(positions[i])];
                double model_value;
                if (lossy)
                    model_value = registry_.by_mid(segment.mid)
                                      .evaluate(segment, t, ranks[i], live);
                else
                    model_value = decoded[t_index * static_cast<std::size_t>(live) +
                                          static_cast<std::size_t>(ranks[i])];
                sink(meta.tid, t, static_cast<float>(model_value * meta.scaling), meta);
            }
        }
    }
}

std::optional<std::string> QueryEngine::member_key(const TimeSeriesMeta& meta,
                                                   const AggregateRequest& request) const {
    if (!request.group_by_member) return std::nullopt;
    const auto& dims = store_.catalog().dimensions;
    for (std::size_t d = 0; d < dims.size(); ++d)
        if (dims[d].name == request.group_by_member->first) {
            const int level = request.group_by_member->second;
            if (level < 1 || level > dims[d].level_count())
                throw std::invalid_argument("dimension " + dims[d].name + " has no level " +
                                            std::to_string(level));
            return meta.members[d][static_cast<std::size_t>(level - 1)];
        }
    throw std::invalid_argument("unknown dimension '" + request.group_by_member->first + "'");
}

void QueryEngine::accumulate_segment(const Segment& segment, const GroupInfo& info,
                                     std::uint64_t request_mask, Timestamp from, Timestamp to,
                                     const std::optional<Timestamp>& bucket,
                                     const AggregateRequest& request,
                                     KeyedAccumulators& acc) const {
    const std::uint64_t wanted = request_mask & ~segment.gaps & position_mask(info.group.size());
    if (wanted == 0 || from > to) return;

    std::vector<int> positions;
    for (int p = 0; p < info.group.size(); ++p)
        if (wanted & (std::uint64_t{1} << p)) positions.push_back(p);

    const auto key_for = [&](const TimeSeriesMeta& meta) {
        return std::make_tuple(bucket,
                               request.group_by_tid ? std::optional<Tid>(meta.tid) : std::nullopt,
                               member_key(meta, request));
    };

    const auto closed = registry_.aggregates(segment, info.group.size(), from, to);
    if (closed) {
        if (closed->count <= 0) return;
        for (const int p : positions) {
            const TimeSeriesMeta& meta = *info.metas[static_cast<std::size_t>(p)];
            const double c = meta.scaling;
            double lo = static_cast<float>(closed->min * c);
            double hi = static_cast<float>(closed->max * c);
            if (c < 0) std::swap(lo, hi);
            acc[key_for(meta)].fold_block(closed->count, closed->sum * c, lo, hi);
        }
        return;
    }

    const int live = live_member_count(segment, info.group.size());
    const auto decoded = registry_.decode(segment, info.group.size());
    const Timestamp offset = (from - segment.start_time) % segment.si;
    Timestamp first = from;
    if (offset != 0) first += segment.si - offset;
    for (const int p : positions) {
        const TimeSeriesMeta& meta = *info.metas[static_cast<std::size_t>(p)];
        const int rank = live_member_rank(segment, p);
        auto& a = acc[key_for(meta)];
        for (Timestamp t = first; t <= to; t += segment.si) {
            const std::size_t t_index =
                static_cast<std::size_t>((t - segment.start_time) / segment.si);
            const float v = static_cast<float>(
                static_cast<double>(decoded[t_index * static_cast<std::size_t>(live) +
                                            static_cast<std::size_t>(rank)]) *
                meta.scaling);
            a.fold_value(v);
        }
    }
}

std::vector<AggregateRow> QueryEngine::finalize_rows(const AggregateRequest& request,
                                                     KeyedAccumulators& acc) const {
    std::vector<AggregateRow> rows;
    for (auto& [key, a] : acc) {
        if (a.count == 0) continue;
        AggregateRow row;
        row.bucket = std::get<0>(key);
        row.tid = std::get<1>(key);
        row.member = std::get<2>(key);
        row.count = a.count;
        switch (request.function) {
            case AggregateFunction::Count:
                row.value = static_cast<double>(a.count);
                break;
            case AggregateFunction::Min:
                row.value = a.min;
                break;
            case AggregateFunction::Max:
                row.value = a.max;
                break;
            case AggregateFunction::Sum:
                row.value = a.sum;
                break;
            case AggregateFunction::Avg:
                row.value = a.sum / static_cast<double>(a.count);
                break;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<AggregateRow> QueryEngine::simple_aggregate(const AggregateRequest& request,
                                                        const QueryPredicate& predicate) const {
    if (request.rollup_level)
        throw std::invalid_argument("simple aggregate cannot take a rollup level");
    const RewriteResult rewritten = rewrite(predicate);
    if (rewritten.masks.empty()) return {};
    std::set<Gid> gids;
    for (const auto& [gid, mask] : rewritten.masks) gids.insert(gid);

    KeyedAccumulators acc;
    for (const auto& segment : store_.query_segments(gids, predicate.time_range)) {
        Timestamp from = segment.start_time;
        Timestamp to = segment.end_time;
        if (predicate.time_range) {
            from = std::max(from, predicate.time_range->from);
            to = std::min(to, predicate.time_range->to);
        }
        accumulate_segment(segment, by_gid_.at(segment.gid), rewritten.masks.at(segment.gid),
                           from, to, std::nullopt, request, acc);
    }
    return finalize_rows(request, acc);
}

std::vector<AggregateRow> QueryEngine::cube_aggregate(const AggregateRequest& request,
                                                      const QueryPredicate& predicate) const {
    if (!request.rollup_level)
        throw std::invalid_argument("cube aggregate requires a rollup level");
    const RollupLevel level = *request.rollup_level;
    const RewriteResult rewritten = rewrite(predicate);
    if (rewritten.masks.empty()) return {};
    std::set<Gid> gids;
    for (const auto& [gid, mask] : rewritten.masks) gids.insert(gid);

    KeyedAccumulators acc;
    for (const auto& segment : store_.query_segments(gids, predicate.time_range)) {
        const GroupInfo& info = by_gid_.at(segment.gid);
        const std::uint64_t mask = rewritten.masks.at(segment.gid);
        Timestamp clip_from = segment.start_time;
        Timestamp clip_to = segment.end_time;
        if (predicate.time_range) {
            clip_from = std::max(clip_from, predicate.time_range->from);
            clip_to = std::min(clip_to, predicate.time_range->to);
        }
        if (clip_from > clip_to) continue;

        // Walk bucket boundaries: half-open sub-intervals, the last one
        // inclusive of the segment end because segments are disconnected.
        Timestamp sub_start = clip_from;
        Timestamp boundary = next_level_boundary(sub_start, level);
        while (boundary < clip_to) {
            accumulate_segment(segment, info, mask, sub_start, boundary - 1,
                               floor_to_level(sub_start, level), request, acc);
            sub_start = boundary;
            boundary = next_level_boundary(sub_start, level);
        }
        accumulate_segment(segment, info, mask, sub_start, clip_to,
                           floor_to_level(sub_start, level), request, acc);
    }
    return finalize_rows(request, acc);
}

double QueryEngine::average_error(const std::map<Tid, std::vector<DataPoint>>& originals,
                                  const QueryPredicate& predicate) const {
    double err = 0.0;
    double mag = 0.0;
    for (const auto& [tid, points] : originals) {
        if (!by_tid_.count(tid)) throw std::invalid_argument("unknown tid " + std::to_string(tid));
        QueryPredicate p = predicate;
        p.tids = std::set<Tid>{tid};
        p.full_scan = false;
        std::size_t cursor = 0;
        data_point_scan(p, [&](Tid, Timestamp ts, float value, const TimeSeriesMeta&) {
            while (cursor < points.size() && points[cursor].timestamp < ts) ++cursor;
            if (cursor >= points.size() || points[cursor].timestamp != ts)
                throw std::runtime_error("no original value for tid " + std::to_string(tid) +
                                         " at " + std::to_string(ts));
            err += std::fabs(static_cast<double>(points[cursor].value) -
                             static_cast<double>(value));
            mag += std::fabs(static_cast<double>(points[cursor].value));
            ++cursor;
        });
    }
    return mag == 0.0 ? 0.0 : err / mag * 100.0;
}

}  // namespace golemm
