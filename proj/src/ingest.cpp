#include "golemm/ingest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace golemm {

namespace {

class SplitMergeTimer {
public:
    explicit SplitMergeTimer(std::uint64_t& sink)
        : sink_(sink), start_(std::chrono::steady_clock::now()) {}
    ~SplitMergeTimer() {
        sink_ += static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(
                std::chrono::steady_clock::now() - start_)
                .count());
    }

private:
    std::uint64_t& sink_;
    std::chrono::steady_clock::time_point start_;
};

}  // namespace

SegmentGenerator::SegmentGenerator(Gid gid, int group_size, Timestamp si,
                                   std::vector<int> positions, std::vector<double> scalings,
                                   const ModelTypeRegistry& registry, const IngestConfig& config,
                                   IngestStats& stats)
    : gid_(gid),
      group_size_(group_size),
      si_(si),
      positions_(std::move(positions)),
      registry_(registry),
      config_(config),
      stats_(stats) {
    if (positions_.empty()) throw std::invalid_argument("generator needs at least one member");
    if (scalings.size() != positions_.size())
        throw std::invalid_argument("one scaling constant per member required");
    if (!std::is_sorted(positions_.begin(), positions_.end()))
        throw std::invalid_argument("member positions must be ascending");
    cols_.resize(positions_.size());
    for (std::size_t i = 0; i < positions_.size(); ++i) {
        cols_[i].position = positions_[i];
        cols_[i].scaling = scalings[i];
    }
}

int SegmentGenerator::live_column_count() const {
    int n = 0;
    for (const auto& c : cols_) n += c.live ? 1 : 0;
    return n;
}

std::uint64_t SegmentGenerator::recompute_live_mask() const {
    std::uint64_t mask = 0;
    for (const auto& c : cols_)
        if (c.live) mask |= std::uint64_t{1} << c.position;
    return mask;
}

std::span<const float> SegmentGenerator::buffered(int position) const {
    for (const auto& c : cols_)
        if (c.position == position) return c.scaled;
    throw std::invalid_argument("position not owned by this generator");
}

std::uint32_t SegmentGenerator::replay(ModelFitState& state) const {
    std::vector<float> scratch;
    scratch.reserve(cols_.size());
    std::uint32_t covered = 0;
    for (std::size_t k = 0; k < times_.size(); ++k) {
        scratch.clear();
        for (const auto& c : cols_)
            if (c.live) scratch.push_back(c.scaled[k]);
        if (!state.append(scratch, config_.error)) break;
        ++covered;
    }
    return covered;
}

void SegmentGenerator::make_active() {
    const std::uint8_t mid = config_.model_type_order[cursor_];
    active_ = registry_.by_mid(mid).make_state(times_.front(), si_, live_column_count(),
                                               config_.length_bound);
    replay(*active_);
    if (registry_.by_mid(mid).descriptor().lossy)
        stats_.max_lossy_run = std::max(stats_.max_lossy_run, active_->points_covered());
}

void SegmentGenerator::ensure_cover(std::vector<Segment>& out) {
    while (!times_.empty()) {
        if (active_ && active_->points_covered() == times_.size()) return;
        if (active_) {
            if (active_->points_covered() >= 1)
                candidates_.push_back({config_.model_type_order[cursor_],
                                       static_cast<int>(cursor_), active_->points_covered(),
                                       active_->finalize()});
            ++cursor_;
        }
        if (cursor_ < config_.model_type_order.size()) {
            make_active();
        } else {
            out.push_back(emit_one());
            if (!times_.empty()) make_active();
        }
    }
    active_.reset();
    cursor_ = 0;
}

Segment SegmentGenerator::emit_one() {
    Candidate chosen;
    bool have = false;
    double best_ratio = -1.0;
    const int live = live_column_count();
    for (auto& c : candidates_) {
        if (c.points < 1) continue;
        const double ratio = static_cast<double>(c.points) * live * 4.0 /
                             static_cast<double>(c.payload.size());
        if (ratio > best_ratio || (ratio == best_ratio && have && c.list_pos < chosen.list_pos)) {
            chosen = std::move(c);
            best_ratio = ratio;
            have = true;
        }
    }
    if (!have) {
        // Nothing representable by the configured types: store raw values.
        auto state = registry_.by_mid(kMidFallback)
                         .make_state(times_.front(), si_, live, config_.length_bound);
        const std::uint32_t covered = replay(*state);
        chosen = Candidate{kMidFallback, std::numeric_limits<int>::max(), covered,
                           state->finalize()};
        best_ratio = static_cast<double>(covered) * live * 4.0 /
                     static_cast<double>(chosen.payload.size());
    }

    Segment seg;
    seg.gid = gid_;
    seg.start_time = times_.front();
    seg.end_time = times_[chosen.points - 1];
    seg.si = si_;
    seg.gaps = position_mask(group_size_) & ~live_mask_;
    seg.mid = chosen.mid;
    seg.payload = std::move(chosen.payload);

    if (config_.track_error) accumulate_error(seg);

    ++emitted_;
    ratio_sum_ += best_ratio;
    last_ratio_ = best_ratio;
    ++stats_.segments;
    ++stats_.segments_by_mid[seg.mid];
    stats_.payload_bytes += seg.payload.size();
    if (registry_.by_mid(seg.mid).descriptor().lossy)
        stats_.max_lossy_run = std::max(stats_.max_lossy_run, chosen.points);

    drain(chosen.points);
    candidates_.clear();
    active_.reset();
    cursor_ = 0;
    return seg;
}

void SegmentGenerator::accumulate_error(const Segment& segment) const {
    const int live = live_member_count(segment, group_size_);
    const auto decoded = registry_.by_mid(segment.mid).decode(segment, live);
    const std::size_t points = static_cast<std::size_t>(segment.point_count());
    std::size_t flat = 0;
    for (std::size_t k = 0; k < points; ++k) {
        for (const auto& c : cols_) {
            if (!c.live) continue;
            const double approx =
                static_cast<float>(static_cast<double>(decoded[flat]) * c.scaling);
            const double real = c.raw[k];
            stats_.abs_error_sum += std::fabs(real - approx);
            stats_.abs_value_sum += std::fabs(real);
            ++flat;
        }
    }
}

void SegmentGenerator::drain(std::uint32_t points) {
    times_.erase(times_.begin(), times_.begin() + points);
    for (auto& c : cols_) {
        if (!c.live) continue;
        c.scaled.erase(c.scaled.begin(), c.scaled.begin() + points);
        c.raw.erase(c.raw.begin(), c.raw.begin() + points);
    }
}

void SegmentGenerator::tick(Timestamp ts, std::span<const std::optional<float>> values,
                            std::vector<Segment>& out) {
    if (values.size() != cols_.size())
        throw std::invalid_argument("expected " + std::to_string(cols_.size()) +
                                    " member values, got " + std::to_string(values.size()));
    if (next_ts_ && ts != *next_ts_)
        throw std::invalid_argument("timestamp " + std::to_string(ts) +
                                    " does not follow previous tick at interval " +
                                    std::to_string(si_));
    next_ts_ = ts + si_;

    bool transition = false;
    for (std::size_t i = 0; i < cols_.size(); ++i)
        if (values[i].has_value() != cols_[i].live) transition = true;
    if (transition) {
        // A member joining or leaving cuts the segment; the new fitting
        // context records the absentees in the gap bitmask.
        flush(out);
        for (std::size_t i = 0; i < cols_.size(); ++i) cols_[i].live = values[i].has_value();
        live_mask_ = recompute_live_mask();
    }
    if (live_mask_ == 0) return;

    times_.push_back(ts);
    std::vector<float> scratch;
    scratch.reserve(cols_.size());
    for (std::size_t i = 0; i < cols_.size(); ++i) {
        auto& c = cols_[i];
        if (!c.live) continue;
        const float raw = *values[i];
        const float scaled =
            c.scaling == 1.0 ? raw : static_cast<float>(raw / c.scaling);
        c.raw.push_back(raw);
        c.scaled.push_back(scaled);
        scratch.push_back(scaled);
    }
    stats_.points += static_cast<std::uint64_t>(scratch.size());
    stats_.buffer_high_water = std::max(stats_.buffer_high_water, times_.size());

    if (!active_) {
        cursor_ = 0;
        make_active();
    } else if (active_->append(scratch, config_.error)) {
        const std::uint8_t mid = config_.model_type_order[cursor_];
        if (registry_.by_mid(mid).descriptor().lossy)
            stats_.max_lossy_run = std::max(stats_.max_lossy_run, active_->points_covered());
        return;
    }
    ensure_cover(out);
}

void SegmentGenerator::flush(std::vector<Segment>& out) {
    while (!times_.empty()) {
        if (!active_) {
            cursor_ = 0;
            make_active();
            ensure_cover(out);
            continue;
        }
        if (active_->points_covered() == times_.size() && active_->points_covered() >= 1)
            candidates_.push_back({config_.model_type_order[cursor_],
                                   static_cast<int>(cursor_), active_->points_covered(),
                                   active_->finalize()});
        out.push_back(emit_one());
        if (!times_.empty()) {
            make_active();
            ensure_cover(out);
        }
    }
    active_.reset();
    cursor_ = 0;
    candidates_.clear();
}

// ---------------------------------------------------------------------------

GroupCompressor::GroupCompressor(const TimeSeriesGroup& group, std::vector<double> scalings,
                                 const ModelTypeRegistry& registry, IngestConfig config)
    : group_(group), scalings_(std::move(scalings)), registry_(registry),
      config_(std::move(config)) {
    if (group_.tids.empty()) throw std::invalid_argument("empty group");
    if (group_.tids.size() > kMaxGroupSize) throw std::invalid_argument("group exceeds 64 members");
    if (scalings_.size() != group_.tids.size())
        throw std::invalid_argument("one scaling constant per group member required");
    if (config_.model_type_order.empty())
        throw std::invalid_argument("at least one model type required");
    if (config_.length_bound < 1) throw std::invalid_argument("length bound must be positive");
    for (const std::uint8_t mid : config_.model_type_order) {
        if (mid == kMidFallback)
            throw std::invalid_argument("the fallback type is implicit and cannot be listed");
        registry_.by_mid(mid);
    }
    std::vector<int> all(group_.tids.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    generators_.push_back(make_generator(all));
    merge_baseline_.assign(1, 0);
}

std::unique_ptr<SegmentGenerator> GroupCompressor::make_generator(
    const std::vector<int>& positions) {
    std::vector<double> sub;
    sub.reserve(positions.size());
    for (const int p : positions) sub.push_back(scalings_[static_cast<std::size_t>(p)]);
    return std::make_unique<SegmentGenerator>(group_.gid, group_.size(), group_.si, positions,
                                              std::move(sub), registry_, config_, stats_);
}

std::vector<Segment> GroupCompressor::tick(Timestamp ts,
                                           std::span<const std::optional<float>> values) {
    if (values.size() != group_.tids.size())
        throw std::invalid_argument("expected one value slot per group member");
    std::vector<Segment> out;

    std::vector<std::uint64_t> before(generators_.size());
    for (std::size_t i = 0; i < generators_.size(); ++i)
        before[i] = generators_[i]->emitted_segments();

    if (generators_.size() == 1) {
        generators_[0]->tick(ts, values, out);
    } else {
        std::vector<std::optional<float>> sub;
        for (auto& gen : generators_) {
            sub.clear();
            for (const int p : gen->positions()) sub.push_back(values[static_cast<std::size_t>(p)]);
            gen->tick(ts, sub, out);
        }
    }

    if (config_.dynamic_grouping) {
        for (std::size_t i = 0; i < generators_.size(); ++i) {
            auto& gen = *generators_[i];
            const bool emitted = i < before.size() ? gen.emitted_segments() > before[i]
                                                   : gen.emitted_segments() > 0;
            if (!emitted || gen.buffer_empty()) continue;
            if (gen.last_ratio() < gen.average_ratio() / config_.split_fraction) {
                const std::size_t count_before = generators_.size();
                maybe_split_index(i, out);
                if (generators_.size() != count_before) break;  // indexes shifted
            }
        }
        if (generators_.size() > 1) maybe_merge(values, out);
    }
    return out;
}

bool GroupCompressor::pair_within_double_bound(std::span<const float> seed,
                                               std::span<const float> other) const {
    const std::size_t n = std::min(seed.size(), other.size());
    const auto s_tail = seed.subspan(seed.size() - n);
    const auto o_tail = other.subspan(other.size() - n);
    for (std::size_t k = 0; k < n; ++k) {
        const double b = config_.error.bound(s_tail[k]);
        if (std::fabs(static_cast<double>(s_tail[k]) - static_cast<double>(o_tail[k])) > 2.0 * b)
            return false;
    }
    return true;
}

void GroupCompressor::maybe_split_index(std::size_t index, std::vector<Segment>& out) {
    SplitMergeTimer timer(stats_.split_merge_nanos);
    auto& parent = *generators_[index];

    std::vector<std::size_t> with_data;
    std::vector<std::size_t> in_gap;
    for (std::size_t c = 0; c < parent.cols_.size(); ++c)
        (parent.cols_[c].live ? with_data : in_gap).push_back(c);

    std::vector<std::vector<std::size_t>> parts;
    std::vector<std::size_t> remaining = with_data;
    while (!remaining.empty()) {
        const std::size_t seed = remaining.front();
        std::vector<std::size_t> part{seed};
        std::vector<std::size_t> rest;
        for (std::size_t i = 1; i < remaining.size(); ++i) {
            const std::size_t other = remaining[i];
            if (pair_within_double_bound(parent.cols_[seed].scaled, parent.cols_[other].scaled))
                part.push_back(other);
            else
                rest.push_back(other);
        }
        parts.push_back(std::move(part));
        remaining = std::move(rest);
    }
    if (parts.size() <= 1) return;
    // Members currently in a gap follow the first part.
    parts[0].insert(parts[0].end(), in_gap.begin(), in_gap.end());

    const bool was_single = generators_.size() == 1;
    std::vector<std::unique_ptr<SegmentGenerator>> children;
    for (auto& part : parts) {
        std::sort(part.begin(), part.end());
        std::vector<int> positions;
        for (const std::size_t c : part) positions.push_back(parent.cols_[c].position);
        auto child = make_generator(positions);
        child->times_ = parent.times_;
        for (std::size_t i = 0; i < part.size(); ++i) {
            auto& src = parent.cols_[part[i]];
            auto& dst = child->cols_[i];
            dst.live = src.live;
            dst.scaled = std::move(src.scaled);
            dst.raw = std::move(src.raw);
        }
        child->live_mask_ = child->recompute_live_mask();
        child->next_ts_ = parent.next_ts_;
        child->ensure_cover(out);
        children.push_back(std::move(child));
    }

    ++stats_.splits;
    generators_.erase(generators_.begin() + static_cast<std::ptrdiff_t>(index));
    for (std::size_t i = 0; i < children.size(); ++i)
        generators_.insert(generators_.begin() + static_cast<std::ptrdiff_t>(index + i),
                           std::move(children[i]));
    if (was_single) merge_threshold_ = 1;
    merge_baseline_.assign(generators_.size(), 0);
    for (std::size_t i = 0; i < generators_.size(); ++i)
        merge_baseline_[i] = generators_[i]->emitted_segments();
}

void GroupCompressor::maybe_merge(std::span<const std::optional<float>> values,
                                  std::vector<Segment>& out) {
    // Only attempted when every split subset received data this interval
    // and has emitted enough segments since the split or last attempt.
    for (const auto& gen : generators_) {
        bool got = false;
        for (const int p : gen->positions())
            if (values[static_cast<std::size_t>(p)].has_value()) got = true;
        if (!got) return;
    }
    for (std::size_t i = 0; i < generators_.size(); ++i)
        if (generators_[i]->emitted_segments() - merge_baseline_[i] < merge_threshold_) return;

    SplitMergeTimer timer(stats_.split_merge_nanos);
    ++stats_.merge_attempts;

    const auto representative = [](const SegmentGenerator& gen) -> std::span<const float> {
        for (const auto& c : gen.cols_)
            if (c.live) return c.scaled;
        return {};
    };

    std::vector<std::vector<std::size_t>> sets;
    std::vector<std::size_t> remaining(generators_.size());
    for (std::size_t i = 0; i < remaining.size(); ++i) remaining[i] = i;
    while (!remaining.empty()) {
        const std::size_t seed = remaining.front();
        std::vector<std::size_t> set{seed};
        std::vector<std::size_t> rest;
        for (std::size_t i = 1; i < remaining.size(); ++i) {
            const std::size_t other = remaining[i];
            if (pair_within_double_bound(representative(*generators_[seed]),
                                         representative(*generators_[other])))
                set.push_back(other);
            else
                rest.push_back(other);
        }
        sets.push_back(std::move(set));
        remaining = std::move(rest);
    }

    bool any_merge = false;
    std::vector<std::unique_ptr<SegmentGenerator>> next;
    for (const auto& set : sets) {
        if (set.size() == 1) {
            next.push_back(std::move(generators_[set[0]]));
            continue;
        }
        any_merge = true;
        ++stats_.merges;
        std::vector<int> positions;
        for (const std::size_t g : set) {
            generators_[g]->flush(out);
            for (const int p : generators_[g]->positions()) positions.push_back(p);
        }
        std::sort(positions.begin(), positions.end());
        auto merged = make_generator(positions);
        // Starts with an empty buffer; the next tick re-establishes
        // member presence.
        next.push_back(std::move(merged));
    }
    generators_ = std::move(next);

    if (generators_.size() == 1) {
        ++stats_.full_merges;
        merge_threshold_ = 1;
    } else {
        merge_threshold_ *= 2;
    }
    (void)any_merge;
    merge_baseline_.assign(generators_.size(), 0);
    for (std::size_t i = 0; i < generators_.size(); ++i)
        merge_baseline_[i] = generators_[i]->emitted_segments();
}

std::vector<Segment> GroupCompressor::flush() {
    std::vector<Segment> out;
    for (auto& gen : generators_) gen->flush(out);
    return out;
}

}  // namespace golemm
