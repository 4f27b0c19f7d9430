#include "golemm/model_types.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "golemm/bits.hpp"

namespace golemm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Feasible interval for a shared model value at one timestamp: every
// member's value constrains it to [v - bound(v), v + bound(v)].
struct Envelope {
    double lo = -kInf;
    double hi = kInf;

    void fold(std::span<const float> values, const ErrorSpec& spec) {
        for (const float v : values) {
            const double b = spec.bound(v);
            lo = std::max(lo, static_cast<double>(v) - b);
            hi = std::min(hi, static_cast<double>(v) + b);
        }
    }

    bool empty() const { return lo > hi; }
};

std::vector<std::uint8_t> f32_payload(std::initializer_list<float> values) {
    std::vector<std::uint8_t> out;
    for (const float v : values) put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

float payload_f32(const Segment& segment, std::size_t offset) {
    if (segment.payload.size() < offset + 4)
        throw std::runtime_error("segment payload truncated (mid " +
                                 std::to_string(segment.mid) + ")");
    return std::bit_cast<float>(get_u32_le(segment.payload.data() + offset));
}

// Segment timestamps clipped to [from, to]: first/last grid points in
// range, or count 0 when the ranges do not intersect.
struct ClippedRange {
    Timestamp first = 0;
    Timestamp last = 0;
    std::int64_t count = 0;
};

ClippedRange clip_to_segment(const Segment& s, Timestamp from, Timestamp to) {
    ClippedRange r;
    Timestamp lo = std::max(from, s.start_time);
    const Timestamp hi = std::min(to, s.end_time);
    if (lo > hi) return r;
    const Timestamp off = (lo - s.start_time) % s.si;
    if (off != 0) lo += s.si - off;
    if (lo > hi) return r;
    r.first = lo;
    r.last = s.start_time + ((hi - s.start_time) / s.si) * s.si;
    r.count = (r.last - r.first) / s.si + 1;
    return r;
}

void check_member_count(std::span<const float> values, int live_members) {
    if (static_cast<int>(values.size()) != live_members)
        throw std::invalid_argument("expected " + std::to_string(live_members) +
                                    " values, got " + std::to_string(values.size()));
}

// ---------------------------------------------------------------------------
// PMC-Mean: constant model, 4-byte payload.

class PmcMeanState final : public ModelFitState {
public:
    explicit PmcMeanState(int live_members) : members_(live_members) {}

    bool append(std::span<const float> values, const ErrorSpec& spec) override {
        check_member_count(values, members_);
        Envelope env{lo_, hi_};
        env.fold(values, spec);
        if (env.empty()) return false;
        double sum = sum_;
        for (const float v : values) sum += v;
        const std::uint64_t n = count_ + values.size();
        // Check the value queries will actually reconstruct, so float
        // quantization of the stored mean cannot break the bound.
        const float mean = static_cast<float>(sum / static_cast<double>(n));
        if (!(env.lo <= mean && mean <= env.hi)) return false;
        lo_ = env.lo;
        hi_ = env.hi;
        sum_ = sum;
        count_ = n;
        ++points_;
        return true;
    }

    std::uint32_t points_covered() const override { return points_; }

    std::vector<std::uint8_t> finalize() const override {
        if (points_ == 0) throw std::logic_error("finalize of empty pmc_mean state");
        return f32_payload({static_cast<float>(sum_ / static_cast<double>(count_))});
    }

private:
    int members_;
    double lo_ = -kInf;
    double hi_ = kInf;
    double sum_ = 0.0;
    std::uint64_t count_ = 0;
    std::uint32_t points_ = 0;
};

class PmcMeanType final : public ModelType {
public:
    const ModelTypeDescriptor& descriptor() const override {
        static const ModelTypeDescriptor d{kMidPmcMean, "pmc_mean", true};
        return d;
    }

    std::unique_ptr<ModelFitState> make_state(Timestamp, Timestamp, int live_members,
                                              std::uint32_t) const override {
        return std::make_unique<PmcMeanState>(live_members);
    }

    double evaluate(const Segment& segment, Timestamp, int, int) const override {
        return payload_f32(segment, 0);
    }

    std::optional<ModelAggregates> aggregates(const Segment& segment, Timestamp from,
                                              Timestamp to, int) const override {
        const ClippedRange r = clip_to_segment(segment, from, to);
        const double mean = payload_f32(segment, 0);
        return ModelAggregates{r.count, mean * static_cast<double>(r.count), mean, mean};
    }
};

// ---------------------------------------------------------------------------
// Swing: linear model through the average of the first values, 8-byte
// payload of intercept and slope over absolute timestamps.
//
// The payload is quantized to two floats, which matters at epoch-scale
// timestamps, so acceptance is checked against the exact stored line:
// the cone midpoint slope is rounded to f32 first, the intercept is then
// derived from the rounded slope and rounded itself, and the resulting
// line is verified against every buffered per-timestamp envelope. While
// the current stored line keeps fitting new envelopes no recomputation
// is needed.

class SwingState final : public ModelFitState {
public:
    SwingState(Timestamp start_time, Timestamp si, int live_members)
        : t0_(start_time), si_(si), members_(live_members) {}

    bool append(std::span<const float> values, const ErrorSpec& spec) override {
        check_member_count(values, members_);
        Envelope env;
        env.fold(values, spec);
        if (env.empty()) return false;

        if (points_ == 0) {
            double sum = 0.0;
            for (const float v : values) sum += v;
            const double pivot = sum / static_cast<double>(values.size());
            const float qi = static_cast<float>(pivot);
            if (!line_fits(qi, 0.0f, t0_, env)) return false;
            pivot_ = pivot;
            envs_ = {env};
            line_i_ = qi;
            line_s_ = 0.0f;
            points_ = 1;
            return true;
        }

        const Timestamp t = t0_ + static_cast<Timestamp>(points_) * si_;
        const double dt = static_cast<double>(t - t0_);
        const double lo = std::max(s_lo_, (env.lo - pivot_) / dt);
        const double hi = std::min(s_hi_, (env.hi - pivot_) / dt);
        if (lo > hi) return false;

        if (!line_fits(line_i_, line_s_, t, env)) {
            // Re-aim at the cone midpoint and verify the quantized line
            // against everything buffered so far.
            const double slope = 0.5 * (lo + hi);
            const float qs = static_cast<float>(slope);
            const float qi =
                static_cast<float>(pivot_ - static_cast<double>(qs) * static_cast<double>(t0_));
            if (!line_fits(qi, qs, t, env)) return false;
            for (std::size_t k = 0; k < envs_.size(); ++k)
                if (!line_fits(qi, qs, t0_ + static_cast<Timestamp>(k) * si_, envs_[k]))
                    return false;
            line_i_ = qi;
            line_s_ = qs;
        }
        s_lo_ = lo;
        s_hi_ = hi;
        envs_.push_back(env);
        ++points_;
        return true;
    }

    std::uint32_t points_covered() const override { return points_; }

    std::vector<std::uint8_t> finalize() const override {
        if (points_ == 0) throw std::logic_error("finalize of empty swing state");
        return f32_payload({line_i_, line_s_});
    }

private:
    // Exactly the value queries reconstruct, including the final rounding.
    static bool line_fits(float intercept, float slope, Timestamp t, const Envelope& env) {
        const float v = static_cast<float>(static_cast<double>(intercept) +
                                           static_cast<double>(slope) * static_cast<double>(t));
        return env.lo <= v && v <= env.hi;
    }

    Timestamp t0_;
    Timestamp si_;
    int members_;
    std::uint32_t points_ = 0;
    double pivot_ = 0.0;
    std::vector<Envelope> envs_;
    double s_lo_ = -kInf;
    double s_hi_ = kInf;
    float line_i_ = 0.0f;
    float line_s_ = 0.0f;
};

double swing_value(const Segment& segment, Timestamp t) {
    const double intercept = payload_f32(segment, 0);
    const double slope = payload_f32(segment, 4);
    return intercept + slope * static_cast<double>(t);
}

class SwingType final : public ModelType {
public:
    const ModelTypeDescriptor& descriptor() const override {
        static const ModelTypeDescriptor d{kMidSwing, "swing", true};
        return d;
    }

    std::unique_ptr<ModelFitState> make_state(Timestamp start_time, Timestamp si,
                                              int live_members, std::uint32_t) const override {
        return std::make_unique<SwingState>(start_time, si, live_members);
    }

    double evaluate(const Segment& segment, Timestamp timestamp, int, int) const override {
        return swing_value(segment, timestamp);
    }

    std::optional<ModelAggregates> aggregates(const Segment& segment, Timestamp from,
                                              Timestamp to, int) const override {
        const ClippedRange r = clip_to_segment(segment, from, to);
        if (r.count == 0) return ModelAggregates{};
        const double slope = payload_f32(segment, 4);
        const double first = swing_value(segment, r.first);
        const double last = swing_value(segment, r.last);
        const double k = static_cast<double>(r.count);
        const double sum =
            k * first + slope * static_cast<double>(segment.si) * k * (k - 1.0) * 0.5;
        return ModelAggregates{r.count, sum, std::min(first, last), std::max(first, last)};
    }
};

// ---------------------------------------------------------------------------
// Gorilla: lossless XOR codec over the flattened value stream
// (timestamp-major, member-minor). First value verbatim as 4 LE bytes,
// then per value: '0' for a zero XOR, '10' to reuse the previous
// leading/trailing window, '11' + 5-bit leading zeros + 5-bit
// (meaningful bits - 1) + the meaningful bits.

class GorillaState final : public ModelFitState {
public:
    GorillaState(int live_members, std::uint32_t length_bound)
        : members_(live_members), length_bound_(length_bound) {}

    bool append(std::span<const float> values, const ErrorSpec&) override {
        check_member_count(values, members_);
        if (points_ >= length_bound_) return false;
        for (const float v : values) encode(std::bit_cast<std::uint32_t>(v));
        ++points_;
        return true;
    }

    std::uint32_t points_covered() const override { return points_; }

    std::vector<std::uint8_t> finalize() const override {
        if (points_ == 0) throw std::logic_error("finalize of empty gorilla state");
        std::vector<std::uint8_t> out;
        put_u32_le(out, first_);
        const auto& tail = bits_.bytes();
        out.insert(out.end(), tail.begin(), tail.end());
        return out;
    }

private:
    void encode(std::uint32_t value) {
        if (!have_first_) {
            first_ = value;
            prev_ = value;
            have_first_ = true;
            return;
        }
        const std::uint32_t x = prev_ ^ value;
        prev_ = value;
        if (x == 0) {
            bits_.write_bit(false);
            return;
        }
        bits_.write_bit(true);
        const int lz = std::countl_zero(x);
        const int tz = std::countr_zero(x);
        if (window_valid_ && lz >= win_lz_ && tz >= win_tz_) {
            bits_.write_bit(false);
            bits_.write_bits(x >> win_tz_, 32 - win_lz_ - win_tz_);
        } else {
            const int mb = 32 - lz - tz;
            bits_.write_bit(true);
            bits_.write_bits(static_cast<std::uint32_t>(lz), 5);
            bits_.write_bits(static_cast<std::uint32_t>(mb - 1), 5);
            bits_.write_bits(x >> tz, mb);
            win_lz_ = lz;
            win_tz_ = tz;
            window_valid_ = true;
        }
    }

    int members_;
    std::uint32_t length_bound_;
    std::uint32_t points_ = 0;
    bool have_first_ = false;
    bool window_valid_ = false;
    std::uint32_t first_ = 0;
    std::uint32_t prev_ = 0;
    int win_lz_ = 0;
    int win_tz_ = 0;
    BitWriter bits_;
};

std::vector<float> gorilla_decode(std::span<const std::uint8_t> payload, std::size_t count) {
    std::vector<float> out;
    if (count == 0) return out;
    out.reserve(count);
    if (payload.size() < 4) throw std::runtime_error("gorilla payload truncated");
    std::uint32_t prev = get_u32_le(payload.data());
    out.push_back(std::bit_cast<float>(prev));
    BitReader reader(payload.subspan(4));
    int win_lz = 0;
    int win_tz = 0;
    bool window_valid = false;
    for (std::size_t i = 1; i < count; ++i) {
        if (!reader.read_bit()) {
            out.push_back(std::bit_cast<float>(prev));
            continue;
        }
        if (reader.read_bit()) {
            win_lz = static_cast<int>(reader.read_bits(5));
            const int mb = static_cast<int>(reader.read_bits(5)) + 1;
            win_tz = 32 - win_lz - mb;
            window_valid = true;
        } else if (!window_valid) {
            throw std::runtime_error("corrupt gorilla stream: window reuse before definition");
        }
        if (win_tz < 0) throw std::runtime_error("corrupt gorilla stream: bad window");
        const int mb = 32 - win_lz - win_tz;
        const std::uint32_t x = reader.read_bits(mb) << win_tz;
        prev ^= x;
        out.push_back(std::bit_cast<float>(prev));
    }
    return out;
}

class GorillaType final : public ModelType {
public:
    const ModelTypeDescriptor& descriptor() const override {
        static const ModelTypeDescriptor d{kMidGorilla, "gorilla", false};
        return d;
    }

    std::unique_ptr<ModelFitState> make_state(Timestamp, Timestamp, int live_members,
                                              std::uint32_t length_bound) const override {
        return std::make_unique<GorillaState>(live_members, length_bound);
    }

    double evaluate(const Segment& segment, Timestamp timestamp, int live_rank,
                    int live_count) const override {
        const auto values = decode(segment, live_count);
        const std::size_t index =
            static_cast<std::size_t>((timestamp - segment.start_time) / segment.si) *
                static_cast<std::size_t>(live_count) +
            static_cast<std::size_t>(live_rank);
        return values.at(index);
    }

    std::optional<ModelAggregates> aggregates(const Segment&, Timestamp, Timestamp,
                                              int) const override {
        return std::nullopt;  // decode-required
    }

    std::vector<float> decode(const Segment& segment, int live_count) const override {
        return gorilla_decode(segment.payload,
                              static_cast<std::size_t>(segment.point_count()) *
                                  static_cast<std::size_t>(live_count));
    }
};

// ---------------------------------------------------------------------------
// Fallback: raw little-endian floats, used when nothing else fits.

class FallbackState final : public ModelFitState {
public:
    FallbackState(int live_members, std::uint32_t length_bound)
        : members_(live_members), length_bound_(length_bound) {}

    bool append(std::span<const float> values, const ErrorSpec&) override {
        check_member_count(values, members_);
        if (points_ >= length_bound_) return false;
        for (const float v : values) put_u32_le(raw_, std::bit_cast<std::uint32_t>(v));
        ++points_;
        return true;
    }

    std::uint32_t points_covered() const override { return points_; }

    std::vector<std::uint8_t> finalize() const override {
        if (points_ == 0) throw std::logic_error("finalize of empty fallback state");
        return raw_;
    }

private:
    int members_;
    std::uint32_t length_bound_;
    std::uint32_t points_ = 0;
    std::vector<std::uint8_t> raw_;
};

class FallbackType final : public ModelType {
public:
    const ModelTypeDescriptor& descriptor() const override {
        static const ModelTypeDescriptor d{kMidFallback, "fallback", false};
        return d;
    }

    std::unique_ptr<ModelFitState> make_state(Timestamp, Timestamp, int live_members,
                                              std::uint32_t length_bound) const override {
        return std::make_unique<FallbackState>(live_members, length_bound);
    }

    double evaluate(const Segment& segment, Timestamp timestamp, int live_rank,
                    int live_count) const override {
        const std::size_t index =
            static_cast<std::size_t>((timestamp - segment.start_time) / segment.si) *
                static_cast<std::size_t>(live_count) +
            static_cast<std::size_t>(live_rank);
        return payload_f32(segment, index * 4);
    }

    std::optional<ModelAggregates> aggregates(const Segment&, Timestamp, Timestamp,
                                              int) const override {
        return std::nullopt;
    }

    std::vector<float> decode(const Segment& segment, int live_count) const override {
        const std::size_t count = static_cast<std::size_t>(segment.point_count()) *
                                  static_cast<std::size_t>(live_count);
        if (segment.payload.size() < count * 4)
            throw std::runtime_error("fallback payload truncated");
        std::vector<float> out;
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i)
            out.push_back(std::bit_cast<float>(get_u32_le(segment.payload.data() + i * 4)));
        return out;
    }
};

}  // namespace

std::vector<float> ModelType::decode(const Segment& segment, int live_count) const {
    std::vector<float> out;
    for (Timestamp t = segment.start_time; t <= segment.end_time; t += segment.si)
        for (int r = 0; r < live_count; ++r)
            out.push_back(static_cast<float>(evaluate(segment, t, r, live_count)));
    return out;
}

void ModelTypeRegistry::register_type(std::unique_ptr<ModelType> type) {
    const auto& d = type->descriptor();
    if (!types_.emplace(d.mid, std::move(type)).second)
        throw std::invalid_argument("duplicate model type id " + std::to_string(d.mid));
}

const ModelType& ModelTypeRegistry::by_mid(std::uint8_t mid) const {
    const auto it = types_.find(mid);
    if (it == types_.end())
        throw std::out_of_range("unknown model type id " + std::to_string(mid));
    return *it->second;
}

const ModelType& ModelTypeRegistry::by_name(const std::string& name) const {
    for (const auto& [mid, type] : types_)
        if (type->descriptor().name == name) return *type;
    throw std::out_of_range("unknown model type '" + name + "'");
}

std::vector<ModelTypeDescriptor> ModelTypeRegistry::descriptors() const {
    std::vector<ModelTypeDescriptor> out;
    for (const auto& [mid, type] : types_) out.push_back(type->descriptor());
    return out;
}

double ModelTypeRegistry::evaluate(const Segment& segment, int group_size, Timestamp timestamp,
                                   int member_index) const {
    if (timestamp < segment.start_time || timestamp > segment.end_time ||
        (timestamp - segment.start_time) % segment.si != 0)
        throw std::out_of_range("timestamp " + std::to_string(timestamp) +
                                " outside segment grid");
    if (member_index < 0 || member_index >= group_size)
        throw std::invalid_argument("member index out of range");
    const int rank = live_member_rank(segment, member_index);
    const int live = live_member_count(segment, group_size);
    return by_mid(segment.mid).evaluate(segment, timestamp, rank, live);
}

std::optional<ModelAggregates> ModelTypeRegistry::aggregates(const Segment& segment,
                                                             int group_size, Timestamp from,
                                                             Timestamp to) const {
    return by_mid(segment.mid).aggregates(segment, from, to,
                                          live_member_count(segment, group_size));
}

std::vector<float> ModelTypeRegistry::decode(const Segment& segment, int group_size) const {
    return by_mid(segment.mid).decode(segment, live_member_count(segment, group_size));
}

const ModelTypeRegistry& default_registry() {
    static const ModelTypeRegistry registry = [] {
        ModelTypeRegistry r;
        r.register_type(std::make_unique<PmcMeanType>());
        r.register_type(std::make_unique<SwingType>());
        r.register_type(std::make_unique<GorillaType>());
        r.register_type(std::make_unique<FallbackType>());
        return r;
    }();
    return registry;
}

}  // namespace golemm
