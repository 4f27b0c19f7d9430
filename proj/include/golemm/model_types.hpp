#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "golemm/core.hpp"

namespace golemm {

inline constexpr std::uint8_t kMidPmcMean = 1;
inline constexpr std::uint8_t kMidSwing = 2;
inline constexpr std::uint8_t kMidGorilla = 3;
inline constexpr std::uint8_t kMidFallback = 127;

struct ModelTypeDescriptor {
    std::uint8_t mid = 0;
    std::string name;
    bool lossy = true;
};

/// Aggregate of one member's model values over a timestamp range.
/// Constant and linear models produce identical values for every live
/// member, so one result covers them all.
struct ModelAggregates {
    std::int64_t count = 0;
    double sum = 0.0;
    double min = 0.0;
    double max = 0.0;
};

/// Incremental fit of one model to a group's value stream. append() is
/// transactional: a rejected append leaves the state untouched and
/// finalize() unchanged. One call covers one sampling interval with one
/// value per live member, in member order.
class ModelFitState {
public:
    virtual ~ModelFitState() = default;

    virtual bool append(std::span<const float> values, const ErrorSpec& spec) = 0;
    virtual std::uint32_t points_covered() const = 0;
    virtual std::vector<std::uint8_t> finalize() const = 0;
};

class ModelType {
public:
    virtual ~ModelType() = default;

    virtual const ModelTypeDescriptor& descriptor() const = 0;

    virtual std::unique_ptr<ModelFitState> make_state(Timestamp start_time, Timestamp si,
                                                      int live_members,
                                                      std::uint32_t length_bound) const = 0;

    /// Model value for one (timestamp, live member) cell. Scaling is not
    /// applied here; the query layer owns the per-series constant.
    virtual double evaluate(const Segment& segment, Timestamp timestamp, int live_rank,
                            int live_count) const = 0;

    /// Closed-form aggregates over the segment timestamps clipped to
    /// [from, to], or nullopt when the payload must be decoded.
    virtual std::optional<ModelAggregates> aggregates(const Segment& segment, Timestamp from,
                                                      Timestamp to, int live_count) const = 0;

    /// All stored values, timestamp-major and member-minor. Lossless
    /// types decode their stream; others sample evaluate().
    virtual std::vector<float> decode(const Segment& segment, int live_count) const;
};

/// Immutable lookup of model types by mid or name. Extension types
/// register at startup; mids must be unique.
class ModelTypeRegistry {
public:
    void register_type(std::unique_ptr<ModelType> type);

    const ModelType& by_mid(std::uint8_t mid) const;
    const ModelType& by_name(const std::string& name) const;
    bool has_mid(std::uint8_t mid) const { return types_.count(mid) != 0; }

    std::vector<ModelTypeDescriptor> descriptors() const;

    double evaluate(const Segment& segment, int group_size, Timestamp timestamp,
                    int member_index) const;

    std::optional<ModelAggregates> aggregates(const Segment& segment, int group_size,
                                              Timestamp from, Timestamp to) const;

    std::vector<float> decode(const Segment& segment, int group_size) const;

private:
    std::map<std::uint8_t, std::unique_ptr<ModelType>> types_;
};

/// Registry preloaded with pmc_mean (1), swing (2), gorilla (3) and the
/// raw fallback (127).
const ModelTypeRegistry& default_registry();

}  // namespace golemm
