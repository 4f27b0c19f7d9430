#include "golemm/core.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>

namespace golemm {

double ErrorSpec::bound(double real) const {
    if (mode == ErrorMode::Absolute) return epsilon;
    return (epsilon / 100.0) * std::fabs(real);
}

bool within_bound(double real, double approx, const ErrorSpec& spec) {
    if (spec.mode == ErrorMode::Relative && real == 0.0) return approx == 0.0;
    return std::fabs(real - approx) <= spec.bound(real);
}

void validate_dimensions(const std::vector<DimensionHierarchy>& dims,
                         const std::vector<TimeSeriesMeta>& series) {
    for (const auto& meta : series) {
        if (meta.members.size() != dims.size())
            throw std::invalid_argument("series tid " + std::to_string(meta.tid) +
                                        " has members for " + std::to_string(meta.members.size()) +
                                        " dimensions, expected " + std::to_string(dims.size()));
        for (std::size_t d = 0; d < dims.size(); ++d) {
            if (static_cast<int>(meta.members[d].size()) != dims[d].level_count())
                throw std::invalid_argument("series tid " + std::to_string(meta.tid) +
                                            " is missing members for dimension " + dims[d].name);
            for (const auto& m : meta.members[d])
                if (m.empty())
                    throw std::invalid_argument("empty member for tid " + std::to_string(meta.tid) +
                                                " in dimension " + dims[d].name);
        }
    }
    // Each member must have one parent so walking up the hierarchy is
    // well defined; the implicit top is the parent of every level-1 member.
    for (std::size_t d = 0; d < dims.size(); ++d) {
        std::map<std::string, std::string> parent;
        for (const auto& meta : series) {
            const auto& chain = meta.members[d];
            for (std::size_t k = 1; k < chain.size(); ++k) {
                auto [it, inserted] = parent.emplace(chain[k], chain[k - 1]);
                if (!inserted && it->second != chain[k - 1])
                    throw std::invalid_argument("member '" + chain[k] + "' of dimension " +
                                                dims[d].name + " has conflicting parents '" +
                                                it->second + "' and '" + chain[k - 1] + "'");
            }
        }
    }
}

std::uint64_t position_mask(int group_size) {
    if (group_size <= 0) return 0;
    if (group_size >= 64) return ~std::uint64_t{0};
    return (std::uint64_t{1} << group_size) - 1;
}

int live_member_count(const Segment& segment, int group_size) {
    return std::popcount(~segment.gaps & position_mask(group_size));
}

int live_member_rank(const Segment& segment, int member_index) {
    const std::uint64_t bit = std::uint64_t{1} << member_index;
    if (segment.gaps & bit)
        throw std::invalid_argument("member " + std::to_string(member_index) +
                                    " is absent for the whole segment");
    return std::popcount(~segment.gaps & (bit - 1));
}

Timestamp recompute_start_time(Timestamp end_time, std::int64_t size, Timestamp si) {
    return end_time - size * si;
}

std::vector<Timestamp> segment_timestamps(const Segment& segment) {
    std::vector<Timestamp> out;
    out.reserve(static_cast<std::size_t>(segment.point_count()));
    for (Timestamp t = segment.start_time; t <= segment.end_time; t += segment.si)
        out.push_back(t);
    return out;
}

}  // namespace golemm
