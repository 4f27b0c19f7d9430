#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "golemm/core.hpp"

namespace golemm {

/// One atom of a correlation clause. Atoms on the same config line are
/// ANDed; lines are alternatives applied in order.
struct CorrelationAtom {
    enum class Kind { ExplicitSources, MemberTriple, LcaPair, Distance, Auto };
    Kind kind = Kind::Auto;
    std::vector<std::string> sources;  // ExplicitSources
    std::string dimension;             // MemberTriple, LcaPair
    int level = 0;                     // MemberTriple; LcaPair (may be negative)
    std::string member;                // MemberTriple
    double threshold = 0.0;            // Distance
};

struct CorrelationClause {
    std::vector<CorrelationAtom> atoms;
};

struct ScalingRule {
    // Either a source match or a (dimension, level, member) match.
    std::optional<std::string> source;
    std::string dimension;
    int level = 0;
    std::string member;
    double constant = 1.0;
};

/// Parsed grouping configuration: clause lines plus weight/scale
/// parameter lines.
struct GroupingConfig {
    std::vector<CorrelationClause> clauses;
    std::map<std::string, double> weights;  // dimension -> user weight
    std::vector<ScalingRule> scaling_rules;
};

/// Parses the grouping config text. One clause per line, atoms joined by
/// AND; atom forms: `sources <p>...`, `member <dim> <level> <value>`,
/// `lca <dim> <int>`, `distance <real>`, `auto`. Parameter lines:
/// `weight <dim> <real>`, `scale <source> <c>` or
/// `scale <dim> <level> <member> <c>`. '#' starts a comment.
GroupingConfig parse_grouping_config(const std::string& text);

/// Deepest level at which every series in a and b shares identical
/// member chains from the top; 0 when only the top is shared.
int lca_level(const DimensionHierarchy& dim, std::size_t dim_index,
              const std::vector<const TimeSeriesMeta*>& a,
              const std::vector<const TimeSeriesMeta*>& b);

/// Weighted dimension distance in [0, 1]; weight_d is the reciprocal of
/// the user weight (default 1).
double distance(const std::vector<const TimeSeriesMeta*>& a,
                const std::vector<const TimeSeriesMeta*>& b,
                const std::vector<DimensionHierarchy>& dims,
                const std::map<std::string, double>& weights);

/// Lowest non-zero distance attainable for the given dimensions:
/// (1/max level count) / number of dimensions.
double auto_distance(const std::vector<DimensionHierarchy>& dims);

bool correlated(const CorrelationClause& clause, const std::vector<const TimeSeriesMeta*>& a,
                const std::vector<const TimeSeriesMeta*>& b,
                const std::vector<DimensionHierarchy>& dims,
                const std::map<std::string, double>& weights);

/// Groups series by merging singleton groups per clause until a fixed
/// point, splits groups above the 64-member bitmask cap, assigns gids
/// sequentially from 1 and writes them back into the metas. Member order
/// within a group is ascending tid.
std::vector<TimeSeriesGroup> group_time_series(std::vector<TimeSeriesMeta>& series,
                                               const std::vector<DimensionHierarchy>& dims,
                                               const GroupingConfig& config);

/// Ingest load of one group in data points per minute.
double group_load(const TimeSeriesGroup& group);

struct PartitionPlan {
    std::vector<int> assignment;       // group index -> partition
    std::vector<double> loads;         // per partition, points per minute
    double spread = 0.0;               // max load - min load
};

/// Balances groups over k partitions. Longest-processing-time greedy,
/// refined to the exact optimum by branch and bound when the group count
/// is small enough to search.
PartitionPlan partition_groups(const std::vector<TimeSeriesGroup>& groups, int k);

/// Applies scaling rules to every series; last matching rule wins,
/// default 1.0.
void resolve_scaling(std::vector<TimeSeriesMeta>& series,
                     const std::vector<DimensionHierarchy>& dims,
                     const std::vector<ScalingRule>& rules);

}  // namespace golemm
