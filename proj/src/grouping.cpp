#include "golemm/grouping.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

namespace golemm {

namespace {

std::size_t dim_index(const std::vector<DimensionHierarchy>& dims, const std::string& name) {
    for (std::size_t i = 0; i < dims.size(); ++i)
        if (dims[i].name == name) return i;
    throw std::invalid_argument("unknown dimension '" + name + "'");
}

void check_level(const DimensionHierarchy& dim, int level) {
    if (level < 1 || level > dim.level_count())
        throw std::invalid_argument("dimension " + dim.name + " has no level " +
                                    std::to_string(level));
}

Timestamp phase_of(const TimeSeriesMeta& meta) {
    return *meta.first_timestamp % meta.si;
}

// Groups may only merge when the result is a valid group: equal SI and,
// when first timestamps are known, congruent phases.
bool alignment_compatible(const std::vector<const TimeSeriesMeta*>& a,
                          const std::vector<const TimeSeriesMeta*>& b) {
    const TimeSeriesMeta& ref = *a.front();
    for (const auto* m : b) {
        if (m->si != ref.si) return false;
        if (m->first_timestamp && ref.first_timestamp && phase_of(*m) != phase_of(ref))
            return false;
    }
    return true;
}

bool atom_holds(const CorrelationAtom& atom, const std::vector<const TimeSeriesMeta*>& a,
                const std::vector<const TimeSeriesMeta*>& b,
                const std::vector<DimensionHierarchy>& dims,
                const std::map<std::string, double>& weights) {
    using Kind = CorrelationAtom::Kind;
    switch (atom.kind) {
        case Kind::ExplicitSources: {
            for (const auto* group : {&a, &b})
                for (const auto* m : *group)
                    if (std::find(atom.sources.begin(), atom.sources.end(), m->source) ==
                        atom.sources.end())
                        return false;
            return true;
        }
        case Kind::MemberTriple: {
            const std::size_t d = dim_index(dims, atom.dimension);
            check_level(dims[d], atom.level);
            for (const auto* group : {&a, &b})
                for (const auto* m : *group)
                    if (m->members[d][atom.level - 1] != atom.member) return false;
            return true;
        }
        case Kind::LcaPair: {
            const std::size_t d = dim_index(dims, atom.dimension);
            const int levels = dims[d].level_count();
            // Zero means every level must match; negative n relaxes the
            // lowest |n| levels.
            int required = atom.level;
            if (atom.level <= 0) required = levels + atom.level;
            return lca_level(dims[d], d, a, b) >= required;
        }
        case Kind::Distance:
            return distance(a, b, dims, weights) <= atom.threshold;
        case Kind::Auto:
            return distance(a, b, dims, weights) <= auto_distance(dims);
    }
    return false;
}

using GroupMembers = std::vector<const TimeSeriesMeta*>;

// Provably-disjoint fast path: a single clause of one member triple
// partitions the series directly (matching series bucketed by alignment,
// everything else a singleton).
bool fast_path_applies(const std::vector<CorrelationClause>& clauses) {
    return clauses.size() == 1 && clauses[0].atoms.size() == 1 &&
           clauses[0].atoms[0].kind == CorrelationAtom::Kind::MemberTriple;
}

std::vector<GroupMembers> fast_path_groups(const std::vector<const TimeSeriesMeta*>& series,
                                           const CorrelationAtom& atom,
                                           const std::vector<DimensionHierarchy>& dims) {
    const std::size_t d = dim_index(dims, atom.dimension);
    check_level(dims[d], atom.level);
    std::vector<GroupMembers> groups;
    std::map<std::pair<Timestamp, Timestamp>, std::size_t> buckets;  // (si, phase)
    for (const auto* m : series) {
        if (m->members[d][atom.level - 1] != atom.member) {
            groups.push_back({m});
            continue;
        }
        const Timestamp phase = m->first_timestamp ? phase_of(*m) : -1;
        const auto key = std::make_pair(m->si, phase);
        const auto it = buckets.find(key);
        if (it == buckets.end()) {
            buckets.emplace(key, groups.size());
            groups.push_back({m});
        } else {
            groups[it->second].push_back(m);
        }
    }
    return groups;
}

void validate_config(const GroupingConfig& config, const std::vector<DimensionHierarchy>& dims) {
    std::set<std::string> seen_sources;
    for (const auto& clause : config.clauses) {
        for (const auto& atom : clause.atoms) {
            switch (atom.kind) {
                case CorrelationAtom::Kind::ExplicitSources:
                    for (const auto& s : atom.sources)
                        if (!seen_sources.insert(s).second)
                            throw std::invalid_argument(
                                "source '" + s + "' listed in more than one sources clause");
                    break;
                case CorrelationAtom::Kind::MemberTriple:
                    check_level(dims[dim_index(dims, atom.dimension)], atom.level);
                    break;
                case CorrelationAtom::Kind::LcaPair:
                    dim_index(dims, atom.dimension);
                    break;
                case CorrelationAtom::Kind::Distance:
                    if (atom.threshold < 0.0 || atom.threshold > 1.0)
                        throw std::invalid_argument("distance threshold must be in [0, 1]");
                    break;
                case CorrelationAtom::Kind::Auto:
                    if (dims.empty())
                        throw std::invalid_argument("auto grouping requires dimensions");
                    break;
            }
        }
    }
    for (const auto& [name, w] : config.weights) {
        dim_index(dims, name);
        if (w <= 0.0) throw std::invalid_argument("weight for " + name + " must be positive");
    }
}

}  // namespace

GroupingConfig parse_grouping_config(const std::string& text) {
    GroupingConfig config;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> tokens;
        for (std::string tok; ls >> tok;) tokens.push_back(tok);
        if (tokens.empty()) continue;

        const auto fail = [line_no](const std::string& why) {
            throw std::invalid_argument("grouping config line " + std::to_string(line_no) +
                                        ": " + why);
        };
        const auto parse_int = [&](const std::string& s) {
            try {
                std::size_t used = 0;
                const int v = std::stoi(s, &used);
                if (used != s.size()) fail("expected integer, got '" + s + "'");
                return v;
            } catch (const std::invalid_argument&) {
                throw;
            } catch (const std::exception&) {
                fail("expected integer, got '" + s + "'");
                return 0;
            }
        };
        const auto parse_real = [&](const std::string& s) {
            try {
                std::size_t used = 0;
                const double v = std::stod(s, &used);
                if (used != s.size() || !std::isfinite(v))
                    fail("expected number, got '" + s + "'");
                return v;
            } catch (const std::invalid_argument&) {
                throw;
            } catch (const std::exception&) {
                fail("expected number, got '" + s + "'");
                return 0.0;
            }
        };

        if (tokens[0] == "weight") {
            if (tokens.size() != 3) fail("weight takes a dimension and a value");
            config.weights[tokens[1]] = parse_real(tokens[2]);
            continue;
        }
        if (tokens[0] == "scale") {
            ScalingRule rule;
            if (tokens.size() == 3) {
                rule.source = tokens[1];
                rule.constant = parse_real(tokens[2]);
            } else if (tokens.size() == 5) {
                rule.dimension = tokens[1];
                rule.level = parse_int(tokens[2]);
                rule.member = tokens[3];
                rule.constant = parse_real(tokens[4]);
            } else {
                fail("scale takes <source> <c> or <dim> <level> <member> <c>");
            }
            if (rule.constant == 0.0) fail("scaling constant must be non-zero");
            config.scaling_rules.push_back(std::move(rule));
            continue;
        }

        CorrelationClause clause;
        std::size_t i = 0;
        while (i < tokens.size()) {
            CorrelationAtom atom;
            const std::string& head = tokens[i];
            if (head == "sources") {
                atom.kind = CorrelationAtom::Kind::ExplicitSources;
                ++i;
                while (i < tokens.size() && tokens[i] != "AND") atom.sources.push_back(tokens[i++]);
                if (atom.sources.empty()) fail("sources needs at least one path");
            } else if (head == "member") {
                if (i + 3 >= tokens.size()) fail("member takes <dim> <level> <value>");
                atom.kind = CorrelationAtom::Kind::MemberTriple;
                atom.dimension = tokens[i + 1];
                atom.level = parse_int(tokens[i + 2]);
                atom.member = tokens[i + 3];
                i += 4;
            } else if (head == "lca") {
                if (i + 2 >= tokens.size()) fail("lca takes <dim> <level>");
                atom.kind = CorrelationAtom::Kind::LcaPair;
                atom.dimension = tokens[i + 1];
                atom.level = parse_int(tokens[i + 2]);
                i += 3;
            } else if (head == "distance") {
                if (i + 1 >= tokens.size()) fail("distance takes a threshold");
                atom.kind = CorrelationAtom::Kind::Distance;
                atom.threshold = parse_real(tokens[i + 1]);
                i += 2;
            } else if (head == "auto") {
                atom.kind = CorrelationAtom::Kind::Auto;
                ++i;
            } else {
                fail("unknown token '" + head + "'");
            }
            clause.atoms.push_back(std::move(atom));
            if (i < tokens.size()) {
                if (tokens[i] != "AND") fail("expected AND between atoms");
                ++i;
                if (i == tokens.size()) fail("dangling AND");
            }
        }
        config.clauses.push_back(std::move(clause));
    }
    return config;
}

int lca_level(const DimensionHierarchy& dim, std::size_t dim_index,
              const std::vector<const TimeSeriesMeta*>& a,
              const std::vector<const TimeSeriesMeta*>& b) {
    const auto& ref = a.front()->members.at(dim_index);
    int lca = dim.level_count();
    for (const auto* group : {&a, &b}) {
        for (const auto* m : *group) {
            const auto& chain = m->members.at(dim_index);
            int shared = 0;
            while (shared < lca && chain[shared] == ref[shared]) ++shared;
            lca = shared;
            if (lca == 0) return 0;
        }
    }
    return lca;
}

double distance(const std::vector<const TimeSeriesMeta*>& a,
                const std::vector<const TimeSeriesMeta*>& b,
                const std::vector<DimensionHierarchy>& dims,
                const std::map<std::string, double>& weights) {
    if (dims.empty()) throw std::invalid_argument("distance requires dimensions");
    double sum = 0.0;
    for (std::size_t d = 0; d < dims.size(); ++d) {
        const double levels = dims[d].level_count();
        const double lca = lca_level(dims[d], d, a, b);
        double weight = 1.0;
        if (const auto it = weights.find(dims[d].name); it != weights.end())
            weight = 1.0 / it->second;
        sum += weight * ((levels - lca) / levels);
    }
    return std::min(sum / static_cast<double>(dims.size()), 1.0);
}

double auto_distance(const std::vector<DimensionHierarchy>& dims) {
    if (dims.empty()) throw std::invalid_argument("auto distance requires dimensions");
    int max_levels = 0;
    for (const auto& d : dims) max_levels = std::max(max_levels, d.level_count());
    return (1.0 / static_cast<double>(max_levels)) / static_cast<double>(dims.size());
}

bool correlated(const CorrelationClause& clause, const std::vector<const TimeSeriesMeta*>& a,
                const std::vector<const TimeSeriesMeta*>& b,
                const std::vector<DimensionHierarchy>& dims,
                const std::map<std::string, double>& weights) {
    if (a.empty() || b.empty()) return false;
    if (!alignment_compatible(a, b)) return false;
    for (const auto& atom : clause.atoms)
        if (!atom_holds(atom, a, b, dims, weights)) return false;
    return true;
}

std::vector<TimeSeriesGroup> group_time_series(std::vector<TimeSeriesMeta>& series,
                                               const std::vector<DimensionHierarchy>& dims,
                                               const GroupingConfig& config) {
    if (series.empty()) throw std::invalid_argument("no time series to group");
    validate_config(config, dims);

    std::vector<const TimeSeriesMeta*> ordered;
    ordered.reserve(series.size());
    for (const auto& m : series) ordered.push_back(&m);
    std::sort(ordered.begin(), ordered.end(),
              [](const auto* x, const auto* y) { return x->tid < y->tid; });

    std::vector<GroupMembers> groups;
    if (fast_path_applies(config.clauses)) {
        groups = fast_path_groups(ordered, config.clauses[0].atoms[0], dims);
    } else {
        for (const auto* m : ordered) groups.push_back({m});
        for (const auto& clause : config.clauses) {
            bool changed = true;
            while (changed) {
                changed = false;
                for (std::size_t i = 0; i < groups.size(); ++i) {
                    for (std::size_t j = i + 1; j < groups.size();) {
                        if (correlated(clause, groups[i], groups[j], dims, config.weights)) {
                            groups[i].insert(groups[i].end(), groups[j].begin(),
                                             groups[j].end());
                            groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(j));
                            changed = true;
                        } else {
                            ++j;
                        }
                    }
                }
            }
        }
    }

    // Positions are bitmask indexes, so cap group size at 64 by chunking
    // in member order (ascending tid).
    std::vector<TimeSeriesGroup> out;
    std::map<Tid, Gid> assigned;
    for (auto& members : groups) {
        std::sort(members.begin(), members.end(),
                  [](const auto* x, const auto* y) { return x->tid < y->tid; });
        for (std::size_t off = 0; off < members.size(); off += kMaxGroupSize) {
            TimeSeriesGroup g;
            g.gid = static_cast<Gid>(out.size() + 1);
            g.si = members[off]->si;
            const std::size_t end = std::min(off + kMaxGroupSize, members.size());
            for (std::size_t k = off; k < end; ++k) {
                g.tids.push_back(members[k]->tid);
                assigned[members[k]->tid] = g.gid;
            }
            out.push_back(std::move(g));
        }
    }
    for (auto& m : series) m.gid = assigned.at(m.tid);
    return out;
}

double group_load(const TimeSeriesGroup& group) {
    return static_cast<double>(group.size()) * (60000.0 / static_cast<double>(group.si));
}

namespace {

struct SpreadSearch {
    const std::vector<double>& items;  // sorted descending
    int k;
    std::vector<double> loads;
    std::vector<int> current;
    std::vector<int> best;
    double best_spread;
    double remaining_total;
    long nodes = 0;
    static constexpr long kNodeBudget = 5'000'000;

    void run(std::size_t idx, double remaining) {
        if (++nodes > kNodeBudget) return;
        if (idx == items.size()) {
            const auto [lo, hi] = std::minmax_element(loads.begin(), loads.end());
            const double spread = *hi - *lo;
            if (spread < best_spread - 1e-12) {
                best_spread = spread;
                best = current;
            }
            return;
        }
        const double cur_max = *std::max_element(loads.begin(), loads.end());
        const double cur_min = *std::min_element(loads.begin(), loads.end());
        if (cur_max - (cur_min + remaining) >= best_spread - 1e-12) return;
        for (int p = 0; p < k; ++p) {
            bool duplicate = false;
            for (int q = 0; q < p; ++q)
                if (loads[q] == loads[p]) {
                    duplicate = true;
                    break;
                }
            if (duplicate) continue;
            loads[p] += items[idx];
            current[idx] = p;
            run(idx + 1, remaining - items[idx]);
            loads[p] -= items[idx];
        }
    }
};

}  // namespace

PartitionPlan partition_groups(const std::vector<TimeSeriesGroup>& groups, int k) {
    if (k < 1) throw std::invalid_argument("partition count must be at least 1");
    const std::size_t n = groups.size();

    std::vector<double> item_loads(n);
    for (std::size_t i = 0; i < n; ++i) item_loads[i] = group_load(groups[i]);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return item_loads[x] > item_loads[y];
    });

    PartitionPlan plan;
    plan.assignment.assign(n, 0);
    plan.loads.assign(static_cast<std::size_t>(k), 0.0);

    using Slot = std::pair<double, int>;
    std::priority_queue<Slot, std::vector<Slot>, std::greater<>> lightest;
    for (int p = 0; p < k; ++p) lightest.emplace(0.0, p);
    for (const std::size_t g : order) {
        auto [load, p] = lightest.top();
        lightest.pop();
        plan.assignment[g] = p;
        lightest.emplace(load + item_loads[g], p);
    }
    for (std::size_t g = 0; g < n; ++g)
        plan.loads[static_cast<std::size_t>(plan.assignment[g])] += item_loads[g];
    const auto [lo, hi] = std::minmax_element(plan.loads.begin(), plan.loads.end());
    plan.spread = *hi - *lo;

    // Exact refinement for small instances; the greedy result seeds the
    // bound so the search can only improve on it.
    if (n > 0 && n <= 16 && plan.spread > 0.0) {
        std::vector<double> sorted_items(n);
        for (std::size_t i = 0; i < n; ++i) sorted_items[i] = item_loads[order[i]];
        double total = 0.0;
        for (const double w : sorted_items) total += w;
        SpreadSearch search{sorted_items, k, std::vector<double>(k, 0.0),
                            std::vector<int>(n, 0), {}, plan.spread, total};
        search.run(0, total);
        if (!search.best.empty()) {
            for (std::size_t i = 0; i < n; ++i) plan.assignment[order[i]] = search.best[i];
            plan.loads.assign(static_cast<std::size_t>(k), 0.0);
            for (std::size_t g = 0; g < n; ++g)
                plan.loads[static_cast<std::size_t>(plan.assignment[g])] += item_loads[g];
            const auto [l2, h2] = std::minmax_element(plan.loads.begin(), plan.loads.end());
            plan.spread = *h2 - *l2;
        }
    }
    return plan;
}

void resolve_scaling(std::vector<TimeSeriesMeta>& series,
                     const std::vector<DimensionHierarchy>& dims,
                     const std::vector<ScalingRule>& rules) {
    for (auto& meta : series) {
        double scaling = 1.0;
        for (const auto& rule : rules) {
            if (rule.source) {
                if (*rule.source == meta.source) scaling = rule.constant;
                continue;
            }
            const std::size_t d = dim_index(dims, rule.dimension);
            check_level(dims[d], rule.level);
            if (meta.members[d][rule.level - 1] == rule.member) scaling = rule.constant;
        }
        meta.scaling = scaling;
    }
}

}  // namespace golemm
