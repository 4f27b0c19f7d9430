#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <bit>
#include <cmath>
#include <random>

#include "golemm/bits.hpp"
#include "golemm/ingest.hpp"
#include "golemm/model_types.hpp"
#include "golemm/query.hpp"
#include "golemm/store.hpp"
#include "test_util.hpp"

using namespace golemm;
using namespace golemm::testutil;

namespace {

constexpr Timestamp kHour = 3'600'000;

TimeSeriesMeta meta_row(Tid tid, Gid gid, double scaling, Timestamp si, std::string park,
                        std::string entity) {
    TimeSeriesMeta m;
    m.tid = tid;
    m.gid = gid;
    m.scaling = scaling;
    m.si = si;
    m.source = "series" + std::to_string(tid) + ".csv";
    m.members = {{"Denmark", "Nordjylland", std::move(park), std::move(entity)}};
    return m;
}

StoreCatalog example_catalog() {
    StoreCatalog catalog;
    catalog.dimensions = {{"Location", {"Country", "Region", "Park", "Entity"}}};
    catalog.series.push_back(meta_row(1, 1, 1.0, 60000, "Farsoe", "9572"));
    catalog.series.push_back(meta_row(2, 3, 1.0, 30000, "Aalborg", "9632"));
    catalog.series.push_back(meta_row(3, 3, 4.75, 30000, "Aalborg", "9634"));
    for (const auto& d : default_registry().descriptors())
        catalog.model_names[d.mid] = d.name;
    return catalog;
}

std::vector<std::uint8_t> f32le(std::initializer_list<float> values) {
    std::vector<std::uint8_t> out;
    for (const float v : values) put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

Segment make_segment(Gid gid, std::uint8_t mid, Timestamp start, Timestamp end, Timestamp si,
                     std::vector<std::uint8_t> payload, std::uint64_t gaps = 0) {
    Segment s;
    s.gid = gid;
    s.mid = mid;
    s.start_time = start;
    s.end_time = end;
    s.si = si;
    s.gaps = gaps;
    s.payload = std::move(payload);
    return s;
}

struct Fixture {
    TempDir dir{"query"};
    SegmentStore store;

    explicit Fixture(StoreCatalog catalog, std::vector<Segment> segments)
        : store(SegmentStore::create(dir.path(), std::move(catalog))) {
        if (!segments.empty()) store.insert_segments(segments);
    }
};

double scan_fold(const QueryEngine& engine, const QueryPredicate& predicate,
                 AggregateFunction function, std::int64_t* count_out = nullptr) {
    double sum = 0.0, lo = 1e300, hi = -1e300;
    std::int64_t count = 0;
    engine.data_point_scan(predicate, [&](Tid, Timestamp, float v, const TimeSeriesMeta&) {
        sum += v;
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
        ++count;
    });
    if (count_out) *count_out = count;
    switch (function) {
        case AggregateFunction::Count:
            return static_cast<double>(count);
        case AggregateFunction::Min:
            return lo;
        case AggregateFunction::Max:
            return hi;
        case AggregateFunction::Sum:
            return sum;
        case AggregateFunction::Avg:
            return sum / static_cast<double>(count);
    }
    return 0.0;
}

}  // namespace

TEST_CASE("rewriting maps tids and members to group masks") {
    Fixture fx(example_catalog(), {});
    QueryEngine engine(fx.store, default_registry());

    SUBCASE("tid filter") {
        QueryPredicate p;
        p.tids = std::set<Tid>{1};
        const auto r = engine.rewrite(p);
        REQUIRE(r.masks.size() == 1);
        CHECK(r.masks.at(1) == 0b1);
    }
    SUBCASE("member filter covers the whole matching group") {
        QueryPredicate p;
        p.members.push_back({"Location", 3, "Aalborg"});
        const auto r = engine.rewrite(p);
        REQUIRE(r.masks.size() == 1);
        CHECK(r.masks.at(3) == 0b11);  // tids 2 and 3
    }
    SUBCASE("tid and member filters intersect") {
        QueryPredicate p;
        p.tids = std::set<Tid>{3};
        p.members.push_back({"Location", 3, "Aalborg"});
        const auto r = engine.rewrite(p);
        REQUIRE(r.masks.size() == 1);
        CHECK(r.masks.at(3) == 0b10);
    }
    SUBCASE("full scan covers everything") {
        QueryPredicate p;
        p.full_scan = true;
        const auto r = engine.rewrite(p);
        CHECK(r.masks.size() == 2);
        CHECK(r.masks.at(1) == 0b1);
        CHECK(r.masks.at(3) == 0b11);
    }
    SUBCASE("errors") {
        QueryPredicate unknown_tid;
        unknown_tid.tids = std::set<Tid>{99};
        CHECK_THROWS_AS(engine.rewrite(unknown_tid), std::invalid_argument);
        QueryPredicate unknown_member;
        unknown_member.members.push_back({"Location", 3, "Atlantis"});
        CHECK_THROWS_AS(engine.rewrite(unknown_member), std::invalid_argument);
        QueryPredicate unknown_dim;
        unknown_dim.members.push_back({"Nowhere", 1, "x"});
        CHECK_THROWS_AS(engine.rewrite(unknown_dim), std::invalid_argument);
        QueryPredicate empty;
        CHECK_THROWS_AS(engine.rewrite(empty), std::invalid_argument);
    }
}

TEST_CASE("data point scan reconstructs rows with scaling and dimensions") {
    std::vector<Segment> segments;
    segments.push_back(make_segment(1, kMidPmcMean, 0, 120000, 60000, f32le({8.92f})));
    // Group 3: one segment where tid 3 is away, one where both are live.
    segments.push_back(make_segment(3, kMidPmcMean, 0, 60000, 30000, f32le({2.0f}), 0b10));
    segments.push_back(make_segment(3, kMidPmcMean, 90000, 120000, 30000, f32le({3.0f})));
    Fixture fx(example_catalog(), segments);
    QueryEngine engine(fx.store, default_registry());

    SUBCASE("constant model yields constant rows") {
        QueryPredicate p;
        p.tids = std::set<Tid>{1};
        std::vector<float> values;
        engine.data_point_scan(p, [&](Tid tid, Timestamp, float v, const TimeSeriesMeta& meta) {
            CHECK(tid == 1);
            CHECK(meta.members[0][2] == "Farsoe");
            values.push_back(v);
        });
        CHECK(values == std::vector<float>{8.92f, 8.92f, 8.92f});
    }
    SUBCASE("scaling multiplies reconstructed values") {
        QueryPredicate p;
        p.tids = std::set<Tid>{3};
        std::vector<float> values;
        engine.data_point_scan(
            p, [&](Tid, Timestamp, float v, const TimeSeriesMeta&) { values.push_back(v); });
        // tid 3 is absent from the first segment; the second scales 3.0 by 4.75.
        REQUIRE(values.size() == 2);
        CHECK(values[0] == static_cast<float>(3.0f * 4.75));
    }
    SUBCASE("gap bits suppress rows entirely") {
        QueryPredicate p;
        p.tids = std::set<Tid>{3};
        p.time_range = TimeRange{0, 60000};
        std::size_t rows = 0;
        engine.data_point_scan(p,
                               [&](Tid, Timestamp, float, const TimeSeriesMeta&) { ++rows; });
        CHECK(rows == 0);
    }
    SUBCASE("scan never leaks tids outside the predicate") {
        QueryPredicate p;
        p.tids = std::set<Tid>{2};
        engine.data_point_scan(
            p, [&](Tid tid, Timestamp, float, const TimeSeriesMeta&) { CHECK(tid == 2); });
    }
    SUBCASE("time range clips rows") {
        QueryPredicate p;
        p.tids = std::set<Tid>{1};
        p.time_range = TimeRange{60000, 60000};
        std::vector<Timestamp> ts;
        engine.data_point_scan(
            p, [&](Tid, Timestamp t, float, const TimeSeriesMeta&) { ts.push_back(t); });
        CHECK(ts == std::vector<Timestamp>{60000});
    }
}

TEST_CASE("simple aggregates agree with folding the scan") {
    // A store ingested through the real pipeline, mixed models.
    StoreCatalog catalog = example_catalog();
    TempDir dir("query-agg");
    auto store = SegmentStore::create(dir.path(), catalog);

    IngestConfig config;
    config.error = {ErrorMode::Relative, 5.0};

    {
        GroupCompressor comp(make_group(1, {1}, 60000), {1.0}, default_registry(), config);
        SeriesSpec ss;
        ss.regime = SeriesSpec::Regime::Mixed;
        ss.points = 400;
        ss.base = 50.0;
        ss.seed = 7;
        const auto col = synth_series(ss);
        std::vector<std::vector<std::optional<float>>> rows;
        for (const auto& v : col) rows.push_back({v});
        auto segs = run_rows(comp, 0, 60000, rows);
        store.insert_segments(segs);
    }
    {
        GroupCompressor comp(make_group(3, {2, 3}, 30000), {1.0, 4.75}, default_registry(),
                             config);
        SeriesSpec ss;
        ss.regime = SeriesSpec::Regime::Mixed;
        ss.points = 600;
        ss.base = 20.0;
        ss.seed = 8;
        const auto a = synth_series(ss);
        std::vector<std::vector<std::optional<float>>> rows;
        for (const auto& v : a)
            rows.push_back({v, static_cast<float>(*v * 4.75f)});
        auto segs = run_rows(comp, 0, 30000, rows);
        store.insert_segments(segs);
    }

    QueryEngine engine(store, default_registry());
    std::mt19937 rng(99);
    for (int round = 0; round < 40; ++round) {
        QueryPredicate p;
        switch (round % 4) {
            case 0:
                p.tids = std::set<Tid>{1};
                break;
            case 1:
                p.tids = std::set<Tid>{2, 3};
                break;
            case 2:
                p.members.push_back({"Location", 3, "Aalborg"});
                break;
            default:
                p.full_scan = true;
        }
        if (round % 2 == 0) {
            Timestamp a = static_cast<Timestamp>(rng() % 600) * 30000;
            Timestamp b = static_cast<Timestamp>(rng() % 600) * 30000;
            if (a > b) std::swap(a, b);
            p.time_range = TimeRange{a, b};
        }
        for (const auto fn : {AggregateFunction::Count, AggregateFunction::Min,
                              AggregateFunction::Max, AggregateFunction::Sum,
                              AggregateFunction::Avg}) {
            AggregateRequest req;
            req.function = fn;
            const auto rows = engine.simple_aggregate(req, p);
            std::int64_t scan_count = 0;
            const double expect = scan_fold(engine, p, fn, &scan_count);
            if (scan_count == 0) {
                CHECK(rows.empty());
                continue;
            }
            REQUIRE(rows.size() == 1);
            if (fn == AggregateFunction::Count)
                CHECK(rows[0].count == scan_count);
            else
                CHECK(rows[0].value ==
                      doctest::Approx(expect).epsilon(1e-5).scale(std::fabs(expect) + 1.0));
        }
    }

    SUBCASE("grouping by tid splits the totals") {
        QueryPredicate p;
        p.full_scan = true;
        AggregateRequest req;
        req.function = AggregateFunction::Count;
        req.group_by_tid = true;
        const auto rows = engine.simple_aggregate(req, p);
        REQUIRE(rows.size() == 3);
        std::int64_t total = 0;
        for (const auto& r : rows) total += r.count;
        AggregateRequest plain;
        plain.function = AggregateFunction::Count;
        CHECK(engine.simple_aggregate(plain, p)[0].count == total);
    }
    SUBCASE("grouping by member keys on the dimension value") {
        QueryPredicate p;
        p.full_scan = true;
        AggregateRequest req;
        req.function = AggregateFunction::Count;
        req.group_by_member = {{"Location", 3}};
        const auto rows = engine.simple_aggregate(req, p);
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].member.value() == "Aalborg");
        CHECK(rows[1].member.value() == "Farsoe");
    }
}

TEST_CASE("negative scaling swaps the extremes") {
    StoreCatalog catalog = example_catalog();
    catalog.series[0].scaling = -2.0;
    std::vector<Segment> segments{
        make_segment(1, kMidSwing, 0, 600000, 60000, f32le({10.0f, 1e-5f}))};
    Fixture fx(std::move(catalog), std::move(segments));
    QueryEngine engine(fx.store, default_registry());

    QueryPredicate p;
    p.tids = std::set<Tid>{1};
    AggregateRequest req;
    req.function = AggregateFunction::Min;
    const double model_max = 10.0f + 1e-5f * 600000.0;
    const auto min_rows = engine.simple_aggregate(req, p);
    REQUIRE(min_rows.size() == 1);
    CHECK(min_rows[0].value == doctest::Approx(-2.0 * model_max).epsilon(1e-6));
    CHECK(min_rows[0].value == doctest::Approx(scan_fold(engine, p, AggregateFunction::Min))
                                   .epsilon(1e-6));
}

TEST_CASE("hourly roll-up cuts a segment at bucket boundaries") {
    // One segment from 00:13 to 02:48 with a one-minute interval.
    const Timestamp start = 13 * 60000;
    const Timestamp end = (2 * 60 + 48) * 60000;
    std::vector<Segment> segments{
        make_segment(1, kMidSwing, start, end, 60000, f32le({5.0f, 1e-6f}))};
    Fixture fx(example_catalog(), std::move(segments));
    QueryEngine engine(fx.store, default_registry());

    QueryPredicate p;
    p.tids = std::set<Tid>{1};
    AggregateRequest req;
    req.function = AggregateFunction::Sum;
    req.rollup_level = RollupLevel::Hour;
    const auto rows = engine.cube_aggregate(req, p);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].bucket.value() == 0);
    CHECK(rows[1].bucket.value() == kHour);
    CHECK(rows[2].bucket.value() == 2 * kHour);
    CHECK(rows[0].count == 47);  // 00:13 through 00:59
    CHECK(rows[1].count == 60);  // 01:00 through 01:59
    CHECK(rows[2].count == 49);  // 02:00 through 02:48 inclusive

    // Oracle: fold the scan into hourly buckets. The scan rounds every
    // value to float, the closed form does not, hence the tolerance.
    std::map<Timestamp, double> expected;
    engine.data_point_scan(p, [&](Tid, Timestamp t, float v, const TimeSeriesMeta&) {
        expected[floor_to_level(t, RollupLevel::Hour)] += v;
    });
    for (const auto& row : rows)
        CHECK(row.value == doctest::Approx(expected.at(*row.bucket)).epsilon(1e-5));

    SUBCASE("bucket sums partition the simple total") {
        AggregateRequest simple;
        simple.function = AggregateFunction::Sum;
        const double total = engine.simple_aggregate(simple, p)[0].value;
        double bucket_total = 0.0;
        std::int64_t bucket_count = 0;
        for (const auto& row : rows) {
            bucket_total += row.value;
            bucket_count += row.count;
        }
        CHECK(bucket_total == doctest::Approx(total).epsilon(1e-9));
        CHECK(bucket_count == engine.simple_aggregate(
                                  [] {
                                      AggregateRequest r;
                                      r.function = AggregateFunction::Count;
                                      return r;
                                  }(),
                                  p)[0]
                                  .count);
    }
}

TEST_CASE("a segment ending exactly on a boundary keeps its end in the earlier bucket") {
    std::vector<Segment> segments{
        make_segment(1, kMidPmcMean, 0, 2 * kHour, 60000, f32le({1.0f}))};
    Fixture fx(example_catalog(), std::move(segments));
    QueryEngine engine(fx.store, default_registry());
    QueryPredicate p;
    p.tids = std::set<Tid>{1};
    AggregateRequest req;
    req.function = AggregateFunction::Count;
    req.rollup_level = RollupLevel::Hour;
    const auto rows = engine.cube_aggregate(req, p);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].count == 60);
    CHECK(rows[1].count == 61);  // the 02:00 end point joins the 01:00 bucket
}

TEST_CASE("a segment inside one bucket is a single partial") {
    std::vector<Segment> segments{
        make_segment(1, kMidPmcMean, kHour + 60000, kHour + 600000, 60000, f32le({2.5f}))};
    Fixture fx(example_catalog(), std::move(segments));
    QueryEngine engine(fx.store, default_registry());
    QueryPredicate p;
    p.full_scan = true;
    AggregateRequest req;
    req.function = AggregateFunction::Sum;
    req.rollup_level = RollupLevel::Hour;
    const auto rows = engine.cube_aggregate(req, p);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].bucket.value() == kHour);
    AggregateRequest simple;
    simple.function = AggregateFunction::Sum;
    CHECK(rows[0].value == doctest::Approx(engine.simple_aggregate(simple, p)[0].value));
}

TEST_CASE("calendar roll-ups bucket by civil months and years") {
    // 2016-04-12 is in the sample schema rows; use a segment crossing
    // 2016-04-30 to 2016-05-01 (1462060800000) and the 2016/2017 new year.
    const Timestamp may_first_2016 = 1462060800000;
    std::vector<Segment> segments{make_segment(1, kMidPmcMean, may_first_2016 - 2 * 60000,
                                               may_first_2016 + 60000, 60000, f32le({1.0f}))};
    Fixture fx(example_catalog(), std::move(segments));
    QueryEngine engine(fx.store, default_registry());
    QueryPredicate p;
    p.full_scan = true;

    AggregateRequest req;
    req.function = AggregateFunction::Count;
    req.rollup_level = RollupLevel::Month;
    const auto rows = engine.cube_aggregate(req, p);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].count == 2);  // 23:58 and 23:59 in April
    CHECK(rows[1].count == 2);  // 00:00 and 00:01 in May... the end point rule
    CHECK(rows[1].bucket.value() == may_first_2016);

    SUBCASE("year boundaries") {
        CHECK(floor_to_level(may_first_2016, RollupLevel::Year) == 1451606400000);
        CHECK(next_level_boundary(may_first_2016, RollupLevel::Year) == 1483228800000);
        CHECK(floor_to_level(1451606400000 - 1, RollupLevel::Year) == 1420070400000);
    }
}

TEST_CASE("scaling one series scales its aggregates linearly") {
    StoreCatalog catalog = example_catalog();
    std::vector<Segment> segments{
        make_segment(1, kMidSwing, 0, 60 * 60000, 60000, f32le({30.0f, -1e-6f}))};
    TempDir dir("query-scale");
    auto store = SegmentStore::create(dir.path(), catalog);
    store.insert_segments(segments);

    QueryPredicate p;
    p.tids = std::set<Tid>{1};
    const auto run = [&](double scaling, AggregateFunction fn) {
        StoreCatalog edited = catalog;
        edited.series[0].scaling = scaling;
        store.set_catalog(edited);
        QueryEngine engine(store, default_registry());
        AggregateRequest req;
        req.function = fn;
        return engine.simple_aggregate(req, p)[0];
    };

    const double base_sum = run(1.0, AggregateFunction::Sum).value;
    const double base_min = run(1.0, AggregateFunction::Min).value;
    const double base_max = run(1.0, AggregateFunction::Max).value;
    const auto base_count = run(1.0, AggregateFunction::Count).count;

    for (const double c : {3.0, -1.5}) {
        CHECK(run(c, AggregateFunction::Sum).value ==
              doctest::Approx(c * base_sum).epsilon(1e-6));
        CHECK(run(c, AggregateFunction::Count).count == base_count);
        const double lo = run(c, AggregateFunction::Min).value;
        const double hi = run(c, AggregateFunction::Max).value;
        if (c > 0) {
            CHECK(lo == doctest::Approx(c * base_min).epsilon(1e-6));
            CHECK(hi == doctest::Approx(c * base_max).epsilon(1e-6));
        } else {
            CHECK(lo == doctest::Approx(c * base_max).epsilon(1e-6));
            CHECK(hi == doctest::Approx(c * base_min).epsilon(1e-6));
        }
    }
}

TEST_CASE("average error metric") {
    SUBCASE("single point formula") {
        std::vector<Segment> segments{make_segment(1, kMidPmcMean, 0, 0, 60000, f32le({9.9f}))};
        Fixture fx(example_catalog(), std::move(segments));
        QueryEngine engine(fx.store, default_registry());
        std::map<Tid, std::vector<DataPoint>> originals;
        originals[1] = {{0, 10.0f}};
        QueryPredicate p;
        p.full_scan = true;
        CHECK(engine.average_error(originals, p) == doctest::Approx(1.0).epsilon(1e-4));
    }
    SUBCASE("lossless ingest has zero error, lossy stays under epsilon") {
        for (const double epsilon : {0.0, 5.0}) {
            IngestConfig config;
            config.error = {ErrorMode::Relative, epsilon};
            GroupCompressor comp(make_group(1, {1}, 60000), {1.0}, default_registry(), config);
            SeriesSpec ss;
            ss.regime = SeriesSpec::Regime::Mixed;
            ss.points = 300;
            ss.base = 80.0;
            ss.seed = 21;
            const auto col = synth_series(ss);
            std::vector<std::vector<std::optional<float>>> rows;
            std::vector<DataPoint> original;
            for (std::size_t k = 0; k < col.size(); ++k) {
                rows.push_back({col[k]});
                original.push_back({static_cast<Timestamp>(k) * 60000, *col[k]});
            }
            TempDir dir("query-err");
            auto store = SegmentStore::create(dir.path(), example_catalog());
            auto segs = run_rows(comp, 0, 60000, rows);
            store.insert_segments(segs);
            QueryEngine engine(store, default_registry());
            std::map<Tid, std::vector<DataPoint>> originals{{1, original}};
            QueryPredicate p;
            p.tids = std::set<Tid>{1};
            const double err = engine.average_error(originals, p);
            if (epsilon == 0.0)
                CHECK(err == 0.0);
            else
                CHECK(err <= epsilon);
        }
    }
    SUBCASE("missing originals are an error") {
        std::vector<Segment> segments{make_segment(1, kMidPmcMean, 0, 60000, 60000,
                                                   f32le({1.0f}))};
        Fixture fx(example_catalog(), std::move(segments));
        QueryEngine engine(fx.store, default_registry());
        std::map<Tid, std::vector<DataPoint>> originals{{1, {{0, 1.0f}}}};  // second point missing
        QueryPredicate p;
        p.full_scan = true;
        CHECK_THROWS_AS(engine.average_error(originals, p), std::runtime_error);
    }
}

TEST_CASE("cube aggregates match bucketed scan folds on random stores") {
    StoreCatalog catalog = example_catalog();
    TempDir dir("query-cube-rand");
    auto store = SegmentStore::create(dir.path(), catalog);
    IngestConfig config;
    config.error = {ErrorMode::Relative, 2.0};
    GroupCompressor comp(make_group(3, {2, 3}, 30000), {1.0, 4.75}, default_registry(), config);
    SeriesSpec ss;
    ss.regime = SeriesSpec::Regime::Mixed;
    ss.points = 500;
    ss.base = 30.0;
    ss.seed = 4;
    ss.gap_probability = 0.01;
    const auto a = synth_series(ss);
    ss.seed = 5;
    const auto b = synth_series(ss);
    std::vector<std::vector<std::optional<float>>> rows;
    for (std::size_t k = 0; k < 500; ++k) {
        std::optional<float> scaled_b;
        if (b[k]) scaled_b = static_cast<float>(*b[k] * 4.75f);
        rows.push_back({a[k], scaled_b});
    }
    auto segs = run_rows(comp, 0, 30000, rows);
    store.insert_segments(segs);
    QueryEngine engine(store, default_registry());

    QueryPredicate p;
    p.members.push_back({"Location", 3, "Aalborg"});
    AggregateRequest req;
    req.function = AggregateFunction::Sum;
    req.rollup_level = RollupLevel::Hour;
    req.group_by_tid = true;
    const auto rows_out = engine.cube_aggregate(req, p);
    REQUIRE(!rows_out.empty());

    std::map<std::pair<Timestamp, Tid>, double> expected;
    engine.data_point_scan(p, [&](Tid tid, Timestamp t, float v, const TimeSeriesMeta&) {
        expected[{floor_to_level(t, RollupLevel::Hour), tid}] += v;
    });
    REQUIRE(rows_out.size() == expected.size());
    for (const auto& row : rows_out) {
        const double want = expected.at({*row.bucket, *row.tid});
        CHECK(row.value == doctest::Approx(want).epsilon(1e-5));
    }
}
