#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>

#include "golemm/model_types.hpp"
#include "golemm/store.hpp"
#include "test_util.hpp"

using namespace golemm;
using namespace golemm::testutil;

namespace {

TimeSeriesMeta meta_row(Tid tid, Gid gid, double scaling, Timestamp si,
                        std::vector<std::string> location) {
    TimeSeriesMeta m;
    m.tid = tid;
    m.gid = gid;
    m.scaling = scaling;
    m.si = si;
    m.source = "series" + std::to_string(tid) + ".csv";
    m.members = {std::move(location)};
    return m;
}

// The catalog of the running example: one singleton group and one pair
// of collocated series sampled twice as fast.
StoreCatalog example_catalog() {
    StoreCatalog catalog;
    catalog.dimensions = {{"Location", {"Country", "Region", "Park", "Entity"}}};
    catalog.series.push_back(
        meta_row(1, 1, 1.0, 60000, {"Denmark", "Nordjylland", "Farsoe", "9572"}));
    catalog.series.push_back(
        meta_row(2, 3, 1.0, 30000, {"Denmark", "Nordjylland", "Aalborg", "9632"}));
    catalog.series.push_back(
        meta_row(3, 3, 4.75, 30000, {"Denmark", "Nordjylland", "Aalborg", "9634"}));
    for (const auto& d : default_registry().descriptors())
        catalog.model_names[d.mid] = d.name;
    return catalog;
}

Segment sample_segment(Gid gid, Timestamp end, Timestamp si, std::uint64_t gaps,
                       std::uint8_t mid, std::vector<std::uint8_t> payload,
                       std::int64_t size = 7) {
    Segment s;
    s.gid = gid;
    s.end_time = end;
    s.si = si;
    s.start_time = recompute_start_time(end, size, si);
    s.gaps = gaps;
    s.mid = mid;
    s.payload = std::move(payload);
    return s;
}

}  // namespace

TEST_CASE("insert and query round-trip segments byte for byte") {
    TempDir dir("store-roundtrip");
    auto store = SegmentStore::create(dir.path(), example_catalog());

    std::vector<Segment> batch;
    batch.push_back(sample_segment(1, 1460442620000, 60000, 0b0, 1, {0xc0, 0xcf, 0x50, 0x3f}));
    batch.push_back(sample_segment(3, 1460645080000, 30000, 0b01, 2,
                                   {0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x08}));
    CHECK(store.insert_segments(batch) == 2);

    const auto one = store.query_segments({1});
    REQUIRE(one.size() == 1);
    CHECK(one[0].payload == batch[0].payload);
    CHECK(one[0].start_time == 1460442620000 - 7 * 60000);
    CHECK(one[0].si == 60000);

    SUBCASE("segments survive reopening the directory") {
        auto reopened = SegmentStore::open(dir.path());
        const auto all = reopened.query_segments({1, 3});
        REQUIRE(all.size() == 2);
        CHECK(all[0].payload == batch[0].payload);
        CHECK(all[1].payload == batch[1].payload);
        CHECK(all[1].gaps == 0b01);
        CHECK(all[1].start_time == batch[1].start_time);
    }
}

TEST_CASE("duplicate primary keys are rejected") {
    TempDir dir("store-dup");
    auto store = SegmentStore::create(dir.path(), example_catalog());
    const auto seg = sample_segment(1, 5000, 60000, 0, 1, {1, 2, 3, 4}, 0);
    std::vector<Segment> batch{seg};
    CHECK(store.insert_segments(batch) == 1);

    SUBCASE("across batches") {
        CHECK_THROWS_AS(store.insert_segments(batch), std::invalid_argument);
    }
    SUBCASE("within one batch") {
        auto other = sample_segment(1, 6000, 60000, 0, 1, {9, 9, 9, 9}, 0);
        std::vector<Segment> bad{other, other};
        CHECK_THROWS_AS(store.insert_segments(bad), std::invalid_argument);
        // The failed batch must not have been persisted at all.
        CHECK(store.segment_count() == 1);
        CHECK(SegmentStore::open(dir.path()).segment_count() == 1);
    }
    SUBCASE("same end time with different gap bits is a distinct key") {
        auto split_a = sample_segment(3, 7000, 30000, 0b01, 1, {1, 1, 1, 1}, 0);
        auto split_b = sample_segment(3, 7000, 30000, 0b10, 1, {2, 2, 2, 2}, 0);
        std::vector<Segment> pair{split_a, split_b};
        CHECK(store.insert_segments(pair) == 2);
    }
}

TEST_CASE("segments referencing unknown groups are rejected") {
    TempDir dir("store-gid");
    auto store = SegmentStore::create(dir.path(), example_catalog());
    std::vector<Segment> bad{sample_segment(42, 1000, 60000, 0, 1, {1, 2, 3, 4}, 0)};
    CHECK_THROWS_AS(store.insert_segments(bad), std::invalid_argument);
}

TEST_CASE("query push-down matches a full-scan filter") {
    TempDir dir("store-pushdown");
    auto store = SegmentStore::create(dir.path(), example_catalog());

    std::mt19937 rng(13);
    std::vector<Segment> all;
    for (int i = 0; i < 200; ++i) {
        const Gid gid = rng() % 2 == 0 ? 1 : 3;
        const Timestamp si = gid == 1 ? 60000 : 30000;
        const auto size = static_cast<std::int64_t>(rng() % 20);
        const Timestamp end = 1'000'000 + static_cast<Timestamp>(rng() % 500) * si;
        auto seg = sample_segment(gid, end, si, rng() % 3, 1,
                                  {static_cast<std::uint8_t>(i), 2, 3, 4}, size);
        if (std::any_of(all.begin(), all.end(), [&](const Segment& s) {
                return s.gid == seg.gid && s.end_time == seg.end_time && s.gaps == seg.gaps;
            }))
            continue;
        all.push_back(seg);
    }
    store.insert_segments(all);

    for (int round = 0; round < 30; ++round) {
        const std::set<Gid> gids = round % 3 == 0 ? std::set<Gid>{1}
                                  : round % 3 == 1 ? std::set<Gid>{3}
                                                   : std::set<Gid>{1, 3};
        std::optional<TimeRange> range;
        if (round % 2 == 0) {
            Timestamp a = 1'000'000 + static_cast<Timestamp>(rng() % 500) * 30000;
            Timestamp b = 1'000'000 + static_cast<Timestamp>(rng() % 500) * 30000;
            if (a > b) std::swap(a, b);
            range = TimeRange{a, b};
        }
        const auto got = store.query_segments(gids, range);

        // Oracle: filter everything, then sort by the primary key.
        std::vector<Segment> expect;
        for (const auto& s : all) {
            if (!gids.count(s.gid)) continue;
            if (range && (s.end_time < range->from || s.start_time > range->to)) continue;
            expect.push_back(s);
        }
        std::sort(expect.begin(), expect.end(), [](const Segment& a, const Segment& b) {
            return std::tie(a.gid, a.end_time, a.gaps) < std::tie(b.gid, b.end_time, b.gaps);
        });
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].gid == expect[i].gid);
            CHECK(got[i].end_time == expect[i].end_time);
            CHECK(got[i].gaps == expect[i].gaps);
            CHECK(got[i].payload == expect[i].payload);
        }
    }

    SUBCASE("a range before all data yields nothing") {
        CHECK(store.query_segments({1, 3}, TimeRange{0, 999}).empty());
    }
    SUBCASE("a range clipping a segment interior returns the whole segment") {
        const auto seg = store.query_segments({1}).front();
        const Timestamp mid = (seg.start_time + seg.end_time) / 2;
        const auto got = store.query_segments({1}, TimeRange{mid, mid});
        bool found = false;
        for (const auto& s : got)
            if (s.end_time == seg.end_time && s.gaps == seg.gaps) {
                found = true;
                CHECK(s.start_time == seg.start_time);
                CHECK(s.payload == seg.payload);
            }
        CHECK(found);
    }
    SUBCASE("empty gid set is a usage error") {
        CHECK_THROWS_AS(store.query_segments({}), std::invalid_argument);
    }
}

TEST_CASE("catalog text round-trips exactly") {
    const auto catalog = example_catalog();
    const std::string series = catalog_to_tsv(catalog);
    const std::string models = models_to_tsv(catalog);
    const StoreCatalog back = catalog_from_tsv(series, models);
    CHECK(catalog_to_tsv(back) == series);
    CHECK(models_to_tsv(back) == models);

    REQUIRE(back.series.size() == 3);
    CHECK(back.series[2].scaling == 4.75);
    CHECK(back.series[2].members[0][2] == "Aalborg");
    CHECK(back.dimensions.size() == 1);
    CHECK(back.dimensions[0].level_count() == 4);

    // The model registry rows of the storage schema.
    CHECK(back.model_names.at(1) == "pmc_mean");
    CHECK(back.model_names.at(2) == "swing");
    CHECK(back.model_names.at(3) == "gorilla");

    SUBCASE("groups are derived with ascending-tid positions") {
        const auto groups = back.groups();
        REQUIRE(groups.size() == 2);
        CHECK(groups[0].gid == 1);
        CHECK(groups[1].gid == 3);
        CHECK(groups[1].tids == std::vector<Tid>{2, 3});
        CHECK(groups[1].si == 30000);
    }
    SUBCASE("id counters continue after the maximum") {
        CHECK(back.next_tid() == 4);
        CHECK(back.next_gid() == 4);
    }
}

TEST_CASE("store files round-trip and reject corruption") {
    TempDir dir("store-files");
    {
        auto store = SegmentStore::create(dir.path(), example_catalog());
        std::vector<Segment> batch{sample_segment(1, 9000, 60000, 0, 1, {1, 2, 3, 4}, 0)};
        store.insert_segments(batch);
    }
    const auto catalog_bytes = read_binary(dir.path() / "catalog.tsv");
    {
        auto store = SegmentStore::open(dir.path());
        store.save_catalog();
    }
    CHECK(read_binary(dir.path() / "catalog.tsv") == catalog_bytes);

    SUBCASE("empty store loads an empty catalog") {
        TempDir empty("store-empty");
        SegmentStore::create(empty.path(), StoreCatalog{});
        auto store = SegmentStore::open(empty.path());
        CHECK(store.catalog().series.empty());
        CHECK(store.segment_count() == 0);
    }
    SUBCASE("bad magic") {
        write_text_file(dir.path() / "segments-9.bin", "not a segment file");
        CHECK_THROWS_WITH_AS(SegmentStore::open(dir.path()),
                             doctest::Contains("not a segment file"), std::runtime_error);
    }
    SUBCASE("unsupported version") {
        std::string blob = "MMGC";
        blob.push_back(2);  // version 2 little-endian
        blob.push_back(0);
        write_text_file(dir.path() / "segments-9.bin", blob);
        CHECK_THROWS_WITH_AS(SegmentStore::open(dir.path()),
                             doctest::Contains("unsupported format version"),
                             std::runtime_error);
    }
    SUBCASE("truncated record") {
        std::string blob = "MMGC";
        blob.push_back(1);
        blob.push_back(0);
        blob += "abc";
        write_text_file(dir.path() / "segments-9.bin", blob);
        CHECK_THROWS_AS(SegmentStore::open(dir.path()), std::runtime_error);
    }
}

TEST_CASE("numbered batch files keep parallel writers deterministic") {
    TempDir dir("store-numbered");
    auto store = SegmentStore::create(dir.path(), example_catalog());
    std::vector<Segment> a{sample_segment(1, 1000, 60000, 0, 1, {1, 1, 1, 1}, 0)};
    std::vector<Segment> b{sample_segment(3, 2000, 30000, 0, 1, {2, 2, 2, 2}, 0)};
    store.insert_segments_numbered(0, a);
    store.insert_segments_numbered(2, b);
    CHECK(std::filesystem::exists(dir.path() / "segments-0.bin"));
    CHECK(std::filesystem::exists(dir.path() / "segments-2.bin"));
    // The automatic sequence continues past the highest used number.
    std::vector<Segment> c{sample_segment(1, 3000, 60000, 0, 1, {3, 3, 3, 3}, 0)};
    store.insert_segments(c);
    CHECK(std::filesystem::exists(dir.path() / "segments-3.bin"));
    CHECK(SegmentStore::open(dir.path()).segment_count() == 3);
}
