#include "golemm/store.hpp"

#include <algorithm>
#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include <unistd.h>

#include "golemm/bits.hpp"

namespace golemm {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'G', 'C'};
constexpr std::uint16_t kFormatVersion = 1;

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string data;
    char buf[65536];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) data.append(buf, n);
    std::fclose(f);
    return data;
}

void write_file_durable(const std::filesystem::path& path, const void* data, std::size_t size) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot create " + path.string());
    if (size > 0 && std::fwrite(data, 1, size, f) != size) {
        std::fclose(f);
        throw std::runtime_error("short write to " + path.string());
    }
    std::fflush(f);
    ::fsync(::fileno(f));
    std::fclose(f);
}

}  // namespace

const TimeSeriesMeta& StoreCatalog::by_tid(Tid tid) const {
    for (const auto& m : series)
        if (m.tid == tid) return m;
    throw std::out_of_range("unknown tid " + std::to_string(tid));
}

bool StoreCatalog::has_tid(Tid tid) const {
    for (const auto& m : series)
        if (m.tid == tid) return true;
    return false;
}

std::vector<TimeSeriesGroup> StoreCatalog::groups() const {
    std::map<Gid, TimeSeriesGroup> by_gid;
    for (const auto& m : series) {
        auto& g = by_gid[m.gid];
        g.gid = m.gid;
        g.si = m.si;
        g.tids.push_back(m.tid);
    }
    std::vector<TimeSeriesGroup> out;
    for (auto& [gid, g] : by_gid) {
        std::sort(g.tids.begin(), g.tids.end());
        out.push_back(std::move(g));
    }
    return out;
}

Tid StoreCatalog::next_tid() const {
    Tid n = 1;
    for (const auto& m : series) n = std::max(n, m.tid + 1);
    return n;
}

Gid StoreCatalog::next_gid() const {
    Gid n = 1;
    for (const auto& m : series) n = std::max(n, m.gid + 1);
    return n;
}

std::string catalog_to_tsv(const StoreCatalog& catalog) {
    std::ostringstream out;
    out << "tid\tgid\tscaling\tsi\tsource";
    for (const auto& dim : catalog.dimensions)
        for (const auto& level : dim.level_names) out << '\t' << dim.name << ':' << level;
    out << '\n';
    for (const auto& m : catalog.series) {
        out << m.tid << '\t' << m.gid << '\t' << format_double(m.scaling) << '\t' << m.si << '\t'
            << m.source;
        for (const auto& chain : m.members)
            for (const auto& member : chain) out << '\t' << member;
        out << '\n';
    }
    return out.str();
}

std::string models_to_tsv(const StoreCatalog& catalog) {
    std::ostringstream out;
    out << "mid\tname\n";
    for (const auto& [mid, name] : catalog.model_names)
        out << static_cast<int>(mid) << '\t' << name << '\n';
    return out.str();
}

StoreCatalog catalog_from_tsv(const std::string& series_tsv, const std::string& models_tsv) {
    StoreCatalog catalog;
    std::istringstream in(series_tsv);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("catalog is missing its header row");
    auto header = split_tabs(line);
    if (header.size() < 5 || header[0] != "tid" || header[1] != "gid" || header[2] != "scaling" ||
        header[3] != "si" || header[4] != "source")
        throw std::runtime_error("corrupt catalog header");
    // Dimension columns are named dimension:level, grouped left to right.
    std::vector<std::pair<std::size_t, std::size_t>> column_map;  // (dim, level-1)
    for (std::size_t c = 5; c < header.size(); ++c) {
        const auto colon = header[c].find(':');
        if (colon == std::string::npos)
            throw std::runtime_error("dimension column '" + header[c] + "' must be dim:level");
        const std::string dim = header[c].substr(0, colon);
        const std::string level = header[c].substr(colon + 1);
        if (catalog.dimensions.empty() || catalog.dimensions.back().name != dim) {
            for (const auto& d : catalog.dimensions)
                if (d.name == dim)
                    throw std::runtime_error("dimension columns for '" + dim +
                                             "' are not contiguous");
            catalog.dimensions.push_back({dim, {}});
        }
        catalog.dimensions.back().level_names.push_back(level);
        column_map.emplace_back(catalog.dimensions.size() - 1,
                                catalog.dimensions.back().level_names.size() - 1);
    }
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_tabs(line);
        if (cells.size() != header.size())
            throw std::runtime_error("catalog row " + std::to_string(line_no) + " has " +
                                     std::to_string(cells.size()) + " cells, expected " +
                                     std::to_string(header.size()));
        TimeSeriesMeta m;
        try {
            m.tid = std::stoi(cells[0]);
            m.gid = std::stoi(cells[1]);
            m.scaling = std::stod(cells[2]);
            m.si = std::stoll(cells[3]);
        } catch (const std::exception&) {
            throw std::runtime_error("corrupt catalog row " + std::to_string(line_no));
        }
        m.source = cells[4];
        m.members.resize(catalog.dimensions.size());
        for (std::size_t d = 0; d < catalog.dimensions.size(); ++d)
            m.members[d].resize(catalog.dimensions[d].level_names.size());
        for (std::size_t c = 0; c < column_map.size(); ++c)
            m.members[column_map[c].first][column_map[c].second] = cells[5 + c];
        catalog.series.push_back(std::move(m));
    }

    std::istringstream models(models_tsv);
    if (!std::getline(models, line) || line != "mid\tname")
        throw std::runtime_error("corrupt model registry header");
    while (std::getline(models, line)) {
        if (line.empty()) continue;
        const auto cells = split_tabs(line);
        if (cells.size() != 2) throw std::runtime_error("corrupt model registry row");
        catalog.model_names[static_cast<std::uint8_t>(std::stoi(cells[0]))] = cells[1];
    }
    return catalog;
}

SegmentStore SegmentStore::create(const std::filesystem::path& dir, StoreCatalog catalog) {
    std::filesystem::create_directories(dir);
    SegmentStore store(dir);
    store.catalog_ = std::move(catalog);
    store.save_catalog();
    return store;
}

SegmentStore SegmentStore::open(const std::filesystem::path& dir) {
    SegmentStore store(dir);
    store.catalog_ = catalog_from_tsv(read_file(dir / "catalog.tsv"),
                                      read_file(dir / "model_types.tsv"));
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.starts_with("segments-") && name.ends_with(".bin")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) store.load_segments_file(f);
    return store;
}

void SegmentStore::set_catalog(StoreCatalog catalog) {
    std::lock_guard lock(*mutex_);
    catalog_ = std::move(catalog);
}

void SegmentStore::save_catalog() const {
    const std::string series = catalog_to_tsv(catalog_);
    const std::string models = models_to_tsv(catalog_);
    write_file_durable(dir_ / "catalog.tsv", series.data(), series.size());
    write_file_durable(dir_ / "model_types.tsv", models.data(), models.size());
}

std::size_t SegmentStore::insert_segments(std::span<const Segment> batch) {
    std::uint64_t seq;
    {
        std::lock_guard lock(*mutex_);
        seq = next_file_seq_;
    }
    return insert_segments_numbered(seq, batch);
}

std::size_t SegmentStore::insert_segments_numbered(std::uint64_t file_seq,
                                                   std::span<const Segment> batch) {
    if (batch.empty()) return 0;

    std::vector<std::uint8_t> blob;
    blob.insert(blob.end(), kMagic, kMagic + 4);
    put_u16_le(blob, kFormatVersion);

    {
        std::lock_guard lock(*mutex_);
        std::set<PrimaryKey> batch_keys;
        for (const auto& seg : batch) {
            bool known_gid = false;
            for (const auto& m : catalog_.series)
                if (m.gid == seg.gid) known_gid = true;
            if (!known_gid)
                throw std::invalid_argument("segment references unknown gid " +
                                            std::to_string(seg.gid));
            const PrimaryKey key{seg.gid, seg.end_time, seg.gaps};
            if (keys_.count(key) || !batch_keys.insert(key).second)
                throw std::invalid_argument(
                    "duplicate segment key (gid " + std::to_string(seg.gid) + ", end " +
                    std::to_string(seg.end_time) + ", gaps " + std::to_string(seg.gaps) + ")");
        }

        for (const auto& seg : batch) {
            put_u32_le(blob, static_cast<std::uint32_t>(seg.gid));
            put_u64_le(blob, static_cast<std::uint64_t>(seg.end_time));
            put_u32_le(blob, static_cast<std::uint32_t>(seg.size()));
            put_u64_le(blob, seg.gaps);
            blob.push_back(seg.mid);
            put_u32_le(blob, static_cast<std::uint32_t>(seg.payload.size()));
            blob.insert(blob.end(), seg.payload.begin(), seg.payload.end());
        }

        char name[32];
        std::snprintf(name, sizeof name, "segments-%" PRIu64 ".bin", file_seq);
        write_file_durable(dir_ / name, blob.data(), blob.size());

        for (const auto& seg : batch) {
            keys_.insert({seg.gid, seg.end_time, seg.gaps});
            segments_.push_back(seg);
        }
        file_bytes_ += blob.size();
        next_file_seq_ = std::max(next_file_seq_, file_seq + 1);
    }
    return batch.size();
}

void SegmentStore::load_segments_file(const std::filesystem::path& file) {
    const std::string data = read_file(file);
    if (data.size() < 6 || std::memcmp(data.data(), kMagic, 4) != 0)
        throw std::runtime_error(file.string() + ": not a segment file");
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(data.data());
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kFormatVersion)
        throw std::runtime_error(file.string() + ": unsupported format version " +
                                 std::to_string(version));

    std::map<Gid, Timestamp> si_by_gid;
    for (const auto& m : catalog_.series) si_by_gid[m.gid] = m.si;

    std::size_t pos = 6;
    const std::size_t end = data.size();
    while (pos < end) {
        if (pos + 29 > end) throw std::runtime_error(file.string() + ": truncated record");
        Segment seg;
        seg.gid = static_cast<Gid>(get_u32_le(bytes + pos));
        seg.end_time = static_cast<Timestamp>(get_u64_le(bytes + pos + 4));
        const std::uint32_t size = get_u32_le(bytes + pos + 12);
        seg.gaps = get_u64_le(bytes + pos + 16);
        seg.mid = bytes[pos + 24];
        const std::uint32_t payload_len = get_u32_le(bytes + pos + 25);
        pos += 29;
        if (pos + payload_len > end) throw std::runtime_error(file.string() + ": truncated payload");
        seg.payload.assign(bytes + pos, bytes + pos + payload_len);
        pos += payload_len;
        const auto si = si_by_gid.find(seg.gid);
        if (si == si_by_gid.end())
            throw std::runtime_error(file.string() + ": segment references unknown gid " +
                                     std::to_string(seg.gid));
        seg.si = si->second;
        seg.start_time = recompute_start_time(seg.end_time, size, seg.si);
        const PrimaryKey key{seg.gid, seg.end_time, seg.gaps};
        if (!keys_.insert(key).second)
            throw std::runtime_error(file.string() + ": duplicate segment key on disk");
        segments_.push_back(std::move(seg));
    }

    std::uint64_t seq = 0;
    if (std::sscanf(file.filename().string().c_str(), "segments-%" SCNu64 ".bin", &seq) == 1)
        next_file_seq_ = std::max(next_file_seq_, seq + 1);
    file_bytes_ += data.size();
}

std::vector<Segment> SegmentStore::query_segments(const std::set<Gid>& gids,
                                                  const std::optional<TimeRange>& range) const {
    if (gids.empty()) throw std::invalid_argument("query requires at least one gid");
    std::vector<Segment> out;
    {
        std::lock_guard lock(*mutex_);
        for (const auto& seg : segments_) {
            if (!gids.count(seg.gid)) continue;
            if (range && (seg.end_time < range->from || seg.start_time > range->to)) continue;
            out.push_back(seg);
        }
    }
    std::sort(out.begin(), out.end(), [](const Segment& a, const Segment& b) {
        return std::tie(a.gid, a.end_time, a.gaps) < std::tie(b.gid, b.end_time, b.gaps);
    });
    return out;
}

std::size_t SegmentStore::segment_count() const {
    std::lock_guard lock(*mutex_);
    return segments_.size();
}

}  // namespace golemm
