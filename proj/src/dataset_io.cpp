#include "ssod/dataset_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binio.hpp"

namespace ssod {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const fs::path& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DatasetError("bad number '" + s + "' in " + where.string());
    }
}

long long parse_int(const std::string& s, const fs::path& where) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DatasetError("bad integer '" + s + "' in " + where.string());
    return v;
}

std::ifstream open_in(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw DatasetError("cannot open " + p.string());
    return is;
}

std::ofstream open_out(const fs::path& p, bool binary = false) {
    std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
    if (!os) throw DatasetError("cannot write " + p.string());
    return os;
}

std::string frame_stem(FrameId id) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06lld", static_cast<long long>(id));
    return buf;
}

void write_proposals(const std::vector<Proposal>& proposals, const fs::path& path) {
    auto os = open_out(path);
    const Eigen::Index d = proposals.empty() ? 0 : proposals.front().feature.size();
    os << "proposal_index,xmin,ymin,xmax,ymax,objectness,gt_label";
    for (Eigen::Index i = 0; i < d; ++i) os << ",f" << i;
    os << '\n';
    for (std::size_t k = 0; k < proposals.size(); ++k) {
        const auto& p = proposals[k];
        if (p.feature.size() != d) throw DatasetError("inconsistent feature dimension within a frame");
        os << k << ',' << fmt_double(p.box.xmin) << ',' << fmt_double(p.box.ymin) << ',' << fmt_double(p.box.xmax)
           << ',' << fmt_double(p.box.ymax) << ',' << fmt_double(p.objectness) << ','
           << (p.gt_label ? *p.gt_label : -1);
        for (Eigen::Index i = 0; i < d; ++i) os << ',' << fmt_double(p.feature(i));
        os << '\n';
    }
}

std::vector<Proposal> read_proposals(const fs::path& path, FrameId frame_id) {
    auto is = open_in(path);
    std::string line;
    if (!std::getline(is, line)) throw DatasetError("missing header in " + path.string());
    const auto header = split(line, ',');
    if (header.size() < 7 || header[0] != "proposal_index") throw DatasetError("bad proposals header in " + path.string());
    const std::size_t d = header.size() - 7;
    std::vector<Proposal> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != header.size()) throw DatasetError("wrong field count in " + path.string());
        if (parse_int(f[0], path) != static_cast<long long>(out.size()))
            throw DatasetError("proposal indices out of order in " + path.string());
        Proposal p;
        p.frame_id = frame_id;
        p.box = {parse_double(f[1], path), parse_double(f[2], path), parse_double(f[3], path), parse_double(f[4], path)};
        if (!p.box.valid()) throw DatasetError("degenerate proposal box in " + path.string());
        p.objectness = parse_double(f[5], path);
        const long long label = parse_int(f[6], path);
        if (label >= 0) p.gt_label = label;
        p.feature.resize(Eigen::Index(d));
        for (std::size_t i = 0; i < d; ++i) p.feature(Eigen::Index(i)) = parse_double(f[7 + i], path);
        if (!p.feature.allFinite()) throw DatasetError("non-finite feature in " + path.string());
        out.push_back(std::move(p));
    }
    return out;
}

void write_gt(const std::vector<GtBox>& gt, const fs::path& path) {
    auto os = open_out(path);
    os << "xmin,ymin,xmax,ymax,instance_id\n";
    for (const auto& g : gt)
        os << fmt_double(g.box.xmin) << ',' << fmt_double(g.box.ymin) << ',' << fmt_double(g.box.xmax) << ','
           << fmt_double(g.box.ymax) << ',' << g.instance_id << '\n';
}

std::vector<GtBox> read_gt(const fs::path& path) {
    auto is = open_in(path);
    std::string line;
    if (!std::getline(is, line) || line != "xmin,ymin,xmax,ymax,instance_id")
        throw DatasetError("bad gt header in " + path.string());
    std::vector<GtBox> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 5) throw DatasetError("wrong field count in " + path.string());
        out.push_back(GtBox{{parse_double(f[0], path), parse_double(f[1], path), parse_double(f[2], path),
                             parse_double(f[3], path)},
                            parse_int(f[4], path)});
    }
    return out;
}

json intrinsics_json(const Intrinsics& K) {
    return json{{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}};
}

}  // namespace

std::string Dataset::category_of(InstanceId id) const {
    for (const auto& o : objects)
        if (o.instance_id == id) return o.category;
    return "unknown";
}

void write_point_cloud(const PointCloud& cloud, const fs::path& path) {
    auto os = open_out(path, true);
    binio::put_magic(os, "SSPC");
    binio::put<std::uint64_t>(os, cloud.size());
    for (const auto& p : cloud)
        for (int a = 0; a < 3; ++a) binio::put<float>(os, static_cast<float>(p(a)));
    if (!os) throw DatasetError("failed writing " + path.string());
}

PointCloud read_point_cloud(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetError("cannot open " + path.string());
    try {
        binio::expect_magic(is, "SSPC");
        const auto n = binio::get<std::uint64_t>(is);
        if (n > (std::uint64_t(1) << 32)) throw DatasetError("implausible point count in " + path.string());
        PointCloud cloud;
        cloud.reserve(std::size_t(n));
        for (std::uint64_t i = 0; i < n; ++i) {
            Eigen::Vector3d p;
            for (int a = 0; a < 3; ++a) p(a) = binio::get<float>(is);
            if (!p.allFinite()) throw DatasetError("non-finite point in " + path.string());
            cloud.push_back(p);
        }
        return cloud;
    } catch (const DatasetError&) {
        throw;
    } catch (const std::exception& e) {
        throw DatasetError(path.string() + ": " + e.what());
    }
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "frames", ec);
    if (ec) throw DatasetError("cannot create " + (dir / "frames").string() + ": " + ec.message());

    json manifest;
    manifest["version"] = kManifestVersion;
    manifest["conventions"] =
        "right-handed; camera x right, y down, z forward; pose (R, t) maps camera to world; clouds in camera "
        "coordinates, meters; pixel origin top-left";
    manifest["intrinsics"] = intrinsics_json(ds.intrinsics);
    json objects = json::array();
    for (const auto& o : ds.objects) objects.push_back({{"instance_id", o.instance_id}, {"category", o.category}});
    manifest["objects"] = objects;
    json frames = json::array();
    for (const auto& f : ds.frames) {
        const std::string stem = frame_stem(f.id);
        json rec;
        rec["frame_id"] = f.id;
        rec["location_id"] = f.location_id;
        json R = json::array();
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) R.push_back(f.pose.R(r, c));
        rec["R"] = R;
        rec["t"] = {f.pose.t.x(), f.pose.t.y(), f.pose.t.z()};
        rec["cloud"] = "frames/" + stem + ".cloud";
        rec["proposals"] = "frames/" + stem + "_proposals.csv";
        rec["gt"] = "frames/" + stem + "_gt.csv";
        frames.push_back(rec);

        write_point_cloud(f.cloud, dir / "frames" / (stem + ".cloud"));
        write_proposals(f.proposals, dir / "frames" / (stem + "_proposals.csv"));
        write_gt(f.gt_boxes, dir / "frames" / (stem + "_gt.csv"));
    }
    manifest["frames"] = frames;
    auto os = open_out(dir / "manifest.json");
    os << manifest.dump(2) << '\n';
}

Dataset read_dataset(const fs::path& dir) {
    json manifest;
    try {
        auto is = open_in(dir / "manifest.json");
        manifest = json::parse(is);
    } catch (const json::exception& e) {
        throw DatasetError("manifest parse error: " + std::string(e.what()));
    }
    try {
        if (manifest.at("version").get<int>() != kManifestVersion) throw DatasetError("unsupported manifest version");
        Dataset ds;
        const auto& k = manifest.at("intrinsics");
        ds.intrinsics = Intrinsics{k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                                   k.at("cy").get<double>(), k.at("width").get<int>(), k.at("height").get<int>()};
        ds.intrinsics.validate();
        for (const auto& o : manifest.at("objects"))
            ds.objects.push_back({o.at("instance_id").get<InstanceId>(), o.at("category").get<std::string>()});

        std::set<FrameId> seen;
        for (const auto& rec : manifest.at("frames")) {
            Frame f;
            f.id = rec.at("frame_id").get<FrameId>();
            if (!seen.insert(f.id).second) throw DatasetError("duplicate frame id " + std::to_string(f.id));
            f.location_id = rec.at("location_id").get<std::int64_t>();
            const auto R = rec.at("R").get<std::vector<double>>();
            const auto t = rec.at("t").get<std::vector<double>>();
            if (R.size() != 9 || t.size() != 3) throw DatasetError("bad pose shape for frame " + std::to_string(f.id));
            Eigen::Matrix3d Rm;
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) Rm(r, c) = R[std::size_t(r * 3 + c)];
            try {
                f.pose = CameraPose::checked(Rm, Eigen::Vector3d(t[0], t[1], t[2]), 1e-6);
            } catch (const GeometryError& e) {
                throw DatasetError("frame " + std::to_string(f.id) + ": " + e.what());
            }
            f.intrinsics = ds.intrinsics;
            f.cloud = read_point_cloud(dir / rec.at("cloud").get<std::string>());
            f.proposals = read_proposals(dir / rec.at("proposals").get<std::string>(), f.id);
            f.gt_boxes = read_gt(dir / rec.at("gt").get<std::string>());
            ds.frames.push_back(std::move(f));
        }
        return ds;
    } catch (const json::exception& e) {
        throw DatasetError("manifest schema error: " + std::string(e.what()));
    }
}

void write_matches(const std::vector<MatchPair>& matches, const fs::path& path) {
    auto os = open_out(path);
    os << "# frame_a\tindex_a\tframe_b\tindex_b\tiou\n";
    for (const auto& m : matches)
        os << m.a.frame_id << '\t' << m.a.index << '\t' << m.b.frame_id << '\t' << m.b.index << '\t'
           << fmt_double(m.iou_score) << '\n';
}

std::vector<MatchPair> read_matches(const fs::path& path) {
    auto is = open_in(path);
    std::string line;
    std::vector<MatchPair> out;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto f = split(line, '\t');
        if (f.size() != 5) throw DatasetError("wrong field count in " + path.string());
        out.push_back(MatchPair{{parse_int(f[0], path), std::size_t(parse_int(f[1], path))},
                                {parse_int(f[2], path), std::size_t(parse_int(f[3], path))},
                                parse_double(f[4], path)});
    }
    return out;
}

void write_triplets(const std::vector<Triplet>& triplets, const fs::path& path) {
    auto os = open_out(path);
    os << "# anchor_frame\tanchor_index\tpositive_frame\tpositive_index\tnegative_frame\tnegative_index\n";
    for (const auto& t : triplets)
        os << t.anchor.frame_id << '\t' << t.anchor.index << '\t' << t.positive.frame_id << '\t' << t.positive.index
           << '\t' << t.negative.frame_id << '\t' << t.negative.index << '\n';
}

std::vector<Triplet> read_triplets(const fs::path& path) {
    auto is = open_in(path);
    std::string line;
    std::vector<Triplet> out;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto f = split(line, '\t');
        if (f.size() != 6) throw DatasetError("wrong field count in " + path.string());
        auto ref = [&](int i) { return ProposalRef{parse_int(f[std::size_t(i)], path), std::size_t(parse_int(f[std::size_t(i + 1)], path))}; };
        out.push_back(Triplet{ref(0), ref(2), ref(4)});
    }
    return out;
}

void write_clusters(const std::vector<Cluster>& clusters, const std::vector<ProposalRef>& refs, const fs::path& path) {
    auto os = open_out(path);
    os << "# cluster_id\tframe_id\tproposal_index\n";
    for (const auto& c : clusters)
        for (std::size_t m : c.members) os << c.id << '\t' << refs.at(m).frame_id << '\t' << refs.at(m).index << '\n';
}

void write_embeddings(const EmbeddingTable& table, const fs::path& path) {
    if (table.values.cols() != Eigen::Index(table.refs.size())) throw DatasetError("embedding table shape mismatch");
    auto os = open_out(path, true);
    binio::put_magic(os, "SSEB");
    binio::put<std::uint32_t>(os, 1);
    binio::put<std::uint64_t>(os, std::uint64_t(table.values.rows()));
    binio::put<std::uint64_t>(os, table.refs.size());
    for (const auto& r : table.refs) {
        binio::put<std::int64_t>(os, r.frame_id);
        binio::put<std::uint64_t>(os, r.index);
    }
    for (Eigen::Index c = 0; c < table.values.cols(); ++c)
        for (Eigen::Index r = 0; r < table.values.rows(); ++r) binio::put<double>(os, table.values(r, c));
}

EmbeddingTable read_embeddings(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DatasetError("cannot open " + path.string());
    try {
        binio::expect_magic(is, "SSEB");
        if (binio::get<std::uint32_t>(is) != 1) throw DatasetError("unsupported embeddings version");
        const auto dim = binio::get<std::uint64_t>(is);
        const auto n = binio::get<std::uint64_t>(is);
        if (dim > (1u << 16) || n > (std::uint64_t(1) << 28)) throw DatasetError("implausible embedding table size");
        EmbeddingTable t;
        for (std::uint64_t i = 0; i < n; ++i) {
            const auto f = binio::get<std::int64_t>(is);
            const auto idx = binio::get<std::uint64_t>(is);
            t.refs.push_back({f, std::size_t(idx)});
        }
        t.values.resize(Eigen::Index(dim), Eigen::Index(n));
        for (Eigen::Index c = 0; c < t.values.cols(); ++c)
            for (Eigen::Index r = 0; r < t.values.rows(); ++r) t.values(r, c) = binio::get<double>(is);
        return t;
    } catch (const DatasetError&) {
        throw;
    } catch (const std::exception& e) {
        throw DatasetError(path.string() + ": " + e.what());
    }
}

}  // namespace ssod
