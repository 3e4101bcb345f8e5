// Acceptance checks for the whole system. Prints one PASS or FAIL line per
// criterion and exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <json.hpp>

#include "ssod/association.hpp"
#include "ssod/detection.hpp"
#include "ssod/discovery.hpp"
#include "ssod/geometry.hpp"
#include "ssod/metriclearn.hpp"
#include "ssod/pipeline.hpp"
#include "ssod/scenesim.hpp"

using namespace ssod;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Geometry oracles

Eigen::Vector3d unproject(const Intrinsics& K, const Eigen::Vector2d& px, double z) {
    return {(px.x() - K.cx) / K.fx * z, (px.y() - K.cy) / K.fy * z, z};
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized().toRotationMatrix();
}

Outcome geometry_oracles() {
    const auto start = Clock::now();
    std::vector<std::string> failed;
    auto expect = [&](bool ok, const char* what) {
        if (!ok) failed.emplace_back(what);
    };

    Intrinsics K;
    K.fx = K.fy = 100;
    K.cx = K.cy = 50;
    K.width = K.height = 100;

    expect(project_point(K, {0, 0, 2}) == Eigen::Vector2d(50, 50), "project center");
    expect(project_point(K, {1, 1, 2}) == Eigen::Vector2d(100, 100), "project corner");
    expect(!try_project(K, {0, 0, -1}).has_value(), "behind camera");
    const PointCloud one{{0, 0, 2}};
    expect(points_in_box(one, K, {40, 40, 60, 60}) == one, "point inside box");
    expect(points_in_box(one, K, {0, 0, 10, 10}).empty(), "point outside box");
    expect(points_in_box({{1, 1, 2}}, K, {0, 0, 100, 100}).size() == 1, "inclusive box boundary");
    expect(iou({0, 0, 10, 10}, {0, 0, 10, 10}) == 1.0, "iou identical");
    expect(iou({0, 0, 10, 10}, {20, 20, 30, 30}) == 0.0, "iou disjoint");
    expect(std::abs(iou({0, 0, 10, 10}, {5, 0, 15, 10}) - 1.0 / 3.0) < 1e-15, "iou half shift");

    // Reprojection onto the same frame gives the tight box of the box's points.
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> px(0.0, 100.0), depth(0.5, 5.0);
    PointCloud cloud;
    for (int i = 0; i < 400; ++i) cloud.push_back(unproject(K, {px(rng), px(rng)}, depth(rng)));
    const CameraPose pose{random_rotation(rng), {1, 2, 3}};
    const BoundingBox box{20, 30, 70, 60};
    const auto same = reproject_box(box, cloud, pose, pose, K, 10);
    BoundingBox tight{1e9, 1e9, -1e9, -1e9};
    for (const auto& p : points_in_box(cloud, K, box)) {
        const auto q = project_point(K, p);
        tight = {std::min(tight.xmin, q.x()), std::min(tight.ymin, q.y()), std::max(tight.xmax, q.x()),
                 std::max(tight.ymax, q.y())};
    }
    expect(same.has_value() && std::abs(same->xmin - tight.xmin) < 1e-9 && std::abs(same->ymin - tight.ymin) < 1e-9 &&
               std::abs(same->xmax - tight.xmax) < 1e-9 && std::abs(same->ymax - tight.ymax) < 1e-9,
           "same-frame reprojection");

    // k -> l -> k point round trip.
    const Intrinsics Kd;
    std::uniform_real_distribution<double> ux(0.0, 639.0), uy(0.0, 479.0), uz(0.5, 6.0);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const CameraPose k{random_rotation(rng), {ux(rng) / 100, uy(rng) / 100, 1.0}};
        const CameraPose l{random_rotation(rng), {ux(rng) / 100, uy(rng) / 100, -1.0}};
        for (int i = 0; i < 50; ++i) {
            const Eigen::Vector2d pix(ux(rng), uy(rng));
            const Eigen::Vector3d p_l = l.to_camera(k.to_world(unproject(Kd, pix, uz(rng))));
            worst = std::max(worst, (project_point(Kd, k.to_camera(l.to_world(p_l))) - pix).norm());
        }
    }
    expect(worst < 1e-6, "round trip");

    const double t = seconds_since(start);
    expect(t < 1.0, "runtime");
    std::string detail = fmt("round trip max %.2e px, %.3f s", worst, t);
    for (const auto& f : failed) detail += "; failed: " + f;
    return {failed.empty(), detail};
}

// ---------------------------------------------------------------------------
// 2. Association precision

struct PooledPrecision {
    std::size_t matches = 0;
    std::size_t same = 0;
    double fraction() const { return matches ? double(same) / double(matches) : 0.0; }
};

PooledPrecision association_precision(const WorldConfig& wc, std::uint64_t seed) {
    const World world = generate_world(wc, seed);
    const auto frames = simulate_frames(world, derive_seed(seed, 1));
    const AssociationConfig ac;
    NeighborhoodSpec hood;
    hood.radius = ac.neighborhood_radius;
    const auto matches = build_matches(frames, hood, ac.iou_threshold, ac.min_points);
    const double f = same_instance_fraction(matches, frames);
    return {matches.size(), std::size_t(std::llround(f * double(matches.size())))};
}

Outcome association_criterion() {
    WorldConfig clean;
    clean.depth_noise = 0.0;
    clean.box_jitter = 0.0;
    clean.false_positive_rate = 0.0;
    const WorldConfig noisy;

    PooledPrecision pc, pn;
    double worst_clean = 1.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto c = association_precision(clean, seed);
        const auto n = association_precision(noisy, seed);
        worst_clean = std::min(worst_clean, c.fraction());
        pc.matches += c.matches;
        pc.same += c.same;
        pn.matches += n.matches;
        pn.same += n.same;
    }

    WorldConfig small;
    small.grid_x = small.grid_y = 5;
    const World world = generate_world(small, 0);
    const auto frames = simulate_frames(world, 1);
    const auto start = Clock::now();
    const auto matches = build_matches(frames, NeighborhoodSpec{});
    const double t = seconds_since(start);

    const bool pass = pc.fraction() >= 0.99 && pn.fraction() >= 0.90 && t < 30.0 && !matches.empty();
    return {pass, fmt("noise-free %.4f over %zu matches (worst seed %.4f), default noise %.4f, 5x5 grid %.2f s",
                      pc.fraction(), pc.matches, worst_clean, pn.fraction(), t)};
}

// ---------------------------------------------------------------------------
// 3. Gradient check

Eigen::VectorXd random_vector(int d, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = n(rng);
    return v;
}

double hinge_argument(const EmbeddingModel& m, const TripletFeatures& t, double margin) {
    const auto a = embed(m, t.anchor), p = embed(m, t.positive), n = embed(m, t.negative);
    return (a - p).norm() - (a - n).norm() + margin;
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

Outcome gradient_criterion() {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        const int d = 2 + int(seed % 7);
        EmbeddingModel m;
        m.W = Eigen::MatrixXd(6, d);
        for (int r = 0; r < 6; ++r) m.W.row(r) = random_vector(d, rng).transpose();
        m.b = random_vector(6, rng) * 0.3;
        std::vector<TripletFeatures> batch;
        while (batch.size() < 4) {
            TripletFeatures t{random_vector(d, rng), random_vector(d, rng), random_vector(d, rng)};
            if (std::abs(hinge_argument(m, t, 1.0)) > 0.05) batch.push_back(t);
        }
        const auto g = loss_gradient(m, batch, 1.0);
        const double h = 1e-5;
        auto central = [&](double& param) {
            const double v = param;
            param = v + h;
            const double up = batch_loss(m, batch, 1.0);
            param = v - h;
            const double down = batch_loss(m, batch, 1.0);
            param = v;
            return (up - down) / (2 * h);
        };
        for (Eigen::Index r = 0; r < m.W.rows(); ++r)
            for (Eigen::Index c = 0; c < m.W.cols(); ++c) worst = std::max(worst, relative_error(g.W(r, c), central(m.W(r, c))));
        for (Eigen::Index r = 0; r < m.b.size(); ++r) worst = std::max(worst, relative_error(g.b(r), central(m.b(r))));
    }
    return {worst < 1e-4, fmt("max relative error %.2e over 20 seeds, d 2..8", worst)};
}

// ---------------------------------------------------------------------------
// 6. Mean shift

std::vector<Eigen::VectorXd> brute_force_modes(const Eigen::MatrixXd& pts, double bw) {
    std::vector<Eigen::VectorXd> modes;
    for (Eigen::Index s = 0; s < pts.cols(); ++s) {
        Eigen::VectorXd x = pts.col(s);
        for (int it = 0; it < 10000; ++it) {
            Eigen::VectorXd sum = Eigen::VectorXd::Zero(pts.rows());
            int n = 0;
            for (Eigen::Index j = 0; j < pts.cols(); ++j)
                if ((pts.col(j) - x).norm() <= bw) {
                    sum += pts.col(j);
                    ++n;
                }
            const Eigen::VectorXd next = sum / n;
            const bool done = (next - x).norm() < 1e-12;
            x = next;
            if (done) break;
        }
        if (std::none_of(modes.begin(), modes.end(), [&](const auto& m) { return (m - x).norm() < bw / 2; }))
            modes.push_back(x);
    }
    return modes;
}

Outcome mean_shift_criterion() {
    Eigen::MatrixXd example(1, 4);
    example << 0, 0.1, 5, 5.1;
    const auto two = mean_shift(example, 1.0);

    double worst = 0.0;
    bool counts_agree = true;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> count(3, 30), dim(1, 3), centers(1, 4);
        std::normal_distribution<double> n(0.0, 1.0);
        const int N = count(rng), d = dim(rng), k = centers(rng);
        Eigen::MatrixXd c(d, k), pts(d, N);
        for (int j = 0; j < k; ++j)
            for (int i = 0; i < d; ++i) c(i, j) = 4.0 * n(rng);
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < d; ++i) pts(i, j) = c(i, j % k) + 0.5 * n(rng);
        const double bw = 1.0 + 0.5 * double(seed % 3);
        const auto expected = brute_force_modes(pts, bw);
        const auto got = mean_shift(pts, bw);
        if (got.size() != expected.size()) {
            counts_agree = false;
            continue;
        }
        for (std::size_t m = 0; m < got.size(); ++m) worst = std::max(worst, (got[m].mode - expected[m]).norm());
    }
    const bool pass = two.size() == 2 && counts_agree && worst < 1e-3;
    return {pass, fmt("example gives %zu clusters; 40 brute-force cases, max mode error %.2e", two.size(), worst)};
}

// ---------------------------------------------------------------------------
// 7. Average precision

double brute_force_ap(std::vector<Detection> dets, const std::vector<GtRef>& gt, double th) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<double> precision(dets.size() + 1, 0.0);
    std::vector<std::size_t> tp(dets.size() + 1, 0);
    for (std::size_t k = 1; k <= dets.size(); ++k) {
        std::vector<bool> taken(gt.size(), false);
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t arg = gt.size();
            double best = -1;
            for (std::size_t g = 0; g < gt.size(); ++g) {
                const double v = iou(dets[i].box, gt[g].box);
                if (!taken[g] && gt[g].frame_id == dets[i].frame_id && v >= th && v > best) {
                    best = v;
                    arg = g;
                }
            }
            if (arg < gt.size()) {
                taken[arg] = true;
                ++tp[k];
            }
        }
        precision[k] = double(tp[k]) / double(k);
    }
    double ap = 0;
    for (std::size_t k = 1; k <= dets.size(); ++k)
        if (tp[k] != tp[k - 1])
            ap += *std::max_element(precision.begin() + std::ptrdiff_t(k), precision.end()) / double(gt.size());
    return ap;
}

Outcome ap_criterion() {
    const std::vector<GtRef> two{{0, {0, 0, 10, 10}}, {1, {0, 0, 10, 10}}};
    const std::vector<Detection> dets{{0, {0, 0, 10, 10}, 0, 0.9}, {0, {50, 50, 60, 60}, 0, 0.8},
                                      {1, {0, 0, 10, 10}, 0, 0.7}};
    const double example = *average_precision(dets, two);
    const bool example_ok = std::abs(example - 5.0 / 6.0) < 1e-15;

    std::mt19937_64 rng(2);
    const std::vector<BoundingBox> pool{{0, 0, 10, 10}, {2, 0, 12, 10}, {20, 20, 30, 30}, {21, 21, 31, 31}, {40, 0, 50, 10}};
    std::uniform_int_distribution<int> nd(0, 6), ng(1, 3), box(0, int(pool.size()) - 1), frame(0, 1), sc(0, 4);
    double worst = 0.0;
    for (int c = 0; c < 100; ++c) {
        std::vector<GtRef> gt;
        for (int i = ng(rng); i > 0; --i) gt.push_back({frame(rng), pool[std::size_t(box(rng))]});
        std::vector<Detection> cand;
        for (int i = nd(rng); i > 0; --i) cand.push_back({frame(rng), pool[std::size_t(box(rng))], 0, 0.1 * sc(rng)});
        worst = std::max(worst, std::abs(*average_precision(cand, gt) - brute_force_ap(cand, gt, 0.5)));
    }
    return {example_ok && worst < 1e-12, fmt("example AP %.15f, 100 brute-force cases max error %.1e", example, worst)};
}

// ---------------------------------------------------------------------------
// Full pipeline runs shared by criteria 4, 5, 8, 9 and 10.

struct PipelineRun {
    json eval;
    json discovery;
    fs::path dir;
    double seconds = 0.0;
};

PipelineRun run_default_pipeline(std::uint64_t seed, const fs::path& dir) {
    fs::remove_all(dir);
    PipelineConfig cfg;
    cfg.seed = seed;
    cfg.output = dir;
    std::ostringstream log;
    const auto start = Clock::now();
    run_pipeline(cfg, {Stage::Evaluate, false, &log});
    PipelineRun run;
    run.seconds = seconds_since(start);
    run.dir = dir;
    run.eval = json::parse(slurp(dir / "eval_report.json"));
    run.discovery = json::parse(slurp(dir / "discovery_report.json"));
    return run;
}

std::vector<double> csv_column(const fs::path& path, std::size_t column) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    std::vector<double> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        for (std::size_t c = 0; c <= column; ++c) std::getline(ls, cell, ',');
        out.push_back(std::stod(cell));
    }
    return out;
}

Outcome separation_criterion(const PipelineRun& run) {
    const auto& sep = run.eval.at("embedding_separation");
    const double intra = sep.at("mean_intra"), inter = sep.at("mean_inter");
    const double ratio = intra / inter;

    const auto loss = csv_column(PipelinePaths{run.dir}.loss_trace(), 2);
    const bool finite = !loss.empty() && std::all_of(loss.begin(), loss.end(), [](double v) { return std::isfinite(v); });
    auto trailing = [&](std::size_t end) {
        return std::accumulate(loss.begin() + std::ptrdiff_t(end - 100), loss.begin() + std::ptrdiff_t(end), 0.0) / 100.0;
    };
    // The trailing average at every 100-step checkpoint stays below the first window.
    bool decreasing = loss.size() >= 500;
    std::string windows;
    if (decreasing) {
        const double first = trailing(100);
        for (std::size_t end = 100; end <= 500; end += 100) {
            windows += fmt(" %.3f", trailing(end));
            if (end > 100 && trailing(end) >= first) decreasing = false;
        }
    }
    const bool pass = ratio < 0.5 && finite && decreasing && loss.size() == 2000;
    return {pass, fmt("%zu steps, intra %.3f / inter %.3f = %.3f, trailing-100 loss at 100..500:%s", loss.size(), intra,
                      inter, ratio, windows.c_str())};
}

Outcome discovery_criterion(const std::vector<PipelineRun>& runs) {
    bool pass = true;
    std::string detail;
    for (const auto& run : runs) {
        const auto& best = run.discovery.at("best");
        const double p = best.at("avg_precision"), r = best.at("avg_recall");
        const auto rows = csv_column(PipelinePaths{run.dir}.pr_sweep(), 0).size();
        pass = pass && p > 0.9 && r > 0.6 && rows >= 5;
        detail += fmt("%sseed %d bw %.1f P %.3f R %.3f (%zu sweep rows)", detail.empty() ? "" : "; ",
                      int(run.eval.at("seed")), double(best.at("bandwidth")), p, r, rows);
    }
    return {pass, detail};
}

Outcome few_shot_criterion(const std::vector<PipelineRun>& runs) {
    std::vector<double> ns, dist, raw;
    for (const auto& row : runs.front().eval.at("few_shot")) {
        ns.push_back(row.at("n"));
        dist.push_back(0.0);
        raw.push_back(0.0);
    }
    for (const auto& run : runs)
        for (std::size_t i = 0; i < ns.size(); ++i) {
            dist[i] += double(run.eval.at("few_shot").at(i).at("ssod_dist_map")) / double(runs.size());
            raw[i] += double(run.eval.at("few_shot").at(i).at("raw_baseline_map")) / double(runs.size());
        }
    bool monotone = true;
    std::string detail;
    for (std::size_t i = 0; i < ns.size(); ++i) {
        if (i > 0 && (dist[i] < dist[i - 1] - 0.02 || raw[i] < raw[i - 1] - 0.02)) monotone = false;
        detail += fmt("%sn=%g dist %.3f raw %.3f", i ? ", " : "", ns[i], dist[i], raw[i]);
    }
    const double gap = dist.front() - raw.front();
    const bool covers = ns.front() == 1 && ns.back() == 10;
    return {covers && gap >= 0.05 && monotone, fmt("mean over %zu seeds: %s; n=1 gap %.3f", runs.size(), detail.c_str(), gap)};
}

Outcome cluster_criterion(const std::vector<PipelineRun>& runs) {
    double cluster = 0.0, dist5 = 0.0;
    for (const auto& run : runs) {
        const auto& featured = run.eval.at("featured_shots");
        if (int(featured.at("n")) != 5) return {false, "featured shot count is not 5"};
        cluster += double(run.eval.at("ssod_cluster").at("map")) / double(runs.size());
        dist5 += double(featured.at("ssod_dist").at("map")) / double(runs.size());
    }
    return {cluster >= dist5 - 0.02, fmt("mean over %zu seeds: cluster-labeled %.3f vs 5-shot dist %.3f", runs.size(),
                                         cluster, dist5)};
}

Outcome determinism_criterion(const PipelineRun& first, const PipelineRun& second) {
    bool identical = true;
    for (const fs::path name : {"eval_report.json", "discovery_report.json", "pr_sweep.csv", "fewshot.csv"})
        identical = identical && slurp(first.dir / name) == slurp(second.dir / name) && !slurp(first.dir / name).empty();
    const double slowest = std::max(first.seconds, second.seconds);
    return {identical && slowest < 300.0,
            fmt("reports %s; full pipeline %.1f s and %.1f s", identical ? "byte-identical" : "differ", first.seconds,
                second.seconds)};
}

}  // namespace

int main() {
    int failures = 0;
    auto report = [&](int number, const char* name, const std::function<Outcome()>& check) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", number, name, o.detail.c_str());
        std::fflush(stdout);
    };

    report(1, "geometry oracles", geometry_oracles);
    report(2, "association precision", association_criterion);
    report(3, "gradient correctness", gradient_criterion);

    const fs::path root = fs::temp_directory_path() / "ssod_acceptance";
    std::vector<PipelineRun> runs;
    std::string pipeline_error;
    try {
        for (std::uint64_t seed = 0; seed < 5; ++seed)
            runs.push_back(run_default_pipeline(seed, root / ("seed" + std::to_string(seed))));
    } catch (const std::exception& e) {
        pipeline_error = e.what();
    }
    auto with_runs = [&](const std::function<Outcome()>& check) {
        return [&, check]() -> Outcome {
            if (runs.size() < 5) return {false, "pipeline failed: " + pipeline_error};
            return check();
        };
    };

    report(4, "embedding separation", with_runs([&] { return separation_criterion(runs.front()); }));
    report(5, "discovery quality", with_runs([&] { return discovery_criterion(runs); }));
    report(6, "mean-shift oracle", mean_shift_criterion);
    report(7, "AP oracle", ap_criterion);
    report(8, "few-shot trend", with_runs([&] { return few_shot_criterion(runs); }));
    report(9, "cluster-labeled detection", with_runs([&] { return cluster_criterion(runs); }));
    report(10, "determinism", with_runs([&] {
               const auto again = run_default_pipeline(0, root / "seed0_again");
               return determinism_criterion(runs.front(), again);
           }));

    std::printf("%d of 10 criteria passed\n", 10 - failures);
    return failures == 0 ? 0 : 1;
}
