#include "ssod/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "ssod/dataset_io.hpp"
#include "ssod/detection.hpp"

namespace ssod {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

/// Reads optional keys from one JSON object and rejects leftovers.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError(where_ + " must be a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        if (!j_.contains(key)) return nullptr;
        used_.insert(key);
        return &j_.at(key);
    }

    void finish() const {
        for (const auto& [k, _] : j_.items())
            if (!used_.count(k)) throw ConfigError("unknown key '" + where_ + "." + k + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> used_;
};

Eigen::Vector3d vec3(const std::vector<double>& v, const std::string& where) {
    if (v.size() != 3) throw ConfigError(where + " must have 3 entries");
    return {v[0], v[1], v[2]};
}

json world_to_json(const WorldConfig& w) {
    json cats = json::array();
    for (const auto& c : w.categories)
        cats.push_back({{"name", c.name},
                        {"recall", c.recall},
                        {"size_min", {c.size_min.x(), c.size_min.y(), c.size_min.z()}},
                        {"size_max", {c.size_max.x(), c.size_max.y(), c.size_max.z()}}});
    const Intrinsics& K = w.intrinsics;
    return json{{"room_x", w.room_x},
                {"room_y", w.room_y},
                {"object_count", w.object_count},
                {"categories", cats},
                {"object_z_min", w.object_z_min},
                {"object_z_max", w.object_z_max},
                {"object_gap", w.object_gap},
                {"grid_x", w.grid_x},
                {"grid_y", w.grid_y},
                {"grid_spacing", w.grid_spacing},
                {"camera_height", w.camera_height},
                {"camera_clearance", w.camera_clearance},
                {"camera_reach", w.camera_reach},
                {"orientations", w.orientations},
                {"intrinsics",
                 {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}}},
                {"depth_noise", w.depth_noise},
                {"descriptor_dim", w.descriptor_dim},
                {"descriptor_noise", w.descriptor_noise},
                {"box_jitter", w.box_jitter},
                {"false_positive_rate", w.false_positive_rate},
                {"min_box_w", w.min_box_w},
                {"min_box_h", w.min_box_h},
                {"min_visible_fraction", w.min_visible_fraction},
                {"samples_per_object", w.samples_per_object},
                {"bin_size", w.bin_size},
                {"view_buckets", w.view_buckets},
                {"view_scale", w.view_scale},
                {"instance_view_scale", w.instance_view_scale},
                {"category_scale", w.category_scale},
                {"near_plane", w.near_plane}};
}

WorldConfig world_from_json(const json& j) {
    WorldConfig w;
    ObjectReader r(j, "scenesim");
    r.get("room_x", w.room_x);
    r.get("room_y", w.room_y);
    r.get("object_count", w.object_count);
    if (const json* cats = r.sub("categories")) {
        if (!cats->is_array()) throw ConfigError("scenesim.categories must be an array");
        w.categories.clear();
        for (const auto& cj : *cats) {
            CategorySpec c;
            ObjectReader cr(cj, "scenesim.categories[]");
            std::vector<double> lo{c.size_min.x(), c.size_min.y(), c.size_min.z()};
            std::vector<double> hi{c.size_max.x(), c.size_max.y(), c.size_max.z()};
            cr.get("name", c.name);
            cr.get("recall", c.recall);
            cr.get("size_min", lo);
            cr.get("size_max", hi);
            cr.finish();
            c.size_min = vec3(lo, "size_min");
            c.size_max = vec3(hi, "size_max");
            w.categories.push_back(c);
        }
    }
    r.get("object_z_min", w.object_z_min);
    r.get("object_z_max", w.object_z_max);
    r.get("object_gap", w.object_gap);
    r.get("grid_x", w.grid_x);
    r.get("grid_y", w.grid_y);
    r.get("grid_spacing", w.grid_spacing);
    r.get("camera_height", w.camera_height);
    r.get("camera_clearance", w.camera_clearance);
    r.get("camera_reach", w.camera_reach);
    r.get("orientations", w.orientations);
    if (const json* k = r.sub("intrinsics")) {
        ObjectReader kr(*k, "scenesim.intrinsics");
        kr.get("fx", w.intrinsics.fx);
        kr.get("fy", w.intrinsics.fy);
        kr.get("cx", w.intrinsics.cx);
        kr.get("cy", w.intrinsics.cy);
        kr.get("width", w.intrinsics.width);
        kr.get("height", w.intrinsics.height);
        kr.finish();
    }
    r.get("depth_noise", w.depth_noise);
    r.get("descriptor_dim", w.descriptor_dim);
    r.get("descriptor_noise", w.descriptor_noise);
    r.get("box_jitter", w.box_jitter);
    r.get("false_positive_rate", w.false_positive_rate);
    r.get("min_box_w", w.min_box_w);
    r.get("min_box_h", w.min_box_h);
    r.get("min_visible_fraction", w.min_visible_fraction);
    r.get("samples_per_object", w.samples_per_object);
    r.get("bin_size", w.bin_size);
    r.get("view_buckets", w.view_buckets);
    r.get("view_scale", w.view_scale);
    r.get("instance_view_scale", w.instance_view_scale);
    r.get("category_scale", w.category_scale);
    r.get("near_plane", w.near_plane);
    r.finish();
    return w;
}

const char* kernel_name(Kernel k) { return k == Kernel::Flat ? "flat" : "gaussian"; }

}  // namespace

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig cfg;
    ObjectReader r(j, "config");
    r.get("seed", cfg.seed);
    std::string out = cfg.output.string();
    r.get("output", out);
    cfg.output = out;
    if (const json* s = r.sub("scenesim")) cfg.scenesim = world_from_json(*s);
    if (const json* a = r.sub("association")) {
        ObjectReader ar(*a, "association");
        ar.get("iou_threshold", cfg.association.iou_threshold);
        ar.get("min_points", cfg.association.min_points);
        ar.get("neighborhood_radius", cfg.association.neighborhood_radius);
        ar.get("negatives_per_ordering", cfg.association.negatives_per_ordering);
        ar.finish();
    }
    if (const json* m = r.sub("metriclearn")) {
        ObjectReader mr(*m, "metriclearn");
        mr.get("margin", cfg.metriclearn.margin);
        mr.get("learning_rate", cfg.metriclearn.learning_rate);
        mr.get("decay", cfg.metriclearn.decay);
        mr.get("decay_interval", cfg.metriclearn.decay_interval);
        mr.get("steps", cfg.metriclearn.steps);
        mr.finish();
    }
    if (const json* d = r.sub("discovery")) {
        ObjectReader dr(*d, "discovery");
        dr.get("bandwidths", cfg.discovery.bandwidths);
        dr.get("featured_bandwidth", cfg.discovery.featured_bandwidth);
        dr.get("min_cluster_size", cfg.discovery.min_cluster_size);
        dr.get("label_iou", cfg.discovery.label_iou);
        dr.get("tolerance", cfg.discovery.mean_shift.tolerance);
        dr.get("max_iterations", cfg.discovery.mean_shift.max_iterations);
        dr.get("merge_fraction", cfg.discovery.mean_shift.merge_fraction);
        std::string kernel = kernel_name(cfg.discovery.mean_shift.kernel);
        dr.get("kernel", kernel);
        if (kernel == "flat")
            cfg.discovery.mean_shift.kernel = Kernel::Flat;
        else if (kernel == "gaussian")
            cfg.discovery.mean_shift.kernel = Kernel::Gaussian;
        else
            throw ConfigError("discovery.kernel must be 'flat' or 'gaussian'");
        dr.finish();
    }
    if (const json* d = r.sub("detection")) {
        ObjectReader dr(*d, "detection");
        dr.get("shots", cfg.detection.shots);
        dr.get("repeats", cfg.detection.repeats);
        dr.get("featured_shots", cfg.detection.featured_shots);
        if (const json* bg = dr.sub("background_distance")) {
            if (bg->is_null())
                cfg.detection.background_distance.reset();
            else if (bg->is_number())
                cfg.detection.background_distance = bg->get<double>();
            else
                throw ConfigError("detection.background_distance must be a number or null");
        }
        dr.get("nms_iou", cfg.detection.nms_iou);
        dr.get("eval_iou", cfg.detection.eval_iou);
        dr.finish();
    }
    r.finish();
    cfg.validate();
    return cfg;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

json PipelineConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["output"] = output.string();
    j["scenesim"] = world_to_json(scenesim);
    j["association"] = {{"iou_threshold", association.iou_threshold},
                        {"min_points", association.min_points},
                        {"neighborhood_radius", association.neighborhood_radius},
                        {"negatives_per_ordering", association.negatives_per_ordering}};
    j["metriclearn"] = {{"margin", metriclearn.margin},
                        {"learning_rate", metriclearn.learning_rate},
                        {"decay", metriclearn.decay},
                        {"decay_interval", metriclearn.decay_interval},
                        {"steps", metriclearn.steps}};
    j["discovery"] = {{"bandwidths", discovery.bandwidths},
                      {"featured_bandwidth", discovery.featured_bandwidth},
                      {"min_cluster_size", discovery.min_cluster_size},
                      {"label_iou", discovery.label_iou},
                      {"tolerance", discovery.mean_shift.tolerance},
                      {"max_iterations", discovery.mean_shift.max_iterations},
                      {"merge_fraction", discovery.mean_shift.merge_fraction},
                      {"kernel", kernel_name(discovery.mean_shift.kernel)}};
    j["detection"] = {{"shots", detection.shots},
                      {"repeats", detection.repeats},
                      {"featured_shots", detection.featured_shots},
                      {"background_distance",
                       detection.background_distance ? json(*detection.background_distance) : json(nullptr)},
                      {"nms_iou", detection.nms_iou},
                      {"eval_iou", detection.eval_iou}};
    return j;
}

void PipelineConfig::validate() const {
    try {
        scenesim.validate();
    } catch (const WorldConfigError& e) {
        throw ConfigError(std::string("scenesim: ") + e.what());
    }
    if (!(association.iou_threshold > 0.0 && association.iou_threshold < 1.0))
        throw ConfigError("association.iou_threshold must lie in (0, 1)");
    if (association.min_points < 1) throw ConfigError("association.min_points must be >= 1");
    if (association.neighborhood_radius < 0) throw ConfigError("association.neighborhood_radius must be >= 0");
    if (association.negatives_per_ordering < 1) throw ConfigError("association.negatives_per_ordering must be >= 1");
    try {
        metriclearn.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("metriclearn: ") + e.what());
    }
    if (discovery.bandwidths.empty()) throw ConfigError("discovery.bandwidths must be nonempty");
    for (double b : discovery.bandwidths)
        if (!(b > 0)) throw ConfigError("discovery bandwidths must be positive");
    if (!(discovery.featured_bandwidth > 0)) throw ConfigError("discovery.featured_bandwidth must be positive");
    if (discovery.min_cluster_size < 1) throw ConfigError("discovery.min_cluster_size must be >= 1");
    if (!(discovery.label_iou > 0 && discovery.label_iou <= 1)) throw ConfigError("discovery.label_iou must lie in (0, 1]");
    if (discovery.mean_shift.max_iterations < 1 || !(discovery.mean_shift.tolerance > 0) ||
        !(discovery.mean_shift.merge_fraction >= 0))
        throw ConfigError("discovery mean-shift parameters invalid");
    if (detection.shots.empty() || detection.repeats < 1) throw ConfigError("detection.shots/repeats must be nonempty");
    for (auto n : detection.shots)
        if (n < 1) throw ConfigError("detection.shots entries must be >= 1");
    if (detection.featured_shots < 1) throw ConfigError("detection.featured_shots must be >= 1");
    if (!(detection.nms_iou > 0 && detection.nms_iou <= 1) || !(detection.eval_iou > 0 && detection.eval_iou <= 1))
        throw ConfigError("detection IoU thresholds must lie in (0, 1]");
}

std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string PipelineConfig::hash() const {
    json j = to_json();
    j.erase("output");
    return fnv1a_hex(j.dump());
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::Simulate: return "simulate";
        case Stage::Associate: return "associate";
        case Stage::Mine: return "mine";
        case Stage::Train: return "train";
        case Stage::Embed: return "embed";
        case Stage::Discover: return "discover";
        case Stage::Detect: return "detect";
        case Stage::Evaluate: return "eval";
    }
    return "?";
}

Stage parse_stage(const std::string& name) {
    for (Stage s : {Stage::Simulate, Stage::Associate, Stage::Mine, Stage::Train, Stage::Embed, Stage::Discover,
                    Stage::Detect, Stage::Evaluate})
        if (name == stage_name(s)) return s;
    if (name == "evaluate") return Stage::Evaluate;
    throw ConfigError("unknown stage '" + name + "'");
}

double same_instance_fraction(const std::vector<MatchPair>& matches, const std::vector<Frame>& frames) {
    if (matches.empty()) return 0.0;
    FrameIndex index(frames);
    std::size_t same = 0;
    for (const auto& m : matches) {
        const auto& a = index.proposal(m.a).gt_label;
        const auto& b = index.proposal(m.b).gt_label;
        if (a && b && *a == *b) ++same;
    }
    return double(same) / double(matches.size());
}

SeparationStats embedding_separation(const Eigen::MatrixXd& embeddings,
                                     const std::vector<std::optional<InstanceId>>& labels) {
    SeparationStats s;
    double intra = 0.0, inter = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            if (!labels[j]) continue;
            const double d = (embeddings.col(Eigen::Index(i)) - embeddings.col(Eigen::Index(j))).norm();
            if (*labels[i] == *labels[j]) {
                intra += d;
                ++s.intra_pairs;
            } else {
                inter += d;
                ++s.inter_pairs;
            }
        }
    }
    if (s.intra_pairs) s.mean_intra = intra / double(s.intra_pairs);
    if (s.inter_pairs) s.mean_inter = inter / double(s.inter_pairs);
    return s;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

struct Context {
    const PipelineConfig& cfg;
    PipelinePaths paths;
    std::ostream& log;
    bool use_cache;
    std::string config_hash;
};

void hash_path(const fs::path& p, const fs::path& base, std::string& acc) {
    if (fs::is_directory(p)) {
        std::vector<fs::path> entries;
        for (const auto& e : fs::recursive_directory_iterator(p))
            if (e.is_regular_file()) entries.push_back(e.path());
        std::sort(entries.begin(), entries.end());
        for (const auto& e : entries) hash_path(e, base, acc);
        return;
    }
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("missing stage input " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    acc += fnv1a_hex(fs::relative(p, base).generic_string() + '\n' + ss.str());
}

std::string stage_key(const Context& ctx, Stage s, const json& sub_config, const std::vector<fs::path>& inputs) {
    std::string acc = std::string(stage_name(s)) + '\n' + sub_config.dump() + '\n';
    for (const auto& in : inputs) hash_path(in, ctx.paths.root, acc);
    return fnv1a_hex(acc);
}

fs::path key_file(const Context& ctx, Stage s) { return ctx.paths.cache() / (std::string(stage_name(s)) + ".key"); }

bool is_cached(const Context& ctx, Stage s, const std::string& key, const std::vector<fs::path>& outputs) {
    if (!ctx.use_cache) return false;
    std::ifstream is(key_file(ctx, s));
    std::string stored;
    if (!is || !std::getline(is, stored) || stored != key) return false;
    return std::all_of(outputs.begin(), outputs.end(), [](const fs::path& p) { return fs::exists(p); });
}

void stamp(const Context& ctx, Stage s, const std::string& key) {
    fs::create_directories(ctx.paths.cache());
    std::ofstream os(key_file(ctx, s));
    os << key << '\n';
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

json attribution(const Context& ctx) { return json{{"config_hash", ctx.config_hash}, {"seed", ctx.cfg.seed}}; }

std::vector<std::optional<InstanceId>> proposal_labels(const Dataset& ds) {
    std::vector<std::optional<InstanceId>> labels;
    for (const auto& f : ds.frames)
        for (const auto& p : f.proposals) labels.push_back(p.gt_label);
    return labels;
}

Eigen::MatrixXd raw_features(const Dataset& ds) {
    std::vector<const Eigen::VectorXd*> cols;
    for (const auto& f : ds.frames)
        for (const auto& p : f.proposals) cols.push_back(&p.feature);
    const Eigen::Index d = cols.empty() ? 0 : cols.front()->size();
    Eigen::MatrixXd m(d, Eigen::Index(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) m.col(Eigen::Index(i)) = *cols[i];
    return m;
}

// Stage 1 -------------------------------------------------------------------

void stage_simulate(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    const std::string key = stage_key(ctx, Stage::Simulate, json{{"scenesim", world_to_json(cfg.scenesim)}, {"seed", cfg.seed}}, {});
    if (is_cached(ctx, Stage::Simulate, key, {ctx.paths.train_world() / "manifest.json", ctx.paths.test_world() / "manifest.json"})) {
        ctx.log << "[simulate] cached\n";
        return;
    }
    // An overcrowded room is a configuration problem for either scan.
    World world, test;
    try {
        world = generate_world(cfg.scenesim, cfg.seed);
        test = rearrange_world(world, derive_seed(cfg.seed, 0x7E57));
    } catch (const WorldConfigError& e) {
        throw ConfigError(std::string("scenesim: ") + e.what());
    }
    auto emit = [&](const World& w, std::uint64_t seed, const fs::path& dir, const char* name) {
        Dataset ds;
        ds.intrinsics = w.config.intrinsics;
        for (const auto& o : w.objects) ds.objects.push_back({o.id, w.config.categories[std::size_t(o.category)].name});
        ds.frames = simulate_frames(w, seed);
        fs::remove_all(dir);
        write_dataset(ds, dir);
        std::size_t props = 0, gts = 0;
        for (const auto& f : ds.frames) {
            props += f.proposals.size();
            gts += f.gt_boxes.size();
        }
        ctx.log << "[simulate] " << name << ": " << ds.frames.size() << " frames, " << props << " proposals, " << gts
                << " gt boxes\n";
    };
    emit(world, derive_seed(cfg.seed, 1), ctx.paths.train_world(), "train world");
    emit(test, derive_seed(cfg.seed, 2), ctx.paths.test_world(), "test world");
    stamp(ctx, Stage::Simulate, key);
}

// Stage 2 -------------------------------------------------------------------


json association_json(const AssociationConfig& a) {
    return {{"iou_threshold", a.iou_threshold}, {"min_points", a.min_points}, {"neighborhood_radius", a.neighborhood_radius},
            {"negatives_per_ordering", a.negatives_per_ordering}};
}

void stage_associate(const Context& ctx) {
    const auto& a = ctx.cfg.association;
    const std::string key = stage_key(ctx, Stage::Associate, association_json(a), {ctx.paths.train_world()});
    if (is_cached(ctx, Stage::Associate, key, {ctx.paths.matches()})) {
        ctx.log << "[associate] cached\n";
        return;
    }
    const Dataset ds = read_dataset(ctx.paths.train_world());
    const auto matches = build_matches(ds.frames, NeighborhoodSpec{a.neighborhood_radius, {}}, a.iou_threshold, a.min_points);
    write_matches(matches, ctx.paths.matches());
    ctx.log << "[associate] " << matches.size() << " matches, same-instance fraction "
            << same_instance_fraction(matches, ds.frames) << "\n";
    stamp(ctx, Stage::Associate, key);
}

// Stage 3 -------------------------------------------------------------------

void stage_mine(const Context& ctx) {
    const auto& a = ctx.cfg.association;
    const std::string key = stage_key(ctx, Stage::Mine, json{{"negatives_per_ordering", a.negatives_per_ordering}, {"seed", ctx.cfg.seed}},
                                      {ctx.paths.train_world(), ctx.paths.matches()});
    if (is_cached(ctx, Stage::Mine, key, {ctx.paths.triplets()})) {
        ctx.log << "[mine] cached\n";
        return;
    }
    const Dataset ds = read_dataset(ctx.paths.train_world());
    const auto matches = read_matches(ctx.paths.matches());
    const auto triplets = mine_triplets(matches, ds.frames, derive_seed(ctx.cfg.seed, 3), a.negatives_per_ordering);
    write_triplets(triplets, ctx.paths.triplets());
    ctx.log << "[mine] " << triplets.size() << " triplets (negatives are redrawn at every training step)\n";
    stamp(ctx, Stage::Mine, key);
}

// Stage 4 -------------------------------------------------------------------

TrainConfig effective_train_config(const PipelineConfig& cfg) {
    TrainConfig tc = cfg.metriclearn;
    tc.neighborhood_radius = cfg.association.neighborhood_radius;
    tc.negatives_per_ordering = cfg.association.negatives_per_ordering;
    tc.seed = derive_seed(cfg.seed, 4);
    return tc;
}

void stage_train(const Context& ctx) {
    const TrainConfig tc = effective_train_config(ctx.cfg);
    const json sub{{"margin", tc.margin}, {"learning_rate", tc.learning_rate}, {"decay", tc.decay},
                   {"decay_interval", tc.decay_interval}, {"steps", tc.steps}, {"radius", tc.neighborhood_radius},
                   {"negatives", tc.negatives_per_ordering}, {"seed", tc.seed}};
    const std::string key = stage_key(ctx, Stage::Train, sub, {ctx.paths.train_world(), ctx.paths.matches()});
    if (is_cached(ctx, Stage::Train, key, {ctx.paths.model(), ctx.paths.loss_trace()})) {
        ctx.log << "[train] cached\n";
        return;
    }
    const Dataset ds = read_dataset(ctx.paths.train_world());
    const auto matches = read_matches(ctx.paths.matches());
    const TrainResult result = train(ds.frames, matches, tc);
    save_model(result.model, ctx.paths.model());
    write_loss_trace(result.trace, ctx.paths.loss_trace());
    double tail = 0.0;
    std::size_t n = 0;
    for (std::size_t i = result.trace.size() > 100 ? result.trace.size() - 100 : 0; i < result.trace.size(); ++i)
        if (result.trace[i].triplets) {
            tail += result.trace[i].loss / double(result.trace[i].triplets);
            ++n;
        }
    ctx.log << "[train] " << tc.steps << " steps, " << result.skipped_steps << " skipped, final mean loss per triplet "
            << (n ? tail / double(n) : 0.0) << "\n";
    stamp(ctx, Stage::Train, key);
}

// Stage 5 -------------------------------------------------------------------

EmbeddingTable embed_dataset(const EmbeddingModel& model, const Dataset& ds) {
    EmbeddingTable t;
    for (const auto& f : ds.frames)
        for (std::size_t i = 0; i < f.proposals.size(); ++i) t.refs.push_back({f.id, i});
    t.values = embed_all(model, raw_features(ds));
    return t;
}

void stage_embed(const Context& ctx) {
    const std::string key =
        stage_key(ctx, Stage::Embed, json::object(), {ctx.paths.model(), ctx.paths.train_world(), ctx.paths.test_world()});
    if (is_cached(ctx, Stage::Embed, key, {ctx.paths.train_embeddings(), ctx.paths.test_embeddings()})) {
        ctx.log << "[embed] cached\n";
        return;
    }
    const EmbeddingModel model = load_model(ctx.paths.model());
    const Dataset train_ds = read_dataset(ctx.paths.train_world());
    const Dataset test_ds = read_dataset(ctx.paths.test_world());
    write_embeddings(embed_dataset(model, train_ds), ctx.paths.train_embeddings());
    write_embeddings(embed_dataset(model, test_ds), ctx.paths.test_embeddings());
    ctx.log << "[embed] embedded all train and test proposals\n";
    stamp(ctx, Stage::Embed, key);
}

// Stage 6 -------------------------------------------------------------------

json discovery_json(const DiscoveryConfig& d) {
    return {{"bandwidths", d.bandwidths},          {"featured_bandwidth", d.featured_bandwidth},
            {"min_cluster_size", d.min_cluster_size}, {"tolerance", d.mean_shift.tolerance},
            {"max_iterations", d.mean_shift.max_iterations}, {"merge_fraction", d.mean_shift.merge_fraction},
            {"kernel", kernel_name(d.mean_shift.kernel)}};
}

json report_json(const DiscoveryReport& r, const Dataset& ds) {
    json inst = json::array();
    for (const auto& i : r.instances)
        inst.push_back({{"instance_id", i.instance},
                        {"category", ds.category_of(i.instance)},
                        {"dominant_cluster", i.dominant_cluster ? json(*i.dominant_cluster) : json(nullptr)},
                        {"precision", i.precision},
                        {"recall", i.recall},
                        {"hits", i.hits},
                        {"cluster_size", i.cluster_size},
                        {"total", i.total}});
    return json{{"bandwidth", r.bandwidth},   {"cluster_count", r.cluster_count}, {"avg_precision", r.avg_precision},
                {"avg_recall", r.avg_recall}, {"instances", inst},                {"excluded", r.excluded}};
}

void stage_discover(const Context& ctx) {
    const auto& dc = ctx.cfg.discovery;
    const std::string key = stage_key(ctx, Stage::Discover, discovery_json(dc), {ctx.paths.train_world(), ctx.paths.train_embeddings()});
    if (is_cached(ctx, Stage::Discover, key, {ctx.paths.clusters(), ctx.paths.discovery_report(), ctx.paths.pr_sweep()})) {
        ctx.log << "[discover] cached\n";
        return;
    }
    const Dataset ds = read_dataset(ctx.paths.train_world());
    const EmbeddingTable emb = read_embeddings(ctx.paths.train_embeddings());
    const auto labels = proposal_labels(ds);
    if (labels.size() != emb.refs.size()) throw std::runtime_error("embedding table does not match the train dataset");
    std::vector<InstanceId> instances;
    for (const auto& o : ds.objects) instances.push_back(o.instance_id);

    auto run = [&](double bw, std::vector<Cluster>* kept, std::size_t* unfiltered) {
        const auto clusters = mean_shift(emb.values, bw, dc.mean_shift);
        auto filtered = filter_clusters(clusters, dc.min_cluster_size);
        DiscoveryReport rep = discovery_pr(filtered, labels, instances);
        rep.bandwidth = bw;
        if (unfiltered) *unfiltered = clusters.size();
        if (kept) *kept = std::move(filtered);
        return rep;
    };

    std::ofstream sweep(ctx.paths.pr_sweep());
    sweep << "bandwidth,avg_precision,avg_recall,n_clusters\n";
    json sweep_json = json::array();
    std::optional<DiscoveryReport> best;
    auto f1 = [](const DiscoveryReport& r) {
        const double s = r.avg_precision + r.avg_recall;
        return s > 0 ? 2 * r.avg_precision * r.avg_recall / s : 0.0;
    };
    for (double bw : dc.bandwidths) {
        const DiscoveryReport rep = run(bw, nullptr, nullptr);
        sweep << fmt(bw) << ',' << fmt(rep.avg_precision) << ',' << fmt(rep.avg_recall) << ',' << rep.cluster_count << '\n';
        sweep_json.push_back({{"bandwidth", bw}, {"avg_precision", rep.avg_precision}, {"avg_recall", rep.avg_recall},
                              {"n_clusters", rep.cluster_count}});
        ctx.log << "[discover] bandwidth " << bw << ": P=" << rep.avg_precision << " R=" << rep.avg_recall << " clusters "
                << rep.cluster_count << "\n";
        if (!best || f1(rep) > f1(*best)) best = rep;
    }

    std::vector<Cluster> featured_clusters;
    std::size_t unfiltered = 0;
    const DiscoveryReport featured = run(dc.featured_bandwidth, &featured_clusters, &unfiltered);
    write_clusters(featured_clusters, emb.refs, ctx.paths.clusters());

    json report = attribution(ctx);
    report["min_cluster_size"] = dc.min_cluster_size;
    report["kernel"] = kernel_name(dc.mean_shift.kernel);
    report["label_iou"] = dc.label_iou;
    report["featured"] = report_json(featured, ds);
    report["featured"]["unfiltered_cluster_count"] = unfiltered;
    report["best"] = report_json(*best, ds);
    report["best_selection"] = "max F1 of average precision and average recall";
    report["sweep"] = sweep_json;
    write_json(report, ctx.paths.discovery_report());
    stamp(ctx, Stage::Discover, key);
}

// Stage 7 -------------------------------------------------------------------

json detection_json(const DetectionConfig& d) {
    return {{"shots", d.shots},
            {"repeats", d.repeats},
            {"featured_shots", d.featured_shots},
            {"background_distance", d.background_distance ? json(*d.background_distance) : json(nullptr)},
            {"nms_iou", d.nms_iou},
            {"eval_iou", d.eval_iou}};
}

std::vector<Cluster> read_cluster_members(const fs::path& path, const std::vector<ProposalRef>& refs) {
    std::map<ProposalRef, std::size_t> column;
    for (std::size_t i = 0; i < refs.size(); ++i) column.emplace(refs[i], i);
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::map<std::size_t, Cluster> clusters;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        unsigned long long cid = 0, idx = 0;
        long long frame = 0;
        if (std::sscanf(line.c_str(), "%llu\t%lld\t%llu", &cid, &frame, &idx) != 3)
            throw std::runtime_error("bad cluster row in " + path.string());
        auto it = column.find(ProposalRef{frame, std::size_t(idx)});
        if (it == column.end()) throw std::runtime_error("cluster member not in embedding table");
        auto& c = clusters[std::size_t(cid)];
        c.id = std::size_t(cid);
        c.members.push_back(it->second);
    }
    std::vector<Cluster> out;
    for (auto& [_, c] : clusters) out.push_back(std::move(c));
    return out;
}

std::string run_name(const char* method, std::size_t n, std::size_t r) {
    return std::string(method) + "_n" + std::to_string(n) + "_r" + std::to_string(r) + ".csv";
}

std::uint64_t few_shot_seed(std::uint64_t seed, std::size_t n, std::size_t r) { return derive_seed(seed, 0x5107, n * 1000 + r); }

Eigen::MatrixXd normalized(Eigen::MatrixXd m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double n = m.col(c).norm();
        if (n > 0) m.col(c) /= n;
    }
    return m;
}

std::vector<QueryProposal> build_queries(const Dataset& test, const Eigen::MatrixXd& values, double nms_iou) {
    std::vector<QueryProposal> queries;
    Eigen::Index col = 0;
    for (const auto& f : test.frames) {
        std::vector<BoundingBox> boxes;
        std::vector<double> scores;
        for (const auto& p : f.proposals) {
            boxes.push_back(p.box);
            scores.push_back(p.objectness);
        }
        for (std::size_t k : non_max_suppression(boxes, scores, nms_iou))
            queries.push_back(QueryProposal{f.id, boxes[k], values.col(col + Eigen::Index(k))});
        col += Eigen::Index(f.proposals.size());
    }
    return queries;
}

void stage_detect(const Context& ctx) {
    const auto& dc = ctx.cfg.detection;
    const std::string key = stage_key(ctx, Stage::Detect, json{{"detection", detection_json(dc)}, {"seed", ctx.cfg.seed}},
                                      {ctx.paths.train_world(), ctx.paths.test_world(), ctx.paths.train_embeddings(),
                                       ctx.paths.test_embeddings(), ctx.paths.clusters()});
    if (is_cached(ctx, Stage::Detect, key, {ctx.paths.detections() / "ssod_cluster.csv"})) {
        ctx.log << "[detect] cached\n";
        return;
    }
    const Dataset train_ds = read_dataset(ctx.paths.train_world());
    const Dataset test_ds = read_dataset(ctx.paths.test_world());
    const EmbeddingTable train_emb = read_embeddings(ctx.paths.train_embeddings());
    const EmbeddingTable test_emb = read_embeddings(ctx.paths.test_embeddings());
    const auto train_labels = proposal_labels(train_ds);
    const Eigen::MatrixXd train_raw = normalized(raw_features(train_ds));
    const Eigen::MatrixXd test_raw = normalized(raw_features(test_ds));

    const auto queries = build_queries(test_ds, test_emb.values, dc.nms_iou);
    const auto raw_queries = build_queries(test_ds, test_raw, dc.nms_iou);
    const KnnConfig knn{dc.background_distance};

    fs::remove_all(ctx.paths.detections());
    fs::create_directories(ctx.paths.detections());
    for (std::size_t n : dc.shots) {
        for (std::size_t r = 0; r < dc.repeats; ++r) {
            const FewShotSample sample = few_shot_sample(train_labels, n, few_shot_seed(ctx.cfg.seed, n, r));
            if (sample.chosen.empty()) throw std::runtime_error("no labeled training proposals for few-shot sampling");
            write_detections(knn_detect(labeled_subset(sample.chosen, train_labels, train_emb.values), queries, knn),
                             ctx.paths.detections() / run_name("ssod_dist", n, r));
            write_detections(knn_detect(labeled_subset(sample.chosen, train_labels, train_raw), raw_queries, knn),
                             ctx.paths.detections() / run_name("raw_baseline", n, r));
        }
    }

    const auto clusters = read_cluster_members(ctx.paths.clusters(), train_emb.refs);
    std::vector<InstanceId> instances;
    for (const auto& o : train_ds.objects) instances.push_back(o.instance_id);
    const auto cluster_labels = label_dominant_clusters(discovery_pr(clusters, train_labels, instances));
    const LabeledSet cluster_set = cluster_labeled_detector(clusters, cluster_labels, train_emb.values);
    write_detections(knn_detect(cluster_set, queries, knn), ctx.paths.detections() / "ssod_cluster.csv");
    ctx.log << "[detect] " << queries.size() << " test queries, " << cluster_labels.size() << " labeled clusters ("
            << cluster_set.size() << " entries)\n";
    stamp(ctx, Stage::Detect, key);
}

// Stage 8 -------------------------------------------------------------------

struct Evaluated {
    std::map<InstanceId, std::optional<double>> per_instance;
    double map = 0.0;
};

Evaluated evaluate_file(const fs::path& path, const Dataset& test, const std::vector<InstanceId>& instances, double iou_th) {
    const auto dets = read_detections(path);
    Evaluated e;
    e.per_instance = evaluate_detections(dets, test.frames, instances, iou_th);
    std::vector<std::optional<double>> aps;
    for (const auto& [_, ap] : e.per_instance) aps.push_back(ap);
    e.map = mean_ap(aps);
    return e;
}

json breakdown_json(const Evaluated& e, const Dataset& ds) {
    json inst = json::array();
    std::map<std::string, std::pair<double, std::size_t>> cats;
    for (const auto& [id, ap] : e.per_instance) {
        inst.push_back({{"instance_id", id}, {"category", ds.category_of(id)}, {"ap", ap ? json(*ap) : json(nullptr)}});
        if (ap) {
            auto& c = cats[ds.category_of(id)];
            c.first += *ap;
            ++c.second;
        }
    }
    json per_cat = json::object();
    for (const auto& [name, v] : cats) per_cat[name] = v.first / double(v.second);
    return json{{"map", e.map}, {"per_category", per_cat}, {"per_instance", inst}};
}

void stage_evaluate(const Context& ctx) {
    const auto& dc = ctx.cfg.detection;
    const std::string key = stage_key(ctx, Stage::Evaluate, json{{"detection", detection_json(dc)}, {"hash", ctx.config_hash}},
                                      {ctx.paths.test_world(), ctx.paths.detections(), ctx.paths.test_embeddings(),
                                       ctx.paths.matches(), ctx.paths.train_world(), ctx.paths.loss_trace()});
    if (is_cached(ctx, Stage::Evaluate, key, {ctx.paths.eval_report(), ctx.paths.few_shot_table()})) {
        ctx.log << "[eval] cached\n";
        return;
    }
    const Dataset test_ds = read_dataset(ctx.paths.test_world());
    const Dataset train_ds = read_dataset(ctx.paths.train_world());
    std::vector<InstanceId> instances;
    for (const auto& o : test_ds.objects) instances.push_back(o.instance_id);

    json report = attribution(ctx);
    report["ap_interpolation"] = "all-points";
    report["eval_iou"] = dc.eval_iou;
    report["baseline"] = "raw-feature baseline (nearest neighbor on L2-normalized descriptors)";

    std::ofstream table(ctx.paths.few_shot_table());
    table << "n,ssod_dist_map,raw_baseline_map\n";
    json sweep = json::array();
    for (std::size_t n : dc.shots) {
        double dist_sum = 0.0, raw_sum = 0.0;
        json dist_runs = json::array(), raw_runs = json::array();
        for (std::size_t r = 0; r < dc.repeats; ++r) {
            const auto d = evaluate_file(ctx.paths.detections() / run_name("ssod_dist", n, r), test_ds, instances, dc.eval_iou);
            const auto b = evaluate_file(ctx.paths.detections() / run_name("raw_baseline", n, r), test_ds, instances, dc.eval_iou);
            dist_sum += d.map;
            raw_sum += b.map;
            dist_runs.push_back(d.map);
            raw_runs.push_back(b.map);
            if (n == dc.featured_shots && r == 0) {
                report["featured_shots"] = {{"n", n}, {"ssod_dist", breakdown_json(d, test_ds)}, {"raw_baseline", breakdown_json(b, test_ds)}};
            }
        }
        const double dist_map = dist_sum / double(dc.repeats), raw_map = raw_sum / double(dc.repeats);
        table << n << ',' << fmt(dist_map) << ',' << fmt(raw_map) << '\n';
        sweep.push_back({{"n", n}, {"ssod_dist_map", dist_map}, {"raw_baseline_map", raw_map},
                         {"ssod_dist_runs", dist_runs}, {"raw_baseline_runs", raw_runs}});
        ctx.log << "[eval] n=" << n << ": SSOD-Dist mAP " << dist_map << ", raw-feature baseline mAP " << raw_map << "\n";
    }
    report["few_shot"] = sweep;

    const auto cluster = evaluate_file(ctx.paths.detections() / "ssod_cluster.csv", test_ds, instances, dc.eval_iou);
    report["ssod_cluster"] = breakdown_json(cluster, test_ds);
    ctx.log << "[eval] cluster-labeled detector mAP " << cluster.map << "\n";

    const EmbeddingTable test_emb = read_embeddings(ctx.paths.test_embeddings());
    const auto sep = embedding_separation(test_emb.values, proposal_labels(test_ds));
    report["embedding_separation"] = {{"mean_intra", sep.mean_intra}, {"mean_inter", sep.mean_inter},
                                      {"intra_pairs", sep.intra_pairs}, {"inter_pairs", sep.inter_pairs}};
    ctx.log << "[eval] held-out mean intra distance " << sep.mean_intra << ", inter " << sep.mean_inter << "\n";

    const auto matches = read_matches(ctx.paths.matches());
    report["association"] = {{"matches", matches.size()},
                             {"same_instance_fraction", same_instance_fraction(matches, train_ds.frames)}};
    write_json(report, ctx.paths.eval_report());
    stamp(ctx, Stage::Evaluate, key);
}

}  // namespace

void run_pipeline(const PipelineConfig& cfg, const PipelineOptions& opts) {
    cfg.validate();
    std::ostream& log = opts.log ? *opts.log : std::cout;
    const Context ctx{cfg, PipelinePaths{cfg.output}, log, opts.use_cache, cfg.hash()};
    std::error_code ec;
    fs::create_directories(cfg.output, ec);
    if (ec) throw ConfigError("cannot create output directory " + cfg.output.string() + ": " + ec.message());

    using StageFn = void (*)(const Context&);
    const std::pair<Stage, StageFn> stages[] = {
        {Stage::Simulate, stage_simulate}, {Stage::Associate, stage_associate}, {Stage::Mine, stage_mine},
        {Stage::Train, stage_train},       {Stage::Embed, stage_embed},         {Stage::Discover, stage_discover},
        {Stage::Detect, stage_detect},     {Stage::Evaluate, stage_evaluate},
    };
    for (const auto& [stage, fn] : stages) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn(ctx);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage_name(stage), e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log << "[" << stage_name(stage) << "] done in " << secs << " s\n";
        if (stage == opts.until) break;
    }
}

}  // namespace ssod
