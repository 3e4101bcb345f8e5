#include "ssod/metriclearn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "binio.hpp"

namespace ssod {

namespace {

constexpr double kMinNorm = 1e-12;

}  // namespace

EmbeddingModel EmbeddingModel::initialize(int input_dim, std::uint64_t seed, int output_dim) {
    if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("model dimensions must be positive");
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(double(input_dim));
    std::uniform_real_distribution<double> u(-bound, bound);
    EmbeddingModel m;
    m.W.resize(output_dim, input_dim);
    for (Eigen::Index r = 0; r < m.W.rows(); ++r)
        for (Eigen::Index c = 0; c < m.W.cols(); ++c) m.W(r, c) = u(rng);
    m.b = Eigen::VectorXd::Zero(output_dim);
    return m;
}

Eigen::VectorXd embed(const EmbeddingModel& model, const Eigen::VectorXd& feature) {
    if (feature.size() != model.input_dim()) throw std::invalid_argument("feature dimension mismatch");
    Eigen::VectorXd u = model.W * feature + model.b;
    const double n = u.norm();
    if (!(n > kMinNorm)) throw DegenerateEmbedding("pre-normalization vector is (near) zero");
    return u / n;
}

Eigen::MatrixXd embed_all(const EmbeddingModel& model, const Eigen::MatrixXd& features) {
    if (features.rows() != model.input_dim()) throw std::invalid_argument("feature dimension mismatch");
    Eigen::MatrixXd u = model.W * features;
    u.colwise() += model.b;
    for (Eigen::Index c = 0; c < u.cols(); ++c) {
        const double n = u.col(c).norm();
        if (!(n > kMinNorm)) throw DegenerateEmbedding("pre-normalization vector is (near) zero");
        u.col(c) /= n;
    }
    return u;
}

double triplet_loss(const Eigen::VectorXd& e_a, const Eigen::VectorXd& e_p, const Eigen::VectorXd& e_n,
                    double margin) {
    return std::max((e_a - e_p).norm() - (e_a - e_n).norm() + margin, 0.0);
}

double triplet_loss(const EmbeddingModel& model, const TripletFeatures& t, double margin) {
    return triplet_loss(embed(model, t.anchor), embed(model, t.positive), embed(model, t.negative), margin);
}

double batch_loss(const EmbeddingModel& model, std::span<const TripletFeatures> batch, double margin) {
    double total = 0.0;
    for (const auto& t : batch) total += triplet_loss(model, t, margin);
    return total;
}

Gradient loss_gradient(const EmbeddingModel& model, const Eigen::MatrixXd& features,
                       std::span<const IndexedTriplet> triplets, double margin, double* loss) {
    if (triplets.empty()) throw std::invalid_argument("loss_gradient needs a nonempty batch");
    Eigen::MatrixXd u = model.W * features;
    u.colwise() += model.b;
    Eigen::VectorXd norms = u.colwise().norm().transpose();
    if ((norms.array() <= kMinNorm).any()) throw DegenerateEmbedding("pre-normalization vector is (near) zero");
    Eigen::MatrixXd e = u.array().rowwise() / norms.transpose().array();

    Eigen::MatrixXd de = Eigen::MatrixXd::Zero(e.rows(), e.cols());
    double total = 0.0;
    for (const auto& t : triplets) {
        const Eigen::VectorXd ap = e.col(t.anchor) - e.col(t.positive);
        const Eigen::VectorXd an = e.col(t.anchor) - e.col(t.negative);
        const double d_ap = ap.norm();
        const double d_an = an.norm();
        const double value = d_ap - d_an + margin;
        if (value <= 0.0) continue;
        total += value;
        // d|x|/dx = x/|x|; zero subgradient where a distance vanishes.
        if (d_ap > 0.0) {
            de.col(t.anchor) += ap / d_ap;
            de.col(t.positive) -= ap / d_ap;
        }
        if (d_an > 0.0) {
            de.col(t.anchor) -= an / d_an;
            de.col(t.negative) += an / d_an;
        }
    }
    if (loss) *loss = total;

    // Back through e = u/|u|: du = (I - e e^T) de / |u|.
    Eigen::RowVectorXd proj = (e.array() * de.array()).colwise().sum();
    Eigen::MatrixXd du = de - e * proj.asDiagonal();
    du = du.array().rowwise() / norms.transpose().array();

    return Gradient{du * features.transpose(), du.rowwise().sum()};
}

Gradient loss_gradient(const EmbeddingModel& model, std::span<const TripletFeatures> batch, double margin,
                       double* loss) {
    if (batch.empty()) throw std::invalid_argument("loss_gradient needs a nonempty batch");
    const Eigen::Index d = model.input_dim();
    Eigen::MatrixXd f(d, Eigen::Index(batch.size() * 3));
    std::vector<IndexedTriplet> idx;
    idx.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Eigen::Index c = Eigen::Index(3 * i);
        f.col(c) = batch[i].anchor;
        f.col(c + 1) = batch[i].positive;
        f.col(c + 2) = batch[i].negative;
        idx.push_back({c, c + 1, c + 2});
    }
    return loss_gradient(model, f, idx, margin, loss);
}

AdamState AdamState::zeros_like(const EmbeddingModel& model) {
    AdamState s;
    s.m_W = s.v_W = Eigen::MatrixXd::Zero(model.W.rows(), model.W.cols());
    s.m_b = s.v_b = Eigen::VectorXd::Zero(model.b.size());
    return s;
}

void adam_step(EmbeddingModel& model, AdamState& s, const Gradient& g, double lr_effective) {
    if (g.W.rows() != model.W.rows() || g.W.cols() != model.W.cols() || g.b.size() != model.b.size() ||
        s.m_W.rows() != model.W.rows() || s.m_W.cols() != model.W.cols() || s.m_b.size() != model.b.size())
        throw std::invalid_argument("adam_step shape mismatch");
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, double(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, double(s.step));

    s.m_W = s.beta1 * s.m_W + (1.0 - s.beta1) * g.W;
    s.v_W = s.beta2 * s.v_W + (1.0 - s.beta2) * g.W.cwiseAbs2();
    s.m_b = s.beta1 * s.m_b + (1.0 - s.beta1) * g.b;
    s.v_b = s.beta2 * s.v_b + (1.0 - s.beta2) * g.b.cwiseAbs2();

    model.W.array() -= lr_effective * (s.m_W.array() / c1) / ((s.v_W.array() / c2).sqrt() + s.eps);
    model.b.array() -= lr_effective * (s.m_b.array() / c1) / ((s.v_b.array() / c2).sqrt() + s.eps);
}

void TrainConfig::validate() const {
    if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("decay must lie in (0, 1]");
    if (decay_interval < 1) throw std::invalid_argument("decay interval must be at least 1");
    if (steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (negatives_per_ordering < 1) throw std::invalid_argument("negatives_per_ordering must be at least 1");
}

double effective_learning_rate(const TrainConfig& cfg, std::int64_t step) {
    return cfg.learning_rate * std::pow(cfg.decay, double(step / cfg.decay_interval));
}

TrainResult train(const std::vector<Frame>& frames, const std::vector<MatchPair>& matches, const TrainConfig& cfg) {
    cfg.validate();
    int d = 0;
    for (const auto& f : frames)
        if (!f.proposals.empty()) {
            d = int(f.proposals.front().feature.size());
            break;
        }
    if (d == 0) throw std::invalid_argument("no proposal features to train on");

    TrainResult result{EmbeddingModel::initialize(d, cfg.seed), {}, 0};
    if (cfg.steps == 0) return result;
    if (matches.empty()) throw std::invalid_argument("train needs a nonempty triplet source");

    FrameIndex index(frames);

    // Location centers, and each match tagged with its two locations.
    std::map<std::int64_t, Eigen::Vector3d> centers;
    for (const auto& f : frames) centers.emplace(f.location_id, f.pose.center());
    std::vector<std::int64_t> locations;
    for (const auto& [id, _] : centers) locations.push_back(id);

    std::map<std::int64_t, std::set<std::int64_t>> neighbors;
    const double r2 = cfg.neighborhood_radius * cfg.neighborhood_radius;
    for (const auto& [a, ca] : centers)
        for (const auto& [b, cb] : centers)
            if ((ca - cb).squaredNorm() <= r2 + 1e-12) neighbors[a].insert(b);

    std::vector<std::pair<std::int64_t, std::int64_t>> match_locs;
    match_locs.reserve(matches.size());
    for (const auto& m : matches)
        match_locs.emplace_back(index.at(m.a.frame_id).location_id, index.at(m.b.frame_id).location_id);

    TripletMiner miner(frames, cfg.negatives_per_ordering);
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick_loc(0, locations.size() - 1);
    AdamState adam = AdamState::zeros_like(result.model);

    for (std::int64_t step = 0; step < cfg.steps; ++step) {
        const auto& hood = neighbors[locations[pick_loc(rng)]];
        std::vector<MatchPair> batch;
        for (std::size_t i = 0; i < matches.size(); ++i)
            if (hood.count(match_locs[i].first) && hood.count(match_locs[i].second)) batch.push_back(matches[i]);
        const auto triplets = miner.mine(batch, rng);
        const double lr = effective_learning_rate(cfg, step);
        if (triplets.empty()) {
            ++result.skipped_steps;
            result.trace.push_back({step, lr, 0.0, 0});
            continue;
        }

        // Gather each distinct proposal once.
        std::map<ProposalRef, Eigen::Index> column;
        for (const auto& t : triplets)
            for (const auto& r : {t.anchor, t.positive, t.negative}) column.emplace(r, 0);
        Eigen::MatrixXd feats(d, Eigen::Index(column.size()));
        Eigen::Index c = 0;
        for (auto& [ref, col] : column) {
            col = c;
            feats.col(c++) = index.proposal(ref).feature;
        }
        std::vector<IndexedTriplet> idx;
        idx.reserve(triplets.size());
        for (const auto& t : triplets) idx.push_back({column[t.anchor], column[t.positive], column[t.negative]});

        double loss = 0.0;
        const Gradient g = loss_gradient(result.model, feats, idx, cfg.margin, &loss);
        adam_step(result.model, adam, g, lr);
        result.trace.push_back({step, lr, loss, triplets.size()});
    }
    return result;
}

void save_model(const EmbeddingModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write model file " + path.string());
    binio::put_magic(os, "SSEM");
    binio::put<std::uint32_t>(os, 1);
    binio::put<std::uint64_t>(os, std::uint64_t(model.input_dim()));
    binio::put<std::uint64_t>(os, std::uint64_t(model.output_dim()));
    for (Eigen::Index r = 0; r < model.W.rows(); ++r)
        for (Eigen::Index c = 0; c < model.W.cols(); ++c) binio::put<double>(os, model.W(r, c));
    for (Eigen::Index r = 0; r < model.b.size(); ++r) binio::put<double>(os, model.b(r));
    if (!os) throw std::runtime_error("failed writing model file " + path.string());
}

EmbeddingModel load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open model file " + path.string());
    binio::expect_magic(is, "SSEM");
    if (const auto version = binio::get<std::uint32_t>(is); version != 1)
        throw std::runtime_error("unsupported model version " + std::to_string(version));
    const auto d = binio::get<std::uint64_t>(is);
    const auto out = binio::get<std::uint64_t>(is);
    if (d == 0 || out == 0 || d > (1u << 20) || out > (1u << 20)) throw std::runtime_error("bad model dimensions");
    EmbeddingModel m;
    m.W.resize(Eigen::Index(out), Eigen::Index(d));
    m.b.resize(Eigen::Index(out));
    for (Eigen::Index r = 0; r < m.W.rows(); ++r)
        for (Eigen::Index c = 0; c < m.W.cols(); ++c) m.W(r, c) = binio::get<double>(is);
    for (Eigen::Index r = 0; r < m.b.size(); ++r) m.b(r) = binio::get<double>(is);
    if (!m.W.allFinite() || !m.b.allFinite()) throw std::runtime_error("model contains non-finite weights");
    return m;
}

void write_loss_trace(const std::vector<LossRecord>& trace, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write loss trace " + path.string());
    os << "step,lr_effective,loss,triplets_in_batch\n";
    char buf[128];
    for (const auto& r : trace) {
        std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%zu\n", static_cast<long long>(r.step), r.lr_effective,
                      r.loss, r.triplets);
        os << buf;
    }
}

}  // namespace ssod
