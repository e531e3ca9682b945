#pragma once
// Synthetic source/target streams, the simulated 2D detector, frames.v1 I/O and
// batch iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ttrbody/body_model.hpp"
#include "ttrbody/errors.hpp"
#include "ttrbody/nnet.hpp"
#include "ttrbody/util.hpp"

namespace ttrbody {

enum class Split { source, target };

inline std::string to_string(Split s) { return s == Split::source ? "source" : "target"; }

inline Split split_from_string(const std::string& s) {
    if (s == "source") return Split::source;
    if (s == "target") return Split::target;
    throw ConfigError("split must be 'source' or 'target', got '" + s + "'");
}

struct GroundTruth {
    BodyParams body;
    CamParams cam;
    Joints3D joints;
};

struct FrameRecord {
    std::string sequence;
    std::int64_t index = 0;
    Eigen::VectorXd feature;
    Keypoints2D guide;
    std::optional<GroundTruth> gt;
};

struct SequenceStream {
    std::vector<FrameRecord> frames;
    Split split = Split::target;
    std::uint64_t gen_seed = 0;
    std::string template_hash;

    bool empty() const { return frames.empty(); }
    std::size_t size() const { return frames.size(); }
    bool has_ground_truth() const {
        return !frames.empty() && std::all_of(frames.begin(), frames.end(), [](const auto& f) { return f.gt.has_value(); });
    }
};

// A maximal run of consecutive frames sharing a sequence name: frames [begin, end).
struct SequenceRange {
    std::string name;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
};

inline std::vector<SequenceRange> sequence_ranges(const SequenceStream& stream) {
    std::vector<SequenceRange> out;
    for (std::size_t i = 0; i < stream.frames.size(); ++i) {
        if (out.empty() || out.back().name != stream.frames[i].sequence) out.push_back({stream.frames[i].sequence, i, i});
        out.back().end = i + 1;
    }
    return out;
}

// Edge-replicated temporal window of clean features around frame `i` of the stream.
inline TemporalWindow window_at(const SequenceStream& stream, const SequenceRange& range, std::size_t i) {
    TemporalWindow win;
    const auto first = static_cast<long>(range.begin);
    const auto last = static_cast<long>(range.end) - 1;
    for (long d = -kHalfWindow; d <= kHalfWindow; ++d) {
        const long k = std::clamp(static_cast<long>(i) + d, first, last);
        win.frames.push_back(stream.frames[static_cast<std::size_t>(k)].feature);
    }
    return win;
}

// --- generation ------------------------------------------------------------------

struct GenConfig {
    int n_sequences = 40;
    int frames_per_sequence = 120;
    double motion_smoothness = 0.3;     // low-pass coefficient in (0, 1]
    double detector_noise_std = 0.05;   // plane units
    double detector_dropout = 0.05;     // probability a joint is degraded to confidence 0.1
    double feature_nuisance_std = 0.05;
    std::uint64_t seed = 0;             // drives the sequences
    std::uint64_t world_seed = 2024;    // drives the shared embedding and motion basis

    static GenConfig defaults(Split split) {
        GenConfig c;
        if (split == Split::source) c.n_sequences = 80;
        return c;
    }

    void validate() const {
        if (n_sequences < 1) throw ConfigError("n_sequences must be >= 1");
        if (frames_per_sequence < 1) throw ConfigError("frames_per_sequence must be >= 1");
        if (!(motion_smoothness > 0.0 && motion_smoothness <= 1.0)) throw ConfigError("motion_smoothness must lie in (0, 1]");
        if (!(detector_noise_std >= 0.0)) throw ConfigError("detector_noise_std must be >= 0");
        if (!(detector_dropout >= 0.0 && detector_dropout < 1.0)) throw ConfigError("detector_dropout must lie in [0, 1)");
        if (!(feature_nuisance_std >= 0.0)) throw ConfigError("feature_nuisance_std must be >= 0");
    }
};

inline constexpr int kMotionLatentDim = 12;
inline constexpr int kNuisanceDirections = 6;
inline constexpr double kTargetNuisanceGain = 4.0;
inline constexpr double kCamScaleRef = 0.01;
inline constexpr double kAngleBound = 1.5707963267948966;  // pi / 2

// Fixed observation model shared by both splits: motion basis, parameter embedding,
// and the target-domain distortions (embedding rotation, structured nuisance).
struct SyntheticWorld {
    Eigen::MatrixXd pose_basis;       // 51 x latent
    Eigen::MatrixXd embedding;        // 32 x 64
    Eigen::MatrixXd target_rotation;  // 32 x 32, orthogonal
    Eigen::MatrixXd nuisance_dirs;    // 32 x 6, orthonormal columns

    explicit SyntheticWorld(std::uint64_t world_seed) {
        Rng rng(mix_seed(world_seed, 0xB0D1));
        std::normal_distribution<double> normal(0.0, 1.0);
        pose_basis.resize(kThetaDim, kMotionLatentDim);
        for (int r = 0; r < kThetaDim; ++r)
            for (int c = 0; c < kMotionLatentDim; ++c) pose_basis(r, c) = (r < 3 ? 0.05 : 0.1) * normal(rng);
        embedding.resize(kFeatureDim, kOutputDim);
        const double e_std = 1.0 / std::sqrt(8.0);
        for (Eigen::Index k = 0; k < embedding.size(); ++k) embedding.data()[k] = e_std * normal(rng);
        // Cayley transform of a small skew-symmetric matrix.
        Eigen::MatrixXd a(kFeatureDim, kFeatureDim);
        for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = normal(rng);
        a = 0.5 * (a - a.transpose()).eval();
        a *= 0.1 / a.norm() * std::sqrt(static_cast<double>(kFeatureDim));
        const Eigen::MatrixXd id = Eigen::MatrixXd::Identity(kFeatureDim, kFeatureDim);
        target_rotation = (id - 0.5 * a).partialPivLu().solve(id + 0.5 * a);
        Eigen::MatrixXd g(kFeatureDim, kNuisanceDirections);
        for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = normal(rng);
        nuisance_dirs = g.householderQr().householderQ() * Eigen::MatrixXd::Identity(kFeatureDim, kNuisanceDirections);
    }

    // Parameters mapped to unit-ish scale before embedding.
    static Eigen::VectorXd normalized(const BodyParams& body, const CamParams& cam) {
        Eigen::VectorXd n(kOutputDim);
        n.head(kThetaDim) = body.theta;
        n.segment(kThetaDim, kNumBetas) = body.beta;
        n[kThetaDim + kNumBetas] = 5.0 * (cam.scale / kCamScaleRef - 1.0);
        n[kOutputDim - 2] = cam.trans.x();
        n[kOutputDim - 1] = cam.trans.y();
        return n;
    }
};

inline std::string sequence_name(Split split, int index) {
    std::ostringstream ss;
    ss << (split == Split::source ? "src_" : "tgt_");
    ss.width(4);
    ss.fill('0');
    ss << index;
    return ss.str();
}

// Simulated off-the-shelf detector: exact projection plus Gaussian error; the
// confidence decays with the error magnitude and dropped joints fall to 0.1.
inline Keypoints2D simulate_detector(const Joints3D& joints, const CamParams& cam, double noise_std, double dropout,
                                     Rng& rng) {
    Keypoints2D g = project_weak_perspective(joints, cam);
    if (noise_std <= 0.0 && dropout <= 0.0) return g;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (Eigen::Index j = 0; j < g.size(); ++j) {
        const bool dropped = uni(rng) < dropout;
        const double std_j = noise_std * (dropped ? 5.0 : 1.0);
        const Eigen::Vector2d err(std_j * normal(rng), std_j * normal(rng));
        g.points.row(j) += err.transpose();
        if (dropped)
            g.confidence[j] = 0.1;
        else
            g.confidence[j] = noise_std > 0.0 ? std::exp(-err.norm() / noise_std) : 1.0;
    }
    return g;
}

inline SequenceStream gen_synthetic_dataset(const GenConfig& cfg, Split split, const BodyTemplate& tmpl) {
    cfg.validate();
    const SyntheticWorld world(cfg.world_seed);
    const bool target = split == Split::target;
    const Eigen::MatrixXd embed = target ? Eigen::MatrixXd(world.target_rotation * world.embedding) : world.embedding;
    const std::uint64_t split_seed = mix_seed(cfg.seed, target ? 2 : 1);

    SequenceStream stream;
    stream.split = split;
    stream.gen_seed = cfg.seed;
    stream.frames.reserve(static_cast<std::size_t>(cfg.n_sequences) * static_cast<std::size_t>(cfg.frames_per_sequence));

    constexpr double rho = 0.97;
    const double innov = std::sqrt(1.0 - rho * rho);
    for (int s = 0; s < cfg.n_sequences; ++s) {
        Rng rng(mix_seed(split_seed, static_cast<std::uint64_t>(s)));
        std::normal_distribution<double> normal(0.0, 1.0);
        const std::string name = sequence_name(split, s);

        Eigen::VectorXd beta(kNumBetas);
        for (int k = 0; k < kNumBetas; ++k) beta[k] = 0.4 * normal(rng);
        const double scale0 = kCamScaleRef * std::exp(0.1 * normal(rng));
        const Eigen::Vector2d trans0(0.3 * normal(rng), 0.3 * normal(rng));

        Eigen::VectorXd drive(kMotionLatentDim);
        for (int k = 0; k < kMotionLatentDim; ++k) drive[k] = normal(rng);
        Eigen::VectorXd latent = drive;
        Eigen::Vector3d cam_drive = Eigen::Vector3d::Zero();
        Eigen::Vector3d cam_state = Eigen::Vector3d::Zero();

        for (int f = 0; f < cfg.frames_per_sequence; ++f) {
            if (f > 0) {
                for (int k = 0; k < kMotionLatentDim; ++k) drive[k] = rho * drive[k] + innov * normal(rng);
                latent += cfg.motion_smoothness * (drive - latent);
                for (int k = 0; k < 3; ++k) cam_drive[k] = rho * cam_drive[k] + innov * normal(rng);
                cam_state += cfg.motion_smoothness * (cam_drive - cam_state);
            }
            GroundTruth gt;
            gt.body.theta = (world.pose_basis * latent).cwiseMax(-kAngleBound).cwiseMin(kAngleBound);
            gt.body.beta = beta;
            gt.cam.scale = scale0 * std::exp(0.02 * cam_state[0]);
            gt.cam.trans = trans0 + 0.05 * cam_state.tail<2>();
            gt.joints = forward_kinematics(gt.body, tmpl);

            FrameRecord rec;
            rec.sequence = name;
            rec.index = f;
            rec.feature = embed * SyntheticWorld::normalized(gt.body, gt.cam);
            for (int k = 0; k < kFeatureDim; ++k) rec.feature[k] += cfg.feature_nuisance_std * normal(rng);
            if (target) {
                for (int d = 0; d < kNuisanceDirections; ++d)
                    rec.feature += (kTargetNuisanceGain * cfg.feature_nuisance_std * normal(rng)) * world.nuisance_dirs.col(d);
            }
            rec.guide = simulate_detector(gt.joints, gt.cam, cfg.detector_noise_std, cfg.detector_dropout, rng);
            rec.gt = std::move(gt);
            stream.frames.push_back(std::move(rec));
        }
    }
    return stream;
}

// --- frames.v1 -----------------------------------------------------------------------

inline constexpr const char* kFramesSchema = "frames.v1";

namespace detail {

inline nlohmann::json points_json(const Eigen::Ref<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>& m) {
    nlohmann::json arr = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
        arr.push_back(std::move(row));
    }
    return arr;
}

inline nlohmann::json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd vector_from(const nlohmann::json& j, Eigen::Index expected, const char* what, std::size_t line) {
    const auto v = j.get<std::vector<double>>();
    if (static_cast<Eigen::Index>(v.size()) != expected)
        throw FormatError(std::string("'") + what + "' must hold " + std::to_string(expected) + " numbers", line);
    return Eigen::Map<const Eigen::VectorXd>(v.data(), expected);
}

template <int Cols>
Eigen::Matrix<double, Eigen::Dynamic, Cols, Eigen::RowMajor> points_from(const nlohmann::json& j, const char* what,
                                                                           std::size_t line) {
    if (!j.is_array()) throw FormatError(std::string("'") + what + "' must be an array", line);
    Eigen::Matrix<double, Eigen::Dynamic, Cols, Eigen::RowMajor> m(static_cast<Eigen::Index>(j.size()), Cols);
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto row = j[i].get<std::vector<double>>();
        if (row.size() != static_cast<std::size_t>(Cols))
            throw FormatError(std::string("'") + what + "' rows must hold " + std::to_string(Cols) + " numbers", line);
        for (int c = 0; c < Cols; ++c) m(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)];
    }
    return m;
}

}  // namespace detail

inline nlohmann::json frame_to_json(const FrameRecord& f) {
    nlohmann::json j;
    j["sequence"] = f.sequence;
    j["index"] = f.index;
    j["feature"] = detail::vector_json(f.feature);
    j["guide"] = {{"points", detail::points_json(f.guide.points)}, {"conf", detail::vector_json(f.guide.confidence)}};
    if (f.gt) {
        j["gt"] = {{"theta", detail::vector_json(f.gt->body.theta)},
                   {"beta", detail::vector_json(f.gt->body.beta)},
                   {"cam", detail::vector_json(f.gt->cam.as_vector())},
                   {"joints", detail::points_json(f.gt->joints)}};
    }
    return j;
}

inline FrameRecord frame_from_json(const nlohmann::json& j, std::size_t line) {
    if (!j.is_object()) throw FormatError("record must be a JSON object", line);
    for (const char* key : {"sequence", "index", "feature", "guide"})
        if (!j.contains(key)) throw FormatError(std::string("record is missing '") + key + "'", line);
    try {
        FrameRecord f;
        f.sequence = j.at("sequence").get<std::string>();
        f.index = j.at("index").get<std::int64_t>();
        if (f.index < 0) throw FormatError("'index' must be >= 0", line);
        f.feature = detail::vector_from(j.at("feature"), kFeatureDim, "feature", line);
        const auto& g = j.at("guide");
        if (!g.contains("points") || !g.contains("conf")) throw FormatError("'guide' needs 'points' and 'conf'", line);
        f.guide.points = detail::points_from<2>(g.at("points"), "guide.points", line);
        if (f.guide.points.rows() != kNumJoints) throw FormatError("'guide.points' must hold 17 joints", line);
        f.guide.confidence = detail::vector_from(g.at("conf"), kNumJoints, "guide.conf", line);
        try {
            f.guide.validate();
        } catch (const Error& e) {
            throw FormatError(e.what(), line);
        }
        if (j.contains("gt")) {
            const auto& gj = j.at("gt");
            GroundTruth gt;
            gt.body.theta = detail::vector_from(gj.at("theta"), kThetaDim, "gt.theta", line);
            gt.body.beta = detail::vector_from(gj.at("beta"), kNumBetas, "gt.beta", line);
            gt.cam = CamParams::from_vector(detail::vector_from(gj.at("cam"), 3, "gt.cam", line));
            gt.joints = detail::points_from<3>(gj.at("joints"), "gt.joints", line);
            if (gt.joints.rows() != kNumJoints) throw FormatError("'gt.joints' must hold 17 joints", line);
            f.gt = std::move(gt);
        }
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad record: ") + e.what(), line);
    }
}

// Sorts into (sequence, index) order and checks uniqueness and contiguity.
inline void normalize_stream(SequenceStream& stream) {
    std::stable_sort(stream.frames.begin(), stream.frames.end(), [](const FrameRecord& a, const FrameRecord& b) {
        return std::tie(a.sequence, a.index) < std::tie(b.sequence, b.index);
    });
    for (const auto& r : sequence_ranges(stream)) {
        for (std::size_t i = r.begin; i < r.end; ++i) {
            const auto expected = static_cast<std::int64_t>(i - r.begin);
            if (stream.frames[i].index != expected) {
                if (i > r.begin && stream.frames[i].index == stream.frames[i - 1].index)
                    throw DataError("duplicate frame (" + r.name + ", " + std::to_string(stream.frames[i].index) + ")");
                throw DataError("sequence " + r.name + " is not contiguous from 0 (missing index " +
                                std::to_string(expected) + ")");
            }
        }
    }
}

// Stream order contract used by the refinement stage.
inline void check_stream_order(const SequenceStream& stream) {
    for (std::size_t i = 1; i < stream.frames.size(); ++i) {
        const auto& a = stream.frames[i - 1];
        const auto& b = stream.frames[i];
        const bool ok = (a.sequence == b.sequence) ? (b.index == a.index + 1) : (a.sequence < b.sequence && b.index == 0);
        if (!ok) throw DataError("stream is not ordered by (sequence, index) at position " + std::to_string(i));
    }
    if (!stream.frames.empty() && stream.frames.front().index != 0) throw DataError("stream must start at frame index 0");
}

inline std::string dump_stream(const SequenceStream& stream) {
    std::string out;
    nlohmann::json header;
    header["schema"] = kFramesSchema;
    header["gen_seed"] = stream.gen_seed;
    header["split"] = to_string(stream.split);
    header["template_hash"] = stream.template_hash;
    out += header.dump();
    out += '\n';
    for (const auto& f : stream.frames) {
        out += frame_to_json(f).dump();
        out += '\n';
    }
    return out;
}

inline SequenceStream parse_stream(const std::string& text) {
    SequenceStream stream;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("invalid JSON: ") + e.what(), line_no);
        }
        if (!have_header) {
            try {
                if (j.at("schema").get<std::string>() != kFramesSchema) throw FormatError("unexpected schema", line_no);
                stream.gen_seed = j.at("gen_seed").get<std::uint64_t>();
                stream.split = split_from_string(j.at("split").get<std::string>());
                stream.template_hash = j.at("template_hash").get<std::string>();
            } catch (const nlohmann::json::exception& e) {
                throw FormatError(std::string("bad header: ") + e.what(), line_no);
            } catch (const ConfigError& e) {
                throw FormatError(e.what(), line_no);
            }
            have_header = true;
            continue;
        }
        stream.frames.push_back(frame_from_json(j, line_no));
    }
    if (!have_header) throw FormatError("missing frames.v1 header line");
    normalize_stream(stream);
    return stream;
}

inline void save_stream(const SequenceStream& stream, const std::string& path) { write_file(path, dump_stream(stream)); }
inline SequenceStream load_stream(const std::string& path) { return parse_stream(read_file(path)); }

// --- batching ---------------------------------------------------------------------------

struct Batch {
    std::string sequence;
    std::vector<std::size_t> frames;  // indices into SequenceStream::frames
};

struct SequentialMode {};

struct SampledMode {
    std::uint64_t seed = 0;
    int seq_count = 3;
    int frame_count = 8;
    std::uint64_t epoch = 0;
};

using BatchMode = std::variant<SequentialMode, SampledMode>;

// Draws min(k, n) distinct values from [0, n) with a partial Fisher-Yates shuffle.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(k);
    return pool;
}

// Sequential batches never straddle a sequence boundary. Sampled batches draw
// seq_count sequences, then frame_count window centres within each, as a pure
// function of (seed, epoch).
inline std::vector<Batch> iter_batches(const SequenceStream& stream, std::size_t batch_size, const BatchMode& mode) {
    if (stream.empty()) throw DataError("cannot batch an empty stream");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const auto ranges = sequence_ranges(stream);
    std::vector<Batch> out;
    auto emit = [&](const std::string& name, const std::vector<std::size_t>& idx) {
        for (std::size_t i = 0; i < idx.size(); i += batch_size) {
            Batch b{name, {}};
            for (std::size_t k = i; k < std::min(idx.size(), i + batch_size); ++k) b.frames.push_back(idx[k]);
            out.push_back(std::move(b));
        }
    };
    if (std::holds_alternative<SequentialMode>(mode)) {
        for (const auto& r : ranges) {
            std::vector<std::size_t> idx(r.size());
            for (std::size_t i = 0; i < r.size(); ++i) idx[i] = r.begin + i;
            emit(r.name, idx);
        }
        return out;
    }
    const auto& s = std::get<SampledMode>(mode);
    if (s.seq_count < 1 || s.frame_count < 1) throw ConfigError("sampled mode needs positive seq_count and frame_count");
    Rng rng(mix_seed(s.seed, s.epoch));
    for (std::size_t seq : sample_without_replacement(ranges.size(), static_cast<std::size_t>(s.seq_count), rng)) {
        const auto& r = ranges[seq];
        auto centres = sample_without_replacement(r.size(), static_cast<std::size_t>(s.frame_count), rng);
        std::sort(centres.begin(), centres.end());
        for (auto& c : centres) c += r.begin;
        emit(r.name, centres);
    }
    return out;
}

}  // namespace ttrbody
