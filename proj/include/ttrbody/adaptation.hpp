#pragma once
// Collaborative test-time refinement: input corruption, the teacher/learner
// consistency loss, the pre-adaptation loop, and the regeneration-based bilevel
// refinement over a stream.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ttrbody/body_model.hpp"
#include "ttrbody/dataset.hpp"
#include "ttrbody/errors.hpp"
#include "ttrbody/metrics.hpp"
#include "ttrbody/nnet.hpp"
#include "ttrbody/util.hpp"

namespace ttrbody {

// Gaussian corruption strength. sigma_pixel lives on the 0-255 image scale; the
// features are unit scale, so the applied standard deviation is sigma_pixel / 255.
struct NoiseLevel {
    double sigma_pixel = 35.0;

    double sigma_feature() const { return sigma_pixel / 255.0; }

    void validate() const {
        if (!(sigma_pixel >= 0.0) || !std::isfinite(sigma_pixel)) throw ConfigError("sigma must be a finite value >= 0");
    }
};

struct LossWeights {
    double lambda1 = 10.0;  // theta
    double lambda2 = 0.1;   // beta
    double lambda3 = 1.0;   // camera
    double lambda4 = 1.0;   // 2D guide

    void validate() const {
        for (double l : {lambda1, lambda2, lambda3, lambda4})
            if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and >= 0");
    }
};

struct PreAdaptConfig {
    int epochs = 600;
    int sequences_per_epoch = 3;
    int frames_per_sequence = 8;
    NoiseLevel noise;
    LossWeights loss_weights;
    double lr = 1e-5;
    std::uint64_t seed = 0;
    int eval_every = 50;  // stream MPJPE is logged every eval_every epochs and at the last one; 0 disables

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (sequences_per_epoch < 1 || frames_per_sequence < 1) throw ConfigError("sampling counts must be >= 1");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
        noise.validate();
        loss_weights.validate();
    }
};

struct BilevelConfig {
    double lr_inner = 1e-5;
    double lr_outer = 1e-5;
    int steps_per_frame = 1;
    LossWeights loss_weights;
    bool regenerate = true;

    void validate() const {
        if (!(lr_inner >= 0.0) || !(lr_outer >= 0.0)) throw ConfigError("bilevel learning rates must be >= 0");
        if (steps_per_frame < 1) throw ConfigError("steps_per_frame must be >= 1");
        loss_weights.validate();
    }
};

// Name of the sequence the last processed batch belonged to.
struct SequenceBuffer {
    std::optional<std::string> last_sequence_name;
};

inline Eigen::VectorXd corrupt(const Eigen::VectorXd& feature, const NoiseLevel& noise, Rng& rng) {
    noise.validate();
    for (Eigen::Index i = 0; i < feature.size(); ++i)
        if (!std::isfinite(feature[i])) throw NumericError("non-finite feature", static_cast<long>(i));
    Eigen::VectorXd out = feature;
    const double sigma = noise.sigma_feature();
    if (sigma == 0.0) return out;
    std::normal_distribution<double> normal(0.0, sigma);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += normal(rng);
    return out;
}

struct LossTerms {
    double theta = 0.0;  // ||theta_l - theta_r||^2
    double beta = 0.0;
    double cam = 0.0;
    double keypoints = 0.0;  // sum_j c_j ||G_j - proj_j||^2
};

struct PreAdaptLoss {
    double value = 0.0;
    LossTerms terms;
    Eigen::VectorXd g_theta;
    Eigen::VectorXd g_beta;
    Eigen::Vector3d g_cam = Eigen::Vector3d::Zero();
};

inline double weighted_sum(const LossTerms& t, const LossWeights& w) {
    return w.lambda1 * t.theta + w.lambda2 * t.beta + w.lambda3 * t.cam + w.lambda4 * t.keypoints;
}

// L = l1 |theta_l - theta_r|^2 + l2 |beta_l - beta_r|^2 + l3 |C_l - C_r|^2
//   + l4 sum_j conf_j |G_j - C_r(J_r)_j|^2,  J_r = FK(theta_r, beta_r).
// Gradients are with respect to the perturbed outputs.
inline PreAdaptLoss preadapt_loss(const RegressorOutput& labels, const RegressorOutput& perturbed,
                                  const Keypoints2D& guide, const LossWeights& weights, const BodyTemplate& tmpl) {
    weights.validate();
    guide.validate();
    labels.body.validate(tmpl.num_joints());
    perturbed.body.validate(tmpl.num_joints());
    if (guide.size() != tmpl.num_joints()) throw DimensionError("guide joint count does not match the template");
    if (!labels.cam.as_vector().allFinite() || !perturbed.cam.as_vector().allFinite())
        throw NumericError("non-finite camera in loss");

    const BodyJacobians jac = body_jacobians(perturbed.body, perturbed.cam, tmpl);
    const Eigen::VectorXd d_theta = perturbed.body.theta - labels.body.theta;
    const Eigen::VectorXd d_beta = perturbed.body.beta - labels.body.beta;
    const Eigen::Vector3d d_cam = perturbed.cam.as_vector() - labels.cam.as_vector();

    PreAdaptLoss out;
    out.terms.theta = d_theta.squaredNorm();
    out.terms.beta = d_beta.squaredNorm();
    out.terms.cam = d_cam.squaredNorm();
    Points2 g_kp(guide.size(), 2);
    for (Eigen::Index j = 0; j < guide.size(); ++j) {
        const Eigen::RowVector2d r = jac.keypoints.points.row(j) - guide.points.row(j);
        out.terms.keypoints += guide.confidence[j] * r.squaredNorm();
        g_kp.row(j) = 2.0 * weights.lambda4 * guide.confidence[j] * r;
    }
    out.value = weighted_sum(out.terms, weights);
    if (!std::isfinite(out.value)) throw NumericError("non-finite pre-adaptation loss");

    Eigen::VectorXd gt_kp;
    Eigen::VectorXd gb_kp;
    Eigen::Vector3d gc_kp;
    jac.pullback_keypoints(g_kp, gt_kp, gb_kp, gc_kp);
    out.g_theta = 2.0 * weights.lambda1 * d_theta + gt_kp;
    out.g_beta = 2.0 * weights.lambda2 * d_beta + gb_kp;
    out.g_cam = 2.0 * weights.lambda3 * d_cam + gc_kp;
    return out;
}

struct KeypointLoss {
    double value = 0.0;
    Points2 grad;  // d value / d pred.points
};

// Confidence-weighted mean squared 2D error; confidences come from the guide.
inline KeypointLoss keypoint2d_loss(const Keypoints2D& pred, const Keypoints2D& guide) {
    if (pred.size() != guide.size()) throw DimensionError("predicted and guide keypoint counts differ");
    if (pred.size() == 0) throw DimensionError("empty keypoint set");
    guide.validate();
    KeypointLoss out;
    out.grad.resize(pred.size(), 2);
    const double n = static_cast<double>(pred.size());
    for (Eigen::Index j = 0; j < pred.size(); ++j) {
        const Eigen::RowVector2d r = pred.points.row(j) - guide.points.row(j);
        out.value += guide.confidence[j] * r.squaredNorm() / n;
        out.grad.row(j) = 2.0 * guide.confidence[j] * r / n;
    }
    return out;
}

// --- evaluation helpers ------------------------------------------------------------------

struct StreamMetrics {
    double mpjpe_mm = 0.0;
    double pa_mpjpe_mm = 0.0;
    std::vector<FrameMetric> per_frame;
};

inline FrameMetric frame_metric(const FrameRecord& f, const RegressorOutput& out, const BodyTemplate& tmpl) {
    if (!f.gt) throw DataError("frame " + f.sequence + "/" + std::to_string(f.index) + " has no ground truth");
    const Joints3D pred = forward_kinematics(out.body, tmpl);
    return {f.index, f.sequence, mpjpe(pred, f.gt->joints), pa_mpjpe(pred, f.gt->joints)};
}

inline StreamMetrics summarize(std::vector<FrameMetric> per_frame) {
    StreamMetrics m;
    for (const auto& f : per_frame) {
        m.mpjpe_mm += f.mpjpe_mm;
        m.pa_mpjpe_mm += f.pa_mpjpe_mm;
    }
    if (!per_frame.empty()) {
        m.mpjpe_mm /= static_cast<double>(per_frame.size());
        m.pa_mpjpe_mm /= static_cast<double>(per_frame.size());
    }
    m.per_frame = std::move(per_frame);
    return m;
}

// Plain forward pass of a learner over every frame, scored against ground truth.
inline StreamMetrics evaluate_learner(const ModelWeights& w, const SequenceStream& stream, const BodyTemplate& tmpl) {
    std::vector<FrameMetric> per_frame;
    per_frame.reserve(stream.size());
    for (const auto& f : stream.frames) per_frame.push_back(frame_metric(f, learner_forward(w, f.feature), tmpl));
    return summarize(std::move(per_frame));
}

inline StreamMetrics evaluate_teacher(const ModelWeights& teacher, const SequenceStream& stream, const BodyTemplate& tmpl) {
    std::vector<FrameMetric> per_frame;
    per_frame.reserve(stream.size());
    for (const auto& r : sequence_ranges(stream))
        for (std::size_t i = r.begin; i < r.end; ++i)
            per_frame.push_back(frame_metric(stream.frames[i], teacher_forward(teacher, window_at(stream, r, i)), tmpl));
    return summarize(std::move(per_frame));
}

// Frozen teacher outputs for every frame, computed on clean temporal windows.
inline std::vector<RegressorOutput> teacher_labels(const ModelWeights& teacher, const SequenceStream& stream) {
    require_teacher(teacher);
    std::vector<RegressorOutput> labels;
    labels.reserve(stream.size());
    for (const auto& r : sequence_ranges(stream))
        for (std::size_t i = r.begin; i < r.end; ++i) labels.push_back(teacher_forward(teacher, window_at(stream, r, i)));
    return labels;
}

// --- pre-adaptation ------------------------------------------------------------------------

struct EpochLog {
    int epoch = 0;  // 1-based, logged after the epoch's updates
    std::string sequences;
    double loss = 0.0;
    std::optional<double> mpjpe_mm;
    std::optional<double> pa_mpjpe_mm;
};

struct PreAdaptResult {
    ModelWeights fs;
    std::vector<EpochLog> log;
};

// Learner copy f_s trained towards frozen-teacher labels on corrupted inputs,
// one Adam step per sampled batch. f0 is taken by const reference and never touched.
inline PreAdaptResult preadapt_run(const ModelWeights& f0, const ModelWeights& teacher, const SequenceStream& target,
                                   const PreAdaptConfig& cfg, const BodyTemplate& tmpl) {
    cfg.validate();
    if (target.empty()) throw DataError("pre-adaptation needs a non-empty target stream");
    require_learner(f0);
    require_teacher(teacher);

    PreAdaptResult result{deepcopy_weights(f0, Role::fs), {}};
    if (cfg.epochs == 0) return result;

    const auto labels = teacher_labels(teacher, target);
    const bool has_gt = target.has_ground_truth();
    AdamState adam = AdamState::for_size(result.fs.values.size(), cfg.lr);
    Rng noise_rng(mix_seed(cfg.seed, 0xC0441));
    std::vector<double> grad(result.fs.values.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = iter_batches(
            target, static_cast<std::size_t>(cfg.frames_per_sequence),
            SampledMode{cfg.seed, cfg.sequences_per_epoch, cfg.frames_per_sequence, static_cast<std::uint64_t>(epoch)});
        EpochLog entry;
        entry.epoch = epoch + 1;
        double epoch_loss = 0.0;
        for (const auto& batch : batches) {
            std::fill(grad.begin(), grad.end(), 0.0);
            const double inv = 1.0 / static_cast<double>(batch.frames.size());
            double batch_loss = 0.0;
            for (std::size_t idx : batch.frames) {
                const FrameRecord& f = target.frames[idx];
                const RegressorPass pass = regressor_pass(result.fs, corrupt(f.feature, cfg.noise, noise_rng));
                const PreAdaptLoss loss = preadapt_loss(labels[idx], pass.out, f.guide, cfg.loss_weights, tmpl);
                batch_loss += loss.value * inv;
                regressor_backward(result.fs, pass, inv * loss.g_theta, inv * loss.g_beta, inv * loss.g_cam, grad);
            }
            adam_step(adam, result.fs, grad);
            epoch_loss += batch_loss / static_cast<double>(batches.size());
            if (!entry.sequences.empty()) entry.sequences += ';';
            entry.sequences += batch.sequence;
        }
        entry.loss = epoch_loss;
        const bool eval_now =
            has_gt && (epoch + 1 == cfg.epochs || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0));
        if (eval_now) {
            const StreamMetrics m = evaluate_learner(result.fs, target, tmpl);
            entry.mpjpe_mm = m.mpjpe_mm;
            entry.pa_mpjpe_mm = m.pa_mpjpe_mm;
        }
        result.log.push_back(std::move(entry));
    }
    return result;
}

// --- bilevel refinement ------------------------------------------------------------------------

// First-order two-level update: probe = p - lr_inner * inner_grad(p), then
// p <- p - lr_outer * outer_grad(probe), treating d(probe)/d(p) as identity.
template <class InnerGrad, class OuterGrad>
void first_order_bilevel_update(std::span<double> params, double lr_inner, double lr_outer, InnerGrad&& inner_grad,
                                OuterGrad&& outer_grad) {
    if (lr_outer == 0.0) return;
    std::vector<double> probe(params.begin(), params.end());
    if (lr_inner != 0.0) {
        const std::vector<double> gi = inner_grad(std::span<const double>(probe));
        if (gi.size() != probe.size()) throw DimensionError("inner gradient length mismatch");
        for (std::size_t k = 0; k < probe.size(); ++k) probe[k] -= lr_inner * gi[k];
    }
    const std::vector<double> go = outer_grad(std::span<const double>(probe));
    if (go.size() != params.size()) throw DimensionError("outer gradient length mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) params[k] -= lr_outer * go[k];
}

struct BilevelResult {
    RegressorOutput refined;
    double inner_loss = 0.0;  // 2D guide loss before the update
    double outer_loss = 0.0;  // consistency loss at the last probe
};

// Teacher labels may be supplied to skip recomputing them from the window.
inline BilevelResult bilevel_step(ModelWeights& fa, const TemporalWindow& window, const Keypoints2D& guide,
                                  const ModelWeights& teacher, const BilevelConfig& cfg, const BodyTemplate& tmpl,
                                  const RegressorOutput* labels = nullptr) {
    cfg.validate();
    require_learner(fa);
    const RegressorOutput teacher_out = labels ? *labels : teacher_forward(teacher, window);
    const Eigen::VectorXd& feature = window.frames.at(kHalfWindow);

    BilevelResult res;
    auto with_values = [&fa](std::span<const double> values) {
        ModelWeights w = fa;
        w.values.assign(values.begin(), values.end());
        return w;
    };
    auto inner_grad = [&](std::span<const double> values) {
        const ModelWeights w = with_values(values);
        const RegressorPass pass = regressor_pass(w, feature);
        const BodyJacobians jac = body_jacobians(pass.out.body, pass.out.cam, tmpl);
        const KeypointLoss kl = keypoint2d_loss(jac.keypoints, guide);
        res.inner_loss = kl.value;
        Eigen::VectorXd gt, gb;
        Eigen::Vector3d gc;
        jac.pullback_keypoints(kl.grad, gt, gb, gc);
        std::vector<double> g(w.values.size(), 0.0);
        regressor_backward(w, pass, gt, gb, gc, g);
        return g;
    };
    auto outer_grad = [&](std::span<const double> values) {
        const ModelWeights w = with_values(values);
        const RegressorPass pass = regressor_pass(w, feature);
        const PreAdaptLoss loss = preadapt_loss(teacher_out, pass.out, guide, cfg.loss_weights, tmpl);
        res.outer_loss = loss.value;
        std::vector<double> g(w.values.size(), 0.0);
        regressor_backward(w, pass, loss.g_theta, loss.g_beta, loss.g_cam, g);
        return g;
    };
    for (int s = 0; s < cfg.steps_per_frame; ++s)
        first_order_bilevel_update(std::span<double>(fa.values), cfg.lr_inner, cfg.lr_outer, inner_grad, outer_grad);
    for (std::size_t k = 0; k < fa.values.size(); ++k)
        if (!std::isfinite(fa.values[k]))
            throw NumericError("refinement step produced a non-finite weight; lower the learning rates", static_cast<long>(k));
    res.refined = learner_forward(fa, feature);
    if (!res.refined.body.theta.allFinite() || !res.refined.body.beta.allFinite() ||
        !res.refined.cam.as_vector().allFinite())
        throw NumericError("refinement step produced non-finite outputs; lower the learning rates");
    return res;
}

struct FrameLog {
    std::int64_t frame_id = 0;
    std::string sequence;
    double loss = 0.0;
    std::optional<double> mpjpe_mm;
    std::optional<double> pa_mpjpe_mm;
    bool regenerated = false;
};

struct RefinedFrame {
    std::string sequence;
    std::int64_t index = 0;
    RegressorOutput out;
};

struct RefineEvent {
    std::size_t batch_index = 0;
    const std::string& sequence;
    const std::optional<std::string>& buffer_before;
    bool regenerated = false;
    const ModelWeights& fa_before_step;
};

using RefineObserver = std::function<void(const RefineEvent&)>;

struct RefineResult {
    std::vector<RefinedFrame> outputs;
    ModelWeights final_fa;
    std::vector<FrameLog> log;
    SequenceBuffer buffer;
    std::size_t regenerations = 0;
};

// Streams the target one frame per batch. f_a is reset to the pre-adapted
// snapshot whenever the batch's sequence differs from the buffered one (or, with
// regeneration disabled, only before the first batch).
inline RefineResult refine_stream(const ModelWeights& fs, const SequenceStream& stream, const ModelWeights& teacher,
                                  const BilevelConfig& cfg, const BodyTemplate& tmpl,
                                  const RefineObserver& observer = {}) {
    cfg.validate();
    require_learner(fs);
    require_teacher(teacher);
    if (stream.empty()) throw DataError("refinement needs a non-empty stream");
    check_stream_order(stream);

    const auto labels = teacher_labels(teacher, stream);
    const auto ranges = sequence_ranges(stream);
    std::vector<std::size_t> range_of(stream.size());
    for (std::size_t r = 0; r < ranges.size(); ++r)
        for (std::size_t i = ranges[r].begin; i < ranges[r].end; ++i) range_of[i] = r;

    RefineResult result;
    result.final_fa = deepcopy_weights(fs, Role::fa);
    std::size_t batch_index = 0;
    for (const auto& batch : iter_batches(stream, 1, SequentialMode{})) {
        const bool first = !result.buffer.last_sequence_name.has_value();
        const bool changed = first || *result.buffer.last_sequence_name != batch.sequence;
        const bool regenerate = first || (cfg.regenerate && changed);
        if (regenerate) {
            result.final_fa = deepcopy_weights(fs, Role::fa);
            ++result.regenerations;
        }
        if (observer) observer(RefineEvent{batch_index, batch.sequence, result.buffer.last_sequence_name, regenerate,
                                           result.final_fa});
        for (std::size_t idx : batch.frames) {
            const FrameRecord& f = stream.frames[idx];
            const BilevelResult br = bilevel_step(result.final_fa, window_at(stream, ranges[range_of[idx]], idx), f.guide,
                                                  teacher, cfg, tmpl, &labels[idx]);
            FrameLog entry{f.index, f.sequence, br.outer_loss, std::nullopt, std::nullopt, regenerate};
            if (f.gt) {
                const FrameMetric m = frame_metric(f, br.refined, tmpl);
                entry.mpjpe_mm = m.mpjpe_mm;
                entry.pa_mpjpe_mm = m.pa_mpjpe_mm;
            }
            result.log.push_back(std::move(entry));
            result.outputs.push_back({f.sequence, f.index, br.refined});
        }
        result.buffer.last_sequence_name = batch.sequence;
        ++batch_index;
    }
    return result;
}

inline StreamMetrics refined_metrics(const RefineResult& r) {
    std::vector<FrameMetric> per_frame;
    for (const auto& e : r.log) {
        if (!e.mpjpe_mm) throw DataError("refinement log carries no ground-truth metrics");
        per_frame.push_back({e.frame_id, e.sequence, *e.mpjpe_mm, *e.pa_mpjpe_mm});
    }
    return summarize(std::move(per_frame));
}

}  // namespace ttrbody
