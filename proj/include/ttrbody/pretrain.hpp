#pragma once
// Supervised training of the initial learner (f0) and the temporal teacher on a
// labelled source stream.

#include <cstdint>
#include <numeric>
#include <vector>

#include "ttrbody/adaptation.hpp"
#include "ttrbody/dataset.hpp"
#include "ttrbody/nnet.hpp"

namespace ttrbody {

struct PretrainConfig {
    int epochs = 80;
    double lr = 1e-3;
    int batch_size = 32;
    double learner_input_noise = 0.05;  // std of Gaussian noise on learner training features
    LossWeights loss_weights;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learner_input_noise >= 0.0)) throw ConfigError("learner_input_noise must be >= 0");
        loss_weights.validate();
    }
};

struct Backbones {
    ModelWeights learner;
    ModelWeights teacher;
};

inline Backbones pretrain_backbones(const SequenceStream& source, const PretrainConfig& cfg, const BodyTemplate& tmpl) {
    cfg.validate();
    if (source.empty()) throw DataError("pretraining needs a non-empty source stream");
    if (!source.has_ground_truth()) throw DataError("pretraining needs ground truth on every source frame");

    Backbones b{init_weights(kLearnerDims, mix_seed(cfg.seed, 1), Role::f0),
                init_weights(kTeacherDims, mix_seed(cfg.seed, 2), Role::teacher)};
    if (cfg.epochs == 0) return b;

    const auto ranges = sequence_ranges(source);
    std::vector<TemporalWindow> windows;
    std::vector<RegressorOutput> labels;
    std::vector<Keypoints2D> guides;
    windows.reserve(source.size());
    for (const auto& r : ranges) {
        for (std::size_t i = r.begin; i < r.end; ++i) {
            const GroundTruth& gt = *source.frames[i].gt;
            windows.push_back(window_at(source, r, i));
            labels.push_back({gt.body, gt.cam});
            guides.push_back(project_weak_perspective(gt.joints, gt.cam));
        }
    }

    AdamState learner_adam = AdamState::for_size(b.learner.values.size(), cfg.lr);
    AdamState teacher_adam = AdamState::for_size(b.teacher.values.size(), cfg.lr);
    std::vector<double> g_learner(b.learner.values.size());
    std::vector<double> g_teacher(b.teacher.values.size());
    Rng noise_rng(mix_seed(cfg.seed, 3));
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<std::size_t> order(source.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        order = sample_without_replacement(order.size(), order.size(), shuffle_rng);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(stop - start);
            std::fill(g_learner.begin(), g_learner.end(), 0.0);
            std::fill(g_teacher.begin(), g_teacher.end(), 0.0);
            for (std::size_t k = start; k < stop; ++k) {
                const std::size_t idx = order[k];
                Eigen::VectorXd x = source.frames[idx].feature;
                if (cfg.learner_input_noise > 0.0)
                    for (Eigen::Index d = 0; d < x.size(); ++d) x[d] += cfg.learner_input_noise * noise(noise_rng);
                const RegressorPass lp = regressor_pass(b.learner, x);
                const PreAdaptLoss ll = preadapt_loss(labels[idx], lp.out, guides[idx], cfg.loss_weights, tmpl);
                regressor_backward(b.learner, lp, inv * ll.g_theta, inv * ll.g_beta, inv * ll.g_cam, g_learner);

                const RegressorPass tp = regressor_pass(b.teacher, teacher_input(windows[idx]));
                const PreAdaptLoss tl = preadapt_loss(labels[idx], tp.out, guides[idx], cfg.loss_weights, tmpl);
                regressor_backward(b.teacher, tp, inv * tl.g_theta, inv * tl.g_beta, inv * tl.g_cam, g_teacher);
            }
            adam_step(learner_adam, b.learner, g_learner);
            adam_step(teacher_adam, b.teacher, g_teacher);
        }
    }
    return b;
}

}  // namespace ttrbody
