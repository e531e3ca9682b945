#pragma once
// Pose error metrics: root-centred MPJPE, similarity (Procrustes) alignment and
// PA-MPJPE, error gaps, and the aggregate MetricsReport.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "ttrbody/body_model.hpp"
#include "ttrbody/errors.hpp"

namespace ttrbody {

struct SimilarityTransform {
    double scale = 1.0;
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    Points3 apply(const Points3& points) const {
        Points3 out = scale * points * rotation.transpose();
        out.rowwise() += translation.transpose();
        return out;
    }
};

inline void check_same_shape(const Joints3D& a, const Joints3D& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("joint sets differ in size: " + std::to_string(a.rows()) + " vs " +
                             std::to_string(b.rows()));
    }
    if (a.rows() == 0) throw DimensionError("empty joint set");
}

inline double mean_joint_distance(const Joints3D& a, const Joints3D& b) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) sum += (a.row(i) - b.row(i)).norm();
    return sum / static_cast<double>(a.rows());
}

// Mean Euclidean joint error after centring both sets on joint 0 (pelvis).
inline double mpjpe(const Joints3D& pred, const Joints3D& gt) {
    check_same_shape(pred, gt);
    Joints3D p = pred.rowwise() - pred.row(0);
    Joints3D g = gt.rowwise() - gt.row(0);
    return mean_joint_distance(p, g);
}

// Closed-form least-squares similarity mapping pred onto gt (Umeyama), restricted
// to proper rotations.
inline SimilarityTransform procrustes_align(const Joints3D& pred, const Joints3D& gt) {
    check_same_shape(pred, gt);
    const Eigen::Index n = pred.rows();
    if (n < 3) throw DegeneracyError("procrustes alignment needs at least 3 points");
    const Eigen::RowVector3d mu_p = pred.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.colwise().mean();
    const Points3 cp = pred.rowwise() - mu_p;
    const Points3 cg = gt.rowwise() - mu_g;

    for (const Points3* set : {&cp, &cg}) {
        Eigen::JacobiSVD<Eigen::MatrixXd> rank_check(*set);
        const auto sv = rank_check.singularValues();
        if (sv[0] <= 0.0 || sv[1] <= 1e-9 * sv[0]) throw DegeneracyError("point set is collinear or coincident");
    }

    const double var_p = cp.squaredNorm() / static_cast<double>(n);
    const Eigen::Matrix3d cov = cg.transpose() * cp / static_cast<double>(n);
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d d = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d[2] = -1.0;

    SimilarityTransform t;
    t.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
    t.scale = svd.singularValues().dot(d) / var_p;
    if (!(t.scale > 0.0)) throw DegeneracyError("alignment produced a non-positive scale");
    t.translation = mu_g.transpose() - t.scale * t.rotation * mu_p.transpose();
    return t;
}

inline double pa_mpjpe(const Joints3D& pred, const Joints3D& gt) {
    const SimilarityTransform t = procrustes_align(pred, gt);
    return mean_joint_distance(t.apply(pred), gt);
}

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

// refined - initial in mm, rounded to 2 decimals; negative means improvement.
inline double gap(double initial_mm, double refined_mm) {
    if (!std::isfinite(initial_mm) || !std::isfinite(refined_mm)) throw NumericError("gap of non-finite values");
    return round2(refined_mm - initial_mm);
}

struct FrameMetric {
    std::int64_t frame_id = 0;
    std::string sequence;
    double mpjpe_mm = 0.0;
    double pa_mpjpe_mm = 0.0;
};

struct ReportConfig {
    std::string label = "teacher";
    double sigma = 0.0;
    std::int64_t epochs = 0;
    std::string weights_hash;
};

struct MetricsReport {
    std::vector<FrameMetric> per_frame;
    double mean_mpjpe_mm = 0.0;
    double mean_pa_mpjpe_mm = 0.0;
    double baseline_mm = 0.0;
    double gap_vs_initial_mm = 0.0;
    ReportConfig config;
};

// Means are a left-to-right fold over per_frame.
inline MetricsReport build_report(std::vector<FrameMetric> per_frame, const ReportConfig& config,
                                  double initial_baseline_mm) {
    if (per_frame.empty()) throw DataError("cannot build a report from zero frames");
    MetricsReport r;
    double sum = 0.0;
    double sum_pa = 0.0;
    for (const auto& f : per_frame) {
        sum += f.mpjpe_mm;
        sum_pa += f.pa_mpjpe_mm;
    }
    r.mean_mpjpe_mm = sum / static_cast<double>(per_frame.size());
    r.mean_pa_mpjpe_mm = sum_pa / static_cast<double>(per_frame.size());
    r.baseline_mm = initial_baseline_mm;
    r.gap_vs_initial_mm = gap(initial_baseline_mm, r.mean_mpjpe_mm);
    r.per_frame = std::move(per_frame);
    r.config = config;
    return r;
}

}  // namespace ttrbody
