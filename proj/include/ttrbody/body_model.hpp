#pragma once
// Simplified differentiable parametric body: a 17-joint kinematic tree driven by
// per-joint axis-angle rotations (theta) and 10 linear shape coefficients (beta),
// a 96-vertex rigidly bound mesh, and weak-perspective projection to 2D.
//
// Conventions: 3D coordinates are millimeters in a camera-centred frame, the
// projection drops Z, and joint i always has parent[i] < i (root is joint 0).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Sparse>

#include "ttrbody/errors.hpp"
#include "ttrbody/util.hpp"

namespace ttrbody {

inline constexpr int kNumJoints = 17;
inline constexpr int kNumBetas = 10;
inline constexpr int kNumVertices = 96;
inline constexpr int kThetaDim = 3 * kNumJoints;
inline constexpr int kCamDim = 3;  // (scale, tx, ty)

using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points2 = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using Joints3D = Points3;

inline const std::array<const char*, kNumJoints> kJointNames = {
    "pelvis",     "neck",       "head",       "l_hip",      "l_knee",  "l_ankle",
    "r_hip",      "r_knee",     "r_ankle",    "l_clavicle", "l_shoulder", "l_elbow",
    "l_wrist",    "r_clavicle", "r_shoulder", "r_elbow",    "r_wrist"};

struct BodyParams {
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(kThetaDim);  // radians, 3 per joint
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(kNumBetas);

    void validate(int num_joints = kNumJoints) const {
        if (theta.size() != 3 * num_joints)
            throw DimensionError("theta has " + std::to_string(theta.size()) + " entries, expected " +
                                 std::to_string(3 * num_joints));
        if (beta.size() != kNumBetas)
            throw DimensionError("beta has " + std::to_string(beta.size()) + " entries, expected 10");
        for (Eigen::Index i = 0; i < theta.size(); ++i)
            if (!std::isfinite(theta[i])) throw InvalidParameterError("non-finite theta[" + std::to_string(i) + "]");
        for (Eigen::Index i = 0; i < beta.size(); ++i)
            if (!std::isfinite(beta[i])) throw InvalidParameterError("non-finite beta[" + std::to_string(i) + "]");
    }
};

// Weak-perspective camera: p2d = scale * (X, Y) + trans.
struct CamParams {
    double scale = 1.0;
    Eigen::Vector2d trans = Eigen::Vector2d::Zero();

    Eigen::Vector3d as_vector() const { return {scale, trans.x(), trans.y()}; }
    static CamParams from_vector(const Eigen::Vector3d& v) { return {v[0], {v[1], v[2]}}; }

    void validate() const {
        if (!std::isfinite(scale) || !trans.allFinite()) throw InvalidCameraError("non-finite camera parameters");
        if (!(scale > 0.0)) throw InvalidCameraError("camera scale must be positive, got " + std::to_string(scale));
    }
};

struct Keypoints2D {
    Points2 points;
    Eigen::VectorXd confidence;

    Eigen::Index size() const { return points.rows(); }

    void validate() const {
        if (confidence.size() != points.rows())
            throw DimensionError("keypoint confidence count does not match point count");
        if (!points.allFinite()) throw NumericError("non-finite 2D keypoint");
        for (Eigen::Index i = 0; i < confidence.size(); ++i)
            if (!(confidence[i] >= 0.0 && confidence[i] <= 1.0))
                throw InvalidParameterError("keypoint confidence outside [0,1] at joint " + std::to_string(i));
    }
};

struct Mesh {
    Points3 vertices;
};

struct BodyTemplate {
    std::uint64_t seed = 0;
    std::vector<int> parent;  // parent[0] == -1
    Points3 rest_offsets;     // bone offsets from the parent joint, J x 3
    Eigen::MatrixXd shape_basis;  // (3J) x 10, rows 3j..3j+2 shift offset j
    std::vector<int> vertex_bone;
    Points3 vertex_offsets;  // local to the bound joint frame
    Eigen::SparseMatrix<double, Eigen::RowMajor> joint_regressor;  // J x V

    int num_joints() const { return static_cast<int>(parent.size()); }
    int num_vertices() const { return static_cast<int>(vertex_bone.size()); }

    Eigen::Vector3d offset(int joint, const Eigen::VectorXd& beta) const {
        return rest_offsets.row(joint).transpose() + shape_basis.middleRows(3 * joint, 3) * beta;
    }

    void validate() const;
    static BodyTemplate generate(std::uint64_t seed);
};

// --- rotations -------------------------------------------------------------

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d k;
    k << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
    return k;
}

inline constexpr double kSmallAngle = 1e-8;

// Rodrigues' formula; second-order series below kSmallAngle.
inline Eigen::Matrix3d rodrigues(const Eigen::Vector3d& v) {
    const double angle = v.norm();
    const Eigen::Matrix3d k = skew(v);
    if (angle < kSmallAngle) return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
    const double half_sin = std::sin(0.5 * angle);
    const double a = std::sin(angle) / angle;
    const double b = 2.0 * half_sin * half_sin / (angle * angle);  // (1 - cos) / angle^2
    return Eigen::Matrix3d::Identity() + a * k + b * k * k;
}

// dR/dv_k for k = 0..2, given R = rodrigues(v).
inline std::array<Eigen::Matrix3d, 3> rodrigues_derivatives(const Eigen::Vector3d& v, const Eigen::Matrix3d& r) {
    std::array<Eigen::Matrix3d, 3> out;
    const double angle2 = v.squaredNorm();
    const Eigen::Matrix3d k = skew(v);
    if (std::sqrt(angle2) < kSmallAngle) {
        for (int i = 0; i < 3; ++i) {
            const Eigen::Matrix3d e = skew(Eigen::Vector3d::Unit(i));
            out[static_cast<std::size_t>(i)] = e + 0.5 * (e * k + k * e);
        }
        return out;
    }
    const Eigen::Matrix3d i_minus_r = Eigen::Matrix3d::Identity() - r;
    for (int i = 0; i < 3; ++i) {
        const Eigen::Vector3d col = i_minus_r.col(i);
        out[static_cast<std::size_t>(i)] = ((v[i] * k + skew(v.cross(col))) / angle2) * r;
    }
    return out;
}

// --- kinematics --------------------------------------------------------------

// Full kinematic state; FK, skinning and Jacobians all derive from this.
struct PoseState {
    std::vector<Eigen::Matrix3d> local;
    std::vector<Eigen::Matrix3d> global;
    Joints3D joints;
};

inline void check_params(const BodyParams& params, const BodyTemplate& tmpl) {
    if (tmpl.num_joints() <= 0) throw DimensionError("empty body template");
    params.validate(tmpl.num_joints());
}

inline PoseState pose_state(const BodyParams& params, const BodyTemplate& tmpl) {
    check_params(params, tmpl);
    const int n = tmpl.num_joints();
    PoseState s;
    s.local.resize(static_cast<std::size_t>(n));
    s.global.resize(static_cast<std::size_t>(n));
    s.joints.resize(n, 3);
    for (int i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        s.local[ui] = rodrigues(params.theta.segment<3>(3 * i));
        const Eigen::Vector3d off = tmpl.offset(i, params.beta);
        const int p = tmpl.parent[ui];
        if (p < 0) {
            s.global[ui] = s.local[ui];
            s.joints.row(i) = off.transpose();
        } else {
            const auto up = static_cast<std::size_t>(p);
            s.global[ui] = s.global[up] * s.local[ui];
            s.joints.row(i) = s.joints.row(p) + (s.global[up] * off).transpose();
        }
    }
    return s;
}

inline Joints3D forward_kinematics(const BodyParams& params, const BodyTemplate& tmpl) {
    return pose_state(params, tmpl).joints;
}

inline Mesh skin_mesh(const BodyParams& params, const BodyTemplate& tmpl) {
    const PoseState s = pose_state(params, tmpl);
    Mesh mesh;
    mesh.vertices.resize(tmpl.num_vertices(), 3);
    for (int v = 0; v < tmpl.num_vertices(); ++v) {
        const int b = tmpl.vertex_bone[static_cast<std::size_t>(v)];
        mesh.vertices.row(v) =
            s.joints.row(b) + (s.global[static_cast<std::size_t>(b)] * tmpl.vertex_offsets.row(v).transpose()).transpose();
    }
    return mesh;
}

inline Joints3D regress_joints(const Mesh& mesh, const BodyTemplate& tmpl) {
    if (mesh.vertices.rows() != tmpl.joint_regressor.cols())
        throw DimensionError("mesh vertex count does not match joint regressor");
    return Joints3D(tmpl.joint_regressor * mesh.vertices);
}

inline Keypoints2D project_weak_perspective(const Joints3D& joints, const CamParams& cam) {
    cam.validate();
    Keypoints2D out;
    out.points.resize(joints.rows(), 2);
    for (Eigen::Index i = 0; i < joints.rows(); ++i) {
        out.points(i, 0) = cam.scale * joints(i, 0) + cam.trans.x();
        out.points(i, 1) = cam.scale * joints(i, 1) + cam.trans.y();
    }
    out.confidence = Eigen::VectorXd::Ones(joints.rows());
    return out;
}

// Dense derivatives of the body/camera map. Rows index flattened outputs
// (joint-major: 3i + axis for 3D, 2i + axis for 2D).
struct BodyJacobians {
    Joints3D joints;
    Keypoints2D keypoints;
    Eigen::MatrixXd joints_theta;    // 3J x 3J
    Eigen::MatrixXd joints_beta;     // 3J x 10
    Eigen::MatrixXd keypoints_cam;   // 2J x 3, columns (scale, tx, ty)
    double cam_scale = 1.0;          // d(keypoint xy)/d(joint xy) = scale * I

    // Pulls a gradient on the 2D keypoints back to theta, beta and camera.
    void pullback_keypoints(const Points2& grad_kp, Eigen::VectorXd& g_theta, Eigen::VectorXd& g_beta,
                            Eigen::Vector3d& g_cam) const {
        const Eigen::Index n = joints.rows();
        Eigen::VectorXd g_joints = Eigen::VectorXd::Zero(3 * n);
        Eigen::VectorXd g_kp(2 * n);
        for (Eigen::Index i = 0; i < n; ++i) {
            g_joints[3 * i] = cam_scale * grad_kp(i, 0);
            g_joints[3 * i + 1] = cam_scale * grad_kp(i, 1);
            g_kp[2 * i] = grad_kp(i, 0);
            g_kp[2 * i + 1] = grad_kp(i, 1);
        }
        g_theta = joints_theta.transpose() * g_joints;
        g_beta = joints_beta.transpose() * g_joints;
        g_cam = keypoints_cam.transpose() * g_kp;
    }
};

inline BodyJacobians body_jacobians(const BodyParams& params, const CamParams& cam, const BodyTemplate& tmpl) {
    const PoseState s = pose_state(params, tmpl);
    const int n = tmpl.num_joints();
    BodyJacobians jac;
    jac.joints = s.joints;
    jac.keypoints = project_weak_perspective(s.joints, cam);
    jac.cam_scale = cam.scale;
    jac.joints_theta = Eigen::MatrixXd::Zero(3 * n, 3 * n);
    jac.joints_beta = Eigen::MatrixXd::Zero(3 * n, kNumBetas);
    jac.keypoints_cam = Eigen::MatrixXd::Zero(2 * n, 3);

    // M[a][k] = G_parent(a) * dR_a/dtheta_ak * G_a^T maps (p_i - p_a) to dp_i/dtheta_ak.
    std::vector<std::array<Eigen::Matrix3d, 3>> lever(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
        const auto ua = static_cast<std::size_t>(a);
        const auto d = rodrigues_derivatives(params.theta.segment<3>(3 * a), s.local[ua]);
        const int p = tmpl.parent[ua];
        const Eigen::Matrix3d gp = p < 0 ? Eigen::Matrix3d::Identity() : s.global[static_cast<std::size_t>(p)];
        for (std::size_t k = 0; k < 3; ++k) lever[ua][k] = gp * d[k] * s.global[ua].transpose();
    }

    for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d pi = s.joints.row(i).transpose();
        // shape: every offset on the root path contributes G_parent * S
        for (int m = i; m >= 0; m = tmpl.parent[static_cast<std::size_t>(m)]) {
            const int p = tmpl.parent[static_cast<std::size_t>(m)];
            const Eigen::Matrix3d gp = p < 0 ? Eigen::Matrix3d::Identity() : s.global[static_cast<std::size_t>(p)];
            jac.joints_beta.middleRows(3 * i, 3) += gp * tmpl.shape_basis.middleRows(3 * m, 3);
        }
        for (int a = tmpl.parent[static_cast<std::size_t>(i)]; a >= 0; a = tmpl.parent[static_cast<std::size_t>(a)]) {
            const Eigen::Vector3d arm = pi - s.joints.row(a).transpose();
            for (int k = 0; k < 3; ++k)
                jac.joints_theta.block<3, 1>(3 * i, 3 * a + k) = lever[static_cast<std::size_t>(a)][static_cast<std::size_t>(k)] * arm;
        }
        jac.keypoints_cam(2 * i, 0) = pi.x();
        jac.keypoints_cam(2 * i + 1, 0) = pi.y();
        jac.keypoints_cam(2 * i, 1) = 1.0;
        jac.keypoints_cam(2 * i + 1, 2) = 1.0;
    }

    auto check = [](const Eigen::MatrixXd& m, const char* what) {
        for (Eigen::Index k = 0; k < m.size(); ++k)
            if (!std::isfinite(m.data()[k])) throw NumericError(std::string("non-finite entry in ") + what, static_cast<long>(k));
    };
    check(jac.joints_theta, "d joints / d theta");
    check(jac.joints_beta, "d joints / d beta");
    check(jac.keypoints_cam, "d keypoints / d cam");
    return jac;
}

// --- template ----------------------------------------------------------------

inline void BodyTemplate::validate() const {
    const int n = num_joints();
    if (n <= 0) throw ConfigError("template has no joints");
    if (parent[0] != -1) throw ConfigError("template root must have parent -1");
    for (int i = 1; i < n; ++i) {
        const int p = parent[static_cast<std::size_t>(i)];
        if (p < 0 || p >= i) throw ConfigError("template parent[" + std::to_string(i) + "] must lie in [0, i)");
    }
    if (rest_offsets.rows() != n) throw DimensionError("rest_offsets row count does not match joints");
    if (shape_basis.rows() != 3 * n || shape_basis.cols() != kNumBetas)
        throw DimensionError("shape_basis must be (3J) x 10");
    const int v = num_vertices();
    if (vertex_offsets.rows() != v) throw DimensionError("vertex offsets do not match vertex bindings");
    for (int b : vertex_bone)
        if (b < 0 || b >= n) throw ConfigError("vertex bound to unknown joint " + std::to_string(b));
    if (joint_regressor.rows() != n || joint_regressor.cols() != v)
        throw DimensionError("joint_regressor must be J x V");
    for (int r = 0; r < n; ++r) {
        double sum = 0.0;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(joint_regressor, r); it; ++it) {
            if (it.value() < 0.0) throw ConfigError("joint_regressor has a negative weight");
            sum += it.value();
        }
        if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("joint_regressor row " + std::to_string(r) + " does not sum to 1");
    }
    BodyParams rest;
    rest.theta = Eigen::VectorXd::Zero(3 * n);
    const Joints3D fk = forward_kinematics(rest, *this);
    const Joints3D reg = regress_joints(skin_mesh(rest, *this), *this);
    if ((fk - reg).cwiseAbs().maxCoeff() > 1e-6)
        throw ConfigError("joint_regressor does not reproduce rest joints");
}

// Deterministic template. The skeleton is fixed; the seed drives the shape basis
// and the orientation of each vertex ring. Each non-root joint carries an
// octahedral ring of 6 vertices centred on the joint, so the ring mean is the
// joint for every pose and shape. Hips are purely lateral and mirrored, which
// makes the pelvis the mean of the two hip rings.
inline BodyTemplate BodyTemplate::generate(std::uint64_t seed) {
    static constexpr std::array<int, kNumJoints> parents = {-1, 0, 1, 0, 3, 4, 0, 6, 7, 1, 9, 10, 11, 1, 13, 14, 15};
    static constexpr std::array<std::array<double, 3>, kNumJoints> offsets = {{
        {0.0, 0.0, 0.0},        // pelvis
        {0.0, 520.0, -10.0},    // neck
        {0.0, 190.0, 30.0},     // head
        {95.0, 0.0, 0.0},       // l_hip
        {5.0, -420.0, 10.0},    // l_knee
        {0.0, -410.0, -30.0},   // l_ankle
        {-95.0, 0.0, 0.0},      // r_hip
        {-5.0, -420.0, 10.0},   // r_knee
        {0.0, -410.0, -30.0},   // r_ankle
        {70.0, -25.0, -5.0},    // l_clavicle
        {100.0, -15.0, 0.0},    // l_shoulder
        {40.0, -270.0, -10.0},  // l_elbow
        {20.0, -250.0, 30.0},   // l_wrist
        {-70.0, -25.0, -5.0},   // r_clavicle
        {-100.0, -15.0, 0.0},   // r_shoulder
        {-40.0, -270.0, -10.0}, // r_elbow
        {-20.0, -250.0, 30.0},  // r_wrist
    }};
    static constexpr std::array<double, kNumJoints> radii = {0.0,  60.0, 90.0, 80.0, 55.0, 45.0, 80.0, 55.0, 45.0,
                                                             50.0, 50.0, 40.0, 35.0, 50.0, 50.0, 40.0, 35.0};
    constexpr int l_hip = 3;
    constexpr int r_hip = 6;

    Rng rng(mix_seed(seed, 0x7e3a));
    std::normal_distribution<double> normal(0.0, 1.0);

    BodyTemplate t;
    t.seed = seed;
    t.parent.assign(parents.begin(), parents.end());
    t.rest_offsets.resize(kNumJoints, 3);
    for (int j = 0; j < kNumJoints; ++j)
        for (int c = 0; c < 3; ++c) t.rest_offsets(j, c) = offsets[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];

    // ||S_j beta|| <= ||S_j||_F ||beta|| <= 0.1 |o_j| for unit beta.
    t.shape_basis = Eigen::MatrixXd::Zero(3 * kNumJoints, kNumBetas);
    for (int j = 1; j < kNumJoints; ++j) {
        if (j == r_hip) continue;
        const double len = t.rest_offsets.row(j).norm();
        const int rows = (j == l_hip) ? 1 : 3;
        Eigen::MatrixXd m(rows, kNumBetas);
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
        t.shape_basis.block(3 * j, 0, rows, kNumBetas) = 0.1 * len * m / m.norm();
    }
    t.shape_basis.row(3 * r_hip) = -t.shape_basis.row(3 * l_hip);

    t.vertex_bone.reserve(kNumVertices);
    t.vertex_offsets.resize(kNumVertices, 3);
    int v = 0;
    for (int j = 1; j < kNumJoints; ++j) {
        Eigen::Vector3d axis(normal(rng), normal(rng), normal(rng));
        const Eigen::Matrix3d orient = rodrigues(0.5 * axis);
        const double r = radii[static_cast<std::size_t>(j)];
        for (int k = 0; k < 6; ++k) {
            const double sign = (k % 2 == 0) ? 1.0 : -1.0;
            t.vertex_bone.push_back(j);
            t.vertex_offsets.row(v++) = (sign * r * orient.col(k / 2)).transpose();
        }
    }

    std::vector<Eigen::Triplet<double>> triplets;
    for (int j = 1; j < kNumJoints; ++j)
        for (int k = 0; k < 6; ++k) triplets.emplace_back(j, 6 * (j - 1) + k, 1.0 / 6.0);
    for (int hip : {l_hip, r_hip})
        for (int k = 0; k < 6; ++k) triplets.emplace_back(0, 6 * (hip - 1) + k, 1.0 / 12.0);
    t.joint_regressor.resize(kNumJoints, kNumVertices);
    t.joint_regressor.setFromTriplets(triplets.begin(), triplets.end());
    t.joint_regressor.makeCompressed();
    return t;
}

}  // namespace ttrbody
