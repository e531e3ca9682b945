#pragma once
// Small tanh MLP regressors with hand-written reverse mode, the learner/teacher
// heads built on them, Adam, and the weights.v1 file format.
//
// Weight layout: for each layer l, the (dims[l+1] x dims[l]) matrix in row-major
// order followed by its dims[l+1] biases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "ttrbody/body_model.hpp"
#include "ttrbody/errors.hpp"
#include "ttrbody/util.hpp"

namespace ttrbody {

inline constexpr int kFeatureDim = 32;
inline constexpr int kOutputDim = kThetaDim + kNumBetas + kCamDim;  // 64
inline constexpr int kHalfWindow = 2;
inline constexpr int kWindowSize = 2 * kHalfWindow + 1;
inline constexpr int kTeacherInputDim = 2 * kFeatureDim;
inline constexpr double kMinCamScale = 1e-3;
inline constexpr int kWeightsVersion = 1;

inline const std::vector<int> kLearnerDims = {kFeatureDim, 64, 64, kOutputDim};
inline const std::vector<int> kTeacherDims = {kTeacherInputDim, 64, 64, kOutputDim};

enum class Role { f0, fs, fa, teacher };

inline std::string to_string(Role r) {
    switch (r) {
        case Role::f0: return "f0";
        case Role::fs: return "fs";
        case Role::fa: return "fa";
        case Role::teacher: return "teacher";
    }
    return "?";
}

inline Role role_from_string(const std::string& s) {
    if (s == "f0") return Role::f0;
    if (s == "fs") return Role::fs;
    if (s == "fa") return Role::fa;
    if (s == "teacher") return Role::teacher;
    throw FormatError("unknown role_tag '" + s + "'");
}

inline bool is_learner_role(Role r) { return r != Role::teacher; }

inline std::size_t parameter_count(const std::vector<int>& dims) {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        n += static_cast<std::size_t>(dims[i]) * static_cast<std::size_t>(dims[i + 1]) + static_cast<std::size_t>(dims[i + 1]);
    return n;
}

struct ModelWeights {
    std::vector<int> layer_dims;
    std::vector<double> values;
    Role role = Role::f0;
    int version = kWeightsVersion;
    std::uint64_t seed = 0;

    std::size_t num_layers() const { return layer_dims.empty() ? 0 : layer_dims.size() - 1; }

    void validate() const {
        if (layer_dims.size() < 2) throw ConfigError("a network needs at least an input and an output dimension");
        for (int d : layer_dims)
            if (d <= 0) throw ConfigError("layer dimensions must be positive");
        if (values.size() != parameter_count(layer_dims))
            throw DimensionError("weights hold " + std::to_string(values.size()) + " values, layout needs " +
                                 std::to_string(parameter_count(layer_dims)));
        if (layer_dims.back() != kOutputDim)
            throw ConfigError("regressor output dimension must be " + std::to_string(kOutputDim));
    }
};

inline ModelWeights init_weights(const std::vector<int>& layer_dims, std::uint64_t seed, Role role = Role::f0) {
    if (layer_dims.size() < 2) throw ConfigError("layer_dims needs at least two entries");
    if (layer_dims.back() != kOutputDim)
        throw ConfigError("final dimension must be " + std::to_string(kOutputDim) + " (theta|beta|cam)");
    ModelWeights w;
    w.layer_dims = layer_dims;
    w.role = role;
    w.seed = seed;
    w.values.reserve(parameter_count(layer_dims));
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const int fan_in = layer_dims[l];
        const int fan_out = layer_dims[l + 1];
        if (fan_in <= 0 || fan_out <= 0) throw ConfigError("layer dimensions must be positive");
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> uni(-a, a);
        for (int k = 0; k < fan_in * fan_out; ++k) w.values.push_back(uni(rng));
        w.values.insert(w.values.end(), static_cast<std::size_t>(fan_out), 0.0);
    }
    return w;
}

inline ModelWeights deepcopy_weights(const ModelWeights& w, std::optional<Role> retag = std::nullopt) {
    ModelWeights copy = w;
    if (retag) copy.role = *retag;
    return copy;
}

// --- MLP core ----------------------------------------------------------------

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct MlpCache {
    std::vector<Eigen::VectorXd> activations;  // [0] = input, [l] = tanh output of hidden layer l
    Eigen::VectorXd output;                    // raw linear output
};

inline MlpCache mlp_forward(const ModelWeights& w, const Eigen::VectorXd& input) {
    if (input.size() != w.layer_dims.front())
        throw DimensionError("network input has " + std::to_string(input.size()) + " entries, expected " +
                             std::to_string(w.layer_dims.front()));
    MlpCache cache;
    cache.activations.reserve(w.num_layers());
    cache.activations.push_back(input);
    std::size_t offset = 0;
    Eigen::VectorXd a = input;
    for (std::size_t l = 0; l < w.num_layers(); ++l) {
        const int in = w.layer_dims[l];
        const int out = w.layer_dims[l + 1];
        Eigen::Map<const RowMatrix> W(w.values.data() + offset, out, in);
        offset += static_cast<std::size_t>(in * out);
        Eigen::Map<const Eigen::VectorXd> b(w.values.data() + offset, out);
        offset += static_cast<std::size_t>(out);
        Eigen::VectorXd z = W * a + b;
        if (l + 1 == w.num_layers()) {
            cache.output = std::move(z);
        } else {
            a = z.array().tanh().matrix();
            cache.activations.push_back(a);
        }
    }
    return cache;
}

// Accumulates d(loss)/d(values) into grad given d(loss)/d(raw output).
inline void mlp_backward(const ModelWeights& w, const MlpCache& cache, const Eigen::VectorXd& grad_output,
                         std::span<double> grad, Eigen::VectorXd* grad_input = nullptr) {
    if (grad.size() != w.values.size()) throw DimensionError("gradient buffer does not match weights");
    if (grad_output.size() != w.layer_dims.back()) throw DimensionError("output gradient has the wrong size");
    std::vector<std::size_t> offsets(w.num_layers());
    std::size_t offset = 0;
    for (std::size_t l = 0; l < w.num_layers(); ++l) {
        offsets[l] = offset;
        offset += static_cast<std::size_t>(w.layer_dims[l] * w.layer_dims[l + 1] + w.layer_dims[l + 1]);
    }
    Eigen::VectorXd delta = grad_output;  // d loss / d z_l
    for (std::size_t l = w.num_layers(); l-- > 0;) {
        const int in = w.layer_dims[l];
        const int out = w.layer_dims[l + 1];
        const Eigen::VectorXd& a_in = cache.activations[l];
        Eigen::Map<RowMatrix> gW(grad.data() + offsets[l], out, in);
        Eigen::Map<Eigen::VectorXd> gb(grad.data() + offsets[l] + static_cast<std::size_t>(in * out), out);
        gW.noalias() += delta * a_in.transpose();
        gb += delta;
        if (l == 0 && grad_input == nullptr) break;
        Eigen::Map<const RowMatrix> W(w.values.data() + offsets[l], out, in);
        Eigen::VectorXd back = W.transpose() * delta;
        if (l == 0) {
            *grad_input = std::move(back);
        } else {
            delta = back.array() * (1.0 - a_in.array().square());
        }
    }
}

// --- regressor heads -----------------------------------------------------------

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct RegressorOutput {
    BodyParams body;
    CamParams cam;
};

// raw = theta(51) | beta(10) | cam(3); cam scale = softplus(raw) + 1e-3.
inline RegressorOutput decode_output(const Eigen::VectorXd& raw) {
    if (raw.size() != kOutputDim) throw DimensionError("regressor output must have 64 entries");
    RegressorOutput out;
    out.body.theta = raw.head(kThetaDim);
    out.body.beta = raw.segment(kThetaDim, kNumBetas);
    const double s = raw[kThetaDim + kNumBetas];
    out.cam.scale = softplus(s) + kMinCamScale;
    out.cam.trans = raw.tail<2>();
    return out;
}

// Gradient on (theta, beta, cam) mapped back onto the raw output vector.
inline Eigen::VectorXd raw_output_grad(const Eigen::VectorXd& raw, const Eigen::VectorXd& g_theta,
                                       const Eigen::VectorXd& g_beta, const Eigen::Vector3d& g_cam) {
    if (g_theta.size() != kThetaDim || g_beta.size() != kNumBetas)
        throw DimensionError("upstream gradient has the wrong shape");
    Eigen::VectorXd g(kOutputDim);
    g.head(kThetaDim) = g_theta;
    g.segment(kThetaDim, kNumBetas) = g_beta;
    g[kThetaDim + kNumBetas] = g_cam[0] * sigmoid(raw[kThetaDim + kNumBetas]);
    g[kOutputDim - 2] = g_cam[1];
    g[kOutputDim - 1] = g_cam[2];
    return g;
}

struct RegressorPass {
    MlpCache cache;
    RegressorOutput out;
};

inline void require_learner(const ModelWeights& w) {
    if (!is_learner_role(w.role)) throw ConfigError("expected a learner network, got role " + to_string(w.role));
    if (w.layer_dims.front() != kFeatureDim) throw DimensionError("learner input dimension must be 32");
}

inline void require_teacher(const ModelWeights& w) {
    if (w.role != Role::teacher) throw ConfigError("expected a teacher network, got role " + to_string(w.role));
    if (w.layer_dims.front() != kTeacherInputDim) throw DimensionError("teacher input dimension must be 64");
}

inline RegressorPass regressor_pass(const ModelWeights& w, const Eigen::VectorXd& input) {
    for (Eigen::Index i = 0; i < input.size(); ++i)
        if (!std::isfinite(input[i])) throw NumericError("non-finite network input", static_cast<long>(i));
    RegressorPass p;
    p.cache = mlp_forward(w, input);
    p.out = decode_output(p.cache.output);
    return p;
}

inline void regressor_backward(const ModelWeights& w, const RegressorPass& pass, const Eigen::VectorXd& g_theta,
                               const Eigen::VectorXd& g_beta, const Eigen::Vector3d& g_cam, std::span<double> grad) {
    mlp_backward(w, pass.cache, raw_output_grad(pass.cache.output, g_theta, g_beta, g_cam), grad);
}

inline RegressorOutput learner_forward(const ModelWeights& w, const Eigen::VectorXd& feature) {
    require_learner(w);
    return regressor_pass(w, feature).out;
}

inline std::vector<double> learner_backward(const ModelWeights& w, const Eigen::VectorXd& feature,
                                            const Eigen::VectorXd& g_theta, const Eigen::VectorXd& g_beta,
                                            const Eigen::Vector3d& g_cam) {
    require_learner(w);
    const RegressorPass pass = regressor_pass(w, feature);
    std::vector<double> grad(w.values.size(), 0.0);
    regressor_backward(w, pass, g_theta, g_beta, g_cam, grad);
    return grad;
}

// 2j+1 feature vectors centred on the current frame.
struct TemporalWindow {
    std::vector<Eigen::VectorXd> frames;

    // Edge-replicated window around `center` within one sequence's features.
    static TemporalWindow gather(std::span<const Eigen::VectorXd> sequence, std::size_t center,
                                 int half_window = kHalfWindow) {
        if (sequence.empty() || center >= sequence.size()) throw DimensionError("window centre outside the sequence");
        TemporalWindow win;
        const auto last = static_cast<long>(sequence.size()) - 1;
        for (long d = -half_window; d <= half_window; ++d) {
            const long k = std::clamp(static_cast<long>(center) + d, 0L, last);
            win.frames.push_back(sequence[static_cast<std::size_t>(k)]);
        }
        return win;
    }
};

// Temporal aggregation: (window mean, centre frame - mean).
inline Eigen::VectorXd teacher_input(const TemporalWindow& window) {
    if (window.frames.size() != static_cast<std::size_t>(kWindowSize))
        throw DimensionError("temporal window must hold " + std::to_string(kWindowSize) + " frames");
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(kFeatureDim);
    for (const auto& f : window.frames) {
        if (f.size() != kFeatureDim) throw DimensionError("window frame must have 32 entries");
        mean += f;
    }
    mean /= static_cast<double>(kWindowSize);
    Eigen::VectorXd in(kTeacherInputDim);
    in.head(kFeatureDim) = mean;
    in.tail(kFeatureDim) = window.frames[kHalfWindow] - mean;
    return in;
}

inline RegressorOutput teacher_forward(const ModelWeights& w, const TemporalWindow& window) {
    require_teacher(w);
    return regressor_pass(w, teacher_input(window)).out;
}

inline std::vector<double> teacher_backward(const ModelWeights& w, const TemporalWindow& window,
                                            const Eigen::VectorXd& g_theta, const Eigen::VectorXd& g_beta,
                                            const Eigen::Vector3d& g_cam) {
    require_teacher(w);
    const RegressorPass pass = regressor_pass(w, teacher_input(window));
    std::vector<double> grad(w.values.size(), 0.0);
    regressor_backward(w, pass, g_theta, g_beta, g_cam, grad);
    return grad;
}

// --- Adam ----------------------------------------------------------------------

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_size(std::size_t n, double lr = 1e-5) {
        AdamState s;
        s.m.assign(n, 0.0);
        s.v.assign(n, 0.0);
        s.lr = lr;
        return s;
    }
};

inline void adam_step(AdamState& state, std::span<double> values, std::span<const double> grad) {
    if (grad.size() != values.size() || state.m.size() != values.size() || state.v.size() != values.size())
        throw DimensionError("adam: gradient, moments and weights must have equal length");
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!std::isfinite(grad[i])) throw NumericError("adam: non-finite gradient", static_cast<long>(i));
    ++state.t;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

inline void adam_step(AdamState& state, ModelWeights& w, std::span<const double> grad) {
    adam_step(state, std::span<double>(w.values), grad);
}

// --- weights.v1 ------------------------------------------------------------------

inline constexpr const char* kWeightsSchema = "weights.v1";

inline std::string dump_weights(const ModelWeights& w) {
    nlohmann::json j;
    j["schema"] = kWeightsSchema;
    j["version"] = w.version;
    j["role_tag"] = to_string(w.role);
    j["seed"] = w.seed;
    j["layer_dims"] = w.layer_dims;
    const auto bytes = pack_f64_le(w.values);
    j["values"] = base64_encode(bytes);
    return j.dump() + "\n";
}

inline ModelWeights parse_weights(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.at("schema").get<std::string>() != kWeightsSchema) throw FormatError("unexpected weights schema");
        ModelWeights w;
        w.version = j.at("version").get<int>();
        if (w.version != kWeightsVersion) throw FormatError("unsupported weights version " + std::to_string(w.version));
        w.role = role_from_string(j.at("role_tag").get<std::string>());
        w.seed = j.at("seed").get<std::uint64_t>();
        w.layer_dims = j.at("layer_dims").get<std::vector<int>>();
        const auto bytes = base64_decode(j.at("values").get<std::string>());
        w.values = unpack_f64_le(bytes);
        w.validate();
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed weights file: ") + e.what());
    }
}

inline void save_weights(const ModelWeights& w, const std::string& path) { write_file(path, dump_weights(w)); }
inline ModelWeights load_weights(const std::string& path) { return parse_weights(read_file(path)); }

inline std::string weights_hash(const ModelWeights& w) { return hex64(fnv1a64(dump_weights(w))); }

}  // namespace ttrbody
