#pragma once
// JSON serialization of BodyTemplate (schema "template.v1").

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttrbody/body_model.hpp"

namespace ttrbody {

inline constexpr const char* kTemplateSchema = "template.v1";

inline nlohmann::json template_to_json(const BodyTemplate& t) {
    nlohmann::json j;
    j["schema"] = kTemplateSchema;
    j["seed"] = t.seed;
    j["parent"] = t.parent;
    j["rest_offsets"] = std::vector<double>(t.rest_offsets.data(), t.rest_offsets.data() + t.rest_offsets.size());
    std::vector<double> basis;
    basis.reserve(static_cast<std::size_t>(t.shape_basis.size()));
    for (Eigen::Index r = 0; r < t.shape_basis.rows(); ++r)
        for (Eigen::Index c = 0; c < t.shape_basis.cols(); ++c) basis.push_back(t.shape_basis(r, c));
    j["shape_basis"] = basis;
    j["vertex_binding"] = {
        {"bone", t.vertex_bone},
        {"offsets", std::vector<double>(t.vertex_offsets.data(), t.vertex_offsets.data() + t.vertex_offsets.size())}};
    nlohmann::json reg = nlohmann::json::array();
    for (int r = 0; r < t.joint_regressor.outerSize(); ++r)
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(t.joint_regressor, r); it; ++it)
            reg.push_back({it.row(), it.col(), it.value()});
    j["joint_regressor"] = reg;
    return j;
}

inline BodyTemplate template_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema").get<std::string>() != kTemplateSchema) throw FormatError("unexpected template schema");
        BodyTemplate t;
        t.seed = j.at("seed").get<std::uint64_t>();
        t.parent = j.at("parent").get<std::vector<int>>();
        const int n = static_cast<int>(t.parent.size());
        const auto offsets = j.at("rest_offsets").get<std::vector<double>>();
        if (offsets.size() != static_cast<std::size_t>(3 * n)) throw FormatError("rest_offsets must hold 3 reals per joint");
        t.rest_offsets = Eigen::Map<const Points3>(offsets.data(), n, 3);
        const auto basis = j.at("shape_basis").get<std::vector<double>>();
        if (basis.size() != static_cast<std::size_t>(3 * n * kNumBetas)) throw FormatError("shape_basis has the wrong size");
        t.shape_basis =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(basis.data(), 3 * n, kNumBetas);
        const auto& binding = j.at("vertex_binding");
        t.vertex_bone = binding.at("bone").get<std::vector<int>>();
        const auto voff = binding.at("offsets").get<std::vector<double>>();
        if (voff.size() != 3 * t.vertex_bone.size()) throw FormatError("vertex offsets do not match vertex bones");
        t.vertex_offsets = Eigen::Map<const Points3>(voff.data(), static_cast<Eigen::Index>(t.vertex_bone.size()), 3);
        std::vector<Eigen::Triplet<double>> triplets;
        for (const auto& e : j.at("joint_regressor"))
            triplets.emplace_back(e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<double>());
        t.joint_regressor.resize(n, static_cast<Eigen::Index>(t.vertex_bone.size()));
        t.joint_regressor.setFromTriplets(triplets.begin(), triplets.end());
        t.joint_regressor.makeCompressed();
        t.validate();
        return t;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed template: ") + e.what());
    }
}

inline std::string dump_template(const BodyTemplate& t) { return template_to_json(t).dump() + "\n"; }

// Content hash carried by dataset headers so files built on different templates are caught.
inline std::string template_hash(const BodyTemplate& t) { return hex64(fnv1a64(dump_template(t))); }

inline void save_template(const BodyTemplate& t, const std::string& path) { write_file(path, dump_template(t)); }

inline BodyTemplate load_template(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("template is not valid JSON: ") + e.what());
    }
    return template_from_json(j);
}

}  // namespace ttrbody
