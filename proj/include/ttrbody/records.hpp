#pragma once
// Run artifacts: CSV logs, JSON Lines predictions, report.v1 and the
// (epoch x sigma) grid table.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttrbody/adaptation.hpp"
#include "ttrbody/metrics.hpp"

namespace ttrbody {

inline std::string format_real(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string format_fixed2(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", round2(x));
    return std::string(buf) == "-0.00" ? "0.00" : buf;
}

inline std::string optional_cell(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

// --- CSV logs ---

inline std::string preadapt_log_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,sequence,loss,mpjpe_mm,pa_mpjpe_mm,regenerated_flag\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch) + "," + e.sequences + "," + format_real(e.loss) + "," + optional_cell(e.mpjpe_mm) +
               "," + optional_cell(e.pa_mpjpe_mm) + ",0\n";
    }
    return out;
}

inline std::string refine_log_csv(const std::vector<FrameLog>& log) {
    std::string out = "frame_id,sequence,loss,mpjpe_mm,pa_mpjpe_mm,regenerated_flag\n";
    for (const auto& e : log) {
        out += std::to_string(e.frame_id) + "," + e.sequence + "," + format_real(e.loss) + "," +
               optional_cell(e.mpjpe_mm) + "," + optional_cell(e.pa_mpjpe_mm) + "," + (e.regenerated ? "1" : "0") + "\n";
    }
    return out;
}

// --- predictions (JSON Lines) ---

inline constexpr const char* kPredictionsSchema = "predictions.v1";

inline std::string dump_predictions(const std::vector<RefinedFrame>& frames, const std::string& weights_hash) {
    std::string out = nlohmann::json{{"schema", kPredictionsSchema}, {"weights_hash", weights_hash}}.dump() + "\n";
    for (const auto& f : frames) {
        nlohmann::json j;
        j["sequence"] = f.sequence;
        j["index"] = f.index;
        j["theta"] = detail::vector_json(f.out.body.theta);
        j["beta"] = detail::vector_json(f.out.body.beta);
        j["cam"] = detail::vector_json(f.out.cam.as_vector());
        out += j.dump() + "\n";
    }
    return out;
}

struct Predictions {
    std::string weights_hash;
    std::vector<RefinedFrame> frames;
};

inline Predictions parse_predictions(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    Predictions p;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("invalid JSON: ") + e.what(), line_no);
        }
        if (!header) {
            if (!j.is_object() || j.value("schema", "") != kPredictionsSchema)
                throw FormatError("expected a predictions.v1 header", line_no);
            p.weights_hash = j.value("weights_hash", "");
            header = true;
            continue;
        }
        try {
            RefinedFrame f;
            f.sequence = j.at("sequence").get<std::string>();
            f.index = j.at("index").get<std::int64_t>();
            f.out.body.theta = detail::vector_from(j.at("theta"), kThetaDim, "theta", line_no);
            f.out.body.beta = detail::vector_from(j.at("beta"), kNumBetas, "beta", line_no);
            f.out.cam = CamParams::from_vector(detail::vector_from(j.at("cam"), kCamDim, "cam", line_no));
            p.frames.push_back(std::move(f));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("bad prediction record: ") + e.what(), line_no);
        }
    }
    if (!header) throw FormatError("empty predictions file", 1);
    return p;
}

// Scores predictions against a ground-truth stream; every stream frame needs
// exactly one prediction and no extra ids are allowed.
inline std::vector<FrameMetric> score_predictions(const Predictions& pred, const SequenceStream& stream,
                                                  const BodyTemplate& tmpl) {
    using Key = std::pair<std::string, std::int64_t>;
    std::map<Key, const RefinedFrame*> by_id;
    for (const auto& f : pred.frames) {
        if (!by_id.emplace(Key{f.sequence, f.index}, &f).second)
            throw DataError("duplicate prediction for " + f.sequence + "/" + std::to_string(f.index));
    }
    std::vector<std::string> missing;
    std::set<Key> seen;
    std::vector<FrameMetric> out;
    for (const auto& f : stream.frames) {
        const Key k{f.sequence, f.index};
        seen.insert(k);
        const auto it = by_id.find(k);
        if (it == by_id.end()) {
            missing.push_back(f.sequence + "/" + std::to_string(f.index));
            continue;
        }
        out.push_back(frame_metric(f, it->second->out, tmpl));
    }
    std::vector<std::string> extra;
    for (const auto& [k, v] : by_id)
        if (!seen.count(k)) extra.push_back(k.first + "/" + std::to_string(k.second));
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "frame ids differ between predictions and dataset";
        auto list = [&msg](const char* what, const std::vector<std::string>& ids) {
            if (ids.empty()) return;
            msg += std::string("; ") + what + ":";
            for (const auto& id : ids) msg += " " + id;
        };
        list("missing predictions", missing);
        list("unknown ids", extra);
        throw DataError(msg);
    }
    return out;
}

// --- report.v1 ---

inline constexpr const char* kReportSchema = "report.v1";

inline nlohmann::json report_to_json(const MetricsReport& r) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : r.per_frame)
        frames.push_back({{"frame_id", f.frame_id}, {"sequence", f.sequence}, {"mpjpe_mm", f.mpjpe_mm},
                          {"pa_mpjpe_mm", f.pa_mpjpe_mm}});
    return {{"schema", kReportSchema},
            {"config",
             {{"label", r.config.label},
              {"sigma", r.config.sigma},
              {"epochs", r.config.epochs},
              {"weights_hash", r.config.weights_hash}}},
            {"mean_mpjpe_mm", r.mean_mpjpe_mm},
            {"mean_pa_mpjpe_mm", r.mean_pa_mpjpe_mm},
            {"baseline_mm", r.baseline_mm},
            {"gap_vs_initial_mm", r.gap_vs_initial_mm},
            {"per_frame", frames}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema").get<std::string>() != kReportSchema) throw FormatError("not a report.v1 document", 1);
        MetricsReport r;
        const auto& c = j.at("config");
        r.config.label = c.at("label").get<std::string>();
        r.config.sigma = c.at("sigma").get<double>();
        r.config.epochs = c.at("epochs").get<std::int64_t>();
        r.config.weights_hash = c.at("weights_hash").get<std::string>();
        r.mean_mpjpe_mm = j.at("mean_mpjpe_mm").get<double>();
        r.mean_pa_mpjpe_mm = j.at("mean_pa_mpjpe_mm").get<double>();
        r.baseline_mm = j.at("baseline_mm").get<double>();
        r.gap_vs_initial_mm = j.at("gap_vs_initial_mm").get<double>();
        for (const auto& f : j.at("per_frame"))
            r.per_frame.push_back({f.at("frame_id").get<std::int64_t>(), f.at("sequence").get<std::string>(),
                                   f.at("mpjpe_mm").get<double>(), f.at("pa_mpjpe_mm").get<double>()});
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad report: ") + e.what(), 1);
    }
}

inline std::string dump_report(const MetricsReport& r) { return report_to_json(r).dump(2) + "\n"; }

inline MetricsReport parse_report(const std::string& text) {
    try {
        return report_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("invalid JSON: ") + e.what(), 1);
    }
}

// One row per label, one (mpjpe, gap) column pair per (epoch, sigma), both axes
// ascending. Cells absent from the input runs are left empty.
inline std::string grid_csv(const std::vector<MetricsReport>& reports) {
    std::set<std::int64_t> epochs;
    std::set<double> sigmas;
    std::vector<std::string> labels;
    std::map<std::tuple<std::string, std::int64_t, double>, const MetricsReport*> cells;
    for (const auto& r : reports) {
        epochs.insert(r.config.epochs);
        sigmas.insert(r.config.sigma);
        if (std::find(labels.begin(), labels.end(), r.config.label) == labels.end()) labels.push_back(r.config.label);
        if (!cells.emplace(std::tuple{r.config.label, r.config.epochs, r.config.sigma}, &r).second)
            throw DataError("two runs share label " + r.config.label + ", epochs " + std::to_string(r.config.epochs) +
                            " and sigma " + format_real(r.config.sigma));
    }
    std::string out = "label";
    for (auto e : epochs)
        for (double s : sigmas) {
            const std::string tag = "ep" + std::to_string(e) + "_sigma" + format_real(s);
            out += "," + tag + "_mpjpe_mm," + tag + "_gap_mm";
        }
    out += "\n";
    for (const auto& label : labels) {
        out += label;
        for (auto e : epochs)
            for (double s : sigmas) {
                const auto it = cells.find({label, e, s});
                if (it == cells.end())
                    out += ",,";
                else
                    out += "," + format_fixed2(it->second->mean_mpjpe_mm) + "," +
                           format_fixed2(it->second->gap_vs_initial_mm);
            }
        out += "\n";
    }
    return out;
}

}  // namespace ttrbody
