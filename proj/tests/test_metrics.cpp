#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "ttrbody/records.hpp"

using namespace ttrbody;
using namespace ttrbody::testing;

namespace {

Joints3D random_joints(std::mt19937_64& rng, int n = kNumJoints, double spread = 300.0) {
    std::normal_distribution<double> d(0.0, spread);
    Joints3D j(n, 3);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) j(i, k) = d(rng);
    return j;
}

Joints3D similarity(const Joints3D& p, double s, const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
    Joints3D out = s * p * r.transpose();
    out.rowwise() += t.transpose();
    return out;
}

}  // namespace

TEST(Mpjpe, HandExamples) {
    Joints3D a = Joints3D::Zero(3, 3);
    a.row(1) << 1, 0, 0;
    a.row(2) << 0, 1, 0;
    EXPECT_EQ(mpjpe(a, a), 0.0);

    Joints3D b = a;
    b.row(1) << 1, 3, 4;  // one joint off by 5 after centring
    EXPECT_DOUBLE_EQ(mpjpe(b, a), 5.0 / 3.0);

    // the pelvis offset cancels out
    Joints3D shifted = a;
    shifted.rowwise() += Eigen::RowVector3d(10, -20, 5);
    EXPECT_DOUBLE_EQ(mpjpe(shifted, a), 0.0);

    Joints3D p = Joints3D::Zero(kNumJoints, 3), g = Joints3D::Zero(kNumJoints, 3);
    p.row(4) << 3, 0, 0;
    p.row(9) << 0, 4, 0;
    EXPECT_DOUBLE_EQ(mpjpe(p, g), 7.0 / 17.0);
}

TEST(Mpjpe, RejectsMismatchedOrEmptySets) {
    EXPECT_THROW(mpjpe(Joints3D::Zero(17, 3), Joints3D::Zero(16, 3)), DimensionError);
    EXPECT_THROW(mpjpe(Joints3D(0, 3), Joints3D(0, 3)), DimensionError);
}

TEST(Procrustes, RecoversAnExactSimilarity) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.5, 2.0), tu(-100.0, 100.0);
    for (int t = 0; t < 50; ++t) {
        const Joints3D gt = random_joints(rng);
        const double s = u(rng);
        const Eigen::Matrix3d r = random_rotation(rng);
        const Eigen::Vector3d tr(tu(rng), tu(rng), tu(rng));
        const Joints3D pred = similarity(gt, s, r, tr);
        const SimilarityTransform fit = procrustes_align(pred, gt);
        EXPECT_NEAR(fit.scale, 1.0 / s, 1e-9);
        EXPECT_LE((fit.rotation - r.transpose()).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_LE(pa_mpjpe(pred, gt), 1e-9);
        EXPECT_NEAR(fit.rotation.determinant(), 1.0, 1e-12);
    }
    const Joints3D gt = random_joints(rng);
    const SimilarityTransform id = procrustes_align(gt, gt);
    EXPECT_NEAR(id.scale, 1.0, 1e-12);
    EXPECT_LE((id.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(id.translation.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Procrustes, NeverBeatenByRandomSimilarities) {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> logs(-0.3, 0.3), tu(-30.0, 30.0);
    for (int inst = 0; inst < 3; ++inst) {
        const Joints3D gt = random_joints(rng);
        Joints3D pred = similarity(gt, 1.1, random_rotation(rng), {5, 6, 7});
        pred += random_joints(rng, kNumJoints, 40.0);
        const double best = pa_mpjpe(pred, gt);
        const SimilarityTransform fit = procrustes_align(pred, gt);
        // least-squares objective is minimal at the closed form, so compare that objective
        const double fit_sq = (fit.apply(pred) - gt).squaredNorm();
        for (int k = 0; k < 20000; ++k) {
            const Eigen::Vector3d axis = Eigen::Vector3d::Random().normalized();
            const Eigen::Matrix3d dr = Eigen::AngleAxisd(0.2 * std::abs(logs(rng)), axis).toRotationMatrix();
            SimilarityTransform cand;
            cand.scale = fit.scale * std::exp(logs(rng));
            cand.rotation = dr * fit.rotation;
            cand.translation = fit.translation + Eigen::Vector3d(tu(rng), tu(rng), tu(rng));
            EXPECT_GE((cand.apply(pred) - gt).squaredNorm(), fit_sq - 1e-9 * fit_sq) << "candidate " << k;
        }
        EXPECT_GE(best, 0.0);
    }
}

TEST(Procrustes, AlignedErrorNeverExceedsCentredError) {
    std::mt19937_64 rng(23);
    for (int t = 0; t < 1000; ++t) {
        const Joints3D a = random_joints(rng), b = random_joints(rng);
        EXPECT_LE(pa_mpjpe(a, b), mpjpe(a, b) + 1e-9);
    }
}

TEST(Procrustes, InvariantToSimilarityOfPrediction) {
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> u(0.3, 3.0), tu(-500.0, 500.0);
    for (int t = 0; t < 100; ++t) {
        const Joints3D a = random_joints(rng), b = random_joints(rng);
        const double base = pa_mpjpe(a, b);
        const Joints3D moved =
            similarity(a, u(rng), random_rotation(rng), Eigen::Vector3d(tu(rng), tu(rng), tu(rng)));
        EXPECT_NEAR(pa_mpjpe(moved, b), base, 1e-9 * std::max(1.0, base));
        // translating the prediction leaves the pelvis-centred error alone
        Joints3D shifted = a;
        shifted.rowwise() += Eigen::RowVector3d(tu(rng), tu(rng), tu(rng));
        EXPECT_NEAR(mpjpe(shifted, b), mpjpe(a, b), 1e-9);
    }
}

TEST(Procrustes, DegenerateSetsAreRejected) {
    Joints3D same = Joints3D::Zero(17, 3);
    std::mt19937_64 rng(25);
    const Joints3D gt = random_joints(rng);
    EXPECT_THROW(pa_mpjpe(same, gt), DegeneracyError);
    Joints3D line(17, 3);
    for (int i = 0; i < 17; ++i) line.row(i) << i, 2.0 * i, -i;
    EXPECT_THROW(pa_mpjpe(line, gt), DegeneracyError);
    EXPECT_THROW(pa_mpjpe(gt.topRows(2), gt.topRows(2)), DegeneracyError);
}

TEST(Gap, RoundedDifferenceExamples) {
    EXPECT_DOUBLE_EQ(gap(98.25, 63.72), -34.53);
    EXPECT_DOUBLE_EQ(gap(98.25, 76.44), -21.81);
    EXPECT_DOUBLE_EQ(gap(50.0, 50.0), 0.0);
    EXPECT_DOUBLE_EQ(gap(40.0, 41.234), 1.23);
    EXPECT_THROW(gap(std::nan(""), 1.0), NumericError);
}

TEST(Report, MeansAreLeftToRightFolds) {
    ReportConfig cfg;
    const MetricsReport one = build_report({{0, "a", 10.0, 4.0}}, cfg, 12.0);
    EXPECT_EQ(one.mean_mpjpe_mm, 10.0);
    EXPECT_EQ(one.gap_vs_initial_mm, -2.0);
    const MetricsReport two = build_report({{0, "a", 10.0, 4.0}, {1, "a", 20.0, 6.0}}, cfg, 12.0);
    EXPECT_EQ(two.mean_mpjpe_mm, 15.0);
    EXPECT_EQ(two.mean_pa_mpjpe_mm, 5.0);

    std::mt19937_64 rng(26);
    std::uniform_real_distribution<double> u(0.0, 100.0);
    std::vector<FrameMetric> frames;
    double sum = 0.0;
    for (int i = 0; i < 999; ++i) {
        frames.push_back({i, "s", u(rng), 1.0});
        sum += frames.back().mpjpe_mm;
    }
    EXPECT_EQ(build_report(frames, cfg, 50.0).mean_mpjpe_mm, sum / 999.0);
    EXPECT_THROW(build_report({}, cfg, 1.0), DataError);
}

TEST(Report, JsonRoundTripIsExact) {
    ReportConfig cfg{"bilevel", 35.0, 600, "00ff00ff00ff00ff"};
    const MetricsReport r =
        build_report({{0, "tgt_0000", 1.0 / 3.0, 0.1}, {1, "tgt_0000", 2.0 / 7.0, 0.2}}, cfg, 40.117);
    const std::string text = dump_report(r);
    const MetricsReport back = parse_report(text);
    EXPECT_EQ(dump_report(back), text);
    EXPECT_EQ(back.mean_mpjpe_mm, r.mean_mpjpe_mm);
    EXPECT_EQ(back.per_frame[1].mpjpe_mm, 2.0 / 7.0);
    EXPECT_EQ(back.config.label, "bilevel");
    EXPECT_THROW(parse_report("{\"schema\":\"report.v0\"}"), FormatError);
    EXPECT_THROW(parse_report("not json"), FormatError);
}

TEST(Grid, ColumnsAscendAndCellsRound) {
    auto run = [](const std::string& label, double sigma, std::int64_t ep, double mean, double base) {
        return build_report({{0, "s", mean, 1.0}}, ReportConfig{label, sigma, ep, ""}, base);
    };
    const std::vector<MetricsReport> reports = {run("bilevel", 65.0, 600, 76.44, 98.25),
                                                run("bilevel", 35.0, 600, 63.72, 98.25),
                                                run("pre", 35.0, 600, 70.001, 98.25)};
    const std::string csv = grid_csv(reports);
    EXPECT_EQ(csv,
              "label,ep600_sigma35_mpjpe_mm,ep600_sigma35_gap_mm,ep600_sigma65_mpjpe_mm,ep600_sigma65_gap_mm\n"
              "bilevel,63.72,-34.53,76.44,-21.81\n"
              "pre,70.00,-28.25,,\n");
    std::vector<MetricsReport> dup = reports;
    dup.push_back(reports[0]);
    EXPECT_THROW(grid_csv(dup), DataError);
}

TEST(Records, FixedTwoNeverPrintsNegativeZero) {
    EXPECT_EQ(format_fixed2(-0.001), "0.00");
    EXPECT_EQ(format_fixed2(-34.53), "-34.53");
    EXPECT_EQ(format_real(0.1), "0.10000000000000001");
}

TEST(Records, LogCsvHeadersAndFlags) {
    std::vector<FrameLog> log = {{0, "tgt_0000", 1.5, 20.0, 10.0, true}, {1, "tgt_0000", 0.5, std::nullopt, std::nullopt, false}};
    EXPECT_EQ(refine_log_csv(log),
              "frame_id,sequence,loss,mpjpe_mm,pa_mpjpe_mm,regenerated_flag\n"
              "0,tgt_0000,1.5,20,10,1\n"
              "1,tgt_0000,0.5,,,0\n");
    std::vector<EpochLog> ep = {{1, "a;b;c", 2.0, std::nullopt, std::nullopt}};
    EXPECT_EQ(preadapt_log_csv(ep), "epoch,sequence,loss,mpjpe_mm,pa_mpjpe_mm,regenerated_flag\n1,a;b;c,2,,,0\n");
}

TEST(Records, PredictionsRoundTripAndScoring) {
    const BodyTemplate tmpl = BodyTemplate::generate(0);
    GenConfig gc;
    gc.n_sequences = 2;
    gc.frames_per_sequence = 3;
    const SequenceStream s = gen_synthetic_dataset(gc, Split::target, tmpl);
    std::vector<RefinedFrame> exact;
    for (const auto& f : s.frames) exact.push_back({f.sequence, f.index, {f.gt->body, f.gt->cam}});
    const std::string text = dump_predictions(exact, "abc");
    const Predictions p = parse_predictions(text);
    EXPECT_EQ(p.weights_hash, "abc");
    EXPECT_EQ(dump_predictions(p.frames, "abc"), text);
    for (const auto& m : score_predictions(p, s, tmpl)) {
        EXPECT_LE(m.mpjpe_mm, 1e-9);
        EXPECT_LE(m.pa_mpjpe_mm, 1e-6);
    }

    Predictions missing = p;
    missing.frames.erase(missing.frames.begin() + 4);
    missing.frames.push_back({"tgt_0009", 0, exact[0].out});
    try {
        score_predictions(missing, s, tmpl);
        FAIL() << "expected a DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("tgt_0001/1"), std::string::npos);
        EXPECT_NE(msg.find("tgt_0009/0"), std::string::npos);
    }
    Predictions dup = p;
    dup.frames.push_back(dup.frames[0]);
    EXPECT_THROW(score_predictions(dup, s, tmpl), DataError);
    EXPECT_THROW(parse_predictions(""), FormatError);
    try {
        parse_predictions(text + "{\"sequence\":1}\n");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.line(), 8u);
    }
}
