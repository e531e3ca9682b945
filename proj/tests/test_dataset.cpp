#include <algorithm>
#include <cstring>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "ttrbody/body_template_io.hpp"
#include "ttrbody/adaptation.hpp"
#include "ttrbody/dataset.hpp"

using namespace ttrbody;

namespace {

const BodyTemplate& tmpl() {
    static const BodyTemplate t = BodyTemplate::generate(0);
    return t;
}

SequenceStream small(Split split = Split::target, std::uint64_t seed = 3, int seqs = 3, int frames = 5) {
    GenConfig gc;
    gc.n_sequences = seqs;
    gc.frames_per_sequence = frames;
    gc.seed = seed;
    SequenceStream s = gen_synthetic_dataset(gc, split, tmpl());
    s.template_hash = template_hash(tmpl());
    return s;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        out.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return out;
}

std::string join(const std::vector<std::string>& lines) {
    std::string out;
    for (const auto& l : lines) out += l + "\n";
    return out;
}

}  // namespace

TEST(Generation, DeterministicPerSeedAndSplit) {
    EXPECT_EQ(dump_stream(small()), dump_stream(small()));
    EXPECT_NE(dump_stream(small(Split::target, 3)), dump_stream(small(Split::target, 4)));
    EXPECT_EQ(small(Split::source).frames.front().sequence, "src_0000");
    EXPECT_EQ(small(Split::target).frames.back().sequence, "tgt_0002");
}

TEST(Generation, DefaultTargetSizeAndOnePercentSubsample) {
    const GenConfig gc = GenConfig::defaults(Split::target);
    EXPECT_EQ(gc.n_sequences * gc.frames_per_sequence, 4800);
    EXPECT_EQ(GenConfig::defaults(Split::source).n_sequences, 80);
    const PreAdaptConfig pc;
    const double per_epoch = pc.sequences_per_epoch * pc.frames_per_sequence;
    EXPECT_EQ(per_epoch, 24.0);
    EXPECT_NEAR(per_epoch / 4800.0, 0.005, 1e-12);
}

TEST(Generation, GroundTruthIsConsistent) {
    const SequenceStream s = small(Split::target, 5, 4, 20);
    ASSERT_TRUE(s.has_ground_truth());
    for (const auto& f : s.frames) {
        ASSERT_TRUE(f.gt);
        EXPECT_LE(f.gt->body.theta.cwiseAbs().maxCoeff(), kAngleBound);
        EXPECT_LE((forward_kinematics(f.gt->body, tmpl()) - f.gt->joints).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_GT(f.gt->cam.scale, 0.0);
        EXPECT_EQ(f.feature.size(), kFeatureDim);
        for (Eigen::Index j = 0; j < f.guide.size(); ++j) {
            EXPECT_GE(f.guide.confidence[j], 0.0);
            EXPECT_LE(f.guide.confidence[j], 1.0);
        }
    }
}

TEST(Generation, NoiselessDetectorIsTheExactProjection) {
    GenConfig gc;
    gc.n_sequences = 2;
    gc.frames_per_sequence = 6;
    gc.detector_noise_std = 0.0;
    gc.detector_dropout = 0.0;
    const SequenceStream s = gen_synthetic_dataset(gc, Split::target, tmpl());
    for (const auto& f : s.frames) {
        const Keypoints2D p = project_weak_perspective(f.gt->joints, f.gt->cam);
        EXPECT_LE((p.points - f.guide.points).cwiseAbs().maxCoeff(), 1e-9);
        EXPECT_EQ(f.guide.confidence.minCoeff(), 1.0);
    }
}

TEST(Generation, TargetFeaturesAreShifted) {
    const SequenceStream src = small(Split::source, 7, 10, 30);
    const SequenceStream tgt = small(Split::target, 7, 10, 30);
    Eigen::VectorXd ms = Eigen::VectorXd::Zero(kFeatureDim), mt = ms;
    for (const auto& f : src.frames) ms += f.feature / static_cast<double>(src.size());
    for (const auto& f : tgt.frames) mt += f.feature / static_cast<double>(tgt.size());
    EXPECT_GT((ms - mt).norm(), 0.0);
    // same motions, different feature maps
    EXPECT_GT((src.frames[0].feature - tgt.frames[0].feature).norm(), 0.1);
}

TEST(Generation, InvalidConfigRejected) {
    GenConfig gc;
    gc.n_sequences = 0;
    EXPECT_THROW(gen_synthetic_dataset(gc, Split::target, tmpl()), ConfigError);
    gc = GenConfig{};
    gc.motion_smoothness = 0.0;
    EXPECT_THROW(gen_synthetic_dataset(gc, Split::target, tmpl()), ConfigError);
    gc = GenConfig{};
    gc.detector_dropout = 1.0;
    EXPECT_THROW(gen_synthetic_dataset(gc, Split::target, tmpl()), ConfigError);
}

TEST(Frames, RoundTripIsByteStable) {
    const SequenceStream s = small();
    const std::string text = dump_stream(s);
    const SequenceStream back = parse_stream(text);
    EXPECT_EQ(dump_stream(back), text);
    EXPECT_EQ(back.template_hash, s.template_hash);
    EXPECT_EQ(back.frames[4].feature, s.frames[4].feature);
    EXPECT_EQ(back.frames[4].gt->joints, s.frames[4].gt->joints);
}

TEST(Frames, ShuffledInputLoadsCanonically) {
    const std::string text = dump_stream(small());
    auto lines = lines_of(text);
    std::mt19937_64 rng(1);
    std::shuffle(lines.begin() + 1, lines.end(), rng);
    EXPECT_EQ(dump_stream(parse_stream(join(lines))), text);
}

TEST(Frames, MissingGuideNamesTheLine) {
    auto lines = lines_of(dump_stream(small()));
    auto j = nlohmann::json::parse(lines[3]);
    j.erase("guide");
    lines[3] = j.dump();
    try {
        parse_stream(join(lines));
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.line(), 4u);
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("guide"), std::string::npos);
    }
}

TEST(Frames, BadRecordsRejected) {
    auto lines = lines_of(dump_stream(small()));
    {
        auto copy = lines;
        copy.push_back(copy[2]);
        EXPECT_THROW(parse_stream(join(copy)), DataError);
    }
    {
        auto copy = lines;
        copy.erase(copy.begin() + 2);  // index 1 of the first sequence goes missing
        EXPECT_THROW(parse_stream(join(copy)), DataError);
    }
    {
        auto copy = lines;
        auto j = nlohmann::json::parse(copy[1]);
        j["feature"].erase(0);
        copy[1] = j.dump();
        EXPECT_THROW(parse_stream(join(copy)), FormatError);
    }
    {
        auto copy = lines;
        auto j = nlohmann::json::parse(copy[1]);
        j["guide"]["conf"][0] = 1.5;
        copy[1] = j.dump();
        EXPECT_THROW(parse_stream(join(copy)), FormatError);
    }
    EXPECT_THROW(parse_stream(""), FormatError);
    EXPECT_THROW(parse_stream("{\"schema\":\"frames.v0\"}\n"), FormatError);
    EXPECT_THROW(parse_stream(lines[0] + "\n{oops\n"), FormatError);
}

TEST(Frames, FramesWithoutGroundTruthAreAllowed) {
    SequenceStream s = small();
    for (auto& f : s.frames) f.gt.reset();
    const SequenceStream back = parse_stream(dump_stream(s));
    EXPECT_FALSE(back.has_ground_truth());
    EXPECT_EQ(back.size(), s.size());
}

TEST(Batching, SequentialNeverStraddlesSequences) {
    SequenceStream s = small(Split::target, 3, 2, 3);
    s.frames.pop_back();  // A x3, B x2
    const auto batches = iter_batches(s, 2, SequentialMode{});
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[0].sequence, "tgt_0000");
    EXPECT_EQ(batches[0].frames, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(batches[1].frames, (std::vector<std::size_t>{2}));
    EXPECT_EQ(batches[2].sequence, "tgt_0001");
    EXPECT_EQ(batches[2].frames, (std::vector<std::size_t>{3, 4}));
    EXPECT_THROW(iter_batches(SequenceStream{}, 2, SequentialMode{}), DataError);
    EXPECT_THROW(iter_batches(s, 0, SequentialMode{}), ConfigError);
}

TEST(Batching, SampledModeIsAPureFunctionOfSeedAndEpoch) {
    const SequenceStream s = small(Split::target, 3, 10, 40);
    const SampledMode m{9, 3, 8, 4};
    const auto a = iter_batches(s, 8, m);
    const auto b = iter_batches(s, 8, m);
    ASSERT_EQ(a.size(), 3u);
    std::size_t total = 0;
    std::set<std::string> names;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].frames, b[i].frames);
        EXPECT_EQ(a[i].sequence, b[i].sequence);
        names.insert(a[i].sequence);
        total += a[i].frames.size();
        std::set<std::size_t> uniq(a[i].frames.begin(), a[i].frames.end());
        EXPECT_EQ(uniq.size(), a[i].frames.size());
        for (std::size_t idx : a[i].frames) {
            ASSERT_LT(idx, s.size());
            EXPECT_EQ(s.frames[idx].sequence, a[i].sequence);
        }
    }
    EXPECT_EQ(total, 24u);
    EXPECT_EQ(names.size(), 3u);
    SampledMode other = m;
    other.epoch = 5;
    bool differs = false;
    const auto c = iter_batches(s, 8, other);
    for (std::size_t i = 0; i < c.size(); ++i) differs |= c[i].frames != a[i].frames;
    EXPECT_TRUE(differs);
}

TEST(Batching, SampleWithoutReplacementStaysInRange) {
    Rng rng(4);
    for (std::size_t n : {1u, 5u, 30u}) {
        for (std::size_t k : {0u, 1u, 3u, 40u}) {
            const auto v = sample_without_replacement(n, k, rng);
            EXPECT_EQ(v.size(), std::min(n, k));
            std::set<std::size_t> uniq(v.begin(), v.end());
            EXPECT_EQ(uniq.size(), v.size());
            for (auto x : v) EXPECT_LT(x, n);
        }
    }
}

TEST(Windows, EdgeFramesReplicate) {
    const SequenceStream s = small(Split::target, 3, 2, 4);
    const auto ranges = sequence_ranges(s);
    ASSERT_EQ(ranges.size(), 2u);
    EXPECT_EQ(ranges[1].begin, 4u);
    const TemporalWindow w = window_at(s, ranges[1], 4);
    ASSERT_EQ(w.frames.size(), static_cast<std::size_t>(kWindowSize));
    EXPECT_EQ(w.frames[0], s.frames[4].feature);
    EXPECT_EQ(w.frames[1], s.frames[4].feature);
    EXPECT_EQ(w.frames[3], s.frames[5].feature);
    EXPECT_EQ(w.frames[4], s.frames[6].feature);
}

TEST(Util, Base64AndLittleEndianPacking) {
    const std::vector<double> v = {0.0, -0.0, 1.0 / 3.0, 1e308, -2.5e-310};
    const auto bytes = pack_f64_le(v);
    EXPECT_EQ(bytes.size(), 40u);
    EXPECT_EQ(bytes[8 + 7], 0x80);  // sign of -0.0 lands in the last byte
    const auto back = unpack_f64_le(base64_decode(base64_encode(bytes)));
    ASSERT_EQ(back.size(), v.size());
    EXPECT_EQ(std::memcmp(back.data(), v.data(), 40), 0);
    const std::string hello = "hello";
    EXPECT_EQ(base64_encode(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(hello.data()), 5)),
              "aGVsbG8=");
}
