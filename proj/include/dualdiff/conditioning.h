#pragma once

#include "dualdiff/audio.h"
#include "dualdiff/autograd.h"
#include "dualdiff/params.h"
#include "dualdiff/random.h"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace dualdiff {

// Per-frame visual-rhythm features and 2-D keypoints of one clip.
struct FeatureSequence {
    int num_frames = 0;
    int visual_dim = 0;
    int joints = 0;
    double fps = 30.0;
    std::vector<double> frames;  // F x visual_dim
    std::vector<double> poses;   // F x joints x 2

    double frame(int f, int k) const { return frames[static_cast<std::size_t>(f) * visual_dim + k]; }
    double pose(int f, int j, int xy) const {
        return poses[(static_cast<std::size_t>(f) * joints + j) * 2 + xy];
    }
    double duration() const { return num_frames / fps; }
    void validate() const;
};

// Frame order reversed (playing the clip backwards).
FeatureSequence reverse(const FeatureSequence& seq);

using JointEdges = std::vector<std::pair<int, int>>;
// 8-joint stick figure (head, neck, hands, pelvis, feet, chest); a chain for
// any other joint count.
JointEdges default_skeleton(int joints);
// D^-1/2 (A + I) D^-1/2.
Tensor normalized_adjacency(int joints, const JointEdges& edges);

struct ConditioningConfig {
    int visual_dim = 64;
    int joints = 8;
    int kernel = 5;            // temporal kernel width
    int segments = 32;         // temporal pooling cells
    // Time covered by the pooling cells; <= 0 means the sequence's own
    // duration. Cells past the end of the sequence pool to zero.
    double span_seconds = 0.0;
    int visual_hidden = 8;
    int visual_channels = 2;   // d_p = visual_channels * segments
    int motion_hidden = 8;
    int motion_channels = 1;   // d_q = motion_channels * segments
    bool freeze_visual = false;

    int visual_out() const { return visual_channels * segments; }
    int motion_out() const { return motion_channels * segments; }
    int cond_dim() const { return visual_out() + motion_out(); }
    void validate() const;
};

enum class CondVariant { reverse, random, negated, none };
enum class CondMask { full, visual_only, motion_only };

std::string to_string(CondVariant v);
CondVariant parse_variant(const std::string& s);

// Stand-ins for the visual and motion feature extractors. The visual branch
// is a temporal convolution over frame features; the motion branch is a
// graph convolution over the skeleton followed by a temporal convolution.
// Both pool into `segments` time cells. Parameters live in the ParamStore
// passed at construction under "cond.visual." and "cond.motion.".
class ConditionEncoder {
public:
    ConditionEncoder(const ConditioningConfig& cfg, ParamStore& store, Rng& rng);
    // Rebinds to parameters already present in `store` (e.g. after loading).
    ConditionEncoder(const ConditioningConfig& cfg, const ParamStore& store);

    const ConditioningConfig& config() const { return cfg_; }
    int dim() const { return cfg_.cond_dim(); }

    ag::Var visual(ag::Tape& tape, const FeatureSequence& seq) const;
    ag::Var motion(ag::Tape& tape, const FeatureSequence& seq) const;
    // concat(l2(visual), l2(motion)) with the masked half zeroed.
    ag::Var condition(ag::Tape& tape, const FeatureSequence& seq, CondMask mask = CondMask::full) const;

    std::vector<double> encode_visual(const FeatureSequence& seq) const;
    std::vector<double> encode_motion(const FeatureSequence& seq) const;
    std::vector<double> encode(const FeatureSequence& seq, CondMask mask = CondMask::full) const;

private:
    void check(const FeatureSequence& seq) const;
    std::vector<std::pair<int, int>> cells(const FeatureSequence& seq) const;
    void bind(const ParamStore& store);

    ConditioningConfig cfg_;
    Tensor adjacency_;
    ag::Var vw1_, vb1_, vw2_, vb2_;
    ag::Var mw1_, mb1_, mw2_, mb2_, mw3_, mb3_;
};

struct ConditionPair {
    std::vector<double> c_pos;
    std::optional<std::vector<double>> c_neg;
    CondVariant variant = CondVariant::reverse;
};

struct ConditionVars {
    ag::Var pos;
    ag::Var neg;  // null for CondVariant::none
};

// c_neg per variant: reverse -> encoding of the reversed clip; random -> a clip
// drawn from `pool`; negated -> -c_pos; none -> absent.
ConditionVars condition_vars(ag::Tape& tape, const ConditionEncoder& enc, const FeatureSequence& seq,
                             CondVariant variant, Rng& rng,
                             const std::vector<const FeatureSequence*>& pool = {},
                             CondMask mask = CondMask::full);

ConditionPair make_condition_pair(const ConditionEncoder& enc, const FeatureSequence& seq,
                                  CondVariant variant, Rng& rng,
                                  const std::vector<const FeatureSequence*>& pool = {},
                                  CondMask mask = CondMask::full);

struct SynthConfig {
    int visual_dim = 64;
    int joints = 8;
    double fps = 30.0;
    int sample_rate = 22050;
    double accent_decay = 0.1;   // seconds
    double feature_noise = 0.05;
};

struct SynthClip {
    FeatureSequence seq;
    Waveform audio;
    std::vector<double> beats;  // seconds
    double bpm = 0.0;
};

// Periodic synthetic "dance" with a matching click track. Poses bounce with
// period 60/bpm and carry a decaying accent after each beat; the audio has a
// click on every beat over a quiet harmonic bed.
SynthClip synth_rhythm_sequence(double bpm, double duration, std::uint64_t seed,
                                const SynthConfig& cfg = {});

// Little-endian feature file: eight uint32 header words (magic "DFEA",
// version, F, visual_dim, joints, fps * 1000, 0, 0), F*visual_dim float32
// frame features, then F*joints*2 float32 keypoints.
void write_features(const std::filesystem::path& path, const FeatureSequence& seq);
FeatureSequence read_features(const std::filesystem::path& path);

}  // namespace dualdiff
