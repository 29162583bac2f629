#pragma once

// Configuration, manifests and the experiment commands behind the CLI.

#include "dualdiff/audio.h"
#include "dualdiff/conditioning.h"
#include "dualdiff/latent_vae.h"
#include "dualdiff/metrics.h"
#include "dualdiff/trainer.h"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dualdiff {

inline constexpr int kConfigSchema = 1;
inline constexpr int kManifestSchema = 1;
inline constexpr int kReportSchema = 1;
inline constexpr const char* kToolVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Config: flat "section.key = value" lines, '#' comments, optional [section]
// headers that prefix the keys below them. Every key has a built-in default;
// unknown keys, malformed values and out-of-range values are rejected with
// an error naming the key.

enum class ConfigType { integer, real, boolean, text, int_list, real_list };
enum class Provenance { default_value, file, cli };
std::string to_string(Provenance p);

class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& key, const std::string& what)
        : std::runtime_error(key + ": " + what), key_(key) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct ConfigEntry {
    std::string key;
    ConfigType type;
    std::string value;  // canonical text
    Provenance source = Provenance::default_value;
    std::string origin;  // file path or "--set" for overrides
    std::string help;
};

class ExperimentConfig {
public:
    ExperimentConfig();  // built-in defaults

    // Layered resolution: defaults <- file <- overrides ("key=value").
    static ExperimentConfig resolve(const std::optional<std::filesystem::path>& file,
                                    const std::vector<std::string>& overrides);

    void apply_file(const std::filesystem::path& path);
    void apply_text(const std::string& text, Provenance source, const std::string& origin);
    void apply_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value, Provenance source,
             const std::string& origin = {});

    bool has(const std::string& key) const;
    const ConfigEntry& entry(const std::string& key) const;
    const std::vector<ConfigEntry>& entries() const { return entries_; }

    long long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;
    std::vector<int> get_ints(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;

    // "key = value  # source" per line, sorted by key; re-loadable as a config file.
    std::string echo() const;

    std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }
    AudioConfig audio() const;
    SynthConfig synth() const;
    VaeConfig vae() const;
    VaeTrainConfig vae_training() const;
    ConditioningConfig conditioning() const;
    DenoiserConfig denoiser() const;
    TrainConfig train() const;  // includes denoiser and conditioning sections

private:
    ConfigEntry& find(const std::string& key);
    std::vector<ConfigEntry> entries_;
};

// Default output root: $DUALDIFF_OUT_ROOT, else "runs".
std::filesystem::path default_output_root();

// ---------------------------------------------------------------------------
// Manifests: one JSON object per line. Paths are stored relative to the
// manifest's directory and returned resolved.

struct ManifestRecord {
    std::string id;
    std::filesystem::path wav;
    std::filesystem::path features;  // may be empty
    double bpm = 0.0;
    std::uint64_t seed = 0;          // generator seed of a synthetic clip
    std::vector<double> beats;       // annotated beat times (seconds)
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

// Creates `dir`, writes config.txt (resolved config with provenance) and
// run.json (command, seed, schema versions).
void prepare_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg, const std::string& command);

// Writes via a temporary sibling and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Commands. Each writes into `out` and returns a summary.

struct SynthSummary {
    std::filesystem::path manifest;
    int clips = 0;
};
// synth.n clips at bpms drawn from synth.bpms, seeded by `seed`.
SynthSummary synth_data(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct VaeSummary {
    std::filesystem::path checkpoint;
    std::vector<VaeEpochStats> history;
    std::optional<double> validation_mse;
};
VaeSummary train_vae_run(const ExperimentConfig& cfg, const std::filesystem::path& data,
                         const std::optional<std::filesystem::path>& validation, const std::filesystem::path& out);

struct DiffusionSummary {
    std::filesystem::path checkpoint;
    int epochs = 0;
    long long steps = 0;
    double final_loss = 0.0;
};
// Continues from out/diffusion.ckpt when `resume` is set and it exists.
DiffusionSummary train_diffusion_run(const ExperimentConfig& cfg, const std::filesystem::path& data,
                                     const std::filesystem::path& vae_checkpoint, const std::filesystem::path& out,
                                     bool resume = false);

// Generates one WAV per record using eval.sampler_steps and the run seed;
// writes out/manifest.jsonl carrying the source ids, features and beats.
std::filesystem::path generate_run(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                                   const std::filesystem::path& data, const std::filesystem::path& out);

struct ClipScore {
    std::string id;
    AlignmentResult alignment;
};

struct EvaluationReport {
    std::vector<ClipScore> per_clip;
    AggregateScores aggregate;
    double fad = 0.0;

    std::string to_json() const;
    std::string to_csv() const;
};

// Reference beats come from onsets of the reference audio
// (eval.reference_beats = audio) or the manifest annotations (annotated).
// Records are paired by id.
EvaluationReport evaluate_manifests(const ExperimentConfig& cfg, const std::filesystem::path& reference,
                                    const std::filesystem::path& generated);
EvaluationReport evaluate_run(const ExperimentConfig& cfg, const std::filesystem::path& reference,
                              const std::filesystem::path& generated, const std::filesystem::path& out);

struct SweepRow {
    double alpha = 0.0;
    AggregateScores scores;
    double fad = 0.0;
};
// train-diffusion + generate + evaluate for each alpha in sweep.alphas.
std::vector<SweepRow> sweep_alpha_run(const ExperimentConfig& cfg, const std::filesystem::path& train_data,
                                      const std::filesystem::path& eval_data,
                                      const std::filesystem::path& vae_checkpoint, const std::filesystem::path& out);
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

}  // namespace dualdiff
