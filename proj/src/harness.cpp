#include "dualdiff/harness.h"

#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace dualdiff {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// key table

struct KeySpec {
    const char* key;
    ConfigType type;
    std::string def;
    const char* help;
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    bool lo_open = false;
    bool hi_open = false;
    std::vector<std::string> choices{};
};

constexpr double kInf = std::numeric_limits<double>::infinity();

std::string default_span() {
    const AudioConfig a;
    return format_double(static_cast<double>(a.frames) * a.hop / a.sample_rate);
}

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs = {
        {"seed", ConfigType::integer, "0", "run seed", 0, 9.2e18},
        {"out_dir", ConfigType::text, "", "output directory (empty: $DUALDIFF_OUT_ROOT/<command>)"},
        {"audio.griffin_lim_iters", ConfigType::integer, "64", "phase reconstruction iterations", 1, 100000},
        {"synth.n", ConfigType::integer, "64", "clips to synthesise", 1, 1000000},
        {"synth.bpms", ConfigType::real_list, "90,120,150", "tempo choices", 30, 300},
        {"synth.fps", ConfigType::real, "30", "feature frame rate", 0, 240, true},
        {"synth.feature_noise", ConfigType::real, "0.05", "feature noise std", 0, 10},
        {"schedule.T", ConfigType::integer, "1000", "diffusion steps", 1, 100000},
        {"schedule.beta_start", ConfigType::real, "0.0001", "beta at t=1", 0, 1, true, true},
        {"schedule.beta_end", ConfigType::real, "0.02", "beta at t=T", 0, 1, true, true},
        {"vae.latent_channels", ConfigType::integer, "1", "latent channels C", 1, 64},
        {"vae.channels", ConfigType::int_list, "8,8,16,16", "encoder widths per scale", 1, 4096},
        {"vae.kl_weight", ConfigType::real, "1e-06", "KL weight", 0, kInf},
        {"vae.epochs", ConfigType::integer, "30", "VAE epochs", 1, 1000000},
        {"vae.batch_size", ConfigType::integer, "8", "VAE batch size", 1, 1000000},
        {"vae.lr", ConfigType::real, "0.001", "VAE learning rate", 0, 1, true},
        {"vae.lr_floor", ConfigType::real, "0.1", "final lr as a fraction of vae.lr (cosine)", 0, 1, true},
        {"vae.clip_norm", ConfigType::real, "1", "VAE gradient clip norm", 0, kInf, true},
        {"vae.target_mse", ConfigType::real, "0", "early stop on epoch training MSE (0: off)", 0, 1},
        {"denoiser.channels", ConfigType::int_list, "16,32,64,64", "U-Net widths per scale", 1, 4096},
        {"denoiser.time_dim", ConfigType::integer, "32", "timestep embedding size", 2, 4096},
        {"denoiser.embed_dim", ConfigType::integer, "64", "conditioning MLP width", 1, 4096},
        {"denoiser.column_conditioning", ConfigType::boolean, "true", "feed c as latent-aligned input columns"},
        {"denoiser.cross_attention", ConfigType::boolean, "false", "cross-attention to conditioning columns"},
        {"denoiser.attention_dim", ConfigType::integer, "16", "attention width", 1, 4096},
        {"conditioning.visual_dim", ConfigType::integer, "64", "per-frame visual feature size", 1, 65536},
        {"conditioning.joints", ConfigType::integer, "8", "keypoints per frame", 2, 1024},
        {"conditioning.kernel", ConfigType::integer, "5", "temporal kernel width", 1, 255},
        {"conditioning.segments", ConfigType::integer, "32", "temporal pooling cells", 1, 4096},
        {"conditioning.span_seconds", ConfigType::real, default_span(), "time covered by the cells (0: clip length)",
         0, 3600},
        {"conditioning.visual_hidden", ConfigType::integer, "8", "visual hidden channels", 1, 4096},
        {"conditioning.visual_channels", ConfigType::integer, "2", "visual output channels per cell", 1, 4096},
        {"conditioning.motion_hidden", ConfigType::integer, "8", "motion hidden channels", 1, 4096},
        {"conditioning.motion_channels", ConfigType::integer, "1", "motion output channels per cell", 1, 4096},
        {"conditioning.freeze_visual", ConfigType::boolean, "false", "keep the visual encoder fixed"},
        {"train.alpha", ConfigType::real, "0.1", "positive/negative tradeoff", 0, 1},
        {"train.mode", ConfigType::text, "PN", "training regime", -kInf, kInf, false, false,
         {"PN", "P", "N", "RN", "DN", "PN-V", "PN-M"}},
        {"train.batch_size", ConfigType::integer, "32", "examples per optimiser step", 1, 1000000},
        {"train.lr", ConfigType::real, "0.0001", "learning rate", 0, 1, true},
        {"train.clip_norm", ConfigType::real, "1", "gradient clip norm", 0, kInf, true},
        {"train.epochs", ConfigType::integer, "100", "epochs", 0, 1000000},
        {"train.max_steps", ConfigType::integer, "0", "optimiser step cap (0: none)", 0, 9.2e18},
        {"train.ema_decay", ConfigType::real, "0", "weight EMA decay (0: off)", 0, 1, false, true},
        {"eval.sampler_steps", ConfigType::integer, "1000", "reverse steps at inference (0: full chain)", 0, 100000},
        {"eval.window", ConfigType::real, "0.1", "beat alignment tolerance (s)", 0, 10},
        {"eval.onset_sensitivity", ConfigType::real, "1", "onset threshold multiplier", 0, 100, true},
        {"eval.reference_beats", ConfigType::text, "audio", "reference beats: audio onsets or annotated",
         -kInf, kInf, false, false, {"audio", "annotated"}},
        {"eval.max_clips", ConfigType::integer, "0", "clips generated/evaluated per run (0: all)", 0, 1000000},
        {"sweep.alphas", ConfigType::real_list, "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", "alpha grid", 0, 1},
    };
    return specs;
}

const KeySpec& spec_for(const std::string& key) {
    for (const auto& s : key_specs()) {
        if (key == s.key) return s;
    }
    throw ConfigError(key, "unknown key");
}

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(trim(tok));
    return out;
}

std::optional<long long> parse_ll(const std::string& s) {
    long long v = 0;
    const char* b = s.data();
    const char* e = b + s.size();
    if (b != e && *b == '+') ++b;
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e || b == e) return std::nullopt;
    return v;
}

std::optional<double> parse_real(const std::string& s) {
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

void check_range(const KeySpec& sp, double v) {
    const bool below = sp.lo_open ? !(v > sp.lo) : !(v >= sp.lo);
    const bool above = sp.hi_open ? !(v < sp.hi) : !(v <= sp.hi);
    if (below || above) {
        std::ostringstream os;
        os << "value " << format_double(v) << " out of range " << (sp.lo_open ? "(" : "[") << format_double(sp.lo)
           << ", " << format_double(sp.hi) << (sp.hi_open ? ")" : "]");
        throw ConfigError(sp.key, os.str());
    }
}

// Validates `raw` for `sp` and returns its canonical text.
std::string canonical(const KeySpec& sp, const std::string& raw) {
    const std::string v = trim(raw);
    switch (sp.type) {
        case ConfigType::integer: {
            const auto x = parse_ll(v);
            if (!x) throw ConfigError(sp.key, "expected an integer, got '" + v + "'");
            check_range(sp, static_cast<double>(*x));
            return std::to_string(*x);
        }
        case ConfigType::real: {
            const auto x = parse_real(v);
            if (!x) throw ConfigError(sp.key, "expected a number, got '" + v + "'");
            check_range(sp, *x);
            return format_double(*x);
        }
        case ConfigType::boolean:
            if (v == "true" || v == "1" || v == "yes") return "true";
            if (v == "false" || v == "0" || v == "no") return "false";
            throw ConfigError(sp.key, "expected true or false, got '" + v + "'");
        case ConfigType::text:
            if (!sp.choices.empty() && std::find(sp.choices.begin(), sp.choices.end(), v) == sp.choices.end()) {
                std::string opts;
                for (const auto& c : sp.choices) opts += (opts.empty() ? "" : ", ") + c;
                throw ConfigError(sp.key, "'" + v + "' is not one of " + opts);
            }
            return v;
        case ConfigType::int_list:
        case ConfigType::real_list: {
            const auto items = split_list(v);
            if (items.empty() || v.empty()) throw ConfigError(sp.key, "expected a non-empty comma-separated list");
            std::string out;
            for (const auto& it : items) {
                std::string c;
                if (sp.type == ConfigType::int_list) {
                    const auto x = parse_ll(it);
                    if (!x) throw ConfigError(sp.key, "expected integers, got '" + it + "'");
                    check_range(sp, static_cast<double>(*x));
                    c = std::to_string(*x);
                } else {
                    const auto x = parse_real(it);
                    if (!x) throw ConfigError(sp.key, "expected numbers, got '" + it + "'");
                    check_range(sp, *x);
                    c = format_double(*x);
                }
                out += (out.empty() ? "" : ",") + c;
            }
            return out;
        }
    }
    throw ConfigError(sp.key, "unsupported type");
}

std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finaliser
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::string json_line(const json& j) { return j.dump() + "\n"; }

Tensor load_mel_tensor(const fs::path& wav, MelSpectrogram* mel_out = nullptr) {
    const MelSpectrogram m = wav_to_mel(read_wav(wav));
    if (mel_out) *mel_out = m;
    return mel_to_tensor(m);
}

std::vector<ManifestRecord> limit(std::vector<ManifestRecord> recs, long long max_clips) {
    if (max_clips > 0 && static_cast<long long>(recs.size()) > max_clips) recs.resize(static_cast<std::size_t>(max_clips));
    return recs;
}

}  // namespace

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::default_value: return "default";
        case Provenance::file: return "file";
        case Provenance::cli: return "cli";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// ExperimentConfig

ExperimentConfig::ExperimentConfig() {
    for (const auto& sp : key_specs()) {
        entries_.push_back({sp.key, sp.type, canonical(sp, sp.def), Provenance::default_value, "", sp.help});
    }
}

ExperimentConfig ExperimentConfig::resolve(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
    ExperimentConfig c;
    if (file) c.apply_file(*file);
    for (const auto& o : overrides) c.apply_override(o);
    return c;
}

void ExperimentConfig::apply_file(const fs::path& path) { apply_text(read_file(path), Provenance::file, path.string()); }

void ExperimentConfig::apply_text(const std::string& text, Provenance source, const std::string& origin) {
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto sep = line.find_first_of("=:");
        if (sep == std::string::npos) {
            throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        std::string key = trim(line.substr(0, sep));
        if (!section.empty()) key = section + "." + key;
        set(key, line.substr(sep + 1), source, origin);
    }
}

void ExperimentConfig::apply_override(const std::string& assignment) {
    const auto sep = assignment.find('=');
    if (sep == std::string::npos) throw std::runtime_error("override '" + assignment + "' is not key=value");
    set(trim(assignment.substr(0, sep)), assignment.substr(sep + 1), Provenance::cli, "--set");
}

ConfigEntry& ExperimentConfig::find(const std::string& key) {
    for (auto& e : entries_) {
        if (e.key == key) return e;
    }
    throw ConfigError(key, "unknown key");
}

void ExperimentConfig::set(const std::string& key, const std::string& value, Provenance source, const std::string& origin) {
    const KeySpec& sp = spec_for(key);
    ConfigEntry& e = find(key);
    e.value = canonical(sp, value);
    e.source = source;
    e.origin = origin;
}

bool ExperimentConfig::has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const ConfigEntry& e) { return e.key == key; });
}

const ConfigEntry& ExperimentConfig::entry(const std::string& key) const {
    for (const auto& e : entries_) {
        if (e.key == key) return e;
    }
    throw ConfigError(key, "unknown key");
}

long long ExperimentConfig::get_int(const std::string& key) const {
    const auto& e = entry(key);
    if (e.type != ConfigType::integer) throw ConfigError(key, "not an integer key");
    return *parse_ll(e.value);
}

double ExperimentConfig::get_double(const std::string& key) const {
    const auto& e = entry(key);
    if (e.type != ConfigType::real && e.type != ConfigType::integer) throw ConfigError(key, "not a numeric key");
    return *parse_real(e.value);
}

bool ExperimentConfig::get_bool(const std::string& key) const {
    const auto& e = entry(key);
    if (e.type != ConfigType::boolean) throw ConfigError(key, "not a boolean key");
    return e.value == "true";
}

const std::string& ExperimentConfig::get_string(const std::string& key) const { return entry(key).value; }

std::vector<int> ExperimentConfig::get_ints(const std::string& key) const {
    const auto& e = entry(key);
    if (e.type != ConfigType::int_list) throw ConfigError(key, "not an integer-list key");
    std::vector<int> out;
    for (const auto& s : split_list(e.value)) out.push_back(static_cast<int>(*parse_ll(s)));
    return out;
}

std::vector<double> ExperimentConfig::get_doubles(const std::string& key) const {
    const auto& e = entry(key);
    if (e.type != ConfigType::real_list) throw ConfigError(key, "not a number-list key");
    std::vector<double> out;
    for (const auto& s : split_list(e.value)) out.push_back(*parse_real(s));
    return out;
}

std::string ExperimentConfig::echo() const {
    std::vector<const ConfigEntry*> sorted;
    for (const auto& e : entries_) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->key < b->key; });
    std::ostringstream os;
    for (const auto* e : sorted) {
        os << e->key << " = " << e->value << "  # " << to_string(e->source);
        if (!e->origin.empty() && e->source == Provenance::file) os << " " << e->origin;
        os << "\n";
    }
    return os.str();
}

AudioConfig ExperimentConfig::audio() const {
    AudioConfig a;
    a.griffin_lim_iters = static_cast<int>(get_int("audio.griffin_lim_iters"));
    return a;
}

SynthConfig ExperimentConfig::synth() const {
    SynthConfig s;
    s.visual_dim = static_cast<int>(get_int("conditioning.visual_dim"));
    s.joints = static_cast<int>(get_int("conditioning.joints"));
    s.fps = get_double("synth.fps");
    s.feature_noise = get_double("synth.feature_noise");
    return s;
}

VaeConfig ExperimentConfig::vae() const {
    VaeConfig v;
    v.latent_channels = static_cast<int>(get_int("vae.latent_channels"));
    v.channels = get_ints("vae.channels");
    v.kl_weight = get_double("vae.kl_weight");
    return v;
}

VaeTrainConfig ExperimentConfig::vae_training() const {
    VaeTrainConfig t;
    t.epochs = static_cast<int>(get_int("vae.epochs"));
    t.batch_size = static_cast<int>(get_int("vae.batch_size"));
    t.lr = get_double("vae.lr");
    t.lr_floor = get_double("vae.lr_floor");
    t.clip_norm = get_double("vae.clip_norm");
    t.target_mse = get_double("vae.target_mse");
    t.seed = seed();
    return t;
}

ConditioningConfig ExperimentConfig::conditioning() const {
    ConditioningConfig c;
    c.visual_dim = static_cast<int>(get_int("conditioning.visual_dim"));
    c.joints = static_cast<int>(get_int("conditioning.joints"));
    c.kernel = static_cast<int>(get_int("conditioning.kernel"));
    c.segments = static_cast<int>(get_int("conditioning.segments"));
    c.span_seconds = get_double("conditioning.span_seconds");
    c.visual_hidden = static_cast<int>(get_int("conditioning.visual_hidden"));
    c.visual_channels = static_cast<int>(get_int("conditioning.visual_channels"));
    c.motion_hidden = static_cast<int>(get_int("conditioning.motion_hidden"));
    c.motion_channels = static_cast<int>(get_int("conditioning.motion_channels"));
    c.freeze_visual = get_bool("conditioning.freeze_visual");
    return c;
}

DenoiserConfig ExperimentConfig::denoiser() const {
    DenoiserConfig d;
    const VaeConfig v = vae();
    d.latent_channels = v.latent_channels;
    d.latent_size = v.latent_size();
    d.channels = get_ints("denoiser.channels");
    d.cond_dim = conditioning().cond_dim();
    d.time_dim = static_cast<int>(get_int("denoiser.time_dim"));
    d.embed_dim = static_cast<int>(get_int("denoiser.embed_dim"));
    d.column_conditioning = get_bool("denoiser.column_conditioning");
    d.cross_attention = get_bool("denoiser.cross_attention");
    d.attention_dim = static_cast<int>(get_int("denoiser.attention_dim"));
    return d;
}

TrainConfig ExperimentConfig::train() const {
    TrainConfig t;
    t.alpha = get_double("train.alpha");
    t.mode = parse_mode(get_string("train.mode"));
    t.diffusion_steps = static_cast<int>(get_int("schedule.T"));
    t.beta_start = get_double("schedule.beta_start");
    t.beta_end = get_double("schedule.beta_end");
    if (!(t.beta_start <= t.beta_end)) throw ConfigError("schedule.beta_end", "must be >= schedule.beta_start");
    t.batch_size = static_cast<int>(get_int("train.batch_size"));
    t.lr = get_double("train.lr");
    t.clip_norm = get_double("train.clip_norm");
    t.epochs = static_cast<int>(get_int("train.epochs"));
    t.max_steps = get_int("train.max_steps");
    t.seed = seed();
    t.ema_decay = get_double("train.ema_decay");
    t.denoiser = denoiser();
    t.conditioning = conditioning();
    return t;
}

fs::path default_output_root() {
    const char* env = std::getenv("DUALDIFF_OUT_ROOT");
    return (env && *env) ? fs::path(env) : fs::path("runs");
}

// ---------------------------------------------------------------------------
// manifests and run directories

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read manifest " + path.string());
    const fs::path base = path.parent_path();
    std::vector<ManifestRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(where + ": invalid JSON");
        }
        if (!j.contains("id") || !j.contains("wav")) throw std::runtime_error(where + ": record needs 'id' and 'wav'");
        ManifestRecord r;
        r.id = j["id"].get<std::string>();
        r.wav = base / j["wav"].get<std::string>();
        if (j.contains("features") && !j["features"].is_null()) r.features = base / j["features"].get<std::string>();
        if (j.contains("bpm")) r.bpm = j["bpm"].get<double>();
        if (j.contains("seed")) r.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("beats")) r.beats = j["beats"].get<std::vector<double>>();
        out.push_back(std::move(r));
    }
    if (out.empty()) throw std::runtime_error("manifest " + path.string() + " has no records");
    return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestRecord>& records) {
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) { return fs::absolute(p).lexically_normal().lexically_relative(base).generic_string(); };
    std::string text;
    for (const auto& r : records) {
        json j;
        j["schema_version"] = kManifestSchema;
        j["id"] = r.id;
        j["wav"] = rel(r.wav);
        j["features"] = r.features.empty() ? json(nullptr) : json(rel(r.features));
        j["bpm"] = r.bpm;
        j["seed"] = r.seed;
        j["beats"] = r.beats;
        text += json_line(j);
    }
    write_text_atomic(path, text);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os << text;
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

void prepare_run_dir(const fs::path& dir, const ExperimentConfig& cfg, const std::string& command) {
    fs::create_directories(dir);
    write_text_atomic(dir / "config.txt", cfg.echo());
    json j;
    j["command"] = command;
    j["seed"] = cfg.seed();
    j["tool_version"] = kToolVersion;
    j["schema_versions"] = {{"config", kConfigSchema},
                            {"manifest", kManifestSchema},
                            {"report", kReportSchema},
                            {"container", Container::kVersion}};
    write_text_atomic(dir / "run.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// commands

SynthSummary synth_data(const ExperimentConfig& cfg, const fs::path& out) {
    prepare_run_dir(out, cfg, "synth-data");
    fs::create_directories(out / "clips");
    const auto bpms = cfg.get_doubles("synth.bpms");
    const long long n = cfg.get_int("synth.n");
    const SynthConfig sc = cfg.synth();
    const AudioConfig ac = cfg.audio();
    Rng rng(mix_seed(cfg.seed(), 0x73796e));
    std::vector<ManifestRecord> recs;
    for (long long i = 0; i < n; ++i) {
        const double bpm = bpms[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(bpms.size()) - 1))];
        const std::uint64_t clip_seed = rng();
        const SynthClip clip = synth_rhythm_sequence(bpm, ac.clip_seconds, clip_seed, sc);
        char name[32];
        std::snprintf(name, sizeof name, "clip_%05lld", i);
        ManifestRecord r;
        r.id = name;
        r.wav = out / "clips" / (r.id + ".wav");
        r.features = out / "clips" / (r.id + ".dfea");
        r.bpm = bpm;
        r.seed = clip_seed;
        r.beats = clip.beats;
        write_wav(r.wav, clip.audio);
        write_features(r.features, clip.seq);
        recs.push_back(std::move(r));
    }
    write_manifest(out / "manifest.jsonl", recs);
    return {out / "manifest.jsonl", static_cast<int>(n)};
}

VaeSummary train_vae_run(const ExperimentConfig& cfg, const fs::path& data, const std::optional<fs::path>& validation,
                         const fs::path& out) {
    prepare_run_dir(out, cfg, "train-vae");
    std::vector<Tensor> train;
    for (const auto& r : read_manifest(data)) train.push_back(load_mel_tensor(r.wav));
    std::vector<Tensor> val;
    if (validation) {
        for (const auto& r : read_manifest(*validation)) val.push_back(load_mel_tensor(r.wav));
    }
    Vae vae(cfg.vae(), mix_seed(cfg.seed(), 0x766165));
    VaeTrainConfig tc = cfg.vae_training();
    std::string log;
    auto val_mse = [&] {
        double s = 0.0;
        for (const auto& x : val) s += vae.reconstruction_mse(x);
        return s / static_cast<double>(val.size());
    };
    tc.on_epoch = [&](const VaeEpochStats& st) {
        json j;
        j["epoch"] = st.epoch;
        j["loss"] = st.loss;
        j["mse"] = st.mse;
        j["kl"] = st.kl;
        j["wall_ms"] = st.wall_ms;
        if (!val.empty()) j["val_mse"] = val_mse();
        log += json_line(j);
        write_text_atomic(out / "vae_log.jsonl", log);
    };
    VaeSummary s;
    s.history = train_vae(vae, train, tc);
    s.checkpoint = out / "vae.ckpt";
    vae.save(s.checkpoint);
    if (!val.empty()) s.validation_mse = val_mse();
    return s;
}

DiffusionSummary train_diffusion_run(const ExperimentConfig& cfg, const fs::path& data, const fs::path& vae_checkpoint,
                                     const fs::path& out, bool resume) {
    const fs::path ckpt = out / "diffusion.ckpt";
    const bool resuming = resume && fs::exists(ckpt);
    if (!resuming) prepare_run_dir(out, cfg, "train-diffusion");
    const Vae vae = Vae::load(vae_checkpoint);
    std::vector<TrainExample> examples;
    AudioRange range{0.0, 0.0};
    const auto recs = read_manifest(data);
    for (const auto& r : recs) {
        if (r.features.empty()) throw std::runtime_error("record '" + r.id + "' has no features file");
        MelSpectrogram m;
        TrainExample ex;
        ex.id = r.id;
        ex.z0 = vae.encode(load_mel_tensor(r.wav, &m));
        ex.seq = read_features(r.features);
        range.log_min += m.log_min;
        range.log_max += m.log_max;
        examples.push_back(std::move(ex));
    }
    range.log_min /= static_cast<double>(recs.size());
    range.log_max /= static_cast<double>(recs.size());

    const TrainConfig wanted = cfg.train();
    Trainer trainer = resuming ? Trainer::load(ckpt) : Trainer(wanted, vae, range);
    if (resuming) {
        // Only the budget may change across a resume; anything else would
        // silently continue a different experiment.
        const TrainConfig& have = trainer.config();
        auto same = [](const std::string& key, bool eq) {
            if (!eq) throw ConfigError(key, "differs from the checkpoint being resumed");
        };
        same("train.alpha", have.alpha == wanted.alpha);
        same("train.mode", have.mode == wanted.mode);
        same("train.batch_size", have.batch_size == wanted.batch_size);
        same("train.lr", have.lr == wanted.lr);
        same("train.clip_norm", have.clip_norm == wanted.clip_norm);
        same("train.ema_decay", have.ema_decay == wanted.ema_decay);
        same("seed", have.seed == wanted.seed);
        same("schedule.T", have.diffusion_steps == wanted.diffusion_steps);
        same("schedule.beta_start", have.beta_start == wanted.beta_start);
        same("schedule.beta_end", have.beta_end == wanted.beta_end);
        same("denoiser.channels", have.denoiser.channels == wanted.denoiser.channels);
        same("denoiser.time_dim", have.denoiser.time_dim == wanted.denoiser.time_dim);
        same("denoiser.embed_dim", have.denoiser.embed_dim == wanted.denoiser.embed_dim);
        same("denoiser.column_conditioning", have.denoiser.column_conditioning == wanted.denoiser.column_conditioning);
        same("denoiser.cross_attention", have.denoiser.cross_attention == wanted.denoiser.cross_attention);
        same("conditioning.segments", have.conditioning.segments == wanted.conditioning.segments);
        same("conditioning.span_seconds", have.conditioning.span_seconds == wanted.conditioning.span_seconds);
        same("conditioning.freeze_visual", have.conditioning.freeze_visual == wanted.conditioning.freeze_visual);
        trainer.set_budget(wanted.epochs, wanted.max_steps);
    } else {
        trainer.save(ckpt);  // epoch-0 state, so a diverged first epoch still leaves a checkpoint
        write_text_atomic(out / "train_log.jsonl", "");
    }
    std::ofstream log(out / "train_log.jsonl", std::ios::app);
    FitOptions fo;
    fo.checkpoint = ckpt;
    fo.on_step = [&](const StepRecord& r) { log << r.to_json() << std::endl; };
    fo.on_epoch = [&](int, double) { log.flush(); };
    const auto records = trainer.fit(examples, fo);
    DiffusionSummary s;
    s.checkpoint = ckpt;
    s.epochs = trainer.epoch();
    s.steps = trainer.step();
    s.final_loss = records.empty() ? 0.0 : records.back().loss;
    return s;
}

fs::path generate_run(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
    prepare_run_dir(out, cfg, "generate");
    fs::create_directories(out / "clips");
    const Generator gen = Generator::load(checkpoint);
    const int steps = static_cast<int>(cfg.get_int("eval.sampler_steps"));
    const int gl = static_cast<int>(cfg.get_int("audio.griffin_lim_iters"));
    const auto recs = limit(read_manifest(data), cfg.get_int("eval.max_clips"));
    std::vector<ManifestRecord> outs;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        const auto& r = recs[i];
        if (r.features.empty()) throw std::runtime_error("record '" + r.id + "' has no features file");
        const FeatureSequence seq = read_features(r.features);
        const Waveform w = gen.generate(seq, steps, mix_seed(cfg.seed(), 0x67656e + i), gl);
        ManifestRecord o = r;
        o.wav = out / "clips" / (r.id + ".wav");
        write_wav(o.wav, w);
        outs.push_back(std::move(o));
    }
    write_manifest(out / "manifest.jsonl", outs);
    return out / "manifest.jsonl";
}

EvaluationReport evaluate_manifests(const ExperimentConfig& cfg, const fs::path& reference, const fs::path& generated) {
    const auto ref = read_manifest(reference);
    const auto gen = read_manifest(generated);
    std::map<std::string, const ManifestRecord*> by_id;
    for (const auto& r : ref) by_id[r.id] = &r;
    const double window = cfg.get_double("eval.window");
    const double sens = cfg.get_double("eval.onset_sensitivity");
    const bool annotated = cfg.get_string("eval.reference_beats") == "annotated";

    EvaluationReport rep;
    std::vector<Waveform> ref_w, gen_w;
    std::vector<AlignmentResult> results;
    for (const auto& g : gen) {
        const auto it = by_id.find(g.id);
        if (it == by_id.end()) throw std::runtime_error("generated clip '" + g.id + "' has no reference record");
        const ManifestRecord& r = *it->second;
        Waveform rw = read_wav(r.wav);
        Waveform gw = read_wav(g.wav);
        BeatVector gt;
        if (annotated) {
            gt.times = r.beats;
        } else {
            gt = detect_onsets(rw, sens);
        }
        gt.source = BeatSource::ground_truth;
        const BeatVector gb = detect_onsets(gw, sens);
        const AlignmentResult a = align_beats(gt, gb, window);
        rep.per_clip.push_back({g.id, a});
        results.push_back(a);
        ref_w.push_back(std::move(rw));
        gen_w.push_back(std::move(gw));
    }
    rep.aggregate = aggregate_scores(results);
    rep.fad = ref_w.size() >= 2 ? frechet_audio_distance(ref_w, gen_w) : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

std::string EvaluationReport::to_json() const {
    json j;
    j["schema_version"] = kReportSchema;
    json clips = json::array();
    for (const auto& c : per_clip) {
        clips.push_back({{"id", c.id},
                         {"b_t", c.alignment.b_t},
                         {"b_g", c.alignment.b_g},
                         {"b_a", c.alignment.b_a},
                         {"bcs", c.alignment.bcs},
                         {"bhs", c.alignment.bhs},
                         {"f1", c.alignment.f1}});
    }
    j["per_clip"] = clips;
    j["aggregate"] = {{"BCS", aggregate.bcs},
                      {"CSD", aggregate.csd},
                      {"BHS", aggregate.bhs},
                      {"HSD", aggregate.hsd},
                      {"F1", aggregate.f1},
                      {"FAD", std::isfinite(fad) ? json(fad) : json(nullptr)}};
    return j.dump(2) + "\n";
}

std::string EvaluationReport::to_csv() const {
    // Per-clip rows carry fractions; the aggregate row carries the x100 scores.
    std::ostringstream os;
    os << "scope,id,b_t,b_g,b_a,bcs,bhs,f1,csd,hsd,fad\n";
    for (const auto& c : per_clip) {
        const auto& a = c.alignment;
        os << "clip," << c.id << "," << a.b_t << "," << a.b_g << "," << a.b_a << "," << format_double(a.bcs) << ","
           << format_double(a.bhs) << "," << format_double(a.f1) << ",,,\n";
    }
    os << "aggregate,,,,," << format_double(aggregate.bcs) << "," << format_double(aggregate.bhs) << ","
       << format_double(aggregate.f1) << "," << format_double(aggregate.csd) << "," << format_double(aggregate.hsd)
       << "," << (std::isfinite(fad) ? format_double(fad) : "") << "\n";
    return os.str();
}

EvaluationReport evaluate_run(const ExperimentConfig& cfg, const fs::path& reference, const fs::path& generated,
                              const fs::path& out) {
    prepare_run_dir(out, cfg, "evaluate");
    EvaluationReport rep = evaluate_manifests(cfg, reference, generated);
    write_text_atomic(out / "report.json", rep.to_json());
    write_text_atomic(out / "report.csv", rep.to_csv());
    return rep;
}

std::vector<SweepRow> sweep_alpha_run(const ExperimentConfig& cfg, const fs::path& train_data, const fs::path& eval_data,
                                      const fs::path& vae_checkpoint, const fs::path& out) {
    prepare_run_dir(out, cfg, "sweep-alpha");
    std::vector<SweepRow> rows;
    for (double alpha : cfg.get_doubles("sweep.alphas")) {
        ExperimentConfig c = cfg;
        c.set("train.alpha", format_double(alpha), Provenance::cli, "sweep");
        const std::string tag = "alpha_" + format_double(alpha);
        const fs::path dir = out / tag;
        const auto d = train_diffusion_run(c, train_data, vae_checkpoint, dir / "train");
        const fs::path gm = generate_run(c, d.checkpoint, eval_data, dir / "generate");
        const auto rep = evaluate_run(c, eval_data, gm, dir / "evaluate");
        rows.push_back({alpha, rep.aggregate, rep.fad});
        write_text_atomic(out / "sweep.csv", sweep_to_csv(rows));
    }
    return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "alpha,BCS,CSD,BHS,HSD,F1,FAD\n";
    for (const auto& r : rows) {
        os << format_double(r.alpha) << "," << format_double(r.scores.bcs) << "," << format_double(r.scores.csd) << ","
           << format_double(r.scores.bhs) << "," << format_double(r.scores.hsd) << "," << format_double(r.scores.f1)
           << "," << (std::isfinite(r.fad) ? format_double(r.fad) : "") << "\n";
    }
    return os.str();
}

}  // namespace dualdiff
