// dtcmr: phantom generation, groupwise registration, evaluation and ablation.
//
// Exit codes: 0 success, 1 runtime failure, 2 registration flagged divergence, 64 usage error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/metrics.hpp"
#include "dtcmr/parallel.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/registration.hpp"
#include "dtcmr/series.hpp"
#include "dtcmr/tensorfit.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dtcmr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitUsage = 64;

// Raised for flag values CLI11 accepts but the library rejects; reported as a usage error.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string num(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string indexed(const std::string& stem, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03zu.bin", stem.c_str(), i);
    return buf;
}

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error("cannot write " + file.string());
    out << text;
    if (!out) throw Error("write failed for " + file.string());
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw Error("unwritable path " + dir.string());
}

void write_fields(const std::vector<DenseField>& fields, const fs::path& dir) {
    make_dir(dir);
    for (std::size_t i = 0; i < fields.size(); ++i) save_field(fields[i], dir / indexed("field", i));
}

std::vector<DenseField> read_fields(const fs::path& dir, std::size_t count, std::size_t h, std::size_t w) {
    std::vector<DenseField> fields;
    for (std::size_t i = 0; i < count; ++i) fields.push_back(load_field(dir / indexed("field", i), h, w));
    return fields;
}

std::string shifts_csv(const std::vector<Vec2>& shifts) {
    std::ostringstream os;
    os << "frame,dx,dy\n";
    for (std::size_t i = 0; i < shifts.size(); ++i) os << i << ',' << num(shifts[i].x) << ',' << num(shifts[i].y) << '\n';
    return os.str();
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
    std::size_t size = 96;
    int nd = 7;
    int nrep = 10;
    double b = 600.0;
    double noise = 0.05;
    std::string motion = "none";
    double motion_amp = 3.0;
    double shift_amp = 0.0;
    double jitter = 0.0;
    double endo = 12.0;
    double epi = 28.0;
    double ha_endo = 60.0;
    double ha_epi = -60.0;
    std::uint64_t seed = 1;

    void add_to(CLI::App* cmd, bool with_seed) {
        cmd->add_option("--size", size, "Image height and width (px)")->check(CLI::Range(16, 1024))->capture_default_str();
        cmd->add_option("--nd", nd, "Encodings per repetition, b0 included")->check(CLI::Range(2, 64))->capture_default_str();
        cmd->add_option("--nrep", nrep, "Repetitions")->check(CLI::Range(1, 100))->capture_default_str();
        cmd->add_option("--b", b, "b-value of the diffusion encodings (s/mm^2)")->check(CLI::PositiveNumber)->capture_default_str();
        cmd->add_option("--noise", noise, "Rician noise sigma relative to myocardial S0")->check(CLI::NonNegativeNumber)->capture_default_str();
        cmd->add_option("--motion", motion, "none, translate or deform")
            ->check(CLI::IsMember({"none", "translate", "deform"}))
            ->capture_default_str();
        cmd->add_option("--motion-amp", motion_amp, "Shift bound (translate) or peak deformation (deform), px")
            ->check(CLI::NonNegativeNumber)
            ->capture_default_str();
        cmd->add_option("--shift-amp", shift_amp, "Extra random shift bound with --motion deform (px)")
            ->check(CLI::NonNegativeNumber)
            ->capture_default_str();
        cmd->add_option("--jitter", jitter, "Per-frame multiplicative intensity jitter, 1 +- value")
            ->check(CLI::Range(0.0, 0.99))
            ->capture_default_str();
        cmd->add_option("--endo", endo, "Endocardial radius (px)")->capture_default_str();
        cmd->add_option("--epi", epi, "Epicardial radius (px)")->capture_default_str();
        cmd->add_option("--ha-endo", ha_endo, "Helix angle at the endocardium (deg)")->capture_default_str();
        cmd->add_option("--ha-epi", ha_epi, "Helix angle at the epicardium (deg)")->capture_default_str();
        if (with_seed) cmd->add_option("--seed", seed, "Random seed")->capture_default_str();
    }

    PhantomConfig config(std::uint64_t s) const {
        PhantomConfig c;
        c.height = c.width = size;
        c.n_directions = nd;
        c.n_repetitions = nrep;
        c.bvalue = b;
        c.noise_sigma = noise;
        c.motion = parse_motion_kind(motion);
        if (c.motion == MotionKind::translate) c.shift_amplitude = motion_amp;
        if (c.motion == MotionKind::deform) {
            c.deform_amplitude = motion_amp;
            c.shift_amplitude = shift_amp;
        }
        c.intensity_jitter = jitter;
        c.endo_radius = endo;
        c.epi_radius = epi;
        c.body_radius = std::min(epi + 12.0, 0.5 * static_cast<double>(size) - 4.0);
        c.ha_endo_deg = ha_endo;
        c.ha_epi_deg = ha_epi;
        c.seed = s;
        return c;
    }
};

Phantom build_phantom(const PhantomConfig& cfg) {
    try {
        return make_phantom(cfg);
    } catch (const Error& e) {
        throw UsageError(std::string("invalid phantom flags: ") + e.what());
    }
}

// Layout: DIR/series (manifest + frames), DIR/truth (tensor, mask, fields, frame masks, shifts, truth.json).
void write_phantom(const Phantom& ph, const PhantomConfig& cfg, const fs::path& dir) {
    make_dir(dir);
    save_series(ph.series, dir / "series");
    const fs::path truth = dir / "truth";
    make_dir(truth);
    save_tensor(ph.truth.true_tensor, truth / "tensor.bin");
    save_mask(ph.truth.true_mask, truth / "mask.bin");
    write_fields(ph.truth.true_warps, truth / "fields");
    make_dir(truth / "frame_masks");
    for (std::size_t i = 0; i < ph.truth.frame_masks.size(); ++i)
        save_mask(ph.truth.frame_masks[i], truth / "frame_masks" / indexed("mask", i));
    write_text(truth / "shifts.csv", shifts_csv(ph.truth.true_shifts));
    json meta = {{"height", cfg.height},
                 {"width", cfg.width},
                 {"frames", ph.series.frame_count()},
                 {"seed", cfg.seed},
                 {"motion", to_string(cfg.motion)},
                 {"shift_amplitude", cfg.shift_amplitude},
                 {"deform_amplitude", ph.truth.deform_amplitude},
                 {"intensity_jitter", cfg.intensity_jitter},
                 {"noise_sigma", ph.truth.noise_sigma},
                 {"endo_radius", cfg.endo_radius},
                 {"epi_radius", cfg.epi_radius},
                 {"ha_endo_deg", cfg.ha_endo_deg},
                 {"ha_epi_deg", cfg.ha_epi_deg},
                 {"centroid", {ph.truth.true_mask.centroid.x, ph.truth.true_mask.centroid.y}}};
    write_text(truth / "truth.json", meta.dump(2) + "\n");
}

json read_truth_meta(const fs::path& truth) {
    std::ifstream in(truth / "truth.json");
    if (!in) throw UsageError("missing " + (truth / "truth.json").string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("malformed " + (truth / "truth.json").string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------- evaluation

struct MetricsRow {
    std::string case_name;
    std::string mode;
    double ne_percent = 0.0;
    double mean_r2 = 0.0;
    double mean_rmse = 0.0;
    std::size_t included = 0;
    std::optional<double> median_epe;
};

const char* kMetricsHeader = "case,mode,ne_percent,mean_r2,mean_rmse,included_profiles,median_epe\n";

std::string metrics_line(const MetricsRow& r) {
    std::ostringstream os;
    os << r.case_name << ',' << r.mode << ',' << num(r.ne_percent) << ',' << num(r.mean_r2) << ','
       << num(r.mean_rmse) << ',' << r.included << ',';
    if (r.median_epe) os << num(*r.median_epe);
    os << '\n';
    return os.str();
}

struct Evaluation {
    MetricsRow row;
    NeReport ne;
    HagReport hag;
    Image ha_map;
    std::optional<FieldErrorStats> field_stats;
};

Evaluation evaluate(const TensorField& tensor, const MyocardiumMask& mask, const std::vector<DenseField>* fields,
                    const std::vector<DenseField>* truth) {
    Evaluation ev;
    ev.ne = negative_eigen_percent(tensor, mask);
    ev.ha_map = helix_angle_map(tensor, mask);
    ev.hag = hag_line_profiles(ev.ha_map, mask);
    ev.row.ne_percent = ev.ne.ne_percent;
    ev.row.mean_r2 = ev.hag.mean_r2;
    ev.row.mean_rmse = ev.hag.mean_rmse;
    ev.row.included = ev.hag.included_count;
    if (fields && truth) {
        ev.field_stats = field_error(*fields, *truth, &mask);
        ev.row.median_epe = ev.field_stats->median;
    }
    return ev;
}

struct EvalInputs {
    TensorField tensor;
    MyocardiumMask mask;
    std::optional<std::vector<DenseField>> fields;
    std::optional<std::vector<DenseField>> truth;
};

// Reads everything `evaluate` needs from disk; throws before anything is written.
EvalInputs load_eval_inputs(const fs::path& tensor_file, const fs::path& mask_file, std::size_t h, std::size_t w,
                            const std::optional<fs::path>& truth_dir, const std::optional<fs::path>& fields_dir) {
    EvalInputs in;
    in.mask = load_mask(mask_file, h, w);
    if (in.mask.count() == 0) throw UsageError("mask " + mask_file.string() + " is empty");
    in.tensor = load_tensor(tensor_file, h, w);
    if (truth_dir) {
        const json meta = read_truth_meta(*truth_dir);
        const auto frames = meta.at("frames").get<std::size_t>();
        in.truth = read_fields(*truth_dir / "fields", frames, h, w);
        in.fields = read_fields(*fields_dir, frames, h, w);
    }
    return in;
}

void write_evaluation(const Evaluation& ev, const fs::path& dir) {
    make_dir(dir);
    write_text(dir / "metrics.csv", std::string(kMetricsHeader) + metrics_line(ev.row));

    std::ostringstream fits, samples;
    fits << "profile,angle_deg,slope,intercept,r2,rmse,included,too_short,samples\n";
    samples << "profile,angle_deg,depth_percent,ha_deg\n";
    for (std::size_t k = 0; k < ev.hag.profiles.size(); ++k) {
        const HagProfile& p = ev.hag.profiles[k];
        fits << k << ',' << num(p.angle_deg) << ',' << num(p.slope) << ',' << num(p.intercept) << ',' << num(p.r2)
             << ',' << num(p.rmse) << ',' << (p.included ? 1 : 0) << ',' << (p.too_short ? 1 : 0) << ','
             << p.samples.size() << '\n';
        for (const auto& [depth, ha] : p.samples)
            samples << k << ',' << num(p.angle_deg) << ',' << num(depth) << ',' << num(ha) << '\n';
    }
    write_text(dir / "profile_fits.csv", fits.str());
    write_text(dir / "profiles.csv", samples.str());

    std::ostringstream ne;
    ne << "row,col\n";
    for (const auto& [r, c] : ev.ne.flagged_pixels) ne << r << ',' << c << '\n';
    write_text(dir / "ne_pixels.csv", ne.str());

    std::ostringstream ha;
    ha << "row,col,ha_deg\n";
    for (std::size_t r = 0; r < ev.ha_map.height(); ++r)
        for (std::size_t c = 0; c < ev.ha_map.width(); ++c)
            if (!std::isnan(ev.ha_map(r, c))) ha << r << ',' << c << ',' << num(ev.ha_map(r, c)) << '\n';
    write_text(dir / "ha_map.csv", ha.str());

    if (ev.field_stats)
        write_text(dir / "field_error.csv", "median,mean,p95,pixels\n" + num(ev.field_stats->median) + ',' +
                                                num(ev.field_stats->mean) + ',' + num(ev.field_stats->p95) + ',' +
                                                std::to_string(ev.field_stats->pixels) + '\n');
}

// ---------------------------------------------------------------- registration

struct ConfigArgs {
    std::optional<fs::path> config_file;
    std::vector<std::string> overrides;
    std::optional<int> max_iters;
    std::optional<int> denoise_rank;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "Flat key=value configuration file")->check(CLI::ExistingFile);
        cmd->add_option("--set", overrides, "Configuration override key=value (repeatable)");
        cmd->add_option("--max-iters", max_iters, "Outer iteration cap")->check(CLI::PositiveNumber);
        cmd->add_option("--denoise-rank", denoise_rank, "Largest kept low-rank component count (0 = automatic)")
            ->check(CLI::NonNegativeNumber);
    }

    // File first, then flags.
    RegistrationConfig build() const {
        try {
            RegistrationConfig cfg = config_file ? RegistrationConfig::load(*config_file) : RegistrationConfig{};
            for (const std::string& kv : overrides) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
                cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            if (max_iters) cfg.max_outer_iters = *max_iters;
            if (denoise_rank) cfg.denoise_rank = *denoise_rank;
            cfg.validate();
            return cfg;
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }
};

std::vector<std::string> mode_names() {
    std::vector<std::string> names;
    for (RegistrationMode m : all_registration_modes()) names.push_back(to_string(m));
    return names;
}

std::string loss_trace_csv(const std::vector<LossRecord>& trace) {
    std::ostringstream os;
    os << "iter,total,mi,smooth,dice\n";
    for (const LossRecord& r : trace)
        os << r.iteration << ',' << num(r.total) << ',' << num(r.similarity) << ',' << num(r.smooth) << ','
           << num(r.dice) << '\n';
    return os.str();
}

json warps_json(const std::vector<BSplineWarp>& warps) {
    json out = json::array();
    for (const BSplineWarp& w : warps) {
        json v = json::array();
        for (const Vec2& c : w.control_velocities) v.push_back({c.x, c.y});
        out.push_back({{"grid_rows", w.grid_rows},
                       {"grid_cols", w.grid_cols},
                       {"spacing", w.spacing},
                       {"integration_steps", w.integration_steps},
                       {"control_velocities", std::move(v)}});
    }
    return out;
}

// Layout: tensor.bin, fields/, shifts.csv, warps.json, loss_trace.csv, status.json and
// optionally corrected/ (series directory of the resampled input frames).
void write_registration(const RegistrationResult& r, const RegistrationConfig& cfg, const fs::path& dir,
                        bool with_series) {
    make_dir(dir);
    if (with_series) save_series(r.corrected_series, dir / "corrected");
    save_tensor(r.final_tensor, dir / "tensor.bin");
    write_fields(r.fields, dir / "fields");
    write_text(dir / "shifts.csv", shifts_csv(r.rigid_shifts));
    write_text(dir / "warps.json", warps_json(r.warps).dump() + "\n");
    write_text(dir / "loss_trace.csv", loss_trace_csv(r.loss_trace));
    write_text(dir / "config.txt", cfg.to_text());
    const json status = {{"mode", to_string(r.mode)},
                         {"iterations", r.iterations},
                         {"refits_accepted", r.refits_accepted},
                         {"converged", r.converged},
                         {"diverged", r.diverged},
                         {"intensity_scale", r.intensity_scale}};
    write_text(dir / "status.json", status.dump(2) + "\n");
}

MetricsRow evaluate_written(const fs::path& reg_dir, const fs::path& mask_file, std::size_t h, std::size_t w,
                            const std::optional<fs::path>& truth_dir, const std::string& case_name,
                            const std::string& mode) {
    const EvalInputs in = load_eval_inputs(reg_dir / "tensor.bin", mask_file, h, w, truth_dir,
                                           truth_dir ? std::optional<fs::path>(reg_dir / "fields") : std::nullopt);
    Evaluation ev = evaluate(in.tensor, in.mask, in.fields ? &*in.fields : nullptr, in.truth ? &*in.truth : nullptr);
    ev.row.case_name = case_name;
    ev.row.mode = mode;
    return ev.row;
}

// ---------------------------------------------------------------- summaries

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string fixed(double v, int digits) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string mean_std(const std::vector<double>& v, int digits) {
    if (v.empty()) return "-";
    double mean = 0.0;
    for (double x : v) mean += x / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    return fixed(mean, digits) + " ± " + fixed(sd, digits);
}

std::string median_quartiles(const std::vector<double>& v, int digits) {
    if (v.empty()) return "-";
    return fixed(quantile(v, 0.5), digits) + " (" + fixed(quantile(v, 0.25), digits) + ", " +
           fixed(quantile(v, 0.75), digits) + ")";
}

std::string summary_table(const std::vector<std::string>& modes, const std::vector<MetricsRow>& rows) {
    auto pad = [](std::string s, std::size_t width) {
        // "±" is two bytes but one column.
        std::size_t cols = 0;
        for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
        if (cols < width) s.append(width - cols, ' ');
        return s;
    };
    std::ostringstream os;
    os << pad("mode", 17) << pad("R2 (mean ± sd)", 22) << pad("RMSE (mean ± sd)", 22)
       << pad("NE% median (q25, q75)", 28) << "median EPE (mean ± sd)\n";
    for (const std::string& mode : modes) {
        std::vector<double> r2, rmse, ne, epe;
        for (const MetricsRow& r : rows) {
            if (r.mode != mode) continue;
            if (!std::isnan(r.mean_r2)) r2.push_back(r.mean_r2);
            if (!std::isnan(r.mean_rmse)) rmse.push_back(r.mean_rmse);
            ne.push_back(r.ne_percent);
            if (r.median_epe) epe.push_back(*r.median_epe);
        }
        os << pad(mode, 17) << pad(mean_std(r2, 4), 22) << pad(mean_std(rmse, 3), 22)
           << pad(median_quartiles(ne, 2), 28) << mean_std(epe, 3) << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------- commands

std::pair<std::size_t, std::size_t> parse_dims(const std::string& text) {
    const auto x = text.find('x');
    try {
        if (x == std::string::npos) throw std::invalid_argument(text);
        std::size_t used = 0;
        const std::size_t h = std::stoul(text.substr(0, x), &used);
        if (used != x) throw std::invalid_argument(text);
        const std::string rest = text.substr(x + 1);
        const std::size_t w = std::stoul(rest, &used);
        if (used != rest.size() || h == 0 || w == 0) throw std::invalid_argument(text);
        return {h, w};
    } catch (const std::exception&) {
        throw UsageError("--dims expects HxW, got '" + text + "'");
    }
}

int cmd_phantom(const PhantomArgs& args, const fs::path& out) {
    const PhantomConfig cfg = args.config(args.seed);
    const Phantom ph = build_phantom(cfg);
    write_phantom(ph, cfg, out);
    std::cout << "wrote " << ph.series.frame_count() << " frames of " << cfg.height << "x" << cfg.width << " to "
              << out.string() << "\n";
    return kExitOk;
}

struct RegisterArgs {
    fs::path in;
    fs::path out;
    std::string mode = "proposed";
    std::optional<fs::path> mask;
    std::optional<fs::path> frame_masks;
    std::optional<fs::path> truth;
    std::optional<std::string> case_name;
    ConfigArgs config;
};

int cmd_register(const RegisterArgs& a) {
    RegistrationConfig cfg = a.config.build();
    cfg.mode = parse_registration_mode(a.mode);
    const DiffusionSeries series = [&] {
        try {
            return load_series(a.in);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }();
    const std::size_t h = series.height, w = series.width;

    std::optional<MyocardiumMask> mask;
    std::optional<std::vector<MyocardiumMask>> frame_masks;
    try {
        if (a.mask) mask = load_mask(*a.mask, h, w);
        if (a.frame_masks) {
            frame_masks.emplace();
            for (std::size_t i = 0; i < series.frame_count(); ++i)
                frame_masks->push_back(load_mask(*a.frame_masks / indexed("mask", i), h, w));
        }
        if (a.truth) {
            if (!a.mask) throw Error("--truth needs --mask");
            const json meta = read_truth_meta(*a.truth);
            if (meta.at("frames").get<std::size_t>() != series.frame_count())
                throw Error("truth frame count differs from the series");
            read_fields(*a.truth / "fields", series.frame_count(), h, w);
        }
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (cfg.mode == RegistrationMode::semi_supervised && (!mask || !frame_masks))
        throw UsageError("mode semi_supervised needs --mask and --frame-masks");

    const RegistrationResult r =
        register_groupwise(series, mask ? &*mask : nullptr, cfg, frame_masks ? &*frame_masks : nullptr);
    write_registration(r, cfg, a.out, true);
    if (mask) {
        const std::string name = a.case_name ? *a.case_name : a.in.filename().string();
        const MetricsRow row = evaluate_written(a.out, *a.mask, h, w, a.truth, name, a.mode);
        write_text(a.out / "metrics.csv", std::string(kMetricsHeader) + metrics_line(row));
    }
    std::cout << a.mode << ": " << r.iterations << " iterations, " << (r.converged ? "converged" : "not converged")
              << (r.diverged ? ", diverged" : "") << "\n";
    return r.diverged ? kExitDiverged : kExitOk;
}

struct EvaluateArgs {
    fs::path tensor;
    fs::path mask;
    fs::path out;
    std::optional<fs::path> truth;
    std::optional<fs::path> fields;
    std::optional<std::string> dims;
    std::string case_name = "case";
    std::string mode = "-";
};

int cmd_evaluate(const EvaluateArgs& a) {
    std::size_t h = 0, w = 0;
    if (a.dims) {
        std::tie(h, w) = parse_dims(*a.dims);
    } else if (a.truth) {
        const json meta = read_truth_meta(*a.truth);
        h = meta.at("height").get<std::size_t>();
        w = meta.at("width").get<std::size_t>();
    } else {
        const auto bytes = fs::file_size(a.mask);
        const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(bytes))));
        if (side * side != bytes) throw UsageError("mask is not square; pass --dims HxW");
        h = w = side;
    }
    const fs::path fields_dir = a.fields ? *a.fields : a.tensor.parent_path() / "fields";
    const EvalInputs in = [&] {
        try {
            return load_eval_inputs(a.tensor, a.mask, h, w, a.truth, fields_dir);
        } catch (const Error& e) {
            throw UsageError(e.what());
        }
    }();
    Evaluation ev = evaluate(in.tensor, in.mask, in.fields ? &*in.fields : nullptr, in.truth ? &*in.truth : nullptr);
    ev.row.case_name = a.case_name;
    ev.row.mode = a.mode;
    write_evaluation(ev, a.out);
    std::cout << kMetricsHeader << metrics_line(ev.row);
    return kExitOk;
}

struct AblateArgs {
    fs::path out;
    std::vector<std::string> modes;
    std::vector<std::uint64_t> seeds{1};
    PhantomArgs phantom;
    ConfigArgs config;
};

int cmd_ablate(AblateArgs a) {
    RegistrationConfig cfg = a.config.build();
    if (a.modes.empty()) a.modes = mode_names();
    std::vector<RegistrationMode> modes;
    for (const std::string& m : a.modes) modes.push_back(parse_registration_mode(m));
    for (std::uint64_t seed : a.seeds) build_phantom(a.phantom.config(seed));  // flag check before writing

    make_dir(a.out);
    std::vector<MetricsRow> rows;
    bool diverged = false;
    for (std::uint64_t seed : a.seeds) {
        const PhantomConfig pc = a.phantom.config(seed);
        const Phantom ph = make_phantom(pc);
        const std::string case_name = "seed" + std::to_string(seed);
        const fs::path case_dir = a.out / "cases" / case_name;
        write_phantom(ph, pc, case_dir / "phantom");
        const fs::path truth = case_dir / "phantom" / "truth";

        const AblationResult res = run_ablation(ph.series, ph.truth.true_mask, modes, cfg, &ph.truth.frame_masks,
                                                &ph.truth.true_warps);
        for (std::size_t k = 0; k < modes.size(); ++k) {
            const RegistrationResult& r = res.results[k];
            const std::string mode = to_string(modes[k]);
            RegistrationConfig rc = cfg;
            rc.mode = modes[k];
            write_registration(r, rc, case_dir / mode, false);
            rows.push_back(
                evaluate_written(case_dir / mode, truth / "mask.bin", pc.height, pc.width, truth, case_name, mode));
            diverged = diverged || r.diverged;
            std::cerr << case_name << " " << mode << " done\n";
        }
    }
    std::string csv = kMetricsHeader;
    for (const MetricsRow& r : rows) csv += metrics_line(r);
    write_text(a.out / "metrics.csv", csv);
    const std::string table = summary_table(a.modes, rows);
    write_text(a.out / "summary.txt", table);
    std::cout << table;
    return diverged ? kExitDiverged : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Groupwise motion correction for diffusion-tensor cardiac MR"};
    app.require_subcommand(1);
    app.fallthrough();
    std::optional<int> threads;
    app.add_option("--threads", threads, "Worker cap (default: DTCMR_THREADS, else all cores)")
        ->check(CLI::PositiveNumber);

    const std::vector<std::string> modes = mode_names();
    std::string mode_list;
    for (const std::string& m : modes) mode_list += (mode_list.empty() ? "" : "|") + m;

    PhantomArgs phantom;
    fs::path phantom_out;
    CLI::App* ph = app.add_subcommand("phantom", "Generate a synthetic phantom series with ground truth");
    ph->add_option("--out", phantom_out, "Output directory")->required();
    phantom.add_to(ph, true);

    RegisterArgs reg;
    CLI::App* rg = app.add_subcommand("register", "Groupwise registration of a series directory");
    rg->add_option("--in", reg.in, "Series directory")->required()->check(CLI::ExistingDirectory);
    rg->add_option("--out", reg.out, "Output directory")->required();
    rg->add_option("--mode", reg.mode, mode_list)->check(CLI::IsMember(modes))->capture_default_str();
    rg->add_option("--mask", reg.mask, "Myocardium mask (uint8, template space)")->check(CLI::ExistingFile);
    rg->add_option("--frame-masks", reg.frame_masks, "Directory of per-frame masks mask_NNN.bin")
        ->check(CLI::ExistingDirectory);
    rg->add_option("--truth", reg.truth, "Phantom truth directory; adds median_epe to metrics.csv")
        ->check(CLI::ExistingDirectory);
    rg->add_option("--case", reg.case_name, "Case label in metrics.csv (default: input directory name)");
    reg.config.add_to(rg);

    EvaluateArgs ev;
    CLI::App* evc = app.add_subcommand("evaluate", "NE% and helix-angle-gradient metrics of a tensor file");
    evc->add_option("--tensor", ev.tensor, "Tensor file")->required()->check(CLI::ExistingFile);
    evc->add_option("--mask", ev.mask, "Myocardium mask")->required()->check(CLI::ExistingFile);
    evc->add_option("--out", ev.out, "Output directory")->required();
    evc->add_option("--truth", ev.truth, "Phantom truth directory (adds median_epe)")->check(CLI::ExistingDirectory);
    evc->add_option("--fields", ev.fields, "Recovered fields directory (default: <tensor dir>/fields)")
        ->check(CLI::ExistingDirectory);
    evc->add_option("--dims", ev.dims, "Image size HxW (default: from --truth, else square mask)");
    evc->add_option("--case", ev.case_name, "Case label")->capture_default_str();
    evc->add_option("--mode", ev.mode, "Mode label")->capture_default_str();

    AblateArgs ab;
    CLI::App* abc = app.add_subcommand("ablate", "Run several modes over phantom seeds and tabulate metrics");
    abc->add_option("--out", ab.out, "Output directory")->required();
    abc->add_option("--modes", ab.modes, "Modes (default: all)")->delimiter(',')->check(CLI::IsMember(modes));
    abc->add_option("--seeds", ab.seeds, "Phantom seeds")->delimiter(',')->capture_default_str();
    ab.phantom.add_to(abc, false);
    ab.config.add_to(abc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (threads) set_thread_count(*threads);
    else configure_threads_from_env();

    try {
        if (ph->parsed()) return cmd_phantom(phantom, phantom_out);
        if (rg->parsed()) return cmd_register(reg);
        if (evc->parsed()) return cmd_evaluate(ev);
        if (abc->parsed()) return cmd_ablate(ab);
    } catch (const UsageError& e) {
        const auto active = app.get_subcommands();
        std::cerr << "usage error: " << e.what() << "\n\n" << (active.empty() ? app.help() : active.front()->help());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}
