#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dtcmr/diagnostics.hpp"
#include "dtcmr/lowrank.hpp"
#include "dtcmr/metrics.hpp"
#include "dtcmr/objective.hpp"
#include "dtcmr/parallel.hpp"
#include "dtcmr/phantom.hpp"
#include "dtcmr/registration.hpp"
#include "dtcmr/series.hpp"
#include "dtcmr/tensorfit.hpp"

namespace py = pybind11;
using namespace dtcmr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& a) {
    if (a.ndim() != 2) throw Error("expected a 2-D array");
    Image img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), img.begin());
    return img;
}

Array from_image(const Image& img) {
    Array out({img.height(), img.width()});
    std::copy(img.begin(), img.end(), out.mutable_data());
    return out;
}

std::vector<Image> to_stack(const Array& a) {
    if (a.ndim() != 3) throw Error("expected a (frames, height, width) array");
    const auto n = static_cast<std::size_t>(a.shape(0)), h = static_cast<std::size_t>(a.shape(1)),
               w = static_cast<std::size_t>(a.shape(2));
    std::vector<Image> frames(n, Image(h, w));
    for (std::size_t i = 0; i < n; ++i) std::copy(a.data() + i * h * w, a.data() + (i + 1) * h * w, frames[i].begin());
    return frames;
}

Array from_stack(const std::vector<Image>& frames) {
    const std::size_t h = frames.empty() ? 0 : frames[0].height(), w = frames.empty() ? 0 : frames[0].width();
    Array out({frames.size(), h, w});
    for (std::size_t i = 0; i < frames.size(); ++i) std::copy(frames[i].begin(), frames[i].end(), out.mutable_data() + i * h * w);
    return out;
}

Array from_fields(const std::vector<DenseField>& fields) {
    const std::size_t h = fields.empty() ? 0 : fields[0].height(), w = fields.empty() ? 0 : fields[0].width();
    Array out({fields.size(), h, w, std::size_t{2}});
    double* p = out.mutable_data();
    for (const DenseField& f : fields)
        for (const Vec2& v : f) {
            *p++ = v.x;
            *p++ = v.y;
        }
    return out;
}

std::vector<DenseField> to_fields(const Array& a) {
    if (a.ndim() != 4 || a.shape(3) != 2) throw Error("expected a (frames, height, width, 2) array");
    const auto n = static_cast<std::size_t>(a.shape(0)), h = static_cast<std::size_t>(a.shape(1)),
               w = static_cast<std::size_t>(a.shape(2));
    std::vector<DenseField> out(n, DenseField(h, w));
    const double* p = a.data();
    for (DenseField& f : out)
        for (Vec2& v : f) {
            v.x = *p++;
            v.y = *p++;
        }
    return out;
}

// Tensor as (s0 [H, W], D [H, W, 6]).
py::tuple from_tensor(const TensorField& t) {
    Array d({t.height, t.width, std::size_t{6}});
    double* p = d.mutable_data();
    for (const Sym3& s : t.d) p = std::copy(s.begin(), s.end(), p);
    return py::make_tuple(from_image(t.s0), d);
}

TensorField to_tensor(const Array& s0, const Array& d) {
    if (d.ndim() != 3 || d.shape(2) != 6 || s0.ndim() != 2 || s0.shape(0) != d.shape(0) || s0.shape(1) != d.shape(1))
        throw Error("expected s0 (H, W) and D (H, W, 6)");
    TensorField t(static_cast<std::size_t>(d.shape(0)), static_cast<std::size_t>(d.shape(1)));
    t.s0 = to_image(s0);
    const double* p = d.data();
    for (Sym3& s : t.d) {
        std::copy(p, p + 6, s.begin());
        p += 6;
    }
    return t;
}

MyocardiumMask to_mask(const Array& m) {
    const Image img = to_image(m);
    Grid<std::uint8_t> labels(img.height(), img.width());
    for (std::size_t p = 0; p < img.size(); ++p) labels[p] = img[p] != 0.0;
    return MyocardiumMask::from_labels(labels);
}

DiffusionSeries to_series(const Array& frames, const std::vector<double>& bvalues,
                          const std::vector<std::array<double, 3>>& directions) {
    DiffusionSeries s;
    s.frames = to_stack(frames);
    s.height = s.frames.empty() ? 0 : s.frames[0].height();
    s.width = s.frames.empty() ? 0 : s.frames[0].width();
    s.bvalues = bvalues;
    s.directions.assign(directions.begin(), directions.end());
    s.rep_index.assign(s.frames.size(), 0);
    // Repetition index counts earlier frames with the same encoding.
    for (std::size_t i = 0; i < s.frames.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (s.bvalues[j] == s.bvalues[i] && (s.bvalues[i] == 0.0 || s.directions[j] == s.directions[i])) ++s.rep_index[i];
    validate_series(s);
    return s;
}

py::dict series_dict(const DiffusionSeries& s) {
    py::dict d;
    d["frames"] = from_stack(s.frames);
    d["bvalues"] = s.bvalues;
    d["directions"] = std::vector<std::array<double, 3>>(s.directions.begin(), s.directions.end());
    d["rep_index"] = s.rep_index;
    return d;
}

RegistrationConfig make_config(const std::string& mode, const std::optional<int>& max_iters,
                               const std::map<std::string, std::string>& overrides) {
    RegistrationConfig cfg;
    cfg.mode = parse_registration_mode(mode);
    if (max_iters) cfg.max_outer_iters = *max_iters;
    for (const auto& [k, v] : overrides) cfg.set(k, v);
    cfg.validate();
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Groupwise DT-CMR motion correction";
    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    m.def("set_threads", &set_thread_count, py::arg("n"));

    m.def(
        "make_phantom",
        [](std::size_t size, int nd, int nrep, double b, double noise, const std::string& motion, double shift_amp,
           double deform_amp, double jitter, std::uint64_t seed, std::optional<double> endo, std::optional<double> epi,
           std::optional<double> body) {
            PhantomConfig c;
            if (endo) c.endo_radius = *endo;
            if (epi) c.epi_radius = *epi;
            if (body) c.body_radius = *body;
            c.height = c.width = size;
            c.n_directions = nd;
            c.n_repetitions = nrep;
            c.bvalue = b;
            c.noise_sigma = noise;
            c.motion = parse_motion_kind(motion);
            c.shift_amplitude = shift_amp;
            c.deform_amplitude = deform_amp;
            c.intensity_jitter = jitter;
            c.seed = seed;
            const Phantom ph = make_phantom(c);
            py::dict d = series_dict(ph.series);
            const auto [s0, dt] = from_tensor(ph.truth.true_tensor).cast<std::pair<Array, Array>>();
            d["true_s0"] = s0;
            d["true_tensor"] = dt;
            Image mask(size, size);
            for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = ph.truth.true_mask.labels[p];
            d["mask"] = from_image(mask);
            d["true_fields"] = from_fields(ph.truth.true_warps);
            return d;
        },
        py::arg("size") = 96, py::arg("nd") = 7, py::arg("nrep") = 10, py::arg("b") = 600.0, py::arg("noise") = 0.0,
        py::arg("motion") = "none", py::arg("shift_amp") = 0.0, py::arg("deform_amp") = 0.0, py::arg("jitter") = 0.0,
        py::arg("seed") = 1, py::arg("endo") = py::none(), py::arg("epi") = py::none(), py::arg("body") = py::none());

    m.def(
        "load_series", [](const std::string& dir) { return series_dict(load_series(dir)); }, py::arg("dir"));
    m.def(
        "save_series",
        [](const Array& frames, const std::vector<double>& b, const std::vector<std::array<double, 3>>& g,
           const std::string& dir) { save_series(to_series(frames, b, g), dir); },
        py::arg("frames"), py::arg("bvalues"), py::arg("directions"), py::arg("dir"));

    m.def(
        "fit_tensor",
        [](const Array& frames, const std::vector<double>& b, const std::vector<std::array<double, 3>>& g) {
            return from_tensor(fit_tensor(to_series(frames, b, g)));
        },
        py::arg("frames"), py::arg("bvalues"), py::arg("directions"), "Returns (s0, D) with D in (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz) order.");

    m.def(
        "pseudo_frames",
        [](const Array& s0, const Array& d, const std::vector<double>& b, const std::vector<std::array<double, 3>>& g) {
            return from_stack(generate_pseudo_frames(to_tensor(s0, d), b, {g.begin(), g.end()}));
        },
        py::arg("s0"), py::arg("tensor"), py::arg("bvalues"), py::arg("directions"));

    m.def(
        "singular_values",
        [](const Array& frames, int rank) { return factorize(to_stack(frames), rank).singular_values; },
        py::arg("frames"), py::arg("rank"));

    m.def(
        "nmi", [](const Array& a, const Array& b, int bins, double sigma) { return nmi(to_image(a), to_image(b), {bins, sigma}); },
        py::arg("a"), py::arg("b"), py::arg("bins") = 32, py::arg("sigma") = 1.0);

    m.def(
        "register",
        [](const Array& frames, const std::vector<double>& b, const std::vector<std::array<double, 3>>& g,
           const std::optional<Array>& mask, const std::string& mode, std::optional<int> max_iters,
           const std::map<std::string, std::string>& config) {
            const DiffusionSeries s = to_series(frames, b, g);
            const RegistrationConfig cfg = make_config(mode, max_iters, config);
            std::optional<MyocardiumMask> mk;
            if (mask) mk = to_mask(*mask);
            RegistrationResult r;
            {
                py::gil_scoped_release release;
                r = register_groupwise(s, mk ? &*mk : nullptr, cfg);
            }
            py::dict d;
            d["fields"] = from_fields(r.fields);
            std::vector<std::array<double, 2>> shifts;
            for (const Vec2& v : r.rigid_shifts) shifts.push_back({v.x, v.y});
            d["rigid_shifts"] = shifts;
            d["corrected"] = from_stack(r.corrected_series.frames);
            const auto [s0, dt] = from_tensor(r.final_tensor).cast<std::pair<Array, Array>>();
            d["s0"] = s0;
            d["tensor"] = dt;
            std::vector<double> trace;
            for (const LossRecord& l : r.loss_trace) trace.push_back(l.total);
            d["loss_trace"] = trace;
            d["iterations"] = r.iterations;
            d["converged"] = r.converged;
            d["diverged"] = r.diverged;
            return d;
        },
        py::arg("frames"), py::arg("bvalues"), py::arg("directions"), py::arg("mask") = py::none(),
        py::arg("mode") = "proposed", py::arg("max_iters") = py::none(),
        py::arg("config") = std::map<std::string, std::string>{});

    m.def(
        "evaluate",
        [](const Array& s0, const Array& d, const Array& mask) {
            const TensorField t = to_tensor(s0, d);
            const MyocardiumMask mk = to_mask(mask);
            const Image ha = helix_angle_map(t, mk);
            const HagReport hag = hag_line_profiles(ha, mk);
            py::dict out;
            out["ne_percent"] = negative_eigen_percent(t, mk).ne_percent;
            out["mean_r2"] = hag.mean_r2;
            out["mean_rmse"] = hag.mean_rmse;
            out["included_profiles"] = hag.included_count;
            out["ha_map"] = from_image(ha);
            return out;
        },
        py::arg("s0"), py::arg("tensor"), py::arg("mask"));

    m.def(
        "field_error",
        [](const Array& recovered, const Array& truth, const std::optional<Array>& mask) {
            std::optional<MyocardiumMask> mk;
            if (mask) mk = to_mask(*mask);
            const FieldErrorStats s = field_error(to_fields(recovered), to_fields(truth), mk ? &*mk : nullptr);
            py::dict out;
            out["median"] = s.median;
            out["mean"] = s.mean;
            out["p95"] = s.p95;
            out["pixels"] = s.pixels;
            return out;
        },
        py::arg("recovered"), py::arg("truth"), py::arg("mask") = py::none());
}
