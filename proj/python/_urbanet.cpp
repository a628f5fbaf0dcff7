#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "urbanet/augment.hpp"
#include "urbanet/cli.hpp"
#include "urbanet/eval.hpp"
#include "urbanet/grid.hpp"
#include "urbanet/synth.hpp"
#include "urbanet/unet.hpp"

namespace py = pybind11;
using namespace urbanet;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

template <class T>
py::array_t<T> to_array(const std::vector<T>& v, std::size_t h, std::size_t w) {
    py::array_t<T> out({h, w});
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
}

template <class A>
auto as_span(const A& a) {
    return std::span(a.data(), static_cast<std::size_t>(a.size()));
}

py::dict metrics_dict(const MetricsRow& r) {
    py::dict d;
    d["n_cells"] = r.n_cells;
    d["mean_abs"] = r.mean_abs;
    d["max_abs"] = r.max_abs;
    d["std"] = r.std_dev;
    d["r2"] = r.r2;
    return d;
}

Transform transform_from(const std::string& name) {
    for (auto t : kAugmentations) {
        if (transform_name(t) == name) return t;
    }
    throw py::value_error("unknown transform '" + name + "'");
}

}  // namespace

PYBIND11_MODULE(_urbanet, m) {
    m.doc() = "Masked U-Net urban change prediction";

    py::register_exception<Error>(m, "UrbanetError", PyExc_RuntimeError);

    py::class_<WorldGrid>(m, "WorldGrid")
        .def_readonly("height", &WorldGrid::height)
        .def_readonly("width", &WorldGrid::width)
        .def_property_readonly("mask", [](const WorldGrid& g) { return to_array(g.mask, g.height, g.width); })
        .def_property_readonly("regions", [](const WorldGrid& g) { return to_array(g.regions, g.height, g.width); })
        .def_readonly("region_table", &WorldGrid::region_table)
        .def("channel_names", &WorldGrid::channel_names)
        .def("channel", [](const WorldGrid& g, const std::string& name) {
            return to_array(g.channel(name).plane, g.height, g.width);
        })
        .def("land_count", &WorldGrid::land_count)
        .def("save", [](const WorldGrid& g, const std::filesystem::path& p) { save_grid(g, p); });

    m.def("load_grid", &load_grid, py::arg("path"));

    m.def(
        "gen_world",
        [](std::uint64_t seed, std::size_t height, std::size_t width, double land_fraction, std::size_t n_regions,
           double noise_std, double pop_noise_std) {
            SynthConfig c;
            c.seed = seed;
            c.height = height;
            c.width = width;
            c.land_fraction = land_fraction;
            c.n_regions = n_regions;
            c.noise_std = noise_std;
            c.pop_noise_std = pop_noise_std;
            return gen_world(c);
        },
        py::arg("seed") = 1, py::arg("height") = 96, py::arg("width") = 96, py::arg("land_fraction") = 0.6,
        py::arg("n_regions") = 16, py::arg("noise_std") = 0.01,
        py::arg("pop_noise_std") = 0.03);

    m.def(
        "split_counts",
        [](const WorldGrid& g, const std::set<std::string>& test_regions) {
            const auto s = assign_split(g, test_regions);
            py::dict d;
            d["train"] = s.train_count;
            d["test"] = s.test_count;
            d["water"] = s.water_count;
            d["unknown"] = s.unknown_regions;
            return d;
        },
        py::arg("grid"), py::arg("test_regions"));

    m.def(
        "transform_plane",
        [](const F32& plane, const std::string& name) {
            if (plane.ndim() != 2 || plane.shape(0) != plane.shape(1)) throw py::value_error("expected a square plane");
            const auto s = static_cast<std::size_t>(plane.shape(0));
            py::array_t<float> out({s, s});
            transform_plane(as_span(plane), std::span(out.mutable_data(), s * s), s, transform_from(name));
            return out;
        },
        py::arg("plane"), py::arg("transform"));

    m.def(
        "masked_mse",
        [](const F64& pred, const F64& target, const F64& mask) {
            if (pred.ndim() != 4) throw py::value_error("pred must be n x C x S x S");
            const auto n = static_cast<std::size_t>(pred.shape(0));
            const auto c = static_cast<std::size_t>(pred.shape(1));
            const auto s = static_cast<std::size_t>(pred.shape(2));
            if (target.size() != pred.size() || static_cast<std::size_t>(mask.size()) != n * s * s) {
                throw py::value_error("target/mask shapes do not match pred");
            }
            return masked_mse<double>(as_span(pred), as_span(target), as_span(mask), n, c, s);
        },
        py::arg("pred"), py::arg("target"), py::arg("mask"));

    m.def("median_of", &median_of, py::arg("values"));

    m.def(
        "residual_metrics",
        [](const F64& pred, const F64& truth, const U8& stratum) {
            if (pred.size() != truth.size() || pred.size() != stratum.size()) {
                throw py::value_error("pred, truth and stratum must have the same size");
            }
            try {
                return metrics_dict(residual_metrics(as_span(pred), as_span(truth), as_span(stratum)));
            } catch (const UndefinedMetricError& e) {
                return metrics_dict(e.row);
            }
        },
        py::arg("pred"), py::arg("truth"), py::arg("stratum"));

    m.def(
        "grad_check",
        [](std::uint64_t seed, std::size_t depth, std::size_t base_features, std::size_t tile_size, double tolerance) {
            UNetSpec spec;
            spec.input_channels = 9;
            spec.base_features = base_features;
            spec.depth = depth;
            spec.tile_size = tile_size;
            spec.heads = {{"d_urban", 1}};
            GradCheckOptions opt;
            opt.tolerance = tolerance;
            const auto r = grad_check(spec, seed, opt);
            py::dict d;
            d["max_rel_error"] = r.max_rel_error;
            d["worst_param"] = r.worst_param;
            d["checked"] = r.checked;
            d["passed"] = r.passed;
            return d;
        },
        py::arg("seed") = 1, py::arg("depth") = 1, py::arg("base_features") = 4, py::arg("tile_size") = 8,
        py::arg("tolerance") = 1e-4);

    m.def(
        "run_cli",
        [](std::vector<std::string> args) {
            args.insert(args.begin(), "urbanet");
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"));
}
