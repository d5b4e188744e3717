#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "uidkat/checkpoint.hpp"
#include "uidkat/data.hpp"
#include "uidkat/eval.hpp"
#include "uidkat/gradsuite.hpp"
#include "uidkat/image.hpp"
#include "uidkat/training.hpp"

namespace py = pybind11;
using namespace uidkat;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  AlignedVector<T> data(a.data(), a.data() + a.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
Array<T> to_array(const Tensor<T>& t) {
  Array<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.vec().begin(), t.vec().end(), out.mutable_data());
  return out;
}

std::vector<double> to_vector(const Array<double>& a) { return {a.data(), a.data() + a.size()}; }

py::object json_to_py(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

SsimChannels parse_channels(const std::string& mode) {
  if (mode == "luma") return SsimChannels::kLuma;
  if (mode == "rgb") return SsimChannels::kRgbMean;
  throw ShapeError("ssim channels must be 'luma' or 'rgb', got '" + mode + "'");
}

py::dict log_to_dict(const StepLog& l) {
  py::dict d;
  d["step"] = l.step;
  d["epoch"] = l.epoch;
  d["lr"] = l.lr;
  d["adv_g"] = l.adv_g;
  d["ide"] = l.ide;
  d["pc"] = l.pc;
  d["total_g"] = l.total_g;
  d["adv_d"] = l.adv_d;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "UID-KAT unpaired dehazing: kernels, losses, networks, training and metrics";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  // Rational activations.
  m.def(
      "safe_pade",
      [](const Array<double>& numer, const Array<double>& denom, const Array<double>& x) {
        const auto a = to_vector(numer), b = to_vector(denom);
        Array<double> out(std::vector<py::ssize_t>(x.shape(), x.shape() + x.ndim()));
        for (py::ssize_t i = 0; i < x.size(); ++i) out.mutable_data()[i] = safe_pade(a, b, x.data()[i]);
        return out;
      },
      py::arg("numer"), py::arg("denom"), py::arg("x"),
      "Elementwise P(x) / (1 + |b1 x + ... + bn x^n|) with Horner evaluation.");
  m.def(
      "rational_eval",
      [](const Array<double>& x, const Array<double>& numer, const Array<double>& denom) {
        const auto a = to_tensor(numer), b = to_tensor(denom);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
          throw ShapeError("rational_eval: numer (G, m+1) and denom (G, n) must share G");
        }
        RationalParams<double> p("rational", a.dim(0), a.dim(1) - 1, b.dim(1));
        p.a.value = a;
        p.b.value = b;
        return to_array(rational_eval(to_tensor(x), p));
      },
      py::arg("x"), py::arg("numer"), py::arg("denom"),
      "Group-wise rational activation over the last axis of x (..., C).");

  // Losses.
  m.def(
      "patch_nce_single",
      [](const Array<double>& anchor, const Array<double>& positive, const Array<double>& negatives,
         double tau) {
        const auto q = to_vector(anchor), k = to_vector(positive);
        const auto negs = to_tensor(negatives);
        if (negs.rank() != 2) throw ShapeError("patch_nce_single: negatives must be (N, D)");
        std::vector<std::span<const double>> rows;
        for (std::size_t i = 0; i < negs.dim(0); ++i) rows.emplace_back(negs.data() + i * negs.dim(1), negs.dim(1));
        return patch_nce_single(q, k, rows, tau);
      },
      py::arg("anchor"), py::arg("positive"), py::arg("negatives"), py::arg("tau") = kDefaultTau);
  m.def("lsgan_generator_loss", [](const Array<double>& fake) { return lsgan_generator_loss(to_tensor(fake)); });
  m.def("lsgan_discriminator_loss", [](const Array<double>& real, const Array<double>& fake) {
    return lsgan_discriminator_loss(to_tensor(real), to_tensor(fake));
  });
  m.def("identity_loss", [](const Array<double>& gen, const Array<double>& clean) {
    return identity_loss(to_tensor(gen), to_tensor(clean));
  });
  m.def(
      "total_generator_loss",
      [](double adv, double ide, double pc, double lambda_adv, double lambda_ide, double lambda_nce) {
        return total_generator_loss(adv, ide, pc, LossWeights{lambda_adv, lambda_ide, lambda_nce});
      },
      py::arg("adv"), py::arg("ide"), py::arg("pc"), py::arg("lambda_adv") = 1.0,
      py::arg("lambda_ide") = 1.0, py::arg("lambda_nce") = 5.0);

  // Metrics.
  m.def(
      "psnr",
      [](const Array<double>& pred, const Array<double>& gt, double max_value) {
        return psnr(to_tensor(pred), to_tensor(gt), max_value);
      },
      py::arg("pred"), py::arg("gt"), py::arg("max_value") = 1.0);
  m.def(
      "ssim",
      [](const Array<double>& pred, const Array<double>& gt, const std::string& channels) {
        return ssim(to_tensor(pred), to_tensor(gt), parse_channels(channels));
      },
      py::arg("pred"), py::arg("gt"), py::arg("channels") = "luma");

  // Images and haze.
  m.def("read_image", [](const std::filesystem::path& p) { return to_array(read_image(p)); },
        "Decodes PNG or JPEG to a (3, H, W) float32 array in [0, 1].");
  m.def("write_png", [](const std::filesystem::path& p, const Array<float>& img) { write_png(p, to_tensor(img)); });
  m.def(
      "synthesize_haze",
      [](const Array<float>& clean, double t, double airlight) {
        return to_array(synthesize_haze(to_tensor(clean), HazeParams{t, airlight}));
      },
      py::arg("clean"), py::arg("t"), py::arg("airlight"), "I = J t + A (1 - t).");
  m.def(
      "synthesize_haze_folder",
      [](const std::filesystem::path& clean, const std::filesystem::path& out, std::uint64_t seed) {
        return synthesize_haze_folder(clean, out, Rng(seed));
      },
      py::arg("clean_dir"), py::arg("out_dir"), py::arg("seed") = 0);

  // Audit and gradient suite.
  m.def(
      "audit",
      [](char variant, std::size_t input_size, bool auxiliary) {
        return json_to_py(to_json(audit_variant(variant, input_size, auxiliary)));
      },
      py::arg("variant") = 'T', py::arg("input_size") = 256, py::arg("auxiliary") = false);
  m.def(
      "gradcheck",
      [](std::uint64_t seed) {
        py::list out;
        for (const auto& c : run_gradient_suite(seed)) {
          py::dict d;
          d["name"] = c.name;
          d["composed"] = c.composed;
          d["passed"] = c.report.passed;
          d["max_rel_error"] = c.report.max_rel_error();
          d["tolerance"] = c.report.tolerance;
          d["failure"] = c.report.failure;
          out.append(d);
        }
        return out;
      },
      py::arg("seed") = 0);

  // Generator.
  py::class_<Generator<float>>(m, "Generator")
      .def(py::init([](char variant, std::uint64_t seed) {
             Rng rng(seed);
             return make_generator<float>(variant_config(variant), rng);
           }),
           py::arg("variant") = 'T', py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& dir) { return load_generator(dir); })
      .def("save", [](Generator<float>& g, const std::filesystem::path& dir) { save_generator(dir, g); })
      .def("forward", [](const Generator<float>& g, const Array<float>& x) { return to_array(g.forward(to_tensor(x))); },
           "(B, 3, H, W) in [-1, 1] with H, W multiples of 16 -> same shape in [-1, 1].")
      .def(
          "restore",
          [](const Generator<float>& g, const Array<float>& img, std::size_t max_pixels) {
            return to_array(restore_image(g, to_tensor(img), max_pixels));
          },
          py::arg("image"), py::arg("max_pixels") = kDefaultMaxPixels,
          "(3, H, W) in [0, 1] of any size -> restored (3, H, W) in [0, 1].")
      .def_property_readonly("num_params", [](Generator<float>& g) {
        std::size_t n = 0;
        for (auto* p : g.params()) n += p->value.numel();
        return n;
      });

  // Training.
  py::class_<TrainState>(m, "Trainer")
      .def(py::init([](const std::string& config_text) {
             TrainConfig cfg;
             apply_config_text(cfg, config_text);
             cfg.validate();
             return init_train_state(cfg);
           }),
           py::arg("config") = "", "Builds a training state from 'key = value' config text.")
      .def_static("load", [](const std::filesystem::path& dir) { return load_train_state(dir); })
      .def("save", [](TrainState& s, const std::filesystem::path& dir) { save_train_state(s, dir); })
      .def(
          "step",
          [](TrainState& s, const Array<float>& hazy, const Array<float>& clean) {
            return log_to_dict(train_step(s, to_tensor(hazy), to_tensor(clean)));
          },
          py::arg("hazy"), py::arg("clean"),
          "One generator then one discriminator update on (B, 3, S, S) batches in [-1, 1].")
      .def_property_readonly("steps", [](const TrainState& s) { return s.step; })
      .def_property_readonly("config", [](const TrainState& s) { return json_to_py(to_json(s.cfg)); })
      .def_property_readonly(
          "generator", [](TrainState& s) -> Generator<float>& { return s.model.gen; },
          py::return_value_policy::reference_internal);
}
