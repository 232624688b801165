#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "tic/codec.hpp"
#include "tic/image.hpp"
#include "tic/train.hpp"

namespace py = pybind11;
using namespace tic;

namespace {

using U8Image = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

ImageBuffer to_buffer(const U8Image& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected an HxWx3 uint8 array");
  ImageBuffer img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

U8Image to_array(const ImageBuffer& img) {
  U8Image out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

py::bytes encode(const TicModel& m, const U8Image& a) {
  const auto padded = pad_reflect(to_buffer(a), ModelConfig::kSpatialMultiple);
  std::vector<std::uint8_t> bytes;
  {
    py::gil_scoped_release nogil;
    bytes = serialize(codec::encode(m, padded.image.to_tensor(), padded.height, padded.width).stream);
  }
  return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

U8Image decode(const TicModel& m, const py::bytes& data) {
  const std::string s = data;
  ImageBuffer img;
  {
    py::gil_scoped_release nogil;
    const BitStream bs = parse_bitstream(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    img = crop_back(ImageBuffer::from_tensor(codec::decode(m, bs)), bs.height, bs.width);
  }
  return to_array(img);
}

py::dict metrics_dict(const train::StepMetrics& s) {
  py::dict d;
  d["loss"] = s.loss;
  d["bpp"] = s.bpp;
  d["mse"] = s.mse;
  d["grad_norm"] = s.grad_norm;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tic, mod) {
  mod.doc() = "Transformer-based learned image codec";

  py::register_exception<ContractError>(mod, "ContractError", PyExc_ValueError);
  py::register_exception<FormatError>(mod, "FormatError", PyExc_ValueError);
  py::register_exception<CheckpointError>(mod, "CheckpointError", PyExc_IOError);
  py::register_exception<ImageError>(mod, "ImageError", PyExc_IOError);
  py::register_exception<train::NonFiniteError>(mod, "NonFiniteError", PyExc_ArithmeticError);

  mod.def("preset_names", &preset_names);
  mod.def("lambda_ladder", [] { return std::vector<double>(kLambdaLadder.begin(), kLambdaLadder.end()); });

  py::class_<TicModel>(mod, "Model")
      .def(py::init([](const std::string& name, std::uint64_t seed) { return TicModel(preset(name), seed); }),
           py::arg("preset") = "toy-16", py::arg("seed") = 0)
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const TicModel& m, const std::filesystem::path& p) { save_checkpoint(m, p); }, py::arg("path"))
      .def_property_readonly("preset", [](const TicModel& m) { return m.config().name; })
      .def_property_readonly("config", [](const TicModel& m) { return m.config().to_json(); })
      .def_property_readonly("config_hash", [](const TicModel& m) { return m.config().hash(); })
      .def_property_readonly("parameter_count", &TicModel::parameter_count)
      .def("encode", &encode, py::arg("image"), "HxWx3 uint8 array -> bitstream bytes")
      .def("decode", &decode, py::arg("data"), "bitstream bytes -> HxWx3 uint8 array")
      .def(
          "train",
          [](const TicModel& m, const std::vector<U8Image>& images, double lambda, int steps, int batch_size, int crop,
             double lr, std::uint64_t seed) {
            std::vector<ImageBuffer> bufs;
            for (const auto& a : images) bufs.push_back(to_buffer(a));
            train::TrainConfig cfg;
            cfg.lambda = lambda;
            cfg.steps = steps;
            cfg.batch_size = batch_size;
            cfg.crop = crop;
            cfg.lr = lr;
            cfg.seed = seed;
            std::vector<train::StepMetrics> log;
            {
              py::gil_scoped_release nogil;
              train::Dataset data(std::move(bufs));
              log = train::fit(m, data, cfg);
            }
            py::list out;
            for (const auto& s : log) out.append(metrics_dict(s));
            return out;
          },
          py::arg("images"), py::arg("lmbda") = 0.013, py::arg("steps") = 100, py::arg("batch_size") = 8,
          py::arg("crop") = 256, py::arg("lr") = 1e-4, py::arg("seed") = 0)
      .def(
          "evaluate",
          [](const TicModel& m, const std::vector<U8Image>& images, double lambda, std::uint64_t seed) {
            std::vector<ImageBuffer> bufs;
            for (const auto& a : images) bufs.push_back(to_buffer(a));
            return metrics_dict(train::evaluate(m, bufs, lambda, seed));
          },
          py::arg("images"), py::arg("lmbda") = 0.013, py::arg("seed") = 0)
      .def(
          "saliency",
          [](const TicModel& m, const U8Image& a, int row, int col) {
            const ImageBuffer img = to_buffer(a);
            const auto map = train::saliency_map(m, img.to_tensor(), row, col);
            py::array_t<double> out({img.height, img.width});
            std::copy(map.begin(), map.end(), out.mutable_data());
            return out;
          },
          py::arg("image"), py::arg("row"), py::arg("col"));

  mod.def(
      "synthetic_images",
      [](int count, int size, std::uint64_t seed) {
        py::list out;
        for (const auto& img : train::synthetic_images(count, size, seed)) out.append(to_array(img));
        return out;
      },
      py::arg("count"), py::arg("size") = 64, py::arg("seed") = 0);
  mod.def("psnr", &train::psnr_from_mse, py::arg("mse"), "PSNR in dB for an MSE on [0,1] pixels (capped at 100)");
  mod.def("bpp", &train::bpp, py::arg("nbytes"), py::arg("height"), py::arg("width"));
}
