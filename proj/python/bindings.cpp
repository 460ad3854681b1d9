#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <vector>

#include "mgrq/checkpoint.hpp"
#include "mgrq/dataset.hpp"
#include "mgrq/errors.hpp"
#include "mgrq/harness.hpp"
#include "mgrq/quantize.hpp"
#include "mgrq/reconstruct.hpp"
#include "mgrq/tensor.hpp"
#include "mgrq/vit.hpp"

namespace py = pybind11;
using namespace mgrq;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[size_t(i)] = a.shape(i);
  std::vector<double> vals(a.data(), a.data() + a.size());
  return Tensor::from(shape, vals);
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> out(shape);
  std::memcpy(out.mutable_data(), t.values().data(),
              size_t(t.numel()) * sizeof(double));
  return out;
}

py::array_t<uint8_t> codes_array(const QuantizedTensor& q) {
  std::vector<py::ssize_t> shape(q.shape.begin(), q.shape.end());
  py::array_t<uint8_t> out(shape);
  std::memcpy(out.mutable_data(), q.codes.data(), q.codes.size());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mixed granularity quantization for a small vision transformer";

  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericalError>(m, "NumericalError",
                                         PyExc_RuntimeError);

  py::enum_<Split>(m, "Split")
      .value("TRAIN", Split::kTrain)
      .value("TEST", Split::kTest)
      .value("CALIBRATION", Split::kCalibration);

  py::class_<QuantParams>(m, "QuantParams")
      .def(py::init<>())
      .def_readwrite("bits", &QuantParams::bits)
      .def_readwrite("axis", &QuantParams::axis)
      .def_readwrite("scale", &QuantParams::scale)
      .def_readwrite("zero_point", &QuantParams::zero_point)
      .def("qmax", &QuantParams::qmax);

  py::class_<QuantizedTensor>(m, "QuantizedTensor")
      .def_property_readonly("codes", &codes_array)
      .def_readonly("params", &QuantizedTensor::params);

  m.def("calibrate",
        [](const py::array_t<double>& x, int bits) {
          return calibrate(to_tensor(x), bits);
        },
        py::arg("x"), py::arg("bits"));
  m.def("calibrate_per_channel",
        [](const py::array_t<double>& x, int bits, int axis) {
          return calibrate_per_channel(to_tensor(x), bits, axis);
        },
        py::arg("x"), py::arg("bits"), py::arg("axis"));
  m.def("quantize",
        [](const py::array_t<double>& x, const QuantParams& qp) {
          return quantize(to_tensor(x), qp);
        },
        py::arg("x"), py::arg("params"));
  m.def("dequantize",
        [](const QuantizedTensor& q) { return to_array(dequantize(q)); },
        py::arg("q"));
  m.def("fake_quant",
        [](const py::array_t<double>& x, const QuantParams& qp) {
          return to_array(fake_quant(to_tensor(x), qp));
        },
        py::arg("x"), py::arg("params"));

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("split", &Dataset::split)
      .def_readonly("channels", &Dataset::channels)
      .def_readonly("height", &Dataset::height)
      .def_readonly("width", &Dataset::width)
      .def_readonly("classes", &Dataset::classes)
      .def("__len__", &Dataset::size)
      .def_property_readonly("images",
                             [](const Dataset& d) {
                               py::array_t<uint8_t> out(
                                   {py::ssize_t(d.size()),
                                    py::ssize_t(d.channels),
                                    py::ssize_t(d.height),
                                    py::ssize_t(d.width)});
                               std::memcpy(out.mutable_data(),
                                           d.images.data(), d.images.size());
                               return out;
                             })
      .def_property_readonly("labels", [](const Dataset& d) {
        py::array_t<uint8_t> out(py::ssize_t(d.size()));
        std::memcpy(out.mutable_data(), d.labels.data(), d.labels.size());
        return out;
      });

  m.def("toy_dataset", &toy_dataset, py::arg("split"),
        py::arg("seed") = kToyDataSeed,
        py::call_guard<py::gil_scoped_release>());
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("sample_calibration", &sample_calibration, py::arg("dataset"),
        py::arg("count"), py::arg("seed"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("image_size", &ModelConfig::image_size)
      .def_readwrite("patch_size", &ModelConfig::patch_size)
      .def_readwrite("channels", &ModelConfig::channels)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("blocks", &ModelConfig::blocks)
      .def_readwrite("mlp_hidden", &ModelConfig::mlp_hidden)
      .def_readwrite("classes", &ModelConfig::classes)
      .def_readwrite("use_pos_embed", &ModelConfig::use_pos_embed)
      .def_readwrite("ln_eps", &ModelConfig::ln_eps)
      .def_readwrite("bits_w", &ModelConfig::bits_w)
      .def_readwrite("bits_a", &ModelConfig::bits_a)
      .def_readwrite("embed_bits_w", &ModelConfig::embed_bits_w)
      .def_readwrite("embed_bits_a", &ModelConfig::embed_bits_a)
      .def_readwrite("head_bits_w", &ModelConfig::head_bits_w)
      .def_readwrite("head_bits_a", &ModelConfig::head_bits_a)
      .def("tokens", &ModelConfig::tokens);

  py::class_<ViTModel>(m, "ViTModel")
      .def_readonly("config", &ViTModel::config);

  m.def("init_model", &init_model, py::arg("config"), py::arg("seed"));
  m.def("model_forward",
        [](const ViTModel& model, const py::array_t<double>& images) {
          return to_array(model_forward(to_tensor(images), model));
        },
        py::arg("model"), py::arg("images"),
        "Logits for a batch shaped [batch, channels, height, width].");
  m.def("save_checkpoint", &save_checkpoint, py::arg("model"),
        py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("batch", &TrainConfig::batch)
      .def_readwrite("seed", &TrainConfig::seed);

  m.def("train_toy_fp", &train_toy_fp, py::arg("train"), py::arg("config"),
        py::arg("train_config"), py::call_guard<py::gil_scoped_release>());
  m.def("evaluate_top1", &evaluate_top1, py::arg("model"), py::arg("dataset"),
        py::call_guard<py::gil_scoped_release>());

  py::class_<LossBreakdown>(m, "LossBreakdown")
      .def_readonly("obwr", &LossBreakdown::obwr)
      .def_readonly("ebgs", &LossBreakdown::ebgs)
      .def_readonly("ibls", &LossBreakdown::ibls)
      .def_readonly("alpha", &LossBreakdown::alpha)
      .def_readonly("beta", &LossBreakdown::beta)
      .def_readonly("fused", &LossBreakdown::fused);

  py::class_<LossLogRow>(m, "LossLogRow")
      .def_readonly("block", &LossLogRow::block)
      .def_readonly("iteration", &LossLogRow::iteration)
      .def_readonly("losses", &LossLogRow::losses);

  py::class_<ReconstructionConfig>(m, "ReconstructionConfig")
      .def(py::init<>())
      .def_readwrite("iterations", &ReconstructionConfig::iterations)
      .def_readwrite("lr", &ReconstructionConfig::lr)
      .def_readwrite("batch", &ReconstructionConfig::batch)
      .def_readwrite("calib_size", &ReconstructionConfig::calib_size)
      .def_readwrite("seed", &ReconstructionConfig::seed)
      .def_readwrite("use_obwr", &ReconstructionConfig::use_obwr)
      .def_readwrite("use_ebgs", &ReconstructionConfig::use_ebgs)
      .def_readwrite("use_ibls", &ReconstructionConfig::use_ibls)
      .def_readwrite("alpha", &ReconstructionConfig::alpha)
      .def_readwrite("beta", &ReconstructionConfig::beta)
      .def_readwrite("balance_auto", &ReconstructionConfig::balance_auto);

  m.def("fuse_losses", &fuse_losses, py::arg("obwr"), py::arg("ebgs"),
        py::arg("ibls"), py::arg("alpha"), py::arg("beta"));
  m.def("obwr_loss",
        [](const ViTModel& fp, const ViTModel& q, int block,
           const py::array_t<double>& m_prev) {
          return obwr_loss(fp, q, block, to_tensor(m_prev));
        },
        py::arg("fp"), py::arg("q"), py::arg("block"), py::arg("m_prev"));
  m.def("ebgs_loss",
        [](const ViTModel& fp, const ViTModel& q,
           const py::array_t<double>& images) {
          return ebgs_loss(fp, q, to_tensor(images));
        },
        py::arg("fp"), py::arg("q"), py::arg("images"));
  m.def("run_mgrq", &run_mgrq, py::arg("fp"), py::arg("calib"),
        py::arg("config"), py::arg("log") = nullptr);
  m.def("reconstruct_block", &reconstruct_block, py::arg("block"),
        py::arg("fp"), py::arg("q"), py::arg("calib"), py::arg("config"),
        py::arg("log") = nullptr);

  py::class_<AblationConfig>(m, "AblationConfig")
      .def(py::init<>())
      .def_readwrite("bits_w", &AblationConfig::bits_w)
      .def_readwrite("bits_a", &AblationConfig::bits_a)
      .def_readwrite("recon", &AblationConfig::recon);

  py::class_<AblationRow>(m, "AblationRow")
      .def_readonly("arm", &AblationRow::arm)
      .def_readonly("use_obwr", &AblationRow::use_obwr)
      .def_readonly("use_ebgs", &AblationRow::use_ebgs)
      .def_readonly("use_ibls", &AblationRow::use_ibls)
      .def_readonly("bits_w", &AblationRow::bits_w)
      .def_readonly("bits_a", &AblationRow::bits_a)
      .def_readonly("top1", &AblationRow::top1);

  py::class_<AblationReport>(m, "AblationReport")
      .def_readonly("rows", &AblationReport::rows);

  m.def("run_ablation", &run_ablation, py::arg("fp"), py::arg("train"),
        py::arg("test"), py::arg("config"), py::arg("log") = nullptr);
  m.def("ablation_csv", &ablation_csv, py::arg("report"));
}
