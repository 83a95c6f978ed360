#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

#include "dkv/analysis.hpp"
#include "dkv/config_io.hpp"
#include "dkv/sampler.hpp"

namespace py = pybind11;

namespace {

py::array_t<float> to_numpy(const dkv::Matrix& m) {
  py::array_t<float> out({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), out.mutable_data());
  return out;
}

py::dict step_dict(const dkv::StepRecord& r) {
  py::dict d;
  d["step"] = r.step;
  d["block"] = r.block;
  d["masked"] = r.masked_count;
  d["compute_set"] = r.compute_set;
  d["cached"] = r.cached;
  d["decoded"] = r.decoded;
  d["decoded_ids"] = r.decoded_ids;
  d["refresh"] = r.refresh;
  d["query_rows"] = r.query_rows;
  d["macs"] = r.macs;
  d["millis"] = r.millis ? py::cast(*r.millis) : py::none();
  return d;
}

py::dict report_dict(const dkv::RunReport& r) {
  return py::module_::import("json").attr("loads")(dkv::report_json(r));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Masked diffusion LM inference with delayed KV caching";

  py::class_<dkv::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &dkv::ModelConfig::n_layers)
      .def_readwrite("n_heads", &dkv::ModelConfig::n_heads)
      .def_readwrite("d_model", &dkv::ModelConfig::d_model)
      .def_readwrite("d_head", &dkv::ModelConfig::d_head)
      .def_readwrite("d_ff", &dkv::ModelConfig::d_ff)
      .def_readwrite("vocab_size", &dkv::ModelConfig::vocab_size)
      .def_readwrite("mask_token_id", &dkv::ModelConfig::mask_token_id)
      .def_readwrite("max_positions", &dkv::ModelConfig::max_positions)
      .def_readwrite("rope_base", &dkv::ModelConfig::rope_base)
      .def_readwrite("weight_seed", &dkv::ModelConfig::weight_seed)
      .def_readwrite("shifted_output", &dkv::ModelConfig::shifted_output)
      .def("validate", &dkv::ModelConfig::validate);

  py::class_<dkv::ModelWeights>(m, "Model")
      .def(py::init(&dkv::init_weights), py::arg("config") = dkv::ModelConfig{})
      .def_static("load", &dkv::load_weights, py::arg("path"))
      .def("save", [](const dkv::ModelWeights& w, const std::filesystem::path& p) { dkv::save_weights(w, p); })
      .def_property_readonly("config", &dkv::ModelWeights::config)
      .def(
          "forward",
          [](const dkv::ModelWeights& w, const std::vector<dkv::TokenId>& tokens) {
            return to_numpy(dkv::forward_full(tokens, w).logits);
          },
          py::arg("tokens"), "Logits [len(tokens) x vocab] from a full pass");

  m.def(
      "generate",
      [](const dkv::ModelWeights& w, const std::vector<dkv::TokenId>& prompt, int gen_len, int steps,
         int block_size, const std::string& remasking, float temperature, std::uint64_t seed,
         const std::string& cache, const std::string& shift, const std::string& path,
         std::optional<int> snapshot_layer, bool record_timing) {
        dkv::SamplerConfig c;
        c.gen_len = gen_len;
        c.steps = steps;
        c.block_size = block_size;
        c.remasking = dkv::parse_remasking(remasking);
        c.temperature = temperature;
        c.sample_seed = seed;
        c.cache = dkv::parse_cache_variant(cache);
        c.shift = dkv::parse_shift_mode(shift);
        c.path = dkv::parse_execution_path(path);
        c.snapshot_layer = snapshot_layer;
        c.record_timing = record_timing;
        dkv::GenerationResult result;
        {
          py::gil_scoped_release release;
          result = dkv::generate(prompt, c, w);
        }
        py::dict out;
        out["tokens"] = result.tokens;
        out["report"] = report_dict(dkv::make_report(result.trace, w.config()));
        py::list steps_out;
        for (const auto& r : result.trace.records) steps_out.append(step_dict(r));
        out["steps"] = steps_out;
        if (snapshot_layer) {
          const dkv::DynamicsResult d = dkv::kv_dynamics(result.trace);
          py::dict dyn;
          dyn["key_euclidean"] = py::array_t<double>({d.key_euclidean.rows(), d.key_euclidean.cols()},
                                                     d.key_euclidean.data());
          dyn["spike_fraction"] = d.spike_fraction();
          out["dynamics"] = dyn;
        }
        return out;
      },
      py::arg("model"), py::arg("prompt"), py::arg("gen_len") = 64, py::arg("steps") = 64,
      py::arg("block_size") = 32, py::arg("remasking") = "low_confidence",
      py::arg("temperature") = 0.0f, py::arg("seed") = 0, py::arg("cache") = "none",
      py::arg("shift") = "un_shift", py::arg("path") = "reorder",
      py::arg("snapshot_layer") = py::none(), py::arg("record_timing") = true);

  m.def(
      "schedule",
      [](int gen_len, int steps, int block_size) {
        return dkv::tokens_per_step_schedule(gen_len, steps, block_size).tokens_per_step;
      },
      py::arg("gen_len"), py::arg("steps"), py::arg("block_size"));
  m.def("alpha_bar", py::overload_cast<int, int>(&dkv::alpha_bar), py::arg("t"), py::arg("total_steps"));
  m.def(
      "corrupt",
      [](const std::vector<dkv::TokenId>& x0, int t, int total_steps, dkv::TokenId mask_id,
         std::uint64_t seed) {
        dkv::Rng rng(seed);
        return dkv::corrupt(x0, t, dkv::NoiseSchedule(total_steps), mask_id, rng);
      },
      py::arg("x0"), py::arg("t"), py::arg("total_steps"), py::arg("mask_token_id"), py::arg("seed") = 0);
  m.def("normalize_variant", [](const std::string& s) { return dkv::to_string(dkv::parse_cache_variant(s)); });

  py::register_exception<dkv::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<dkv::LayoutError>(m, "LayoutError", PyExc_RuntimeError);
}
