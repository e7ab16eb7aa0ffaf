// Python extension. Configs cross the boundary as JSON text; the package
// wrapper in wstab/__init__.py turns them into dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "wstab/checkpoint.hpp"
#include "wstab/dataset.hpp"
#include "wstab/error.hpp"
#include "wstab/inference.hpp"
#include "wstab/presets.hpp"
#include "wstab/synth.hpp"
#include "wstab/teds.hpp"
#include "wstab/tokenizer.hpp"
#include "wstab/training.hpp"

namespace py = pybind11;
using namespace wstab;
using nlohmann::json;

namespace {

json parse_or_empty(const std::string& text) { return text.empty() ? json::object() : json::parse(text); }

template <class Config>
Config merged(Config base, const std::string& overrides) {
  json j = base;
  j.merge_patch(parse_or_empty(overrides));
  return j.get<Config>();
}

py::dict teds_dict(const TedsScore& s) {
  py::dict d;
  d["value"] = s.value;
  d["edit_distance"] = s.edit_distance;
  d["size_a"] = s.size_a;
  d["size_b"] = s.size_b;
  return d;
}

py::dict recognize_dict(const RecognizeResult& r) {
  py::dict d;
  d["html"] = r.html;
  const auto& vocab = StructVocab::standard().vocab();
  std::vector<std::string> tokens;
  for (int id : r.struct_tokens) tokens.push_back(vocab.token(id));
  d["struct_tokens"] = tokens;
  d["cell_texts"] = r.cell_texts;
  d["degenerate"] = r.degenerate;
  return d;
}

}  // namespace

PYBIND11_MODULE(_wstab, m) {
  static py::handle error_type = py::exception<wstab::Error>(m, "Error").release();
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const wstab::Error& e) {
      py::object exc = py::reinterpret_borrow<py::object>(error_type)(e.what());
      exc.attr("code") = std::string(errc_name(e.code()));
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("canonical_html", [](const std::string& html, bool repair) {
    return to_html(parse_html(html, repair ? ParseMode::Repair : ParseMode::Strict));
  }, py::arg("html"), py::arg("repair") = false);

  m.def("classify", [](const std::string& html) {
    return classify(parse_html(html)) == Complexity::Complex ? "complex" : "simple";
  });

  m.def("tokenize_structure", [](const std::string& html) {
    const auto& vocab = StructVocab::standard().vocab();
    std::vector<std::string> out;
    for (int id : tokenize_structure(parse_html(html))) out.push_back(vocab.token(id));
    return out;
  });

  m.def("tokenize_cell", [](const std::string& text, const std::string& alphabet) {
    CellVocab vocab(alphabet);
    auto r = tokenize_cell(text, vocab);
    return py::make_tuple(r.ids, r.unknown);
  });

  m.def("teds", [](const std::string& a, const std::string& b, bool structure_only) {
    return teds_dict(teds(parse_html(a), parse_html(b), structure_only ? TedsMode::Struct : TedsMode::Full));
  }, py::arg("a"), py::arg("b"), py::arg("structure_only") = false);

  m.def("score_json", [](const std::filesystem::path& pred, const std::filesystem::path& gt, const std::string& split,
                         unsigned threads) {
    ScoreOptions o;
    o.split = split;
    o.threads = threads;
    py::gil_scoped_release release;
    return score_batch(pred, gt, o).to_json(-1);
  }, py::arg("pred"), py::arg("gt"), py::arg("split") = "", py::arg("threads") = 1);

  m.def("preset_json", [](const std::string& name) {
    auto p = preset(name);
    return json{{"net", p.net}, {"train", p.train}, {"gen", p.gen}}.dump();
  });

  m.def("generate", [](const std::filesystem::path& out, std::size_t n, const std::string& preset_name,
                       const std::string& gen_overrides, unsigned threads) {
    auto g = merged(preset(preset_name).gen, gen_overrides);
    py::gil_scoped_release release;
    generate(g, n, out, threads);
  }, py::arg("out"), py::arg("n"), py::arg("preset") = "desk", py::arg("gen") = "", py::arg("threads") = 1);

  m.def("train_json", [](const std::filesystem::path& data, const std::filesystem::path& out,
                         const std::string& preset_name, const std::string& net_overrides,
                         const std::string& train_overrides, unsigned threads) {
    auto p = preset(preset_name);
    TrainOptions o;
    o.data = data;
    o.out = out;
    o.net = merged(p.net, net_overrides);
    o.train = merged(p.train, train_overrides);
    o.threads = threads;
    TrainResult r;
    {
      py::gil_scoped_release release;
      r = train(o);
    }
    json history = json::array();
    for (const auto& e : r.history) history.push_back(e.to_json());
    return json{{"checkpoint", r.last_checkpoint.string()}, {"history", history}, {"stopped_early", r.stopped_early}}
        .dump();
  }, py::arg("data"), py::arg("out"), py::arg("preset") = "desk", py::arg("net") = "", py::arg("train") = "",
     py::arg("threads") = 1);

  m.def("infer", [](const std::filesystem::path& data, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& out, const std::string& split, unsigned threads) {
    InferOptions o;
    if (!split.empty()) o.split = split;
    o.threads = threads;
    py::gil_scoped_release release;
    return infer_batch(data, checkpoint, out, o);
  }, py::arg("data"), py::arg("checkpoint"), py::arg("out"), py::arg("split") = "", py::arg("threads") = 1);

  m.def("recognize_pgm", [](const std::filesystem::path& checkpoint, const std::filesystem::path& image) {
    auto ck = load_checkpoint(checkpoint);
    return recognize_dict(recognize(ck.params, ck.net, image_tensor(read_pgm(image))));
  });

  m.def("gradcheck", [](const std::string& preset_name, double lambda, std::uint64_t seed) {
    ad::GradCheckReport r;
    {
      py::gil_scoped_release release;
      r = model_grad_check(preset(preset_name).net, lambda, seed);
    }
    py::dict d;
    d["n_values"] = r.n_values;
    d["max_rel_err"] = r.max_rel_err;
    d["pass"] = r.pass;
    return d;
  }, py::arg("preset") = "tiny", py::arg("lambda_") = 0.5, py::arg("seed") = 0);
}
