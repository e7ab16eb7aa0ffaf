#include "wstab/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "wstab/checkpoint.hpp"
#include "wstab/error.hpp"
#include "wstab/inference.hpp"
#include "wstab/presets.hpp"
#include "wstab/teds.hpp"
#include "wstab/tokenizer.hpp"

namespace wstab {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::FileNotFound, path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DecodeError, path.string() + ": " + e.what());
  }
}

std::string read_text_file(const std::string& path) {
  if (path == "-") {
    std::ostringstream ss;
    ss << std::cin.rdbuf();
    return ss.str();
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::FileNotFound, path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}

struct Common {
  std::string preset = "desk";
  std::string config;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_preset) {
  if (with_preset) {
    cmd->add_option("--preset", c.preset, "Base configuration: tiny, desk or paper")
        ->check(CLI::IsMember({"tiny", "desk", "paper"}));
    cmd->add_option("--config", c.config, "JSON file overriding preset values")->check(CLI::ExistingFile);
  }
  cmd->add_option("--seed", c.seed, "Seed for all randomness");
  cmd->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
}

int cmd_synth(const Common& c, std::size_t n, const std::string& out_dir, std::ostream& out) {
  Preset p = preset(c.preset);
  GenConfig gen = p.gen;
  if (!c.config.empty()) {
    auto j = read_json_file(c.config);
    from_json(j.contains("gen") ? j["gen"] : j, gen);
  }
  if (c.seed) gen.seed = *c.seed;
  generate(gen, n, out_dir, c.threads);
  out << "wrote " << n << " samples to " << out_dir << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data, const std::string& out_dir, std::ostream& out) {
  Preset p = preset(c.preset);
  TrainOptions opts;
  opts.net = p.net;
  opts.train = p.train;
  if (!c.config.empty()) {
    auto j = read_json_file(c.config);
    if (j.contains("net") || j.contains("train")) {
      if (j.contains("net")) from_json(j["net"], opts.net);
      if (j.contains("train")) from_json(j["train"], opts.train);
    } else {
      from_json(j, opts.train);
    }
  }
  if (c.seed) opts.train.seed = *c.seed;
  opts.data = data;
  opts.out = out_dir;
  opts.threads = c.threads;
  opts.on_epoch = [&](const EpochMetrics& m) {
    out << "epoch " << m.epoch << " step " << m.step << " loss " << fmt(m.loss) << " l_struc " << fmt(m.l_struc)
        << " l_cell " << fmt(m.l_cell) << " lr " << m.lr << " struct_acc " << fmt(m.struct_acc) << " cell_acc "
        << fmt(m.cell_acc);
    if (m.val_teds_struct) out << " val_teds_struct " << fmt(*m.val_teds_struct);
    out << " (" << std::fixed << std::setprecision(1) << m.seconds << "s)" << std::defaultfloat << std::endl;
  };
  auto result = train(opts);
  out << "checkpoint " << result.last_checkpoint.string() << (result.stopped_early ? " (stopped early)" : "") << "\n";
  return 0;
}

int cmd_score(const std::string& pred, const std::string& gt, const std::string& report, const std::string& split,
              unsigned threads, std::ostream& out) {
  ScoreOptions opts;
  opts.split = split;
  opts.threads = threads;
  auto r = score_batch(pred, gt, opts);
  if (!report.empty()) {
    std::ofstream f(report);
    if (!f) throw Error(Errc::Io, "cannot write " + report);
    f << r.to_json(2) << "\n";
  }
  out << "n " << r.n << " (simple " << r.n_simple << ", complex " << r.n_complex << ")\n";
  out << "TEDS         simple " << fmt(r.teds.simple) << "  complex " << fmt(r.teds.complex) << "  all "
      << fmt(r.teds.all) << "\n";
  out << "TEDS-struct  simple " << fmt(r.teds_struct.simple) << "  complex " << fmt(r.teds_struct.complex)
      << "  all " << fmt(r.teds_struct.all) << "\n";
  return 0;
}

int cmd_tokenize(const std::string& html_path, const std::string& alphabet, std::ostream& out) {
  TableTree tree = parse_html(read_text_file(html_path));
  const auto& vocab = StructVocab::standard();
  StructTokenizeOptions opts;
  opts.strict = false;
  auto seq = tokenize_structure(tree, vocab, opts);
  out << "structure (" << seq.size() << "): " << render_tokens(seq, vocab.vocab()) << "\n";
  CellVocab cells(alphabet);
  auto list = tree.cells();
  for (std::size_t i = 0; i < list.size(); ++i) {
    auto cell = tokenize_cell(list[i]->content, cells);
    out << "cell " << i << " (" << cell.ids.size() << "): " << render_tokens(cell.ids, cells.vocab());
    if (cell.unknown) out << "  [" << cell.unknown << " unknown]";
    out << "\n";
  }
  out << "class: " << (classify(tree) == Complexity::Simple ? "simple" : "complex") << "\n";
  return 0;
}

int cmd_gradcheck(const Common& c, double lambda, std::ostream& out) {
  Preset p = preset(c.preset);
  NetConfig net = p.net;
  if (!c.config.empty()) {
    auto j = read_json_file(c.config);
    from_json(j.contains("net") ? j["net"] : j, net);
  }
  net.dropout = 0.0;
  auto r = model_grad_check(net, lambda, c.seed.value_or(0));
  out << "checked " << r.n_values << " parameters, max_abs_err " << r.max_abs_err << ", grad_inf_norm "
      << r.grad_inf_norm << "\n";
  out << "max_rel_err " << r.max_rel_err << " < " << r.tol << ": " << (r.pass ? "PASS" : "FAIL") << "\n";
  return r.pass ? 0 : 2;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weakly supervised table recognition: synthesize, train, infer, score"};
  app.name("wstab");
  app.require_subcommand(1);

  Common synth_c, train_c, grad_c;
  std::size_t synth_n = 100;
  std::string synth_out, train_data, train_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth, synth_c, true);
  synth->add_option("--n", synth_n, "Number of samples");
  synth->add_option("--out", synth_out, "Output dataset directory")->required();

  auto* trainc = app.add_subcommand("train", "Train a model on a dataset's train split");
  add_common(trainc, train_c, true);
  trainc->add_option("--data", train_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  trainc->add_option("--out", train_out, "Directory for checkpoints and metrics.jsonl")->required();

  std::string infer_data, infer_ckpt, infer_out, infer_split;
  unsigned infer_threads = 1;
  auto* infer = app.add_subcommand("infer", "Recognize every image of a dataset");
  infer->add_option("--data", infer_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  infer->add_option("--out", infer_out, "Prediction JSONL")->required();
  infer->add_option("--split", infer_split, "Only records of this split");
  infer->add_option("--threads", infer_threads, "Worker threads")->check(CLI::PositiveNumber);

  std::string score_pred, score_gt, score_report, score_split;
  unsigned score_threads = 1;
  auto* score = app.add_subcommand("score", "TEDS / TEDS-struct of predictions against ground truth");
  score->add_option("--pred", score_pred, "Prediction JSONL")->required();
  score->add_option("--gt", score_gt, "Ground-truth JSONL (e.g. annotations.jsonl)")->required();
  score->add_option("--report", score_report, "Write the JSON report here");
  score->add_option("--split", score_split, "Only ground-truth records of this split");
  score->add_option("--threads", score_threads, "Worker threads")->check(CLI::PositiveNumber);

  std::string tok_html, tok_alphabet = NetConfig{}.alphabet;
  auto* tok = app.add_subcommand("tokenize", "Print structure and cell tokens of an HTML table");
  tok->add_option("--html", tok_html, "HTML file, or - for stdin")->required();
  tok->add_option("--alphabet", tok_alphabet, "Cell alphabet");

  double grad_lambda = 0.5;
  grad_c.preset = "tiny";
  auto* grad = app.add_subcommand("gradcheck", "Compare backprop gradients with finite differences");
  add_common(grad, grad_c, true);
  grad->add_option("--lambda", grad_lambda, "Loss weight of the structure term")->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "usage: wstab {synth|train|infer|score|tokenize|gradcheck} [options]; see --help\n";
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_c, synth_n, synth_out, out);
    if (trainc->parsed()) return cmd_train(train_c, train_data, train_out, out);
    if (infer->parsed()) {
      InferOptions opts;
      if (!infer_split.empty()) opts.split = infer_split;
      opts.threads = infer_threads;
      auto n = infer_batch(infer_data, infer_ckpt, infer_out, opts);
      out << "wrote " << n << " predictions to " << infer_out << "\n";
      return 0;
    }
    if (score->parsed()) return cmd_score(score_pred, score_gt, score_report, score_split, score_threads, out);
    if (tok->parsed()) return cmd_tokenize(tok_html, tok_alphabet, out);
    if (grad->parsed()) return cmd_gradcheck(grad_c, grad_lambda, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: bad configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace wstab
