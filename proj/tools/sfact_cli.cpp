// sfact: command-line front end.
//
// Exit codes: 0 success, 2 bad input or load failure, 3 numeric fault,
// 4 sequence length mismatch.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sfact/chord.hpp"
#include "sfact/compare.hpp"
#include "sfact/data.hpp"
#include "sfact/lowrank.hpp"
#include "sfact/psf_attn.hpp"
#include "sfact/sf_solver.hpp"
#include "sfact/sparse.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sfact;

namespace {

enum ExitCode { kOk = 0, kBadInput = 2, kNumeric = 3, kLength = 4 };

struct Common {
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
};

struct MatrixArgs {
  std::string input;
  std::string kind;
  bool gradient = false;
  std::string synthetic;
  std::size_t n = 64;
  std::optional<std::uint64_t> matrix_seed;
};

struct SfArgs {
  std::string mode = "full_coverage";
  SfConfig cfg;
  std::string schedule = "plateau";
};

void add_matrix_options(CLI::App* cmd, MatrixArgs& m) {
  cmd->add_option("--input", m.input, "Matrix file (.mtx, .csv, .pgm)");
  cmd->add_option("--kind", m.kind, "matrix_market | dense_csv | pgm_image | covariance_of_csv");
  cmd->add_flag("--gradient", m.gradient, "Replace the image by its gradient magnitude");
  cmd->add_option("--synthetic", m.synthetic, "identity | rank1 | low_rank | sparse | planted | dense");
  cmd->add_option("--n", m.n, "Side of a synthetic matrix");
  cmd->add_option("--matrix-seed", m.matrix_seed, "Seed of the synthetic matrix (default: --seed + 1)");
}

void add_sf_options(CLI::App* cmd, SfArgs& s) {
  cmd->add_option("--mode", s.mode, "paper_literal | full_coverage");
  cmd->add_option("--m", s.cfg.m_factors, "Number of factors (0: ceil(log2 N))");
  cmd->add_option("--max-iters", s.cfg.max_iters);
  cmd->add_option("--lr", s.cfg.learning_rate);
  cmd->add_option("--stop-rel", s.cfg.stop_rel_improvement, "Relative improvement that counts as progress");
  cmd->add_option("--stop-window", s.cfg.stop_window);
  cmd->add_option("--schedule", s.schedule, "plateau | cosine");
  cmd->add_option("--max-decays", s.cfg.max_decays);
}

SfConfig resolve_sf(const SfArgs& s, std::uint64_t seed) {
  SfConfig cfg = s.cfg;
  cfg.schedule = lr_schedule_from_string(s.schedule);
  cfg.seed = seed;
  return cfg;
}

// Synthetic matrices get their own seed so a planted chain never coincides
// with the solver's starting point.
DenseMatrix load_input(const MatrixArgs& m, std::uint64_t seed) {
  if (!m.synthetic.empty() && !m.input.empty()) throw InvalidInput("give either --input or --synthetic");
  if (!m.synthetic.empty()) {
    return synthetic_matrix(synthetic_from_string(m.synthetic), m.n, m.matrix_seed.value_or(seed + 1));
  }
  if (m.input.empty()) throw InvalidInput("no matrix given (use --input or --synthetic)");
  MatrixSource src;
  src.path = m.input;
  src.kind = m.kind.empty() ? matrix_kind_from_path(src.path) : matrix_kind_from_string(m.kind);
  src.post = m.gradient ? MatrixTransform::gradient_magnitude : MatrixTransform::none;
  return load_matrix(src);
}

json matrix_echo(const MatrixArgs& m, std::uint64_t seed) {
  json j;
  if (!m.synthetic.empty()) {
    j["synthetic"] = m.synthetic;
    j["n"] = m.n;
    j["matrix_seed"] = m.matrix_seed.value_or(seed + 1);
  } else {
    j["input"] = m.input;
    j["kind"] = m.kind;
    j["gradient"] = m.gradient;
  }
  return j;
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    io::write_json(out, j);
  }
}

int resolve_threads(int flag) {
  if (const char* env = std::getenv("SF_THREADS")) {
    try {
      return std::stoi(env);
    } catch (const std::exception&) {
      throw InvalidInput(std::string("SF_THREADS is not an integer: ") + env);
    }
  }
  return flag;
}

Dataset load_dataset(const std::string& path, TaskKind task) {
  if (path.empty()) throw InvalidInput("no dataset given");
  return read_dataset_csv(fs::path(path), task);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse factorization of square matrices and PSF-Attn training"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads (SF_THREADS overrides)");
  app.add_option("--out", common.out, "Write the result here instead of stdout");

  // pattern
  auto* pattern_cmd = app.add_subcommand("pattern", "Emit a Chord sparsity pattern");
  std::size_t pattern_n = 16;
  std::string pattern_mode = "full_coverage";
  std::size_t pattern_hops = 0;
  std::size_t pattern_m = 0;
  pattern_cmd->add_option("--n", pattern_n)->required();
  pattern_cmd->add_option("--mode", pattern_mode);
  pattern_cmd->add_option("--hops", pattern_hops, "Report structural density after this many hops");
  pattern_cmd->add_option("--m", pattern_m, "Report non-zeros for this many factors");
  bool pattern_stats = false;
  pattern_cmd->add_flag("--stats", pattern_stats, "Emit statistics instead of the pattern");

  // compare / sf / tsvd
  MatrixArgs cmp_matrix;
  SfArgs cmp_sf;
  std::string cmp_save_sf, cmp_save_tsvd;
  auto* compare_cmd = app.add_subcommand("compare", "Sparse factorization vs truncated SVD at equal non-zeros");
  add_matrix_options(compare_cmd, cmp_matrix);
  add_sf_options(compare_cmd, cmp_sf);
  compare_cmd->add_option("--save-sf", cmp_save_sf, "Directory for the fitted chain");
  compare_cmd->add_option("--save-tsvd", cmp_save_tsvd, "Directory for the TSVD factors");

  MatrixArgs sf_matrix;
  SfArgs sf_args;
  std::string sf_save;
  bool sf_history = false;
  auto* sf_cmd = app.add_subcommand("sf", "Fit a sparse factor chain");
  add_matrix_options(sf_cmd, sf_matrix);
  add_sf_options(sf_cmd, sf_args);
  sf_cmd->add_option("--save", sf_save, "Directory for the fitted chain");
  sf_cmd->add_flag("--history", sf_history, "Include the per-iteration loss history");

  MatrixArgs tsvd_matrix;
  std::size_t tsvd_rank = 0, tsvd_budget = 0;
  std::string tsvd_save;
  auto* tsvd_cmd = app.add_subcommand("tsvd", "Truncated SVD baseline");
  add_matrix_options(tsvd_cmd, tsvd_matrix);
  tsvd_cmd->add_option("--rank", tsvd_rank);
  tsvd_cmd->add_option("--budget", tsvd_budget, "Pick the rank from a non-zero budget");
  tsvd_cmd->add_option("--save", tsvd_save, "Directory for U, sigma, V");

  // synth
  std::string synth_task = "adding";
  std::size_t synth_n = 128, synth_count = 1000;
  auto* synth_cmd = app.add_subcommand("synth", "Generate an adding or temporal order dataset");
  synth_cmd->add_option("--task", synth_task, "adding | temporal_order");
  synth_cmd->add_option("--n", synth_n);
  synth_cmd->add_option("--count", synth_count);

  // train
  PsfAttnConfig model_cfg;
  TrainConfig train_cfg;
  std::string train_task = "temporal_order", train_mode = "full_coverage", train_activation = "tanh";
  std::string train_data, eval_data, checkpoint;
  std::size_t train_count = 20000, eval_count = 2000;
  bool no_positional = false;
  auto* train_cmd = app.add_subcommand("train", "Train a PSF-Attn model");
  train_cmd->add_option("--task", train_task);
  train_cmd->add_option("--n", model_cfg.n);
  train_cmd->add_option("--mode", train_mode);
  train_cmd->add_option("--m", model_cfg.m_factors);
  train_cmd->add_option("--d", model_cfg.d);
  train_cmd->add_option("--d-v", model_cfg.d_v);
  train_cmd->add_option("--hidden", model_cfg.hidden);
  train_cmd->add_option("--activation", train_activation, "tanh | relu");
  train_cmd->add_flag("--residual", model_cfg.residual);
  train_cmd->add_flag("--no-positional", no_positional);
  train_cmd->add_option("--epochs", train_cfg.epochs);
  train_cmd->add_option("--batch", train_cfg.batch_size);
  train_cmd->add_option("--lr", train_cfg.lr);
  train_cmd->add_option("--lr-decay", train_cfg.lr_decay, "Per-epoch lr multiplier");
  train_cmd->add_option("--stop-at", train_cfg.stop_at_accuracy, "Stop once eval accuracy reaches this");
  train_cmd->add_option("--train-data", train_data, "Training CSV (default: generated)");
  train_cmd->add_option("--eval-data", eval_data, "Evaluation CSV (default: generated)");
  train_cmd->add_option("--train-count", train_count);
  train_cmd->add_option("--eval-count", eval_count);
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  // eval
  std::string eval_ckpt, eval_path;
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--data", eval_path)->required();

  // attn-row
  std::string row_ckpt, row_data;
  std::size_t row_index = 0, row_i = 0;
  auto* row_cmd = app.add_subcommand("attn-row", "Row i of the attention surrogate for one sequence");
  row_cmd->add_option("--checkpoint", row_ckpt)->required();
  row_cmd->add_option("--data", row_data)->required();
  row_cmd->add_option("--index", row_index, "Sequence index in the dataset");
  row_cmd->add_option("--row", row_i, "Row of the product")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadInput;
  }

  try {
    common.threads = resolve_threads(common.threads);
    if (common.threads < 1) throw InvalidInput("--threads must be >= 1");

    if (*pattern_cmd) {
      const auto p = build_pattern(pattern_n, pattern_mode_from_string(pattern_mode));
      if (!pattern_stats) {
        emit(pattern_to_json(p), common.out);
        return kOk;
      }
      const std::size_t m = pattern_m == 0 ? p.k_exp() : pattern_m;
      const std::size_t hops = pattern_hops == 0 ? m : pattern_hops;
      const auto acct = nnz_accounting(p, m);
      emit({{"n", p.n()},
            {"k_exp", p.k_exp()},
            {"mode", to_string(p.mode())},
            {"degree", p.degree()},
            {"m_factors", m},
            {"nnz_per_factor", acct.per_factor},
            {"nnz_total", acct.total},
            {"hops", hops},
            {"structural_density", structural_density(p, hops)}},
           common.out);
      return kOk;
    }

    if (*compare_cmd) {
      const auto x = load_input(cmp_matrix, common.seed);
      auto c = compare(x, pattern_mode_from_string(cmp_sf.mode), resolve_sf(cmp_sf, common.seed));
      c.report.config["input"] = matrix_echo(cmp_matrix, common.seed);
      c.report.config["threads"] = common.threads;
      if (!cmp_save_sf.empty()) save_chain(c.chain, cmp_save_sf);
      if (!cmp_save_tsvd.empty()) save_tsvd(c.tsvd, cmp_save_tsvd);
      emit(to_json(c.report), common.out);
      return kOk;
    }

    if (*sf_cmd) {
      const auto x = load_input(sf_matrix, common.seed);
      const auto cfg = resolve_sf(sf_args, common.seed);
      const auto pattern = make_pattern(x.rows(), pattern_mode_from_string(sf_args.mode));
      try {
        auto [chain, report] = fit(x, pattern, cfg);
        if (!sf_save.empty()) save_chain(chain, sf_save);
        auto j = to_json(report);
        if (!sf_history) j.erase("loss_history");
        j["command"] = "sf";
        j["config"] = to_json(cfg);
        j["config"]["mode"] = sf_args.mode;
        j["config"]["input"] = matrix_echo(sf_matrix, common.seed);
        j["m_factors"] = chain.size();
        j["relative_fro_err"] = fro_norm(x) > 0.0 ? report.final_fro_err / fro_norm(x) : report.final_fro_err;
        emit(j, common.out);
      } catch (const SfNumericFault& e) {
        if (!sf_save.empty() && e.last_valid()) save_chain(*e.last_valid(), sf_save);
        throw;
      }
      return kOk;
    }

    if (*tsvd_cmd) {
      const auto x = load_input(tsvd_matrix, common.seed);
      std::size_t r = tsvd_rank;
      if (r == 0 && tsvd_budget > 0) r = rank_for_budget(x.rows(), tsvd_budget);
      if (r == 0) throw InvalidInput("give --rank or --budget");
      const auto t = tsvd(x, r);
      if (!tsvd_save.empty()) save_tsvd(t, tsvd_save);
      emit({{"command", "tsvd"},
            {"n", x.rows()},
            {"rank_r", r},
            {"nnz_tsvd", tsvd_nnz(x.rows(), r)},
            {"singular_values", t.singular_values},
            {"fro_err_tsvd", fro_err(reconstruct(t), x)},
            {"config", {{"input", matrix_echo(tsvd_matrix, common.seed)}}}},
           common.out);
      return kOk;
    }

    if (*synth_cmd) {
      if (common.out.empty()) throw InvalidInput("synth needs --out <file.csv>");
      const auto task = task_from_string(synth_task);
      const auto ds = make_dataset(task, synth_n, synth_count, common.seed);
      write_dataset_csv(ds, fs::path(common.out));
      const json manifest = {{"task", to_string(task)},
                             {"n", synth_n},
                             {"count", synth_count},
                             {"seed", common.seed},
                             {"file", fs::path(common.out).filename().string()},
                             {"format", task == TaskKind::adding ? "a_1,b_1,...,a_N,b_N,y" : "t_1,...,t_N,label"}};
      io::write_json(common.out + ".json", manifest);
      std::cout << manifest.dump(2) << '\n';
      return kOk;
    }

    if (*train_cmd) {
      model_cfg.task = task_from_string(train_task);
      model_cfg.mode = pattern_mode_from_string(train_mode);
      model_cfg.activation = activation_from_string(train_activation);
      model_cfg.positional = !no_positional;
      model_cfg.seed = common.seed;
      train_cfg.seed = common.seed + 1;
      const Dataset train_set = train_data.empty()
                                    ? make_dataset(model_cfg.task, model_cfg.n, train_count, common.seed + 2)
                                    : load_dataset(train_data, model_cfg.task);
      const Dataset eval_set = eval_data.empty()
                                   ? make_dataset(model_cfg.task, model_cfg.n, eval_count, common.seed + 3)
                                   : load_dataset(eval_data, model_cfg.task);
      train_cfg.on_epoch = [](const EpochMetrics& m) { std::cerr << to_json(m).dump() << '\n'; };
      auto model = make_model(model_cfg);
      TrainResult result;
      try {
        result = train(std::move(model), train_set, eval_set, train_cfg);
      } catch (const PsfNumericFault& e) {
        save_model(e.last_good(), checkpoint);
        throw;
      }
      save_model(result.model, checkpoint);
      json epochs = json::array();
      for (const auto& m : result.metrics) epochs.push_back(to_json(m));
      emit({{"command", "train"},
            {"model", to_json(result.model.config)},
            {"train",
             {{"epochs", train_cfg.epochs},
              {"batch_size", train_cfg.batch_size},
              {"lr", train_cfg.lr},
              {"lr_decay", train_cfg.lr_decay},
              {"seed", train_cfg.seed},
              {"stop_at_accuracy", train_cfg.stop_at_accuracy},
              {"train_count", train_set.size()},
              {"eval_count", eval_set.size()},
              {"threads", common.threads}}},
            {"seed", common.seed},
            {"metrics", epochs},
            {"eval_accuracy", result.metrics.empty() ? 0.0 : result.metrics.back().eval_accuracy},
            {"checkpoint", checkpoint}},
           common.out);
      return kOk;
    }

    if (*eval_cmd) {
      const auto model = load_model(eval_ckpt);
      const auto ds = load_dataset(eval_path, model.config.task);
      const double acc = evaluate(model, ds);
      emit({{"command", "eval"}, {"accuracy", acc}, {"count", ds.size()}, {"task", to_string(ds.task)}}, common.out);
      return kOk;
    }

    if (*row_cmd) {
      const auto model = load_model(row_ckpt);
      const auto ds = load_dataset(row_data, model.config.task);
      const auto e = encode(model, ds, row_index);
      const auto row = attention_row(model, e, row_i);
      std::ostringstream csv;
      csv << row_i;
      for (double v : row) csv << ',' << detail::format_double(v);
      csv << '\n';
      if (common.out.empty()) {
        std::cout << csv.str();
      } else {
        std::ofstream out(common.out);
        if (!out) throw Error("cannot write " + common.out);
        out << csv.str();
      }
      return kOk;
    }
  } catch (const LengthMismatch& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kLength;
  } catch (const NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  }
  return kBadInput;
}
