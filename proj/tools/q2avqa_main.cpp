// q2avqa: synthetic-VQA experiment runner (data generation, training,
// evaluation, gradient checking, ablation sweeps).

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "q2a/data.hpp"
#include "q2a/gradcheck.hpp"
#include "q2a/model.hpp"
#include "q2a/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  q2a::ModelConfig model;
  q2a::TrainOptions train;
  double val_fraction = 0.2;
};

RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  // Ablation defaults are small; the reference config overrides them.
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      rc.model = q2a::config_from_json(value.dump());
    } else if (key == "train") {
      for (const auto& [tk, tv] : value.items()) {
        if (tk == "lr") rc.train.adam.lr = tv;
        else if (tk == "beta1") rc.train.adam.beta1 = tv;
        else if (tk == "beta2") rc.train.adam.beta2 = tv;
        else if (tk == "eps") rc.train.adam.eps = tv;
        else if (tk == "epochs") rc.train.epochs = tv;
        else if (tk == "batch_size") rc.train.batch_size = tv;
        else if (tk == "shuffle_seed") rc.train.shuffle_seed = tv;
        else if (tk == "grad_clip") rc.train.grad_clip = tv;
        else if (tk == "lr_decay") rc.train.lr_decay = tv;
        else if (tk == "early_stop_acc") rc.train.early_stop_acc = tv;
        else throw std::invalid_argument("config: unknown train key \"" + tk +
                                         "\"");
      }
    } else if (key == "val_fraction") {
      rc.val_fraction = value;
    } else {
      throw std::invalid_argument("config: unknown key \"" + key + "\"");
    }
  }
  return rc;
}

json run_config_to_json(const RunConfig& rc) {
  json j;
  j["model"] = json::parse(q2a::config_to_json(rc.model));
  j["train"] = {{"lr", rc.train.adam.lr},
                {"beta1", rc.train.adam.beta1},
                {"beta2", rc.train.adam.beta2},
                {"eps", rc.train.adam.eps},
                {"epochs", rc.train.epochs},
                {"batch_size", rc.train.batch_size},
                {"shuffle_seed", rc.train.shuffle_seed},
                {"grad_clip", rc.train.grad_clip},
                {"lr_decay", rc.train.lr_decay},
                {"early_stop_acc", rc.train.early_stop_acc}};
  j["val_fraction"] = rc.val_fraction;
  return j;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

// Dataset-derived fields always win over the config file.
void bind_to_dataset(q2a::ModelConfig& cfg, const q2a::Dataset& ds) {
  if (ds.samples.empty()) throw std::runtime_error("dataset is empty");
  cfg.grid_size = ds.samples[0].image.grid_size;
  cfg.num_answer_classes = ds.vocab.size();
  cfg.token_vocab_size = q2a::TokenVocabulary().size();
  cfg.cell_feature_dim = q2a::kCellFeatureDim;
}

std::pair<std::vector<q2a::VqaSample>, std::vector<q2a::VqaSample>>
split_dataset(const q2a::Dataset& ds, double val_fraction) {
  const std::size_t n = ds.samples.size();
  auto n_val = static_cast<std::size_t>(val_fraction * double(n));
  if (n_val == 0 || n_val >= n)
    throw std::runtime_error("val_fraction leaves an empty split");
  return {{ds.samples.begin(), ds.samples.end() - n_val},
          {ds.samples.end() - n_val, ds.samples.end()}};
}

void print_eval(const q2a::EvalReport& r) {
  auto fmt = [](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string("n/a");
  };
  std::cout << "open " << fmt(r.open_acc) << "  closed " << fmt(r.closed_acc)
            << "  overall " << r.overall_acc << "\n";
}

int cmd_gen_data(const std::string& out, std::size_t n, std::size_t grid,
                 std::uint64_t seed) {
  q2a::Dataset ds = q2a::generate_dataset(n, grid, seed);
  q2a::save_dataset(ds, out);
  std::map<std::string, std::size_t> counts;
  for (const auto& s : ds.samples) counts[ds.vocab.answer(s.answer_class)]++;
  std::cout << "wrote " << ds.samples.size() << " samples (seed " << seed
            << ") to " << out << "\nclass counts:\n";
  for (const auto& [ans, cnt] : counts)
    std::cout << "  " << ans << ": " << cnt << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& out_dir) {
  RunConfig rc;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config " + config_path);
    rc = parse_run_config(json::parse(in));
  }
  q2a::Dataset ds = q2a::load_dataset(data_path);
  bind_to_dataset(rc.model, ds);
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "config.json",
             run_config_to_json(rc).dump(2) + "\n");

  auto [train_set, val_set] = split_dataset(ds, rc.val_fraction);
  q2a::Q2AModel model(rc.model);
  q2a::TokenVocabulary tv;
  q2a::TrainState state;
  rc.train.on_epoch = [](const q2a::EpochRecord& rec) {
    std::cout << "epoch " << rec.epoch << ": loss " << rec.mean_loss
              << ", val overall " << rec.val.overall_acc << std::endl;
  };
  const auto t0 = std::chrono::steady_clock::now();
  q2a::TrainResult result =
      q2a::train(model, train_set, val_set, tv, rc.train, state);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  q2a::apply_param_snapshot(model, result.best_params);
  q2a::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), model,
                       state);
  write_file(fs::path(out_dir) / "history.csv",
             q2a::history_csv(result.history));
  const q2a::EvalReport final_eval = q2a::evaluate(model, val_set, tv);
  write_file(fs::path(out_dir) / "eval.csv", q2a::eval_report_csv(final_eval));
  std::cout << "trained " << result.history.size() << " epochs in " << secs
            << " s; best val overall " << result.best_val_overall
            << " at epoch " << result.best_epoch << "\n";
  print_eval(final_eval);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& out_csv) {
  auto [model, state] = q2a::load_checkpoint(ckpt_path);
  q2a::Dataset ds = q2a::load_dataset(data_path);
  if (ds.vocab.size() != model->config().num_answer_classes)
    throw std::runtime_error(
        "vocabulary mismatch: dataset has " +
        std::to_string(ds.vocab.size()) + " answer classes, checkpoint has " +
        std::to_string(model->config().num_answer_classes));
  q2a::TokenVocabulary tv;
  const q2a::EvalReport r = q2a::evaluate(*model, ds.samples, tv);
  print_eval(r);
  if (!out_csv.empty()) write_file(out_csv, q2a::eval_report_csv(r));
  return 0;
}

int cmd_gradcheck(double h, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = q2a::run_gradcheck_suite(h, tol);
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("%-40s %s  max_rel_err=%.3e (index %zu)\n", c.name.c_str(),
                c.report.pass ? "PASS" : "FAIL", c.report.max_rel_err,
                c.report.worst_index);
    ok = ok && c.report.pass;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::printf("%zu checks in %.1f s: %s\n", checks.size(), secs,
              ok ? "all passed" : "FAILURES");
  return ok ? 0 : 1;
}

struct AblationCell {
  int row_id;  // mirrors the six-row ablation table
  q2a::FusionKind fusion;
  q2a::HeadKind head;
};

constexpr AblationCell kAblationGrid[] = {
    {1, q2a::FusionKind::Mul, q2a::HeadKind::Linear},
    {2, q2a::FusionKind::Mul, q2a::HeadKind::Decoder},
    {3, q2a::FusionKind::Sum, q2a::HeadKind::Linear},
    {4, q2a::FusionKind::Sum, q2a::HeadKind::Decoder},
    {5, q2a::FusionKind::Cman, q2a::HeadKind::Linear},
    {6, q2a::FusionKind::Cman, q2a::HeadKind::Decoder},
};

int cmd_ablate(const std::string& data_path, std::size_t n_seeds,
               const std::string& out_dir, const std::string& config_path) {
  RunConfig rc;
  // Desk-scale ablation defaults; kept small so the 6 x seeds grid is cheap.
  rc.model.feature_dim = 32;
  rc.model.answer_embed_dim = 48;
  rc.model.fusion_layers = 1;
  rc.model.decoder_layers = 1;
  rc.model.ffn_mult = 2;
  rc.model.per_class_head = true;
  rc.model.aux_loss_weight = 1.0;
  rc.train.epochs = 30;
  rc.train.batch_size = 16;
  rc.train.adam.lr = 3e-3;
  rc.train.grad_clip = 5.0;
  rc.train.lr_decay = 0.95;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config " + config_path);
    rc = parse_run_config(json::parse(in));
  }
  q2a::Dataset ds = q2a::load_dataset(data_path);
  bind_to_dataset(rc.model, ds);
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "config.json",
             run_config_to_json(rc).dump(2) + "\n");
  auto [train_set, val_set] = split_dataset(ds, rc.val_fraction);
  q2a::TokenVocabulary tv;

  struct Row {
    int row_id;
    std::string fusion, head;
    std::uint64_t seed;
    q2a::EvalReport report;
  };
  std::vector<Row> rows;
  for (const auto& cell : kAblationGrid) {
    for (std::size_t s = 0; s < n_seeds; ++s) {
      q2a::ModelConfig cfg = rc.model;
      cfg.fusion_kind = cell.fusion;
      cfg.head_kind = cell.head;
      cfg.seed = s + 1;
      q2a::Q2AModel model(cfg);
      q2a::TrainState state;
      q2a::TrainOptions opts = rc.train;
      opts.shuffle_seed = 1000 + s;
      q2a::TrainResult result =
          q2a::train(model, train_set, val_set, tv, opts, state);
      q2a::apply_param_snapshot(model, result.best_params);
      rows.push_back({cell.row_id, q2a::fusion_kind_name(cell.fusion),
                      q2a::head_kind_name(cell.head), cfg.seed,
                      q2a::evaluate(model, val_set, tv)});
      std::cout << "row " << cell.row_id << " (" << rows.back().fusion << "+"
                << rows.back().head << ") seed " << cfg.seed << ": overall "
                << rows.back().report.overall_acc << "\n";
    }
  }

  std::string csv = "row_id,fusion,head,seed,open_acc,closed_acc,overall_acc\n";
  auto opt = [](const std::optional<double>& v) {
    return v ? std::to_string(*v) : std::string();
  };
  for (const auto& r : rows)
    csv += std::to_string(r.row_id) + "," + r.fusion + "," + r.head + "," +
           std::to_string(r.seed) + "," + opt(r.report.open_acc) + "," +
           opt(r.report.closed_acc) + "," +
           std::to_string(r.report.overall_acc) + "\n";
  write_file(fs::path(out_dir) / "ablation.csv", csv);

  std::string med_csv = "row_id,fusion,head,median_overall\n";
  for (const auto& cell : kAblationGrid) {
    std::vector<double> vals;
    for (const auto& r : rows)
      if (r.row_id == cell.row_id) vals.push_back(r.report.overall_acc);
    std::sort(vals.begin(), vals.end());
    const double med = vals.size() % 2
                           ? vals[vals.size() / 2]
                           : 0.5 * (vals[vals.size() / 2 - 1] +
                                    vals[vals.size() / 2]);
    med_csv += std::to_string(cell.row_id) + "," +
               q2a::fusion_kind_name(cell.fusion) + "," +
               q2a::head_kind_name(cell.head) + "," + std::to_string(med) +
               "\n";
  }
  write_file(fs::path(out_dir) / "medians.csv", med_csv);
  std::cout << "wrote " << (fs::path(out_dir) / "ablation.csv").string()
            << " and medians.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"q2avqa: semi-open VQA on synthetic grid images"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out = "dataset.txt";
  std::size_t gen_n = 1000, gen_grid = 4;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output path");
  gen->add_option("--n", gen_n, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--grid", gen_grid, "grid size G (N = G^2)");
  gen->add_option("--seed", gen_seed, "generation seed");

  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_config, tr_data, tr_out = "run";
  tr->add_option("--config", tr_config, "run config JSON");
  tr->add_option("--data", tr_data, "dataset path")
      ->required()
      ->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "output run directory");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset path")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "report CSV path");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  double gc_h = 1e-5, gc_tol = 1e-4;
  gc->add_option("--step", gc_h, "finite-difference step");
  gc->add_option("--tol", gc_tol, "max relative error tolerance");

  auto* ab = app.add_subcommand("ablate", "fusion x head ablation grid");
  std::string ab_data, ab_out = "ablation", ab_config;
  std::size_t ab_seeds = 5;
  ab->add_option("--data", ab_data, "dataset path")
      ->required()
      ->check(CLI::ExistingFile);
  ab->add_option("--seeds", ab_seeds, "seeds per configuration")
      ->check(CLI::PositiveNumber);
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--config", ab_config, "run config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_out, gen_n, gen_grid, gen_seed);
    if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_out);
    if (gc->parsed()) return cmd_gradcheck(gc_h, gc_tol);
    if (ab->parsed()) return cmd_ablate(ab_data, ab_seeds, ab_out, ab_config);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
