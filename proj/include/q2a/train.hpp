#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "q2a/data.hpp"
#include "q2a/model.hpp"

namespace q2a {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t shuffle_seed = 0;
  double best_val_overall = -1.0;
  std::size_t best_epoch = 0;
  // First and second moment estimates per parameter name.
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// One bias-corrected adaptive update over all parameters, using the grads
// accumulated by backward(). Caller zeroes grads afterwards.
void adam_step(ParameterList& params, TrainState& state,
               const AdamConfig& cfg);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParameterList& params, double max_norm);

struct EvalReport {
  std::optional<double> open_acc;    // absent when the partition is empty
  std::optional<double> closed_acc;
  double overall_acc = 0.0;
  std::size_t n_open = 0, n_closed = 0;
  std::size_t correct_open = 0, correct_closed = 0;
  // confusion[true_class][predicted_class]
  std::vector<std::vector<std::size_t>> confusion;
};

EvalReport evaluate(const Q2AModel& model, const std::vector<VqaSample>& data,
                    const TokenVocabulary& tv);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  EvalReport val;
};

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  // Invoked after every epoch (validation included); null disables.
  std::function<void(const EpochRecord&)> on_epoch;
  AdamConfig adam;
  std::uint64_t shuffle_seed = 1;
  // Global L2 gradient-norm ceiling per optimizer step (0 disables).
  double grad_clip = 1.0;
  // Multiplies the learning rate once per epoch (1 keeps it constant).
  double lr_decay = 1.0;
  // Stop once validation overall accuracy reaches this level (0 disables).
  double early_stop_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  // Parameter snapshot of the best validation epoch.
  std::map<std::string, std::vector<double>> best_params;
  std::size_t best_epoch = 0;
  double best_val_overall = 0.0;
};

TrainResult train(Q2AModel& model, const std::vector<VqaSample>& train_set,
                  const std::vector<VqaSample>& val_set,
                  const TokenVocabulary& tv, const TrainOptions& opts,
                  TrainState& state);

void apply_param_snapshot(Q2AModel& model,
                          const std::map<std::string, std::vector<double>>& snap);

// ---- checkpoint file ------------------------------------------------------
// Binary layout: magic "Q2AC", version u32, config JSON block, train-state
// block, parameter table (name, rows, cols, raw little-endian doubles),
// trailing FNV-1a checksum over everything before it.

void save_checkpoint(const std::string& path, Q2AModel& model,
                     const TrainState& state);

// Reconstructs the model from the stored config and restores parameters
// bit-exactly. Throws on checksum failure, version mismatch, or a parameter
// set that does not match the config.
std::pair<std::unique_ptr<Q2AModel>, TrainState> load_checkpoint(
    const std::string& path);

// ---- reports --------------------------------------------------------------

std::string history_csv(const std::vector<EpochRecord>& history);
std::string eval_report_csv(const EvalReport& r);

struct SweepRow {
  std::size_t answer_dim = 0;
  std::optional<double> open_acc, closed_acc;
  double overall_acc = 0.0;
};

// Trains one model per answer-embedding dimension and reports accuracies.
std::vector<SweepRow> sweep_answer_dim(const std::vector<std::size_t>& dims,
                                       const ModelConfig& base_cfg,
                                       const Dataset& dataset,
                                       const TrainOptions& opts,
                                       double val_fraction = 0.2);
std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace q2a
