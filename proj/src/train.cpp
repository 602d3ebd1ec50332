#include "q2a/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace q2a {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace

// ---- Adam -----------------------------------------------------------------

void adam_step(ParameterList& params, TrainState& state,
               const AdamConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& p : params) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    const std::size_t n = p.tensor.size();
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n)
      throw std::invalid_argument("adam_step: moment shape mismatch for \"" +
                                  p.name + "\"");
    const auto& g = p.tensor.grad();
    auto& data = p.tensor.data();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

double clip_grad_norm(ParameterList& params, double max_norm) {
  if (max_norm <= 0.0)
    throw std::invalid_argument("clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto& p : params)
    for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      auto& node = *p.tensor.node();
      for (double& g : node.grad) g *= s;
    }
  }
  return norm;
}

// ---- evaluation -----------------------------------------------------------

EvalReport evaluate(const Q2AModel& model, const std::vector<VqaSample>& data,
                    const TokenVocabulary& tv) {
  const std::size_t c = model.config().num_answer_classes;
  EvalReport r;
  r.confusion.assign(c, std::vector<std::size_t>(c, 0));
  for (const auto& s : data) {
    const EncodedSample e =
        encode_sample(s, tv, model.config().max_question_tokens);
    const Prediction pred = model.predict(e);
    const bool correct = pred.chosen_class == e.answer_class;
    r.confusion[e.answer_class][pred.chosen_class]++;
    if (s.qtype == QuestionType::Open) {
      ++r.n_open;
      if (correct) ++r.correct_open;
    } else {
      ++r.n_closed;
      if (correct) ++r.correct_closed;
    }
  }
  if (r.n_open)
    r.open_acc = static_cast<double>(r.correct_open) /
                 static_cast<double>(r.n_open);
  if (r.n_closed)
    r.closed_acc = static_cast<double>(r.correct_closed) /
                   static_cast<double>(r.n_closed);
  const std::size_t total = r.n_open + r.n_closed;
  r.overall_acc =
      total ? static_cast<double>(r.correct_open + r.correct_closed) /
                  static_cast<double>(total)
            : 0.0;
  return r;
}

// ---- training loop --------------------------------------------------------

void apply_param_snapshot(
    Q2AModel& model,
    const std::map<std::string, std::vector<double>>& snap) {
  for (auto& p : model.parameters()) {
    auto it = snap.find(p.name);
    if (it == snap.end())
      throw std::invalid_argument("apply_param_snapshot: missing \"" + p.name +
                                  "\"");
    if (it->second.size() != p.tensor.size())
      throw std::invalid_argument("apply_param_snapshot: size mismatch for \"" +
                                  p.name + "\"");
    p.tensor.data() = it->second;
  }
}

TrainResult train(Q2AModel& model, const std::vector<VqaSample>& train_set,
                  const std::vector<VqaSample>& val_set,
                  const TokenVocabulary& tv, const TrainOptions& opts,
                  TrainState& state) {
  if (train_set.empty())
    throw std::invalid_argument("train: empty training set");
  if (opts.batch_size == 0)
    throw std::invalid_argument("train: batch size must be positive");
  if (opts.lr_decay <= 0.0 || opts.lr_decay > 1.0)
    throw std::invalid_argument("train: lr_decay must be in (0, 1]");

  TrainResult result;
  state.shuffle_seed = opts.shuffle_seed;
  Rng shuffle_rng(opts.shuffle_seed);
  const std::size_t m = model.config().max_question_tokens;

  auto snapshot = [&]() {
    std::map<std::string, std::vector<double>> snap;
    for (auto& p : model.parameters()) snap[p.name] = p.tensor.data();
    return snap;
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);

    double loss_sum = 0.0;
    auto params = model.parameters();
    AdamConfig adam_cfg = opts.adam;
    adam_cfg.lr *= std::pow(opts.lr_decay, static_cast<double>(epoch));
    for (std::size_t start = 0; start < order.size();
         start += opts.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + opts.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      model.zero_grads();
      for (std::size_t i = start; i < end; ++i) {
        const EncodedSample e = encode_sample(train_set[order[i]], tv, m);
        auto [pred, loss] = model.forward(e);
        loss_sum += loss.item();
        backward(scale(loss, inv_b));
      }
      if (opts.grad_clip > 0.0) clip_grad_norm(params, opts.grad_clip);
      adam_step(params, state, adam_cfg);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val = val_set.empty() ? EvalReport{} : evaluate(model, val_set, tv);
    result.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);

    if (rec.val.overall_acc > state.best_val_overall) {
      state.best_val_overall = rec.val.overall_acc;
      state.best_epoch = epoch;
      result.best_params = snapshot();
      result.best_epoch = epoch;
      result.best_val_overall = rec.val.overall_acc;
    }
    if (opts.early_stop_acc > 0.0 &&
        rec.val.overall_acc >= opts.early_stop_acc)
      break;
  }
  if (result.best_params.empty()) result.best_params = snapshot();
  return result;
}

// ---- checkpoint -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'Q', '2', 'A', 'C'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

void put_u32(std::string& out, std::uint32_t v) {
  out.append(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::string& out, std::uint64_t v) {
  out.append(reinterpret_cast<const char*>(&v), 8);
}
void put_f64(std::string& out, double v) {
  out.append(reinterpret_cast<const char*>(&v), 8);
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}
void put_doubles(std::string& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * 8);
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint32_t u32() { return read<std::uint32_t>(); }
  std::uint64_t u64() { return read<std::uint64_t>(); }
  double f64() { return read<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * 8);
    pos_ += n * 8;
    return v;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  template <typename T>
  T read() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw std::runtime_error("load_checkpoint: unexpected end of file");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string encode_state(const TrainState& state) {
  std::string out;
  put_u64(out, state.step);
  put_u64(out, state.shuffle_seed);
  put_f64(out, state.best_val_overall);
  put_u64(out, state.best_epoch);
  put_u32(out, static_cast<std::uint32_t>(state.m.size()));
  for (const auto& [name, m] : state.m) {
    put_str(out, name);
    put_doubles(out, m);
    put_doubles(out, state.v.at(name));
  }
  return out;
}

TrainState decode_state(Reader& r) {
  TrainState s;
  s.step = r.u64();
  s.shuffle_seed = r.u64();
  s.best_val_overall = r.f64();
  s.best_epoch = r.u64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    s.m[name] = r.doubles();
    s.v[name] = r.doubles();
  }
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, Q2AModel& model,
                     const TrainState& state) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  put_str(out, config_to_json(model.config()));
  put_str(out, encode_state(state));
  auto params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (auto& p : params) {
    put_str(out, p.name);
    put_u64(out, p.tensor.rows());
    put_u64(out, p.tensor.cols());
    put_doubles(out, p.tensor.data());
  }
  put_u64(out, fnv1a(out));

  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("save_checkpoint: cannot open \"" + path + "\"");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed: " + path);
}

std::pair<std::unique_ptr<Q2AModel>, TrainState> load_checkpoint(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("load_checkpoint: cannot open \"" + path + "\"");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 16)
    throw std::runtime_error("load_checkpoint: checksum failure (truncated)");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(bytes.substr(0, bytes.size() - 8)) != stored)
    throw std::runtime_error("load_checkpoint: checksum failure in \"" + path +
                             "\"");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in \"" + path + "\"");
  Reader r(bytes);
  r.skip(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("load_checkpoint: version mismatch: file has " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kVersion));
  const ModelConfig cfg = config_from_json(r.str());
  const std::string state_block = r.str();
  Reader sr(state_block);
  TrainState state = decode_state(sr);

  auto model = std::make_unique<Q2AModel>(cfg);
  auto params = model->parameters();
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = &p.tensor;

  const std::uint32_t count = r.u32();
  std::map<std::string, bool> seen;
  for (auto& [name, _] : by_name) seen[name] = false;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    auto values = r.doubles();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error(
          "load_checkpoint: parameter \"" + name +
          "\" not expected by the stored config");
    Tensor* t = it->second;
    if (t->rows() != rows || t->cols() != cols ||
        values.size() != t->size())
      throw std::runtime_error("load_checkpoint: shape mismatch for \"" +
                               name + "\"");
    t->data() = std::move(values);
    seen[name] = true;
  }
  std::string missing;
  for (const auto& [name, ok] : seen)
    if (!ok) missing += (missing.empty() ? "" : ", ") + name;
  if (!missing.empty())
    throw std::runtime_error("load_checkpoint: missing parameters: " +
                             missing);
  return {std::move(model), std::move(state)};
}

// ---- reports --------------------------------------------------------------

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out =
      "epoch,mean_loss,val_open_acc,val_closed_acc,val_overall_acc,"
      "val_n_open,val_n_closed\n";
  for (const auto& rec : history) {
    out += std::to_string(rec.epoch) + "," + fmt_double(rec.mean_loss) + "," +
           fmt_opt(rec.val.open_acc) + "," + fmt_opt(rec.val.closed_acc) +
           "," + fmt_double(rec.val.overall_acc) + "," +
           std::to_string(rec.val.n_open) + "," +
           std::to_string(rec.val.n_closed) + "\n";
  }
  return out;
}

std::string eval_report_csv(const EvalReport& r) {
  std::string out = "qtype,accuracy,correct,count\n";
  out += "open," + fmt_opt(r.open_acc) + "," + std::to_string(r.correct_open) +
         "," + std::to_string(r.n_open) + "\n";
  out += "closed," + fmt_opt(r.closed_acc) + "," +
         std::to_string(r.correct_closed) + "," + std::to_string(r.n_closed) +
         "\n";
  out += "overall," + fmt_double(r.overall_acc) + "," +
         std::to_string(r.correct_open + r.correct_closed) + "," +
         std::to_string(r.n_open + r.n_closed) + "\n";
  return out;
}

// ---- answer-dimension sweep -----------------------------------------------

std::vector<SweepRow> sweep_answer_dim(const std::vector<std::size_t>& dims,
                                       const ModelConfig& base_cfg,
                                       const Dataset& dataset,
                                       const TrainOptions& opts,
                                       double val_fraction) {
  if (dims.empty())
    throw std::invalid_argument("sweep_answer_dim: no dimensions given");
  const std::size_t n = dataset.samples.size();
  const auto n_val = static_cast<std::size_t>(
      val_fraction * static_cast<double>(n));
  if (n_val == 0 || n_val >= n)
    throw std::invalid_argument("sweep_answer_dim: bad train/val split");
  const std::vector<VqaSample> train_set(dataset.samples.begin(),
                                         dataset.samples.end() - n_val);
  const std::vector<VqaSample> val_set(dataset.samples.end() - n_val,
                                       dataset.samples.end());
  TokenVocabulary tv;
  std::vector<SweepRow> rows;
  for (std::size_t dim : dims) {
    ModelConfig cfg = base_cfg;
    cfg.answer_embed_dim = dim;
    Q2AModel model(cfg);
    TrainState state;
    TrainResult result = train(model, train_set, val_set, tv, opts, state);
    apply_param_snapshot(model, result.best_params);
    const EvalReport report = evaluate(model, val_set, tv);
    rows.push_back({dim, report.open_acc, report.closed_acc,
                    report.overall_acc});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "answer_dim,open_acc,closed_acc,overall_acc\n";
  for (const auto& r : rows)
    out += std::to_string(r.answer_dim) + "," + fmt_opt(r.open_acc) + "," +
           fmt_opt(r.closed_acc) + "," + fmt_double(r.overall_acc) + "\n";
  return out;
}

}  // namespace q2a
