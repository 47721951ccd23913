#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/curriculum.hpp"
#include "vqacl/logging.hpp"
#include "vqacl/model.hpp"
#include "vqacl/synth.hpp"

namespace vqacl {

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { kAdaptive = 0, kSgd };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::kAdaptive ? "adaptive" : "sgd";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adaptive") return OptimizerKind::kAdaptive;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw std::runtime_error("unknown optimizer '" + s + "'");
}

// Adam-style adaptive moments (beta1 0.9, beta2 0.999, eps 1e-8) or plain SGD.
// The configured value is the initial learning rate; set_rate applies the
// schedule's current value before a step.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void set_rate(double lr) { lr_ = lr; }

  void step(std::vector<std::pair<std::string, Tensor*>>& params, const GradientMap& grads) {
    if (kind_ == OptimizerKind::kSgd) {
      for (auto& [name, p] : params) {
        const Tensor& g = grads.at(p->node());
        double* pd = p->mutable_data();
        const double* gd = g.data();
        for (std::int64_t i = 0; i < p->numel(); ++i) pd[i] -= lr_ * gd[i];
      }
      return;
    }
    if (m_.empty()) {
      for (auto& [name, p] : params) {
        m_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p->numel()), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor* p = params[k].second;
      const Tensor& g = grads.at(p->node());
      double* pd = p->mutable_data();
      const double* gd = g.data();
      double* m = m_[k].data();
      double* v = v_[k].data();
      for (std::int64_t i = 0; i < p->numel(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * gd[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * gd[i] * gd[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        pd[i] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// training strategies
// ---------------------------------------------------------------------------

enum class Strategy { kShuffle = 0, kSpl, kSpcl };

inline const char* strategy_name(Strategy s) {
  static constexpr const char* names[3] = {"shuffle", "spl", "spcl"};
  return names[static_cast<int>(s)];
}

inline Strategy parse_strategy(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == strategy_name(static_cast<Strategy>(i))) return static_cast<Strategy>(i);
  throw std::runtime_error("unknown strategy '" + s + "'");
}

struct TrainConfig {
  Strategy strategy = Strategy::kSpcl;
  OptimizerKind optimizer = OptimizerKind::kAdaptive;
  int epochs = 60;
  int batch_size = 64;
  double learning_rate = 1e-3;
  int cl_epochs = 15;
  double tau0 = 0.5;
  // prior difficulty weight per question type, indexed by QuestionType
  std::array<double, kNumQuestionTypes> priors = {1.0, 1.0, 3.0, 4.0, 4.0};
  std::uint64_t seed = 7;
  int eval_threads = 1;
  // cosine decay of the learning rate from its initial value to
  // lr_floor_fraction * initial over the run; 1.0 keeps it constant
  double lr_floor_fraction = 0.1;
  // test hook: overrides every per-sample weight with 1 regardless of phase
  bool force_uniform_weights = false;
};

struct EpochTrace {
  int epoch = 0;
  std::string phase;      // shuffle | cl | spl
  double pace = 0.0;      // K
  double threshold = 0.0; // lambda (0 when the phase defines none)
  double mean_loss = 0.0;
  std::array<double, kNumQuestionTypes> inclusion{};  // fraction of v > 0
  std::array<double, kNumQuestionTypes> mean_weight{};
  MetricsReport val;
};

inline std::string trace_csv_header() {
  std::string h = "epoch,phase,K,lambda,mean_loss";
  for (int t = 0; t < kNumQuestionTypes; ++t)
    h += std::string(",prop_") + type_name(static_cast<QuestionType>(t));
  for (int t = 0; t < kNumQuestionTypes; ++t)
    h += std::string(",meanv_") + type_name(static_cast<QuestionType>(t));
  for (int t = 0; t < kNumQuestionTypes; ++t)
    h += std::string(",valacc_") + type_name(static_cast<QuestionType>(t));
  h += ",val_AA,val_OA\n";
  return h;
}

inline std::string trace_csv_row(const EpochTrace& tr) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << ',' << buf;
  };
  os << tr.epoch << ',' << tr.phase;
  num(tr.pace);
  num(tr.threshold);
  num(tr.mean_loss);
  for (double v : tr.inclusion) num(v);
  for (double v : tr.mean_weight) num(v);
  for (int t = 0; t < kNumQuestionTypes; ++t) {
    const auto it = tr.val.per_type.find(static_cast<QuestionType>(t));
    if (it == tr.val.per_type.end()) {
      os << ',';  // type absent from the validation split
    } else {
      num(it->second.accuracy());
    }
  }
  num(tr.val.average_accuracy());
  num(tr.val.overall_accuracy());
  os << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

class Trainer {
 public:
  Trainer(VqaModel& model, const Dataset& dataset, TrainConfig cfg)
      : model_(model), ds_(dataset), cfg_(std::move(cfg)),
        optimizer_(cfg_.optimizer, cfg_.learning_rate) {
    if (cfg_.epochs < 1) throw std::invalid_argument("trainer: epochs must be >= 1");
    if (cfg_.batch_size < 1) throw std::invalid_argument("trainer: batch size must be >= 1");
    if (!(cfg_.tau0 > 0.0 && cfg_.tau0 <= 1.0))
      throw std::invalid_argument("trainer: tau0 must be in (0, 1]");
    train_idx_ = ds_.split_triplets(Split::kTrain);
    val_idx_ = ds_.split_triplets(Split::kVal);
    if (train_idx_.empty()) throw std::invalid_argument("trainer: empty training split");

    if (cfg_.strategy == Strategy::kSpcl) {
      std::vector<int> token_counts;
      std::vector<double> priors;
      for (int idx : train_idx_) {
        const Triplet& t = ds_.triplets[static_cast<std::size_t>(idx)];
        token_counts.push_back(static_cast<int>(tokenize(t.question).size()));
        const double prior = cfg_.priors[static_cast<std::size_t>(t.type)];
        if (!(prior > 0.0))
          throw std::invalid_argument(std::string("trainer: missing prior weight for type ") +
                                      type_name(t.type));
        priors.push_back(prior);
      }
      scores_ = ranking_scores(token_counts, priors);
    }
    prev_losses_.assign(train_idx_.size(), 0.0);
  }

  const std::vector<EpochTrace>& traces() const { return traces_; }
  const VqaModel& best_model() const { return best_model_; }
  double best_val_overall() const { return best_val_oa_; }
  // triplet indices of the training split, defining sample positions
  const std::vector<int>& train_positions() const { return train_idx_; }
  // per-position weights applied during the most recent epoch
  const std::vector<double>& last_weights() const { return last_weights_; }
  const std::vector<double>& ranking() const { return scores_; }

  // One pass over the training split. Weights come from the strategy/phase;
  // the batch objective is mean_i v_i * L_i and every per-sample loss is
  // recorded for the next epoch's threshold update.
  EpochTrace run_epoch(int epoch) {
    const std::size_t n = train_idx_.size();
    std::string phase;
    double lambda = 0.0;
    std::vector<double> cl_weights;

    const bool is_cl = cfg_.strategy == Strategy::kSpcl && epoch < cfg_.cl_epochs;
    const bool is_spl_capable =
        (cfg_.strategy == Strategy::kSpl && epoch >= 1) ||
        (cfg_.strategy == Strategy::kSpcl && epoch >= cfg_.cl_epochs &&
         (cfg_.cl_epochs > 0 || epoch >= 1));
    if (cfg_.strategy == Strategy::kShuffle) {
      phase = "shuffle";
    } else if (is_cl) {
      phase = "cl";
      const double tau = cfg_.tau0 + (1.0 - cfg_.tau0) * static_cast<double>(epoch) /
                                         static_cast<double>(cfg_.cl_epochs);
      cl_weights = init_curriculum(scores_, std::min(tau, 1.0));
    } else {
      phase = "spl";
      if (is_spl_capable) {
        const Pace pace = update_pace(prev_losses_, epoch);
        lambda = pace.threshold;
        if (!(lambda > 0.0)) {
          // every recorded loss was 0; nothing to threshold
          lambda = 0.0;
        }
      }
      // first epoch with no recorded losses trains uniformly
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(hash_key(cfg_.seed, 0x0e0c, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    const double progress = cfg_.epochs > 1
        ? static_cast<double>(epoch) / static_cast<double>(cfg_.epochs - 1) : 0.0;
    const double floor = cfg_.learning_rate * cfg_.lr_floor_fraction;
    optimizer_.set_rate(floor + (cfg_.learning_rate - floor) *
                                    0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)));

    std::vector<double> losses(n, 0.0), weights(n, 1.0);
    auto params = model_.named_params();

    for (std::size_t begin = 0; begin < n; begin += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg_.batch_size));
      std::vector<int> batch_triplets;
      for (std::size_t i = begin; i < end; ++i)
        batch_triplets.push_back(train_idx_[order[i]]);
      BatchInputs batch = make_batch(model_, ds_, batch_triplets, 0, batch_triplets.size());

      Tape tape;
      model_.watch_all(tape);
      ForwardResult fwd = model_.forward(tape, batch.images, batch.tokens);
      Tensor batch_losses = cross_entropy(tape, fwd.logits, batch.labels);

      const std::size_t b = end - begin;
      std::vector<double> w(b, 1.0);
      if (!cfg_.force_uniform_weights) {
        if (phase == "cl") {
          for (std::size_t i = 0; i < b; ++i) w[i] = cl_weights[order[begin + i]];
        } else if (phase == "spl" && lambda > 0.0) {
          for (std::size_t i = 0; i < b; ++i)
            w[i] = spl_weight(batch_losses.at(static_cast<std::int64_t>(i)), lambda);
        }
        bool any = false;
        for (double wi : w) any = any || wi > 0.0;
        if (!any) {
          log_warning("epoch " + std::to_string(epoch) +
                      ": all batch weights are zero, falling back to uniform");
          std::fill(w.begin(), w.end(), 1.0);
        }
      }

      Tensor objective = weighted_mean(tape, batch_losses, w, static_cast<double>(b));
      GradientMap grads = tape.backward(objective);
      optimizer_.step(params, grads);

      for (std::size_t i = 0; i < b; ++i) {
        losses[order[begin + i]] = batch_losses.at(static_cast<std::int64_t>(i));
        weights[order[begin + i]] = w[i];
      }
    }

    prev_losses_ = losses;
    last_weights_ = weights;

    EpochTrace tr;
    tr.epoch = epoch;
    tr.phase = phase;
    tr.pace = pace_fraction(epoch);
    tr.threshold = lambda;
    tr.mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0) /
                   static_cast<double>(n);
    std::array<int, kNumQuestionTypes> total{}, included{};
    std::array<double, kNumQuestionTypes> weight_sum{};
    for (std::size_t i = 0; i < n; ++i) {
      const Triplet& t = ds_.triplets[static_cast<std::size_t>(train_idx_[i])];
      const int type = static_cast<int>(t.type);
      ++total[static_cast<std::size_t>(type)];
      if (weights[i] > 0.0) ++included[static_cast<std::size_t>(type)];
      weight_sum[static_cast<std::size_t>(type)] += weights[i];
    }
    for (int t = 0; t < kNumQuestionTypes; ++t) {
      if (total[static_cast<std::size_t>(t)] == 0) continue;
      tr.inclusion[static_cast<std::size_t>(t)] =
          static_cast<double>(included[static_cast<std::size_t>(t)]) /
          total[static_cast<std::size_t>(t)];
      tr.mean_weight[static_cast<std::size_t>(t)] =
          weight_sum[static_cast<std::size_t>(t)] / total[static_cast<std::size_t>(t)];
    }
    if (!val_idx_.empty())
      tr.val = evaluate(model_, ds_, val_idx_, cfg_.batch_size, cfg_.eval_threads);
    return tr;
  }

  void run() {
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      EpochTrace tr = run_epoch(epoch);
      if (!val_idx_.empty() && tr.val.overall_accuracy() > best_val_oa_) {
        best_val_oa_ = tr.val.overall_accuracy();
        best_model_ = model_;  // tensors share buffers; later updates copy on write
      }
      traces_.push_back(std::move(tr));
    }
    if (val_idx_.empty()) best_model_ = model_;
  }

 private:
  VqaModel& model_;
  const Dataset& ds_;
  TrainConfig cfg_;
  Optimizer optimizer_;
  std::vector<int> train_idx_, val_idx_;
  std::vector<double> scores_;
  std::vector<double> prev_losses_;
  std::vector<double> last_weights_;
  std::vector<EpochTrace> traces_;
  VqaModel best_model_;
  double best_val_oa_ = -1.0;
};

// ---------------------------------------------------------------------------
// training job: dataset dir -> run directory written atomically
// ---------------------------------------------------------------------------

struct JobConfig {
  TrainConfig train;
  ModelConfig model;
  std::uint64_t model_seed = 0;  // 0: derive from train.seed
};

inline std::string job_config_echo(const JobConfig& job, const std::string& data_dir) {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  os << "data=" << data_dir << '\n';
  os << "strategy=" << strategy_name(job.train.strategy) << '\n';
  os << "optimizer=" << optimizer_name(job.train.optimizer) << '\n';
  os << "epochs=" << job.train.epochs << '\n';
  os << "batch=" << job.train.batch_size << '\n';
  os << "lr=" << num(job.train.learning_rate) << '\n';
  os << "cl_epochs=" << job.train.cl_epochs << '\n';
  os << "tau0=" << num(job.train.tau0) << '\n';
  for (int t = 0; t < kNumQuestionTypes; ++t)
    os << "prior_" << type_name(static_cast<QuestionType>(t)) << '='
       << num(job.train.priors[static_cast<std::size_t>(t)]) << '\n';
  os << "seed=" << job.train.seed << '\n';
  os << "eval_threads=" << job.train.eval_threads << '\n';
  os << "fusion=" << fusion_name(job.model.fusion) << '\n';
  os << "attention=" << (job.model.uniform_attention ? "uniform" : "learned") << '\n';
  os << "transform=" << (job.model.identity_transform ? "identity" : "learned") << '\n';
  return os.str();
}

struct TrainOutcome {
  std::vector<EpochTrace> traces;
  MetricsReport final_val;
  double best_val_oa = 0.0;
};

// Trains on the dataset directory and atomically materializes the run
// directory (config.txt, trace.csv, metrics.csv, model.bin, model_best.bin):
// everything is staged in "<out>.tmp" and renamed into place, so a failed run
// leaves nothing behind.
inline TrainOutcome run_training_job(const std::filesystem::path& data_dir,
                                     const std::filesystem::path& out_dir, JobConfig job) {
  namespace fs = std::filesystem;
  if (fs::exists(out_dir))
    throw std::runtime_error("output directory already exists: " + out_dir.string());

  Dataset ds = read_dataset(data_dir);
  job.model.image_size = ds.image_size;
  job.model.validate();

  Vocabulary vocab = build_train_vocab(ds);
  const std::uint64_t model_seed =
      job.model_seed ? job.model_seed : hash_key(job.train.seed, 0x5eed);
  VqaModel model = VqaModel::init(job.model, vocab, answer_labels(), model_seed);

  Trainer trainer(model, ds, job.train);
  trainer.run();

  TrainOutcome outcome;
  outcome.traces = trainer.traces();
  outcome.best_val_oa = trainer.best_val_overall();
  const std::vector<int> val_idx = ds.split_triplets(Split::kVal);
  if (!val_idx.empty())
    outcome.final_val = evaluate(model, ds, val_idx, job.train.batch_size,
                                 job.train.eval_threads);

  const fs::path tmp = out_dir.string() + ".tmp";
  fs::remove_all(tmp);
  try {
    fs::create_directories(tmp);
    {
      std::ofstream cfg(tmp / "config.txt");
      cfg << job_config_echo(job, data_dir.string());
      std::ofstream trace(tmp / "trace.csv");
      trace << trace_csv_header();
      for (const EpochTrace& tr : outcome.traces) trace << trace_csv_row(tr);
      std::ofstream metrics(tmp / "metrics.csv");
      metrics << metrics_csv(outcome.final_val);
      if (!cfg || !trace || !metrics)
        throw std::runtime_error("short write while staging run directory");
    }
    save_model(model, tmp / "model.bin");
    VqaModel best = trainer.best_model();
    save_model(best, tmp / "model_best.bin");
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  fs::rename(tmp, out_dir);
  return outcome;
}

}  // namespace vqacl
