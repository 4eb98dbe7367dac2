#include "dragonfly/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace dragonfly {

namespace {

// Stream tags keep the initialization, shuffling and trial-seed streams apart.
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kTrialStream = 0x7472;

/// Rows `rows` of a tensor whose leading axis indexes examples.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& t, const std::vector<Index>& rows) {
  Shape shape = t.shape();
  const Index width = t.size() / shape[0];
  shape[0] = static_cast<Index>(rows.size());
  Tensor<T> out(shape);
  auto src = t.matrix(t.dim(0), width);
  auto dst = out.matrix(shape[0], width);
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(static_cast<Index>(i)) = src.row(rows[i]);
  return out;
}

Tensor<double> one_hot(const Tensor<std::int32_t>& labels, const std::vector<Index>& rows, Index classes) {
  Tensor<double> out({static_cast<Index>(rows.size()), classes});
  for (std::size_t i = 0; i < rows.size(); ++i) out.at(static_cast<Index>(i), labels[rows[i]]) = 1.0;
  return out;
}

std::string lr_key(double lr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lr);
  return buf;
}

}  // namespace

std::string to_string(LossMode mode) { return mode == LossMode::Softlog ? "softlog" : "plain-log"; }

LossMode parse_loss_mode(const std::string& text) {
  if (text == "softlog") return LossMode::Softlog;
  if (text == "plain-log" || text == "plainlog") return LossMode::PlainLog;
  throw std::invalid_argument("unknown loss mode '" + text + "' (expected softlog or plain-log)");
}

std::vector<std::string> TrainConfig::errors() const {
  std::vector<std::string> out;
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) out.push_back("learning_rate must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) out.push_back("momentum must lie in [0, 1)");
  if (batch_size < 1) out.push_back("batch_size must be >= 1");
  if (epochs < 1) out.push_back("epochs must be >= 1");
  if (!(width_scale > 0) || !std::isfinite(width_scale)) out.push_back("width_scale must be > 0");
  if (head < 1 || head > kNetworkCount) out.push_back("head must lie in 1..17");
  return out;
}

void TrainConfig::validate() const {
  const auto errs = errors();
  if (errs.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& e : errs) msg += " " + e + ";";
  throw std::invalid_argument(msg);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"width_scale", c.width_scale},
          {"loss", to_string(c.loss)},
          {"auxiliary_loss", c.auxiliary_loss},
          {"padding", to_string(c.padding)},
          {"integrator_mode", to_string(c.integrator_mode)},
          {"head", c.head}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.width_scale = j.value("width_scale", c.width_scale);
    if (j.contains("loss")) c.loss = parse_loss_mode(j.at("loss").get<std::string>());
    c.auxiliary_loss = j.value("auxiliary_loss", c.auxiliary_loss);
    if (j.contains("padding")) c.padding = parse_padding_mode(j.at("padding").get<std::string>());
    if (j.contains("integrator_mode")) c.integrator_mode = parse_integrator_mode(j.at("integrator_mode").get<std::string>());
    c.head = j.value("head", c.head);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

EnsembleSpec ensemble_for(const Dataset& data, const TrainConfig& config, const std::vector<BranchSpec>& branches) {
  InputDims input{data.config.image_size, data.config.image_size, 1};
  if (data.train.size() > 0) {
    const auto& s = data.train.images.shape();
    input = InputDims{s[2], s[3], s[1]};
  }
  auto spec = dragonfly_spec(data.class_count(), input, config.width_scale, config.padding, config.integrator_mode);
  if (!branches.empty()) spec.branches = branches;
  return spec;
}

ParameterStore<double> init_params(const Ensemble<double>& model, std::uint64_t seed) {
  Rng rng = Rng::derive({seed, kInitStream});
  return model.init_parameters(rng);
}

std::vector<Index> argmax_rows(const Tensor<double>& probs) {
  const auto m = probs.matrix();
  std::vector<Index> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < m.cols(); ++k) {
      if (m(i, k) > m(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

std::array<Tensor<double>, kNetworkCount> predict_split(const Ensemble<double>& model, const ParameterStore<double>& params,
                                                        const Tensor<double>& images, Index batch) {
  if (batch < 1) throw std::invalid_argument("predict_split: batch must be >= 1");
  const Index n = images.dim(0);
  const Index classes = model.spec().classes;
  std::array<Tensor<double>, kNetworkCount> out;
  for (auto& t : out) t = Tensor<double>({n, classes});
  std::vector<Index> rows;
  for (Index start = 0; start < n; start += batch) {
    rows.resize(static_cast<std::size_t>(std::min(batch, n - start)));
    std::iota(rows.begin(), rows.end(), start);
    const auto heads = model.predict(params, gather_rows(images, rows));
    for (std::size_t h = 0; h < out.size(); ++h) {
      out[h].matrix().middleRows(start, static_cast<Index>(rows.size())) = heads[h].matrix();
    }
  }
  return out;
}

Evaluation evaluate_outputs(const std::array<Tensor<double>, kNetworkCount>& outputs, const Tensor<std::int32_t>& labels,
                            Index classes) {
  Evaluation eval;
  eval.count = labels.empty() ? 0 : labels.size();
  for (std::size_t h = 0; h < outputs.size(); ++h) {
    auto& head = eval.heads[h];
    head.confusion = Eigen::MatrixXi::Zero(classes, classes);
    if (eval.count == 0) continue;
    if (outputs[h].dim(0) != eval.count || outputs[h].dim(1) != classes) {
      throw ShapeError("evaluate: head N" + std::to_string(h + 1) + " outputs " + shape_string(outputs[h].shape()) +
                       " for " + std::to_string(eval.count) + " labels");
    }
    const auto pred = argmax_rows(outputs[h]);
    for (Index i = 0; i < eval.count; ++i) {
      const Index y = labels[i];
      if (y < 0 || y >= classes) throw ShapeError("evaluate: label " + std::to_string(y) + " out of range");
      head.confusion(y, pred[static_cast<std::size_t>(i)]) += 1;
    }
    head.accuracy = 100.0 * head.confusion.trace() / double(eval.count);
  }
  return eval;
}

Evaluation evaluate(const Ensemble<double>& model, const ParameterStore<double>& params, const Split& split,
                    Index classes) {
  if (split.size() == 0) return evaluate_outputs({}, split.labels, classes);
  return evaluate_outputs(predict_split(model, params, split.images), split.labels, classes);
}

nlohmann::json to_json(const Evaluation& eval) {
  nlohmann::json heads = nlohmann::json::array();
  for (std::size_t h = 0; h < eval.heads.size(); ++h) {
    const auto& c = eval.heads[h].confusion;
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < c.rows(); ++i) {
      std::vector<int> row;
      for (Index j = 0; j < c.cols(); ++j) row.push_back(c(i, j));
      rows.push_back(row);
    }
    heads.push_back({{"head", "N" + std::to_string(h + 1)}, {"accuracy", eval.heads[h].accuracy}, {"confusion", rows}});
  }
  return {{"count", eval.count}, {"heads", heads}};
}

nlohmann::json to_json(const TrialResult& r) {
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [split, values] : r.accuracy) acc[split] = values;
  return {{"seed", r.seed},
          {"learning_rate", r.learning_rate},
          {"accuracy", acc},
          {"loss_curve", r.loss_curve},
          {"wall_seconds", r.wall_seconds},
          {"diverged", r.diverged},
          {"diverged_step", r.diverged_step ? nlohmann::json(*r.diverged_step) : nlohmann::json(nullptr)},
          {"divergence_op", r.divergence_op},
          {"error", r.error}};
}

TrainOutcome train(const Ensemble<double>& model, const Dataset& data, const TrainConfig& config) {
  return train_from(model, data, config, init_params(model, config.seed));
}

TrainOutcome train_from(const Ensemble<double>& model, const Dataset& data, const TrainConfig& config,
                        ParameterStore<double> params) {
  config.validate();
  const auto& spec = model.spec();
  if (data.class_count() != spec.classes) {
    throw ShapeError("train: dataset has " + std::to_string(data.class_count()) + " classes, model expects " +
                     std::to_string(spec.classes));
  }
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome out;
  auto& r = out.result;
  r.seed = config.seed;
  r.learning_rate = config.learning_rate;

  std::map<std::string, Tensor<double>> velocity;
  for (const auto& [name, value] : params.parameters()) velocity.emplace(name, Tensor<double>::zeros_like(value));

  const Index n = data.train.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  const bool softlog_mode = config.loss == LossMode::Softlog;

  for (int epoch = 0; epoch < config.epochs && !r.diverged; ++epoch) {
    Rng shuffle = Rng::derive({config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)});
    shuffle.shuffle(order);
    double total = 0;
    for (Index start = 0; start < n; start += config.batch_size, ++step) {
      const Index b = std::min(config.batch_size, n - start);
      const std::vector<Index> rows(order.begin() + start, order.begin() + start + b);
      const auto target = one_hot(data.train.labels, rows, spec.classes);
      try {
        Tape<double> tape(true, FiniteCheck::Throw);
        auto heads = model.forward(tape, params, tape.constant(gather_rows(data.train.images, rows), "input"), true,
                                   &params.all_stats());
        auto head_loss = [&](Var<double> p) {
          return weighted_sum(softlog_mode ? softlog(p) : log(p), target, -1.0 / double(b));
        };
        Var<double> loss = head_loss(heads[16]);
        if (config.auxiliary_loss) {
          for (int h = 12; h < 16; ++h) loss = add(loss, head_loss(heads[static_cast<std::size_t>(h)]));
        }
        const double value = loss.value()[0];
        if (!std::isfinite(value)) throw NonFiniteError("loss", "loss is not finite");
        const auto grads = tape.backward(loss);
        for (const auto& [name, g] : grads) {
          auto& v = velocity.at(name).values();
          v = config.momentum * v + g.values();
          params.get(name).values() -= config.learning_rate * v;
        }
        total += value * double(b);
      } catch (const NonFiniteError& e) {
        r.diverged = true;
        r.diverged_step = step;
        r.divergence_op = e.op();
        break;
      }
    }
    if (!r.diverged) r.loss_curve.push_back(n > 0 ? total / double(n) : 0.0);
  }

  for (const auto& name : split_names()) {
    const auto& split = data.split(name);
    if (split.size() == 0) continue;
    try {
      const auto eval = evaluate(model, params, split, spec.classes);
      HeadArray acc{};
      for (std::size_t h = 0; h < acc.size(); ++h) acc[h] = eval.heads[h].accuracy;
      r.accuracy[name] = acc;
    } catch (const std::exception& e) {
      if (r.error.empty()) r.error = "evaluate " + name + ": " + e.what();
    }
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.params = std::move(params);
  return out;
}

std::uint64_t trial_seed(std::uint64_t base_seed, int trial) {
  return Rng::derive({base_seed, kTrialStream, static_cast<std::uint64_t>(trial)}).next();
}

int effective_workers(int requested) {
  int workers = std::max(1, requested);
  if (const char* env = std::getenv("DRAGONFLY_WORKERS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) workers = std::min<long>(workers, cap);
  }
  return workers;
}

namespace {

TrainOutcome run_trial_outcome(const Dataset& data, const TrainConfig& base, int trial, double learning_rate,
                               const std::vector<BranchSpec>& branches) {
  TrainConfig c = base;
  c.seed = trial_seed(base.seed, trial);
  c.learning_rate = learning_rate;
  try {
    Ensemble<double> model(ensemble_for(data, c, branches));
    return train(model, data, c);
  } catch (const std::exception& e) {
    TrainOutcome failed;
    failed.result.seed = c.seed;
    failed.result.learning_rate = learning_rate;
    failed.result.error = e.what();
    return failed;
  }
}

}  // namespace

TrialResult run_trial(const Dataset& data, const TrainConfig& base, int trial, double learning_rate,
                      const std::vector<BranchSpec>& branches) {
  return run_trial_outcome(data, base, trial, learning_rate, branches).result;
}

MonteCarloResult monte_carlo(const Dataset& data, const MonteCarloConfig& config, const TrialCallback& on_trial) {
  if (config.trials < 1) throw std::invalid_argument("monte_carlo: trials must be >= 1");
  if (config.learning_rates.empty()) throw std::invalid_argument("monte_carlo: empty learning-rate set");
  config.base.validate();
  for (double lr : config.learning_rates) {
    if (!(lr > 0)) throw std::invalid_argument("monte_carlo: learning rates must be > 0, got " + lr_key(lr));
  }

  const std::size_t jobs = config.learning_rates.size() * static_cast<std::size_t>(config.trials);
  MonteCarloResult result;
  result.head = config.base.head;
  result.trials.resize(jobs);
  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const double lr = config.learning_rates[job / static_cast<std::size_t>(config.trials)];
      const int trial = static_cast<int>(job % static_cast<std::size_t>(config.trials));
      auto outcome = run_trial_outcome(data, config.base, trial, lr, config.branches);
      if (on_trial) {
        std::lock_guard lock(callback_mutex);
        on_trial(outcome.result, outcome.result.error.empty() ? &outcome : nullptr);
      }
      result.trials[job] = std::move(outcome.result);
    }
  };
  const int workers = std::min<int>(effective_workers(config.workers), static_cast<int>(jobs));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  const auto h = static_cast<std::size_t>(config.base.head - 1);
  for (std::size_t job = 0; job < jobs; ++job) {
    const auto& t = result.trials[job];
    const int trial = static_cast<int>(job % static_cast<std::size_t>(config.trials));
    auto it = t.accuracy.find("test");
    if (!t.ok() || it == t.accuracy.end()) {
      std::string why = !t.error.empty() ? t.error
                        : t.diverged     ? "diverged at step " + std::to_string(t.diverged_step.value_or(-1))
                                         : "no test split";
      result.failures.push_back("lr " + lr_key(t.learning_rate) + " trial " + std::to_string(trial) + ": " + why);
      continue;
    }
    result.z_per_lr[t.learning_rate].push_back(it->second[h]);
    result.z_pooled.push_back(it->second[h]);
  }
  return result;
}

nlohmann::json to_json(const MonteCarloResult& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const auto& t : r.trials) trials.push_back(to_json(t));
  nlohmann::json per_lr = nlohmann::json::object();
  for (const auto& [lr, z] : r.z_per_lr) per_lr[lr_key(lr)] = z;
  return {{"head", "N" + std::to_string(r.head)},
          {"z_per_lr", per_lr},
          {"z_pooled", r.z_pooled},
          {"failures", r.failures},
          {"trials", trials}};
}

StressReport stress_run(LossMode mode, int steps, std::uint64_t seed) {
  constexpr Index kBatch = 8, kClasses = 3, kBranches = 2;
  constexpr double kLr = 0.1;
  Rng rng(seed);
  Tensor<double> target({kBatch, kClasses});
  std::vector<Tensor<double>> logits;
  for (Index b = 0; b < kBranches; ++b) {
    Tensor<double> z({kBatch, kClasses});
    for (Index i = 0; i < kBatch; ++i) {
      const Index label = i % kClasses;
      for (Index k = 0; k < kClasses; ++k) {
        // The labelled class sits 2e4 below its rivals, so its softmax mass is exactly 0.
        z.at(i, k) = (k == label ? -1e4 : 1e4) * rng.uniform(1.0, 2.0);
      }
      target.at(i, label) = 1.0;
    }
    logits.push_back(std::move(z));
  }
  Tensor<double> alpha({kBranches}, {0.6, 0.4});

  StressReport report;
  report.mode = mode;
  report.steps_requested = steps;
  for (int step = 0; step < steps; ++step) {
    try {
      Tape<double> tape(true, FiniteCheck::Throw);
      std::vector<Var<double>> branch;
      for (Index b = 0; b < kBranches; ++b) {
        branch.push_back(softmax(tape.parameter("z" + std::to_string(b), logits[static_cast<std::size_t>(b)])));
      }
      auto w = tape.parameter("alpha", alpha);
      Var<double> top;
      if (mode == LossMode::Softlog) {
        top = softlog_softmax_integrator(branch, w, IntegratorMode::Scalar);
      } else {
        std::vector<Var<double>> logs;
        for (auto& p : branch) logs.push_back(log(p));
        top = softmax(affine_combine(logs, w));
      }
      auto loss = weighted_sum(mode == LossMode::Softlog ? softlog(top) : log(top), target, -1.0 / double(kBatch));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw NonFiniteError("loss", "loss is not finite");
      const auto grads = tape.backward(loss);
      for (Index b = 0; b < kBranches; ++b) {
        logits[static_cast<std::size_t>(b)].values() -= kLr * grads.at("z" + std::to_string(b)).values();
      }
      alpha.values() -= kLr * grads.at("alpha").values();
      report.losses.push_back(value);
      ++report.steps_completed;
    } catch (const NonFiniteError& e) {
      report.non_finite = true;
      report.op = e.op();
      break;
    }
  }
  return report;
}

}  // namespace dragonfly
