#include "fpg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <json.hpp>

namespace fpg {

namespace {

constexpr double kTargetFloor = 1e-12;

std::vector<std::size_t> epoch_order(std::uint64_t seed, const char* name,
                                     long epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::substream(seed, name, static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

Tensor row_tensor(const std::vector<double>& v) {
  return Tensor({1, static_cast<int>(v.size()), 1, 1}, v);
}

std::vector<double> copy_grad(const Gradients& g, const Tensor& leaf) {
  if (!g.has(leaf)) return std::vector<double>(leaf.numel(), 0.0);
  const auto r = g.raw(leaf);
  return {r.begin(), r.end()};
}

void require_finite(double v, const std::string& what, long step) {
  if (!std::isfinite(v))
    throw NumericError("non-finite " + what + " (" + std::to_string(v) +
                       ") at step " + std::to_string(step));
}

// Applies one clipped AdamW step to every parameter bound in `ctx`.
void update_weights(ParamStore& store, const ForwardContext& ctx,
                    const Gradients& grads, AdamW& opt, const OptimizerConfig& o) {
  const auto& tracked = ctx.tracked();
  std::vector<std::vector<double>> g;
  g.reserve(tracked.size());
  for (const auto& [id, leaf] : tracked) g.push_back(copy_grad(grads, leaf));
  std::vector<std::span<double>> spans(g.begin(), g.end());
  clip_grad_norm(spans, o.clip_norm);
  opt.begin_step();
  for (std::size_t k = 0; k < tracked.size(); ++k) {
    const ParamId id = tracked[k].first;
    std::vector<double> p(*store[id].value);
    opt.update(id, p, g[k], o.weight_lr, o.weight_decay);
    store.set(id, std::move(p));
  }
}

}  // namespace

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (!(pred.shape() == target.shape()))
    throw ShapeError("mse_loss: shapes " + pred.shape().str() + " and " +
                     target.shape().str() + " differ");
  return mean_all(square(sub(pred, target)));
}

Tensor kl_loss(const Tensor& logits, const Tensor& target) {
  const Shape s = logits.shape();
  if (!(s == target.shape()))
    throw ShapeError("kl_loss: shapes " + s.str() + " and " +
                     target.shape().str() + " differ");
  const std::size_t plane = s.plane();
  const std::size_t channels = static_cast<std::size_t>(s.n) * s.c;
  const auto x = logits.data();
  const auto t = target.data();
  // Softmax probabilities minus normalized targets, kept for the backward pass.
  auto diff = std::make_shared<std::vector<double>>(x.size());
  double total = 0;
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double* xc = x.data() + ch * plane;
    const double* tc = t.data() + ch * plane;
    double mass = 0, floored = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      if (tc[i] < 0)
        throw DomainError("kl_loss: negative target at channel " + std::to_string(ch));
      mass += tc[i];
      floored += tc[i] + kTargetFloor;
    }
    if (!(mass > 0))
      throw DomainError("kl_loss: target channel " + std::to_string(ch) +
                        " is all zero");
    const double mx = *std::max_element(xc, xc + plane);
    double z = 0;
    for (std::size_t i = 0; i < plane; ++i) z += std::exp(xc[i] - mx);
    const double lse = mx + std::log(z);
    double kl = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double q = (tc[i] + kTargetFloor) / floored;
      const double logp = xc[i] - lse;
      kl += q * (std::log(q) - logp);
      (*diff)[ch * plane + i] = std::exp(logp) - q;
    }
    total += kl;
  }
  const double scale = 1.0 / static_cast<double>(channels);
  Tensor out = Tensor::scalar(total * scale);
  if (!logits.grad_tracked()) return out;
  return logits.tape()->record(
      out.shape(), out.storage(), {logits},
      [diff, scale](std::span<const double> g, const GradSink& in) {
        auto gx = in[0];
        const double k = g[0] * scale;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += k * (*diff)[i];
      });
}

Tensor task_loss(TaskLoss kind, const Tensor& pred, const Tensor& target) {
  return kind == TaskLoss::kl ? kl_loss(pred, target) : mse_loss(pred, target);
}

double cosine_lr(long t, long total, double lr_max, double lr_min) {
  if (total < 1) throw ConfigError("cosine_lr: total steps must be >= 1");
  if (t < 0 || t > total) throw UsageError("cosine_lr: step outside [0, T]");
  const double c = std::cos(std::numbers::pi * static_cast<double>(t) / total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1 + c);
}

double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip_grad_norm: max_norm must be > 0");
  double sq = 0;
  for (const auto& g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& g : grads)
      for (double& v : g) v *= k;
  }
  return norm;
}

void AdamW::update(std::size_t slot, std::span<double> param,
                   std::span<const double> grad, double lr, double weight_decay) {
  if (param.size() != grad.size())
    throw UsageError("AdamW: parameter and gradient sizes differ");
  if (step_ < 1) throw UsageError("AdamW: begin_step() not called");
  if (m_.size() <= slot) {
    m_.resize(slot + 1);
    v_.resize(slot + 1);
  }
  auto& m = m_[slot];
  auto& v = v_[slot];
  if (m.empty()) {
    m.assign(param.size(), 0.0);
    v.assign(param.size(), 0.0);
  }
  if (m.size() != param.size()) throw UsageError("AdamW: slot size changed");
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = beta1_ * m[i] + (1 - beta1_) * grad[i];
    v[i] = beta2_ * v[i] + (1 - beta2_) * grad[i] * grad[i];
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] -= lr * (mhat / (std::sqrt(vhat) + eps_)) + lr * weight_decay * param[i];
  }
}

double pck_metric(const Tensor& heatmaps,
                  const std::vector<std::vector<Keypoint>>& keypoints,
                  double radius_px, Rng& tie_break) {
  if (!(radius_px > 0)) throw ConfigError("pck_metric: radius must be > 0");
  const Shape s = heatmaps.shape();
  if (static_cast<int>(keypoints.size()) != s.n)
    throw ShapeError("pck_metric: keypoint list does not match batch size");
  const auto d = heatmaps.data();
  const std::size_t plane = s.plane();
  std::size_t hits = 0, total = 0;
  std::vector<std::size_t> best;
  for (int n = 0; n < s.n; ++n) {
    if (static_cast<int>(keypoints[n].size()) != s.c)
      throw ShapeError("pck_metric: keypoint count does not match channels");
    for (int k = 0; k < s.c; ++k) {
      const double* h = d.data() + (static_cast<std::size_t>(n) * s.c + k) * plane;
      const double mx = *std::max_element(h, h + plane);
      best.clear();
      for (std::size_t i = 0; i < plane; ++i)
        if (h[i] == mx) best.push_back(i);
      const std::size_t cell =
          best.size() == 1 ? best[0] : best[tie_break.below(best.size())];
      const double px = kHeatmapStride * static_cast<double>(cell % s.w);
      const double py = kHeatmapStride * static_cast<double>(cell / s.w);
      const Keypoint& kp = keypoints[n][k];
      if (std::hypot(px - kp.x, py - kp.y) <= radius_px) ++hits;
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / total : 0.0;
}

std::string history_line(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["expected_flops"] = r.expected_flops;
  j["budget"] = r.budget;
  j["active_gates"] = r.active_gates;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["penalty"] = r.penalty;
  j["epsilon"] = r.epsilon;
  j["tau"] = r.tau;
  j["lambda"] = r.lambda;
  j["alpha_lr"] = r.alpha_lr;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Searcher
// ---------------------------------------------------------------------------

Searcher::Searcher(const SearchConfig& config)
    : config_(config),
      w_opt_(config.optimizer.beta1, config.optimizer.beta2, config.optimizer.eps),
      a_opt_(config.optimizer.beta1, config.optimizer.beta2, config.optimizer.eps) {
  config_.validate();
  const MacroArch macro = build_macro(config_.profile, config_.input,
                                      config_.input, config_.keypoints);
  net_ = build_supernet(macro, config_.seed);
  table_ = build_flops_table(macro);
  const std::vector<double> uniform(kFusionVariants, 1.0 / kFusionVariants);
  budget_.flops = config_.budget_flops
                      ? *config_.budget_flops
                      : config_.budget_fraction * table_.all_active(uniform);
  budget_.unit = config_.flops_unit;
  budget_.validate();
  sched_ = config_.schedules;
  sched_.total_steps = config_.total_steps();
  sched_.validate();
  train_ = synth_dataset(config_.seed, "train", config_.search_train_samples(),
                         config_.input, config_.input, config_.keypoints);
  val_ = synth_dataset(config_.seed, "val", config_.val_samples, config_.input,
                       config_.input, config_.keypoints);
  gates_ = GateParams::initial(macro.num_layers(), kCandidates, kFusionVariants);
  gates_.epsilon = epsilon_schedule(sched_, 0);
}

Batch Searcher::train_batch(long t) const {
  const long spe = config_.steps_per_epoch();
  const auto order = epoch_order(config_.seed, "order.train", t / spe, train_.size());
  const std::size_t b = config_.batch_size, start = (t % spe) * b;
  return make_batch(train_, std::span(order).subspan(start, b));
}

Batch Searcher::val_batch(long t) const {
  const long spe = config_.steps_per_epoch();
  const auto order = epoch_order(config_.seed, "order.val", t / spe, val_.size());
  std::vector<std::size_t> idx;
  for (int j = 0; j < config_.batch_size; ++j)
    idx.push_back(order[((t % spe) * config_.batch_size + j) % order.size()]);
  return make_batch(val_, idx);
}

std::vector<double> Searcher::gumbel(long t) const {
  Rng rng = Rng::substream(config_.seed, "gumbel", static_cast<std::uint64_t>(t));
  return gumbel_noise(rng, kFusionVariants);
}

double Searcher::gamma_at(long t) const { return dnal_gamma_schedule(sched_, t); }

void Searcher::weight_step(long t, const Batch& b, StepMetrics& m) {
  const double eps = epsilon_schedule(sched_, t);
  std::vector<Tensor> gates;
  for (const auto& row : gates_.alpha)
    gates.push_back(row_tensor(
        candidate_weights(config_.strategy, row, eps, gamma_at(t))));
  const Tensor fw = row_tensor(
      gumbel_softmax(gates_.fusion_logits, tau_schedule(sched_, t), gumbel(t)));

  Tape tape;
  ForwardContext ctx(net_.params, BnMode::train, &tape, true);
  const Tensor pred = supernet_forward(ctx, net_, b.images, gates, fw);
  const Tensor loss = task_loss(config_.task_loss, pred, b.targets);
  m.train_loss = loss.item();
  require_finite(m.train_loss, "training loss", t);
  update_weights(net_.params, ctx, tape.backward(loss), w_opt_, config_.optimizer);
}

void Searcher::arch_step(long t, const Batch& b, StepMetrics& m) {
  const double eps = epsilon_schedule(sched_, t);
  Tape tape;
  // Weights are constants here and the running statistics stay untouched;
  // only α and the fusion logits move.
  ForwardContext ctx(net_.params, BnMode::train, &tape, false);
  ctx.set_update_running_stats(false);
  std::vector<Tensor> alpha, gates;
  for (const auto& row : gates_.alpha) {
    alpha.push_back(tape.leaf(row_tensor(row)));
    gates.push_back(candidate_weights(config_.strategy, alpha.back(), eps, gamma_at(t)));
  }
  const Tensor logits = tape.leaf(row_tensor(gates_.fusion_logits));
  const Tensor fw = gumbel_softmax(logits, tau_schedule(sched_, t), gumbel(t));

  const Tensor pred = supernet_forward(ctx, net_, b.images, gates, fw);
  const Tensor task = task_loss(config_.task_loss, pred, b.targets);
  const Tensor flops = total_expected_flops(table_, gates, fw);
  const Tensor pen = budget_penalty(flops, budget_, lambda_schedule(sched_, t));
  const Tensor loss = add(task, pen);
  m.val_loss = task.item();
  m.penalty = pen.item();
  m.expected_flops = flops.item();
  require_finite(loss.item(), "architecture loss", t);

  const Gradients g = tape.backward(loss);
  std::vector<std::vector<double>> grads;
  for (const auto& a : alpha) grads.push_back(copy_grad(g, a));
  grads.push_back(copy_grad(g, logits));
  std::vector<std::span<double>> spans(grads.begin(), grads.end());
  clip_grad_norm(spans, config_.optimizer.clip_norm);

  const auto& o = config_.optimizer;
  const double lr = cosine_lr(t, sched_.total_steps, o.alpha_lr_max, o.alpha_lr_min);
  a_opt_.begin_step();
  for (std::size_t l = 0; l < gates_.alpha.size(); ++l)
    a_opt_.update(l, gates_.alpha[l], grads[l], lr, o.alpha_weight_decay);
  a_opt_.update(gates_.alpha.size(), gates_.fusion_logits, grads.back(), lr,
                o.alpha_weight_decay);
}

void Searcher::joint_step(long t, const Batch& b, StepMetrics& m) {
  const double eps = epsilon_schedule(sched_, t);
  Tape tape;
  ForwardContext ctx(net_.params, BnMode::train, &tape, true);
  std::vector<Tensor> alpha, gates;
  for (const auto& row : gates_.alpha) {
    Tensor a = row_tensor(row);
    if (!config_.freeze_alpha) a = tape.leaf(a);
    alpha.push_back(a);
    gates.push_back(candidate_weights(config_.strategy, a, eps, gamma_at(t)));
  }
  Tensor logits = row_tensor(gates_.fusion_logits);
  if (!config_.freeze_alpha) logits = tape.leaf(logits);
  const Tensor fw = gumbel_softmax(logits, tau_schedule(sched_, t), gumbel(t));

  const Tensor pred = supernet_forward(ctx, net_, b.images, gates, fw);
  const Tensor task = task_loss(config_.task_loss, pred, b.targets);
  const Tensor flops = total_expected_flops(table_, gates, fw);
  const Tensor pen = budget_penalty(flops, budget_, lambda_schedule(sched_, t));
  const Tensor loss = add(task, pen);
  m.train_loss = task.item();
  m.val_loss = task.item();
  m.penalty = pen.item();
  m.expected_flops = flops.item();
  require_finite(loss.item(), "joint loss", t);

  const Gradients g = tape.backward(loss);
  update_weights(net_.params, ctx, g, w_opt_, config_.optimizer);
  if (config_.freeze_alpha) return;
  // Architecture parameters are clipped as their own group, as in the
  // alternating mode.
  std::vector<std::vector<double>> grads;
  for (const auto& a : alpha) grads.push_back(copy_grad(g, a));
  grads.push_back(copy_grad(g, logits));
  std::vector<std::span<double>> spans(grads.begin(), grads.end());
  clip_grad_norm(spans, config_.optimizer.clip_norm);
  const auto& o = config_.optimizer;
  const double lr = cosine_lr(t, sched_.total_steps, o.alpha_lr_max, o.alpha_lr_min);
  a_opt_.begin_step();
  for (std::size_t l = 0; l < gates_.alpha.size(); ++l)
    a_opt_.update(l, gates_.alpha[l], grads[l], lr, o.alpha_weight_decay);
  a_opt_.update(gates_.alpha.size(), gates_.fusion_logits, grads.back(), lr,
                o.alpha_weight_decay);
}

StepMetrics Searcher::search_step() {
  if (finished()) throw UsageError("search_step: search already finished");
  const long t = step_;
  StepMetrics m;
  if (config_.bilevel == Bilevel::joint) {
    joint_step(t, train_batch(t), m);
  } else {
    weight_step(t, train_batch(t), m);
    if (!config_.freeze_alpha) arch_step(t, val_batch(t), m);
  }
  ++step_;
  gates_.step = step_;
  gates_.epsilon = epsilon_schedule(sched_, step_);
  acc_.train += m.train_loss;
  acc_.val += m.val_loss;
  acc_.penalty += m.penalty;
  ++acc_.count;
  if (step_ % config_.steps_per_epoch() == 0 || finished()) close_epoch();
  return m;
}

std::vector<std::vector<double>> Searcher::layer_weights() const {
  std::vector<std::vector<double>> out;
  for (const auto& row : gates_.alpha)
    out.push_back(candidate_weights(config_.strategy, row, gates_.epsilon,
                                    gamma_at(step_)));
  return out;
}

std::vector<double> Searcher::fusion_weights() const {
  const std::vector<double> zero(kFusionVariants, 0.0);
  return gumbel_softmax(gates_.fusion_logits, tau_schedule(sched_, step_), zero);
}

double Searcher::expected_flops() const {
  return total_expected_flops(table_, layer_weights(), fusion_weights());
}

ArchGenome Searcher::derive() const {
  DiscretizeOptions o;
  o.strategy = config_.strategy;
  o.theta = config_.theta;
  o.gamma = gamma_at(step_);
  ArchGenome g = discretize(gates_, net_.macro, o);
  g.meta.seed = config_.seed;
  return g;
}

EpochRecord Searcher::run_epoch() {
  const std::size_t before = history_.size();
  do {
    search_step();
  } while (history_.size() == before);
  return history_.back();
}

void Searcher::close_epoch() {
  const long spe = config_.steps_per_epoch();
  EpochRecord r;
  r.epoch = static_cast<int>((step_ + spe - 1) / spe);
  r.step = step_;
  r.expected_flops = expected_flops();
  r.budget = budget_.flops;
  for (const auto& w : layer_weights())
    r.active_gates.push_back(
        static_cast<int>(std::count_if(w.begin(), w.end(), [](double v) { return v >= 0.5; })));
  const double n = std::max<long>(1, acc_.count);
  r.train_loss = acc_.train / n;
  r.val_loss = acc_.val / n;
  r.penalty = acc_.penalty / n;
  r.epsilon = epsilon_schedule(sched_, step_);
  r.tau = tau_schedule(sched_, step_);
  r.lambda = lambda_schedule(sched_, step_);
  r.alpha_lr = cosine_lr(step_, sched_.total_steps, config_.optimizer.alpha_lr_max,
                         config_.optimizer.alpha_lr_min);
  acc_ = {};
  history_.push_back(r);
}

void Searcher::run(const std::function<void(const EpochRecord&)>& on_epoch) {
  while (!finished()) {
    const EpochRecord r = run_epoch();
    if (on_epoch) on_epoch(r);
  }
}

void Searcher::restore(long step, std::vector<EpochRecord> history,
                       const EpochAccumulator& acc) {
  if (step < 0 || step > sched_.total_steps)
    throw DataError("checkpoint step " + std::to_string(step) + " outside the schedule");
  step_ = step;
  history_ = std::move(history);
  acc_ = acc;
  gates_.step = step_;
  gates_.epsilon = epsilon_schedule(sched_, step_);
}

// ---------------------------------------------------------------------------
// Retraining
// ---------------------------------------------------------------------------

RetrainResult retrain_derived(const ArchGenome& genome, const SearchConfig& config) {
  config.validate();
  Network net = build_derived(genome, config.seed);
  const MacroArch& macro = net.macro;
  const Dataset data =
      merge(synth_dataset(config.seed, "train", config.train_samples, macro.in_h,
                          macro.in_w, macro.keypoints),
            synth_dataset(config.seed, "val", config.val_samples, macro.in_h,
                          macro.in_w, macro.keypoints));
  const Dataset test = synth_dataset(config.seed, "test", config.test_samples,
                                     macro.in_h, macro.in_w, macro.keypoints);
  const std::size_t b = config.batch_size;
  const long spe = std::max<long>(1, static_cast<long>(data.size() / b));

  AdamW opt(config.optimizer.beta1, config.optimizer.beta2, config.optimizer.eps);
  RetrainResult res;
  long t = 0;
  for (int e = 0; e < config.epochs; ++e) {
    const auto order = epoch_order(config.seed, "order.retrain", e, data.size());
    double sum = 0;
    for (long s = 0; s < spe; ++s, ++t) {
      const Batch batch = make_batch(data, std::span(order).subspan(s * b, b));
      Tape tape;
      ForwardContext ctx(net.params, BnMode::train, &tape, true);
      const Tensor loss =
          task_loss(config.task_loss, network_forward(ctx, net, batch.images), batch.targets);
      require_finite(loss.item(), "retraining loss", t);
      sum += loss.item();
      update_weights(net.params, ctx, tape.backward(loss), opt, config.optimizer);
    }
    res.epoch_losses.push_back(sum / spe);
  }

  Rng ties = Rng::substream(config.seed, "pck");
  double loss_sum = 0, pck_sum = 0;
  for (std::size_t start = 0; start < test.size(); start += b) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(test.size(), start + b); ++i) idx.push_back(i);
    const Batch batch = make_batch(test, idx);
    ForwardContext ctx(net.params, BnMode::eval);
    const Tensor pred = network_forward(ctx, net, batch.images);
    loss_sum += task_loss(config.task_loss, pred, batch.targets).item() * idx.size();
    pck_sum += pck_metric(pred, batch.keypoints, config.pck_radius, ties) * idx.size();
  }
  res.final_loss = loss_sum / test.size();
  res.pck = pck_sum / test.size();
  return res;
}

}  // namespace fpg
