#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "vitdrive/rng.hpp"
#include "vitdrive/tensor.hpp"

namespace vitdrive {

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// DQN building blocks. The trainer is generic over:
//
//   Env:   using State; State reset(uint64_t seed);
//          struct/Step step(int action) with members {State next; float
//          reward; bool terminal;}; int num_actions().
//
//   Model: Tensor q_forward(Tape*, const State&); int num_actions();
//          void for_each_param(fn(name, Tensor&)); Model clone();
//          void copy_params_from(Model&).
//
// The simulator env and the ViT Q-network satisfy these; tests drive the same
// trainer with a chain MDP and an MLP.
// ---------------------------------------------------------------------------

template <typename State>
struct Transition {
    std::shared_ptr<const State> state;
    int action = 0;
    float reward = 0.0f;
    std::shared_ptr<const State> next_state;
    bool terminal = false;
};

// FIFO ring buffer with uniform sampling.
template <typename State>
class ReplayBuffer {
public:
    explicit ReplayBuffer(size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
    }

    void push(Transition<State> t) {
        if (!std::isfinite(t.reward))
            throw std::invalid_argument("replay buffer rejects non-finite reward");
        if (storage_.size() < capacity_) {
            storage_.push_back(std::move(t));
        } else {
            storage_[next_slot_] = std::move(t);
        }
        next_slot_ = (next_slot_ + 1) % capacity_;
        ++inserted_;
    }

    size_t size() const { return storage_.size(); }
    size_t capacity() const { return capacity_; }
    int64_t inserted() const { return inserted_; }
    const Transition<State>& at(size_t i) const { return storage_[i]; }

    std::vector<const Transition<State>*> sample(size_t batch, Rng& rng) const {
        if (storage_.size() < batch)
            throw std::logic_error("replay buffer holds " + std::to_string(storage_.size()) +
                                   " transitions, cannot sample " + std::to_string(batch));
        std::vector<const Transition<State>*> out(batch);
        for (auto& p : out) p = &storage_[static_cast<size_t>(rng.uniform_int(static_cast<int>(storage_.size())))];
        return out;
    }

private:
    size_t capacity_;
    size_t next_slot_ = 0;
    int64_t inserted_ = 0;
    std::vector<Transition<State>> storage_;
};

struct TrainerConfig {
    double gamma = 0.99;
    int target_sync_period = 1000;  // env steps between hard target copies
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    int64_t epsilon_decay_steps = 15000;  // linear decay horizon
    double learning_rate = 1e-4;
    int batch_size = 32;
    size_t buffer_capacity = 50000;
    int64_t total_steps = 50000;
    int train_frequency = 1;  // gradient updates every N env steps
    int64_t warmup_steps = 1000;
    int64_t epoch_steps = 1000;     // env steps per metrics/eval epoch
    int eval_episodes_per_epoch = 2;
    int num_workers = 2;  // fixed batch partition; part of the reproducibility contract

    void validate() const {
        if (gamma < 0.0 || gamma >= 1.0)
            throw std::invalid_argument("trainer config: gamma must be in [0, 1)");
        if (target_sync_period < 1)
            throw std::invalid_argument("trainer config: target_sync_period must be >= 1");
        if (epsilon_start < 0 || epsilon_start > 1 || epsilon_end < 0 || epsilon_end > 1)
            throw std::invalid_argument("trainer config: epsilon must stay within [0, 1]");
        if (epsilon_decay_steps < 1 || batch_size < 1 || total_steps < 1 ||
            train_frequency < 1 || num_workers < 1 || epoch_steps < 1)
            throw std::invalid_argument("trainer config: counts must be positive");
        if (learning_rate <= 0) throw std::invalid_argument("trainer config: learning rate must be positive");
    }

    double epsilon_at(int64_t step) const {
        const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(epsilon_decay_steps));
        return epsilon_start + (epsilon_end - epsilon_start) * f;
    }
};

// Epsilon-greedy over a Q row; greedy ties break toward the lowest index.
inline int select_action(const Tensor& q, double epsilon, Rng& rng) {
    if (epsilon < 0.0 || epsilon > 1.0)
        throw std::invalid_argument("select_action: epsilon outside [0, 1]");
    const int n = static_cast<int>(q.numel());
    if (rng.bernoulli(epsilon)) return rng.uniform_int(n);
    auto v = q.values();
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

// Hard copy of online parameters into the target every tau steps.
template <typename Model>
void sync_target(Model& online, Model& target, int64_t step, int64_t tau) {
    if (step % tau == 0) target.copy_params_from(online);
}

// Adam with bias correction over a fixed parameter set. Holding tensor
// handles keeps the moment buffers aligned with the tensors they serve.
template <typename S>
class AdamT {
public:
    AdamT(std::vector<TensorT<S>> params, S lr, S beta1 = S(0.9), S beta2 = S(0.999),
          S eps = S(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(p.numel(), S(0));
            v_.emplace_back(p.numel(), S(0));
        }
    }

    // Consumes gradients: applies the update, then clears them.
    void step() {
        ++t_;
        const S bc1 = S(1) - std::pow(beta1_, static_cast<S>(t_));
        const S bc2 = S(1) - std::pow(beta2_, static_cast<S>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto w = params_[i].values();
            auto g = params_[i].grad_view();
            if (g.empty()) continue;  // parameter untouched by this loss
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < w.size(); ++j) {
                const S gj = g[j];
                if (!std::isfinite(gj))
                    throw DivergenceError("non-finite gradient in parameter " + std::to_string(i) +
                                          " at element " + std::to_string(j));
                m[j] = beta1_ * m[j] + (S(1) - beta1_) * gj;
                v[j] = beta2_ * v[j] + (S(1) - beta2_) * gj * gj;
                const S mhat = m[j] / bc1;
                const S vhat = v[j] / bc2;
                w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            params_[i].zero_grad();
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<TensorT<S>> params_;
    std::vector<std::vector<S>> m_, v_;
    S lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

using Adam = AdamT<float>;

// Mean squared TD error over a batch: y = r + gamma * max_a' Q(s',a'; target)
// for non-terminal transitions, y = r on terminal ones. Gradient flows only
// through the online network.
template <typename S, typename Model, typename State>
TensorT<S> td_loss(TapeT<S>* tape, Model& online, Model& target,
                   const std::vector<const Transition<State>*>& batch, S gamma) {
    if (batch.empty()) throw std::invalid_argument("td_loss: empty batch");
    std::vector<TensorT<S>> preds;
    std::vector<S> targets;
    preds.reserve(batch.size());
    targets.reserve(batch.size());
    for (const auto* tr : batch) {
        S y = static_cast<S>(tr->reward);
        if (!tr->terminal) {
            auto qn = target.q_forward(nullptr, *tr->next_state);
            auto qv = qn.values();
            S mx = qv[0];
            for (size_t i = 1; i < qv.size(); ++i) mx = std::max(mx, qv[i]);
            y += gamma * mx;
        }
        targets.push_back(y);
        auto q = online.q_forward(tape, *tr->state);
        preds.push_back(slice_cols(tape, q, tr->action, tr->action + 1));
    }
    auto pred = concat_rows(tape, preds);
    const int count = static_cast<int>(targets.size());
    auto y = TensorT<S>::from_data({count, 1}, std::move(targets));
    auto diff = sub(tape, pred, y);
    return mean_all(tape, mul(tape, diff, diff));
}

struct MetricsRow {
    int epoch = 0;
    int64_t env_steps = 0;
    double mean_eval_reward = 0.0;
    double epsilon = 0.0;
    double loss_mean = 0.0;
};

struct TrainResult {
    std::vector<MetricsRow> metrics;
    int64_t episodes = 0;
    int64_t updates = 0;
};

namespace detail {

// Per-sample losses and backwards run on per-worker model replicas with a
// fixed sample partition (i % workers), then gradients reduce into the online
// parameters in worker order. Bitwise reproducible for a given worker count.
template <typename Model, typename State>
double parallel_td_update(Model& online, Model& target,
                          const std::vector<const Transition<State>*>& batch, float gamma,
                          std::vector<Model>& replicas) {
    const int workers = static_cast<int>(replicas.size());
    std::vector<double> loss_sums(static_cast<size_t>(workers), 0.0);
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (auto& r : replicas) r.copy_params_from(online);
    auto worker_body = [&](int w) {
        Model& rep = replicas[static_cast<size_t>(w)];
        rep.for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
        for (size_t i = static_cast<size_t>(w); i < batch.size(); i += static_cast<size_t>(workers)) {
            const auto* tr = batch[i];
            float y = tr->reward;
            if (!tr->terminal) {
                auto qn = target.q_forward(nullptr, *tr->next_state);
                auto qv = qn.values();
                float mx = qv[0];
                for (size_t j = 1; j < qv.size(); ++j) mx = std::max(mx, qv[j]);
                y += gamma * mx;
            }
            Tape tape;
            auto q = rep.q_forward(&tape, *tr->state);
            auto qa = slice_cols(&tape, q, tr->action, tr->action + 1);
            auto diff = sub(&tape, qa, Tensor::from_data({1, 1}, {y}));
            auto loss = mul(&tape, diff, diff);
            tape.backward(loss);
            loss_sums[static_cast<size_t>(w)] += static_cast<double>(loss.item());
        }
    };
    auto run_worker = [&](int w) {
        try {
            worker_body(w);
        } catch (...) {
            errors[static_cast<size_t>(w)] = std::current_exception();
        }
    };
    if (workers == 1) {
        run_worker(0);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) threads.emplace_back(run_worker, w);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    // Reduce replica gradients into the online parameters, mean over batch.
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    std::vector<std::vector<Tensor>> rep_params(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w)
        replicas[static_cast<size_t>(w)].for_each_param(
            [&rep_params, w](const std::string&, Tensor& t) {
                rep_params[static_cast<size_t>(w)].push_back(t);
            });
    size_t idx = 0;
    online.for_each_param([&](const std::string&, Tensor& t) {
        auto g = t.grad();
        for (int w = 0; w < workers; ++w) {
            auto rg = rep_params[static_cast<size_t>(w)][idx].grad_view();
            if (rg.empty()) continue;
            for (size_t j = 0; j < g.size(); ++j) g[j] += rg[j] * inv_b;
        }
        ++idx;
    });
    double total = 0.0;
    for (double s : loss_sums) total += s;
    return total / static_cast<double>(batch.size());
}

}  // namespace detail

// Greedy rollout of one episode; returns the undiscounted return.
template <typename Env, typename Model>
double greedy_episode(Env& env, Model& model, uint64_t seed, int64_t* steps_out = nullptr) {
    auto state = env.reset(seed);
    double total = 0.0;
    int64_t steps = 0;
    Rng unused(0);
    for (;;) {
        auto q = model.q_forward(nullptr, state);
        const int action = select_action(q, 0.0, unused);
        auto out = env.step(action);
        total += out.reward;
        ++steps;
        if (out.terminal) break;
        state = std::move(out.next);
    }
    if (steps_out) *steps_out = steps;
    return total;
}

// The DQN loop: epsilon-greedy behavior, uniform replay, periodic hard target
// syncs, one TD update every train_frequency steps after warmup, greedy
// evaluation over fixed seeds every epoch. Fully deterministic in (seed, cfg).
template <typename Env, typename Model>
TrainResult train(Env& env, Model& model, const TrainerConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (env.num_actions() != model.num_actions())
        throw std::invalid_argument("train: env has " + std::to_string(env.num_actions()) +
                                    " actions but model outputs " +
                                    std::to_string(model.num_actions()));
    using State = typename Env::State;

    Model target = model.clone();
    std::vector<Model> replicas;
    const int workers = std::min<int>(cfg.num_workers, cfg.batch_size);
    for (int w = 0; w < workers; ++w) replicas.push_back(model.clone());

    std::vector<Tensor> param_handles;
    model.for_each_param(
        [&param_handles](const std::string&, Tensor& t) { param_handles.push_back(t); });
    Adam opt(param_handles, static_cast<float>(cfg.learning_rate));

    ReplayBuffer<State> buffer(cfg.buffer_capacity);
    Rng action_rng(mix_seed(seed, 1));
    Rng sample_rng(mix_seed(seed, 2));

    Env eval_env = env;
    TrainResult result;

    int64_t episode_index = 0;
    auto state = std::make_shared<const State>(env.reset(mix_seed(seed, 1000000)));
    ++episode_index;

    double loss_accum = 0.0;
    int64_t loss_count = 0;
    int epoch = 0;

    for (int64_t step = 1; step <= cfg.total_steps; ++step) {
        const double eps = cfg.epsilon_at(step);
        auto q = model.q_forward(nullptr, *state);
        const int action = select_action(q, eps, action_rng);
        auto out = env.step(action);
        auto next = std::make_shared<const State>(std::move(out.next));
        buffer.push({state, action, out.reward, next, out.terminal});
        if (out.terminal) {
            state = std::make_shared<const State>(env.reset(mix_seed(seed, 1000000 + episode_index)));
            ++episode_index;
        } else {
            state = next;
        }

        if (step >= cfg.warmup_steps && step % cfg.train_frequency == 0 &&
            buffer.size() >= static_cast<size_t>(cfg.batch_size)) {
            auto batch = buffer.sample(static_cast<size_t>(cfg.batch_size), sample_rng);
            const double loss = detail::parallel_td_update(model, target, batch,
                                                           static_cast<float>(cfg.gamma), replicas);
            if (!std::isfinite(loss))
                throw DivergenceError("TD loss became non-finite at env step " +
                                      std::to_string(step));
            opt.step();
            loss_accum += loss;
            ++loss_count;
            ++result.updates;
        }

        sync_target(model, target, step, cfg.target_sync_period);

        if (step % cfg.epoch_steps == 0) {
            ++epoch;
            double eval_sum = 0.0;
            for (int e = 0; e < cfg.eval_episodes_per_epoch; ++e)
                eval_sum += greedy_episode(eval_env, model, mix_seed(seed, 2000000 + e));
            MetricsRow row;
            row.epoch = epoch;
            row.env_steps = step;
            row.mean_eval_reward = eval_sum / cfg.eval_episodes_per_epoch;
            row.epsilon = eps;
            row.loss_mean = loss_count > 0 ? loss_accum / static_cast<double>(loss_count) : 0.0;
            result.metrics.push_back(row);
            loss_accum = 0.0;
            loss_count = 0;
        }
    }
    result.episodes = episode_index;
    return result;
}

}  // namespace vitdrive
