#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "qattn/adam.hpp"
#include "qattn/checkpoint.hpp"
#include "qattn/env.hpp"
#include "qattn/metrics.hpp"
#include "qattn/ops.hpp"
#include "qattn/qnet.hpp"
#include "qattn/replay.hpp"

namespace qattn::train {

enum class ModelKind { kBaseline, kAttentive };

inline const char* to_string(ModelKind k) {
    return k == ModelKind::kBaseline ? "baseline" : "attentive";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "baseline") return ModelKind::kBaseline;
    if (s == "attentive") return ModelKind::kAttentive;
    throw ConfigError("model must be 'baseline' or 'attentive', got '" + s + "'");
}

struct EpsilonSchedule {
    double eps_start = 1.0;
    double eps_end = 0.01;
    int64_t exploration_steps = 5'000'000;
};

/// Linear anneal clamped at eps_end:
/// eps_start + (eps_end - eps_start) * min(1, step / exploration_steps).
inline double epsilon_at(const EpsilonSchedule& s, int64_t step) {
    if (step < 0) throw InputError("epsilon_at: negative step");
    if (step >= s.exploration_steps) return s.eps_end;  // endpoint exact, no FP residue
    const double frac = static_cast<double>(step) / static_cast<double>(s.exploration_steps);
    return s.eps_start + (s.eps_end - s.eps_start) * frac;
}

struct TrainerConfig {
    int64_t buffer_size = 1'000'000;
    double gamma = 0.99;
    int64_t target_update_freq = 30'000;
    int64_t batch_size = 0;  // 0 = per-model default: 32 baseline, 256 attentive
    double lr = 1e-4;
    double adam_eps = 0.00015;
    double eps_start = 1.0;
    double eps_end = 0.01;
    int64_t exploration_steps = 5'000'000;
    int64_t learning_starts = 200'000;
    int64_t train_freq = 4;
    int64_t total_steps = 10'000'000;
    int64_t eval_every = 10;    // training episodes between eval blocks
    int64_t eval_episodes = 2;  // greedy, dropout-off episodes per block
    double dropout_rate = 0.1;
    int64_t checkpoint_every = 10'000;
    int64_t smooth_window = 10;
    double solve_stop = 0.0;  // >0: halt once smoothed eval return reaches it
    bool reward_clip = false;

    void validate() const {
        auto positive = [](int64_t v, const char* name) {
            if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
        };
        positive(buffer_size, "buffer_size");
        positive(target_update_freq, "target_update_freq");
        positive(batch_size, "batch_size (unresolved model default?)");
        positive(exploration_steps, "exploration_steps");
        positive(train_freq, "train_freq");
        positive(eval_every, "eval_every");
        positive(checkpoint_every, "checkpoint_every");
        positive(smooth_window, "smooth_window");
        if (gamma < 0.0 || gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
        if (lr <= 0.0) throw ConfigError("lr must be positive");
        if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
        if (eps_start < 0.0 || eps_start > 1.0 || eps_end < 0.0 || eps_end > 1.0)
            throw ConfigError("epsilon endpoints must lie in [0, 1]");
        if (eps_end > eps_start) throw ConfigError("eps_end must not exceed eps_start");
        if (total_steps < 0) throw ConfigError("total_steps must be non-negative");
        if (learning_starts < 0 || learning_starts > total_steps)
            throw ConfigError("learning_starts must lie in [0, total_steps]");
        if (eval_episodes < 0) throw ConfigError("eval_episodes must be non-negative");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("dropout_rate must lie in [0, 1)");
    }

    EpsilonSchedule schedule() const { return {eps_start, eps_end, exploration_steps}; }
};

/// Table-scale defaults (the struct's own defaults) — multi-day runs.
inline TrainerConfig paper_preset() { return {}; }

/// Laptop-scale overlay: same algorithm, shrunk schedule.
inline TrainerConfig desk_preset() {
    TrainerConfig c;
    c.buffer_size = 50'000;
    c.target_update_freq = 1'000;
    c.exploration_steps = 20'000;
    c.learning_starts = 1'000;
    c.total_steps = 150'000;
    return c;
}

inline TrainerConfig preset_by_name(const std::string& name) {
    if (name == "paper") return paper_preset();
    if (name == "desk") return desk_preset();
    throw ConfigError("unknown preset '" + name + "' (known: desk, paper)");
}

inline int64_t default_batch_size(ModelKind k) { return k == ModelKind::kAttentive ? 256 : 32; }

inline void resolve_batch_size(TrainerConfig& cfg, ModelKind kind) {
    if (cfg.batch_size == 0) cfg.batch_size = default_batch_size(kind);
}

/// Byte observations scaled to [0, 1] floats at the network boundary.
inline Tensor<float> scale_obs(const Tensor<uint8_t>& bytes) {
    Tensor<float> out(bytes.shape());
    const uint8_t* src = bytes.data();
    float* dst = out.data();
    constexpr float k = 1.0f / 255.0f;
    for (int64_t i = 0; i < bytes.numel(); ++i) dst[i] = static_cast<float>(src[i]) * k;
    return out;
}

namespace detail {

inline void copy_stack(const std::array<rl::Frame, 4>& stack, float* dst) {
    constexpr float k = 1.0f / 255.0f;
    for (const rl::Frame& f : stack) {
        const uint8_t* src = f.data();
        for (int64_t i = 0; i < 84 * 84; ++i) dst[i] = static_cast<float>(src[i]) * k;
        dst += 84 * 84;
    }
}

inline Tensor<float> batch_states(const std::vector<const rl::Transition*>& batch, bool next) {
    const int64_t b = static_cast<int64_t>(batch.size());
    Tensor<float> out({b, 4, 84, 84});
    for (int64_t i = 0; i < b; ++i)
        copy_stack(next ? batch[static_cast<size_t>(i)]->next_state
                        : batch[static_cast<size_t>(i)]->state,
                   out.data() + i * 4 * 84 * 84);
    return out;
}

}  // namespace detail

/// Epsilon-greedy action choice. The epsilon draw comes first, so a random
/// action consumes no dropout randomness; greedy ties break to the lowest
/// action index. `training` keeps dropout active while acting (it is off for
/// evaluation episodes).
template <typename Net>
int64_t select_action(Net& net, const Tensor<uint8_t>& state, double epsilon,
                      RngState& explore_rng, RngState& dropout_rng, bool training) {
    const int64_t n = net.cfg.n_actions;
    if (epsilon > 0.0 && explore_rng.uniform() < epsilon) return explore_rng.uniform_int(n);
    NoGradGuard guard;
    Tensor<float> obs = scale_obs(state).reshaped({1, state.dim(0), 84, 84});
    Var<float> q = net.forward(Var<float>(obs), dropout_rng, training);
    return argmax(q.value().data(), n);
}

/// One-step bootstrap targets: y_i = r_i + gamma * max_a Q_target(s'_i, a) * (1 - done_i).
/// No gradients flow into the target network.
template <typename Net>
std::vector<float> td_targets(const std::vector<const rl::Transition*>& batch, Net& target_net,
                              double gamma) {
    NoGradGuard guard;
    RngState unused(0);
    Tensor<float> next_obs = detail::batch_states(batch, true);
    Var<float> q = target_net.forward(Var<float>(next_obs), unused, false);
    Tensor<float> maxq = rowwise_max(q.value());
    std::vector<float> y(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const rl::Transition& t = *batch[i];
        y[i] = t.reward +
               (t.done ? 0.0f : static_cast<float>(gamma) * maxq[static_cast<int64_t>(i)]);
    }
    return y;
}

/// One gradient step: sample a minibatch, regress Q(s, a) onto the Bellman
/// targets under Huber loss, Adam-update the online network. Throws
/// NotReadyError (no state change) while the buffer is under-filled.
template <typename Net>
float train_step(Net& online, Net& target, const rl::ReplayBuffer& buffer,
                 const TrainerConfig& cfg, Adam<float>& opt, RngState& sample_rng,
                 RngState& dropout_rng) {
    auto batch = buffer.sample(cfg.batch_size, sample_rng);
    std::vector<float> y = td_targets(batch, target, cfg.gamma);

    std::vector<int64_t> actions(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) actions[i] = batch[i]->action;

    Var<float> obs(detail::batch_states(batch, false));
    Var<float> q = online.forward(obs, dropout_rng, true);
    Var<float> taken = gather_actions(q, actions);
    Var<float> loss =
        huber_loss(taken, Var<float>(Tensor<float>({static_cast<int64_t>(y.size())}, y)));

    opt.zero_grads();
    backward(loss);
    opt.step();
    return loss.value()[0];
}

namespace detail {

inline double trailing_mean(const std::vector<double>& v, int64_t window) {
    const int64_t n = std::min<int64_t>(window, static_cast<int64_t>(v.size()));
    double s = 0.0;
    for (size_t i = v.size() - static_cast<size_t>(n); i < v.size(); ++i) s += v[i];
    return s / static_cast<double>(n);
}

}  // namespace detail

/// Greedy, dropout-off evaluation block. Environment seeds come from a
/// dedicated stream disjoint from training episode seeds; nothing here touches
/// the buffer or the optimizer.
template <typename Net>
double eval_block(Net& net, rl::EnvInterface& env, const TrainerConfig& cfg,
                  RngState& eval_seed_rng, Counters& counters) {
    double total = 0.0;
    rl::FrameStacker stacker;
    RngState unused(0);
    for (int64_t e = 0; e < cfg.eval_episodes; ++e) {
        rl::reset_env(env, stacker, eval_seed_rng.next_u64());
        Tensor<uint8_t> state = stacker.stacked();
        bool done = false;
        while (!done) {
            const int64_t a = select_action(net, state, 0.0, unused, unused, false);
            rl::StackedStep r = rl::step_env(env, stacker, a);
            state = r.state;
            total += r.reward;
            done = r.done;
            ++counters.eval_env_steps;
        }
        ++counters.eval_episodes;
    }
    ++counters.eval_blocks;
    return total / static_cast<double>(cfg.eval_episodes);
}

/// The full training loop: epsilon-greedy acting, replay, periodic gradient
/// steps and target syncs, an eval block every `eval_every` training episodes,
/// per-episode metric rows. Fully determined by (config, seed, env).
template <typename Net>
MetricsLog run_training(Net& online, Net& target, rl::EnvInterface& env, TrainerConfig cfg,
                        uint64_t seed, const std::string& checkpoint_dir = "") {
    resolve_batch_size(cfg, std::is_same_v<Net, nets::AttentiveQNet<float>>
                                ? ModelKind::kAttentive
                                : ModelKind::kBaseline);
    cfg.validate();
    if (online.cfg.n_actions != env.action_count())
        throw ConfigError("network has " + std::to_string(online.cfg.n_actions) +
                          " actions, environment expects " + std::to_string(env.action_count()));

    MetricsLog log;
    if (cfg.total_steps == 0) return log;

    RngState root(seed);
    RngState explore_rng = root.split(2);
    RngState dropout_rng = root.split(3);
    RngState sample_rng = root.split(4);
    RngState train_seed_rng = root.split(5);
    RngState eval_seed_rng = root.split(6);

    Adam<float> opt(online.parameters(), static_cast<float>(cfg.lr),
                    static_cast<float>(cfg.adam_eps));
    nets::sync_target(online, target);
    rl::ReplayBuffer buffer(cfg.buffer_size);
    rl::FrameStacker stacker;

    std::vector<double> train_returns, eval_means;
    double episode_return = 0.0, loss_sum = 0.0;
    int64_t episode_len = 0, loss_count = 0;

    using Clock = std::chrono::steady_clock;
    Clock::time_point window_start = Clock::now();

    rl::reset_env(env, stacker, train_seed_rng.next_u64());
    Tensor<uint8_t> state = stacker.stacked();

    bool stop = false;
    for (int64_t step = 1; step <= cfg.total_steps && !stop; ++step) {
        const double eps = epsilon_at(cfg.schedule(), step - 1);
        const std::array<rl::Frame, 4> prev_frames = stacker.frames();
        const int64_t action = select_action(online, state, eps, explore_rng, dropout_rng, true);
        rl::StackedStep sr = rl::step_env(env, stacker, action);
        ++log.counters.env_steps;

        float reward = static_cast<float>(sr.reward);
        if (cfg.reward_clip) reward = std::clamp(reward, -1.0f, 1.0f);
        buffer.push({prev_frames, action, reward, stacker.frames(), sr.done});
        state = sr.state;
        episode_return += sr.reward;
        ++episode_len;

        if (step >= cfg.learning_starts && step % cfg.train_freq == 0 &&
            buffer.size() >= cfg.batch_size) {
            const float loss = train_step(online, target, buffer, cfg, opt, sample_rng,
                                          dropout_rng);
            loss_sum += loss;
            ++loss_count;
            ++log.counters.updates;
            log.counters.update_steps.push_back(step);
            if (log.counters.first_update_step < 0) log.counters.first_update_step = step;
        }
        if (step % cfg.target_update_freq == 0) {
            nets::sync_target(online, target);
            ++log.counters.target_syncs;
            log.counters.sync_steps.push_back(step);
        }
        if (!checkpoint_dir.empty() && step % cfg.checkpoint_every == 0)
            save_checkpoint(checkpoint_dir + "/checkpoint_" + std::to_string(step) + ".bin",
                            online.parameters());
        if (step % 1000 == 0) {
            const Clock::time_point now = Clock::now();
            log.timings.emplace_back(step,
                                     std::chrono::duration<double>(now - window_start).count());
            window_start = now;
        }

        if (sr.done) {
            ++log.counters.episodes;
            train_returns.push_back(episode_return);
            log.rows.push_back({step, log.counters.episodes, "train", episode_return,
                                detail::trailing_mean(train_returns, cfg.smooth_window), eps,
                                loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0,
                                episode_len});
            episode_return = 0.0;
            loss_sum = 0.0;
            episode_len = 0;
            loss_count = 0;

            if (log.counters.episodes % cfg.eval_every == 0 && cfg.eval_episodes > 0) {
                const int64_t updates_before = log.counters.updates;
                const int64_t pushes_before = buffer.size();
                const double mean_ret = eval_block(online, env, cfg, eval_seed_rng, log.counters);
                log.counters.updates_during_eval += log.counters.updates - updates_before;
                log.counters.pushes_during_eval +=
                    std::max<int64_t>(0, buffer.size() - pushes_before);
                eval_means.push_back(mean_ret);
                const double smoothed = detail::trailing_mean(eval_means, cfg.smooth_window);
                log.rows.push_back({step, log.counters.episodes, "eval", mean_ret, smoothed, 0.0,
                                    0.0, 0});
                if (cfg.solve_stop > 0.0 && smoothed >= cfg.solve_stop) {
                    log.stopped_early = true;
                    stop = true;
                }
            }
            if (!stop && step < cfg.total_steps) {
                rl::reset_env(env, stacker, train_seed_rng.next_u64());
                state = stacker.stacked();
            }
        }
    }

    if (!checkpoint_dir.empty())
        save_checkpoint(checkpoint_dir + "/checkpoint_final.bin", online.parameters());
    return log;
}

/// Construct nets for `kind` and run the loop on a registered environment.
inline MetricsLog run(TrainerConfig cfg, const std::string& env_name, ModelKind kind,
                      uint64_t seed, const std::string& checkpoint_dir = "",
                      nets::QNetConfig net_cfg = {}) {
    resolve_batch_size(cfg, kind);
    std::unique_ptr<rl::EnvInterface> env = rl::make_env(env_name);
    net_cfg.n_actions = env->action_count();
    net_cfg.attn.dropout_rate = cfg.dropout_rate;

    RngState root(seed);
    RngState online_init = root.split(0);
    RngState target_init = root.split(1);
    if (kind == ModelKind::kBaseline) {
        nets::BaselineQNet<float> online(net_cfg, online_init), target(net_cfg, target_init);
        return run_training(online, target, *env, cfg, seed, checkpoint_dir);
    }
    nets::AttentiveQNet<float> online(net_cfg, online_init), target(net_cfg, target_init);
    return run_training(online, target, *env, cfg, seed, checkpoint_dir);
}

}  // namespace qattn::train
