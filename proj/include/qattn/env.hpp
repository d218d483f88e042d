#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "qattn/rng.hpp"
#include "qattn/tensor.hpp"

namespace qattn::rl {

/// One grayscale frame, bytes 0..255. Copies share storage (Tensor semantics),
/// which keeps stacked states and the replay buffer cheap.
using Frame = Tensor<uint8_t>;

struct StepResult {
    Frame frame;
    double reward = 0.0;
    bool done = false;
};

/// ALE-shaped environment surface: reset(seed) starts an episode and returns
/// the first raw frame; step() advances it. (seed, action sequence) fully
/// determines every frame, reward, and done flag.
class EnvInterface {
  public:
    virtual ~EnvInterface() = default;
    virtual std::string name() const = 0;
    virtual int64_t action_count() const = 0;
    virtual Frame reset(uint64_t seed) = 0;
    virtual StepResult step(int64_t action) = 0;
};

namespace detail {

/// Nearest-neighbor upscale of a logical grid to 84x84: out(y,x) = g(y*n/84, x*n/84).
inline Frame render_grid(const std::vector<uint8_t>& grid, int64_t n) {
    Frame out({84, 84});
    for (int64_t y = 0; y < 84; ++y) {
        const int64_t gy = y * n / 84;
        for (int64_t x = 0; x < 84; ++x) out[y * 84 + x] = grid[gy * n + x * n / 84];
    }
    return out;
}

inline void require_action(int64_t action, int64_t n, const std::string& env) {
    if (action < 0 || action >= n)
        throw InputError(env + ": action " + std::to_string(action) + " outside [0, " +
                         std::to_string(n) + ")");
}

inline void require_live(bool done, const std::string& env) {
    if (done) throw ProtocolError(env + ": step() after episode end; call reset() first");
}

}  // namespace detail

/// Catch: a pellet falls down a 10x10 grid; a paddle on the bottom row moves
/// left/stay/right. Catching it pays +1, missing pays -1, and the episode
/// ends when the pellet reaches the bottom row (9 steps).
class CatchEnv : public EnvInterface {
  public:
    static constexpr int64_t kGrid = 10;

    std::string name() const override { return "catch"; }
    int64_t action_count() const override { return 3; }  // left, stay, right

    Frame reset(uint64_t seed) override {
        rng_ = RngState(seed, 0x9e3779b9);
        pellet_row_ = 0;
        pellet_col_ = rng_.uniform_int(kGrid);
        paddle_col_ = kGrid / 2;
        done_ = false;
        return render();
    }

    StepResult step(int64_t action) override {
        detail::require_live(done_, name());
        detail::require_action(action, action_count(), name());
        paddle_col_ = std::clamp<int64_t>(paddle_col_ + (action - 1), 0, kGrid - 1);
        ++pellet_row_;
        double reward = 0.0;
        if (pellet_row_ == kGrid - 1) {
            done_ = true;
            reward = (pellet_col_ == paddle_col_) ? 1.0 : -1.0;
        }
        return {render(), reward, done_};
    }

    int64_t pellet_col() const { return pellet_col_; }
    int64_t paddle_col() const { return paddle_col_; }

  private:
    Frame render() const {
        std::vector<uint8_t> grid(kGrid * kGrid, 0);
        grid[pellet_row_ * kGrid + pellet_col_] = 255;
        grid[(kGrid - 1) * kGrid + paddle_col_] = 255;
        return detail::render_grid(grid, kGrid);
    }

    RngState rng_{0};
    int64_t pellet_row_ = 0, pellet_col_ = 0, paddle_col_ = 0;
    bool done_ = true;
};

/// Avoid: the agent walks a 10x10 grid toward a goal cell while two hazards
/// sweep horizontally. Reaching the goal pays +1, touching a hazard -1, and
/// the episode truncates after 200 steps.
class AvoidEnv : public EnvInterface {
  public:
    static constexpr int64_t kGrid = 10;
    static constexpr int64_t kStepLimit = 200;

    std::string name() const override { return "avoid"; }
    int64_t action_count() const override { return 4; }  // up, down, left, right

    Frame reset(uint64_t seed) override {
        rng_ = RngState(seed, 0x6b43a9b5);
        agent_row_ = kGrid - 1;
        agent_col_ = rng_.uniform_int(kGrid);
        goal_row_ = 0;
        goal_col_ = rng_.uniform_int(kGrid);
        hazard_col_[0] = rng_.uniform_int(kGrid);
        hazard_col_[1] = rng_.uniform_int(kGrid);
        hazard_dir_[0] = rng_.uniform_int(2) ? 1 : -1;
        hazard_dir_[1] = rng_.uniform_int(2) ? 1 : -1;
        steps_ = 0;
        done_ = false;
        return render();
    }

    StepResult step(int64_t action) override {
        detail::require_live(done_, name());
        detail::require_action(action, action_count(), name());
        static constexpr int64_t dr[4] = {-1, 1, 0, 0};
        static constexpr int64_t dc[4] = {0, 0, -1, 1};
        agent_row_ = std::clamp<int64_t>(agent_row_ + dr[action], 0, kGrid - 1);
        agent_col_ = std::clamp<int64_t>(agent_col_ + dc[action], 0, kGrid - 1);
        for (int i = 0; i < 2; ++i) {
            int64_t next = hazard_col_[i] + hazard_dir_[i];
            if (next < 0 || next >= kGrid) {
                hazard_dir_[i] = -hazard_dir_[i];
                next = hazard_col_[i] + hazard_dir_[i];
            }
            hazard_col_[i] = next;
        }
        ++steps_;
        double reward = 0.0;
        if (on_hazard()) {
            reward = -1.0;
            done_ = true;
        } else if (agent_row_ == goal_row_ && agent_col_ == goal_col_) {
            reward = 1.0;
            done_ = true;
        } else if (steps_ >= kStepLimit) {
            done_ = true;
        }
        return {render(), reward, done_};
    }

  private:
    bool on_hazard() const {
        for (int i = 0; i < 2; ++i)
            if (agent_row_ == hazard_rows_[i] && agent_col_ == hazard_col_[i]) return true;
        return false;
    }

    Frame render() const {
        std::vector<uint8_t> grid(kGrid * kGrid, 0);
        grid[goal_row_ * kGrid + goal_col_] = 170;
        for (int i = 0; i < 2; ++i) grid[hazard_rows_[i] * kGrid + hazard_col_[i]] = 85;
        grid[agent_row_ * kGrid + agent_col_] = 255;
        return detail::render_grid(grid, kGrid);
    }

    static constexpr int64_t hazard_rows_[2] = {3, 6};
    RngState rng_{0};
    int64_t agent_row_ = 0, agent_col_ = 0, goal_row_ = 0, goal_col_ = 0;
    int64_t hazard_col_[2] = {0, 0};
    int64_t hazard_dir_[2] = {1, 1};
    int64_t steps_ = 0;
    bool done_ = true;
};

using EnvFactory = std::function<std::unique_ptr<EnvInterface>()>;

inline std::map<std::string, EnvFactory>& env_registry() {
    static std::map<std::string, EnvFactory> reg = {
        {"catch", [] { return std::make_unique<CatchEnv>(); }},
        {"avoid", [] { return std::make_unique<AvoidEnv>(); }},
    };
    return reg;
}

inline std::unique_ptr<EnvInterface> make_env(const std::string& name) {
    auto& reg = env_registry();
    auto it = reg.find(name);
    if (it == reg.end()) {
        std::string known;
        for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
        throw ConfigError("unknown environment '" + name + "' (known: " + known + ")");
    }
    return it->second();
}

inline void register_env(const std::string& name, EnvFactory factory) {
    env_registry()[name] = std::move(factory);
}

}  // namespace qattn::rl
