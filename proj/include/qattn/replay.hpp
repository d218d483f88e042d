#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "qattn/env.hpp"
#include "qattn/rng.hpp"
#include "qattn/tensor.hpp"

namespace qattn::rl {

/// Grayscale + resize to the 84x84 network input. Accepts [H x W] grayscale
/// or [H x W x 3] RGB; luminance is round(0.299R + 0.587G + 0.114B), resize
/// is nearest-neighbor (src_y = y*H/84, src_x = x*W/84, integer floor).
/// An already-84x84 grayscale frame passes through unchanged.
inline Frame preprocess(const Frame& raw) {
    if (raw.numel() == 0) throw InputError("preprocess: empty frame");
    const bool rgb = raw.ndim() == 3 && raw.dim(2) == 3;
    if (!rgb && raw.ndim() != 2)
        throw InputError("preprocess: expected [H x W] or [H x W x 3], got " +
                         shape_str(raw.shape()));
    const int64_t h = raw.dim(0), w = raw.dim(1);

    auto gray_at = [&](int64_t y, int64_t x) -> uint8_t {
        if (!rgb) return raw[y * w + x];
        const uint8_t* px = raw.data() + (y * w + x) * 3;
        const double lum = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        return static_cast<uint8_t>(std::lround(std::min(lum, 255.0)));
    };

    if (!rgb && h == 84 && w == 84) return raw;
    Frame out({84, 84});
    for (int64_t y = 0; y < 84; ++y) {
        const int64_t sy = y * h / 84;
        for (int64_t x = 0; x < 84; ++x) out[y * 84 + x] = gray_at(sy, x * w / 84);
    }
    return out;
}

/// Sliding window over the last four preprocessed frames, oldest first.
/// On reset the window is filled with the first frame repeated.
class FrameStacker {
  public:
    static constexpr int64_t kDepth = 4;

    void reset(const Frame& first) {
        for (auto& f : frames_) f = first;
    }

    void push(const Frame& f) {
        for (int64_t i = 0; i + 1 < kDepth; ++i) frames_[i] = frames_[i + 1];
        frames_[kDepth - 1] = f;
    }

    const std::array<Frame, kDepth>& frames() const { return frames_; }

    /// Materialize the stack as one [4 x 84 x 84] byte tensor.
    Tensor<uint8_t> stacked() const {
        Tensor<uint8_t> out({kDepth, 84, 84});
        for (int64_t i = 0; i < kDepth; ++i) {
            check(frames_[i].numel() == 84 * 84, "frame stacker holds a non-84x84 frame");
            std::copy(frames_[i].data(), frames_[i].data() + 84 * 84, out.data() + i * 84 * 84);
        }
        return out;
    }

  private:
    std::array<Frame, kDepth> frames_;
};

/// One step of experience. Frames are stored as raw bytes and shared between
/// consecutive transitions (Tensor copies alias), so a full buffer costs one
/// unique frame per environment step, not eight.
struct Transition {
    std::array<Frame, FrameStacker::kDepth> state;
    int64_t action = 0;
    float reward = 0.0f;
    std::array<Frame, FrameStacker::kDepth> next_state;
    bool done = false;
};

/// Ring buffer of transitions with uniform with-replacement sampling.
class ReplayBuffer {
  public:
    explicit ReplayBuffer(int64_t capacity) : capacity_(capacity) {
        if (capacity <= 0) throw ConfigError("replay capacity must be positive");
        store_.reserve(static_cast<size_t>(capacity));
    }

    int64_t capacity() const { return capacity_; }
    int64_t size() const { return static_cast<int64_t>(store_.size()); }

    void push(Transition t) {
        if (size() < capacity_) {
            store_.push_back(std::move(t));
        } else {
            store_[static_cast<size_t>(next_)] = std::move(t);
        }
        next_ = (next_ + 1) % capacity_;
    }

    /// i-th oldest transition, i in [0, size).
    const Transition& at(int64_t i) const {
        if (i < 0 || i >= size()) throw InputError("replay index out of range");
        const int64_t oldest = (size() < capacity_) ? 0 : next_;
        return store_[static_cast<size_t>((oldest + i) % capacity_)];
    }

    /// Uniform sample with replacement; deterministic under the caller's rng.
    std::vector<const Transition*> sample(int64_t batch, RngState& rng) const {
        if (batch <= 0) throw ConfigError("batch size must be positive");
        if (size() < batch)
            throw NotReadyError("replay holds " + std::to_string(size()) + " < batch " +
                                std::to_string(batch));
        std::vector<const Transition*> out;
        out.reserve(static_cast<size_t>(batch));
        for (int64_t i = 0; i < batch; ++i)
            out.push_back(&store_[static_cast<size_t>(pick(rng))]);
        return out;
    }

  private:
    int64_t pick(RngState& rng) const { return rng.uniform_int(size()); }

    int64_t capacity_;
    int64_t next_ = 0;
    std::vector<Transition> store_;
};

struct StackedStep {
    Tensor<uint8_t> state;  // [4 x 84 x 84], oldest frame first
    double reward = 0.0;
    bool done = false;
};

/// Advance the environment one step and return the refreshed 4-frame state.
inline StackedStep step_env(EnvInterface& env, FrameStacker& stacker, int64_t action) {
    StepResult r = env.step(action);
    stacker.push(preprocess(r.frame));
    return {stacker.stacked(), r.reward, r.done};
}

/// Start an episode: reset the environment and fill the stacker.
inline Frame reset_env(EnvInterface& env, FrameStacker& stacker, uint64_t seed) {
    Frame f = preprocess(env.reset(seed));
    stacker.reset(f);
    return f;
}

}  // namespace qattn::rl
