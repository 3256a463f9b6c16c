#pragma once

// Spiking-neuron dynamics, the integer fire function with its rectangular
// surrogate, the canonical integer-to-spike-train expansion and its IF-SR
// realization, and the closed-form approximation/gradient error curves.

#include <cstdint>
#include <vector>

#include "sfa/tensor.hpp"

namespace sfa {

enum class ResetMode { none, hard, soft };

struct NeuronConfig {
    double beta = 1.0;       // decay; 1 selects IF, otherwise LIF
    double v_th = 1.0;       // firing threshold (> 0)
    double v_reset = 0.0;    // hard-reset target
    ResetMode reset_mode = ResetMode::soft;
    int d_cap = 4;           // maximum integer activation D
    int t_steps = 1;         // macro timesteps T

    void validate() const {
        if (!(beta > 0.0 && beta <= 1.0)) throw ParameterError("NeuronConfig: beta must be in (0,1]");
        if (!(v_th > 0.0)) throw ParameterError("NeuronConfig: v_th must be > 0");
        if (d_cap < 1) throw ParameterError("NeuronConfig: d_cap must be >= 1");
        if (t_steps < 1) throw ParameterError("NeuronConfig: t_steps must be >= 1");
    }
    bool is_if() const { return beta == 1.0; }
};

// ---------------------------------------------------------------------------
// Scalar primitives
// ---------------------------------------------------------------------------

// Integer fire: round-half-up of the input clipped to [0, D]. Half-up (via
// floor(u + 0.5)) rather than banker's rounding so the +0.5 bias-folding
// identity with the floor function holds exactly.
template <class T>
inline T fire_d_scalar(T u, int d_cap) {
    T c = u;
    if (c < T(0)) c = T(0);
    const T cap = static_cast<T>(d_cap);
    if (c > cap) c = cap;
    return std::floor(c + T(0.5));
}

// Canonical front-loaded expansion of an integer n in [0, D]: ones at steps
// 1..n, zeros after.
inline std::vector<std::uint8_t> expand_scalar(int n, int d_cap) {
    if (n < 0 || n > d_cap)
        throw ParameterError("expand_to_spikes: value " + std::to_string(n) + " outside [0," +
                             std::to_string(d_cap) + "]");
    std::vector<std::uint8_t> out(static_cast<std::size_t>(d_cap), 0);
    for (int d = 0; d < n; ++d) out[static_cast<std::size_t>(d)] = 1;
    return out;
}

// IF-SR with unit threshold driven by u + 0.5 injected at the first step and
// zero input afterwards; subtracts 1 per spike. The emitted train equals the
// canonical expansion of fire_d(u).
template <class T>
inline std::vector<std::uint8_t> if_sr_emit_scalar(T u, int d_cap) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(d_cap), 0);
    T membrane = u + T(0.5);
    for (int d = 0; d < d_cap; ++d) {
        if (membrane >= T(1)) {  // Heaviside fires at exact threshold
            out[static_cast<std::size_t>(d)] = 1;
            membrane -= T(1);
        }
    }
    return out;
}

// Forward approximation error of the rate approximation (1/D)*fire_d against
// ReLU. Piecewise: 0 below zero, u - round(u)/D in range, u - 1 at or above D.
template <class T>
inline T forward_error_scalar(T u, int d_cap) {
    const T r = u > T(0) ? u : T(0);
    return r - fire_d_scalar(u, d_cap) / static_cast<T>(d_cap);
}

// Gradient error of the rectangular surrogate. Piecewise: 0 below zero,
// u - round(u)/D in range, 1 at or above D.
template <class T>
inline T backward_error_scalar(T u, int d_cap) {
    if (u < T(0)) return T(0);
    const T cap = static_cast<T>(d_cap);
    if (u >= cap) return T(1);
    return u - std::floor(u + T(0.5)) / cap;
}

// In-range quantization error of the firing-rate approximation itself:
// |u/D - fire_d(u)/D|, bounded by 1/(2D) with the maximum near half-integer
// membrane values.
template <class T>
inline T rate_error_scalar(T u, int d_cap) {
    const T cap = static_cast<T>(d_cap);
    return u / cap - fire_d_scalar(u, d_cap) / cap;
}

// ---------------------------------------------------------------------------
// Tensor-level operations
// ---------------------------------------------------------------------------

// fire_d over a tensor, attaching the rectangular surrogate on [0, D]
// (closed interval, so the gradient stays alive at both saturation edges).
template <class T>
TensorT<T> fire_d(const TensorT<T>& u, int d_cap) {
    if (d_cap < 1) throw ParameterError("fire_d: d_cap must be >= 1");
    return custom_grad(
        u, [d_cap](T v) { return fire_d_scalar(v, d_cap); },
        SurrogateSpec(0.0, static_cast<double>(d_cap)));
}

template <class T>
std::vector<std::uint8_t> expand_to_spikes(const TensorT<T>& s_int, int d_cap) {
    // Layout: [D, numel] row-major, step-major.
    const std::int64_t n = s_int.numel();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(d_cap) * static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T v = s_int.data()[static_cast<std::size_t>(i)];
        const int k = static_cast<int>(v);
        if (static_cast<T>(k) != v || k < 0 || k > d_cap)
            throw ParameterError("expand_to_spikes: non-integer or out-of-range value");
        for (int d = 0; d < k; ++d)
            out[static_cast<std::size_t>(d) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)] = 1;
    }
    return out;
}

template <class T>
std::vector<std::uint8_t> if_sr_emit(const TensorT<T>& u, int d_cap) {
    const std::int64_t n = u.numel();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(d_cap) * static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        auto train = if_sr_emit_scalar(u.data()[static_cast<std::size_t>(i)], d_cap);
        for (int d = 0; d < d_cap; ++d)
            out[static_cast<std::size_t>(d) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)] =
                train[static_cast<std::size_t>(d)];
    }
    return out;
}

template <class T>
TensorT<T> forward_error(const TensorT<T>& u, int d_cap) {
    TensorT<T> out(u.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i)
        out.data()[static_cast<std::size_t>(i)] =
            forward_error_scalar(u.data()[static_cast<std::size_t>(i)], d_cap);
    return out;
}

template <class T>
TensorT<T> backward_error(const TensorT<T>& u, int d_cap) {
    TensorT<T> out(u.shape());
    for (std::int64_t i = 0; i < u.numel(); ++i)
        out.data()[static_cast<std::size_t>(i)] =
            backward_error_scalar(u.data()[static_cast<std::size_t>(i)], d_cap);
    return out;
}

// ---------------------------------------------------------------------------
// Binary multi-step dynamics
// ---------------------------------------------------------------------------

template <class T>
struct StepResult {
    TensorT<T> u;  // membrane after charging, before firing
    TensorT<T> s;  // binary spikes
    TensorT<T> h;  // membrane after reset
};

// One binary timestep: charge, fire (Heaviside at threshold, >= convention),
// reset per mode. Non-differentiable; used by simulators and tests.
template <class T>
StepResult<T> step_dynamics(const NeuronConfig& cfg, const TensorT<T>& h_prev,
                            const TensorT<T>& x_t) {
    if (h_prev.shape() != x_t.shape())
        throw DimensionError("step_dynamics: membrane/input shape mismatch");
    StepResult<T> r{TensorT<T>(x_t.shape()), TensorT<T>(x_t.shape()), TensorT<T>(x_t.shape())};
    const T beta = static_cast<T>(cfg.beta);
    const T vth = static_cast<T>(cfg.v_th);
    const T vres = static_cast<T>(cfg.v_reset);
    for (std::int64_t i = 0; i < x_t.numel(); ++i) {
        const std::size_t k = static_cast<std::size_t>(i);
        const T u = beta * h_prev.data()[k] + x_t.data()[k];
        const T s = u >= vth ? T(1) : T(0);
        T h;
        switch (cfg.reset_mode) {
            case ResetMode::none: h = u; break;
            case ResetMode::hard: h = u * (T(1) - s) + vres * s; break;
            case ResetMode::soft: h = u - vth * s; break;
            default: h = u; break;
        }
        r.u.data()[k] = u;
        r.s.data()[k] = s;
        r.h.data()[k] = h;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Hybrid reset schedule over the expanded T x D timeline
// ---------------------------------------------------------------------------

// Inside a window the unit-threshold IF-SR expansion applies; at window
// boundaries the configured macro dynamics carries membrane state over.
struct ScheduleSlot {
    int window = 0;       // 1-based macro step t
    int micro = 0;        // 1-based micro step d within the window
    bool window_boundary = false;  // last micro step: macro reset/decay applies after it
};

inline ScheduleSlot hybrid_reset_schedule(const NeuronConfig& cfg, int t_global) {
    const int total = cfg.t_steps * cfg.d_cap;
    if (t_global < 1 || t_global > total)
        throw ParameterError("hybrid_reset_schedule: t_global outside [1, T*D]");
    ScheduleSlot s;
    s.window = (t_global - 1) / cfg.d_cap + 1;
    s.micro = (t_global - 1) % cfg.d_cap + 1;
    s.window_boundary = (s.micro == cfg.d_cap);
    return s;
}

// Membrane carried across one window boundary given that window's integer
// emission. Soft reset subtracts v_th per fired unit (the IF-SR residual);
// hard reset clears to v_reset once anything fired; none keeps u.
template <class T>
inline T window_boundary_carry(const NeuronConfig& cfg, T u, T s_int) {
    switch (cfg.reset_mode) {
        case ResetMode::none: return u;
        case ResetMode::hard: return s_int > T(0) ? static_cast<T>(cfg.v_reset) : u;
        case ResetMode::soft: return u - static_cast<T>(cfg.v_th) * s_int;
    }
    return u;
}

// ---------------------------------------------------------------------------
// Spike records
// ---------------------------------------------------------------------------

// Binary spike history of one neuron layer over the expanded timeline.
// Canonical SFA trains are front-loaded inside each window: within a window a
// zero is never followed by a one.
struct SpikeRecord {
    std::string layer_id;
    Shape feature_shape;                 // per-step feature extents
    int steps = 0;                       // T * D
    int d_cap = 1;
    std::vector<std::uint8_t> spikes;    // [steps, numel(feature_shape)]

    std::int64_t neurons() const { return shape_numel(feature_shape); }

    std::uint8_t at(int step, std::int64_t i) const {
        return spikes[static_cast<std::size_t>(step) * static_cast<std::size_t>(neurons()) +
                      static_cast<std::size_t>(i)];
    }

    std::int64_t count_at_step(int step) const {
        const std::int64_t n = neurons();
        std::int64_t c = 0;
        for (std::int64_t i = 0; i < n; ++i) c += at(step, i);
        return c;
    }

    std::int64_t total_spikes() const {
        std::int64_t c = 0;
        for (auto v : spikes) c += v;
        return c;
    }

    // Front-loading inside every window: no 0 -> 1 transition.
    bool is_front_loaded() const {
        const std::int64_t n = neurons();
        const int windows = steps / d_cap;
        for (int w = 0; w < windows; ++w)
            for (std::int64_t i = 0; i < n; ++i)
                for (int d = 1; d < d_cap; ++d)
                    if (!at(w * d_cap + d - 1, i) && at(w * d_cap + d, i)) return false;
        return true;
    }

    // Mean firing rate per spatial position (averaged over channels and
    // steps) for a [C,H,W] feature shape.
    std::vector<double> firing_rate_map() const {
        if (feature_shape.size() != 3) return {};
        const int C = feature_shape[0], H = feature_shape[1], W = feature_shape[2];
        std::vector<double> map(static_cast<std::size_t>(H) * W, 0.0);
        for (int s = 0; s < steps; ++s)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H * W; ++i)
                    map[static_cast<std::size_t>(i)] +=
                        at(s, static_cast<std::int64_t>(c) * H * W + i);
        const double denom = static_cast<double>(steps) * C;
        for (auto& v : map) v /= denom;
        return map;
    }
};

}  // namespace sfa
