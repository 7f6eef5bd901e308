#pragma once

// Conditional denoising-diffusion mechanics on plain tensors: forward
// noising (the closed-form reparametrization), noise-prediction training
// with classifier-free condition dropout, guided reverse steps, and full
// chain sampling. Tensor layout matches the denoiser: [F, C, H, W].

#include <functional>
#include <optional>
#include <vector>

#include "metalattice/adam.hpp"
#include "metalattice/denoiser3d.hpp"
#include "metalattice/netutil.hpp"
#include "metalattice/schedule.hpp"
#include "metalattice/tensor.hpp"
#include "metalattice/threadpool.hpp"

namespace metalattice::diff {

struct Condition {
    Tensor curve;     // conditioning vector (stresses normalized to [0,1])
    bool null_flag = false;

    static Condition null_condition() {
        Condition c;
        c.null_flag = true;
        return c;
    }
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 1 || t > s.T) throw std::invalid_argument("q_sample: t out of range");
    check_same_dims(x0, eps, "q_sample");
    const float a = static_cast<float>(std::sqrt(s.alpha_bar_at(t)));
    const float b = static_cast<float>(std::sqrt(1.0 - s.alpha_bar_at(t)));
    Tensor out = x0;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

// classifier-free guidance: (1 + w) eps_cond - w eps_uncond, evaluated as
// eps_cond + w (eps_cond - eps_uncond) so equal inputs pass through exactly
inline Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    if (w < 0.0) throw std::invalid_argument("cfg_eps: w must be >= 0");
    check_same_dims(eps_cond, eps_uncond, "cfg_eps");
    Tensor out = eps_cond;
    const float wf = static_cast<float>(w);
    for (std::size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = eps_cond.v[i] + wf * (eps_cond.v[i] - eps_uncond.v[i]);
    return out;
}

// eps-prediction through the denoiser without recording gradients
inline Tensor predict_eps(const nn::Denoiser3d& net, nn::ParamSet& params, const Tensor& x_t, int t,
                          const Tensor* cond) {
    nn::Tape tape;
    nn::ParamBinder binder{tape, params, /*trainable=*/false};
    nn::Var out = net.forward(tape, binder, tape.leaf(x_t), t, cond);
    return tape.val(out);
}

// posterior mean mu_theta = (x_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps) / sqrt(alpha_t)
inline Tensor posterior_mean(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
    const double at = s.alpha_at(t);
    const double ab = s.alpha_bar_at(t);
    const float c0 = static_cast<float>(1.0 / std::sqrt(at));
    const float c1 = static_cast<float>((1.0 - at) / std::sqrt(1.0 - ab));
    Tensor mu = x_t;
    for (std::size_t i = 0; i < mu.v.size(); ++i) mu.v[i] = c0 * (x_t.v[i] - c1 * eps_hat.v[i]);
    return mu;
}

// One guided reverse step: evaluate the denoiser on the conditional and
// null paths, combine with guidance weight w, then draw
// x_{t-1} ~ N(mu_theta, beta_tilde_t I); the t = 1 step is deterministic.
inline Tensor p_step(const nn::Denoiser3d& net, nn::ParamSet& params, const Tensor& x_t, int t,
                     const Condition& cond, double w, const NoiseSchedule& s, Rng& rng) {
    if (t < 1 || t > s.T) throw std::invalid_argument("p_step: t out of range");
    const Tensor* cvec = cond.null_flag ? nullptr : &cond.curve;
    const Tensor eps_c = predict_eps(net, params, x_t, t, cvec);
    const Tensor eps_u = predict_eps(net, params, x_t, t, nullptr);
    const Tensor eps = cfg_eps(eps_c, eps_u, w);
    Tensor x_prev = posterior_mean(x_t, eps, t, s);
    if (!x_prev.all_finite()) throw std::runtime_error("p_step: non-finite sample at t=" + std::to_string(t));
    if (t > 1) {
        const float sd = static_cast<float>(std::sqrt(s.beta_tilde_at(t)));
        for (auto& v : x_prev.v) v += sd * rng.normal_f();
    }
    return x_prev;
}

// Full reverse chain from pure noise; returns n samples of shape
// [frames, channels, h, w] in the normalized data space. Chains run in
// parallel across samples, each with its own deterministic child stream.
inline std::vector<Tensor> sample(const nn::Denoiser3d& net, nn::ParamSet& params,
                                  const Condition& cond, double w, const NoiseSchedule& s,
                                  std::uint64_t seed, int n, int h, int width, int workers = 1) {
    if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
    const auto& cfg = net.config();
    std::vector<Tensor> out(static_cast<std::size_t>(n));
    std::vector<std::string> errors(static_cast<std::size_t>(n));
    parallel_for(n, workers, [&](std::int64_t i) {
        try {
            Rng rng(child_seed(seed, "chain", static_cast<std::uint64_t>(i)));
            Tensor x({cfg.frames, cfg.in_channels, h, width});
            x.fill_normal(rng);
            for (int t = s.T; t >= 1; --t) x = p_step(net, params, x, t, cond, w, s, rng);
            out[static_cast<std::size_t>(i)] = std::move(x);
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    });
    for (const auto& e : errors)
        if (!e.empty()) throw std::runtime_error("sample: " + e);
    return out;
}

enum class LossKind { mse, l1 };

struct TrainStepResult {
    double loss = 0.0;
    bool applied = false;
    int null_conditions = 0; // dropout instrumentation
};

// One optimizer step over a batch: per sample draw t and eps, form x_t,
// drop the condition with probability p_uncond, regress the injected noise.
// Per-sample passes run in parallel with independent child streams;
// gradients are reduced in sample order so results do not depend on
// scheduling. Non-finite losses reject the step.
inline TrainStepResult train_step(const nn::Denoiser3d& net, nn::ParamSet& params,
                                  const std::vector<std::pair<const Tensor*, Condition>>& batch,
                                  const NoiseSchedule& s, double p_uncond, std::uint64_t step_seed,
                                  const nn::AdamConfig& adam = {}, LossKind loss_kind = LossKind::mse,
                                  int workers = 1) {
    if (p_uncond < 0.0 || p_uncond >= 1.0) throw std::invalid_argument("train_step: p_uncond in [0,1)");
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

    struct PerSample {
        std::map<std::string, Tensor> grads;
        double loss = 0.0;
        bool finite = true;
        int used_null = 0;
    };
    std::vector<PerSample> results(batch.size());

    parallel_for(static_cast<std::int64_t>(batch.size()), workers, [&](std::int64_t i) {
        PerSample& r = results[static_cast<std::size_t>(i)];
        Rng rng(child_seed(step_seed, "sample", static_cast<std::uint64_t>(i)));
        const Tensor& x0 = *batch[static_cast<std::size_t>(i)].first;
        const Condition& cond = batch[static_cast<std::size_t>(i)].second;
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(s.T)));
        Tensor eps(x0.dims);
        eps.fill_normal(rng);
        const Tensor x_t = q_sample(x0, t, eps, s);
        const bool drop = cond.null_flag || rng.uniform() < p_uncond;
        r.used_null = drop ? 1 : 0;

        nn::Tape tape;
        nn::ParamBinder binder{tape, params, /*trainable=*/true};
        nn::Var pred = net.forward(tape, binder, tape.leaf(x_t), t, drop ? nullptr : &cond.curve);
        nn::Var loss = loss_kind == LossKind::mse ? nn::mse_loss(tape, pred, tape.leaf(eps))
                                                  : nn::l1_loss(tape, pred, tape.leaf(eps));
        r.loss = tape.val(loss).v[0];
        if (!std::isfinite(r.loss)) {
            r.finite = false;
            return;
        }
        tape.backward(loss);
        for (auto& [name, g] : binder.grads()) r.grads.emplace(name, *g);
    });

    TrainStepResult out;
    double total = 0.0;
    for (const auto& r : results) {
        if (!r.finite) {
            out.loss = std::numeric_limits<double>::quiet_NaN();
            out.applied = false;
            return out;
        }
        total += r.loss;
        out.null_conditions += r.used_null;
    }
    out.loss = total / static_cast<double>(batch.size());

    // fixed-order reduction, scaled by batch size
    std::map<std::string, Tensor> summed;
    const float inv = 1.0f / static_cast<float>(batch.size());
    for (const auto& r : results)
        for (const auto& [name, g] : r.grads) {
            auto it = summed.find(name);
            if (it == summed.end()) {
                Tensor t = g;
                for (auto& v : t.v) v *= inv;
                summed.emplace(name, std::move(t));
            } else {
                for (std::size_t k = 0; k < g.v.size(); ++k) it->second.v[k] += inv * g.v[k];
            }
        }
    std::map<std::string, const Tensor*> gptrs;
    for (const auto& [name, g] : summed) gptrs.emplace(name, &g);
    nn::adam_step(params, gptrs, adam);
    out.applied = true;
    return out;
}

} // namespace metalattice::diff
