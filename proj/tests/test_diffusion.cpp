#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "metalattice/diffusion.hpp"

using namespace metalattice;
using namespace metalattice::diff;

TEST_CASE("make_schedule: linear arrays and validation") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 2, 0.1, 0.2);
    REQUIRE(s.beta_at(1) == Catch::Approx(0.1).epsilon(1e-15));
    REQUIRE(s.beta_at(2) == Catch::Approx(0.2).epsilon(1e-15));
    REQUIRE(s.alpha_bar_at(1) == Catch::Approx(0.9).epsilon(1e-15));
    REQUIRE(s.alpha_bar_at(2) == Catch::Approx(0.72).epsilon(1e-15));
    REQUIRE(s.beta_tilde_at(1) == Catch::Approx(0.1).epsilon(1e-15));

    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 1, 0.1, 0.2));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.0, 0.2));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.3, 0.2));
    REQUIRE_THROWS(make_schedule(ScheduleKind::linear, 10, 0.1, 1.0));
}

TEST_CASE("schedules: monotone alpha_bar, positive beta_tilde, exact identity") {
    for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        const NoiseSchedule s = make_schedule(kind, 1000, 1e-4, 0.02);
        for (int t = 1; t <= s.T; ++t) {
            REQUIRE(s.beta_at(t) > 0.0);
            REQUIRE(s.beta_at(t) < 1.0);
            REQUIRE(s.beta_tilde_at(t) >= 0.0);
            if (t > 1) {
                REQUIRE(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
                // beta_tilde * (1 - ab_t) == (1 - ab_{t-1}) * beta_t
                const double lhs = s.beta_tilde_at(t) * (1.0 - s.alpha_bar_at(t));
                const double rhs = (1.0 - s.alpha_bar_at(t - 1)) * s.beta_at(t);
                REQUIRE(lhs == Catch::Approx(rhs).margin(1e-12));
            }
        }
        REQUIRE(s.alpha_bar_at(s.T) < s.alpha_bar_at(1));
    }
}

TEST_CASE("cosine schedule matches the direct formula evaluation") {
    const NoiseSchedule s = make_schedule(ScheduleKind::cosine, 1000);
    REQUIRE(s.alpha_bar_at(1) > 0.999);
    REQUIRE(s.alpha_bar_at(1000) < 1e-3);
    // direct oracle: alpha_bar via the cosine profile with the same
    // beta-ratio clipping the schedule definition uses
    const double off = 0.008;
    auto f = [&](double u) {
        const double c = std::cos((u + off) / (1.0 + off) * 1.5707963267948966);
        return c * c;
    };
    std::vector<double> oracle_ab(1000);
    {
        double prev = 1.0, prod = 1.0;
        for (int t = 1; t <= 1000; ++t) {
            const double ab = f(static_cast<double>(t) / 1000.0) / f(0.0);
            double beta = 1.0 - ab / prev;
            beta = std::min(std::max(beta, 1e-8), 0.999);
            prod *= 1.0 - beta;
            prev *= 1.0 - beta;
            oracle_ab[static_cast<std::size_t>(t - 1)] = prod;
        }
    }
    for (int t : {1, 10, 100, 500, 900, 1000})
        REQUIRE(s.alpha_bar_at(t) == Catch::Approx(oracle_ab[static_cast<std::size_t>(t - 1)]).epsilon(1e-12));
    // away from the clipped tail the pure formula itself matches
    for (int t : {1, 10, 100, 500, 900})
        REQUIRE(s.alpha_bar_at(t) == Catch::Approx(f(t / 1000.0) / f(0.0)).epsilon(1e-9));
}

TEST_CASE("q_sample: zero-noise and zero-signal branches") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 100, 1e-4, 0.02);
    Rng rng(6);
    Tensor x0({2, 1, 3, 3});
    x0.fill_uniform(rng, -1.0f, 1.0f);
    Tensor zero(x0.dims);
    const int t = 40;
    const Tensor a = q_sample(x0, t, zero, s);
    const float sa = static_cast<float>(std::sqrt(s.alpha_bar_at(t)));
    for (std::size_t i = 0; i < a.v.size(); ++i) REQUIRE(a.v[i] == Catch::Approx(sa * x0.v[i]).margin(1e-7));

    Tensor eps(x0.dims);
    eps.fill_normal(rng);
    const Tensor b = q_sample(zero, t, eps, s);
    const float sb = static_cast<float>(std::sqrt(1.0 - s.alpha_bar_at(t)));
    for (std::size_t i = 0; i < b.v.size(); ++i) REQUIRE(b.v[i] == Catch::Approx(sb * eps.v[i]).margin(1e-7));

    REQUIRE_THROWS(q_sample(x0, 0, eps, s));
    REQUIRE_THROWS(q_sample(x0, 101, eps, s));
}

TEST_CASE("q_sample Monte-Carlo moments match the closed form", "[property]") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 50, 1e-4, 0.02);
    const int t = 20;
    const double x0v = 0.7;
    Tensor x0({1, 1, 1, 1}, static_cast<float>(x0v));
    Rng rng(1234);
    const int n = 100000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor eps({1, 1, 1, 1}, rng.normal_f());
        const double v = q_sample(x0, t, eps, s).v[0];
        sum += v;
        sum2 += v * v;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    const double expect_mean = std::sqrt(s.alpha_bar_at(t)) * x0v;
    const double expect_var = 1.0 - s.alpha_bar_at(t);
    const double se_mean = std::sqrt(expect_var / n);
    const double se_var = expect_var * std::sqrt(2.0 / (n - 1));
    REQUIRE(std::abs(mean - expect_mean) <= 3.0 * se_mean);
    REQUIRE(std::abs(var - expect_var) <= 3.0 * se_var);
}

TEST_CASE("cfg_eps: boundary cases and exact identity on equal inputs") {
    Rng rng(8);
    Tensor a({1, 1, 2, 2}), b({1, 1, 2, 2});
    a.fill_uniform(rng, -1.0f, 1.0f);
    b.fill_uniform(rng, -1.0f, 1.0f);
    const Tensor w0 = cfg_eps(a, b, 0.0);
    REQUIRE(w0.v == a.v);

    for (double w : {0.0, 0.3, 1.0, 2.7}) {
        const Tensor same = cfg_eps(a, a, w);
        REQUIRE(same.v == a.v); // literal tensor equality
    }

    Tensor one({1}, 1.0f), zero({1}, 0.0f);
    REQUIRE(cfg_eps(one, zero, 1.0).v[0] == 2.0f);
    REQUIRE_THROWS(cfg_eps(a, b, -0.1));
}

namespace {

nn::Denoiser3d tiny_net(int frames = 2, int cond_dim = 1) {
    nn::DenoiserConfig cfg;
    cfg.in_channels = 1;
    cfg.frames = frames;
    cfg.widths = {8, 12};
    cfg.heads = 2;
    cfg.emb_dim = 16;
    cfg.cond_dim = cond_dim;
    cfg.attn_levels = 1;
    return nn::Denoiser3d(cfg);
}

} // namespace

TEST_CASE("p_step: terminal step is deterministic; Eq.(3)/Eq.(6) consistency") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 30, 1e-4, 0.02);
    Rng rng(7);

    // with the true eps, mu_theta reproduces the posterior mean written in
    // terms of (x_t, x0)
    for (int trial = 0; trial < 100; ++trial) {
        const int t = 2 + static_cast<int>(rng.below(28));
        Tensor x0({1, 1, 2, 2}), eps({1, 1, 2, 2});
        x0.fill_uniform(rng, -1.0f, 1.0f);
        eps.fill_normal(rng);
        const Tensor x_t = q_sample(x0, t, eps, s);
        const Tensor mu = posterior_mean(x_t, eps, t, s);
        const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
        const double at = s.alpha_at(t), bt = s.beta_at(t);
        const double c0 = std::sqrt(ab_prev) * bt / (1.0 - ab);
        const double c1 = std::sqrt(at) * (1.0 - ab_prev) / (1.0 - ab);
        for (std::size_t i = 0; i < mu.v.size(); ++i) {
            const double mu_tilde = c0 * x0.v[i] + c1 * x_t.v[i];
            REQUIRE(mu.v[i] == Catch::Approx(mu_tilde).margin(1e-5));
        }
    }

    // t = 1: p_step output equals the posterior mean exactly (no noise draw)
    auto net = tiny_net();
    nn::ParamSet ps;
    Rng init(3);
    net.init(ps, init);
    Tensor x1({2, 1, 8, 8});
    x1.fill_normal(rng);
    Condition cond = Condition::null_condition();
    Rng chain1(42), chain2(42);
    const Tensor out = p_step(net, ps, x1, 1, cond, 0.5, s, chain1);
    const Tensor eps_u = predict_eps(net, ps, x1, 1, nullptr);
    const Tensor mu = posterior_mean(x1, eps_u, 1, s);
    REQUIRE(out.v == mu.v);
}

TEST_CASE("p_step: w=0 with null condition matches the unconditional chain stream") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 10, 1e-4, 0.02);
    auto net = tiny_net();
    nn::ParamSet ps;
    Rng init(5);
    net.init(ps, init);
    Rng r1(77), r2(77);
    Tensor x({2, 1, 8, 8});
    x.fill_normal(r1);
    Tensor x_same({2, 1, 8, 8});
    x_same.fill_normal(r2);
    REQUIRE(x.v == x_same.v);
    const Tensor a = p_step(net, ps, x, 5, Condition::null_condition(), 0.0, s, r1);
    // unconditional reference: same math via predict_eps + posterior + same rng
    const Tensor eps_u = predict_eps(net, ps, x_same, 5, nullptr);
    Tensor mu = posterior_mean(x_same, eps_u, 5, s);
    const float sd = static_cast<float>(std::sqrt(s.beta_tilde_at(5)));
    for (auto& v : mu.v) v += sd * r2.normal_f();
    REQUIRE(a.v == mu.v);
}

TEST_CASE("sample: deterministic and shape-correct") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 8, 1e-4, 0.02);
    auto net = tiny_net();
    nn::ParamSet ps;
    Rng init(5);
    net.init(ps, init);
    Condition c;
    c.curve = Tensor({1}, 0.5f);
    const auto a = sample(net, ps, c, 1.0, s, 99, 3, 8, 8, 2);
    const auto b = sample(net, ps, c, 1.0, s, 99, 3, 8, 8, 1);
    REQUIRE(a.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(a[i].dims == std::vector<int>({2, 1, 8, 8}));
        REQUIRE(a[i].v == b[i].v); // worker count does not change results
    }
}

TEST_CASE("train_step: fresh net predicts zero so loss is E|eps|^2; dropout boundary") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 16, 1e-4, 0.02);
    auto net = tiny_net();
    nn::ParamSet ps;
    Rng init(11);
    net.init(ps, init);

    // zero-initialized head gives identically-zero prediction; over many
    // draws the MSE approaches E|eps|^2 = 1
    Rng rng(13);
    Tensor x0({2, 1, 8, 8});
    x0.fill_uniform(rng, -1.0f, 1.0f);
    double mean_loss = 0.0;
    const int reps = 30;
    nn::AdamConfig frozen;
    frozen.lr = 1e-12;
    for (int r = 0; r < reps; ++r) {
        Condition c;
        c.curve = Tensor({1}, 0.2f);
        std::vector<std::pair<const Tensor*, Condition>> batch = {{&x0, c}};
        const auto out = train_step(net, ps, batch, s, 0.1, child_seed(55, "step", static_cast<std::uint64_t>(r)), frozen);
        REQUIRE(out.applied);
        mean_loss += out.loss;
    }
    mean_loss /= reps;
    REQUIRE(mean_loss == Catch::Approx(1.0).epsilon(0.15));

    // p_uncond = 0.999...: null path on every step (probability bound);
    // instrumented counter proves the unconditional branch runs
    int nulls = 0;
    for (int r = 0; r < 10; ++r) {
        Condition c;
        c.curve = Tensor({1}, 0.2f);
        std::vector<std::pair<const Tensor*, Condition>> batch = {{&x0, c}};
        const auto out = train_step(net, ps, batch, s, 0.999, child_seed(56, "step", static_cast<std::uint64_t>(r)), frozen);
        nulls += out.null_conditions;
    }
    REQUIRE(nulls == 10);
}

TEST_CASE("training smoke: loss halves within 500 steps on a frozen tiny dataset", "[slow]") {
    const NoiseSchedule s = make_schedule(ScheduleKind::linear, 16, 1e-4, 0.02);
    auto net = tiny_net();
    nn::ParamSet ps;
    Rng init(21);
    net.init(ps, init);

    // two fixed modes
    Tensor xa({2, 1, 8, 8}), xb({2, 1, 8, 8});
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j)
            for (int f = 0; f < 2; ++f) {
                xa.at({f, 0, i, j}) = (i < 4) ? 0.8f : -0.8f;
                xb.at({f, 0, i, j}) = (j < 4) ? -0.6f : 0.6f;
            }
    Condition ca, cb;
    ca.curve = Tensor({1}, 0.9f);
    cb.curve = Tensor({1}, 0.1f);

    nn::AdamConfig adam;
    adam.lr = 2e-3;
    double first = 0.0, last = 0.0;
    const int steps = 500;
    for (int step = 0; step < steps; ++step) {
        std::vector<std::pair<const Tensor*, Condition>> batch = {{&xa, ca}, {&xb, cb}};
        const auto out = train_step(net, ps, batch, s, 0.1, child_seed(7, "smoke", static_cast<std::uint64_t>(step)), adam,
                                    LossKind::mse, 2);
        REQUIRE(out.applied);
        if (step < 25) first += out.loss / 25.0;
        if (step >= steps - 25) last += out.loss / 25.0;
    }
    INFO("first-25 mean " << first << " last-25 mean " << last);
    REQUIRE(last <= 0.5 * first);
}
