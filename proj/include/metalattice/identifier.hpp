#pragma once

// Structure identifier: turns last-frame field images into a multi-material
// design. A 96x96x4 field image is sliced into four symmetric quarters
// re-oriented to the upper-left frame and stacked to 16 channels; UNet-1
// segments solid vs void (binary cross entropy), the void region of the
// fields is zeroed, and UNet-2 assigns material classes (DiceCE loss).
// Training data is expanded by geometric augmentation and noise-enhanced
// with per-channel sigma calibrated against the DCT energy of
// diffusion-generated samples.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "metalattice/designgen.hpp"
#include "metalattice/metrics.hpp"
#include "metalattice/ops.hpp"
#include "metalattice/solver.hpp"
#include "metalattice/threadpool.hpp"
#include "metalattice/unet2d.hpp"

namespace metalattice::ident {

inline constexpr int kQ = gen::kQuarter; // 48
inline constexpr int kF = gen::kFull;    // 96
inline constexpr int kFieldChannels = 4;
inline constexpr int kStackedChannels = 16;

// ------------------------------------------------------------ quarter slicing

// field96: [96][96][4] (row, col, channel) -> [48][48][16] with channel
// index = field*4 + quarter (quarters ordered UL, UR, LL, LR), each quarter
// flipped to the upper-left orientation.
inline std::vector<float> slice_quarters(const std::vector<float>& field96) {
    if (field96.size() != static_cast<std::size_t>(kF) * kF * kFieldChannels)
        throw std::invalid_argument("slice_quarters: input must be 96x96x4");
    std::vector<float> out(static_cast<std::size_t>(kQ) * kQ * kStackedChannels);
    auto src = [&](int i, int j, int c) {
        return field96[(static_cast<std::size_t>(i) * kF + j) * kFieldChannels + static_cast<std::size_t>(c)];
    };
    for (int i = 0; i < kQ; ++i)
        for (int j = 0; j < kQ; ++j)
            for (int c = 0; c < kFieldChannels; ++c) {
                float* dst = &out[(static_cast<std::size_t>(i) * kQ + j) * kStackedChannels + static_cast<std::size_t>(c) * 4];
                dst[0] = src(i, j, c);                         // UL
                dst[1] = src(i, kF - 1 - j, c);                // UR mirrored horizontally
                dst[2] = src(kF - 1 - i, j, c);                // LL mirrored vertically
                dst[3] = src(kF - 1 - i, kF - 1 - j, c);       // LR mirrored both
            }
    return out;
}

// exact inverse of slice_quarters
inline std::vector<float> assemble_quarters(const std::vector<float>& q16) {
    if (q16.size() != static_cast<std::size_t>(kQ) * kQ * kStackedChannels)
        throw std::invalid_argument("assemble_quarters: input must be 48x48x16");
    std::vector<float> out(static_cast<std::size_t>(kF) * kF * kFieldChannels);
    auto dst = [&](int i, int j, int c) -> float& {
        return out[(static_cast<std::size_t>(i) * kF + j) * kFieldChannels + static_cast<std::size_t>(c)];
    };
    for (int i = 0; i < kQ; ++i)
        for (int j = 0; j < kQ; ++j)
            for (int c = 0; c < kFieldChannels; ++c) {
                const float* s = &q16[(static_cast<std::size_t>(i) * kQ + j) * kStackedChannels + static_cast<std::size_t>(c) * 4];
                dst(i, j, c) = s[0];
                dst(i, kF - 1 - j, c) = s[1];
                dst(kF - 1 - i, j, c) = s[2];
                dst(kF - 1 - i, kF - 1 - j, c) = s[3];
            }
    return out;
}

// last frame of a field stack as [96][96][4]
inline std::vector<float> last_frame(const fem::FieldStack& fs) {
    const std::size_t n = static_cast<std::size_t>(fs.height) * fs.width * fs.channels;
    std::vector<float> out(n);
    std::copy(fs.data.end() - static_cast<std::ptrdiff_t>(n), fs.data.end(), out.begin());
    return out;
}

// ---------------------------------------------------------------- losses

// DiceCE on logits [1,C,H,W] against one-hot labels: sigmoid-based soft Dice
// averaged over classes plus softmax cross entropy averaged over pixels.
inline nn::Var dice_ce_loss(nn::Tape& T, nn::Var logits, const std::vector<float>& onehot,
                            double smooth_eps) {
    
    const Tensor& z = T.val(logits);
    if (z.ndim() != 4 || z.dim(0) != 1) throw std::invalid_argument("dice_ce_loss: logits must be [1,C,H,W]");
    if (!(smooth_eps > 0.0)) throw std::invalid_argument("dice_ce_loss: smooth_eps must be > 0");
    const int C = z.dim(1), H = z.dim(2), W = z.dim(3), N = H * W;
    if (onehot.size() != z.v.size()) throw std::invalid_argument("dice_ce_loss: label shape mismatch");
    if (!z.all_finite()) throw std::invalid_argument("dice_ce_loss: non-finite logits");

    // forward in double
    std::vector<double> sig(z.v.size());
    for (std::size_t i = 0; i < z.v.size(); ++i) sig[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z.v[i])));
    std::vector<double> num(static_cast<std::size_t>(C)), den(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        double sy = 0.0, ss = 0.0, inter = 0.0;
        const std::size_t base = static_cast<std::size_t>(c) * N;
        for (int i = 0; i < N; ++i) {
            const double y = onehot[base + static_cast<std::size_t>(i)];
            const double sg = sig[base + static_cast<std::size_t>(i)];
            sy += y;
            ss += sg;
            inter += y * sg;
        }
        num[static_cast<std::size_t>(c)] = 2.0 * inter + smooth_eps;
        den[static_cast<std::size_t>(c)] = sy + ss + smooth_eps;
    }
    double dice = 0.0;
    for (int c = 0; c < C; ++c) dice += 1.0 - num[static_cast<std::size_t>(c)] / den[static_cast<std::size_t>(c)];
    dice /= C;

    double ce = 0.0;
    std::vector<double> softmax(z.v.size());
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        for (int c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(z.v[static_cast<std::size_t>(c) * N + i]));
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            const double e = std::exp(static_cast<double>(z.v[static_cast<std::size_t>(c) * N + i]) - mx);
            softmax[static_cast<std::size_t>(c) * N + i] = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) {
            softmax[static_cast<std::size_t>(c) * N + i] /= sum;
            const double y = onehot[static_cast<std::size_t>(c) * N + i];
            if (y > 0.0) ce -= y * std::log(std::max(softmax[static_cast<std::size_t>(c) * N + i], 1e-300));
        }
    }
    ce /= N;

    Tensor out({1});
    out.v[0] = static_cast<float>(dice + ce);
    const bool ng = T.needs_grad(logits);
    nn::Var o = T.emit(std::move(out), ng);
    if (ng) {
        auto sig_keep = std::make_shared<std::vector<double>>(std::move(sig));
        auto soft_keep = std::make_shared<std::vector<double>>(std::move(softmax));
        auto labels = std::make_shared<std::vector<float>>(onehot);
        auto num_keep = std::make_shared<std::vector<double>>(std::move(num));
        auto den_keep = std::make_shared<std::vector<double>>(std::move(den));
        T.set_backward(o, [o, logits, C, N, sig_keep, soft_keep, labels, num_keep, den_keep](nn::Tape& t) {
            const float g = t.grad(o).v[0];
            Tensor& gz = t.grad(logits);
            for (int c = 0; c < C; ++c) {
                const std::size_t base = static_cast<std::size_t>(c) * N;
                const double nc = (*num_keep)[static_cast<std::size_t>(c)];
                const double dc = (*den_keep)[static_cast<std::size_t>(c)];
                for (int i = 0; i < N; ++i) {
                    const double y = (*labels)[base + static_cast<std::size_t>(i)];
                    const double sg = (*sig_keep)[base + static_cast<std::size_t>(i)];
                    // d dice_c / d sigma = (-2y*den + num) / den^2, averaged over C
                    const double ddice = (-2.0 * y * dc + nc) / (dc * dc) / C;
                    const double dsig = sg * (1.0 - sg);
                    const double dce = ((*soft_keep)[base + static_cast<std::size_t>(i)] - y) / N;
                    gz.v[base + static_cast<std::size_t>(i)] += g * static_cast<float>(ddice * dsig + dce);
                }
            }
        });
    }
    return o;
}

// Binary cross entropy on logits [1,1,H,W] with {0,1} targets, mean-reduced.
inline nn::Var bce_with_logits(nn::Tape& T, nn::Var logits, const std::vector<float>& targets) {
    
    const Tensor& z = T.val(logits);
    if (z.v.size() != targets.size()) throw std::invalid_argument("bce_with_logits: shape mismatch");
    const std::size_t n = z.v.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double zi = z.v[i], y = targets[i];
        loss += std::max(zi, 0.0) - zi * y + std::log1p(std::exp(-std::abs(zi)));
    }
    Tensor out({1});
    out.v[0] = static_cast<float>(loss / static_cast<double>(n));
    const bool ng = T.needs_grad(logits);
    nn::Var o = T.emit(std::move(out), ng);
    if (ng) {
        auto tgt = std::make_shared<std::vector<float>>(targets);
        T.set_backward(o, [o, logits, tgt, n](nn::Tape& t) {
            const float g = t.grad(o).v[0] / static_cast<float>(n);
            Tensor& gz = t.grad(logits);
            const Tensor& z2 = t.val(logits);
            for (std::size_t i = 0; i < n; ++i) {
                const float s = 1.0f / (1.0f + std::exp(-z2.v[i]));
                gz.v[i] += g * (s - (*tgt)[i]);
            }
        });
    }
    return o;
}

// ------------------------------------------------------------- augmentation

struct AugPolicy {
    int expansion = 6;
    std::array<float, kFieldChannels> noise_sigma{}; // per field channel
    double blur_sigma = 0.7;                         // 3x3 kernel
};

// One training sample: stacked quarter fields plus crisp labels.
struct IdentSample {
    std::vector<float> fields;        // [48][48][16]
    std::vector<std::uint8_t> mask;   // [48][48] solid=1
    std::vector<std::uint8_t> labels; // [48][48] class 0..3
};

enum class AugOp { hflip, vflip, rot90, blur };

namespace detail {

template <typename T>
inline void geometric_apply(std::vector<T>& img, int channels, AugOp op) {
    auto idx = [&](int i, int j, int c) {
        return (static_cast<std::size_t>(i) * kQ + j) * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c);
    };
    std::vector<T> src = img;
    for (int i = 0; i < kQ; ++i)
        for (int j = 0; j < kQ; ++j)
            for (int c = 0; c < channels; ++c) {
                int si = i, sj = j;
                switch (op) {
                    case AugOp::hflip: sj = kQ - 1 - j; break;
                    case AugOp::vflip: si = kQ - 1 - i; break;
                    case AugOp::rot90: si = kQ - 1 - j; sj = i; break; // 90 deg clockwise
                    case AugOp::blur: return;
                }
                img[idx(i, j, c)] = src[idx(si, sj, c)];
            }
}

inline void blur_fields(std::vector<float>& fields, int channels, double sigma) {
    // 3x3 Gaussian, border-renormalized
    double k[3];
    k[0] = std::exp(-1.0 / (2.0 * sigma * sigma));
    k[1] = 1.0;
    k[2] = k[0];
    std::vector<float> src = fields;
    auto idx = [&](int i, int j, int c) {
        return (static_cast<std::size_t>(i) * kQ + j) * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c);
    };
    for (int i = 0; i < kQ; ++i)
        for (int j = 0; j < kQ; ++j)
            for (int c = 0; c < channels; ++c) {
                double acc = 0.0, wsum = 0.0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int ni = i + di, nj = j + dj;
                        if (ni < 0 || ni >= kQ || nj < 0 || nj >= kQ) continue;
                        const double w = k[di + 1] * k[dj + 1];
                        acc += w * src[idx(ni, nj, c)];
                        wsum += w;
                    }
                fields[idx(i, j, c)] = static_cast<float>(acc / wsum);
            }
}

} // namespace detail

// noise applied to fields only, per original field channel
inline void add_field_noise(std::vector<float>& fields, const std::array<float, kFieldChannels>& sigma,
                            Rng& rng) {
    for (std::size_t p = 0; p < fields.size(); ++p) {
        const int stacked = static_cast<int>(p % kStackedChannels);
        const float s = sigma[static_cast<std::size_t>(stacked / 4)];
        if (s > 0.0f) fields[p] += s * rng.normal_f();
    }
}

inline IdentSample augment_one(const IdentSample& in, AugOp op, const AugPolicy& policy, Rng& rng,
                               bool with_noise) {
    IdentSample out = in;
    if (op == AugOp::blur) {
        detail::blur_fields(out.fields, kStackedChannels, policy.blur_sigma);
    } else {
        detail::geometric_apply(out.fields, kStackedChannels, op);
        detail::geometric_apply(out.mask, 1, op);
        detail::geometric_apply(out.labels, 1, op);
    }
    if (with_noise) add_field_noise(out.fields, policy.noise_sigma, rng);
    return out;
}

// Expanded dataset: expansion-factor copies per sample, each with one
// randomly chosen op; labels stay crisp under blur.
inline std::vector<IdentSample> augment(const std::vector<IdentSample>& ds, const AugPolicy& policy,
                                        Rng& rng, bool with_noise = true) {
    if (policy.expansion < 1) throw std::invalid_argument("augment: expansion must be >= 1");
    std::vector<IdentSample> out;
    out.reserve(ds.size() * static_cast<std::size_t>(policy.expansion));
    for (const auto& s : ds)
        for (int k = 0; k < policy.expansion; ++k) {
            const AugOp op = static_cast<AugOp>(rng.below(4));
            out.push_back(augment_one(s, op, policy, rng, with_noise));
        }
    return out;
}

// --------------------------------------------------------- noise calibration

struct CalibrationResult {
    std::array<float, kFieldChannels> sigma{};
    std::array<double, kFieldChannels> achieved_ratio{};
    std::array<double, kFieldChannels> diff_max_energy{};
    std::array<bool, kFieldChannels> already_above{};
};

// Per-channel images (H x W row-major), one vector per sample.
using ChannelImages = std::vector<std::vector<float>>;

// Smallest per-channel sigma (bisection, fixed Monte-Carlo noise draws)
// such that max DCT energy over noised training images exceeds the
// diffusion set's max by the requested margin (default 25%).
inline CalibrationResult calibrate_noise(const std::array<ChannelImages, kFieldChannels>& train,
                                         const std::array<ChannelImages, kFieldChannels>& diff,
                                         int h, int w, std::uint64_t seed, double margin = 1.25,
                                         int bisect_iters = 20) {
    CalibrationResult res;
    for (int c = 0; c < kFieldChannels; ++c) {
        const auto& tset = train[static_cast<std::size_t>(c)];
        const auto& dset = diff[static_cast<std::size_t>(c)];
        if (tset.empty() || dset.empty()) throw std::invalid_argument("calibrate_noise: empty image set");

        double dmax = 0.0;
        for (const auto& img : dset) dmax = std::max(dmax, metrics::dct_energy(img, h, w));
        res.diff_max_energy[static_cast<std::size_t>(c)] = dmax;
        const double target = margin * dmax;

        // fixed noise draws per training image
        std::vector<std::vector<float>> noise(tset.size());
        for (std::size_t i = 0; i < tset.size(); ++i) {
            Rng rng(child_seed(seed, "calib", static_cast<std::uint64_t>(c) * 1000003ull + i));
            noise[i].resize(tset[i].size());
            for (auto& v : noise[i]) v = rng.normal_f();
        }
        auto max_energy = [&](double sigma) {
            double mx = 0.0;
            std::vector<float> buf;
            for (std::size_t i = 0; i < tset.size(); ++i) {
                buf = tset[i];
                for (std::size_t p = 0; p < buf.size(); ++p)
                    buf[p] += static_cast<float>(sigma) * noise[i][p];
                mx = std::max(mx, metrics::dct_energy(buf, h, w));
            }
            return mx;
        };

        const double e0 = max_energy(0.0);
        if (e0 >= target) {
            res.sigma[static_cast<std::size_t>(c)] = 0.0f;
            res.achieved_ratio[static_cast<std::size_t>(c)] = dmax > 0.0 ? e0 / dmax : 1.0;
            res.already_above[static_cast<std::size_t>(c)] = true;
            continue;
        }
        double hi = 0.05;
        while (max_energy(hi) < target && hi < 1e6) hi *= 2.0;
        double lo = 0.0;
        for (int it = 0; it < bisect_iters; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (max_energy(mid) >= target) hi = mid;
            else lo = mid;
        }
        res.sigma[static_cast<std::size_t>(c)] = static_cast<float>(hi);
        res.achieved_ratio[static_cast<std::size_t>(c)] = dmax > 0.0 ? max_energy(hi) / dmax : 1.0;
        res.already_above[static_cast<std::size_t>(c)] = false;
    }
    return res;
}

// --------------------------------------------------------------- training

struct IdentTrainConfig {
    std::vector<int> widths = {32, 64, 128, 256};
    int max_epochs = 500;
    double early_stop_accuracy = 99.9; // percent
    double lr = 1e-3;
    int batch = 2;
    int workers = 1;
    std::array<float, kFieldChannels> noise_sigma{}; // re-sampled each epoch
    double smooth_eps = 1e-5;
};

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    double test_weighted_dsc = 0.0;
};

struct TrainedIdentifier {
    nn::UNet2dConfig net_config;
    nn::ParamSet params;
    std::vector<EpochMetrics> history;
    bool early_stopped = false;
    bool diverged = false;
};

namespace detail {

inline Tensor fields_to_tensor(const std::vector<float>& hwc) {
    Tensor t({1, kStackedChannels, kQ, kQ});
    for (int i = 0; i < kQ; ++i)
        for (int j = 0; j < kQ; ++j)
            for (int c = 0; c < kStackedChannels; ++c)
                t.at({0, c, i, j}) = hwc[(static_cast<std::size_t>(i) * kQ + j) * kStackedChannels + static_cast<std::size_t>(c)];
    return t;
}

inline void zero_void(std::vector<float>& hwc, const std::vector<std::uint8_t>& mask) {
    for (int p = 0; p < kQ * kQ; ++p)
        if (!mask[static_cast<std::size_t>(p)])
            for (int c = 0; c < kStackedChannels; ++c)
                hwc[static_cast<std::size_t>(p) * kStackedChannels + static_cast<std::size_t>(c)] = 0.0f;
}

} // namespace detail

enum class Stage { binary, multiclass };

// prediction helpers (inference path, no gradients)
inline std::vector<std::uint8_t> predict_mask(const nn::UNet2d& net, nn::ParamSet& params,
                                              const std::vector<float>& fields_hwc) {
    nn::Tape tape;
    nn::ParamBinder binder{tape, params, false};
    nn::Var out = net.forward(tape, binder, tape.leaf(detail::fields_to_tensor(fields_hwc)));
    const Tensor& z = tape.val(out);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(kQ) * kQ);
    for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = z.v[p] > 0.0f ? 1 : 0; // sigmoid(z) > 0.5
    return mask;
}

inline std::vector<std::uint8_t> predict_classes(const nn::UNet2d& net, nn::ParamSet& params,
                                                 const std::vector<float>& fields_hwc) {
    nn::Tape tape;
    nn::ParamBinder binder{tape, params, false};
    nn::Var out = net.forward(tape, binder, tape.leaf(detail::fields_to_tensor(fields_hwc)));
    const Tensor& z = tape.val(out);
    const int C = z.dim(1), N = kQ * kQ;
    std::vector<std::uint8_t> cls(static_cast<std::size_t>(N));
    for (int p = 0; p < N; ++p) {
        int best = 0;
        float bv = z.v[static_cast<std::size_t>(p)];
        for (int c = 1; c < C; ++c) {
            const float v = z.v[static_cast<std::size_t>(c) * N + p];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        cls[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
    }
    return cls;
}

// Trains one UNet stage with per-epoch noise re-sampling; test samples get
// one fixed noise draw. Early-stops on held-out pixel accuracy. Divergence
// rolls back to the last finite-loss epoch.
inline TrainedIdentifier train_identifier(Stage stage, const std::vector<IdentSample>& train_set,
                                          const std::vector<IdentSample>& test_set,
                                          const IdentTrainConfig& cfg, std::uint64_t seed) {
    if (train_set.empty() || test_set.empty())
        throw std::invalid_argument("train_identifier: empty dataset");
    nn::UNet2dConfig nc;
    nc.in_channels = kStackedChannels;
    nc.out_channels = stage == Stage::binary ? 1 : 4;
    nc.widths = cfg.widths;
    nn::UNet2d net(nc);

    TrainedIdentifier out;
    out.net_config = nc;
    Rng init_rng(child_seed(seed, "init"));
    net.init(out.params, init_rng);

    // fixed noise for the held-out set
    std::vector<IdentSample> test = test_set;
    {
        Rng trng(child_seed(seed, "testnoise"));
        for (auto& s : test) {
            add_field_noise(s.fields, cfg.noise_sigma, trng);
            if (stage == Stage::multiclass) detail::zero_void(s.fields, s.mask);
        }
    }

    auto evaluate = [&]() {
        double acc = 0.0, dsc = 0.0;
        for (const auto& s : test) {
            metrics::SegPair sp;
            sp.y_true.resize(s.labels.size());
            sp.y_pred.resize(s.labels.size());
            if (stage == Stage::binary) {
                const auto mask = predict_mask(net, out.params, s.fields);
                for (std::size_t p = 0; p < mask.size(); ++p) {
                    sp.y_true[p] = s.mask[p];
                    sp.y_pred[p] = mask[p];
                }
                acc += metrics::pixel_accuracy(sp);
                dsc += metrics::weighted_dsc(sp, 2);
            } else {
                const auto cls = predict_classes(net, out.params, s.fields);
                for (std::size_t p = 0; p < cls.size(); ++p) {
                    sp.y_true[p] = s.labels[p];
                    sp.y_pred[p] = cls[p];
                }
                acc += metrics::pixel_accuracy(sp);
                dsc += metrics::weighted_dsc(sp, 4);
            }
        }
        return std::pair<double, double>(acc / static_cast<double>(test.size()),
                                         dsc / static_cast<double>(test.size()));
    };

    nn::AdamConfig adam;
    adam.lr = cfg.lr;
    nn::ParamSet last_good;
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        Rng erng(child_seed(seed, "epoch", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[erng.below(i)]);

        double loss_sum = 0.0;
        std::int64_t loss_count = 0;
        bool diverged = false;
        const int batch = std::max(1, cfg.batch);

        for (std::size_t start = 0; start < order.size() && !diverged; start += static_cast<std::size_t>(batch)) {
            const std::size_t bend = std::min(order.size(), start + static_cast<std::size_t>(batch));
            const std::size_t bsize = bend - start;
            struct Per {
                std::map<std::string, Tensor> grads;
                double loss = 0.0;
                bool finite = true;
            };
            std::vector<Per> per(bsize);
            parallel_for(static_cast<std::int64_t>(bsize), cfg.workers, [&](std::int64_t bi) {
                const IdentSample& s0 = train_set[order[start + static_cast<std::size_t>(bi)]];
                IdentSample s = s0;
                Rng nrng(child_seed(seed, "noise",
                                    static_cast<std::uint64_t>(epoch) * 1000003ull + start + static_cast<std::uint64_t>(bi)));
                add_field_noise(s.fields, cfg.noise_sigma, nrng);
                if (stage == Stage::multiclass) detail::zero_void(s.fields, s.mask);

                nn::Tape tape;
                nn::ParamBinder binder{tape, out.params, true};
                nn::Var logits = net.forward(tape, binder, tape.leaf(detail::fields_to_tensor(s.fields)));
                nn::Var loss;
                if (stage == Stage::binary) {
                    std::vector<float> tgt(s.mask.size());
                    for (std::size_t p = 0; p < tgt.size(); ++p) tgt[p] = static_cast<float>(s.mask[p]);
                    loss = bce_with_logits(tape, logits, tgt);
                } else {
                    std::vector<float> onehot(static_cast<std::size_t>(4) * kQ * kQ, 0.0f);
                    for (int p = 0; p < kQ * kQ; ++p)
                        onehot[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(p)]) * kQ * kQ +
                               static_cast<std::size_t>(p)] = 1.0f;
                    loss = dice_ce_loss(tape, logits, onehot, cfg.smooth_eps);
                }
                per[static_cast<std::size_t>(bi)].loss = tape.val(loss).v[0];
                if (!std::isfinite(per[static_cast<std::size_t>(bi)].loss)) {
                    per[static_cast<std::size_t>(bi)].finite = false;
                    return;
                }
                tape.backward(loss);
                for (auto& [name, g] : binder.grads()) per[static_cast<std::size_t>(bi)].grads.emplace(name, *g);
            });

            std::map<std::string, Tensor> summed;
            for (const auto& r : per) {
                if (!r.finite) {
                    diverged = true;
                    break;
                }
                loss_sum += r.loss;
                ++loss_count;
                const float inv = 1.0f / static_cast<float>(bsize);
                for (const auto& [name, g] : r.grads) {
                    auto it = summed.find(name);
                    if (it == summed.end()) {
                        Tensor t = g;
                        for (auto& v : t.v) v *= inv;
                        summed.emplace(name, std::move(t));
                    } else {
                        for (std::size_t k2 = 0; k2 < g.v.size(); ++k2) it->second.v[k2] += inv * g.v[k2];
                    }
                }
            }
            if (diverged) break;
            std::map<std::string, const Tensor*> gp;
            for (const auto& [name, g] : summed) gp.emplace(name, &g);
            nn::adam_step(out.params, gp, adam);
        }

        if (diverged) {
            out.diverged = true;
            if (!last_good.entries.empty()) out.params = last_good;
            break;
        }
        last_good = out.params;

        const auto [acc, dsc] = evaluate();
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
        em.test_accuracy = acc;
        em.test_weighted_dsc = dsc;
        out.history.push_back(em);
        if (acc >= cfg.early_stop_accuracy) {
            out.early_stopped = true;
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------- identify

using MaskFn = std::function<std::vector<std::uint8_t>(const std::vector<float>&)>;
using ClassFn = std::function<std::vector<std::uint8_t>(const std::vector<float>&)>;

// Core identify plumbing with injectable segmentation stages (tests swap in
// oracles): slice -> binary mask -> void-zeroed fields -> classes -> mirror.
// UNet-1 defines the solid support; inside it UNet-2 decides, including
// overriding to void.
inline gen::FullDesign identify_with(const std::vector<float>& field96, const MaskFn& mask_fn,
                                     const ClassFn& class_fn) {
    const auto q16 = slice_quarters(field96);
    const auto mask = mask_fn(q16);
    std::vector<float> masked = q16;
    detail::zero_void(masked, mask);
    const auto cls = class_fn(masked);
    gen::QuarterDesign q;
    for (int p = 0; p < kQ * kQ; ++p) {
        const std::uint8_t c = mask[static_cast<std::size_t>(p)] ? cls[static_cast<std::size_t>(p)] : 0;
        q.grid[static_cast<std::size_t>(p)] = c;
    }
    // all-void prediction has no mirrorable material; return empty design
    if (!q.any_material()) return gen::FullDesign{};
    return gen::mirror_full(q);
}

inline gen::FullDesign identify(const std::vector<float>& field96, const nn::UNet2d& unet1,
                                nn::ParamSet& params1, const nn::UNet2d& unet2, nn::ParamSet& params2) {
    if (unet1.config().in_channels != kStackedChannels || unet2.config().in_channels != kStackedChannels)
        throw std::invalid_argument("identify: checkpoint channel mismatch");
    return identify_with(
        field96, [&](const std::vector<float>& f) { return predict_mask(unet1, params1, f); },
        [&](const std::vector<float>& f) { return predict_classes(unet2, params2, f); });
}

} // namespace metalattice::ident
