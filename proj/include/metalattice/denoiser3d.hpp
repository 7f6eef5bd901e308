#pragma once

// Video denoiser: a 3D UNet over (frames, H, W). Each level runs a ResNet
// block with factorized space+time convolutions and an additive
// timestep/condition embedding; the coarsest levels add spatial attention
// (kernelized linear attention by default, plain softmax optional) and
// temporal softmax attention. The condition is a stress-curve vector mapped
// through a linear layer to a token embedding; a learned null embedding
// stands in when sampling or training unconditionally.

#include <set>
#include <string>
#include <vector>

#include "metalattice/netutil.hpp"

namespace metalattice::nn {

struct DenoiserConfig {
    int in_channels = 4;
    int frames = 11;
    std::vector<int> widths = {32, 64, 96, 128};
    int heads = 8;
    int emb_dim = 64;
    int cond_dim = 11;
    int attn_levels = 2;            // attention on this many coarsest levels
    bool spatial_softmax = false;   // default kernelized linear attention
    bool temporal = true;           // temporal convs + attention (off for single-frame nets)
    int stem_stride = 1;            // 2 = run the UNet at half resolution (desk preset)
};

class Denoiser3d {
public:
    explicit Denoiser3d(DenoiserConfig cfg) : cfg_(std::move(cfg)) {}

    const DenoiserConfig& config() const { return cfg_; }

    void init(ParamSet& ps, Rng& rng) const {
        const auto& w = cfg_.widths;
        ps.add("null_cond", kaiming_uniform({1, cfg_.emb_dim}, cfg_.emb_dim, rng));
        init_linear(ps, "cond_embed", cfg_.emb_dim, cfg_.cond_dim, rng);
        init_linear(ps, "time1", cfg_.emb_dim, cfg_.emb_dim, rng);
        init_linear(ps, "time2", cfg_.emb_dim, cfg_.emb_dim, rng);
        init_conv(ps, "stem", w[0], cfg_.in_channels, 3, rng);
        int prev = w[0];
        for (std::size_t l = 0; l < w.size(); ++l) {
            init_res(ps, lvl("enc", l), prev, w[l], rng);
            if (has_attn(l)) init_attn(ps, lvl("encattn", l), w[l], rng);
            prev = w[l];
            if (l + 1 < w.size()) init_conv(ps, lvl("down", l), w[l], w[l], 3, rng);
        }
        init_res(ps, "mid1", w.back(), w.back(), rng);
        init_attn(ps, "midattn", w.back(), rng);
        init_res(ps, "mid2", w.back(), w.back(), rng);
        for (std::size_t l = w.size() - 1; l-- > 0;) {
            init_conv(ps, lvl("up", l), w[l], w[l + 1], 3, rng);
            init_res(ps, lvl("dec", l), 2 * w[l], w[l], rng);
            if (has_attn(l)) init_attn(ps, lvl("decattn", l), w[l], rng);
        }
        init_norm(ps, "headnorm", w[0]);
        init_conv(ps, "head", cfg_.in_channels, w[0], 3, rng, /*zero=*/true);
        if (cfg_.stem_stride != 1 && cfg_.stem_stride != 2)
            throw std::invalid_argument("Denoiser3d: stem_stride must be 1 or 2");
    }

    // x: [F, in_channels, H, W]; t: diffusion step; cond: [cond_dim] vector
    // or nullptr for the unconditional (null-embedding) path.
    Var forward(Tape& T, ParamBinder& P, Var x, int t, const Tensor* cond) const {
        const auto& w = cfg_.widths;
        // embedding: sinusoidal(t) -> mlp, plus condition token
        Var te = T.leaf(sinusoidal_embedding(t, cfg_.emb_dim));
        te = reshape(T, te, {1, cfg_.emb_dim});
        te = apply_linear(T, P, "time2", silu(T, apply_linear(T, P, "time1", te)));
        Var ce;
        if (cond) {
            Tensor c = *cond;
            c.dims = {1, cfg_.cond_dim};
            ce = apply_linear(T, P, "cond_embed", T.leaf(std::move(c)));
        } else {
            ce = P("null_cond");
        }
        Var emb = silu(T, add(T, te, ce)); // [1, emb_dim]

        Var h = apply_conv(T, P, "stem", x, cfg_.stem_stride, 1);
        std::vector<Var> skips;
        for (std::size_t l = 0; l < w.size(); ++l) {
            h = res_block(T, P, lvl("enc", l), h, w[l], emb);
            if (has_attn(l)) h = attn_block(T, P, lvl("encattn", l), h, w[l]);
            if (l + 1 < w.size()) {
                skips.push_back(h);
                h = apply_conv(T, P, lvl("down", l), h, 2, 1);
            }
        }
        h = res_block(T, P, "mid1", h, w.back(), emb);
        h = attn_block(T, P, "midattn", h, w.back());
        h = res_block(T, P, "mid2", h, w.back(), emb);
        for (std::size_t l = w.size() - 1; l-- > 0;) {
            h = upsample2x(T, h);
            h = apply_conv(T, P, lvl("up", l), h, 1, 1);
            h = concat_channels(T, h, skips[l]);
            h = res_block(T, P, lvl("dec", l), h, w[l], emb);
            if (has_attn(l)) h = attn_block(T, P, lvl("decattn", l), h, w[l]);
        }
        h = silu(T, apply_norm(T, P, "headnorm", h, norm_groups_for(w[0])));
        if (cfg_.stem_stride == 2) h = upsample2x(T, h);
        return conv2d(T, h, P("head.w"), P("head.b"), 1, 1);
    }

private:
    static std::string lvl(const char* base, std::size_t l) { return std::string(base) + std::to_string(l); }

    bool has_attn(std::size_t level) const {
        return static_cast<int>(cfg_.widths.size() - level) <= cfg_.attn_levels;
    }

    void init_res(ParamSet& ps, const std::string& name, int ci, int co, Rng& rng) const {
        init_norm(ps, name + ".n1", ci);
        init_conv(ps, name + ".c1", co, ci, 3, rng);
        init_linear(ps, name + ".emb", co, cfg_.emb_dim, rng);
        init_norm(ps, name + ".n2", co);
        init_conv(ps, name + ".c2", co, co, 3, rng);
        if (cfg_.temporal) {
            init_norm(ps, name + ".nt", co);
            init_tconv(ps, name + ".tc", co, co, 3, rng, /*zero=*/true);
        }
        if (ci != co) init_conv(ps, name + ".proj", co, ci, 1, rng);
    }

    Var res_block(Tape& T, ParamBinder& P, const std::string& name, Var x, int co, Var emb) const {
        const int ci = T.val(x).dim(1);
        Var h = silu(T, apply_norm(T, P, name + ".n1", x, norm_groups_for(ci)));
        h = apply_conv(T, P, name + ".c1", h, 1, 1);
        Var e = apply_linear(T, P, name + ".emb", emb);           // [1, co]
        h = add_channel_bias(T, h, reshape(T, e, {co}));
        h = silu(T, apply_norm(T, P, name + ".n2", h, norm_groups_for(co)));
        h = apply_conv(T, P, name + ".c2", h, 1, 1);
        if (cfg_.temporal && T.val(x).dim(0) > 1) {
            Var ht = silu(T, apply_norm(T, P, name + ".nt", h, norm_groups_for(co)));
            h = add(T, h, apply_tconv(T, P, name + ".tc", ht));
        }
        Var skip = (ci == co) ? x : apply_conv(T, P, name + ".proj", x, 1, 0);
        return add(T, h, skip);
    }

    void init_attn(ParamSet& ps, const std::string& name, int c, Rng& rng) const {
        init_norm(ps, name + ".sn", c);
        init_conv(ps, name + ".sq", c, c, 1, rng);
        init_conv(ps, name + ".sk", c, c, 1, rng);
        init_conv(ps, name + ".sv", c, c, 1, rng);
        init_conv(ps, name + ".so", c, c, 1, rng, /*zero=*/true);
        if (cfg_.temporal) {
            init_norm(ps, name + ".tn", c);
            init_conv(ps, name + ".tq", c, c, 1, rng);
            init_conv(ps, name + ".tk", c, c, 1, rng);
            init_conv(ps, name + ".tv", c, c, 1, rng);
            init_conv(ps, name + ".to", c, c, 1, rng, /*zero=*/true);
        }
    }

    Var attn_block(Tape& T, ParamBinder& P, const std::string& name, Var x, int c) const {
        const int H = T.val(x).dim(2), W = T.val(x).dim(3);
        const int heads = (c % cfg_.heads == 0) ? cfg_.heads : norm_groups_for(c);
        // spatial attention per frame
        {
            Var n = apply_norm(T, P, name + ".sn", x, norm_groups_for(c));
            Var q = to_tokens_spatial(T, apply_conv(T, P, name + ".sq", n, 1, 0));
            Var k = to_tokens_spatial(T, apply_conv(T, P, name + ".sk", n, 1, 0));
            Var v = to_tokens_spatial(T, apply_conv(T, P, name + ".sv", n, 1, 0));
            Var a = cfg_.spatial_softmax ? attention(T, q, k, v, heads)
                                         : linear_attention(T, q, k, v, heads);
            Var o = apply_conv(T, P, name + ".so", from_tokens_spatial(T, a, H, W), 1, 0);
            x = add(T, x, o);
        }
        if (cfg_.temporal && T.val(x).dim(0) > 1) {
            Var n = apply_norm(T, P, name + ".tn", x, norm_groups_for(c));
            Var q = to_tokens_temporal(T, apply_conv(T, P, name + ".tq", n, 1, 0));
            Var k = to_tokens_temporal(T, apply_conv(T, P, name + ".tk", n, 1, 0));
            Var v = to_tokens_temporal(T, apply_conv(T, P, name + ".tv", n, 1, 0));
            Var a = attention(T, q, k, v, heads);
            Var o = apply_conv(T, P, name + ".to", from_tokens_temporal(T, a, H, W), 1, 0);
            x = add(T, x, o);
        }
        return x;
    }

    DenoiserConfig cfg_;
};

} // namespace metalattice::nn
