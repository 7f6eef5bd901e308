#pragma once

// Encoder-decoder segmentation UNet: per level two conv+norm+SiLU layers,
// strided-conv downsampling, nearest upsampling, skip concatenation, and a
// 1x1 logit head. Used twice in the structure identifier (binary mask, then
// multi-class material map).

#include <string>
#include <vector>

#include "metalattice/netutil.hpp"

namespace metalattice::nn {

struct UNet2dConfig {
    int in_channels = 16;
    int out_channels = 1;
    std::vector<int> widths = {32, 64, 128, 256};

    std::string str() const {
        std::string s = std::to_string(in_channels) + "->";
        for (int w : widths) s += std::to_string(w) + ",";
        s += "->" + std::to_string(out_channels);
        return s;
    }
};

class UNet2d {
public:
    explicit UNet2d(UNet2dConfig cfg) : cfg_(std::move(cfg)) {}

    const UNet2dConfig& config() const { return cfg_; }

    void init(ParamSet& ps, Rng& rng) const {
        const auto& w = cfg_.widths;
        int prev = cfg_.in_channels;
        for (std::size_t l = 0; l < w.size(); ++l) {
            init_block(ps, lvl("enc", l), prev, w[l], rng);
            prev = w[l];
            if (l + 1 < w.size()) init_conv(ps, lvl("down", l), w[l], w[l], 3, rng);
        }
        for (std::size_t l = w.size() - 1; l-- > 0;) {
            init_conv(ps, lvl("up", l), w[l], w[l + 1], 3, rng);
            init_block(ps, lvl("dec", l), 2 * w[l], w[l], rng);
        }
        init_conv(ps, "head", cfg_.out_channels, w[0], 1, rng);
    }

    // x: [1, in_channels, H, W] -> logits [1, out_channels, H, W]
    Var forward(Tape& T, ParamBinder& P, Var x) const {
        const auto& w = cfg_.widths;
        std::vector<Var> skips;
        Var h = x;
        for (std::size_t l = 0; l < w.size(); ++l) {
            h = block(T, P, lvl("enc", l), h, w[l]);
            if (l + 1 < w.size()) {
                skips.push_back(h);
                h = apply_conv(T, P, lvl("down", l), h, 2, 1);
            }
        }
        for (std::size_t l = w.size() - 1; l-- > 0;) {
            h = upsample2x(T, h);
            h = apply_conv(T, P, lvl("up", l), h, 1, 1);
            h = concat_channels(T, h, skips[l]);
            h = block(T, P, lvl("dec", l), h, w[l]);
        }
        return conv2d(T, h, P("head.w"), P("head.b"), 1, 0);
    }

private:
    static std::string lvl(const char* base, std::size_t l) { return std::string(base) + std::to_string(l); }

    static void init_block(ParamSet& ps, const std::string& name, int ci, int co, Rng& rng) {
        init_conv(ps, name + ".c1", co, ci, 3, rng);
        init_norm(ps, name + ".n1", co);
        init_conv(ps, name + ".c2", co, co, 3, rng);
        init_norm(ps, name + ".n2", co);
    }

    static Var block(Tape& T, ParamBinder& P, const std::string& name, Var x, int co) {
        Var h = apply_conv(T, P, name + ".c1", x, 1, 1);
        h = silu(T, apply_norm(T, P, name + ".n1", h, norm_groups_for(co)));
        h = apply_conv(T, P, name + ".c2", h, 1, 1);
        return silu(T, apply_norm(T, P, name + ".n2", h, norm_groups_for(co)));
    }

    UNet2dConfig cfg_;
};

} // namespace metalattice::nn
