#pragma once

// Evaluation metrics: DCT energy as a single-image noise proxy, pixel
// accuracy and class-weighted Dice similarity for segmentation maps, and
// RRMSE / RMAE for stress-strain curve comparison.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace metalattice::metrics {

// Orthonormal 2D DCT-II coefficients; returns the sum of their absolute
// values. A noisy image spreads energy into high frequencies, raising the
// sum relative to a smooth image of the same magnitude.
inline double dct_energy(const std::vector<float>& img, int h, int w) {
    if (h < 1 || w < 1 || static_cast<std::int64_t>(img.size()) != static_cast<std::int64_t>(h) * w)
        throw std::invalid_argument("dct_energy: bad dimensions");
    for (float x : img)
        if (!std::isfinite(x)) throw std::invalid_argument("dct_energy: non-finite input");

    const double pi = 3.14159265358979323846;
    // rows then columns (separable DCT-II, orthonormal scaling)
    std::vector<double> tmp(static_cast<std::size_t>(h) * w), out(tmp.size());
    std::vector<double> ctab_w(static_cast<std::size_t>(w) * w), ctab_h(static_cast<std::size_t>(h) * h);
    for (int u = 0; u < w; ++u)
        for (int j = 0; j < w; ++j)
            ctab_w[static_cast<std::size_t>(u) * w + j] = std::cos(pi * (2.0 * j + 1.0) * u / (2.0 * w));
    for (int u = 0; u < h; ++u)
        for (int i = 0; i < h; ++i)
            ctab_h[static_cast<std::size_t>(u) * h + i] = std::cos(pi * (2.0 * i + 1.0) * u / (2.0 * h));

    for (int i = 0; i < h; ++i)
        for (int u = 0; u < w; ++u) {
            double s = 0.0;
            for (int j = 0; j < w; ++j)
                s += img[static_cast<std::size_t>(i) * w + j] * ctab_w[static_cast<std::size_t>(u) * w + j];
            const double au = (u == 0) ? std::sqrt(1.0 / w) : std::sqrt(2.0 / w);
            tmp[static_cast<std::size_t>(i) * w + u] = au * s;
        }
    for (int u = 0; u < w; ++u)
        for (int v = 0; v < h; ++v) {
            double s = 0.0;
            for (int i = 0; i < h; ++i)
                s += tmp[static_cast<std::size_t>(i) * w + u] * ctab_h[static_cast<std::size_t>(v) * h + i];
            const double av = (v == 0) ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
            out[static_cast<std::size_t>(v) * w + u] = av * s;
        }
    double e = 0.0;
    for (double x : out) e += std::abs(x);
    return e;
}

struct SegPair {
    std::vector<int> y_true;
    std::vector<int> y_pred;

    void validate() const {
        if (y_true.size() != y_pred.size() || y_true.empty())
            throw std::invalid_argument("SegPair: size mismatch");
    }
};

// exact match fraction x 100
inline double pixel_accuracy(const SegPair& p) {
    p.validate();
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < p.y_true.size(); ++i)
        if (p.y_true[i] == p.y_pred[i]) ++hit;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(p.y_true.size());
}

// Class-weighted Dice similarity on hard labels. Per class j:
//   DSC_j = 2|T_j ∩ P_j| / (|T_j| + |P_j|), or 1 when both sets are empty;
// weights are the truth pixel share of each class.
inline double weighted_dsc(const SegPair& p, int num_classes) {
    p.validate();
    if (num_classes < 2) throw std::invalid_argument("weighted_dsc: need >= 2 classes");
    std::vector<std::int64_t> t_count(static_cast<std::size_t>(num_classes)),
        p_count(static_cast<std::size_t>(num_classes)), inter(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < p.y_true.size(); ++i) {
        const int a = p.y_true[i], b = p.y_pred[i];
        if (a < 0 || a >= num_classes || b < 0 || b >= num_classes)
            throw std::invalid_argument("weighted_dsc: label out of range");
        ++t_count[static_cast<std::size_t>(a)];
        ++p_count[static_cast<std::size_t>(b)];
        if (a == b) ++inter[static_cast<std::size_t>(a)];
    }
    const double total = static_cast<double>(p.y_true.size());
    double result = 0.0;
    for (int j = 0; j < num_classes; ++j) {
        const std::int64_t denom = t_count[static_cast<std::size_t>(j)] + p_count[static_cast<std::size_t>(j)];
        const double dsc = denom > 0 ? 2.0 * static_cast<double>(inter[static_cast<std::size_t>(j)]) / static_cast<double>(denom) : 1.0;
        const double wj = static_cast<double>(t_count[static_cast<std::size_t>(j)]) / total;
        result += wj * dsc;
    }
    return 100.0 * result;
}

struct CurvePair {
    std::vector<double> y_true;
    std::vector<double> y_pred;

    void validate() const {
        if (y_true.size() != y_pred.size() || y_true.empty())
            throw std::invalid_argument("CurvePair: size mismatch");
    }
};

// ||y_true - y_pred||_2 / ||y_true||_2 x 100
inline double rrmse(const CurvePair& cp) {
    cp.validate();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < cp.y_true.size(); ++i) {
        const double d = cp.y_true[i] - cp.y_pred[i];
        num += d * d;
        den += cp.y_true[i] * cp.y_true[i];
    }
    if (!(den > 0.0)) throw std::invalid_argument("rrmse: zero-norm reference curve");
    return 100.0 * std::sqrt(num) / std::sqrt(den);
}

// sum |y_true - y_pred| / sum |y_true| x 100
inline double rmae(const CurvePair& cp) {
    cp.validate();
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < cp.y_true.size(); ++i) {
        num += std::abs(cp.y_true[i] - cp.y_pred[i]);
        den += std::abs(cp.y_true[i]);
    }
    if (!(den > 0.0)) throw std::invalid_argument("rmae: zero-sum reference curve");
    return 100.0 * num / den;
}

} // namespace metalattice::metrics
