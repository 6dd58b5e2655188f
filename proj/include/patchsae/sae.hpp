#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "patchsae/errors.hpp"
#include "patchsae/types.hpp"

namespace patchsae {

/// Single-layer ReLU sparse autoencoder over residual-stream vectors.
///
///   h     = relu((z - b_dec) * w_enc + b_enc)
///   z_hat = h * w_dec + b_dec
///
/// Rows of `w_dec` are the latent directions.
template <typename Scalar>
struct SaeParams {
    RowMatrix<Scalar> w_enc;  ///< [d_vit, d_sae]
    Vector<Scalar> b_enc;     ///< [d_sae]
    RowMatrix<Scalar> w_dec;  ///< [d_sae, d_vit]
    Vector<Scalar> b_dec;     ///< [d_vit]

    static SaeParams zeros(int d_vit, int d_sae) {
        return {RowMatrix<Scalar>::Zero(d_vit, d_sae), Vector<Scalar>::Zero(d_sae),
                RowMatrix<Scalar>::Zero(d_sae, d_vit), Vector<Scalar>::Zero(d_vit)};
    }

    int d_vit() const { return static_cast<int>(b_dec.size()); }
    int d_sae() const { return static_cast<int>(b_enc.size()); }

    void validate() const {
        PATCHSAE_REQUIRE(w_enc.rows() == d_vit() && w_enc.cols() == d_sae() && w_dec.rows() == d_sae() &&
                             w_dec.cols() == d_vit(),
                         "sae: inconsistent parameter shapes");
        PATCHSAE_REQUIRE(w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite(),
                         "sae: non-finite parameters");
    }

    template <typename Other>
    SaeParams<Other> cast() const {
        return {w_enc.template cast<Other>(), b_enc.template cast<Other>(), w_dec.template cast<Other>(),
                b_dec.template cast<Other>()};
    }

    SaeParams& operator+=(const SaeParams& o) {
        w_enc += o.w_enc;
        b_enc += o.b_enc;
        w_dec += o.w_dec;
        b_dec += o.b_dec;
        return *this;
    }

    bool operator==(const SaeParams& o) const {
        return w_enc == o.w_enc && b_enc == o.b_enc && w_dec == o.w_dec && b_dec == o.b_dec;
    }
};

using SaeParamsf = SaeParams<float>;
using SaeParamsd = SaeParams<double>;

/// Batched encode: rows of `z` are tokens.
template <typename Derived, typename Scalar>
RowMatrix<Scalar> encode(const Eigen::MatrixBase<Derived>& z, const SaeParams<Scalar>& params) {
    PATCHSAE_REQUIRE(z.cols() == params.d_vit(), "encode: expected " + std::to_string(params.d_vit()) +
                                                      " features, got " + std::to_string(z.cols()));
    PATCHSAE_REQUIRE(z.allFinite(), "encode: non-finite input");
    RowMatrix<Scalar> pre = (z.rowwise() - params.b_dec.transpose()) * params.w_enc;
    pre.rowwise() += params.b_enc.transpose();
    return pre.cwiseMax(Scalar(0));
}

template <typename Scalar>
Vector<Scalar> encode(const Vector<Scalar>& z, const SaeParams<Scalar>& params) {
    return encode(z.transpose(), params).transpose();
}

template <typename Derived, typename Scalar>
RowMatrix<Scalar> decode(const Eigen::MatrixBase<Derived>& h, const SaeParams<Scalar>& params) {
    PATCHSAE_REQUIRE(h.cols() == params.d_sae(), "decode: expected " + std::to_string(params.d_sae()) +
                                                      " latents, got " + std::to_string(h.cols()));
    PATCHSAE_REQUIRE(h.allFinite(), "decode: non-finite input");
    RowMatrix<Scalar> out = h * params.w_dec;
    out.rowwise() += params.b_dec.transpose();
    return out;
}

template <typename Scalar>
Vector<Scalar> decode(const Vector<Scalar>& h, const SaeParams<Scalar>& params) {
    return decode(h.transpose(), params).transpose();
}

struct LossTerms {
    double total = 0.0;
    double mse = 0.0;  ///< mean over tokens and features
    double l1 = 0.0;   ///< mean over tokens of the summed latent activations
};

namespace detail {

template <typename Scalar>
struct Forward {
    RowMatrix<Scalar> centered;  ///< z - b_dec
    RowMatrix<Scalar> pre;       ///< encoder pre-activation
    RowMatrix<Scalar> h;
    RowMatrix<Scalar> error;     ///< z_hat - z
};

template <typename Derived, typename Scalar>
Forward<Scalar> forward(const Eigen::MatrixBase<Derived>& z, const SaeParams<Scalar>& params) {
    PATCHSAE_REQUIRE(z.rows() > 0, "sae_loss: empty batch");
    PATCHSAE_REQUIRE(z.cols() == params.d_vit(), "sae_loss: feature dimension mismatch");
    Forward<Scalar> f;
    f.centered = z.rowwise() - params.b_dec.transpose();
    f.pre = f.centered * params.w_enc;
    f.pre.rowwise() += params.b_enc.transpose();
    f.h = f.pre.cwiseMax(Scalar(0));
    f.error = f.h * params.w_dec;
    f.error.rowwise() += params.b_dec.transpose();
    f.error -= z;
    return f;
}

template <typename Scalar>
LossTerms terms(const Forward<Scalar>& f, double l1_coefficient) {
    const double n = static_cast<double>(f.error.rows());
    LossTerms t;
    t.mse = f.error.template cast<double>().squaredNorm() / (n * static_cast<double>(f.error.cols()));
    t.l1 = f.h.template cast<double>().sum() / n;
    t.total = t.mse + l1_coefficient * t.l1;
    return t;
}

/// Pushes a gradient on the encoder pre-activation back into w_enc, b_enc
/// and (through the centering) b_dec.
template <typename Scalar>
void backprop_pre(const Forward<Scalar>& f, const RowMatrix<Scalar>& d_pre, const SaeParams<Scalar>& params,
                  SaeParams<Scalar>& grad) {
    grad.w_enc.noalias() += f.centered.transpose() * d_pre;
    grad.b_enc += d_pre.colwise().sum().transpose();
    grad.b_dec -= (d_pre * params.w_enc.transpose()).colwise().sum().transpose();
}

} // namespace detail

template <typename Derived, typename Scalar>
LossTerms sae_loss(const Eigen::MatrixBase<Derived>& z, const SaeParams<Scalar>& params, double l1_coefficient) {
    PATCHSAE_REQUIRE(l1_coefficient >= 0.0, "sae_loss: l1 coefficient must be >= 0");
    return detail::terms(detail::forward(z, params), l1_coefficient);
}

/// Loss and its exact gradient with respect to every parameter. `grad` is
/// overwritten. ReLU'(0) is taken as 0. `latent_activity` optionally receives
/// the per-latent activation sum over the batch.
template <typename Derived, typename Scalar>
LossTerms sae_loss_and_grad(const Eigen::MatrixBase<Derived>& z, const SaeParams<Scalar>& params,
                            double l1_coefficient, SaeParams<Scalar>& grad,
                            Vector<Scalar>* latent_activity = nullptr) {
    const auto f = detail::forward(z, params);
    if (latent_activity) *latent_activity = f.h.colwise().sum().transpose();
    const LossTerms t = detail::terms(f, l1_coefficient);
    const auto n = static_cast<Scalar>(z.rows());
    const auto d = static_cast<Scalar>(z.cols());

    grad = SaeParams<Scalar>::zeros(params.d_vit(), params.d_sae());
    const RowMatrix<Scalar> d_out = f.error * (Scalar(2) / (n * d));
    grad.w_dec.noalias() = f.h.transpose() * d_out;
    grad.b_dec = d_out.colwise().sum().transpose();

    RowMatrix<Scalar> d_pre = d_out * params.w_dec.transpose();
    d_pre.array() += static_cast<Scalar>(l1_coefficient) / n;
    d_pre = (f.pre.array() > Scalar(0)).select(d_pre, Scalar(0));
    detail::backprop_pre(f, d_pre, params, grad);
    return t;
}

/// Auxiliary loss that routes the reconstruction residual through latents
/// marked dead, using exponentiated pre-activations. The ghost reconstruction
/// is rescaled per token to half the residual norm, and the loss is rescaled
/// to the main MSE; both scale factors are treated as constants.
/// Adds its gradient into `grad` and returns the loss value.
template <typename Derived, typename Scalar>
double ghost_loss_and_grad(const Eigen::MatrixBase<Derived>& z, const SaeParams<Scalar>& params,
                           const std::vector<LatentId>& dead, SaeParams<Scalar>& grad) {
    if (dead.empty()) return 0.0;
    const auto f = detail::forward(z, params);
    const Eigen::Index n = z.rows();
    const Eigen::Index d = z.cols();
    const auto k = static_cast<Eigen::Index>(dead.size());
    const double main_mse = f.error.template cast<double>().squaredNorm() / static_cast<double>(n * d);

    RowMatrix<Scalar> g(n, k);
    RowMatrix<Scalar> w_dead(k, d);
    for (Eigen::Index j = 0; j < k; ++j) {
        g.col(j) = f.pre.col(dead[static_cast<std::size_t>(j)]).array().exp().matrix();
        w_dead.row(j) = params.w_dec.row(dead[static_cast<std::size_t>(j)]);
    }
    const RowMatrix<Scalar> residual = -f.error;
    RowMatrix<Scalar> ghost = g * w_dead;
    Vector<Scalar> scale(n);
    for (Eigen::Index r = 0; r < n; ++r)
        scale[r] = residual.row(r).norm() / (Scalar(2) * ghost.row(r).norm() + Scalar(1e-6));
    const RowMatrix<Scalar> scaled = scale.asDiagonal() * ghost;
    const RowMatrix<Scalar> diff = scaled - residual;
    const double ghost_mse = diff.template cast<double>().squaredNorm() / static_cast<double>(n * d);
    const double rescale = main_mse / (ghost_mse + 1e-6);

    const RowMatrix<Scalar> d_scaled = diff * static_cast<Scalar>(2.0 * rescale / static_cast<double>(n * d));
    const RowMatrix<Scalar> d_ghost = scale.asDiagonal() * d_scaled;
    const RowMatrix<Scalar> d_w_dead = g.transpose() * d_ghost;
    const RowMatrix<Scalar> d_g_pre = (d_ghost * w_dead.transpose()).cwiseProduct(g);

    RowMatrix<Scalar> d_pre = RowMatrix<Scalar>::Zero(n, params.d_sae());
    for (Eigen::Index j = 0; j < k; ++j) {
        const auto s = dead[static_cast<std::size_t>(j)];
        d_pre.col(s) = d_g_pre.col(j);
        grad.w_dec.row(s) += d_w_dead.row(j);
    }
    detail::backprop_pre(f, d_pre, params, grad);
    return rescale * ghost_mse;
}

/// Rescales every decoder row to unit L2 norm (zero rows are left alone).
template <typename Scalar>
void normalize_decoder_rows(SaeParams<Scalar>& params) {
    for (Eigen::Index s = 0; s < params.w_dec.rows(); ++s) {
        const Scalar norm = params.w_dec.row(s).norm();
        if (norm > Scalar(0)) params.w_dec.row(s) /= norm;
    }
}

} // namespace patchsae
