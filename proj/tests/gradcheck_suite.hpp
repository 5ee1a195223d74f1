#pragma once

// Central finite-difference checks for every autodiff op. Compiled against the
// double-precision build of the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nrr/mi.hpp"
#include "nrr/tensor.hpp"
#include "nrr/vae.hpp"

namespace nrr::test {

inline constexpr double kFdStep = 1e-4;
// below this magnitude gradients are compared in absolute terms
inline constexpr double kRelFloor = 1e-4;

inline ad::Tensor random_tensor(ad::Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1)
{
    ad::Tensor t(std::move(s));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

// Max relative error between backward() and central differences of `loss`
// with respect to every element of `inputs`.
inline double gradcheck(std::vector<ad::Var> inputs, const std::function<ad::Var()>& loss)
{
    for (auto& v : inputs) {
        v.set_requires_grad(true);
        v.grad_buffer().fill(0);
    }
    ad::backward(loss());
    double worst = 0;
    for (auto& v : inputs) {
        const ad::Tensor analytic = v.grad();
        for (std::size_t i = 0; i < v.value().size(); ++i) {
            const double orig = v.value()[i];
            v.mutable_value()[i] = orig + kFdStep;
            const double up = loss().item();
            v.mutable_value()[i] = orig - kFdStep;
            const double down = loss().item();
            v.mutable_value()[i] = orig;
            const double a = analytic[i];
            auto rel = [a](double numeric) {
                return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kRelFloor});
            };
            double err = rel((up - down) / (2 * kFdStep));
            if (err >= 1e-3) {
                // a relu kink within one step: the central difference mixes
                // two slopes, the analytic value must match one side
                const double mid = loss().item();
                err = std::min({err, rel((up - mid) / kFdStep), rel((mid - down) / kFdStep)});
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Weighted sum so every output element contributes a distinct upstream gradient.
inline ad::Var probe(const ad::Var& out, const ad::Tensor& w) { return ad::reduce_sum(ad::mul(out, ad::constant(w))); }

// Values kept away from the kinks of relu/clamp so differences are smooth.
inline ad::Tensor off_kink(ad::Shape s, std::mt19937_64& rng)
{
    ad::Tensor t = random_tensor(std::move(s), rng, 0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (auto& v : t.data())
        if (sign(rng)) v = -v;
    return t;
}

inline std::map<std::string, double> op_gradchecks(std::uint64_t seed)
{
    using namespace ad;
    std::mt19937_64 rng(seed);
    std::map<std::string, double> r;

    {
        Var x = parameter(random_tensor({3, 4}, rng)), w = parameter(random_tensor({5, 4}, rng)),
            b = parameter(random_tensor({5}, rng));
        Tensor p = random_tensor({3, 5}, rng);
        r["affine"] = gradcheck({x, w, b}, [&] { return probe(affine(x, w, b), p); });
    }
    {
        Var x = parameter(random_tensor({2, 2, 5, 4, 3}, rng)), k = parameter(random_tensor({3, 2, 3, 3, 3}, rng)),
            b = parameter(random_tensor({3}, rng));
        const ConvGeometry g{2, 1, {0, 0, 0}};
        Tensor p = random_tensor({2, 3, 3, 2, 2}, rng);
        r["conv3d"] = gradcheck({x, k, b}, [&] { return probe(conv3d(x, k, b, g), p); });
    }
    {
        Var x = parameter(random_tensor({2, 3, 2, 3, 2}, rng)), k = parameter(random_tensor({3, 2, 3, 3, 3}, rng)),
            b = parameter(random_tensor({2}, rng));
        const ConvGeometry g{2, 1, {1, 0, 1}};
        Tensor p = random_tensor({2, 2, 4, 5, 4}, rng);
        r["conv_transpose3d"] = gradcheck({x, k, b}, [&] { return probe(conv_transpose3d(x, k, b, g), p); });
    }
    {
        Var x = parameter(random_tensor({2, 1, 4, 2, 4}, rng));
        Tensor p = random_tensor({2, 1, 2, 1, 2}, rng);
        r["avg_pool3d"] = gradcheck({x}, [&] { return probe(avg_pool3d(x, 2), p); });
        Tensor q = random_tensor({2, 1, 8, 4, 8}, rng);
        r["upsample3d"] = gradcheck({x}, [&] { return probe(upsample3d(x, 2), q); });
    }
    {
        Var x = parameter(off_kink({4, 3}, rng));
        Tensor p = random_tensor({4, 3}, rng);
        r["relu"] = gradcheck({x}, [&] { return probe(relu(x), p); });
        r["sigmoid"] = gradcheck({x}, [&] { return probe(sigmoid(x), p); });
        r["exp"] = gradcheck({x}, [&] { return probe(exp(x), p); });
        r["clamp"] = gradcheck({x}, [&] { return probe(clamp(x, -0.5, 0.55), p); });
        r["scale"] = gradcheck({x}, [&] { return probe(scale(x, -1.7), p); });
        r["standardize_cols"] = gradcheck({x}, [&] { return probe(standardize_cols(x, 1e-2), p); });
        r["add_scalar"] = gradcheck({x}, [&] { return probe(add_scalar(x, 0.3), p); });
        r["reduce_mean"] = gradcheck({x}, [&] { return scale(reduce_mean(mul(x, x)), 3); });
        r["reshape"] = gradcheck({x}, [&] { return probe(reshape(x, {3, 4}), p.reshaped({3, 4})); });
        r["bce_with_logits"] = gradcheck({x}, [&] {
            Tensor t({4, 3});
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = i % 2;
            return bce_with_logits(x, t);
        });
    }
    {
        Var x = parameter(random_tensor({4, 3}, rng, 0.2, 2.0));
        Tensor p = random_tensor({4, 3}, rng);
        r["log"] = gradcheck({x}, [&] { return probe(log(x), p); });
    }
    {
        Var a = parameter(random_tensor({3, 4}, rng)), b = parameter(random_tensor({3, 4}, rng));
        Tensor p = random_tensor({3, 4}, rng);
        r["add"] = gradcheck({a, b}, [&] { return probe(add(a, b), p); });
        r["sub"] = gradcheck({a, b}, [&] { return probe(sub(a, b), p); });
        r["mul"] = gradcheck({a, b}, [&] { return probe(mul(a, b), p); });
        Tensor q = random_tensor({3, 8}, rng);
        r["concat_cols"] = gradcheck({a, b}, [&] { return probe(concat_cols(a, b), q); });
        Tensor s = random_tensor({3, 2}, rng);
        r["slice_cols"] = gradcheck({a}, [&] { return probe(slice_cols(a, 1, 3), s); });
        r["reduce_sum"] = gradcheck({a}, [&] { return reduce_sum(mul(a, a)); });
    }
    {
        Var mu = parameter(random_tensor({3, 2}, rng)), sigma = parameter(random_tensor({3, 2}, rng, 0.2, 1.5));
        Tensor eps = random_tensor({3, 2}, rng, -2, 2);
        Tensor p = random_tensor({3, 2}, rng);
        r["gaussian_sample"] = gradcheck({mu, sigma}, [&] { return probe(gaussian_sample(mu, sigma, eps), p); });
    }
    return r;
}

// Tiny VAE (grid 4x4x2, N_h = 3, N_d = 2) with the full objective
// nll + kl + kappa * mi, differentiated with respect to every encoder and
// decoder parameter.
inline double full_objective_gradcheck(std::uint64_t seed)
{
    using namespace ad;
    VaeConfig cfg;
    cfg.grid = {4, 4, 2};
    cfg.hcr_dim = 3;
    cfg.dlr_dim = 2;
    cfg.max_bottleneck = 16;
    cfg.disc_hidden = 8;
    cfg.seed = seed;
    VaeModel model(cfg);
    std::mt19937_64 rng(seed + 100);

    const std::size_t n = 3;
    Tensor x = random_tensor({n, 1, 2, 4, 4}, rng);
    Tensor mask({n, 1, 2, 4, 4});
    std::bernoulli_distribution in(0.7);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = in(rng) ? 1 : 0;
        if (!mask[i]) x[i] = 0;
    }
    Tensor h = random_tensor({n, 3}, rng);
    Tensor eps = random_tensor({n, 2}, rng, -1.5, 1.5);
    // shift the discriminator output bias so the MI relu is active
    model.discriminator().params().get("fc2.bias").mutable_value()[0] = 2.0;

    auto objective = [&] {
        const auto post = model.encode(constant(x));
        const Var d = gaussian_sample(post.mu, exp(post.log_sigma), eps);
        const Var recon = model.decode(constant(h), d);
        const ElboTerms t = elbo_terms(constant(x), mask, recon, post.mu, post.log_sigma, 1.0);
        const Var mi = mi_estimate(model.discriminator().logits(concat_cols(constant(h), standardize_cols(post.mu, 1e-2))));
        return add(scale(add(t.nll, t.kl), 1.0 / n), scale(mi, 1.0));
    };
    std::vector<Var> params;
    for (auto& [name, v] : model.encoder().items()) params.push_back(v);
    for (auto& [name, v] : model.decoder().items()) params.push_back(v);
    model.discriminator().params().set_requires_grad(false);
    return gradcheck(params, objective);
}

}  // namespace nrr::test
