#include "nrr/mi.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nrr {

std::vector<std::size_t> random_derangement(std::size_t n, std::mt19937_64& rng)
{
    if (n < 2) throw Error("derangement needs at least 2 elements");
    std::vector<std::size_t> p(n);
    // rejection sampling from uniform permutations keeps the result uniform
    // over derangements; the acceptance rate tends to 1/e
    for (;;) {
        std::iota(p.begin(), p.end(), std::size_t{0});
        std::shuffle(p.begin(), p.end(), rng);
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) ok = p[i] != i;
        if (ok) return p;
    }
}

MiBatch build_mi_batch(const Eigen::MatrixXd& h, const Eigen::MatrixXd& d, std::mt19937_64& rng)
{
    if (h.rows() != d.rows()) throw ShapeError("build_mi_batch: H and D have different row counts");
    if (h.rows() < 2) throw Error("build_mi_batch: need at least 2 subjects");
    const auto n = static_cast<std::size_t>(h.rows());
    MiBatch b;
    b.perm = random_derangement(n, rng);
    b.joint.resize(h.rows(), h.cols() + d.cols());
    b.product.resize(h.rows(), h.cols() + d.cols());
    b.joint << h, d;
    for (std::size_t k = 0; k < n; ++k) {
        b.product.row(k) << h.row(k), d.row(b.perm[k]);
    }
    return b;
}

Discriminator::Discriminator(std::size_t input_dim, std::size_t hidden, std::mt19937_64& rng)
  : input_dim_(input_dim), hidden_(hidden)
{
    params_.add("fc1.weight", ad::uniform_init({hidden, input_dim}, input_dim, rng));
    params_.add("fc1.bias", ad::uniform_init({hidden}, input_dim, rng));
    params_.add("fc2.weight", ad::uniform_init({1, hidden}, hidden, rng));
    params_.add("fc2.bias", ad::uniform_init({1}, hidden, rng));
}

ad::Var Discriminator::logits(const ad::Var& x) const
{
    const ad::Var hid = ad::relu(ad::affine(x, params_.get("fc1.weight"), params_.get("fc1.bias")));
    return ad::affine(hid, params_.get("fc2.weight"), params_.get("fc2.bias"));
}

Eigen::VectorXd Discriminator::probabilities(const Eigen::MatrixXd& x) const
{
    const ad::Var z = logits(ad::constant(to_tensor(x)));
    Eigen::VectorXd p(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) p[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(z.value()[i])));
    return p;
}

namespace {

const double kLogitClamp = std::log((1.0 - kProbClamp) / kProbClamp);

}  // namespace

ad::Var mi_estimate(const ad::Var& joint_logits)
{
    // log(D/(1-D)) of a sigmoid output is the logit itself; clamping D to
    // [eps, 1-eps] is clamping the logit to +-log((1-eps)/eps).
    const auto c = static_cast<ad::Scalar>(kLogitClamp);
    return ad::reduce_mean(ad::relu(ad::clamp(joint_logits, -c, c)));
}

double mi_estimate(const Eigen::MatrixXd& joint, const Discriminator& disc)
{
    const Eigen::VectorXd p = disc.probabilities(joint);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
        acc += std::max(0.0, std::log(q / (1.0 - q)));
    }
    return acc / static_cast<double>(p.size());
}

ad::Tensor to_tensor(const Eigen::MatrixXd& m)
{
    ad::Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t[r * m.cols() + c] = static_cast<ad::Scalar>(m(r, c));
    return t;
}

Eigen::MatrixXd to_matrix(const ad::Tensor& t)
{
    if (t.rank() != 2) throw ShapeError("to_matrix: expected rank-2 tensor, got " + ad::to_string(t.shape()));
    Eigen::MatrixXd m(t.dim(0), t.dim(1));
    for (std::size_t r = 0; r < t.dim(0); ++r)
        for (std::size_t c = 0; c < t.dim(1); ++c) m(r, c) = t[r * t.dim(1) + c];
    return m;
}

namespace {

struct Stacked {
    ad::Tensor x;
    ad::Tensor y;
};

Stacked stack(const MiBatch& b, const std::vector<std::size_t>* rows = nullptr)
{
    const auto n = static_cast<std::size_t>(b.joint.rows());
    const auto f = static_cast<std::size_t>(b.joint.cols());
    std::vector<std::size_t> all;
    if (!rows) {
        all.resize(2 * n);
        std::iota(all.begin(), all.end(), std::size_t{0});
        rows = &all;
    }
    Stacked s{ad::Tensor({rows->size(), f}), ad::Tensor({rows->size()})};
    for (std::size_t i = 0; i < rows->size(); ++i) {
        const std::size_t r = (*rows)[i];
        const bool joint = r < n;
        const auto src = joint ? b.joint.row(r) : b.product.row(r - n);
        for (std::size_t c = 0; c < f; ++c) s.x[i * f + c] = static_cast<ad::Scalar>(src[c]);
        s.y[i] = joint ? 1 : 0;
    }
    return s;
}

}  // namespace

DiscriminatorStats evaluate_discriminator(const MiBatch& batch, const Discriminator& disc)
{
    const Stacked s = stack(batch);
    const ad::Var z = disc.logits(ad::constant(s.x));
    DiscriminatorStats st;
    st.bce = ad::bce_with_logits(z, s.y).item();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < s.y.size(); ++i) correct += ((z.value()[i] > 0) == (s.y[i] > 0.5)) ? 1 : 0;
    st.accuracy = static_cast<double>(correct) / static_cast<double>(s.y.size());
    return st;
}

std::vector<double> train_discriminator(Discriminator& disc, ad::Adam& adam, std::size_t epochs,
                                        const std::function<MiBatch()>& next_batch, std::size_t minibatch,
                                        std::mt19937_64* shuffle_rng)
{
    std::vector<double> losses;
    losses.reserve(epochs);
    for (std::size_t e = 0; e < epochs; ++e) {
        const MiBatch batch = next_batch();
        if (batch.rows() == 0) throw Error("train_discriminator: empty batch");
        const std::size_t total = 2 * batch.rows();
        if (minibatch == 0 || minibatch >= total) {
            const Stacked s = stack(batch);
            disc.params().zero_grad();
            const ad::Var loss = ad::bce_with_logits(disc.logits(ad::constant(s.x)), s.y);
            ad::backward(loss);
            adam.step();
            losses.push_back(loss.item());
            continue;
        }
        std::vector<std::size_t> order(total);
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (shuffle_rng) std::shuffle(order.begin(), order.end(), *shuffle_rng);
        double acc = 0;
        for (std::size_t start = 0; start < total; start += minibatch) {
            const std::vector<std::size_t> rows(order.begin() + start,
                                                order.begin() + std::min(total, start + minibatch));
            const Stacked s = stack(batch, &rows);
            disc.params().zero_grad();
            const ad::Var loss = ad::bce_with_logits(disc.logits(ad::constant(s.x)), s.y);
            ad::backward(loss);
            adam.step();
            acc += loss.item() * static_cast<double>(rows.size());
        }
        losses.push_back(acc / static_cast<double>(total));
    }
    return losses;
}

std::vector<double> train_discriminator(const MiBatch& batch, Discriminator& disc, ad::Adam& adam, std::size_t epochs)
{
    return train_discriminator(disc, adam, epochs, [&batch] { return batch; });
}

}  // namespace nrr
