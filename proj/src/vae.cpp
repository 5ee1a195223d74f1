#include "nrr/vae.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

namespace nrr {

using nlohmann::json;

namespace {

constexpr std::size_t kKernel = 3;
constexpr ad::ConvGeometry kDown{2, 1, {0, 0, 0}};

std::string family_name(EncoderFamily f) { return f == EncoderFamily::Conv3d ? "conv3d" : "fc"; }

EncoderFamily family_from(const std::string& s)
{
    if (s == "conv3d") return EncoderFamily::Conv3d;
    if (s == "fc") return EncoderFamily::FullyConnected;
    throw Error("unknown encoder family '" + s + "' (expected conv3d or fc)");
}

template <typename T>
void read_key(const json& j, const char* key, T& out)
{
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) throw Error("unknown key '" + k + "' in " + where);
    }
}

}  // namespace

void VaeConfig::validate() const
{
    for (auto g : grid) {
        if (g == 0) throw Error("vae config: grid dims must be positive");
    }
    if (hcr_dim == 0 || dlr_dim == 0) throw Error("vae config: hcr_dim and dlr_dim must be >= 1");
    if (!(sigma_obs > 0)) throw Error("vae config: sigma_obs must be positive");
    if (!(kappa >= 0)) throw Error("vae config: kappa must be non-negative");
    if (vae_batch == 0 || disc_period == 0 || disc_hidden == 0 || disc_views == 0) {
        throw Error("vae config: batch size, discriminator period, hidden width and views must be positive");
    }
    if (!(lr > 0) || !(disc_lr > 0)) throw Error("vae config: learning rates must be positive");
    if (base_channels == 0 || max_bottleneck == 0) throw Error("vae config: channel settings must be positive");
    if (family == EncoderFamily::FullyConnected && (fc_pool == 0 || fc_hidden == 0)) {
        throw Error("vae config: fc_pool and fc_hidden must be positive");
    }
    if (mi_noise < 0) throw Error("vae config: mi_noise must be non-negative");
    if (augment.rotation_deg < 0) throw Error("vae config: rotation must be non-negative");
}

void to_json(json& j, const VaeConfig& c)
{
    j = json{{"grid", c.grid},
             {"hcr_dim", c.hcr_dim},
             {"dlr_dim", c.dlr_dim},
             {"sigma_obs", c.sigma_obs},
             {"kappa", c.kappa},
             {"vae_epochs", c.vae_epochs},
             {"vae_batch", c.vae_batch},
             {"disc_period", c.disc_period},
             {"disc_epochs", c.disc_epochs},
             {"disc_batch", c.disc_batch},
             {"disc_hidden", c.disc_hidden},
             {"disc_views", c.disc_views},
             {"mi_input", c.mi_input == MiInput::Sample ? "sample" : "mean"},
             {"mi_noise", c.mi_noise},
             {"lr", c.lr},
             {"disc_lr", c.disc_lr},
             {"encoder_family", family_name(c.family)},
             {"base_channels", c.base_channels},
             {"max_bottleneck", c.max_bottleneck},
             {"fc_pool", c.fc_pool},
             {"fc_hidden", c.fc_hidden},
             {"augment", {{"rotation_deg", c.augment.rotation_deg}, {"jitter_voxels", c.augment.jitter_voxels}}},
             {"seed", c.seed}};
}

void from_json(const json& j, VaeConfig& c)
{
    reject_unknown(j,
                   {"grid", "hcr_dim", "dlr_dim", "sigma_obs", "kappa", "vae_epochs", "vae_batch", "disc_period",
                    "disc_epochs", "disc_batch", "disc_hidden", "disc_views", "mi_input", "mi_noise", "lr", "disc_lr", "encoder_family", "base_channels",
                    "max_bottleneck", "fc_pool", "fc_hidden", "augment", "seed"},
                   "vae config");
    read_key(j, "grid", c.grid);
    read_key(j, "hcr_dim", c.hcr_dim);
    read_key(j, "dlr_dim", c.dlr_dim);
    read_key(j, "sigma_obs", c.sigma_obs);
    read_key(j, "kappa", c.kappa);
    read_key(j, "vae_epochs", c.vae_epochs);
    read_key(j, "vae_batch", c.vae_batch);
    read_key(j, "disc_period", c.disc_period);
    read_key(j, "disc_epochs", c.disc_epochs);
    read_key(j, "disc_batch", c.disc_batch);
    read_key(j, "disc_hidden", c.disc_hidden);
    read_key(j, "disc_views", c.disc_views);
    if (j.contains("mi_input")) {
        const auto v = j.at("mi_input").get<std::string>();
        if (v != "sample" && v != "mean") throw Error("vae config: mi_input must be 'sample' or 'mean'");
        c.mi_input = v == "sample" ? MiInput::Sample : MiInput::Mean;
    }
    read_key(j, "mi_noise", c.mi_noise);
    read_key(j, "lr", c.lr);
    read_key(j, "disc_lr", c.disc_lr);
    if (j.contains("encoder_family")) c.family = family_from(j.at("encoder_family").get<std::string>());
    read_key(j, "base_channels", c.base_channels);
    read_key(j, "max_bottleneck", c.max_bottleneck);
    read_key(j, "fc_pool", c.fc_pool);
    read_key(j, "fc_hidden", c.fc_hidden);
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        reject_unknown(a, {"rotation_deg", "jitter_voxels"}, "vae.augment");
        read_key(a, "rotation_deg", c.augment.rotation_deg);
        read_key(a, "jitter_voxels", c.augment.jitter_voxels);
    }
    read_key(j, "seed", c.seed);
    c.validate();
}

// ---- model ------------------------------------------------------------------

VaeModel::VaeModel(VaeConfig cfg) : cfg_(std::move(cfg))
{
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t nd = cfg_.dlr_dim, nh = cfg_.hcr_dim;
    levels_.push_back({1, cfg_.grid[2], cfg_.grid[1], cfg_.grid[0]});

    if (cfg_.family == EncoderFamily::Conv3d) {
        auto units = [](const ad::Shape& s) { return ad::numel(s); };
        std::size_t channels = cfg_.base_channels;
        while (units(levels_.back()) > cfg_.max_bottleneck) {
            const ad::Shape& prev = levels_.back();
            if (prev[1] == 1 && prev[2] == 1 && prev[3] == 1) break;
            ad::Shape next{channels, ad::conv_out_size(prev[1], kKernel, kDown),
                           ad::conv_out_size(prev[2], kKernel, kDown), ad::conv_out_size(prev[3], kKernel, kDown)};
            const std::size_t i = levels_.size() - 1;
            enc_.add("conv" + std::to_string(i) + ".weight",
                     ad::uniform_init({channels, prev[0], kKernel, kKernel, kKernel}, prev[0] * 27, rng));
            enc_.add("conv" + std::to_string(i) + ".bias", ad::uniform_init({channels}, prev[0] * 27, rng));
            levels_.push_back(next);
            channels *= 2;
        }
        const std::size_t bottleneck = bottleneck_units();
        enc_.add("head.weight", ad::uniform_init({2 * nd, bottleneck}, bottleneck, rng));
        enc_.add("head.bias", ad::uniform_init({2 * nd}, bottleneck, rng));

        dec_.add("fc.weight", ad::uniform_init({bottleneck, nh + nd}, nh + nd, rng));
        dec_.add("fc.bias", ad::uniform_init({bottleneck}, nh + nd, rng));
        for (std::size_t i = levels_.size() - 1; i >= 1; --i) {
            const std::size_t cin = levels_[i][0], cout = levels_[i - 1][0];
            dec_.add("deconv" + std::to_string(i) + ".weight",
                     ad::uniform_init({cin, cout, kKernel, kKernel, kKernel}, cout * 27, rng));
            dec_.add("deconv" + std::to_string(i) + ".bias", ad::uniform_init({cout}, cout * 27, rng));
        }
    } else {
        const std::size_t f = cfg_.fc_pool;
        for (auto g : cfg_.grid) {
            if (g % f) throw Error("vae config: grid dims must be divisible by fc_pool for the fc encoder family");
        }
        levels_.push_back({1, cfg_.grid[2] / f, cfg_.grid[1] / f, cfg_.grid[0] / f});
        const std::size_t pooled = bottleneck_units(), hid = cfg_.fc_hidden;
        enc_.add("fc1.weight", ad::uniform_init({hid, pooled}, pooled, rng));
        enc_.add("fc1.bias", ad::uniform_init({hid}, pooled, rng));
        enc_.add("head.weight", ad::uniform_init({2 * nd, hid}, hid, rng));
        enc_.add("head.bias", ad::uniform_init({2 * nd}, hid, rng));
        dec_.add("fc1.weight", ad::uniform_init({hid, nh + nd}, nh + nd, rng));
        dec_.add("fc1.bias", ad::uniform_init({hid}, nh + nd, rng));
        dec_.add("fc2.weight", ad::uniform_init({pooled, hid}, hid, rng));
        dec_.add("fc2.bias", ad::uniform_init({pooled}, hid, rng));
    }
    disc_ = Discriminator(nh + nd, cfg_.disc_hidden, rng);
}

std::size_t VaeModel::bottleneck_units() const { return ad::numel(levels_.back()); }

VaeModel::EncoderOutput VaeModel::encode(const ad::Var& x) const
{
    const ad::Shape& xs = x.shape();
    const ad::Shape expect{1, cfg_.grid[2], cfg_.grid[1], cfg_.grid[0]};
    if (xs.size() != 5 || ad::Shape(xs.begin() + 1, xs.end()) != expect) {
        throw ShapeError("encode: input " + ad::to_string(xs) + " does not match configured grid " +
                         to_string(cfg_.grid));
    }
    const std::size_t n = xs[0], nd = cfg_.dlr_dim;
    ad::Var a = x;
    ad::Var flat;
    if (cfg_.family == EncoderFamily::Conv3d) {
        for (std::size_t i = 0; i + 1 < levels_.size(); ++i) {
            const std::string k = "conv" + std::to_string(i);
            a = ad::relu(ad::conv3d(a, enc_.get(k + ".weight"), enc_.get(k + ".bias"), kDown));
        }
        flat = ad::reshape(a, {n, bottleneck_units()});
    } else {
        a = ad::avg_pool3d(a, cfg_.fc_pool);
        a = ad::reshape(a, {n, bottleneck_units()});
        flat = ad::relu(ad::affine(a, enc_.get("fc1.weight"), enc_.get("fc1.bias")));
    }
    const ad::Var head = ad::affine(flat, enc_.get("head.weight"), enc_.get("head.bias"));
    return {ad::slice_cols(head, 0, nd), ad::slice_cols(head, nd, 2 * nd)};
}

ad::Var VaeModel::decode(const ad::Var& h, const ad::Var& d) const
{
    if (h.shape().size() != 2 || h.shape()[1] != cfg_.hcr_dim || d.shape().size() != 2 ||
        d.shape()[1] != cfg_.dlr_dim || h.shape()[0] != d.shape()[0]) {
        throw ShapeError("decode: expected h [N," + std::to_string(cfg_.hcr_dim) + "] and d [N," +
                         std::to_string(cfg_.dlr_dim) + "], got " + ad::to_string(h.shape()) + " and " +
                         ad::to_string(d.shape()));
    }
    const std::size_t n = h.shape()[0];
    const ad::Var z = ad::concat_cols(h, d);
    if (cfg_.family == EncoderFamily::FullyConnected) {
        ad::Var a = ad::relu(ad::affine(z, dec_.get("fc1.weight"), dec_.get("fc1.bias")));
        a = ad::affine(a, dec_.get("fc2.weight"), dec_.get("fc2.bias"));
        ad::Shape s{n};
        s.insert(s.end(), levels_.back().begin(), levels_.back().end());
        return ad::upsample3d(ad::reshape(a, s), cfg_.fc_pool);
    }
    ad::Var a = ad::affine(z, dec_.get("fc.weight"), dec_.get("fc.bias"));
    ad::Shape s{n};
    s.insert(s.end(), levels_.back().begin(), levels_.back().end());
    a = ad::reshape(a, s);
    if (levels_.size() > 1) a = ad::relu(a);
    for (std::size_t i = levels_.size() - 1; i >= 1; --i) {
        ad::ConvGeometry g = kDown;
        for (int axis = 0; axis < 3; ++axis) {
            // smallest output padding that restores the finer level exactly
            g.output_padding[axis] = levels_[i - 1][axis + 1] - (2 * levels_[i][axis + 1] - 1);
        }
        const std::string k = "deconv" + std::to_string(i);
        a = ad::conv_transpose3d(a, dec_.get(k + ".weight"), dec_.get(k + ".bias"), g);
        if (i > 1) a = ad::relu(a);
    }
    return a;
}

ad::Checkpoint VaeModel::to_checkpoint(const json& schedule_state) const
{
    ad::Checkpoint ckpt;
    ckpt.meta["kind"] = "nrr-vae";
    ckpt.meta["vae_config"] = cfg_;
    ckpt.meta["schedule"] = schedule_state;
    ad::export_params(ckpt, "encoder", enc_);
    ad::export_params(ckpt, "decoder", dec_);
    ad::export_params(ckpt, "discriminator", disc_.params());
    return ckpt;
}

VaeModel VaeModel::from_checkpoint(const ad::Checkpoint& ckpt)
{
    if (ckpt.meta.value("kind", std::string{}) != "nrr-vae") throw Error("checkpoint is not a VAE checkpoint");
    VaeModel m(ckpt.meta.at("vae_config").get<VaeConfig>());
    ad::import_params(ckpt, "encoder", m.enc_);
    ad::import_params(ckpt, "decoder", m.dec_);
    ad::import_params(ckpt, "discriminator", m.disc_.params());
    return m;
}

// ---- batching -------------------------------------------------------------------

ad::Tensor volume_batch(std::span<const MaskedVolume* const> items)
{
    if (items.empty()) throw Error("volume_batch: empty batch");
    const Dims& d = items.front()->volume.dims();
    const std::size_t vox = d[0] * d[1] * d[2];
    ad::Tensor t({items.size(), 1, d[2], d[1], d[0]});
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i]->volume.dims() != d) throw ShapeError("volume_batch: subjects have different grid dims");
        // x-fastest storage coincides with row-major [z][y][x]
        std::copy(items[i]->volume.voxels().begin(), items[i]->volume.voxels().end(), t.ptr() + i * vox);
    }
    return t;
}

ad::Tensor mask_batch(std::span<const MaskedVolume* const> items)
{
    if (items.empty()) throw Error("mask_batch: empty batch");
    const Dims& d = items.front()->mask.dims();
    const std::size_t vox = d[0] * d[1] * d[2];
    ad::Tensor t({items.size(), 1, d[2], d[1], d[0]});
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i]->mask.dims() != d) throw ShapeError("mask_batch: subjects have different grid dims");
        std::transform(items[i]->mask.voxels().begin(), items[i]->mask.voxels().end(), t.ptr() + i * vox,
                       [](std::uint8_t m) { return m ? ad::Scalar(1) : ad::Scalar(0); });
    }
    return t;
}

ad::Tensor hcr_batch(std::span<const HcrVector* const> items)
{
    ad::Tensor t({items.size(), kHcrCount});
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t k = 0; k < kHcrCount; ++k) t[i * kHcrCount + k] = static_cast<ad::Scalar>((*items[i])[k]);
    return t;
}

namespace {

void check_grid(const MaskedVolume& x, const VaeConfig& cfg)
{
    if (x.volume.dims() != cfg.grid) {
        throw ShapeError("subject grid " + to_string(x.volume.dims()) + " does not match model grid " +
                         to_string(cfg.grid));
    }
}

ad::Tensor row_tensor(std::span<const double> v)
{
    ad::Tensor t({1, v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<ad::Scalar>(v[i]);
    return t;
}

double masked_sq_error(const Volume& target, const Mask& mask, const float* recon, std::size_t& count)
{
    double acc = 0;
    count = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (!mask[i]) continue;
        const double r = static_cast<double>(target[i]) - static_cast<double>(recon[i]);
        acc += r * r;
        ++count;
    }
    return acc;
}

}  // namespace

LatentPosterior encode(const MaskedVolume& x, const VaeModel& model)
{
    check_grid(x, model.config());
    const MaskedVolume* items[] = {&x};
    const auto out = model.encode(ad::constant(volume_batch(items)));
    LatentPosterior p;
    for (std::size_t i = 0; i < model.config().dlr_dim; ++i) {
        p.mu.push_back(out.mu.value()[i]);
        p.sigma.push_back(std::exp(static_cast<double>(out.log_sigma.value()[i])));
    }
    return p;
}

Volume decode(const HcrVector& h, std::span<const double> d, const VaeModel& model)
{
    const VaeConfig& cfg = model.config();
    if (d.size() != cfg.dlr_dim) throw ShapeError("decode: d has " + std::to_string(d.size()) + " entries, model expects " + std::to_string(cfg.dlr_dim));
    if (cfg.hcr_dim != kHcrCount) throw ShapeError("decode: model hcr_dim differs from the HCR vector length");
    const ad::Var out = model.decode(ad::constant(row_tensor(h)), ad::constant(row_tensor(d)));
    Volume v(cfg.grid, {1.0, 1.0, 1.0});
    std::copy(out.value().data().begin(), out.value().data().end(), v.voxels().begin());
    return v;
}

ElboTerms elbo_terms(const ad::Var& x, const ad::Tensor& mask, const ad::Var& recon, const ad::Var& mu,
                     const ad::Var& log_sigma, double sigma_obs)
{
    if (mask.shape() != x.shape()) throw ShapeError("elbo: mask shape " + ad::to_string(mask.shape()) + " vs input " + ad::to_string(x.shape()));
    double in_mask = 0;
    for (ad::Scalar m : mask.data()) in_mask += m;
    if (in_mask == 0) throw Error("elbo: empty mask");

    const double var = sigma_obs * sigma_obs;
    const ad::Var diff = ad::sub(x, recon);
    const ad::Var sq = ad::mul(ad::mul(diff, diff), ad::constant(mask));
    const ad::Var nll = ad::add_scalar(ad::scale(ad::reduce_sum(sq), static_cast<ad::Scalar>(0.5 / var)),
                                       static_cast<ad::Scalar>(in_mask * 0.5 * std::log(2.0 * std::numbers::pi * var)));

    const ad::Var two_ls = ad::scale(log_sigma, 2);
    const ad::Var inner = ad::sub(ad::add(ad::mul(mu, mu), ad::exp(two_ls)), two_ls);
    const auto count = static_cast<ad::Scalar>(mu.value().size());
    const ad::Var kl = ad::scale(ad::add_scalar(ad::reduce_sum(inner), -count), 0.5);
    return {nll, kl};
}

double kl_divergence(std::span<const double> mu, std::span<const double> sigma)
{
    if (mu.size() != sigma.size()) throw ShapeError("kl_divergence: mu/sigma length mismatch");
    double kl = 0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(sigma[i] > 0)) throw Error("kl_divergence: sigma must be positive");
        kl += 0.5 * (mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0 - std::log(sigma[i] * sigma[i]));
    }
    return kl;
}

ElboValue elbo_loss(const MaskedVolume& x, const HcrVector& h, const LatentPosterior& posterior,
                    std::span<const double> eps, const VaeModel& model)
{
    check_grid(x, model.config());
    const std::size_t nd = model.config().dlr_dim;
    if (posterior.mu.size() != nd || posterior.sigma.size() != nd || eps.size() != nd) {
        throw ShapeError("elbo_loss: posterior/eps length must equal dlr_dim");
    }
    std::vector<double> d(nd);
    for (std::size_t i = 0; i < nd; ++i) d[i] = posterior.mu[i] + posterior.sigma[i] * eps[i];
    const Volume recon = decode(h, d, model);

    std::size_t count = 0;
    const double sse = masked_sq_error(x.volume, x.mask, recon.voxels().data(), count);
    if (count == 0) throw Error("elbo_loss: empty mask");
    const double s2 = model.config().sigma_obs * model.config().sigma_obs;
    ElboValue v;
    v.nll = sse / (2.0 * s2) + static_cast<double>(count) * 0.5 * std::log(2.0 * std::numbers::pi * s2);
    v.kl = kl_divergence(posterior.mu, posterior.sigma);
    v.total = v.nll + v.kl;
    return v;
}

MaskedVolume augment(const MaskedVolume& mv, const AugmentConfig& cfg, std::mt19937_64& rng)
{
    MaskedVolume out = mv;
    if (cfg.rotation_deg > 0) {
        std::uniform_real_distribution<double> angle(-cfg.rotation_deg, cfg.rotation_deg);
        out = rotate_axial(out, angle(rng));
    }
    if (cfg.jitter_voxels > 0) {
        const auto j = static_cast<long long>(cfg.jitter_voxels);
        std::uniform_int_distribution<long long> shift(-j, j);
        const std::array<long long, 3> s{shift(rng), shift(rng), shift(rng)};
        out = translate(out, s);
    }
    return out;
}

// ---- training -----------------------------------------------------------------

namespace {

Eigen::MatrixXd hcr_matrix(std::span<const HcrVector> hcr)
{
    Eigen::MatrixXd h(hcr.size(), kHcrCount);
    for (std::size_t i = 0; i < hcr.size(); ++i)
        for (std::size_t k = 0; k < kHcrCount; ++k) h(i, k) = hcr[i][k];
    return h;
}

}  // namespace

namespace {

void posterior_rows(const VaeModel& model, std::span<const MaskedVolume> cohort, Eigen::MatrixXd& mu,
                    Eigen::MatrixXd* sigma)
{
    const std::size_t nd = model.config().dlr_dim;
    mu.resize(cohort.size(), nd);
    if (sigma) sigma->resize(cohort.size(), nd);
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < cohort.size(); start += kChunk) {
        std::vector<const MaskedVolume*> items;
        for (std::size_t i = start; i < std::min(cohort.size(), start + kChunk); ++i) {
            check_grid(cohort[i], model.config());
            items.push_back(&cohort[i]);
        }
        const auto enc = model.encode(ad::constant(volume_batch(items)));
        for (std::size_t r = 0; r < items.size(); ++r)
            for (std::size_t c = 0; c < nd; ++c) {
                mu(start + r, c) = enc.mu.value()[r * nd + c];
                if (sigma) (*sigma)(start + r, c) = std::exp(enc.log_sigma.value()[r * nd + c]);
            }
    }
}

}  // namespace

Eigen::MatrixXd extract_dlr(const VaeModel& model, std::span<const MaskedVolume> cohort)
{
    Eigen::MatrixXd mu;
    posterior_rows(model, cohort, mu, nullptr);
    return mu;
}

ReconstructionError reconstruction_error(std::span<const MaskedVolume> cohort,
                                         const std::function<Volume(std::size_t)>& reconstruct)
{
    ReconstructionError e;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const Volume r = reconstruct(i);
        if (r.dims() != cohort[i].volume.dims()) throw ShapeError("reconstruction has wrong grid");
        std::size_t count = 0;
        const double sse = masked_sq_error(cohort[i].volume, cohort[i].mask, r.voxels().data(), count);
        if (count == 0) throw Error("reconstruction_error: subject with empty mask");
        e.per_subject.push_back(sse / static_cast<double>(count));
    }
    if (e.per_subject.empty()) return e;
    const double n = static_cast<double>(e.per_subject.size());
    e.mean = std::accumulate(e.per_subject.begin(), e.per_subject.end(), 0.0) / n;
    double ss = 0;
    for (double v : e.per_subject) ss += (v - e.mean) * (v - e.mean);
    e.std = std::sqrt(ss / n);
    return e;
}

ReconstructionError reconstruction_error(const VaeModel& model, std::span<const MaskedVolume> cohort,
                                         std::span<const HcrVector> hcr_scaled)
{
    if (cohort.size() != hcr_scaled.size()) throw ShapeError("reconstruction_error: cohort/HCR size mismatch");
    const Eigen::MatrixXd mu = extract_dlr(model, cohort);
    return reconstruction_error(cohort, [&](std::size_t i) {
        const Eigen::VectorXd row = mu.row(static_cast<Eigen::Index>(i)).transpose();
        return decode(hcr_scaled[i], std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), model);
    });
}

namespace {

// variance floor when standardizing posterior means for the discriminator
constexpr ad::Scalar kMiStdFloor = 1e-2;

}  // namespace

TrainResult train(std::span<const MaskedVolume> cohort, std::span<const HcrVector> hcr_scaled, const VaeConfig& cfg,
                  const TrainHooks& hooks)
{
    cfg.validate();
    if (cohort.size() != hcr_scaled.size()) throw ShapeError("train: cohort and HCR matrix are not row-aligned");
    if (cohort.size() < 2) throw Error("train: need at least 2 subjects");
    if (cfg.hcr_dim != kHcrCount) throw Error("train: hcr_dim must equal the HCR vector length");
    for (const auto& mv : cohort) check_grid(mv, cfg);

    TrainResult result{VaeModel(cfg), {}, {}};
    VaeModel& model = result.model;
    ad::Adam adam_enc(model.encoder(), {cfg.lr});
    ad::Adam adam_dec(model.decoder(), {cfg.lr});
    ad::Adam adam_disc(model.discriminator().params(), {cfg.disc_lr});

    std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
    std::array<std::uint64_t, 4> seeds{};
    seq.generate(seeds.begin(), seeds.end());
    std::mt19937_64 shuffle_rng(seeds[0]), aug_rng(seeds[1]), eps_rng(seeds[2]), mi_rng(seeds[3]);
    std::normal_distribution<double> normal(0.0, 1.0);

    const Eigen::MatrixXd h_all = hcr_matrix(hcr_scaled);
    const bool augmenting = cfg.augment.rotation_deg > 0 || cfg.augment.jitter_voxels > 0;
    const auto kappa = static_cast<ad::Scalar>(cfg.kappa);
    std::vector<std::size_t> order(cohort.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    auto notify = [&](const ScheduleEvent& ev, bool begin) {
        if (hooks.on_phase) hooks.on_phase(ev, model, begin);
    };

    bool disc_trained = false;
    for (std::size_t epoch = 1; epoch <= cfg.vae_epochs; ++epoch) {
        const ScheduleEvent vae_ev{Phase::Vae, epoch, 0};
        notify(vae_ev, true);
        model.discriminator().params().set_requires_grad(false);
        model.encoder().set_requires_grad(true);
        model.decoder().set_requires_grad(true);

        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double nll_sum = 0, kl_sum = 0, mi_sum = 0;
        std::size_t mi_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.vae_batch) {
            const std::size_t stop = std::min(order.size(), start + cfg.vae_batch);
            const std::size_t n = stop - start;
            std::vector<MaskedVolume> augmented;
            std::vector<const MaskedVolume*> items;
            std::vector<const HcrVector*> hs;
            augmented.reserve(n);
            for (std::size_t i = start; i < stop; ++i) {
                const MaskedVolume& src = cohort[order[i]];
                if (augmenting) {
                    augmented.push_back(augment(src, cfg.augment, aug_rng));
                    items.push_back(&augmented.back());
                } else {
                    items.push_back(&src);
                }
                hs.push_back(&hcr_scaled[order[i]]);
            }
            const ad::Var x = ad::constant(volume_batch(items));
            const ad::Tensor mask = mask_batch(items);
            const ad::Var h = ad::constant(hcr_batch(hs));

            model.encoder().zero_grad();
            model.decoder().zero_grad();
            const auto post = model.encode(x);
            ad::Tensor eps(post.mu.shape());
            for (auto& e : eps.data()) e = static_cast<ad::Scalar>(normal(eps_rng));
            const ad::Var d = ad::gaussian_sample(post.mu, ad::exp(post.log_sigma), eps);
            const ad::Var recon = model.decode(h, d);
            const ElboTerms terms = elbo_terms(x, mask, recon, post.mu, post.log_sigma, cfg.sigma_obs);
            const auto inv_n = static_cast<ad::Scalar>(1.0 / static_cast<double>(n));
            ad::Var loss = ad::scale(ad::add(terms.nll, terms.kl), inv_n);
            ad::Var d_mi = d;
            if (cfg.mi_input == MiInput::Mean && n >= 2) {
                ad::Tensor noise(post.mu.shape());
                for (auto& e : noise.data()) e = static_cast<ad::Scalar>(cfg.mi_noise * normal(eps_rng));
                d_mi = ad::add(ad::standardize_cols(post.mu, kMiStdFloor), ad::constant(std::move(noise)));
            }
            const ad::Var mi = mi_estimate(model.discriminator().logits(ad::concat_cols(h, d_mi)));
            // an untrained discriminator gives no estimate worth following
            if (cfg.kappa > 0 && disc_trained) loss = ad::add(loss, ad::scale(mi, kappa));

            if (!std::isfinite(loss.item())) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                       ": non-finite total loss");
            }
            ad::backward(loss);
            adam_enc.step();
            adam_dec.step();

            nll_sum += terms.nll.item();
            kl_sum += terms.kl.item();
            mi_sum += mi.item();
            ++mi_batches;
        }
        TraceRow row;
        row.epoch = epoch;
        row.nll = nll_sum / static_cast<double>(cohort.size());
        row.kl = kl_sum / static_cast<double>(cohort.size());
        row.mi = mi_batches ? mi_sum / static_cast<double>(mi_batches) : 0.0;
        row.total = row.nll + row.kl + cfg.kappa * row.mi;
        result.trace.push_back(row);
        result.schedule.push_back(vae_ev);
        notify(vae_ev, false);

        if (epoch % cfg.disc_period == 0 && cfg.disc_epochs > 0) {
            const ScheduleEvent disc_ev{Phase::Discriminator, epoch, cfg.disc_epochs};
            notify(disc_ev, true);
            model.encoder().set_requires_grad(false);
            model.decoder().set_requires_grad(false);
            model.discriminator().params().set_requires_grad(true);
            // several augmented encodings per subject, so that pose alone
            // cannot identify which h a given d belongs to
            struct View {
                Eigen::MatrixXd mu, sigma;
            };
            std::vector<View> views(augmenting ? cfg.disc_views : 1);
            for (auto& v : views) {
                if (!augmenting) {
                    posterior_rows(model, cohort, v.mu, &v.sigma);
                    continue;
                }
                std::vector<MaskedVolume> copies;
                copies.reserve(cohort.size());
                for (const auto& mv : cohort) copies.push_back(augment(mv, cfg.augment, mi_rng));
                posterior_rows(model, copies, v.mu, &v.sigma);
            }
            if (cfg.mi_input == MiInput::Mean)
                for (auto& v : views) {
                    for (Eigen::Index c = 0; c < v.mu.cols(); ++c) {
                        const double m = v.mu.col(c).mean();
                        const double var = (v.mu.col(c).array() - m).square().mean();
                        v.mu.col(c) = (v.mu.col(c).array() - m) / std::sqrt(var + kMiStdFloor);
                    }
                    v.sigma.setConstant(cfg.mi_noise);
                }
            std::uniform_int_distribution<std::size_t> pick(0, views.size() - 1);
            Eigen::MatrixXd d_epoch(h_all.rows(), static_cast<Eigen::Index>(cfg.dlr_dim));
            std::size_t ran = 0;
            train_discriminator(
                model.discriminator(), adam_disc, cfg.disc_epochs,
                [&] {
                    ++ran;
                    for (Eigen::Index i = 0; i < d_epoch.rows(); ++i) {
                        const View& v = views[pick(mi_rng)];
                        for (Eigen::Index c = 0; c < d_epoch.cols(); ++c)
                            d_epoch(i, c) = v.mu(i, c) + v.sigma(i, c) * normal(mi_rng);
                    }
                    return build_mi_batch(h_all, d_epoch, mi_rng);
                },
                cfg.disc_batch, &mi_rng);
            disc_trained = true;
            // record the epochs actually run, not the configured count
            const ScheduleEvent done{Phase::Discriminator, epoch, ran};
            result.schedule.push_back(done);
            notify(done, false);
        }
    }
    model.encoder().set_requires_grad(true);
    model.decoder().set_requires_grad(true);
    model.discriminator().params().set_requires_grad(true);
    return result;
}

}  // namespace nrr
