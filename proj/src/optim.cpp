#include "nrr/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace nrr::ad {

namespace fs = std::filesystem;
using nlohmann::json;

Var& ParamSet::add(const std::string& name, Tensor init)
{
    if (contains(name)) throw Error("duplicate parameter name '" + name + "'");
    items_.emplace_back(name, parameter(std::move(init)));
    return items_.back().second;
}

Var& ParamSet::get(const std::string& name)
{
    for (auto& [n, v] : items_) {
        if (n == name) return v;
    }
    throw Error("unknown parameter '" + name + "'");
}

const Var& ParamSet::get(const std::string& name) const
{
    return const_cast<ParamSet*>(this)->get(name);
}

bool ParamSet::contains(const std::string& name) const
{
    for (const auto& [n, v] : items_) {
        if (n == name) return true;
    }
    return false;
}

void ParamSet::zero_grad()
{
    for (auto& [n, v] : items_) v.grad_buffer().fill(Scalar(0));
}

void ParamSet::set_requires_grad(bool on)
{
    for (auto& [n, v] : items_) v.set_requires_grad(on);
}

std::size_t ParamSet::parameter_count() const
{
    std::size_t total = 0;
    for (const auto& [n, v] : items_) total += v.value().size();
    return total;
}

std::vector<Tensor> ParamSet::snapshot() const
{
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [n, v] : items_) out.push_back(v.value());
    return out;
}

void ParamSet::restore(const std::vector<Tensor>& values)
{
    if (values.size() != items_.size()) throw ShapeError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i].shape() != items_[i].second.shape()) {
            throw ShapeError("restore: shape mismatch for '" + items_[i].first + "'");
        }
        items_[i].second.mutable_value() = values[i];
    }
}

Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng)
{
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng));
    return t;
}

Adam::Adam(ParamSet& params, AdamConfig cfg) : params_(&params), cfg_(cfg)
{
    for (const auto& [n, v] : params.items()) {
        m_.emplace_back(v.value().size(), 0.0);
        v_.emplace_back(v.value().size(), 0.0);
    }
}

void Adam::step()
{
    auto& items = params_->items();
    if (items.size() != m_.size()) throw ShapeError("adam: optimizer state does not match parameter set");
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t p = 0; p < items.size(); ++p) {
        Var& var = items[p].second;
        Tensor& value = var.mutable_value();
        const Tensor& grad = var.grad();
        if (grad.size() == 0) continue;  // never touched by backward: zero gradient
        if (value.size() != m_[p].size() || grad.shape() != value.shape()) {
            throw ShapeError("adam: shape mismatch for '" + items[p].first + "'");
        }
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double g = grad[i];
            m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g;
            v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[p][i] / c1;
            const double vhat = v_[p][i] / c2;
            value[i] = static_cast<Scalar>(value[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

const Tensor& Checkpoint::tensor(const std::string& name) const
{
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw Error("checkpoint has no tensor '" + name + "'");
}

std::string config_hash(const json& j)
{
    // FNV-1a over the canonical (sorted-key) dump
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : j.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

namespace {

constexpr char kMagic[8] = {'N', 'R', 'R', 'C', 'K', 'P', 'T', '1'};
static_assert(std::endian::native == std::endian::little);

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt)
{
    json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["config_hash"] = config_hash(ckpt.meta);
    header["meta"] = ckpt.meta;
    header["tensors"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
        offset += t.size();
    }
    const std::string text = header.dump();
    const std::uint64_t len = text.size();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        std::vector<float> buf(t.data().begin(), t.data().end());
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError(path.string() + ": not a checkpoint file");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError(path.string() + ": truncated header");

    Checkpoint ckpt;
    json header;
    try {
        header = json::parse(text);
        if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
            throw IoError(path.string() + ": unsupported checkpoint version");
        }
        ckpt.meta = header.at("meta");
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": bad checkpoint header: " + e.what());
    }
    if (header.value("config_hash", std::string{}) != config_hash(ckpt.meta)) {
        throw IoError(path.string() + ": config hash mismatch");
    }
    const auto payload_start = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        const auto shape = entry.at("shape").get<Shape>();
        const auto count = entry.at("count").get<std::size_t>();
        const auto offset = entry.at("offset").get<std::uint64_t>();
        if (numel(shape) != count) throw IoError(path.string() + ": tensor count/shape mismatch");
        std::vector<float> buf(count);
        in.seekg(payload_start + static_cast<std::streamoff>(offset * sizeof(float)));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!in) throw IoError(path.string() + ": truncated tensor payload");
        ckpt.tensors.emplace_back(entry.at("name").get<std::string>(),
                                  Tensor(shape, std::vector<Scalar>(buf.begin(), buf.end())));
    }
    return ckpt;
}

void export_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& set)
{
    for (const auto& [name, v] : set.items()) ckpt.tensors.emplace_back(prefix + "/" + name, v.value());
}

void import_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& set)
{
    for (auto& [name, v] : set.items()) {
        const Tensor& t = ckpt.tensor(prefix + "/" + name);
        if (t.shape() != v.shape()) {
            throw ShapeError("checkpoint tensor '" + prefix + "/" + name + "' has shape " + to_string(t.shape()) +
                             ", model expects " + to_string(v.shape()));
        }
        v.mutable_value() = t;
    }
}

}  // namespace nrr::ad
