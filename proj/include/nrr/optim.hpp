#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "nrr/tensor.hpp"

namespace nrr::ad {

/// Ordered collection of named trainable tensors.
class ParamSet {
public:
    Var& add(const std::string& name, Tensor init);
    Var& get(const std::string& name);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::vector<std::pair<std::string, Var>>& items() noexcept { return items_; }
    const std::vector<std::pair<std::string, Var>>& items() const noexcept { return items_; }

    void zero_grad();
    /// Freezes (false) or unfreezes every parameter for graphs built afterwards.
    void set_requires_grad(bool on);
    std::size_t parameter_count() const;
    /// Deep copy of all values, in declaration order.
    std::vector<Tensor> snapshot() const;
    void restore(const std::vector<Tensor>& values);

private:
    std::vector<std::pair<std::string, Var>> items_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Tensor uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Owns the moment buffers for one ParamSet.
class Adam {
public:
    Adam(ParamSet& params, AdamConfig cfg = {});

    /// Applies one update from the gradients currently stored in the params.
    void step();
    std::uint64_t steps() const noexcept { return step_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    ParamSet* params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t step_ = 0;
};

// Checkpoint file layout:
//   8 bytes   magic "NRRCKPT1"
//   8 bytes   little-endian u64 header length
//   header    JSON {"format_version":1, "config_hash":"...", "meta":{...},
//                   "tensors":[{"name","shape","offset","count"}...]}
//   payload   little-endian f32 blobs, offsets in floats from payload start
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor& tensor(const std::string& name) const;
};

inline constexpr int kCheckpointFormatVersion = 1;

std::string config_hash(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends every parameter of `set` as "<prefix>/<name>".
void export_params(Checkpoint& ckpt, const std::string& prefix, const ParamSet& set);
/// Loads values into an already-shaped ParamSet; shapes must match.
void import_params(const Checkpoint& ckpt, const std::string& prefix, ParamSet& set);

}  // namespace nrr::ad
