#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "promptdet/diffnum.hpp"

namespace promptdet {

/// Named learnable tensors in registration order. Order is part of the
/// checkpoint contract and of optimizer state alignment.
class ParameterStore {
 public:
  DiffTensor& add(const std::string& name, DiffTensor tensor);
  bool contains(const std::string& name) const;
  DiffTensor& get(const std::string& name);
  const DiffTensor& get(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;
  const std::vector<std::pair<std::string, DiffTensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, DiffTensor>>& entries() { return entries_; }

  void zero_grad();

 private:
  std::vector<std::pair<std::string, DiffTensor>> entries_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled, multiplied by lr
};

struct OptimizerState {
  AdamConfig config;
  std::int64_t step = 0;
  double base_lr = 0.01;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

OptimizerState make_optimizer_state(const ParameterStore& params, double base_lr, AdamConfig config = {});

/// One bias-corrected Adam step using each parameter's accumulated gradient.
void adam_step(ParameterStore& params, OptimizerState& state, double lr);

/// Lower-level form over raw buffers; used by adam_step.
void adam_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                 std::vector<double>& v, std::int64_t step, double lr, const AdamConfig& config);

struct OneCycleShape {
  double warmup_fraction = 0.3;
  double start_divisor = 10.0;
  double final_divisor = 1000.0;
};

/// Linear warmup from base_lr/start_divisor to base_lr, then cosine decay to
/// base_lr/final_divisor at total_steps.
double onecycle_lr(std::int64_t step, std::int64_t total_steps, double base_lr, OneCycleShape shape = {});

// Checkpoints: "PDCK" magic, u32 version, u64 count, then per parameter
// u32 name length, name bytes, u32 rank, u64 dims, f64 values (little endian).
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::vector<double>>>& buffers = {});
/// Overwrites values of matching parameters; throws on missing names or shape mismatch.
/// Non-learnable buffers (running statistics) are returned.
std::vector<std::pair<std::string, std::vector<double>>> load_checkpoint(
    ParameterStore& params, const std::filesystem::path& path);

}  // namespace promptdet
