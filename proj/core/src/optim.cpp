#include "promptdet/optim.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace promptdet {

DiffTensor& ParameterStore::add(const std::string& name, DiffTensor tensor) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  entries_.emplace_back(name, std::move(tensor));
  return entries_.back().second;
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

DiffTensor& ParameterStore::get(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

const DiffTensor& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

std::size_t ParameterStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

OptimizerState make_optimizer_state(const ParameterStore& params, double base_lr, AdamConfig config) {
  OptimizerState s;
  s.config = config;
  s.base_lr = base_lr;
  for (const auto& [name, t] : params.entries()) {
    s.first_moment.emplace_back(t.numel(), 0.0);
    s.second_moment.emplace_back(t.numel(), 0.0);
  }
  return s;
}

void adam_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                 std::vector<double>& v, std::int64_t step, double lr, const AdamConfig& config) {
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] -= lr * (mhat / (std::sqrt(vhat) + config.epsilon) + config.weight_decay * param[i]);
  }
}

void adam_step(ParameterStore& params, OptimizerState& state, double lr) {
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state built for a different parameter set");
  }
  ++state.step;
  std::size_t i = 0;
  for (auto& [name, t] : params.entries()) {
    if (state.first_moment[i].size() != t.numel()) {
      throw ShapeError("adam_step: moment size mismatch for '" + name + "'");
    }
    const std::vector<double> g = t.grad();
    adam_update(t.mutable_values(), g, state.first_moment[i], state.second_moment[i], state.step, lr,
                state.config);
    ++i;
  }
}

double onecycle_lr(std::int64_t step, std::int64_t total_steps, double base_lr, OneCycleShape shape) {
  if (total_steps <= 0) throw std::invalid_argument("onecycle_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw std::out_of_range("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  const double lo = base_lr / shape.start_divisor;
  const double floor = base_lr / shape.final_divisor;
  const double warm = shape.warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= warm) {
    if (warm <= 0.0) return base_lr;
    return lo + (base_lr - lo) * (s / warm);
  }
  const double t = (s - warm) / (static_cast<double>(total_steps) - warm);
  return floor + (base_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Checkpoint IO

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little endian");

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void put_record(std::ofstream& os, const std::string& name, const Shape& shape, std::span<const double> values) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const ParameterStore& params, const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, std::vector<double>>>& buffers) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write("PDCK", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, params.size() + buffers.size());
  for (const auto& [name, t] : params.entries()) put_record(os, name, t.shape(), t.values());
  for (const auto& [name, v] : buffers) put_record(os, "buffer:" + name, {v.size()}, v);
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

std::vector<std::pair<std::string, std::vector<double>>> load_checkpoint(ParameterStore& params,
                                                                         const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "PDCK") throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = take<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = take<std::uint64_t>(is);
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  std::size_t loaded = 0;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto len = take<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto rank = take<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(is);
    std::vector<double> values(shape_numel(shape));
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated record '" + name + "'");
    if (name.rfind("buffer:", 0) == 0) {
      buffers.emplace_back(name.substr(7), std::move(values));
      continue;
    }
    DiffTensor& t = params.get(name);
    if (t.shape() != shape) {
      throw ShapeError("checkpoint: '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                       shape_str(t.shape()));
    }
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
    ++loaded;
  }
  if (loaded != params.size()) {
    throw std::runtime_error("checkpoint: " + std::to_string(params.size() - loaded) + " parameters missing");
  }
  return buffers;
}

}  // namespace promptdet
