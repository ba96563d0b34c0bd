#include "promptdet/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "promptdet/rng.hpp"

namespace promptdet {

// ---------------------------------------------------------------------------
// MSBN

MSBNLayer MSBNLayer::create(std::size_t channels, double alpha, double epsilon) {
  MSBNLayer l;
  l.channels = channels;
  l.alpha = alpha;
  l.epsilon = epsilon;
  l.gamma = DiffTensor::full({channels}, 1.0, true);
  l.beta = DiffTensor::zeros({channels}, true);
  l.running_mean.assign(channels, 0.0);
  l.running_var.assign(channels, 1.0);
  l.validate();
  return l;
}

void MSBNLayer::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("MSBN: alpha must lie in [0, 1]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("MSBN: epsilon must be positive");
  if (gamma.numel() != channels || beta.numel() != channels || running_mean.size() != channels ||
      running_var.size() != channels) {
    throw ShapeError("MSBN: parameter sizes do not match " + std::to_string(channels) + " channels");
  }
}

DiffTensor msbn_forward(const DiffTensor& points, std::span<const std::size_t> frame_of_point, MSBNLayer& layer,
                        bool training) {
  layer.validate();
  if (points.rank() != 2 || points.dim(1) != layer.channels) {
    throw ShapeError("msbn_forward: expected [rows x " + std::to_string(layer.channels) + "], got " +
                     shape_str(points.shape()));
  }
  const std::size_t n = points.dim(0), c = layer.channels;
  if (frame_of_point.size() != n) throw ShapeError("msbn_forward: frame_of_point length differs from row count");
  if (n == 0) throw std::invalid_argument("msbn_forward: empty batch");
  const std::size_t m = *std::max_element(frame_of_point.begin(), frame_of_point.end()) + 1;
  std::vector<std::size_t> count(m, 0);
  for (std::size_t f : frame_of_point) ++count[f];
  for (std::size_t f = 0; f < m; ++f) {
    if (count[f] == 0) throw std::invalid_argument("msbn_forward: frame " + std::to_string(f) + " has no points");
  }

  const auto pv = points.values();
  std::vector<double> frame_mean(m * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) frame_mean[frame_of_point[i] * c + j] += pv[i * c + j];
  for (std::size_t f = 0; f < m; ++f)
    for (std::size_t j = 0; j < c; ++j) frame_mean[f * c + j] /= static_cast<double>(count[f]);

  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (training) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) mu[j] += pv[i * c + j];
    for (double& v : mu) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = pv[i * c + j] - mu[j];
        var[j] += d * d;
      }
    for (double& v : var) v /= static_cast<double>(n);
    for (std::size_t j = 0; j < c; ++j) {
      layer.running_mean[j] = (1.0 - layer.momentum) * layer.running_mean[j] + layer.momentum * mu[j];
      layer.running_var[j] = (1.0 - layer.momentum) * layer.running_var[j] + layer.momentum * var[j];
    }
  } else {
    mu = layer.running_mean;
    var = layer.running_var;
  }

  const double alpha = layer.alpha;
  std::vector<double> inv(c), normalized(n * c), out(n * c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + layer.epsilon);
  const auto gv = layer.gamma.values();
  const auto bv = layer.beta.values();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t f = frame_of_point[i];
    for (std::size_t j = 0; j < c; ++j) {
      const double shift = alpha * frame_mean[f * c + j] + (1.0 - alpha) * mu[j];
      normalized[i * c + j] = (pv[i * c + j] - shift) * inv[j];
      out[i * c + j] = gv[j] * normalized[i * c + j] + bv[j];
    }
  }

  std::vector<std::size_t> frames(frame_of_point.begin(), frame_of_point.end());
  return DiffTensor::make_result(
      {n, c}, std::move(out), {points, layer.gamma, layer.beta},
      [points, gamma = layer.gamma, beta = layer.beta, frames = std::move(frames), count = std::move(count),
       normalized = std::move(normalized), inv = std::move(inv), mu = std::move(mu), alpha, training, n, c,
       m](std::span<const double> g) mutable {
        const auto gv = gamma.values();
        if (gamma.requires_grad()) {
          auto gg = gamma.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * normalized[i * c + j];
        }
        if (beta.requires_grad()) {
          auto gb = beta.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        if (!points.requires_grad()) return;
        // dL/d p_hat
        std::vector<double> gh(n * c);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gh[i * c + j] = g[i * c + j] * gv[j];
        std::vector<double> frame_sum(m * c, 0.0), total(c, 0.0), dot(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            frame_sum[frames[i] * c + j] += gh[i * c + j];
            total[j] += gh[i * c + j];
            // (p - shift) = normalized / inv
            dot[j] += gh[i * c + j] * normalized[i * c + j] / inv[j];
          }
        auto gp = points.grad_buffer();
        const auto pv = points.values();
        const double nn = static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t f = frames[i];
          for (std::size_t j = 0; j < c; ++j) {
            double d = gh[i * c + j] - alpha * frame_sum[f * c + j] / static_cast<double>(count[f]);
            if (training) {
              d -= (1.0 - alpha) * total[j] / nn;
              d -= inv[j] * inv[j] * (pv[i * c + j] - mu[j]) * dot[j] / nn;
            }
            gp[i * c + j] += d * inv[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Range masks

std::size_t RangeMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

namespace {

// Representation error in decimal ranges (e.g. 35.2 / 150.4 * 188) must not
// push an exact grid line across floor/ceil.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) <= 1e-9 * std::max(1.0, std::abs(v)) ? r : v;
}

}  // namespace

RangeMask compute_range_mask(const PointRange& r, int dataset_id, const PlaneRange& g, std::size_t height,
                             std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("compute_range_mask: empty plane");
  if (!(g.x1 < g.x2 && g.y1 < g.y2)) throw std::invalid_argument("compute_range_mask: invalid global range");
  constexpr double kTol = 1e-9;
  if (r.x1 < g.x1 - kTol || r.y1 < g.y1 - kTol || r.x2 > g.x2 + kTol || r.y2 > g.y2 + kTol) {
    std::ostringstream os;
    os << "compute_range_mask: dataset range (" << r.x1 << ", " << r.y1 << ", " << r.x2 << ", " << r.y2
       << ") exceeds the global range (" << g.x1 << ", " << g.y1 << ", " << g.x2 << ", " << g.y2 << ")";
    throw std::invalid_argument(os.str());
  }
  const double hh = static_cast<double>(height), ww = static_cast<double>(width);
  const auto x1 = static_cast<std::int64_t>(std::floor(snap((r.x1 - g.x1) / (g.x2 - g.x1) * hh)));
  const auto y1 = static_cast<std::int64_t>(std::floor(snap((r.y1 - g.y1) / (g.y2 - g.y1) * ww)));
  const auto x2 = static_cast<std::int64_t>(std::ceil(snap((r.x2 - g.x1) / (g.x2 - g.x1) * hh)));
  const auto y2 = static_cast<std::int64_t>(std::ceil(snap((r.y2 - g.y1) / (g.y2 - g.y1) * ww)));
  const auto hmax = static_cast<std::int64_t>(height) - 1, wmax = static_cast<std::int64_t>(width) - 1;

  RangeMask mask;
  mask.height = height;
  mask.width = width;
  mask.dataset_id = dataset_id;
  mask.corners = {std::clamp<std::int64_t>(x1, 0, hmax), std::clamp<std::int64_t>(y1, 0, wmax),
                  std::clamp<std::int64_t>(x2, 0, hmax), std::clamp<std::int64_t>(y2, 0, wmax)};
  mask.bits.assign(height * width, 0);
  for (auto mm = mask.corners[0]; mm <= mask.corners[2]; ++mm)
    for (auto n = mask.corners[1]; n <= mask.corners[3]; ++n)
      mask.bits[static_cast<std::size_t>(mm) * width + static_cast<std::size_t>(n)] = 1;
  return mask;
}

RangeMask compute_range_mask(const DatasetSpec& spec, const PlaneRange& global_range, std::size_t height,
                             std::size_t width) {
  return compute_range_mask(spec.point_range, spec.id, global_range, height, width);
}

RangeMask all_ones_mask(std::size_t height, std::size_t width) {
  RangeMask mask;
  mask.height = height;
  mask.width = width;
  mask.bits.assign(height * width, 1);
  mask.corners = {0, 0, static_cast<std::int64_t>(height) - 1, static_cast<std::int64_t>(width) - 1};
  return mask;
}

RangeMask resample_nearest(const RangeMask& mask, std::size_t height, std::size_t width) {
  if (height == mask.height && width == mask.width) return mask;
  RangeMask out;
  out.height = height;
  out.width = width;
  out.dataset_id = mask.dataset_id;
  out.bits.assign(height * width, 0);
  std::int64_t lo_m = -1, lo_n = -1, hi_m = -1, hi_n = -1;
  for (std::size_t i = 0; i < height; ++i) {
    const std::size_t si = std::min(mask.height - 1, i * mask.height / height);
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t sj = std::min(mask.width - 1, j * mask.width / width);
      if (!mask.at(si, sj)) continue;
      out.bits[i * width + j] = 1;
      const auto ii = static_cast<std::int64_t>(i), jj = static_cast<std::int64_t>(j);
      if (lo_m < 0 || ii < lo_m) lo_m = ii;
      if (lo_n < 0 || jj < lo_n) lo_n = jj;
      hi_m = std::max(hi_m, ii);
      hi_n = std::max(hi_n, jj);
    }
  }
  out.corners = {lo_m, lo_n, hi_m, hi_n};
  return out;
}

DiffTensor apply_mask_concat(const DiffTensor& x, std::span<const RangeMask> masks) {
  if (x.rank() != 4) throw ShapeError("apply_mask_concat: expected [N x C x H x W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (masks.size() != n) {
    throw ShapeError("apply_mask_concat: " + std::to_string(masks.size()) + " masks for batch of " +
                     std::to_string(n));
  }
  std::vector<double> bits(n * h * w);
  for (std::size_t b = 0; b < n; ++b) {
    const RangeMask m = resample_nearest(masks[b], h, w);
    for (std::size_t i = 0; i < h * w; ++i) bits[b * h * w + i] = m.bits[i] ? 1.0 : 0.0;
  }
  return concat_channels(x, DiffTensor::from({n, 1, h, w}, std::move(bits), false));
}

DiffTensor apply_mask_concat(const DiffTensor& x, const RangeMask& mask) {
  std::vector<RangeMask> masks(x.rank() == 4 ? x.dim(0) : 0, mask);
  return apply_mask_concat(x, masks);
}

std::string mask_to_pgm(const RangeMask& mask) {
  std::ostringstream os;
  os << "P2\n" << mask.width << ' ' << mask.height << "\n1\n";
  for (std::size_t m = 0; m < mask.height; ++m) {
    for (std::size_t n = 0; n < mask.width; ++n) os << (n ? " " : "") << (mask.at(m, n) ? 1 : 0);
    os << '\n';
  }
  return os.str();
}

nlohmann::json mask_to_json(const RangeMask& mask) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t m = 0; m < mask.height; ++m) {
    std::string row(mask.width, '0');
    for (std::size_t n = 0; n < mask.width; ++n) row[n] = mask.at(m, n) ? '1' : '0';
    rows.push_back(std::move(row));
  }
  return {{"height", mask.height},
          {"width", mask.width},
          {"dataset_id", mask.dataset_id},
          {"corners", mask.corners},
          {"rows", std::move(rows)}};
}

// ---------------------------------------------------------------------------
// OCRL

OCRLHead OCRLHead::create(ParameterStore& params, const std::string& prefix, std::size_t feature_dim,
                          std::size_t num_datasets, std::uint64_t seed, double dis_loss_weight) {
  if (feature_dim < 2 || num_datasets == 0) throw std::invalid_argument("OCRLHead: invalid dimensions");
  OCRLHead h;
  h.feature_dim = feature_dim;
  h.num_datasets = num_datasets;
  h.dis_loss_weight = dis_loss_weight;
  const std::size_t f = feature_dim, half = feature_dim / 2;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  auto normal = [&](const std::string& name, Shape shape, double sd) -> DiffTensor& {
    return params.add(prefix + name, DiffTensor::random_normal(std::move(shape), sd,
                                                               mix_seed(seed, hash_name(prefix + name)), true));
  };
  h.f_w1 = normal("f.w1", {f, f}, he(f));
  h.f_b1 = params.add(prefix + "f.b1", DiffTensor::zeros({f}, true));
  // Small output layer so the residual starts near zero.
  h.f_w2 = normal("f.w2", {f, f}, 0.1 * he(f));
  h.f_b2 = params.add(prefix + "f.b2", DiffTensor::zeros({f}, true));
  h.d_w1 = normal("d.w1", {f, half}, he(f));
  h.d_b1 = params.add(prefix + "d.b1", DiffTensor::zeros({half}, true));
  h.d_w2 = normal("d.w2", {half, num_datasets}, he(half));
  h.d_b2 = params.add(prefix + "d.b2", DiffTensor::zeros({num_datasets}, true));
  return h;
}

OCRLOutput ocrl_apply(const DiffTensor& roi_features, const OCRLHead& head) {
  if (roi_features.rank() != 2 || roi_features.dim(1) != head.feature_dim) {
    throw ShapeError("ocrl_apply: expected [R x " + std::to_string(head.feature_dim) + "], got " +
                     shape_str(roi_features.shape()));
  }
  const DiffTensor frozen = stop_gradient(roi_features);
  DiffTensor r = linear(relu(linear(frozen, head.f_w1, head.f_b1)), head.f_w2, head.f_b2);
  DiffTensor enhanced = add(roi_features, r);
  return {std::move(enhanced), std::move(r)};
}

DiffTensor ocrl_discriminator_logits(const DiffTensor& residual, const OCRLHead& head) {
  if (residual.rank() != 2 || residual.dim(1) != head.feature_dim) {
    throw ShapeError("ocrl discriminator: expected [R x " + std::to_string(head.feature_dim) + "], got " +
                     shape_str(residual.shape()));
  }
  return linear(relu(linear(residual, head.d_w1, head.d_b1)), head.d_w2, head.d_b2);
}

DiffTensor ocrl_discrimination_loss(const DiffTensor& residual, std::span<const int> dataset_ids,
                                    const OCRLHead& head) {
  for (int id : dataset_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= head.num_datasets) {
      throw std::out_of_range("ocrl_discrimination_loss: dataset id " + std::to_string(id) + " outside [0, " +
                              std::to_string(head.num_datasets) + ")");
    }
  }
  return softmax_cross_entropy(ocrl_discriminator_logits(residual, head), dataset_ids);
}

}  // namespace promptdet
