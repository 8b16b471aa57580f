#include "mkfa/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mkfa/ops.hpp"

namespace mkfa {

std::string default_cam_tap(const ArchConfig& config) {
  return "stage3.block" + std::to_string(config.depths[2]);
}

Plane resize_bilinear(const Plane& src, int64_t height, int64_t width) {
  Plane out(height, width);
  const double sy = static_cast<double>(src.height) / static_cast<double>(height);
  const double sx = static_cast<double>(src.width) / static_cast<double>(width);
  for (int64_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const auto y0 = static_cast<int64_t>(std::floor(fy));
    const int64_t y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const auto x0 = static_cast<int64_t>(std::floor(fx));
      const int64_t x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - static_cast<double>(x0);
      out.at(y, x) = (src.at(y0, x0) * (1 - wx) + src.at(y0, x1) * wx) * (1 - wy) +
                     (src.at(y1, x0) * (1 - wx) + src.at(y1, x1) * wx) * wy;
    }
  }
  return out;
}

namespace {

template <typename T>
void check_class(const MkfaNet<T>& model, int target_class) {
  if (target_class < 0 || target_class >= model.config().num_classes) {
    throw std::invalid_argument("target class " + std::to_string(target_class) + " out of range");
  }
}

template <typename T>
Tensor<T> single(const RgbImage& image) {
  const RgbImage* p[] = {&image};
  Tensor<T> x;
  images_to_tensor<T>(p, x);
  return x;
}

}  // namespace

template <typename T>
CamResult gradcam(const MkfaNet<T>& model, const RgbImage& image, int target_class, const std::string& tap) {
  check_class(model, target_class);
  const std::vector<std::string> taps{tap};
  Tape<T> tape;
  const auto out = model.forward(tape, tape.constant(single<T>(image)), taps);
  const Var<T> a = out.taps.at(tap);
  Tensor<T> onehot(out.logits->value.shape());
  onehot[target_class] = T(1);
  const auto target = weighted_sum(tape, out.logits, onehot);
  CamResult r;
  r.target_logit = static_cast<double>(out.logits->value[target_class]);
  const Shape s = a->value.shape();
  r.coarse = Plane(s.h, s.w);
  if (a->requires_grad && target->requires_grad) {
    tape.backward(target);
    if (a->has_grad()) {
      for (int64_t c = 0; c < s.c; ++c) {
        const T* g = a->grad.plane(0, c);
        double w = 0.0;
        for (int64_t i = 0; i < s.plane(); ++i) w += g[i];
        w /= static_cast<double>(s.plane());
        const T* v = a->value.plane(0, c);
        for (int64_t i = 0; i < s.plane(); ++i) r.coarse.v[static_cast<size_t>(i)] += w * v[i];
      }
    }
    for (const auto& p : model.params()) {
      if (p->var->has_grad()) p->var->grad.fill(T(0));
    }
  }
  for (double& v : r.coarse.v) v = std::max(v, 0.0);
  r.heatmap = resize_bilinear(r.coarse, image.height, image.width);
  const double mx = *std::max_element(r.heatmap.v.begin(), r.heatmap.v.end());
  for (double& v : r.heatmap.v) v = mx > 0.0 ? std::clamp(v / mx, 0.0, 1.0) : 0.0;
  return r;
}

template <typename T>
Plane occlusion_map(const MkfaNet<T>& model, const RgbImage& image, int target_class, int patch, int stride) {
  check_class(model, target_class);
  if (patch < 1 || stride < 1) throw std::invalid_argument("occlusion patch and stride must be positive");
  const Tensor<T> base = single<T>(image);
  const Shape s = base.shape();
  std::vector<std::pair<int64_t, int64_t>> origins;
  for (int64_t y = 0; y + patch <= s.h; y += stride)
    for (int64_t x = 0; x + patch <= s.w; x += stride) origins.emplace_back(y, x);
  if (origins.empty()) throw std::invalid_argument("occlusion patch is larger than the image");
  Tape<T> tape;
  tape.set_grad_enabled(false);
  const double reference = model.forward(tape, tape.constant(base)).logits->value[target_class];
  Plane sum(s.h, s.w), count(s.h, s.w);
  const size_t chunk = 32;
  for (size_t start = 0; start < origins.size(); start += chunk) {
    const size_t end = std::min(origins.size(), start + chunk);
    Tensor<T> batch(Shape{static_cast<int64_t>(end - start), s.c, s.h, s.w});
    for (size_t k = start; k < end; ++k) {
      const auto n = static_cast<int64_t>(k - start);
      std::copy(base.ptr(), base.ptr() + base.numel(), batch.ptr() + n * base.numel());
      const auto [oy, ox] = origins[k];
      for (int64_t c = 0; c < s.c; ++c)
        for (int64_t y = oy; y < oy + patch; ++y)
          for (int64_t x = ox; x < ox + patch; ++x) batch(n, c, y, x) = T(0);
    }
    Tape<T> t;
    t.set_grad_enabled(false);
    const auto logits = model.forward(t, t.constant(std::move(batch))).logits->value;
    for (size_t k = start; k < end; ++k) {
      const double drop = reference - static_cast<double>(logits(static_cast<int64_t>(k - start), target_class, 0, 0));
      const auto [oy, ox] = origins[k];
      for (int64_t y = oy; y < oy + patch; ++y)
        for (int64_t x = ox; x < ox + patch; ++x) {
          sum.at(y, x) += drop;
          count.at(y, x) += 1.0;
        }
    }
  }
  for (size_t i = 0; i < sum.v.size(); ++i) sum.v[i] = count.v[i] > 0 ? sum.v[i] / count.v[i] : 0.0;
  return sum;
}

namespace {

std::vector<bool> top_quartile(const Plane& p) {
  std::vector<size_t> order(p.v.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return p.v[a] > p.v[b]; });
  const size_t k = (p.v.size() + 3) / 4;
  std::vector<bool> mask(p.v.size(), false);
  for (size_t i = 0; i < k; ++i) mask[order[i]] = true;
  return mask;
}

}  // namespace

double top_quartile_overlap(const Plane& a, const Plane& b) {
  if (a.height != b.height || a.width != b.width || a.v.empty()) {
    throw std::invalid_argument("top_quartile_overlap: maps differ in size");
  }
  const auto ma = top_quartile(a), mb = top_quartile(b);
  size_t both = 0, k = 0;
  for (size_t i = 0; i < ma.size(); ++i) {
    k += ma[i];
    both += ma[i] && mb[i];
  }
  return static_cast<double>(both) / static_cast<double>(k);
}

RgbImage heatmap_overlay(const RgbImage& image, const Plane& heatmap, double alpha) {
  if (heatmap.height != image.height || heatmap.width != image.width) {
    throw std::invalid_argument("heatmap and image sizes differ");
  }
  RgbImage out(image.width, image.height);
  for (int64_t y = 0; y < image.height; ++y)
    for (int64_t x = 0; x < image.width; ++x) {
      const double v = std::clamp(heatmap.at(y, x), 0.0, 1.0);
      const double rgb[3] = {std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0), std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0),
                             std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0)};
      for (int c = 0; c < 3; ++c) {
        const double mixed = (1 - alpha) * image.at(y, x, c) + alpha * 255.0 * rgb[c];
        out.at(y, x, c) = static_cast<uint8_t>(std::clamp(std::nearbyint(mixed), 0.0, 255.0));
      }
    }
  return out;
}

std::string plane_csv(const Plane& p) {
  std::string out;
  char buf[32];
  for (int64_t y = 0; y < p.height; ++y) {
    for (int64_t x = 0; x < p.width; ++x) {
      std::snprintf(buf, sizeof(buf), "%.6g", p.at(y, x));
      if (x) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

template CamResult gradcam(const MkfaNet<float>&, const RgbImage&, int, const std::string&);
template CamResult gradcam(const MkfaNet<double>&, const RgbImage&, int, const std::string&);
template Plane occlusion_map(const MkfaNet<float>&, const RgbImage&, int, int, int);
template Plane occlusion_map(const MkfaNet<double>&, const RgbImage&, int, int, int);

}  // namespace mkfa
