#pragma once

#include <string>

#include "mkfa/image.hpp"
#include "mkfa/model.hpp"
#include "mkfa/spectral.hpp"

namespace mkfa {

/// Last block of stage 3.
std::string default_cam_tap(const ArchConfig& config);

struct CamResult {
  Plane heatmap;  // input resolution, in [0, 1]
  Plane coarse;   // relu(sum_c w_c A_c) at tap resolution, before normalisation
  double target_logit = 0.0;
};

/// Grad-CAM: channel weights are the spatial mean of d logit_target / d A at
/// the tap. The map is upsampled bilinearly and divided by its maximum; an
/// all-zero map stays zero. Parameter gradients are left zeroed.
template <typename T>
CamResult gradcam(const MkfaNet<T>& model, const RgbImage& image, int target_class, const std::string& tap);

/// Occlusion sensitivity: drop of the target logit when a patch is set to
/// mid-gray, averaged over every patch covering a pixel.
template <typename T>
Plane occlusion_map(const MkfaNet<T>& model, const RgbImage& image, int target_class, int patch = 16, int stride = 8);

/// Fraction of the top-quartile pixels of `a` that are also top-quartile in
/// `b`. Each set holds exactly ceil(N / 4) pixels; ties break by index.
double top_quartile_overlap(const Plane& a, const Plane& b);

/// Half-pixel-centre bilinear resampling with edge clamping.
Plane resize_bilinear(const Plane& src, int64_t height, int64_t width);

/// Jet-style colour map blended over the image.
RgbImage heatmap_overlay(const RgbImage& image, const Plane& heatmap, double alpha = 0.5);

/// One CSV row per image row, comma separated.
std::string plane_csv(const Plane& p);

}  // namespace mkfa
