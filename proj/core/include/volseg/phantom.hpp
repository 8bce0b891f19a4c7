#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "volseg/volume.hpp"

// Deterministic synthetic data: an ellipsoidal brain on a zero (air)
// background, with small ellipsoidal tumors strictly inside it. Class
// imbalance is controlled by a foreground-fraction target; per-modality
// contrast pairs and additive Gaussian noise inside the brain complete the
// picture. Everything is a pure function of the spec (seed included).

namespace volseg {

struct IntensityPair {
  float tumor = 1.0f;
  float brain = 0.5f;
};

struct PhantomSpec {
  int64_t extent = 32;             // cubic volumes, divisible by 16
  int modalities = 4;              // tagged t1, t1c, t2, flair in order
  int tumor_count = 2;
  std::array<float, 2> tumor_radius_range{2.0f, 5.0f};  // initial semi-axes
  float tumor_fraction_target = 0.02f;  // <= 0 keeps sampled radii as-is
  float noise_sigma = 0.05f;
  std::vector<IntensityPair> intensity_contrast;  // empty = built-in table
  uint64_t seed = 0;

  void validate() const;
};

// Tumor radii are rescaled after sampling so the foreground fraction lands
// within +-30% of the target (a hard failure otherwise); rescaled tumors are
// clamped to stay strictly inside the brain.
std::pair<VolumeImage, LabelMap> generate_phantom(const PhantomSpec& spec);

struct PhantomCase {
  std::string id;
  VolumeImage image;
  LabelMap label;
};

struct PhantomDataset {
  std::vector<PhantomCase> train;
  std::vector<PhantomCase> test;
};

// Instantiates the template with seeds base_seed .. base_seed+n_train+n_test-1,
// train cases first, so train and test sets are disjoint by construction.
PhantomDataset make_dataset(const PhantomSpec& spec_template, int n_train,
                            int n_test, uint64_t base_seed);

// One folder per case: <root>/<case_id>/{t1,t1c,t2,flair,seg}.nii.
void write_phantom_cases(const std::vector<PhantomCase>& cases,
                         const std::filesystem::path& root);

}  // namespace volseg
