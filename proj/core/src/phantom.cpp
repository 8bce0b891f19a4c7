#include "volseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "volseg/errors.hpp"
#include "volseg/image_io.hpp"
#include "volseg/rng.hpp"

namespace volseg {

namespace {

// Keeps tumors a hair away from the brain surface so voxelized tumors can
// never leak outside the voxelized brain.
constexpr double kContainmentMargin = 0.98;

constexpr IntensityPair kDefaultContrast[4] = {
    {0.45f, 0.75f},  // t1: tumor darker than brain
    {1.00f, 0.55f},  // t1c: tumor enhances
    {0.90f, 0.50f},  // t2: tumor bright
    {0.35f, 0.70f},  // flair: tumor darker, different ratio than t1
};

constexpr Modality kModalityOrder[4] = {Modality::T1, Modality::T1c,
                                        Modality::T2, Modality::Flair};

struct Ellipsoid {
  double cz = 0, cy = 0, cx = 0;
  double rz = 1, ry = 1, rx = 1;

  double scaled_dist(double z, double y, double x) const {
    const double dz = (z - cz) / rz;
    const double dy = (y - cy) / ry;
    const double dx = (x - cx) / rx;
    return std::sqrt(dz * dz + dy * dy + dx * dx);
  }

  bool contains(double z, double y, double x) const {
    return scaled_dist(z, y, x) <= 1.0;
  }

  double max_radius() const { return std::max({rz, ry, rx}); }
  double min_radius() const { return std::min({rz, ry, rx}); }
};

// Sufficient condition for tumor strictly inside brain: the tumor center's
// scaled distance plus its worst-case reach stays under the margin.
bool fits_inside(const Ellipsoid& brain, const Ellipsoid& tumor) {
  const double reach = tumor.max_radius() / brain.min_radius();
  return brain.scaled_dist(tumor.cz, tumor.cy, tumor.cx) + reach <=
         kContainmentMargin;
}

int64_t rasterize_tumors(const std::vector<Ellipsoid>& tumors, int64_t extent,
                         std::vector<uint8_t>& label) {
  std::fill(label.begin(), label.end(), 0);
  int64_t count = 0;
  for (const Ellipsoid& t : tumors) {
    const auto zlo = std::max<int64_t>(0, static_cast<int64_t>(t.cz - t.rz) - 1);
    const auto zhi = std::min(extent - 1, static_cast<int64_t>(t.cz + t.rz) + 1);
    const auto ylo = std::max<int64_t>(0, static_cast<int64_t>(t.cy - t.ry) - 1);
    const auto yhi = std::min(extent - 1, static_cast<int64_t>(t.cy + t.ry) + 1);
    const auto xlo = std::max<int64_t>(0, static_cast<int64_t>(t.cx - t.rx) - 1);
    const auto xhi = std::min(extent - 1, static_cast<int64_t>(t.cx + t.rx) + 1);
    for (int64_t z = zlo; z <= zhi; ++z) {
      for (int64_t y = ylo; y <= yhi; ++y) {
        for (int64_t x = xlo; x <= xhi; ++x) {
          if (!t.contains(z, y, x)) continue;
          uint8_t& v = label[static_cast<size_t>((z * extent + y) * extent + x)];
          if (!v) {
            v = 1;
            ++count;
          }
        }
      }
    }
  }
  return count;
}

}  // namespace

void PhantomSpec::validate() const {
  if (extent < 16 || extent % 16 != 0) {
    throw ConfigError("phantom extent " + std::to_string(extent) +
                      " must be a positive multiple of 16");
  }
  if (modalities < 1 || modalities > 4) {
    throw ConfigError("phantom modalities must be 1..4, got " +
                      std::to_string(modalities));
  }
  if (tumor_count < 0) throw ConfigError("tumor_count must be >= 0");
  if (!(tumor_radius_range[0] > 0.0f) ||
      tumor_radius_range[1] < tumor_radius_range[0]) {
    throw ConfigError("tumor_radius_range must satisfy 0 < min <= max");
  }
  if (noise_sigma < 0.0f) throw ConfigError("noise_sigma must be >= 0");
  if (tumor_fraction_target >= 1.0f) {
    throw ConfigError("tumor_fraction_target must be < 1");
  }
  if (!intensity_contrast.empty() &&
      static_cast<int>(intensity_contrast.size()) != modalities) {
    throw ConfigError("intensity_contrast needs one pair per modality");
  }
}

std::pair<VolumeImage, LabelMap> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const int64_t E = spec.extent;
  Rng rng(spec.seed);

  Ellipsoid brain;
  const double jitter = static_cast<double>(E) / 16.0;
  brain.cz = 0.5 * static_cast<double>(E) + rng.uniform(-jitter, jitter);
  brain.cy = 0.5 * static_cast<double>(E) + rng.uniform(-jitter, jitter);
  brain.cx = 0.5 * static_cast<double>(E) + rng.uniform(-jitter, jitter);
  brain.rz = rng.uniform(0.34, 0.42) * static_cast<double>(E);
  brain.ry = rng.uniform(0.34, 0.42) * static_cast<double>(E);
  brain.rx = rng.uniform(0.34, 0.42) * static_cast<double>(E);

  const double r_lo = spec.tumor_radius_range[0];
  const double r_hi = spec.tumor_radius_range[1];
  if (r_hi / brain.min_radius() >= kContainmentMargin) {
    throw ConfigError("tumor radius " + std::to_string(r_hi) +
                      " cannot fit inside a brain of semi-axis " +
                      std::to_string(brain.min_radius()));
  }

  // Draw tumor configurations until one passes placement and the foreground
  // fraction gate. A configuration that succeeds on the first draw consumes
  // exactly the same random sequence as a draw-free implementation, so
  // outputs for well-behaved seeds are stable across this retry logic.
  constexpr int kMaxConfigurationDraws = 16;
  std::vector<Ellipsoid> tumors;
  LabelMap label = LabelMap::zeros(Shape{E, E, E});
  int64_t fg = 0;
  bool accepted = false;
  std::string problem;

  for (int draw = 0; draw < kMaxConfigurationDraws && !accepted; ++draw) {
    tumors.clear();
    bool placed_all = true;
    for (int t = 0; t < spec.tumor_count && placed_all; ++t) {
      Ellipsoid tumor;
      tumor.rz = rng.uniform(r_lo, r_hi);
      tumor.ry = rng.uniform(r_lo, r_hi);
      tumor.rx = rng.uniform(r_lo, r_hi);
      bool placed = false;
      for (int attempt = 0; attempt < 1000; ++attempt) {
        tumor.cz = brain.cz + rng.uniform(-brain.rz, brain.rz);
        tumor.cy = brain.cy + rng.uniform(-brain.ry, brain.ry);
        tumor.cx = brain.cx + rng.uniform(-brain.rx, brain.rx);
        if (fits_inside(brain, tumor)) {
          placed = true;
          break;
        }
      }
      if (!placed) {
        placed_all = false;
        problem = "could not place tumor " + std::to_string(t) +
                  " inside the brain";
      } else {
        tumors.push_back(tumor);
      }
    }
    if (!placed_all) continue;

    fg = rasterize_tumors(tumors, E, label.voxels);

    if (spec.tumor_count == 0 || spec.tumor_fraction_target <= 0.0f) {
      accepted = true;
      break;
    }

    // Rescale all tumor radii toward the requested foreground fraction,
    // keeping each tumor inside the brain. Fixed iteration count, no
    // randomness.
    const double target = static_cast<double>(spec.tumor_fraction_target) *
                          static_cast<double>(E * E * E);
    for (int iter = 0; iter < 8 && fg > 0; ++iter) {
      const double s = std::cbrt(target / static_cast<double>(fg));
      for (Ellipsoid& t : tumors) {
        const double room = (kContainmentMargin -
                             brain.scaled_dist(t.cz, t.cy, t.cx)) *
                            brain.min_radius();
        const double allowed = room / t.max_radius();
        const double k = std::min(s, allowed);
        t.rz *= k;
        t.ry *= k;
        t.rx *= k;
      }
      fg = rasterize_tumors(tumors, E, label.voxels);
    }
    const double achieved =
        static_cast<double>(fg) / static_cast<double>(E * E * E);
    const double lo = 0.7 * static_cast<double>(spec.tumor_fraction_target);
    const double hi = 1.3 * static_cast<double>(spec.tumor_fraction_target);
    if (achieved >= lo && achieved <= hi) {
      accepted = true;
    } else {
      problem = "phantom foreground fraction " + std::to_string(achieved) +
                " missed target " +
                std::to_string(spec.tumor_fraction_target) +
                " by more than 30%";
    }
  }

  if (!accepted) {
    throw ConfigError(problem + " after " +
                      std::to_string(kMaxConfigurationDraws) +
                      " configuration draws (seed " +
                      std::to_string(spec.seed) + ")");
  }

  const IntensityPair* contrast =
      spec.intensity_contrast.empty() ? kDefaultContrast
                                      : spec.intensity_contrast.data();

  VolumeImage image;
  image.data = Tensor(Shape{spec.modalities, E, E, E});
  image.spacing = {1.0f, 1.0f, 1.0f};
  for (int m = 0; m < spec.modalities; ++m) {
    image.modalities.push_back(kModalityOrder[m]);
  }

  const int64_t voxels = E * E * E;
  std::vector<uint8_t> brain_mask(static_cast<size_t>(voxels), 0);
  for (int64_t z = 0; z < E; ++z) {
    for (int64_t y = 0; y < E; ++y) {
      for (int64_t x = 0; x < E; ++x) {
        if (brain.contains(z, y, x)) {
          brain_mask[static_cast<size_t>((z * E + y) * E + x)] = 1;
        }
      }
    }
  }

  float* data = image.data.mutable_data();
  for (int m = 0; m < spec.modalities; ++m) {
    float* ch = data + static_cast<int64_t>(m) * voxels;
    const IntensityPair pair = contrast[m];
    for (int64_t i = 0; i < voxels; ++i) {
      if (!brain_mask[static_cast<size_t>(i)]) continue;
      ch[i] = label.voxels[static_cast<size_t>(i)] ? pair.tumor : pair.brain;
    }
    if (spec.noise_sigma > 0.0f) {
      // Noise only inside the brain: the air background must stay exactly
      // zero so intensity normalization can mask it out.
      for (int64_t i = 0; i < voxels; ++i) {
        if (brain_mask[static_cast<size_t>(i)]) {
          ch[i] += static_cast<float>(rng.normal(0.0, spec.noise_sigma));
        }
      }
    }
  }

  return {std::move(image), std::move(label)};
}

PhantomDataset make_dataset(const PhantomSpec& spec_template, int n_train,
                            int n_test, uint64_t base_seed) {
  if (n_train < 1 || n_test < 0) {
    throw ConfigError("make_dataset needs n_train >= 1 and n_test >= 0");
  }
  PhantomDataset out;
  uint64_t seed = base_seed;
  for (int i = 0; i < n_train; ++i, ++seed) {
    PhantomSpec s = spec_template;
    s.seed = seed;
    auto [image, label] = generate_phantom(s);
    char id[32];
    std::snprintf(id, sizeof(id), "train_%03d", i);
    out.train.push_back({id, std::move(image), std::move(label)});
  }
  for (int i = 0; i < n_test; ++i, ++seed) {
    PhantomSpec s = spec_template;
    s.seed = seed;
    auto [image, label] = generate_phantom(s);
    char id[32];
    std::snprintf(id, sizeof(id), "test_%03d", i);
    out.test.push_back({id, std::move(image), std::move(label)});
  }
  return out;
}

void write_phantom_cases(const std::vector<PhantomCase>& cases,
                         const std::filesystem::path& root) {
  for (const PhantomCase& c : cases) {
    write_case(root / c.id, c.image, &c.label);
  }
}

}  // namespace volseg
