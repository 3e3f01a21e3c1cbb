#pragma once

// Seeded synthetic targets (3-d moons, Gaussian mixture, torus) and the
// standard Gaussian base, with CSV persistence.
//
// Every generator is a pure function of its arguments and seed. Noise is
// always drawn, even when its scale is zero, so a noiseless and a noisy
// dataset with the same seed share their underlying manifold points.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "chowflow/diff.hpp"

namespace chowflow::data {

using diff::Matrix;

struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
  Matrix points;                               ///< n x d
  std::vector<int> labels;                     ///< arc / component per row, if any
  std::map<std::string, std::string> args;     ///< generator arguments, for the sidecar

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(points.cols()); }
};

inline constexpr double kMoonsNoise = 0.1;
inline constexpr double kMoonsOffsetY = 0.5;
inline constexpr double kTorusMajor = 3.0;
inline constexpr double kTorusMinor = 0.75;
inline constexpr double kTorusNoise = 0.07;
inline constexpr double kMixtureSd = 0.6;
inline constexpr std::size_t kDefaultTrainingSize = 20000;

/// n x d standard normal draws, filled row by row from one Box-Muller stream.
Matrix standard_normal(std::size_t n, std::size_t d, std::uint64_t seed);

/// Noiseless moon point; arc 0 is the unit upper semicircle at z = 0 and
/// arc 1 its complementary arc (1 - cos, 0.5 - sin) in the plane z = 1.
/// angle in [0, pi].
Eigen::Vector3d moon_point(int arc, double angle);

/// ((R + r cos phi) cos theta, (R + r cos phi) sin theta, r sin phi).
Eigen::Vector3d torus_point(double theta, double phi, double major, double minor);

/// Distance from p to the ideal torus surface.
double torus_surface_distance(const Eigen::Vector3d& p, double major, double minor);

/// Component means: (6,3,3), (-2,-3,-2), (0,0,5) padded with zeros to d.
Matrix mixture_means(std::size_t d);

Dataset gen_moons3d(std::size_t n, std::uint64_t seed, double noise_sd = kMoonsNoise);
Dataset gen_mixture(std::size_t n, std::size_t d, std::uint64_t seed, double sd = kMixtureSd);
Dataset gen_torus3d(std::size_t n, std::uint64_t seed, double major = kTorusMajor,
                    double minor = kTorusMinor, double noise_sd = kTorusNoise);
Dataset gen_base_gaussian(std::size_t n, std::size_t d, std::uint64_t seed);

/// Dispatch by name: moons3d, mixture, torus3d, gaussian. d applies to
/// mixture and gaussian only. Throws ContractError for unknown names.
Dataset generate(const std::string& name, std::size_t n, std::uint64_t seed, std::size_t d = 3);
bool is_known_dataset(const std::string& name);

/// Header x1,...,xd then one row per point, 17 significant digits.
std::string to_csv(const Matrix& points);
void write_csv(const Matrix& points, const std::filesystem::path& path);
/// Writes the CSV plus `<path>.meta` with name, seed, n, d and args.
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
/// Reads a headered numeric CSV (all columns).
Matrix read_csv(const std::filesystem::path& path);

}  // namespace chowflow::data
