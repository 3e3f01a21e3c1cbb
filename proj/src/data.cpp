#include "chowflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "chowflow/errors.hpp"
#include "chowflow/io.hpp"
#include "chowflow/rng.hpp"

namespace chowflow::data {

namespace {

constexpr double kPi = std::numbers::pi;

void require_positive(std::size_t n, const char* what) {
  if (n == 0) throw ContractError(std::string(what) + ": n must be positive");
}

void add_noise(Rng& rng, Matrix& points, Eigen::Index row, double sd) {
  for (Eigen::Index j = 0; j < points.cols(); ++j) points(row, j) += sd * rng.normal();
}

}  // namespace

Matrix standard_normal(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = rng.normal();
  }
  return z;
}

Eigen::Vector3d moon_point(int arc, double angle) {
  if (arc == 0) return {std::cos(angle), std::sin(angle), 0.0};
  return {1.0 - std::cos(angle), kMoonsOffsetY - std::sin(angle), 1.0};
}

Eigen::Vector3d torus_point(double theta, double phi, double major, double minor) {
  const double ring = major + minor * std::cos(phi);
  return {ring * std::cos(theta), ring * std::sin(theta), minor * std::sin(phi)};
}

double torus_surface_distance(const Eigen::Vector3d& p, double major, double minor) {
  const double rho = std::hypot(p.x(), p.y());
  return std::abs(std::hypot(rho - major, p.z()) - minor);
}

Matrix mixture_means(std::size_t d) {
  if (d < 3) throw ContractError("mixture: need d >= 3");
  Matrix means = Matrix::Zero(3, static_cast<Eigen::Index>(d));
  means.row(0).head(3) << 6.0, 3.0, 3.0;
  means.row(1).head(3) << -2.0, -3.0, -2.0;
  means.row(2).head(3) << 0.0, 0.0, 5.0;
  return means;
}

Dataset gen_moons3d(std::size_t n, std::uint64_t seed, double noise_sd) {
  require_positive(n, "gen_moons3d");
  Rng rng(seed);
  Dataset ds{"moons3d", seed, Matrix(static_cast<Eigen::Index>(n), 3), {}, {}};
  ds.labels.resize(n);
  const std::size_t first = (n + 1) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const int arc = i < first ? 0 : 1;
    const double angle = rng.uniform(0.0, kPi);
    const auto row = static_cast<Eigen::Index>(i);
    ds.points.row(row) = moon_point(arc, angle).transpose();
    add_noise(rng, ds.points, row, noise_sd);
    ds.labels[i] = arc;
  }
  ds.args = {{"noise_sd", io::format_double(noise_sd)}};
  return ds;
}

Dataset gen_mixture(std::size_t n, std::size_t d, std::uint64_t seed, double sd) {
  require_positive(n, "gen_mixture");
  const Matrix means = mixture_means(d);
  Rng rng(seed);
  Dataset ds{"mixture", seed,
             Matrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)), {}, {}};
  ds.labels.resize(n);
  std::size_t row = 0;
  for (int c = 0; c < 3; ++c) {
    const std::size_t count = n / 3 + (static_cast<std::size_t>(c) < n % 3 ? 1 : 0);
    for (std::size_t i = 0; i < count; ++i, ++row) {
      const auto r = static_cast<Eigen::Index>(row);
      ds.points.row(r) = means.row(c);
      add_noise(rng, ds.points, r, sd);
      ds.labels[row] = c;
    }
  }
  // Fisher-Yates with the project stream (std::shuffle is not portable).
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.index(i + 1);
    if (j != i) {
      ds.points.row(static_cast<Eigen::Index>(i)).swap(ds.points.row(static_cast<Eigen::Index>(j)));
      std::swap(ds.labels[i], ds.labels[j]);
    }
  }
  ds.args = {{"d", std::to_string(d)}, {"sd", io::format_double(sd)}};
  return ds;
}

Dataset gen_torus3d(std::size_t n, std::uint64_t seed, double major, double minor,
                    double noise_sd) {
  require_positive(n, "gen_torus3d");
  if (!(major > minor && minor > 0.0)) throw ContractError("gen_torus3d: need R > r > 0");
  Rng rng(seed);
  Dataset ds{"torus3d", seed, Matrix(static_cast<Eigen::Index>(n), 3), {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    const double phi = rng.uniform(0.0, 2.0 * kPi);
    const auto row = static_cast<Eigen::Index>(i);
    ds.points.row(row) = torus_point(theta, phi, major, minor).transpose();
    add_noise(rng, ds.points, row, noise_sd);
  }
  ds.args = {{"R", io::format_double(major)},
             {"r", io::format_double(minor)},
             {"noise_sd", io::format_double(noise_sd)}};
  return ds;
}

Dataset gen_base_gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  require_positive(n, "gen_base_gaussian");
  Dataset ds{"gaussian", seed, standard_normal(n, d, seed), {}, {}};
  ds.args = {{"d", std::to_string(d)}};
  return ds;
}

bool is_known_dataset(const std::string& name) {
  return name == "moons3d" || name == "mixture" || name == "torus3d" || name == "gaussian";
}

Dataset generate(const std::string& name, std::size_t n, std::uint64_t seed, std::size_t d) {
  if (name == "moons3d") return gen_moons3d(n, seed);
  if (name == "mixture") return gen_mixture(n, d, seed);
  if (name == "torus3d") return gen_torus3d(n, seed);
  if (name == "gaussian") return gen_base_gaussian(n, d, seed);
  throw ContractError("unknown dataset '" + name + "' (expected moons3d, mixture, torus3d, gaussian)");
}

std::string to_csv(const Matrix& points) {
  std::string out;
  out.reserve(static_cast<std::size_t>(points.size()) * 24 + 64);
  for (Eigen::Index j = 0; j < points.cols(); ++j) {
    if (j) out += ',';
    out += 'x' + std::to_string(j + 1);
  }
  out += '\n';
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
      if (j) out += ',';
      out += io::format_double(points(i, j));
    }
    out += '\n';
  }
  return out;
}

void write_csv(const Matrix& points, const std::filesystem::path& path) {
  io::write_text_atomic(path, to_csv(points));
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_csv(ds.points, path);
  std::ostringstream meta;
  meta << "name=" << ds.name << '\n'
       << "seed=" << ds.seed << '\n'
       << "n=" << ds.size() << '\n'
       << "d=" << ds.dim() << '\n';
  for (const auto& [k, v] : ds.args) meta << k << '=' << v << '\n';
  io::write_text_atomic(path.string() + ".meta", meta.str());
}

Matrix read_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw ParseError("'" + path.string() + "' is empty");
  const auto columns = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ',') + 1);

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    std::size_t start = 0;
    Eigen::Index count = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      try {
        values.push_back(io::parse_double(std::string_view(line).substr(
            start, comma == std::string::npos ? std::string::npos : comma - start)));
      } catch (const ParseError& e) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      ++count;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (count != columns) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(columns) + " columns, found " + std::to_string(count));
    }
    ++rows;
  }
  return Eigen::Map<Matrix>(values.data(), static_cast<Eigen::Index>(rows), columns);
}

}  // namespace chowflow::data
