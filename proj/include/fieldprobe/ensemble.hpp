#ifndef FIELDPROBE_ENSEMBLE_HPP
#define FIELDPROBE_ENSEMBLE_HPP

// Parameter space, field domain and the on-disk ensemble format:
// a manifest.json plus one raw little-endian float32 file per member,
// row-major in (t, y, x, component) order.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <Eigen/Dense>

#include "json.hpp"

#include "fieldprobe/errors.hpp"

namespace fieldprobe {

static_assert(std::endian::native == std::endian::little,
              "member files are read and written as native little-endian floats");

namespace fs = std::filesystem;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct ParameterSpace {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<std::string> names;

  std::size_t dim() const { return lower.size(); }

  void validate() const {
    if (lower.empty()) throw ConfigError("parameter space must have dim >= 1");
    if (upper.size() != lower.size() || names.size() != lower.size())
      throw ConfigError("parameter space bounds/names length mismatch");
    for (std::size_t j = 0; j < dim(); ++j)
      if (!(lower[j] < upper[j]))
        throw ConfigError("parameter space needs lower < upper on axis " + names[j]);
  }

  /// Physical units -> internal unit cube [-1, 1]^d.
  Vec normalize(const Vec& z) const {
    Vec u(dim());
    for (std::size_t j = 0; j < dim(); ++j)
      u[j] = 2.0 * (z[j] - lower[j]) / (upper[j] - lower[j]) - 1.0;
    return u;
  }

  Vec denormalize(const Vec& u) const {
    Vec z(dim());
    for (std::size_t j = 0; j < dim(); ++j)
      z[j] = lower[j] + 0.5 * (u[j] + 1.0) * (upper[j] - lower[j]);
    return z;
  }

  bool contains(const Vec& z) const {
    if (static_cast<std::size_t>(z.size()) != dim()) return false;
    for (std::size_t j = 0; j < dim(); ++j)
      if (!(z[j] >= lower[j] && z[j] <= upper[j])) return false;
    return true;
  }

  static bool contains_normalized(const Eigen::Ref<const Vec>& u) {
    return (u.array() >= -1.0).all() && (u.array() <= 1.0).all();
  }
};

/// Regular sampling grid over (t, y, x). Network coordinates are ordered
/// (x, y[, t]) and normalized to [-1, 1] per axis.
struct DomainSpec {
  int spatial_dims = 2;
  bool has_time = true;
  std::vector<std::size_t> resolution;        // axis order: [t,] y, x
  std::vector<std::array<double, 2>> bounds;  // same order
  std::size_t output_dim = 2;

  std::size_t coord_dim() const { return spatial_dims + (has_time ? 1 : 0); }

  std::vector<std::string> axes() const {
    if (has_time) return {"t", "y", "x"};
    return {"y", "x"};
  }

  void validate() const {
    if (spatial_dims != 2) throw ConfigError("only 2 spatial dimensions are supported");
    if (resolution.size() != coord_dim() || bounds.size() != coord_dim())
      throw ConfigError("domain resolution/bounds must list one entry per axis");
    for (std::size_t a = 0; a < coord_dim(); ++a) {
      if (resolution[a] == 0) throw ConfigError("domain resolution must be positive");
      if (!(bounds[a][0] < bounds[a][1])) throw ConfigError("domain bounds need lo < hi");
    }
    if (output_dim == 0) throw ConfigError("output_dim must be positive");
  }

  std::size_t time_resolution() const { return has_time ? resolution[0] : 1; }
  std::size_t ny() const { return resolution[has_time ? 1 : 0]; }
  std::size_t nx() const { return resolution[has_time ? 2 : 1]; }
  std::size_t slice_points() const { return ny() * nx(); }
  std::size_t points_per_member() const { return time_resolution() * slice_points(); }
  std::size_t values_per_member() const { return points_per_member() * output_dim; }

  const std::array<double, 2>& x_bounds() const { return bounds[has_time ? 2 : 1]; }
  const std::array<double, 2>& y_bounds() const { return bounds[has_time ? 1 : 0]; }
  std::array<double, 2> t_bounds() const {
    return has_time ? bounds[0] : std::array<double, 2>{0.0, 0.0};
  }

  /// Grid node value along an axis; nodes include both ends.
  static double node(std::size_t i, std::size_t n, const std::array<double, 2>& b) {
    if (n == 1) return 0.5 * (b[0] + b[1]);
    return b[0] + (b[1] - b[0]) * static_cast<double>(i) / static_cast<double>(n - 1);
  }
  static double to_unit(double v, const std::array<double, 2>& b) {
    return 2.0 * (v - b[0]) / (b[1] - b[0]) - 1.0;
  }
  static double from_unit(double u, const std::array<double, 2>& b) {
    return b[0] + 0.5 * (u + 1.0) * (b[1] - b[0]);
  }

  /// Physical point (x, y[, t]) -> normalized network coordinates.
  Vec normalize_point(const Vec& p) const {
    Vec u(coord_dim());
    u[0] = to_unit(p[0], x_bounds());
    u[1] = to_unit(p[1], y_bounds());
    if (has_time) u[2] = to_unit(p[2], t_bounds());
    return u;
  }
  Vec denormalize_point(const Vec& u) const {
    Vec p(coord_dim());
    p[0] = from_unit(u[0], x_bounds());
    p[1] = from_unit(u[1], y_bounds());
    if (has_time) p[2] = from_unit(u[2], t_bounds());
    return p;
  }
  double normalize_time(double t) const { return has_time ? to_unit(t, t_bounds()) : 0.0; }
  double denormalize_time(double u) const { return has_time ? from_unit(u, t_bounds()) : 0.0; }
  double time_of_index(std::size_t ti) const {
    return has_time ? node(ti, resolution[0], bounds[0]) : 0.0;
  }

  /// Physical (x, y[, t]) of the grid point with flat row-major index (t, y, x).
  Vec grid_point(std::size_t flat) const {
    const std::size_t ix = flat % nx();
    const std::size_t iy = (flat / nx()) % ny();
    const std::size_t it = flat / slice_points();
    Vec p(coord_dim());
    p[0] = node(ix, nx(), x_bounds());
    p[1] = node(iy, ny(), y_bounds());
    if (has_time) p[2] = node(it, resolution[0], bounds[0]);
    return p;
  }
};

struct MemberRecord {
  std::size_t id = 0;
  Vec z;  // physical units
  std::string file;
};

inline nlohmann::json to_json(const ParameterSpace& s) {
  return {{"dim", s.dim()}, {"lower", s.lower}, {"upper", s.upper}, {"names", s.names}};
}

inline ParameterSpace parameter_space_from_json(const nlohmann::json& j) {
  ParameterSpace s;
  s.lower = j.at("lower").get<std::vector<double>>();
  s.upper = j.at("upper").get<std::vector<double>>();
  s.names = j.contains("names") ? j.at("names").get<std::vector<std::string>>()
                                : std::vector<std::string>(s.lower.size());
  if (j.contains("dim") && j.at("dim").get<std::size_t>() != s.lower.size())
    throw FormatError("parameter_space.dim does not match bounds length");
  return s;
}

inline nlohmann::json to_json(const DomainSpec& d) {
  nlohmann::json bounds = nlohmann::json::array();
  for (const auto& b : d.bounds) bounds.push_back({b[0], b[1]});
  return {{"axes", d.axes()},
          {"resolution", d.resolution},
          {"bounds", bounds},
          {"output_dim", d.output_dim}};
}

inline DomainSpec domain_from_json(const nlohmann::json& j) {
  DomainSpec d;
  const auto axes = j.at("axes").get<std::vector<std::string>>();
  if (axes == std::vector<std::string>{"t", "y", "x"}) {
    d.has_time = true;
  } else if (axes == std::vector<std::string>{"y", "x"}) {
    d.has_time = false;
  } else {
    throw FormatError("domain.axes must be [\"t\",\"y\",\"x\"] or [\"y\",\"x\"]");
  }
  d.resolution = j.at("resolution").get<std::vector<std::size_t>>();
  for (const auto& b : j.at("bounds")) d.bounds.push_back({b.at(0).get<double>(), b.at(1).get<double>()});
  d.output_dim = j.at("output_dim").get<std::size_t>();
  return d;
}

namespace detail {

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

class FileLock {
 public:
  explicit FileLock(const fs::path& p) {
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0 || ::flock(fd_, LOCK_EX) != 0) {
      if (fd_ >= 0) ::close(fd_);
      throw IoError("cannot lock " + p.string());
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace detail

class EnsembleDataset {
 public:
  static constexpr int kVersion = 1;

  /// Creates an empty dataset directory with a manifest and no members.
  static EnsembleDataset create(const fs::path& root, ParameterSpace space, DomainSpec domain) {
    space.validate();
    domain.validate();
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
    EnsembleDataset ds;
    ds.root_ = root;
    ds.space_ = std::move(space);
    ds.domain_ = std::move(domain);
    ds.write_manifest_atomic(ds.manifest_json());
    return ds;
  }

  static EnsembleDataset load_manifest(const fs::path& root) {
    const fs::path mp = root / "manifest.json";
    if (!fs::exists(mp)) throw NotFound("no manifest.json in " + root.string());
    EnsembleDataset ds;
    ds.root_ = root;
    ds.parse(read_json(mp));
    return ds;
  }

  const fs::path& root() const { return root_; }
  const ParameterSpace& space() const { return space_; }
  const DomainSpec& domain() const { return domain_; }
  const std::vector<MemberRecord>& members() const { return members_; }
  std::size_t count() const { return members_.size(); }

  const MemberRecord& member(std::size_t id) const {
    for (const auto& m : members_)
      if (m.id == id) return m;
    throw NotFound("no member with id " + std::to_string(id));
  }

  /// Reads one member's full field (t, y, x, component).
  std::vector<float> load_member(std::size_t id) const {
    return read_floats(root_ / member(id).file, 0, domain_.values_per_member());
  }

  /// Reads the spatial slice (y, x, component) at one time index.
  std::vector<float> read_member_slice(std::size_t id, std::size_t time_index) const {
    if (time_index >= domain_.time_resolution())
      throw RangeError("time index " + std::to_string(time_index) + " out of range [0, " +
                       std::to_string(domain_.time_resolution()) + ")");
    const std::size_t n = domain_.slice_points() * domain_.output_dim;
    return read_floats(root_ / member(id).file, time_index * n, n);
  }

  /// Appends a member; the manifest is replaced atomically under an
  /// exclusive lock so concurrent writers never lose each other's records.
  std::size_t write_member(const Vec& z, std::span<const float> field) {
    if (static_cast<std::size_t>(z.size()) != space_.dim())
      throw FormatError("parameter vector length does not match dim");
    if (!space_.contains(z)) throw RangeError("parameter vector outside the parameter box");
    if (field.size() != domain_.values_per_member())
      throw FormatError("field has " + std::to_string(field.size()) + " values, expected " +
                        std::to_string(domain_.values_per_member()));
    for (float v : field)
      if (!std::isfinite(v)) throw FormatError("field contains non-finite values");

    detail::FileLock lock(root_ / ".manifest.lock");
    parse(read_json(root_ / "manifest.json"));
    std::size_t id = 0;
    for (const auto& m : members_) id = std::max(id, m.id + 1);
    char name[64];
    std::snprintf(name, sizeof(name), "member_%06zu.f32", id);
    const fs::path file = root_ / name;
    {
      std::ofstream out(file, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(field.data()),
                static_cast<std::streamsize>(field.size() * sizeof(float)));
      out.flush();
      if (!out) {
        std::error_code ec;
        fs::remove(file, ec);
        throw IoError("failed writing " + file.string());
      }
    }
    MemberRecord rec{id, z, name};
    auto next = members_;
    next.push_back(rec);
    auto j = manifest_json(next);
    write_manifest_atomic(j);
    members_ = std::move(next);
    return id;
  }

 private:
  static nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
  }

  void parse(const nlohmann::json& j) {
    try {
      if (j.value("version", 0) != kVersion) throw FormatError("unsupported manifest version");
      space_ = parameter_space_from_json(j.at("parameter_space"));
      domain_ = domain_from_json(j.at("domain"));
      try {
        space_.validate();
        domain_.validate();
      } catch (const ConfigError& e) {
        throw FormatError(e.what());
      }
      members_.clear();
      const auto expect_bytes = domain_.values_per_member() * sizeof(float);
      for (const auto& m : j.at("members")) {
        MemberRecord rec;
        rec.id = m.at("id").get<std::size_t>();
        const auto z = m.at("z").get<std::vector<double>>();
        if (z.size() != space_.dim())
          throw FormatError("member " + std::to_string(rec.id) + " has z of length " +
                            std::to_string(z.size()) + ", manifest dim is " +
                            std::to_string(space_.dim()));
        rec.z = Eigen::Map<const Vec>(z.data(), static_cast<Eigen::Index>(z.size()));
        if (!space_.contains(rec.z))
          throw FormatError("member " + std::to_string(rec.id) + " lies outside the box");
        rec.file = m.at("file").get<std::string>();
        std::error_code ec;
        const auto size = fs::file_size(root_ / rec.file, ec);
        if (ec || size != expect_bytes)
          throw FormatError("member file " + rec.file + " has wrong size");
        members_.push_back(std::move(rec));
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed manifest: ") + e.what());
    }
  }

  nlohmann::json manifest_json() const { return manifest_json(members_); }

  nlohmann::json manifest_json(const std::vector<MemberRecord>& members) const {
    nlohmann::json mem = nlohmann::json::array();
    for (const auto& m : members)
      mem.push_back({{"id", m.id}, {"z", detail::to_std(m.z)}, {"file", m.file}});
    return {{"version", kVersion},
            {"parameter_space", to_json(space_)},
            {"domain", to_json(domain_)},
            {"members", mem}};
  }

  void write_manifest_atomic(const nlohmann::json& j) const {
    const fs::path tmp = root_ / ("manifest.json.tmp." + std::to_string(::getpid()));
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << j.dump(1);
      out.flush();
      if (!out) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw IoError("failed writing " + tmp.string());
      }
    }
    std::error_code ec;
    fs::rename(tmp, root_ / "manifest.json", ec);
    if (ec) {
      fs::remove(tmp, ec);
      throw IoError("cannot replace manifest in " + root_.string());
    }
  }

  static std::vector<float> read_floats(const fs::path& p, std::size_t offset, std::size_t n) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::vector<float> out(n);
    in.seekg(static_cast<std::streamoff>(offset * sizeof(float)));
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw FormatError("short read from " + p.string());
    return out;
  }

  fs::path root_;
  ParameterSpace space_;
  DomainSpec domain_;
  std::vector<MemberRecord> members_;
};

}  // namespace fieldprobe

#endif  // FIELDPROBE_ENSEMBLE_HPP
