#pragma once

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "semtomo/errors.hpp"
#include "semtomo/geometry.hpp"
#include "semtomo/kernel.hpp"
#include "semtomo/posterior.hpp"
#include "semtomo/projection.hpp"
#include "semtomo/sampler.hpp"
#include "semtomo/simulator.hpp"

namespace semtomo {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// %.17g round-trips binary64 exactly, so rewritten files stay byte-stable.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw data_error("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw data_error("rename failed: " + path.string() + ": " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---------------------------------------------------------------------------
// Small parsing helpers (diagnostics carry file:line).

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  const std::string t = trim(s);
  if (t.empty()) throw data_error(where + ": empty cell");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size())
    throw data_error(where + ": non-numeric value '" + t + "'");
  return v;
}

// Split into complete lines; a trailing fragment without a newline is
// returned separately (crash-truncated logs end that way).
inline std::pair<std::vector<std::string>, bool> complete_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t pos = text.find('\n', start);
    if (pos == std::string::npos) return {std::move(lines), true};
    lines.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return {std::move(lines), false};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Image planes: one CSV grid per energy, row-major in Y.

struct Plane {
  int n_side = 0;
  double energy_kv = 0.0;
  std::vector<double> values;  // beam-pointing order, i = x + (y-1) * n_side
};

inline std::string plane_csv(const CellArray& a, int k, int n_side, double energy_kv) {
  std::ostringstream os;
  os << "# n_side=" << n_side << " energy_kv=" << format_g17(energy_kv) << "\n";
  for (int y = 1; y <= n_side; ++y) {
    for (int x = 1; x <= n_side; ++x) {
      if (x > 1) os << ',';
      os << format_g17(a.at(x + (y - 1) * n_side, k));
    }
    os << '\n';
  }
  return os.str();
}

inline void write_plane(const fs::path& path, const CellArray& a, int k, int n_side,
                        double energy_kv) {
  atomic_write(path, plane_csv(a, k, n_side, energy_kv));
}

inline Plane read_plane(const fs::path& path) {
  const std::string text = read_file(path);
  auto [lines, truncated] = detail::complete_lines(text);
  if (truncated) lines.push_back(text.substr(text.rfind('\n') + 1));
  if (lines.empty()) throw data_error(path.string() + ":1: empty plane file");
  Plane p;
  if (std::sscanf(lines[0].c_str(), "# n_side=%d energy_kv=%lf", &p.n_side, &p.energy_kv) != 2)
    throw data_error(path.string() + ":1: bad plane header (want '# n_side=N energy_kv=E')");
  if (p.n_side < 1) throw data_error(path.string() + ":1: bad n_side");
  p.values.assign(static_cast<std::size_t>(p.n_side) * p.n_side, 0.0);
  int row = 0;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    if (row >= p.n_side) throw data_error(where + ": more rows than n_side=" +
                                          std::to_string(p.n_side));
    const auto cells = detail::split_csv(line);
    if (static_cast<int>(cells.size()) != p.n_side)
      throw data_error(where + ": expected " + std::to_string(p.n_side) + " cells, got " +
                       std::to_string(cells.size()));
    for (int x = 1; x <= p.n_side; ++x)
      p.values[static_cast<std::size_t>(x - 1) + static_cast<std::size_t>(row) * p.n_side] =
          detail::parse_double(cells[x - 1], where);
    ++row;
  }
  if (row != p.n_side)
    throw data_error(path.string() + ": expected " + std::to_string(p.n_side) + " rows, got " +
                     std::to_string(row));
  return p;
}

// ---------------------------------------------------------------------------
// Stack manifest (JSON) + plane files.

struct LoadedStack {
  ImageStack stack;
  double omega = 0.0;
  int n_side = 0;
  std::vector<double> energies;
  MaterialConstants material;

  Grid make_grid() const { return Grid::from_material(omega, n_side, energies, material); }
};

inline ordered_json material_json(const MaterialConstants& m) {
  return ordered_json{{"atomic_number", m.atomic_number},
                      {"atomic_weight", m.atomic_weight},
                      {"mass_density", m.mass_density},
                      {"range_coefficient", m.range_coefficient}};
}

inline MaterialConstants material_from_json(const ordered_json& j, const std::string& where) {
  MaterialConstants m;
  try {
    m.atomic_number = j.at("atomic_number").get<double>();
    m.atomic_weight = j.at("atomic_weight").get<double>();
    m.mass_density = j.at("mass_density").get<double>();
    if (j.contains("range_coefficient")) m.range_coefficient = j.at("range_coefficient").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(where + ": bad material block: " + e.what());
  }
  return m;
}

// Writes manifest.json, plane_<k>.csv, sigma_<k>.csv into dir.
inline void write_stack(const fs::path& dir, const Grid& g, const ImageStack& s,
                        const MaterialConstants& material) {
  fs::create_directories(dir);
  ordered_json planes = ordered_json::array();
  for (int k = 1; k <= g.n_eng(); ++k) {
    const std::string data_name = "plane_" + std::to_string(k) + ".csv";
    const std::string sigma_name = "sigma_" + std::to_string(k) + ".csv";
    write_plane(dir / data_name, s.data, k, g.n_side(), g.energy(k));
    write_plane(dir / sigma_name, s.sigma, k, g.n_side(), g.energy(k));
    planes.push_back(
        ordered_json{{"energy_kv", g.energy(k)}, {"data", data_name}, {"sigma", sigma_name}});
  }
  ordered_json man{
      {"units", ordered_json{{"length", "micrometre"}, {"energy", "kV"}, {"density", "model"}}},
      {"omega", g.omega()},
      {"n_side", g.n_side()},
      {"material", material_json(material)},
      {"planes", planes},
      {"clamped", s.clamped}};
  atomic_write(dir / "manifest.json", man.dump(2) + "\n");
}

inline LoadedStack load_stack(const fs::path& manifest_path, const NoiseModel& fallback_noise = {},
                              bool decompose = true) {
  ordered_json man;
  try {
    man = ordered_json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(manifest_path.string() + ": JSON parse error: " + e.what());
  }
  const std::string where = manifest_path.string();
  LoadedStack out;
  try {
    out.omega = man.at("omega").get<double>();
    out.n_side = man.at("n_side").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(where + ": bad grid metadata: " + e.what());
  }
  if (!man.contains("material")) throw data_error(where + ": missing material block");
  out.material = material_from_json(man.at("material"), where);
  if (!man.contains("planes") || !man.at("planes").is_array() || man.at("planes").empty())
    throw data_error(where + ": manifest needs a nonempty planes array");

  const fs::path dir = manifest_path.parent_path();
  const int nd = out.n_side * out.n_side;
  const int ne = static_cast<int>(man.at("planes").size());
  out.stack.data = CellArray(nd, ne);
  out.stack.sigma = CellArray(nd, ne);
  if (man.contains("clamped")) out.stack.clamped = man.at("clamped").get<long>();

  int k = 0;
  for (const auto& pj : man.at("planes")) {
    ++k;
    double energy = 0.0;
    std::string data_name;
    try {
      energy = pj.at("energy_kv").get<double>();
      data_name = pj.at("data").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw data_error(where + ": planes[" + std::to_string(k - 1) + "]: " + e.what());
    }
    if (!out.energies.empty() && !(energy > out.energies.back()))
      throw data_error(where + ": plane energies must be strictly increasing (plane " +
                       std::to_string(k) + ")");
    out.energies.push_back(energy);

    const Plane dp = read_plane(dir / data_name);
    if (dp.n_side != out.n_side)
      throw data_error(where + ": " + data_name + ": n_side " + std::to_string(dp.n_side) +
                       " does not match manifest n_side " + std::to_string(out.n_side));
    if (dp.energy_kv != energy)
      throw data_error(where + ": " + data_name + ": plane energy does not match manifest");
    for (int i = 1; i <= nd; ++i) out.stack.data.at(i, k) = dp.values[i - 1];

    if (pj.contains("sigma")) {
      const Plane sp = read_plane(dir / pj.at("sigma").get<std::string>());
      if (sp.n_side != out.n_side)
        throw data_error(where + ": sigma plane n_side mismatch (plane " + std::to_string(k) + ")");
      for (int i = 1; i <= nd; ++i) out.stack.sigma.at(i, k) = sp.values[i - 1];
    } else {
      for (int i = 1; i <= nd; ++i)
        out.stack.sigma.at(i, k) = fallback_noise.sigma_for(out.stack.data.at(i, k));
    }
  }
  validate_stack(out.stack);
  if (decompose) decompose_low_rank(out.stack);
  return out;
}

// ---------------------------------------------------------------------------
// Ground-truth sidecar (simulator output, used for scoring).

struct Truth {
  std::string name;
  std::uint64_t seed = 0;
  DensityField field;
  KernelVector kernel;
};

inline void write_truth(const fs::path& path, const std::string& name, std::uint64_t seed,
                        const DensityField& f, const KernelVector& kern) {
  ordered_json j{{"name", name},
                 {"seed", seed},
                 {"n_data", f.n_data},
                 {"n_eng", f.n_eng},
                 {"surface", kern.surface()},
                 {"kernel", kern.bins},
                 {"field", f.values}};
  atomic_write(path, j.dump(2) + "\n");
}

inline Truth read_truth(const fs::path& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": JSON parse error: " + e.what());
  }
  Truth t;
  try {
    t.name = j.at("name").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.field.n_data = j.at("n_data").get<int>();
    t.field.n_eng = j.at("n_eng").get<int>();
    t.field.values = j.at("field").get<std::vector<double>>();
    t.kernel.bins = j.at("kernel").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": bad truth sidecar: " + e.what());
  }
  if (t.field.values.size() != static_cast<std::size_t>(t.field.n_data) * t.field.n_eng)
    throw data_error(path.string() + ": field size mismatch");
  return t;
}

// ---------------------------------------------------------------------------
// Voxel-table and kernel CSV (inputs to `project`, golden-file friendly).

inline std::string cell_table_csv(const CellArray& a, const char* value_name) {
  std::ostringstream os;
  os << "# n_data=" << a.n_data << " n_eng=" << a.n_eng << "\n";
  os << "i,k," << value_name << "\n";
  for (int i = 1; i <= a.n_data; ++i)
    for (int k = 1; k <= a.n_eng; ++k)
      os << i << ',' << k << ',' << format_g17(a.at(i, k)) << '\n';
  return os.str();
}

inline std::string field_csv(const DensityField& f) { return cell_table_csv(f, "xi"); }

inline void write_field_csv(const fs::path& path, const DensityField& f) {
  atomic_write(path, field_csv(f));
}

inline DensityField read_field_csv(const fs::path& path) {
  const std::string text = read_file(path);
  auto [lines, truncated] = detail::complete_lines(text);
  if (truncated) lines.push_back(text.substr(text.rfind('\n') + 1));
  if (lines.size() < 2) throw data_error(path.string() + ": truncated field file");
  int nd = 0, ne = 0;
  if (std::sscanf(lines[0].c_str(), "# n_data=%d n_eng=%d", &nd, &ne) != 2 || nd < 1 || ne < 1)
    throw data_error(path.string() + ":1: bad field header");
  DensityField f(nd, ne);
  std::vector<bool> seen(static_cast<std::size_t>(nd) * ne, false);
  for (std::size_t ln = 2; ln < lines.size(); ++ln) {
    const std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    const auto cells = detail::split_csv(line);
    if (cells.size() != 3) throw data_error(where + ": expected i,k,xi");
    const int i = static_cast<int>(detail::parse_double(cells[0], where));
    const int k = static_cast<int>(detail::parse_double(cells[1], where));
    if (i < 1 || i > nd || k < 1 || k > ne) throw data_error(where + ": voxel index out of range");
    f.at(i, k) = detail::parse_double(cells[2], where);
    seen[static_cast<std::size_t>(i - 1) * ne + (k - 1)] = true;
  }
  for (bool b : seen)
    if (!b) throw data_error(path.string() + ": missing voxel rows");
  return f;
}

inline std::string kernel_csv(const KernelVector& kern) {
  std::ostringstream os;
  os << "# n_eng=" << kern.size() << "\n";
  os << "j,eta\n";
  for (int j = 0; j < kern.size(); ++j) os << j << ',' << format_g17(kern.bins[j]) << '\n';
  return os.str();
}

inline void write_kernel_csv(const fs::path& path, const KernelVector& kern) {
  atomic_write(path, kernel_csv(kern));
}

inline KernelVector read_kernel_csv(const fs::path& path) {
  const std::string text = read_file(path);
  auto [lines, truncated] = detail::complete_lines(text);
  if (truncated) lines.push_back(text.substr(text.rfind('\n') + 1));
  if (lines.size() < 2) throw data_error(path.string() + ": truncated kernel file");
  int ne = 0;
  if (std::sscanf(lines[0].c_str(), "# n_eng=%d", &ne) != 1 || ne < 1)
    throw data_error(path.string() + ":1: bad kernel header");
  KernelVector kern;
  kern.bins.assign(ne, 0.0);
  std::vector<bool> seen(ne, false);
  for (std::size_t ln = 2; ln < lines.size(); ++ln) {
    const std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    const auto cells = detail::split_csv(line);
    if (cells.size() != 2) throw data_error(where + ": expected j,eta");
    const int j = static_cast<int>(detail::parse_double(cells[0], where));
    if (j < 0 || j >= ne) throw data_error(where + ": bin index out of range");
    kern.bins[j] = detail::parse_double(cells[1], where);
    seen[j] = true;
  }
  for (bool b : seen)
    if (!b) throw data_error(path.string() + ": missing kernel rows");
  return kern;
}

// ---------------------------------------------------------------------------
// Run configuration (JSON).

struct RunConfig {
  SamplerConfig sampler;
  NoiseModel noise;
  bool decompose = true;
  long checkpoint_interval = 0;  // sweeps; 0 -> 50 * thin
  double physical_surface = 0.0;  // 0 = report kernel in model units
  std::optional<ResolutionRegime> regime;
  double hpd_mass = 0.95;

  long effective_checkpoint_interval() const {
    long iv = checkpoint_interval > 0 ? checkpoint_interval : 50 * sampler.thin;
    // checkpoints only land on trace boundaries
    iv = std::max(iv, sampler.thin);
    if (iv % sampler.thin != 0) iv += sampler.thin - iv % sampler.thin;
    return iv;
  }
};

namespace detail {

inline void check_keys(const ordered_json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw config_error(where + ": unknown key '" + key + "'");
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const ordered_json& j, const std::string& where) {
  RunConfig cfg;
  try {
    detail::check_keys(j,
                       {"kernel", "noise", "sampler", "regime", "k_in", "decompose",
                        "checkpoint_interval", "hpd_mass"},
                       where);
    if (j.contains("kernel")) {
      const auto& kj = j.at("kernel");
      detail::check_keys(kj,
                         {"model", "moves", "surface", "physical_surface", "update_hypers",
                          "free_amplitude", "free_mode_depth", "free_amplitude_max",
                          "free_mode_max", "amplitude_mean", "amplitude_sd", "spread_mean",
                          "spread_sd", "q_walk", "mode_walk"},
                         where + ": kernel");
      if (kj.contains("model")) {
        const std::string m = kj.at("model").get<std::string>();
        if (m == "free")
          cfg.sampler.kernel_model = SamplerConfig::KernelModel::free;
        else if (m == "parametric")
          cfg.sampler.kernel_model = SamplerConfig::KernelModel::parametric;
        else
          throw config_error(where + ": kernel.model must be 'free' or 'parametric'");
      }
      if (kj.contains("moves")) {
        const std::string m = kj.at("moves").get<std::string>();
        if (m == "joint")
          cfg.sampler.kernel_moves = SamplerConfig::KernelMoves::joint;
        else if (m == "scan")
          cfg.sampler.kernel_moves = SamplerConfig::KernelMoves::scan;
        else
          throw config_error(where + ": kernel.moves must be 'joint' or 'scan'");
      }
      if (kj.contains("surface")) cfg.sampler.kernel_surface = kj.at("surface").get<double>();
      if (kj.contains("physical_surface"))
        cfg.physical_surface = kj.at("physical_surface").get<double>();
      if (kj.contains("update_hypers"))
        cfg.sampler.update_kernel_hypers = kj.at("update_hypers").get<bool>();
      if (kj.contains("free_amplitude"))
        cfg.sampler.free_amplitude = kj.at("free_amplitude").get<double>();
      if (kj.contains("free_mode_depth"))
        cfg.sampler.free_mode_depth = kj.at("free_mode_depth").get<double>();
      if (kj.contains("free_amplitude_max"))
        cfg.sampler.free_amplitude_max = kj.at("free_amplitude_max").get<double>();
      if (kj.contains("free_mode_max"))
        cfg.sampler.free_mode_max = kj.at("free_mode_max").get<double>();
      if (kj.contains("amplitude_mean"))
        cfg.sampler.par_amplitude_mean = kj.at("amplitude_mean").get<double>();
      if (kj.contains("amplitude_sd"))
        cfg.sampler.par_amplitude_sd = kj.at("amplitude_sd").get<double>();
      if (kj.contains("spread_mean")) cfg.sampler.par_spread_mean = kj.at("spread_mean").get<double>();
      if (kj.contains("spread_sd")) cfg.sampler.par_spread_sd = kj.at("spread_sd").get<double>();
      if (kj.contains("q_walk")) cfg.sampler.par_q_walk = kj.at("q_walk").get<double>();
      if (kj.contains("mode_walk")) cfg.sampler.par_mode_walk = kj.at("mode_walk").get<double>();
    }
    if (j.contains("noise")) {
      const auto& nj = j.at("noise");
      detail::check_keys(nj, {"fraction", "sigma_min"}, where + ": noise");
      if (nj.contains("fraction")) cfg.noise.intensity_fraction = nj.at("fraction").get<double>();
      if (nj.contains("sigma_min")) cfg.noise.sigma_min = nj.at("sigma_min").get<double>();
      if (!(cfg.noise.intensity_fraction > 0.0) || cfg.noise.intensity_fraction > 0.1)
        throw config_error(where + ": noise.fraction must be in (0, 0.1]");
      if (!(cfg.noise.sigma_min > 0.0)) throw config_error(where + ": noise.sigma_min must be > 0");
    }
    if (j.contains("sampler")) {
      const auto& sj = j.at("sampler");
      detail::check_keys(sj,
                         {"n_max", "burn_in", "n0", "thin", "seed", "pre_sd_floor", "update_field",
                          "update_kernel", "update_p", "hastings_correction", "p_seed",
                          "p_halfwidth", "p_lo", "p_hi"},
                         where + ": sampler");
      auto& s = cfg.sampler;
      if (sj.contains("n_max")) s.n_max = sj.at("n_max").get<long>();
      if (sj.contains("burn_in")) s.burn_in = sj.at("burn_in").get<long>();
      if (sj.contains("n0")) s.n0 = sj.at("n0").get<long>();
      if (sj.contains("thin")) s.thin = sj.at("thin").get<long>();
      if (sj.contains("seed")) s.seed = sj.at("seed").get<std::uint64_t>();
      if (sj.contains("pre_sd_floor")) s.pre_sd_floor = sj.at("pre_sd_floor").get<double>();
      if (sj.contains("update_field")) s.update_field = sj.at("update_field").get<bool>();
      if (sj.contains("update_kernel")) s.update_kernel = sj.at("update_kernel").get<bool>();
      if (sj.contains("update_p")) s.update_p = sj.at("update_p").get<bool>();
      if (sj.contains("hastings_correction"))
        s.hastings_correction = sj.at("hastings_correction").get<bool>();
      if (sj.contains("p_seed")) s.p_seed = sj.at("p_seed").get<double>();
      if (sj.contains("p_halfwidth")) s.p_halfwidth = sj.at("p_halfwidth").get<double>();
      if (sj.contains("p_lo")) s.p_support.lo = sj.at("p_lo").get<double>();
      if (sj.contains("p_hi")) s.p_support.hi = sj.at("p_hi").get<double>();
    }
    if (j.contains("regime")) {
      const std::string r = j.at("regime").get<std::string>();
      if (r == "auto") {
        cfg.regime.reset();
      } else if (r == "coarse") {
        cfg.regime = ResolutionRegime{ResolutionClass::coarse, -1};  // k_in set at grid time
      } else if (r == "fine") {
        cfg.regime = ResolutionRegime{ResolutionClass::fine, 0};
      } else if (r == "mixed") {
        if (!j.contains("k_in")) throw config_error(where + ": regime 'mixed' needs k_in");
        cfg.regime = ResolutionRegime{ResolutionClass::mixed, j.at("k_in").get<int>()};
      } else {
        throw config_error(where + ": regime must be auto|coarse|mixed|fine");
      }
    }
    if (j.contains("decompose")) cfg.decompose = j.at("decompose").get<bool>();
    if (j.contains("checkpoint_interval"))
      cfg.checkpoint_interval = j.at("checkpoint_interval").get<long>();
    if (j.contains("hpd_mass")) cfg.hpd_mass = j.at("hpd_mass").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error(where + ": bad config value: " + e.what());
  }
  cfg.sampler.validate();
  if (!(cfg.hpd_mass > 0.0 && cfg.hpd_mass <= 1.0))
    throw config_error(where + ": hpd_mass must be in (0, 1]");
  if (cfg.physical_surface < 0.0) throw config_error(where + ": physical_surface must be >= 0");
  return cfg;
}

// A 'coarse' override is parsed with a placeholder k_in; pin it to the grid.
inline std::optional<ResolutionRegime> resolve_regime(const std::optional<ResolutionRegime>& r,
                                                      const Grid& g) {
  if (!r) return {};
  ResolutionRegime out = *r;
  if (out.cls == ResolutionClass::coarse) out.k_in = g.n_eng();
  return out;
}

inline RunConfig load_run_config(const fs::path& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw config_error(path.string() + ": JSON parse error: " + e.what());
  }
  return run_config_from_json(j, path.string());
}

// ---------------------------------------------------------------------------
// Trace file: one CSV row per retained sweep.

struct TraceSchema {
  int n_data = 0;
  int n_eng = 0;
  bool kernel_params = false;  // emit the sampled shape params / prior hypers

  std::vector<std::string> columns() const {
    std::vector<std::string> cols{"step",           "log_posterior",    "log_likelihood",
                                  "log_field_prior", "log_kernel_prior", "p"};
    for (int jj = 0; jj < n_eng; ++jj) cols.push_back("kernel_" + std::to_string(jj));
    if (kernel_params) {
      cols.push_back("amplitude");
      cols.push_back("mode_depth");
      cols.push_back("spread");
    }
    for (int i = 1; i <= n_data; ++i)
      for (int k = 1; k <= n_eng; ++k)
        cols.push_back("xi_" + std::to_string(i) + "_" + std::to_string(k));
    return cols;
  }
};

class TraceWriter {
 public:
  TraceWriter(const fs::path& path, const TraceSchema& schema, bool append)
      : schema_(schema) {
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw data_error("cannot open trace: " + path.string());
    if (!append) {
      const auto cols = schema_.columns();
      for (std::size_t c = 0; c < cols.size(); ++c) out_ << (c ? "," : "") << cols[c];
      out_ << '\n';
      out_.flush();
    }
  }

  void write_row(const PosteriorEngine& eng, const ChainState& st) {
    const PosteriorParts parts = eng.parts();
    out_ << st.iteration << ',' << format_g17(parts.total()) << ','
         << format_g17(parts.log_likelihood) << ',' << format_g17(parts.log_field_prior) << ','
         << format_g17(parts.log_kernel_prior) << ',' << format_g17(eng.p());
    for (int jj = 0; jj < schema_.n_eng; ++jj) out_ << ',' << format_g17(eng.kernel().bins[jj]);
    if (schema_.kernel_params)
      out_ << ',' << format_g17(st.kpar.amplitude) << ',' << format_g17(st.kpar.mode_depth) << ','
           << format_g17(st.kpar.spread);
    for (double v : eng.field().values) out_ << ',' << format_g17(v);
    out_ << '\n';
    out_.flush();
    if (!out_) throw data_error("trace write failed");
  }

 private:
  std::ofstream out_;
  TraceSchema schema_;
};

struct Trace {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;  // column 0 is the step

  long step(std::size_t row) const { return static_cast<long>(rows[row][0]); }
};

// A trailing line without a newline is treated as a crash-truncated tail and
// dropped; any other malformed row is an error.
inline Trace read_trace(const fs::path& path) {
  const std::string text = read_file(path);
  auto [lines, truncated] = detail::complete_lines(text);
  (void)truncated;
  if (lines.empty()) throw data_error(path.string() + ": empty trace");
  Trace tr;
  for (auto& c : detail::split_csv(lines[0])) tr.columns.push_back(c);
  if (tr.columns.empty() || tr.columns[0] != "step")
    throw data_error(path.string() + ":1: bad trace header");
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(ln + 1);
    const auto cells = detail::split_csv(line);
    if (cells.size() != tr.columns.size())
      throw data_error(where + ": expected " + std::to_string(tr.columns.size()) +
                       " cells, got " + std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row[c] = detail::parse_double(cells[c], where);
    tr.rows.push_back(std::move(row));
  }
  return tr;
}

// Drop trace rows beyond a checkpoint step (resume repair).  Keeps the file
// byte-identical to one that never went past the checkpoint.
inline void truncate_trace(const fs::path& path, long max_step) {
  const std::string text = read_file(path);
  auto [lines, truncated] = detail::complete_lines(text);
  (void)truncated;
  if (lines.empty()) throw data_error(path.string() + ": empty trace");
  std::ostringstream os;
  os << lines[0] << '\n';
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    const std::string line = detail::trim(lines[ln]);
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.empty()) continue;
    const double step = detail::parse_double(cells[0], path.string());
    if (static_cast<long>(step) > max_step) break;
    os << lines[ln] << '\n';
  }
  atomic_write(path, os.str());
}

// ---------------------------------------------------------------------------
// Summaries.

// One row per non-step trace column over rows with step > burn_in.  Kernel
// columns (and the parametric amplitude) are rescaled by kernel_scale, which
// converts model units to physical ones when a measured surface value is
// supplied.
inline std::string summary_csv_from_trace(const Trace& tr, long burn_in, double hpd_mass,
                                          double kernel_scale = 1.0) {
  std::vector<std::size_t> keep;
  for (std::size_t r = 0; r < tr.rows.size(); ++r)
    if (tr.step(r) > burn_in) keep.push_back(r);
  if (keep.empty()) throw data_error("summary: no trace rows after burn-in");
  std::ostringstream os;
  os << "parameter,mean,sd,median,hpd_lo,hpd_hi\n";
  for (std::size_t c = 1; c < tr.columns.size(); ++c) {
    const std::string& name = tr.columns[c];
    const bool scaled = name.rfind("kernel_", 0) == 0 || name == "amplitude";
    const double scale = scaled ? kernel_scale : 1.0;
    std::vector<double> xs;
    xs.reserve(keep.size());
    for (std::size_t r : keep) xs.push_back(tr.rows[r][c] * scale);
    const ColumnSummary s = summarize_column(xs, hpd_mass);
    os << name << ',' << format_g17(s.mean) << ',' << format_g17(s.sd) << ','
       << format_g17(s.median) << ',' << format_g17(s.hpd_lo) << ',' << format_g17(s.hpd_hi)
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned little-endian binary.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

template <class T>
void put_raw(std::string& buf, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof(T));
}

template <class T>
T get_raw(const std::string& buf, std::size_t& off, const std::string& where) {
  if (off + sizeof(T) > buf.size()) throw data_error(where + ": truncated checkpoint");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

inline constexpr char ckpt_magic[8] = {'S', 'E', 'M', 'T', 'C', 'K', 'P', '1'};

}  // namespace detail

struct CheckpointData {
  long iteration = 0;
  DensityField field;
  KernelVector kernel;
  double p = 0.0;
  KernelParams kpar;
  DensityField seed_field;
  std::vector<AdaptAccum> accum;
  std::string rng;
  long field_props = 0, field_accs = 0;
  long kernel_props = 0, kernel_accs = 0;
  long hyper_props = 0, hyper_accs = 0;
  long p_props = 0, p_accs = 0;
  double max_audit_cell = 0.0;
  double max_audit_drift = 0.0;
};

inline void save_checkpoint(const fs::path& path, const PosteriorEngine& eng,
                            const ChainState& st) {
  std::string buf;
  buf.append(detail::ckpt_magic, sizeof detail::ckpt_magic);
  detail::put_raw<std::uint32_t>(buf, 2);
  detail::put_raw<std::int32_t>(buf, eng.field().n_data);
  detail::put_raw<std::int32_t>(buf, eng.field().n_eng);
  detail::put_raw<std::int64_t>(buf, st.iteration);
  detail::put_raw<double>(buf, eng.p());
  detail::put_raw<double>(buf, st.kpar.amplitude);
  detail::put_raw<double>(buf, st.kpar.spread);
  detail::put_raw<double>(buf, st.kpar.mode_depth);
  for (double v : eng.field().values) detail::put_raw<double>(buf, v);
  for (double v : eng.kernel().bins) detail::put_raw<double>(buf, v);
  for (double v : st.seed_field.values) detail::put_raw<double>(buf, v);
  for (const AdaptAccum& a : st.accum) {
    detail::put_raw<std::int64_t>(buf, a.count);
    detail::put_raw<double>(buf, a.mean);
    detail::put_raw<double>(buf, a.m2);
  }
  detail::put_raw<std::int64_t>(buf, st.field_props);
  detail::put_raw<std::int64_t>(buf, st.field_accs);
  detail::put_raw<std::int64_t>(buf, st.kernel_props);
  detail::put_raw<std::int64_t>(buf, st.kernel_accs);
  detail::put_raw<std::int64_t>(buf, st.hyper_props);
  detail::put_raw<std::int64_t>(buf, st.hyper_accs);
  detail::put_raw<std::int64_t>(buf, st.p_props);
  detail::put_raw<std::int64_t>(buf, st.p_accs);
  detail::put_raw<double>(buf, st.max_audit_cell);
  detail::put_raw<double>(buf, st.max_audit_drift);
  const std::string rng = st.rng.serialize();
  detail::put_raw<std::uint32_t>(buf, static_cast<std::uint32_t>(rng.size()));
  buf += rng;
  atomic_write(path, buf);
}

inline CheckpointData load_checkpoint(const fs::path& path) {
  const std::string buf = read_file(path);
  const std::string where = path.string();
  if (buf.size() < 8 || std::memcmp(buf.data(), detail::ckpt_magic, 8) != 0)
    throw data_error(where + ": not a checkpoint file");
  std::size_t off = 8;
  const auto version = detail::get_raw<std::uint32_t>(buf, off, where);
  if (version != 2) throw data_error(where + ": unsupported checkpoint version");
  CheckpointData d;
  const auto nd = detail::get_raw<std::int32_t>(buf, off, where);
  const auto ne = detail::get_raw<std::int32_t>(buf, off, where);
  if (nd < 1 || ne < 1) throw data_error(where + ": bad checkpoint shape");
  d.iteration = detail::get_raw<std::int64_t>(buf, off, where);
  d.p = detail::get_raw<double>(buf, off, where);
  d.kpar.amplitude = detail::get_raw<double>(buf, off, where);
  d.kpar.spread = detail::get_raw<double>(buf, off, where);
  d.kpar.mode_depth = detail::get_raw<double>(buf, off, where);
  d.field = DensityField(nd, ne);
  for (double& v : d.field.values) v = detail::get_raw<double>(buf, off, where);
  d.kernel.bins.resize(ne);
  for (double& v : d.kernel.bins) v = detail::get_raw<double>(buf, off, where);
  d.seed_field = DensityField(nd, ne);
  for (double& v : d.seed_field.values) v = detail::get_raw<double>(buf, off, where);
  d.accum.resize(static_cast<std::size_t>(nd) * ne);
  for (AdaptAccum& a : d.accum) {
    a.count = detail::get_raw<std::int64_t>(buf, off, where);
    a.mean = detail::get_raw<double>(buf, off, where);
    a.m2 = detail::get_raw<double>(buf, off, where);
  }
  d.field_props = detail::get_raw<std::int64_t>(buf, off, where);
  d.field_accs = detail::get_raw<std::int64_t>(buf, off, where);
  d.kernel_props = detail::get_raw<std::int64_t>(buf, off, where);
  d.kernel_accs = detail::get_raw<std::int64_t>(buf, off, where);
  d.hyper_props = detail::get_raw<std::int64_t>(buf, off, where);
  d.hyper_accs = detail::get_raw<std::int64_t>(buf, off, where);
  d.p_props = detail::get_raw<std::int64_t>(buf, off, where);
  d.p_accs = detail::get_raw<std::int64_t>(buf, off, where);
  d.max_audit_cell = detail::get_raw<double>(buf, off, where);
  d.max_audit_drift = detail::get_raw<double>(buf, off, where);
  const auto len = detail::get_raw<std::uint32_t>(buf, off, where);
  if (off + len > buf.size()) throw data_error(where + ": truncated checkpoint");
  d.rng = buf.substr(off, len);
  off += len;
  if (off != buf.size()) throw data_error(where + ": trailing bytes in checkpoint");
  return d;
}

}  // namespace semtomo
