#pragma once

// Persistence: fitted mixtures as versioned JSON, draw sets as CSV with a JSON
// sidecar. Doubles are written with 17 significant digits so files round-trip.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbi/cde.hpp"
#include "sbi/draws.hpp"

namespace sbi {

inline constexpr int kMixtureFormatVersion = 1;
inline constexpr int kDrawSetFormatVersion = 1;

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') cur.push_back(ch);
  }
  out.push_back(cur);
  return out;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// ConditionalMixture <-> JSON. Raw parameters are stored (diagonal scale
// entries as log-excess over the floor) so that reloading is exact.

inline nlohmann::json to_json(const ConditionalMixture& m) {
  const auto& lay = m.layout();
  const auto p = m.parameters();
  nlohmann::json j;
  j["format"] = "sbi-conditional-mixture";
  j["version"] = kMixtureFormatVersion;
  j["components"] = lay.k;
  j["target_dim"] = lay.dt;
  j["condition_dim"] = lay.dc;
  j["sigma_floor"] = m.sigma_floor();
  j["target_mean"] = m.target_standardizer().mean;
  j["target_sd"] = m.target_standardizer().sd;
  j["condition_mean"] = m.condition_standardizer().mean;
  j["condition_sd"] = m.condition_standardizer().sd;
  auto& comps = j["experts"] = nlohmann::json::array();
  for (std::size_t c = 0; c < lay.k; ++c) {
    nlohmann::json e;
    e["gate"] = std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(lay.gate(c)),
                                    p.begin() + static_cast<std::ptrdiff_t>(lay.gate(c) + lay.gate_block()));
    e["mean"] = std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(lay.mean(c)),
                                    p.begin() + static_cast<std::ptrdiff_t>(lay.mean(c) + lay.mean_block()));
    e["scale"] = std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(lay.scale(c)),
                                     p.begin() + static_cast<std::ptrdiff_t>(lay.scale(c) + lay.tri()));
    comps.push_back(std::move(e));
  }
  return j;
}

inline ConditionalMixture mixture_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "sbi-conditional-mixture") throw std::invalid_argument("not a conditional mixture document");
  if (j.at("version").get<int>() != kMixtureFormatVersion) throw std::invalid_argument("unsupported mixture format version");
  MixtureLayout lay{j.at("components").get<std::size_t>(), j.at("target_dim").get<std::size_t>(),
                    j.at("condition_dim").get<std::size_t>()};
  ConditionalMixture m(lay,
                       Standardizer{j.at("target_mean").get<std::vector<double>>(), j.at("target_sd").get<std::vector<double>>()},
                       Standardizer{j.at("condition_mean").get<std::vector<double>>(), j.at("condition_sd").get<std::vector<double>>()},
                       j.at("sigma_floor").get<double>());
  const auto& experts = j.at("experts");
  if (experts.size() != lay.k) throw std::invalid_argument("mixture document: expert count mismatch");
  auto p = m.parameters();
  auto copy_block = [&](const nlohmann::json& arr, std::size_t offset, std::size_t len) {
    const auto v = arr.get<std::vector<double>>();
    if (v.size() != len) throw std::invalid_argument("mixture document: block size mismatch");
    std::copy(v.begin(), v.end(), p.begin() + static_cast<std::ptrdiff_t>(offset));
  };
  for (std::size_t c = 0; c < lay.k; ++c) {
    copy_block(experts[c].at("gate"), lay.gate(c), lay.gate_block());
    copy_block(experts[c].at("mean"), lay.mean(c), lay.mean_block());
    copy_block(experts[c].at("scale"), lay.scale(c), lay.tri());
  }
  return m;
}

inline void save_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return nlohmann::json::parse(in);
}

// ---------------------------------------------------------------------------
// DrawSet CSV (parameter columns + weight) with a JSON sidecar.

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".json");
  return p;
}

inline nlohmann::json drawset_metadata(const DrawSet& d) {
  nlohmann::json j;
  j["format"] = "sbi-drawset";
  j["version"] = kDrawSetFormatVersion;
  j["method"] = d.method;
  j["seed"] = d.seed;
  j["config_hash"] = d.config_hash;
  j["simulation_budget"] = d.simulation_budget;
  j["leaked_fraction"] = d.leaked_fraction;
  j["parameters"] = d.names;
  j["draws"] = d.size();
  return j;
}

inline void write_drawset(const DrawSet& d, const std::filesystem::path& csv) {
  if (csv.has_parent_path()) std::filesystem::create_directories(csv.parent_path());
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  for (const auto& n : d.names) out << n << ',';
  out << "weight\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.row(i)) out << format_double(v) << ',';
    out << format_double(d.weights[i]) << '\n';
  }
  save_json(drawset_metadata(d), sidecar_path(csv));
}

inline DrawSet read_drawset(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot read " + csv.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty draw file " + csv.string());
  auto header = split_csv_line(line);
  if (header.size() < 2 || header.back() != "weight") throw std::runtime_error("draw file lacks a weight column");
  header.pop_back();
  DrawSet d;
  d.names = header;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size() + 1) throw std::runtime_error("ragged row in " + csv.string());
    for (std::size_t c = 0; c < header.size(); ++c) d.draws.push_back(parse_double(cells[c]));
    d.weights.push_back(parse_double(cells.back()));
  }
  const auto side = sidecar_path(csv);
  if (std::filesystem::exists(side)) {
    const auto j = load_json(side);
    d.method = j.value("method", "");
    d.seed = j.value("seed", std::uint64_t{0});
    d.config_hash = j.value("config_hash", "");
    d.simulation_budget = j.value("simulation_budget", std::uint64_t{0});
    d.leaked_fraction = j.value("leaked_fraction", 0.0);
  }
  if (d.size() > 0) d.normalize_weights();
  return d;
}

}  // namespace sbi
