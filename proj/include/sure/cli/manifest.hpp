#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sure/cli/pgm.hpp"
#include "sure/error.hpp"
#include "sure/train/synthetic.hpp"

namespace sure::cli {

using json = nlohmann::json;

struct ManifestPair {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::string image_a;  // relative to the manifest's directory
  std::string image_b;
  std::array<double, 9> h_true{};
};

struct Manifest {
  std::uint64_t seed = 0;
  train::Difficulty difficulty = train::Difficulty::easy;
  std::size_t image_size = 64;
  double noise_sigma = 0.02;
  double flat_fraction = 0.1;
  std::vector<ManifestPair> pairs;
};

inline json to_json(const Manifest& m) {
  json j;
  j["format"] = "sure-manifest";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["count"] = m.pairs.size();
  j["difficulty"] = train::to_string(m.difficulty);
  j["image_size"] = m.image_size;
  j["noise_sigma"] = m.noise_sigma;
  j["flat_fraction"] = m.flat_fraction;
  j["pairs"] = json::array();
  for (const auto& p : m.pairs)
    j["pairs"].push_back({{"index", p.index},
                          {"seed", p.seed},
                          {"image_a", p.image_a},
                          {"image_b", p.image_b},
                          {"h_true", p.h_true}});
  return j;
}

namespace detail {

inline const json& require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key))
    throw InvalidArgument("manifest: missing field '" + path + key + "'");
  return j.at(key);
}

inline std::uint64_t require_uint(const json& j, const std::string& key, const std::string& path) {
  const auto& v = require(j, key, path);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
    throw InvalidArgument("manifest: field '" + path + key + "' must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline double require_number(const json& j, const std::string& key, const std::string& path) {
  const auto& v = require(j, key, path);
  if (!v.is_number()) throw InvalidArgument("manifest: field '" + path + key + "' must be a number");
  return v.get<double>();
}

inline std::string require_string(const json& j, const std::string& key, const std::string& path) {
  const auto& v = require(j, key, path);
  if (!v.is_string()) throw InvalidArgument("manifest: field '" + path + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

/// Validates every field; errors name the offending one, e.g. `pairs[3].h_true`.
inline Manifest manifest_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("manifest: top level must be a JSON object");
  if (detail::require_string(j, "format", "") != "sure-manifest")
    throw InvalidArgument("manifest: field 'format' must be \"sure-manifest\"");
  if (detail::require_uint(j, "version", "") != 1)
    throw InvalidArgument("manifest: field 'version' must be 1");
  Manifest m;
  m.seed = detail::require_uint(j, "seed", "");
  try {
    m.difficulty = train::parse_difficulty(detail::require_string(j, "difficulty", ""));
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("manifest: field 'difficulty': ") + e.what());
  }
  m.image_size = detail::require_uint(j, "image_size", "");
  if (m.image_size == 0 || m.image_size % 8 != 0)
    throw InvalidArgument("manifest: field 'image_size' must be a positive multiple of 8");
  m.noise_sigma = detail::require_number(j, "noise_sigma", "");
  m.flat_fraction = detail::require_number(j, "flat_fraction", "");
  const auto& pairs = detail::require(j, "pairs", "");
  if (!pairs.is_array()) throw InvalidArgument("manifest: field 'pairs' must be an array");
  const auto count = detail::require_uint(j, "count", "");
  if (count != pairs.size())
    throw InvalidArgument("manifest: field 'count' is " + std::to_string(count) + " but 'pairs' has " +
                          std::to_string(pairs.size()) + " entries");
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const std::string path = "pairs[" + std::to_string(k) + "].";
    const auto& p = pairs[k];
    ManifestPair mp;
    mp.index = detail::require_uint(p, "index", path);
    mp.seed = detail::require_uint(p, "seed", path);
    mp.image_a = detail::require_string(p, "image_a", path);
    mp.image_b = detail::require_string(p, "image_b", path);
    const auto& h = detail::require(p, "h_true", path);
    if (!h.is_array() || h.size() != 9)
      throw InvalidArgument("manifest: field '" + path + "h_true' must be an array of 9 numbers");
    for (std::size_t i = 0; i < 9; ++i) {
      if (!h[i].is_number())
        throw InvalidArgument("manifest: field '" + path + "h_true' must be an array of 9 numbers");
      mp.h_true[i] = h[i].get<double>();
    }
    m.pairs.push_back(std::move(mp));
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw InvalidArgument("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

inline train::SynthOptions synth_options(const Manifest& m) {
  train::SynthOptions o;
  o.noise_sigma = m.noise_sigma;
  o.flat_fraction = m.flat_fraction;
  return o;
}

/// Renders a pair from its manifest entry without touching the image files.
inline train::SyntheticPair regenerate_pair(const Manifest& m, const ManifestPair& p) {
  return train::render_pair(p.seed, m.image_size, m.difficulty,
                            geo::Homography::from_rows(p.h_true), synth_options(m));
}

/// Loads the images named by the manifest; ground truth comes from h_true.
inline std::vector<train::SyntheticPair> load_pairs(const Manifest& m,
                                                    const std::filesystem::path& manifest_dir) {
  std::vector<train::SyntheticPair> out;
  out.reserve(m.pairs.size());
  for (const auto& p : m.pairs) {
    train::SyntheticPair sp;
    sp.seed = p.seed;
    sp.difficulty = m.difficulty;
    sp.image_a = read_pgm(manifest_dir / p.image_a);
    sp.image_b = read_pgm(manifest_dir / p.image_b);
    if (sp.image_a.width != m.image_size || sp.image_a.height != m.image_size ||
        sp.image_b.width != m.image_size || sp.image_b.height != m.image_size)
      throw InvalidArgument("manifest: pair " + std::to_string(p.index) +
                            " images do not match image_size " + std::to_string(m.image_size));
    try {
      sp.h_true = geo::Homography::from_rows(p.h_true);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("manifest: field 'pairs[" + std::to_string(p.index) + "].h_true': " +
                            e.what());
    }
    sp.gt = geo::make_ground_truth(sp.h_true, m.image_size, m.image_size);
    out.push_back(std::move(sp));
  }
  return out;
}

}  // namespace sure::cli
