#pragma once

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sure/error.hpp"
#include "sure/geometry/homography.hpp"

namespace sure::geo {

/// One line of a correspondence file: `xA yA xB yB confidence u_a u_e`.
struct MatchRecord {
  Correspondence corr;
  double u_a = 0.0;
  double u_e = 0.0;
};

inline std::string format_match_line(const MatchRecord& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.4f %.4f %.4f %.4f %.6f %.6g %.6g", m.corr.a.x, m.corr.a.y,
                m.corr.b.x, m.corr.b.y, m.corr.confidence, m.u_a, m.u_e);
  return buf;
}

/// Writes `# `-prefixed header lines followed by one match per line.
inline void write_correspondences(std::ostream& os, const std::vector<std::string>& header,
                                  const std::vector<MatchRecord>& matches) {
  for (const auto& h : header) os << "# " << h << '\n';
  for (const auto& m : matches) os << format_match_line(m) << '\n';
}

inline std::vector<MatchRecord> read_correspondences(std::istream& is) {
  std::vector<MatchRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    MatchRecord m;
    if (!(ls >> m.corr.a.x >> m.corr.a.y >> m.corr.b.x >> m.corr.b.y >> m.corr.confidence >>
          m.u_a >> m.u_e))
      throw InvalidArgument("correspondence file line " + std::to_string(lineno) +
                            ": expected 7 numbers");
    std::string extra;
    if (ls >> extra)
      throw InvalidArgument("correspondence file line " + std::to_string(lineno) +
                            ": trailing content '" + extra + "'");
    out.push_back(m);
  }
  return out;
}

}  // namespace sure::geo
