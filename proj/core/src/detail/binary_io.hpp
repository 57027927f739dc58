// Little-endian scalar I/O helpers and shortest-exact double formatting.

#pragma once

#include "htlab/numkit.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace htlab::detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw ValidationError("truncated binary data");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void put_f64_le(std::ostream& out, double v) { put_u64_le(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64_le(std::istream& in) { return std::bit_cast<double>(get_u64_le(in)); }

/// 17 significant digits: parses back to the identical double.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_indices(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(xs[i]);
  }
  return s;
}

inline std::vector<std::size_t> parse_indices(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    auto b = tok.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    auto e = tok.find_last_not_of(" \t");
    tok = tok.substr(b, e - b + 1);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok, &pos);
    } catch (const std::exception&) {
      throw ValidationError("bad integer '" + tok + "'");
    }
    if (pos != tok.size() || tok[0] == '-') throw ValidationError("bad integer '" + tok + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace htlab::detail
