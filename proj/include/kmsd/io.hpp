// Copyright 2026 The kmsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kmsd/derivation.hpp"

namespace kmsd {

using json = nlohmann::json;

/** Input does not match the expected schema. `key` names the offending field. */
class SchemaError : public std::runtime_error {
 public:
  SchemaError(std::string key, const std::string& what) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

namespace io {

inline const json& field(const json& j, const std::string& key) {
  if (!j.is_object()) throw SchemaError(key, "expected an object holding '" + key + "'");
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(key, "missing field '" + key + "'");
  return *it;
}

inline int int_field(const json& j, const std::string& key) {
  const json& v = field(j, key);
  if (!v.is_number_integer()) throw SchemaError(key, "'" + key + "' must be an integer");
  return v.get<int>();
}

inline Eigen::MatrixXd real_grid(const json& j, const std::string& key, Eigen::Index rows) {
  const json& v = field(j, key);
  if (!v.is_array() || static_cast<Eigen::Index>(v.size()) != rows)
    throw SchemaError(key, "'" + key + "' must be an array of " + std::to_string(rows) + " rows");
  Eigen::MatrixXd m(rows, rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != rows)
      throw SchemaError(key, "row " + std::to_string(i) + " of '" + key + "' must have " + std::to_string(rows) + " entries");
    for (Eigen::Index k = 0; k < rows; ++k) {
      const json& x = row[static_cast<std::size_t>(k)];
      if (!x.is_number()) throw SchemaError(key, "'" + key + "' entries must be numbers");
      m(i, k) = x.get<double>();
    }
  }
  return m;
}

inline json grid(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
    rows.push_back(row);
  }
  return rows;
}

/** re/im pair of a square matrix of the given size; "im" may be omitted. */
inline Matrix complex_grid(const json& j, Eigen::Index rows) {
  const Eigen::MatrixXd re = real_grid(j, "re", rows);
  Eigen::MatrixXd im = Eigen::MatrixXd::Zero(rows, rows);
  if (j.contains("im")) im = real_grid(j, "im", rows);
  Matrix m(rows, rows);
  m.real() = re;
  m.imag() = im;
  return m;
}

}  // namespace io

inline json matrix_to_json(const Matrix& m) {
  return {{"n", m.rows()}, {"re", io::grid(m.real())}, {"im", io::grid(m.imag())}};
}

inline Matrix matrix_from_json(const json& j) {
  const int n = io::int_field(j, "n");
  if (n < 1) throw SchemaError("n", "'n' must be positive");
  return io::complex_grid(j, n);
}

inline json density_to_json(const DensityContext& ctx) {
  json j = matrix_to_json(ctx.rho());
  j["tol"] = ctx.tol();
  return j;
}

inline DensityContext density_from_json(const json& j) {
  double tol = kDefaultTol;
  if (j.is_object() && j.contains("tol")) {
    if (!j["tol"].is_number()) throw SchemaError("tol", "'tol' must be a number");
    tol = j["tol"].get<double>();
  }
  return DensityContext(matrix_from_json(j), tol);
}

inline json superop_to_json(const Superoperator& s) {
  return {{"n", s.dim()}, {"level", to_string(s.level())}, {"re", io::grid(s.mat().real())},
          {"im", io::grid(s.mat().imag())}};
}

inline Superoperator superop_from_json(const json& j) {
  const int n = io::int_field(j, "n");
  if (n < 1) throw SchemaError("n", "'n' must be positive");
  Level level = Level::Algebra;
  if (j.contains("level")) {
    const json& l = j["level"];
    if (l == "algebra")
      level = Level::Algebra;
    else if (l == "l2")
      level = Level::L2;
    else
      throw SchemaError("level", "'level' must be \"algebra\" or \"l2\"");
  }
  return {n, level, io::complex_grid(j, static_cast<Eigen::Index>(n) * n)};
}

inline json family_to_json(const CommutatorFamily& f) {
  json v = json::array();
  for (const auto& m : f.V) v.push_back(matrix_to_json(m));
  return {{"V", v}, {"pairing", f.pairing}};
}

inline CommutatorFamily family_from_json(const json& j) {
  CommutatorFamily f;
  const json& v = io::field(j, "V");
  if (!v.is_array()) throw SchemaError("V", "'V' must be an array of matrices");
  for (const auto& m : v) f.V.push_back(matrix_from_json(m));
  const json& p = io::field(j, "pairing");
  if (!p.is_array() || p.size() != f.V.size()) throw SchemaError("pairing", "'pairing' must list one index per V");
  for (const auto& k : p) {
    if (!k.is_number_integer()) throw SchemaError("pairing", "'pairing' entries must be integers");
    f.pairing.push_back(k.get<int>());
  }
  if (!f.adjoint_closed()) throw SchemaError("pairing", "pairing is not an involution onto exact adjoints");
  return f;
}

inline json report_to_json(const Report& r) {
  json j = {{"name", r.name}, {"pass", r.pass}, {"tol", r.tol}, {"metrics", r.metrics}, {"checks", r.checks}};
  if (!r.notes.empty()) j["notes"] = r.notes;
  if (!r.children.empty()) {
    json c = json::object();
    for (const auto& ch : r.children) c[ch.name] = report_to_json(ch);
    j["children"] = c;
  }
  return j;
}

inline json vector_to_json(const Vector& v) {
  json re = json::array(), im = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    re.push_back(v(i).real());
    im.push_back(v(i).imag());
  }
  return {{"re", re}, {"im", im}};
}

inline std::string unit_label(int n, int u) { return "E" + std::to_string(u % n + 1) + std::to_string(u / n + 1); }

/** Dump of a calculus: per matrix unit, delta(E_ab) and the action matrices; J as (matrix, conjugate). */
inline json calculus_to_json(const FirstOrderCalculus& c) {
  json delta = json::object(), pl = json::object(), pr = json::object();
  for (std::size_t u = 0; u < c.delta.size(); ++u) {
    const std::string label = unit_label(c.n, static_cast<int>(u));
    delta[label] = vector_to_json(c.delta[u]);
    pl[label] = matrix_to_json(c.piL[u]);
    pr[label] = matrix_to_json(c.piR[u]);
  }
  return {{"dimH", c.dimH},
          {"n", c.n},
          {"delta", delta},
          {"piL", pl},
          {"piR", pr},
          {"J", {{"matrix", matrix_to_json(c.jmat)}, {"antilinear", true}}},
          {"rank_cutoff", c.rank_cutoff}};
}

/** 1-based line and column of a byte offset. */
inline std::pair<int, int> line_col(const std::string& text, std::size_t offset) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

/** Position of the first occurrence of "key" in the text, or 1:1. */
inline std::pair<int, int> locate_key(const std::string& text, const std::string& key) {
  const std::size_t pos = text.find("\"" + key + "\"");
  return pos == std::string::npos ? std::pair<int, int>{1, 1} : line_col(text, pos);
}

/** Parse failure carrying a "file:line:col: message" text. */
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JsonDocument {
  std::string path;
  std::string text;
  json value;
};

inline JsonDocument read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(path + ":1:1: cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  JsonDocument doc{path, ss.str(), {}};
  try {
    doc.value = json::parse(doc.text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(doc.text, e.byte > 0 ? e.byte - 1 : 0);
    throw InputError(path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
  return doc;
}

/** Runs a decoder on a document; schema problems become line-anchored InputErrors. */
template <typename F>
auto decode(const JsonDocument& doc, F&& f) -> decltype(f(doc.value)) {
  try {
    return f(doc.value);
  } catch (const SchemaError& e) {
    const auto [line, col] = locate_key(doc.text, e.key());
    throw InputError(doc.path + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  } catch (const json::exception& e) {
    throw InputError(doc.path + ":1:1: " + e.what());
  }
}

}  // namespace kmsd
