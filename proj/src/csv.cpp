// Copyright 2026 The Fundus Pipeline Authors
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

#include "fundus/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fundus/tensor.hpp"

namespace fundus {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

std::string join_csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    const std::string& f = fields[i];
    if (f.find_first_of(",\"\n") == std::string::npos) {
      out += f;
      continue;
    }
    out += '"';
    for (char c : f) {
      if (c == '"') out += '"';
      out += c;
    }
    out += '"';
  }
  return out;
}

CsvTable CsvTable::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open CSV file " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) return t;
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  t.header_ = split_csv_line(line);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header_.size())
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header_.size()) +
                  " fields, found " + std::to_string(row.size()));
    t.rows_.push_back(std::move(row));
  }
  return t;
}

void CsvTable::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write CSV file " + path.string());
  os << join_csv_line(header_) << '\n';
  for (const auto& r : rows_) os << join_csv_line(r) << '\n';
  if (!os) throw Error("failed writing " + path.string());
}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header_.size()) throw Error("CSV row width does not match header");
  rows_.push_back(std::move(row));
}

std::optional<std::size_t> CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header_.size(); ++i)
    if (header_[i] == name) return i;
  return std::nullopt;
}

std::size_t CsvTable::require_column(const std::string& name) const {
  auto c = column(name);
  if (!c) throw Error("CSV is missing column '" + name + "'");
  return *c;
}

std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

}  // namespace fundus
