#include "wsc/csv.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "wsc/errors.hpp"

namespace wsc {

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return int(i);
  }
  return -1;
}

CsvTable parse_csv(const std::string& text) {
  CsvTable out;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool any_field = false;

  auto end_field = [&] {
    record.push_back(field);
    field.clear();
    any_field = true;
  };
  auto end_record = [&] {
    if (!any_field && record.empty()) return;  // blank line
    record.push_back(field);
    field.clear();
    if (out.header.empty()) {
      out.header = std::move(record);
    } else {
      out.rows.push_back(std::move(record));
    }
    record.clear();
    any_field = false;
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\n') {
      end_record();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  if (in_quotes) throw SchemaError("unterminated quoted field");
  if (!field.empty() || any_field) end_record();
  return out;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error reading " + path);
  return parse_csv(ss.str());
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format_double(double v, int digits) {
  if (digits < 0) return format_double(v);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

std::optional<double> parse_double_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t')) --e;
  if (b == e) return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw SchemaError("malformed number '" + s + "'");
  return v;
}

std::optional<long> parse_long_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t')) --e;
  if (b == e) return std::nullopt;
  long v = 0;
  // tolerate a leading '+' (desired_direction is written as +1/-1)
  if (b < e && *b == '+') ++b;
  auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e) throw SchemaError("malformed integer '" + s + "'");
  return v;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw IoError("error writing " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path + ": " + std::strerror(errno));
  }
}

}  // namespace wsc
