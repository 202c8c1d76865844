#ifndef WSC_CSV_HPP
#define WSC_CSV_HPP

#include <optional>
#include <string>
#include <vector>

namespace wsc {

// Minimal RFC-4180-ish CSV: comma separated, double quotes for fields
// containing commas/quotes/newlines, '.' decimal separator, UTF-8 passthrough.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // column index by header name, -1 if absent
  int column(const std::string& name) const;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text);

std::string csv_quote(const std::string& field);

// shortest round-trip representation of a double
std::string format_double(double v);
// fixed-precision representation used when a --digits option is active
std::string format_double(double v, int digits);

std::optional<double> parse_double_field(const std::string& s);
std::optional<long> parse_long_field(const std::string& s);

// Writes content to path atomically (temp file + rename).
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace wsc

#endif
