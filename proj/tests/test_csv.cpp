#include <cmath>

#include "doctest.h"
#include "wsc/csv.hpp"
#include "wsc/errors.hpp"
#include "wsc/rng.hpp"

using namespace wsc;

TEST_SUITE("csv") {

TEST_CASE("parses plain tables") {
  auto t = parse_csv("a,b,c\n1,2,3\n4,5,6\n");
  CHECK(t.header == std::vector<std::string>{"a", "b", "c"});
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[1][2] == "6");
  CHECK(t.column("b") == 1);
  CHECK(t.column("zz") == -1);
}

TEST_CASE("handles quoting, CRLF, blank lines, missing final newline") {
  auto t = parse_csv("id,note\r\n\"x,1\",\"he said \"\"hi\"\"\"\r\n\n\ny2,plain");
  REQUIRE(t.rows.size() == 2);
  CHECK(t.rows[0][0] == "x,1");
  CHECK(t.rows[0][1] == "he said \"hi\"");
  CHECK(t.rows[1][0] == "y2");
  CHECK(t.rows[1][1] == "plain");
}

TEST_CASE("quoted embedded newline survives") {
  auto t = parse_csv("a,b\n\"line1\nline2\",z\n");
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "line1\nline2");
}

TEST_CASE("unterminated quote is a schema error") {
  CHECK_THROWS_AS(parse_csv("a,b\n\"oops,1\n"), SchemaError);
}

TEST_CASE("empty trailing field is kept") {
  auto t = parse_csv("a,b\n1,\n");
  REQUIRE(t.rows.size() == 1);
  REQUIRE(t.rows[0].size() == 2);
  CHECK(t.rows[0][1] == "");
}

TEST_CASE("csv_quote escapes only when needed") {
  CHECK(csv_quote("plain") == "plain");
  CHECK(csv_quote("a,b") == "\"a,b\"");
  CHECK(csv_quote("say \"hi\"") == "\"say \"\"hi\"\"\"");
}

TEST_CASE("format_double round-trips exactly") {
  Rng rng(20240901u);
  for (int i = 0; i < 1000; ++i) {
    double x = rng.normal() * std::pow(10.0, rng.uniform(-6.0, 6.0));
    auto s = format_double(x);
    auto back = parse_double_field(s);
    REQUIRE(back.has_value());
    CHECK(*back == x);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
}

TEST_CASE("format_double with digits") {
  CHECK(format_double(0.123456789, 4) == "0.1235");
  CHECK(format_double(12345.6789, 3) == "1.23e+04");
}

TEST_CASE("field parsers") {
  CHECK(!parse_double_field("").has_value());
  CHECK(!parse_double_field("  ").has_value());
  CHECK(*parse_double_field(" 1e3 ") == 1000.0);
  CHECK(*parse_double_field("-0.5") == -0.5);
  CHECK_THROWS_AS(parse_double_field("abc"), SchemaError);
  CHECK_THROWS_AS(parse_double_field("1.2.3"), SchemaError);

  CHECK(!parse_long_field("").has_value());
  CHECK(*parse_long_field("+1") == 1);
  CHECK(*parse_long_field("-1") == -1);
  CHECK(*parse_long_field(" 42 ") == 42);
  CHECK_THROWS_AS(parse_long_field("1.5"), SchemaError);
  CHECK_THROWS_AS(parse_long_field("x"), SchemaError);
}

TEST_CASE("atomic write replaces content") {
  const std::string path = "csv_atomic_test.tmp.csv";
  write_file_atomic(path, "a,b\n1,2\n");
  write_file_atomic(path, "a,b\n3,4\n");
  auto t = read_csv(path);
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0][0] == "3");
  std::remove(path.c_str());
}

}  // TEST_SUITE
