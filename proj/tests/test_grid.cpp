#include <doctest.h>

#include <cmath>
#include <sstream>

#include "robustctl/grid.hpp"

using namespace rctl;

TEST_CASE("grid construction") {
  const Grid g = build_grid({{-5.0, 5.0}}, {201});
  CHECK(g.size() == 201);
  CHECK(g.axis(0).spacing() == doctest::Approx(0.05));
  CHECK(g.coordinate(200, 0) == 5.0);
  CHECK(g.coordinate(100, 0) == doctest::Approx(0.0));

  const Grid sq = build_grid({{-1.0, 1.0}, {-1.0, 1.0}}, {11, 11});
  CHECK(sq.size() == 121);
  CHECK(sq.stride(1) == 1);
  CHECK(sq.stride(0) == 11);
  CHECK(sq.point(12) == std::vector<double>{-0.8, -0.8});

  CHECK_THROWS_AS(build_grid({{0.0, 0.0}}, {5}), ValidationError);
  CHECK_THROWS_AS(build_grid({{1.0, 0.0}}, {5}), ValidationError);
  CHECK_THROWS_AS(build_grid({{0.0, 1.0}}, {2}), ValidationError);
  CHECK_THROWS_AS(build_grid({{0.0, 1.0}}, {5, 5}), ValidationError);
  CHECK_THROWS_AS(build_grid({{0.0, 1.0}}, {5}, 0.5), ValidationError);
}

TEST_CASE("interior subgrid keeps the inner sixty percent") {
  const Grid g = build_grid({{-5.0, 5.0}}, {401});
  for (std::size_t node = 0; node < g.size(); ++node) {
    const double x = g.coordinate(node, 0);
    CHECK(g.is_interior(node) == (std::fabs(x) <= 3.0 + 1e-9));
  }
  CHECK(g.interior_nodes().size() == 241);
  CHECK(g.interior_nodes().front() == 80);

  const Grid sq = build_grid({{0.0, 10.0}, {0.0, 10.0}}, {11, 11});
  CHECK(sq.interior_nodes().size() == 49);
}

TEST_CASE("nearest node") {
  const Grid sq = build_grid({{0.0, 1.0}, {0.0, 2.0}}, {11, 5});
  const std::vector<double> p{0.33, 1.2};
  const std::size_t node = sq.nearest_node(p);
  CHECK(sq.point(node)[0] == doctest::Approx(0.3));
  CHECK(sq.point(node)[1] == doctest::Approx(1.0));
  const std::vector<double> far{-7.0, 9.0};
  CHECK(sq.nearest_node(far) == sq.stride(0) * 0 + 4);
}

TEST_CASE("value field checks") {
  const Grid g = build_grid({{-2.0, 2.0}}, {5});
  ValueField f(g, {4.0, 1.0, 0.0, 1.0, 4.0});
  CHECK_NOTHROW(f.validate());
  CHECK(f.growth_ratio() == doctest::Approx(0.8));
  ValueField short_field(g, {1.0});
  CHECK_THROWS_AS(short_field.validate(), ValidationError);
  ValueField nan_field(g, {0.0, 0.0, std::nan(""), 0.0, 0.0});
  CHECK_THROWS_AS(nan_field.validate(), ValidationError);
}

TEST_CASE("value CSV round trip is lossless") {
  const Grid g = build_grid({{-1.0, 1.0}, {0.0, 3.0}}, {4, 3});
  ValueField f;
  f.grid = g;
  for (std::size_t i = 0; i < g.size(); ++i) f.values.push_back(std::sqrt(2.0) * static_cast<double>(i) / 3.0);
  ControlSet u{{0.0}, {1.0}, 5};
  f.policy = std::vector<std::size_t>(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) (*f.policy)[i] = i % 5;

  std::stringstream out;
  write_value_csv(out, f, u);
  const std::string text = out.str();
  CHECK(text.rfind("x1,x2,value,policy_u1\n", 0) == 0);

  std::stringstream in(text);
  const ValueField back = read_value_csv(in, u);
  CHECK(back.grid == g);
  CHECK(back.values == f.values);
  REQUIRE(back.policy.has_value());
  CHECK(*back.policy == *f.policy);
}

TEST_CASE("value CSV without policy") {
  const Grid g = build_grid({{0.0, 1.0}}, {3});
  ValueField f(g, {0.1, 0.2, 0.3});
  ControlSet u{{0.0}, {1.0}, 3};
  std::stringstream out;
  write_value_csv(out, f, u);
  std::stringstream in(out.str());
  const ValueField back = read_value_csv(in, u);
  CHECK_FALSE(back.policy.has_value());
  CHECK(back.values == f.values);
}

TEST_CASE("value CSV errors") {
  ControlSet u{{0.0}, {1.0}, 3};
  auto read = [&](const std::string& s) {
    std::stringstream in(s);
    return read_value_csv(in, u);
  };
  CHECK_THROWS_AS(read(""), ValidationError);
  CHECK_THROWS_AS(read("x1,val\n"), ValidationError);
  CHECK_THROWS_AS(read("x1,value,policy_u1\n0,1,0\n0.5,abc,0\n1,1,0\n"), ValidationError);
  CHECK_THROWS_AS(read("x1,value,policy_u1\n0,1,0\n0.5,1\n1,1,0\n"), ValidationError);
  CHECK_THROWS_AS(read("x1,value,policy_u1\n0,1,0\n0.2,1,0\n1,1,0\n"), ValidationError);
  CHECK_THROWS_AS(read("x1,value\n"), ValidationError);
}

TEST_CASE("double formatting keeps seventeen digits") {
  const double v = 0.1;
  CHECK(std::stod(format_double(v)) == v);
  CHECK(std::stod(format_double(-1.0 / 3.0)) == -1.0 / 3.0);
}
