#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "owsd/rng.hpp"
#include "owsd/tensor.hpp"

using namespace owsd;
namespace fs = std::filesystem;

namespace {

fs::path tmp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "owsd_test_tensor";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("tensor construction and bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.rank() == 3);
  CHECK(t.numel() == 24);
  for (double v : t.data) CHECK(v == 0.0);

  Tensor u({3}, {1.0, 2.0, 3.0});
  CHECK(u[1] == 2.0);
  u[1] = 5.0;
  CHECK(u.data[1] == 5.0);

  CHECK_THROWS_AS(Tensor({2, 0}), shape_error);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), shape_error);
}

TEST_CASE("tensor reshape and slices") {
  Tensor t({2, 6});
  for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<double>(i);

  Tensor r = t.reshaped({3, 4});
  CHECK(r.shape == Shape{3, 4});
  CHECK(r.data == t.data);
  CHECK_THROWS_AS(t.reshaped({5}), shape_error);

  Tensor s = t.slice0(1, 1);
  CHECK(s.shape == Shape{1, 6});
  CHECK(s.data[0] == 6.0);
  CHECK_THROWS_AS(t.slice0(1, 2), shape_error);
}

TEST_CASE("tensor gradient buffers") {
  Tensor t({4});
  CHECK_FALSE(t.has_grad());
  t.ensure_grad();
  REQUIRE(t.has_grad());
  t.grad[2] = 7.0;
  t.zero_grad();
  CHECK(t.grad[2] == 0.0);
}

TEST_CASE("randn is seed-deterministic and distinct across seeds") {
  Rng a(99), b(99), c(100);
  Tensor x = Tensor::randn({32}, a, 0.02);
  Tensor y = Tensor::randn({32}, b, 0.02);
  Tensor z = Tensor::randn({32}, c, 0.02);
  CHECK(x.data == y.data);
  CHECK(x.data != z.data);
}

TEST_CASE("finiteness checks") {
  Tensor t({2});
  CHECK(t.all_finite());
  t.data[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(check_finite(t, "unit"), nonfinite_error);
}

TEST_CASE("owtn round-trip is bit-exact") {
  Rng rng(7);
  Tensor t = Tensor::randn({3, 5, 2}, rng, 1.0);
  t.data[0] = -0.0;  // sign bit must survive
  const fs::path a = tmp_file("rt_a.owtn");
  const fs::path b = tmp_file("rt_b.owtn");
  save_owtn(a, t);
  save_owtn(b, t);
  CHECK(slurp(a) == slurp(b));

  Tensor back = load_owtn(a);
  REQUIRE(back.shape == t.shape);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    CHECK(std::memcmp(&back.data[i], &t.data[i], sizeof(double)) == 0);
  }
}

TEST_CASE("owtn rejects corrupt containers") {
  Rng rng(7);
  Tensor t = Tensor::randn({4, 4}, rng, 1.0);
  const fs::path good = tmp_file("good.owtn");
  save_owtn(good, t);
  std::vector<char> bytes = slurp(good);

  SECTION("missing file") {
    CHECK_THROWS_AS(load_owtn(tmp_file("nope.owtn")), artifact_missing_error);
  }
  SECTION("magic mismatch") {
    bytes[0] = 'X';
    const fs::path p = tmp_file("bad_magic.owtn");
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH(load_owtn(p), Catch::Matchers::ContainsSubstring("magic mismatch"));
  }
  SECTION("unsupported version") {
    bytes[4] = 9;  // version u32 LE follows the magic
    const fs::path p = tmp_file("bad_version.owtn");
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH(load_owtn(p), Catch::Matchers::ContainsSubstring("version"));
  }
  SECTION("unsupported dtype") {
    bytes[4 + 4 + 4 + 8] = 1;  // dtype byte sits after magic, version, rank, two dims
    const fs::path p = tmp_file("bad_dtype.owtn");
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_WITH(load_owtn(p), Catch::Matchers::ContainsSubstring("dtype"));
  }
  SECTION("truncated data") {
    const fs::path p = tmp_file("trunc.owtn");
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
    CHECK_THROWS_WITH(load_owtn(p), Catch::Matchers::ContainsSubstring("truncated"));
  }
}
