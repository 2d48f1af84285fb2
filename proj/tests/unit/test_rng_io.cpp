#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <vector>

#include "dpfl/error.hpp"
#include "dpfl/io.hpp"
#include "dpfl/rng.hpp"

TEST_SUITE("rng_io") {
  TEST_CASE("same seed and label give the same stream") {
    dpfl::Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a() == b());
    auto x = dpfl::Rng(7).split("data");
    auto y = dpfl::Rng(7).split("data");
    CHECK(x() == y());
  }

  TEST_CASE("labeled splits are independent of draws on the parent") {
    dpfl::Rng a(3);
    const auto before = a.split("participation");
    for (int i = 0; i < 10; ++i) a();
    auto after = a.split("participation");
    auto b = before;
    CHECK(b() == after());
    CHECK(dpfl::Rng(3).split("data")() != dpfl::Rng(3).split("training")());
    CHECK(dpfl::Rng(3).split(std::uint64_t{1})() != dpfl::Rng(3).split(std::uint64_t{2})());
  }

  TEST_CASE("uniform stays in [0, 1) and below stays in range") {
    dpfl::Rng r(11);
    for (int i = 0; i < 10000; ++i) {
      const double u = r.uniform();
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
      CHECK(r.below(7) < 7u);
    }
  }

  TEST_CASE("shuffle is a permutation") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    dpfl::Rng r(5);
    dpfl::shuffle(std::span<int>(v), r);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  }

  TEST_CASE("format_double round-trips") {
    for (double v : {0.1, 1.0 / 3.0, 80.7, -2.5e-300, 12345678.875}) {
      CHECK(std::stod(dpfl::format_double(v)) == v);
    }
    CHECK(dpfl::format_double(32.5) == "32.5");
  }

  TEST_CASE("atomic write creates parents and leaves no temp file") {
    const auto dir = std::filesystem::temp_directory_path() / "dpfl_io_test";
    std::filesystem::remove_all(dir);
    dpfl::write_file_atomic(dir / "a" / "b.txt", "hello\n");
    CHECK(dpfl::read_file(dir / "a" / "b.txt") == "hello\n");
    dpfl::write_file_atomic(dir / "a" / "b.txt", "again\n");
    CHECK(dpfl::read_file(dir / "a" / "b.txt") == "again\n");
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
      (void)e;
      ++files;
    }
    CHECK(files == 1);
    CHECK_THROWS_AS(dpfl::read_file(dir / "missing.txt"), dpfl::Error);
    std::filesystem::remove_all(dir);
  }
}
