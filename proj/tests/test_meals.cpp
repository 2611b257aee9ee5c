#include "apmpc/error.hpp"
#include "apmpc/meals.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

using namespace apmpc;

namespace {

std::map<int, std::vector<MealEvent>> by_day(const std::vector<MealEvent>& meals) {
  std::map<int, std::vector<MealEvent>> out;
  for (const auto& m : meals) out[static_cast<int>(m.t / 1440.0)].push_back(m);
  return out;
}

MealChainConfig three_fixed_meals() {
  MealChainConfig c = MealChainConfig::defaults(1);
  c.main_windows = {{{480.0, 480.0}, {780.0, 780.0}, {1140.0, 1140.0}}};
  c.grams[0] = {50.0, 0.0, 50.0, 50.0};
  c.grams[1] = {75.0, 0.0, 75.0, 75.0};
  c.grams[2] = {75.0, 0.0, 75.0, 75.0};
  for (auto& part : c.transition) {
    for (auto& row : part) row = {0.0, 1.0, 0.0};
  }
  return c;
}

}  // namespace

TEST_CASE("fixed three-meal schedule") {
  const auto m = fixed_meals_scenario_a(2);
  REQUIRE(m.size() == 6);
  const double grams[] = {50, 75, 75, 50, 75, 75};
  const double times[] = {480, 780, 1140, 1920, 2220, 2580};
  for (int i = 0; i < 6; ++i) {
    CHECK(m[i].grams == grams[i]);
    CHECK(m[i].t == times[i]);
  }
  CHECK_THROWS_AS(fixed_meals_scenario_a(0), std::invalid_argument);
}

TEST_CASE("generator is deterministic per seed") {
  const auto a = generate_meals(MealChainConfig::defaults(7), 28);
  const auto b = generate_meals(MealChainConfig::defaults(7), 28);
  const auto c = generate_meals(MealChainConfig::defaults(8), 28);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("generated meals satisfy event and day invariants over 1000 days") {
  int days_seen = 0;
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto meals = generate_meals(MealChainConfig::defaults(seed), 25);
    for (std::size_t i = 0; i < meals.size(); ++i) {
      CHECK(meals[i].grams >= 10.0);
      CHECK(meals[i].grams <= 120.0);
      CHECK(std::fmod(meals[i].t, 15.0) == 0.0);
      if (i > 0) CHECK(meals[i].t - meals[i - 1].t >= 120.0);
    }
    const auto days = by_day(meals);
    CHECK(days.size() == 25);
    for (const auto& [d, list] : days) {
      double total = 0.0;
      for (const auto& m : list) total += m.grams;
      CHECK(list.size() >= 2);
      CHECK(list.size() <= 5);
      CHECK(total >= 50.0);
      CHECK(total <= 400.0);
      ++days_seen;
    }
  }
  CHECK(days_seen == 1000);
}

TEST_CASE("degenerate chain collapses to the fixed schedule") {
  const auto m = generate_meals(three_fixed_meals(), 5);
  CHECK(m == fixed_meals_scenario_a(5));
}

TEST_CASE("per-daypart gram means within 5 percent") {
  // No snacks and no skipping: each day is breakfast, lunch, dinner in order.
  MealChainConfig c = MealChainConfig::defaults(21);
  for (auto& part : c.transition) {
    for (auto& row : part) row = {0.0, 1.0, 0.0};
  }
  const auto meals = generate_meals(c, 3400);
  std::array<double, 3> sum{};
  std::array<int, 3> n{};
  for (const auto& [d, list] : by_day(meals)) {
    REQUIRE(list.size() == 3);
    for (int i = 0; i < 3; ++i) {
      sum[i] += list[i].grams;
      ++n[i];
    }
  }
  for (int i = 0; i < 3; ++i) {
    CHECK(n[i] >= 3334);
    CHECK(std::abs(sum[i] / n[i] - c.grams[i].mean) < 0.05 * c.grams[i].mean);
  }

  // Breakfast always followed by a snack: days of four events are B, S, L, D.
  MealChainConfig s = c;
  s.seed = 22;
  for (auto& row : s.transition[0]) row = {1.0, 0.0, 0.0};
  double snack = 0.0;
  int ns = 0;
  for (const auto& [d, list] : by_day(generate_meals(s, 12000))) {
    if (list.size() == 4) {
      snack += list[1].grams;
      ++ns;
    }
  }
  REQUIRE(ns >= 10000);
  CHECK(std::abs(snack / ns - s.grams[3].mean) < 0.05 * s.grams[3].mean);
}

TEST_CASE("config validation") {
  MealChainConfig c = MealChainConfig::defaults(1);
  CHECK_NOTHROW(c.validate());
  MealChainConfig bad_row = c;
  bad_row.transition[0][0] = {0.5, 0.4, 0.0};
  CHECK_THROWS_AS(bad_row.validate(), MealGenerationError);
  MealChainConfig bad_grams = c;
  bad_grams.grams[1].max = 150.0;
  CHECK_THROWS_AS(bad_grams.validate(), MealGenerationError);
  MealChainConfig overlap = c;
  overlap.main_windows[1] = {500.0, 800.0};
  CHECK_THROWS_AS(overlap.validate(), MealGenerationError);
  CHECK_THROWS_AS(generate_meals(c, 0), std::invalid_argument);
}

TEST_CASE("unsatisfiable day constraints fail after bounded retries") {
  MealChainConfig c = three_fixed_meals();
  c.grams[0] = {10.0, 0.0, 10.0, 10.0};
  c.grams[1] = {10.0, 0.0, 10.0, 10.0};
  c.grams[2] = {10.0, 0.0, 10.0, 10.0};
  c.max_day_retries = 5;
  CHECK_THROWS_AS(generate_meals(c, 1), MealGenerationError);
}

TEST_CASE("size terciles") {
  const GramDistribution d{60.0, 10.0, 10.0, 120.0};
  CHECK(size_tercile(d, 50.0) == 0);
  CHECK(size_tercile(d, 60.0) == 1);
  CHECK(size_tercile(d, 70.0) == 2);
  CHECK(size_tercile(GramDistribution{60.0, 0.0, 60.0, 60.0}, 60.0) == 1);
}

TEST_CASE("meals land on their tick; csv round trip") {
  const auto m = fixed_meals_scenario_a(1);
  const auto ticks = meals_to_ticks(m, 96);
  REQUIRE(ticks.size() == 96);
  CHECK(ticks[32] == 50.0);
  CHECK(ticks[52] == 75.0);
  CHECK(ticks[76] == 75.0);
  double total = 0.0;
  for (double g : ticks) total += g;
  CHECK(total == 200.0);

  const auto path = std::filesystem::temp_directory_path() / "apmpc_meals_rt.csv";
  const auto gen = generate_meals(MealChainConfig::defaults(3), 4);
  write_meals_csv(path, gen);
  CHECK(read_meals_csv(path) == gen);
  std::filesystem::remove(path);
}
