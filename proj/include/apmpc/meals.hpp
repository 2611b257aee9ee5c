#pragma once

// Stochastic meal scenarios. A Markov chain runs over fasting periods: after
// each meal, the kind of the next fasting period (short gap to a snack, gap
// to the next main meal, or a long gap that skips a main meal) is drawn from
// a row selected by the daypart of the meal just eaten and the tercile of its
// size. Times live on the 15-min grid.

#include "apmpc/error.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace apmpc {

struct MealEvent {
  double t = 0.0;      // minutes since scenario start (midnight of day 0)
  double grams = 0.0;

  bool operator==(const MealEvent&) const = default;
};

enum class Daypart : int { kBreakfast = 0, kLunch = 1, kDinner = 2, kSnack = 3 };
inline constexpr int kDayparts = 4;
inline constexpr int kTerciles = 3;

// Outcomes of one chain transition.
enum class Fasting : int { kToSnack = 0, kToNextMain = 1, kSkipMain = 2 };
inline constexpr int kFastingKinds = 3;

struct TimeWindow {
  double start = 0.0;  // clock minutes, inclusive
  double end = 0.0;    // clock minutes, inclusive
};

struct GramDistribution {
  double mean = 50.0;
  double std_dev = 10.0;
  double min = 10.0;
  double max = 120.0;
};

struct MealChainConfig {
  // Main-meal windows for breakfast, lunch, dinner. Snacks are timed by the
  // gap after the previous meal instead.
  std::array<TimeWindow, 3> main_windows{};
  double snack_gap_min = 120.0;
  double snack_gap_max = 180.0;
  double latest_snack = 23.0 * 60.0;
  double min_gap = 120.0;
  std::array<GramDistribution, kDayparts> grams{};
  // transition[daypart][tercile][fasting kind]
  std::array<std::array<std::array<double, kFastingKinds>, kTerciles>, kDayparts> transition{};
  std::uint64_t seed = 1;
  int max_day_retries = 200;

  void validate() const;

  // Shipping defaults, documented in the README.
  static MealChainConfig defaults(std::uint64_t seed);
};

// Size tercile of a meal relative to its daypart distribution (normal
// terciles at +-0.4307 sd).
int size_tercile(const GramDistribution& dist, double grams);

// Days are accepted when they hold 2-5 meals totalling 50-400 g; rejected
// days are redrawn up to max_day_retries times.
std::vector<MealEvent> generate_meals(const MealChainConfig& config, int days);

// 50 g at 08:00, 75 g at 13:00, 75 g at 19:00 every day.
std::vector<MealEvent> fixed_meals_scenario_a(int days);

// Per-tick carbohydrate series of length `ticks` (grams at the tick whose
// time equals the meal time).
std::vector<double> meals_to_ticks(const std::vector<MealEvent>& meals, int ticks);

void write_meals_csv(const std::filesystem::path& path, const std::vector<MealEvent>& meals);
std::vector<MealEvent> read_meals_csv(const std::filesystem::path& path);

}  // namespace apmpc
