#include "apmpc/meals.hpp"

#include "apmpc/io.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace apmpc {

namespace {

constexpr double kDay = 1440.0;
constexpr double kGrid = 15.0;
constexpr double kTercileZ = 0.4307272992954576;  // Phi^{-1}(2/3)

double snap_up(double t) { return std::ceil(t / kGrid - 1e-9) * kGrid; }
double snap_down(double t) { return std::floor(t / kGrid + 1e-9) * kGrid; }

struct ChainState {
  double t = -1e9;
  Daypart daypart = Daypart::kDinner;
  double grams = 0.0;
  int next_main = 0;  // 0 breakfast, 1 lunch, 2 dinner
  int next_main_day = 0;
  bool initial = true;
};

class Chain {
 public:
  Chain(const MealChainConfig& cfg, std::mt19937_64& rng) : cfg_(cfg), rng_(rng) {}

  double draw_grams(Daypart part) {
    const auto& d = cfg_.grams[static_cast<int>(part)];
    if (d.std_dev <= 0.0) return std::clamp(d.mean, d.min, d.max);
    std::normal_distribution<double> normal(d.mean, d.std_dev);
    double g = d.mean;
    for (int i = 0; i < 1000; ++i) {
      g = normal(rng_);
      if (g >= d.min && g <= d.max) break;
    }
    g = std::clamp(g, d.min, d.max);
    return std::clamp(std::round(g * 10.0) / 10.0, d.min, d.max);
  }

  double uniform_grid_time(double lo, double hi) {
    const long n = std::lround((hi - lo) / kGrid);
    if (n <= 0) return lo;
    std::uniform_int_distribution<long> pick(0, n);
    return lo + kGrid * static_cast<double>(pick(rng_));
  }

  Fasting draw_fasting(const ChainState& s) {
    const int part = static_cast<int>(s.daypart);
    const int terc = size_tercile(cfg_.grams[part], s.grams);
    const auto& row = cfg_.transition[part][terc];
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double r = u(rng_);
    double acc = 0.0;
    for (int k = 0; k < kFastingKinds; ++k) {
      acc += row[k];
      if (r < acc) return static_cast<Fasting>(k);
    }
    // r landed in the rounding slack; pick the last non-zero outcome.
    for (int k = kFastingKinds - 1; k >= 0; --k) {
      if (row[k] > 0.0) return static_cast<Fasting>(k);
    }
    return Fasting::kToNextMain;
  }

  // Next meal after `s`; the returned state describes that meal.
  // Meals earlier than `not_before` are not allowed (day boundaries).
  ChainState step(const ChainState& s, double not_before) {
    ChainState next = s;
    next.initial = false;
    Fasting kind = s.initial ? Fasting::kToNextMain : draw_fasting(s);

    if (kind == Fasting::kToSnack) {
      const double lo = snap_up(s.t + cfg_.snack_gap_min);
      const double hi = snap_down(s.t + cfg_.snack_gap_max);
      const double t = uniform_grid_time(lo, std::max(lo, hi));
      const double day_of_meal = std::floor(s.t / kDay);
      const auto& w = cfg_.main_windows[s.next_main];
      const double main_end = s.next_main_day * kDay + w.end;
      const bool same_day = std::floor(t / kDay) == day_of_meal;
      const bool room = t + cfg_.min_gap <= main_end;
      if (same_day && room && t >= not_before && t - day_of_meal * kDay <= cfg_.latest_snack) {
        next.t = t;
        next.daypart = Daypart::kSnack;
        next.grams = draw_grams(Daypart::kSnack);
        return next;
      }
      kind = Fasting::kToNextMain;
    }

    int main = s.next_main;
    int day = s.next_main_day;
    auto advance = [&] {
      if (++main == 3) {
        main = 0;
        ++day;
      }
    };
    if (kind == Fasting::kSkipMain) advance();
    for (int guard = 0; guard < 6; ++guard) {
      const auto& w = cfg_.main_windows[main];
      const double start = day * kDay + w.start;
      const double end = day * kDay + w.end;
      const double lo = snap_up(std::max(start, s.t + cfg_.min_gap));
      if (lo <= end + 1e-9) {
        next.t = uniform_grid_time(lo, snap_down(end));
        next.daypart = static_cast<Daypart>(main);
        next.grams = draw_grams(next.daypart);
        advance();
        next.next_main = main;
        next.next_main_day = day;
        return next;
      }
      advance();
    }
    throw MealGenerationError("no main-meal window satisfies the minimum gap");
  }

 private:
  const MealChainConfig& cfg_;
  std::mt19937_64& rng_;
};

}  // namespace

void MealChainConfig::validate() const {
  for (int i = 0; i < 3; ++i) {
    const auto& w = main_windows[i];
    if (w.start < 0.0 || w.end >= kDay || w.start > w.end) {
      throw MealGenerationError("main-meal window out of range");
    }
    if (i > 0 && w.start <= main_windows[i - 1].end) {
      throw MealGenerationError("main-meal windows must be ordered and disjoint");
    }
  }
  for (const auto& g : grams) {
    if (g.min < 10.0 || g.max > 120.0 || g.min > g.max || g.std_dev < 0.0 || g.mean < g.min ||
        g.mean > g.max) {
      throw MealGenerationError("gram distribution bounds must lie within [10, 120]");
    }
  }
  for (int p = 0; p < kDayparts; ++p) {
    for (int t = 0; t < kTerciles; ++t) {
      double sum = 0.0;
      for (double v : transition[p][t]) {
        if (v < 0.0) throw MealGenerationError("negative transition probability");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-9) {
        throw MealGenerationError("transition row does not sum to 1");
      }
    }
  }
  for (int t = 0; t < kTerciles; ++t) {
    if (transition[static_cast<int>(Daypart::kSnack)][t][0] != 0.0) {
      throw MealGenerationError("a snack cannot be followed directly by a snack");
    }
  }
  if (min_gap < 120.0 || snack_gap_min < min_gap || snack_gap_max < snack_gap_min) {
    throw MealGenerationError("meal gaps must be at least 120 min");
  }
  if (max_day_retries < 1) throw MealGenerationError("max_day_retries must be >= 1");
}

MealChainConfig MealChainConfig::defaults(std::uint64_t seed) {
  MealChainConfig c;
  c.main_windows = {{{390.0, 570.0}, {690.0, 840.0}, {1080.0, 1230.0}}};
  c.grams = {{{45.0, 10.0, 20.0, 70.0},
              {70.0, 15.0, 30.0, 110.0},
              {75.0, 15.0, 35.0, 115.0},
              {20.0, 5.0, 10.0, 30.0}}};
  using Row = std::array<double, kFastingKinds>;
  const std::array<Row, kTerciles> main_rows = {{{0.40, 0.57, 0.03}, {0.25, 0.72, 0.03}, {0.10, 0.85, 0.05}}};
  const std::array<Row, kTerciles> dinner_rows = {{{0.35, 0.62, 0.03}, {0.20, 0.77, 0.03}, {0.10, 0.85, 0.05}}};
  const std::array<Row, kTerciles> snack_rows = {{{0.0, 0.97, 0.03}, {0.0, 0.97, 0.03}, {0.0, 0.95, 0.05}}};
  c.transition = {main_rows, main_rows, dinner_rows, snack_rows};
  c.seed = seed;
  return c;
}

int size_tercile(const GramDistribution& dist, double grams) {
  if (dist.std_dev <= 0.0) return 1;
  const double z = (grams - dist.mean) / dist.std_dev;
  if (z < -kTercileZ) return 0;
  if (z > kTercileZ) return 2;
  return 1;
}

std::vector<MealEvent> generate_meals(const MealChainConfig& config, int days) {
  if (days < 1) throw std::invalid_argument("days must be >= 1");
  config.validate();
  std::mt19937_64 rng(config.seed);
  Chain chain(config, rng);

  std::vector<MealEvent> out;
  ChainState carry;
  for (int d = 0; d < days; ++d) {
    const double day_start = d * kDay;
    const double day_end = day_start + kDay;
    bool accepted = false;
    for (int attempt = 0; attempt < config.max_day_retries && !accepted; ++attempt) {
      std::vector<MealEvent> day;
      ChainState s = carry;
      double total = 0.0;
      while (true) {
        ChainState n = chain.step(s, day_start);
        if (n.t >= day_end) break;
        if (n.t >= day_start) {
          day.push_back({n.t, n.grams});
          total += n.grams;
        }
        s = n;
        if (day.size() > 5) break;
      }
      if (day.size() >= 2 && day.size() <= 5 && total >= 50.0 && total <= 400.0) {
        out.insert(out.end(), day.begin(), day.end());
        carry = s;
        accepted = true;
      }
    }
    if (!accepted) {
      throw MealGenerationError("day " + std::to_string(d) + " rejected " +
                                std::to_string(config.max_day_retries) +
                                " times; meal configuration is unsatisfiable");
    }
  }
  return out;
}

std::vector<MealEvent> fixed_meals_scenario_a(int days) {
  if (days < 1) throw std::invalid_argument("days must be >= 1");
  std::vector<MealEvent> out;
  for (int d = 0; d < days; ++d) {
    out.push_back({d * kDay + 480.0, 50.0});
    out.push_back({d * kDay + 780.0, 75.0});
    out.push_back({d * kDay + 1140.0, 75.0});
  }
  return out;
}

std::vector<double> meals_to_ticks(const std::vector<MealEvent>& meals, int ticks) {
  std::vector<double> out(static_cast<std::size_t>(ticks), 0.0);
  for (const auto& m : meals) {
    const long k = std::lround(m.t / kGrid);
    if (k >= 0 && k < ticks) out[static_cast<std::size_t>(k)] += m.grams;
  }
  return out;
}

void write_meals_csv(const std::filesystem::path& path, const std::vector<MealEvent>& meals) {
  std::vector<std::vector<double>> rows;
  rows.reserve(meals.size());
  for (const auto& m : meals) rows.push_back({m.t, m.grams});
  write_csv(path, {"t_min", "grams"}, rows);
}

std::vector<MealEvent> read_meals_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  const auto t = table.column("t_min");
  const auto g = table.column("grams");
  std::vector<MealEvent> out;
  for (const auto& row : table.rows) out.push_back({row[t], row[g]});
  return out;
}

}  // namespace apmpc
