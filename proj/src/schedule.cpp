#include <cmath>
#include <numbers>

#include "shala/diffusion.hpp"

namespace shala {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "constant") return ScheduleKind::constant;
  throw InvalidArgument("unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::linear:
      return "linear";
    case ScheduleKind::cosine:
      return "cosine";
    case ScheduleKind::constant:
      return "constant";
  }
  return "constant";
}

NoiseSchedule NoiseSchedule::from_sigmas(std::vector<double> sigmas, ScheduleKind kind, bool check_terminal) {
  if (sigmas.empty()) throw InvalidArgument("noise schedule needs T >= 1");
  NoiseSchedule s;
  s.kind_ = kind;
  s.sigma_.push_back(0.0);
  s.alpha_.push_back(1.0);
  s.alpha_bar_.push_back(1.0);
  for (size_t i = 0; i < sigmas.size(); ++i) {
    const double sig = sigmas[i];
    if (!(sig > 0.0 && sig < 1.0)) {
      throw InvalidArgument("sigma_" + std::to_string(i + 1) + " = " + std::to_string(sig) + " is outside (0, 1)");
    }
    if (i > 0 && sig < sigmas[i - 1]) throw InvalidArgument("noise schedule sigma_t must be non-decreasing");
    const double a = std::sqrt(1.0 - sig * sig);
    s.sigma_.push_back(sig);
    s.alpha_.push_back(a);
    s.alpha_bar_.push_back(s.alpha_bar_.back() * a);
  }
  if (check_terminal && s.alpha_bar_.back() > kTerminalAlphaBarMax) {
    throw InvalidArgument("noise schedule terminal alpha_bar_T = " + std::to_string(s.alpha_bar_.back()) +
                          " exceeds " + std::to_string(kTerminalAlphaBarMax));
  }
  return s;
}

double NoiseSchedule::noise_level(int64_t t) const {
  const double ab = alpha_bar(t);
  return std::sqrt(std::max(0.0, 1.0 - ab * ab));
}

double NoiseSchedule::reverse_std(int64_t t) const {
  if (t <= 1) return 0.0;
  const double prev = alpha_bar(t - 1);
  const double cur = alpha_bar(t);
  return std::sqrt((1.0 - prev * prev) / (1.0 - cur * cur)) * sigma(t);
}

json NoiseSchedule::to_json() const {
  return {{"kind", to_string(kind_)}, {"sigmas", std::vector<double>(sigma_.begin() + 1, sigma_.end())}};
}

NoiseSchedule NoiseSchedule::from_json(const json& j) {
  return from_sigmas(j.at("sigmas").get<std::vector<double>>(), parse_schedule_kind(j.at("kind").get<std::string>()),
                     false);
}

NoiseSchedule build_schedule(int64_t steps, ScheduleKind kind, bool check_terminal) {
  if (steps < 1) throw InvalidArgument("noise schedule needs T >= 1");
  std::vector<double> sigmas;
  const auto T = static_cast<double>(steps);
  switch (kind) {
    case ScheduleKind::linear: {
      const double scale = 1000.0 / T;
      const double lo = scale * 1e-4;
      const double hi = scale * 0.02;
      for (int64_t t = 1; t <= steps; ++t) {
        const double frac = steps > 1 ? static_cast<double>(t - 1) / (T - 1.0) : 0.0;
        sigmas.push_back(std::sqrt(std::min(0.999, lo + frac * (hi - lo))));
      }
      break;
    }
    case ScheduleKind::cosine: {
      constexpr double offset = 0.008;
      auto f = [&](double t) {
        const double c = std::cos((t / T + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
        return c * c;
      };
      const double f0 = f(0.0);
      double prev = 1.0;
      for (int64_t t = 1; t <= steps; ++t) {
        const double cur = f(static_cast<double>(t)) / f0;
        const double beta = std::min(0.999, std::max(1e-8, 1.0 - cur / prev));
        sigmas.push_back(std::sqrt(beta));
        prev = cur;
      }
      // keep sigma non-decreasing under floating-point noise at the start
      for (size_t i = 1; i < sigmas.size(); ++i) sigmas[i] = std::max(sigmas[i], sigmas[i - 1]);
      break;
    }
    case ScheduleKind::constant:
      throw InvalidArgument("constant schedules are built with NoiseSchedule::from_sigmas");
  }
  return NoiseSchedule::from_sigmas(std::move(sigmas), kind, check_terminal);
}

namespace {

void check_step(int64_t t, const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.steps()) {
    throw InvalidArgument("diffusion step " + std::to_string(t) + " outside [0, " + std::to_string(schedule.steps()) +
                          "]");
  }
}

}  // namespace

torch::Tensor forward_marginal_with_noise(const torch::Tensor& z0, int64_t t, const NoiseSchedule& schedule,
                                          const torch::Tensor& eps) {
  check_step(t, schedule);
  if (t == 0) return z0;
  return schedule.alpha_bar(t) * z0 + schedule.noise_level(t) * eps;
}

torch::Tensor forward_marginal(const torch::Tensor& z0, int64_t t, const NoiseSchedule& schedule, Rng& rng) {
  check_step(t, schedule);
  if (t == 0) return z0;
  return forward_marginal_with_noise(z0, t, schedule, rng.normal(z0.sizes(), z0.scalar_type()));
}

torch::Tensor forward_step(const torch::Tensor& z_prev, int64_t t, const NoiseSchedule& schedule, Rng& rng) {
  check_step(t, schedule);
  if (t == 0) throw InvalidArgument("forward_step needs t >= 1");
  return schedule.alpha(t) * z_prev + schedule.sigma(t) * rng.normal(z_prev.sizes(), z_prev.scalar_type());
}

}  // namespace shala
