// Copyright 2026 The wsdet Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsdet {

/// The controlled weight applied to the weak-supervision classification loss.
/// Four families; the polynomial family covers exponents 5, 16 and 32 used in
/// the published comparison. All non-constant schedules start at 0.01 and rise
/// monotonically; linear and polynomial reach exactly 1 at the final step.
enum class ScheduleKind { constant, inverse_exponential, linear, polynomial };

struct AlphaSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  int exponent = 1;  // polynomial only, >= 1

  static constexpr double kFloor = 0.01;
  static constexpr double kCeilingScale = 0.99;
  static constexpr double kDecayBase = 0.9;
  static constexpr double kDecayPeriod = 2000.0;
};

inline double alpha_at(const AlphaSchedule& s, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("alpha_at: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("alpha_at: step " + std::to_string(step) +
                                " outside [0, total_steps=" + std::to_string(total_steps) + "]");
  }
  switch (s.kind) {
    case ScheduleKind::constant:
      return 1.0;
    case ScheduleKind::inverse_exponential:
      // algebraic rewrite of 1 - 0.99*0.9^(step/2000) that hits the 0.01
      // floor exactly at step 0
      return AlphaSchedule::kFloor +
             AlphaSchedule::kCeilingScale *
                 (1.0 - std::pow(AlphaSchedule::kDecayBase,
                                 double(step) / AlphaSchedule::kDecayPeriod));
    case ScheduleKind::linear:
      return AlphaSchedule::kFloor +
             AlphaSchedule::kCeilingScale * (double(step) / double(total_steps));
    case ScheduleKind::polynomial:
      if (s.exponent < 1) throw std::invalid_argument("alpha_at: polynomial exponent must be >= 1");
      return AlphaSchedule::kFloor +
             AlphaSchedule::kCeilingScale *
                 std::pow(double(step) / double(total_steps), double(s.exponent));
  }
  throw std::invalid_argument("alpha_at: unknown schedule kind");
}

inline std::string to_string(const AlphaSchedule& s) {
  switch (s.kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::inverse_exponential: return "inverse_exponential";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::polynomial: return "polynomial:" + std::to_string(s.exponent);
  }
  throw std::invalid_argument("unknown schedule kind");
}

/// Human-readable formula, echoed in experiment reports.
inline std::string formula_string(const AlphaSchedule& s) {
  switch (s.kind) {
    case ScheduleKind::constant: return "alpha = 1";
    case ScheduleKind::inverse_exponential: return "alpha = 1 - 0.99*(0.9^(step/2000))";
    case ScheduleKind::linear: return "alpha = 0.01 + 0.99*(step/total_steps)";
    case ScheduleKind::polynomial:
      return "alpha = 0.01 + 0.99*(step/total_steps)^" + std::to_string(s.exponent);
  }
  throw std::invalid_argument("unknown schedule kind");
}

/// Parses "constant", "inverse_exponential", "linear", "polynomial" or
/// "polynomial:<exponent>".
inline AlphaSchedule parse_schedule(const std::string& text, int default_exponent = 16) {
  AlphaSchedule s;
  std::string kind = text;
  if (const auto colon = text.find(':'); colon != std::string::npos) {
    kind = text.substr(0, colon);
    s.exponent = std::stoi(text.substr(colon + 1));
  } else {
    s.exponent = default_exponent;
  }
  if (kind == "constant") s.kind = ScheduleKind::constant;
  else if (kind == "inverse_exponential") s.kind = ScheduleKind::inverse_exponential;
  else if (kind == "linear") s.kind = ScheduleKind::linear;
  else if (kind == "polynomial") s.kind = ScheduleKind::polynomial;
  else throw std::invalid_argument("unknown schedule: " + text);
  if (s.kind == ScheduleKind::polynomial && s.exponent < 1) {
    throw std::invalid_argument("polynomial exponent must be >= 1");
  }
  return s;
}

/// The six published schedules in report order.
inline std::vector<AlphaSchedule> published_schedules() {
  return {{ScheduleKind::constant, 1},
          {ScheduleKind::inverse_exponential, 1},
          {ScheduleKind::linear, 1},
          {ScheduleKind::polynomial, 5},
          {ScheduleKind::polynomial, 16},
          {ScheduleKind::polynomial, 32}};
}

}  // namespace wsdet
