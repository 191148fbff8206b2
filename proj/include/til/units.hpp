#pragma once

#include <numbers>

namespace til {

inline constexpr double kGravity = 9.81;
inline constexpr double kMsToKmh = 3.6;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;
inline constexpr double kDegToRad = std::numbers::pi / 180.0;

/// Sample period of every dataset and of the observer correction (100 Hz).
inline constexpr double kSamplePeriod = 0.01;

}  // namespace til
