#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <string_view>

namespace gpc {

inline constexpr int kNumZones = 7;

// Integer codes are stable: they appear in manifests and confusion matrices.
enum class GazeZone : std::uint8_t {
  EyesClosedOrLap = 0,
  Forward = 1,
  LeftMirror = 2,
  Speedometer = 3,
  Radio = 4,
  Rearview = 5,
  RightMirror = 6,
};

inline constexpr std::array<GazeZone, kNumZones> kAllZones = {
    GazeZone::EyesClosedOrLap, GazeZone::Forward, GazeZone::LeftMirror, GazeZone::Speedometer,
    GazeZone::Radio,           GazeZone::Rearview, GazeZone::RightMirror};

constexpr int zone_code(GazeZone z) { return static_cast<int>(z); }

// Throws Error(UnknownZoneCode) for codes outside 0..6.
GazeZone zone_from_code(int code);

std::string_view zone_name(GazeZone z);

enum class Lighting : std::uint8_t { Day = 0, Night = 1 };
enum class Eyewear : std::uint8_t { WithGlasses = 0, WithoutGlasses = 1 };

// Domain X holds eye crops without glasses, domain Y with glasses.
enum class Domain : std::uint8_t { X_WithoutGlasses = 0, Y_WithGlasses = 1 };

constexpr Domain domain_of(Eyewear e) {
  return e == Eyewear::WithGlasses ? Domain::Y_WithGlasses : Domain::X_WithoutGlasses;
}

struct CaptureCondition {
  Lighting lighting = Lighting::Day;
  Eyewear eyewear = Eyewear::WithoutGlasses;

  auto operator<=>(const CaptureCondition&) const = default;
};

inline constexpr std::array<CaptureCondition, 4> kAllConditions = {{
    {Lighting::Day, Eyewear::WithoutGlasses},
    {Lighting::Night, Eyewear::WithoutGlasses},
    {Lighting::Day, Eyewear::WithGlasses},
    {Lighting::Night, Eyewear::WithGlasses},
}};

std::string condition_name(CaptureCondition c);

// The nine condition sets of the capture-condition grid. The first four are
// the stored conditions, the rest are unions evaluated as filters.
enum class ConditionSet : std::uint8_t {
  DayNoGlasses = 0,     // (a)
  NightNoGlasses = 1,   // (b)
  DayGlasses = 2,       // (c)
  NightGlasses = 3,     // (d)
  NoGlasses = 4,        // (e)
  Glasses = 5,          // (f)
  Day = 6,              // (g)
  Night = 7,            // (h)
  All = 8,              // (i)
};

inline constexpr int kNumConditionSets = 9;

constexpr ConditionSet condition_set_at(int i) { return static_cast<ConditionSet>(i); }

bool contains(ConditionSet set, CaptureCondition c);
std::string_view condition_set_label(ConditionSet set);

}  // namespace gpc
