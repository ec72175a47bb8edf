#include "gpc/zones.hpp"

#include "gpc/error.hpp"

namespace gpc {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::UnknownZoneCode: return "UnknownZoneCode";
    case ErrorKind::UnassignedSubject: return "UnassignedSubject";
    case ErrorKind::DegenerateLandmarks: return "DegenerateLandmarks";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::EmptyImage: return "EmptyImage";
    case ErrorKind::BadChannelRequest: return "BadChannelRequest";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NMismatch: return "NMismatch";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::MissingClass: return "MissingClass";
    case ErrorKind::Divergence: return "Divergence";
    case ErrorKind::ChannelMismatch: return "ChannelMismatch";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::Empty: return "Empty";
    case ErrorKind::EmptyMatrix: return "EmptyMatrix";
    case ErrorKind::EmptyConditionSet: return "EmptyConditionSet";
    case ErrorKind::PupilNotFound: return "PupilNotFound";
    case ErrorKind::MissingPrerequisiteCheckpoint: return "MissingPrerequisiteCheckpoint";
    case ErrorKind::MissingCheckpoint: return "MissingCheckpoint";
    case ErrorKind::BadImage: return "BadImage";
    case ErrorKind::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

GazeZone zone_from_code(int code) {
  if (code < 0 || code >= kNumZones) {
    throw Error(ErrorKind::UnknownZoneCode, "zone code " + std::to_string(code) + " not in 0..6");
  }
  return static_cast<GazeZone>(code);
}

std::string_view zone_name(GazeZone z) {
  switch (z) {
    case GazeZone::EyesClosedOrLap: return "EyesClosedOrLap";
    case GazeZone::Forward: return "Forward";
    case GazeZone::LeftMirror: return "LeftMirror";
    case GazeZone::Speedometer: return "Speedometer";
    case GazeZone::Radio: return "Radio";
    case GazeZone::Rearview: return "Rearview";
    case GazeZone::RightMirror: return "RightMirror";
  }
  return "?";
}

std::string condition_name(CaptureCondition c) {
  std::string s = c.lighting == Lighting::Day ? "day" : "night";
  s += c.eyewear == Eyewear::WithGlasses ? "_wg" : "_ng";
  return s;
}

bool contains(ConditionSet set, CaptureCondition c) {
  const bool day = c.lighting == Lighting::Day;
  const bool glasses = c.eyewear == Eyewear::WithGlasses;
  switch (set) {
    case ConditionSet::DayNoGlasses: return day && !glasses;
    case ConditionSet::NightNoGlasses: return !day && !glasses;
    case ConditionSet::DayGlasses: return day && glasses;
    case ConditionSet::NightGlasses: return !day && glasses;
    case ConditionSet::NoGlasses: return !glasses;
    case ConditionSet::Glasses: return glasses;
    case ConditionSet::Day: return day;
    case ConditionSet::Night: return !day;
    case ConditionSet::All: return true;
  }
  return false;
}

std::string_view condition_set_label(ConditionSet set) {
  switch (set) {
    case ConditionSet::DayNoGlasses: return "a_day_ng";
    case ConditionSet::NightNoGlasses: return "b_night_ng";
    case ConditionSet::DayGlasses: return "c_day_wg";
    case ConditionSet::NightGlasses: return "d_night_wg";
    case ConditionSet::NoGlasses: return "e_ng";
    case ConditionSet::Glasses: return "f_wg";
    case ConditionSet::Day: return "g_day";
    case ConditionSet::Night: return "h_night";
    case ConditionSet::All: return "i_all";
  }
  return "?";
}

}  // namespace gpc
