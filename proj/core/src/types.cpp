#include "hm/types.hpp"

#include <algorithm>
#include <cctype>

namespace hm {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

ClassLabel label_from_index(int i) {
  if (i < 0 || i >= static_cast<int>(kNumClasses)) {
    throw Error("class index out of range: " + std::to_string(i));
  }
  return static_cast<ClassLabel>(i);
}

std::string_view to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::Absent: return "Absent";
    case ClassLabel::Present: return "Present";
    case ClassLabel::Unknown: return "Unknown";
  }
  return "?";
}

ClassLabel parse_label(std::string_view token) {
  const std::string t = lower(token);
  if (t == "absent") return ClassLabel::Absent;
  if (t == "present") return ClassLabel::Present;
  if (t == "unknown") return ClassLabel::Unknown;
  throw Error("unknown label token '" + std::string(token) + "'");
}

std::string_view to_string(Location l) {
  switch (l) {
    case Location::AV: return "AV";
    case Location::PV: return "PV";
    case Location::MV: return "MV";
    case Location::TV: return "TV";
    case Location::Phc: return "Phc";
  }
  return "?";
}

Location parse_location(std::string_view token) {
  if (token == "AV") return Location::AV;
  if (token == "PV") return Location::PV;
  if (token == "MV") return Location::MV;
  if (token == "TV") return Location::TV;
  if (token == "Phc") return Location::Phc;
  throw Error("unknown location token '" + std::string(token) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view token) {
  const std::string t = lower(token);
  if (t == "train") return Split::Train;
  if (t == "validation" || t == "val") return Split::Validation;
  if (t == "test") return Split::Test;
  throw Error("unknown split token '" + std::string(token) + "'");
}

ClassLabel argmax(const std::array<double, kNumClasses>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < kNumClasses; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<ClassLabel>(best);
}

}  // namespace hm
