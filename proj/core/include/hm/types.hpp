#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hm {

/// Base error for everything thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Murmur class. The integer encoding is used everywhere downstream.
enum class ClassLabel : int { Absent = 0, Present = 1, Unknown = 2 };

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::array<ClassLabel, kNumClasses> kAllLabels{
    ClassLabel::Absent, ClassLabel::Present, ClassLabel::Unknown};

constexpr int to_index(ClassLabel c) { return static_cast<int>(c); }
ClassLabel label_from_index(int i);

std::string_view to_string(ClassLabel c);
/// Accepts "Absent"/"Present"/"Unknown" in any case.
ClassLabel parse_label(std::string_view token);

enum class Location { AV, PV, MV, TV, Phc };

std::string_view to_string(Location l);
Location parse_location(std::string_view token);

enum class Split { Train, Validation, Test };

std::string_view to_string(Split s);
Split parse_split(std::string_view token);

/// Per-segment class scores over (absent, present, unknown).
using Logits = std::array<double, kNumClasses>;
using ProbVector = std::array<double, kNumClasses>;

ClassLabel argmax(const std::array<double, kNumClasses>& v);

}  // namespace hm
