#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace histosynth {

/// Closed label set: background plus five tumor subtypes. The CIS code covers
/// LCIS and DCIS together and is never mapped onto a HER2 score.
enum class Subtype : std::uint8_t {
  background = 0,
  her2_0 = 1,
  her2_1 = 2,
  her2_2 = 3,
  her2_3 = 4,
  cis = 5,
};

inline constexpr int kNumClasses = 6;
inline constexpr int kNumTumorSubtypes = 5;

inline constexpr std::array<Subtype, 5> kTumorSubtypes{
    Subtype::her2_0, Subtype::her2_1, Subtype::her2_2, Subtype::her2_3, Subtype::cis};
inline constexpr std::array<Subtype, 4> kHer2Subtypes{
    Subtype::her2_0, Subtype::her2_1, Subtype::her2_2, Subtype::her2_3};

constexpr std::uint8_t code(Subtype s) noexcept { return static_cast<std::uint8_t>(s); }
constexpr bool is_tumor(Subtype s) noexcept { return s != Subtype::background; }
constexpr bool is_valid_code(int c) noexcept { return c >= 0 && c < kNumClasses; }

inline constexpr std::array<std::string_view, kNumClasses> kSubtypeNames{
    "background", "her2_0", "her2_1", "her2_2", "her2_3", "cis"};

constexpr std::string_view name(Subtype s) noexcept { return kSubtypeNames[code(s)]; }

constexpr std::optional<Subtype> subtype_from_code(int c) noexcept {
  if (!is_valid_code(c)) return std::nullopt;
  return static_cast<Subtype>(c);
}

constexpr std::optional<Subtype> subtype_from_name(std::string_view n) noexcept {
  for (int c = 0; c < kNumClasses; ++c)
    if (kSubtypeNames[c] == n) return static_cast<Subtype>(c);
  return std::nullopt;
}

}  // namespace histosynth
