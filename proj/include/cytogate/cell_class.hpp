#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>

namespace cytogate {

/// The 14 cell classes in canonical order, followed by the two sentinel
/// outcomes a labeling run may produce.
enum class CellClass : std::uint8_t {
  goblet,
  enteroendocrine,
  enterocyte,
  fibroblast,
  stromal_undetermined,
  myeloid,
  helper_t,
  cytotoxic_t,
  t_cell_receptor,
  monocyte,
  macrophage,
  b_cell,
  leukocyte,
  progenitor,
  excluded,
  unlabeled,
};

inline constexpr std::size_t kCellClassCount = 14;
inline constexpr std::size_t kOutcomeCount = 16;

constexpr bool is_sentinel(CellClass c) noexcept {
  return c == CellClass::excluded || c == CellClass::unlabeled;
}

constexpr std::size_t index_of(CellClass c) noexcept { return static_cast<std::size_t>(c); }

inline constexpr std::array<std::string_view, kOutcomeCount> kOutcomeNames = {
    "goblet",          "enteroendocrine", "enterocyte", "fibroblast",
    "stromal_undetermined", "myeloid",    "helper_t",   "cytotoxic_t",
    "t_cell_receptor", "monocyte",        "macrophage", "b_cell",
    "leukocyte",       "progenitor",      "excluded",   "unlabeled",
};

constexpr std::string_view to_string(CellClass c) noexcept { return kOutcomeNames[index_of(c)]; }

/// Parses any of the 16 outcome names.
constexpr std::optional<CellClass> parse_outcome(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kOutcomeCount; ++i) {
    if (kOutcomeNames[i] == name) return static_cast<CellClass>(i);
  }
  return std::nullopt;
}

/// Parses only the 14 non-sentinel class names.
constexpr std::optional<CellClass> parse_cell_class(std::string_view name) noexcept {
  auto c = parse_outcome(name);
  if (c && is_sentinel(*c)) return std::nullopt;
  return c;
}

}  // namespace cytogate
