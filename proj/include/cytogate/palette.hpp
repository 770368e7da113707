#pragma once

#include <array>
#include <cstdint>

#include "cytogate/cell_class.hpp"

namespace cytogate {

struct Rgb {
  std::uint8_t r, g, b;
};

// Kept in sync with docs/palette.md; a unit test compares the two.
inline constexpr std::array<Rgb, kOutcomeCount> kClassPalette = {{
    {31, 119, 180},   // goblet
    {255, 127, 14},   // enteroendocrine
    {44, 160, 44},    // enterocyte
    {214, 39, 40},    // fibroblast
    {148, 103, 189},  // stromal_undetermined
    {140, 86, 75},    // myeloid
    {227, 119, 194},  // helper_t
    {188, 189, 34},   // cytotoxic_t
    {23, 190, 207},   // t_cell_receptor
    {174, 199, 232},  // monocyte
    {255, 187, 120},  // macrophage
    {152, 223, 138},  // b_cell
    {255, 152, 150},  // leukocyte
    {197, 176, 213},  // progenitor
    {127, 127, 127},  // excluded
    {0, 0, 0},        // unlabeled
}};

inline constexpr Rgb kPositiveColor{0, 200, 0};
inline constexpr Rgb kNegativeColor{128, 128, 128};

inline constexpr Rgb palette_color(CellClass c) noexcept { return kClassPalette[index_of(c)]; }

}  // namespace cytogate
