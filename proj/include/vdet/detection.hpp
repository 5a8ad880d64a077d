#pragma once

#include <cstddef>

#include "vdet/geometry.hpp"

namespace vdet {

// Class 0 is background; object classes start at 1.
inline constexpr int kBackground = 0;
inline constexpr int kVehicle = 1;

struct GroundTruth {
  int class_id = kVehicle;
  BBox box;
};

struct Detection {
  std::size_t image = 0;  // index of the image within the evaluated set
  int class_id = kVehicle;
  BBox box;
  double score = 0;
};

}  // namespace vdet
