#pragma once

#include "idf/active_sampling.hpp"
#include "idf/frame.hpp"

namespace idf {

struct Keyframe {
  int id = -1;
  Frame frame;
  PoseSE3 pose;  // world-from-camera
  CellLossGrid cell_losses;
};

}  // namespace idf
