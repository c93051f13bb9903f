#pragma once

namespace rectconv {

// Axis-aligned detection in pixel coordinates.
struct BoxDet {
  double u_min = 0.0;
  double v_min = 0.0;
  double u_max = 0.0;
  double v_max = 0.0;
  double score = 1.0;
  int class_id = 0;

  bool valid() const { return u_min < u_max && v_min < v_max; }
  bool contains(double u, double v) const {
    return u >= u_min && u <= u_max && v >= v_min && v <= v_max;
  }
  double center_u() const { return 0.5 * (u_min + u_max); }
  double center_v() const { return 0.5 * (v_min + v_max); }
};

}  // namespace rectconv
