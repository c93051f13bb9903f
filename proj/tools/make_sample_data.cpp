// Regenerates the repository's sample data: reference networks with seeded
// weights, a rendered fisheye scene with labels and person-point annotations,
// textured perspective test images and the small cameras used by the
// warp-comparison experiment. Output is byte-identical across runs.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <random>

#include "rectconv/rectconv.hpp"

namespace fs = std::filesystem;
using namespace rectconv;

namespace {

enum SceneClass : std::int32_t { Ceiling = 0, Floor = 1, Wall = 2, Pillar = 3 };

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  SceneClass cls = Ceiling;
  Eigen::Vector3d rgb{0, 0, 0};
};

struct PillarBox {
  double x0, x1, z0, z1;
  Eigen::Vector3d color;
};

// A closed room (x right, y down, z forward, metres) with a checkered floor,
// striped walls and a few pillars standing on the floor.
class Room {
 public:
  static constexpr double kFloor = 1.2, kCeiling = -2.4, kLeft = -4.0, kRight = 4.0, kBack = -3.0, kFront = 7.0;

  Room() {
    pillars_ = {{-2.2, -1.6, 3.0, 3.6, {0.85, 0.25, 0.2}},
                {0.9, 1.4, 4.2, 4.7, {0.2, 0.45, 0.85}},
                {2.4, 2.9, 1.0, 1.5, {0.9, 0.75, 0.15}},
                {-3.2, -2.7, -1.6, -1.1, {0.3, 0.75, 0.35}}};
  }

  const std::vector<PillarBox>& pillars() const { return pillars_; }

  Hit trace(const Eigen::Vector3d& d) const {
    Hit h;
    auto consider = [&](double t, SceneClass cls, const Eigen::Vector3d& rgb) {
      if (t > 1e-9 && t < h.t) {
        h.t = t;
        h.cls = cls;
        h.rgb = rgb;
      }
    };
    if (d.y() > 0) {
      const double t = kFloor / d.y();
      const Eigen::Vector3d p = t * d;
      const bool dark = (static_cast<int>(std::floor(p.x())) + static_cast<int>(std::floor(p.z()))) & 1;
      consider(t, Floor, dark ? Eigen::Vector3d(0.25, 0.22, 0.2) : Eigen::Vector3d(0.8, 0.78, 0.72));
    } else if (d.y() < 0) {
      const double t = kCeiling / d.y();
      const Eigen::Vector3d p = t * d;
      const double glow = 0.5 + 0.5 * std::cos(0.8 * p.x()) * std::cos(0.8 * p.z());
      consider(t, Ceiling, Eigen::Vector3d(0.75, 0.8, 0.9) * (0.8 + 0.2 * glow));
    }
    auto wall = [&](double t, double along) -> Eigen::Vector3d {
      const Eigen::Vector3d p = t * d;
      const bool stripe = static_cast<int>(std::floor(2.0 * along)) & 1;
      const double band = p.y() > 0.4 ? 0.7 : 1.0;
      return Eigen::Vector3d(stripe ? 0.55 : 0.62, stripe ? 0.5 : 0.6, stripe ? 0.42 : 0.5) * band;
    };
    if (d.x() > 0) consider(kRight / d.x(), Wall, wall(kRight / d.x(), (kRight / d.x()) * d.z()));
    if (d.x() < 0) consider(kLeft / d.x(), Wall, wall(kLeft / d.x(), (kLeft / d.x()) * d.z()));
    if (d.z() > 0) consider(kFront / d.z(), Wall, wall(kFront / d.z(), (kFront / d.z()) * d.x()));
    if (d.z() < 0) consider(kBack / d.z(), Wall, wall(kBack / d.z(), (kBack / d.z()) * d.x()));

    for (const auto& pl : pillars_) {
      // Slab test against the pillar's footprint, spanning floor to ceiling.
      double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
      int axis = -1;
      for (int a : {0, 2}) {
        const double lo = a == 0 ? pl.x0 : pl.z0, hi = a == 0 ? pl.x1 : pl.z1;
        if (std::abs(d[a]) < 1e-12) {
          if (0.0 < lo || 0.0 > hi) t0 = t1 + 1.0;
          continue;
        }
        double ta = lo / d[a], tb = hi / d[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
          t0 = ta;
          axis = a;
        }
        t1 = std::min(t1, tb);
      }
      if (t0 <= t1 && axis >= 0) {
        const double shade = axis == 0 ? 0.75 : 1.0;
        consider(t0, Pillar, pl.color * shade);
      }
    }
    return h;
  }

 private:
  std::vector<PillarBox> pillars_;
};

// Renders the room through `cam` with 3x3 supersampling for colour; labels
// come from the pixel centre. Pixels outside the camera's domain are black
// and labelled 255.
void render_fisheye(const Camera& cam, Tensor& image, LabelMap& labels) {
  const Room room;
  image = Tensor(1, 3, cam.height(), cam.width());
  labels = LabelMap(cam.width(), cam.height(), 255);
  parallel_for(0, static_cast<std::size_t>(cam.height()), [&](std::size_t yy) {
    const int v = static_cast<int>(yy);
    for (int u = 0; u < cam.width(); ++u) {
      if (!cam.in_domain(u, v)) continue;
      labels.at(u, v) = room.trace(cam.project_to_3d(u, v).normalized()).cls;
      Eigen::Vector3d acc(0, 0, 0);
      int n = 0;
      for (int sy = -1; sy <= 1; ++sy) {
        for (int sx = -1; sx <= 1; ++sx) {
          const double su = u + sx / 3.0, sv = v + sy / 3.0;
          if (!cam.in_domain(su, sv)) continue;
          acc += room.trace(cam.project_to_3d(su, sv).normalized()).rgb;
          ++n;
        }
      }
      acc /= n;
      for (int c = 0; c < 3; ++c) image.at(0, c, v, u) = static_cast<float>(std::round(255.0 * acc[c]));
    }
  });
}

// Sinusoidal gratings plus soft-edged rectangles, values in [0, 255].
Tensor textured_image(std::uint32_t seed, int w, int h) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double kTau = 2.0 * std::numbers::pi;
  Tensor t(1, 3, h, w);
  for (int c = 0; c < 3; ++c) {
    struct Wave { double fx, fy, phase, amp; };
    std::vector<Wave> waves;
    for (int i = 0; i < 6; ++i) {
      const double wavelength = 6.0 + 24.0 * unit(rng), angle = kTau * unit(rng);
      waves.push_back({std::cos(angle) / wavelength, std::sin(angle) / wavelength, kTau * unit(rng),
                       20.0 + 20.0 * unit(rng)});
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = 128.0;
        for (const auto& q : waves) v += q.amp * std::sin(kTau * (q.fx * x + q.fy * y) + q.phase);
        t.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 255.0));
      }
    }
  }
  for (int r = 0; r < 5; ++r) {
    const double x0 = unit(rng) * w, y0 = unit(rng) * h;
    const double x1 = x0 + 20.0 + 60.0 * unit(rng), y1 = y0 + 20.0 + 60.0 * unit(rng);
    const double col[3] = {255.0 * unit(rng), 255.0 * unit(rng), 255.0 * unit(rng)};
    auto soft = [](double d) { return 1.0 / (1.0 + std::exp(-d / 1.5)); };
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double a = soft(x - x0) * soft(x1 - x) * soft(y - y0) * soft(y1 - y);
        for (int c = 0; c < 3; ++c) {
          t.at(0, c, y, x) = static_cast<float>((1.0 - a) * t.at(0, c, y, x) + a * col[c]);
        }
      }
    }
  }
  for (auto& v : t.data()) v = std::round(v);
  return t;
}

void save_network_files(const fs::path& dir, const std::string& name, const NetworkSpec& spec,
                        std::uint32_t seed) {
  save_network(spec, (dir / (name + ".json")).string());
  save_weights(random_weights(spec, seed), (dir / (name + ".rcwt")).string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regenerate the sample data set"};
  std::string out = "data";
  app.add_option("--out", out, "output directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path root(out);
    for (const char* sub : {"networks", "images/perspective", "labels", "annotations", "cameras"}) {
      fs::create_directories(root / sub);
    }

    save_network_files(root / "networks", "segmenter", segmentation_network(4, 16), 2024);
    save_network_files(root / "networks", "probe", probe_network(), 7);

    // Half-resolution crop of the sample camera and a pinhole twin with the
    // same central focal length, for the warp-comparison experiment.
    CameraIntrinsics probe;
    probe.model = CameraModel::FisheyePoly4;
    probe.width = 320;
    probe.height = 240;
    probe.cx = 159.5;
    probe.cy = 119.5;
    probe.poly = {185.0, -5.0, 2.5, -0.5};
    save_camera((root / "cameras" / "fisheye_probe.json").string(), probe);
    CameraIntrinsics probe_pin = probe;
    probe_pin.model = CameraModel::Pinhole;
    probe_pin.poly = {0, 0, 0, 0};
    probe_pin.focal = 185.0;
    save_camera((root / "cameras" / "pinhole_probe.json").string(), probe_pin);

    for (int i = 0; i < 20; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "view_%02d.png", i);
      write_image((root / "images" / "perspective" / name).string(),
                  textured_image(1000 + static_cast<std::uint32_t>(i), 320, 240));
    }

    const Camera cam = load_camera((root / "cameras" / "fisheye_sample.json").string());
    Tensor image;
    LabelMap labels;
    render_fisheye(cam, image, labels);
    write_image((root / "images" / "fisheye_sample.png").string(), image);
    write_label_map((root / "labels" / "fisheye_sample.png").string(), labels);

    // One annotation point per visible pillar: the image of its axis at
    // mid-height. Reference detections are the pillar label components.
    PointSet points;
    auto& pts = points["fisheye_sample.png"];
    const Room room;
    for (const auto& pl : room.pillars()) {
      const Point3 centre(0.5 * (pl.x0 + pl.x1), 0.5 * (Room::kFloor + Room::kCeiling), 0.5 * (pl.z0 + pl.z1));
      const auto px = cam.try_project_to_2d(centre);
      if (!px) continue;
      const int u = static_cast<int>(std::lround(px->x())), v = static_cast<int>(std::lround(px->y()));
      if (u < 0 || v < 0 || u >= cam.width() || v >= cam.height() || labels.at(u, v) != Pillar) continue;
      pts.push_back({px->x(), px->y()});
    }
    write_points((root / "annotations" / "fisheye_sample_points.json").string(), points);
    DetectionSet dets;
    dets["fisheye_sample.png"] = component_boxes(labels, Pillar, 50);
    write_detections((root / "annotations" / "fisheye_sample_reference_boxes.json").string(), dets);

    std::cout << "wrote sample data to " << root.string() << " (" << pts.size() << " annotated pillars)\n";
  } catch (const Error& e) {
    std::cerr << "make_sample_data: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
