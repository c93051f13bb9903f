// rectconv: command-line front end.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
// Pixel values are scaled to [0, 1] before they reach a network.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rectconv/rectconv.hpp"

namespace fs = std::filesystem;
using namespace rectconv;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
      return kExitUsage;
    case ErrorCode::NonConvergence:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

// Collects per-file failures so a batch run can finish and still report them.
struct FailureLog {
  int code = kExitOk;
  int count = 0;
  void record(const std::string& what, const Error& e) {
    std::cerr << "rectconv: " << what << ": " << e.what() << "\n";
    if (code == kExitOk) code = exit_code_for(e.code());
    ++count;
  }
};

Tensor load_network_input(const std::string& path) {
  Tensor t = read_image(path);
  for (auto& v : t.data()) v /= 255.0f;
  return t;
}

std::vector<fs::path> list_images(const std::string& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".ppm" || ext == ".pgm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) fail(ErrorCode::Io, "no images in '" + dir + "'");
  return out;
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

Mask domain_mask(const Camera& cam) {
  Mask m(cam.width(), cam.height(), 0);
  for (int v = 0; v < cam.height(); ++v) {
    for (int u = 0; u < cam.width(); ++u) m.at(u, v) = cam.in_domain(u, v) ? 1 : 0;
  }
  return m;
}

double native_focal(const CameraIntrinsics& in) {
  return in.model == CameraModel::FisheyePoly4 ? in.poly[0] : in.focal;
}

// --- Shared option groups ----------------------------------------------------------------

struct ViewOptions {
  std::string kind = "perspective";
  double focal = 0.0;
  int width = 0;
  int height = 0;
  double yaw = 0.0;
  double pitch = 0.0;

  void add_to(CLI::App& app) {
    app.add_option("--projection", kind, "target projection")
        ->check(CLI::IsMember({"perspective", "cylindrical"}))
        ->capture_default_str();
    app.add_option("--focal", focal, "target focal length in pixels (default: camera's central focal length)");
    app.add_option("--out-width", width, "target width (default: camera width)");
    app.add_option("--out-height", height, "target height (default: camera height)");
    app.add_option("--yaw", yaw, "view yaw in degrees")->capture_default_str();
    app.add_option("--pitch", pitch, "view pitch in degrees")->capture_default_str();
  }

  Projection build(const CameraIntrinsics& cam, int default_w, int default_h) const {
    Projection p;
    p.kind = kind == "cylindrical" ? ProjectionKind::Cylindrical : ProjectionKind::Perspective;
    p.focal = focal > 0.0 ? focal : native_focal(cam);
    p.out_width = width > 0 ? width : default_w;
    p.out_height = height > 0 ? height : default_h;
    p.orientation = view_rotation(yaw * std::numbers::pi / 180.0, pitch * std::numbers::pi / 180.0);
    p.validate();
    return p;
  }
};

struct PatchOptions {
  int patches = 4;
  double fov = 0.0;
  double overlap = 16.0;
  void add_to(CLI::App& app) {
    app.add_option("--patches", patches, "number of perspective patches")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--patch-fov", fov, "minimum horizontal patch field of view in degrees (0 = tight)")
        ->capture_default_str();
    app.add_option("--overlap", overlap, "patch overlap band in pixels")->capture_default_str();
  }
};

// --- Pipelines ---------------------------------------------------------------------------------

enum class Method { Distorted, Rectify, Patches, RectConv };
constexpr Method kAllMethods[] = {Method::Distorted, Method::Rectify, Method::Patches, Method::RectConv};

const char* method_name(Method m) {
  switch (m) {
    case Method::Distorted: return "Conv(Distorted)";
    case Method::Rectify: return "Conv(Rectify)";
    case Method::Patches: return "Conv(Patches)";
    case Method::RectConv: return "RectConv";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "distorted") return Method::Distorted;
  if (s == "rectify") return Method::Rectify;
  if (s == "patches") return Method::Patches;
  if (s == "rectconv") return Method::RectConv;
  fail(ErrorCode::InvalidArgument, "unknown method '" + s + "'");
}

const auto kMethodCheck = CLI::IsMember({"distorted", "rectify", "patches", "rectconv"});

class Pipelines {
 public:
  Pipelines(const Bundle& b, const ViewOptions& view, const PatchOptions& patches)
      : cam_(b.camera),
        plain_(plain_network(b.spec), b.weights),
        converted_(b.spec, b.weights, b.fields),
        view_(view.build(b.camera, b.camera.width, b.camera.height)),
        patch_opts_(patches),
        domain_(domain_mask(cam_)) {}

  SegPrediction run(Method m, const Tensor& image) const {
    switch (m) {
      case Method::Distorted:
        return {plain_.run(image), domain_};
      case Method::RectConv:
        return {converted_.run(image), domain_};
      case Method::Rectify:
        return rectify_baseline(plain_, cam_, view_, image);
      case Method::Patches:
        if (!plan_) plan_ = make_patch_plan(cam_, patch_opts_.patches, patch_opts_.fov, patch_opts_.overlap);
        return patch_inference(plain_, cam_, image, *plan_);
    }
    fail(ErrorCode::InvalidArgument, "unknown method");
  }

  LabelMap labels(Method m, const Tensor& image, std::int32_t fill) const {
    const SegPrediction p = run(m, image);
    if (p.scores.h() != cam_.height() || p.scores.w() != cam_.width()) {
      fail(ErrorCode::ShapeMismatch, "network output is " + shape_string(p.scores) +
                                         "; label maps need an output at input resolution");
    }
    return argmax_labels(p.scores, p.valid, fill);
  }

  int classes() const {
    const auto geo = trace_geometry(plain_.spec(), 3, cam_.height(), cam_.width());
    for (std::size_t i = 0; i < geo.size(); ++i) {
      if (plain_.spec().nodes[i].kind == NodeKind::Output) return geo[i].channels;
    }
    fail(ErrorCode::Parse, "network has no output node");
  }

 private:
  Camera cam_;
  Executor plain_;
  Executor converted_;
  Projection view_;
  PatchOptions patch_opts_;
  Mask domain_;
  mutable std::optional<PatchPlan> plan_;
};

std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// Left-aligned first column, right-aligned numbers.
std::string table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out << "  ";
      if (c == 0) out << std::left; else out << std::right;
      out << std::setw(static_cast<int>(width[c])) << r[c];
    }
    out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  if (path.empty()) return;
  ensure_parent(path);
  write_text_atomic(path, j.dump(2) + "\n");
}

// --- offsets ----------------------------------------------------------------------------------

struct OffsetsCmd {
  std::string camera, output, visualize, background;
  int kernel = 3, dilation = 1, grid_stride = 8, spacing = 96, vis_dilation = 12;
  double scale = 1.0;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("offsets", "compute an offset field and optionally draw kernel footprints");
    c->add_option("--camera", camera, "camera JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--output", output, "RCOF output file")->required();
    c->add_option("--kernel", kernel, "kernel size (odd)")->capture_default_str();
    c->add_option("--dilation", dilation, "kernel dilation")->capture_default_str();
    c->add_option("--scale", scale, "feature-map scale relative to the image")->capture_default_str();
    c->add_option("--grid-stride", grid_stride, "lattice spacing in field pixels")->capture_default_str();
    c->add_option("--visualize", visualize, "PNG/PPM with kernel footprints drawn");
    c->add_option("--background", background, "image to draw on (default: mid grey)")->check(CLI::ExistingFile);
    c->add_option("--spacing", spacing, "footprint spacing in image pixels")->capture_default_str();
    c->add_option("--vis-dilation", vis_dilation, "tap spacing of the drawn footprints")->capture_default_str();
    c->callback([this] { run(); });
  }

  static void plot(Tensor& img, double x, double y, const float rgb[3]) {
    const int xi = static_cast<int>(std::lround(x)), yi = static_cast<int>(std::lround(y));
    if (xi < 0 || yi < 0 || xi >= img.w() || yi >= img.h()) return;
    for (int c = 0; c < 3; ++c) img.at(0, c, yi, xi) = rgb[c];
  }

  static void segment(Tensor& img, double x0, double y0, double x1, double y1, const float rgb[3]) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double t = static_cast<double>(i) / n;
      plot(img, x0 + t * (x1 - x0), y0 + t * (y1 - y0), rgb);
    }
  }

  void run() const {
    const Camera cam = load_camera(camera);
    const int h = std::max(1, static_cast<int>(std::lround(cam.height() * scale)));
    const int w = std::max(1, static_cast<int>(std::lround(cam.width() * scale)));
    const OffsetField field = compute_offset_field(cam, kernel, dilation, scale, grid_stride, h, w);
    ensure_parent(output);
    save_field(field, output);
    std::cout << "field " << field.out_width() << "x" << field.out_height() << " K=" << kernel
              << " dilation=" << dilation << " scale=" << scale << " lattice " << field.lattice_width() << "x"
              << field.lattice_height() << ", clamped taps " << field.clamped_taps << "\n";
    if (visualize.empty()) return;

    Tensor img;
    if (!background.empty()) {
      img = read_image(background);
      if (img.c() == 1) {
        Tensor rgb(1, 3, img.h(), img.w());
        for (int c = 0; c < 3; ++c) std::copy(img.plane(0, 0).begin(), img.plane(0, 0).end(), rgb.plane(0, c).begin());
        img = std::move(rgb);
      }
      if (img.w() != cam.width() || img.h() != cam.height()) {
        fail(ErrorCode::ShapeMismatch, "background must match the camera size");
      }
    } else {
      img = Tensor(1, 3, cam.height(), cam.width());
      std::fill(img.data().begin(), img.data().end(), 128.0f);
    }
    const float blue[3] = {40, 90, 255}, green[3] = {30, 220, 60};
    const int k = kernel, c0 = (k - 1) / 2;
    for (int v = spacing / 2; v < cam.height(); v += spacing) {
      for (int u = spacing / 2; u < cam.width(); u += spacing) {
        if (!cam.in_domain(u, v)) continue;
        KernelOffsets off;
        try {
          off = kernel_offsets_at(cam, u, v, k, vis_dilation, 1.0, ClampPolicy::Throw);
        } catch (const Error&) {
          continue;  // footprint leaves the field of view
        }
        auto tap = [&](int r, int c) {
          return std::pair{u + (c - c0) * vis_dilation + off.du(r, c), v + (r - c0) * vis_dilation + off.dv(r, c)};
        };
        for (int r = 0; r < k; ++r) {
          for (int c = 0; c < k; ++c) {
            auto [x, y] = tap(r, c);
            if (c + 1 < k) {
              auto [x2, y2] = tap(r, c + 1);
              segment(img, x, y, x2, y2, blue);
            }
            if (r + 1 < k) {
              auto [x2, y2] = tap(r + 1, c);
              segment(img, x, y, x2, y2, blue);
            }
          }
        }
        for (int r = 0; r < k; ++r) {
          for (int c = 0; c < k; ++c) {
            auto [x, y] = tap(r, c);
            for (int dy = -1; dy <= 1; ++dy) {
              for (int dx = -1; dx <= 1; ++dx) plot(img, x + dx, y + dy, green);
            }
          }
        }
      }
    }
    ensure_parent(visualize);
    write_image(visualize, img);
  }
};

// --- rectify / distort ------------------------------------------------------------------------------

struct RectifyCmd {
  std::string camera, image, output, mask;
  bool mark_invalid = false;
  ViewOptions view;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("rectify", "resample a camera image into a perspective or cylindrical view");
    c->add_option("--camera", camera, "camera JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--image", image, "camera image")->required()->check(CLI::ExistingFile);
    c->add_option("--output", output, "output image")->required();
    c->add_option("--mask", mask, "write the valid-pixel mask here");
    c->add_flag("--mark-invalid", mark_invalid, "paint pixels without a source red");
    view.add_to(*c);
    c->callback([this] { run(); });
  }

  void run() const {
    const Camera cam = load_camera(camera);
    const Projection proj = view.build(cam.intrinsics(), cam.width(), cam.height());
    Resampled r = rectify_image(cam, proj, read_image(image));
    if (mark_invalid) {
      if (r.image.c() != 3) fail(ErrorCode::ShapeMismatch, "--mark-invalid needs an RGB image");
      for (int y = 0; y < r.image.h(); ++y) {
        for (int x = 0; x < r.image.w(); ++x) {
          if (r.valid.at(x, y)) continue;
          r.image.at(0, 0, y, x) = 255.0f;
          r.image.at(0, 1, y, x) = 0.0f;
          r.image.at(0, 2, y, x) = 0.0f;
        }
      }
    }
    ensure_parent(output);
    write_image(output, r.image);
    if (!mask.empty()) {
      ensure_parent(mask);
      write_mask(mask, r.valid);
    }
    const std::size_t invalid = r.valid.valid.size() - r.valid.count_valid();
    std::cout << "wrote " << proj.out_width << "x" << proj.out_height << " view, " << invalid
              << " pixels without a source\n";
  }
};

struct DistortCmd {
  std::string camera, image, output, mask;
  ViewOptions view;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("distort", "warp a perspective or cylindrical view into the camera");
    c->add_option("--camera", camera, "camera JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--image", image, "source view image")->required()->check(CLI::ExistingFile);
    c->add_option("--output", output, "output camera image")->required();
    c->add_option("--mask", mask, "write the valid-pixel mask here");
    view.add_to(*c);
    c->callback([this] { run(); });
  }

  void run() const {
    const Camera cam = load_camera(camera);
    const Tensor src = read_image(image);
    const Projection proj = view.build(cam.intrinsics(), src.w(), src.h());
    const Resampled r = distort_image(cam, proj, src);
    ensure_parent(output);
    write_image(output, r.image);
    if (!mask.empty()) {
      ensure_parent(mask);
      write_mask(mask, r.valid);
    }
    std::cout << "wrote " << cam.width() << "x" << cam.height() << " camera image, " << r.valid.count_valid()
              << " pixels with a source\n";
  }
};

// --- convert ----------------------------------------------------------------------------------------------

struct ConvertCmd {
  std::string network, weights, camera, output;
  int grid_stride = 8, input_height = 0, input_width = 0;
  bool no_backbone = false, no_head = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("convert", "convert a network for a camera and write a bundle");
    c->add_option("--network", network, "network JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--weights", weights, "RCWT weights")->required()->check(CLI::ExistingFile);
    c->add_option("--camera", camera, "camera JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--output", output, "bundle directory")->required();
    c->add_option("--grid-stride", grid_stride, "offset lattice spacing in input pixels")->capture_default_str();
    c->add_option("--input-height", input_height, "input height (default: camera height)");
    c->add_option("--input-width", input_width, "input width (default: camera width)");
    c->add_flag("--no-backbone", no_backbone, "keep backbone convolutions unchanged");
    c->add_flag("--no-head", no_head, "keep head convolutions unchanged");
    c->callback([this] { run(); });
  }

  void run() const {
    Bundle b;
    const NetworkSpec spec = load_network(network);
    b.weights = load_weights(weights, spec);
    b.camera = load_camera_intrinsics(camera);
    const Camera cam(b.camera);
    ConvertOptions o;
    o.convert_backbone = !no_backbone;
    o.convert_head = !no_head;
    o.grid_stride = grid_stride;
    o.input_height = input_height > 0 ? input_height : cam.height();
    o.input_width = input_width > 0 ? input_width : cam.width();
    Conversion conv = convert_to_rectconv(spec, b.weights, cam, o);
    b.spec = conv.spec;
    b.fields = conv.fields;
    b.convert_backbone = o.convert_backbone;
    b.convert_head = o.convert_head;
    b.grid_stride = grid_stride;
    save_bundle(b, output);

    std::vector<std::vector<std::string>> rows;
    for (const auto& r : conv.report) {
      rows.push_back({r.node, std::to_string(r.kernel_k) + "x" + std::to_string(r.kernel_k), fixed(r.scale, 4),
                      r.shared ? "shared" : "unique", r.field_key});
    }
    if (rows.empty()) {
      std::cout << "no layers converted\n";
    } else {
      std::cout << table({"layer", "kernel", "scale", "field", "key"}, rows);
      std::cout << rows.size() << " layers converted, " << conv.fields.fields.size() << " offset fields\n";
    }
    std::cout << "bundle written to " << output << "\n";
  }
};

// --- infer ---------------------------------------------------------------------------------------------------

struct InferCmd {
  std::string bundle, image, input_dir, output, output_dir, method = "rectconv";
  int fill = 255;
  ViewOptions view;
  PatchOptions patches;
  FailureLog* failures = nullptr;

  void add(CLI::App& app, FailureLog& log) {
    failures = &log;
    auto* c = app.add_subcommand("infer", "run a bundle on images and write per-pixel class labels");
    c->add_option("--bundle", bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
    auto* img = c->add_option("--image", image, "single input image")->check(CLI::ExistingFile);
    auto* dir = c->add_option("--input-dir", input_dir, "directory of input images")->check(CLI::ExistingDirectory);
    auto* out = c->add_option("--output", output, "label map output (with --image)");
    auto* out_dir = c->add_option("--output-dir", output_dir, "label map directory (with --input-dir)");
    img->excludes(dir);
    img->needs(out);
    dir->needs(out_dir);
    c->add_option("--method", method, "pipeline")->check(kMethodCheck)->capture_default_str();
    c->add_option("--fill", fill, "label for pixels without a prediction")->capture_default_str();
    view.add_to(*c);
    patches.add_to(*c);
    c->callback([this, c] {
      if (image.empty() && input_dir.empty()) throw CLI::RequiredError("--image or --input-dir");
      run();
    });
  }

  void run() const {
    const Bundle b = load_bundle(bundle);
    const Pipelines pipes(b, view, patches);
    const Method m = parse_method(method);
    std::vector<std::pair<std::string, std::string>> jobs;
    if (!image.empty()) {
      jobs.emplace_back(image, output);
    } else {
      for (const auto& p : list_images(input_dir)) {
        jobs.emplace_back(p.string(), (fs::path(output_dir) / p.filename().replace_extension(".png")).string());
      }
    }
    int done = 0;
    for (const auto& [in, out] : jobs) {
      try {
        const LabelMap labels = pipes.labels(m, load_network_input(in), fill);
        ensure_parent(out);
        write_label_map(out, labels);
        ++done;
      } catch (const Error& e) {
        failures->record(in, e);
      }
    }
    std::cout << method_name(m) << ": " << done << " of " << jobs.size() << " images labelled\n";
  }
};

// --- eval-seg ----------------------------------------------------------------------------------------------

struct EvalSegCmd {
  std::string pred_dir, gt_dir, bundle, image_dir, json;
  std::vector<std::string> methods;
  int classes = 0, ignore = 255;
  ViewOptions view;
  PatchOptions patches;
  FailureLog* failures = nullptr;

  void add(CLI::App& app, FailureLog& log) {
    failures = &log;
    auto* c = app.add_subcommand("eval-seg", "segmentation MIOU and pixel accuracy");
    c->add_option("--gt-dir", gt_dir, "ground-truth label maps")->required()->check(CLI::ExistingDirectory);
    auto* pred = c->add_option("--pred-dir", pred_dir, "predicted label maps (same file names)")
                     ->check(CLI::ExistingDirectory);
    auto* bun = c->add_option("--bundle", bundle, "bundle to run")->check(CLI::ExistingDirectory);
    auto* imgs = c->add_option("--image-dir", image_dir, "camera images to run the bundle on")
                     ->check(CLI::ExistingDirectory);
    pred->excludes(bun);
    bun->needs(imgs);
    c->add_option("--methods", methods, "pipelines to evaluate (default: all)")->check(kMethodCheck)->delimiter(',');
    c->add_option("--classes", classes, "number of classes (default: from the network, or max label + 1)");
    c->add_option("--ignore", ignore, "ignored ground-truth label")->capture_default_str();
    c->add_option("--json", json, "also write results as JSON");
    view.add_to(*c);
    patches.add_to(*c);
    c->callback([this] {
      if (pred_dir.empty() == bundle.empty()) throw CLI::RequiredError("exactly one of --pred-dir or --bundle");
      run();
    });
  }

  struct Row {
    std::string name;
    std::optional<ConfusionMatrix> cm;
  };

  void run() const {
    std::vector<Row> rows;
    if (!pred_dir.empty()) {
      rows.push_back({"Predictions", std::nullopt});
      int n = classes;
      std::vector<std::pair<LabelMap, LabelMap>> maps;
      for (const auto& gt_path : list_images(gt_dir)) {
        const fs::path pred_path = fs::path(pred_dir) / gt_path.filename();
        try {
          maps.emplace_back(read_label_map(gt_path.string()), read_label_map(pred_path.string()));
          if (classes <= 0) {
            for (const auto* m : {&maps.back().first, &maps.back().second}) {
              for (auto l : m->labels) {
                if (l != ignore) n = std::max(n, l + 1);
              }
            }
          }
        } catch (const Error& e) {
          failures->record(pred_path.string(), e);
        }
      }
      ConfusionMatrix cm(std::max(n, 1), ignore);
      for (const auto& [gt, pred] : maps) {
        try {
          cm = accumulate(std::move(cm), gt, pred);
        } catch (const Error& e) {
          failures->record("label maps", e);
        }
      }
      rows.back().cm = std::move(cm);
    } else {
      const Bundle b = load_bundle(bundle);
      const Pipelines pipes(b, view, patches);
      const int n = classes > 0 ? classes : pipes.classes();
      std::vector<Method> selected;
      for (Method m : kAllMethods) {
        if (methods.empty()) {
          selected.push_back(m);
          continue;
        }
        for (const auto& s : methods) {
          if (parse_method(s) == m) selected.push_back(m);
        }
      }
      std::vector<ConfusionMatrix> cms(selected.size(), ConfusionMatrix(n, ignore));
      for (const auto& img_path : list_images(image_dir)) {
        const fs::path gt_path = fs::path(gt_dir) / img_path.filename().replace_extension(".png");
        try {
          const Tensor img = load_network_input(img_path.string());
          const LabelMap gt = read_label_map(gt_path.string());
          for (std::size_t i = 0; i < selected.size(); ++i) {
            cms[i] = accumulate(std::move(cms[i]), gt, pipes.labels(selected[i], img, ignore));
          }
        } catch (const Error& e) {
          failures->record(img_path.string(), e);
        }
      }
      for (std::size_t i = 0; i < selected.size(); ++i) rows.push_back({method_name(selected[i]), cms[i]});
    }

    std::vector<std::vector<std::string>> cells;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      try {
        const double mi = miou(*r.cm), acc = pixel_accuracy(*r.cm);
        cells.push_back({r.name, fixed(mi), fixed(acc)});
        j.push_back({{"method", r.name}, {"miou", mi}, {"pixel_accuracy", acc}, {"pixels", r.cm->total()}});
      } catch (const Error& e) {
        failures->record(r.name, e);
        cells.push_back({r.name, "-", "-"});
      }
    }
    std::cout << table({"Method", "MIOU", "Accuracy"}, cells);
    write_json(json, j);
  }
};

// --- eval-det ---------------------------------------------------------------------------------------------------

struct EvalDetCmd {
  std::string pred, gt, bundle, image_dir, json;
  std::vector<std::string> methods;
  double threshold = 0.5;
  int class_id = 0, min_pixels = 50;
  ViewOptions view;
  PatchOptions patches;
  FailureLog* failures = nullptr;

  void add(CLI::App& app, FailureLog& log) {
    failures = &log;
    auto* c = app.add_subcommand("eval-det", "point-annotated detection precision, recall and F1");
    c->add_option("--gt", gt, "point annotations JSON")->required()->check(CLI::ExistingFile);
    auto* p = c->add_option("--pred", pred, "detections JSON")->check(CLI::ExistingFile);
    auto* bun = c->add_option("--bundle", bundle, "bundle whose segmentation is turned into boxes")
                    ->check(CLI::ExistingDirectory);
    auto* imgs = c->add_option("--image-dir", image_dir, "camera images")->check(CLI::ExistingDirectory);
    p->excludes(bun);
    bun->needs(imgs);
    c->add_option("--methods", methods, "pipelines to evaluate (default: all)")->check(kMethodCheck)->delimiter(',');
    c->add_option("--threshold", threshold, "minimum detection score")->capture_default_str();
    c->add_option("--class-id", class_id, "class whose connected regions become detections")->capture_default_str();
    c->add_option("--min-pixels", min_pixels, "smallest region kept as a detection")->capture_default_str();
    c->add_option("--json", json, "also write results as JSON");
    view.add_to(*c);
    patches.add_to(*c);
    c->callback([this] {
      if (pred.empty() == bundle.empty()) throw CLI::RequiredError("exactly one of --pred or --bundle");
      run();
    });
  }

  void run() const {
    const PointSet points = read_points(gt);
    std::vector<std::pair<std::string, DetectionSet>> rows;
    if (!pred.empty()) {
      rows.emplace_back("Predictions", read_detections(pred));
    } else {
      const Bundle b = load_bundle(bundle);
      const Pipelines pipes(b, view, patches);
      std::vector<Method> selected;
      for (Method m : kAllMethods) {
        bool take = methods.empty();
        for (const auto& s : methods) take = take || parse_method(s) == m;
        if (take) selected.push_back(m);
      }
      for (Method m : selected) rows.emplace_back(method_name(m), DetectionSet{});
      for (const auto& [name, pts] : points) {
        const fs::path img_path = fs::path(image_dir) / name;
        try {
          const Tensor img = load_network_input(img_path.string());
          for (std::size_t i = 0; i < selected.size(); ++i) {
            const LabelMap labels = pipes.labels(selected[i], img, -1);
            rows[i].second[name] = component_boxes(labels, class_id, static_cast<std::size_t>(min_pixels));
          }
        } catch (const Error& e) {
          failures->record(img_path.string(), e);
        }
      }
    }

    std::vector<std::vector<std::string>> cells;
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& [name, dets] : rows) {
      std::vector<std::vector<BoxDet>> pv;
      std::vector<std::vector<PointGT>> gv;
      for (const auto& [img, pts] : points) {
        gv.push_back(pts);
        auto it = dets.find(img);
        pv.push_back(it == dets.end() ? std::vector<BoxDet>{} : it->second);
      }
      for (const auto& [img, boxes] : dets) {
        if (!points.count(img)) {
          gv.emplace_back();
          pv.push_back(boxes);
        }
      }
      const DetectionScore s = point_detection_prf(pv, gv, threshold);
      cells.push_back({name, fixed(s.precision), fixed(s.recall), fixed(s.f1)});
      j.push_back({{"method", name}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1},
                   {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}});
    }
    std::cout << table({"Method", "Precision", "Recall", "F1"}, cells);
    write_json(json, j);
  }
};

// --- bias ----------------------------------------------------------------------------------------------------

struct BiasCmd {
  std::string network, weights, camera, image_dir, csv, json;
  double focal = 0.0;
  int grid_stride = 8, bins = 64;
  FailureLog* failures = nullptr;

  void add(CLI::App& app, FailureLog& log) {
    failures = &log;
    auto* c = app.add_subcommand(
        "bias", "compare a network on perspective images with its converted form on the same images warped "
                "into the camera");
    c->add_option("--network", network, "network JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--weights", weights, "RCWT weights")->required()->check(CLI::ExistingFile);
    c->add_option("--camera", camera, "camera JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--image-dir", image_dir, "perspective images")->required()->check(CLI::ExistingDirectory);
    c->add_option("--focal", focal, "focal length of the perspective images (default: camera's central focal length)");
    c->add_option("--grid-stride", grid_stride, "offset lattice spacing")->capture_default_str();
    c->add_option("--bins", bins, "histogram bins")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--csv", csv, "histogram pair CSV");
    c->add_option("--json", json, "statistics JSON");
    c->callback([this] { run(); });
  }

  void run() const {
    const NetworkSpec spec = load_network(network);
    const WeightStore w = load_weights(weights, spec);
    const CameraIntrinsics ci = load_camera_intrinsics(camera);
    const Camera cam(ci);
    ConvertOptions o;
    o.grid_stride = grid_stride;
    o.input_height = cam.height();
    o.input_width = cam.width();
    const Conversion conv = convert_to_rectconv(spec, w, cam, o);
    const Executor plain(spec, w), converted(conv.spec, w, conv.fields);

    std::vector<double> a, b;
    std::size_t images = 0;
    for (const auto& path : list_images(image_dir)) {
      try {
        const Tensor img = load_network_input(path.string());
        Projection proj;
        proj.focal = focal > 0.0 ? focal : native_focal(ci);
        proj.out_width = img.w();
        proj.out_height = img.h();
        const WarpPairs p = warp_pairs(plain, converted, cam, proj, img);
        a.insert(a.end(), p.a.begin(), p.a.end());
        b.insert(b.end(), p.b.begin(), p.b.end());
        ++images;
      } catch (const Error& e) {
        failures->record(path.string(), e);
      }
    }
    const DistributionShift shift = distribution_shift(a, b, bins);
    const PairedAgreement agree = paired_agreement(a, b);
    std::cout << "images " << images << ", paired outputs " << a.size() << "\n"
              << table({"statistic", "value"},
                       {{"mean_shift", fixed(shift.mean_shift, 6)},
                        {"median_shift", fixed(shift.median_shift, 6)},
                        {"ks_statistic", fixed(shift.ks_statistic, 6)},
                        {"median_abs_diff", fixed(agree.median_abs_error, 6)},
                        {"iqr_reference", fixed(agree.iqr_a, 6)},
                        {"spearman", fixed(agree.spearman, 6)}});
    if (!csv.empty()) {
      ensure_parent(csv);
      write_text_atomic(csv, shift.histograms.to_csv());
    }
    nlohmann::ordered_json j;
    j["images"] = images;
    j["pairs"] = a.size();
    j["mean_shift"] = shift.mean_shift;
    j["median_shift"] = shift.median_shift;
    j["ks_statistic"] = shift.ks_statistic;
    j["median_abs_diff"] = agree.median_abs_error;
    j["iqr_reference"] = agree.iqr_a;
    j["spearman"] = agree.spearman;
    write_json(json, j);
  }
};

// --- bench -----------------------------------------------------------------------------------------------------

struct BenchCmd {
  std::string bundle, image, json;
  BenchOptions opt;
  PatchOptions patches;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("bench", "time the plain, patch-based and converted pipelines");
    c->add_option("--bundle", bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
    c->add_option("--image", image, "camera image")->required()->check(CLI::ExistingFile);
    c->add_option("--warmup", opt.warmup, "untimed runs per method")->check(CLI::NonNegativeNumber)->capture_default_str();
    c->add_option("--repeats", opt.repeats, "timed runs per method")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--json", json, "also write timings as JSON");
    patches.add_to(*c);
    c->callback([this] { run(); });
  }

  void run() {
    opt.patches = patches.patches;
    opt.patch_fov_deg = patches.fov;
    opt.overlap = patches.overlap;
    const Bundle b = load_bundle(bundle);
    const BenchResult r = run_benchmark(b, load_network_input(image), opt);
    std::cout << r.summary() << "\n";
    nlohmann::ordered_json j;
    j["warmup"] = opt.warmup;
    j["repeats"] = opt.repeats;
    j["patches"] = r.patch_count;
    for (const auto* t : {&r.distorted, &r.patches, &r.rectconv}) {
      j["methods"].push_back({{"method", t->method}, {"mean_seconds", t->mean()}, {"seconds", t->seconds}});
    }
    write_json(json, j);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fisheye-aware convolution toolkit"};
  app.set_help_flag("--help", "print this help message and exit");
  app.require_subcommand(1);
  app.set_version_flag("--version", "rectconv 0.1.0");

  FailureLog failures;
  OffsetsCmd offsets;
  RectifyCmd rectify;
  DistortCmd distort;
  ConvertCmd convert;
  InferCmd infer;
  EvalSegCmd eval_seg;
  EvalDetCmd eval_det;
  BiasCmd bias;
  BenchCmd bench;
  offsets.add(app);
  rectify.add(app);
  distort.add(app);
  convert.add(app);
  infer.add(app, failures);
  eval_seg.add(app, failures);
  eval_det.add(app, failures);
  bias.add(app, failures);
  bench.add(app);

  if (const char* env = std::getenv("RECTCONV_NUM_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*env == '\0' || *end != '\0' || n < 1) {
      std::cerr << "rectconv: RECTCONV_NUM_THREADS must be a positive integer, got '" << env << "'\n";
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const Error& e) {
    std::cerr << "rectconv: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "rectconv: " << e.what() << "\n";
    return kExitData;
  }
  if (failures.count > 0) {
    std::cerr << "rectconv: " << failures.count << " item(s) failed\n";
    return failures.code;
  }
  return kExitOk;
}
