#include "gpc/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace gpc {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

[[noreturn]] void malformed(const fs::path& path, int line_no, const std::string& why) {
  throw Error(ErrorKind::MalformedRow, fmt::format("{}:{}: {}", path.string(), line_no, why));
}

std::vector<Point> parse_landmarks(const std::string& text, const fs::path& path, int line_no) {
  std::vector<Point> pts;
  if (text.empty()) return pts;
  for (const auto& pair : split_fields(text, ';')) {
    auto xy = split_fields(pair, ',');
    if (xy.size() != 2) malformed(path, line_no, "landmark '" + pair + "' is not an x,y pair");
    try {
      std::size_t used_x = 0, used_y = 0;
      Point p{std::stod(xy[0], &used_x), std::stod(xy[1], &used_y)};
      if (used_x != xy[0].size() || used_y != xy[1].size()) throw std::invalid_argument("trailing");
      pts.push_back(p);
    } catch (const std::logic_error&) {
      malformed(path, line_no, "landmark '" + pair + "' is not numeric");
    }
  }
  return pts;
}

constexpr double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

}  // namespace

std::vector<SampleRecord> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());

  const fs::path base = path.parent_path();
  std::vector<SampleRecord> records;
  std::string line;
  int line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen) {
      header_seen = true;
      if (line.rfind("image_path", 0) != 0) malformed(path, line_no, "missing header row");
      continue;
    }
    auto f = split_fields(line, '\t');
    if (f.size() < 5 || f.size() > 6) malformed(path, line_no, fmt::format("expected 5 or 6 fields, got {}", f.size()));

    SampleRecord r;
    r.image_path = fs::path(f[0]);
    if (r.image_path.empty()) malformed(path, line_no, "empty image_path");
    if (r.image_path.is_relative()) r.image_path = base / r.image_path;
    r.subject_id = f[1];
    if (r.subject_id.empty()) malformed(path, line_no, "empty subject_id");

    int code = 0;
    try {
      std::size_t used = 0;
      code = std::stoi(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::logic_error&) {
      malformed(path, line_no, "zone_code '" + f[2] + "' is not an integer");
    }
    r.zone = zone_from_code(code);

    if (f[3] == "day") r.condition.lighting = Lighting::Day;
    else if (f[3] == "night") r.condition.lighting = Lighting::Night;
    else malformed(path, line_no, "lighting must be day|night");

    if (f[4] == "wg") r.condition.eyewear = Eyewear::WithGlasses;
    else if (f[4] == "ng") r.condition.eyewear = Eyewear::WithoutGlasses;
    else malformed(path, line_no, "eyewear must be wg|ng");

    if (f.size() == 6) r.landmarks = parse_landmarks(f[5], path, line_no);
    records.push_back(std::move(r));
  }
  if (!header_seen) malformed(path, line_no, "missing header row");
  return records;
}

void write_manifest(const fs::path& path, std::span<const SampleRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << "image_path\tsubject_id\tzone_code\tlighting\teyewear\tlandmarks\n";
  for (const auto& r : records) {
    out << r.image_path.generic_string() << '\t' << r.subject_id << '\t' << zone_code(r.zone) << '\t'
        << (r.condition.lighting == Lighting::Day ? "day" : "night") << '\t'
        << (r.condition.eyewear == Eyewear::WithGlasses ? "wg" : "ng") << '\t';
    for (std::size_t i = 0; i < r.landmarks.size(); ++i) {
      if (i) out << ';';
      out << fmt::format("{},{}", r.landmarks[i].x, r.landmarks[i].y);
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::IoError, "short write to " + path.string());
}

SplitRecords split_by_subject(std::span<const SampleRecord> records, const std::map<std::string, Split>& assignment) {
  SplitRecords out;
  for (const auto& r : records) {
    auto it = assignment.find(r.subject_id);
    if (it == assignment.end()) throw Error(ErrorKind::UnassignedSubject, r.subject_id);
    switch (it->second) {
      case Split::Train: out.train.push_back(r); break;
      case Split::Val: out.val.push_back(r); break;
      case Split::Test: out.test.push_back(r); break;
    }
  }
  return out;
}

cv::Rect eye_crop_box(cv::Size frame, std::span<const Point> landmarks, CropMargins margin) {
  if (landmarks.empty()) throw Error(ErrorKind::DegenerateLandmarks, "no landmarks");
  double x0 = landmarks[0].x, x1 = x0, y0 = landmarks[0].y, y1 = y0;
  for (const auto& p : landmarks) {
    if (!(p.x >= 0 && p.y >= 0 && p.x < frame.width && p.y < frame.height)) {
      throw Error(ErrorKind::OutOfBounds, fmt::format("landmark ({}, {}) outside {}x{} frame", p.x, p.y,
                                                      frame.width, frame.height));
    }
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  if (x0 == x1 && y0 == y1) throw Error(ErrorKind::DegenerateLandmarks, "all landmarks coincide");

  const double mx = margin.fraction * (x1 - x0);
  const double my = margin.fraction * (y1 - y0);
  const int left = std::max(0, static_cast<int>(std::floor(x0 - mx)));
  const int top = std::max(0, static_cast<int>(std::floor(y0 - my)));
  const int right = std::min(frame.width, std::max(left + 1, static_cast<int>(std::ceil(x1 + mx))));
  const int bottom = std::min(frame.height, std::max(top + 1, static_cast<int>(std::ceil(y1 + my))));
  return {left, top, right - left, bottom - top};
}

cv::Mat crop_eye_region(const cv::Mat& frame, std::span<const Point> landmarks, CropMargins margin) {
  if (frame.empty()) throw Error(ErrorKind::EmptyImage, "empty frame");
  const cv::Rect box = eye_crop_box(frame.size(), landmarks, margin);
  cv::Mat roi = frame(box);
  const int side = std::max(box.width, box.height);
  const int pad_x = side - box.width;
  const int pad_y = side - box.height;
  cv::Mat out;
  cv::copyMakeBorder(roi, out, pad_y / 2, pad_y - pad_y / 2, pad_x / 2, pad_x - pad_x / 2, cv::BORDER_REPLICATE);
  return out;
}

cv::Mat equalize_adaptive(const cv::Mat& crop, ClaheParams params) {
  if (crop.empty()) throw Error(ErrorKind::EmptyImage, "equalize_adaptive on empty image");
  const int ch = crop.channels();
  if (ch != 1 && ch != 3) throw Error(ErrorKind::BadChannelRequest, fmt::format("{} channels", ch));

  const bool is_float = crop.depth() == CV_32F || crop.depth() == CV_64F;
  cv::Mat u8;
  if (is_float) crop.convertTo(u8, CV_8U, 255.0);
  else if (crop.depth() == CV_8U) u8 = crop;
  else throw Error(ErrorKind::BadImage, "unsupported pixel depth");

  auto clahe = cv::createCLAHE(params.clip_limit, cv::Size(params.tiles, params.tiles));
  cv::Mat eq;
  if (ch == 1) {
    clahe->apply(u8, eq);
  } else {
    cv::Mat lab;
    cv::cvtColor(u8, lab, cv::COLOR_BGR2Lab);
    std::vector<cv::Mat> planes;
    cv::split(lab, planes);
    clahe->apply(planes[0], planes[0]);
    cv::merge(planes, lab);
    cv::cvtColor(lab, eq, cv::COLOR_Lab2BGR);
  }
  if (!is_float) return eq;
  cv::Mat back;
  eq.convertTo(back, crop.depth(), 1.0 / 255.0);
  return back;
}

torch::Tensor to_model_input(const cv::Mat& img, int channels, int size) {
  if (channels != 1 && channels != 3) {
    throw Error(ErrorKind::BadChannelRequest, fmt::format("channels must be 1 or 3, got {}", channels));
  }
  if (img.empty()) throw Error(ErrorKind::EmptyImage, "to_model_input on empty image");
  if (img.channels() != 1 && img.channels() != 3) {
    throw Error(ErrorKind::BadChannelRequest, fmt::format("input has {} channels", img.channels()));
  }

  cv::Mat f;
  if (img.depth() == CV_8U) img.convertTo(f, CV_32F, 1.0 / 127.5, -1.0);
  else if (img.depth() == CV_32F || img.depth() == CV_64F) img.convertTo(f, CV_32F, 2.0, -1.0);
  else throw Error(ErrorKind::BadImage, "unsupported pixel depth");

  if (f.channels() == 3 && channels == 1) cv::cvtColor(f, f, cv::COLOR_BGR2GRAY);
  else if (f.channels() == 1 && channels == 3) cv::cvtColor(f, f, cv::COLOR_GRAY2BGR);

  if (f.rows != size || f.cols != size) {
    cv::Mat r;
    const bool shrink = size < f.cols || size < f.rows;
    cv::resize(f, r, cv::Size(size, size), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
    f = r;
  }
  cv::min(f, 1.0, f);
  cv::max(f, -1.0, f);
  if (!f.isContinuous()) f = f.clone();

  auto t = torch::from_blob(f.data, {size, size, channels}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous();
}

cv::Mat to_image8(const torch::Tensor& pixels) {
  TORCH_CHECK(pixels.dim() == 3, "expected C x H x W");
  auto hwc = pixels.detach().to(torch::kFloat32).permute({1, 2, 0}).contiguous();
  const int h = static_cast<int>(hwc.size(0)), w = static_cast<int>(hwc.size(1)), c = static_cast<int>(hwc.size(2));
  cv::Mat f(h, w, CV_32FC(c), hwc.data_ptr<float>());
  cv::Mat out;
  f.convertTo(out, CV_8U, 127.5, 127.5);
  return out;
}

cv::Mat read_image(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::MissingFile, path.string());
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw Error(ErrorKind::BadImage, "cannot decode " + path.string());
  if (img.depth() != CV_8U) throw Error(ErrorKind::BadImage, "not an 8-bit image: " + path.string());
  if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2BGR);
  if (img.channels() != 1 && img.channels() != 3) throw Error(ErrorKind::BadImage, path.string());
  return img;
}

EyeImage preprocess_record(const SampleRecord& record, const PreprocessOptions& opts) {
  cv::Mat img = read_image(record.image_path);
  if (!record.landmarks.empty()) img = crop_eye_region(img, record.landmarks);
  if (opts.equalize) img = equalize_adaptive(img, opts.clahe);
  EyeImage out;
  out.pixels = to_model_input(img, opts.channels, opts.size);
  out.domain = domain_of(record.condition.eyewear);
  out.zone = record.zone;
  out.subject_id = record.subject_id;
  out.lighting = record.condition.lighting;
  return out;
}

EyeImage preprocess_eye(const EyeImage& raw, const PreprocessOptions& opts) {
  cv::Mat img = to_image8(raw.pixels);
  if (opts.equalize) img = equalize_adaptive(img, opts.clahe);
  EyeImage out = raw;
  out.pixels = to_model_input(img, opts.channels, opts.size);
  return out;
}

// ---- synthetic eyes -------------------------------------------------------

double SyntheticSpec::min_center_separation() const {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kNumZones; ++i)
    for (int j = i + 1; j < kNumZones; ++j)
      best = std::min(best, distance(pupil_center_by_zone[i], pupil_center_by_zone[j]));
  return best;
}

void SyntheticSpec::validate() const {
  if (jitter_px < 0) throw Error(ErrorKind::BadConfig, "jitter_px must be non-negative");
  const double sep = min_center_separation();
  if (!(sep > 0) || sep < 4.0 * jitter_px) {
    throw Error(ErrorKind::BadConfig,
                fmt::format("canonical pupil centres separated by {} < 4 x jitter ({})", sep, jitter_px));
  }
  if (glasses_frame_thickness_px.first < 1 || glasses_frame_thickness_px.second < glasses_frame_thickness_px.first) {
    throw Error(ErrorKind::BadConfig, "bad glasses_frame_thickness_px range");
  }
  if (glare_probability < 0 || glare_probability > 1) throw Error(ErrorKind::BadConfig, "glare_probability not in [0,1]");
  if (glare_intensity.first < 0 || glare_intensity.second > 1 || glare_intensity.first > glare_intensity.second) {
    throw Error(ErrorKind::BadConfig, "bad glare_intensity range");
  }
}

SynthAppearance appearance_for(int subject, Lighting lighting) {
  std::mt19937_64 rng(0x5eed0000ULL + static_cast<std::uint64_t>(subject) * 7919ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthAppearance a;
  a.eye_scale = 0.88 + 0.24 * u(rng);
  a.skin_level = -0.05 + 0.35 * u(rng);
  a.sclera_level = 0.55 + 0.3 * u(rng);
  a.iris_level = -0.35 + 0.3 * u(rng);
  a.pupil_level = -0.9 + 0.1 * u(rng);
  a.brow_level = -0.45 + 0.25 * u(rng);
  a.brow_offset = -8.0 + 16.0 * u(rng);
  a.shading = -0.15 + 0.3 * u(rng);
  a.frame_level = -0.65 + 0.3 * u(rng);
  a.frame_width_scale = 0.9 + 0.15 * u(rng);
  a.frame_height_scale = 0.85 + 0.25 * u(rng);
  a.lens_gain = 0.75 + 0.2 * u(rng);
  a.lens_offset = 0.0 + 0.2 * u(rng);
  a.lighting = lighting;
  if (lighting == Lighting::Night) {
    // IR at night: darker skin, brighter sclera, more sensor noise.
    a.skin_level -= 0.25;
    a.sclera_level = std::min(0.95, a.sclera_level + 0.1);
    a.brow_level -= 0.1;
    a.shading *= 0.5;
    a.noise_sigma = 0.04;
  }
  return a;
}

namespace {

struct EyeGeometry {
  double cx = 128.0, cy = 128.0;
  double a = 92.0, b = 50.0;
  double iris_r = 24.0, pupil_r = 10.0;
};

EyeGeometry geometry_for(const SynthAppearance& look) {
  EyeGeometry g;
  g.a *= look.eye_scale;
  g.b *= look.eye_scale;
  g.iris_r *= look.eye_scale;
  g.pupil_r *= look.eye_scale;
  return g;
}

}  // namespace

cv::Mat render_eye(Point pupil, const SynthAppearance& look, std::uint64_t noise_seed) {
  const EyeGeometry g = geometry_for(look);
  cv::Mat img(kSynthCanvas, kSynthCanvas, CV_32F);
  std::mt19937_64 noise_rng(noise_seed);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(look.noise_sigma));
  const double brow_y0 = g.cy - g.b - 24.0 + look.brow_offset;
  const double min_ab = std::min(g.a, g.b);

  for (int y = 0; y < kSynthCanvas; ++y) {
    float* row = img.ptr<float>(y);
    for (int x = 0; x < kSynthCanvas; ++x) {
      const double dx = x - g.cx;
      double v = look.skin_level + look.shading * dx / 128.0;

      if (std::abs(dx) < g.a + 4.0) {
        const double brow_y = brow_y0 + 0.0025 * dx * dx;
        const double cb = clamp01(6.0 - std::abs(y - brow_y) + 0.5);
        v += cb * (look.brow_level - v);
      }

      const double ex = dx / g.a, ey = (y - g.cy) / g.b;
      const double d = (std::sqrt(ex * ex + ey * ey) - 1.0) * min_ab;
      const double cs = clamp01(0.5 - d);
      if (cs > 0.0) {
        const double r = std::hypot(x - pupil.x, y - pupil.y);
        double sv = look.sclera_level;
        sv += clamp01(g.iris_r - r + 0.5) * (look.iris_level - sv);
        sv += clamp01(g.pupil_r - r + 0.5) * (look.pupil_level - sv);
        v += cs * (sv - v);
      }
      v += noise(noise_rng);
      row[x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
  }
  return img;
}

GazeZone nearest_zone(const SyntheticSpec& spec, Point p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kNumZones; ++i) {
    const double d = distance(spec.pupil_center_by_zone[i], p);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return zone_from_code(best);
}

namespace {

torch::Tensor mat_to_pixels(const cv::Mat& m) {
  return torch::from_blob(const_cast<float*>(m.ptr<float>()), {1, m.rows, m.cols}, torch::kFloat32).clone();
}

}  // namespace

SyntheticPair synth_pair(const SyntheticSpec& spec, GazeZone zone, std::mt19937_64& rng, const SynthAppearance& look) {
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Jitter uniform in a disc of radius jitter_px keeps the nearest-centre
  // oracle exact whenever centres are 4 x jitter apart.
  const Point canon = spec.pupil_center_by_zone[zone_code(zone)];
  const double jr = spec.jitter_px * std::sqrt(u(rng));
  const double jt = 2.0 * M_PI * u(rng);
  const Point pupil{canon.x + jr * std::cos(jt), canon.y + jr * std::sin(jt)};
  const std::uint64_t noise_seed = rng();

  cv::Mat bare = render_eye(pupil, look, noise_seed);
  cv::Mat glasses = bare.clone();
  cv::Mat mask = cv::Mat::zeros(bare.size(), CV_8U);

  // Frame rectangle with tinted lens.
  const double fcx = 128.0 + (u(rng) - 0.5) * 12.0;
  const double fcy = 124.0 + (u(rng) - 0.5) * 12.0;
  const double hw = 112.0 * look.frame_width_scale;
  const double hh = 66.0 * look.frame_height_scale;
  const auto [tmin, tmax] = spec.glasses_frame_thickness_px;
  const int thick = std::min(tmax, tmin + static_cast<int>(u(rng) * (tmax - tmin + 1)));
  const int ox0 = std::max(0, static_cast<int>(std::lround(fcx - hw)));
  const int ox1 = std::min(kSynthCanvas, static_cast<int>(std::lround(fcx + hw)));
  const int oy0 = std::max(0, static_cast<int>(std::lround(fcy - hh)));
  const int oy1 = std::min(kSynthCanvas, static_cast<int>(std::lround(fcy + hh)));
  for (int y = oy0; y < oy1; ++y) {
    float* row = glasses.ptr<float>(y);
    auto* m = mask.ptr<std::uint8_t>(y);
    for (int x = ox0; x < ox1; ++x) {
      const bool on_frame = x < ox0 + thick || x >= ox1 - thick || y < oy0 + thick || y >= oy1 - thick;
      row[x] = on_frame ? static_cast<float>(look.frame_level)
                        : static_cast<float>(std::clamp(look.lens_gain * row[x] + look.lens_offset, -1.0, 1.0));
      m[x] = 255;
    }
  }

  if (u(rng) < spec.glare_probability) {
    const double gx = 128.0 + (u(rng) - 0.5) * 140.0;
    const double gy = 126.0 + (u(rng) - 0.5) * 70.0;
    const double rx = 10.0 + 16.0 * u(rng);
    const double ry = 6.0 + 10.0 * u(rng);
    const double gi = spec.glare_intensity.first + (spec.glare_intensity.second - spec.glare_intensity.first) * u(rng);
    for (int y = std::max(0, int(gy - ry - 1)); y < std::min(kSynthCanvas, int(gy + ry + 2)); ++y) {
      float* row = glasses.ptr<float>(y);
      auto* m = mask.ptr<std::uint8_t>(y);
      for (int x = std::max(0, int(gx - rx - 1)); x < std::min(kSynthCanvas, int(gx + rx + 2)); ++x) {
        const double e = std::hypot((x - gx) / rx, (y - gy) / ry);
        if (e >= 1.0) continue;
        const double w = gi * clamp01(2.0 * (1.0 - e));
        row[x] = static_cast<float>(row[x] + w * (1.0 - row[x]));
        m[x] = 255;
      }
    }
  }

  SyntheticPair out;
  out.pupil_center = pupil;
  out.overlay_mask = mask;
  out.without_glasses.pixels = mat_to_pixels(bare);
  out.without_glasses.domain = Domain::X_WithoutGlasses;
  out.without_glasses.zone = zone;
  out.without_glasses.lighting = look.lighting;
  out.without_glasses.pupil_center = pupil;
  out.with_glasses = out.without_glasses;
  out.with_glasses.pixels = mat_to_pixels(glasses);
  out.with_glasses.domain = Domain::Y_WithGlasses;
  return out;
}

// ---- batching -------------------------------------------------------------

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t shuffle_seed, bool shuffle)
    : batch_size_(batch_size) {
  if (batch_size == 0) throw Error(ErrorKind::BadConfig, "batch_size must be >= 1");
  if (n == 0) throw Error(ErrorKind::EmptyDataset, "no records to batch");
  if (shuffle) {
    order_ = shuffled_indices(n, shuffle_seed);
  } else {
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
}

std::optional<std::span<const std::size_t>> BatchIterator::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const std::size_t len = std::min(batch_size_, order_.size() - pos_);
  std::span<const std::size_t> out(order_.data() + pos_, len);
  pos_ += len;
  return out;
}

Batch stack_batch(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<torch::Tensor> imgs;
  std::vector<std::int64_t> labels;
  imgs.reserve(indices.size());
  for (std::size_t i : indices) {
    imgs.push_back(data.at(i).pixels);
    labels.push_back(zone_code(data[i].zone));
  }
  return {torch::stack(imgs), torch::tensor(labels, torch::kInt64)};
}

// ---- synthetic dataset writer ----------------------------------------------

std::vector<SampleRecord> write_synthetic_dataset(const SyntheticSpec& spec, const SynthPlan& plan,
                                                  const fs::path& out_dir) {
  spec.validate();
  if (plan.subjects.empty() || plan.lightings.empty()) throw Error(ErrorKind::BadConfig, "empty synthetic plan");
  std::error_code ec;
  fs::create_directories(out_dir / "ng", ec);
  fs::create_directories(out_dir / "wg", ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + out_dir.string() + ": " + ec.message());

  std::mt19937_64 rng(spec.rng_seed);
  std::vector<SampleRecord> records;
  std::vector<std::pair<std::string, Point>> truth;
  const std::size_t n_sub = plan.subjects.size();
  const std::size_t n_light = plan.lightings.size();

  for (GazeZone zone : kAllZones) {
    for (int k = 0; k < plan.images_per_zone; ++k) {
      const int subject = plan.subjects[k % n_sub];
      const Lighting light = plan.lightings[(k / n_sub) % n_light];
      const auto pair = synth_pair(spec, zone, rng, appearance_for(subject, light));
      auto emit = [&](const EyeImage& img, const char* dir, Eyewear eyewear) {
        const std::string rel = fmt::format("{}/z{}_{:05d}.png", dir, zone_code(zone), k);
        if (!cv::imwrite((out_dir / rel).string(), to_image8(img.pixels))) {
          throw Error(ErrorKind::IoError, "cannot write " + (out_dir / rel).string());
        }
        SampleRecord r;
        r.image_path = rel;
        r.subject_id = fmt::format("s{:02d}", subject);
        r.zone = zone;
        r.condition = {light, eyewear};
        records.push_back(r);
        truth.emplace_back(rel, pair.pupil_center);
      };
      if (plan.write_without_glasses) emit(pair.without_glasses, "ng", Eyewear::WithoutGlasses);
      if (plan.write_with_glasses) emit(pair.with_glasses, "wg", Eyewear::WithGlasses);
    }
  }

  write_manifest(out_dir / "manifest.tsv", records);
  std::ofstream t(out_dir / "pupil_truth.tsv", std::ios::binary);
  t << "image_path\tx\ty\n";
  for (const auto& [path, p] : truth) t << path << '\t' << fmt::format("{:.6f}\t{:.6f}", p.x, p.y) << '\n';
  if (!t) throw Error(ErrorKind::IoError, "cannot write pupil_truth.tsv");
  return records;
}

std::map<std::string, Point> load_pupil_truth(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::MissingFile, path.string());
  std::map<std::string, Point> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    if (++line_no == 1 || line.empty()) continue;
    auto f = split_fields(line, '\t');
    if (f.size() != 3) malformed(path, line_no, "expected image_path, x, y");
    try {
      out[f[0]] = Point{std::stod(f[1]), std::stod(f[2])};
    } catch (const std::logic_error&) {
      malformed(path, line_no, "non-numeric pupil coordinate");
    }
  }
  return out;
}

}  // namespace gpc
