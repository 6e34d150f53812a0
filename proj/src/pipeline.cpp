#include "weberline/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

namespace weberline {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.profile = "desk";
  c.train.epochs = 60;
  c.train.lr = 1e-2;
  c.train.batch_size = 8;
  return c;
}

PipelineConfig PipelineConfig::paper() {
  PipelineConfig c;
  c.profile = "paper";
  c.phantom_dims = {64, 64, 64};
  c.phantom_spacing = {0.75, 0.75, 0.75};
  c.data.n_labeled = 285;
  c.data.n_unlabeled = 282;
  c.data.n_test = 45;
  c.crop.rows = 512;
  c.crop.cols = 512;
  c.crop.below = 14;
  c.crop.above = 14;
  c.crop.xy_margin = 4;
  c.train = ssl::TrainConfig{};
  return c;
}

PipelineConfig PipelineConfig::for_profile(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw std::invalid_argument("unknown profile: " + name);
}

void PipelineConfig::validate() const {
  if (defaults_version != kDefaultsVersion)
    throw std::invalid_argument("unsupported defaults_version: " + defaults_version);
  for (int d : phantom_dims)
    if (d < 1) throw std::invalid_argument("phantom dims must be positive");
  for (double s : phantom_spacing)
    if (!(s > 0.0)) throw std::invalid_argument("phantom spacing must be positive");
  if (data.n_labeled < 0 || data.n_unlabeled < 0 || data.n_test < 0)
    throw std::invalid_argument("dataset counts must be >= 0");
  if (!(data.labeled_frac > 0.0 && data.labeled_frac <= 1.0))
    throw std::invalid_argument("labeled_frac must lie in (0,1]");
  if (data.difficulty != "standard" && data.difficulty != "easy" && data.difficulty != "hard")
    throw std::invalid_argument("unknown difficulty: " + data.difficulty);
  if (crop.rows < 1 || crop.cols < 1 || crop.below < 0 || crop.above < 0 || crop.xy_margin < 0)
    throw std::invalid_argument("invalid crop settings");
  icp.validate();
  train.validate();
}

namespace {

std::string weighting_name(ssl::Weighting w) { return w == ssl::Weighting::Logits ? "logits" : "loss"; }

ssl::Weighting weighting_from(const std::string& s) {
  if (s == "logits") return ssl::Weighting::Logits;
  if (s == "loss") return ssl::Weighting::LossWeight;
  throw std::invalid_argument("unknown weighting: " + s);
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw std::invalid_argument("unknown config key: " + where + key);
}

template <class T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

template <class T>
void take_optional(const json& j, const char* key, std::optional<T>& dst) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null())
    dst.reset();
  else
    dst = j.at(key).get<T>();
}

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

json PipelineConfig::to_json() const {
  json j;
  j["defaults_version"] = defaults_version;
  j["profile"] = profile;
  j["seed"] = seed;
  j["phantom"] = {{"dims", phantom_dims}, {"spacing", phantom_spacing}};
  j["data"] = {{"dir", data.dir},
               {"n_labeled", data.n_labeled},
               {"n_unlabeled", data.n_unlabeled},
               {"n_test", data.n_test},
               {"difficulty", data.difficulty},
               {"labeled_frac", data.labeled_frac}};
  j["icp"] = {{"max_iter", icp.max_iterations},
              {"eps", icp.convergence_epsilon},
              {"allow_scale", icp.allow_scale},
              {"centroid_init", icp.centroid_init},
              {"max_correspondence_mm", optional_json(icp.max_correspondence_mm)}};
  j["crop"] = {{"rows", crop.rows},
               {"cols", crop.cols},
               {"below", crop.below},
               {"above", crop.above},
               {"xy_margin", crop.xy_margin}};
  j["train"] = {{"lr", train.lr},
                {"momentum", train.momentum},
                {"batch", train.batch_size},
                {"epochs", train.epochs},
                {"lambda", train.lambda},
                {"threshold", train.threshold},
                {"buffer_capacity", train.buffer_capacity},
                {"mmd_sigma", optional_json(train.mmd_sigma)},
                {"weighting", weighting_name(train.weighting)},
                {"use_unlabeled", train.use_unlabeled},
                {"flip_augment", train.flip_augment}};
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  try {
    check_keys(j, {"defaults_version", "profile", "seed", "phantom", "data", "icp", "crop", "train"}, "");
    PipelineConfig c = for_profile(j.value("profile", std::string("desk")));
    take(j, "defaults_version", c.defaults_version);
    take(j, "seed", c.seed);
    if (j.contains("phantom")) {
      const auto& p = j.at("phantom");
      check_keys(p, {"dims", "spacing"}, "phantom.");
      take(p, "dims", c.phantom_dims);
      take(p, "spacing", c.phantom_spacing);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, {"dir", "n_labeled", "n_unlabeled", "n_test", "difficulty", "labeled_frac"}, "data.");
      take(d, "dir", c.data.dir);
      take(d, "n_labeled", c.data.n_labeled);
      take(d, "n_unlabeled", c.data.n_unlabeled);
      take(d, "n_test", c.data.n_test);
      take(d, "difficulty", c.data.difficulty);
      take(d, "labeled_frac", c.data.labeled_frac);
    }
    if (j.contains("icp")) {
      const auto& i = j.at("icp");
      check_keys(i, {"max_iter", "eps", "allow_scale", "centroid_init", "max_correspondence_mm"}, "icp.");
      take(i, "max_iter", c.icp.max_iterations);
      take(i, "eps", c.icp.convergence_epsilon);
      take(i, "allow_scale", c.icp.allow_scale);
      take(i, "centroid_init", c.icp.centroid_init);
      take_optional(i, "max_correspondence_mm", c.icp.max_correspondence_mm);
    }
    if (j.contains("crop")) {
      const auto& k = j.at("crop");
      check_keys(k, {"rows", "cols", "below", "above", "xy_margin"}, "crop.");
      take(k, "rows", c.crop.rows);
      take(k, "cols", c.crop.cols);
      take(k, "below", c.crop.below);
      take(k, "above", c.crop.above);
      take(k, "xy_margin", c.crop.xy_margin);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, {"lr", "momentum", "batch", "epochs", "lambda", "threshold", "buffer_capacity",
                     "mmd_sigma", "weighting", "use_unlabeled", "flip_augment"},
                 "train.");
      take(t, "lr", c.train.lr);
      take(t, "momentum", c.train.momentum);
      take(t, "batch", c.train.batch_size);
      take(t, "epochs", c.train.epochs);
      take(t, "lambda", c.train.lambda);
      take(t, "threshold", c.train.threshold);
      take(t, "buffer_capacity", c.train.buffer_capacity);
      take_optional(t, "mmd_sigma", c.train.mmd_sigma);
      if (t.contains("weighting")) c.train.weighting = weighting_from(t.at("weighting").get<std::string>());
      take(t, "use_unlabeled", c.train.use_unlabeled);
      take(t, "flip_augment", c.train.flip_augment);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("invalid config: ") + e.what());
  }
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("config not found: " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config does not parse: " + std::string(e.what()));
  }
  return PipelineConfig::from_json(j);
}

void save_config(const PipelineConfig& cfg, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << cfg.to_json().dump(2) << '\n';
}

DatasetRanges ranges_for(const PipelineConfig& cfg) {
  DatasetRanges r = cfg.data.difficulty == "easy"   ? DatasetRanges::easy()
                    : cfg.data.difficulty == "hard" ? DatasetRanges::hard()
                                                    : DatasetRanges{};
  if (cfg.phantom_dims != r.base.dims || cfg.phantom_spacing != r.base.spacing) {
    // Scale the default anatomy, which is laid out for a 32-slice, 1.5 mm grid.
    const double f = (cfg.phantom_dims[2] * cfg.phantom_spacing[2]) / (r.base.dims[2] * r.base.spacing[2]);
    const double s = cfg.phantom_dims[2] / static_cast<double>(r.base.dims[2]);
    r.base.dims = cfg.phantom_dims;
    r.base.spacing = cfg.phantom_spacing;
    r.base.tibia_radius *= f;
    r.base.fibula_radius *= f;
    for (double* v : {&r.base.tibia_dx, &r.base.tibia_dy, &r.base.fibula_dx, &r.base.fibula_dy}) *v *= f;
    r.base.syndesmosis_lo = static_cast<int>(std::lround(r.base.syndesmosis_lo * s));
    r.base.syndesmosis_hi = static_cast<int>(std::lround(r.base.syndesmosis_hi * s));
    r.base.fracture_z = (r.base.syndesmosis_lo + r.base.syndesmosis_hi) / 2;
    r.class_depth = static_cast<int>(std::lround(r.class_depth * s));
    r.gap_min = std::max(1, static_cast<int>(std::lround(r.gap_min * s)));
    r.gap_max = std::max(r.gap_min, static_cast<int>(std::lround(r.gap_max * s)));
    r.max_pose_shift_mm *= f;
    r.max_fragment_shift_mm *= f;
  }
  return r;
}

std::vector<Case> load_cases(const fs::path& dir) {
  std::vector<Case> out;
  for (const auto& row : read_manifest(dir)) {
    Case c;
    c.id = fs::path(row.path).filename().string();
    const auto pos = c.id.find(".fractured.rvol");
    if (pos != std::string::npos) c.id = c.id.substr(0, pos);
    c.split = row.split;
    c.label = row.label;
    c.hidden_label = row.hidden_label;
    c.fracture_z = row.fracture_z;
    c.syndesmosis_lo = row.syndesmosis_lo;
    c.syndesmosis_hi = row.syndesmosis_hi;
    c.fractured = load_mask(dir / row.path);
    c.healthy = load_mask(dir / healthy_path_for(row.path));
    if (c.split != Split::Unlabeled && !c.label)
      throw std::runtime_error("labeled manifest row without label: " + row.path);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Case> cases_from_dataset(const Dataset& d) {
  std::vector<Case> out;
  for (const auto& s : d.samples) {
    Case c;
    c.id = s.id;
    c.split = s.split;
    if (s.split == Split::Unlabeled)
      c.hidden_label = s.label;
    else
      c.label = s.label;
    c.fracture_z = s.params.fracture_z;
    c.syndesmosis_lo = s.params.syndesmosis_lo;
    c.syndesmosis_hi = s.params.syndesmosis_hi;
    c.healthy = s.healthy;
    c.fractured = s.fractured;
    out.push_back(std::move(c));
  }
  return out;
}

Image2D coronal_projection(const Mask& crop, int rows, int cols) {
  const auto [nx, ny, nz] = crop.grid.dims;
  Image2D img(nz, nx);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const auto v = crop.at(x, y, z);
        const double level = v == kTibia ? 0.5 : v == kFibula ? 1.0 : 0.0;
        img.at(nz - 1 - z, x) = std::max(img.at(nz - 1 - z, x), level);
      }
  return resize_slice(img, rows, cols, Interpolation::Nearest);
}

std::vector<double> make_image(const Mask& fractured_crop, const Mask& healthy_crop, int rows, int cols) {
  const Image2D a = coronal_projection(fractured_crop, rows, cols);
  const Image2D b = coronal_projection(healthy_crop, rows, cols);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(kImageChannels) * rows * cols);
  out.insert(out.end(), a.data.begin(), a.data.end());
  out.insert(out.end(), b.data.begin(), b.data.end());
  for (int r = 0; r < rows; ++r) {
    const double ramp = rows > 1 ? static_cast<double>(r) / (rows - 1) : 0.0;
    out.insert(out.end(), static_cast<std::size_t>(cols), ramp);
  }
  return out;
}

PreparedCase prepare_case(const Case& c, const PipelineConfig& cfg) {
  PreparedCase p;
  RegistrationOptions opts;
  opts.icp = cfg.icp;
  try {
    p.registration = register_pair(c.fractured, c.healthy, opts);
  } catch (const std::exception& e) {
    throw StageError("register", c.id + ": " + e.what());
  }
  try {
    const BBox box = syndesmosis_box(c.healthy, c.syndesmosis_lo, c.syndesmosis_hi, cfg.crop.below,
                                     cfg.crop.above, cfg.crop.xy_margin);
    p.healthy_crop = crop(c.healthy, box);
    p.fractured_crop = crop_syndesmosis(p.registration.transformed, box);
    p.image = make_image(p.fractured_crop, p.healthy_crop, cfg.crop.rows, cfg.crop.cols);
  } catch (const std::exception& e) {
    throw StageError("crop", c.id + ": " + e.what());
  }
  return p;
}

json transform_json(const RegistrationResult& r) {
  std::vector<double> rot;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rot.push_back(r.transform.rotation(i, j));
  const auto& t = r.transform.translation;
  json j = {{"rotation", rot},
            {"translation", {t.x(), t.y(), t.z()}},
            {"scale", r.transform.scale},
            {"rms_residual", r.rms_residual},
            {"iterations", r.iterations}};
  if (r.mirror_plane_x) j["mirror_plane_x"] = *r.mirror_plane_x;
  return j;
}

std::vector<std::vector<double>> prepare_all(const std::vector<Case>& cases, const PipelineConfig& cfg,
                                             const fs::path* artifacts) {
  if (artifacts) {
    fs::create_directories(*artifacts / "transforms");
    fs::create_directories(*artifacts / "crops");
  }
  std::vector<std::vector<double>> images;
  images.reserve(cases.size());
  for (const auto& c : cases) {
    PreparedCase p = prepare_case(c, cfg);
    if (artifacts) {
      std::ofstream os(*artifacts / "transforms" / (c.id + ".json"));
      os << transform_json(p.registration).dump(2) << '\n';
      save_mask(p.fractured_crop, *artifacts / "crops" / (c.id + ".fractured.rvol"));
      save_mask(p.healthy_crop, *artifacts / "crops" / (c.id + ".healthy.rvol"));
    }
    images.push_back(std::move(p.image));
  }
  return images;
}

Splits build_splits(const std::vector<Case>& cases, const std::vector<std::vector<double>>& images,
                    const PipelineConfig& cfg) {
  if (images.size() != cases.size()) throw std::invalid_argument("cases/images mismatch");
  Splits s;
  for (auto* set : {&s.labeled, &s.unlabeled, &s.test}) {
    set->channels = kImageChannels;
    set->rows = cfg.crop.rows;
    set->cols = cfg.crop.cols;
  }
  // Class-stratified choice of which labeled-split cases keep their labels.
  std::map<int, std::vector<std::size_t>> pool;
  for (std::size_t i = 0; i < cases.size(); ++i)
    if (cases[i].split == Split::Labeled) pool[static_cast<int>(*cases[i].label)].push_back(i);
  std::mt19937_64 rng(cfg.seed + 3);
  std::set<std::size_t> keep;
  for (auto& [label, idx] : pool) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(cfg.data.labeled_frac * static_cast<double>(idx.size()))));
    keep.insert(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, idx.size())));
  }
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = cases[i];
    ssl::Sample smp;
    smp.image = images[i];
    const auto truth = c.label ? c.label : c.hidden_label;
    if (c.split == Split::Test) {
      smp.label = static_cast<int>(*c.label);
      s.test.samples.push_back(std::move(smp));
      s.test_ids.push_back(c.id);
    } else if (c.split == Split::Labeled && keep.count(i)) {
      smp.label = static_cast<int>(*c.label);
      s.labeled.samples.push_back(std::move(smp));
      s.labeled_ids.push_back(c.id);
    } else {
      smp.hidden_label = truth ? static_cast<int>(*truth) : -1;
      s.unlabeled.samples.push_back(std::move(smp));
      s.unlabeled_ids.push_back(c.id);
    }
  }
  return s;
}

void write_train_log(const std::vector<ssl::EpochLog>& logs, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,loss_l,loss_u,loss_mmd,loss_total,n_selected,pseudo_label_accuracy,val_accuracy\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& l : logs) {
    os << l.epoch << ',' << num(l.loss_l) << ',' << num(l.loss_u) << ',' << num(l.loss_mmd) << ','
       << num(l.loss_total) << ',' << l.n_selected << ','
       << (l.pseudo_label_accuracy ? num(*l.pseudo_label_accuracy) : "") << ','
       << (l.val_accuracy ? num(*l.val_accuracy) : "") << '\n';
  }
}

TrainOutcome train_and_evaluate(const Splits& splits, const PipelineConfig& cfg, const fs::path* checkpoint) {
  TrainOutcome out;
  ssl::ModelConfig mc;
  mc.in_channels = kImageChannels;
  ssl::TrainState state(mc, cfg.seed + 1);
  try {
    ssl::Trainer trainer(state, cfg.train, cfg.seed + 2);
    for (int e = 0; e < cfg.train.epochs; ++e)
      out.logs.push_back(trainer.train_epoch(splits.labeled, splits.unlabeled, &splits.test));
    if (checkpoint) state.save(*checkpoint);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("train", e.what());
  }
  try {
    out.report = ssl::evaluate(state, splits.test);
    out.test_accuracy = out.report.overall_accuracy;
  } catch (const std::exception& e) {
    throw StageError("evaluate", e.what());
  }
  return out;
}

void write_report(const MetricsReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "report.csv"), conf(dir / "confusion.csv"), txt(dir / "report.txt");
  if (!csv || !conf || !txt) throw StageError("report", "cannot write report files in " + dir.string());
  report.write_csv(csv);
  report.write_confusion_csv(conf);
  report.write_text(txt);
}

TrainOutcome run_pipeline(const PipelineConfig& cfg, const fs::path& out_dir) {
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  fs::create_directories(out_dir);
  save_config(cfg, out_dir / "effective_config.json");

  std::vector<Case> cases;
  try {
    if (cfg.data.dir.empty()) {
      const Dataset d = make_dataset(cfg.data.n_labeled, cfg.data.n_unlabeled, cfg.data.n_test,
                                     ranges_for(cfg), cfg.seed);
      write_dataset(d, out_dir / "data");
      cases = cases_from_dataset(d);
    } else {
      cases = load_cases(cfg.data.dir);
    }
  } catch (const std::exception& e) {
    throw StageError("data", e.what());
  }

  const auto images = prepare_all(cases, cfg, &out_dir);
  const Splits splits = build_splits(cases, images, cfg);
  {
    std::ofstream os(out_dir / "splits.csv");
    os << "id,role\n";
    for (const auto& id : splits.labeled_ids) os << id << ",labeled\n";
    for (const auto& id : splits.unlabeled_ids) os << id << ",unlabeled\n";
    for (const auto& id : splits.test_ids) os << id << ",test\n";
  }
  const fs::path ckpt = out_dir / "model.ckpt";
  TrainOutcome out = train_and_evaluate(splits, cfg, &ckpt);
  write_train_log(out.logs, out_dir / "train_log.csv");
  write_report(out.report, out_dir);
  return out;
}

}  // namespace weberline
