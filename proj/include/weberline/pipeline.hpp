#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "weberline/metrics.hpp"
#include "weberline/phantom.hpp"
#include "weberline/registration.hpp"
#include "weberline/ssl.hpp"

namespace weberline {

inline constexpr const char* kDefaultsVersion = "1";

/// Failure inside one pipeline stage; what() is prefixed with "[stage] ".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DataConfig {
  std::string dir;  // empty: generate phantoms into <out>/data
  int n_labeled = 60;
  int n_unlabeled = 60;
  int n_test = 60;
  std::string difficulty = "standard";  // standard | easy | hard
  double labeled_frac = 1.0;
};

struct CropConfig {
  int rows = 32;
  int cols = 32;
  int below = 7;
  int above = 7;
  int xy_margin = 2;
};

struct PipelineConfig {
  std::string defaults_version = kDefaultsVersion;
  std::string profile = "desk";
  std::uint64_t seed = 0;
  Index3 phantom_dims{32, 32, 32};
  Vec3 phantom_spacing{1.5, 1.5, 1.5};
  DataConfig data;
  IcpConfig icp;
  CropConfig crop;
  ssl::TrainConfig train;

  static PipelineConfig desk();
  static PipelineConfig paper();
  static PipelineConfig for_profile(const std::string& name);

  void validate() const;
  nlohmann::json to_json() const;
  /// Overlays `j` on the defaults of the profile it names (desk if absent).
  static PipelineConfig from_json(const nlohmann::json& j);
};

PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);

DatasetRanges ranges_for(const PipelineConfig& cfg);

/// One fractured/template pair with its manifest metadata.
struct Case {
  std::string id;
  Split split = Split::Labeled;
  std::optional<WeberLabel> label;
  std::optional<WeberLabel> hidden_label;
  int fracture_z = 0;
  int syndesmosis_lo = 0;
  int syndesmosis_hi = 0;
  Mask healthy;
  Mask fractured;
};

std::vector<Case> load_cases(const std::filesystem::path& dir);
std::vector<Case> cases_from_dataset(const Dataset& d);

struct PreparedCase {
  RegistrationResult registration;
  Mask healthy_crop;
  Mask fractured_crop;
  std::vector<double> image;  // 3×rows×cols
};

inline constexpr int kImageChannels = 3;

/// Coronal max-projection of a crop (tibia 0.5, fibula 1.0), resized to rows×cols.
Image2D coronal_projection(const Mask& crop, int rows, int cols);

/// Channels: warped fractured projection, template projection, normalized z ramp.
std::vector<double> make_image(const Mask& fractured_crop, const Mask& healthy_crop, int rows, int cols);

PreparedCase prepare_case(const Case& c, const PipelineConfig& cfg);

nlohmann::json transform_json(const RegistrationResult& r);

/// Labeled and unlabeled training sets plus the test set. With labeled_frac f, a
/// class-stratified fraction f of the labeled split keeps its labels and the rest
/// joins the unlabeled pool with hidden labels.
struct Splits {
  ssl::SampleSet labeled, unlabeled, test;
  std::vector<std::string> labeled_ids, unlabeled_ids, test_ids;
};

Splits build_splits(const std::vector<Case>& cases, const std::vector<std::vector<double>>& images,
                    const PipelineConfig& cfg);

std::vector<std::vector<double>> prepare_all(const std::vector<Case>& cases, const PipelineConfig& cfg,
                                             const std::filesystem::path* artifacts = nullptr);

void write_train_log(const std::vector<ssl::EpochLog>& logs, const std::filesystem::path& path);

struct TrainOutcome {
  std::vector<ssl::EpochLog> logs;
  MetricsReport report;
  double test_accuracy = 0.0;
};

/// Trains a fresh model on prepared splits and evaluates it on the test split.
TrainOutcome train_and_evaluate(const Splits& splits, const PipelineConfig& cfg,
                                const std::filesystem::path* checkpoint = nullptr);

void write_report(const MetricsReport& report, const std::filesystem::path& dir);

/// Full run: data, registration, cropping, training, evaluation. Everything is
/// written under out_dir.
TrainOutcome run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace weberline
