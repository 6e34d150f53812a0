#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "weberline/pipeline.hpp"

namespace fs = std::filesystem;
using namespace weberline;

namespace {

constexpr int kStageFailure = 1;
constexpr int kUsage = 2;

PipelineConfig base_config(const std::string& config_path, const std::string& profile) {
  if (!config_path.empty()) return load_config(config_path);
  return PipelineConfig::for_profile(profile);
}

// Checkpoint argument: a training output directory or the model file itself.
std::pair<fs::path, fs::path> resolve_checkpoint(const fs::path& ckpt) {
  const fs::path model = fs::is_directory(ckpt) ? ckpt / "model.ckpt" : ckpt;
  if (!fs::exists(model)) throw StageError("evaluate", "checkpoint not found: " + model.string());
  return {model, model.parent_path() / "effective_config.json"};
}

TrainOutcome evaluate_checkpoint(const fs::path& ckpt, const fs::path& data) {
  const auto [model, cfg_path] = resolve_checkpoint(ckpt);
  PipelineConfig cfg = fs::exists(cfg_path) ? load_config(cfg_path) : PipelineConfig::desk();
  std::vector<Case> cases;
  try {
    for (auto& c : load_cases(data))
      if (c.split == Split::Test) cases.push_back(std::move(c));
  } catch (const std::exception& e) {
    throw StageError("data", e.what());
  }
  if (cases.empty()) throw StageError("evaluate", "no test cases in " + data.string());
  const Splits splits = build_splits(cases, prepare_all(cases, cfg), cfg);
  ssl::ModelConfig mc;
  mc.in_channels = kImageChannels;
  ssl::TrainState state(mc, cfg.seed + 1);
  TrainOutcome out;
  try {
    state.load(model);
    out.report = ssl::evaluate(state, splits.test);
  } catch (const std::exception& e) {
    throw StageError("evaluate", e.what());
  }
  out.test_accuracy = out.report.overall_accuracy;
  return out;
}

void write_transform(const RegistrationResult& r, const std::string& path) {
  const std::string text = transform_json(r).dump(2);
  if (path.empty()) {
    std::cout << text << '\n';
    return;
  }
  std::ofstream os(path);
  if (!os) throw StageError("register", "cannot write " + path);
  os << text << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weber ankle-fracture typing: mask registration, syndesmosis crops, semi-supervised classifier"};
  app.require_subcommand(1);

  // phantom
  std::string ph_out, ph_difficulty = "standard";
  int ph_labeled = 60, ph_unlabeled = 60, ph_test = 60;
  std::uint64_t ph_seed = 0;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  phantom->add_option("--out", ph_out, "Output directory")->required();
  phantom->add_option("--labeled", ph_labeled, "Labeled cases")->check(CLI::NonNegativeNumber);
  phantom->add_option("--unlabeled", ph_unlabeled, "Unlabeled cases")->check(CLI::NonNegativeNumber);
  phantom->add_option("--test", ph_test, "Test cases (multiple of 3)")->check(CLI::NonNegativeNumber);
  phantom->add_option("--seed", ph_seed, "Random seed");
  phantom->add_option("--difficulty", ph_difficulty, "standard | easy | hard")
      ->check(CLI::IsMember({"standard", "easy", "hard"}));

  // register
  std::string rg_fractured, rg_healthy, rg_out, rg_warped;
  IcpConfig rg_icp;
  bool rg_no_mirror = false;
  auto* reg = app.add_subcommand("register", "Mirror and ICP-align a fractured mask to its healthy template");
  reg->add_option("--moving,--fractured", rg_fractured, "Fractured mask (RVOL)")->required()->check(CLI::ExistingFile);
  reg->add_option("--fixed,--healthy", rg_healthy, "Healthy template (RVOL)")->required()->check(CLI::ExistingFile);
  reg->add_option("--out", rg_out, "Transform JSON (stdout if omitted)");
  reg->add_option("--warped", rg_warped, "Write the warped fractured mask here");
  reg->add_option("--max-iter", rg_icp.max_iterations, "ICP iteration cap");
  reg->add_option("--eps", rg_icp.convergence_epsilon, "ICP convergence threshold");
  reg->add_flag("--scale,--allow-scale", rg_icp.allow_scale, "Estimate a uniform scale");
  reg->add_flag("--no-mirror", rg_no_mirror, "Skip the sagittal mirroring");

  // crop
  std::string cr_mask, cr_healthy, cr_out;
  int cr_lo = 0, cr_hi = 0;
  CropConfig cr_cfg;
  auto* crop_cmd = app.add_subcommand("crop", "Crop a registered mask to the template syndesmosis box");
  crop_cmd->add_option("--mask", cr_mask, "Registered mask on the template grid")->required()->check(CLI::ExistingFile);
  crop_cmd->add_option("--healthy", cr_healthy, "Healthy template")->required()->check(CLI::ExistingFile);
  crop_cmd->add_option("--lo", cr_lo, "Syndesmosis lower slice")->required();
  crop_cmd->add_option("--hi", cr_hi, "Syndesmosis upper slice")->required();
  crop_cmd->add_option("--out", cr_out, "Output RVOL")->required();
  crop_cmd->add_option("--below", cr_cfg.below, "Slices below the syndesmosis");
  crop_cmd->add_option("--above", cr_cfg.above, "Slices above the syndesmosis");
  crop_cmd->add_option("--margin", cr_cfg.xy_margin, "In-plane margin in voxels");

  // train
  std::string tr_data, tr_out, tr_config, tr_profile = "desk";
  double tr_frac = 1.0;
  int tr_epochs = -1;
  std::uint64_t tr_seed = 0;
  bool tr_supervised = false;
  auto* train = app.add_subcommand("train", "Register, crop and train on a dataset directory");
  train->add_option("--data", tr_data, "Dataset directory with manifest.csv")->required();
  train->add_option("--labeled-frac", tr_frac, "Fraction of labeled cases that keep their labels")
      ->check(CLI::Range(0.0, 1.0));
  train->add_option("--epochs", tr_epochs, "Training epochs");
  train->add_option("--seed", tr_seed, "Random seed");
  train->add_option("--out", tr_out, "Checkpoint directory")->required();
  train->add_option("--config", tr_config, "Pipeline config JSON");
  train->add_option("--profile", tr_profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  train->add_flag("--supervised-only", tr_supervised, "Labeled data only, lambda = 0");

  // evaluate
  std::string ev_ckpt, ev_data, ev_out;
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on the test split");
  evaluate->add_option("--ckpt", ev_ckpt, "Checkpoint file or training directory")->required();
  evaluate->add_option("--data", ev_data, "Dataset directory")->required();
  evaluate->add_option("--out", ev_out, "Report CSV (stdout if omitted)");

  // report
  std::string rp_ckpt, rp_data, rp_out;
  auto* report = app.add_subcommand("report", "Write report.csv, confusion.csv and report.txt");
  report->add_option("--ckpt", rp_ckpt, "Checkpoint file or training directory")->required();
  report->add_option("--data", rp_data, "Dataset directory")->required();
  report->add_option("--out", rp_out, "Output directory")->required();

  // run
  std::string rn_config, rn_out, rn_profile = "desk";
  auto* run = app.add_subcommand("run", "Run the whole pipeline from a config");
  run->add_option("--config", rn_config, "Pipeline config JSON");
  run->add_option("--profile", rn_profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  run->add_option("--out", rn_out, "Artifacts directory")->required();

  // config
  std::string cf_config, cf_out, cf_profile = "desk";
  auto* config = app.add_subcommand("config", "Print the effective configuration");
  config->add_option("--config", cf_config, "Pipeline config JSON");
  config->add_option("--profile", cf_profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  config->add_option("--out", cf_out, "Write to file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*phantom) {
      PipelineConfig cfg = PipelineConfig::desk();
      cfg.data.difficulty = ph_difficulty;
      Dataset d;
      try {
        d = make_dataset(ph_labeled, ph_unlabeled, ph_test, ranges_for(cfg), ph_seed);
        write_dataset(d, ph_out);
      } catch (const std::exception& e) {
        throw StageError("data", e.what());
      }
      std::printf("wrote %zu cases to %s\n", d.samples.size(), ph_out.c_str());
    } else if (*reg) {
      RegistrationOptions opts;
      opts.icp = rg_icp;
      opts.mirror = !rg_no_mirror;
      RegistrationResult r;
      try {
        r = register_pair(load_mask(rg_fractured), load_mask(rg_healthy), opts);
        if (!rg_warped.empty()) save_mask(r.transformed, rg_warped);
      } catch (const std::exception& e) {
        throw StageError("register", e.what());
      }
      write_transform(r, rg_out);
    } else if (*crop_cmd) {
      try {
        const Mask healthy = load_mask(cr_healthy);
        const BBox box = syndesmosis_box(healthy, cr_lo, cr_hi, cr_cfg.below, cr_cfg.above, cr_cfg.xy_margin);
        save_mask(crop_syndesmosis(load_mask(cr_mask), box), cr_out);
      } catch (const std::exception& e) {
        throw StageError("crop", e.what());
      }
    } else if (*train) {
      PipelineConfig cfg;
      try {
        cfg = base_config(tr_config, tr_profile);
        cfg.seed = tr_seed;
        cfg.data.dir = tr_data;
        if (train->count("--labeled-frac")) cfg.data.labeled_frac = tr_frac;
        if (tr_epochs > 0) cfg.train.epochs = tr_epochs;
        if (tr_supervised) {
          cfg.train.use_unlabeled = false;
          cfg.train.lambda = 0.0;
        }
        cfg.validate();
      } catch (const std::exception& e) {
        throw StageError("config", e.what());
      }
      fs::create_directories(tr_out);
      save_config(cfg, fs::path(tr_out) / "effective_config.json");
      std::vector<Case> cases;
      try {
        cases = load_cases(tr_data);
      } catch (const std::exception& e) {
        throw StageError("data", e.what());
      }
      const Splits splits = build_splits(cases, prepare_all(cases, cfg), cfg);
      const fs::path ckpt = fs::path(tr_out) / "model.ckpt";
      const TrainOutcome out = train_and_evaluate(splits, cfg, &ckpt);
      write_train_log(out.logs, fs::path(tr_out) / "train_log.csv");
      std::printf("labeled %zu unlabeled %zu test %zu; test accuracy %.4f\n", splits.labeled.size(),
                  splits.unlabeled.size(), splits.test.size(), out.test_accuracy);
    } else if (*evaluate) {
      const TrainOutcome out = evaluate_checkpoint(ev_ckpt, ev_data);
      if (ev_out.empty()) {
        out.report.write_csv(std::cout);
      } else {
        std::ofstream os(ev_out);
        if (!os) throw StageError("report", "cannot write " + ev_out);
        out.report.write_csv(os);
      }
    } else if (*report) {
      const TrainOutcome out = evaluate_checkpoint(rp_ckpt, rp_data);
      write_report(out.report, rp_out);
      out.report.write_text(std::cout);
    } else if (*run) {
      PipelineConfig cfg;
      try {
        cfg = base_config(rn_config, rn_profile);
      } catch (const std::exception& e) {
        throw StageError("config", e.what());
      }
      const TrainOutcome out = run_pipeline(cfg, rn_out);
      out.report.write_text(std::cout);
    } else if (*config) {
      PipelineConfig cfg;
      try {
        cfg = base_config(cf_config, cf_profile);
      } catch (const std::exception& e) {
        throw StageError("config", e.what());
      }
      if (cf_out.empty())
        std::cout << cfg.to_json().dump(2) << '\n';
      else
        save_config(cfg, cf_out);
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kStageFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kStageFailure;
  }
  return 0;
}
