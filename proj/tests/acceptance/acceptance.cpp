#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "weberline/pipeline.hpp"

using namespace weberline;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and sizes of each criterion.
constexpr int kIcpPairs = 100;
constexpr double kIcpMaxDeg = 15.0;
constexpr double kIcpMaxMm = 10.0;
constexpr double kIcpMinDice = 0.95;
constexpr double kExactRms = 1e-6;
constexpr double kIcpSecondsPerPair = 1.0;

constexpr int kGradShapes = 20;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;

constexpr int kMetricInstances = 200;
constexpr double kMetricTol = 1e-12;

constexpr int kLossSets = 100;
constexpr double kLossTol = 1e-12;

constexpr int kSslSeeds = 5;
constexpr double kSslLabeledFrac = 0.2;
constexpr double kSslMinGain = 0.03;
constexpr double kSslSecondsPerRun = 600.0;

constexpr double kEasyMinAccuracy = 0.90;

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("%s %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / "weberline_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---- 1. registration -------------------------------------------------------

// Shortened bones centred in a 32³ grid at 1.5 mm leave about 12 mm of room on
// every side. A pose that still pushes bone into the outer voxel shell is redrawn.
PhantomParams icp_phantom(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(0.9, 1.1);
  PhantomParams p;
  p.syndesmosis_lo = 14;
  p.syndesmosis_hi = 18;
  p.top_margin = 8;
  p.tibia_radius *= jitter(rng);
  p.fibula_radius *= jitter(rng);
  p.fracture_gap = 2;
  p.fracture_z = std::uniform_int_distribution<int>(p.fibula_bottom() + 2, p.top() - p.fracture_gap - 1)(rng);
  p.pose_rotation_deg = kIcpMaxDeg;
  p.pose_shift_mm = kIcpMaxMm;
  return p;
}

bool touches_border(const Mask& m) {
  const auto& d = m.grid.dims;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i)
        if (m.at(i, j, k) != kBackground &&
            (i == 0 || j == 0 || k == 0 || i == d[0] - 1 || j == d[1] - 1 || k == d[2] - 1))
          return true;
  return false;
}

// The fractured scan resampled with the true pose, aligned on the template
// grid. This is the best Dice any rigid registration plus nearest-neighbour warp
// can reach, since both masks are quantized independently.
Mask ideal_alignment(const PhantomPair& pp) {
  const Grid& g = pp.healthy.grid;
  Mask out(g);
  const double cx = g.extent()[0] / 2;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 c = g.center(i, j, k);
        const Eigen::Vector3d q = pp.pose * Eigen::Vector3d(2 * cx - c[0], c[1], c[2]);
        const Vec3 u = g.continuous_index({q.x(), q.y(), q.z()});
        const int a = int(std::floor(u[0] + 0.5)), b = int(std::floor(u[1] + 0.5)), d = int(std::floor(u[2] + 0.5));
        if (pp.fractured.grid.contains(a, b, d)) out.at(i, j, k) = pp.fractured.at(a, b, d);
      }
  return out;
}

void criterion_icp() {
  std::mt19937_64 rng(101);
  double min_dice = 1.0, mean_dice = 0.0, min_ceiling = 1.0, mean_ceiling = 0.0;
  double worst_exact = 0.0, worst_time = 0.0, worst_angle = 0.0, worst_shift = 0.0;
  int rejected = 0, exact_ok = 0, dice_ok = 0;
  for (int pair = 0; pair < kIcpPairs; ++pair) {
    const PhantomParams p = icp_phantom(rng);
    PhantomPair pp;
    do {
      pp = generate_pair(p, rng());
      if (!touches_border(pp.fractured)) break;
      ++rejected;
    } while (true);
    worst_angle = std::max(worst_angle, Eigen::AngleAxisd(pp.pose.rotation()).angle() * 180.0 / M_PI);
    const Vec3 ext = pp.healthy.grid.extent();
    const Eigen::Vector3d pivot(ext[0] / 2, ext[1] / 2, ext[2] / 2);
    worst_shift = std::max(worst_shift, (pp.pose * pivot - pivot).norm());

    const auto t0 = Clock::now();
    const RegistrationResult r = register_pair(pp.fractured, pp.healthy);
    worst_time = std::max(worst_time, seconds_since(t0));
    const double d = dice(r.transformed, pp.healthy), c = dice(ideal_alignment(pp), pp.healthy);
    dice_ok += d >= kIcpMinDice;
    min_dice = std::min(min_dice, d);
    mean_dice += d / kIcpPairs;
    min_ceiling = std::min(min_ceiling, c);
    mean_ceiling += c / kIcpPairs;

    // Exact rigid copies: the template surface against a copy moved by the same
    // pose, and the mirrored template against the template.
    RigidTransform gt;
    gt.rotation = pp.pose.rotation();
    gt.translation = pp.pose.translation();
    const PointCloud hs = extract_surface_points(pp.healthy);
    const double e = std::max(icp(gt.apply(hs), hs).rms_residual,
                              register_pair(flip(pp.healthy, Axis::X), pp.healthy).rms_residual);
    exact_ok += e < kExactRms;
    worst_exact = std::max(worst_exact, e);
  }
  const bool ok = dice_ok == kIcpPairs && exact_ok == kIcpPairs && worst_time < kIcpSecondsPerPair;
  report(1, "icp-recovery", ok,
         fmt("%d pairs at 32^3 (pose up to %.1f deg / %.1f mm, %d redraws); Dice >= %.2f in %d/%d, min %.4f mean %.4f "
             "(true-pose ceiling min %.4f mean %.4f); exact copies RMS < %.0e in %d/%d, max %.3g mm; max %.3f s/pair",
             kIcpPairs, worst_angle, worst_shift, rejected, kIcpMinDice, dice_ok, kIcpPairs, min_dice, mean_dice,
             min_ceiling, mean_ceiling, kExactRms, exact_ok, kIcpPairs, worst_exact, worst_time));
}

// ---- 2. gradients ----------------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  const auto results = wltest::gradcheck_suite(2025, kGradShapes);
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  bool enough = true;
  for (const auto& r : results) {
    enough = enough && r.shapes >= kGradShapes;
    if (r.worst >= worst) worst = r.worst, worst_op = r.op;
  }
  report(2, "gradient-check", enough && worst < kGradTol && secs < kGradSeconds,
         fmt("%zu ops x %d shapes, worst rel err %.3g (%s) < %.0e, %.1f s", results.size(), kGradShapes, worst,
             worst_op.c_str(), kGradTol, secs));
}

// ---- 3. metrics ------------------------------------------------------------

double opt_diff(const std::optional<double>& a, const std::optional<double>& b) {
  if (a.has_value() != b.has_value()) return INFINITY;
  return a ? std::abs(*a - *b) : 0.0;
}

void criterion_metrics() {
  std::mt19937_64 rng(303);
  double e_dice = 0, e_hd = 0, e_rates = 0, e_auc = 0;
  for (int n = 0; n < kMetricInstances; ++n) {
    Grid g;
    g.dims = {1 + int(rng() % 12), 1 + int(rng() % 12), 1 + int(rng() % 12)};
    Mask a(g), b(g);
    const unsigned density = 1 + rng() % 5;
    for (auto& v : a.data) v = rng() % density == 0 ? std::uint8_t(1 + rng() % 2) : kBackground;
    for (auto& v : b.data) v = rng() % density == 0 ? std::uint8_t(1 + rng() % 2) : kBackground;
    e_dice = std::max(e_dice, std::abs(dice(a, b) - wltest::brute_dice(a, b)));
  }
  for (int n = 0; n < kMetricInstances; ++n) {
    std::uniform_real_distribution<double> u(-20, 20);
    std::uniform_int_distribution<int> q(0, 8);
    PointCloud a, b;
    const int na = 1 + rng() % 60, nb = 1 + rng() % 60;
    // Alternate continuous and lattice clouds; the lattice makes tied distances.
    const bool lattice = n % 2 == 1;
    for (int i = 0; i < na; ++i)
      a.points.push_back(lattice ? Eigen::Vector3d(q(rng), q(rng), q(rng) * 1.5) : Eigen::Vector3d(u(rng), u(rng), u(rng)));
    for (int i = 0; i < nb; ++i)
      b.points.push_back(lattice ? Eigen::Vector3d(q(rng), q(rng), q(rng) * 1.5) : Eigen::Vector3d(u(rng), u(rng), u(rng)));
    e_hd = std::max(e_hd, std::abs(hd95(a, b) - wltest::brute_hd95(a, b)));
  }
  for (int n = 0; n < kMetricInstances; ++n) {
    const int size = 1 + rng() % 80;
    std::vector<int> truth(size), pred(size);
    for (int i = 0; i < size; ++i) truth[i] = rng() % 2, pred[i] = rng() % 2;
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    for (int i = 0; i < size; ++i) {
      tp += truth[i] && pred[i];
      tn += !truth[i] && !pred[i];
      fp += !truth[i] && pred[i];
      fn += truth[i] && !pred[i];
    }
    const BinaryRates got = binary_rates(one_vs_rest(confusion(truth, pred, 2), 1));
    // Voxel-counting style oracle: each rate as a ratio of direct counts.
    auto ratio = [](long long num, long long den) {
      return den == 0 ? std::optional<double>{} : std::optional<double>(double(num) / double(den));
    };
    e_rates = std::max({e_rates, opt_diff(got.accuracy, ratio(tp + tn, size)), opt_diff(got.precision, ratio(tp, tp + fp)),
                        opt_diff(got.specificity, ratio(tn, tn + fp)), opt_diff(got.sensitivity, ratio(tp, tp + fn))});
  }
  for (int n = 0; n < kMetricInstances; ++n) {
    std::vector<double> pos(1 + rng() % 40), neg(1 + rng() % 40);
    const bool coarse = n % 2 == 0;
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& s : pos) s = coarse ? double(rng() % 6) / 6 : u(rng);
    for (auto& s : neg) s = coarse ? double(rng() % 6) / 6 : u(rng);
    e_auc = std::max(e_auc, std::abs(auroc(pos, neg) - wltest::pairwise_auroc(pos, neg)));
  }
  const double worst = std::max({e_dice, e_hd, e_rates, e_auc});
  report(3, "metric-oracles", worst <= kMetricTol,
         fmt("%d instances each; max |diff| dice %.2g, hd95 %.2g, binary_rates %.2g, auroc %.2g (<= %.0e)",
             kMetricInstances, e_dice, e_hd, e_rates, e_auc, kMetricTol));
}

// ---- 4. loss algebra -------------------------------------------------------

void criterion_losses() {
  std::mt19937_64 rng(404);
  bool composition_exact = true;
  double e_ce = 0, e_self = 0, e_sym = 0;
  for (int rep = 0; rep < kLossSets; ++rep) {
    const int n = 2 + rng() % 30, m = 2 + rng() % 30, d = 1 + rng() % 16, k = 3;
    const tn::Tensor x = tn::Tensor::constant({n, d}, wltest::uniform(rng, n * d, -3, 3));
    const tn::Tensor y = tn::Tensor::constant({m, d}, wltest::uniform(rng, m * d, -3, 3));
    const auto z = wltest::uniform(rng, n * k, -5, 5);
    const tn::Tensor logits = tn::Tensor::constant({n, k}, z);
    const auto pl = ssl::pseudo_label(z, k);
    std::vector<int> labels(n);
    for (auto& l : labels) l = rng() % k;

    const std::vector<double> ones(n, 1.0);
    const double lu = ssl::loss_unsupervised(logits, pl.labels, ones).item();
    e_ce = std::max(e_ce, std::abs(lu - wltest::naive_ce(z, k, pl.labels)));
    const double lu_w = ssl::loss_unsupervised(logits, pl.labels, ones, ssl::Weighting::LossWeight).item();
    e_ce = std::max(e_ce, std::abs(lu_w - wltest::naive_ce(z, k, pl.labels)));

    const double mxy = ssl::loss_mmd(x, y).item(), myx = ssl::loss_mmd(y, x).item();
    e_sym = std::max(e_sym, std::abs(mxy - myx));
    e_self = std::max(e_self, std::abs(ssl::loss_mmd(x, x).item()));

    const double ll = ssl::loss_supervised(logits, labels).item();
    const double lambda = rep == 0 ? ssl::kDefaultLambda : std::uniform_real_distribution<double>(0, 30)(rng);
    const double total = ssl::loss_total(tn::Tensor::scalar(ll), tn::Tensor::scalar(lu), tn::Tensor::scalar(mxy), lambda).item();
    composition_exact = composition_exact && total == ll + lu + lambda * mxy;
  }
  const bool ok = composition_exact && e_ce <= kLossTol && e_self <= kLossTol && e_sym <= kLossTol;
  report(4, "loss-algebra", ok,
         fmt("%d sets; total %s, unit-weight vs CE %.2g, MMD(X,X) %.2g, |MMD(X,Y)-MMD(Y,X)| %.2g (<= %.0e)", kLossSets,
             composition_exact ? "bitwise exact" : "NOT exact", e_ce, e_self, e_sym, kLossTol));
}

// ---- 5. semi-supervised benefit --------------------------------------------

void criterion_ssl() {
  double sum_ssl = 0, sum_sup = 0, worst_run = 0;
  std::string per_seed;
  for (int s = 0; s < kSslSeeds; ++s) {
    PipelineConfig cfg = PipelineConfig::desk();
    cfg.seed = 1000 + s;
    cfg.data.labeled_frac = kSslLabeledFrac;
    auto t0 = Clock::now();
    const Dataset d = make_dataset(cfg.data.n_labeled, cfg.data.n_unlabeled, cfg.data.n_test, ranges_for(cfg), cfg.seed);
    const auto cases = cases_from_dataset(d);
    const Splits splits = build_splits(cases, prepare_all(cases, cfg), cfg);
    const double prep = seconds_since(t0);

    t0 = Clock::now();
    const double acc_ssl = train_and_evaluate(splits, cfg).test_accuracy;
    worst_run = std::max(worst_run, prep + seconds_since(t0));

    PipelineConfig sup = cfg;
    sup.train.use_unlabeled = false;
    sup.train.lambda = 0.0;
    t0 = Clock::now();
    const double acc_sup = train_and_evaluate(splits, sup).test_accuracy;
    worst_run = std::max(worst_run, prep + seconds_since(t0));

    std::fprintf(stderr, "  seed %d: ssl %.4f supervised %.4f\n", 1000 + s, acc_ssl, acc_sup);
    per_seed += fmt(" %.3f/%.3f", acc_ssl, acc_sup);
    sum_ssl += acc_ssl;
    sum_sup += acc_sup;
  }
  const double m_ssl = sum_ssl / kSslSeeds, m_sup = sum_sup / kSslSeeds, gain = m_ssl - m_sup;
  report(5, "ssl-benefit", gain >= kSslMinGain && worst_run < kSslSecondsPerRun,
         fmt("%d seeds at %.0f%% labels: mean ssl %.4f vs supervised %.4f, gain %+.4f (>= %.2f); max %.0f s/run; "
             "ssl/sup per seed:%s",
             kSslSeeds, 100 * kSslLabeledFrac, m_ssl, m_sup, gain, kSslMinGain, worst_run, per_seed.c_str()));
}

// ---- 6 and 7. end to end, determinism -----------------------------------------

PipelineConfig easy_desk() {
  PipelineConfig cfg = PipelineConfig::desk();
  cfg.data.difficulty = "easy";
  cfg.seed = 7;
  return cfg;
}

void criterion_end_to_end(const fs::path& out) {
  const auto t0 = Clock::now();
  const TrainOutcome r = run_pipeline(easy_desk(), out);
  const double secs = seconds_since(t0);
  int expected[kNumClasses] = {0, 0, 0};
  for (const auto& row : read_manifest(out / "data"))
    if (row.split == Split::Test) ++expected[static_cast<int>(*row.label)];
  const auto& cm = r.report.confusion;
  bool rows_ok = cm.classes() == kNumClasses;
  std::string sums;
  for (int i = 0; i < kNumClasses && rows_ok; ++i) {
    rows_ok = cm.row_sum(i) == expected[i];
    sums += fmt("%s%lld/%d", i ? " " : "", cm.row_sum(i), expected[i]);
  }
  int csv_rows = 0;
  {
    std::ifstream is(out / "confusion.csv");
    std::string line;
    while (std::getline(is, line)) csv_rows += line.rfind("count,", 0) == 0;
  }
  rows_ok = rows_ok && csv_rows == kNumClasses;
  report(6, "end-to-end-easy", r.test_accuracy >= kEasyMinAccuracy && rows_ok,
         fmt("test accuracy %.4f (>= %.2f), 3x3 row sums %s (rows/expected), %.0f s", r.test_accuracy, kEasyMinAccuracy,
             sums.c_str(), secs));
}

void criterion_determinism(const fs::path& first, const fs::path& second) {
  run_pipeline(easy_desk(), second);
  const std::string a = slurp(first / "report.csv"), b = slurp(second / "report.csv");
  report(7, "determinism", !a.empty() && a == b,
         fmt("report.csv %zu vs %zu bytes, %s", a.size(), b.size(), a == b ? "identical" : "DIFFERENT"));
}

// ---- 8. profile constants --------------------------------------------------

void criterion_paper_constants(const fs::path& dir) {
  const fs::path dump = dir / "paper.json";
  const std::string cmd =
      std::string("\"") + WEBERLINE_CLI_PATH + "\" config --profile paper --out \"" + dump.string() + "\"";
  const int rc = std::system(cmd.c_str());
  bool ok = rc == 0 && fs::exists(dump);
  std::string detail = fmt("cli exit %d", rc);
  if (ok) {
    const auto j = nlohmann::json::parse(slurp(dump));
    const auto& icp = j.at("icp");
    const auto& t = j.at("train");
    ok = icp.at("max_iter") == 50 && icp.at("eps") == 1e-8 && t.at("lambda") == 15.0 && t.at("threshold") == 0.5 &&
         t.at("lr") == 1e-3 && t.at("momentum") == 0.9 && t.at("batch") == 32 && j.at("profile") == "paper";
    detail = fmt("max_iter=%s eps=%s lambda=%s threshold=%s lr=%s momentum=%s batch=%s", icp.at("max_iter").dump().c_str(),
                 icp.at("eps").dump().c_str(), t.at("lambda").dump().c_str(), t.at("threshold").dump().c_str(),
                 t.at("lr").dump().c_str(), t.at("momentum").dump().c_str(), t.at("batch").dump().c_str());
  }
  report(8, "profile-constants", ok, detail);
}

template <class F>
void guarded(int id, const char* name, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Optional list of criterion numbers to run, e.g. `acceptance 1 5`.
  std::vector<bool> on(9, argc <= 1);
  for (int i = 1; i < argc; ++i) {
    const int id = std::atoi(argv[i]);
    if (id >= 1 && id <= 8) on[id] = true;
  }
  const fs::path root = scratch("run");
  if (on[1]) guarded(1, "icp-recovery", criterion_icp);
  if (on[2]) guarded(2, "gradient-check", criterion_gradients);
  if (on[3]) guarded(3, "metric-oracles", criterion_metrics);
  if (on[4]) guarded(4, "loss-algebra", criterion_losses);
  if (on[5]) guarded(5, "ssl-benefit", criterion_ssl);
  if (on[6] || on[7]) {
    guarded(6, "end-to-end-easy", [&] { criterion_end_to_end(root / "easy_a"); });
    if (on[7]) guarded(7, "determinism", [&] { criterion_determinism(root / "easy_a", root / "easy_b"); });
  }
  if (on[8]) guarded(8, "profile-constants", [&] { criterion_paper_constants(root); });
  return failures == 0 ? 0 : 1;
}
