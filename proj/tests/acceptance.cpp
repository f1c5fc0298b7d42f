// End-to-end acceptance run. Prints one PASS/FAIL line per check and exits
// non-zero if any check fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "fvtb/bench.hpp"
#include "fvtb/elda.hpp"
#include "fvtb/gaussian.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image_io.hpp"
#include "fvtb/paireddict.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/sparse.hpp"
#include "fvtb/store.hpp"
#include "oracles/gauss_mode.hpp"
#include "oracles/lasso_enum.hpp"
#include "oracles/naive_detect.hpp"
#include "oracles/naive_hog.hpp"
#include "test_util.hpp"

using namespace fvtb;
namespace fs = std::filesystem;

namespace {

constexpr double kMeanTol = 1e-8;
constexpr double kDensityTol = 1e-5;
constexpr double kGaussSeconds = 10;
constexpr double kLassoTol = 1e-4;
constexpr double kLassoSeconds = 30;
constexpr double kMonotoneSlack = 1e-9;
constexpr double kRecoveryCosine = 0.95;
constexpr double kLearnSeconds = 120;
constexpr double kHogTol = 1e-6;
constexpr double kGainTol = 1e-5;
constexpr std::size_t kMinDeskPatches = 100;
constexpr double kPairNcc = 0.45;
constexpr double kBeatsBaseline = 0.80;
constexpr double kDeskSeconds = 30 * 60;
constexpr double kSharper = 0.70;
constexpr double kSelfNcc = 0.99;
constexpr double kPairedSeconds = 2;
constexpr double kRidgeSeconds = 1;

const std::string kDesk = FVTB_TEST_DATA "/desk";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Shared desk models, trained once with default settings.

struct Desk {
  std::shared_ptr<const StationaryModel> gaussian;
  std::shared_ptr<const PairedDictionary> paired;
  std::vector<Annotation> ann;
  fs::path root;
  double train_seconds = 0;
};

const Desk& desk() {
  static const Desk d = [] {
    const auto t0 = Clock::now();
    Desk d;
    const auto train = ImageSource::open(kDesk + "/train.json");
    FitConfig fc;
    fc.threads = default_threads();
    d.gaussian = std::make_shared<StationaryModel>(fit_stationary(train, fc));
    PairedConfig pc;
    pc.threads = default_threads();
    d.paired = std::make_shared<PairedDictionary>(train_paired(train, pc));
    d.ann = load_annotations(kDesk + "/test.jsonl");
    d.root = ImageSource::open(kDesk + "/test.json").manifest().root;
    d.train_seconds = seconds_since(t0);
    std::printf("  desk models trained in %.1f s (K=%d, N=%zu)\n", d.train_seconds,
                static_cast<int>(d.paired->u.matrix.cols()), pc.n_samples);
    return d;
  }();
  return d;
}

struct DeskBench {
  BenchmarkReport report;
  double seconds = 0;
};

const DeskBench& desk_bench() {
  static const DeskBench b = [] {
    const auto& d = desk();
    const auto t0 = Clock::now();
    Algorithms algos;
    algos.set_paired(d.paired);
    algos.set_gaussian(d.gaussian);
    BenchConfig cfg;
    cfg.threads = default_threads();
    DeskBench b;
    b.report = run_benchmark(d.root, d.ann, {"pair", "ridge"}, algos, cfg);
    b.seconds = seconds_since(t0);
    return b;
  }();
  return b;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd a(n, n);
  for (auto& v : a.reshaped()) v = g(rng);
  return a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

Outcome conditional_mode() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7001);
  std::normal_distribution<double> gn;
  std::uniform_int_distribution<int> dD(1, 6), dd(1, 4);
  double worst_mean = 0, worst_density = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int D = dD(rng), d = dd(rng);
    const Eigen::MatrixXd cov = random_spd(D + d, rng);
    Eigen::VectorXd mu_x(D), mu_y(d), y(d);
    for (auto& v : mu_x) v = gn(rng);
    for (auto& v : mu_y) v = gn(rng);
    for (auto& v : y) v = 2 * gn(rng);
    const double lam = 1e-3;
    const auto g = MaterializedGaussian::from_blocks(mu_x, mu_y, cov.topLeftCorner(D, D), cov.topRightCorner(D, d),
                                                     cov.bottomRightCorner(d, d), lam);
    Eigen::MatrixXd joint = cov;
    joint.diagonal().array() += lam;
    HogDescriptor h(1, 1, d);
    h.data.assign(y.data(), y.data() + d);
    const auto r = ridge_invert(g, h);
    const Eigen::VectorXd got = Eigen::Map<const Eigen::VectorXd>(r.raw.data.data(), D);

    const Eigen::MatrixXd prec = joint.inverse();
    const Eigen::VectorXd analytic =
        mu_x - prec.topLeftCorner(D, D).ldlt().solve(prec.topRightCorner(D, d) * (y - mu_y));
    worst_mean = std::max(worst_mean, (got - analytic).cwiseAbs().maxCoeff());
    const Eigen::VectorXd brute = oracle::density_argmax(mu_x, mu_y, joint, y);
    worst_density = std::max(worst_density, (got - brute).cwiseAbs().maxCoeff());
  }
  const double s = seconds_since(t0);
  return {worst_mean <= kMeanTol && worst_density <= kDensityTol && s < kGaussSeconds,
          fmt("20 joints, max |err| analytic %.2e, density search %.2e, %.2f s", worst_mean, worst_density, s)};
}

Outcome sparse_coding() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7002);
  std::normal_distribution<double> n;
  std::uniform_real_distribution<double> u(0.05, 3.0);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const int k = 2 + trial % 5;
    Eigen::MatrixXd D(8, k);
    for (auto& v : D.reshaped()) v = n(rng);
    D.colwise().normalize();
    Eigen::VectorXd y(8);
    for (auto& v : y) v = n(rng);
    const double lambda = u(rng);
    const auto sc = sparse_code(Dictionary(D), y, lambda);
    const auto ref = oracle::lasso_enumerate(D, y, lambda);
    worst = std::max(worst, std::abs(sc.objective - ref.objective));
  }
  const double s = seconds_since(t0);
  return {worst <= kLassoTol && s < kLassoSeconds, fmt("25 instances, max objective gap %.2e, %.2f s", worst, s)};
}

Outcome dictionary_learning() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(7003);
  std::normal_distribution<double> g;
  Eigen::MatrixXd x(10, 200);
  for (auto& v : x.reshaped()) v = g(rng);
  const auto r = learn_dictionary(x, 15, 2.0, 12, 99);
  double worst_rise = -1e300;
  for (std::size_t e = 1; e < r.objectives.size(); ++e)
    worst_rise = std::max(worst_rise, r.objectives[e] - r.objectives[e - 1]);
  const bool monotone = worst_rise <= kMonotoneSlack;

  const int dim = 16, count = 500;
  const Eigen::MatrixXd Q =
      Eigen::HouseholderQR<Eigen::MatrixXd>(Eigen::MatrixXd::NullaryExpr(dim, dim, [&] { return g(rng); }))
          .householderQ();
  const Eigen::MatrixXd truth = Q.leftCols(4);
  Eigen::MatrixXd data = Eigen::MatrixXd::Zero(dim, count);
  std::uniform_int_distribution<int> pick(0, 3);
  std::uniform_real_distribution<double> mag(0.5, 1.5);
  std::bernoulli_distribution flip;
  for (int i = 0; i < count; ++i) {
    const int a = pick(rng);
    int b = pick(rng);
    while (b == a) b = pick(rng);
    data.col(i) = truth.col(a) * mag(rng) * (flip(rng) ? 1 : -1) + truth.col(b) * mag(rng) * (flip(rng) ? 1 : -1);
  }
  const auto learned = learn_dictionary(data, 4, 1.0, 40, 5);
  const Eigen::MatrixXd atoms = learned.dictionary.matrix.colwise().normalized();
  const Eigen::MatrixXd sim = (truth.transpose() * atoms).cwiseAbs();
  double worst_cos = 1;
  for (int j = 0; j < 4; ++j) worst_cos = std::min(worst_cos, sim.row(j).maxCoeff());
  const double s = seconds_since(t0);
  return {monotone && worst_cos > kRecoveryCosine && s < kLearnSeconds,
          fmt("largest epoch-to-epoch change %+.2e, worst atom cosine %.4f, %.2f s", worst_rise, worst_cos, s)};
}

Outcome hog_correctness() {
  double worst = 0;
  for (int seed = 0; seed < 50; ++seed) {
    const auto img = test_util::random_image(48, 48, 7100 + seed);
    const auto a = compute_hog(img), b = oracle::naive_hog(img);
    if (a.data.size() != b.data.size()) return {false, "oracle geometry differs"};
    for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  }
  bool additive = true;
  double gain = 0;
  for (int seed = 0; seed < 20; ++seed) {
    const auto img = test_util::random_image(64, 64, 7200 + seed, 1, 0.0, 0.9);
    const auto base = compute_hog(img);
    auto shifted = img;
    for (double& v : shifted.data) v += 0.1;
    additive = additive && compute_hog(shifted).data == base.data;
    for (double a : {0.25, 0.5, 0.8}) {
      auto scaled = img;
      for (double& v : scaled.data) v *= a;
      const auto h = compute_hog(scaled);
      for (std::size_t i = 0; i < h.data.size(); ++i) gain = std::max(gain, std::abs(h.data[i] - base.data[i]));
    }
  }
  return {worst <= kHogTol && additive && gain <= kGainTol,
          fmt("50 images max |err| %.2e, additive %s, gain max |err| %.2e", worst, additive ? "exact" : "NOT exact",
              gain)};
}

Outcome patchwork() {
  std::vector<Image> imgs;
  for (int i = 0; i < 8; ++i) imgs.push_back(test_util::shapes_image(96, 96, 7300 + i));
  PairedConfig cfg;
  cfg.k = 48;
  cfg.n_samples = 600;
  cfg.epochs = 4;
  cfg.seed = 11;
  const PairedInverter inv(train_paired(ImageSource::from_images(imgs), cfg));
  const auto y = compute_hog(test_util::shapes_image(64, 64, 7399));
  const auto r = inv.invert(y, 3);

  Image sum(64, 64, 1), cover(64, 64, 1);
  for (int wy = 0; wy < 2; ++wy)
    for (int wx = 0; wx < 2; ++wx) {
      const auto win = y.window(wx, wy, 5, 5);
      const Eigen::VectorXd p = inv.invert_patch(
          Eigen::Map<const Eigen::VectorXd>(win.data.data(), static_cast<Eigen::Index>(win.data.size())));
      for (int py = 0; py < 40; ++py)
        for (int px = 0; px < 40; ++px) {
          sum.at(8 * (wx + 1) + px, 8 * (wy + 1) + py) += p(py * 40 + px);
          cover.at(8 * (wx + 1) + px, 8 * (wy + 1) + py) += 1;
        }
    }
  Image expect(64, 64, 1);
  for (int py = 0; py < 64; ++py)
    for (int px = 0; px < 64; ++px) {
      const int sx = std::clamp(px, 8, 55), sy = std::clamp(py, 8, 55);
      expect.at(px, py) = sum.at(sx, sy) / cover.at(sx, sy);
    }
  std::size_t differ = 0;
  for (std::size_t i = 0; i < expect.data.size(); ++i) differ += r.raw.data[i] != expect.data[i];
  return {differ == 0, fmt("6x6 cells, 3 workers, %zu of %zu pixels differ", differ, expect.data.size())};
}

Outcome desk_quality() {
  const auto& d = desk();
  const auto& b = desk_bench();
  const auto& rep = b.report;
  std::map<std::string, std::pair<std::size_t, std::size_t>> beats;  // algorithm -> (wins, total)
  for (const auto& p : rep.patches) {
    auto& [wins, total] = beats[p.algorithm];
    ++total;
    wins += p.feature_error < p.baseline_error;
  }
  const auto* pair_row = rep.row("all", "pair");
  const auto* ridge_row = rep.row("all", "ridge");
  if (!pair_row || !ridge_row) return {false, "benchmark produced no aggregate rows"};
  const double pair_ncc = pair_row->mean;
  const double ridge_ncc = ridge_row->mean;
  const std::size_t n = pair_row->count;
  const double fp = static_cast<double>(beats["pair"].first) / beats["pair"].second;
  const double fr = static_cast<double>(beats["ridge"].first) / beats["ridge"].second;
  const double total = d.train_seconds + b.seconds;
  const bool ok = n >= kMinDeskPatches && ridge_row->count == n && pair_ncc >= kPairNcc &&
                  fp >= kBeatsBaseline && fr >= kBeatsBaseline && total < kDeskSeconds;
  return {ok, fmt("%zu patches, mean NCC pair %.4f ridge %.4f, beat baseline pair %.1f%% ridge %.1f%%, %.0f s", n,
                  pair_ncc, ridge_ncc, 100 * fp, 100 * fr, total)};
}

Outcome size_monotonicity() {
  const auto& d = desk();
  Algorithms algos;
  algos.set_paired(d.paired);
  BenchConfig cfg;
  cfg.threads = default_threads();
  const auto sw = size_sweep(d.root, d.ann, "pair", {{5, 5}, {20, 20}}, algos, cfg);
  std::map<std::size_t, double> small, large;
  for (const auto& p : sw.patches) (p.cells_x == 5 ? small : large)[p.index] = p.ncc;
  double s5 = 0, s20 = 0;
  std::size_t n = 0;
  for (const auto& [i, v] : large)
    if (auto it = small.find(i); it != small.end()) {
      s5 += it->second;
      s20 += v;
      ++n;
    }
  if (n == 0) return {false, "no patch fits both sizes"};
  return {s20 / n > s5 / n, fmt("%zu shared patches, mean NCC 5x5 %.4f, 20x20 %.4f", n, s5 / n, s20 / n)};
}

Outcome blur_ordering() {
  const auto& rep = desk_bench().report;
  std::map<std::size_t, double> pair, ridge;
  for (const auto& p : rep.patches) (p.algorithm == "pair" ? pair : ridge)[p.index] = p.laplacian;
  std::size_t sharper = 0, n = 0;
  for (const auto& [i, v] : pair)
    if (auto it = ridge.find(i); it != ridge.end()) {
      ++n;
      sharper += v > it->second;
    }
  const double f = n ? static_cast<double>(sharper) / n : 0;
  return {n > 0 && f >= kSharper, fmt("pair sharper than ridge on %zu of %zu patches (%.1f%%)", sharper, n, 100 * f)};
}

Outcome elda_checks() {
  const auto& d = desk();
  const auto src = ImageSource::open(kDesk + "/test.json");
  const Image source_crop = crop(to_luminance(src.load(1)), 64, 48, 96, 96);
  EldaConfig one;
  one.k = 1;
  const auto self = elda_invert(materialize(*d.gaussian, 10, 10), compute_hog(source_crop), src, one);
  const double self_ncc = self.detections.empty() ? -1 : ncc(self.image, source_crop);
  const bool self_ok = !self.detections.empty() && self.detections[0].image_id == 1 && self_ncc >= kSelfNcc;

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> side(64, 120);
  std::vector<Image> imgs;
  for (int i = 0; i < 50; ++i) imgs.push_back(test_util::shapes_image(side(rng), side(rng), 300 + i));
  const auto corpus = ImageSource::from_images(imgs);
  FitConfig fc;
  fc.max_cells = 4;
  const auto m = std::make_shared<StationaryModel>(fit_stationary(corpus, fc));
  const auto t = EldaModel(m).make_template(compute_hog(corpus.load(7)).window(1, 2, 4, 4));
  const auto db = EldaDatabase::build(corpus, {}, 4);
  EldaConfig cfg;
  cfg.k = 20;
  const auto streamed = db.top_detections(t, cfg);
  std::vector<std::vector<Detection>> per_image;
  for (std::size_t i = 0; i < db.size(); ++i) per_image.push_back(db.all_windows(t, i));
  const auto ref = oracle::brute_force_top_k(per_image, 0.5, 20);
  bool same = streamed.size() == ref.size();
  for (std::size_t i = 0; same && i < ref.size(); ++i)
    same = streamed[i].image_id == ref[i].image_id && streamed[i].x == ref[i].x && streamed[i].y == ref[i].y &&
           streamed[i].scale == ref[i].scale && streamed[i].score == ref[i].score;
  return {self_ok && same, fmt("self-retrieval NCC %.4f, streamed top-%zu %s brute force over %zu images", self_ncc,
                               ref.size(), same ? "equals" : "DIFFERS from", db.size())};
}

Outcome runtime() {
  const auto& d = desk();
  const PairedInverter pinv(*d.paired);
  const auto y20 = compute_hog(to_luminance(resize_bilinear(
      ImageSource::open(kDesk + "/test.json").load(0), HogConfig{}.pixels_for(20), HogConfig{}.pixels_for(20))));
  auto t0 = Clock::now();
  pinv.invert(y20, default_threads());
  const double paired_s = seconds_since(t0);

  const auto y10 = compute_hog(to_luminance(crop(ImageSource::open(kDesk + "/test.json").load(1), 64, 48, 96, 96)));
  const RidgeModel ridge(d.gaussian);
  t0 = Clock::now();
  ridge.invert(y10);
  const double cold_s = seconds_since(t0);
  t0 = Clock::now();
  ridge.invert(y10);
  const double ridge_s = seconds_since(t0);
  return {paired_s < kPairedSeconds && ridge_s < kRidgeSeconds,
          fmt("paired 20x20 %.3f s, ridge 10x10 %.3f s (%.2f s including the one-time factorization), %d thread(s)",
              paired_s, ridge_s, cold_s, default_threads())};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& cwd, const std::string& capture) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" FVTB_CLI_PATH "' " + args + " > " + capture + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

template <class Model, class Load>
bool round_trips(const Model& m, Load load, const fs::path& path) {
  const auto bytes = serialize_container(to_container(m));
  save_container(to_container(m), path);
  const auto back = load(load_container(path));
  return slurp(path) == bytes && serialize_container(to_container(back)) == bytes;
}

Outcome determinism_and_persistence() {
  const std::string desk_dir = kDesk;
  const std::string img = "'" + desk_dir + "/images/chelsea.png'";
  const std::string train = "'" + desk_dir + "/train.json'";
  const std::string test = " --manifest '" + desk_dir + "/test.json' --annotations '" + desk_dir + "/test.jsonl'";
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
      {"train-gauss --corpus " + train + " --max-cells 4 --max-images 3 --out g.fvtb", {"g.fvtb"}},
      {"train-pair --corpus " + train + " --k 24 --samples 400 --epochs 2 --out p.fvtb", {"p.fvtb"}},
      {"invert --model p.fvtb --image " + img + " --box 64,48,96,96 --cells 8 --side-by-side --out pair.png",
       {"pair.png"}},
      {"invert --model g.fvtb --image " + img + " --box 64,48,96,96 --cells 4 --out ridge.png", {"ridge.png"}},
      {"invert --model g.fvtb --algo elda --corpus '" + desk_dir + "/test.json' --k 4 --image " + img +
           " --box 64,48,96,96 --cells 4 --out elda.png",
       {"elda.png"}},
      {"invert --model g.fvtb --algo direct --restarts 2 --sweeps 2 --image " + img +
           " --box 64,48,96,96 --cells 2 --out direct.png",
       {"direct.png"}},
      {"glyph --image " + img + " --out glyph.png", {"glyph.png"}},
      {"bench" + test + " --algos pair,ridge --cells 4 --pair-model p.fvtb --gauss-model g.fvtb", {"bench.csv", "bench.md"}},
      {"sweep" + test + " --algo ridge --sizes 3x3,4x4 --gauss-model g.fvtb", {"sweep.csv", "sweep.md"}},
      {"stats --json p.fvtb", {"stdout.txt"}},
  };
  const fs::path base = fs::temp_directory_path() / "fvtb_acceptance";
  fs::remove_all(base);
  const fs::path a = base / "a", b = base / "b";
  fs::create_directories(a);
  fs::create_directories(b);
  std::size_t artifacts = 0;
  std::string problem;
  for (const auto& [cmd, outputs] : commands) {
    const int ca = run_cli("--seed 5 --threads 1 " + cmd, a, "stdout.txt");
    const int cb = run_cli("--seed 5 --threads 3 " + cmd, b, "stdout.txt");
    if (ca != 0 || cb != 0) {
      problem = "exit " + std::to_string(ca) + "/" + std::to_string(cb) + ": " + cmd;
      break;
    }
    for (const auto& o : outputs) {
      ++artifacts;
      if (slurp(a / o).empty() || slurp(a / o) != slurp(b / o)) problem = o + " differs";
    }
  }

  const auto& d = desk();
  bool models = round_trips(*d.gaussian, stationary_from_container, base / "gauss.fvtb");
  models = models && round_trips(*d.paired, paired_from_container, base / "pair.fvtb");
  models = models && round_trips(materialize(*d.gaussian, 3, 2, -1, true), materialized_from_container, base / "mat.fvtb");
  models = models && round_trips(image_eigenbasis(*d.gaussian, 8, 4, 40, 40, 8), basis_from_container, base / "basis.fvtb");
  models = models && round_trips(compute_hog(test_util::shapes_image(80, 64, 3)), descriptor_from_container, base / "desc.fvtb");
  const auto back = paired_from_container(load_container(base / "pair.fvtb"));
  models = models && back.u.matrix == d.paired->u.matrix && back.v.matrix == d.paired->v.matrix &&
           back.hog_mean == d.paired->hog_mean;
  const auto gback = stationary_from_container(load_container(base / "gauss.fvtb"));
  models = models && gback.hh == d.gaussian->hh && gback.ph == d.gaussian->ph && gback.pp == d.gaussian->pp;

  return {problem.empty() && models,
          fmt("%zu CLI artifacts compared (threads 1 vs 3)%s%s, 5 model kinds round-trip %s", artifacts,
              problem.empty() ? "" : ": ", problem.c_str(), models ? "bit-exactly" : "with DIFFERENCES")};
}

}  // namespace

// Modes:
//   acceptance               run every check, exit 1 if any fails
//   acceptance --out FILE    run every check and record the lines in FILE
//   acceptance --check N FILE  report check N from a recorded FILE
int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  if (args.size() == 3 && args[0] == "--check") {
    const std::string tag = fmt(" %2d ", std::stoi(args[1]));
    std::ifstream in(args[2]);
    std::string line;
    while (std::getline(in, line))
      if (line.size() > 8 && line.compare(4, tag.size(), tag) == 0) {
        std::printf("%s\n", line.c_str());
        return line.rfind("PASS", 0) == 0 ? 0 : 1;
      }
    std::printf("check %s not found in %s\n", args[1].c_str(), args[2].c_str());
    return 1;
  }
  const bool record = args.size() == 2 && args[0] == "--out";
  if (!args.empty() && !record) {
    std::fprintf(stderr, "usage: acceptance [--out FILE | --check N FILE]\n");
    return 2;
  }
  if (record) fs::remove(args[1]);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"conditional mode oracle", conditional_mode},
      {"sparse coding oracle", sparse_coding},
      {"dictionary learning", dictionary_learning},
      {"HOG correctness", hog_correctness},
      {"patchwork exactness", patchwork},
      {"desk reconstruction quality", desk_quality},
      {"template size monotonicity", size_monotonicity},
      {"blur ordering", blur_ordering},
      {"exemplar LDA retrieval", elda_checks},
      {"runtime", runtime},
      {"determinism and persistence", determinism_and_persistence},
  };
  int failed = 0;
  std::string lines;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Outcome o;
    try {
      o = checks[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    const std::string line =
        fmt("%s %2zu %s: %s", o.pass ? "PASS" : "FAIL", i + 1, checks[i].first.c_str(), o.detail.c_str());
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    lines += line + "\n";
  }
  std::printf("%zu of %zu acceptance checks passed\n", checks.size() - failed, checks.size());
  if (record) {
    std::ofstream(args[1]) << lines;
    return 0;
  }
  return failed ? 1 : 0;
}
