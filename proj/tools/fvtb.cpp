#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fvtb/bench.hpp"
#include "fvtb/directopt.hpp"
#include "fvtb/elda.hpp"
#include "fvtb/gaussian.hpp"
#include "fvtb/hog.hpp"
#include "fvtb/image_io.hpp"
#include "fvtb/log.hpp"
#include "fvtb/paireddict.hpp"
#include "fvtb/parallel.hpp"
#include "fvtb/store.hpp"

namespace fs = std::filesystem;
using namespace fvtb;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kMissingModel = 3, kGeometry = 4 };

struct CliError {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, std::string message) { throw CliError{code, std::move(message)}; }

struct Globals {
  std::uint64_t seed = 0;
  int threads = default_threads();
  int verbose = 0;
};

// Relative paths that do not exist locally are looked up under $FVTB_CACHE.
fs::path resolve_model(const std::string& path) {
  fs::path p(path);
  if (fs::exists(p)) return p;
  if (const char* cache = std::getenv("FVTB_CACHE"); cache && p.is_relative() && fs::exists(fs::path(cache) / p))
    return fs::path(cache) / p;
  fail(kMissingModel, "not found: " + path);
}

fs::path output_path(const std::string& out, const char* fallback) {
  if (!out.empty()) return out;
  if (const char* cache = std::getenv("FVTB_CACHE")) {
    fs::create_directories(cache);
    return fs::path(cache) / fallback;
  }
  fail(kUsage, "--out is required when FVTB_CACHE is not set");
}

Container load_model_container(const std::string& path) {
  const auto p = resolve_model(path);
  try {
    return load_container(p);
  } catch (const CorruptError& e) {
    fail(kGeometry, e.what());
  } catch (const VersionError& e) {
    fail(kGeometry, e.what());
  }
}

std::shared_ptr<const StationaryModel> load_gaussian(const std::string& path) {
  const auto c = load_model_container(path);
  if (c.type() != "stationary_gaussian")
    fail(kMissingModel, path + " is a '" + c.type() + "' container, expected stationary_gaussian");
  return std::make_shared<StationaryModel>(stationary_from_container(c));
}

std::shared_ptr<const PairedDictionary> load_paired(const std::string& path) {
  const auto c = load_model_container(path);
  if (c.type() != "paired_dictionary")
    fail(kMissingModel, path + " is a '" + c.type() + "' container, expected paired_dictionary");
  return std::make_shared<PairedDictionary>(paired_from_container(c));
}

std::array<int, 4> parse_box(const std::string& text) {
  std::array<int, 4> b{};
  std::stringstream ss(text);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 4) fail(kUsage, "--box expects x,y,w,h");
    try {
      std::size_t used = 0;
      b[i] = std::stoi(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      fail(kUsage, "--box: '" + part + "' is not an integer");
    }
    ++i;
  }
  if (i != 4) fail(kUsage, "--box expects x,y,w,h");
  if (b[2] <= 0 || b[3] <= 0) fail(kUsage, "--box: width and height must be positive");
  return b;
}

std::vector<std::pair<int, int>> parse_sizes(const std::string& text) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto x = part.find('x');
    try {
      if (x == std::string::npos) {
        const int n = std::stoi(part);
        out.emplace_back(n, n);
      } else {
        out.emplace_back(std::stoi(part.substr(0, x)), std::stoi(part.substr(x + 1)));
      }
    } catch (const std::exception&) {
      fail(kUsage, "--sizes: cannot parse '" + part + "'");
    }
    if (out.back().first < 1 || out.back().second < 1) fail(kUsage, "--sizes: sizes must be positive");
  }
  if (out.empty()) fail(kUsage, "--sizes is empty");
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

// ---------------------------------------------------------------------------

struct TrainGauss {
  std::string corpus, out;
  int max_cells = 10;
  std::size_t max_images = 0;

  void run(const Globals& g) const {
    FitConfig cfg;
    cfg.max_cells = max_cells;
    cfg.threads = g.threads;
    cfg.seed = g.seed;
    cfg.max_images = max_images;
    const auto m = fit_stationary(ImageSource::open(corpus), cfg);
    const auto path = output_path(out, "gauss.fvtb");
    save_model(m, path);
    std::cout << "wrote " << path.string() << " (" << m.image_count << " images, " << m.sample_count
              << " windows)\n";
  }
};

struct TrainPair {
  std::string corpus, out;
  int k = 256, epochs = 20, patch_cells = 5;
  std::size_t samples = 10000;
  double lambda = -1;
  bool rgb = false;

  void run(const Globals& g) const {
    PairedConfig cfg;
    cfg.k = k;
    cfg.epochs = epochs;
    cfg.patch_cells = patch_cells;
    cfg.n_samples = samples;
    cfg.lambda = lambda;
    cfg.channels = rgb ? 3 : 1;
    cfg.seed = g.seed;
    cfg.threads = g.threads;
    const auto pd = train_paired(ImageSource::open(corpus), cfg);
    const auto path = output_path(out, "pair.fvtb");
    save_model(pd, path);
    std::cout << "wrote " << path.string() << " (objective " << pd.objectives.front() << " -> "
              << pd.objectives.back() << ")\n";
  }
};

struct Invert {
  std::string model, algo, image, box, descriptor, out, corpus;
  int cells = 0, k = 100, restarts = 3, sweeps = 30;
  double lambda = -1;
  bool positive = false, side_by_side = false;

  void run(const Globals& g) const {
    if (image.empty() == descriptor.empty()) fail(kUsage, "give exactly one of --image or --descriptor");
    if (!box.empty() && image.empty()) fail(kUsage, "--box needs --image");

    const auto c = load_model_container(model);
    std::string a = algo;
    if (a.empty()) a = c.type() == "paired_dictionary" ? "pair" : "ridge";
    if (a != "pair" && a != "ridge" && a != "elda" && a != "direct") fail(kUsage, "unknown --algo '" + a + "'");
    const bool wants_pair = a == "pair";
    if (wants_pair != (c.type() == "paired_dictionary"))
      fail(kMissingModel, model + " is a '" + c.type() + "' container; --algo " + a + " needs a " +
                              (wants_pair ? "paired_dictionary" : "stationary_gaussian") + " model");
    if (a == "elda" && corpus.empty()) fail(kUsage, "--algo elda needs --corpus");

    Image original;
    HogDescriptor y;
    if (!image.empty()) {
      Image img = load_image(image);
      if (!box.empty()) {
        const auto b = parse_box(box);
        if (b[0] >= img.width || b[1] >= img.height || b[0] + b[2] <= 0 || b[1] + b[3] <= 0)
          fail(kGeometry, "--box lies outside the " + std::to_string(img.width) + "x" +
                              std::to_string(img.height) + " image");
        const int n = cells > 0 ? cells : 10;
        original = benchmark_crop(img, {image, b[0], b[1], b[2], b[3], ""}, 16, HogConfig{}.pixels_for(n),
                                  HogConfig{}.pixels_for(n));
      } else if (cells > 0) {
        original = resize_bilinear(img, HogConfig{}.pixels_for(cells), HogConfig{}.pixels_for(cells));
      } else {
        original = img;
      }
      y = compute_hog(to_luminance(original));
    } else {
      const auto dc = load_model_container(descriptor);
      y = descriptor_from_container(dc);
    }
    if (positive) y = positive_part(y);

    Image result;
    if (a == "pair") {
      result = PairedInverter(paired_from_container(c)).invert(y, g.threads).image;
    } else {
      const auto m = std::make_shared<StationaryModel>(stationary_from_container(c));
      if (a == "ridge") {
        result = RidgeModel(m, lambda).invert(y).image;
      } else if (a == "elda") {
        EldaConfig ec;
        ec.k = k;
        ec.threads = g.threads;
        const auto t = EldaModel(m, lambda).make_template(y);
        const auto db = EldaDatabase::build(ImageSource::open(corpus), m->hog, std::max(y.cells_x, y.cells_y),
                                            ec.levels_per_octave, {}, g.threads);
        result = elda_invert(t, db, ec).image;
      } else {
        DirectConfig dc;
        dc.seed = g.seed;
        dc.threads = g.threads;
        dc.restarts = restarts;
        dc.sweeps = sweeps;
        const auto [basis, mean] = direct_basis(*m, y.cells_x, y.cells_y);
        result = direct_invert(basis, mean, y, dc, m->hog).image;
      }
    }

    const fs::path path = out.empty() ? fs::path("inversion.png") : fs::path(out);
    if (side_by_side) {
      std::vector<Image> panels;
      if (!original.empty()) panels.push_back(clamp01(original));
      const Image glyph = render_glyph(y);
      panels.push_back(resize_bilinear(glyph, result.width, result.width * glyph.height / glyph.width));
      panels.push_back(result);
      save_image(hconcat(panels), path);
    } else {
      save_image(result, path);
    }
    std::cout << "wrote " << path.string() << " (" << result.width << "x" << result.height << ")\n";
  }
};

struct Glyph {
  std::string image, descriptor, out = "glyph.png";
  int cell_pixels = 20;
  bool positive = false;

  void run(const Globals&) const {
    if (image.empty() == descriptor.empty()) fail(kUsage, "give exactly one of --image or --descriptor");
    HogDescriptor y = image.empty() ? descriptor_from_container(load_model_container(descriptor))
                                    : compute_hog(to_luminance(load_image(image)));
    if (positive) y = positive_part(y);
    save_image(render_glyph(y, cell_pixels), out);
    std::cout << "wrote " << out << "\n";
  }
};

struct Models {
  std::string pair_model, gauss_model, elda_corpus;
  double lambda = -1;
  int k = 100;
  bool no_exclude = false;

  void load(Algorithms& a, const std::vector<std::string>& algos, const ImageSource& default_corpus,
            const std::vector<Annotation>& ann, int min_cells, const Globals& g) const {
    auto wants = [&](const char* n) { return std::find(algos.begin(), algos.end(), n) != algos.end(); };
    if (wants("pair")) {
      if (pair_model.empty()) fail(kMissingModel, "algorithm 'pair' needs --pair-model");
      a.set_paired(load_paired(pair_model));
    }
    if (wants("ridge") || wants("elda") || wants("direct")) {
      if (gauss_model.empty()) fail(kMissingModel, "algorithms ridge/elda/direct need --gauss-model");
      a.set_gaussian(load_gaussian(gauss_model), lambda);
    }
    if (wants("elda")) {
      const ImageSource src = elda_corpus.empty() ? default_corpus : ImageSource::open(elda_corpus);
      a.set_elda_database(std::make_shared<EldaDatabase>(EldaDatabase::build(src, {}, min_cells, 4, {}, g.threads)),
                          ann);
    }
  }

  void configure(BenchConfig& cfg) const {
    cfg.elda.k = k;
    cfg.exclude_category = !no_exclude;
  }
};

std::vector<Annotation> annotations_for(const std::string& manifest, const std::string& override_path,
                                        ImageSource& src) {
  src = ImageSource::open(manifest);
  if (!override_path.empty()) return load_annotations(override_path);
  if (!src.manifest().annotations) fail(kUsage, manifest + " names no annotations; pass --annotations");
  return load_annotations(*src.manifest().annotations);
}

struct Bench {
  std::string manifest, annotations, algos = "pair,ridge", csv = "bench.csv", md = "bench.md";
  int cells = 10, pad = 16;
  bool strict = false;
  Models models;

  void run(const Globals& g) const {
    ImageSource src;
    const auto ann = annotations_for(manifest, annotations, src);
    const auto names = split_list(algos);
    if (names.empty()) fail(kUsage, "--algos is empty");
    BenchConfig cfg;
    cfg.cells_x = cfg.cells_y = cells;
    cfg.pad = pad;
    cfg.seed = g.seed;
    cfg.threads = g.threads;
    cfg.strict = strict;
    models.configure(cfg);
    Algorithms algosets;
    models.load(algosets, names, src, ann, cells, g);
    const auto rep = run_benchmark(src.manifest().root, ann, names, algosets, cfg);
    write_text(csv, patches_csv(rep.patches));
    write_text(md, report_markdown(rep));
    for (const auto& r : rep.rows)
      if (r.category == "all") std::printf("mean %s %.4f (n=%zu)\n", r.algorithm.c_str(), r.mean, r.count);
    const auto failures = rep.metadata.value("failures", std::size_t{0});
    if (failures) std::printf("failed patches: %zu\n", failures);
  }
};

struct Sweep {
  std::string manifest, annotations, algo = "pair", sizes = "5x5,10x10,20x20,40x40", csv = "sweep.csv",
                                            md = "sweep.md";
  int pad = 16;
  bool strict = false;
  Models models;

  void run(const Globals& g) const {
    ImageSource src;
    const auto ann = annotations_for(manifest, annotations, src);
    const auto sz = parse_sizes(sizes);
    BenchConfig cfg;
    cfg.pad = pad;
    cfg.seed = g.seed;
    cfg.threads = g.threads;
    cfg.strict = strict;
    models.configure(cfg);
    int min_cells = sz.front().first;
    for (const auto& [x, y] : sz) min_cells = std::min({min_cells, x, y});
    Algorithms algosets;
    models.load(algosets, {algo}, src, ann, min_cells, g);
    const auto rep = size_sweep(src.manifest().root, ann, algo, sz, algosets, cfg);
    write_text(csv, patches_csv(rep.patches));
    write_text(md, sweep_markdown(rep));
    for (const auto& s : rep.sizes)
      std::printf("%dx%d mean %.4f (n=%zu, skipped %zu)\n", s.cells_x, s.cells_y, s.mean, s.count, s.skipped);
  }
};

struct Stats {
  std::string path;
  bool as_json = false;

  void run(const Globals&) const {
    const auto c = load_model_container(path);
    if (as_json) {
      json j;
      j["type"] = c.type();
      j["config_hash"] = c.metadata.value("config_hash", std::string{});
      j["tensors"] = json::object();
      for (const auto& t : c.tensors) j["tensors"][t.name] = {{"shape", t.shape}, {"dtype", dtype_name(t.dtype)}};
      j["metadata"] = c.metadata;
      std::cout << j.dump(1) << '\n';
      return;
    }
    std::cout << "type: " << c.type() << '\n';
    if (c.metadata.contains("config_hash")) std::cout << "config_hash: " << c.metadata["config_hash"].get<std::string>() << '\n';
    for (const auto& t : c.tensors) {
      std::cout << t.name << ": ";
      for (std::size_t i = 0; i < t.shape.size(); ++i) std::cout << (i ? "x" : "") << t.shape[i];
      std::cout << " (" << dtype_name(t.dtype) << ")\n";
    }
    for (auto it = c.metadata.begin(); it != c.metadata.end(); ++it)
      if (it.key() != "type" && it.key() != "config_hash") std::cout << it.key() << ": " << it.value().dump() << '\n';
  }
};

void add_model_flags(CLI::App* cmd, Models& m) {
  cmd->add_option("--pair-model", m.pair_model, "Paired dictionary container");
  cmd->add_option("--gauss-model", m.gauss_model, "Stationary Gaussian container (ridge, elda, direct)");
  cmd->add_option("--elda-corpus", m.elda_corpus, "Corpus manifest searched by elda (default: the benchmark corpus)");
  cmd->add_option("--lambda", m.lambda, "Gaussian prior; negative selects the model default");
  cmd->add_option("--elda-k", m.k, "Detections averaged by elda")->check(CLI::PositiveNumber);
  cmd->add_flag("--no-exclude", m.no_exclude, "Let elda search images of the patch's own category");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fvtb: invert and visualize HOG features"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Worker threads (default: logical cores)")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", g.verbose, "More logging (repeatable)");

  TrainGauss tg;
  auto* c_tg = app.add_subcommand("train-gauss", "Fit the stationary Gaussian over a corpus");
  c_tg->add_option("--corpus", tg.corpus, "Corpus manifest")->required();
  c_tg->add_option("--out", tg.out, "Output container");
  c_tg->add_option("--max-cells", tg.max_cells, "Largest template side in cells")->check(CLI::PositiveNumber);
  c_tg->add_option("--max-images", tg.max_images, "Seeded subset size (0: all)");

  TrainPair tp;
  auto* c_tp = app.add_subcommand("train-pair", "Learn a paired image/HOG dictionary");
  c_tp->add_option("--corpus", tp.corpus, "Corpus manifest")->required();
  c_tp->add_option("--out", tp.out, "Output container");
  c_tp->add_option("--k", tp.k, "Dictionary atoms")->check(CLI::PositiveNumber);
  c_tp->add_option("--samples", tp.samples, "Training patches")->check(CLI::PositiveNumber);
  c_tp->add_option("--epochs", tp.epochs, "Learning epochs")->check(CLI::PositiveNumber);
  c_tp->add_option("--patch-cells", tp.patch_cells, "Patch side in cells")->check(CLI::PositiveNumber);
  c_tp->add_option("--lambda", tp.lambda, "L1 budget; negative selects the default");
  c_tp->add_flag("--rgb", tp.rgb, "Learn colour image atoms");

  Invert inv;
  auto* c_inv = app.add_subcommand("invert", "Invert a descriptor or the descriptor of an image");
  c_inv->add_option("--model", inv.model, "Model container")->required();
  c_inv->add_option("--algo", inv.algo, "pair | ridge | elda | direct (default from the model type)");
  c_inv->add_option("--image", inv.image, "Input image; its HOG is inverted");
  c_inv->add_option("--box", inv.box, "Crop x,y,w,h of --image (16 px context pad)");
  c_inv->add_option("--cells", inv.cells, "Resize the input to this many cells per side")->check(CLI::PositiveNumber);
  c_inv->add_option("--descriptor", inv.descriptor, "Descriptor container with a 'hog' tensor");
  c_inv->add_option("--corpus", inv.corpus, "Corpus manifest for --algo elda");
  c_inv->add_option("--k", inv.k, "Detections averaged by elda")->check(CLI::PositiveNumber);
  c_inv->add_option("--restarts", inv.restarts, "Random restarts for --algo direct")->check(CLI::PositiveNumber);
  c_inv->add_option("--sweeps", inv.sweeps, "Coordinate passes per restart for --algo direct")
      ->check(CLI::PositiveNumber);
  c_inv->add_option("--lambda", inv.lambda, "Gaussian prior; negative selects the model default");
  c_inv->add_option("--out", inv.out, "Output PNG (default inversion.png)");
  c_inv->add_flag("--positive-part", inv.positive, "Clamp negative descriptor entries to zero first");
  c_inv->add_flag("--side-by-side", inv.side_by_side, "Write original | glyph | inversion");

  Glyph gl;
  auto* c_gl = app.add_subcommand("glyph", "Render the oriented-line HOG diagram");
  c_gl->add_option("--image", gl.image, "Input image");
  c_gl->add_option("--descriptor", gl.descriptor, "Descriptor container with a 'hog' tensor");
  c_gl->add_option("--out", gl.out, "Output PNG");
  c_gl->add_option("--cell-pixels", gl.cell_pixels, "Glyph size per cell")->check(CLI::Range(8, 256));
  c_gl->add_flag("--positive-part", gl.positive, "Clamp negative entries to zero first");

  Bench be;
  auto* c_be = app.add_subcommand("bench", "Mean NCC per category and algorithm over annotated patches");
  c_be->add_option("--manifest", be.manifest, "Corpus manifest")->required();
  c_be->add_option("--annotations", be.annotations, "JSONL boxes (default: from the manifest)");
  c_be->add_option("--algos", be.algos, "Comma list from pair, ridge, elda, direct, passthrough");
  c_be->add_option("--cells", be.cells, "Template side in cells")->check(CLI::PositiveNumber);
  c_be->add_option("--pad", be.pad, "Context pad in pixels")->check(CLI::NonNegativeNumber);
  c_be->add_option("--csv", be.csv, "Per-patch CSV output");
  c_be->add_option("--md", be.md, "Aggregate Markdown output");
  c_be->add_flag("--strict", be.strict, "Abort on the first failing patch");
  add_model_flags(c_be, be.models);

  Sweep sw;
  auto* c_sw = app.add_subcommand("sweep", "Mean NCC as a function of template size");
  c_sw->add_option("--manifest", sw.manifest, "Corpus manifest")->required();
  c_sw->add_option("--annotations", sw.annotations, "JSONL boxes (default: from the manifest)");
  c_sw->add_option("--algo", sw.algo, "Algorithm");
  c_sw->add_option("--sizes", sw.sizes, "Comma list of WxH cell sizes");
  c_sw->add_option("--pad", sw.pad, "Context pad in pixels")->check(CLI::NonNegativeNumber);
  c_sw->add_option("--csv", sw.csv, "Per-patch CSV output");
  c_sw->add_option("--md", sw.md, "Per-size Markdown output");
  c_sw->add_flag("--strict", sw.strict, "Abort on the first failing patch");
  add_model_flags(c_sw, sw.models);

  Stats st;
  auto* c_st = app.add_subcommand("stats", "Describe a model container");
  c_st->add_option("path", st.path, "Container")->required();
  c_st->add_flag("--json", st.as_json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "fvtb: " << e.what() << '\n';
    return kUsage;
  }

  log::level() = g.verbose >= 2 ? log::Level::debug : g.verbose == 1 ? log::Level::info : log::Level::warn;

  try {
    if (c_tg->parsed()) tg.run(g);
    else if (c_tp->parsed()) tp.run(g);
    else if (c_inv->parsed()) inv.run(g);
    else if (c_gl->parsed()) gl.run(g);
    else if (c_be->parsed()) be.run(g);
    else if (c_sw->parsed()) sw.run(g);
    else if (c_st->parsed()) st.run(g);
    return kOk;
  } catch (const CliError& e) {
    std::cerr << "fvtb: " << e.message << '\n';
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "fvtb: " << e.what() << '\n';
    return kUsage;
  } catch (const DimensionError& e) {
    std::cerr << "fvtb: " << e.what() << '\n';
    return kGeometry;
  } catch (const GeometryError& e) {
    std::cerr << "fvtb: " << e.what() << '\n';
    return kGeometry;
  } catch (const Error& e) {
    std::cerr << "fvtb: " << e.what() << '\n';
    return kFailure;
  }
}
