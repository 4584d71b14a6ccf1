#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "slime/eval.hpp"
#include "slime/image.hpp"
#include "slime/matcher.hpp"
#include "slime/pipeline.hpp"

namespace {

using namespace slime;

void draw_line(RgbImage& img, double x0, double y0, double x1, double y1, unsigned char r,
               unsigned char g, unsigned char b) {
  const int steps = std::max(2, static_cast<int>(std::ceil(std::hypot(x1 - x0, y1 - y0))));
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    img.set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
            static_cast<int>(std::lround(y0 + t * (y1 - y0))), r, g, b);
  }
}

void draw_dot(RgbImage& img, double x, double y, unsigned char r, unsigned char g,
              unsigned char b) {
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx)
      img.set(static_cast<int>(std::lround(x)) + dx, static_cast<int>(std::lround(y)) + dy, r, g,
              b);
}

RgbImage side_by_side(const RasterImage& a, const RasterImage& b) {
  RgbImage out(a.width + b.width, std::max(a.height, b.height));
  auto blit = [&](const RasterImage& src, int x_offset) {
    for (int y = 0; y < src.height; ++y)
      for (int x = 0; x < src.width; ++x) {
        const unsigned char v =
            static_cast<unsigned char>(std::lround(std::clamp(src.at(x, y), 0.0f, 1.0f) * 255));
        out.set(x + x_offset, y, v, v, v);
      }
  };
  blit(a, 0);
  blit(b, a.width);
  return out;
}

void save_overlay(const std::string& path, const RgbImage& canvas) {
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".pgm") {
    RasterImage gray(canvas.width, canvas.height);
    for (int y = 0; y < canvas.height; ++y)
      for (int x = 0; x < canvas.width; ++x) {
        const size_t i = (static_cast<size_t>(y) * canvas.width + x) * 3;
        gray.at(x, y) = (0.299f * canvas.samples[i] + 0.587f * canvas.samples[i + 1] +
                         0.114f * canvas.samples[i + 2]) /
                        255.0f;
      }
    save_pgm(path, gray);
  } else {
    save_png_rgb(path, canvas);
  }
}

void write_match_overlay(const std::string& path, const RasterImage& img1,
                         const RasterImage& img2, const MatchSet& matches, const GroundTruth* gt,
                         double t_perp) {
  RgbImage canvas = side_by_side(img1, img2);
  const int off = img1.width;
  for (const auto& m : matches.matches) {
    unsigned char r = 230, g = 160, b = 30;  // fixed color without GT
    if (gt) {
      const bool ok = is_correct(m, *gt, t_perp);
      r = ok ? 40 : 220;
      g = ok ? 200 : 40;
      b = 40;
    }
    draw_line(canvas, m.p.x.x(), m.p.x.y(), m.p_prime.x.x() + off, m.p_prime.x.y(), r, g, b);
    draw_dot(canvas, m.p.x.x(), m.p.x.y(), r, g, b);
    draw_dot(canvas, m.p_prime.x.x() + off, m.p_prime.x.y(), r, g, b);
  }
  save_overlay(path, canvas);
}

struct MatchArgs {
  std::string img1_path, img2_path;
  std::string out_path = "matches.tsv";
  std::string diagnostics_path;
  std::string overlay_path;
  std::string gt_path;
  std::string matcher_spec = "builtin";
  double final_ransac = 0.0;  // 0 disables
  std::string scene_kind = "planar";
  SlimeConfig cfg;
};

int cmd_match(const MatchArgs& args) {
  RasterImage img1 = load_image(args.img1_path);
  RasterImage img2 = load_image(args.img2_path);

  std::unique_ptr<BaseMatcherInterface> matcher;
  if (args.matcher_spec == "builtin") {
    BuiltinMatcherOptions mopt;
    mopt.nnr_threshold = args.cfg.nnr_threshold;
    matcher = std::make_unique<BuiltinMatcher>(mopt);
  } else if (args.matcher_spec.rfind("ingest:", 0) == 0) {
    matcher = std::make_unique<IngestMatcher>(ingest_matches_file(args.matcher_spec.substr(7)));
  } else {
    std::cerr << "unknown matcher '" << args.matcher_spec << "'\n";
    return 2;
  }

  SlimeResult result = run_slime(img1, img2, *matcher, args.cfg);
  MatchSet final_matches = dedup_by_coordinates(result.final_matches);
  emit_matches_file(args.out_path, final_matches);

  if (!args.diagnostics_path.empty()) {
    std::ofstream d(args.diagnostics_path);
    d << diagnostics_to_text(result.diagnostics);
  }
  if (final_matches.empty())
    std::cerr << "note: no final matches for this pair (still a valid outcome)\n";

  std::optional<GroundTruth> gt;
  if (!args.gt_path.empty()) gt = load_ground_truth_file(args.gt_path);

  if (!args.overlay_path.empty())
    write_match_overlay(args.overlay_path, img1, img2, final_matches, gt ? &*gt : nullptr,
                        args.cfg.t_perp);

  if (args.final_ransac > 0.0 && !final_matches.empty()) {
    std::vector<Correspondence> corr;
    for (const auto& m : final_matches.matches) corr.emplace_back(m.p.x, m.p_prime.x);
    RansacOptions ropt;
    ropt.threshold = args.final_ransac;
    ropt.seed = args.cfg.ransac_seed;
    ropt.max_iterations = args.cfg.ransac_max_iterations;
    const std::string kind = gt ? (gt->kind == GroundTruthKind::planar ? "planar" : "nonplanar")
                                : args.scene_kind;
    MatchSet filtered;
    if (kind == "nonplanar") {
      auto fit = ransac_fundamental(corr, ropt);
      for (int idx : fit.inlier_indices) filtered.matches.push_back(final_matches.matches[idx]);
    } else {
      auto fit = ransac_homography(corr, ropt);
      for (int idx : fit.inlier_indices) filtered.matches.push_back(final_matches.matches[idx]);
    }
    emit_matches_file(args.out_path + ".ransac", filtered);
  }

  std::cout << "matches: " << final_matches.size() << "\n";
  return 0;
}

bool parse_dims(const std::string& spec, int* w, int* h) {
  const auto x = spec.find('x');
  if (x == std::string::npos) return false;
  try {
    *w = std::stoi(spec.substr(0, x));
    *h = std::stoi(spec.substr(x + 1));
  } catch (const std::exception&) {
    return false;
  }
  return *w > 0 && *h > 0;
}

struct EvalArgs {
  std::string matches_path;
  std::string gt_path;
  std::string img1_path, img2_path;
  std::string dims1_spec, dims2_spec;
  std::string manifest_path;
  std::string out_path;
  EvalOptions options;
};

int cmd_eval(const EvalArgs& args) {
  std::ostringstream report;
  if (!args.manifest_path.empty()) {
    std::ifstream manifest(args.manifest_path);
    if (!manifest) {
      std::cerr << "cannot open manifest " << args.manifest_path << "\n";
      return 2;
    }
    std::string line;
    int pair_index = 0;
    double accuracy_sum = 0.0, coverage_sum = 0.0, precision_sum = 0.0;
    int coverage_count = 0, no_match_failures = 0, only_wrong_failures = 0;
    while (std::getline(manifest, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ss(line);
      std::string img1_path, img2_path, gt_path, matches_path, mask1, mask2;
      if (!(ss >> img1_path >> img2_path >> gt_path >> matches_path)) {
        std::cerr << "manifest line needs: img1 img2 gt matches [mask1 mask2]\n";
        return 2;
      }
      ss >> mask1 >> mask2;
      RasterImage i1 = load_image(img1_path);
      RasterImage i2 = load_image(img2_path);
      GroundTruth gt = load_ground_truth_file(gt_path);
      if (!mask1.empty()) gt.valid_mask_1 = load_image(mask1);
      if (!mask2.empty()) gt.valid_mask_2 = load_image(mask2);
      MatchSet matches = ingest_matches_file(matches_path);
      MetricReport r =
          compute_metrics(matches, gt, i1.width, i1.height, i2.width, i2.height, args.options);
      report << "pair " << pair_index << " (" << img1_path << "):\n" << metric_report_text(r);
      accuracy_sum += r.accuracy;
      precision_sum += r.precision;
      if (r.coverage_defined) {
        coverage_sum += r.coverage;
        ++coverage_count;
      }
      if (r.failure_kind == FailureKind::no_matches) ++no_match_failures;
      if (r.failure_kind == FailureKind::only_wrong) ++only_wrong_failures;
      ++pair_index;
    }
    if (pair_index == 0) {
      std::cerr << "empty manifest\n";
      return 2;
    }
    report << "pairs=" << pair_index << "\n";
    if (coverage_count > 0) report << "coverage=" << coverage_sum / coverage_count << "\n";
    report << "precision=" << precision_sum / pair_index << "\n";
    report << "accuracy=" << accuracy_sum / pair_index << "\n";
    report << "failures_no_matches=" << no_match_failures << "\n";
    report << "failures_only_wrong=" << only_wrong_failures << "\n";
  } else {
    int w1 = 0, h1 = 0, w2 = 0, h2 = 0;
    if (!args.img1_path.empty() && !args.img2_path.empty()) {
      RasterImage i1 = load_image(args.img1_path);
      RasterImage i2 = load_image(args.img2_path);
      w1 = i1.width;
      h1 = i1.height;
      w2 = i2.width;
      h2 = i2.height;
    } else if (!(parse_dims(args.dims1_spec, &w1, &h1) && parse_dims(args.dims2_spec, &w2, &h2))) {
      std::cerr << "eval needs --img1/--img2 or --dims1/--dims2\n";
      return 2;
    }
    MatchSet matches = ingest_matches_file(args.matches_path);
    GroundTruth gt = load_ground_truth_file(args.gt_path);
    MetricReport r = compute_metrics(matches, gt, w1, h1, w2, h2, args.options);
    report << metric_report_text(r) << metric_report_keyvalues(r);
  }

  std::cout << report.str();
  if (!args.out_path.empty()) {
    std::ofstream out(args.out_path);
    out << report.str();
  }
  return 0;
}

struct GridArgs {
  std::string img_path;
  std::string listing_path;
  std::string overlay_path;
};

int cmd_grid(const GridArgs& args) {
  RasterImage img = load_image(args.img_path);
  BlockGrid grid = build_block_grid(img.width, img.height);

  std::ostringstream listing;
  listing << "# blocks: s i j x0 y0 w h\n";
  for (const auto& b : grid.blocks)
    listing << b.scale_s << " " << b.grid_row << " " << b.grid_col << " " << b.rect.x0 << " "
            << b.rect.y0 << " " << b.rect.w << " " << b.rect.h << "\n";
  listing << "# tiles: s i j x0 y0 w h (s = 0 marks native tiles)\n";
  for (const auto& t : grid.tiles)
    listing << 0 << " " << t.grid_row << " " << t.grid_col << " " << t.rect.x0 << " " << t.rect.y0
            << " " << t.rect.w << " " << t.rect.h << "\n";

  if (args.listing_path.empty())
    std::cout << listing.str();
  else {
    std::ofstream out(args.listing_path);
    out << listing.str();
  }

  if (!args.overlay_path.empty()) {
    RasterImage padded = pad_image(img, grid.pad);
    RgbImage canvas(padded.width, padded.height);
    for (int y = 0; y < padded.height; ++y)
      for (int x = 0; x < padded.width; ++x) {
        const unsigned char v =
            static_cast<unsigned char>(std::lround(std::clamp(padded.at(x, y), 0.0f, 1.0f) * 255));
        canvas.set(x, y, v, v, v);
      }
    auto draw_rect = [&](double x0, double y0, double w, double h, const unsigned char* c) {
      draw_line(canvas, x0, y0, x0 + w, y0, c[0], c[1], c[2]);
      draw_line(canvas, x0 + w, y0, x0 + w, y0 + h, c[0], c[1], c[2]);
      draw_line(canvas, x0 + w, y0 + h, x0, y0 + h, c[0], c[1], c[2]);
      draw_line(canvas, x0, y0 + h, x0, y0, c[0], c[1], c[2]);
    };
    const unsigned char palette[4][3] = {
        {220, 60, 60}, {60, 200, 60}, {80, 80, 230}, {230, 210, 60}};
    for (const auto& b : grid.blocks) {
      const double f = b.scale_factor;
      const double x0 = scaled_to_full(b.rect.x0 - grid.pad, f) + grid.pad;
      const double y0 = scaled_to_full(b.rect.y0 - grid.pad, f) + grid.pad;
      draw_rect(x0, y0, b.rect.w / f, b.rect.h / f, palette[b.scale_s - 1]);
    }
    for (const auto& t : grid.tiles)
      draw_rect(t.rect.x0, t.rect.y0, t.rect.w, t.rect.h, palette[3]);
    save_overlay(args.overlay_path, canvas);
  }
  return 0;
}

void add_config_flags(CLI::App* app, SlimeConfig* cfg) {
  app->add_option("--t-perp", cfg->t_perp, "max reprojection/epipolar error (px)");
  app->add_option("--m-theta", cfg->m_theta, "orientation histogram bins");
  app->add_option("--t-theta", cfg->t_theta, "relative-orientation gate (rad)");
  app->add_option("--t-sigma", cfg->t_sigma, "relative-scale gate");
  app->add_option("--t-xi", cfg->t_xi, "epipolar vote factor");
  app->add_option("--t-ov", cfg->t_ov, "plane-fusion overlap bound");
  app->add_option("--t-theta-plus", cfg->t_theta_plus, "global-orientation gate (rad)");
  app->add_option("--nnr", cfg->nnr_threshold, "nearest-neighbor ratio threshold");
  app->add_option("--seed", cfg->ransac_seed, "RANSAC seed");
  app->add_option("--ransac-iters", cfg->ransac_max_iterations, "RANSAC iteration cap");
  app->add_option("--threads", cfg->threads, "worker count");
  app->add_option("--max-block-pairs", cfg->max_block_pairs,
                  "cap on block pairs (-1 = unlimited)");
  app->add_option("--best-per-tile-pair", cfg->best_per_tile_pair);
  app->add_option("--best-per-tile", cfg->best_per_tile);
  app->add_option("--planes-per-tile", cfg->planes_per_tile_final);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slime: plane-hypothesis image matching"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from a config file");

  MatchArgs margs;
  CLI::App* match = app.add_subcommand("match", "extract matches for an image pair");
  match->add_option("img1", margs.img1_path, "first image (PGM/PNG)")->required();
  match->add_option("img2", margs.img2_path, "second image (PGM/PNG)")->required();
  match->add_option("-o,--out", margs.out_path, "output match file");
  match->add_option("--diagnostics", margs.diagnostics_path, "per-stage diagnostics file");
  match->add_option("--overlay", margs.overlay_path, "side-by-side overlay raster (PNG/PGM)");
  match->add_option("--gt", margs.gt_path, "ground truth for overlay coloring");
  match->add_option("--matcher", margs.matcher_spec, "builtin or ingest:<match file>");
  match->add_option("--final-ransac", margs.final_ransac,
                    "append a RANSAC-filtered match file at this threshold (px)");
  match->add_option("--scene", margs.scene_kind, "planar|nonplanar (for --final-ransac)");
  add_config_flags(match, &margs.cfg);

  EvalArgs eargs;
  CLI::App* eval = app.add_subcommand("eval", "score a match file against ground truth");
  eval->add_option("--matches", eargs.matches_path, "match file");
  eval->add_option("--gt", eargs.gt_path, "ground-truth file");
  eval->add_option("--img1", eargs.img1_path);
  eval->add_option("--img2", eargs.img2_path);
  eval->add_option("--dims1", eargs.dims1_spec, "WxH of image 1");
  eval->add_option("--dims2", eargs.dims2_spec, "WxH of image 2");
  eval->add_option("--manifest", eargs.manifest_path,
                   "dataset mode: lines of img1 img2 gt matches [mask1 mask2]");
  eval->add_option("-o,--out", eargs.out_path, "write the report here too");
  eval->add_option("--t-perp", eargs.options.t_perp);
  eval->add_option("--t-r", eargs.options.t_r, "RANSAC threshold for the accuracy fit");
  eval->add_option("--seed", eargs.options.seed);

  GridArgs gargs;
  CLI::App* grid = app.add_subcommand("grid", "emit the block/tile grid of an image");
  grid->add_option("img", gargs.img_path, "image (PGM/PNG)")->required();
  grid->add_option("-o,--listing", gargs.listing_path, "write the listing here");
  grid->add_option("--overlay", gargs.overlay_path, "grid overlay raster (PNG/PGM)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (match->parsed()) return cmd_match(margs);
    if (eval->parsed()) return cmd_eval(eargs);
    if (grid->parsed()) return cmd_grid(gargs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
