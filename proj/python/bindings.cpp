#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "slime/eval.hpp"
#include "slime/image.hpp"
#include "slime/matcher.hpp"
#include "slime/pipeline.hpp"

namespace py = pybind11;
using namespace slime;

namespace {

RasterImage image_from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw SizeError("image array must be 2-D (H x W)");
  RasterImage img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.samples.begin());
  return img;
}

py::array_t<float> array_from_image(const RasterImage& img) {
  py::array_t<float> out({img.height, img.width});
  std::copy(img.samples.begin(), img.samples.end(), out.mutable_data());
  return out;
}

py::array_t<double> array_from_matches(const MatchSet& m) {
  py::array_t<double> out({static_cast<py::ssize_t>(m.size()), static_cast<py::ssize_t>(9)});
  auto r = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i) {
    const Match& match = m.matches[i];
    r(i, 0) = match.p.x.x();
    r(i, 1) = match.p.x.y();
    r(i, 2) = match.p.theta;
    r(i, 3) = match.p.sigma;
    r(i, 4) = match.p_prime.x.x();
    r(i, 5) = match.p_prime.x.y();
    r(i, 6) = match.p_prime.theta;
    r(i, 7) = match.p_prime.sigma;
    r(i, 8) = match.similarity;
  }
  return out;
}

MatchSet matches_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(1) != 9)
    throw SizeError("match array must be N x 9 (x y theta sigma x' y' theta' sigma' similarity)");
  MatchSet out;
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < r.shape(0); ++i) {
    Match m;
    m.p.x = Point2(r(i, 0), r(i, 1));
    m.p.theta = r(i, 2);
    m.p.sigma = r(i, 3);
    m.p_prime.x = Point2(r(i, 4), r(i, 5));
    m.p_prime.theta = r(i, 6);
    m.p_prime.sigma = r(i, 7);
    m.similarity = r(i, 8);
    m.origin = static_cast<long>(i);
    out.matches.push_back(m);
  }
  return out;
}

std::vector<Correspondence> correspondences_from_arrays(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& src,
    const py::array_t<double, py::array::c_style | py::array::forcecast>& dst) {
  if (src.ndim() != 2 || src.shape(1) != 2 || dst.ndim() != 2 || dst.shape(1) != 2 ||
      src.shape(0) != dst.shape(0))
    throw SizeError("correspondences must be two N x 2 arrays of equal length");
  std::vector<Correspondence> corr;
  auto s = src.unchecked<2>();
  auto d = dst.unchecked<2>();
  for (py::ssize_t i = 0; i < s.shape(0); ++i)
    corr.emplace_back(Point2(s(i, 0), s(i, 1)), Point2(d(i, 0), d(i, 1)));
  return corr;
}

}  // namespace

PYBIND11_MODULE(_slime, m) {
  m.doc() = "Plane-hypothesis image matching: block-wise planar clustering, "
            "epipolar consistency voting and match-quality metrics.";

  py::register_exception<DegeneracyError>(m, "DegeneracyError");
  py::register_exception<ParseError>(m, "ParseError");

  py::class_<SlimeConfig>(m, "Config")
      .def(py::init<>())
      .def_readwrite("t_perp", &SlimeConfig::t_perp)
      .def_readwrite("m_theta", &SlimeConfig::m_theta)
      .def_readwrite("t_theta", &SlimeConfig::t_theta)
      .def_readwrite("t_sigma", &SlimeConfig::t_sigma)
      .def_readwrite("t_xi", &SlimeConfig::t_xi)
      .def_readwrite("t_ov", &SlimeConfig::t_ov)
      .def_readwrite("t_theta_plus", &SlimeConfig::t_theta_plus)
      .def_readwrite("nnr_threshold", &SlimeConfig::nnr_threshold)
      .def_readwrite("ransac_seed", &SlimeConfig::ransac_seed)
      .def_readwrite("ransac_max_iterations", &SlimeConfig::ransac_max_iterations)
      .def_readwrite("threads", &SlimeConfig::threads)
      .def_readwrite("max_block_pairs", &SlimeConfig::max_block_pairs);

  m.def(
      "run_slime",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img1,
         const py::array_t<float, py::array::c_style | py::array::forcecast>& img2,
         const SlimeConfig& cfg) {
        const RasterImage a = image_from_array(img1);
        const RasterImage b = image_from_array(img2);
        BuiltinMatcherOptions mopt;
        mopt.nnr_threshold = cfg.nnr_threshold;
        BuiltinMatcher matcher(mopt);
        SlimeResult res;
        {
          py::gil_scoped_release release;
          res = run_slime(a, b, matcher, cfg);
        }
        return py::make_tuple(array_from_matches(dedup_by_coordinates(res.final_matches)),
                              diagnostics_to_text(res.diagnostics));
      },
      py::arg("img1"), py::arg("img2"), py::arg("config") = SlimeConfig(),
      "Full matching pipeline over two grayscale images in [0, 1]; returns "
      "(matches, diagnostics_text). Match rows are (x, y, theta, sigma, x', "
      "y', theta', sigma', similarity).");

  m.def(
      "estimate_homography_dlt",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& src,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& dst) {
        return estimate_homography_dlt(correspondences_from_arrays(src, dst)).matrix();
      },
      py::arg("src"), py::arg("dst"));

  m.def(
      "estimate_fundamental_8pt",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& src,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& dst) {
        return estimate_fundamental_8pt(correspondences_from_arrays(src, dst)).matrix();
      },
      py::arg("src"), py::arg("dst"));

  m.def(
      "ransac_homography",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& src,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& dst,
         double threshold, std::uint64_t seed, int max_iterations) -> py::object {
        RansacOptions opt;
        opt.threshold = threshold;
        opt.seed = seed;
        opt.max_iterations = max_iterations;
        auto res = ransac_homography(correspondences_from_arrays(src, dst), opt);
        if (!res.model) return py::none();
        return py::make_tuple(res.model->matrix(), res.inlier_indices);
      },
      py::arg("src"), py::arg("dst"), py::arg("threshold") = 15.0, py::arg("seed") = 0,
      py::arg("max_iterations") = 10000,
      "Returns (H, inlier_indices) or None when no model has enough support.");

  m.def(
      "ransac_fundamental",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& src,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& dst,
         double threshold, std::uint64_t seed, int max_iterations) -> py::object {
        RansacOptions opt;
        opt.threshold = threshold;
        opt.seed = seed;
        opt.max_iterations = max_iterations;
        auto res = ransac_fundamental(correspondences_from_arrays(src, dst), opt);
        if (!res.model) return py::none();
        return py::make_tuple(res.model->matrix(), res.inlier_indices);
      },
      py::arg("src"), py::arg("dst"), py::arg("threshold") = 15.0, py::arg("seed") = 0,
      py::arg("max_iterations") = 10000);

  m.def(
      "reprojection_error_max",
      [](const Eigen::Matrix3d& h, const std::vector<double>& x,
         const std::vector<double>& x_prime) {
        if (x.size() != 2 || x_prime.size() != 2) throw SizeError("points must have 2 entries");
        return reprojection_error_max(Point2(x[0], x[1]), Point2(x_prime[0], x_prime[1]),
                                      Homography::from_matrix(h));
      },
      py::arg("h"), py::arg("x"), py::arg("x_prime"));

  m.def(
      "epipolar_error_max",
      [](const Eigen::Matrix3d& f, const std::vector<double>& x,
         const std::vector<double>& x_prime) {
        if (x.size() != 2 || x_prime.size() != 2) throw SizeError("points must have 2 entries");
        return epipolar_error_max(Point2(x[0], x[1]), Point2(x_prime[0], x_prime[1]),
                                  FundamentalMatrix::from_matrix(f));
      },
      py::arg("f"), py::arg("x"), py::arg("x_prime"));

  m.def(
      "resample",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img,
         double factor) { return array_from_image(resample(image_from_array(img), factor)); },
      py::arg("img"), py::arg("factor"), "Lanczos3 resampling with reflect-101 boundaries.");

  m.def(
      "pad_image",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img, int pad) {
        return array_from_image(pad_image(image_from_array(img), pad));
      },
      py::arg("img"), py::arg("pad"));

  m.def(
      "build_block_grid",
      [](int width, int height) {
        BlockGrid grid = build_block_grid(width, height);
        py::list blocks, tiles;
        for (const auto& b : grid.blocks) {
          py::dict d;
          d["s"] = b.scale_s;
          d["i"] = b.grid_row;
          d["j"] = b.grid_col;
          d["x0"] = b.rect.x0;
          d["y0"] = b.rect.y0;
          d["w"] = b.rect.w;
          d["h"] = b.rect.h;
          d["scale_factor"] = b.scale_factor;
          d["index"] = b.linear_index;
          blocks.append(d);
        }
        for (const auto& t : grid.tiles) {
          py::dict d;
          d["a"] = t.grid_row;
          d["b"] = t.grid_col;
          d["x0"] = t.rect.x0;
          d["y0"] = t.rect.y0;
          d["w"] = t.rect.w;
          d["h"] = t.rect.h;
          d["index"] = t.linear_index;
          tiles.append(d);
        }
        py::dict out;
        out["blocks"] = blocks;
        out["tiles"] = tiles;
        out["pad"] = grid.pad;
        return out;
      },
      py::arg("width"), py::arg("height"),
      "Multiscale overlapping block and tile layout (rects in padded "
      "scaled-frame coordinates).");

  m.def(
      "detect_and_describe",
      [](const py::array_t<float, py::array::c_style | py::array::forcecast>& img,
         int exclusion_margin, std::optional<double> orientation_override) {
        const RasterImage raster = image_from_array(img);
        BuiltinMatcher matcher;
        ImageRegion region;
        region.padded = &raster;
        region.window = {0, 0, raster.width, raster.height};
        region.scale_factor = 1.0;
        region.pad = 0;
        region.cache_key = -1;
        auto feats = matcher.detect_and_describe(region, exclusion_margin, orientation_override);
        py::array_t<double> kps({static_cast<py::ssize_t>(feats.size()),
                                 static_cast<py::ssize_t>(4)});
        const py::ssize_t dim = feats.empty() ? 0 : static_cast<py::ssize_t>(feats[0].d.v.size());
        py::array_t<float> descs({static_cast<py::ssize_t>(feats.size()), dim});
        auto k = kps.mutable_unchecked<2>();
        auto d = descs.mutable_unchecked<2>();
        for (py::ssize_t i = 0; i < k.shape(0); ++i) {
          k(i, 0) = feats[i].p.x.x();
          k(i, 1) = feats[i].p.x.y();
          k(i, 2) = feats[i].p.theta;
          k(i, 3) = feats[i].p.sigma;
          for (py::ssize_t j = 0; j < dim; ++j) d(i, j) = feats[i].d.v[j];
        }
        return py::make_tuple(kps, descs);
      },
      py::arg("img"), py::arg("exclusion_margin") = 0,
      py::arg("orientation_override") = std::nullopt,
      "DoG keypoints (x, y, theta, sigma) and unit descriptors.");

  m.def(
      "delaunay_consistency_filter",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& matches) {
        return array_from_matches(delaunay_consistency_filter(matches_from_array(matches)));
      },
      py::arg("matches"));

  m.def(
      "load_matches",
      [](const std::string& path) { return array_from_matches(ingest_matches_file(path)); },
      py::arg("path"));

  m.def(
      "save_matches",
      [](const std::string& path,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& matches) {
        emit_matches_file(path, matches_from_array(matches));
      },
      py::arg("path"), py::arg("matches"));

  m.def(
      "evaluate_planar",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& matches,
         const Eigen::Matrix3d& h_gt, int w1, int h1, int w2, int h2, double t_perp,
         double t_r) {
        GroundTruth gt;
        gt.kind = GroundTruthKind::planar;
        gt.h_gt = Homography::from_matrix(h_gt);
        EvalOptions opt;
        opt.t_perp = t_perp;
        opt.t_r = t_r;
        MetricReport r = compute_metrics(matches_from_array(matches), gt, w1, h1, w2, h2, opt);
        py::dict d;
        d["coverage"] = r.coverage;
        d["precision"] = r.precision;
        d["accuracy"] = r.accuracy;
        d["correct"] = r.correct_count;
        d["total"] = r.total_count;
        d["failure"] = r.failure_kind == FailureKind::none
                           ? "none"
                           : (r.failure_kind == FailureKind::no_matches ? "no-matches"
                                                                        : "only-wrong");
        return d;
      },
      py::arg("matches"), py::arg("h_gt"), py::arg("w1"), py::arg("h1"), py::arg("w2"),
      py::arg("h2"), py::arg("t_perp") = 15.0, py::arg("t_r") = 3.0,
      "Coverage / precision / accuracy against a planar ground-truth homography.");

  m.attr("__version__") = "0.1.0";
}
