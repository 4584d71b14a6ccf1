"""Smoke tests for the python bindings."""

import numpy as np
import pytest

import slime


@pytest.fixture(scope="module")
def texture():
    rng = np.random.default_rng(42)
    img = np.full((96, 96), 0.5, np.float32)
    y, x = np.mgrid[0:96, 0:96]
    for _ in range(48):
        cx, cy = rng.uniform(0, 96, 2)
        s = rng.uniform(1.5, 5.0)
        a = rng.uniform(-0.4, 0.4)
        img += (a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))).astype(
            np.float32
        )
    return np.clip(img, 0.0, 1.0)


def test_dlt_recovers_a_planted_similarity():
    src = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    dst = 2.0 * src + np.array([3.0, -1.0])
    h = slime.estimate_homography_dlt(src, dst)
    h = h / h[2, 2]
    assert np.allclose(h, [[2, 0, 3], [0, 2, -1], [0, 0, 1]], atol=1e-9)


def test_dlt_rejects_collinear_points():
    src = np.array([[0, 0], [1, 1], [2, 2], [0, 5]], float)
    with pytest.raises(slime.DegeneracyError):
        slime.estimate_homography_dlt(src, src)


def test_ransac_homography_on_planted_data():
    rng = np.random.default_rng(7)
    src = rng.uniform(0, 200, (80, 2))
    dst = src @ np.array([[1.1, 0.0], [0.0, 1.1]]) + np.array([5.0, -3.0])
    dst[60:] = rng.uniform(0, 200, (20, 2))  # outliers
    result = slime.ransac_homography(src, dst, threshold=2.0, seed=1)
    assert result is not None
    h, inliers = result
    assert len(inliers) >= 55
    assert all(i < 60 for i in inliers[:55])


def test_reprojection_error():
    h = np.eye(3)
    assert slime.reprojection_error_max(h, [10, 20], [10, 20]) == 0.0
    assert slime.reprojection_error_max(h, [0, 0], [3, 4]) == pytest.approx(5.0)


def test_resample_preserves_constants():
    img = np.full((40, 60), 0.25, np.float32)
    out = slime.resample(img, 0.5)
    assert out.shape == (20, 30)
    assert np.allclose(out, 0.25, atol=1e-6)


def test_block_grid_shape():
    grid = slime.build_block_grid(512, 512)
    assert len(grid["tiles"]) == 9
    scales = {b["s"] for b in grid["blocks"]}
    assert scales == {1, 2, 3}


def test_detector_and_matcher(texture):
    kp, desc = slime.detect_and_describe(texture)
    assert kp.shape[0] > 5
    assert desc.shape == (kp.shape[0], 128)
    norms = np.linalg.norm(desc, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    kp_o, _ = slime.detect_and_describe(texture, orientation_override=0.7)
    assert np.all(kp_o[:, 2] == 0.7)


def test_run_slime_identity(texture):
    cfg = slime.Config()
    cfg.threads = 2
    matches, diag = slime.run_slime(texture, texture, cfg)
    assert matches.shape[0] >= 5
    flows = matches[:, 4:6] - matches[:, 0:2]
    correct = (np.linalg.norm(flows, axis=1) < cfg.t_perp).mean()
    assert correct >= 0.9
    assert "final_matches" in diag


def test_run_slime_is_deterministic(texture):
    out = []
    for threads in (1, 4):
        cfg = slime.Config()
        cfg.threads = threads
        matches, _ = slime.run_slime(texture, texture, cfg)
        out.append(matches)
    assert np.array_equal(out[0], out[1])


def test_match_roundtrip(tmp_path):
    matches = np.array([[1.5, 2.25, 0.1, 2.0, 3.125, 4.0, -0.2, 1.0, 0.5]])
    path = str(tmp_path / "m.tsv")
    slime.save_matches(path, matches)
    back = slime.load_matches(path)
    assert np.array_equal(matches, back)


def test_evaluate_planar_perfect_matches():
    pts = np.array([[x, y] for x in range(5, 100, 9) for y in range(5, 100, 9)], float)
    matches = np.zeros((len(pts), 9))
    matches[:, 0:2] = pts
    matches[:, 4:6] = pts
    matches[:, 3] = 1.0
    matches[:, 7] = 1.0
    report = slime.evaluate_planar(matches, np.eye(3), 100, 100, 100, 100)
    assert report["precision"] == 1.0
    assert report["accuracy"] == 1.0
    assert report["failure"] == "none"
