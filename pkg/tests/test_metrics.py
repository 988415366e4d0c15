import json
import math

import numpy as np
import pytest

from ipsfuse.metrics import (
    METRICS,
    MetricError,
    MetricReport,
    evaluate,
    mutual_information,
    psnr,
    q_abf,
    q_mi,
    q_sf,
    ssim,
    to_gray,
)


def textured(rng, shape=(48, 48)):
    y, x = np.mgrid[: shape[0], : shape[1]]
    base = 0.5 + 0.3 * np.sin(x / 3.0) * np.cos(y / 5.0)
    return np.clip(base + 0.1 * rng.random(shape), 0, 1)


# ------------------------------------------------------------------ PSNR

def test_psnr_identical_is_infinite(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == math.inf


def test_psnr_uniform_error():
    assert psnr(np.full((5, 5), 0.6), np.full((5, 5), 0.5)) == pytest.approx(20.0, abs=1e-9)


def test_psnr_direct_summation(rng):
    a, b = rng.random((13, 9, 3)), rng.random((13, 9, 3))
    total = 0.0
    for v in (a - b).ravel():
        total += v * v
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (total / a.size)), abs=1e-9)


def test_psnr_monotone_in_noise(rng):
    ref = rng.random((32, 32))
    noise = rng.uniform(-1, 1, ref.shape)
    vals = [psnr(ref + amp * noise, ref) for amp in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


# ------------------------------------------------------------------ SSIM

def test_ssim_self(rng):
    x = rng.random((20, 24, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_inverted_binary_is_negative(rng):
    x = (rng.random((32, 32)) > 0.5).astype(float)
    assert ssim(x, 1 - x) < 0


def test_ssim_constants_luminance_only():
    c1, c2 = 0.2, 0.8
    k1 = 0.01**2
    expected = (2 * c1 * c2 + k1) / (c1**2 + c2**2 + k1)
    assert ssim(np.full((16, 16), c1), np.full((16, 16), c2)) == pytest.approx(expected, abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ssim_uses_channel_mean(rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim(a.mean(axis=2), b.mean(axis=2)), abs=1e-15)


# ------------------------------------------------------------------ Q_MI

def test_qmi_identity(rng):
    x = rng.random((32, 32))
    assert q_mi(x, x, x) == pytest.approx(2.0, abs=1e-12)


def test_qmi_independent_near_zero():
    r = np.random.default_rng(0)
    a, b, f = (r.random((512, 512)) for _ in range(3))
    assert abs(q_mi(f, a, b)) < 0.05


def test_qmi_first_term_only():
    r = np.random.default_rng(1)
    a, b = r.random((512, 512)), r.random((512, 512))
    mi_af, h_a, h_f = mutual_information(a, a)
    assert 2 * mi_af / (h_a + h_f) == pytest.approx(1.0, abs=1e-12)
    assert q_mi(a, a, b) == pytest.approx(1.0, abs=0.05)


def test_qmi_degenerate():
    with pytest.raises(MetricError, match="entropy"):
        q_mi(np.full((8, 8), 0.3), np.random.default_rng(0).random((8, 8)), np.random.default_rng(1).random((8, 8)))


def test_gray_uses_bt601(rng):
    x = rng.random((4, 4, 3))
    np.testing.assert_allclose(to_gray(x), 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2])


# ------------------------------------------------------------------ Q_SF

def test_qsf_constant():
    assert q_sf(np.full((6, 7), 0.4)) == 0.0


def test_qsf_vertical_stripes():
    stripes = np.tile([0.0, 1.0], (10, 5))
    assert q_sf(stripes) == pytest.approx(1.0, abs=1e-15)
    assert np.mean(np.diff(stripes, axis=0) ** 2) == 0.0


def test_qsf_double_loop(rng):
    g = rng.random((9, 11))
    h, w = g.shape
    rf = sum((g[i, j] - g[i, j - 1]) ** 2 for i in range(h) for j in range(1, w)) / (h * (w - 1))
    cf = sum((g[i, j] - g[i - 1, j]) ** 2 for i in range(1, h) for j in range(w)) / ((h - 1) * w)
    assert q_sf(g) == pytest.approx(math.sqrt(rf + cf), abs=1e-12)


def test_qsf_transpose_invariant(rng):
    g = rng.random((12, 12))
    assert q_sf(g) == pytest.approx(q_sf(g.T), abs=1e-14)


def test_qsf_single_pixel():
    with pytest.raises(ValueError):
        q_sf(np.zeros((1, 1)))


# ---------------------------------------------------------------- Q_AB/F

def test_qabf_identity(rng):
    x = textured(rng)
    assert q_abf(x, x, x) == pytest.approx(1.0, abs=1e-6)


def test_qabf_constant_fused(rng):
    a, b = textured(rng), textured(np.random.default_rng(99))
    assert q_abf(np.full_like(a, 0.5), a, b) < 0.05


def test_qabf_symmetric(rng):
    a, b, f = textured(rng), rng.random((48, 48)), rng.random((48, 48))
    assert q_abf(f, a, b) == pytest.approx(q_abf(f, b, a), abs=1e-15)


def test_qabf_flat_sources():
    with pytest.raises(MetricError):
        q_abf(np.random.default_rng(0).random((8, 8)), np.full((8, 8), 0.2), np.full((8, 8), 0.7))


def test_qabf_range(rng):
    a, b = textured(rng), rng.random((48, 48))
    assert 0.0 <= q_abf((a + b) / 2, a, b) <= 1.0


# -------------------------------------------------------------- reports

def test_metrics_are_pure(rng):
    a, b, f = rng.random((16, 16)), rng.random((16, 16)), rng.random((16, 16))
    copies = [x.copy() for x in (a, b, f)]
    first = [q_mi(f, a, b), q_abf(f, a, b), ssim(f, a), q_sf(f), psnr(f, a)]
    second = [q_mi(f, a, b), q_abf(f, a, b), ssim(f, a), q_sf(f), psnr(f, a)]
    assert first == second
    assert all(np.array_equal(x, y) for x, y in zip((a, b, f), copies))


def test_report_csv_and_aggregate(rng):
    fused = {"b": rng.random((16, 16)), "a": rng.random((16, 16))}
    refs = {"a": fused["a"].copy(), "b": rng.random((16, 16))}
    rep = evaluate(fused, ["psnr", "q_sf"], references=refs)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "image_id,metric,value"
    assert lines[1] == "a,psnr,inf"
    assert lines[5] == "" and lines[6] == "aggregate,metric,mean"
    sf = [rep.values[i]["q_sf"] for i in ("a", "b")]
    assert rep.aggregate()["q_sf"] == pytest.approx(np.mean(sf))
    assert "mean,psnr,inf" in lines


def test_report_filters_metrics(rng):
    rep = evaluate({"x": rng.random((16, 16))}, ["q_sf"])
    assert {row.split(",")[1] for row in rep.to_csv().splitlines()[1:2]} == {"q_sf"}
    assert "psnr" not in rep.to_csv()


def test_report_marks_failures(rng):
    rep = evaluate({"x": rng.random((16, 16))}, ["psnr", "q_sf"])
    assert "x,psnr,failed" in rep.to_csv()
    assert "reference" in rep.failures["x"]["psnr"]
    assert "q_sf" in rep.values["x"]


def test_report_json_round_trip(tmp_path, rng):
    x = rng.random((16, 16))
    rep = evaluate({"x": x}, METRICS, references={"x": x}, sources={"x": (x, x)})
    rep.write(tmp_path / "r.csv", tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["values"]["x"]["psnr"] == "inf"
    assert data["values"]["x"]["ssim"] == pytest.approx(1.0)
    assert (tmp_path / "r.csv").read_text() == rep.to_csv()


def test_unknown_metric():
    with pytest.raises(ValueError):
        evaluate({"x": np.zeros((4, 4))}, ["lpips"])


def test_report_type():
    assert isinstance(evaluate({"x": np.zeros((4, 4))}, ["q_sf"]), MetricReport)
