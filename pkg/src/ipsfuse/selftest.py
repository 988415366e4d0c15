"""Fast invariant checks run by ``ipsfuse selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import metrics, shuffle, ssm
from .autodiff import Tensor
from .gradcheck import check_gradients


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_stable(rng, n):
    return ssm.ContinuousSsm(-rng.uniform(0.1, 3.0, n), rng.normal(size=n), rng.normal(size=n), float(rng.normal()))


def check_ssm_equivalence(rng, discretize=ssm.zoh_discretize) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(40):
        n = int(rng.choice([1, 2, 4, 8]))
        length = int(rng.choice([1, 8, 64]))
        d = discretize(_random_stable(rng, n), float(rng.uniform(0.01, 1.0)))
        x = rng.normal(size=length)
        worst = max(worst, float(np.max(np.abs(ssm.ssm_recurrent(d, x) - ssm.ssm_conv(d, x)))))
    return worst < 1e-10, f"max |recurrent - conv| = {worst:.2e}"


def check_zoh_limit(rng, discretize=ssm.zoh_discretize) -> tuple[bool, str]:
    # the exact relative gap is |a| * delta / 2, so poles stay inside |a| < 2
    sys_ = ssm.ContinuousSsm([-0.5, -1.0, -1.5], [1.0, -2.0, 0.5], [1.0, 1.0, 1.0])
    delta = 1e-6
    d = discretize(sys_, delta)
    b_err = float(np.max(np.abs(d.B_bar - delta * sys_.B) / np.abs(delta * sys_.B)))
    residuals = [np.max(np.abs(discretize(sys_, h).A_bar - (1 + h * sys_.A))) for h in (1e-2, 5e-3, 2.5e-3)]
    ratios = [residuals[0] / residuals[1], residuals[1] / residuals[2]]
    ok = b_err < 1e-6 and all(3.8 < r < 4.2 for r in ratios)
    return ok, f"B_bar rel. err at delta=1e-6: {b_err:.2e}; halving ratios {ratios[0]:.3f}, {ratios[1]:.3f}"


def check_selective_degeneracy(rng, discretize=ssm.zoh_discretize) -> tuple[bool, str]:
    n, length = 4, 32
    sys_ = _random_stable(rng, n)
    delta = 0.3
    x = rng.normal(size=length)
    ref = ssm.ssm_recurrent(discretize(sys_, delta), x)
    out = ssm.selective_scan(
        Tensor(x.reshape(1, length, 1)),
        Tensor(np.full((1, length, 1), delta)),
        Tensor(sys_.A.reshape(1, n)),
        Tensor(np.tile(sys_.B, (1, length, 1))),
        Tensor(np.tile(sys_.C, (1, length, 1))),
        Tensor(np.array([sys_.D])),
    ).data.reshape(-1)
    err = float(np.max(np.abs(out - ref)))
    return err < 1e-10, f"max |selective - LTI| = {err:.2e}"


def check_scan_gradients(rng) -> tuple[bool, str]:
    b, length, d, n = 1, 5, 2, 2
    x = Tensor(rng.normal(size=(b, length, d)), requires_grad=True, name="x")
    delta = Tensor(rng.uniform(0.05, 0.5, (b, length, d)), requires_grad=True, name="delta")
    a = Tensor(-rng.uniform(0.2, 2.0, (d, n)), requires_grad=True, name="A")
    bm = Tensor(rng.normal(size=(b, length, n)), requires_grad=True, name="B")
    cm = Tensor(rng.normal(size=(b, length, n)), requires_grad=True, name="C")
    w = rng.normal(size=(b, length, d))
    errs = check_gradients(lambda: (ssm.selective_scan(x, delta, a, bm, cm) * w).sum(), [x, delta, a, bm, cm])
    worst = max(errs.values())
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_layer_gradients(rng) -> tuple[bool, str]:
    x = Tensor(rng.normal(size=(1, 5, 5, 2)), requires_grad=True, name="x")
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True, name="w")
    bias = Tensor(rng.normal(size=3), requires_grad=True, name="b")
    proj = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="proj")
    gain = Tensor(rng.normal(size=4), requires_grad=True, name="gain")
    weights = rng.normal(size=(1, 5, 5, 4))

    def fn():
        h = ad.conv2d(x, w, bias, "reflect") @ proj
        return (ad.silu(ad.layernorm(h, gain)) * weights).sum()

    errs = check_gradients(fn, [x, w, bias, proj, gain])
    worst = max(errs.values())
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_shuffle_algebra(rng) -> tuple[bool, str]:
    for _ in range(20):
        sharp = rng.random((8, 8, 3))
        blurred = rng.random((8, 8, 3))
        m = shuffle.sample_mask(sharp.shape, float(rng.choice([0.0, 0.5, 1.0])), rng)
        f, d = shuffle.recombine(sharp, blurred, m)
        if not np.array_equal(f + d, sharp + blurred):
            return False, "conservation violated"
        f2, d2 = shuffle.recombine(f, d, m)
        if not (np.array_equal(f2, sharp) and np.array_equal(d2, blurred)):
            return False, "involution violated"
        if not np.array_equal(shuffle.reconstruct_with_mask(f, d, m), sharp):
            return False, "reconstruction not exact"
    return True, "conservation, involution, reconstruction exact on 20 cases"


def check_mask_ratio(rng) -> tuple[bool, str]:
    frac = 1.0 - shuffle.sample_mask((1000, 1000), 0.5, rng).mean()
    return abs(frac - 0.5) < 0.002, f"zero fraction {frac:.5f} at p=0.5"


def check_metric_sanity(rng) -> tuple[bool, str]:
    img = rng.random((32, 32, 1))
    checks = {
        "psnr 0.1 offset": abs(metrics.psnr(np.full((8, 8), 0.6), np.full((8, 8), 0.5)) - 20.0) < 1e-9,
        "ssim self": abs(metrics.ssim(img, img) - 1.0) < 1e-12,
        "q_sf stripes": abs(metrics.q_sf(np.tile([0.0, 1.0], (8, 4))) - 1.0) < 1e-12,
        "q_abf identity": abs(metrics.q_abf(img, img, img) - 1.0) < 1e-6,
        "q_mi identity": abs(metrics.q_mi(img, img, img) - 2.0) < 1e-12,
    }
    failed = [k for k, ok in checks.items() if not ok]
    return not failed, "all metric identities hold" if not failed else f"failed: {', '.join(failed)}"


def run_selftest(seed: int = 0, discretize: Callable = ssm.zoh_discretize) -> list[CheckResult]:
    checks = [
        ("ssm recurrent == convolution", lambda r: check_ssm_equivalence(r, discretize)),
        ("zoh small-step limit", lambda r: check_zoh_limit(r, discretize)),
        ("selective scan LTI degeneracy", lambda r: check_selective_degeneracy(r, discretize)),
        ("selective scan gradients", check_scan_gradients),
        ("conv/matmul/layernorm gradients", check_layer_gradients),
        ("shuffle algebra", check_shuffle_algebra),
        ("mask ratio", check_mask_ratio),
        ("metric sanity", check_metric_sanity),
    ]
    results = []
    for name, fn in checks:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  time    detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {status}    {r.seconds:5.2f}s  {r.detail}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)
