"""End-to-end acceptance checks. A summary line per criterion is printed after the run."""

import json
import time

import numpy as np
import pytest

from cases import mislabeled, two_region_case
from oracles import refine_oracle
from singlestage.cli import run_toy
from singlestage.gate import GateConfig, gate_train
from singlestage.gradsuite import OPS, check_op
from singlestage.numerics import Rng, softmax_over_channels
from singlestage.pamr import PamrConfig, affinity, refine
from singlestage.scores import NgwpConfig, ngwp
from singlestage.toytrain import TrainConfig, ToyDatasetConfig

DEFAULT_DILATIONS = (1, 2, 4, 8, 12, 24)


def random_pair(rng, size=None, classes=None):
    h, w = size or rng.integers(4, 41, 2)
    c = classes or int(rng.integers(2, 6))
    image = rng.random((3, h, w))
    mask = softmax_over_channels(rng.normal(scale=3.0, size=(c, h, w)), axis=0)
    return image, mask


@pytest.mark.criterion(1, "analytic gradients match finite differences")
class TestGradients:
    @pytest.mark.parametrize("op", OPS)
    def test_twenty_instances(self, op):
        start = time.perf_counter()
        errors = check_op(op, seed=0, instances=20)
        assert len(errors) == 20
        assert max(errors) < 1e-4, f"{op}: {max(errors):.2e}"
        assert time.perf_counter() - start < 30

    def test_whole_suite_under_30s(self):
        start = time.perf_counter()
        for op in OPS:
            check_op(op, seed=1, instances=20)
        assert time.perf_counter() - start < 30


def point_mask(shape, pixel, t):
    """Background plus one class channel holding ``t`` at ``pixel`` and zero elsewhere."""
    mask = np.zeros((2, *shape))
    mask[1][pixel] = t
    return mask


def path_cases(n=20, size=(8, 8), t=1e-6):
    for seed in range(n):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=(1, *size))
        k, l = rng.choice(size[0] * size[1], 2, replace=False)
        pk, pl = np.unravel_index(k, size), np.unravel_index(l, size)
        yield y, y[0][pk], y[0][pl], point_mask(size, pk, t), point_mask(size, pl, t)


@pytest.mark.criterion(2, "pooled score at vanishing masks")
class TestVanishingMasks:
    def test_zero_epsilon_limit_depends_on_path(self):
        cfg = NgwpConfig.zero_epsilon()
        for y, yk, yl, mk, ml in path_cases():
            gap = abs(ngwp(mk, y, cfg)[0] - ngwp(ml, y, cfg)[0])
            assert abs(gap - abs(yk - yl)) <= 1e-6

    def test_unit_epsilon_below_stated_bound(self):
        t = 1e-6
        worst = max(max(abs(ngwp(mk, y)[0]), abs(ngwp(ml, y)[0])) for y, _, _, mk, ml in path_cases(t=t))
        assert worst < 1e-5 * t, f"largest |value| {worst:.3e} vs bound {1e-5 * t:.1e}"


def test_unit_epsilon_value_vanishes_with_t():
    # with epsilon = 1 the value along t*e_k is exactly t*y_k/(1+t), so it is O(t) and path-continuous at 0
    for t in (1e-3, 1e-6, 1e-9):
        for y, yk, yl, mk, ml in path_cases(t=t):
            vk, vl = ngwp(mk, y)[0], ngwp(ml, y)[0]
            assert vk == pytest.approx(t * yk / (1 + t), rel=1e-12)
            assert abs(vk) <= t * abs(yk) and abs(vl) <= t * abs(yl)


@pytest.mark.criterion(3, "refinement preserves the probability simplex")
def test_simplex_preservation():
    rng = np.random.default_rng(0)
    cfg = PamrConfig(dilations=DEFAULT_DILATIONS)
    worst_sum = worst_row = 0.0
    for _ in range(1000):
        image, mask = random_pair(rng)
        aff = affinity(image, cfg)
        out = refine(mask, aff, 10)
        assert np.all(out >= 0)
        worst_sum = max(worst_sum, np.abs(out.sum(axis=0) - 1).max())
        worst_row = max(worst_row, np.abs(aff.weights.sum(axis=0) - 1).max())
    assert worst_sum <= 1e-9
    assert worst_row <= 1e-9


@pytest.mark.criterion(4, "refinement matches a brute-force reference on 6x6 inputs")
def test_oracle_equivalence():
    cfg = PamrConfig(dilations=DEFAULT_DILATIONS)
    for seed in range(50):
        image, mask = random_pair(np.random.default_rng(seed), size=(6, 6), classes=3)
        out = refine(mask, affinity(image, cfg), 10)
        ref = refine_oracle(image, mask, DEFAULT_DILATIONS, 10)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12, err_msg=f"seed {seed}")


@pytest.mark.criterion(5, "refinement snaps shifted masks to image edges")
def test_boundary_snap():
    cfg = PamrConfig(dilations=(1, 2, 4, 8))
    improved = 0
    for seed in range(20):
        image, truth, mask = two_region_case(seed, offset=2)
        out = refine(mask, affinity(image, cfg), 10)
        improved += mislabeled(out, truth) < mislabeled(mask, truth)
    assert improved >= 19, f"{improved}/20 improved"


@pytest.mark.criterion(6, "stochastic gate is unbiased for the deep stream")
@pytest.mark.parametrize("psi", [0.3, 0.5])
def test_gate_expectation(psi):
    n, chunk = 100_000, 10_000
    rng = np.random.default_rng(int(psi * 10))
    x_d, x_s = rng.normal(size=(1, 4, 5, 6)), rng.normal(size=(1, 4, 5, 6))
    cfg = GateConfig(psi=psi)
    draws = Rng(7)
    total = np.zeros(x_d.shape[1:])
    for _ in range(n // chunk):
        total += gate_train(np.repeat(x_d, chunk, 0), np.repeat(x_s, chunk, 0), cfg, draws).sum(axis=0)
    mean = total / n
    keep = cfg.delta * (x_d[0] - psi * x_s[0])
    se = np.sqrt(psi * (1 - psi)) * np.abs(keep - x_s[0]) / np.sqrt(n)
    within = np.abs(mean - x_d[0]) <= 4 * se
    assert within.mean() >= 0.99, f"{within.mean():.3f} within 4 SE"


SEEDS = (0, 1, 2)
VARIANTS = {
    "full": {},
    "phase1_only": {"enable_phase2": False},
    "no_pamr": {"use_pamr": False},
    "no_sg": {"gate": GateConfig(psi=0.0)},
}


def toy_config(seed, **overrides):
    return TrainConfig(seed=seed, dataset=ToyDatasetConfig(seed=seed), **overrides)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    runs, seconds = {}, {}
    for seed in SEEDS:
        for name, overrides in VARIANTS.items():
            out = tmp_path_factory.mktemp(f"{name}_{seed}")
            start = time.perf_counter()
            runs[name, seed] = run_toy(toy_config(seed, **overrides), out)
            seconds[name, seed] = time.perf_counter() - start
            runs[name, seed]["path"] = out / "metrics.json"
    return runs, seconds


@pytest.mark.slow
@pytest.mark.criterion(7, "toy training beats the classification-only baseline")
class TestToyTraining:
    def test_defaults(self):
        cfg = toy_config(0)
        assert cfg.gate.psi == 0.3 and cfg.focal.p == 3.0 and cfg.focal.lam == 0.01
        assert cfg.pamr.dilations == DEFAULT_DILATIONS and cfg.pamr.iterations == 10
        assert (cfg.pamr.fg_threshold, cfg.pamr.bg_threshold) == (0.6, 0.7)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_full_beats_phase_one(self, toy_runs, seed):
        runs, _ = toy_runs
        full, base = runs["full", seed]["mean_iou"], runs["phase1_only", seed]["mean_iou"]
        assert full - base >= 0.10, f"full {full:.3f} vs phase-1 {base:.3f}"

    @pytest.mark.parametrize("ablation", ["no_pamr", "no_sg"])
    def test_ablation_majority(self, toy_runs, ablation):
        runs, _ = toy_runs
        worse = [runs[ablation, s]["mean_iou"] < runs["full", s]["mean_iou"] for s in SEEDS]
        assert sum(worse) >= 2, f"{ablation} worse on {sum(worse)}/3 seeds"

    def test_run_time(self, toy_runs):
        _, seconds = toy_runs
        assert max(seconds[name, s] for name in ("full", "no_sg") for s in SEEDS) < 600


@pytest.mark.slow
@pytest.mark.criterion(8, "repeated toy run gives bit-identical metrics")
def test_determinism(toy_runs, tmp_path):
    runs, _ = toy_runs
    first = runs["full", 0]["path"].read_bytes()
    run_toy(toy_config(0), tmp_path)
    assert (tmp_path / "metrics.json").read_bytes() == first
    assert json.loads(first)["mean_iou"] == runs["full", 0]["mean_iou"]
