"""Acceptance checks, one test per criterion.

Criteria 1-3, 7 and 10 take seconds to a few minutes. The rest share desk-scale
runs built once per session (three seeds of the three regimes, the reversed
order, the buffer-size sweep), which takes a few hours on one core. Every
test records a PASS/FAIL line that is printed at the end of the session.

    pytest tests/test_acceptance.py -v           # everything
    pytest tests/test_acceptance.py -m "not slow" # the quick criteria only
"""

import filecmp
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from invcoss import config as cfgmod
from invcoss import diffcore as dc
from invcoss.cli import main as cli
from invcoss.config import RunConfig
from invcoss.continual import inversion_config, kd_loss, run_sequence
from invcoss.encoder import EncoderConfig, MimModel, PatchMask, frozen_copy, mim_forward
from invcoss.evalkit import diversity, sample_size_sweep, storage_report
from invcoss.inversion import FeaturePool, InversionConfig, inversion_objective, invert_task, pool_dim, \
    repulsive_loss, tv_loss
from invcoss.invunet import GeneratorConfig, InvUNet
from invcoss.stats import LayerStatistics, StatsArchive, capture_stats, norm_loss, welford_merge

from conftest import RESULTS, micro_config
from oracles import two_pass_stats

SEEDS = (0, 1, 2)
f64 = torch.float64


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def gradient_cases():
    """(name, fn, point, tol, skip) for every op and every loss term, all in float64."""
    enc = EncoderConfig(image_size=4, channels=1, patch=2, dim=4, depth=2, heads=1, mlp_ratio=2)
    gen_cfg = GeneratorConfig(latent_dim=4, bottleneck=2, channels=(3, 4), out_size=4, out_channels=1,
                              norm="instance")
    model = MimModel(enc, seed=0)
    arch = capture_stats(model, np.random.default_rng(0).random((20, 1, 4, 4)).astype(np.float32))
    frozen = frozen_copy(model).double()
    g = InvUNet(gen_cfg, dc.generator(3)).double()
    pool = FeaturePool(4, pool_dim(frozen))
    pool.extend(np.random.default_rng(1).normal(size=(3, pool_dim(frozen))))
    mask = PatchMask(torch.tensor([[1.0, 0.0], [1.0, 1.0]]), 0.75)
    w = rand(4, 3, 2, 2, seed=9)

    def kink(_, v):
        return np.abs(v) < 0.1

    # adjacent-pixel steps all clear the kink by more than 0.1, and alternate in
    # sign so that no gradient entry cancels to an exact zero
    tv_point = np.array([[[[0.0, 1.0, 0.2], [0.7, -0.5, 0.9], [0.1, 1.3, -0.4]]]])

    # KD's target is a stop-gradient teacher output, so its gradient is checked
    # against a weight of the student rather than the input
    student = MimModel(enc, seed=0).double()
    x_kd = rand(2, 1, 4, 4, seed=11)
    block = student.blocks[-1]
    w_kd = block.fc2_w.detach().clone() + 0.3
    del block._parameters["fc2_w"]

    def kd(wv):
        block.fc2_w = wv
        return kd_loss(student, frozen, x_kd)

    def composite(z):
        return inversion_objective(g, z, frozen, arch, pool, InversionConfig(generator=gen_cfg),
                                   dc.generator(0, "mask"))[0]

    return [
        ("matmul", lambda a, b: dc.reduce_sum(dc.square(dc.matmul(a, b))), [rand(3, 4), rand(4, 2, seed=1)],
         1e-4, None),
        ("linear", lambda x, wt, b: dc.reduce_sum(dc.tanh(dc.linear(x, wt, b))),
         [rand(2, 5), rand(3, 5, seed=1), rand(3, seed=2)], 1e-4, None),
        ("conv2d", lambda x, wt: dc.reduce_sum(dc.square(dc.conv2d(x, wt, padding=1))),
         [rand(2, 2, 4, 4), rand(3, 2, 3, 3, seed=1)], 1e-4, None),
        ("upsample", lambda x: dc.reduce_sum(dc.square(dc.upsample2x(x, "bilinear"))), [rand(1, 2, 3, 3)],
         1e-4, None),
        ("layer_norm", lambda x, a, b: dc.reduce_sum(dc.layer_norm(x, a, b) * rand(3, 6, seed=9)),
         [rand(3, 6), rand(6, seed=1), rand(6, seed=2)], 1e-4, None),
        ("batch_norm", lambda x, a, b: dc.reduce_sum(dc.batch_norm(x, a, b) * w),
         [rand(4, 3, 2, 2), rand(3, seed=1), rand(3, seed=2)], 1e-4, None),
        ("instance_norm", lambda x: dc.reduce_sum(dc.instance_norm(x, None, None) * w[:2]), [rand(2, 3, 2, 2)],
         1e-4, None),
        ("gelu", lambda x: dc.reduce_sum(dc.gelu(x)), [rand(6)], 1e-4, None),
        ("sigmoid", lambda x: dc.reduce_sum(dc.sigmoid(x)), [rand(6)], 1e-4, None),
        ("tanh", lambda x: dc.reduce_sum(dc.tanh(x)), [rand(6)], 1e-4, None),
        ("softmax", lambda x: dc.reduce_sum(dc.softmax(x, axis=-1) * rand(2, 5, seed=3)), [rand(2, 5)], 1e-4,
         None),
        ("add/mul/sub/mean", lambda a, b: dc.reduce_mean(dc.mul(dc.add(a, b), dc.sub(a, b))),
         [rand(4), rand(4, seed=1)], 1e-4, None),
        ("reshape/transpose/concat",
         lambda a, b: dc.reduce_sum(dc.square(dc.transpose(dc.concat([dc.reshape(a, (2, 3)), b], axis=0), 0, 1))
                                    * rand(3, 4, seed=4)), [rand(6), rand(2, 3, seed=1)], 1e-4, None),
        ("masked_select", lambda x: dc.reduce_sum(dc.square(dc.masked_select(x, torch.tensor([1, 0, 1, 1]) > 0))),
         [rand(4)], 1e-4, None),
        ("abs", lambda x: dc.reduce_sum(dc.abs(x) * rand(12, seed=5)), [rand(12)], 1e-3, kink),
        ("relu", lambda x: dc.reduce_sum(dc.relu(x) * rand(12, seed=5)), [rand(12)], 1e-3, kink),
        ("leaky_relu", lambda x: dc.reduce_sum(dc.leaky_relu(x) * rand(12, seed=5)), [rand(12)], 1e-3, kink),
        ("L_norm", lambda f0, f1: norm_loss([f0, f1], arch),
         [rand(3, 4, 4, seed=6), rand(3, 4, 4, seed=7)], 1e-4, None),
        ("L_rep", lambda h: repulsive_loss(h, pool), [rand(2, pool_dim(frozen), seed=8)], 1e-4, None),
        ("L_task (MIM)", lambda x: mim_forward(frozen, x, mask)[1], [rand(2, 1, 4, 4, seed=10)], 1e-4, None),
        ("L_img (TV)", tv_loss, [tv_point], 1e-3, None),
        ("L_kd", kd, [w_kd], 1e-4, None),
        ("L_inv composite", composite, [np.random.default_rng(5).normal(size=(2, 4))], 1e-3, None),
    ]


def test_criterion_01_gradient_suite():
    t0 = time.time()
    errs = {}
    for name, fn, point, tol, skip in gradient_cases():
        errs[name] = (dc.grad_check(fn, point, eps=1e-4, skip=skip), tol)
    secs = time.time() - t0
    bad = {k: e for k, (e, tol) in errs.items() if not e < tol}
    worst = max(errs, key=lambda k: errs[k][0] / errs[k][1])
    ok = not bad and secs < 120
    record(1, ok, f"{len(errs)} checks, worst {worst} rel.err {errs[worst][0]:.2e}, {secs:.1f} s"
           + (f", failing {sorted(bad)}" if bad else ""))
    assert not bad, bad
    assert secs < 120


# ---------------------------------------------------------------------------
# 2. statistics oracle
# ---------------------------------------------------------------------------

def test_criterion_02_statistics_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    feats = rng.normal(loc=2.0, scale=1.5, size=(10_000, 4, 8)) * rng.uniform(0.5, 3, size=(1, 4, 8))
    ref_mu, ref_var = two_pass_stats(feats)
    worst = {np.float64: 0.0, np.float32: 0.0}
    for _ in range(50):
        cuts = np.sort(rng.choice(np.arange(1, len(feats)), size=rng.integers(1, 60), replace=False))
        for dtype in worst:
            st = LayerStatistics.empty()
            for part in np.split(feats.astype(dtype), cuts):
                st = welford_merge(st, part)
            assert st.count == len(feats)
            err = max(np.max(np.abs(st.mean - ref_mu) / np.abs(ref_mu)),
                      np.max(np.abs(st.var - ref_var) / np.abs(ref_var)))
            worst[dtype] = max(worst[dtype], float(err))
    secs = time.time() - t0
    ok = worst[np.float64] < 1e-10 and worst[np.float32] < 1e-4 and secs < 60
    record(2, ok, f"50 partitions, max rel.err f64 {worst[np.float64]:.1e}, f32 {worst[np.float32]:.1e}, "
                  f"{secs:.1f} s")
    assert worst[np.float64] < 1e-10
    assert worst[np.float32] < 1e-4
    assert secs < 60


# ---------------------------------------------------------------------------
# 3. closed-form loss values
# ---------------------------------------------------------------------------

def test_criterion_03_closed_form_losses():
    tv = tv_loss(torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])).item()
    rep = repulsive_loss(torch.tensor([[1.0, 1.0]]) / np.sqrt(2), np.array([[1.0, 0.0]])).item()

    enc = EncoderConfig(image_size=8, channels=1, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2)
    model = MimModel(enc, seed=0)
    x = np.random.default_rng(0).random((6, 1, 8, 8)).astype(np.float32)
    arch = capture_stats(model, x)
    with torch.no_grad():
        matched = norm_loss([f.double() for f in model.features(torch.from_numpy(x))], arch).item()
        empty = mim_forward(model, torch.from_numpy(x), PatchMask(torch.zeros(2, 2), 0.0))[1].item()

    got = {"TV": (tv, 6.0), "L_rep": (rep, 0.5), "L_norm matched": (matched, 0.0), "MIM empty mask": (empty, 0.0)}
    bad = {k: v for k, (v, want) in got.items() if abs(v - want) > 1e-6}
    record(3, not bad, ", ".join(f"{k}={v:.3g}" for k, (v, _) in got.items()))
    assert not bad, bad


# ---------------------------------------------------------------------------
# shared desk-scale runs
# ---------------------------------------------------------------------------

class Desk:
    """Lazily built desk-default runs shared by the slow criteria."""

    def __init__(self, root: Path):
        self.root = root
        self.cache: dict = {}
        self.runs: dict = {}
        self.seconds: dict = {}

    def cfg(self, seed: int) -> RunConfig:
        return RunConfig(seed=seed)

    def run(self, seed: int, regime: str, reverse: bool = False):
        key = (seed, regime, reverse)
        if key not in self.runs:
            cfg = self.cfg(seed)
            order = [t.id for t in cfg.tasks]
            if reverse:
                order = order[::-1]
            tag = "reversed" if reverse else "forward"
            root = self.root / tag / f"seed{seed}" / regime
            root.mkdir(parents=True)
            (root / "config.yaml").write_text(cfgmod.dump(replace(cfg, continual=replace(cfg.continual, regime=regime))))
            t0 = time.time()
            self.runs[key] = run_sequence(cfg, root, regime=regime, task_order=order, inversion_cache=self.cache)
            self.seconds[key] = time.time() - t0
        return self.runs[key]

    def first_task_loss(self, seed: int, regime: str, reverse: bool = False) -> float:
        res = self.run(seed, regime, reverse)
        return res.final_loss(res.tasks[0])


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


def pretrained_first_task(desk: Desk, seed: int):
    """Stage-0 artifacts of the invcoss run: the first task trained from scratch."""
    res = desk.run(seed, "invcoss")
    return frozen_copy(MimModel.load(res.checkpoints[0])), StatsArchive.load(res.stats[0])


# ---------------------------------------------------------------------------
# 4. inversion descent
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_inversion_descent(desk):
    frozen, archive = pretrained_first_task(desk, 0)
    inv = replace(inversion_config(desk.cfg(0)), n_samples=100)
    assert inv.weights == (1.0, 0.1, 0.1)
    t0 = time.time()
    res = invert_task(frozen, archive, inv, task="blobs")
    secs = time.time() - t0
    desk.inverted = {(0, ()): res}
    ratios = [res.batch_norm_curve(b)[1] / res.batch_norm_curve(b)[0] for b in sorted({r["batch"] for r in res.trace})]
    ok = max(ratios) < 0.5 and secs < 600 and len(res.dataset) == 100
    record(4, ok, f"final/initial L_norm per batch {[round(r, 3) for r in ratios]}, 100 images in {secs:.0f} s")
    assert max(ratios) < 0.5
    assert secs < 600


# ---------------------------------------------------------------------------
# 5. repulsion ablation
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_05_repulsion_ablation(desk):
    cached = getattr(desk, "inverted", {})
    rows = []
    for seed in SEEDS:
        frozen, archive = pretrained_first_task(desk, seed)
        div = {}
        for ab in ((), ("rep",)):
            res = cached.get((seed, ab))
            if res is None:
                inv = replace(inversion_config(desk.cfg(seed)), n_samples=100, ablate=frozenset(ab))
                res = invert_task(frozen, archive, inv, task="blobs")
            div[ab] = diversity(res.pool.matrix())
        rows.append((seed, div[()], div[("rep",)], 1 - div[()] / div[("rep",)]))
    ok = all(r[3] >= 0.10 for r in rows)
    record(5, ok, "; ".join(f"seed {s}: with {a:.4f} without {b:.4f} ({red:+.1%})" for s, a, b, red in rows))
    for s, with_rep, without, reduction in rows:
        assert with_rep < without, f"seed {s}"
        assert reduction >= 0.10, f"seed {s}: reduction {reduction:.2%}"


# ---------------------------------------------------------------------------
# 6. retention
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_retention(desk):
    rows = []
    for seed in SEEDS:
        losses = {r: desk.first_task_loss(seed, r) for r in ("seqssl", "invcoss", "joint")}
        secs = sum(desk.seconds[(seed, r, False)] for r in ("seqssl", "invcoss", "joint"))
        rows.append((seed, losses, secs))
    margins = [1 - r[1]["invcoss"] / r[1]["seqssl"] for r in rows]
    joint = [r[1]["invcoss"] / r[1]["joint"] for r in rows]
    slowest = max(r[2] for r in rows)
    ok = min(margins) >= 0.10 and max(joint) <= 1.25 and slowest < 45 * 60
    record(6, ok, "; ".join(f"seed {s}: inv {l['invcoss']:.4f} seq {l['seqssl']:.4f} joint {l['joint']:.4f}"
                            for s, l, _ in rows)
           + f"; margins {[f'{m:.1%}' for m in margins]}, inv/joint {[round(j, 2) for j in joint]}, "
             f"slowest seed {slowest / 60:.1f} min")
    assert min(margins) >= 0.10
    assert max(joint) <= 1.25
    assert slowest < 45 * 60


# ---------------------------------------------------------------------------
# 7. raw-data-free guarantee
# ---------------------------------------------------------------------------

def raw_free_config(purge: bool) -> RunConfig:
    """Desk architecture with short tasks and schedules so two full sequences stay quick."""
    base = RunConfig()
    tasks = tuple(replace(t, size=160, held_out=20) for t in base.tasks)
    return replace(base, tasks=tasks, train=replace(base.train, epochs=1),
                   inversion=replace(base.inversion, steps=10),
                   continual=replace(base.continual, buffer_ratio=0.1, purge_raw=purge))


def test_criterion_07_raw_data_free(tmp_path):
    kept = run_sequence(raw_free_config(False), tmp_path / "kept", regime="invcoss")
    purged = run_sequence(raw_free_config(True), tmp_path / "purged", regime="invcoss")
    gone = sorted(p.name for p in (tmp_path / "kept" / "data").glob("*.train.ivcs")
                  if not (tmp_path / "purged" / "data" / p.name).exists())
    compared = ["stage1/buffer.ivcs", "stage2/buffer.ivcs", "stage2/buffer_manifest.csv",
                "stage2/checkpoint.ivcs", "stage2/stats.ivcs", "stage2/loss.csv"]
    same = {f: filecmp.cmp(kept.root / f, purged.root / f, shallow=False) for f in compared}
    ok = all(same.values()) and {"blobs.train.ivcs", "stripes.train.ivcs"} <= set(gone)
    record(7, ok, f"raw data removed {gone}; identical bytes: {sum(same.values())}/{len(same)} artifacts")
    assert {"blobs.train.ivcs", "stripes.train.ivcs"} <= set(gone)
    assert all(same.values()), same


# ---------------------------------------------------------------------------
# 8. storage analogue
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_storage(desk, tmp_path):
    run = desk.run(0, "invcoss")
    assert cli(["storage-report", str(run.root), "--out", str(tmp_path / "storage")]) == 0
    report = storage_report([(t, run.root / f"stage{i}" / "stats.ivcs", tmp_path / "storage" / f"{t}.raw-buffer.ivcs")
                             for i, t in enumerate(run.tasks)])
    exact = all(r.stats_bytes == (run.root / f"stage{i}" / "stats.ivcs").stat().st_size
                and r.raw_bytes == (tmp_path / "storage" / f"{r.task}.raw-buffer.ivcs").stat().st_size
                for i, r in enumerate(report.rows))
    csv_rows = (tmp_path / "storage" / "storage.csv").read_text().splitlines()[1:]
    ratios = [r.ratio for r in report.rows]
    ok = exact and min(ratios) > 5 and len(csv_rows) == 3
    r0 = report.rows[0]
    record(8, ok, f"stats {r0.stats_bytes} B vs raw buffer ({r0.raw_count} images) {r0.raw_bytes} B, "
                  f"ratios {[round(r, 2) for r in ratios]}, sizes exact: {exact}")
    assert exact
    assert min(ratios) > 5


# ---------------------------------------------------------------------------
# 9. sample-size sweep
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_sweep(desk):
    seq = desk.first_task_loss(0, "seqssl")
    sweep = sample_size_sweep(desk.cfg(0), (0.01, 0.05, 0.10), desk.root / "sweep", inversion_cache=desk.cache)
    first = desk.cfg(0).tasks[0].id
    final = {r: m.loss(m.stages - 1, first) for r, m in sweep.items()}
    done = set(final) == {0.01, 0.05, 0.10} and all(np.isfinite(v) for v in final.values())
    margin = 1 - final[0.01] / seq
    record(9, done and margin > 0, f"first-task loss by ratio {{{', '.join(f'{r:g}: {v:.4f}' for r, v in final.items())}}}"
                                   f", seqssl {seq:.4f}, margin at 1% {margin:+.1%}")
    assert done
    assert margin > 0


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != ".lock"}


def test_criterion_10_determinism(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text(cfgmod.dump(micro_config(seed=5)))
    c = ["--config", str(cfg_path)]
    diffs, files = [], 0
    for rep in ("a", "b"):
        r = tmp_path / rep
        assert cli(["pretrain", *c, "--out", str(r / "pre")]) == 0
        assert cli(["invert", *c, "--checkpoint", str(r / "pre/checkpoint.ivcs"), "--stats",
                    str(r / "pre/stats.ivcs"), "--n", "6", "--out", str(r / "inv")]) == 0
        assert cli(["continual", *c, "--out", str(r / "cont")]) == 0
        assert cli(["continual", *c, "--regime", "seqssl", "--out", str(r / "seq")]) == 0
        assert cli(["eval", str(r / "cont"), "--out", str(r / "eval")]) == 0
        assert cli(["storage-report", str(r / "cont"), "--out", str(r / "storage")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    files = len(a)
    diffs = sorted(set(a) ^ set(b)) + sorted(k for k in set(a) & set(b) if a[k] != b[k])
    kinds = {Path(k).suffix for k in a}
    ok = not diffs and {".ivcs", ".csv", ".pgm"} <= kinds
    record(10, ok, f"{files} files from pretrain/invert/continual/eval/storage-report compared, "
                   f"{len(diffs)} differ")
    assert not diffs, diffs[:5]
    assert {".ivcs", ".csv", ".pgm"} <= kinds


# ---------------------------------------------------------------------------
# 11. order robustness
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_order_robustness(desk):
    rows = []
    for seed in SEEDS:
        inv = desk.first_task_loss(seed, "invcoss", reverse=True)
        seq = desk.first_task_loss(seed, "seqssl", reverse=True)
        rows.append((seed, inv, seq, 1 - inv / seq))
    first = desk.runs[(0, "invcoss", True)].tasks[0]
    ok = all(r[3] >= 0.10 for r in rows)
    record(11, ok, f"reversed order, first task {first}: "
                   + "; ".join(f"seed {s}: inv {i:.4f} seq {q:.4f} ({m:+.1%})" for s, i, q, m in rows))
    for s, _, _, m in rows:
        assert m >= 0.10, f"seed {s}: margin {m:.2%}"
