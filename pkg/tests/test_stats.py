import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from invcoss import diffcore as dc
from invcoss.encoder import EncoderConfig, MimModel
from invcoss.stats import (FingerprintMismatch, LayerStatistics, StatsArchive, capture_stats,
                           check_fingerprint, norm_loss, welford_merge)

from oracles import norm_gap, rel_err, two_pass_stats

TINY = EncoderConfig(image_size=8, channels=1, patch=4, dim=8, depth=2, heads=2, mlp_ratio=2)


def col(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


def fold(batches):
    st_ = LayerStatistics.empty()
    for b in batches:
        st_ = welford_merge(st_, b)
    return st_


def test_single_batch():
    s = fold([col([1, 3])])
    assert s.mean.item() == 2 and s.var.item() == 1 and s.count == 2


def test_two_batches():
    s = fold([col([0, 0]), col([2, 2])])
    assert (s.mean.item(), s.var.item(), s.count) == (1, 1, 4)


def test_merging_the_mean_keeps_the_mean():
    s = fold([col([1, 5, 3])])
    s2 = welford_merge(s, col([3, 3]))
    assert s2.mean.item() == 3 and s2.var.item() < s.var.item()


def test_shape_mismatch_and_empty():
    s = fold([np.zeros((2, 3, 4))])
    with pytest.raises(dc.ShapeError):
        welford_merge(s, np.zeros((2, 3, 5)))
    with pytest.raises(ValueError):
        welford_merge(s, np.zeros((0, 3, 4)))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 3), st.integers(1, 3)),
                  elements=st.floats(-1e3, 1e3)),
       st.lists(st.integers(1, 10), min_size=1, max_size=10))
@settings(max_examples=80, deadline=None)
def test_any_partition_matches_two_pass(x, sizes):
    cuts, pos = [], 0
    for s in sizes:
        pos += s
        if pos < len(x):
            cuts.append(pos)
    s = fold(np.split(x, cuts))
    mu, var = two_pass_stats(x)
    scale = max(1.0, float(np.abs(x).max()) ** 2)
    assert s.count == len(x)
    assert np.allclose(s.mean, mu, rtol=1e-10, atol=1e-10 * scale)
    assert np.allclose(s.var, var, rtol=1e-10, atol=1e-10 * scale)
    assert (s.var >= 0).all()


@pytest.fixture(scope="module")
def tiny():
    return MimModel(TINY, seed=0)


def test_capture_identical_images(tiny):
    img = np.random.default_rng(0).random((1, 1, 8, 8)).astype(np.float32)
    arch = capture_stats(tiny, np.repeat(img, 10, axis=0), batch_size=3)
    feats = [f[0].detach().numpy() for f in tiny.features(torch.from_numpy(img))]
    assert arch.count == 10
    for st_, f in zip(arch.layers, feats):
        assert np.allclose(st_.var, 0, atol=1e-10)
        assert np.allclose(st_.mean, f, rtol=1e-6)


def test_capture_independent_of_batch_size(tiny):
    x = np.random.default_rng(1).random((50, 1, 8, 8)).astype(np.float32)
    with torch.no_grad():
        feats = [f.double().numpy() for f in tiny.features(torch.from_numpy(x))]
    for bs in (8, 32):
        arch = capture_stats(tiny, x, batch_size=bs, dtype=torch.float32)
        for st_, f in zip(arch.layers, feats):
            mu, var = two_pass_stats(f)
            assert rel_err(st_.mean, mu) < 1e-4 or np.allclose(st_.mean, mu, atol=1e-6)
            assert np.allclose(st_.var, var, rtol=1e-4, atol=1e-7)


def test_capture_rejects_empty(tiny):
    with pytest.raises(ValueError):
        capture_stats(tiny, np.zeros((0, 1, 8, 8), np.float32))


def test_archive_round_trip(tiny, tmp_path):
    x = np.random.default_rng(2).random((7, 1, 8, 8)).astype(np.float32)
    arch = capture_stats(tiny, x, task="blobs")
    arch.save(tmp_path / "s.ivcs")
    back = StatsArchive.load(tmp_path / "s.ivcs")
    assert back.count == 7 and back.task == "blobs" and back.fingerprint == arch.fingerprint
    back.save(tmp_path / "t.ivcs")
    assert (tmp_path / "s.ivcs").read_bytes() == (tmp_path / "t.ivcs").read_bytes()
    for a, b in zip(back.layers, StatsArchive.load(tmp_path / "t.ivcs").layers):
        assert a.mean.tobytes() == b.mean.tobytes() and a.var.tobytes() == b.var.tobytes()


def test_fingerprint_checked(tiny):
    arch = capture_stats(tiny, np.zeros((2, 1, 8, 8), np.float32))
    other = MimModel(EncoderConfig(image_size=8, patch=4, dim=8, depth=2, heads=1, mlp_ratio=2))
    with pytest.raises(FingerprintMismatch):
        check_fingerprint(arch, other)
    check_fingerprint(arch, tiny)


def archive(means, variances):
    layers = [LayerStatistics(i, np.asarray(m, np.float64), np.asarray(v, np.float64), 10)
              for i, (m, v) in enumerate(zip(means, variances))]
    return StatsArchive(layers, "fp")


def test_norm_loss_matched_is_zero():
    f = torch.tensor(np.random.default_rng(0).normal(size=(5, 2, 3)))
    mu, var = two_pass_stats(f.numpy())
    assert norm_loss([f], archive([mu], [var])).item() == pytest.approx(0.0, abs=1e-12)


def test_norm_loss_sqrt2_example():
    # two samples whose mean is [1, 1] and whose variance matches the archive exactly
    f = torch.tensor([[[0.0, 0.0]], [[2.0, 2.0]]], dtype=torch.float64)
    loss = norm_loss([f], archive([[[0.0, 0.0]]], [[[1.0, 1.0]]]))
    assert loss.item() == pytest.approx(np.sqrt(2), abs=1e-12)


@given(st.floats(0.1, 10))
@settings(max_examples=20, deadline=None)
def test_norm_loss_mean_term_homogeneous(k):
    f = torch.tensor([[[0.0, 0.0]], [[2.0, 2.0]]], dtype=torch.float64)
    base = norm_loss([f], archive([[[0.0, 0.0]]], [[[1.0, 1.0]]])).item()
    scaled = norm_loss([f], archive([[[1 - k, 1 - k]]], [[[1.0, 1.0]]])).item()
    assert scaled == pytest.approx(k * base, rel=1e-12)


@given(hnp.arrays(np.float64, (4, 2, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (2, 3), elements=st.floats(0, 5)))
@settings(max_examples=50, deadline=None)
def test_norm_loss_matches_oracle_and_is_nonnegative(f, m, v):
    got = norm_loss([torch.tensor(f)], archive([m], [v])).item()
    assert got >= 0
    assert got == pytest.approx(norm_gap([f], [m], [v]), rel=1e-10, abs=1e-12)


def test_norm_loss_batch_of_one_is_allowed():
    f = torch.ones(1, 2, 2, dtype=torch.float64)
    assert norm_loss([f], archive([np.ones((2, 2))], [np.zeros((2, 2))])).item() == 0.0


def test_norm_loss_gradient():
    rng = np.random.default_rng(4)
    ref = archive([rng.normal(size=(3, 2)), rng.normal(size=(3, 2))], [rng.random((3, 2)), rng.random((3, 2))])
    pts = [rng.normal(size=(4, 3, 2)), rng.normal(size=(4, 3, 2))]
    assert dc.grad_check(lambda a, b: norm_loss([a, b], ref), pts) < 1e-4


def test_norm_loss_block_count_mismatch():
    with pytest.raises(dc.ShapeError):
        norm_loss([torch.zeros(2, 1, 1)], archive([np.zeros((1, 1))] * 2, [np.zeros((1, 1))] * 2))
