import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnbd.attacks import (MaskActivity, PlacementError, PoisonPlan, SpecError, StaticTrigger,
                           TriggerGenerator, TriggerSpec, apply_moving, apply_smart, apply_static,
                           build_trigger, compute_mask_activity, gen_dynamic, moving_columns,
                           poison_dataset, select_smart, smart_trajectory, tile_edges, train_dynamic,
                           trigger_side)
from snnbd.events import Dataset, polarity_codes
from snnbd.snn import NetConfig, SpikingNet, TrainConfig


def frames(n=None, T=4, H=32, W=32, seed=0):
    shape = (T, 2, H, W) if n is None else (n, T, 2, H, W)
    return np.random.default_rng(seed).random(shape).astype(np.float32) * 0.4


def test_side_rule():
    assert trigger_side(34, 0.1) == 11
    assert trigger_side(32, 0.1) == 10
    assert trigger_side(32, 0.01) == 3
    assert trigger_side(5, 0.0001) == 1


def test_static_polarity_patterns_and_support():
    x = frames()
    for p, (off, on) in {0: (0, 0), 1: (1, 0), 2: (0, 1), 3: (1, 1)}.items():
        y = apply_static(x, TriggerSpec(polarity=p, size=9 / 1024))  # side 3
        assert np.all(y[:, 0, :3, :3] == off) and np.all(y[:, 1, :3, :3] == on)
        mask = np.ones_like(x, bool)
        mask[..., :3, :3] = False
        assert y[mask].tobytes() == x[mask].tobytes()
    z = np.zeros((4, 2, 32, 32), np.float32)
    assert not apply_static(z, TriggerSpec(polarity=0)).any()
    y = apply_static(z, TriggerSpec(polarity=3, size=9 / 1024))
    assert y.sum() == 4 * 2 * 9


def test_static_locations_and_placement_error():
    z = np.zeros((1, 2, 32, 32), np.float32)
    y = apply_static(z, TriggerSpec(polarity=2, size=0.1, location="bottom-right"))
    assert y[0, 1, 22:, 22:].all() and y[0, 1].sum() == 100
    y = apply_static(z, TriggerSpec(polarity=2, size=0.1, location="middle"))
    assert y[0, 1, 11:21, 11:21].all()
    with pytest.raises(PlacementError):
        apply_static(z, TriggerSpec(size=0.1, location=(25, 0)))


def test_moving_columns_examples():
    assert moving_columns(0, 3, 32, 4)[3] == 6
    span = 32 - 3 + 1
    assert moving_columns(32 - 3, 3, 32, 2)[1] == (32 - 3 + 2) % span == 1
    assert len(set(moving_columns(0, 1, 32, 16))) == 16


def test_moving_trigger_positions_per_frame():
    z = np.zeros((16, 2, 32, 32), np.float32)
    y = apply_moving(z, TriggerSpec(kind="moving", polarity=3, size=0.1))
    cols = [int(np.nonzero(y[t, 1].any(axis=0))[0][0]) for t in range(16)]
    assert cols == moving_columns(0, 10, 32, 16)
    assert len(set(cols)) == 16


def test_tile_edges_and_nine_tiles():
    assert tile_edges(32, 2).tolist() == [0, 10, 21, 32]
    ds = Dataset(np.zeros((2, 3, 2, 32, 32)), [0, 1], 2)
    act = compute_mask_activity(ds, 2)
    assert act.num_tiles == 9 and not act.activity.any()


def _brute(dataset, c, b=0.5):
    H, W = dataset.frames.shape[-2:]
    k = (c + 1) ** 2
    act, hist = np.zeros(k), np.zeros((k, 4), int)
    for x in dataset.frames:
        for f in x:
            for i in range(H):
                for j in range(W):
                    code = int(f[0, i, j] >= b) + 2 * int(f[1, i, j] >= b)
                    ti = min(r for r in range(c + 1) if i < (r + 1) * H // (c + 1))
                    tj = min(r for r in range(c + 1) if j < (r + 1) * W // (c + 1))
                    hist[ti * (c + 1) + tj, code] += 1
                    act[ti * (c + 1) + tj] += code != 0
    return act / len(dataset), hist


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_select_smart_matches_brute_force(seed, c):
    r = np.random.default_rng(seed)
    H, W = int(r.integers(c + 1, 10)), int(r.integers(c + 1, 10))
    ds = Dataset(r.random((3, 2, 2, H, W)) ** 2, [0, 1, 0], 2)
    act = compute_mask_activity(ds, c)
    ref_act, ref_hist = _brute(ds, c)
    np.testing.assert_allclose(act.activity, ref_act, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(act.histogram, ref_hist)
    for most in (True, False):
        for least in (True, False):
            tile = int(np.flatnonzero(ref_act == (ref_act.max() if most else ref_act.min()))[0])
            h = ref_hist[tile]
            pol = int(np.flatnonzero(h == (h.min() if least else h.max()))[0])
            assert select_smart(act, most, least) == (tile, pol)


def test_select_smart_center_and_ties():
    x = np.zeros((4, 3, 2, 30, 30), np.float32)
    x[:, :, 1, 12:18, 12:18] = 1.0
    act = compute_mask_activity(Dataset(x, [0, 1, 2, 3], 4), 2)
    assert select_smart(act, True, True)[0] == 4
    flat = MaskActivity(2, tile_edges(30, 2), tile_edges(30, 2), np.ones(9), np.zeros((9, 4), int))
    assert select_smart(flat, True, True) == (0, 0)
    hist = np.zeros((9, 4), int)
    hist[0] = (100, 5, 0, 0)
    one = MaskActivity(2, tile_edges(30, 2), tile_edges(30, 2), np.eye(9)[0], hist)
    assert select_smart(one, True, True) == (0, 2)


def test_single_active_pixel_only_its_tile():
    x = np.zeros((1, 4, 2, 9, 9), np.float32)
    x[0, :, 0, 1, 1] = 1.0
    act = compute_mask_activity(Dataset(x, [0], 1), 2)
    assert act.activity[0] == 4 and not act.activity[1:].any()


def test_smart_trajectory_properties():
    bounds = (0, 10, 11, 21)
    a = smart_trajectory(bounds, 3, 16, [0, 5])
    assert a == smart_trajectory(bounds, 3, 16, [0, 5])
    for (r0, c0), (r1, c1) in zip(a, a[1:]):
        assert abs(r1 - r0) <= 2 and abs(c1 - c0) <= 2
    for r, c in a:
        assert 0 <= r <= 7 and 11 <= c <= 18
    assert set(smart_trajectory((2, 5, 2, 5), 3, 8, 1)) == {(2, 2)}
    with pytest.raises(PlacementError):
        smart_trajectory((0, 2, 0, 2), 3, 4, 0)


def test_apply_smart_leaves_outside_untouched():
    x = frames(T=6)
    y = apply_smart(x, (0, 10, 0, 10), 3, 0.01, seed=3)
    assert y[..., 10:, :].tobytes() == x[..., 10:, :].tobytes()
    assert y[..., :, 10:].tobytes() == x[..., :, 10:].tobytes()
    for t in range(6):
        assert (y[t] == 1).all(axis=0).sum() == 9


def test_poison_counts_and_labels(tiny_synth):
    train, _ = tiny_synth
    assert PoisonPlan(0.1).count(100) == 10
    assert PoisonPlan(0.001).count(1176) == 1
    with pytest.raises(SpecError):
        PoisonPlan(0.99).count(10)
    trig = StaticTrigger(TriggerSpec(size=0.1))
    pset, idx = poison_dataset(train, trig, PoisonPlan(0.25, target=1), seed=2)
    assert len(idx) == 6 and np.all(pset.labels[idx] == 1)
    clean = np.setdiff1d(np.arange(len(train)), idx)
    assert pset.frames[clean].tobytes() == train.frames[clean].tobytes()
    assert np.array_equal(pset.labels[clean], train.labels[clean])
    assert np.array_equal(idx, poison_dataset(train, trig, PoisonPlan(0.25, 1), seed=2)[1])
    with pytest.raises(SpecError):
        poison_dataset(train, trig, PoisonPlan(0.1, target=9))


def test_spec_validation():
    with pytest.raises(SpecError):
        TriggerSpec(kind="laser").validate()
    with pytest.raises(SpecError):
        TriggerSpec(kind="dynamic", clean_weight=0.3).validate()
    with pytest.raises(SpecError):
        TriggerSpec(size=0).validate()
    with pytest.raises(SpecError):
        build_trigger(TriggerSpec(kind="smart"))


def test_generator_shapes_and_range():
    gen = TriggerGenerator(seed=0)
    triggered, perturbation = gen_dynamic(gen, frames(2, T=3), 0.5)
    assert triggered.shape == perturbation.shape == (2, 3, 2, 32, 32)
    assert np.abs(perturbation).max() <= 0.5


def test_zero_budget_is_identity_and_constant_output():
    gen = TriggerGenerator(seed=1)
    x = frames(2, T=3)
    assert gen_dynamic(gen, x, 0.0)[0].tobytes() == x.tobytes()
    w, b = gen.dec[1]
    w.data[:] = 0
    b.data[:] = 20.0  # tanh saturates at 1
    _, perturbation = gen_dynamic(gen, x, 0.05)
    np.testing.assert_array_equal(perturbation, np.float32(0.05))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1e-3, 0.01, 0.05, 0.1, 0.3, 1.0]))
def test_dynamic_budget_holds_exactly(seed, budget):
    r = np.random.default_rng(seed)
    gen = TriggerGenerator(seed=int(r.integers(0, 100)))
    for w, *_ in gen.enc + gen.dec:
        w.data *= np.float32(r.uniform(1, 20))
    x = r.random((2, 2, 2, 16, 16)).astype(np.float32)
    x[r.random(x.shape) < 0.3] = 0.0
    triggered, _ = gen_dynamic(gen, x, budget)
    assert np.max(np.abs(triggered.astype(np.float64) - x.astype(np.float64))) <= budget
    assert triggered.min() >= 0 and triggered.max() <= 1


def test_train_dynamic_runs_and_selects_epoch(tiny_synth):
    train, test = tiny_synth
    net = SpikingNet(NetConfig(input_dims=(4, 2, 16, 16), conv_channels=(4,)), seed=0)
    gen = TriggerGenerator(width=4, seed=0)
    res = train_dynamic(net, gen, train, 0.5, 0.1, 0, TrainConfig(epochs=2, batch_size=8), test)
    assert [h["epoch"] for h in res.history] == [1, 2]
    best = max(res.history, key=lambda h: (h["clean_acc"] + h["asr"]) / 2)
    assert res.best_epoch == best["epoch"]
    with pytest.raises(SpecError):
        train_dynamic(net, gen, train, 0.4, 0.1, 0, TrainConfig(epochs=1))
