import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnbd.events import (OFF, ON, ConfigError, Dataset, EventStream, FormatError, FrameTensor,
                          InvalidStreamError, PreconditionError, SynthConfig, bin_events, edge_cells,
                          normalize, polarity_grid, read_frames, square_origin, synth_dataset,
                          synth_stream, write_frames)


def stream(events, h=8, w=8, duration=16):
    return EventStream(np.array(events, dtype=np.int64).reshape(-1, 4), h, w, duration)


def test_bin_equal_intervals():
    s = stream([[t, 1, 1, 1] for t in (0, 4, 8, 12)])
    f = bin_events(s, 4)
    assert not f.normalized
    for k in range(4):
        assert f.data[k, 1, 1, 1] == 1
    assert f.data.sum() == 4


def test_bin_empty_stream_and_last_microsecond():
    assert not bin_events(stream([]), 16).data.any()
    assert bin_events(stream([]), 16).shape == (16, 2, 8, 8)
    f = bin_events(stream([[15, 0, 0, 0]], duration=16), 16)
    assert f.data[15, 0, 0, 0] == 1


def test_stream_validation_and_zero_duration():
    with pytest.raises(InvalidStreamError):
        stream([[5, 0, 0, 0], [3, 0, 0, 0]])
    with pytest.raises(InvalidStreamError):
        stream([[1, 8, 0, 0]])
    with pytest.raises(InvalidStreamError):
        stream([[1, 0, 0, 2]])
    with pytest.raises(InvalidStreamError):
        bin_events(EventStream(np.array([[0, 0, 0, 1]]), 8, 8, 0), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 500), st.integers(0, 2**32 - 1))
def test_bin_conserves_count_and_matches_brute_force(T, duration, seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(0, 40))
    t = np.sort(r.integers(0, duration + 1, n))
    ev = np.stack([t, r.integers(0, 5, n), r.integers(0, 4, n), r.integers(0, 2, n)], axis=1)
    f = bin_events(EventStream(ev, 4, 5, duration), T).data
    assert f.sum() == n
    brute = np.zeros_like(f)
    for ti, x, y, ch in ev:
        brute[min(ti * T // duration, T - 1), ch, y, x] += 1
    np.testing.assert_array_equal(f, brute)


def test_normalize_examples():
    z = normalize(FrameTensor(np.zeros((2, 2, 3, 3))))
    assert z.normalized and not z.data.any()
    d = np.zeros((1, 2, 2, 2), np.float32)
    d[0, 0, 0, 0], d[0, 1, 1, 1] = 4, 2
    n = normalize(FrameTensor(d))
    assert n.data[0, 1, 1, 1] == 0.5
    np.testing.assert_array_equal(normalize(n).data, n.data)


def test_polarity_codes():
    d = np.zeros((1, 2, 1, 3), np.float32)
    d[0, OFF, 0, 1] = 1.0
    d[0, OFF, 0, 2], d[0, ON, 0, 2] = 0.6, 0.7
    codes = polarity_grid(FrameTensor(d, normalized=True), 0, 0.5)
    np.testing.assert_array_equal(codes, [[0, 1, 3]])
    with pytest.raises(PreconditionError):
        polarity_grid(FrameTensor(d, normalized=False), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_polarity_codes_partition_pixels(seed):
    d = np.random.default_rng(seed).random((3, 2, 5, 6)).astype(np.float32)
    codes = polarity_grid(FrameTensor(d, normalized=True), 1)
    assert np.bincount(codes.ravel(), minlength=4).sum() == 30
    on, off = d[1, ON] >= 0.5, d[1, OFF] >= 0.5
    np.testing.assert_array_equal(codes == 3, on & off)
    np.testing.assert_array_equal(codes == 0, ~on & ~off)


def test_synth_leading_edge_column_rightward_step2():
    cfg = SynthConfig(height=32, width=40, frames=8, side=6, step=2, noise=0.0)
    start = 3
    s = synth_stream(cfg, "right", start, 5, np.random.default_rng(0))
    f = bin_events(s, cfg.frames).data
    for t in range(cfg.frames):
        cols = np.nonzero(f[t, ON].any(axis=0))[0]
        assert list(cols) == [start + cfg.side + 2 * t - 1]
        # trailing edge is the rear column of the square
        assert list(np.nonzero(f[t, OFF].any(axis=0))[0]) == [start + 2 * t]


def test_synth_noise_free_support_is_exactly_the_edges():
    cfg = SynthConfig(height=20, width=20, frames=5, side=4, step=2, noise=0.0)
    for d in ("right", "left", "down", "up"):
        f = bin_events(synth_stream(cfg, d, 1, 7, np.random.default_rng(1)), cfg.frames).data
        for t in range(cfg.frames):
            (ly, lx), (ty, tx) = edge_cells(cfg, d, 1, 7, t)
            expect = np.zeros((2, 20, 20), bool)
            expect[ON, ly, lx] = True
            expect[OFF, ty, tx] = True
            np.testing.assert_array_equal(f[t] > 0, expect)


def test_synth_activity_zero_outside_travel_corridor():
    cfg = SynthConfig(height=24, width=24, frames=6, side=5, step=2, noise=0.0, n_train=40, n_test=4)
    train, _ = synth_dataset(cfg, seed=5)
    for lab, d in enumerate(("right", "left", "down", "up")):
        act = train.frames[train.labels == lab].sum(axis=(0, 1, 2))
        # corridor: rows (horizontal motion) or columns (vertical motion) ever touched by a square
        corridor = np.zeros((24, 24), bool)
        for i in np.flatnonzero(train.labels == lab):
            ys, xs = np.nonzero(train.frames[i].sum(axis=(0, 1)))
            if d in ("right", "left"):
                corridor[ys.min():ys.max() + 1, :] = True
            else:
                corridor[:, xs.min():xs.max() + 1] = True
        assert not act[~corridor].any()
        # and the class is not silent
        assert act.sum() > 0


def test_synth_deterministic_and_normalized():
    cfg = SynthConfig(height=16, width=16, frames=4, side=4, n_train=12, n_test=4, noise=0.05)
    a, b = synth_dataset(cfg, 9), synth_dataset(cfg, 9)
    assert a[0] == b[0] and a[1] == b[1]
    assert a[0].frames.max() <= 1 and a[0].normalized
    assert synth_dataset(cfg, 10)[0] != a[0]


def test_synth_degenerate_geometry():
    with pytest.raises(ConfigError):
        synth_dataset(SynthConfig(height=16, width=16, frames=16, side=8, step=2), 0)


def test_square_origin_directions():
    cfg = SynthConfig(height=20, width=20, side=4, step=2)
    assert square_origin(cfg, "right", 1, 3, 2) == (3, 5)
    assert square_origin(cfg, "left", 1, 3, 2) == (3, 20 - 4 - 1 - 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_nmf1_round_trip(tmp_path_factory, n, T, k, seed):
    r = np.random.default_rng(seed)
    ds = Dataset(r.random((n, T, 2, 3, 4)).astype(np.float32) * 3, r.integers(0, k, n), k, normalized=False)
    path = tmp_path_factory.mktemp("nmf") / "d.nmf"
    write_frames(path, ds)
    back = read_frames(path)
    assert back == ds and back.frames.tobytes() == ds.frames.tobytes()


def test_nmf1_header_and_errors(tmp_path, tiny_synth):
    train, _ = tiny_synth
    path = tmp_path / "t.nmf"
    write_frames(path, train)
    raw = path.read_bytes()
    assert raw[:4] == b"NMF1"
    assert np.frombuffer(raw[4:28], "<u4").tolist() == [len(train), 4, *train.dims]
    (tmp_path / "m.nmf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_frames(tmp_path / "m.nmf")
    rec = 4 + 4 * int(np.prod(train.dims))
    (tmp_path / "c.nmf").write_bytes(raw[:28 + 3 * rec + rec // 2])
    with pytest.raises(FormatError, match="sample 3"):
        read_frames(tmp_path / "c.nmf")
    bad = bytearray(raw)
    bad[12:16] = (0).to_bytes(4, "little")
    (tmp_path / "d.nmf").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="byte 12"):
        read_frames(tmp_path / "d.nmf")
