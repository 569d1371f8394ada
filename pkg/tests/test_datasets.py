import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleus import datasets as ds
from nucleus.datasets import (FIELDS, BadMagicError, DatasetError, GeneratorConfig, MetadataShapeError,
                              PayloadSizeError, TrainingSample, TruncatedPayloadError,
                              UnsupportedVersionError, augment, decode_trajectory, encode_trajectory,
                              flip_fields, read_trajectory, synth_generate, window_iter,
                              write_trajectory)
from nucleus.levelset import eikonal_residual

SMALL = GeneratorConfig(H=24, W=24, steps=12)


@pytest.fixture(scope="module")
def traj():
    return synth_generate(SMALL, 3)


def test_round_trip_bytes(tmp_path, traj):
    path = tmp_path / "a.nucl"
    write_trajectory(traj, path)
    back = read_trajectory(path)
    assert back.data.tobytes() == traj.data.tobytes()
    assert back.params == traj.params
    assert back.metadata() == traj.metadata()
    write_trajectory(back, tmp_path / "b.nucl")
    assert (tmp_path / "b.nucl").read_bytes() == path.read_bytes()


def test_header_layout(traj):
    buf = encode_trajectory(traj)
    magic, version, meta_len = struct.unpack_from("<4sIQ", buf)
    assert magic == b"NUCL" and version == 1
    payload = np.frombuffer(buf[16 + meta_len:], dtype="<f4")
    np.testing.assert_array_equal(payload.reshape(traj.data.shape), traj.data)
    # [step][field][row][col] ordering
    assert payload[1] == traj.data[0, 0, 0, 1]
    assert payload[traj.H * traj.W] == traj.data[0, 1, 0, 0]


def test_bad_magic(traj):
    buf = b"XXXX" + encode_trajectory(traj)[4:]
    with pytest.raises(BadMagicError):
        decode_trajectory(buf)


def test_unsupported_version(traj):
    buf = bytearray(encode_trajectory(traj))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        decode_trajectory(bytes(buf))


def test_truncated_by_one_float(traj):
    buf = encode_trajectory(traj)[:-4]
    with pytest.raises(TruncatedPayloadError) as info:
        decode_trajectory(buf)
    assert info.value.expected - info.value.found == 4
    assert str(info.value.expected) in str(info.value)


def test_oversized_payload(traj):
    with pytest.raises(PayloadSizeError):
        decode_trajectory(encode_trajectory(traj) + b"\0\0\0\0")


def test_metadata_shape_mismatch(traj):
    import json
    buf = encode_trajectory(traj)
    _, _, n = struct.unpack_from("<4sIQ", buf)
    meta = json.loads(buf[16:16 + n])
    meta["fields"] = ["T", "phi", "Ux", "Uy"]
    raw = json.dumps(meta).encode()
    with pytest.raises(MetadataShapeError):
        decode_trajectory(struct.pack("<4sIQ", b"NUCL", 1, len(raw)) + raw + buf[16 + n:])


def test_generator_deterministic():
    a = encode_trajectory(synth_generate(SMALL, 11))
    b = encode_trajectory(synth_generate(SMALL, 11))
    assert a == b
    assert a != encode_trajectory(synth_generate(SMALL, 12))


def test_generator_sign_convention():
    tr, records = synth_generate(SMALL, 5, return_records=True)
    rows, cols = np.meshgrid(np.arange(tr.H), np.arange(tr.W), indexing="ij")
    for state, bubbles in zip(tr.data, records):
        inside = np.zeros((tr.H, tr.W), bool)
        for b in bubbles:
            if b.radius > 0:
                inside |= np.hypot(rows - b.row, cols - b.col) < b.radius
        assert np.all(state[3][inside] > 0)
        assert np.all(state[3][~inside] <= 0)


def test_generator_eikonal_away_from_medial_axis():
    tr, records = synth_generate(GeneratorConfig(H=32, W=32, steps=20), 2, return_records=True)
    rows, cols = np.meshgrid(np.arange(tr.H), np.arange(tr.W), indexing="ij")
    means = []
    for state, bubbles in zip(tr.data, records):
        d = np.stack([b.radius - np.hypot(rows - b.row, cols - b.col) for b in bubbles])
        centre = np.min(np.stack([np.hypot(rows - b.row, cols - b.col) for b in bubbles]), axis=0)
        top2 = np.sort(d, axis=0)[-2:] if len(bubbles) > 1 else None
        keep = centre > 1.5
        if top2 is not None:
            keep &= (top2[1] - top2[0]) > 1.5
        means.append(eikonal_residual(state[3])["field"][keep].mean())
    assert np.mean(means) < 0.05


def test_detached_bubbles_rise():
    tr, records = synth_generate(GeneratorConfig(H=32, W=32, steps=40), 1, return_records=True)
    tracks = {}
    for bubbles in records:
        for b in bubbles:
            if not b.attached:
                tracks.setdefault(b.ident, []).append(b.row)
    assert tracks
    for rows in tracks.values():
        assert all(b < a for a, b in zip(rows, rows[1:]))


def test_subcooled_bubbles_shrink():
    cfg = GeneratorConfig(H=32, W=32, steps=40, T_bulk=48.0)
    _, records = synth_generate(cfg, 0, return_records=True)
    radii = {}
    for bubbles in records:
        for b in bubbles:
            if not b.attached:
                radii.setdefault(b.ident, []).append(b.radius)
    assert any(len(r) > 1 for r in radii.values())
    for r in radii.values():
        assert all(b < a for a, b in zip(r, r[1:]))


def test_degenerate_generator_config():
    with pytest.raises(DatasetError):
        synth_generate(GeneratorConfig(nucleation_sites=0, T_bulk=48.0), 0)


def test_generator_rejects_unknown_keys():
    with pytest.raises(DatasetError):
        GeneratorConfig.from_dict({"H": 8, "bogus": 1})


def test_window_counts(traj):
    samples = list(window_iter(traj, 3))
    assert len(samples) == traj.steps - 3
    np.testing.assert_array_equal(samples[0].target, traj.data[3])
    rebuilt = np.concatenate([samples[0].history] + [s.target[None] for s in samples])
    np.testing.assert_array_equal(rebuilt, traj.data)


def test_window_too_short(traj):
    with pytest.raises(DatasetError):
        list(window_iter(traj, traj.steps))


def test_ten_steps_three_frames():
    tr = synth_generate(GeneratorConfig(H=8, W=8, steps=10), 0)
    assert len(list(window_iter(tr, 3))) == 7


def test_augment_identity_when_forced(traj):
    s = next(window_iter(traj, 3))
    out = augment(s, np.random.default_rng(0), flip=False, sigma=0.0)
    np.testing.assert_array_equal(out.history, s.history)
    np.testing.assert_array_equal(out.target, s.target)


def test_flip_is_involution(traj):
    s = next(window_iter(traj, 3))
    once = augment(s, np.random.default_rng(0), flip=True, sigma=0.0)
    assert not np.array_equal(once.history, s.history)
    np.testing.assert_array_equal(once.history[:, 1], -s.history[:, 1, :, ::-1])
    twice = augment(once, np.random.default_rng(0), flip=True, sigma=0.0)
    np.testing.assert_array_equal(twice.history, s.history)
    np.testing.assert_array_equal(twice.target, s.target)


def test_noise_statistics_and_target_untouched(traj):
    s = next(window_iter(traj, 3))
    big = TrainingSample(np.zeros((4, 4, 50, 125), np.float32), np.zeros((4, 50, 125), np.float32), s.params)
    sigma = np.array([0.5, 0.1, 0.2, 1.0])
    out = augment(big, np.random.default_rng(1), flip=False, sigma=sigma)
    for f in range(4):
        assert out.history[:, f].std() == pytest.approx(sigma[f], rel=0.05)
    assert not out.target.any()


def test_random_flip_rate(traj):
    s = next(window_iter(traj, 3))
    rng = np.random.default_rng(0)
    flips = sum(not np.array_equal(augment(s, rng, sigma=0.0).target, s.target) for _ in range(400))
    assert 160 < flips < 240


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_fields_finite(seed):
    tr = synth_generate(GeneratorConfig(H=12, W=12, steps=6, warmup=5), seed)
    assert np.isfinite(tr.data).all()
    assert tr.data.shape == (6, 4, 12, 12)


def test_manifest_round_trip(tmp_path, traj):
    write_trajectory(traj, tmp_path / "t0.nucl")
    ds.write_manifest([("t0.nucl", "train"), ("t0.nucl", "test")], tmp_path / "m.json")
    splits = ds.read_manifest(tmp_path / "m.json")
    assert sorted(splits) == ["test", "train"]
    loaded = ds.load_split(tmp_path / "m.json", "train")
    assert loaded[0].data.tobytes() == traj.data.tobytes()
    with pytest.raises(DatasetError):
        ds.load_split(tmp_path / "m.json", "val")


def test_flip_fields_negates_ux_only():
    arr = np.arange(4 * 2 * 3, dtype=np.float32).reshape(4, 2, 3)
    out = flip_fields(arr)
    np.testing.assert_array_equal(out[0], arr[0, :, ::-1])
    np.testing.assert_array_equal(out[1], -arr[1, :, ::-1])
    assert FIELDS[1] == "Ux"
