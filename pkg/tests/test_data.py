import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdknn.data import (
    ActivationSet,
    OOD_LABEL,
    FormatError,
    GaussianSpec,
    TruncatedFileError,
    gen_gaussians,
    read_activations,
    read_csv_layers,
    read_points_csv,
    shift_sets,
    training_blobs,
    write_activations,
    write_points_csv,
)


def test_sample_mean():
    X, y = gen_gaussians([GaussianSpec((3.0, 3.0), ((1, 0), (0, 1)), 100_000, 0)], seed=1)
    assert np.all(np.abs(X.mean(axis=0) - 3.0) < 0.02)
    assert np.all(y == 0)


def test_zero_covariance():
    X, _ = gen_gaussians([GaussianSpec((1.0, -2.0), ((0, 0), (0, 0)), 50)], seed=2)
    assert np.all(X == [1.0, -2.0])


def test_spec_validation():
    GaussianSpec((4, 5), ((1, -0.2), (-0.2, 1)), 10)
    with pytest.raises(ValueError):
        GaussianSpec((0, 0), ((1, 2), (2, 1)), 10)
    with pytest.raises(ValueError):
        GaussianSpec((0, 0), ((1, 0.5), (0, 1)), 10)
    with pytest.raises(ValueError):
        GaussianSpec((0, 0), ((1, 0), (0, 1)), 0)


def test_determinism_and_dataset_shapes():
    a = gen_gaussians(training_blobs(), seed=3)
    b = gen_gaussians(training_blobs(), seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert a[0].shape == (3000, 2)
    assert np.bincount(a[1]).tolist() == [1000, 1000, 1000]
    sets = shift_sets(200)
    assert list(sets) == ["g_1", "g_2", "g_3"]
    X, y = gen_gaussians(sets["g_2"], seed=0)
    assert X.shape == (200, 2) and np.all(y == -1)
    assert np.allclose(X.mean(axis=0), [8, 3], atol=0.1)


def _random_set(rng):
    n_layers = int(rng.integers(1, 9))
    v = int(rng.integers(0, 501))
    layers = [rng.normal(size=(v, int(rng.integers(1, 65)))).astype(np.float32) * rng.uniform(0.1, 1e3)
              for _ in range(n_layers)]
    names = [f"layer-{i}-é" for i in range(n_layers)]
    return ActivationSet(layers, rng.integers(0, 2 ** 32 - 1, size=v, dtype=np.uint64).astype(np.int64), names)


def test_round_trip_random_payloads(tmp_path):
    rng = np.random.default_rng(8)
    for i in range(100):
        aset = _random_set(rng)
        path = tmp_path / f"a{i}.pdka"
        write_activations(aset, path)
        back = read_activations(path)
        assert back.names == aset.names
        assert np.array_equal(back.labels, aset.labels)
        for m0, m1 in zip(aset.layers, back.layers):
            assert m1.dtype == np.float32
            assert m0.tobytes() == m1.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(tmp_path_factory, seed):
    aset = _random_set(np.random.default_rng(seed))
    path = tmp_path_factory.mktemp("p") / "a.pdka"
    write_activations(aset, path)
    back = read_activations(path)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(aset.layers, back.layers))


def _small(tmp_path):
    aset = ActivationSet([np.arange(6, dtype=np.float32).reshape(3, 2), np.ones((3, 4), np.float32)],
                         np.array([0, 1, 2]), ["a", "b"])
    path = tmp_path / "s.pdka"
    write_activations(aset, path)
    return path


def test_crc_corruption(tmp_path):
    path = _small(tmp_path)
    raw = bytearray(path.read_bytes())
    for pos in (12, 25, len(raw) - 6):
        bad = raw.copy()
        bad[pos] ^= 0x01
        path.write_bytes(bytes(bad))
        with pytest.raises(FormatError):
            read_activations(path)


def test_truncation_names_section(tmp_path):
    path = _small(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:40])
    with pytest.raises(TruncatedFileError, match="payload"):
        read_activations(path)
    path.write_bytes(raw[:-2])
    with pytest.raises(TruncatedFileError, match="CRC"):
        read_activations(path)


def test_bad_magic_and_version(tmp_path):
    path = _small(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_activations(path)
    path.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError, match="version"):
        read_activations(path)


def test_non_finite_payload_rejected(tmp_path):
    with pytest.raises(ValueError):
        ActivationSet([np.array([[np.nan]])], np.array([0]))


def test_write_rejects_negative_labels(tmp_path):
    aset = ActivationSet([np.zeros((2, 1))], np.array([0, -2]))
    with pytest.raises(ValueError):
        write_activations(aset, tmp_path / "x.pdka")


def test_ood_label_round_trip(tmp_path):
    aset = ActivationSet([np.zeros((3, 1))], np.array([0, OOD_LABEL, 2]))
    write_activations(aset, tmp_path / "x.pdka")
    assert read_activations(tmp_path / "x.pdka").labels.tolist() == [0, OOD_LABEL, 2]


def test_inconsistent_rows():
    with pytest.raises(ValueError):
        ActivationSet([np.zeros((3, 2)), np.zeros((2, 2))], np.zeros(3, int))


def test_csv_layers(tmp_path):
    l0 = tmp_path / "hidden.csv"
    l0.write_text("h0,h1,label\n0.5,1.0,0\n2.0,3.0,1\n")
    l1 = tmp_path / "out.csv"
    l1.write_text("o0\n0.1\n0.2\n")
    aset = read_csv_layers([l0, l1])
    assert aset.names == ["hidden", "out"]
    assert aset.labels.tolist() == [0, 1]
    np.testing.assert_array_equal(aset.layers[0], [[0.5, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(aset.layers[1], [[0.1], [0.2]])
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\nfoo,1\n")
    with pytest.raises(FormatError):
        read_csv_layers([bad])


def test_points_csv_round_trip(tmp_path):
    X = np.random.default_rng(0).normal(size=(5, 2))
    y = np.array([0, 1, 2, -1, 0])
    write_points_csv(tmp_path / "p.csv", X, y)
    X2, y2 = read_points_csv(tmp_path / "p.csv")
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
