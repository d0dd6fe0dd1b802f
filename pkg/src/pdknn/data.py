"""Synthetic Gaussian data and the PDKA activation container."""

from dataclasses import dataclass
import csv
import struct
import zlib

import numpy as np

OOD_LABEL = -1

PDKA_MAGIC = b"PDKA"
PDKA_VERSION = 1
# OOD points keep their label on disk as the largest u32
_PDKA_OOD = 0xFFFFFFFF


class FormatError(ValueError):
    """Malformed or corrupted activation file."""


class TruncatedFileError(FormatError):
    """File ended before the named section was complete."""


@dataclass(frozen=True)
class GaussianSpec:
    mean: tuple
    covariance: tuple
    count: int
    label: int = OOD_LABEL

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ValueError("covariance must be positive semidefinite")
        if self.count < 1:
            raise ValueError("count must be positive")


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # semidefinite: symmetric square root via the eigendecomposition
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gen_gaussians(specs, seed=0):
    """Sample every spec in order. Returns ``(X, y)``."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for spec in specs:
        mean = np.asarray(spec.mean, dtype=float)
        factor = _psd_factor(np.asarray(spec.covariance, dtype=float))
        z = rng.standard_normal((spec.count, mean.size))
        xs.append(mean + z @ factor.T)
        ys.append(np.full(spec.count, spec.label, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


I2 = ((1.0, 0.0), (0.0, 1.0))


def training_blobs(count=1000):
    """The three in-distribution classes."""
    return [
        GaussianSpec((3.0, 3.0), I2, count, 0),
        GaussianSpec((13.0, 3.0), I2, count, 1),
        GaussianSpec((5.0, 7.0), I2, count, 2),
    ]


def shift_sets(count=1000):
    """Test-time sets ``g_1`` (far), ``g_2`` (tight, between classes), ``g_3`` (straddling)."""
    return {
        "g_1": [GaussianSpec((23.0, 3.0), I2, count)],
        "g_2": [GaussianSpec((8.0, 3.0), ((0.1, 0.0), (0.0, 0.1)), count)],
        "g_3": [GaussianSpec((4.0, 5.0), ((1.0, -0.2), (-0.2, 1.0)), count)],
    }


@dataclass
class ActivationSet:
    """Per-layer ``(V, D_l)`` matrices with shared labels."""

    layers: list
    labels: np.ndarray
    names: list = None

    def __post_init__(self):
        self.layers = [np.atleast_2d(np.asarray(m)) for m in self.layers]
        self.labels = np.asarray(self.labels).ravel()
        if self.names is None:
            self.names = [f"layer_{i}" for i in range(len(self.layers))]
        if len(self.names) != len(self.layers):
            raise ValueError("one name per layer required")
        for name, m in zip(self.names, self.layers):
            if m.ndim != 2 or m.shape[0] != self.labels.shape[0]:
                raise ValueError(f"layer {name!r}: expected {self.labels.shape[0]} rows, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"layer {name!r}: non-finite activations")

    @property
    def n_layers(self):
        return len(self.layers)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        return ActivationSet([m[idx] for m in self.layers], self.labels[idx], list(self.names))


def write_activations(aset, path):
    """Write a PDKA file: float32 payloads, uint32 labels, CRC32 trailer.

    Labels must be nonnegative class ids or ``OOD_LABEL``.
    """
    labels = np.asarray(aset.labels)
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("PDKA labels must be integers")
    if labels.size and (labels.min() < OOD_LABEL or labels.max() >= _PDKA_OOD):
        raise ValueError("PDKA labels must be class ids in [0, 2**32 - 1) or OOD_LABEL")
    labels = np.where(labels == OOD_LABEL, _PDKA_OOD, labels)
    parts = [PDKA_MAGIC, struct.pack("<II", PDKA_VERSION, aset.n_layers)]
    for name, m in zip(aset.names, aset.layers):
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<QQ", m.shape[0], m.shape[1]))
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
    parts.append(labels.astype("<u4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def read_activations(path):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, section):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"file truncated in {section}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != PDKA_MAGIC:
        raise FormatError("bad magic, not a PDKA file")
    version, n_layers = struct.unpack("<II", take(8, "header"))
    if version != PDKA_VERSION:
        raise FormatError(f"unsupported PDKA version {version}")
    names, layers = [], []
    n_rows = None
    for i in range(n_layers):
        (name_len,) = struct.unpack("<H", take(2, f"layer {i} name length"))
        names.append(take(name_len, f"layer {i} name").decode("utf-8"))
        v, d = struct.unpack("<QQ", take(16, f"layer {i} shape"))
        if n_rows is not None and v != n_rows:
            raise FormatError(f"layer {i} has {v} rows, expected {n_rows}")
        n_rows = v
        payload = take(4 * v * d, f"layer {i} payload")
        layers.append(np.frombuffer(payload, dtype="<f4").reshape(v, d).astype(np.float32))
    n_rows = 0 if n_rows is None else n_rows
    labels = np.frombuffer(take(4 * n_rows, "labels"), dtype="<u4").astype(np.int64)
    labels[labels == _PDKA_OOD] = OOD_LABEL
    body_end = pos
    (crc,) = struct.unpack("<I", take(4, "CRC trailer"))
    if pos != len(data):
        raise FormatError("trailing bytes after CRC trailer")
    if crc != zlib.crc32(data[:body_end]):
        raise FormatError("CRC mismatch, file corrupted")
    for name, m in zip(names, layers):
        if not np.all(np.isfinite(m)):
            raise FormatError(f"layer {name!r}: non-finite payload")
    return ActivationSet(layers, labels, names)


def read_csv_layers(paths):
    """One CSV per layer with a header row; the first file's last column is the label."""
    layers, names = [], []
    labels = None
    for i, path in enumerate(paths):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise FormatError(f"{path}: empty CSV")
        body = rows[1:]
        try:
            table = np.array([[float(v) for v in r] for r in body], dtype=float)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if table.ndim != 2:
            table = table.reshape(len(body), -1)
        if i == 0:
            labels = table[:, -1].astype(np.int64)
            table = table[:, :-1]
        layers.append(table)
        names.append(str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0])
    return ActivationSet(layers, labels if labels is not None else np.zeros(0, np.int64), names)


def write_points_csv(path, X, y, columns=("x0", "x1")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(columns) + ["label"])
        for row, label in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_points_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    try:
        table = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if table.size == 0:
        return np.zeros((0, len(rows[0]) - 1)), np.zeros(0, np.int64)
    return table[:, :-1], table[:, -1].astype(np.int64)
