"""Datasets: IDX image files, CSV matrices and seeded synthetic generators.

Synthetic families stand in for real image data at desk scale:

* ``ppca``: x = Lambda z + mu0 + sigma eps, the linear-Gaussian model whose
  likelihood, posterior and conditionals are known in closed form;
* ``gauss-mixture``: a finite mixture of diagonal Gaussians;
* ``bernoulli-mixture``: 8x8 binary images drawn either from a handful of
  stroke prototypes or from ``components`` random on-pixel patterns; in both
  cases the observed half of an image carries information about the other.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import make_rng

BINARY = "binary"
REAL = "real"

IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxFormatError(ValueError):
    """Malformed IDX file; the message names the byte offset of the problem."""


@dataclass
class Dataset:
    X: np.ndarray
    kind: str = REAL
    image_shape: tuple | None = None
    labels: np.ndarray | None = None
    splits: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"data matrix must be 2-D, got shape {self.X.shape}")
        if self.kind not in (BINARY, REAL):
            raise ValueError(f"unknown data kind {self.kind!r}")
        if self.kind == BINARY and not np.all((self.X == 0) | (self.X == 1)):
            raise ValueError("binary datasets may only contain 0 and 1")
        if self.image_shape is not None:
            self.image_shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(self.image_shape)) != self.X.shape[1]:
                raise ValueError(f"image shape {self.image_shape} does not match {self.X.shape[1]} features")
        seen = set()
        for name, idx in self.splits.items():
            idx = set(int(i) for i in idx)
            if idx & seen:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= idx

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_splits(self, fractions: dict, seed=0) -> "Dataset":
        """Random disjoint splits, e.g. ``{"train": 0.8, "test": 0.2}``."""
        if sum(fractions.values()) > 1.0 + 1e-12:
            raise ValueError("split fractions sum to more than one")
        perm = make_rng(seed).permutation(self.n)
        splits, start = {}, 0
        for name, frac in fractions.items():
            stop = start + int(round(frac * self.n))
            splits[name] = np.sort(perm[start:stop])
            start = stop
        return Dataset(self.X, self.kind, self.image_shape, self.labels, splits)

    def subset(self, name: str) -> np.ndarray:
        return self.X[self.splits[name]]


# -- IDX -------------------------------------------------------------------------


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: header truncated at byte {len(raw)} (need 4 magic bytes)")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic at byte 0: {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in IDX_TYPES:
        raise IdxFormatError(f"{path}: unknown element type 0x{code:02x} at byte 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: dimension header truncated at byte {len(raw)} (need {header_end})")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(raw) - header_end
    if available < expected:
        raise IdxFormatError(f"{path}: payload truncated: expected {expected} bytes from byte {header_end}, found {available}")
    if available > expected:
        raise IdxFormatError(f"{path}: {available - expected} trailing bytes after byte {header_end + expected}")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=header_end).reshape(dims)


def write_idx(path, array) -> Path:
    """Write an array in IDX format (the element type follows the dtype)."""
    array = np.asarray(array)
    for code, dt in IDX_TYPES.items():
        if array.dtype.kind == dt.kind and array.dtype.itemsize == dt.itemsize:
            break
    else:
        raise ValueError(f"no IDX element type for dtype {array.dtype}")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    path.write_bytes(header + array.astype(dt).tobytes())
    return path


def load_idx(images_path, labels_path=None, binarize: bool = False, threshold: float = 0.5) -> Dataset:
    """Images as rows of a matrix; unsigned bytes are scaled to [0, 1].

    With ``binarize`` every value ``>= threshold`` becomes 1 (static
    binarisation, so the boundary value itself maps to 1).
    """
    images = _read_idx(images_path)
    if images.ndim < 2:
        raise IdxFormatError(f"{images_path}: image file needs at least 2 dimensions, got {images.ndim}")
    shape = images.shape[1:]
    X = images.reshape(images.shape[0], int(np.prod(shape))).astype(np.float64)
    if images.dtype == np.uint8:
        X /= 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path).astype(np.int64)
        if labels.shape[0] != X.shape[0]:
            raise IdxFormatError(f"{labels_path}: {labels.shape[0]} labels for {X.shape[0]} images")
    kind = REAL
    if binarize:
        X = (X >= threshold).astype(np.float64)
        kind = BINARY
    return Dataset(X, kind, shape if len(shape) == 2 else None, labels)


# -- CSV -----------------------------------------------------------------------


def save_csv(ds: Dataset, path, header_comments: dict | None = None) -> Path:
    """One datum per row; metadata goes into ``# key=value`` comment lines."""
    path = Path(path)
    meta = {"kind": ds.kind}
    if ds.image_shape is not None:
        meta["image_shape"] = "x".join(str(s) for s in ds.image_shape)
    meta.update(header_comments or {})
    with path.open("w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(ds.p)])
        for row in ds.X:
            writer.writerow([repr(float(v)) for v in row])
    return path


def load_csv(path) -> Dataset:
    path = Path(path)
    meta, body = {}, []
    with path.open() as fh:
        for line in fh:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
            elif line.strip():
                body.append(line)
    if not body:
        raise ValueError(f"{path}: no header row")
    rows = list(csv.reader(body))
    p = len(rows[0])
    X = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, p)
    shape = tuple(int(s) for s in meta["image_shape"].split("x")) if "image_shape" in meta else None
    kind = meta.get("kind", BINARY if X.size and np.all((X == 0) | (X == 1)) else REAL)
    return Dataset(X, kind, shape)


def load_dataset(path, binarize: bool = False, threshold: float = 0.5) -> Dataset:
    """Load by extension: ``.csv`` or IDX (anything else)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {path}")
    if path.suffix == ".csv":
        ds = load_csv(path)
        if binarize and ds.kind != BINARY:
            ds = Dataset((ds.X >= threshold).astype(np.float64), BINARY, ds.image_shape)
        return ds
    return load_idx(path, binarize=binarize, threshold=threshold)


# -- synthetic generators --------------------------------------------------------

SYNTH_KINDS = ("ppca", "gauss-mixture", "bernoulli-mixture")


def stroke_prototypes() -> np.ndarray:
    """Eight 8x8 binary prototypes (bars, diagonals, frame, cross, blocks)."""
    protos = []
    img = np.zeros((8, 8))
    img[:, 3:5] = 1
    protos.append(img)
    img = np.zeros((8, 8))
    img[3:5, :] = 1
    protos.append(img)
    protos.append(np.eye(8) + np.eye(8, k=1))
    protos.append(np.fliplr(np.eye(8) + np.eye(8, k=1)))
    img = np.zeros((8, 8))
    img[[0, -1], :] = 1
    img[:, [0, -1]] = 1
    protos.append(img)
    img = np.zeros((8, 8))
    img[:, 3:5] = 1
    img[3:5, :] = 1
    protos.append(img)
    img = np.zeros((8, 8))
    img[:4, :4] = 1
    img[4:, 4:] = 1
    protos.append(img)
    img = np.zeros((8, 8))
    img[:, :2] = 1
    img[:, 6:] = 1
    protos.append(img)
    return np.clip(np.array([p.ravel() for p in protos]), 0, 1)


def _ppca(params, n, rng):
    p = int(params.get("p", 10))
    d = int(params.get("d", 2))
    loading = params.get("loading")
    loading = rng.standard_normal((p, d)) if loading is None else np.asarray(loading, dtype=np.float64)
    offset = np.asarray(params.get("offset", np.zeros(loading.shape[0])), dtype=np.float64)
    noise_var = float(params.get("noise_var", 0.1))
    z = rng.standard_normal((n, loading.shape[1]))
    X = z @ loading.T + offset + np.sqrt(noise_var) * rng.standard_normal((n, loading.shape[0]))
    truth = {"kind": "ppca", "loading": loading.tolist(), "offset": offset.tolist(), "noise_var": noise_var}
    return Dataset(X, REAL), truth


def _gauss_mixture(params, n, rng):
    p = int(params.get("p", 2))
    means = params.get("means")
    means = np.array([3.0 * np.ones(p), -3.0 * np.ones(p)]) if means is None else np.asarray(means, dtype=np.float64)
    K, p = means.shape
    variances = np.broadcast_to(np.asarray(params.get("variances", 1.0), dtype=np.float64), (K, p)).copy()
    weights = np.asarray(params.get("weights", np.full(K, 1.0 / K)), dtype=np.float64)
    labels = rng.choice(K, size=n, p=weights)
    X = means[labels] + np.sqrt(variances[labels]) * rng.standard_normal((n, p))
    truth = {"kind": "gauss-mixture", "weights": weights.tolist(), "means": means.tolist(), "variances": variances.tolist()}
    return Dataset(X, REAL, labels=labels), truth


def _bernoulli_mixture(params, n, rng):
    probs = params.get("probs")
    if probs is None:
        on, off = float(params.get("on_prob", 0.9)), float(params.get("off_prob", 0.05))
        if params.get("prototypes", "strokes") == "random":
            # random on-pixel patterns, drawn from their own stream so that the
            # prototypes do not depend on n
            K = int(params.get("components", 30))
            p = int(params.get("p", 64))
            proto_rng = make_rng(int(params.get("prototype_seed", 7)))
            shapes = proto_rng.random((K, p)) < float(params.get("density", 0.3))
        else:
            shapes = stroke_prototypes()
            K = int(params.get("components", shapes.shape[0]))
            shapes = shapes[:K]
        probs = np.where(shapes > 0, on, off)
    probs = np.asarray(probs, dtype=np.float64)
    K, p = probs.shape
    weights = np.asarray(params.get("weights", np.full(K, 1.0 / K)), dtype=np.float64)
    labels = rng.choice(K, size=n, p=weights)
    X = (rng.random((n, p)) < probs[labels]).astype(np.float64)
    side = int(round(np.sqrt(p)))
    shape = (side, side) if side * side == p else None
    truth = {"kind": "bernoulli-mixture", "weights": weights.tolist(), "probs": probs.tolist()}
    return Dataset(X, BINARY, shape, labels=labels), truth


def synth_data(kind: str, params: dict | None = None, n: int = 100, seed=0) -> tuple[Dataset, dict]:
    """Seeded synthetic dataset plus its ground-truth parameters."""
    params = dict(params or {})
    rng = make_rng(seed)
    if kind == "ppca":
        ds, truth = _ppca(params, n, rng)
    elif kind == "gauss-mixture":
        ds, truth = _gauss_mixture(params, n, rng)
    elif kind == "bernoulli-mixture":
        ds, truth = _bernoulli_mixture(params, n, rng)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    truth.update({"n": n, "seed": seed})
    return ds, truth


def save_truth(truth: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(truth, indent=1, sort_keys=True))
    return path
