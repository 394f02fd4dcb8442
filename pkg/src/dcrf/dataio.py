"""On-disk formats, dataset bundles and the synthetic dataset generator.

Matrix files
    ``b"DCRF"``, version ``u16`` (=1), dtype ``u16`` (0 float32, 1 float64),
    rows ``u64``, cols ``u64``, little-endian, then row-major values.

Records file
    JSON lines ``{"id", "sets", "groups", "labels", "split"}``; ``labels`` is a
    0/1 list of length C or ``null``.

Manifest
    One JSON document naming the categories, the two matrix files with their
    expected shapes, and the records file.  Paths are relative to the manifest.

Model file
    One line of compact JSON (the header, ending in ``\\n``) followed by the
    parameter tensors of every category as concatenated matrix blocks.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from dcrf.core import CrfParams

MAGIC = b"DCRF"
MATRIX_VERSION = 1
MODEL_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
SPLITS = ("train", "validation", "test")
MODEL_TENSORS = ("unary_weights", "unary_bias", "kernel_weights", "compatibility")


class DatasetError(ValueError):
    """Base class for malformed or inconsistent dataset and model files."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class MagicMismatchError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class DuplicateIdError(DatasetError):
    pass


class LabelLengthError(DatasetError):
    pass


class ModelFormatError(DatasetError):
    """Unknown model version or a truncated / corrupt model file."""


# -- matrices ---------------------------------------------------------------

def write_matrix(fh: BinaryIO, values, dtype: int = 1) -> None:
    a = np.asarray(values)
    if a.ndim != 2:
        raise DimensionMismatchError(f"matrix must be 2-D, got shape {a.shape}")
    if dtype not in _DTYPES:
        raise DatasetError(f"unknown matrix dtype code {dtype}")
    fh.write(_HEADER.pack(MAGIC, MATRIX_VERSION, dtype, a.shape[0], a.shape[1]))
    fh.write(np.ascontiguousarray(a, dtype=_DTYPES[dtype]).tobytes())


def read_matrix(fh: BinaryIO, source: str = "<stream>") -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ModelFormatError(f"{source}: truncated matrix header")
    magic, version, dtype, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise MagicMismatchError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != MATRIX_VERSION:
        raise DatasetError(f"{source}: unsupported matrix version {version}")
    if dtype not in _DTYPES:
        raise DatasetError(f"{source}: unknown dtype code {dtype}")
    dt = _DTYPES[dtype]
    nbytes = rows * cols * dt.itemsize
    body = fh.read(nbytes)
    if len(body) != nbytes:
        raise ModelFormatError(
            f"{source}: truncated matrix body ({len(body)} of {nbytes} bytes)")
    return np.frombuffer(body, dtype=dt).astype(np.float64).reshape(rows, cols)


def save_matrix(path, values, dtype: int = 1) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, values, dtype)


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    with open(path, "rb") as fh:
        out = read_matrix(fh, str(path))
        if fh.read(1):
            raise DatasetError(f"{path}: trailing bytes after matrix body")
    return out


# -- dataset bundle ---------------------------------------------------------

@dataclass(frozen=True)
class DatasetBundle:
    """Nodes with features, token sets, optional labels and split tags.

    ``labels`` is N x C (int8); rows where ``labeled`` is False carry zeros
    and are never used as ground truth.
    """

    ids: tuple[str, ...]
    image_features: np.ndarray
    text_embeddings: np.ndarray
    sets: tuple[frozenset, ...]
    groups: tuple[frozenset, ...]
    labels: np.ndarray
    labeled: np.ndarray
    categories: tuple[str, ...]
    splits: tuple[str, ...]

    def __post_init__(self):
        n = len(self.ids)
        fields = {
            "ids": tuple(str(i) for i in self.ids),
            "sets": tuple(frozenset(s) for s in self.sets),
            "groups": tuple(frozenset(g) for g in self.groups),
            "categories": tuple(self.categories),
            "splits": tuple(self.splits),
            "image_features": np.asarray(self.image_features, dtype=np.float64),
            "text_embeddings": np.asarray(self.text_embeddings, dtype=np.float64),
            "labels": np.asarray(self.labels, dtype=np.int8),
            "labeled": np.asarray(self.labeled, dtype=bool),
        }
        for k, v in fields.items():
            if isinstance(v, np.ndarray):
                v.setflags(write=False)
            object.__setattr__(self, k, v)
        validate_bundle(self, n)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def split_mask(self, split: str) -> np.ndarray:
        return np.array([s == split for s in self.splits], dtype=bool)

    def equals(self, other: "DatasetBundle") -> bool:
        return (self.ids == other.ids and self.sets == other.sets
                and self.groups == other.groups and self.categories == other.categories
                and self.splits == other.splits
                and np.array_equal(self.image_features, other.image_features)
                and np.array_equal(self.text_embeddings, other.text_embeddings)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.labeled, other.labeled))


def validate_bundle(b: DatasetBundle, n: int | None = None) -> None:
    n = len(b.ids) if n is None else n
    if n < 1:
        raise DimensionMismatchError("dataset has no nodes")
    if len(set(b.ids)) != n:
        seen, dup = set(), None
        for i in b.ids:
            if i in seen:
                dup = i
                break
            seen.add(i)
        raise DuplicateIdError(f"duplicate node id {dup!r}")
    for name, m in (("image_features", b.image_features), ("text_embeddings", b.text_embeddings)):
        if m.ndim != 2 or m.shape[0] != n or m.shape[1] < 1:
            raise DimensionMismatchError(f"{name} has shape {m.shape}, expected ({n}, D>=1)")
        if not np.all(np.isfinite(m)):
            raise DatasetError(f"{name} contains non-finite values")
    for name, seq in (("sets", b.sets), ("groups", b.groups), ("splits", b.splits)):
        if len(seq) != n:
            raise DimensionMismatchError(f"{name} has {len(seq)} entries for {n} nodes")
    c = len(b.categories)
    if c < 1:
        raise DatasetError("dataset declares no categories")
    if b.labels.shape != (n, c):
        raise LabelLengthError(f"label matrix has shape {b.labels.shape}, expected ({n}, {c})")
    if b.labeled.shape != (n,):
        raise DimensionMismatchError(f"labeled mask has shape {b.labeled.shape}")
    if not np.all((b.labels == 0) | (b.labels == 1)):
        raise DatasetError("labels must be 0 or 1")
    bad = [s for s in b.splits if s not in SPLITS]
    if bad:
        raise DatasetError(f"unknown split tag {bad[0]!r}")


def _record(b: DatasetBundle, i: int) -> dict:
    return {
        "id": b.ids[i],
        "sets": sorted(b.sets[i]),
        "groups": sorted(b.groups[i]),
        "labels": [int(v) for v in b.labels[i]] if b.labeled[i] else None,
        "split": b.splits[i],
    }


def save_dataset(bundle: DatasetBundle, directory, overwrite: bool = False,
                 dtype: int = 1) -> Path:
    """Write matrices, records and manifest into ``directory``; return the manifest path."""
    d = Path(directory)
    manifest = d / "manifest.json"
    try:
        d.mkdir(parents=True, exist_ok=True)
        if manifest.exists() and not overwrite:
            raise FileExistsError(f"refusing to overwrite existing dataset at {manifest}")
        save_matrix(d / "image.bin", bundle.image_features, dtype)
        save_matrix(d / "text.bin", bundle.text_embeddings, dtype)
        with open(d / "records.jsonl", "w", encoding="utf-8") as fh:
            for i in range(bundle.n):
                fh.write(json.dumps(_record(bundle, i), sort_keys=True) + "\n")
        doc = {
            "format": "dcrf-dataset",
            "version": MANIFEST_VERSION,
            "categories": list(bundle.categories),
            "matrices": {
                "image": {"path": "image.bin", "rows": bundle.n,
                          "cols": int(bundle.image_features.shape[1])},
                "text": {"path": "text.bin", "rows": bundle.n,
                         "cols": int(bundle.text_embeddings.shape[1])},
            },
            "records": "records.jsonl",
        }
        manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except PermissionError as exc:
        raise PermissionError(exc.errno, f"cannot write dataset: {exc.strerror}",
                              exc.filename or str(d)) from exc
    return manifest


def _read_records(path: Path, n_categories: int) -> list[dict]:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "sets", "groups", "labels", "split"):
                if key not in rec:
                    raise DatasetError(f"{path}:{lineno}: record lacks {key!r}")
            labels = rec["labels"]
            if labels is not None and len(labels) != n_categories:
                raise LabelLengthError(
                    f"{path}:{lineno}: record {rec['id']!r} has {len(labels)} labels, "
                    f"expected {n_categories}")
            out.append(rec)
    return out


def load_dataset(manifest_path) -> DatasetBundle:
    """Parse a manifest and its files; the bundle is validated before return."""
    mpath = Path(manifest_path)
    if not mpath.is_file():
        raise MissingFileError(f"missing file: {mpath}")
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid manifest JSON ({exc.msg})") from exc
    if doc.get("format") != "dcrf-dataset" or doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: not a version-{MANIFEST_VERSION} dcrf dataset manifest")
    base = mpath.parent
    categories = [str(c) for c in doc["categories"]]
    mats = {}
    for key in ("image", "text"):
        spec = doc["matrices"][key]
        m = load_matrix(base / spec["path"])
        if m.shape != (spec["rows"], spec["cols"]):
            raise DimensionMismatchError(
                f"{base / spec['path']}: shape {m.shape} differs from manifest "
                f"({spec['rows']}, {spec['cols']})")
        mats[key] = m
    records = _read_records(base / doc["records"], len(categories))
    for key, m in mats.items():
        if m.shape[0] != len(records):
            raise DimensionMismatchError(
                f"{key} matrix declares {m.shape[0]} rows but the records file has "
                f"{len(records)} nodes")
    n, c = len(records), len(categories)
    labels = np.zeros((n, c), dtype=np.int8)
    labeled = np.zeros(n, dtype=bool)
    for i, rec in enumerate(records):
        if rec["labels"] is not None:
            labels[i] = rec["labels"]
            labeled[i] = True
    return DatasetBundle(
        ids=tuple(r["id"] for r in records),
        image_features=mats["image"],
        text_embeddings=mats["text"],
        sets=tuple(frozenset(r["sets"]) for r in records),
        groups=tuple(frozenset(r["groups"]) for r in records),
        labels=labels,
        labeled=labeled,
        categories=tuple(categories),
        splits=tuple(r["split"] for r in records),
    )


# -- models -----------------------------------------------------------------

@dataclass(frozen=True)
class ModelFile:
    categories: tuple[str, ...]
    params: tuple[CrfParams, ...]
    thetas: tuple[float, float, float]
    unroll_T: int


def dumps_model(model: ModelFile) -> bytes:
    if len(model.categories) != len(model.params):
        raise DatasetError("one parameter record per category is required")
    header = {
        "format": "dcrf-model",
        "version": MODEL_VERSION,
        "categories": list(model.categories),
        "thetas": [float(t) for t in model.thetas],
        "unroll_T": int(model.unroll_T),
        "reg_lambda": [p.reg_lambda for p in model.params],
        "tensors": list(MODEL_TENSORS),
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
    for p in model.params:
        arrays = p.arrays()
        for name in MODEL_TENSORS:
            write_matrix(buf, np.atleast_2d(arrays[name]))
    return buf.getvalue()


def loads_model(data: bytes, source: str = "<bytes>") -> ModelFile:
    nl = data.find(b"\n")
    if nl < 0:
        raise ModelFormatError(f"{source}: truncated model header")
    try:
        header = json.loads(data[:nl])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{source}: corrupt model header") from exc
    if header.get("format") != "dcrf-model":
        raise ModelFormatError(f"{source}: not a dcrf model file")
    if header.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"{source}: unsupported model version {header.get('version')!r} "
            f"(this build reads version {MODEL_VERSION})")
    if header.get("tensors") != list(MODEL_TENSORS):
        raise ModelFormatError(f"{source}: unexpected tensor layout {header.get('tensors')}")
    fh = io.BytesIO(data[nl + 1:])
    params = []
    for lam in header["reg_lambda"]:
        wa, ba, wb, mu = (read_matrix(fh, source) for _ in MODEL_TENSORS)
        params.append(CrfParams(wa, ba.ravel(), wb.ravel(), mu, lam))
    if fh.read(1):
        raise ModelFormatError(f"{source}: trailing bytes after the last tensor")
    if len(params) != len(header["categories"]):
        raise ModelFormatError(f"{source}: category count disagrees with tensor blocks")
    return ModelFile(tuple(header["categories"]), tuple(params),
                     tuple(float(t) for t in header["thetas"]), int(header["unroll_T"]))


def save_model(model: ModelFile, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> ModelFile:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    return loads_model(path.read_bytes(), str(path))


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic generator.

    Each channel's informativeness in [0, 1] sets how strongly its metadata
    tracks the latent cluster (sets, groups) or the label vector (text).
    """

    n: int = 500
    n_categories: int = 4
    dim_image: int = 16
    dim_text: int = 16
    n_clusters: int = 8
    informativeness: tuple[float, float, float] = (0.7, 0.7, 0.7)
    label_noise: float = 0.1
    seed: int = 0
    train_fraction: float = 2 / 3
    validation_fraction: float = 1 / 12
    image_signal: float = 0.6
    tokens_per_node: int = 3
    pool_size: int = 12

    def __post_init__(self):
        for name in ("n", "n_categories", "dim_image", "dim_text", "n_clusters",
                     "tokens_per_node", "pool_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.informativeness) != 3:
            raise ValueError("informativeness needs one value per channel (text, set, group)")
        rates = (*self.informativeness, self.label_noise, self.train_fraction,
                 self.validation_fraction)
        if any(not (0.0 <= r <= 1.0) for r in rates):
            raise ValueError("rates and fractions must lie in [0, 1]")
        if self.train_fraction + self.validation_fraction > 1.0:
            raise ValueError("train_fraction + validation_fraction must not exceed 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


def split_counts(n: int, train_fraction: float, validation_fraction: float) -> tuple[int, int, int]:
    n_train = int(round(n * train_fraction))
    n_val = min(int(round(n * validation_fraction)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def _draw_tokens(rng, clusters, informativeness, prefix, cfg: SynthConfig):
    """Per node, each token comes from its cluster's pool with probability
    ``informativeness``, otherwise from the union of all pools."""
    n_total = cfg.n_clusters * cfg.pool_size
    out = []
    for c in clusters:
        own = rng.random(cfg.tokens_per_node) < informativeness
        local = c * cfg.pool_size + rng.integers(0, cfg.pool_size, cfg.tokens_per_node)
        anywhere = rng.integers(0, n_total, cfg.tokens_per_node)
        picks = np.where(own, local, anywhere)
        out.append(frozenset(f"{prefix}{int(t)}" for t in picks))
    return tuple(out)


def generate_synthetic(cfg: SynthConfig) -> DatasetBundle:
    """Draw a dataset whose metadata similarity correlates with label agreement.

    Latent clusters drive labels through cluster-conditional Bernoulli rates.
    Image features see the cluster through a weak mean offset; user sets and
    groups are sampled from cluster-specific token pools; text embeddings are
    shifted by per-category directions of the node's own labels.  With
    informativeness 0 a channel is pure noise.
    """
    rng = np.random.default_rng(cfg.seed)
    n, c = cfg.n, cfg.n_categories
    clusters = rng.integers(0, cfg.n_clusters, n)
    rates = np.where(rng.random((cfg.n_clusters, c)) < 0.35,
                     rng.uniform(0.7, 0.95, (cfg.n_clusters, c)),
                     rng.uniform(0.02, 0.15, (cfg.n_clusters, c)))
    labels = (rng.random((n, c)) < rates[clusters]).astype(np.int8)
    flip = rng.random((n, c)) < cfg.label_noise
    labels = np.where(flip, 1 - labels, labels).astype(np.int8)

    centers = rng.normal(size=(cfg.n_clusters, cfg.dim_image))
    image = cfg.image_signal * centers[clusters] + rng.normal(size=(n, cfg.dim_image))

    info_text, info_set, info_group = cfg.informativeness
    directions = rng.normal(size=(c, cfg.dim_text))
    text = 2.0 * info_text * (labels - 0.5) @ directions + rng.normal(size=(n, cfg.dim_text))

    sets = _draw_tokens(rng, clusters, info_set, "u", cfg)
    groups = _draw_tokens(rng, clusters, info_group, "g", cfg)

    n_train, n_val, n_test = split_counts(n, cfg.train_fraction, cfg.validation_fraction)
    splits = ("train",) * n_train + ("validation",) * n_val + ("test",) * n_test
    width = len(str(n - 1))
    return DatasetBundle(
        ids=tuple(f"n{i:0{width}d}" for i in range(n)),
        image_features=image,
        text_embeddings=text,
        sets=sets,
        groups=groups,
        labels=labels,
        labeled=np.ones(n, dtype=bool),
        categories=tuple(f"cat{k}" for k in range(c)),
        splits=splits,
    )
