"""On-disk formats and the synthetic dataset generator.

Two binary containers, both little-endian regardless of host:

* single tensor (magic ``XMT1``): magic | rank u32 | dims rank*u32 |
  payload product(dims) float64, row-major.
* named tensor container (magic ``XMN1``): magic | meta_len u32 |
  meta JSON utf-8 | count u32 | entries, each name_len u32 | name utf-8 |
  rank u32 | dims | float64 payload. Used for checkpoints and indexes.

A dataset is a directory holding ``manifest.json``, ``grids/`` and
``queries/text/`` / ``queries/sketch/``. Query feature keys follow a
fixed convention: text keys are the class label itself, sketch keys are
``<label>/<sketch-id>``.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError

TENSOR_MAGIC = b"XMT1"
CONTAINER_MAGIC = b"XMN1"
MAX_RANK = 8


def _pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"tensor rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8", copy=False).tobytes()


class _Reader:
    """Byte cursor that reports the failure offset on truncation."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.blob):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        chunk = self.blob[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _unpack_tensor(r: _Reader) -> np.ndarray:
    at = r.pos
    magic = r.take(4, "magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}", offset=at)
    at = r.pos
    rank = r.u32("rank")
    if rank > MAX_RANK:
        raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}", offset=at)
    dims = [r.u32("dims") for _ in range(rank)]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = r.take(8 * count, "payload")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return data.reshape(dims)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(_pack_tensor(arr))


def read_tensor(path) -> np.ndarray:
    r = _Reader(Path(path).read_bytes())
    arr = _unpack_tensor(r)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after payload", offset=r.pos)
    return arr


def write_named_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write an ordered name->tensor mapping plus a JSON metadata block."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CONTAINER_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_pack_tensor(arr)[4:])  # entries drop the per-tensor magic
    Path(path).write_bytes(b"".join(parts))


def read_named_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}", offset=0)
    meta_len = r.u32("meta length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "meta").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad metadata block: {e}", offset=meta_at) from e
    count = r.u32("entry count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
        at = r.pos
        rank = r.u32("rank")
        if rank > MAX_RANK:
            raise FormatError(f"rank {rank} exceeds maximum {MAX_RANK}", offset=at)
        dims = [r.u32("dims") for _ in range(rank)]
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(8 * n, "payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after last entry", offset=r.pos)
    return tensors, meta


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass(frozen=True)
class DatasetItem:
    id: str
    class_labels: tuple[str, ...]
    grid_path: str
    sketch_keys: tuple[str, ...] = ()
    text_keys: tuple[str, ...] = ()

    @property
    def label_key(self) -> tuple[str, ...]:
        """Sorted labels; identifies the (possibly combined) class."""
        return tuple(sorted(self.class_labels))


@dataclass
class Manifest:
    root: Path
    classes: list[str]
    grid_h: int
    grid_w: int
    channels: int
    items: list[DatasetItem]
    query_features: dict[str, dict[str, str]]  # modality -> key -> rel. path

    def item(self, item_id: str) -> DatasetItem:
        return self._by_id[item_id]

    def query_path(self, modality: str, key: str) -> Path:
        return self.root / self.query_features[modality][key]

    def grid_file(self, item: DatasetItem) -> Path:
        return self.root / item.grid_path

    @staticmethod
    def query_class(modality: str, key: str) -> str:
        return key.split("/", 1)[0] if modality == "sketch" else key

    def sketch_pools(self) -> dict[str, list[str]]:
        """Sketch keys grouped by class label, each pool sorted."""
        pools: dict[str, list[str]] = {}
        for key in self.query_features.get("sketch", {}):
            pools.setdefault(self.query_class("sketch", key), []).append(key)
        return {label: sorted(keys) for label, keys in pools.items()}

    def __post_init__(self):
        self._by_id = {it.id: it for it in self.items}


def _check(cond, violations, category, message):
    if not cond:
        violations.append((category, message))
    return cond


def load_manifest(path) -> Manifest:
    """Load and validate a manifest, reporting every violation found."""
    path = Path(path)
    violations: list[tuple[str, str]] = []
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError([("bad-json", f"{path}: {e}")]) from e
    if not isinstance(doc, dict):
        raise ManifestError([("bad-json", "top-level document is not an object")])

    for key in ("classes", "grid_shape", "items", "query_features"):
        _check(key in doc, violations, "missing-field", f"required field {key!r} absent")
    if violations:
        raise ManifestError(violations)

    classes = doc["classes"]
    if not _check(isinstance(classes, list) and all(isinstance(c, str) for c in classes),
                  violations, "bad-type", "classes must be a list of strings"):
        classes = []
    _check(len(classes) > 0, violations, "empty-classes", "classes list is empty")

    shape = doc["grid_shape"]
    grid_ok = (isinstance(shape, list) and len(shape) == 3
               and all(isinstance(d, int) and d > 0 for d in shape))
    _check(grid_ok, violations, "bad-grid-shape",
           f"grid_shape must be three positive integers, got {shape!r}")
    grid_h, grid_w, channels = (shape if grid_ok else (1, 1, 1))

    qf = doc["query_features"]
    if not _check(isinstance(qf, dict)
                  and all(isinstance(m, dict) for m in qf.values()),
                  violations, "bad-type", "query_features must map modality to key->path"):
        qf = {}
    for modality, table in qf.items():
        for key, rel in table.items():
            if not isinstance(rel, str):
                violations.append(("bad-type", f"query feature path for {key!r} not a string"))
            elif not (path.parent / rel).is_file():
                violations.append(("dangling-path", f"query feature file missing: {rel}"))

    raw_items = doc["items"]
    if not _check(isinstance(raw_items, list), violations, "bad-type",
                  "items must be a list"):
        raw_items = []
    items: list[DatasetItem] = []
    seen_ids: set[str] = set()
    class_set = set(classes)
    for i, raw in enumerate(raw_items):
        if not isinstance(raw, dict):
            violations.append(("bad-type", f"item #{i} is not an object"))
            continue
        missing = [k for k in ("id", "class_labels", "grid") if k not in raw]
        if missing:
            violations.append(("missing-field", f"item #{i} lacks {missing}"))
            continue
        item_id = raw["id"]
        labels = raw["class_labels"]
        if not (isinstance(item_id, str) and isinstance(labels, list)
                and all(isinstance(c, str) for c in labels)
                and isinstance(raw["grid"], str)):
            violations.append(("bad-type", f"item #{i} has wrongly typed fields"))
            continue
        if item_id in seen_ids:
            violations.append(("duplicate-id", f"item id {item_id!r} repeated"))
        seen_ids.add(item_id)
        if not (1 <= len(labels) <= 2 and len(set(labels)) == len(labels)):
            violations.append(("label-count",
                               f"item {item_id!r} must carry 1..2 distinct labels, got {labels!r}"))
        for label in labels:
            if label not in class_set:
                violations.append(("unknown-class",
                                   f"item {item_id!r} labelled {label!r}, not in classes"))
        if not (path.parent / raw["grid"]).is_file():
            violations.append(("dangling-path", f"grid file missing: {raw['grid']}"))
        for modality, field_name in (("sketch", "sketches"), ("text", "texts")):
            for key in raw.get(field_name, ()):
                if key not in qf.get(modality, {}):
                    violations.append(("unknown-query-key",
                                       f"item {item_id!r} references unknown {modality} key {key!r}"))
        items.append(DatasetItem(
            id=item_id,
            class_labels=tuple(labels),
            grid_path=raw["grid"],
            sketch_keys=tuple(raw.get("sketches", ())),
            text_keys=tuple(raw.get("texts", ())),
        ))

    if violations:
        raise ManifestError(violations)
    return Manifest(root=path.parent, classes=list(classes), grid_h=grid_h,
                    grid_w=grid_w, channels=channels, items=items,
                    query_features={m: dict(t) for m, t in qf.items()})


class DataRepo:
    """Cached array access for a loaded manifest."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._grids: dict[str, np.ndarray] = {}
        self._queries: dict[tuple[str, str], np.ndarray] = {}

    def grid(self, item_id: str) -> np.ndarray:
        """Grid as a (locations, channels) matrix."""
        arr = self._grids.get(item_id)
        if arr is None:
            m = self.manifest
            raw = read_tensor(m.grid_file(m.item(item_id)))
            arr = raw.reshape(m.grid_h * m.grid_w, m.channels)
            self._grids[item_id] = arr
        return arr

    def query(self, modality: str, key: str) -> np.ndarray:
        arr = self._queries.get((modality, key))
        if arr is None:
            arr = read_tensor(self.manifest.query_path(modality, key)).reshape(-1)
            self._queries[(modality, key)] = arr
        return arr


# ---------------------------------------------------------------------------
# synthetic dataset generator


@dataclass
class SynthConfig:
    seed: int = 0
    num_classes: int = 10
    images_per_class: int = 50
    grid_h: int = 7
    grid_w: int = 7
    channels: int = 512
    object_cells: int = 10
    noise_sigma_image: float = 0.1
    noise_sigma_text: float = 0.05
    noise_sigma_sketch: float = 0.2
    multi: bool = False
    text_dim: int = 1000
    sketch_dim: int = 4096
    sketches_per_class: int = 5

    def validate(self) -> None:
        L = self.grid_h * self.grid_w
        if min(self.num_classes, self.images_per_class, self.grid_h, self.grid_w,
               self.channels, self.object_cells, self.text_dim, self.sketch_dim,
               self.sketches_per_class) < 1:
            raise ValueError("all counts and dimensions must be positive")
        if min(self.noise_sigma_image, self.noise_sigma_text,
               self.noise_sigma_sketch) < 0:
            raise ValueError("noise sigmas must be nonnegative")
        needed = 2 * self.object_cells if self.multi else self.object_cells
        if needed > L:
            raise ValueError(
                f"object cells ({needed} needed) exceed grid size {L}")
        if self.multi and self.num_classes < 2:
            raise ValueError("multi mode needs at least 2 constituent classes")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _unit_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    m = rng.standard_normal((rows, cols))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Materialize a synthetic dataset; returns the manifest path.

    Each class gets a unit prototype. Object cells of an image carry the
    prototype plus noise, background cells carry pure noise; in multi mode
    two classes occupy disjoint cell sets. Query features are fixed random
    (row-normalized) linear maps of the prototype plus modality noise.
    Everything is drawn from one seeded generator in a fixed order, so the
    same config always produces a byte-identical tree.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    (out / "queries" / "text").mkdir(parents=True, exist_ok=True)
    (out / "queries" / "sketch").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    classes = [f"class_{i:02d}" for i in range(cfg.num_classes)]
    M = cfg.channels
    L = cfg.grid_h * cfg.grid_w

    protos = {c: _unit_rows(rng, 1, M)[0] for c in classes}
    a_text = _unit_rows(rng, cfg.text_dim, M)
    a_sketch = _unit_rows(rng, cfg.sketch_dim, M)

    query_features: dict[str, dict[str, str]] = {"text": {}, "sketch": {}}
    for c in classes:
        feat = a_text @ protos[c] + rng.normal(0.0, cfg.noise_sigma_text, cfg.text_dim)
        rel = f"queries/text/{c}.xmt"
        write_tensor(out / rel, feat)
        query_features["text"][c] = rel
    for c in classes:
        for j in range(cfg.sketches_per_class):
            feat = (a_sketch @ protos[c]
                    + rng.normal(0.0, cfg.noise_sigma_sketch, cfg.sketch_dim))
            rel = f"queries/sketch/{c}_s{j:02d}.xmt"
            write_tensor(out / rel, feat)
            query_features["sketch"][f"{c}/s{j:02d}"] = rel

    items = []
    if cfg.multi:
        groups = [list(pair) for pair in itertools.combinations(classes, 2)]
    else:
        groups = [[c] for c in classes]
    for labels in groups:
        stem = "+".join(labels)
        for i in range(cfg.images_per_class):
            grid = rng.normal(0.0, cfg.noise_sigma_image, (L, M))
            cells = rng.choice(L, size=cfg.object_cells * len(labels), replace=False)
            for k, label in enumerate(labels):
                own = cells[k * cfg.object_cells:(k + 1) * cfg.object_cells]
                grid[own] += protos[label]
            item_id = f"{stem}_{i:03d}"
            rel = f"grids/{item_id}.xmt"
            write_tensor(out / rel, grid.reshape(cfg.grid_h, cfg.grid_w, M))
            entry = {
                "id": item_id,
                "class_labels": labels,
                "grid": rel,
                "texts": labels,
            }
            if not cfg.multi:
                entry["sketches"] = [f"{labels[0]}/s{j:02d}"
                                     for j in range(cfg.sketches_per_class)]
            items.append(entry)

    doc = {
        "classes": classes,
        "grid_shape": [cfg.grid_h, cfg.grid_w, cfg.channels],
        "items": items,
        "query_features": query_features,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path
