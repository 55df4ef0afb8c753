"""Procedural labelled-cuboid objects (chairs, tables, lamps) and their on-disk format.

Objects stand on the floor (y = 0) and are centered on the vertical axis.
Records are written one per line as JSON with 17-significant-digit floats;
a separate manifest carries the vocabulary, normalization statistics,
k-means codebooks and the split id lists.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .distributions import ClusterCodebook, fit_kmeans
from .geometry import (
    IDENTITY_6D,
    BoundingBox,
    Box,
    Part,
    axis_angle_matrix,
    matrix_to_rot6d,
    rot6d_to_matrix,
    sample_union_surface,
    union_contains,
)

FORMAT_NAME = "partgen-dataset"
FORMAT_VERSION = 1

CATEGORIES = ("chair", "table", "lamp")
# END must stay last: its id is len(VOCABULARY) - 1
VOCABULARY = (
    "leg", "top", "seat", "back", "arm", "stretcher", "pedestal", "base",
    "drawer", "lamp_base", "pole", "shade", "lamp_arm", "<end>",
)
END_LABEL = "<end>"
ATTRIBUTES = ("translation", "rotation", "size")
ATTRIBUTE_DIMS = {"translation": 3, "rotation": 6, "size": 3}
SPLITS = ("train", "val", "test")

DEFAULT_STYLE = {
    "chair": {
        "seat_width": (0.40, 0.60), "seat_depth": (0.40, 0.55), "seat_thickness": (0.04, 0.08),
        "seat_height": (0.38, 0.50), "leg_thickness": (0.03, 0.06), "back_height": (0.35, 0.60),
        "back_thickness": (0.03, 0.06), "arm_height": (0.15, 0.25),
        "arm_prob": 0.5, "stretcher_styles": ("bar", "side", "box"), "yaw_prob": 0.25,
    },
    "table": {
        "top_width": (0.8, 1.6), "top_depth": (0.5, 1.0), "top_thickness": (0.03, 0.07),
        "height": (0.4, 1.2), "leg_thickness": (0.04, 0.08), "leg_inset": (0.0, 0.08),
        "pedestal_prob": 0.0, "stretcher_prob": 0.0, "drawer_prob": 0.0, "yaw_prob": 0.25,
    },
    "lamp": {
        "base_width": (0.15, 0.30), "base_height": (0.02, 0.05), "pole_thickness": (0.02, 0.04),
        "pole_length": (0.3, 1.2), "shade_width": (0.2, 0.4), "shade_height": (0.15, 0.3),
        "arm_length": (0.15, 0.35), "arm_prob": 0.5, "max_tilt_deg": 5.0, "yaw_prob": 0.25,
    },
}

_NUMBER_WORDS = (
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve",
)


class DatasetFormatError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


def label_id(name: str) -> int:
    return VOCABULARY.index(name)


END_ID = label_id(END_LABEL)


@dataclass(frozen=True)
class ObjectRecord:
    id: str
    category: str
    bbox: BoundingBox
    parts: tuple
    description: str = ""
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


def check_record(record: ObjectRecord, max_parts: int = 24, slack: float = 1e-6) -> None:
    """Raise ValueError if the record breaks the containment or part-count rules."""
    if not 1 <= len(record.parts) <= max_parts:
        raise ValueError(f"{record.id}: part count {len(record.parts)} outside [1, {max_parts}]")
    half = np.asarray(record.bbox.size) / 2.0 + slack
    for p in record.parts:
        if p.label >= END_ID:
            raise ValueError(f"{record.id}: invalid part label {p.label}")
        local = record.bbox.to_local(p.corners())
        if np.any(np.abs(local) > half):
            raise ValueError(f"{record.id}: part {VOCABULARY[p.label]} leaves the bounding box")


# --- procedural generation ---------------------------------------------------

def _u(rng, lo_hi) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def _box(name, size, center, R=None):
    rot = IDENTITY_6D if R is None else matrix_to_rot6d(R)
    return (label_id(name), np.asarray(size, float), np.asarray(center, float), np.asarray(rot, float))


def _chair(rng, st):
    sw, sd, stk = _u(rng, st["seat_width"]), _u(rng, st["seat_depth"]), _u(rng, st["seat_thickness"])
    sh, lt = _u(rng, st["seat_height"]), _u(rng, st["leg_thickness"])
    bh, bt = _u(rng, st["back_height"]), _u(rng, st["back_thickness"])
    seat_top = sh + stk
    out = [_box("seat", (sw, stk, sd), (0, sh + stk / 2, 0))]
    out.append(_box("back", (sw, bh, bt), (0, seat_top + bh / 2, -(sd / 2 - bt / 2))))
    lx, lz = sw / 2 - lt / 2, sd / 2 - lt / 2
    for x in (-lx, lx):
        for z in (-lz, lz):
            out.append(_box("leg", (lt, sh, lt), (x, sh / 2, z)))
    if rng.random() < st["arm_prob"]:
        ah, at = _u(rng, st["arm_height"]), lt
        for x in (-(sw / 2 - at / 2), sw / 2 - at / 2):
            out.append(_box("arm", (at, ah, 0.8 * sd), (x, seat_top + ah / 2, 0.1 * sd - bt / 2)))
    styles = st["stretcher_styles"]
    if styles:
        style = styles[int(rng.integers(len(styles)))]
        y = sh * float(rng.uniform(0.2, 0.35))
        t = 0.6 * lt
        if style == "bar":
            out.append(_box("stretcher", (2 * lx, t, t), (0, y, 0)))
        if style in ("side", "box"):
            for x in (-lx, lx):
                out.append(_box("stretcher", (t, t, 2 * lz - lt), (x, y, 0)))
        if style == "box":
            for z in (-lz, lz):
                out.append(_box("stretcher", (2 * lx - lt, t, t), (0, y, z)))
    return out


def _table(rng, st):
    tw, td, tt = _u(rng, st["top_width"]), _u(rng, st["top_depth"]), _u(rng, st["top_thickness"])
    H, lt = _u(rng, st["height"]), _u(rng, st["leg_thickness"])
    leg_len = H - tt
    out = [_box("top", (tw, tt, td), (0, H - tt / 2, 0))]
    if rng.random() < st["pedestal_prob"]:
        bw = min(tw, td) * 0.6
        bh = 0.04
        out.append(_box("base", (bw, bh, bw), (0, bh / 2, 0)))
        pw = 2.5 * lt
        out.append(_box("pedestal", (pw, leg_len - bh, pw), (0, bh + (leg_len - bh) / 2, 0)))
        return out
    inset = _u(rng, st["leg_inset"])
    lx, lz = tw / 2 - lt / 2 - inset, td / 2 - lt / 2 - inset
    for x in (-lx, lx):
        for z in (-lz, lz):
            out.append(_box("leg", (lt, leg_len, lt), (x, leg_len / 2, z)))
    if rng.random() < st["stretcher_prob"]:
        y, t = leg_len * 0.2, 0.6 * lt
        for x in (-lx, lx):
            out.append(_box("stretcher", (t, t, 2 * lz - lt), (x, y, 0)))
    if rng.random() < st["drawer_prob"]:
        dh = min(0.12, 0.3 * leg_len)
        out.append(_box("drawer", (2 * lx - lt, dh, 2 * lz - lt), (0, leg_len - dh / 2, 0)))
    return out


def _lamp(rng, st):
    bw, bh = _u(rng, st["base_width"]), _u(rng, st["base_height"])
    pt, pl = _u(rng, st["pole_thickness"]), _u(rng, st["pole_length"])
    sw, sh = _u(rng, st["shade_width"]), _u(rng, st["shade_height"])
    out = [_box("lamp_base", (bw, bh, bw), (0, bh / 2, 0))]
    out.append(_box("pole", (pt, pl, pt), (0, bh + pl / 2, 0)))
    top = bh + pl
    shade_x = 0.0
    if rng.random() < st["arm_prob"]:
        al = _u(rng, st["arm_length"])
        tilt = math.radians(float(rng.uniform(-st["max_tilt_deg"], st["max_tilt_deg"])))
        R = axis_angle_matrix((0, 0, 1), tilt)
        center = np.array([al / 2, top - pt / 2, 0.0])
        out.append(_box("lamp_arm", (al, pt, pt), center, R))
        shade_x = al
    out.append(_box("shade", (sw, sh, sw), (shade_x, top - sh / 2 + 0.5 * sh, 0)))
    return out


_BUILDERS = {"chair": _chair, "table": _table, "lamp": _lamp}


def tight_bbox(parts: Sequence[Box], inflate: float = 1.02) -> BoundingBox:
    corners = np.concatenate([p.corners() for p in parts])
    lo, hi = corners.min(0), corners.max(0)
    return BoundingBox((hi - lo) * inflate, (lo + hi) / 2.0, IDENTITY_6D)


def generate_object(category: str, rng: np.random.Generator, style: dict | None = None, id: str = "") -> ObjectRecord:
    """Sample one procedural object of the given category."""
    if category not in _BUILDERS:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    st = dict(DEFAULT_STYLE[category])
    st.update(style or {})
    raw = _BUILDERS[category](rng, st)
    yaw = 0
    if rng.random() < st["yaw_prob"]:
        yaw = int(rng.integers(1, 4))
    Ryaw = axis_angle_matrix((0, 1, 0), yaw * math.pi / 2)
    # snap the yaw matrix so quarter turns are exact
    Ryaw = np.round(Ryaw) if yaw else np.eye(3)
    parts = []
    for lab, size, center, rot in raw:
        R = Ryaw @ rot6d_to_matrix(rot)
        parts.append(Part(lab, size, Ryaw @ center, matrix_to_rot6d(R)))
    bbox = tight_bbox(parts)
    rec = ObjectRecord(id, category, bbox, tuple(parts))
    return ObjectRecord(id, category, bbox, tuple(parts), text_description(rec))


def text_description(record: ObjectRecord) -> str:
    """Template description listing part groups in vocabulary order."""
    counts: dict[int, int] = {}
    for p in record.parts:
        counts[p.label] = counts.get(p.label, 0) + 1
    groups = []
    for lab in sorted(counts):
        n = counts[lab]
        word = _NUMBER_WORDS[n] if n < len(_NUMBER_WORDS) else str(n)
        groups.append(f"{word} {VOCABULARY[lab].replace('_', ' ')}")
    if not groups:
        body = "no parts"
    elif len(groups) == 1:
        body = groups[0]
    else:
        body = ", ".join(groups[:-1]) + ", and " + groups[-1]
    return f"A {record.category} with {body}"


# --- normalization --------------------------------------------------------------

@dataclass
class AttributeStats:
    """Per-dimension [lo, hi] ranges mapping attributes to [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "AttributeStats":
        values = np.asarray(values, dtype=np.float64)
        lo, hi = values.min(0), values.max(0)
        # constant dimensions map onto the lower edge bin, which can hold all the mass
        flat = (hi - lo) < 1e-9
        hi = np.where(flat, lo + 1.0, hi)
        return cls(lo, hi)

    def normalize(self, x) -> np.ndarray:
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * (self.hi - self.lo) + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeStats":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64))


def part_attributes(p: Box) -> dict:
    return {
        "translation": np.asarray(p.translation),
        "rotation": np.asarray(p.rotation),
        "size": np.asarray(p.size),
    }


def to_unit_frame(record: ObjectRecord) -> tuple:
    """Return (parts, (center, R, scale)) with the bbox mapped into [-1, 1]^3.

    World point x maps to scale * R^T (x - center).
    """
    B = record.bbox
    center, R = np.asarray(B.translation), B.matrix
    scale = 2.0 / max(B.size)
    parts = []
    for p in record.parts:
        Rp = R.T @ p.matrix
        parts.append(Part(p.label, np.asarray(p.size) * scale, scale * (R.T @ (np.asarray(p.translation) - center)),
                          matrix_to_rot6d(Rp)))
    return parts, (center, R, scale)


def from_unit_frame(points, frame) -> np.ndarray:
    center, R, scale = frame
    return np.asarray(points) / scale @ R.T + center


# --- occupancy supervision ----------------------------------------------------

@dataclass
class OccupancySet:
    points: np.ndarray  # (U + V, 3), uniform points first
    labels: np.ndarray  # bool
    weights: np.ndarray  # importance weights for class-balanced sampling
    n_uniform: int

    @property
    def uniform_points(self) -> np.ndarray:
        return self.points[: self.n_uniform]

    @property
    def surface_points(self) -> np.ndarray:
        return self.points[self.n_uniform:]


def make_occupancy_pairs(record: ObjectRecord, n_uniform: int = 20_000, n_surface: int = 4_000,
                         rng: np.random.Generator | None = None, parts_unit=None) -> OccupancySet:
    """Labelled points in the record's unit frame.

    The weight of a point is (frequency of its class in the set) / 0.5, so a
    class-balanced draw (see ``balanced_indices``) weighted this way is an
    unbiased estimate of the plain mean over the whole set.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = parts_unit if parts_unit is not None else to_unit_frame(record)[0]
    uni = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    surf = sample_union_surface(parts, n_surface, rng) if n_surface > 0 else np.zeros((0, 3))
    pts = np.concatenate([uni, surf])
    labels = union_contains(parts, pts)
    # surface samples are on the closed boundary; rounding must not flip them
    labels[n_uniform:] = True
    frac_in = labels.mean()
    weights = np.where(labels, frac_in, 1.0 - frac_in) / 0.5
    return OccupancySet(pts, labels, weights, n_uniform)


def balanced_indices(occ: OccupancySet, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n indices with each class chosen with probability 1/2."""
    inside = np.flatnonzero(occ.labels)
    outside = np.flatnonzero(~occ.labels)
    if len(inside) == 0 or len(outside) == 0:
        return rng.integers(0, len(occ.labels), size=n)
    pick_in = rng.random(n) < 0.5
    idx = np.empty(n, dtype=np.int64)
    k = int(pick_in.sum())
    idx[pick_in] = inside[rng.integers(0, len(inside), size=k)]
    idx[~pick_in] = outside[rng.integers(0, len(outside), size=n - k)]
    return idx


def balanced_weights(occ: OccupancySet, idx: np.ndarray) -> np.ndarray:
    if occ.labels.all() or not occ.labels.any():
        return np.ones(len(idx))
    return occ.weights[idx]


# --- manifest ---------------------------------------------------------------------

@dataclass
class DatasetManifest:
    records: dict  # split -> list[ObjectRecord]
    vocabulary: tuple = VOCABULARY
    stats: dict = field(default_factory=dict)  # name -> AttributeStats ("bbox" plus ATTRIBUTES)
    codebooks: dict = field(default_factory=dict)  # attribute -> ClusterCodebook
    meta: dict = field(default_factory=dict)

    @property
    def end_id(self) -> int:
        return len(self.vocabulary) - 1

    def split(self, name: str) -> list:
        if name not in self.records:
            raise KeyError(f"unknown split {name!r}")
        return self.records[name]

    def all_records(self) -> Iterable[ObjectRecord]:
        for s in SPLITS:
            yield from self.records.get(s, [])

    def find(self, record_id: str) -> ObjectRecord:
        for r in self.all_records():
            if r.id == record_id:
                return r
        raise KeyError(f"no record with id {record_id!r}")


def fit_statistics(records: Sequence[ObjectRecord], n_clusters: int = 20, rng=None) -> tuple:
    """Normalization ranges and k-means codebooks from training records."""
    rng = rng if rng is not None else np.random.default_rng(0)
    stats = {"bbox": AttributeStats.fit([np.concatenate([b.translation, b.rotation, b.size])
                                         for b in (r.bbox for r in records)])}
    codebooks = {}
    for name in ATTRIBUTES:
        vals = np.array([part_attributes(p)[name] for r in records for p in r.parts])
        stats[name] = AttributeStats.fit(vals)
        normed = stats[name].normalize(vals)
        k = n_clusters
        if len(normed) < k:
            # tiny datasets: pad with repeats so the codebook keeps its width
            normed = np.concatenate([normed] * (k // len(normed) + 1))
        codebooks[name] = fit_kmeans(normed, k=k, rng=rng, name=name)
    return stats, codebooks


def build_dataset(
    counts: dict | None = None,
    categories: Sequence[str] = CATEGORIES,
    seed: int = 0,
    style: dict | None = None,
    n_clusters: int = 20,
    max_parts: int = 24,
) -> DatasetManifest:
    """Generate train/val/test records; every record gets its own derived seed."""
    counts = counts or {"train": 2000, "val": 200, "test": 200}
    records = {s: [] for s in SPLITS}
    for ci, cat in enumerate(categories):
        if cat not in CATEGORIES:
            raise ValueError(f"unknown category {cat!r}")
        for si, split in enumerate(SPLITS):
            for i in range(counts.get(split, 0)):
                rng = np.random.default_rng([seed, CATEGORIES.index(cat), si, i])
                rec = generate_object(cat, rng, (style or {}).get(cat), id=f"{cat}-{split}-{i:05d}")
                check_record(rec, max_parts)
                records[split].append(rec)
    stats, codebooks = {}, {}
    if records["train"]:
        stats, codebooks = fit_statistics(records["train"], n_clusters, np.random.default_rng([seed, 99]))
    meta = {"seed": seed, "categories": list(categories), "counts": dict(counts), "n_clusters": n_clusters}
    return DatasetManifest(records, VOCABULARY, stats, codebooks, meta)


# --- serialization ------------------------------------------------------------------

def _fmt(obj) -> str:
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError("non-finite float cannot be serialized")
        s = format(x, ".17g")
        if not any(c in s for c in ".en"):
            s += ".0"
        return s
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """JSON text with every float written with 17 significant digits."""
    return _fmt(obj)


def _box_dict(b: Box) -> dict:
    return {"size": list(b.size), "translation": list(b.translation), "rotation6d": list(b.rotation)}


def record_to_dict(r: ObjectRecord) -> dict:
    d = {
        "id": r.id,
        "category": r.category,
        "bbox": _box_dict(r.bbox),
        "parts": [{"label": p.label, **_box_dict(p)} for p in r.parts],
        "description": r.description,
    }
    if r.truncated:
        d["truncated"] = True
    return d


def record_from_dict(d: dict) -> ObjectRecord:
    b = d["bbox"]
    bbox = BoundingBox(b["size"], b["translation"], b["rotation6d"])
    parts = tuple(Part(p["label"], p["size"], p["translation"], p["rotation6d"]) for p in d["parts"])
    return ObjectRecord(str(d["id"]), d["category"], bbox, parts, d.get("description", ""),
                        bool(d.get("truncated", False)))


def write_records(path, records: Iterable[ObjectRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps(record_to_dict(r)) + "\n")


def read_records(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(record_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise DatasetFormatError(f"malformed record: {e}", str(path), n) from e
    return out


RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"


def save_dataset(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_records(path / RECORDS_FILE, manifest.all_records())
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "vocabulary": list(manifest.vocabulary),
        "stats": {k: v.to_dict() for k, v in manifest.stats.items()},
        "codebooks": {k: v.to_dict() for k, v in manifest.codebooks.items()},
        "splits": {s: [r.id for r in manifest.records.get(s, [])] for s in SPLITS},
        "meta": manifest.meta,
    }
    (path / MANIFEST_FILE).write_text(dumps(header) + "\n", encoding="utf-8")


def load_dataset(path) -> DatasetManifest:
    path = Path(path)
    mpath = path / MANIFEST_FILE
    try:
        header = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise DatasetFormatError(f"malformed manifest: {e}", str(mpath)) from e
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not a partgen dataset manifest", str(mpath))
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header.get('version')} (expected {FORMAT_VERSION})", str(mpath))
    by_id = {r.id: r for r in read_records(path / RECORDS_FILE)}
    records = {}
    for s in SPLITS:
        ids = header["splits"].get(s, [])
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DatasetFormatError(f"split {s} references missing record {missing[0]!r}", str(mpath))
        records[s] = [by_id[i] for i in ids]
    vocab = tuple(header["vocabulary"])
    for r in by_id.values():
        for p in r.parts:
            if p.label >= len(vocab):
                raise DatasetFormatError(f"record {r.id} uses label {p.label} outside the vocabulary", str(mpath))
    return DatasetManifest(
        records,
        vocab,
        {k: AttributeStats.from_dict(v) for k, v in header["stats"].items()},
        {k: ClusterCodebook.from_dict(v) for k, v in header["codebooks"].items()},
        header.get("meta", {}),
    )


def manifest_hash(path) -> str:
    """sha256 over the manifest and record files of a saved dataset."""
    h = hashlib.sha256()
    for name in (MANIFEST_FILE, RECORDS_FILE):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()
