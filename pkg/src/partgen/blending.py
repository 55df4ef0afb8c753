"""Blending network: a cross-attention occupancy decoder over part embeddings.

Every query point attends only to the part tokens, never to other points,
so its prediction does not depend on which other points share the batch.
Parts and queries live in the object's unit frame (bbox mapped into
[-1, 1]^3, see ``dataset.to_unit_frame``).
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import VOCABULARY, balanced_indices, balanced_weights, dumps, from_unit_frame, make_occupancy_pairs, to_unit_frame
from .geometry import Box
from .layers import CrossAttentionLayer, PartEncoder, positional_encode

# probabilities are clamped to [P_CLAMP, 1 - P_CLAMP] inside the loss
P_CLAMP = 1e-7
_LOGIT_CLAMP = math.log((1 - P_CLAMP) / P_CLAMP)


class TrainingError(RuntimeError):
    pass


@dataclass
class BlenderConfig:
    n_labels: int = len(VOCABULARY)
    embed_dim: int = 64
    layers: int = 4
    heads: int = 8
    qkv_dim: int = 72
    mlp_dim: int = 1024
    n_freqs: int = 32
    point_freqs: int = 10
    concat_dim: int = 512
    resolution: int = 128
    threshold: float = 0.5

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v <= 0:
                raise ValueError(f"{k} must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @classmethod
    def micro(cls, **kw) -> "BlenderConfig":
        base = dict(embed_dim=8, layers=1, heads=2, qkv_dim=8, mlp_dim=16, n_freqs=4, point_freqs=4, concat_dim=16)
        base.update(kw)
        return cls(**base)


def part_tensors(parts, dtype=torch.float32) -> tuple:
    """(labels (P,), attrs (P, 12)) for parts already in the unit frame."""
    labels = torch.as_tensor([p.label for p in parts], dtype=torch.long)
    attrs = torch.as_tensor(
        np.array([np.concatenate([p.translation, p.rotation, p.size]) for p in parts]), dtype=dtype
    )
    return labels, attrs


class BlendingNetwork(nn.Module):
    def __init__(self, cfg: BlenderConfig):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        self.part_encoder = PartEncoder(cfg.n_labels, E, cfg.n_freqs, cfg.concat_dim)
        self.point_proj = nn.Linear(2 * cfg.point_freqs * 3, E)
        self.layers = nn.ModuleList(
            CrossAttentionLayer(E, cfg.heads, cfg.qkv_dim, cfg.mlp_dim) for _ in range(cfg.layers)
        )
        self.out = nn.Linear(E, 1)

    def forward(self, labels, attrs, queries, mask=None) -> torch.Tensor:
        """Occupancy logits (B, Q) for labels (B, P), attrs (B, P, 12), queries (B, Q, 3)."""
        ctx = self.part_encoder(labels, attrs[..., 0:3], attrs[..., 3:9], attrs[..., 9:12])
        x = self.point_proj(positional_encode(0.5 * queries, self.cfg.point_freqs))
        for layer in self.layers:
            x = layer(x, ctx, mask)
        return self.out(x).squeeze(-1)


@torch.no_grad()
def occupancy_forward(model: BlendingNetwork, parts, queries, chunk: int = 32768) -> np.ndarray:
    """Occupancy probabilities for (Q, 3) unit-frame queries given unit-frame parts."""
    if len(parts) == 0:
        raise ValueError("occupancy of an empty part list is undefined")
    dtype = next(model.parameters()).dtype
    labels, attrs = part_tensors(parts, dtype)
    q = torch.as_tensor(np.asarray(queries), dtype=dtype)
    out = []
    for i in range(0, len(q), chunk):
        out.append(torch.sigmoid(model(labels[None], attrs[None], q[None, i:i + chunk]))[0])
    return torch.cat(out).double().numpy() if out else np.zeros(0)


def weighted_bce(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Importance-weighted binary cross-entropy, mean over all entries."""
    z = logits.clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
    loss = F.binary_cross_entropy_with_logits(z, labels.to(z.dtype), reduction="none")
    return (weights * loss).mean()


@dataclass
class BlenderTrainConfig:
    steps: int = 3000
    batch_size: int = 8
    n_points: int = 2048
    lr: float = 1e-4
    weight_decay: float = 0.0
    n_uniform: int = 20_000
    n_surface: int = 4_000
    val_every: int = 200
    seed: int = 0


class _Object:
    __slots__ = ("record", "parts", "labels", "attrs")

    def __init__(self, record, dtype):
        self.record = record
        self.parts = to_unit_frame(record)[0]
        self.labels, self.attrs = part_tensors(self.parts, dtype)


def _pad_parts(objs, dtype):
    P = max(len(o.parts) for o in objs)
    B = len(objs)
    labels = torch.zeros(B, P, dtype=torch.long)
    attrs = torch.zeros(B, P, 12, dtype=dtype)
    mask = torch.zeros(B, P, dtype=torch.bool)
    for i, o in enumerate(objs):
        n = len(o.parts)
        labels[i, :n], attrs[i, :n], mask[i, :n] = o.labels, o.attrs, True
    return labels, attrs, mask


class BlenderTrainer:
    def __init__(self, model: BlendingNetwork, train_records, val_records, tcfg: BlenderTrainConfig,
                 manifest_hash: str = ""):
        self.model = model
        self.tcfg = tcfg
        self.manifest_hash = manifest_hash
        dtype = next(model.parameters()).dtype
        self.dtype = dtype
        self.train = [_Object(r, dtype) for r in train_records]
        if not self.train:
            raise TrainingError("no training records")
        val = [_Object(r, dtype) for r in (val_records or train_records)]
        self.opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        self.rng = np.random.default_rng([tcfg.seed, 11])
        self.step = 0
        self.best_val = math.inf
        self.best_step = -1
        self.best_state = None
        self.log: list = []
        # fixed validation draws so the metric is exactly reproducible
        vr = np.random.default_rng([tcfg.seed, 12])
        self._val = [self._draw(o, vr) for o in val]

    def _draw(self, obj: _Object, rng):
        occ = make_occupancy_pairs(obj.record, self.tcfg.n_uniform, self.tcfg.n_surface, rng, parts_unit=obj.parts)
        idx = balanced_indices(occ, self.tcfg.n_points, rng)
        return (
            obj,
            torch.as_tensor(occ.points[idx], dtype=self.dtype),
            torch.as_tensor(occ.labels[idx]),
            torch.as_tensor(balanced_weights(occ, idx), dtype=self.dtype),
        )

    def _loss(self, draws) -> torch.Tensor:
        labels, attrs, mask = _pad_parts([d[0] for d in draws], self.dtype)
        q = torch.stack([d[1] for d in draws])
        y = torch.stack([d[2] for d in draws])
        w = torch.stack([d[3] for d in draws])
        return weighted_bce(self.model(labels, attrs, q, mask), y, w)

    @torch.no_grad()
    def validate(self) -> float:
        self.model.eval()
        total = 0.0
        for i in range(0, len(self._val), 8):
            chunk = self._val[i:i + 8]
            total += float(self._loss(chunk)) * len(chunk)
        return total / len(self._val)

    def _record_validation(self):
        v = self.validate()
        if v < self.best_val:
            self.best_val, self.best_step = v, self.step
            self.best_state = copy.deepcopy(self.model.state_dict())
        return v

    def train_step(self) -> dict:
        self.model.train()
        idx = self.rng.integers(0, len(self.train), size=self.tcfg.batch_size)
        loss = self._loss([self._draw(self.train[i], self.rng) for i in idx])
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {float(loss.detach())} at step {self.step + 1}; records "
                f"{[self.train[i].record.id for i in idx][:8]}"
            )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step += 1
        return {"step": self.step, "loss": float(loss.detach())}

    def fit(self, steps: int | None = None, log_file=None) -> "BlenderTrainer":
        end = self.step + (steps if steps is not None else self.tcfg.steps)
        if self.step == 0 and not self.log:
            self._emit({"step": 0, "val_bce": self._record_validation()}, log_file)
        while self.step < end:
            entry = self.train_step()
            if self.step % self.tcfg.val_every == 0 or self.step == end:
                entry["val_bce"] = self._record_validation()
            self._emit(entry, log_file)
        return self

    def _emit(self, entry, log_file):
        self.log.append(entry)
        if log_file is not None:
            log_file.write(dumps(entry) + "\n")
            log_file.flush()

    def best_model(self) -> BlendingNetwork:
        m = copy.deepcopy(self.model)
        if self.best_state is not None:
            m.load_state_dict(self.best_state)
        return m

    def checkpoint_payload(self, best: bool) -> dict:
        return {
            "config": asdict(self.model.cfg),
            "train_config": asdict(self.tcfg),
            "model": self.best_state if (best and self.best_state is not None) else self.model.state_dict(),
            "optimizer": None if best else self.opt.state_dict(),
            "manifest_hash": self.manifest_hash,
            "step": self.best_step if best else self.step,
            "best_val": self.best_val,
            "best_step": self.best_step,
            "best_state": None if best else self.best_state,
            "rng": None if best else {"data": self.rng.bit_generator.state},
            "n_log": len(self.log),
        }

    def restore(self, ckpt: dict) -> None:
        if ckpt.get("rng") is None or ckpt.get("optimizer") is None:
            raise TrainingError("checkpoint has no optimizer/RNG state; resume needs a 'last' checkpoint")
        self.model.load_state_dict(ckpt["model"])
        self.opt.load_state_dict(ckpt["optimizer"])
        self.rng.bit_generator.state = ckpt["rng"]["data"]
        self.step = ckpt["step"]
        self.best_val = ckpt["best_val"]
        self.best_step = ckpt["best_step"]
        self.best_state = ckpt["best_state"]
        self.log = [None] * ckpt.get("n_log", 0)


def build_blender(cfg: BlenderConfig, seed: int = 0) -> BlendingNetwork:
    torch.manual_seed(seed)
    return BlendingNetwork(cfg)


def load_blender(ckpt: dict) -> BlendingNetwork:
    model = BlendingNetwork(BlenderConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


# --- meshes -----------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex indices")

    def area(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the triangles."""
        if self.is_empty:
            raise ValueError("cannot sample an empty mesh")
        a = self.area()
        tri = rng.choice(len(a), size=n, p=a / a.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        p = self.vertices[self.faces[tri]]
        return p[:, 0] + u[:, None] * (p[:, 1] - p[:, 0]) + v[:, None] * (p[:, 2] - p[:, 0])

    def edge_face_counts(self) -> np.ndarray:
        """How many faces share each undirected edge."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for v in mesh.vertices:
            f.write("v {} {} {}\n".format(*(format(float(c), ".17g") for c in v)))
        for t in mesh.faces:
            f.write("f {} {} {}\n".format(*(int(i) + 1 for i in t)))


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                    for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as e:
                raise ValueError(f"{path}:{n}: malformed OBJ line") from e
    mesh = TriangleMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    mesh.validate()
    return mesh


def marching_cubes(values: np.ndarray, level: float = 0.5, lo: float = -1.0, hi: float = 1.0) -> TriangleMesh:
    """Isosurface of a scalar grid sampled at linspace(lo, hi, R) along each axis.

    Values above ``level`` are inside. Returns an empty mesh when the grid
    never crosses the level.
    """
    from skimage.measure import marching_cubes as _mc

    values = np.asarray(values, dtype=np.float64)
    if values.min() >= level or values.max() <= level:
        return TriangleMesh.empty()
    step = (hi - lo) / (values.shape[0] - 1)
    verts, faces, _, _ = _mc(values, level=level, spacing=(step, step, step), allow_degenerate=False)
    # skimage orients normals toward increasing values; flip so they point outward
    faces = faces[:, ::-1]
    mesh = TriangleMesh(verts + lo, np.ascontiguousarray(faces, dtype=np.int64))
    mesh.validate()
    return mesh


def grid_points(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    ax = np.linspace(lo, hi, resolution)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def occupancy_grid(model: BlendingNetwork, parts_unit, resolution: int = 128, chunk: int = 32768) -> np.ndarray:
    probs = occupancy_forward(model, parts_unit, grid_points(resolution), chunk)
    return probs.reshape(resolution, resolution, resolution)


def extract_mesh(model: BlendingNetwork, record, resolution: int | None = None, threshold: float | None = None) -> TriangleMesh:
    """Mesh of the blended occupancy of ``record``'s parts, in world units."""
    resolution = resolution or model.cfg.resolution
    threshold = model.cfg.threshold if threshold is None else threshold
    parts, frame = to_unit_frame(record)
    mesh = marching_cubes(occupancy_grid(model, parts, resolution), threshold)
    if mesh.is_empty:
        return mesh
    return TriangleMesh(from_unit_frame(mesh.vertices, frame), mesh.faces)


GRID_MAGIC = b"PARTGEN-GRID 1\n"


def write_grid(path, values: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Raw float32 grid with a one-line text header (dims and bounds)."""
    values = np.asarray(values, dtype="<f4")
    header = GRID_MAGIC + dumps({"dims": list(values.shape), "lo": float(lo), "hi": float(hi)}).encode() + b"\n"
    Path(path).write_bytes(header + values.tobytes(order="C"))


def read_grid(path) -> tuple:
    import json

    data = Path(path).read_bytes()
    if not data.startswith(GRID_MAGIC):
        raise ValueError(f"{path}: not a partgen grid file")
    rest = data[len(GRID_MAGIC):]
    nl = rest.index(b"\n")
    meta = json.loads(rest[:nl])
    values = np.frombuffer(rest[nl + 1:], dtype="<f4").reshape(meta["dims"])
    return values, meta["lo"], meta["hi"]
