"""Training the object generator with teacher forcing and one-step scheduled sampling.

A teacher-forcing item permutes an object's parts, keeps a random prefix of
length M in [0, N] and scores part M + 1 (END when M = N). A scheduled
sampling item keeps M in [0, N - 2] ground-truth parts, lets the model
sample one more part, and scores ground-truth part M + 2 given both.
"""
from __future__ import annotations

import copy
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .dataset import dumps
from .generator import N_ATTR, GeneratorConfig, Normalizer, ObjectGenerator


class TrainingError(RuntimeError):
    pass


@dataclass
class GeneratorTrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    ss_ratio: float = 0.5
    lr_schedule: str = "constant"  # or "cosine" (decays to lr_min at `steps`)
    lr_min: float = 1e-6
    val_every: int = 200
    val_draws: int = 4
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0.0 <= self.ss_ratio <= 1.0:
            raise ValueError("ss_ratio must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        t = min(step / max(self.steps, 1), 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * t))


@dataclass
class PreparedRecord:
    id: str
    bbox: np.ndarray
    labels: np.ndarray
    attrs: np.ndarray
    clusters: np.ndarray
    condition: np.ndarray | None = None

    @property
    def n_parts(self) -> int:
        return len(self.labels)


def prepare_records(records, normalizer: Normalizer, embedder=None) -> list:
    out = []
    for r in records:
        labels, attrs, clusters = normalizer.part_vectors(r.parts)
        cond = embedder(r.description) if embedder is not None else None
        out.append(PreparedRecord(r.id, normalizer.bbox_vector(r.bbox), labels, attrs, clusters, cond))
    return out


def draw_teacher_forcing(rec: PreparedRecord, rng: np.random.Generator) -> tuple:
    """(context indices, target index or None for END)."""
    n = rec.n_parts
    perm = rng.permutation(n)
    m = int(rng.integers(0, n + 1))
    return perm[:m], (int(perm[m]) if m < n else None)


def draw_scheduled(rec: PreparedRecord, rng: np.random.Generator) -> tuple:
    """(ground-truth context indices, target index); the sampled token goes in between."""
    n = rec.n_parts
    if n < 2:
        raise ValueError("scheduled sampling needs at least two parts")
    perm = rng.permutation(n)
    m = int(rng.integers(0, n - 1))
    return perm[:m], int(perm[m + 1])


@dataclass
class Batch:
    bbox: torch.Tensor
    labels: torch.Tensor
    attrs: torch.Tensor
    mask: torch.Tensor
    sampled: torch.Tensor
    lengths: list
    target_labels: torch.Tensor
    target_attrs: torch.Tensor
    target_clusters: torch.Tensor
    condition: torch.Tensor | None = None
    ids: list = field(default_factory=list)


def collate(items, end_id: int, dtype=torch.float32, extra_slots: int = 0) -> Batch:
    """Pad a list of (record, context indices, target index | None) into tensors."""
    B = len(items)
    width = max([len(c) for _, c, _ in items] + [0]) + extra_slots
    labels = np.zeros((B, width), dtype=np.int64)
    attrs = np.zeros((B, width, N_ATTR))
    mask = np.zeros((B, width), dtype=bool)
    t_labels = np.full(B, end_id, dtype=np.int64)
    t_attrs = np.zeros((B, N_ATTR))
    t_clusters = np.zeros((B, 3), dtype=np.int64)
    bbox = np.stack([rec.bbox for rec, _, _ in items])
    for i, (rec, ctx, tgt) in enumerate(items):
        k = len(ctx)
        labels[i, :k] = rec.labels[ctx]
        attrs[i, :k] = rec.attrs[ctx]
        mask[i, :k] = True
        if tgt is not None:
            t_labels[i] = rec.labels[tgt]
            t_attrs[i] = rec.attrs[tgt]
            t_clusters[i] = rec.clusters[tgt]
    cond = None
    if items and items[0][0].condition is not None:
        cond = torch.as_tensor(np.stack([rec.condition for rec, _, _ in items]), dtype=dtype)[:, None]
    return Batch(
        torch.as_tensor(bbox, dtype=dtype),
        torch.as_tensor(labels),
        torch.as_tensor(attrs, dtype=dtype),
        torch.as_tensor(mask),
        torch.zeros(B, width, dtype=torch.bool),
        [len(c) for _, c, _ in items],
        torch.as_tensor(t_labels),
        torch.as_tensor(t_attrs, dtype=dtype),
        torch.as_tensor(t_clusters),
        cond,
        [rec.id for rec, _, _ in items],
    )


def batch_log_prob(model: ObjectGenerator, b: Batch) -> torch.Tensor:
    F = model.forward_features(b.bbox, b.labels, b.attrs, b.mask, b.condition)
    return model.log_prob(F, b.target_labels, b.target_attrs, b.target_clusters)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


def teacher_forcing_loss(model: ObjectGenerator, records, rng: np.random.Generator) -> torch.Tensor:
    """Mean negative log-likelihood over one teacher-forced draw per record."""
    items = [(rec, *draw_teacher_forcing(rec, rng)) for rec in records]
    b = collate(items, model.cfg.end_id, _dtype(model))
    return -batch_log_prob(model, b).mean()


def scheduled_sampling_batch(model: ObjectGenerator, records, rng: np.random.Generator,
                             counters: Counter | None = None) -> Batch:
    """Build a batch whose contexts hold exactly one model-sampled part each.

    Records with fewer than two parts fall back to teacher-forced items.
    """
    items, use_ss = [], []
    for rec in records:
        if rec.n_parts >= 2:
            items.append((rec, *draw_scheduled(rec, rng)))
            use_ss.append(True)
        else:
            items.append((rec, *draw_teacher_forcing(rec, rng)))
            use_ss.append(False)
    b = collate(items, model.cfg.end_id, _dtype(model), extra_slots=1)
    gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    with torch.no_grad():
        F0 = model.forward_features(b.bbox, b.labels, b.attrs, b.mask, b.condition)
        lab, x, _ = model.sample_attributes(F0, gen, forbid_end=True)
    for i, ss in enumerate(use_ss):
        if not ss:
            continue
        k = b.lengths[i]
        b.labels[i, k] = lab[i]
        b.attrs[i, k] = x[i]
        b.mask[i, k] = True
        b.sampled[i, k] = True
        b.lengths[i] = k + 1
    if counters is not None:
        per_item = b.sampled.sum(dim=1)
        for i, ss in enumerate(use_ss):
            counters["ss_items" if ss else "ss_fallback_items"] += 1
            counters[f"ss_sampled_tokens={int(per_item[i])}" if ss else "tf_sampled_tokens=0"] += 1
    return b


def scheduled_sampling_loss(model: ObjectGenerator, records, rng: np.random.Generator,
                            counters: Counter | None = None) -> torch.Tensor:
    b = scheduled_sampling_batch(model, records, rng, counters)
    return -batch_log_prob(model, b).mean()


@torch.no_grad()
def evaluate_nll(model: ObjectGenerator, records, seed: int = 0, draws: int = 4, batch_size: int = 256) -> float:
    """Mean teacher-forcing NLL with a fixed draw sequence (reproducible)."""
    rng = np.random.default_rng([seed, 3])
    items = [(rec, *draw_teacher_forcing(rec, rng)) for _ in range(draws) for rec in records]
    total, count = 0.0, 0
    for i in range(0, len(items), batch_size):
        b = collate(items[i:i + batch_size], model.cfg.end_id, _dtype(model))
        lp = batch_log_prob(model, b)
        total += float(-lp.sum())
        count += len(lp)
    return total / max(count, 1)


class GeneratorTrainer:
    """Holds model, optimizer and RNG streams; ``fit`` runs and logs steps."""

    def __init__(self, model: ObjectGenerator, normalizer: Normalizer, train_records, val_records,
                 tcfg: GeneratorTrainConfig, embedder=None, manifest_hash: str = ""):
        self.model = model
        self.normalizer = normalizer
        self.tcfg = tcfg
        self.embedder = embedder
        self.manifest_hash = manifest_hash
        self.train = prepare_records(train_records, normalizer, embedder)
        self.val = prepare_records(val_records, normalizer, embedder) if val_records else self.train
        if not self.train:
            raise TrainingError("no training records")
        self.opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=tcfg.betas, eps=tcfg.eps,
                                    weight_decay=tcfg.weight_decay)
        # separate streams so the schedule choice never perturbs data draws
        self.data_rng = np.random.default_rng([tcfg.seed, 1])
        self.schedule_rng = np.random.default_rng([tcfg.seed, 2])
        self.step = 0
        self.best_val = math.inf
        self.best_step = -1
        self.best_state = None
        self.log: list = []
        self.counters: Counter = Counter()

    def validate(self) -> float:
        self.model.eval()
        return evaluate_nll(self.model, self.val, seed=self.tcfg.seed, draws=self.tcfg.val_draws)

    def _record_validation(self):
        v = self.validate()
        if v < self.best_val:
            self.best_val, self.best_step = v, self.step
            self.best_state = copy.deepcopy(self.model.state_dict())
        return v

    def train_step(self) -> dict:
        self.model.train()
        idx = self.data_rng.integers(0, len(self.train), size=self.tcfg.batch_size)
        recs = [self.train[i] for i in idx]
        use_ss = self.tcfg.ss_ratio > 0 and self.schedule_rng.random() < self.tcfg.ss_ratio
        if use_ss:
            loss = scheduled_sampling_loss(self.model, recs, self.data_rng, self.counters)
        else:
            loss = teacher_forcing_loss(self.model, recs, self.data_rng)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {float(loss.detach())} at step {self.step + 1}; records {[r.id for r in recs][:8]}"
            )
        for g in self.opt.param_groups:
            g["lr"] = self.tcfg.lr_at(self.step)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step += 1
        self.counters["ss_steps" if use_ss else "tf_steps"] += 1
        return {"step": self.step, "loss": float(loss.detach()), "kind": "ss" if use_ss else "tf"}

    def fit(self, steps: int | None = None, log_file=None) -> "GeneratorTrainer":
        end = self.step + (steps if steps is not None else self.tcfg.steps)
        if self.step == 0 and not self.log:
            self._emit({"step": 0, "val_nll": self._record_validation()}, log_file)
        while self.step < end:
            entry = self.train_step()
            if self.step % self.tcfg.val_every == 0 or self.step == end:
                entry["val_nll"] = self._record_validation()
            self._emit(entry, log_file)
        return self

    def _emit(self, entry: dict, log_file):
        self.log.append(entry)
        if log_file is not None:
            log_file.write(dumps(entry) + "\n")
            log_file.flush()

    def best_model(self) -> ObjectGenerator:
        m = copy.deepcopy(self.model)
        if self.best_state is not None:
            m.load_state_dict(self.best_state)
        return m

    # -- persistence -------------------------------------------------------------
    def checkpoint_payload(self, best: bool) -> dict:
        return {
            "config": asdict(self.model.cfg),
            "train_config": asdict(self.tcfg),
            "model": self.best_state if (best and self.best_state is not None) else self.model.state_dict(),
            "optimizer": None if best else self.opt.state_dict(),
            "normalizer": self.normalizer.to_dict(),
            "manifest_hash": self.manifest_hash,
            "condition": self.embedder.to_dict() if self.embedder is not None else None,
            "step": self.best_step if best else self.step,
            "best_val": self.best_val,
            "best_step": self.best_step,
            "best_state": None if best else self.best_state,
            "rng": None if best else {
                "data": self.data_rng.bit_generator.state,
                "schedule": self.schedule_rng.bit_generator.state,
            },
            "counters": dict(self.counters),
            "n_log": len(self.log),
        }

    def restore(self, ckpt: dict) -> None:
        """Continue from a 'last' checkpoint written by ``checkpoint_payload(best=False)``."""
        if ckpt.get("rng") is None or ckpt.get("optimizer") is None:
            raise TrainingError("checkpoint has no optimizer/RNG state; resume needs a 'last' checkpoint")
        self.model.load_state_dict(ckpt["model"])
        self.opt.load_state_dict(ckpt["optimizer"])
        self.data_rng.bit_generator.state = ckpt["rng"]["data"]
        self.schedule_rng.bit_generator.state = ckpt["rng"]["schedule"]
        self.step = ckpt["step"]
        self.best_val = ckpt["best_val"]
        self.best_step = ckpt["best_step"]
        self.best_state = ckpt["best_state"]
        self.counters = Counter(ckpt.get("counters", {}))
        self.log = [None] * ckpt.get("n_log", 0)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> ObjectGenerator:
    torch.manual_seed(seed)
    return ObjectGenerator(cfg)


def load_generator(ckpt: dict) -> tuple:
    """(model, normalizer, embedder) from a generator checkpoint dict."""
    from .conditioning import embedder_from_dict

    model = ObjectGenerator(GeneratorConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, Normalizer.from_dict(ckpt["normalizer"]), embedder_from_dict(ckpt.get("condition"))
