"""The object generator: part encoder, set transformer and chained attribute heads.

Attributes are handled in normalized space as one 12-vector per part laid
out as (translation 3, rotation 6, size 3). A part is scored as

    log p(label) + sum over (translation, rotation, size) of
        log p(cluster) + log MoL(value | cluster)

where each head sees the feature vector F plus the embeddings of every
attribute that precedes it in that order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .dataset import ATTRIBUTE_DIMS, ATTRIBUTES, END_ID, VOCABULARY, AttributeStats, ObjectRecord, part_attributes
from .distributions import (
    ClusterCodebook,
    MixtureOfLogisticsParams,
    categorical_nll,
    categorical_sample,
    mol_log_prob,
    mol_sample,
)
from .geometry import IDENTITY_6D, Box, DegenerateRotationError, Part, matrix_to_rot6d, rot6d_to_matrix
from .layers import MLP, EncoderLayer, PartEncoder

SLICES = {"translation": slice(0, 3), "rotation": slice(3, 9), "size": slice(9, 12)}
N_ATTR = 12
MIN_SIZE = 1e-4


@dataclass
class GeneratorConfig:
    n_labels: int = len(VOCABULARY)  # includes the END label
    embed_dim: int = 64
    layers: int = 4
    heads: int = 8
    qkv_dim: int = 72
    mlp_dim: int = 1024
    n_freqs: int = 32
    n_mix: int = 10
    n_clusters: int = 20
    head_hidden: int = 128
    head_out: int = 64
    concat_dim: int = 512
    cluster_embed_dim: int = 64
    condition_dim: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "condition_dim" and v <= 0:
                raise ValueError(f"{k} must be positive")
        if self.condition_dim < 0:
            raise ValueError("condition_dim must be >= 0")

    @property
    def end_id(self) -> int:
        return self.n_labels - 1

    @property
    def bbox_label(self) -> int:
        return self.n_labels

    @classmethod
    def desk(cls, **kw) -> "GeneratorConfig":
        """A CPU-sized network. Six octaves instead of 32: the high octaves hash exact
        attribute values, which memorizes the training set and generalizes poorly
        to sampled parts at desk data scales."""
        base = dict(layers=2, mlp_dim=256, n_freqs=6)
        base.update(kw)
        return cls(**base)

    @classmethod
    def micro(cls, **kw) -> "GeneratorConfig":
        """A tiny network for gradient checks and smoke tests."""
        base = dict(embed_dim=8, layers=1, heads=2, qkv_dim=8, mlp_dim=16, n_mix=2, n_clusters=3,
                    head_hidden=16, head_out=8, concat_dim=16, cluster_embed_dim=4, n_freqs=4)
        base.update(kw)
        return cls(**base)


class Normalizer:
    """Maps records to normalized tensors and back, using dataset statistics."""

    def __init__(self, stats: dict, codebooks: dict):
        self.stats = stats
        self.codebooks = codebooks

    @classmethod
    def from_manifest(cls, manifest) -> "Normalizer":
        return cls(manifest.stats, manifest.codebooks)

    def to_dict(self) -> dict:
        return {
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
            "codebooks": {k: v.to_dict() for k, v in self.codebooks.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(
            {k: AttributeStats.from_dict(v) for k, v in d["stats"].items()},
            {k: ClusterCodebook.from_dict(v) for k, v in d["codebooks"].items()},
        )

    def bbox_vector(self, bbox: Box) -> np.ndarray:
        raw = np.concatenate([bbox.translation, bbox.rotation, bbox.size])
        return self.stats["bbox"].normalize(raw)

    def part_vectors(self, parts) -> tuple:
        """(labels (N,), attrs (N, 12), clusters (N, 3)) for a list of parts."""
        n = len(parts)
        labels = np.array([p.label for p in parts], dtype=np.int64)
        attrs = np.zeros((n, N_ATTR))
        clusters = np.zeros((n, len(ATTRIBUTES)), dtype=np.int64)
        if n == 0:
            return labels, attrs, clusters
        for ai, name in enumerate(ATTRIBUTES):
            vals = self.stats[name].normalize(np.array([part_attributes(p)[name] for p in parts]))
            attrs[:, SLICES[name]] = vals
            clusters[:, ai] = self.codebooks[name].assign(vals)
        return labels, attrs, clusters

    def to_part(self, label: int, attrs) -> Part:
        attrs = np.asarray(attrs, dtype=np.float64)
        t = self.stats["translation"].denormalize(attrs[SLICES["translation"]])
        r = self.stats["rotation"].denormalize(attrs[SLICES["rotation"]])
        s = np.maximum(self.stats["size"].denormalize(attrs[SLICES["size"]]), MIN_SIZE)
        try:
            r = matrix_to_rot6d(rot6d_to_matrix(r))
        except DegenerateRotationError:
            r = np.asarray(IDENTITY_6D)
        return Part(int(label), s, t, r)


class ObjectGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        # one extra label row for the bounding-box token
        self.part_encoder = PartEncoder(cfg.n_labels + 1, E, cfg.n_freqs, cfg.concat_dim)
        self.query = nn.Parameter(torch.randn(E) * 0.02)
        self.condition_proj = nn.Linear(cfg.condition_dim, E) if cfg.condition_dim else None
        self.layers = nn.ModuleList(
            EncoderLayer(E, cfg.heads, cfg.qkv_dim, cfg.mlp_dim) for _ in range(cfg.layers)
        )
        self.label_head = nn.Linear(E, cfg.n_labels)

        pe = lambda d: 2 * cfg.n_freqs * d  # noqa: E731
        in_dim = E + E  # F and the label embedding
        self.coarse = nn.ModuleDict()
        self.fine = nn.ModuleDict()
        self.cluster_embedding = nn.ModuleDict()
        for name in ATTRIBUTES:
            d = ATTRIBUTE_DIMS[name]
            self.coarse[name] = nn.Sequential(
                MLP(in_dim, cfg.head_hidden, cfg.head_out), nn.ReLU(), nn.Linear(cfg.head_out, cfg.n_clusters)
            )
            self.cluster_embedding[name] = nn.Embedding(cfg.n_clusters, cfg.cluster_embed_dim)
            self.fine[name] = nn.Sequential(
                MLP(in_dim + cfg.cluster_embed_dim, cfg.head_hidden, cfg.head_out),
                nn.ReLU(),
                nn.Linear(cfg.head_out, (1 + 2 * d) * cfg.n_mix),
            )
            in_dim += pe(d)

    # -- encoder ---------------------------------------------------------------
    def embed_parts(self, labels, attrs):
        return self.part_encoder(
            labels, attrs[..., SLICES["translation"]], attrs[..., SLICES["rotation"]], attrs[..., SLICES["size"]]
        )

    def forward_features(self, bbox, labels, attrs, mask=None, condition=None, condition_mask=None):
        """Feature vector F of shape (B, E).

        bbox: (B, 12); labels: (B, N); attrs: (B, N, 12); mask: (B, N) True
        for real tokens; condition: (B, C, condition_dim) or None.
        """
        B, N = labels.shape
        dev = attrs.device
        z_box = self.embed_parts(torch.full((B,), self.cfg.bbox_label, dtype=torch.long, device=dev), bbox)
        tokens = [self.query.expand(B, 1, -1), z_box[:, None]]
        masks = [torch.ones(B, 2, dtype=torch.bool, device=dev)]
        if condition is not None and condition.shape[1] > 0:
            if self.condition_proj is None:
                raise ValueError("model was built without a condition input")
            tokens.append(self.condition_proj(condition))
            masks.append(condition_mask if condition_mask is not None
                         else torch.ones(condition.shape[:2], dtype=torch.bool, device=dev))
        if N > 0:
            tokens.append(self.embed_parts(labels, attrs))
            masks.append(mask if mask is not None else torch.ones(B, N, dtype=torch.bool, device=dev))
        x = torch.cat(tokens, dim=1)
        m = torch.cat(masks, dim=1)
        for layer in self.layers:
            x = layer(x, m)
        return x[:, 0]

    # -- decoder ---------------------------------------------------------------
    def _mol(self, name, h, cluster):
        raw = self.fine[name](torch.cat([h, self.cluster_embedding[name](cluster)], dim=-1))
        return MixtureOfLogisticsParams.from_flat(raw, ATTRIBUTE_DIMS[name], self.cfg.n_mix)

    def log_prob_terms(self, F, labels, attrs, clusters) -> dict:
        """Per-head log-probabilities, each of shape (B,).

        Attribute terms are zero for END targets.
        """
        terms = {"label": -categorical_nll(self.label_head(F), labels)}
        keep = (labels != self.cfg.end_id).to(F.dtype)
        safe_labels = labels.clamp(max=self.cfg.n_labels - 1)
        h = torch.cat([F, self.part_encoder.label_embedding(safe_labels)], dim=-1)
        for ai, name in enumerate(ATTRIBUTES):
            x = attrs[..., SLICES[name]]
            c = clusters[..., ai]
            terms[f"{name}_coarse"] = -categorical_nll(self.coarse[name](h), c) * keep
            terms[f"{name}_fine"] = mol_log_prob(self._mol(name, h, c), x) * keep
            h = torch.cat([h, self.part_encoder.encode(x)], dim=-1)
        return terms

    def log_prob(self, F, labels, attrs, clusters) -> torch.Tensor:
        return sum(self.log_prob_terms(F, labels, attrs, clusters).values())

    def end_probability(self, F) -> torch.Tensor:
        return torch.softmax(self.label_head(F), dim=-1)[..., self.cfg.end_id]

    @torch.no_grad()
    def sample_attributes(self, F, generator=None, temperature: float = 1.0, forbid_end: bool = False):
        """Sample (labels, attrs, clusters) for a batch of feature vectors."""
        logits = self.label_head(F)
        if forbid_end:
            logits = logits.clone()
            logits[..., self.cfg.end_id] = float("-inf")
        labels = categorical_sample(logits, generator, temperature)
        safe = labels.clamp(max=self.cfg.n_labels - 1)
        h = torch.cat([F, self.part_encoder.label_embedding(safe)], dim=-1)
        attrs = torch.zeros(*F.shape[:-1], N_ATTR, dtype=F.dtype, device=F.device)
        clusters = torch.zeros(*F.shape[:-1], len(ATTRIBUTES), dtype=torch.long, device=F.device)
        for ai, name in enumerate(ATTRIBUTES):
            c = categorical_sample(self.coarse[name](h), generator)
            x = mol_sample(self._mol(name, h, c), generator)
            attrs[..., SLICES[name]] = x
            clusters[..., ai] = c
            h = torch.cat([h, self.part_encoder.encode(x)], dim=-1)
        return labels, attrs, clusters


def record_condition(embedder, record_or_text, dtype=torch.float32):
    """(1, 1, dim) condition tensor from a text embedder, or None."""
    if embedder is None or record_or_text is None:
        return None
    text = record_or_text.description if isinstance(record_or_text, ObjectRecord) else record_or_text
    return torch.as_tensor(embedder(text), dtype=dtype).view(1, 1, -1)


@torch.no_grad()
def generate_parts(
    model: ObjectGenerator,
    normalizer: Normalizer,
    bbox: Box,
    generator: torch.Generator,
    prefix=(),
    condition: torch.Tensor | None = None,
    max_parts: int = 50,
    temperature: float = 1.0,
) -> tuple:
    """Autoregressively extend ``prefix`` until END or ``max_parts``.

    Returns (parts, truncated). Prefix parts are returned as given.
    """
    dtype = next(model.parameters()).dtype
    box = torch.as_tensor(normalizer.bbox_vector(bbox), dtype=dtype)[None]
    parts = list(prefix)
    labels, attrs, _ = normalizer.part_vectors(parts)
    labels = torch.as_tensor(labels)[None]
    attrs = torch.as_tensor(attrs, dtype=dtype)[None]
    while len(parts) < max_parts:
        F = model.forward_features(box, labels, attrs, condition=condition)
        lab, x, _ = model.sample_attributes(F, generator, temperature)
        if int(lab[0]) == model.cfg.end_id:
            return parts, False
        parts.append(normalizer.to_part(int(lab[0]), x[0].double().numpy()))
        # feed back the de-normalized part, as a caller-supplied prefix would be
        l1, a1, _ = normalizer.part_vectors(parts[-1:])
        labels = torch.cat([labels, torch.as_tensor(l1)[None]], dim=1)
        attrs = torch.cat([attrs, torch.as_tensor(a1, dtype=dtype)[None]], dim=1)
    return parts, True
