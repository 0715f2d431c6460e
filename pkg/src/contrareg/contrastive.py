"""Critics, similarity matrices, the multi-modality InfoNCE loss, and the
quarter-turn equivariance constraint folded into it.

All functions operate on torch tensors so gradients flow to the encoders.
A latent batch of M modalities and N tuples is flattened modality-major:
entry ``m * N + k`` holds modality m of tuple k. The positive partners of
anchor i are then at ``(i + m * N) mod (M * N)`` for m in 1..M-1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import c4_inverse
from .image import Image

COSINE_EPS = 1e-8


@dataclass
class CriticSpec:
    """Similarity h(y1, y2) between two representations.

    * ``mse``: -mean((y1 - y2)^2) (or -sum with ``reduction="sum"``);
      global maximum 0 at equality.
    * ``cosine``: <y1, y2> / (|y1| |y2|), in [-1, 1].
    * ``bilinear``: flatten(y1)^T W flatten(y2) with trainable W.
    """

    kind: str = "mse"
    bilinear_weights: torch.Tensor | None = None
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in ("mse", "cosine", "bilinear"):
            raise ValueError(f"unknown critic kind {self.kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if (self.bilinear_weights is not None) != (self.kind == "bilinear"):
            raise ValueError("bilinear_weights must be given exactly for the bilinear critic")

    @staticmethod
    def bilinear(dim: int, seed: int = 0, perturbation: float = 0.01) -> "CriticSpec":
        """Bilinear critic with W initialized near the identity."""
        gen = torch.Generator().manual_seed(seed)
        w = torch.eye(dim, dtype=torch.get_default_dtype())
        w = w + perturbation * torch.randn(dim, dim, generator=gen, dtype=w.dtype)
        return CriticSpec(kind="bilinear", bilinear_weights=torch.nn.Parameter(w))


@dataclass
class LossConfig:
    temperature: float = 0.5
    group: str = "c4"
    modalities: int = 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.group not in ("c4", "trivial"):
            raise ValueError(f"group must be 'c4' or 'trivial', got {self.group!r}")
        if self.modalities < 2:
            raise ValueError("need at least two modalities")


@dataclass
class LatentBatch:
    """M x N stack of representations of identical shape."""

    latents: torch.Tensor  # (M, N, ...)

    def __post_init__(self):
        if self.latents.ndim < 3:
            raise ValueError(f"latents must be (M, N, ...), got shape {tuple(self.latents.shape)}")
        if self.latents.shape[0] < 2:
            raise ValueError("need at least two modalities")
        if self.latents.shape[1] < 2:
            raise ValueError("need at least two tuples per batch")

    @property
    def n_modalities(self) -> int:
        return self.latents.shape[0]

    @property
    def n_tuples(self) -> int:
        return self.latents.shape[1]

    def flattened(self) -> torch.Tensor:
        """(M*N, D) view, modality-major."""
        m, n = self.latents.shape[:2]
        return self.latents.reshape(m * n, -1)

    @staticmethod
    def from_lists(per_modality: list[list[torch.Tensor]]) -> "LatentBatch":
        stacked = torch.stack([torch.stack(mod) for mod in per_modality])
        return LatentBatch(stacked)


def critic_eval(spec: CriticSpec, y1: torch.Tensor, y2: torch.Tensor) -> torch.Tensor:
    """Evaluate the critic on a single pair of representations."""
    if y1.shape != y2.shape:
        raise ValueError(f"shape mismatch {tuple(y1.shape)} vs {tuple(y2.shape)}")
    a = y1.reshape(-1)
    b = y2.reshape(-1)
    if spec.kind == "mse":
        sq = (a - b) ** 2
        return -(sq.mean() if spec.reduction == "mean" else sq.sum())
    if spec.kind == "cosine":
        na = torch.linalg.vector_norm(a)
        nb = torch.linalg.vector_norm(b)
        if float(na) < COSINE_EPS and float(nb) < COSINE_EPS:
            raise ValueError("cosine critic is degenerate: both inputs have (near-)zero norm")
        return (a @ b) / ((na + COSINE_EPS) * (nb + COSINE_EPS))
    w = spec.bilinear_weights
    if w.shape != (a.numel(), a.numel()):
        raise ValueError(f"bilinear weights {tuple(w.shape)} do not match latent size {a.numel()}")
    return a @ w.to(a.dtype) @ b


def similarity_matrix(batch: LatentBatch, spec: CriticSpec, temperature: float) -> torch.Tensor:
    """(MN, MN) matrix with entries h(z_i, z_j) / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = batch.flattened()
    mn, d = z.shape
    if spec.kind == "mse":
        rows = []
        for i in range(mn):
            sq = (z[i].unsqueeze(0) - z) ** 2
            rows.append(sq.mean(dim=1) if spec.reduction == "mean" else sq.sum(dim=1))
        s = -torch.stack(rows)
    elif spec.kind == "cosine":
        norms = torch.linalg.vector_norm(z, dim=1, keepdim=True)
        if bool((norms < COSINE_EPS).all()):
            raise ValueError("cosine critic is degenerate: all latents have (near-)zero norm")
        zn = z / (norms + COSINE_EPS)
        s = zn @ zn.T
    else:
        w = spec.bilinear_weights
        if w.shape != (d, d):
            raise ValueError(f"bilinear weights {tuple(w.shape)} do not match latent size {d}")
        s = z @ w.to(z.dtype) @ z.T
    s = s / temperature
    if not bool(torch.isfinite(s).all()):
        raise ValueError("non-finite similarity entries")
    return s


def _positive_exclusion_masks(m: int, n: int, device) -> tuple[torch.Tensor, torch.Tensor]:
    """Indices of own-tuple entries (self + cross-modal positives) per anchor.

    Returns (positives, excluded) where ``positives[i, m-1]`` is the index of
    anchor i's m-th positive and ``excluded`` is a boolean (MN, MN) mask of
    all own-tuple entries including self.
    """
    mn = m * n
    idx = torch.arange(mn, device=device)
    offsets = torch.arange(1, m + 1, device=device) * n
    own = (idx.unsqueeze(1) + offsets.unsqueeze(0)) % mn  # (MN, M); last column is self
    excluded = torch.zeros(mn, mn, dtype=torch.bool, device=device)
    excluded.scatter_(1, own, True)
    return own[:, : m - 1], excluded


def infonce_from_similarity(s: torch.Tensor, n_modalities: int, n_tuples: int) -> torch.Tensor:
    """InfoNCE over a precomputed similarity matrix.

    Per anchor i and positive p, the denominator ranges over every entry of
    row i except the anchor's own tuple, plus the current positive; the
    excluded entries are masked out rather than subtracted as exponentials.
    Terms are averaged by 1/(MN(M-1)).
    """
    m, n = n_modalities, n_tuples
    mn = m * n
    if s.shape != (mn, mn):
        raise ValueError(f"similarity matrix shape {tuple(s.shape)} != ({mn}, {mn})")
    if n < 2:
        raise ValueError("need at least two tuples per batch")
    if not bool(torch.isfinite(s).all()):
        raise ValueError("non-finite similarity entries")
    positives, excluded = _positive_exclusion_masks(m, n, s.device)
    total = s.new_zeros(())
    neg_inf = torch.tensor(float("-inf"), dtype=s.dtype, device=s.device)
    for col in range(m - 1):
        p = positives[:, col]
        include = ~excluded
        include[torch.arange(mn, device=s.device), p] = True
        masked = torch.where(include, s, neg_inf)
        lse = torch.logsumexp(masked, dim=1)
        pos = s[torch.arange(mn, device=s.device), p]
        total = total + (lse - pos).sum()
    return total / (mn * (m - 1))


def infonce_loss(batch: LatentBatch, spec: CriticSpec, temperature: float) -> torch.Tensor:
    """InfoNCE loss of a latent batch under the given critic and temperature."""
    s = similarity_matrix(batch, spec, temperature)
    return infonce_from_similarity(s, batch.n_modalities, batch.n_tuples)


def uniform_similarity_loss(n_pairs: int) -> float:
    """Closed-form loss value when every similarity is equal (M = 2)."""
    return math.log(2 * n_pairs - 1)


# ---------------------------------------------------------------------------
# Quarter-turn equivariance constraint


def rotate_tensor_c4(x: torch.Tensor, k: int) -> torch.Tensor:
    """Exact quarter-turn of the trailing two (spatial) dimensions."""
    k = int(k) % 4
    if k == 0:
        return x
    return torch.rot90(x, k, dims=(-2, -1))


def equivariant_latent(model, x: torch.Tensor, k: int) -> torch.Tensor:
    """Stabilized output: rotate the input by k quarter turns, run the model,
    rotate the output back to the canonical frame."""
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"input must be square for quarter-turn routing, got {tuple(x.shape)}")
    k = int(k) % 4
    y = model(rotate_tensor_c4(x, k))
    return rotate_tensor_c4(y, c4_inverse(k))


def _patch_to_tensor(img: Image, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.pixels)).to(dtype)


@dataclass
class EncodedBatch:
    """Latents plus the group draws that produced them."""

    batch: LatentBatch
    draws: np.ndarray = field(repr=False)  # (M, N) quarter-turn counts


def encode_batch(models, tuples, config: LossConfig, rng: np.random.Generator) -> EncodedBatch:
    """Run every patch through its modality's model, routing each through an
    independently drawn quarter-turn when the group is enabled.

    ``models`` maps position to a callable on (B, C, H, W) tensors. Elements
    sharing a draw are forwarded together.
    """
    n = len(tuples)
    m = len(models)
    if n < 2:
        raise ValueError("need at least two tuples per batch")
    if any(len(t.patches) != m for t in tuples):
        raise ValueError("every tuple must carry one patch per model")
    if config.group == "c4":
        draws = np.asarray(rng.integers(0, 4, size=(m, n)))
    else:
        draws = np.zeros((m, n), dtype=np.int64)
    per_modality = []
    for mi, model in enumerate(models):
        xs = torch.stack([_patch_to_tensor(t.patches[mi]) for t in tuples])
        if config.group == "c4" and xs.shape[-1] != xs.shape[-2]:
            raise ValueError("quarter-turn constraint requires square patches")
        outs: list[torch.Tensor | None] = [None] * n
        for k in range(4):
            sel = np.flatnonzero(draws[mi] == k)
            if sel.size == 0:
                continue
            sub = xs[torch.from_numpy(sel)]
            y = rotate_tensor_c4(model(rotate_tensor_c4(sub, k)), c4_inverse(k))
            for j, out_idx in enumerate(sel):
                outs[int(out_idx)] = y[j]
        per_modality.append(torch.stack(outs))
    return EncodedBatch(batch=LatentBatch(torch.stack(per_modality)), draws=draws)


def training_loss(models, tuples, spec: CriticSpec, config: LossConfig, rng: np.random.Generator) -> torch.Tensor:
    """One training step's contrastive loss over a batch of patch tuples."""
    encoded = encode_batch(models, tuples, config, rng)
    return infonce_loss(encoded.batch, spec, config.temperature)
