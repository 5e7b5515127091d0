"""Prototype episode loss, global-prototype loss and their weighted sum.

All functions take torch tensors and are differentiable. Labels are 0-based
integer tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from metaspeaker.errors import ConfigError, InputError

NORM_EPS = 1e-8
MODES = ("vanilla", "meta", "meta_global")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    mode: str = "meta_global"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")

    @property
    def uses_episode(self) -> bool:
        return self.mode in ("meta", "meta_global")

    @property
    def uses_global(self) -> bool:
        return self.mode in ("vanilla", "meta_global")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    episode: torch.Tensor | None = None
    global_: torch.Tensor | None = None

    def as_floats(self) -> dict[str, float | None]:
        def f(t):
            return None if t is None else float(t.detach())

        return {"total": f(self.total), "episode": f(self.episode), "global": f(self.global_)}


class GlobalPrototypes(nn.Module):
    """Learnable (num_classes, dim) matrix of per-speaker class vectors."""

    def __init__(self, num_classes: int, dim: int = 256, generator: torch.Generator | None = None):
        super().__init__()
        if num_classes < 1:
            raise ConfigError("need at least one global class")
        weight = torch.randn(num_classes, dim, generator=generator) / dim**0.5
        self.weight = nn.Parameter(weight)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def _check_labels(labels: torch.Tensor, n: int, what: str):
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n):
        raise InputError(f"{what} labels must lie in [0, {n - 1}], got range [{int(labels.min())}, {int(labels.max())}]")


def compute_prototypes(support: torch.Tensor, labels: torch.Tensor, n_way: int | None = None) -> torch.Tensor:
    """Per-class mean of support embeddings, rows ordered by label."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if n_way is None:
        n_way = int(labels.max()) + 1
    _check_labels(labels, n_way, "support")
    counts = torch.bincount(labels, minlength=n_way)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise InputError(f"no support examples for labels {missing}")
    sums = torch.zeros(n_way, support.shape[1], dtype=support.dtype).index_add(0, labels, support)
    return sums / counts[:, None].to(support.dtype)


def scaled_cosine(x: torch.Tensor, protos: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """``x . p / ||p||`` for every row pair: the cosine scaled by ``||x||``.

    ``x`` is (B, D) or (D,); ``protos`` is (C, D) or (D,). Only the prototype
    side is normalized. Norms below ``eps`` are clamped to ``eps``.
    """
    return x @ (protos / protos.norm(dim=-1, keepdim=True).clamp_min(eps)).T


def episode_loss(query: torch.Tensor, labels: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, protos.shape[0], "query")
    return F.cross_entropy(scaled_cosine(query, protos), labels)


def global_loss(embs: torch.Tensor, labels: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Classification of every sample against all global prototypes."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    _check_labels(labels, omega.shape[0], "global")
    return F.cross_entropy(scaled_cosine(embs, omega), labels)


def combined_loss(
    support: torch.Tensor,
    support_labels: torch.Tensor,
    query: torch.Tensor,
    query_labels: torch.Tensor,
    omega: torch.Tensor | None,
    support_global: torch.Tensor | None = None,
    query_global: torch.Tensor | None = None,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Objective for one episode's embeddings.

    ``meta_global``: episode loss + lam * global loss over support and query.
    ``meta``: episode loss only. ``vanilla``: global loss only, with support
    and query simply forming the batch.
    """
    ep = gl = None
    if cfg.uses_episode:
        protos = compute_prototypes(support, support_labels)
        ep = episode_loss(query, query_labels, protos)
    if cfg.uses_global:
        if omega is None or support_global is None or query_global is None:
            raise InputError(f"mode {cfg.mode} needs global prototypes and global labels")
        embs = torch.cat([support, query])
        gl = global_loss(embs, torch.cat([torch.as_tensor(support_global), torch.as_tensor(query_global)]), omega)
    if cfg.mode == "meta_global":
        total = ep + cfg.lam * gl
    elif cfg.mode == "meta":
        total = ep
    else:
        total = gl
    return LossBreakdown(total, ep, gl)
