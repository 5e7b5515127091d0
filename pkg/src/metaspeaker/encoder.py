"""Frame-level CNN encoders with temporal average pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from metaspeaker.errors import ConfigError, InputError


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "resnet34"
    channel_widths: tuple[int, ...] = (32, 64, 128, 256)
    embedding_dim: int = 256
    n_mels: int = 40
    freq_pool: str = "flatten"

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(c) for c in self.channel_widths))
        if self.arch not in ("resnet34", "small"):
            raise ConfigError(f"unknown arch {self.arch!r}; expected 'resnet34' or 'small'")
        if self.freq_pool not in ("flatten", "mean"):
            raise ConfigError(f"freq_pool must be 'flatten' or 'mean', got {self.freq_pool!r}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        n_stages = 4 if self.arch == "resnet34" else 2
        if len(self.channel_widths) != n_stages:
            raise ConfigError(f"{self.arch} needs {n_stages} channel widths, got {len(self.channel_widths)}")

    @classmethod
    def small(cls, embedding_dim: int = 256, n_mels: int = 40, freq_pool: str = "flatten") -> "EncoderConfig":
        return cls("small", (16, 32), embedding_dim, n_mels, freq_pool)

    @property
    def time_stride(self) -> int:
        return 8 if self.arch == "resnet34" else 4

    @property
    def frame_dim(self) -> int:
        """D: final channel width, times the residual mel rows when flattening."""
        if self.freq_pool == "mean":
            return self.channel_widths[-1]
        return self.channel_widths[-1] * self.output_frames(self.n_mels)

    def output_frames(self, T: int) -> int:
        """Length after the strided stages: each stride-2 stage maps t -> ceil(t / 2).

        Applies to the mel axis as well, which is downsampled by the same stride.
        """
        for _ in range(int(math.log2(self.time_stride))):
            T = -(-T // 2)
        return T


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(c_out),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def _resnet34_trunk(widths):
    layers = [nn.Conv2d(1, widths[0], 3, padding=1, bias=False), nn.BatchNorm2d(widths[0]), nn.ReLU()]
    c_in = widths[0]
    for stage, (width, n_blocks) in enumerate(zip(widths, (3, 4, 6, 3))):
        for b in range(n_blocks):
            stride = 2 if (stage > 0 and b == 0) else 1
            layers.append(BasicBlock(c_in, width, stride))
            c_in = width
    return nn.Sequential(*layers)


def _small_trunk(widths):
    return nn.Sequential(ConvBlock(1, widths[0], 2), ConvBlock(widths[0], widths[1], 2))


def temporal_average_pool(frames: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the time axis of (B, T', D) frame features.

    With ``lengths`` only the first ``lengths[b]`` frames of item ``b`` count.
    """
    if lengths is None:
        return frames.mean(dim=1)
    steps = torch.arange(frames.shape[1], device=frames.device)
    mask = (steps[None, :] < lengths[:, None]).to(frames.dtype)
    return (frames * mask[..., None]).sum(dim=1) / lengths.to(frames.dtype)[:, None]


class SpeakerEncoder(nn.Module):
    """(B, n_mels, T) features -> (B, embedding_dim) embeddings.

    The trunk treats the input as a one-channel mel x time image. After the
    last stage the residual mel axis is either folded into the channel axis
    (``freq_pool="flatten"``) or averaged away (``"mean"``), giving one frame
    feature vector per output time step; these are pooled over time and
    passed through a linear layer.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.trunk = _resnet34_trunk(cfg.channel_widths) if cfg.arch == "resnet34" else _small_trunk(cfg.channel_widths)
        self.fc = nn.Linear(cfg.frame_dim, cfg.embedding_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(mod.weight, mode="fan_in", nonlinearity="relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.BatchNorm2d):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)

    @property
    def min_frames(self) -> int:
        return self.cfg.time_stride

    def extract_frames(self, x: torch.Tensor) -> torch.Tensor:
        """(B, n_mels, T) -> (B, T', D) frame-level features."""
        if x.dim() != 3 or x.shape[1] != self.cfg.n_mels:
            raise InputError(f"expected input (B, {self.cfg.n_mels}, T), got {tuple(x.shape)}")
        if x.shape[2] < self.min_frames:
            raise InputError(f"input has {x.shape[2]} frames; {self.cfg.arch} needs at least {self.min_frames}")
        h = self.trunk(x.unsqueeze(1))  # (B, C, F', T')
        if self.cfg.freq_pool == "mean":
            return h.mean(dim=2).transpose(1, 2)
        return h.flatten(1, 2).transpose(1, 2)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        frames = self.extract_frames(x)
        out_lengths = None
        if lengths is not None:
            out_lengths = torch.tensor([self.cfg.output_frames(int(t)) for t in lengths], device=x.device)
        return self.fc(temporal_average_pool(frames, out_lengths))

    def embed_segments(self, segments) -> torch.Tensor:
        """Embed a list of (n_mels, T_i) arrays of possibly different lengths.

        Shorter segments are zero-padded to the longest one and pooled only
        over their own output frames.
        """
        segments = [_as_array(s) for s in segments]
        lengths = [s.shape[-1] for s in segments]
        T = max(lengths)
        dtype = next(self.parameters()).dtype
        batch = torch.zeros(len(segments), self.cfg.n_mels, T, dtype=dtype)
        for i, s in enumerate(segments):
            batch[i, :, : lengths[i]] = torch.as_tensor(np.asarray(s), dtype=dtype)
        if len(set(lengths)) == 1:
            return self(batch)
        return self(batch, torch.tensor(lengths))


def _as_array(segment) -> np.ndarray:
    return np.asarray(getattr(segment, "values", segment))


@torch.no_grad()
def embed_numpy(model: SpeakerEncoder, segments, batch_size: int = 64) -> np.ndarray:
    """Inference-mode embeddings for a list of (n_mels, T) arrays.

    Equal-length segments are batched together; the result keeps input order.
    """
    was_training = model.training
    model.eval()
    try:
        out = [None] * len(segments)
        groups: dict[int, list[int]] = {}
        segments = [_as_array(s) for s in segments]
        for i, s in enumerate(segments):
            groups.setdefault(s.shape[-1], []).append(i)
        for _, idx in sorted(groups.items()):
            for start in range(0, len(idx), batch_size):
                chunk = idx[start : start + batch_size]
                emb = model.embed_segments([segments[i] for i in chunk]).double().numpy()
                for j, i in enumerate(chunk):
                    out[i] = emb[j]
        return np.stack(out) if out else np.zeros((0, model.cfg.embedding_dim))
    finally:
        model.train(was_training)
