"""Optimization loop: one episode (or fixed-length batch) per SGD step."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from metaspeaker.encoder import EncoderConfig, SpeakerEncoder, embed_numpy
from metaspeaker.errors import ConfigError, InputError, NumericError
from metaspeaker.evaluation import evaluate_identification
from metaspeaker.features import FeatureConfig
from metaspeaker.manifest import Manifest
from metaspeaker.objective import MODES, GlobalPrototypes, LossBreakdown, LossConfig, combined_loss, global_loss
from metaspeaker.rng import substream_seed
from metaspeaker.sampler import Episode, EpisodeConfig, EpisodeSampler

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "metaspeaker-checkpoint-1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loop settings.

    The learning rate is divided by ``lr_decay_factor`` each time the
    validation accuracy fails to improve for ``patience`` consecutive
    evaluations; training stops at the plateau after ``max_decays`` decays,
    or at ``max_steps``.
    """

    optimizer: str = "sgd_nesterov"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_init: float = 0.1
    lr_decay_factor: float = 10.0
    lr_decay_rule: str = "plateau"
    patience: int = 5
    max_decays: int = 2
    max_steps: int = 100_000
    checkpoint_every: int = 1000
    eval_interval: int = 500
    val_episodes: int = 50
    val_n_way: int = 10
    val_query_seconds: float = 1.0
    vanilla_seconds: float = 2.0
    vanilla_batch_size: int | None = None
    seed: int = 0
    mode: str = "meta_global"

    def __post_init__(self):
        if self.optimizer != "sgd_nesterov":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_decay_rule not in ("plateau", "none"):
            raise ConfigError(f"lr_decay_rule must be 'plateau' or 'none', got {self.lr_decay_rule!r}")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must be > 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")
        for name in ("max_steps", "checkpoint_every", "eval_interval", "val_episodes", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


class SpeakerModel(nn.Module):
    """Encoder plus the global prototype matrix for the training speakers."""

    def __init__(self, enc_cfg: EncoderConfig, n_classes: int):
        super().__init__()
        self.encoder = SpeakerEncoder(enc_cfg)
        self.prototypes = GlobalPrototypes(n_classes, enc_cfg.embedding_dim)

    @property
    def omega(self) -> torch.Tensor:
        return self.prototypes.weight


def make_optimizer(params, lr: float, momentum: float, weight_decay: float) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay, nesterov=momentum > 0)


@dataclass
class TrainState:
    model: SpeakerModel
    optimizer: torch.optim.SGD
    sampler: EpisodeSampler
    step: int = 0
    lr: float = 0.1
    best_metric: float = -math.inf
    bad_evals: int = 0
    n_decays: int = 0
    history: list = field(default_factory=list)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.sampler.rng.bit_generator.state,
            "step": self.step,
            "lr": self.lr,
            "best_metric": self.best_metric,
            "bad_evals": self.bad_evals,
            "n_decays": self.n_decays,
            "history": list(self.history),
        }

    def load_state_dict(self, d: dict) -> None:
        self.model.load_state_dict(d["model"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.sampler.rng.bit_generator.state = d["rng"]
        self.step, self.best_metric = d["step"], d["best_metric"]
        self.bad_evals, self.n_decays = d["bad_evals"], d["n_decays"]
        self.history = list(d["history"])
        self.set_lr(d["lr"])


def init_state(
    train_manifest: Manifest,
    features: Mapping,
    enc_cfg: EncoderConfig,
    ep_cfg: EpisodeConfig,
    cfg: TrainConfig,
    fcfg: FeatureConfig = FeatureConfig(),
) -> TrainState:
    torch.manual_seed(substream_seed(cfg.seed, "init"))
    model = SpeakerModel(enc_cfg, len(train_manifest.speakers))
    model.train()
    optimizer = make_optimizer(model.parameters(), cfg.lr_init, cfg.momentum, cfg.weight_decay)
    sampler = EpisodeSampler(train_manifest, features, ep_cfg, fcfg, seed=substream_seed(cfg.seed, "sampling"))
    return TrainState(model, optimizer, sampler, lr=cfg.lr_init)


def next_batch(state: TrainState, cfg: TrainConfig):
    if cfg.mode == "vanilla":
        ep = state.sampler.cfg
        size = cfg.vanilla_batch_size or ep.n_way * (ep.k_shot + ep.m_query)
        return state.sampler.vanilla_batch(size, cfg.vanilla_seconds)
    return state.sampler.episode()


def batch_loss(model: SpeakerModel, batch, loss_cfg: LossConfig) -> LossBreakdown:
    """Forward pass and loss for an :class:`Episode` or a ``(segments, global_ids)`` batch."""
    if isinstance(batch, Episode):
        if loss_cfg.mode == "vanilla":
            raise InputError("vanilla mode expects a fixed-length batch, got an episode")
        embs = model.encoder.embed_segments(list(batch.support) + list(batch.query))
        n_s = len(batch.support)
        return combined_loss(
            embs[:n_s],
            torch.as_tensor(batch.support_labels),
            embs[n_s:],
            torch.as_tensor(batch.query_labels),
            model.omega,
            torch.as_tensor(batch.support_global),
            torch.as_tensor(batch.query_global),
            loss_cfg,
        )
    if loss_cfg.mode != "vanilla":
        raise InputError(f"mode {loss_cfg.mode} expects an episode, got a fixed-length batch")
    segments, gids = batch
    embs = model.encoder(torch.as_tensor(segments, dtype=torch.float32))
    gl = global_loss(embs, torch.as_tensor(gids), model.omega)
    return LossBreakdown(gl, None, gl)


def train_step(state: TrainState, batch, loss_cfg: LossConfig) -> dict[str, float | None]:
    """One Nesterov-SGD update on the given episode or batch; returns the loss terms."""
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    losses = batch_loss(state.model, batch, loss_cfg)
    values = losses.as_floats()
    if not math.isfinite(values["total"]):
        raise NumericError(
            f"non-finite loss at step {state.step + 1} (lr={state.lr}): "
            f"total={values['total']} episode={values['episode']} global={values['global']}"
        )
    losses.total.backward()
    state.optimizer.step()
    state.step += 1
    return values


def validation_accuracy(
    state: TrainState, val_manifest: Manifest, val_features, cfg: TrainConfig, fcfg: FeatureConfig
) -> float:
    ep = state.sampler.cfg
    n_way = min(cfg.val_n_way, len(val_manifest.speakers))
    report = evaluate_identification(
        val_manifest,
        val_features,
        lambda segs: embed_numpy(state.model.encoder, segs),
        n_way=n_way,
        episodes=cfg.val_episodes,
        enroll_seconds=ep.support_seconds,
        test_per_spk=ep.m_query,
        query_seconds=cfg.val_query_seconds,
        rng=substream_seed(cfg.seed, "validation"),
        fcfg=fcfg,
    )
    return report.accuracy


def update_schedule(state: TrainState, metric: float, cfg: TrainConfig) -> tuple[bool, bool]:
    """Record a validation result; returns ``(improved, stop)``."""
    if metric > state.best_metric:
        state.best_metric = metric
        state.bad_evals = 0
        return True, False
    state.bad_evals += 1
    if cfg.lr_decay_rule == "none" or state.bad_evals < cfg.patience:
        return False, False
    state.bad_evals = 0
    if state.n_decays >= cfg.max_decays:
        return False, True
    state.n_decays += 1
    state.set_lr(state.lr / cfg.lr_decay_factor)
    logger.info("step %d: validation plateau, lr -> %g", state.step, state.lr)
    return False, False


def save_checkpoint(path: str | Path, state: TrainState, config_echo: dict, speakers: list[str]) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder_config": asdict(state.model.encoder.cfg),
        "config": config_echo,
        "speakers": list(speakers),
        "state": state.state_dict(),
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, enc_cfg: EncoderConfig | None = None) -> dict:
    """Load a checkpoint dict; with ``enc_cfg`` its architecture must match."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    saved = EncoderConfig(**payload["encoder_config"])
    if enc_cfg is not None and saved != enc_cfg:
        raise ConfigError(f"checkpoint encoder {saved} incompatible with requested {enc_cfg}")
    payload["encoder_config"] = saved
    return payload


def load_encoder(path: str | Path) -> SpeakerEncoder:
    """Inference-mode encoder from a checkpoint."""
    payload = load_checkpoint(path)
    model = SpeakerModel(payload["encoder_config"], len(payload["speakers"]))
    model.load_state_dict(payload["state"]["model"])
    model.eval()
    return model.encoder


METRICS_HEADER = ("step", "lr", "L_e", "L_g", "val_acc")


def _cell(x) -> str:
    return "" if x is None else repr(float(x))


def fit(
    train_manifest: Manifest,
    val_manifest: Manifest,
    features: Mapping,
    val_features: Mapping,
    enc_cfg: EncoderConfig,
    ep_cfg: EpisodeConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    loss_cfg: LossConfig | None = None,
    fcfg: FeatureConfig = FeatureConfig(),
    config_echo: dict | None = None,
    resume_from: str | Path | None = None,
) -> Path:
    """Train until the schedule stops or ``max_steps``; returns the final checkpoint path.

    Writes ``ckpt_step{N}.bin`` every ``checkpoint_every`` steps and at the
    end, ``ckpt_best.bin`` whenever validation accuracy improves, and a
    ``metrics.csv`` log with one row per step.
    """
    if loss_cfg is None:
        loss_cfg = LossConfig(mode=cfg.mode)
    if loss_cfg.mode != cfg.mode:
        raise ConfigError(f"loss mode {loss_cfg.mode} != train mode {cfg.mode}")
    if set(train_manifest.speakers) & set(val_manifest.speakers):
        raise InputError("train and validation manifests share speakers")
    n_train = len(train_manifest.speakers)
    if cfg.mode != "vanilla" and ep_cfg.n_way > n_train:
        raise InputError(f"episode needs {ep_cfg.n_way} speakers but the training manifest has {n_train}")
    if len(val_manifest.speakers) < 2:
        raise InputError("validation manifest needs at least 2 speakers")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = dict(config_echo or {})
    speakers = train_manifest.speaker_ids

    state = init_state(train_manifest, features, enc_cfg, ep_cfg, cfg, fcfg)
    if resume_from is not None:
        state.load_state_dict(load_checkpoint(resume_from, enc_cfg)["state"])

    metrics_path = out_dir / "metrics.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in state.history:
        writer.writerow(row)

    def flush():
        metrics_path.write_text(buf.getvalue(), encoding="utf-8")

    last = None
    stop = False
    while state.step < cfg.max_steps and not stop:
        lr = state.lr
        values = train_step(state, next_batch(state, cfg), loss_cfg)
        val_acc = None
        if state.step % cfg.eval_interval == 0:
            val_acc = validation_accuracy(state, val_manifest, val_features, cfg, fcfg)
            improved, stop = update_schedule(state, val_acc, cfg)
            logger.info("step %d lr %g loss %.4f val_acc %.4f", state.step, lr, values["total"], val_acc)
        row = (state.step, repr(float(lr)), _cell(values["episode"]), _cell(values["global"]), _cell(val_acc))
        state.history.append(row)
        writer.writerow(row)
        if val_acc is not None and improved:
            save_checkpoint(out_dir / "ckpt_best.bin", state, echo, speakers)
        if state.step % cfg.checkpoint_every == 0 or stop or state.step >= cfg.max_steps:
            last = out_dir / f"ckpt_step{state.step}.bin"
            save_checkpoint(last, state, echo, speakers)
            flush()
    if last is None:
        last = out_dir / f"ckpt_step{state.step}.bin"
        save_checkpoint(last, state, echo, speakers)
    flush()
    return last
