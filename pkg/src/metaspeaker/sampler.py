"""Episode and fixed-length batch sampling from a manifest."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from metaspeaker.errors import ConfigError, InputError
from metaspeaker.features import FeatureConfig, FeatureMatrix, crop_or_duplicate, mean_normalize
from metaspeaker.manifest import Manifest


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 100
    k_shot: int = 1
    m_query: int = 2
    support_seconds: float = 2.0
    query_seconds_min: float = 1.0
    query_seconds_max: float = 2.0

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if self.k_shot < 1 or self.m_query < 1:
            raise ConfigError("k_shot and m_query must be >= 1")
        if not 0 < self.query_seconds_min <= self.query_seconds_max <= self.support_seconds:
            raise ConfigError("need 0 < query_seconds_min <= query_seconds_max <= support_seconds")

    def frame_ranges(self, fcfg: FeatureConfig) -> tuple[int, int, int]:
        """(support_frames, query_min_frames, query_max_frames)."""
        return (
            fcfg.frames_for_seconds(self.support_seconds),
            fcfg.frames_for_seconds(self.query_seconds_min),
            fcfg.frames_for_seconds(self.query_seconds_max),
        )


@dataclass(frozen=True)
class Episode:
    """One N-way task. Local labels are 0-based here (0..N-1).

    ``support`` and ``query`` hold (n_mels, T) arrays. ``global_*`` are
    0-based indices into the training speaker list.
    """

    support: tuple[np.ndarray, ...]
    support_labels: np.ndarray
    support_global: np.ndarray
    query: tuple[np.ndarray, ...]
    query_labels: np.ndarray
    query_global: np.ndarray
    speakers: tuple[str, ...]

    @property
    def n_way(self) -> int:
        return len(self.speakers)

    @property
    def support_lengths(self) -> np.ndarray:
        return np.array([s.shape[1] for s in self.support])

    @property
    def query_lengths(self) -> np.ndarray:
        return np.array([q.shape[1] for q in self.query])


def _draw_utterances(utts: tuple[str, ...], count: int, rng: np.random.Generator) -> list[str]:
    # without replacement when possible, otherwise with replacement
    replace = len(utts) < count
    idx = rng.choice(len(utts), size=count, replace=replace)
    return [utts[i] for i in idx]


def _segment(F: FeatureMatrix, frames: int, rng: np.random.Generator) -> np.ndarray:
    return mean_normalize(crop_or_duplicate(F, frames, rng)).values


def sample_episode(
    m: Manifest,
    features: Mapping[str, FeatureMatrix],
    cfg: EpisodeConfig,
    rng: np.random.Generator,
    fcfg: FeatureConfig = FeatureConfig(),
    speaker_index: Mapping[str, int] | None = None,
) -> Episode:
    """Sample N speakers, then K support and M query segments per speaker.

    Supports are cropped (or self-tiled) to exactly ``support_seconds`` worth
    of frames. Each query independently gets a length drawn uniformly from the
    integer frame range implied by ``[query_seconds_min, query_seconds_max]``.
    Segments are mean-normalized after cropping.
    """
    speakers = m.speaker_ids
    if cfg.n_way > len(speakers):
        raise InputError(f"episode needs {cfg.n_way} speakers but the manifest has {len(speakers)}")
    if speaker_index is None:
        speaker_index = m.speaker_index()
    sup_frames, q_min, q_max = cfg.frame_ranges(fcfg)

    chosen = [speakers[i] for i in rng.choice(len(speakers), size=cfg.n_way, replace=False)]
    support, s_lab, s_glob = [], [], []
    query, q_lab, q_glob = [], [], []
    for label, spk in enumerate(chosen):
        draws = _draw_utterances(m.speakers[spk], cfg.k_shot + cfg.m_query, rng)
        gid = speaker_index[spk]
        for utt in draws[: cfg.k_shot]:
            support.append(_segment(features[utt], sup_frames, rng))
            s_lab.append(label)
            s_glob.append(gid)
        for utt in draws[cfg.k_shot :]:
            length = int(rng.integers(q_min, q_max + 1))
            query.append(_segment(features[utt], length, rng))
            q_lab.append(label)
            q_glob.append(gid)
    return Episode(
        tuple(support),
        np.array(s_lab),
        np.array(s_glob),
        tuple(query),
        np.array(q_lab),
        np.array(q_glob),
        tuple(chosen),
    )


def sample_vanilla_batch(
    m: Manifest,
    features: Mapping[str, FeatureMatrix],
    batch_size: int,
    fixed_seconds: float,
    rng: np.random.Generator,
    fcfg: FeatureConfig = FeatureConfig(),
    speaker_index: Mapping[str, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-length segments for plain classification training.

    Returns ``(segments, global_ids)`` with segments of shape
    (batch_size, n_mels, frames). Speakers are drawn uniformly, then an
    utterance uniformly within the speaker.
    """
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    if len(m) == 0:
        raise InputError("cannot sample from an empty manifest")
    if speaker_index is None:
        speaker_index = m.speaker_index()
    speakers = m.speaker_ids
    frames = fcfg.frames_for_seconds(fixed_seconds)
    segs, gids = [], []
    for _ in range(batch_size):
        spk = speakers[int(rng.integers(len(speakers)))]
        utts = m.speakers[spk]
        utt = utts[int(rng.integers(len(utts)))]
        segs.append(_segment(features[utt], frames, rng))
        gids.append(speaker_index[spk])
    return np.stack(segs), np.array(gids)


class EpisodeSampler:
    """Stateful sampler owning its generator; one per training stream."""

    def __init__(self, manifest, features, cfg: EpisodeConfig, fcfg: FeatureConfig = FeatureConfig(), seed=0):
        self.manifest = manifest
        self.features = features
        self.cfg = cfg
        self.fcfg = fcfg
        self.rng = np.random.default_rng(seed)
        self.speaker_index = manifest.speaker_index()

    def episode(self) -> Episode:
        return sample_episode(self.manifest, self.features, self.cfg, self.rng, self.fcfg, self.speaker_index)

    def vanilla_batch(self, batch_size: int, fixed_seconds: float):
        return sample_vanilla_batch(
            self.manifest, self.features, batch_size, fixed_seconds, self.rng, self.fcfg, self.speaker_index
        )
