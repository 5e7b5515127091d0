"""Corpus manifests, speaker splits, feature cache and embedding dumps."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaspeaker.errors import InputError
from metaspeaker.features import (
    FeatureConfig,
    FeatureMatrix,
    compute_logmel,
    load_features,
    read_wav,
    save_features,
    wav_info,
)

logger = logging.getLogger(__name__)

AUDIO_SUFFIXES = (".wav",)


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    path: str
    num_samples: int
    sample_rate: int

    def __post_init__(self):
        if self.num_samples <= 0:
            raise InputError(f"{self.utt_id}: num_samples must be positive")
        for name in ("utt_id", "speaker_id", "path"):
            value = getattr(self, name)
            if not value or "\t" in value or "\n" in value:
                raise InputError(f"invalid {name} {value!r}")

    def to_line(self) -> str:
        return f"{self.utt_id}\t{self.speaker_id}\t{self.path}\t{self.num_samples}\t{self.sample_rate}"

    @classmethod
    def from_line(cls, line: str) -> "UtteranceRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise InputError(f"manifest line needs 5 tab-separated fields: {line!r}")
        utt, spk, path, n, sr = parts
        return cls(utt, spk, path, int(n), int(sr))


@dataclass(frozen=True)
class Manifest:
    """Immutable list of utterances grouped by speaker.

    ``skipped`` counts files that could not be read while scanning.
    """

    records: tuple[UtteranceRecord, ...]
    skipped: int = 0
    speakers: dict = field(init=False, repr=False, compare=False)
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        by_id, speakers = {}, {}
        for r in records:
            if r.utt_id in by_id:
                raise InputError(f"duplicate utt_id {r.utt_id!r}")
            by_id[r.utt_id] = r
            speakers.setdefault(r.speaker_id, []).append(r.utt_id)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "speakers", {k: tuple(v) for k, v in speakers.items()})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        return self._by_id[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)

    def subset(self, speaker_ids: Iterable[str]) -> "Manifest":
        keep = set(speaker_ids)
        return Manifest(tuple(r for r in self.records if r.speaker_id in keep))

    def speaker_index(self) -> dict[str, int]:
        """Dense 0-based class index per speaker, in lexicographic order."""
        return {spk: i for i, spk in enumerate(self.speaker_ids)}

    def save(self, path: str | Path) -> None:
        text = "".join(r.to_line() + "\n" for r in self.records)
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(UtteranceRecord.from_line(ln) for ln in lines if ln.strip()))


def _utt_id(rel: Path) -> str:
    return "-".join(rel.with_suffix("").parts)


def scan_corpus(root: str | Path) -> Manifest:
    """Build a manifest from a ``speaker_dir/.../utterance.wav`` tree.

    The speaker id is the top-level directory name; the utterance id is the
    path relative to ``root`` without suffix, separators replaced by ``-``.
    Unreadable files are skipped and counted in ``Manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"corpus root {root} is not a directory")
    records, skipped = [], 0
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(p for p in spk_dir.rglob("*") if p.is_file() and p.suffix.lower() in AUDIO_SUFFIXES)
        for f in files:
            try:
                n, sr = wav_info(f)
                if n <= 0:
                    raise InputError("empty audio")
            except Exception as exc:  # any unreadable file is skipped, not fatal
                logger.warning("skipping %s: %s", f, exc)
                skipped += 1
                continue
            records.append(UtteranceRecord(_utt_id(f.relative_to(root)), spk_dir.name, str(f), n, sr))
    if not records:
        raise InputError(f"no speakers found under {root}")
    records.sort(key=lambda r: r.utt_id)
    return Manifest(tuple(records), skipped=skipped)


def split_speakers(m: Manifest, train_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Speaker-disjoint split; ``floor(train_fraction * n)`` speakers go to train.

    The train count is clamped to ``[1, n - 1]`` so neither side is empty.
    """
    if not 0 < train_fraction < 1:
        raise InputError(f"train_fraction must be in (0, 1), got {train_fraction}")
    speakers = m.speaker_ids
    n = len(speakers)
    if n < 2:
        raise InputError(f"need at least 2 speakers to split, got {n}")
    n_train = min(max(int(np.floor(train_fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    train = {speakers[i] for i in order[:n_train]}
    return m.subset(train), m.subset(set(speakers) - train)


class FeatureStore(Mapping):
    """Lazy ``utt_id -> FeatureMatrix`` mapping backed by audio and an optional disk cache.

    Features are mean-normalized full-utterance log mel matrices. With
    ``cache_dir`` set, matrices are read from ``<cache_dir>/<utt_id>.npz``;
    ``compute_missing=False`` turns an absent cache file into an error.
    """

    def __init__(
        self,
        manifest: Manifest,
        cfg: FeatureConfig = FeatureConfig(),
        cache_dir: str | Path | None = None,
        compute_missing: bool = True,
        dtype=np.float32,
    ):
        self.manifest = manifest
        self.cfg = cfg
        self.cache_dir = None if cache_dir is None else Path(cache_dir)
        self.compute_missing = compute_missing
        self.dtype = dtype
        self._mem: dict[str, FeatureMatrix] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    def __iter__(self):
        return (r.utt_id for r in self.manifest)

    def cache_path(self, utt_id: str) -> Path:
        return self.cache_dir / f"{utt_id}.npz"

    def __getitem__(self, utt_id: str) -> FeatureMatrix:
        if utt_id in self._mem:
            return self._mem[utt_id]
        if utt_id not in self.manifest:
            raise KeyError(utt_id)
        F = None
        if self.cache_dir is not None and self.cache_path(utt_id).exists():
            F = load_features(self.cache_path(utt_id), self.cfg)
        elif not self.compute_missing:
            raise InputError(f"missing feature cache entry for utterance {utt_id}")
        if F is None:
            F = compute_logmel(read_wav(self.manifest[utt_id].path), self.cfg)
            F = FeatureMatrix(F.values.astype(self.dtype), F.frame_hop)
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                save_features(self.cache_path(utt_id), F, self.cfg)
        self._mem[utt_id] = F
        return F

    def build(self) -> int:
        """Materialize every entry; returns the count."""
        for utt in self:
            self[utt]
        return len(self)


def write_embedding_dump(path: str | Path, rows: Iterable[tuple[str, str, np.ndarray]], dim: int) -> int:
    """Text dump: ``utt_id speaker_id dim=<dim>`` header then one row per utterance."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"utt_id speaker_id dim={dim}\n")
        for utt, spk, vec in rows:
            vec = np.asarray(vec, dtype=np.float64).ravel()
            if vec.size != dim:
                raise InputError(f"{utt}: embedding has {vec.size} values, expected {dim}")
            fh.write(f"{utt} {spk} " + " ".join(f"{v:.9g}" for v in vec) + "\n")
            count += 1
    return count


def read_embedding_dump(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or not header[2].startswith("dim="):
            raise InputError(f"{path}: bad embedding dump header")
        dim = int(header[2][4:])
        utts, spks, vecs = [], [], []
        for line in fh:
            parts = line.split()
            utts.append(parts[0])
            spks.append(parts[1])
            vecs.append([float(v) for v in parts[2:]])
    return utts, spks, np.asarray(vecs, dtype=np.float64).reshape(len(utts), dim)


def dump_embeddings(
    manifest: Manifest,
    embed_fn: Callable[[list[FeatureMatrix]], np.ndarray],
    features: Mapping[str, FeatureMatrix],
    out_path: str | Path,
    dim: int = 256,
) -> int:
    """Embed every full utterance and write the text dump; returns rows written."""

    def rows():
        for r in manifest:
            try:
                F = features[r.utt_id]
            except KeyError:
                raise InputError(f"missing feature cache entry for utterance {r.utt_id}") from None
            yield r.utt_id, r.speaker_id, embed_fn([F])[0]

    return write_embedding_dump(out_path, rows(), dim)
