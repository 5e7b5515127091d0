"""Deterministic multi-speaker test corpus built from sinusoids and noise.

Each speaker owns a set of "formant" frequencies with fixed relative
amplitudes. An utterance sums those sinusoids (random phases, small
per-utterance frequency jitter), gates them with a random on/off syllable
envelope and adds white noise. The envelope matters: features are
mean-normalized per band, which would erase a perfectly stationary tone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from metaspeaker.errors import ConfigError
from metaspeaker.features import FeatureConfig, FeatureMatrix, Waveform, compute_logmel, crop_or_duplicate, read_wav, write_wav
from metaspeaker.manifest import Manifest, scan_corpus


@dataclass(frozen=True)
class SyntheticSpec:
    n_speakers: int = 20
    utterances_per_speaker: int = 10
    duration_range: tuple[float, float] = (3.0, 8.0)
    formants: tuple[tuple[float, ...], ...] | None = None
    n_formants: int = 3
    freq_range: tuple[float, float] = (200.0, 4000.0)
    formant_jitter: float = 0.02
    noise_level: float = 0.1
    syllable_seconds: tuple[float, float] = (0.08, 0.35)
    voiced_fraction: float = 0.6
    off_level: float = 0.1
    sample_rate: int = 16000
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ConfigError("need at least one speaker and one utterance per speaker")
        lo, hi = self.duration_range
        if not 0.025 < lo <= hi:
            raise ConfigError("durations must exceed the 25 ms feature window")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        if self.formants is not None:
            if len(self.formants) != self.n_speakers:
                raise ConfigError(f"{len(self.formants)} formant sets for {self.n_speakers} speakers")
            seen: dict[float, int] = {}
            for s, fset in enumerate(self.formants):
                for f in fset:
                    if f in seen and seen[f] != s:
                        raise ConfigError(f"formant {f} Hz shared by speakers {seen[f]} and {s}")
                    seen[f] = s


def speaker_formants(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """(frequencies, amplitudes) per speaker; random sets never share a frequency."""
    if spec.formants is not None:
        return [(np.asarray(f, dtype=float), np.ones(len(f))) for f in spec.formants]
    rng = np.random.default_rng([spec.seed, 0])
    used: set[float] = set()
    out = []
    for _ in range(spec.n_speakers):
        freqs = []
        while len(freqs) < spec.n_formants:
            f = float(np.round(rng.uniform(*spec.freq_range)))
            if f not in used:
                used.add(f)
                freqs.append(f)
        out.append((np.sort(np.array(freqs)), rng.uniform(0.4, 1.0, spec.n_formants)))
    return out


def syllable_envelope(n: int, sr: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    env = np.full(n, spec.off_level)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(*spec.syllable_seconds) * sr)
        if rng.random() < spec.voiced_fraction:
            env[pos : pos + seg] = 1.0
        pos += max(seg, 1)
    ramp = max(int(0.005 * sr), 1)
    return np.convolve(env, np.ones(ramp) / ramp, mode="same")


def synthesize_utterance(
    freqs: np.ndarray, amps: np.ndarray, duration: float, spec: SyntheticSpec, rng: np.random.Generator
) -> Waveform:
    sr = spec.sample_rate
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    jitter = 1.0 + spec.formant_jitter * rng.uniform(-1, 1, len(freqs))
    phases = rng.uniform(0, 2 * np.pi, len(freqs))
    tone = (amps[:, None] * np.sin(2 * np.pi * (freqs * jitter)[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    tone *= syllable_envelope(n, sr, spec, rng)
    tone /= max(np.sqrt(np.mean(tone**2)), 1e-12)
    x = tone + spec.noise_level * rng.standard_normal(n)
    return Waveform(0.9 * x / np.max(np.abs(x)), sr)


def generate(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Write ``<out_dir>/spkNNN/uttNNN.wav`` (16 kHz, 16-bit PCM) and return its manifest.

    Every utterance has its own generator derived from ``(seed, speaker, utterance)``.
    """
    out_dir = Path(out_dir)
    for s, (freqs, amps) in enumerate(speaker_formants(spec)):
        spk_dir = out_dir / f"spk{s:03d}"
        spk_dir.mkdir(parents=True, exist_ok=True)
        for u in range(spec.utterances_per_speaker):
            rng = np.random.default_rng([spec.seed, 1, s, u])
            duration = rng.uniform(*spec.duration_range)
            write_wav(spk_dir / f"utt{u:03d}.wav", synthesize_utterance(freqs, amps, duration, spec, rng))
    return scan_corpus(out_dir)


def nearest_centroid_accuracy(manifest: Manifest, features, fcfg: FeatureConfig | None = None) -> float:
    """Leave-one-out nearest-centroid speaker accuracy on time-averaged log mel.

    ``features`` maps utt_id to a waveform-derived *unnormalized* (n_mels, T)
    log-mel matrix (time averages of mean-normalized features are all zero).
    """
    utts = [r.utt_id for r in manifest]
    X = np.stack([np.asarray(getattr(features[u], "values", features[u])).mean(axis=1) for u in utts])
    spk = np.array([manifest[u].speaker_id for u in utts])
    names = manifest.speaker_ids
    sums = {s: X[spk == s].sum(axis=0) for s in names}
    counts = {s: int((spk == s).sum()) for s in names}
    correct = 0
    for i, x in enumerate(X):
        best, best_d = None, np.inf
        for s in names:
            c, n = sums[s], counts[s]
            if s == spk[i]:
                if n == 1:
                    continue
                c, n = c - x, n - 1
            d = np.sum((x - c / n) ** 2)
            if d < best_d:
                best, best_d = s, d
        correct += best == spk[i]
    return correct / len(utts)


def raw_logmel_features(manifest: Manifest, fcfg: FeatureConfig = FeatureConfig()) -> dict[str, np.ndarray]:
    """Unnormalized log mel for every utterance, keyed by utt_id."""
    return {r.utt_id: compute_logmel(read_wav(r.path), fcfg, normalize=False).values for r in manifest}


def episodic_centroid_accuracy(
    manifest: Manifest,
    raw_features,
    n_way: int = 5,
    episodes: int = 300,
    enroll_seconds: float = 5.0,
    query_seconds: float = 1.0,
    test_per_spk: int = 5,
    rng=None,
    fcfg: FeatureConfig = FeatureConfig(),
) -> float:
    """Training-free identification baseline under the episodic protocol.

    Each episode picks ``n_way`` speakers, one enrollment crop and
    ``test_per_spk`` query crops per speaker; crops are averaged over time
    (unnormalized log mel) and queries go to the nearest enrollment in
    Euclidean distance.
    """
    rng = np.random.default_rng(rng)
    speakers = manifest.speaker_ids
    if n_way > len(speakers):
        raise ConfigError(f"n_way={n_way} exceeds the {len(speakers)} speakers available")
    e_frames, q_frames = fcfg.frames_for_seconds(enroll_seconds), fcfg.frames_for_seconds(query_seconds)

    def crop_mean(utt, frames):
        return crop_or_duplicate(FeatureMatrix(np.asarray(raw_features[utt])), frames, rng).values.mean(axis=1)

    accs = []
    for _ in range(episodes):
        chosen = [speakers[i] for i in rng.choice(len(speakers), n_way, replace=False)]
        enroll, queries, labels = [], [], []
        for c, spk in enumerate(chosen):
            utts = manifest.speakers[spk]
            idx = rng.choice(len(utts), 1 + test_per_spk, replace=len(utts) < 1 + test_per_spk)
            enroll.append(crop_mean(utts[idx[0]], e_frames))
            for i in idx[1:]:
                queries.append(crop_mean(utts[i], q_frames))
                labels.append(c)
        E, Q = np.array(enroll), np.array(queries)
        d = ((Q[:, None, :] - E[None, :, :]) ** 2).sum(axis=-1)
        accs.append(np.mean(d.argmin(axis=1) == np.array(labels)))
    return float(np.mean(accs))
