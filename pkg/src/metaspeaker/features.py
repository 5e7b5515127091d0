"""Log mel-filterbank features and segment length manipulation."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaspeaker.errors import ConfigError, InputError


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InputError("waveform must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    """Framing and filterbank parameters.

    Defaults give 40 mel bands from 25 ms Hamming windows every 10 ms at 16 kHz,
    with a 512-point FFT and triangular filters spanning 0-8000 Hz.
    """

    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    sample_rate: int = 16000
    log_floor: float = 1e-10
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float | None = None
    window: str = "hamming"
    preemphasis: float = 0.0
    dither: float = 0.0

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0 < self.hop_ms <= self.win_ms:
            raise ConfigError("need 0 < hop_ms <= win_ms")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.n_fft < self.win_samples:
            raise ConfigError(f"n_fft={self.n_fft} shorter than window ({self.win_samples} samples)")
        if self.window not in ("hamming", "hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def upper_hz(self) -> float:
        return self.sample_rate / 2.0 if self.f_max is None else self.f_max

    def num_frames(self, num_samples: int) -> int:
        """Frame count for a signal of ``num_samples`` (no edge padding)."""
        if num_samples < self.win_samples:
            return 0
        return 1 + (num_samples - self.win_samples) // self.hop_samples

    def frames_for_seconds(self, seconds: float) -> int:
        return self.num_frames(int(round(seconds * self.sample_rate)))


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_mels, T)
    frame_hop: float = 0.01
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise InputError(f"feature matrix must be (n_mels, T>=1), got {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_hz), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters of shape (n_mels, n_fft // 2 + 1), peak weight 1."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.upper_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def analysis_window(cfg: FeatureConfig) -> np.ndarray:
    n = cfg.win_samples
    if cfg.window == "hamming":
        return np.hamming(n)
    if cfg.window == "hann":
        return np.hanning(n)
    return np.ones(n)


def frame_signal(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Strided view of shape (T, win_samples)."""
    n_frames = cfg.num_frames(samples.size)
    win, hop = cfg.win_samples, cfg.hop_samples
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop]
    return frames[:n_frames]


def power_spectrum(w: Waveform, cfg: FeatureConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Windowed power spectrum of shape (T, n_fft // 2 + 1)."""
    x = w.samples
    if cfg.dither > 0:
        if rng is None:
            raise ConfigError("dither requires a seeded generator")
        x = x + cfg.dither * rng.standard_normal(x.size)
    if cfg.preemphasis > 0:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = frame_signal(x, cfg) * analysis_window(cfg)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def mel_energies(w: Waveform, cfg: FeatureConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    return mel_filterbank(cfg) @ power_spectrum(w, cfg, rng).T


def compute_logmel(
    w: Waveform,
    cfg: FeatureConfig = FeatureConfig(),
    normalize: bool = True,
    rng: np.random.Generator | None = None,
) -> FeatureMatrix:
    """Log mel-filterbank energies of ``w`` as an (n_mels, T) matrix.

    Energies are floored at ``cfg.log_floor`` before the log. With
    ``normalize`` (the default) each band is mean-normalized over time.
    No voice-activity detection is applied.
    """
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    if len(w) < cfg.win_samples:
        raise InputError(f"waveform has {len(w)} samples, shorter than one window ({cfg.win_samples})")
    logmel = np.log(np.maximum(mel_energies(w, cfg, rng), cfg.log_floor))
    fm = FeatureMatrix(logmel, frame_hop=cfg.hop_ms / 1000.0)
    return mean_normalize(fm) if normalize else fm


def mean_normalize(F: FeatureMatrix) -> FeatureMatrix:
    values = F.values - F.values.mean(axis=1, keepdims=True)
    return FeatureMatrix(values, frame_hop=F.frame_hop, meta=dict(F.meta))


def crop_or_duplicate(F: FeatureMatrix, target_frames: int, rng: np.random.Generator) -> FeatureMatrix:
    """Random contiguous crop, or self-tiling from frame 0 when too short.

    The generator is consumed only when an actual crop is drawn
    (``T > target_frames``).
    """
    if target_frames < 1:
        raise InputError(f"target_frames must be >= 1, got {target_frames}")
    T = F.num_frames
    if T > target_frames:
        start = int(rng.integers(0, T - target_frames + 1))
        values = F.values[:, start : start + target_frames]
    elif T == target_frames:
        values = F.values
    else:
        reps = -(-target_frames // T)
        values = np.tile(F.values, (1, reps))[:, :target_frames]
    return FeatureMatrix(values, frame_hop=F.frame_hop, meta=dict(F.meta))


# -- audio and feature files -------------------------------------------------


def read_wav(path: str | Path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into [-1, 1) floats."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit PCM is supported")
        n_ch = fh.getnchannels()
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if n_ch > 1:
        pcm = pcm.reshape(-1, n_ch).mean(axis=1)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def wav_info(path: str | Path) -> tuple[int, int]:
    """(num_samples, sample_rate) from the WAV header."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: only 16-bit PCM is supported")
        return fh.getnframes(), fh.getframerate()


def save_features(path: str | Path, F: FeatureMatrix, cfg: FeatureConfig) -> None:
    """Write an uncompressed ``.npz`` holding ``values`` and a small header.

    Header arrays: n_mels, T, hop_ms, win_ms, sample_rate.
    """
    with open(path, "wb") as fh:
        np.savez(
            fh,
            values=F.values,
            n_mels=np.int64(F.n_mels),
            T=np.int64(F.num_frames),
            hop_ms=np.float64(cfg.hop_ms),
            win_ms=np.float64(cfg.win_ms),
            sample_rate=np.int64(cfg.sample_rate),
        )


def load_features(path: str | Path, cfg: FeatureConfig | None = None) -> FeatureMatrix:
    with np.load(path) as data:
        values = data["values"]
        header = {k: data[k].item() for k in ("n_mels", "T", "hop_ms", "win_ms", "sample_rate")}
    if values.shape != (header["n_mels"], header["T"]):
        raise InputError(f"{path}: header shape {header['n_mels']}x{header['T']} != data {values.shape}")
    if cfg is not None:
        expected = (cfg.n_mels, cfg.hop_ms, cfg.win_ms, cfg.sample_rate)
        found = (header["n_mels"], header["hop_ms"], header["win_ms"], header["sample_rate"])
        if expected != found:
            raise ConfigError(f"{path}: cached with {found}, expected {expected}")
    return FeatureMatrix(values, frame_hop=header["hop_ms"] / 1000.0, meta=header)
