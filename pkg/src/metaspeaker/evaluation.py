"""Verification trials, EER / minDCF, and N-way speaker identification."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metaspeaker.errors import InputError
from metaspeaker.features import FeatureConfig, FeatureMatrix, crop_or_duplicate, mean_normalize
from metaspeaker.manifest import Manifest

logger = logging.getLogger(__name__)

EmbedFn = Callable[[list], np.ndarray]


@dataclass(frozen=True)
class Trial:
    label: int
    enroll_utt: str
    test_utt: str


@dataclass(frozen=True)
class VerificationReport:
    eer: float
    eer_threshold: float
    min_dcf: float
    n_target: int
    n_nontarget: int
    test_seconds: float | None = None
    seed: int | None = None


@dataclass(frozen=True)
class IdentificationReport:
    n_way: int
    query_seconds: float | None
    accuracy: float
    ci95: float
    episodes: int
    seed: int | None = None
    episode_accuracies: np.ndarray = field(default=None, repr=False, compare=False)


# -- trials ------------------------------------------------------------------


def generate_trials(
    m: Manifest, pos_per_spk: int = 100, neg_per_spk: int = 100, rng: np.random.Generator | None = None
) -> list[Trial]:
    """Per speaker: same-speaker pairs of distinct utterances and pairs against other speakers.

    Positive pairs are drawn independently (a pair may repeat when a speaker
    has few utterances). Negatives pair a random own utterance with an
    utterance drawn uniformly from all other speakers' utterances. Speakers
    with a single utterance are skipped.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    speakers = m.speaker_ids
    if len(speakers) < 2:
        raise InputError("need at least 2 speakers to form nontarget trials")
    trials, skipped = [], []
    for spk in speakers:
        own = m.speakers[spk]
        if len(own) < 2:
            skipped.append(spk)
            continue
        others = [r.utt_id for r in m if r.speaker_id != spk]
        for _ in range(pos_per_spk):
            i, j = rng.choice(len(own), size=2, replace=False)
            trials.append(Trial(1, own[i], own[j]))
        for _ in range(neg_per_spk):
            trials.append(Trial(0, own[int(rng.integers(len(own)))], others[int(rng.integers(len(others)))]))
    if skipped:
        logger.warning("skipped %d speaker(s) with a single utterance: %s", len(skipped), ", ".join(skipped))
    if not trials:
        raise InputError("no trials generated: every speaker has fewer than 2 utterances")
    return trials


def write_trials(path: str | Path, trials: Sequence[Trial]) -> None:
    Path(path).write_text("".join(f"{t.label} {t.enroll_utt} {t.test_utt}\n" for t in trials), encoding="utf-8")


def read_trials(path: str | Path) -> list[Trial]:
    trials = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise InputError(f"{path}:{n}: expected 'label enroll_utt test_utt' with label 0/1")
        trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


# -- scoring -----------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two (n, D) arrays, or of two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(axis=-1)
    return num / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def score_trials(
    trials: Sequence[Trial], enroll_embs: Mapping[str, np.ndarray], test_embs: Mapping[str, np.ndarray]
) -> np.ndarray:
    for t in trials:
        if t.enroll_utt not in enroll_embs:
            raise InputError(f"no embedding for enrollment utterance {t.enroll_utt}")
        if t.test_utt not in test_embs:
            raise InputError(f"no embedding for test utterance {t.test_utt}")
    if not trials:
        return np.zeros(0)
    enroll = np.stack([enroll_embs[t.enroll_utt] for t in trials])
    test = np.stack([test_embs[t.test_utt] for t in trials])
    return cosine_similarity(enroll, test)


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at every distinct decision threshold.

    A trial is accepted when ``score >= threshold``. Thresholds are the
    sorted distinct scores followed by one just above the maximum (reject
    all), so the first point accepts everything.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_tar, n_non = int(labels.sum()), int((~labels).sum())
    if n_tar == 0 or n_non == 0:
        raise InputError("need at least one target and one nontarget trial")
    uniq = np.unique(scores)
    thresholds = np.append(uniq, np.nextafter(uniq[-1], np.inf))
    tar = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    p_miss = np.searchsorted(tar, thresholds, side="left") / n_tar
    p_fa = (n_non - np.searchsorted(non, thresholds, side="left")) / n_non
    return thresholds, p_miss, p_fa


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    Between the two adjacent operating points where ``p_miss - p_fa`` changes
    sign, rates and threshold are linearly interpolated.
    """
    thr, p_miss, p_fa = operating_points(scores, labels)
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i]), float(thr[i])
    alpha = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = p_miss[i - 1] + alpha * (p_miss[i] - p_miss[i - 1])
    threshold = thr[i - 1] + alpha * (thr[i] - thr[i - 1])
    return float(eer), float(threshold)


def compute_min_dcf(scores, labels, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all thresholds."""
    _, p_miss, p_fa = operating_points(scores, labels)
    dcf = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    return float(dcf.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))


def _segments(features, utts, frames, rng):
    out = []
    for u in utts:
        F = features[u]
        out.append(F.values if frames is None else mean_normalize(crop_or_duplicate(F, frames, rng)).values)
    return out


def evaluate_verification(
    trials: Sequence[Trial],
    features: Mapping[str, FeatureMatrix],
    embed_fn: EmbedFn,
    test_seconds: float | None = None,
    seed: int = 0,
    fcfg: FeatureConfig = FeatureConfig(),
    p_target: float = 0.01,
) -> VerificationReport:
    """Score trials with full-length enrollments and test utterances cropped to ``test_seconds``.

    ``test_seconds=None`` keeps test utterances at full length. Each test
    utterance is cropped once, in sorted utt_id order, from a generator
    seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    enroll_ids = sorted({t.enroll_utt for t in trials})
    test_ids = sorted({t.test_utt for t in trials})
    for u in enroll_ids + test_ids:
        if u not in features:
            raise InputError(f"no features for utterance {u}")
    frames = None if test_seconds is None else fcfg.frames_for_seconds(test_seconds)
    enroll = dict(zip(enroll_ids, embed_fn(_segments(features, enroll_ids, None, rng))))
    test = dict(zip(test_ids, embed_fn(_segments(features, test_ids, frames, rng))))
    scores = score_trials(trials, enroll, test)
    labels = np.array([t.label for t in trials])
    eer, thr = compute_eer(scores, labels)
    return VerificationReport(
        eer, thr, compute_min_dcf(scores, labels, p_target), int(labels.sum()), int((1 - labels).sum()), test_seconds, seed
    )


# -- identification ----------------------------------------------------------


def identify(enroll: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar enrollment for each query (lowest index on ties)."""
    e = np.asarray(enroll, dtype=np.float64)
    q = np.asarray(queries, dtype=np.float64)
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    return np.argmax(q @ e.T, axis=1)


def confidence_interval95(values: np.ndarray) -> float:
    """Normal-approximation half-width; NaN for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def evaluate_identification(
    manifest: Manifest,
    features: Mapping[str, FeatureMatrix],
    embed_fn: EmbedFn,
    n_way: int,
    episodes: int = 1000,
    enroll_seconds: float | None = 5.0,
    test_per_spk: int = 5,
    query_seconds: float | None = 1.0,
    rng: np.random.Generator | int = 0,
    fcfg: FeatureConfig = FeatureConfig(),
) -> IdentificationReport:
    """Mean N-way 1-shot identification accuracy over random episodes.

    Each episode draws ``n_way`` speakers and, per speaker, one enrollment
    utterance plus ``test_per_spk`` test utterances (with replacement only
    when the speaker has too few). Enrollments are cropped or self-tiled to
    ``enroll_seconds`` and tests to ``query_seconds``; ``None`` keeps the full
    utterance.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    speakers = manifest.speaker_ids
    if n_way > len(speakers):
        raise InputError(f"{n_way}-way identification needs {n_way} speakers, manifest has {len(speakers)}")
    if episodes < 1:
        raise InputError("episodes must be >= 1")
    e_frames = None if enroll_seconds is None else fcfg.frames_for_seconds(enroll_seconds)
    q_frames = None if query_seconds is None else fcfg.frames_for_seconds(query_seconds)
    accs = np.empty(episodes)
    for ep in range(episodes):
        chosen = [speakers[i] for i in rng.choice(len(speakers), size=n_way, replace=False)]
        enroll_utts, test_utts, truth = [], [], []
        for c, spk in enumerate(chosen):
            utts = manifest.speakers[spk]
            idx = rng.choice(len(utts), size=1 + test_per_spk, replace=len(utts) < 1 + test_per_spk)
            enroll_utts.append(utts[idx[0]])
            test_utts.extend(utts[i] for i in idx[1:])
            truth.extend([c] * test_per_spk)
        enroll = embed_fn(_segments(features, enroll_utts, e_frames, rng))
        tests = embed_fn(_segments(features, test_utts, q_frames, rng))
        accs[ep] = float(np.mean(identify(enroll, tests) == np.array(truth)))
    return IdentificationReport(n_way, query_seconds, float(accs.mean()), confidence_interval95(accs), episodes, seed, accs)


# -- report output -----------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return "full"
    if isinstance(x, float) and math.isnan(x):
        return "n/a"
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def format_verification_table(reports: Sequence[VerificationReport]) -> str:
    lines = [f"{'test_s':>8} {'EER%':>8} {'minDCF':>8} {'n_tar':>7} {'n_non':>7}"]
    for r in reports:
        lines.append(f"{_fmt(r.test_seconds):>8} {100 * r.eer:8.3f} {r.min_dcf:8.4f} {r.n_target:7d} {r.n_nontarget:7d}")
    return "\n".join(lines)


def format_identification_table(reports: Sequence[IdentificationReport]) -> str:
    lines = [f"{'n_way':>6} {'query_s':>8} {'acc%':>8} {'ci95%':>8} {'episodes':>9}"]
    for r in reports:
        ci = "n/a" if math.isnan(r.ci95) else f"{100 * r.ci95:.3f}"
        lines.append(f"{r.n_way:6d} {_fmt(r.query_seconds):>8} {100 * r.accuracy:8.3f} {ci:>8} {r.episodes:9d}")
    return "\n".join(lines)


def verification_rows(r: VerificationReport) -> list[tuple]:
    tag = _fmt(r.test_seconds)
    n = r.n_target + r.n_nontarget
    return [
        (f"eer@{tag}", repr(r.eer), n, r.seed),
        (f"eer_threshold@{tag}", repr(r.eer_threshold), n, r.seed),
        (f"min_dcf@{tag}", repr(r.min_dcf), n, r.seed),
    ]


def identification_rows(r: IdentificationReport) -> list[tuple]:
    tag = f"{r.n_way}way@{_fmt(r.query_seconds)}"
    ci = "n/a" if math.isnan(r.ci95) else repr(r.ci95)
    return [(f"accuracy@{tag}", repr(r.accuracy), r.episodes, r.seed), (f"ci95@{tag}", ci, r.episodes, r.seed)]


def write_report_csv(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "n", "seed"])
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
