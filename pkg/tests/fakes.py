"""Small in-memory corpora for tests that do not need real audio."""

import numpy as np

from metaspeaker.features import FeatureMatrix
from metaspeaker.manifest import Manifest, UtteranceRecord


def make_corpus(n_speakers, per, frames=(150, 700), seed=0, n_mels=40, prefix="s"):
    rng = np.random.default_rng(seed)
    recs, feats = [], {}
    for s in range(n_speakers):
        for u in range(per):
            utt = f"{prefix}{s:03d}-u{u}"
            recs.append(UtteranceRecord(utt, f"{prefix}{s:03d}", f"/x/{utt}.wav", 16000, 16000))
            T = int(rng.integers(*frames))
            feats[utt] = FeatureMatrix(rng.standard_normal((n_mels, T)))
    return Manifest(tuple(recs)), feats
