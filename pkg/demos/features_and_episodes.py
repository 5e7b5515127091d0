"""
From waveforms to an imbalanced-length episode
==============================================

Synthesize a few speakers, turn their audio into 40-band log-mel features
and draw one training episode: long (2 s) supports, short queries whose
length varies between 1 and 2 s.
"""

import tempfile

import numpy as np

from metaspeaker import EpisodeConfig, FeatureConfig, compute_logmel, sample_episode
from metaspeaker.features import read_wav
from metaspeaker.manifest import FeatureStore
from metaspeaker.synthetic import SyntheticSpec, generate

## A small corpus: 6 speakers, 4 utterances each
root = tempfile.mkdtemp()
manifest = generate(SyntheticSpec(n_speakers=6, utterances_per_speaker=4, noise_level=1.0, seed=0), root)
print(f"{len(manifest)} utterances from {len(manifest.speakers)} speakers under {root}")

## Features for a single utterance
fcfg = FeatureConfig()
record = manifest.records[0]
wave = read_wav(record.path)
feats = compute_logmel(wave, fcfg)
print(f"{record.utt_id}: {len(wave.samples) / wave.sample_rate:.2f} s -> {feats.values.shape} (mels x frames)")
# every band has zero mean over time after normalization
print("max |band mean|:", np.abs(feats.values.mean(axis=1)).max())

## One 3-way episode with 1 support and 3 queries per speaker
store = FeatureStore(manifest, fcfg)
cfg = EpisodeConfig(n_way=3, k_shot=1, m_query=3)
episode = sample_episode(manifest, store, cfg, np.random.default_rng(7))
print("speakers:", episode.speakers)
print("support frames:", episode.support_lengths.tolist())
print("query frames:  ", episode.query_lengths.tolist())
print("query labels:  ", episode.query_labels.tolist())
