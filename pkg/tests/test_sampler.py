import numpy as np
import pytest
from scipy import stats

from fakes import make_corpus

from metaspeaker.errors import ConfigError, InputError
from metaspeaker.features import FeatureConfig, FeatureMatrix
from metaspeaker.manifest import Manifest, UtteranceRecord
from metaspeaker.sampler import EpisodeConfig, EpisodeSampler, sample_episode, sample_vanilla_batch

FCFG = FeatureConfig()


def test_default_episode_sizes():
    m, feats = make_corpus(120, 3)
    ep = sample_episode(m, feats, EpisodeConfig(), np.random.default_rng(0))
    assert len(ep.support) == 100
    assert len(ep.query) == 200


def test_frame_ranges():
    assert EpisodeConfig().frame_ranges(FCFG) == (198, 98, 198)


def test_support_and_query_lengths():
    m, feats = make_corpus(12, 4)
    ep = sample_episode(m, feats, EpisodeConfig(n_way=10), np.random.default_rng(1))
    assert set(ep.support_lengths) == {198}
    assert ep.query_lengths.min() >= 98 and ep.query_lengths.max() <= 198


def test_label_balance_and_mapping():
    m, feats = make_corpus(15, 5)
    cfg = EpisodeConfig(n_way=7, k_shot=2, m_query=3)
    index = m.speaker_index()
    for seed in range(10):
        ep = sample_episode(m, feats, cfg, np.random.default_rng(seed))
        assert np.all(np.bincount(ep.support_labels, minlength=7) == 2)
        assert np.all(np.bincount(ep.query_labels, minlength=7) == 3)
        assert len(set(ep.speakers)) == 7
        # local -> global is a bijection onto the sampled speakers
        mapping = {}
        for loc, glob in zip(np.r_[ep.support_labels, ep.query_labels], np.r_[ep.support_global, ep.query_global]):
            assert mapping.setdefault(int(loc), int(glob)) == glob
        assert sorted(mapping.values()) == sorted(index[s] for s in ep.speakers)
        assert [mapping[i] for i in range(7)] == [index[s] for s in ep.speakers]


def test_segments_are_mean_normalized():
    m, feats = make_corpus(6, 3)
    ep = sample_episode(m, feats, EpisodeConfig(n_way=5), np.random.default_rng(2))
    for seg in ep.support + ep.query:
        assert np.all(np.abs(seg.mean(axis=1)) < 1e-5)


def test_query_length_uniformity():
    m, feats = make_corpus(8, 4)
    cfg = EpisodeConfig(n_way=5, k_shot=1, m_query=2)
    sampler = EpisodeSampler(m, feats, cfg, FCFG, seed=42)
    lengths = []
    while len(lengths) < 10_000:
        lengths.extend(sampler.episode().query_lengths.tolist())
    lengths = np.array(lengths[:10_000])
    counts = np.bincount(lengths - 98, minlength=101)
    assert counts.size == 101
    p = stats.chisquare(counts).pvalue
    assert p > 0.01


def test_imbalance_guarantee():
    m, feats = make_corpus(8, 4)
    for seed in range(20):
        ep = sample_episode(m, feats, EpisodeConfig(n_way=6, m_query=3), np.random.default_rng(seed))
        assert ep.support_lengths.min() >= ep.query_lengths.max()


def test_episode_determinism():
    m, feats = make_corpus(12, 4)
    a = sample_episode(m, feats, EpisodeConfig(n_way=10), np.random.default_rng(9))
    b = sample_episode(m, feats, EpisodeConfig(n_way=10), np.random.default_rng(9))
    assert a.speakers == b.speakers
    for x, y in zip(a.support + a.query, b.support + b.query):
        np.testing.assert_array_equal(x, y)


def test_with_replacement_fallback():
    m, feats = make_corpus(4, 1)
    ep = sample_episode(m, feats, EpisodeConfig(n_way=4, k_shot=1, m_query=2), np.random.default_rng(0))
    assert len(ep.query) == 8


def test_too_few_speakers():
    m, feats = make_corpus(5, 2)
    with pytest.raises(InputError, match="10.*5"):
        sample_episode(m, feats, EpisodeConfig(n_way=10), np.random.default_rng(0))


def test_config_invariants():
    with pytest.raises(ConfigError):
        EpisodeConfig(n_way=1)
    with pytest.raises(ConfigError):
        EpisodeConfig(query_seconds_max=3.0)
    with pytest.raises(ConfigError):
        EpisodeConfig(query_seconds_min=0.0)
    with pytest.raises(ConfigError):
        EpisodeConfig(m_query=0)


def test_vanilla_batch():
    m, feats = make_corpus(6, 3)
    segs, gids = sample_vanilla_batch(m, feats, 64, 2.0, np.random.default_rng(0))
    assert segs.shape == (64, 40, 198)
    assert gids.min() >= 0 and gids.max() < 6
    again, gids2 = sample_vanilla_batch(m, feats, 64, 2.0, np.random.default_rng(0))
    np.testing.assert_array_equal(segs, again)
    np.testing.assert_array_equal(gids, gids2)
    one, _ = sample_vanilla_batch(m, feats, 1, 2.0, np.random.default_rng(0))
    assert one.shape == (1, 40, 198)


def test_vanilla_batch_errors():
    with pytest.raises(InputError):
        sample_vanilla_batch(Manifest(()), {}, 4, 2.0, np.random.default_rng(0))
    m, feats = make_corpus(2, 2)
    with pytest.raises(InputError):
        sample_vanilla_batch(m, feats, 0, 2.0, np.random.default_rng(0))
