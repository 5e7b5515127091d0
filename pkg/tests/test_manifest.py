import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaspeaker.errors import InputError
from metaspeaker.features import FeatureConfig, FeatureMatrix, Waveform, write_wav
from metaspeaker.manifest import (
    FeatureStore,
    Manifest,
    UtteranceRecord,
    dump_embeddings,
    read_embedding_dump,
    scan_corpus,
    split_speakers,
)


def _tree(root, layout):
    for rel in layout:
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        write_wav(p, Waveform(np.random.default_rng(len(rel)).uniform(-0.5, 0.5, 1600), 16000))


def _manifest(n_speakers, per=2):
    recs = [
        UtteranceRecord(f"s{s:02d}-u{u}", f"s{s:02d}", f"/x/s{s:02d}/u{u}.wav", 16000, 16000)
        for s in range(n_speakers)
        for u in range(per)
    ]
    return Manifest(tuple(recs))


def test_scan_counts(tmp_path):
    _tree(tmp_path, [f"spk{s}/utt{u}.wav" for s in range(3) for u in range(2)])
    m = scan_corpus(tmp_path)
    assert len(m) == 6
    assert m.speaker_ids == ["spk0", "spk1", "spk2"]
    assert all(len(v) == 2 for v in m.speakers.values())
    assert [r.utt_id for r in m] == sorted(r.utt_id for r in m)
    assert m["spk1-utt0"].num_samples == 1600


def test_scan_empty_root(tmp_path):
    with pytest.raises(InputError, match="no speakers found"):
        scan_corpus(tmp_path)


def test_scan_missing_root(tmp_path):
    with pytest.raises(InputError):
        scan_corpus(tmp_path / "nope")


def test_duplicate_file_names_get_distinct_ids(tmp_path):
    _tree(tmp_path, ["a/sess1/x.wav", "b/sess1/x.wav", "a/sess2/x.wav"])
    m = scan_corpus(tmp_path)
    assert sorted(r.utt_id for r in m) == ["a-sess1-x", "a-sess2-x", "b-sess1-x"]
    assert m["a-sess2-x"].speaker_id == "a"


def test_unreadable_file_is_skipped(tmp_path):
    _tree(tmp_path, ["a/1.wav", "b/1.wav"])
    (tmp_path / "b" / "broken.wav").write_bytes(b"not a wav file")
    m = scan_corpus(tmp_path)
    assert len(m) == 2
    assert m.skipped == 1


def test_manifest_round_trip(tmp_path):
    m = _manifest(4, 3)
    m.save(tmp_path / "m.tsv")
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert len(lines) == 12
    assert lines[0].split("\t") == ["s00-u0", "s00", "/x/s00/u0.wav", "16000", "16000"]
    assert Manifest.load(tmp_path / "m.tsv") == m


def test_duplicate_utt_ids_rejected():
    r = UtteranceRecord("a", "s", "/p", 10, 16000)
    with pytest.raises(InputError):
        Manifest((r, r))


def test_split_sizes_and_disjoint():
    train, test = split_speakers(_manifest(10), 0.8, seed=0)
    assert len(train.speakers) == 8 and len(test.speakers) == 2
    assert not set(train.speakers) & set(test.speakers)


def test_split_deterministic():
    a = split_speakers(_manifest(10), 0.8, seed=5)
    b = split_speakers(_manifest(10), 0.8, seed=5)
    assert a == b


def test_split_three_speakers_half():
    train, test = split_speakers(_manifest(3), 0.5, seed=1)
    assert (len(train.speakers), len(test.speakers)) == (1, 2)
    assert set(train.speakers) | set(test.speakers) == {"s00", "s01", "s02"}


def test_split_needs_two_speakers():
    with pytest.raises(InputError):
        split_speakers(_manifest(1), 0.5, seed=0)
    with pytest.raises(InputError):
        split_speakers(_manifest(4), 1.0, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.floats(0.01, 0.99), st.integers(0, 10**6))
def test_split_partition_property(n, frac, seed):
    m = _manifest(n, 1)
    train, test = split_speakers(m, frac, seed)
    assert set(train.speakers).isdisjoint(test.speakers)
    assert set(train.speakers) | set(test.speakers) == set(m.speakers)
    assert len(train) + len(test) == len(m)
    assert len(train.speakers) >= 1 and len(test.speakers) >= 1


# -- feature store and embedding dumps ------------------------------------------


def test_feature_store_cache(tmp_path, toy_corpus):
    _, m = toy_corpus
    store = FeatureStore(m, FeatureConfig(), tmp_path / "cache")
    utt = m.records[0].utt_id
    F = store[utt]
    assert F.n_mels == 40
    assert (tmp_path / "cache" / f"{utt}.npz").exists()
    again = FeatureStore(m, FeatureConfig(), tmp_path / "cache", compute_missing=False)[utt]
    assert again.values.tobytes() == F.values.tobytes()
    with pytest.raises(InputError, match=m.records[1].utt_id):
        FeatureStore(m, FeatureConfig(), tmp_path / "cache", compute_missing=False)[m.records[1].utt_id]


def _fake_embed(segments):
    # deterministic 256-dim summary of each segment
    out = []
    for s in segments:
        v = np.asarray(s.values if isinstance(s, FeatureMatrix) else s)
        out.append(np.resize(np.concatenate([v.mean(axis=1), v.std(axis=1)]), 256))
    return np.stack(out)


def test_dump_embeddings(tmp_path, toy_corpus):
    _, m = toy_corpus
    sub = m.subset(m.speaker_ids[:3])
    sub = Manifest(sub.records[:6])
    store = FeatureStore(sub)
    n = dump_embeddings(sub, _fake_embed, store, tmp_path / "emb.txt")
    assert n == 6
    lines = (tmp_path / "emb.txt").read_text().splitlines()
    assert lines[0] == "utt_id speaker_id dim=256"
    assert len(lines) == 7
    assert all(len(ln.split()) == 258 for ln in lines[1:])
    utts, spks, X = read_embedding_dump(tmp_path / "emb.txt")
    assert utts == [r.utt_id for r in sub]
    assert spks == [r.speaker_id for r in sub]
    np.testing.assert_allclose(X, _fake_embed([store[u] for u in utts]), rtol=1e-8)
    first = (tmp_path / "emb.txt").read_bytes()
    dump_embeddings(sub, _fake_embed, store, tmp_path / "emb.txt")
    assert (tmp_path / "emb.txt").read_bytes() == first


def test_dump_empty_manifest(tmp_path):
    n = dump_embeddings(Manifest(()), _fake_embed, {}, tmp_path / "e.txt")
    assert n == 0
    assert (tmp_path / "e.txt").read_text() == "utt_id speaker_id dim=256\n"


def test_dump_missing_features(tmp_path):
    m = _manifest(1, 1)
    with pytest.raises(InputError, match="s00-u0"):
        dump_embeddings(m, _fake_embed, {}, tmp_path / "e.txt")
