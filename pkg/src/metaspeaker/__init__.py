"""Meta-learned speaker embeddings for short test utterances.

Episodes pair long support segments with variable-length short queries; the
training objective mixes a prototypical episode loss with a classification
loss against learnable per-speaker prototypes.
"""

from metaspeaker.features import FeatureConfig, FeatureMatrix, Waveform, compute_logmel
from metaspeaker.manifest import Manifest, UtteranceRecord, scan_corpus, split_speakers
from metaspeaker.sampler import Episode, EpisodeConfig, sample_episode, sample_vanilla_batch
from metaspeaker.encoder import EncoderConfig, SpeakerEncoder
from metaspeaker.objective import LossConfig, combined_loss, episode_loss, global_loss
from metaspeaker.evaluation import compute_eer, compute_min_dcf, evaluate_identification

__version__ = "0.1.0"

__all__ = [
    "FeatureConfig",
    "FeatureMatrix",
    "Waveform",
    "compute_logmel",
    "Manifest",
    "UtteranceRecord",
    "scan_corpus",
    "split_speakers",
    "Episode",
    "EpisodeConfig",
    "sample_episode",
    "sample_vanilla_batch",
    "EncoderConfig",
    "SpeakerEncoder",
    "LossConfig",
    "combined_loss",
    "episode_loss",
    "global_loss",
    "compute_eer",
    "compute_min_dcf",
    "evaluate_identification",
]
