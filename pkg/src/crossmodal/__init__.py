"""Cross-modal music retrieval: symbolic notes, synthesized audio and chroma
features, subsequence DTW matching, symbolic fingerprints, online score
following and a toy snippet/excerpt embedding."""

__version__ = "0.1.0"

from .chroma import Chromagram, audio_chromagram, cyclic_shift, symbolic_chromagram
from .embedding import (CrossModalEmbedding, EmbedConfig, forward, gen_training_pair,
                        loss_gradient, majority_vote, ranking_loss, retrieve, train)
from .exceptions import DataError, NotInitialized
from .fingerprint import (FingerprintIdentifier, FingerprintIndex, build_index,
                          extract_fingerprints, hash_fingerprint, query_index)
from .follower import (Companion, CompanionConfig, TrackerState, companion_process,
                       run_concurrent, run_sequential, tracker_step)
from .matching import SubsequenceMatcher, local_minima, matching_function, rank_documents
from .notes_io import NoteEvent, NoteSequence, parse_midi, parse_note_csv, time_scale, transpose
from .synth import AudioBuffer, render_audio

__all__ = [
    "AudioBuffer", "Chromagram", "Companion", "CompanionConfig", "CrossModalEmbedding",
    "DataError", "EmbedConfig", "FingerprintIdentifier", "FingerprintIndex", "NoteEvent",
    "NoteSequence", "NotInitialized", "SubsequenceMatcher", "TrackerState", "audio_chromagram",
    "build_index", "companion_process", "cyclic_shift", "extract_fingerprints", "forward",
    "gen_training_pair", "hash_fingerprint", "local_minima", "loss_gradient", "majority_vote",
    "matching_function", "parse_midi", "parse_note_csv", "query_index", "rank_documents",
    "ranking_loss", "render_audio", "retrieve", "run_concurrent", "run_sequential",
    "symbolic_chromagram", "time_scale", "tracker_step", "train", "transpose",
]
