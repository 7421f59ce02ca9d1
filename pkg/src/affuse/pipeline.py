"""Glue from a data directory to windows with context records."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .context import (
    CONTEXT_KINDS,
    EmbeddingCache,
    FaceDescription,
    GameRound,
    StubProvider,
    context_records,
    load_faces,
    load_rounds,
    window_sentences,
)
from .data import Window, load_streams, slide_windows
from .synth import SynthData


@dataclass
class Corpus:
    windows: list[Window]
    rounds: list[GameRound]
    faces: list[FaceDescription]


def load_corpus(data_dir, mode: str = "aggregate") -> Corpus:
    d = Path(data_dir)
    thermal, au, segments = load_streams(d)
    windows = slide_windows(thermal, au, segments, mode)
    rounds = load_rounds(d / "rounds.jsonl") if (d / "rounds.jsonl").exists() else []
    faces = load_faces(d / "faces.jsonl") if (d / "faces.jsonl").exists() else []
    return Corpus(windows, rounds, faces)


def corpus_from_synth(data: SynthData, mode: str = "aggregate") -> Corpus:
    return Corpus(slide_windows(data.thermal, data.au, data.segments, mode), data.rounds, data.faces)


def build_contexts(
    corpus: Corpus,
    kinds: Sequence[str] = CONTEXT_KINDS,
    provider=None,
    cache: EmbeddingCache | None = None,
    require_cached: bool = False,
) -> dict[str, list]:
    """Context records per kind, ready for ``attach_context``."""
    provider = provider or StubProvider()
    cache = cache if cache is not None else EmbeddingCache()
    out = {}
    for kind in kinds:
        sentences = window_sentences(corpus.windows, corpus.rounds, corpus.faces, kind)
        out[kind] = context_records(sentences, provider, cache, require_cached=require_cached)
    return out
