"""Context sentences and their 3072-d embeddings.

Two sentence kinds are built per window:

* GOC (game-only context): ``The person is playing a Pacman game with
  difficulty level: {difficulty}`` with an optional outcome clause.
* FC (full context): the GOC sentence, one space, then the facial
  description recorded at the window's last second.

Facial descriptions come from an upstream vision-language model and are
ingested as JSONL; this module never calls such a model. The producer is
expected to answer this prompt for each consecutive frame pair::

    Given two images, the first of the face at time t-1 and the second at
    time t, describe the current emotional state of the person in one brief
    sentence, considering the presence and intensities of facial expressions.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import CONTEXT_DIM, WINDOW_S, Window
from .errors import (
    AlignmentError,
    AmbiguityError,
    ContractViolationError,
    ParseError,
    ProviderError,
    ValidationError,
)

log = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "medium", "hard")
OUTCOMES = ("win", "loss")
CONTEXT_KINDS = ("goc", "fc")

GOC_TEMPLATE = "The person is playing a Pacman game with difficulty level: {difficulty}"
OUTCOME_TEMPLATE = " and the round outcome was: {outcome}"


@dataclass(frozen=True)
class GameRound:
    participant_id: str
    window_start_s: int
    difficulty: str
    outcome: str | None = None

    def __post_init__(self):
        if self.difficulty not in DIFFICULTIES:
            raise ValidationError(f"difficulty {self.difficulty!r} not in {DIFFICULTIES}")
        if self.outcome is not None and self.outcome not in OUTCOMES:
            raise ValidationError(f"outcome {self.outcome!r} not in {OUTCOMES}")


@dataclass(frozen=True)
class FaceDescription:
    participant_id: str
    timestamp_s: int
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError(f"empty face description for {self.participant_id!r} at t={self.timestamp_s}")
        if "\n" in self.text or "\r" in self.text:
            raise ValidationError(f"face description for {self.participant_id!r} at t={self.timestamp_s} spans lines")


@dataclass(frozen=True)
class ContextEmbedding:
    sentence: str
    vector: np.ndarray
    provider_id: str
    content_hash: str


def content_hash(sentence: str) -> str:
    return hashlib.sha256(sentence.encode("utf-8")).hexdigest()


def build_goc_sentence(round_: GameRound) -> str:
    sentence = GOC_TEMPLATE.format(difficulty=round_.difficulty)
    if round_.outcome is not None:
        sentence += OUTCOME_TEMPLATE.format(outcome=round_.outcome)
    return sentence


def build_fc_sentence(round_: GameRound, face: FaceDescription) -> str:
    if not face.text.strip():
        raise ValidationError("face description must be non-empty")
    return build_goc_sentence(round_) + " " + face.text


# ---------------------------------------------------------------------------
# JSONL ingestion


def _read_jsonl(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path, lineno) from None


def load_rounds(path) -> list[GameRound]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(GameRound(str(obj["participant_id"]), int(obj["window_start_s"]),
                                 obj["difficulty"], obj.get("outcome")))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad game-round record: {exc}", path, lineno) from None
    return out


def load_faces(path) -> list[FaceDescription]:
    out = []
    for lineno, obj in _read_jsonl(path):
        try:
            out.append(FaceDescription(str(obj["participant_id"]), int(obj["timestamp_s"]), obj["text"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad face-description record: {exc}", path, lineno) from None
        except ValidationError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return out


def write_rounds(rounds: Iterable[GameRound], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rounds:
            fh.write(json.dumps({"participant_id": r.participant_id, "window_start_s": r.window_start_s,
                                 "difficulty": r.difficulty, "outcome": r.outcome}) + "\n")


def write_faces(faces: Iterable[FaceDescription], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in faces:
            fh.write(json.dumps({"participant_id": f.participant_id, "timestamp_s": f.timestamp_s,
                                 "text": f.text}) + "\n")


def window_sentences(
    windows: Sequence[Window],
    rounds: Sequence[GameRound],
    faces: Sequence[FaceDescription] | None,
    kind: str,
) -> dict[tuple[str, int], str]:
    """One context sentence per window key.

    GOC uses the round keyed by the window start. FC additionally takes the
    face description at the window's last second.
    """
    if kind not in CONTEXT_KINDS:
        raise ValidationError(f"unknown context kind {kind!r}; expected one of {CONTEXT_KINDS}")
    round_by: dict[tuple[str, int], GameRound] = {}
    for r in rounds:
        key = (r.participant_id, r.window_start_s)
        if key in round_by:
            raise AmbiguityError(f"more than one game round for {key[0]!r} at t={key[1]}")
        round_by[key] = r
    face_by: dict[tuple[str, int], FaceDescription] = {}
    if kind == "fc":
        for f in faces or ():
            key = (f.participant_id, f.timestamp_s)
            if key in face_by:
                raise AmbiguityError(f"more than one face description for {key[0]!r} at t={key[1]}")
            face_by[key] = f

    out, missing = {}, []
    for w in windows:
        r = round_by.get(w.key)
        if r is None:
            missing.append(f"{w.participant_id}@{w.start_s} (round)")
            continue
        if kind == "goc":
            out[w.key] = build_goc_sentence(r)
            continue
        face = face_by.get((w.participant_id, w.start_s + WINDOW_S - 1))
        if face is None:
            missing.append(f"{w.participant_id}@{w.start_s + WINDOW_S - 1} (face)")
            continue
        out[w.key] = build_fc_sentence(r, face)
    if missing:
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise AlignmentError(f"{len(missing)} windows lack context inputs: {', '.join(missing[:20])}{more}")
    return out


# ---------------------------------------------------------------------------
# providers


class EmbeddingProvider(Protocol):
    provider_id: str
    max_batch: int

    def embed_batch(self, sentences: Sequence[str]) -> list[np.ndarray]: ...


def stub_embed(sentence: str) -> np.ndarray:
    """Deterministic unit-norm stand-in for a text embedding."""
    digest = hashlib.sha256(sentence.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(CONTEXT_DIM)
    return v / np.linalg.norm(v)


class StubProvider:
    provider_id = "stub-sha256-normal-v1"
    max_batch = 128

    def __init__(self):
        self.calls = 0

    def embed_batch(self, sentences):
        self.calls += 1
        return [stub_embed(s) for s in sentences]


class RemoteProvider:
    """Client for an OpenAI-style ``/embeddings`` endpoint.

    Request body ``{"model": ..., "input": [...]}``; response
    ``{"data": [{"index": i, "embedding": [...]}, ...]}``.
    """

    def __init__(self, url: str | None = None, token: str | None = None, model: str = "text-embedding-3-large",
                 max_batch: int = 128, retries: int = 3, backoff_s: float = 0.5, timeout_s: float = 60.0,
                 client=None):
        import httpx

        self.url = url or os.environ.get("EMBED_URL")
        self.token = token if token is not None else os.environ.get("EMBED_TOKEN")
        if not self.url:
            raise ProviderError("no embedding endpoint configured; set EMBED_URL")
        self.model = model
        self.max_batch = max_batch
        self.retries = retries
        self.backoff_s = backoff_s
        self.client = client or httpx.Client(timeout=timeout_s)
        self.provider_id = f"remote:{model}"
        self.calls = 0
        self._sleep = time.sleep

    def embed_batch(self, sentences):
        import httpx

        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        body = {"model": self.model, "input": list(sentences)}
        last_exc = None
        for attempt in range(self.retries + 1):
            self.calls += 1
            try:
                resp = self.client.post(self.url, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                payload = resp.json()
                break
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last_exc = exc
                status = getattr(getattr(exc, "response", None), "status_code", None)
                if status is not None and status < 500 and status != 429:
                    raise ProviderError(f"embedding request rejected: {exc}") from exc
                if attempt < self.retries:
                    delay = self.backoff_s * 2 ** attempt
                    log.warning("embedding request failed (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                    self._sleep(delay)
        else:
            raise ProviderError(f"embedding request failed after {self.retries} retries: {last_exc}")
        return _parse_response(payload, len(sentences))


def _parse_response(payload, n: int) -> list[np.ndarray]:
    try:
        items = payload["data"]
        vectors: list[np.ndarray | None] = [None] * n
        for item in items:
            idx = int(item["index"])
            vectors[idx] = np.asarray(item["embedding"], dtype=np.float64)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ContractViolationError(f"malformed embedding response: {exc!r}") from None
    for i, v in enumerate(vectors):
        if v is None:
            raise ContractViolationError(f"response missing index {i}")
        if v.shape != (CONTEXT_DIM,):
            raise ContractViolationError(f"embedding {i} has length {v.size}, expected {CONTEXT_DIM}")
        if not np.all(np.isfinite(v)):
            raise ContractViolationError(f"embedding {i} has non-finite entries")
    return vectors


# ---------------------------------------------------------------------------
# cache


class EmbeddingCache:
    """Append-only JSONL cache keyed by (provider_id, sha256(sentence)).

    Floats round-trip exactly through ``json`` (shortest repr), so cached
    vectors come back bitwise equal. Writes are serialized by a lock.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._mem: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    vec = np.asarray(obj["vector"], dtype=np.float64)
                    key = (obj["provider_id"], obj["hash"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ParseError(f"bad cache record: {exc}", self.path, lineno) from None
                if vec.shape != (CONTEXT_DIM,):
                    raise ParseError(f"cached vector has length {vec.size}", self.path, lineno)
                self._mem[key] = vec

    def __len__(self):
        return len(self._mem)

    def get(self, provider_id: str, digest: str) -> np.ndarray | None:
        return self._mem.get((provider_id, digest))

    def put(self, provider_id: str, digest: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        with self._lock:
            if (provider_id, digest) in self._mem:
                return
            self._mem[(provider_id, digest)] = vector
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(json.dumps({"hash": digest, "provider_id": provider_id,
                                         "vector": vector.tolist()}) + "\n")


def embed(
    sentences: Sequence[str],
    provider,
    cache: EmbeddingCache | None = None,
    batch_size: int | None = None,
    workers: int = 4,
) -> list[ContextEmbedding]:
    """Embed ``sentences`` in order, consulting and filling ``cache``.

    Only sentences absent from the cache reach the provider; duplicates in
    the input are requested once.
    """
    cache = cache if cache is not None else EmbeddingCache()
    limit = min(batch_size or provider.max_batch, provider.max_batch)
    hashes = [content_hash(s) for s in sentences]
    todo: dict[str, str] = {}
    for s, h in zip(sentences, hashes):
        if cache.get(provider.provider_id, h) is None and h not in todo:
            todo[h] = s
    pending = list(todo.items())
    batches = [pending[i:i + limit] for i in range(0, len(pending), limit)]

    def run(batch):
        vectors = provider.embed_batch([s for _, s in batch])
        if len(vectors) != len(batch):
            raise ContractViolationError(f"provider returned {len(vectors)} vectors for {len(batch)} inputs")
        for (h, _), v in zip(batch, vectors):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (CONTEXT_DIM,) or not np.all(np.isfinite(v)):
                raise ContractViolationError(f"provider returned a vector of shape {v.shape} (finite={np.all(np.isfinite(v))})")
            cache.put(provider.provider_id, h, v)

    if len(batches) > 1 and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for _ in pool.map(run, batches):
                pass
    else:
        for b in batches:
            run(b)

    return [ContextEmbedding(s, cache.get(provider.provider_id, h), provider.provider_id, h)
            for s, h in zip(sentences, hashes)]


def context_records(
    sentences: dict[tuple[str, int], str],
    provider,
    cache: EmbeddingCache,
    require_cached: bool = False,
) -> list[tuple[tuple[str, int], np.ndarray]]:
    """Map window keys to embedding vectors, suitable for ``attach_context``.

    With ``require_cached`` the provider is never called and missing entries
    raise AlignmentError.
    """
    keys = list(sentences)
    if require_cached:
        out, missing = [], 0
        for k in keys:
            v = cache.get(provider.provider_id, content_hash(sentences[k]))
            if v is None:
                missing += 1
            else:
                out.append((k, v))
        if missing:
            raise AlignmentError(f"{missing} context sentences have no cached embedding; run the embed step first")
        return out
    embs = embed([sentences[k] for k in keys], provider, cache)
    return [(k, e.vector) for k, e in zip(keys, embs)]
