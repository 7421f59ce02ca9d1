"""Synthetic participants with a planted label -> signal mapping.

Each class owns a disjoint slice of every modality: class c warms ROI c,
raises AU group c, and draws face descriptions from pool c. Signal strength
per modality scales the planted effect; at 0 the modality carries no label
information.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .context import DIFFICULTIES, FaceDescription, GameRound, write_faces, write_rounds
from .data import (
    AUS,
    LABELS,
    ROIS,
    WINDOW_S,
    AuFrame,
    LabeledSegment,
    ThermalFrame,
    write_au_csv,
    write_labels_csv,
    write_thermal_csv,
)
from .errors import ConfigurationError

BASE_TEMPS = np.array([34.0, 34.6, 33.8, 33.2])  # nose, forehead, cheek, lower lip
THERMAL_EFFECT_C = 1.0
AU_BASE = 1.0
AU_EFFECT = 1.5
# AU columns carrying each class's signal; the last two AUs stay uninformative
AU_GROUPS = (range(0, 4), range(4, 8), range(8, 12), range(12, 16))

FACE_POOLS = {
    "baseline": (
        "with a relaxed and neutral expression",
        "with a calm face and steady gaze",
        "with a composed, expressionless look",
        "looking attentive with no strong emotion",
    ),
    "enjoyment": (
        "with a broad smile and raised cheeks",
        "with a look of wonder or amazement with raised eyebrows",
        "laughing with visible delight",
        "with bright eyes and a cheerful grin",
    ),
    "boredom": (
        "with drooping eyelids and a blank stare",
        "yawning with a disengaged look",
        "with a slack jaw and wandering gaze",
        "resting the face with a listless expression",
    ),
    "frustration": (
        "with furrowed brows and pressed lips",
        "with a tense jaw and narrowed eyes",
        "frowning with clear irritation",
        "with lowered brows and a tight grimace",
    ),
}
ALL_FACES = tuple(s for pool in FACE_POOLS.values() for s in pool)

FILES = ("thermal.csv", "au.csv", "labels.csv", "rounds.jsonl", "faces.jsonl")


@dataclass(frozen=True)
class SynthSpec:
    participants: int = 29
    seconds_per_participant: int = 240
    label_block_s: int = 30
    signal_strength: dict = field(default_factory=lambda: {"thermal": 1.0, "au": 1.0, "context": 1.0})
    noise_std: float = 0.5
    participant_offset_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.participants < 1:
            raise ConfigurationError("participants must be >= 1")
        if self.label_block_s < WINDOW_S:
            raise ConfigurationError(f"label_block_s must be >= {WINDOW_S}")
        if self.seconds_per_participant <= 0 or self.seconds_per_participant % self.label_block_s:
            raise ConfigurationError("seconds_per_participant must be a positive multiple of label_block_s")
        strength = {"thermal": 1.0, "au": 1.0, "context": 1.0}
        unknown = set(self.signal_strength) - set(strength)
        if unknown:
            raise ConfigurationError(f"unknown signal_strength keys {sorted(unknown)}")
        strength.update({k: float(v) for k, v in self.signal_strength.items()})
        for k, v in strength.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"signal_strength[{k}]={v} outside [0, 1]")
        object.__setattr__(self, "signal_strength", strength)
        if self.noise_std < 0 or self.participant_offset_std < 0:
            raise ConfigurationError("noise levels must be nonnegative")

    def participant_ids(self) -> list[str]:
        width = max(2, len(str(self.participants)))
        return [f"P{i + 1:0{width}d}" for i in range(self.participants)]


@dataclass
class SynthData:
    thermal: list[ThermalFrame]
    au: list[AuFrame]
    segments: list[LabeledSegment]
    rounds: list[GameRound]
    faces: list[FaceDescription]


def _q(x: float) -> float:
    # values are stored at 6 significant digits so memory and file agree
    return float(format(x, ".6g"))


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    s_th = spec.signal_strength["thermal"]
    s_au = spec.signal_strength["au"]
    s_ctx = spec.signal_strength["context"]
    n_blocks = spec.seconds_per_participant // spec.label_block_s
    out = SynthData([], [], [], [], [])

    for p_index, pid in enumerate(spec.participant_ids()):
        th_offset = rng.normal(0.0, spec.participant_offset_std, size=len(ROIS))
        au_offset = rng.normal(0.0, spec.participant_offset_std, size=len(AUS))
        for b in range(n_blocks):
            label_idx = (b + p_index) % len(LABELS)
            label = LABELS[label_idx]
            start = b * spec.label_block_s
            end = start + spec.label_block_s
            out.segments.append(LabeledSegment(pid, start, end, label))
            # constant per participant: anything tied to block position would leak the
            # round-robin label order across held-out groups
            difficulty = DIFFICULTIES[p_index % len(DIFFICULTIES)]
            outcome = None

            th_mean = BASE_TEMPS + th_offset
            th_mean[label_idx] += s_th * THERMAL_EFFECT_C
            au_mean = AU_BASE + au_offset
            au_mean[list(AU_GROUPS[label_idx])] += s_au * AU_EFFECT

            for t in range(start, end):
                temps = th_mean + rng.normal(0.0, spec.noise_std, size=len(ROIS))
                temps = np.clip(temps, 20.0, 45.0)
                aus = np.clip(au_mean + rng.normal(0.0, spec.noise_std, size=len(AUS)), 0.0, 5.0)
                out.thermal.append(ThermalFrame(pid, t, tuple(_q(v) for v in temps)))
                out.au.append(AuFrame(pid, t, tuple(_q(v) for v in aus)))
                out.rounds.append(GameRound(pid, t, difficulty, outcome))
                if rng.random() < s_ctx:
                    pool = FACE_POOLS[label]
                else:
                    pool = ALL_FACES
                out.faces.append(FaceDescription(pid, t, pool[int(rng.integers(len(pool)))]))
    return out


def write(data: SynthData, out_dir) -> dict[str, Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {name: d / name for name in FILES}
    write_thermal_csv(data.thermal, paths["thermal.csv"])
    write_au_csv(data.au, paths["au.csv"])
    write_labels_csv(data.segments, paths["labels.csv"])
    write_rounds(data.rounds, paths["rounds.jsonl"])
    write_faces(data.faces, paths["faces.jsonl"])
    return paths


def expected_window_count(spec: SynthSpec) -> int:
    """Windows per participant: each label block yields block - 6 windows."""
    n_blocks = spec.seconds_per_participant // spec.label_block_s
    return spec.participants * n_blocks * (spec.label_block_s - WINDOW_S + 1)
