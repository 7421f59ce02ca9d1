"""Feature-stream ingestion, 7-second windowing and group splits.

Streams are sampled on a 1 Hz grid. A window starting at second ``t`` covers
``t .. t+6`` and is kept only when both the thermal and AU streams have every
one of those seconds and a single labeled segment contains all of them.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    AmbiguityError,
    ConfigurationError,
    DimensionError,
    DuplicateError,
    ParseError,
    ValidationError,
)

WINDOW_S = 7
CONTEXT_DIM = 3072

LABELS = ("baseline", "enjoyment", "boredom", "frustration")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

ROIS = ("nose", "forehead", "cheek", "lowerlip")
AUS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45)
METRICS = ("avg", "change", "max", "min")

THERMAL_HEADER = ["participant_id", "timestamp_s"] + [f"{r}_c" for r in ROIS]
AU_HEADER = ["participant_id", "timestamp_s"] + [f"au{n:02d}" for n in AUS]
LABEL_HEADER = ["participant_id", "start_s", "end_s", "label"]

TEMP_BAND = (20.0, 45.0)
AU_BAND = (0.0, 5.0)

MODES = ("aggregate", "sequence")


@dataclass(frozen=True)
class ThermalFrame:
    participant_id: str
    timestamp_s: int
    roi_temps: tuple[float, float, float, float]


@dataclass(frozen=True)
class AuFrame:
    participant_id: str
    timestamp_s: int
    au_intensities: tuple[float, ...]


@dataclass(frozen=True)
class LabeledSegment:
    participant_id: str
    start_s: int
    end_s: int  # exclusive
    label: str

    @property
    def label_index(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass(frozen=True)
class WindowMetrics:
    avg: np.ndarray
    change: np.ndarray
    max: np.ndarray
    min: np.ndarray

    def as_vector(self) -> np.ndarray:
        """Channel-major layout: [ch0 avg, ch0 change, ch0 max, ch0 min, ch1 avg, ...]."""
        return np.stack([self.avg, self.change, self.max, self.min], axis=-1).reshape(-1)


@dataclass
class Window:
    participant_id: str
    start_s: int
    label: int
    thermal_tokens: np.ndarray
    au_tokens: np.ndarray
    mode: str = "aggregate"
    context_embedding: np.ndarray | None = None
    context_present: bool = False
    length_s: int = WINDOW_S

    @property
    def group(self) -> str:
        return self.participant_id

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.start_s)


# ---------------------------------------------------------------------------
# CSV ingestion


def _open_rows(path, header: list[str]):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError("missing header", path, 1) from None
        if [h.strip() for h in first] != header:
            raise ParseError(f"header {first} does not match {header}", path, 1)
        rows = [(reader.line_num, row) for row in reader if row]
    return path, rows


def _parse_float(text: str, path, line, column) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", path, line) from None
    return value


def _parse_int(text: str, path, line, column) -> int:
    try:
        value = int(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as an integer", path, line) from None
    return value


def _check_duplicates(items, path):
    seen: dict[tuple[str, int], int] = {}
    for line, frame in items:
        key = (frame.participant_id, frame.timestamp_s)
        if key in seen:
            raise DuplicateError(
                f"duplicate frame for participant {key[0]!r} at t={key[1]} (lines {seen[key]} and {line})",
                path,
                line,
            )
        seen[key] = line


def load_thermal_csv(path) -> list[ThermalFrame]:
    path, rows = _open_rows(path, THERMAL_HEADER)
    out = []
    for line, row in rows:
        if len(row) != len(THERMAL_HEADER):
            raise ParseError(f"expected {len(THERMAL_HEADER)} fields, got {len(row)}", path, line)
        pid = row[0].strip()
        if not pid:
            raise ParseError("empty participant_id", path, line)
        ts = _parse_int(row[1], path, line, "timestamp_s")
        if ts < 0:
            raise ValidationError(f"{path}:{line}: negative timestamp {ts}")
        temps = tuple(_parse_float(v, path, line, c) for v, c in zip(row[2:], THERMAL_HEADER[2:]))
        for name, t in zip(THERMAL_HEADER[2:], temps):
            if not (math.isfinite(t) and TEMP_BAND[0] <= t <= TEMP_BAND[1]):
                raise ValidationError(f"{path}:{line}: {name}={t} outside {TEMP_BAND} degC")
        out.append((line, ThermalFrame(pid, ts, temps)))
    _check_duplicates(out, path)
    return sorted((f for _, f in out), key=lambda f: (f.participant_id, f.timestamp_s))


def load_au_csv(path) -> list[AuFrame]:
    path, rows = _open_rows(path, AU_HEADER)
    out = []
    for line, row in rows:
        if len(row) != len(AU_HEADER):
            raise ParseError(f"expected {len(AU_HEADER)} fields, got {len(row)}", path, line)
        pid = row[0].strip()
        if not pid:
            raise ParseError("empty participant_id", path, line)
        ts = _parse_int(row[1], path, line, "timestamp_s")
        if ts < 0:
            raise ValidationError(f"{path}:{line}: negative timestamp {ts}")
        values = tuple(_parse_float(v, path, line, c) for v, c in zip(row[2:], AU_HEADER[2:]))
        for name, v in zip(AU_HEADER[2:], values):
            if not (math.isfinite(v) and AU_BAND[0] <= v <= AU_BAND[1]):
                raise ValidationError(f"{path}:{line}: {name}={v} outside {AU_BAND}")
        out.append((line, AuFrame(pid, ts, values)))
    _check_duplicates(out, path)
    return sorted((f for _, f in out), key=lambda f: (f.participant_id, f.timestamp_s))


def load_labels_csv(path) -> list[LabeledSegment]:
    path, rows = _open_rows(path, LABEL_HEADER)
    segments = []
    for line, row in rows:
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", path, line)
        pid = row[0].strip()
        start = _parse_int(row[1], path, line, "start_s")
        end = _parse_int(row[2], path, line, "end_s")
        label = row[3].strip().lower()
        if label not in LABEL_INDEX:
            raise ParseError(f"unknown label {row[3]!r}; expected one of {LABELS}", path, line)
        if end <= start or start < 0:
            raise ValidationError(f"{path}:{line}: segment [{start}, {end}) is empty or negative")
        segments.append((line, LabeledSegment(pid, start, end, label)))
    by_pid: dict[str, list] = defaultdict(list)
    for line, seg in segments:
        by_pid[seg.participant_id].append((line, seg))
    for pid, segs in by_pid.items():
        segs.sort(key=lambda s: s[1].start_s)
        for (la, a), (lb, b) in zip(segs, segs[1:]):
            if b.start_s < a.end_s:
                raise ValidationError(f"{path}: segments on lines {la} and {lb} overlap for participant {pid!r}")
    return sorted((s for _, s in segments), key=lambda s: (s.participant_id, s.start_s))


def _fmt(v: float) -> str:
    return format(v, ".6g")


def write_thermal_csv(frames: Iterable[ThermalFrame], path=None) -> str:
    """Serialize frames; floats carry 6 significant digits. Returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(THERMAL_HEADER)
    for f in frames:
        w.writerow([f.participant_id, f.timestamp_s, *(_fmt(t) for t in f.roi_temps)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_au_csv(frames: Iterable[AuFrame], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AU_HEADER)
    for f in frames:
        w.writerow([f.participant_id, f.timestamp_s, *(_fmt(v) for v in f.au_intensities)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_labels_csv(segments: Iterable[LabeledSegment], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for s in segments:
        w.writerow([s.participant_id, s.start_s, s.end_s, s.label])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# window features


def compute_window_metrics(values) -> WindowMetrics:
    """Avg/Change/Max/Min of each channel over one window.

    ``values`` is [7] for one channel or [7 x C]. Change is last minus first.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != WINDOW_S:
        raise DimensionError(f"window metrics need {WINDOW_S} samples per channel, got shape {np.shape(values)}")
    return WindowMetrics(
        avg=arr.mean(axis=0),
        change=arr[-1] - arr[0],
        max=arr.max(axis=0),
        min=arr.min(axis=0),
    )


def token_dims(mode: str) -> dict[str, int]:
    if mode == "sequence":
        return {"thermal": len(ROIS), "au": len(AUS)}
    if mode == "aggregate":
        return {"thermal": len(ROIS) * len(METRICS), "au": len(AUS) * len(METRICS)}
    raise ConfigurationError(f"unknown representation mode {mode!r}; expected one of {MODES}")


def seq_len(mode: str) -> int:
    token_dims(mode)
    return WINDOW_S if mode == "sequence" else 1


def _tokens(block: np.ndarray, mode: str) -> np.ndarray:
    if mode == "sequence":
        return block.copy()
    return compute_window_metrics(block).as_vector()[None, :]


def slide_windows(
    thermal: Sequence[ThermalFrame],
    au: Sequence[AuFrame],
    segments: Sequence[LabeledSegment],
    mode: str = "aggregate",
) -> list[Window]:
    """Cut every admissible 7-second window at 1-second stride."""
    token_dims(mode)
    th_by: dict[str, dict[int, tuple]] = defaultdict(dict)
    for f in thermal:
        th_by[f.participant_id][f.timestamp_s] = f.roi_temps
    au_by: dict[str, dict[int, tuple]] = defaultdict(dict)
    for f in au:
        au_by[f.participant_id][f.timestamp_s] = f.au_intensities
    seg_by: dict[str, list[LabeledSegment]] = defaultdict(list)
    for s in segments:
        seg_by[s.participant_id].append(s)

    windows = []
    for pid in sorted(set(th_by) & set(au_by) & set(seg_by)):
        th, au_p = th_by[pid], au_by[pid]
        label_at: dict[int, int] = {}
        for seg in seg_by[pid]:
            for s in range(seg.start_s, seg.end_s):
                label_at[s] = seg.label_index
        lo = min(s.start_s for s in seg_by[pid])
        hi = max(s.end_s for s in seg_by[pid])
        for t in range(lo, hi - WINDOW_S + 1):
            secs = range(t, t + WINDOW_S)
            # every second labeled, one label throughout, both streams present
            if not all(s in label_at and s in th and s in au_p for s in secs):
                continue
            if len({label_at[s] for s in secs}) != 1:
                continue
            th_block = np.array([th[s] for s in secs], dtype=np.float64)
            au_block = np.array([au_p[s] for s in secs], dtype=np.float64)
            windows.append(
                Window(
                    participant_id=pid,
                    start_s=t,
                    label=label_at[t],
                    thermal_tokens=_tokens(th_block, mode),
                    au_tokens=_tokens(au_block, mode),
                    mode=mode,
                )
            )
    return windows


# ---------------------------------------------------------------------------
# context alignment


def attach_context(
    windows: Sequence[Window],
    records: Iterable[tuple[tuple[str, int], np.ndarray]] | None,
) -> list[Window]:
    """Return copies of ``windows`` carrying their context embedding.

    ``records`` yields ((participant_id, start_s), vector) pairs. Passing
    None disables context: every window gets a zero vector and
    ``context_present=False``.
    """
    if records is None:
        zero = np.zeros(CONTEXT_DIM)
        return [replace(w, context_embedding=zero, context_present=False) for w in windows]

    table: dict[tuple[str, int], np.ndarray] = {}
    for key, vec in records:
        key = (str(key[0]), int(key[1]))
        if key in table:
            raise AmbiguityError(f"more than one context record for participant {key[0]!r} at t={key[1]}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (CONTEXT_DIM,):
            raise DimensionError(f"context vector for {key} has shape {vec.shape}, expected ({CONTEXT_DIM},)")
        table[key] = vec

    missing = [w.key for w in windows if w.key not in table]
    if missing:
        shown = ", ".join(f"{p}@{t}" for p, t in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise AlignmentError(f"{len(missing)} windows have no context record: {shown}{more}")
    return [replace(w, context_embedding=table[w.key], context_present=True) for w in windows]


# ---------------------------------------------------------------------------
# grouping


def groups_of(windows: Sequence[Window]) -> list[str]:
    return sorted({w.group for w in windows})


@dataclass(frozen=True)
class Fold:
    index: int
    train_groups: tuple[str, ...]
    test_groups: tuple[str, ...]
    train_idx: np.ndarray = field(compare=False, repr=False)
    test_idx: np.ndarray = field(compare=False, repr=False)


def split_by_group(windows: Sequence[Window], k: int | None = None,
                   leave_one_group_out: bool = True) -> list[Fold]:
    """Partition windows into ``k`` folds by group.

    With ``leave_one_group_out`` (the default) ``k`` must equal the group
    count and fold ``i`` tests the i-th group in sorted order. Otherwise
    sorted groups are dealt round-robin into ``k`` test sets.
    """
    groups = groups_of(windows)
    if k is None:
        k = len(groups)
    if k < 2:
        raise ConfigurationError(f"need at least 2 folds, got k={k}")
    if len(groups) < k:
        raise ConfigurationError(f"k={k} exceeds the number of groups ({len(groups)})")
    if leave_one_group_out and k != len(groups):
        raise ConfigurationError(f"leave-one-group-out needs k == group count ({len(groups)}), got k={k}")

    test_sets = [groups[i::k] for i in range(k)]
    labels = np.array([w.group for w in windows])
    folds = []
    for i, test in enumerate(test_sets):
        mask = np.isin(labels, test)
        folds.append(
            Fold(
                index=i,
                train_groups=tuple(g for g in groups if g not in test),
                test_groups=tuple(test),
                train_idx=np.flatnonzero(~mask),
                test_idx=np.flatnonzero(mask),
            )
        )
    return folds


def stack_inputs(windows: Sequence[Window], modalities: Sequence[str]) -> dict[str, np.ndarray]:
    """Batch arrays per modality: token modalities [B x L x D], context [B x 3072]."""
    out = {}
    for m in modalities:
        if m == "thermal":
            out[m] = np.stack([w.thermal_tokens for w in windows])
        elif m == "au":
            out[m] = np.stack([w.au_tokens for w in windows])
        elif m == "context":
            vecs = []
            for w in windows:
                if w.context_embedding is None:
                    raise AlignmentError(f"window {w.key} has no context attached")
                vecs.append(w.context_embedding)
            out[m] = np.stack(vecs)
        else:
            raise ConfigurationError(f"unknown modality {m!r}")
    return out


def load_streams(data_dir) -> tuple[list[ThermalFrame], list[AuFrame], list[LabeledSegment]]:
    d = Path(data_dir)
    return load_thermal_csv(d / "thermal.csv"), load_au_csv(d / "au.csv"), load_labels_csv(d / "labels.csv")


def label_name(index: int) -> str:
    return LABELS[index]


def count_by_label(windows: Sequence[Window]) -> Mapping[str, int]:
    counts = {name: 0 for name in LABELS}
    for w in windows:
        counts[LABELS[w.label]] += 1
    return counts
