import numpy as np
import pytest


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_force_windows(thermal, au, segments, width=7):
    """Every (pid, start, label) whose ``width`` seconds are all labeled with one label and present in both streams."""
    th = {(f.participant_id, f.timestamp_s) for f in thermal}
    au_ = {(f.participant_id, f.timestamp_s) for f in au}
    out = []
    pids = sorted({s.participant_id for s in segments})
    for pid in pids:
        segs = [s for s in segments if s.participant_id == pid]
        horizon = max(s.end_s for s in segs)
        for t in range(0, horizon):
            labels = set()
            ok = True
            for sec in range(t, t + width):
                covering = [s.label_index for s in segs if s.start_s <= sec < s.end_s]
                if len(covering) != 1 or (pid, sec) not in th or (pid, sec) not in au_:
                    ok = False
                    break
                labels.add(covering[0])
            if ok and len(labels) == 1:
                out.append((pid, t, labels.pop()))
    return out


def random_streams(rng, max_participants=3, max_seconds=40):
    """Random labeled streams with gaps, adjacent same-label segments and unlabeled stretches."""
    from affuse.data import LABELS, AuFrame, LabeledSegment, ThermalFrame

    thermal, au, segments = [], [], []
    for p in range(int(rng.integers(1, max_participants + 1))):
        pid = f"P{p}"
        seconds = int(rng.integers(1, max_seconds + 1))
        t = 0
        while t < seconds:
            length = int(rng.integers(1, 15))
            if rng.random() < 0.8:
                segments.append(LabeledSegment(pid, t, min(t + length, seconds), LABELS[int(rng.integers(2))]))
            t += length
        for s in range(seconds):
            if rng.random() > 0.05:
                thermal.append(ThermalFrame(pid, s, (34.0, 34.0, 34.0, 34.0)))
            if rng.random() > 0.05:
                au.append(AuFrame(pid, s, (1.0,) * 18))
    return thermal, au, segments
