"""Verification scoring, the non-target duration sweep, and a small diarization pipeline."""

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.optimize import linear_sum_assignment

from .features import ActivityAnnotation, ActivityMask, FeatureSequence, rasterize_activities
from .models import extract_embedding
from .synth import nontarget_only_runs, scale_nontarget_duration

NOT_APPLICABLE = "n/a"


@dataclass
class TrialScore:
    trial_id: str
    score: float
    label: int
    bucket: str = None

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.score <= 1.0 + 1e-9:
            raise ValueError(f"cosine score {self.score} outside [-1, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def cosine_score(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# EER


def _scores_labels(scores, labels=None):
    if labels is None:
        labels = [s.label for s in scores]
        scores = [s.score for s in scores]
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("need one label per score")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("EER needs both same-speaker and different-speaker trials")
    return s, y


def _thresholds(s):
    u = np.unique(s)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def _crossing(thr, far, frr, lo, hi):
    """First threshold where FAR no longer exceeds FRR, interpolated linearly."""
    d = far - frr
    i = int(np.argmax(d <= 0))
    if d[i] == 0:
        return float(far[i]), float(np.clip(thr[i], lo, hi))
    alpha = d[i - 1] / (d[i - 1] - d[i])
    eer = far[i - 1] + alpha * (far[i] - far[i - 1])
    t0, t1 = np.clip(thr[i - 1], lo, hi), np.clip(thr[i], lo, hi)
    return float(eer), float(t0 + alpha * (t1 - t0))


def compute_eer(scores, labels=None):
    """Equal error rate and its threshold; accepts ``TrialScore`` items or parallel arrays.

    Trials are accepted when ``score >= threshold``. Candidate thresholds are
    midpoints between distinct scores plus both infinities.
    """
    s, y = _scores_labels(scores, labels)
    thr = _thresholds(s)
    order = np.sort(s[y == 0]), np.sort(s[y == 1])
    neg, pos = order
    # counts of scores strictly below each threshold
    neg_below = np.searchsorted(neg, thr, side="left")
    pos_below = np.searchsorted(pos, thr, side="left")
    far = (neg.size - neg_below) / neg.size
    frr = pos_below / pos.size
    return _crossing(thr, far, frr, s.min(), s.max())


def eer_oracle(scores, labels=None):
    """Exhaustive O(n^2) version of :func:`compute_eer`, counting trials per threshold."""
    s, y = _scores_labels(scores, labels)
    thr = _thresholds(s)
    n_neg, n_pos = int((y == 0).sum()), int((y == 1).sum())
    far = np.empty(thr.size)
    frr = np.empty(thr.size)
    for k, t in enumerate(thr):
        fa = sum(1 for si, yi in zip(s, y) if yi == 0 and si >= t)
        fr = sum(1 for si, yi in zip(s, y) if yi == 1 and si < t)
        far[k] = fa / n_neg
        frr[k] = fr / n_pos
    return _crossing(thr, far, frr, s.min(), s.max())


# bootstrap


@dataclass
class BootstrapResult:
    p_value: float
    observed_delta: float
    deltas: np.ndarray = field(repr=False)


def _align(scores_a, scores_b):
    a = {s.trial_id: s for s in scores_a}
    b = {s.trial_id: s for s in scores_b}
    if len(a) != len(scores_a) or len(b) != len(scores_b):
        raise ValueError("duplicate trial ids")
    if set(a) != set(b):
        raise ValueError("systems were scored on different trial sets")
    ids = sorted(a)
    for i in ids:
        if a[i].label != b[i].label:
            raise ValueError(f"trial {i} has different labels in the two systems")
    y = np.array([a[i].label for i in ids])
    return np.array([a[i].score for i in ids]), np.array([b[i].score for i in ids]), y


def bootstrap_test(scores_a, scores_b, n_resamples=1000, seed=0):
    """Paired bootstrap of ``EER(A) - EER(B)``, resampling trials within each label.

    ``p`` is the fraction of resamples whose difference does not share the
    observed sign; it is 1 when the observed difference is zero.
    """
    sa, sb, y = _align(scores_a, scores_b)
    observed = compute_eer(sa, y)[0] - compute_eer(sb, y)[0]
    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    deltas = np.empty(n_resamples)
    for k in range(n_resamples):
        idx = np.concatenate([rng.choice(pos, pos.size), rng.choice(neg, neg.size)])
        deltas[k] = compute_eer(sa[idx], y[idx])[0] - compute_eer(sb[idx], y[idx])[0]
    if observed == 0:
        p = 1.0
    else:
        p = float(np.mean(deltas * math.copysign(1.0, observed) <= 0))
    return BootstrapResult(p, float(observed), deltas)


def bootstrap_compare(scores_a, scores_b, n_resamples=1000, seed=0):
    return bootstrap_test(scores_a, scores_b, n_resamples, seed).p_value


# verification


def embed_recording(model, features, mask=None):
    """Embedding of a recording; unguided models ignore the mask."""
    if not model.config.guided:
        return extract_embedding(model, features)
    return extract_embedding(model, features, mask if mask is not None else ActivityMask.full(features.n_frames))


def score_trials(model, trials, enroll_cache=None):
    """Cosine scores of every trial; enrollment embeddings are computed once per utterance."""
    cache = {} if enroll_cache is None else enroll_cache
    out = []
    for t in trials:
        key = id(t.enroll)
        if key not in cache:
            cache[key] = embed_recording(model, t.enroll)
        test = embed_recording(model, t.test.features, t.test.mask())
        out.append(TrialScore(t.trial_id, cosine_score(cache[key], test), t.label, t.bucket))
    return out


def eer_by_bucket(scores):
    """Rows ``{bucket, eer, threshold, n}`` per bucket, plus a pooled ``all`` row."""
    groups = {}
    for s in scores:
        groups.setdefault(s.bucket, []).append(s)
    rows = []
    for bucket in list(groups) + ["all"]:
        items = scores if bucket == "all" else groups[bucket]
        try:
            eer, thr = compute_eer(items)
        except ValueError:
            eer = thr = NOT_APPLICABLE
        rows.append({"bucket": bucket, "eer": eer, "threshold": thr, "n": len(items)})
    return rows


def write_csv(rows, path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# m-sweep


def sweep_applicable(trial):
    return bool(nontarget_only_runs(trial.test.mask()))


def sweep_nontarget_duration(model, trials, m_values=(0, 1, 2, 3, 5)):
    """Mean same-speaker cosine and EER after m-fold scaling of non-target-only intervals.

    Only trials whose test mixture has a non-target-only interval take part,
    so every row covers the same trials. Rows read ``n/a`` when none qualify.
    """
    usable = [t for t in trials if sweep_applicable(t)]
    cache = {}
    rows = []
    for m in m_values:
        if not usable:
            rows.append({"m": m, "mean_cosine": NOT_APPLICABLE, "eer": NOT_APPLICABLE, "n": 0, "n_target": 0})
            continue
        scores = []
        for t in usable:
            key = id(t.enroll)
            if key not in cache:
                cache[key] = embed_recording(model, t.enroll)
            mix = scale_nontarget_duration(t.test, m)
            emb = embed_recording(model, mix.features, mix.mask())
            scores.append(TrialScore(t.trial_id, cosine_score(cache[key], emb), t.label, t.bucket))
        same = [s.score for s in scores if s.label == 1]
        try:
            eer = compute_eer(scores)[0]
        except ValueError:
            eer = NOT_APPLICABLE
        rows.append({
            "m": m,
            "mean_cosine": float(np.mean(same)) if same else NOT_APPLICABLE,
            "eer": eer,
            "n": len(scores),
            "n_target": len(same),
        })
    return rows


# diarization


def _merge(segs):
    out = []
    for a, b in sorted(segs):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


@dataclass
class DiarHypothesis:
    intervals: dict = field(default_factory=dict)  # int cluster label -> list of (onset, offset)

    def __post_init__(self):
        clean = {}
        for label, segs in self.intervals.items():
            for a, b in segs:
                if not b > a or a < 0:
                    raise ValueError(f"malformed interval ({a}, {b}) for label {label}")
            clean[int(label)] = _merge(segs)
        if sorted(clean) != list(range(len(clean))):
            raise ValueError(f"cluster labels must be 0..K-1, got {sorted(clean)}")
        self.intervals = clean

    def to_annotation(self, prefix="spk"):
        return ActivityAnnotation({f"{prefix}{k}": v for k, v in self.intervals.items()})


class DERBreakdown(NamedTuple):
    der: float
    missed: float
    false_alarm: float
    confusion: float


def _as_interval_dict(x):
    return {str(k): _merge(v) for k, v in x.intervals.items() if v}


def _overlap(a, b):
    total, i, j = 0.0, 0, 0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i][0], b[j][0]), min(a[i][1], b[j][1])
        if hi > lo:
            total += hi - lo
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return total


def _active_count(segs_by_spk, lo, hi):
    return [k for k, segs in segs_by_spk.items() if any(a <= lo and hi <= b for a, b in segs)]


def speaker_mapping(reference, hypothesis):
    """Optimal one-to-one reference-to-hypothesis mapping by overlap duration."""
    ref, hyp = _as_interval_dict(reference), _as_interval_dict(hypothesis)
    rk, hk = sorted(ref), sorted(hyp)
    if not rk or not hk:
        return {}
    cost = np.array([[_overlap(ref[r], hyp[h]) for h in hk] for r in rk])
    rows, cols = linear_sum_assignment(cost, maximize=True)
    return {rk[i]: hk[j] for i, j in zip(rows, cols) if cost[i, j] > 0}


def compute_der(reference, hypothesis):
    """Diarization error without collar, overlapped speech included.

    Component times are in seconds; ``der`` is their sum over total reference speech.
    """
    ref, hyp = _as_interval_dict(reference), _as_interval_dict(hypothesis)
    total = sum(b - a for segs in ref.values() for a, b in segs)
    if total <= 0:
        raise ValueError("reference has no speech")
    mapping = speaker_mapping(reference, hypothesis)
    bounds = sorted({t for d in (ref, hyp) for segs in d.values() for seg in segs for t in seg})
    miss = fa = conf = 0.0
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi <= lo:
            continue
        r_on = _active_count(ref, lo, hi)
        h_on = set(_active_count(hyp, lo, hi))
        length = hi - lo
        correct = sum(1 for r in r_on if mapping.get(r) in h_on)
        miss += length * max(0, len(r_on) - len(h_on))
        fa += length * max(0, len(h_on) - len(r_on))
        conf += length * (min(len(r_on), len(h_on)) - correct)
    return DERBreakdown((miss + fa + conf) / total, miss, fa, conf)


def reference_speech_time(reference):
    return sum(b - a for segs in _as_interval_dict(reference).values() for a, b in segs)


@dataclass
class DiarizationConfig:
    window_s: float = 10.0
    shift_s: float = 1.0
    ahc_threshold: float = 0.5
    min_speech_s: float = 0.3


def _window_starts(n_frames, win, shift):
    last = max(n_frames - win, 0)
    starts = list(range(0, last + 1, shift))
    if starts[-1] != last:
        starts.append(last)
    return starts


def ahc_cluster(embeddings, threshold):
    """Average-linkage clustering on cosine distance; labels start at 0 in order of first appearance."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.shape[0] == 1:
        return np.zeros(1, dtype=np.int64)
    if math.isinf(threshold):
        return np.zeros(X.shape[0], dtype=np.int64)
    raw = fcluster(linkage(X, method="average", metric="cosine"), t=threshold, criterion="distance")
    relabel = {}
    return np.array([relabel.setdefault(c, len(relabel)) for c in raw], dtype=np.int64)


def window_embeddings(features, local_diar, extractor, config=None):
    """Embed every local speaker in every sliding window.

    Guided extractors use the full target/non-target masks, unguided ones only
    the frames where that speaker talks alone. Returns ``(embeddings, tracks, T,
    frame_shift)`` where each track is ``(start, stop, target bits in window)``.
    """
    cfg = config or DiarizationConfig()
    feats = features if isinstance(features, FeatureSequence) else FeatureSequence(features)
    sec = feats.frame_shift_s
    T = feats.n_frames
    win = int(round(cfg.window_s / sec))
    shift = int(round(cfg.shift_s / sec))
    min_frames = max(1, int(round(cfg.min_speech_s / sec)))
    guided = extractor.config.guided
    speakers = sorted(local_diar.intervals)
    masks = {s: rasterize_activities(local_diar, s, T, sec) for s in speakers}

    embeddings, tracks = [], []
    for start in _window_starts(T, win, shift):
        stop = min(start + win, T)
        for spk in speakers:
            qt = masks[spk].q_target[start:stop]
            qn = masks[spk].q_nontarget[start:stop]
            if qt.sum() < min_frames:
                continue
            frames = feats.frames[:, start:stop]
            if guided:
                emb = extract_embedding(extractor, frames, ActivityMask(qt, qn))
            else:
                alone = (qt == 1) & (qn == 0)
                if alone.sum() < min_frames:
                    continue
                emb = extract_embedding(extractor, frames[:, alone])
            embeddings.append(emb)
            tracks.append((start, stop, qt.astype(bool)))
    return embeddings, tracks, T, sec


def stitch_clusters(labels, tracks, n_frames, frame_shift):
    """A cluster is active at a frame when it wins more than half of the windows voting there."""
    K = int(labels.max()) + 1
    votes = np.zeros((K, n_frames), dtype=np.int64)
    voters = np.zeros(n_frames, dtype=np.int64)
    covered = {}
    for (start, stop, qt), c in zip(tracks, labels):
        votes[c, start:stop] += qt
        covered.setdefault(start, np.zeros(stop - start, dtype=bool))
        covered[start] |= qt
    for start, any_voice in covered.items():
        voters[start : start + any_voice.size] += any_voice
    active = 2 * votes > voters[None, :]
    active &= voters[None, :] > 0
    intervals = {}
    for c in range(K):
        segs = _bits_intervals(active[c], frame_shift)
        if segs:
            intervals[len(intervals)] = segs
    return DiarHypothesis(intervals)


def run_diarization(features, local_diar, extractor, config=None):
    """Sliding-window diarization with oracle local activities and AHC across windows."""
    cfg = config or DiarizationConfig()
    embeddings, tracks, T, sec = window_embeddings(features, local_diar, extractor, cfg)
    if not embeddings:
        return DiarHypothesis({})
    return stitch_clusters(ahc_cluster(embeddings, cfg.ahc_threshold), tracks, T, sec)


def _bits_intervals(bits, sec):
    b = np.concatenate([[0], bits.astype(np.int8), [0]])
    d = np.diff(b)
    return [(round(a * sec, 6), round(e * sec, 6)) for a, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))]


def calibrate_ahc_threshold(extractor, recordings, grid=None, config=None):
    """Threshold from ``grid`` with the lowest mean DER on held-out ``(features, annotation)`` pairs.

    Ties go to the smallest threshold. Window embeddings are computed once per recording.
    """
    base = config or DiarizationConfig()
    grid = np.round(np.arange(0.05, 1.0, 0.05), 2) if grid is None else grid
    cached = [(ann, window_embeddings(f, ann, extractor, base)) for f, ann in recordings]
    best = None
    for thr in grid:
        ders = []
        for ann, (emb, tracks, T, sec) in cached:
            hyp = stitch_clusters(ahc_cluster(emb, float(thr)), tracks, T, sec) if emb else DiarHypothesis({})
            ders.append(compute_der(ann, hyp).der)
        der = float(np.mean(ders))
        if best is None or der < best[1]:
            best = (float(thr), der)
    return best
