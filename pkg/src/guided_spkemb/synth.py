"""Synthetic speakers, overlapped mixtures, and verification trial sets.

Speech is synthesized directly as log mel-band energies: a speaker-specific
spectral envelope and pitch ripple, a shared inventory of "phone" patterns,
syllabic loudness modulation, per-utterance channel tilt, and noise. Sources
are mixed in the linear-energy domain and logged afterwards. All timing sits
on the 10 ms frame grid so annotations and frame masks agree exactly.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleMixture
from .features import ActivityAnnotation, FeatureSequence, rasterize_activities, read_rttm, write_rttm

BUCKETS = ("0", "(0,25)", "[25,50)", "[50,75)", "[75,100)", "100")
ONE_VS_MANY_BUCKETS = BUCKETS[1:]
_BUCKET_RANGES = {
    "(0,25)": (0.0, 0.25),
    "[25,50)": (0.25, 0.50),
    "[50,75)": (0.50, 0.75),
    "[75,100)": (0.75, 1.00),
}


@dataclass
class SynthConfig:
    n_mels: int = 40
    frame_shift_s: float = 0.01
    min_distance: float = 1.5
    envelope_scale: float = 0.5
    pitch_depth: float = 0.6
    n_phones: int = 12
    phone_scale: float = 1.0
    phone_seed: int = 1234
    loudness_depth: float = 0.6
    channel_tilt: float = 0.8
    channel_color: float = 0.4
    noise_std: float = 0.35
    speech_level: float = 3.0
    noise_floor: float = -1.0
    clip_range_s: tuple = (1.0, 2.0)
    shift_min_s: float = 0.5
    max_retries: int = 2000


@dataclass
class SyntheticSpeaker:
    id: str
    envelope: np.ndarray
    pitch_period: float
    pitch_phase: float
    pitch_depth: float
    mod_rate_hz: float
    mod_seed: int


@dataclass
class Mixture:
    features: FeatureSequence
    annotation: ActivityAnnotation
    target_id: str
    overlap_ratio: float
    bucket: str = None

    @property
    def n_frames(self):
        return self.features.n_frames

    def mask(self, target_id=None):
        return rasterize_activities(
            self.annotation, target_id or self.target_id, self.n_frames, self.features.frame_shift_s
        )


def bucket_of(ratio):
    if ratio <= 0.0:
        return "0"
    if ratio >= 1.0:
        return "100"
    for name, (lo, hi) in _BUCKET_RANGES.items():
        if lo <= ratio < hi:
            return name
    raise ValueError(f"ratio {ratio} outside [0, 1]")


def in_bucket(ratio, bucket):
    if bucket == "0":
        return ratio == 0.0
    if bucket == "100":
        return ratio == 1.0
    lo, hi = _BUCKET_RANGES[bucket]
    return (ratio > lo if lo == 0.0 else ratio >= lo) and ratio < hi


# speakers


def _smooth_curve(rng, F, n_terms=5, scale=1.0):
    f = np.arange(F) / max(F - 1, 1)
    curve = np.zeros(F)
    for j in range(1, n_terms + 1):
        curve += rng.normal(0, scale / j) * np.cos(np.pi * j * f + rng.uniform(0, 2 * np.pi))
    return curve


def synth_speaker_bank(seed, n_speakers, config=None, prefix="spk"):
    """Deterministic bank whose envelopes are pairwise at least ``min_distance`` apart."""
    cfg = config or SynthConfig()
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers")
    rng = np.random.default_rng(seed)
    bank = []
    for i in range(n_speakers):
        for _ in range(cfg.max_retries):
            env = _smooth_curve(rng, cfg.n_mels, scale=cfg.envelope_scale * 1.5)
            if all(np.linalg.norm(env - s.envelope) >= cfg.min_distance for s in bank):
                break
        else:
            raise InfeasibleMixture(
                f"could not place speaker {i} at distance >= {cfg.min_distance} after {cfg.max_retries} tries"
            )
        bank.append(
            SyntheticSpeaker(
                id=f"{prefix}{i:03d}",
                envelope=env,
                pitch_period=float(rng.uniform(3.0, 9.0)),
                pitch_phase=float(rng.uniform(0, 2 * np.pi)),
                pitch_depth=float(cfg.pitch_depth * rng.uniform(0.5, 1.5)),
                mod_rate_hz=float(rng.uniform(2.5, 6.0)),
                mod_seed=int(rng.integers(2**31)),
            )
        )
    return bank


def _phone_inventory(cfg):
    rng = np.random.default_rng(cfg.phone_seed)
    return np.stack([_smooth_curve(rng, cfg.n_mels, n_terms=8, scale=cfg.phone_scale) for _ in range(cfg.n_phones)])


def synth_utterance(speaker, n_frames, rng, config=None):
    """Log-energy matrix ``n_mels x n_frames`` of one clean utterance."""
    cfg = config or SynthConfig()
    F = cfg.n_mels
    f = np.arange(F)
    phones = _phone_inventory(cfg)
    seq = np.empty(n_frames, dtype=np.int64)
    t = 0
    while t < n_frames:
        run = int(rng.integers(4, 13))
        seq[t : t + run] = rng.integers(cfg.n_phones)
        t += run
    pitch = speaker.pitch_depth * np.cos(2 * np.pi * f / speaker.pitch_period + speaker.pitch_phase)
    times = np.arange(n_frames) * cfg.frame_shift_s
    loud = cfg.loudness_depth * np.sin(2 * np.pi * speaker.mod_rate_hz * times + rng.uniform(0, 2 * np.pi))
    tilt = rng.normal(0, cfg.channel_tilt) * (f / max(F - 1, 1) - 0.5)
    tilt = tilt + _smooth_curve(rng, F, n_terms=3, scale=cfg.channel_color)
    gain = rng.normal(0, 0.3)
    logE = (
        cfg.speech_level
        + gain
        + (speaker.envelope + pitch + tilt)[:, None]
        + phones[seq].T
        + loud[None, :]
        + rng.normal(0, cfg.noise_std, (F, n_frames))
    )
    return logE


def mix_sources(sources, n_frames, rng, config=None):
    """Sum ``(log_energy, onset_frame)`` sources in linear energy, add noise, take logs."""
    cfg = config or SynthConfig()
    energy = np.exp(cfg.noise_floor + rng.normal(0, 0.2, (cfg.n_mels, n_frames)))
    for logE, onset in sources:
        energy[:, onset : onset + logE.shape[1]] += np.exp(logE)
    return np.log(energy)


# layouts


def _frames(seconds, cfg):
    return int(round(seconds / cfg.frame_shift_s))


def _target_overlap_frames(onsets, durs):
    t_on, t_len = onsets[0], durs[0]
    covered = np.zeros(t_len, dtype=bool)
    for on, d in zip(onsets[1:], durs[1:]):
        a, b = max(on, t_on), min(on + d, t_on + t_len)
        if b > a:
            covered[a - t_on : b - t_on] = True
    return int(covered.sum())


def _shift_ok(onsets, shift_min):
    if shift_min <= 0:
        return True
    o = sorted(onsets)
    return all(b - a >= shift_min for a, b in zip(o[:-1], o[1:]))


def _outside(rng, d, d0, gap_max):
    gap = int(rng.integers(0, gap_max + 1))
    return -d - gap if rng.random() < 0.5 else d0 + gap


def _propose_layout(rng, durs, bucket, gap_max):
    d0 = durs[0]
    onsets = [0]
    n_int = len(durs) - 1
    if bucket == "0":
        onsets += [_outside(rng, d, d0, gap_max) for d in durs[1:]]
        return onsets
    if bucket == "100":
        first = durs[1]
        if first >= d0:
            onsets.append(int(rng.integers(d0 - first, 1)))
        else:
            onsets.append(int(rng.integers(-first + 1, 1)))
        for d in durs[2:]:
            if first < d0 and len(onsets) == 2:
                onsets.append(int(rng.integers(max(d0 - d, onsets[1] + first - d), d0)))
            else:
                onsets.append(int(rng.integers(-d + 1, d0)) if rng.random() < 0.5 else _outside(rng, d, d0, gap_max))
        return onsets
    lo, hi = _BUCKET_RANGES[bucket]
    ratio = rng.uniform(lo, hi)
    ov = int(np.clip(round(ratio * d0), 1, d0 - 1))
    first = durs[1]
    if first >= ov:
        onsets.append(d0 - ov if rng.random() < 0.5 else ov - first)
    else:
        onsets.append(int(rng.integers(0, d0 - first + 1)))
    for d in durs[2:]:
        onsets.append(_outside(rng, d, d0, gap_max) if n_int > 1 and rng.random() < 0.7 else int(rng.integers(-d + 1, d0)))
    return onsets


def layout_mixture(durations_frames, bucket, shift_min_frames, rng, max_retries=2000, gap_max=50):
    """Onsets (first = target) whose target-overlap ratio falls in ``bucket``."""
    durs = [int(d) for d in durations_frames]
    if bucket not in BUCKETS:
        raise ValueError(f"unknown bucket {bucket!r}; choose from {BUCKETS}")
    if len(durs) < 1 or min(durs) < 1:
        raise ValueError("durations must be positive")
    if len(durs) == 1:
        if bucket != "0":
            raise InfeasibleMixture("a single speaker can only produce the 0% bucket")
        return [0], 0.0
    for _ in range(max_retries):
        onsets = _propose_layout(rng, durs, bucket, gap_max)
        shift = min(onsets)
        onsets = [o - shift for o in onsets]
        if not _shift_ok(onsets, shift_min_frames):
            continue
        ratio = round(_target_overlap_frames(onsets, durs) / durs[0], 12)
        if in_bucket(ratio, bucket):
            return onsets, ratio
    raise InfeasibleMixture(f"bucket {bucket} infeasible for durations {durs} after {max_retries} retries")


def overlap_ratio_from_annotation(annotation, target_id):
    """Fraction of the target's speech time during which another speaker also talks."""
    target = annotation.intervals[str(target_id)]
    others = [seg for spk, segs in annotation.intervals.items() if spk != str(target_id) for seg in segs]
    total = sum(b - a for a, b in target)
    if total <= 0:
        return 0.0
    overlapped = 0.0
    for a, b in target:
        pieces = sorted((max(a, c), min(b, d)) for c, d in others if min(b, d) > max(a, c))
        cur_a = cur_b = None
        for pa, pb in pieces:
            if cur_b is None or pa > cur_b:
                if cur_b is not None:
                    overlapped += cur_b - cur_a
                cur_a, cur_b = pa, pb
            else:
                cur_b = max(cur_b, pb)
        if cur_b is not None:
            overlapped += cur_b - cur_a
    # interval sums carry float noise; keep bucket edges stable
    return round(overlapped / total, 12)


def synth_mixture(speakers, durations=None, shift_min=0.5, target_overlap_bucket="(0,25)", rng=None,
                  config=None):
    """Mixture of 2-4 speakers (first is the target) with overlap ratio in the requested bucket.

    ``durations`` are seconds per speaker; missing ones are drawn from ``clip_range_s``.
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(rng)
    if not 1 <= len(speakers) <= 4:
        raise ValueError("a mixture takes 1 to 4 speakers")
    if durations is None:
        durations = [rng.uniform(*cfg.clip_range_s) for _ in speakers]
    if len(durations) != len(speakers):
        raise ValueError("need one duration per speaker")
    durs = [_frames(d, cfg) for d in durations]
    onsets, ratio = layout_mixture(durs, target_overlap_bucket, _frames(shift_min, cfg), rng, cfg.max_retries)
    T = max(o + d for o, d in zip(onsets, durs))
    sources = [(synth_utterance(spk, d, rng, cfg), o) for spk, d, o in zip(speakers, durs, onsets)]
    feats = mix_sources(sources, T, rng, cfg)
    sec = cfg.frame_shift_s
    ann = ActivityAnnotation(
        {spk.id: [(round(o * sec, 6), round((o + d) * sec, 6))] for spk, d, o in zip(speakers, durs, onsets)},
        duration=round(T * sec, 6),
    )
    return Mixture(FeatureSequence(feats, sec), ann, speakers[0].id, ratio, target_overlap_bucket)


def clean_utterance(speaker, duration_s, rng=None, config=None):
    """Single-speaker recording as a :class:`Mixture` with no interference."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(rng)
    n = _frames(duration_s, cfg)
    feats = mix_sources([(synth_utterance(speaker, n, rng, cfg), 0)], n, rng, cfg)
    sec = cfg.frame_shift_s
    ann = ActivityAnnotation({speaker.id: [(0.0, round(n * sec, 6))]}, duration=round(n * sec, 6))
    return Mixture(FeatureSequence(feats, sec), ann, speaker.id, 0.0, "0")


# m-fold non-target scaling


def _runs(bits):
    """Maximal runs of ones as ``(start, stop)`` pairs."""
    b = np.concatenate([[0], np.asarray(bits, dtype=np.int8), [0]])
    d = np.diff(b)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def nontarget_only_runs(mask):
    return _runs((mask.q_target == 0) & (mask.q_nontarget == 1))


def scaled_frame_index(mask, m):
    """Frame indices realizing the m-fold scaling of every non-target-only run."""
    runs = nontarget_only_runs(mask)
    T = len(mask)
    idx = []
    pos = 0
    for a, b in runs:
        idx.extend(range(pos, a))
        n_new = int(math.ceil(m * (b - a) - 1e-9))
        idx.extend(a + (i % (b - a)) for i in range(n_new))
        pos = b
    idx.extend(range(pos, T))
    return np.asarray(idx, dtype=np.int64)


def _bits_to_intervals(bits, sec):
    return [(round(a * sec, 6), round(b * sec, 6)) for a, b in _runs(bits)]


def scale_nontarget_duration(mix, m):
    """Delete (m=0), keep (m=1) or tile (m>1) every maximal non-target-only run.

    Repeated frames are verbatim copies; target frames are untouched.
    """
    if m < 0:
        raise ValueError(f"m must be non-negative, got {m}")
    mask = mix.mask()
    runs = nontarget_only_runs(mask)
    if m == 1:
        return Mixture(
            FeatureSequence(mix.features.frames.copy(), mix.features.frame_shift_s, mix.features.frame_length_s),
            ActivityAnnotation({k: list(v) for k, v in mix.annotation.intervals.items()}, mix.annotation.duration),
            mix.target_id,
            mix.overlap_ratio,
            mix.bucket,
        )
    if not runs:
        raise ValueError("mixture has no non-target-only interval to scale")
    idx = scaled_frame_index(mask, m)
    sec = mix.features.frame_shift_s
    T = mix.n_frames
    intervals = {}
    for spk in mix.annotation.intervals:
        own = rasterize_activities(ActivityAnnotation({spk: mix.annotation.intervals[spk]}), spk, T, sec).q_target
        segs = _bits_to_intervals(own[idx], sec)
        if segs:
            intervals[spk] = segs
    ann = ActivityAnnotation(intervals, duration=round(idx.size * sec, 6))
    feats = FeatureSequence(mix.features.frames[:, idx], sec, mix.features.frame_length_s)
    return Mixture(feats, ann, mix.target_id, overlap_ratio_from_annotation(ann, mix.target_id), mix.bucket)


# trial sets


@dataclass
class TrialConfig:
    n_trials: int = 100
    protocol: str = "one-vs-many"
    buckets: tuple = ONE_VS_MANY_BUCKETS
    proportions: tuple = None
    n_interferers: int = 3
    enroll_duration_s: float = 2.0
    test_duration_range_s: tuple = (1.5, 2.5)
    interferer_duration_range_s: tuple = (1.0, 2.0)
    shift_min_s: float = 0.0
    seed: int = 0


@dataclass
class Trial:
    trial_id: str
    enroll: FeatureSequence
    enroll_speaker: str
    test: Mixture
    label: int
    bucket: str
    protocol: str


@dataclass
class TrialSet:
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def by_bucket(self):
        out = {}
        for t in self.trials:
            out.setdefault(t.bucket, []).append(t)
        return out


def bucket_counts(n, buckets, proportions=None):
    """Largest-remainder split of ``n`` items across buckets."""
    p = np.ones(len(buckets)) if proportions is None else np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = n * p
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return dict(zip(buckets, counts.tolist()))


def build_trial_set(bank, config=None, synth_config=None):
    """Balanced same/different trials with clean enrollments.

    ``one-vs-one`` tests are clean utterances; ``one-vs-many`` tests mix the
    test speaker with ``n_interferers`` others at a tagged overlap bucket.
    """
    cfg = config or TrialConfig()
    scfg = synth_config or SynthConfig()
    if len(bank) < 4:
        raise ValueError("trial sets need at least 4 speakers")
    if cfg.protocol not in ("one-vs-one", "one-vs-many"):
        raise ValueError(f"unknown protocol {cfg.protocol!r}")
    if cfg.protocol == "one-vs-many" and len(bank) < cfg.n_interferers + 2:
        raise ValueError("not enough speakers for the requested interferers")
    rng = np.random.default_rng(cfg.seed)
    if cfg.protocol == "one-vs-one":
        plan = ["0"] * cfg.n_trials
    else:
        counts = bucket_counts(cfg.n_trials, cfg.buckets, cfg.proportions)
        plan = [b for b in cfg.buckets for _ in range(counts[b])]
    trials = []
    for i, bucket in enumerate(plan):
        label = 1 if i % 2 == 0 else 0
        order = rng.permutation(len(bank))
        enroll_spk = bank[order[0]]
        test_spk = enroll_spk if label else bank[order[1]]
        enroll = clean_utterance(enroll_spk, cfg.enroll_duration_s, rng, scfg).features
        if cfg.protocol == "one-vs-one":
            test = clean_utterance(test_spk, rng.uniform(*cfg.test_duration_range_s), rng, scfg)
        else:
            interferers = [bank[j] for j in order[2 : 2 + cfg.n_interferers]]
            durs = [rng.uniform(*cfg.test_duration_range_s)]
            durs += [rng.uniform(*cfg.interferer_duration_range_s) for _ in interferers]
            if bucket == "100":
                durs[1] = max(durs[1], durs[0])
            test = synth_mixture([test_spk] + interferers, durs, cfg.shift_min_s, bucket, rng, scfg)
        trials.append(Trial(f"t{i:05d}", enroll, enroll_spk.id, test, label, bucket, cfg.protocol))
    return TrialSet(trials)


# on-disk dataset


def write_dataset(trials, out_dir):
    """Write features (.npy), RTTMs, a JSONL manifest and a trial list under ``out_dir``."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "rttm").mkdir(exist_ok=True)
    manifest_lines, trial_lines = [], []
    for t in trials:
        enroll_path = out / "features" / f"{t.trial_id}-enroll.npy"
        test_path = out / "features" / f"{t.trial_id}-test.npy"
        rttm_path = out / "rttm" / f"{t.trial_id}-test.rttm"
        np.save(enroll_path, t.enroll.frames)
        np.save(test_path, t.test.features.frames)
        write_rttm(rttm_path, t.test.annotation, f"{t.trial_id}-test")
        record = {
            "id": f"{t.trial_id}-test",
            "features": str(test_path.relative_to(out)),
            "rttm": str(rttm_path.relative_to(out)),
            "target": t.test.target_id,
            "bucket": t.bucket,
            "overlap_ratio": t.test.overlap_ratio,
            "enroll_speaker": t.enroll_speaker,
            "protocol": t.protocol,
        }
        manifest_lines.append(json.dumps(record, sort_keys=True))
        trial_lines.append(f"{t.label} {enroll_path.relative_to(out)} {record['id']}")
    (out / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n")
    (out / "trials.txt").write_text("\n".join(trial_lines) + "\n")
    return out


def parse_trial_list(text):
    trials = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3 or fields[0] not in ("0", "1"):
            raise ValueError(f"trial line {lineno}: expected '<0|1> <enroll-path> <test-id>': {line!r}")
        trials.append((int(fields[0]), fields[1], fields[2]))
    return trials


def read_dataset(data_dir, frame_shift_s=0.01):
    """Load a dataset written by :func:`write_dataset` back into a :class:`TrialSet`."""
    root = Path(data_dir)
    records = {}
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            records[rec["id"]] = rec
    trials = []
    for i, (label, enroll_rel, test_id) in enumerate(parse_trial_list((root / "trials.txt").read_text())):
        rec = records[test_id]
        frames = np.load(root / rec["features"])
        ann = read_rttm(root / rec["rttm"])[test_id]
        ann.duration = round(frames.shape[1] * frame_shift_s, 6)
        test = Mixture(FeatureSequence(frames, frame_shift_s), ann, rec["target"], rec["overlap_ratio"], rec["bucket"])
        enroll = FeatureSequence(np.load(root / enroll_rel), frame_shift_s)
        trials.append(
            Trial(test_id.rsplit("-", 1)[0], enroll, rec["enroll_speaker"], test, label, rec["bucket"], rec["protocol"])
        )
    return TrialSet(trials)


# training batches


def training_mixture_layout(rng, n_speakers, window, clip_range, shift_min, max_retries=2000):
    """Onsets and durations (frames) of clips placed inside a fixed window."""
    for _ in range(max_retries):
        durs = [int(rng.integers(clip_range[0], clip_range[1] + 1)) for _ in range(n_speakers)]
        onsets = [int(rng.integers(0, window - d + 1)) for d in durs]
        if _shift_ok(onsets, shift_min):
            return onsets, durs
    raise InfeasibleMixture("cannot place training clips with the requested shift")


# conversations


def synth_conversation(speakers, duration_s=40.0, rng=None, config=None, turn_range_s=(1.0, 3.0),
                       overlap_prob=0.3, max_overlap_s=0.6, pause_range_s=(0.1, 0.6)):
    """Turn-taking recording where consecutive turns sometimes overlap.

    Every listed speaker gets at least one turn. Returns a :class:`Mixture`
    whose ``target_id`` is the first speaker.
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(rng)
    if len(speakers) < 1:
        raise ValueError("need at least one speaker")
    T = _frames(duration_s, cfg)
    turns = []
    t = 0
    prev = None
    while True:
        choices = [i for i in range(len(speakers)) if i != prev] or [0]
        unseen = [i for i in choices if all(s != i for s, _, _ in turns)]
        who = unseen[0] if unseen else int(rng.choice(choices))
        d = _frames(rng.uniform(*turn_range_s), cfg)
        if t + d > T:
            break
        turns.append((who, t, d))
        prev = who
        if rng.random() < overlap_prob:
            t = t + d - _frames(rng.uniform(0.1, max_overlap_s), cfg)
        else:
            t = t + d + _frames(rng.uniform(*pause_range_s), cfg)
    if not turns:
        raise InfeasibleMixture("recording too short for a single turn")
    sources = [(synth_utterance(speakers[w], d, rng, cfg), o) for w, o, d in turns]
    feats = mix_sources(sources, T, rng, cfg)
    sec = cfg.frame_shift_s
    active = {}
    for w, o, d in turns:
        bits = active.setdefault(speakers[w].id, np.zeros(T, dtype=np.int8))
        bits[o : o + d] = 1
    ann = ActivityAnnotation({spk: _bits_to_intervals(b, sec) for spk, b in active.items()}, round(T * sec, 6))
    target = speakers[turns[0][0]].id
    return Mixture(FeatureSequence(feats, sec), ann, target, overlap_ratio_from_annotation(ann, target))


# waveform path


def synth_waveform(speaker, duration_s, rng=None, sample_rate=16000, noise_level=1e-3):
    """Harmonic-complex audio shaped by the speaker's envelope, for the log-mel front end.

    The fundamental follows ``pitch_period``; harmonic amplitudes follow the
    envelope placed on a mel-spaced frequency grid; loudness is modulated at
    ``mod_rate_hz``.
    """
    from .features import mel_center_frequencies

    rng = np.random.default_rng(rng)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = 80.0 + 20.0 * speaker.pitch_period
    centers = mel_center_frequencies(speaker.envelope.size, sample_rate)
    harmonics = np.arange(f0, sample_rate / 2 - f0, f0)
    gains = np.exp(np.interp(harmonics, centers, speaker.envelope))
    phases = rng.uniform(0, 2 * np.pi, harmonics.size)
    jitter = 1.0 + 0.01 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(jitter) / sample_rate
    x = np.zeros(n)
    for k, (g, p) in enumerate(zip(gains, phases), start=1):
        x += g * np.sin(k * phase + p)
    x *= 1.0 + 0.5 * np.sin(2 * np.pi * speaker.mod_rate_hz * t + rng.uniform(0, 2 * np.pi))
    x /= np.abs(x).max() + 1e-12
    return 0.5 * x + rng.normal(0, noise_level, n)
