"""Waveform input, log-mel features, and frame-aligned speech-activity masks."""

import io
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTargetMask

SAMPLE_RATE = 16000
MEL_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    frames: np.ndarray  # n_mels x T
    frame_shift_s: float = 0.01
    frame_length_s: float = 0.025

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (n_mels x T), got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("feature frames contain non-finite values")

    @property
    def n_frames(self):
        return self.frames.shape[1]

    @property
    def n_mels(self):
        return self.frames.shape[0]


@dataclass
class ActivityMask:
    q_target: np.ndarray
    q_nontarget: np.ndarray

    def __post_init__(self):
        self.q_target = np.asarray(self.q_target).astype(np.int8)
        self.q_nontarget = np.asarray(self.q_nontarget).astype(np.int8)
        if self.q_target.shape != self.q_nontarget.shape or self.q_target.ndim != 1:
            raise ValueError("q_target and q_nontarget must be 1-D vectors of equal length")
        for q in (self.q_target, self.q_nontarget):
            if not np.all((q == 0) | (q == 1)):
                raise ValueError("activity bits must be 0 or 1")

    def __len__(self):
        return self.q_target.shape[0]

    @property
    def n_target(self):
        return int(self.q_target.sum())

    @property
    def empty_target(self):
        return self.n_target == 0

    @classmethod
    def full(cls, T):
        return cls(np.ones(T, dtype=np.int8), np.zeros(T, dtype=np.int8))

    def require_target(self):
        if self.empty_target:
            raise EmptyTargetMask("target speaker has no active frame")
        return self


@dataclass
class ActivityAnnotation:
    """Per-speaker speech intervals in seconds."""

    intervals: dict = field(default_factory=dict)  # speaker id -> list of (onset, offset)
    duration: float = None

    def __post_init__(self):
        clean = {}
        for spk, segs in self.intervals.items():
            out = []
            for onset, offset in segs:
                onset, offset = float(onset), float(offset)
                if not offset > onset:
                    raise ValueError(f"interval ({onset}, {offset}) of {spk!r} has offset <= onset")
                if onset < 0 or (self.duration is not None and offset > self.duration + 1e-9):
                    raise ValueError(f"interval ({onset}, {offset}) of {spk!r} outside the recording")
                out.append((onset, offset))
            clean[str(spk)] = sorted(out)
        self.intervals = clean

    @property
    def speakers(self):
        return list(self.intervals)

    def speech_time(self, speaker):
        return sum(off - on for on, off in self.intervals.get(speaker, []))


# WAV I/O


def load_wav(path, expected_rate=SAMPLE_RATE):
    """Read a mono 16-bit PCM or 32-bit float WAV file into samples in [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: malformed header (not RIFF/WAVE)")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        size = int.from_bytes(raw[pos + 4 : pos + 8], "little")
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise ValueError(f"{path}: malformed fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: malformed header (missing fmt or data chunk)")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format == 0xFFFE and bits in (16, 32):
        # WAVE_FORMAT_EXTENSIBLE; the sub-format is implied by the bit depth here
        audio_format = 1 if bits == 16 else 3
    if channels != 1:
        raise ValueError(f"{path}: unsupported encoding ({channels} channels, expected mono)")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported encoding (format {audio_format}, {bits} bits)")
    if rate != expected_rate:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling unsupported)")
    return samples


def write_wav(path, samples, rate=SAMPLE_RATE, subtype="pcm16"):
    samples = np.asarray(samples, dtype=np.float64)
    if subtype == "pcm16":
        pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        with wave.open(str(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(rate)
            w.writeframes(pcm.tobytes())
    elif subtype == "float32":
        payload = samples.astype("<f4").tobytes()
        buf = io.BytesIO()
        fmt = (3).to_bytes(2, "little") + (1).to_bytes(2, "little") + rate.to_bytes(4, "little")
        fmt += (rate * 4).to_bytes(4, "little") + (4).to_bytes(2, "little") + (32).to_bytes(2, "little")
        buf.write(b"RIFF" + (4 + 8 + 16 + 8 + len(payload)).to_bytes(4, "little") + b"WAVE")
        buf.write(b"fmt " + (16).to_bytes(4, "little") + fmt)
        buf.write(b"data" + len(payload).to_bytes(4, "little") + payload)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    else:
        raise ValueError(f"unknown subtype {subtype!r}")


# log-mel features


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    fmax = sample_rate / 2 if fmax is None else fmax
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(n_mels, n_fft, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular HTK-mel filters, shape ``n_mels x (n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def n_frames_for(num_samples, window, shift):
    return (num_samples - window) // shift + 1


def logmel_features(waveform, n_mels=80, window_s=0.025, shift_s=0.010, sample_rate=SAMPLE_RATE,
                    floor=MEL_FLOOR, mean_normalize=True):
    """Log mel-filterbank energies with per-utterance mean normalization per bin."""
    x = np.asarray(waveform, dtype=np.float64)
    window = int(round(window_s * sample_rate))
    shift = int(round(shift_s * sample_rate))
    if x.ndim != 1 or x.shape[0] < window:
        raise ValueError(f"waveform too short: need at least {window} samples, got {x.shape[-1] if x.ndim else 0}")
    T = n_frames_for(x.shape[0], window, shift)
    n_fft = 1 << (window - 1).bit_length()
    idx = np.arange(window)[None, :] + shift * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(window)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate).T
    logmel = np.log(energies + floor).T
    if mean_normalize:
        logmel = logmel - logmel.mean(axis=1, keepdims=True)
    return FeatureSequence(logmel, frame_shift_s=shift_s, frame_length_s=window_s)


# activity masks


def frame_centers(T, frame_shift_s):
    return (np.arange(T) + 0.5) * frame_shift_s


def _speaker_bits(intervals, centers):
    bits = np.zeros(centers.shape[0], dtype=np.int8)
    for onset, offset in intervals:
        bits[(centers >= onset) & (centers <= offset)] = 1
    return bits


def rasterize_activities(annotation, target_speaker_id, T, frame_shift_s=0.01):
    """Frame-level (target, non-target) activity bits, decided at frame centers."""
    target = str(target_speaker_id)
    if target not in annotation.intervals:
        raise KeyError(f"unknown speaker id {target_speaker_id!r}")
    centers = frame_centers(T, frame_shift_s)
    q_target = _speaker_bits(annotation.intervals[target], centers)
    q_nontarget = np.zeros(T, dtype=np.int8)
    for spk, segs in annotation.intervals.items():
        if spk != target:
            q_nontarget |= _speaker_bits(segs, centers)
    return ActivityMask(q_target, q_nontarget)


def downsample_mask(mask, stride):
    """OR-pool a binary vector with non-overlapping windows of ``stride`` frames."""
    if int(stride) != stride or stride <= 0:
        raise ValueError(f"stride must be a positive integer, got {stride}")
    mask = np.asarray(mask).astype(np.int8)
    T = mask.shape[0]
    n_out = -(-T // stride)
    padded = np.zeros(n_out * stride, dtype=np.int8)
    padded[:T] = mask
    return padded.reshape(n_out, stride).max(axis=1)


# RTTM


def parse_rttm(lines):
    """Parse RTTM ``SPEAKER`` lines into ``{recording: ActivityAnnotation}``."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    per_rec = {}
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 10 or fields[0] != "SPEAKER":
            raise ValueError(f"RTTM line {lineno}: expected 10 fields starting with SPEAKER: {line!r}")
        rec, onset, dur, spk = fields[1], float(fields[3]), float(fields[4]), fields[7]
        per_rec.setdefault(rec, {}).setdefault(spk, []).append((onset, onset + dur))
    return {rec: ActivityAnnotation(segs) for rec, segs in per_rec.items()}


def read_rttm(path):
    with open(path) as fh:
        return parse_rttm(fh.read())


def format_rttm(annotation, recording_id):
    lines = []
    for spk in sorted(annotation.intervals):
        for onset, offset in annotation.intervals[spk]:
            lines.append(f"SPEAKER {recording_id} 1 {onset:.3f} {offset - onset:.3f} <NA> <NA> {spk} <NA> <NA>")
    lines.sort(key=lambda ln: (float(ln.split()[3]), ln.split()[7]))
    return "\n".join(lines) + ("\n" if lines else "")


def write_rttm(path, annotation, recording_id):
    with open(path, "w") as fh:
        fh.write(format_rttm(annotation, recording_id))
