"""Input checks shared by the estimator and the command line."""

import numpy as np

from .errors import MissingMask, ShapeError
from .features import ActivityMask, FeatureSequence


def check_recordings(X, n_mels=None):
    """Normalize ``X`` to a list of ``n_mels x T`` float arrays.

    Accepts a 3-D array ``N x F x T``, a single 2-D array, or a sequence of
    2-D arrays / :class:`FeatureSequence` objects with varying ``T``.
    """
    if isinstance(X, FeatureSequence):
        X = [X]
    elif isinstance(X, np.ndarray):
        if X.ndim == 2:
            X = [X]
        elif X.ndim != 3:
            raise ShapeError(f"expected N x F x T features, got an array with shape {X.shape}")
    out = []
    for i, x in enumerate(X):
        frames = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
        if frames.ndim != 2:
            raise ShapeError(f"recording {i}: expected F x T features, got shape {frames.shape}")
        if n_mels is not None and frames.shape[0] != n_mels:
            raise ShapeError(f"recording {i}: {frames.shape[0]} mel bins, model expects {n_mels}", axis=0)
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"recording {i}: non-finite feature values")
        if frames.shape[1] < 1:
            raise ShapeError(f"recording {i}: no frames", axis=1)
        out.append(frames)
    if not out:
        raise ValueError("no recordings given")
    return out


def check_masks(masks, recordings, required):
    """One :class:`ActivityMask` per recording, or ``None`` entries when masks are optional.

    Masks may be given as ``ActivityMask`` objects or ``2 x T`` arrays
    (target row, non-target row).
    """
    if masks is None:
        if required:
            raise MissingMask("guided extractors need one activity mask per recording")
        return [None] * len(recordings)
    if len(masks) != len(recordings):
        raise ValueError(f"got {len(masks)} masks for {len(recordings)} recordings")
    out = []
    for i, (m, x) in enumerate(zip(masks, recordings)):
        if not isinstance(m, ActivityMask):
            arr = np.asarray(m)
            if arr.ndim != 2 or arr.shape[0] != 2:
                raise ShapeError(f"mask {i}: expected 2 x T activity bits, got shape {arr.shape}")
            m = ActivityMask(arr[0], arr[1])
        if len(m) != x.shape[1]:
            raise ShapeError(f"mask {i}: {len(m)} frames but recording has {x.shape[1]}", axis=-1)
        out.append(m.require_target())
    return out
