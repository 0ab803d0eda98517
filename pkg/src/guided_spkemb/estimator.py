"""scikit-learn style wrapper: ``fit`` trains on synthetic mixtures, ``transform`` embeds recordings."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .models import ModelConfig, extract_embedding, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_run
from .validation import check_masks, check_recordings


class GuidedSpeakerEmbedder(TransformerMixin, BaseEstimator):
    """Target-speaker embedding extractor.

    ``fit(X)`` ignores the contents of ``X`` unless it is a list of
    :class:`~guided_spkemb.synth.SyntheticSpeaker`, which then replaces the
    generated training bank. ``transform(X, masks)`` returns one row per
    recording.
    """

    def __init__(self, preset="proposed", family="ecapa-mini", n_mels=40, channels=64, num_blocks=3,
                 embedding_dim=32, pointwise_only=False, epochs=40, iters_per_epoch=15, mixtures_per_batch=16,
                 n_speakers=64, margin=0.2, scale=30.0, base_lr=1e-5, max_lr=2e-3, warmup_iters=30,
                 random_state=0):
        self.preset = preset
        self.family = family
        self.n_mels = n_mels
        self.channels = channels
        self.num_blocks = num_blocks
        self.embedding_dim = embedding_dim
        self.pointwise_only = pointwise_only
        self.epochs = epochs
        self.iters_per_epoch = iters_per_epoch
        self.mixtures_per_batch = mixtures_per_batch
        self.n_speakers = n_speakers
        self.margin = margin
        self.scale = scale
        self.base_lr = base_lr
        self.max_lr = max_lr
        self.warmup_iters = warmup_iters
        self.random_state = random_state

    def _model_config(self):
        blocks = self.num_blocks
        return ModelConfig.preset(
            self.preset,
            family=self.family,
            n_mels=self.n_mels,
            channels=self.channels,
            num_blocks=blocks,
            kernel_sizes=[3] * blocks,
            dilations=[2 + i for i in range(blocks)],
            embedding_dim=self.embedding_dim,
            pointwise_only=self.pointwise_only,
        ).validate()

    def _train_config(self):
        return TrainConfig(
            n_speakers=self.n_speakers,
            epochs=self.epochs,
            iters_per_epoch=self.iters_per_epoch,
            mixtures_per_batch=self.mixtures_per_batch,
            margin=self.margin,
            scale=self.scale,
            base_lr=self.base_lr,
            max_lr=self.max_lr,
            cycle_epochs=self.epochs,
            warmup_iters=self.warmup_iters,
        )

    def fit(self, X=None, y=None):
        bank = X if X is not None and len(X) and hasattr(X[0], "envelope") else None
        seed = 0 if self.random_state is None else int(self.random_state)
        result = train_run(self._model_config(), self._train_config(), seed=seed, bank=bank)
        self.model_ = result.model
        self.head_ = result.head
        self.history_ = result.metrics
        self.n_features_in_ = self.n_mels
        return self

    def transform(self, X, masks=None):
        check_is_fitted(self, "model_")
        recordings = check_recordings(X, self.model_.config.n_mels)
        masks = check_masks(masks, recordings, required=self.model_.config.guided)
        return np.stack([extract_embedding(self.model_, x, m) for x, m in zip(recordings, masks)])

    def fit_transform(self, X=None, y=None, masks=None, **fit_params):
        raise TypeError("fit() trains on synthetic speakers; call fit() then transform(X, masks)")

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path):
        model, meta = load_checkpoint(path)
        params = meta.get("extra", {}).get("estimator", {})
        est = cls(**params)
        est.model_ = model
        est.n_features_in_ = model.config.n_mels
        return est
