"""YAML run configuration with strict keys and ``ME_`` environment overrides.

Override any field with ``ME_<SECTION>__<KEY>=<yaml value>``, e.g.
``ME_TRAINING__EPOCHS=5`` or ``ME_MODEL__GUIDE_BN=false``. ``ME_SEED``,
``ME_OUT``, ``ME_THREADS`` and ``ME_CONFIG`` stand in for the matching flags.
"""

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .models import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "ME_"


@dataclass
class DataConfig:
    n_mels: int = 40
    eval_bank_seed: int = 1000
    n_eval_speakers: int = 24
    trial_seed: int = 0
    n_trials: int = 200
    protocol: str = "one-vs-many"
    n_interferers: int = 3
    n_conversations: int = 10
    conversation_s: float = 40.0
    speakers_per_conversation: int = 3


@dataclass
class EvalConfig:
    m_values: list = field(default_factory=lambda: [0, 1, 2, 3, 5])
    window_s: float = 10.0
    shift_s: float = 1.0
    ahc_threshold: float = 0.5
    min_speech_s: float = 0.3
    n_resamples: int = 1000
    bootstrap_seed: int = 0


SECTIONS = {"model": ModelConfig, "data": DataConfig, "training": TrainConfig, "evaluation": EvalConfig}


def _strict(cls, d, section):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ValueError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model") or {})
        preset = model.pop("preset", None)
        if preset is not None:
            base = asdict(ModelConfig.preset(preset))
            base.update(model)
            model = base
        kwargs = {name: _strict(cls_, d.get(name) if name != "model" else model, name) for name, cls_ in SECTIONS.items()}
        cfg = cls(**kwargs)
        cfg.model.validate()
        if cfg.data.n_mels != cfg.model.n_mels:
            raise ValueError("data.n_mels and model.n_mels must agree")
        return cfg

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text):
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path=None, environ=None):
        """Read ``path`` (if any) and apply ``ME_<SECTION>__<KEY>`` overrides."""
        d = {}
        if path is not None:
            with open(path) as fh:
                d = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_env_overrides(d, environ))


def apply_env_overrides(d, environ=None):
    env = os.environ if environ is None else environ
    out = {k: dict(v or {}) for k, v in d.items()}
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX) :].partition("__")
        section, name = section.lower(), name.lower()
        if section not in SECTIONS:
            raise ValueError(f"{key}: unknown config section {section!r}")
        out.setdefault(section, {})[name] = yaml.safe_load(raw)
    return out
