"""Held-out evaluation material built from a :class:`RunConfig`."""

import numpy as np

from .synth import SynthConfig, TrialConfig, build_trial_set, synth_conversation, synth_speaker_bank


def synth_config(cfg):
    return SynthConfig(n_mels=cfg.data.n_mels)


def eval_bank(cfg):
    """Speakers disjoint from training: a different seed and id prefix."""
    return synth_speaker_bank(cfg.data.eval_bank_seed, cfg.data.n_eval_speakers, synth_config(cfg), prefix="eval")


def trial_set(cfg, protocol=None, n_trials=None, seed=None):
    d = cfg.data
    tcfg = TrialConfig(
        n_trials=n_trials or d.n_trials,
        protocol=protocol or d.protocol,
        n_interferers=d.n_interferers,
        seed=d.trial_seed if seed is None else seed,
    )
    return build_trial_set(eval_bank(cfg), tcfg, synth_config(cfg))


def conversations(cfg, n=None, seed=None):
    """``(recording id, Mixture)`` pairs, each with ``speakers_per_conversation`` eval speakers."""
    d = cfg.data
    bank = eval_bank(cfg)
    rng = np.random.default_rng(d.trial_seed + 17 if seed is None else seed)
    out = []
    for i in range(n or d.n_conversations):
        spk = [bank[j] for j in rng.permutation(len(bank))[: d.speakers_per_conversation]]
        out.append((f"conv{i:03d}", synth_conversation(spk, d.conversation_s, rng, synth_config(cfg))))
    return out
