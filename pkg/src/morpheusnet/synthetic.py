"""Seeded synthetic EEG-like dataset with stage-specific spectral signatures.

Each stage gets a characteristic oscillation (frequency, amplitude, and for
N2 a bursty envelope) on top of pink noise, and stage sequences follow a
sticky Markov chain so that temporal context carries usable information. A
fraction of epochs is generated with a strongly attenuated signature; those
are hard for a per-epoch classifier but their neighbors still give the
sequence learner something to work with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edf import Hypnogram
from .model import STAGES
from .pipeline import EPOCH_SAMPLES, TARGET_HZ

SELF_TRANSITION = 0.85
WEAK_EPOCH_PROB = 0.22
WEAK_SCALE = 0.25
NOISE_SIGMA = 16.0

# stage -> (dominant frequency Hz, amplitude, bursty envelope)
SIGNATURES = {
    "W": (10.0, 30.0, False),
    "N1": (7.0, 13.0, False),
    "N2": (13.0, 35.0, True),
    "N3": (1.5, 75.0, False),
    "REM": (5.0, 16.0, False),
}


@dataclass
class SyntheticSubject:
    subject_id: str
    epochs: np.ndarray  # [N, 1, 3000] float32, robustly scaled like real data
    stages: np.ndarray  # [N] int64
    hypnogram: Hypnogram


def transition_matrix() -> np.ndarray:
    k = len(STAGES)
    off = (1.0 - SELF_TRANSITION) / (k - 1)
    p = np.full((k, k), off)
    np.fill_diagonal(p, SELF_TRANSITION)
    return p


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    k = np.arange(spectrum.size, dtype=np.float64)
    k[0] = 1.0
    spectrum /= np.sqrt(k)
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n)
    std = x.std()
    return x / std if std > 0 else x


def _burst_envelope(rng: np.random.Generator, t: np.ndarray) -> np.ndarray:
    env = np.zeros_like(t)
    n_bursts = rng.integers(5, 9)
    for center in rng.uniform(0.5, t[-1] - 0.5, n_bursts):
        width = rng.uniform(0.3, 0.6)
        env += np.exp(-0.5 * ((t - center) / width) ** 2)
    return np.clip(env, 0.0, 1.0)


def _epoch_signal(rng: np.random.Generator, stage: str) -> np.ndarray:
    freq, amp, bursty = SIGNATURES[stage]
    t = np.arange(EPOCH_SAMPLES) / TARGET_HZ
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * t + phase)
    if bursty:
        wave *= _burst_envelope(rng, t)
    if rng.random() < WEAK_EPOCH_PROB:
        amp *= WEAK_SCALE
    return amp * wave + NOISE_SIGMA * _pink_noise(rng, EPOCH_SAMPLES)


def _markov_stages(rng: np.random.Generator, n: int) -> np.ndarray:
    p = transition_matrix()
    stages = np.empty(n, dtype=np.int64)
    state = int(rng.integers(0, len(STAGES)))
    for i in range(n):
        stages[i] = state
        state = int(rng.choice(len(STAGES), p=p[state]))
    return stages


def synth_dataset(n_subjects: int, epochs_per_subject: int, seed: int = 0):
    """Generate labeled recordings; identical seeds give identical datasets."""
    if n_subjects < 1 or epochs_per_subject < 1:
        raise ValueError("need at least one subject and one epoch per subject")
    root = np.random.default_rng(seed)
    subjects = []
    for s in range(n_subjects):
        rng = np.random.default_rng(root.integers(0, 2**63 - 1))
        stages = _markov_stages(rng, epochs_per_subject)
        raw = np.empty((epochs_per_subject, EPOCH_SAMPLES), dtype=np.float64)
        for i, stage_idx in enumerate(stages):
            raw[i] = _epoch_signal(rng, STAGES[stage_idx])
        # same robust scaling the real preprocessing applies, over the whole night
        flat = raw.reshape(-1)
        median = float(np.median(flat))
        q75, q25 = np.percentile(flat, [75, 25])
        iqr = float(q75 - q25) or 1.0
        epochs = ((raw - median) / iqr).astype(np.float32)[:, None, :]
        subjects.append(SyntheticSubject(
            subject_id=f"S{s:02d}",
            epochs=epochs,
            stages=stages,
            hypnogram=Hypnogram([STAGES[i] for i in stages]),
        ))
    return subjects
