"""Synthetic observation generators with embedded ground truth.

Objects follow the same story the agents assume: a true sign per object,
a per-agent category drawn from a sign-conditioned table, and a feature
count vector drawn from a category-conditioned table.  The true tables
are near-diagonal: category = sign and feature = category up to a noise
mixture toward uniform, so noise=0 yields perfectly separable data.
True signs are embedded as labels for external agreement scoring only.

Substream layout: 0 = sign draws, (1, k, d) = agent k's categories and
counts for object d, so edits to one stage never shift another.
"""

from __future__ import annotations

import numpy as np

from . import pgm, temporal
from .probcore import ConfigError, RandomSource, sample_categorical

_S_SIGNS, _S_OBS = 0, 1
MAX_REJECTIONS = 10_000


def _check_sizes(n_agents, n_objects, n_true_signs, n_categories, n_features,
                 counts_per_obs, noise):
    if min(n_agents, n_objects, n_true_signs, n_categories, n_features,
           counts_per_obs) < 1:
        raise ConfigError("all generator sizes must be >= 1")
    if n_objects < n_true_signs:
        raise ConfigError("need at least one object per true sign")
    if n_categories < n_true_signs or n_features < n_categories:
        raise ConfigError("separable construction needs F >= C >= M_true")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("noise must lie in [0, 1]")


def _near_diagonal(n_rows: int, n_cols: int, noise: float) -> np.ndarray:
    """Rows: (1 - noise) on the diagonal entry plus a uniform mixture."""
    table = np.full((n_rows, n_cols), noise / n_cols)
    table[np.arange(n_rows), np.arange(n_rows)] += 1.0 - noise
    return table


def true_sign_table(n_true_signs: int, n_categories: int,
                    noise: float) -> np.ndarray:
    """(M_true, C) ground-truth p(z | m)."""
    return _near_diagonal(n_true_signs, n_categories, noise)


def true_feature_table(n_categories: int, n_features: int,
                       noise: float) -> np.ndarray:
    """(C, F) ground-truth p(f | z)."""
    return _near_diagonal(n_categories, n_features, noise)


def _draw_signs(n_objects: int, n_true_signs: int, rng) -> np.ndarray:
    """Uniform sign per object, rejected until every sign is used."""
    for _ in range(MAX_REJECTIONS):
        signs = np.array([rng.integers(0, n_true_signs)
                          for _ in range(n_objects)], dtype=np.int64)
        if np.unique(signs).size == n_true_signs:
            return signs
    raise ConfigError("could not cover all true signs; D too small?")


def generate_dataset(n_agents: int, n_objects: int, n_true_signs: int,
                     n_categories: int, n_features: int,
                     counts_per_obs: int = 20, noise: float = 0.0,
                     seed: int = 0) -> pgm.Dataset:
    """Static dataset: one count vector per agent and object."""
    _check_sizes(n_agents, n_objects, n_true_signs, n_categories, n_features,
                 counts_per_obs, noise)
    root = RandomSource(seed)
    signs = _draw_signs(n_objects, n_true_signs, root.substream(_S_SIGNS))
    p_z = true_sign_table(n_true_signs, n_categories, noise)
    p_f = true_feature_table(n_categories, n_features, noise)
    counts = np.empty((n_agents, n_objects, n_features), dtype=np.int64)
    for k in range(n_agents):
        for d in range(n_objects):
            rng = root.substream(_S_OBS, k, d)
            z = _sample_row(p_z[signs[d]], rng)
            counts[k, d] = rng.multinomial(counts_per_obs, p_f[z])
    provenance = {"generator": "synthetic-static", "K": n_agents,
                  "D": n_objects, "M_true": n_true_signs, "C": n_categories,
                  "F": n_features, "counts_per_obs": counts_per_obs,
                  "noise": noise, "seed": seed}
    return pgm.Dataset(counts, signs, provenance)


def _sample_row(pvals: np.ndarray, rng) -> int:
    """One categorical draw from a probability row (handles exact zeros)."""
    with np.errstate(divide="ignore"):
        return sample_categorical(np.log(pvals / pvals.sum()), rng)


def generate_sequence_dataset(n_agents: int, n_objects: int,
                              n_true_signs: int, n_categories: int,
                              n_features: int, n_steps: int,
                              counts_per_step: int = 20, noise: float = 0.0,
                              stay: float = 0.5,
                              seed: int = 0) -> temporal.SequenceDataset:
    """Sequence dataset: categories follow a sticky sign-pulled chain.

    z_0 is uniform; each later step keeps the previous category with
    probability stay and otherwise redraws from the sign table, so the
    sign shapes where the chain spends its time.  Emissions per step use
    the same feature table as the static generator.
    """
    _check_sizes(n_agents, n_objects, n_true_signs, n_categories, n_features,
                 counts_per_step, noise)
    if n_steps < 1:
        raise ConfigError("sequences need at least one step")
    if not 0.0 <= stay < 1.0:
        raise ConfigError("stay must lie in [0, 1)")
    root = RandomSource(seed)
    signs = _draw_signs(n_objects, n_true_signs, root.substream(_S_SIGNS))
    p_z = true_sign_table(n_true_signs, n_categories, noise)
    p_f = true_feature_table(n_categories, n_features, noise)
    counts = np.empty((n_agents, n_objects, n_steps, n_features),
                      dtype=np.int64)
    for k in range(n_agents):
        for d in range(n_objects):
            rng = root.substream(_S_OBS, k, d)
            z = rng.integers(0, n_categories)
            for t in range(n_steps):
                if rng.uniform() >= stay:
                    z = _sample_row(p_z[signs[d]], rng)
                counts[k, d, t] = rng.multinomial(counts_per_step, p_f[z])
    provenance = {"generator": "synthetic-sequence", "K": n_agents,
                  "D": n_objects, "M_true": n_true_signs, "C": n_categories,
                  "F": n_features, "T": n_steps,
                  "counts_per_step": counts_per_step, "noise": noise,
                  "stay": stay, "seed": seed}
    return temporal.SequenceDataset(counts, signs, provenance)
