"""Seeded synthetic annotation data with Gaussian cluster structure."""

from __future__ import annotations

import numpy as np

from .data import Dataset, Example, SparseVector


def make_clustered_dataset(n_examples: int = 2500, n_labels: int = 20, x_dim: int = 100,
                           clusters_per_label: int = 2, latent_dim: int = 16,
                           cluster_std: float = 0.4, active: int = 20,
                           label_noise: float = 0.2, seed: int = 0) -> Dataset:
    """Sparse inputs drawn from a mixture of Gaussian clusters.

    Every label owns ``clusters_per_label`` cluster centers in a
    ``latent_dim``-dimensional space. A point is sampled around one center,
    mapped to ``x_dim`` input dims by a fixed random linear map, and
    sparsified by keeping only ``active`` randomly chosen coordinates. With
    probability ``label_noise`` the label is replaced by a different,
    uniformly chosen one.
    """
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must lie in [0, 1)")
    if not 1 <= active <= x_dim:
        raise ValueError("active must lie in [1, x_dim]")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_labels, clusters_per_label, latent_dim))
    mixing = rng.normal(size=(latent_dim, x_dim)) / np.sqrt(latent_dim)

    examples = []
    for i in range(n_examples):
        label = int(rng.integers(n_labels))
        center = centers[label, rng.integers(clusters_per_label)]
        z = center + cluster_std * rng.normal(size=latent_dim)
        dense = z @ mixing
        keep = np.sort(rng.choice(x_dim, size=active, replace=False))
        values = dense[keep]
        nz = values != 0.0
        if rng.random() < label_noise:
            label = int((label + rng.integers(1, n_labels)) % n_labels)
        examples.append(Example(i, SparseVector(keep[nz], values[nz]), frozenset([label])))
    return Dataset(tuple(examples), x_dim, n_labels)
