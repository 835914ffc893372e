"""Synthetic family/genus/species datasets with Gaussian image clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hiernet import Hierarchy
from .seeder import FeatureDataset


@dataclass
class SyntheticData:
    features: FeatureDataset
    semantic: dict
    hierarchy: Hierarchy
    prototypes: dict


def make_hierarchical_dataset(n_family: int = 3, genera_per_family: int = 2, species_per_genus: int = 2,
                              dim: int = 20, images_per_class: int = 30, family_scale: float = 4.0,
                              genus_scale: float = 2.0, species_scale: float = 1.5,
                              image_noise: float = 1.0, semantic_noise: float = 0.25,
                              seed: int = 0) -> SyntheticData:
    """Nested Gaussian prototypes; images scatter around their species prototype.

    A species prototype is family centre + genus offset + species offset,
    each drawn isotropically with the given scale. Semantic vectors are the
    prototypes plus independent noise of scale ``semantic_noise``.
    """
    rng = np.random.default_rng(seed)
    rows, protos = [], {}
    for f in range(n_family):
        fc = rng.normal(scale=family_scale, size=dim)
        for g in range(genera_per_family):
            gc = fc + rng.normal(scale=genus_scale, size=dim)
            for s in range(species_per_genus):
                sid = f"s{f}{g}{s}"
                protos[sid] = gc + rng.normal(scale=species_scale, size=dim)
                rows.append((sid, f"g{f}{g}", f"f{f}"))
    hierarchy = Hierarchy(rows)

    ids, labels, feats = [], [], []
    for sid, proto in protos.items():
        X = proto + rng.normal(scale=image_noise, size=(images_per_class, dim))
        for i, x in enumerate(X):
            ids.append(f"{sid}_{i:03d}")
            labels.append(sid)
            feats.append(x)
    semantic = {sid: p + rng.normal(scale=semantic_noise, size=dim) for sid, p in protos.items()}
    return SyntheticData(FeatureDataset(ids, np.array(feats), labels), semantic, hierarchy, protos)
