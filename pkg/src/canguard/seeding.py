"""One user seed fans out to per-component seeds.

``derive_seed(seed, "split")`` mixes the component name (CRC32) with the user
seed through ``numpy.random.SeedSequence``; the result only depends on the
pair, so components can be re-run in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

COMPONENTS = ("synth", "split", "smote", "init", "train", "validation", "shap", "permutation", "sample")


def derive_seed(seed: int, component: str) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(component.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))
