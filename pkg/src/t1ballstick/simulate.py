"""Synthetic T1-ball-stick voxels with Rician noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionProtocol, SignalMatrix
from .model import DEFAULT_BOUNDS, DEFAULT_OPTIONS, ModelOptions, ParamBounds, TissueParams, predict_batch

RNG_DESCRIPTION = "numpy.random.Generator(PCG64(SeedSequence(entropy=seed, spawn_key=(voxel_index,))))"


@dataclass(frozen=True)
class SimulationConfig:
    n_voxels: int
    sigma: float = 0.02
    seed: int = 0
    bounds: ParamBounds = field(default=DEFAULT_BOUNDS)
    opts: ModelOptions = field(default=DEFAULT_OPTIONS)

    def __post_init__(self):
        if self.n_voxels <= 0:
            raise ValueError("n_voxels must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        self.bounds.validate(allow_degenerate=True)

    def as_dict(self) -> dict:
        return {
            "n_voxels": self.n_voxels,
            "sigma": self.sigma,
            "seed": self.seed,
            "bounds": self.bounds.as_dict(),
            "model_options": self.opts.as_dict(),
            "rng": RNG_DESCRIPTION,
        }


@dataclass
class SyntheticDataset:
    signals: SignalMatrix
    truth: np.ndarray  # (n_voxels, 7)
    config: SimulationConfig

    def truth_params(self) -> list:
        return [TissueParams.from_array(row) for row in self.truth]


def voxel_rng(seed: int, voxel: int) -> np.random.Generator:
    """Independent generator for one voxel, so results do not depend on how voxels are batched."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(int(voxel),))))


def sample_params(rng: np.random.Generator, bounds: ParamBounds = DEFAULT_BOUNDS) -> TissueParams:
    """Draw each parameter independently and uniformly from its bounds."""
    return TissueParams.from_array(rng.uniform(bounds.lo, bounds.hi))


def add_rician_noise(signal, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise of per-channel std ``sigma``."""
    signal = np.asarray(signal, dtype=float)
    if sigma == 0:
        return signal.copy()
    noise = rng.normal(0.0, sigma, size=(2,) + signal.shape)
    return np.sqrt((signal + noise[0]) ** 2 + noise[1] ** 2)


def generate_dataset(protocol: AcquisitionProtocol, config: SimulationConfig, chunk: int = 8192) -> SyntheticDataset:
    n = config.n_voxels
    truth = np.empty((n, 7))
    noisy = np.empty((n, len(protocol)))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        rngs = [voxel_rng(config.seed, i) for i in range(start, stop)]
        for i, rng in zip(range(start, stop), rngs):
            truth[i] = sample_params(rng, config.bounds).to_array()
        clean = predict_batch(truth[start:stop], protocol, config.opts)
        for k, rng in enumerate(rngs):
            noisy[start + k] = add_rician_noise(clean[k], config.sigma, rng)
    return SyntheticDataset(SignalMatrix(noisy, normalized=True), truth, config)
