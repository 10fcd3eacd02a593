"""Patch-embedding observations: sample patch features at the tapped encoder
layers of a trained translator, project them to unit vectors, and flatten
the resulting block into a fixed-length policy observation.

No gradients are retained; the feature extractor is frozen during policy
training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad, take_columns
from .cut import Generator, ProjectionHead, _sample_locations, _tap_features
from .errors import ConfigError, ContractError

__all__ = [
    "EmbedConfig",
    "EmbeddingBlock",
    "extract_embedding",
    "flatten",
    "reshape_block",
    "dump_embeddings_csv",
]


@dataclass(frozen=True)
class EmbedConfig:
    n_taps: int = 5  # L
    patches_per_tap: int = 32  # S
    embed_dim: int = 32  # k
    seed_policy: str = "global"  # "global" | "episode"
    location_seed: int = 0

    @property
    def observation_length(self) -> int:
        return self.n_taps * self.patches_per_tap * self.embed_dim

    def validate(self) -> "EmbedConfig":
        if self.n_taps < 1 or self.patches_per_tap < 1 or self.embed_dim < 1:
            raise ConfigError("embedding dimensions must be positive")
        if self.seed_policy not in ("global", "episode"):
            raise ConfigError("seed_policy must be 'global' or 'episode'")
        return self


@dataclass
class EmbeddingBlock:
    values: np.ndarray  # (L, S, k) float64, unit vectors along the last axis
    tap_layers: tuple[int, ...]
    locations: list[np.ndarray]  # per tap, flat spatial indices (S,)

    def validate(self) -> "EmbeddingBlock":
        if self.values.ndim != 3:
            raise ContractError("embedding block must be (L, S, k)")
        norms = np.linalg.norm(self.values, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("embedding vectors must be unit-norm")
        return self


def _global_rng(cfg: EmbedConfig, tap: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=cfg.location_seed, spawn_key=(tap,))
    return np.random.Generator(np.random.PCG64(seq))


def extract_embedding(
    gen: Generator,
    head: ProjectionHead,
    y_hat: np.ndarray | Tensor,
    cfg: EmbedConfig,
    rng: np.random.Generator | None = None,
) -> EmbeddingBlock:
    """Sample S patch locations at each of the L taps of the encoder run on
    the translated image and project them to unit k-vectors.

    With the "global" seed policy the locations depend only on the config
    seed, so every frame shares one feature layout; with "episode" they are
    drawn from the supplied rng.
    """
    cfg.validate()
    if cfg.embed_dim != head.embed_dim:
        raise ConfigError(
            f"config embed_dim {cfg.embed_dim} != head embed_dim {head.embed_dim}"
        )
    if cfg.seed_policy == "episode" and rng is None:
        raise ContractError("episode seed policy needs an rng")

    x = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.reshape(1, *x.shape)

    with no_grad():
        taps = gen.encode_taps(x)
        if cfg.n_taps > len(taps):
            raise ConfigError(
                f"config asks for {cfg.n_taps} taps, encoder exposes {len(taps)}"
            )
        values = np.empty(
            (cfg.n_taps, cfg.patches_per_tap, cfg.embed_dim), dtype=np.float64
        )
        locations = []
        for tap in range(cfg.n_taps):
            fmap = taps[tap]
            n_pos = fmap.shape[2] * fmap.shape[3]
            tap_rng = _global_rng(cfg, tap) if cfg.seed_policy == "global" else rng
            locs = _sample_locations(n_pos, cfg.patches_per_tap, tap_rng)
            values[tap] = _tap_features(head, tap, fmap, locs).data
            locations.append(locs)

    return EmbeddingBlock(
        values=values, tap_layers=tuple(range(cfg.n_taps)), locations=locations
    ).validate()


def flatten(block: EmbeddingBlock) -> np.ndarray:
    """Row-major flatten (tap outer, patch middle, feature inner)."""
    return block.values.reshape(-1).copy()


def reshape_block(flat: np.ndarray, cfg: EmbedConfig) -> np.ndarray:
    """Inverse of flatten, back to (L, S, k)."""
    if flat.size != cfg.observation_length:
        raise ContractError(
            f"flat length {flat.size} != L*S*k = {cfg.observation_length}"
        )
    return flat.reshape(cfg.n_taps, cfg.patches_per_tap, cfg.embed_dim)


def dump_embeddings_csv(path: str, blocks: list[tuple[int, int, EmbeddingBlock]]):
    """Write (episode, step, l, s, k, value) rows for offline analysis."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("episode,step,l,s,k,value\n")
        for episode, step, block in blocks:
            n_taps, n_patches, dim = block.values.shape
            for l in range(n_taps):
                for s in range(n_patches):
                    for k in range(dim):
                        fh.write(
                            f"{episode},{step},{l},{s},{k},"
                            f"{block.values[l, s, k]:.9f}\n"
                        )
