"""Generative-quality scoring (inception-style score, Fréchet distance) with
a small pose-bucket classifier standing in for a pretrained feature network,
rank-sum checkpoint selection, and LOWESS curve smoothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, logsumexp, no_grad
from .errors import ContractError
from .nn import Conv2d, LeakyReLU, Linear, Module, ParamStore, Sequential, adam_step

__all__ = [
    "FeatureNet",
    "GaussianStats",
    "pose_bucket",
    "POSE_BUCKETS",
    "train_feature_net",
    "inception_score",
    "inception_score_from_probs",
    "frechet_distance",
    "rank_sum_select",
    "rank_table",
    "RankEntry",
    "lowess",
]

POSE_BUCKETS = (
    "line-hidden",
    "line-partial",
    "line-visible-outside",
    "line-visible-inside",
)


def pose_bucket(n_mask: int, eps1: int, goal2: bool) -> int:
    """Coarse pose label derived from the reward ground truth."""
    if n_mask == 0:
        return 0
    if n_mask < eps1:
        return 1
    return 3 if goal2 else 2


class FeatureNet(Module):
    """Small convolutional pose classifier exposing class probabilities and a
    penultimate feature vector."""

    def __init__(self, rng, n_classes: int = 4, width: int = 8, feature_dim: int = 16):
        self.trunk = Sequential(
            Conv2d(1, width, 4, rng, 2, 1),
            LeakyReLU(0.2),
            Conv2d(width, 2 * width, 4, rng, 2, 1),
            LeakyReLU(0.2),
        )
        self.proj = Linear(2 * width, feature_dim, rng)
        self.act = LeakyReLU(0.2)
        self.cls = Linear(feature_dim, n_classes, rng)
        self.n_classes = n_classes
        self.feature_dim = feature_dim

    def _features_t(self, x: Tensor) -> Tensor:
        h = self.trunk(x)
        pooled = h.mean(axis=(2, 3))  # global average pool -> (N, C)
        return self.act(self.proj(pooled))

    def logits_t(self, x: Tensor) -> Tensor:
        return self.cls(self._features_t(x))

    def features(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self._features_t(Tensor(images)).data

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.logits_t(Tensor(images)).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def train_feature_net(
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    epochs: int = 20,
    batch_size: int = 32,
    lr: float = 1e-3,
    width: int = 8,
    feature_dim: int = 16,
    n_classes: int = 4,
) -> FeatureNet:
    """Cross-entropy training of the pose classifier on (N,1,H,W) frames."""
    if len(images) != len(labels) or len(images) == 0:
        raise ContractError("images and labels must align and be non-empty")
    if labels.max() >= n_classes:
        raise ContractError("labels exceed the class count")
    net = FeatureNet(rng.spawn(1)[0], n_classes, width, feature_dim)
    store = ParamStore(net.params())
    n = len(images)
    onehot_rows = np.eye(net.n_classes)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = Tensor(images[idx])
            logits = net.logits_t(x)
            picked = (logits * Tensor(onehot_rows[labels[idx]])).sum(axis=1)
            loss = (logsumexp(logits, axis=1) - picked).mean()
            store.zero_grad()
            loss.backward()
            adam_step(store, lr)
    return net


# ---- scores --------------------------------------------------------------------


def inception_score_from_probs(probs: np.ndarray, splits: int = 4) -> tuple[float, float]:
    """exp(mean KL(conditional || split marginal)) per split; mean and std
    over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ContractError("probs must be a non-empty (N, C) array")
    if splits < 1 or len(probs) < splits:
        raise ContractError("need at least one image per split")
    scores = []
    for chunk in np.array_split(probs, splits):
        marginal = chunk.mean(axis=0, keepdims=True)
        safe = np.where(chunk > 0, chunk, 1.0)
        kl = np.sum(chunk * (np.log(safe) - np.log(marginal)), axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(net: FeatureNet, images: np.ndarray, splits: int = 4):
    return inception_score_from_probs(net.probabilities(images), splits)


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray  # (F,)
    sigma: np.ndarray  # (F, F)
    diag_loaded: bool = False

    @staticmethod
    def from_features(x: np.ndarray) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ContractError("need a (N>=2, F) feature matrix")
        n, f = x.shape
        mu = x.mean(axis=0)
        xc = x - mu
        sigma = (xc.T @ xc) / (n - 1)
        loaded = n < f + 1
        if loaded:
            sigma = sigma + 1e-6 * np.eye(f)
        return GaussianStats(mu=mu, sigma=sigma, diag_loaded=loaded)

    def validate(self) -> "GaussianStats":
        if self.sigma.shape != (len(self.mu), len(self.mu)):
            raise ContractError("sigma must be square and match mu")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-9:
            raise ContractError("sigma must be symmetric")
        return self


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared mean distance plus the Bures term between the covariances,
    via symmetric eigendecompositions with negative eigenvalues clamped."""
    a.validate()
    b.validate()
    if a.mu.shape != b.mu.shape:
        raise ContractError("feature dimensions differ")
    sqrt_a = _psd_sqrt(a.sigma)
    cross = _psd_sqrt(sqrt_a @ b.sigma @ sqrt_a)
    d2 = float(np.sum((a.mu - b.mu) ** 2) + np.trace(a.sigma + b.sigma - 2.0 * cross))
    return max(d2, 0.0)


# ---- checkpoint selection --------------------------------------------------------


@dataclass(frozen=True)
class RankEntry:
    index: int
    is_rank: int
    fid_rank: int
    rank_sum: int
    selected: bool


def _min_ranks(values: np.ndarray, higher_is_better: bool) -> np.ndarray:
    # ties share the minimum (best) rank
    ranks = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        better = (values > v) if higher_is_better else (values < v)
        ranks[i] = 1 + int(np.sum(better))
    return ranks


def rank_table(is_scores, fid_scores, top_n: int = 5) -> list[RankEntry]:
    is_scores = np.asarray(is_scores, dtype=np.float64)
    fid_scores = np.asarray(fid_scores, dtype=np.float64)
    if len(is_scores) == 0 or len(is_scores) != len(fid_scores):
        raise ContractError("score lists must be non-empty and equal length")
    is_ranks = _min_ranks(is_scores, higher_is_better=True)
    fid_ranks = _min_ranks(fid_scores, higher_is_better=False)
    sums = is_ranks + fid_ranks
    # final ties broken by lower FID, then earlier position
    order = sorted(range(len(sums)), key=lambda i: (sums[i], fid_scores[i], i))
    chosen = set(order[:top_n])
    return [
        RankEntry(
            index=i,
            is_rank=int(is_ranks[i]),
            fid_rank=int(fid_ranks[i]),
            rank_sum=int(sums[i]),
            selected=i in chosen,
        )
        for i in range(len(sums))
    ]


def rank_sum_select(checkpoints, is_scores, fid_scores, top_n: int = 5):
    """Order checkpoints by IS-rank + FID-rank (ascending) and keep the best
    top_n; ties fall to the lower FID, then the earlier checkpoint."""
    if len(checkpoints) != len(is_scores):
        raise ContractError("checkpoints and scores must align")
    table = rank_table(is_scores, fid_scores, top_n)
    order = sorted(
        (e.index for e in table if e.selected),
        key=lambda i: (table[i].rank_sum, fid_scores[i], i),
    )
    return [checkpoints[i] for i in order]


# ---- curve smoothing --------------------------------------------------------------


def lowess(xs, ys, frac: float = 0.3) -> np.ndarray:
    """Locally weighted linear smoothing: for each x, fit a tricube-weighted
    line through its ceil(frac*n) nearest neighbors (single pass)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    n = len(xs)
    if n < 2:
        raise ContractError("lowess needs at least two points")
    if len(ys) != n:
        raise ContractError("xs and ys must align")
    if np.any(np.diff(xs) <= 0):
        raise ContractError("xs must be strictly increasing")
    if not (0.0 < frac <= 1.0):
        raise ContractError("frac must be in (0, 1]")

    r = int(math.ceil(frac * n))
    out = np.empty(n)
    for i in range(n):
        d = np.abs(xs - xs[i])
        nearest = np.argsort(d, kind="stable")[:r]
        dmax = d[nearest].max()
        if dmax <= 0.0:
            out[i] = ys[i]
            continue
        w = (1.0 - (d[nearest] / dmax) ** 3) ** 3
        # fit in coordinates centered on the query point; the smoothed value
        # is then simply the intercept
        t = xs[nearest] - xs[i]
        yw = ys[nearest]
        sw = w.sum()
        st = (w * t).sum()
        sy = (w * yw).sum()
        stt = (w * t * t).sum()
        sty = (w * t * yw).sum()
        denom = sw * stt - st * st
        if denom <= 1e-14 * sw * (dmax * dmax):
            out[i] = sy / sw if sw > 0 else ys[i]
            continue
        out[i] = (stt * sy - st * sty) / denom
    return out
