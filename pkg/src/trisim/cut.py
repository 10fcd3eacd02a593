"""Contrastive unpaired translation: generator, discriminator, projection
head, the least-squares adversarial and patch-contrastive losses, and the
alternating training loop.

Queries for the contrastive loss are sampled from the translated image and
compared against features of the input image at identical locations; the
negatives are the other sampled patches of the same image.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    Tensor,
    bmm_nt,
    concat,
    l2_normalize,
    logsumexp,
    take_columns,
    take_positions,
)
from .errors import MissingInputError, TrainingDivergedError
from .nn import (
    Conv2d,
    ConvTranspose2d,
    InstanceNorm2d,
    LeakyReLU,
    Linear,
    Module,
    ParamStore,
    Sequential,
    Tanh,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from .raster import read_image

__all__ = [
    "CutConfig",
    "Generator",
    "Discriminator",
    "ProjectionHead",
    "Checkpoint",
    "lsgan_d_loss",
    "lsgan_g_loss",
    "nce_loss",
    "sample_patch_features",
    "patchnce_loss",
    "patchnce_tap_losses",
    "cut_total_g_loss",
    "train_translator",
    "load_translator",
    "save_translator",
    "load_gray_dir",
    "to_unit_range",
]


@dataclass(frozen=True)
class CutConfig:
    lambda_gan: float = 1.0
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    tau: float = 0.07
    n_taps: int = 5  # feature layers used for the contrastive loss
    patches_per_tap: int = 32
    embed_dim: int = 32
    lsgan_a: float = 0.0  # fake target for D
    lsgan_b: float = 1.0  # real target for D
    lsgan_c: float = 1.0  # target G drives fakes toward
    epochs: int = 400
    save_every: int = 10
    batch_size: int = 1
    lr: float = 2e-4
    adam_beta1: float = 0.5
    width: int = 8
    head_hidden: int = 32
    in_channels: int = 1

    @property
    def negatives_per_query(self) -> int:
        return self.patches_per_tap - 1

    def validate(self) -> "CutConfig":
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if self.patches_per_tap < 1 or self.n_taps < 1:
            raise ContractError("need at least one patch and one tap")
        if self.epochs < 1 or self.save_every < 1 or self.batch_size < 1:
            raise ContractError("epochs, save_every and batch_size must be >= 1")
        return self


class _ResBlock(Module):
    def __init__(self, channels: int, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm1 = InstanceNorm2d(channels)
        self.act = LeakyReLU(0.2)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm2 = InstanceNorm2d(channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(Module):
    """Encoder (3 strided convs + 2 residual blocks) and mirrored decoder."""

    def __init__(self, rng, in_channels: int = 1, width: int = 8):
        w = width
        self.in_channels = in_channels
        self.width = width
        self.enc1 = Sequential(Conv2d(in_channels, w, 4, rng, 2, 1), InstanceNorm2d(w), LeakyReLU(0.2))
        self.enc2 = Sequential(Conv2d(w, 2 * w, 4, rng, 2, 1), InstanceNorm2d(2 * w), LeakyReLU(0.2))
        self.enc3 = Sequential(Conv2d(2 * w, 4 * w, 4, rng, 2, 1), InstanceNorm2d(4 * w), LeakyReLU(0.2))
        self.res1 = _ResBlock(4 * w, rng)
        self.res2 = _ResBlock(4 * w, rng)
        self.dec = Sequential(
            _ResBlock(4 * w, rng),
            _ResBlock(4 * w, rng),
            ConvTranspose2d(4 * w, 2 * w, 4, rng, 2, 1),
            InstanceNorm2d(2 * w),
            LeakyReLU(0.2),
            ConvTranspose2d(2 * w, w, 4, rng, 2, 1),
            InstanceNorm2d(w),
            LeakyReLU(0.2),
            ConvTranspose2d(w, in_channels, 4, rng, 2, 1),
            Tanh(),
        )

    @property
    def tap_channels(self) -> list[int]:
        w = self.width
        return [self.in_channels, w, 2 * w, 4 * w, 4 * w]

    def encode_taps(self, x: Tensor) -> list[Tensor]:
        """Feature maps at the tapped encoder layers, input included."""
        h1 = self.enc1(x)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        hr = self.res2(self.res1(h3))
        return [x, h1, h2, h3, hr]

    def encode(self, x: Tensor) -> Tensor:
        return self.res2(self.res1(self.enc3(self.enc2(self.enc1(x)))))

    def decode(self, h: Tensor) -> Tensor:
        return self.dec(h)

    def __call__(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class Discriminator(Module):
    """Three-layer patch classifier producing a score map."""

    def __init__(self, rng, in_channels: int = 1, width: int = 8):
        w = width
        self.net = Sequential(
            Conv2d(in_channels, w, 4, rng, 2, 1),
            LeakyReLU(0.2),
            Conv2d(w, 2 * w, 4, rng, 2, 1),
            InstanceNorm2d(2 * w),
            LeakyReLU(0.2),
            Conv2d(2 * w, 1, 4, rng, 1, 1),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)


class ProjectionHead(Module):
    """Per-tap two-layer perceptron mapping patch features to unit vectors."""

    def __init__(self, rng, tap_channels: list[int], embed_dim: int = 32, hidden: int = 32):
        self.embed_dim = embed_dim
        self.mlps = [
            Sequential(Linear(c, hidden, rng), LeakyReLU(0.2), Linear(hidden, embed_dim, rng))
            for c in tap_channels
        ]

    def project(self, tap: int, feats: Tensor) -> Tensor:
        """Map (S, C_tap) patch features to (S, embed_dim) unit vectors."""
        return l2_normalize(self.mlps[tap](feats), axis=1)


# ---- losses -------------------------------------------------------------------


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 4:
        raise ContractError(f"expected a (N,C,H,W) batch, got shape {t.shape}")
    if t.shape[0] == 0:
        raise ContractError("empty batch")
    return t


def lsgan_d_loss(disc: Discriminator, real, fake, cfg: CutConfig) -> Tensor:
    """Least-squares discriminator loss; fake scores carry no generator
    gradient."""
    real, fake = _as_batch(real), _as_batch(fake)
    dr = disc(real)
    df = disc(fake.detach())
    a, b = cfg.lsgan_a, cfg.lsgan_b
    return ((dr - b) ** 2).mean() * 0.5 + ((df - a) ** 2).mean() * 0.5


def lsgan_g_loss(disc: Discriminator, fake, cfg: CutConfig) -> Tensor:
    """Least-squares generator loss, gradients flowing into the generator."""
    fake = _as_batch(fake)
    return ((disc(fake) - cfg.lsgan_c) ** 2).mean() * 0.5


def _require_unit(v: np.ndarray, name: str):
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError(f"{name} must be unit-normalized")


def nce_loss(v: Tensor, v_pos: Tensor, v_negs: Tensor, tau: float) -> Tensor:
    """(N+1)-way contrastive cross-entropy over scaled cosine similarities."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    v_pos = v_pos if isinstance(v_pos, Tensor) else Tensor(v_pos)
    v_negs = v_negs if isinstance(v_negs, Tensor) else Tensor(v_negs)
    if tau <= 0:
        raise ContractError("tau must be positive")
    _require_unit(v.data, "query")
    _require_unit(v_pos.data, "positive")
    _require_unit(v_negs.data, "negatives")
    k = v.shape[-1]
    pos = (v * v_pos).sum() * (1.0 / tau)
    negs = (v_negs @ v.reshape(k, 1)).flatten() * (1.0 / tau)
    logits = concat([pos.reshape(1), negs], axis=0)
    return logsumexp(logits, axis=0) - pos


def _sample_locations(n_positions: int, count: int, rng) -> np.ndarray:
    if count > n_positions:
        raise ContractError(
            f"cannot sample {count} patches from {n_positions} positions"
        )
    return rng.choice(n_positions, size=count, replace=False)


def _tap_features(head: ProjectionHead, tap_index: int, fmap: Tensor, locs) -> Tensor:
    n, c = fmap.shape[0], fmap.shape[1]
    if n != 1:
        raise ContractError("patch sampling expects a single image")
    flat = fmap.reshape(c, fmap.shape[2] * fmap.shape[3])
    return head.project(tap_index, take_columns(flat, locs))


def sample_patch_features(gen: Generator, head: ProjectionHead, image, tap_layers, s_patches: int, rng):
    """For each tap, sample patch locations (without replacement) and return
    the projected unit features together with the chosen locations."""
    taps = gen.encode_taps(image if isinstance(image, Tensor) else Tensor(image))
    out = []
    for tap in tap_layers:
        fmap = taps[tap]
        locs = _sample_locations(fmap.shape[2] * fmap.shape[3], s_patches, rng)
        out.append((_tap_features(head, tap, fmap, locs), locs))
    return out


def _batched_tap_features(head, tap: int, fmap: Tensor, locs) -> Tensor:
    """Project shared locations of a (N,C,H,W) tap into (N,S,k) unit vectors."""
    n, c = fmap.shape[0], fmap.shape[1]
    s = len(locs)
    flat = fmap.reshape(n, c, fmap.shape[2] * fmap.shape[3])
    patches = take_positions(flat, locs).reshape(n * s, c)
    feats = head.project(tap, patches)
    return feats.reshape(n, s, feats.shape[-1])


def patchnce_tap_losses(
    gen: Generator, head: ProjectionHead, x, y_hat, cfg: CutConfig, rng
) -> list[Tensor]:
    """Per-tap mean contrastive losses; queries come from the translated
    image, positives and negatives from the input at the same sampled
    locations (shared across the batch)."""
    x, y_hat = _as_batch(x), _as_batch(y_hat)
    if x.shape != y_hat.shape:
        raise ContractError("input and translated batches must share a shape")
    taps_x = gen.encode_taps(x)
    taps_y = gen.encode_taps(y_hat)
    if cfg.n_taps > len(taps_x):
        raise ContractError(
            f"config asks for {cfg.n_taps} taps, encoder exposes {len(taps_x)}"
        )
    s = cfg.patches_per_tap
    eye = Tensor(np.eye(s))
    all_locs = [
        _sample_locations(taps_x[tap].shape[2] * taps_x[tap].shape[3], s, rng)
        for tap in range(cfg.n_taps)
    ]
    losses = []
    for tap in range(cfg.n_taps):
        fx, fy = taps_x[tap], taps_y[tap]
        keys = _batched_tap_features(head, tap, fx, all_locs[tap])  # (N,S,k)
        queries = _batched_tap_features(head, tap, fy, all_locs[tap])  # (N,S,k)
        logits = bmm_nt(queries, keys) * (1.0 / cfg.tau)  # (N,S,S), diag = positives
        pos = (logits * eye).sum(axis=2)
        losses.append((logsumexp(logits, axis=2) - pos).mean())
    return losses


def patchnce_loss(gen: Generator, head: ProjectionHead, x, y_hat, cfg: CutConfig, rng) -> Tensor:
    """Mean over taps and queries of the patch contrastive loss."""
    losses = patchnce_tap_losses(gen, head, x, y_hat, cfg, rng)
    total = losses[0]
    for li in losses[1:]:
        total = total + li
    return total * (1.0 / len(losses))


def cut_total_g_loss(gen, disc, head, x, y, cfg: CutConfig, rng, y_hat=None):
    """Combined generator objective; returns the total and the logged parts.

    `y_hat` may carry a precomputed G(x) (with graph) to avoid a second
    generator pass in the training loop."""
    x, y = _as_batch(x), _as_batch(y)
    if y_hat is None:
        y_hat = gen(x)
    g_gan = lsgan_g_loss(disc, y_hat, cfg)
    zero = Tensor(0.0)
    nce_x = patchnce_loss(gen, head, x, y_hat, cfg, rng) if cfg.lambda_x != 0 else zero
    if cfg.lambda_y != 0:
        y_idt = gen(y)
        nce_y = patchnce_loss(gen, head, y, y_idt, cfg, rng)
    else:
        nce_y = zero
    total = g_gan * cfg.lambda_gan + nce_x * cfg.lambda_x + nce_y * cfg.lambda_y
    parts = {
        "g_gan": float(g_gan.data),
        "nce_x": float(nce_x.data),
        "nce_y": float(nce_y.data),
    }
    return total, parts


# ---- training loop -------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    epoch: int
    path: str


def to_unit_range(img_u8: np.ndarray) -> np.ndarray:
    """uint8 grayscale plane to float64 in [-1, 1]."""
    return img_u8.astype(np.float64) / 127.5 - 1.0


def load_gray_dir(path: str) -> np.ndarray:
    """Load every PGM in a directory (sorted) as a (N,1,H,W) batch in [-1,1]."""
    if not os.path.isdir(path):
        raise MissingInputError(path)
    names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
    if not names:
        raise MissingInputError(path, f"no PGM images in {path}")
    planes = []
    for name in names:
        img = read_image(os.path.join(path, name))
        if img.channels != 1:
            raise ContractError(f"{name}: expected 1-channel images")
        planes.append(to_unit_range(img.plane()))
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise ContractError(f"images in {path} have mixed sizes: {shapes}")
    return np.stack(planes)[:, None, :, :]


def save_translator(path: str, gen: Generator, head: ProjectionHead, disc: Discriminator | None = None):
    tensors: dict[str, np.ndarray] = {
        "meta.width": np.array(float(gen.width)),
        "meta.in_channels": np.array(float(gen.in_channels)),
        "meta.embed_dim": np.array(float(head.embed_dim)),
        "meta.head_hidden": np.array(float(head.mlps[0].layers[0].b.shape[0])),
    }
    tensors.update({f"gen.{k}": v for k, v in gen.params().items()})
    tensors.update({f"head.{k}": v for k, v in head.params().items()})
    if disc is not None:
        tensors.update({f"disc.{k}": v for k, v in disc.params().items()})
    save_checkpoint(path, tensors)


def load_translator(path: str) -> tuple[Generator, ProjectionHead]:
    if not os.path.isfile(path):
        raise MissingInputError(path)
    state = load_checkpoint(path)
    rng = np.random.Generator(np.random.PCG64(0))  # overwritten by load_state
    gen = Generator(rng, int(state["meta.in_channels"]), int(state["meta.width"]))
    head = ProjectionHead(
        rng, gen.tap_channels, int(state["meta.embed_dim"]), int(state["meta.head_hidden"])
    )
    gen.load_state({k[len("gen.") :]: v for k, v in state.items() if k.startswith("gen.")})
    head.load_state({k[len("head.") :]: v for k, v in state.items() if k.startswith("head.")})
    return gen, head


def train_translator(
    source_dir: str,
    target_dir: str,
    out_dir: str,
    cfg: CutConfig,
    rng: np.random.Generator,
    log_name: str = "loss_log.csv",
) -> list[Checkpoint]:
    """Alternating adversarial training; a checkpoint is persisted every
    save_every epochs and per-epoch loss means are logged as CSV."""
    cfg.validate()
    src = load_gray_dir(source_dir)
    tgt = load_gray_dir(target_dir)
    if src.shape[1:] != tgt.shape[1:]:
        raise ContractError("source and target image sizes differ")

    os.makedirs(out_dir, exist_ok=True)
    init_rng, order_rng, patch_rng = rng.spawn(3)
    gen = Generator(init_rng, cfg.in_channels, cfg.width)
    disc = Discriminator(init_rng, cfg.in_channels, cfg.width)
    head = ProjectionHead(init_rng, gen.tap_channels, cfg.embed_dim, cfg.head_hidden)

    d_store = ParamStore(disc.params())
    g_store = ParamStore({**{f"g.{k}": v for k, v in gen.params().items()},
                          **{f"h.{k}": v for k, v in head.params().items()}})

    checkpoints: list[Checkpoint] = []
    log_rows = ["epoch,d_loss,g_gan,nce_x,nce_y"]
    n_src, n_tgt = len(src), len(tgt)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n_src)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, n_src, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tidx = order_rng.integers(0, n_tgt, size=len(idx))
            x = Tensor(src[idx])
            y = Tensor(tgt[tidx])

            y_hat = gen(x)
            d_loss = lsgan_d_loss(disc, y, y_hat, cfg)
            d_store.zero_grad()
            d_loss.backward()
            adam_step(d_store, cfg.lr, cfg.adam_beta1)

            total, parts = cut_total_g_loss(
                gen, disc, head, x, y, cfg, patch_rng, y_hat=y_hat
            )
            g_store.zero_grad()
            total.backward()
            adam_step(g_store, cfg.lr, cfg.adam_beta1)

            vals = (float(d_loss.data), parts["g_gan"], parts["nce_x"], parts["nce_y"])
            if not all(np.isfinite(v) for v in vals):
                raise TrainingDivergedError(
                    f"non-finite translator loss at epoch {epoch} batch {n_batches}: "
                    f"d={vals[0]} gan={vals[1]} nce_x={vals[2]} nce_y={vals[3]}"
                )
            sums += vals
            n_batches += 1

        means = sums / max(n_batches, 1)
        log_rows.append(
            f"{epoch},{means[0]:.6f},{means[1]:.6f},{means[2]:.6f},{means[3]:.6f}"
        )
        if epoch % cfg.save_every == 0:
            path = os.path.join(out_dir, f"translator_epoch{epoch:04d}.ckpt")
            save_translator(path, gen, head, disc)
            checkpoints.append(Checkpoint(epoch=epoch, path=path))

    with open(os.path.join(out_dir, log_name), "w", encoding="utf-8") as fh:
        fh.write("\n".join(log_rows) + "\n")
    return checkpoints
