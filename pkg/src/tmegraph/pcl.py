"""Contrastive patch embedding for multiplexed images.

Crops are sampled at random positions from a few images per step, augmented
into two overlapping views (sub-crop, 90-degree rotation, small cutout; no
intensity distortion, since channel values carry marker expression), pushed
through a compact strided conv encoder, projected, and trained with the
normalized-temperature cross-entropy loss on cosine similarities. A trained
encoder then tiles whole images into patch-embedding grids.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as tio
from .autodiff import Tensor
from .nn import Adam, TrainingDiverged, kaiming, zeros


@dataclass
class PCLConfig:
    s_cr: int = 10               # patch side, px
    alpha_cr: float = 2.0        # crop side multiplier
    b_cr: int = 128              # crops per step
    r_images: int = 8            # images sampled per step
    g: int = 256                 # embedding dim
    proj_dim: int = 128          # projection dim
    tau: float = 0.5
    cutout_frac: float = 0.15
    steps: int = 300
    lr: float = 1e-3
    encoder_widths: tuple = (32, 64, 128, 256)

    def __post_init__(self):
        if not (self.g > self.proj_dim > 0):
            raise ValueError("need g > proj_dim > 0")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 <= self.cutout_frac < 1.0):
            raise ValueError("cutout_frac must be in [0, 1)")
        if self.alpha_cr <= 1.0:
            raise ValueError("alpha_cr must exceed 1")
        if self.s_cr < 2 or self.b_cr < 2 or self.r_images < 1:
            raise ValueError("bad sampling sizes")

    @property
    def crop_side(self) -> int:
        return int(round(self.s_cr * self.alpha_cr))

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_widths"] = tuple(d.get("encoder_widths", (32, 64, 128, 256)))
        return cls(**d)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool per channel

    def apply(self, image: np.ndarray) -> np.ndarray:
        out = (image - self.mean) / np.where(self.constant, 1.0, self.std)
        out[..., self.constant] = 0.0
        return out.astype(np.float64)


def normalize_cohort(images):
    """Z-score every channel over the whole cohort; constant channels map
    to zero and are flagged."""
    if not images:
        raise ValueError("empty cohort")
    b = images[0].shape[2]
    total = np.zeros(b)
    total_sq = np.zeros(b)
    count = 0
    for img in images:
        flat = img.reshape(-1, b).astype(np.float64)
        total += flat.sum(axis=0)
        total_sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    constant = std < 1e-12
    stats = ChannelStats(mean=mean, std=np.where(constant, 1.0, std), constant=constant)
    return [stats.apply(img) for img in images], stats


# -- sampling and augmentation ----------------------------------------------------

def sample_crops(images, cfg: PCLConfig, rng: np.random.Generator) -> np.ndarray:
    """B_CR crops of side s_cr*alpha_cr from r_images randomly chosen images."""
    side = cfg.crop_side
    usable = [i for i, img in enumerate(images)
              if img.shape[0] >= side and img.shape[1] >= side]
    skipped = len(images) - len(usable)
    if skipped:
        warnings.warn(f"{skipped} image(s) smaller than crop side {side}, skipped")
    if not usable:
        raise ValueError(f"no image is at least {side}x{side}")
    pool = rng.choice(usable, size=min(cfg.r_images, len(usable)), replace=False)
    crops = np.empty((cfg.b_cr, side, side, images[usable[0]].shape[2]))
    for j in range(cfg.b_cr):
        img = images[int(pool[rng.integers(len(pool))])]
        r = int(rng.integers(0, img.shape[0] - side + 1))
        c = int(rng.integers(0, img.shape[1] - side + 1))
        crops[j] = img[r:r + side, c:c + side, :]
    return crops


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _one_view(crop: np.ndarray, cfg: PCLConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.s_cr
    r = int(rng.integers(0, crop.shape[0] - s + 1))
    c = int(rng.integers(0, crop.shape[1] - s + 1))
    view = crop[r:r + s, c:c + s, :].copy()
    view = np.rot90(view, k=int(rng.integers(4)), axes=(0, 1)).copy()
    cut = _round_half_up(cfg.cutout_frac * s)
    if cut > 0:
        rr = int(rng.integers(0, s - cut + 1))
        cc = int(rng.integers(0, s - cut + 1))
        view[rr:rr + cut, cc:cc + cut, :] = 0.0
    return view


def augment_pair(crop: np.ndarray, cfg: PCLConfig, rng: np.random.Generator):
    """Two independent augmented views of one crop."""
    if crop.shape[0] < cfg.s_cr or crop.shape[1] < cfg.s_cr:
        raise ValueError("crop smaller than patch side")
    return _one_view(crop, cfg, rng), _one_view(crop, cfg, rng)


# -- encoder / projection ----------------------------------------------------------

class PCLModel:
    """Strided conv encoder (global average pool) plus 2-layer projection head."""

    def __init__(self, cfg: PCLConfig, channels: int, rng: np.random.Generator,
                 stats: ChannelStats | None = None):
        self.cfg = cfg
        self.channels = channels
        self.stats = stats
        p: dict[str, Tensor] = {}
        c_in = channels
        for i, width in enumerate(cfg.encoder_widths):
            p[f"enc.w{i}"] = kaiming(rng, 9 * c_in, (3, 3, c_in, width))
            p[f"enc.b{i}"] = zeros((width,))
            c_in = width
        p["enc.out_w"] = kaiming(rng, c_in, (c_in, cfg.g))
        p["enc.out_b"] = zeros((cfg.g,))
        p["proj.w_hidden"] = kaiming(rng, cfg.g, (cfg.g, cfg.g))
        p["proj.w_out"] = kaiming(rng, cfg.g, (cfg.g, cfg.proj_dim))
        self.params = p

    def _maybe_const(self, grad: bool):
        if grad:
            return self.params
        return {k: ad.constant(v.data) for k, v in self.params.items()}

    def encode(self, patches: np.ndarray | Tensor, grad: bool = False) -> Tensor:
        """(B, S, S, C) patches -> (B, g) embeddings."""
        x = patches if isinstance(patches, Tensor) else ad.constant(patches)
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ValueError(f"expected (B, S, S, {self.channels}) patches, "
                             f"got {x.shape}")
        p = self._maybe_const(grad)
        for i in range(len(self.cfg.encoder_widths)):
            x = ad.relu(ad.conv2d(x, p[f"enc.w{i}"], p[f"enc.b{i}"], stride=2, pad=1))
        h = ad.global_avg_pool(x)
        return h @ p["enc.out_w"] + p["enc.out_b"]

    def project(self, h: Tensor | np.ndarray, grad: bool = False) -> Tensor:
        h = h if isinstance(h, Tensor) else ad.constant(h)
        p = self._maybe_const(grad)
        return ad.relu(h @ p["proj.w_hidden"]) @ p["proj.w_out"]

    # persistence ----------------------------------------------------------
    def save(self, path, meta=None):
        arrays = {k: v.data for k, v in self.params.items()}
        if self.stats is not None:
            arrays["stats.mean"] = self.stats.mean
            arrays["stats.std"] = self.stats.std
            arrays["stats.constant"] = self.stats.constant.astype(np.uint8)
        header = {"pcl_config": self.cfg.to_dict(), "channels": self.channels}
        if meta:
            header["meta"] = meta
        return tio.write_container(path, arrays, header=header)

    @classmethod
    def load(cls, path):
        arrays, header = tio.read_container(path)
        cfg = PCLConfig.from_dict(header["pcl_config"])
        model = cls.__new__(cls)
        model.cfg = cfg
        model.channels = header["channels"]
        model.stats = None
        if "stats.mean" in arrays:
            model.stats = ChannelStats(mean=arrays.pop("stats.mean"),
                                       std=arrays.pop("stats.std"),
                                       constant=arrays.pop("stats.constant").astype(bool))
        model.params = {k: ad.parameter(v.astype(np.float64)) for k, v in arrays.items()}
        return model


# -- contrastive loss ---------------------------------------------------------------

def nt_xent_loss(z: Tensor | np.ndarray, tau: float) -> Tensor:
    """Mean over anchors of -log softmax(sim(anchor, positive)/tau) with the
    anchor excluded from its own denominator; batch rows are (2j, 2j+1) pairs
    of cosine-normalized projections."""
    z = z if isinstance(z, Tensor) else ad.constant(z)
    n2 = z.shape[0]
    if n2 < 4 or n2 % 2:
        raise ValueError("batch must hold at least 2 positive pairs")
    norms = np.linalg.norm(z.data, axis=1)
    if norms.min() < 1e-12:
        raise ValueError("zero-norm projection in batch")
    zn = z / ad.sqrt(ad.sum_(z * z, axis=1, keepdims=True))
    sim = (zn @ zn.T) / tau
    sim = sim + ad.constant(np.diag(np.full(n2, -1e9)))   # exclude self
    partner = np.arange(n2) ^ 1
    lse = ad.logsumexp(sim, axis=1)
    pos = ad.take_pairs(sim, np.arange(n2), partner)
    return ad.mean_(lse - pos)


def contrast_accuracy(z: np.ndarray) -> float:
    """Percent of anchors whose positive partner is the top cosine match
    among the other projections."""
    n2 = z.shape[0]
    if n2 < 4 or n2 % 2:
        raise ValueError("need at least 2 pairs")
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    sim = zn @ zn.T
    np.fill_diagonal(sim, -np.inf)
    top = sim.argmax(axis=1)
    partner = np.arange(n2) ^ 1
    return 100.0 * float((top == partner).mean())


# -- training ------------------------------------------------------------------------

def train_pcl(images, cfg: PCLConfig, seed: int, checkpoint_path=None,
              log_path=None, stats: ChannelStats | None = None):
    """Optimize encoder + head on augmented crop pairs; returns the model and
    the per-step (loss, batch contrast accuracy) log."""
    channels = images[0].shape[2]
    model = PCLModel(cfg, channels, np.random.default_rng([seed, 0xec0]), stats=stats)
    opt = Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 0x5a3])
    log_rows = []
    for step in range(cfg.steps):
        crops = sample_crops(images, cfg, rng)
        batch = np.empty((2 * cfg.b_cr, cfg.s_cr, cfg.s_cr, channels))
        for j in range(cfg.b_cr):
            v1, v2 = augment_pair(crops[j], cfg, rng)
            batch[2 * j] = v1
            batch[2 * j + 1] = v2
        opt.zero_grad()
        h = model.encode(batch, grad=True)
        zproj = model.project(h, grad=True)
        loss = nt_xent_loss(zproj, cfg.tau)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(step)
        acc = contrast_accuracy(zproj.numpy())
        loss.backward()
        opt.step()
        log_rows.append((step, val, acc))
    if checkpoint_path is not None:
        model.save(checkpoint_path, meta=tio.artifact_meta(seed, cfg.to_dict()))
    if log_path is not None:
        tio.write_csv(log_path, ["step", "loss", "contrast_accuracy"], log_rows,
                      meta=tio.artifact_meta(seed, cfg.to_dict()))
    return model, log_rows


def held_out_contrast_accuracy(model: PCLModel, images, n_batches: int,
                               seed: int) -> float:
    """Mean contrast accuracy over fresh crop batches never used in training."""
    rng = np.random.default_rng([seed, 0xe7a1])
    cfg = model.cfg
    vals = []
    for _ in range(n_batches):
        crops = sample_crops(images, cfg, rng)
        batch = np.empty((2 * cfg.b_cr, cfg.s_cr, cfg.s_cr, model.channels))
        for j in range(cfg.b_cr):
            v1, v2 = augment_pair(crops[j], cfg, rng)
            batch[2 * j] = v1
            batch[2 * j + 1] = v2
        zproj = model.project(model.encode(batch)).numpy()
        vals.append(contrast_accuracy(zproj))
    return float(np.mean(vals))


# -- tiling --------------------------------------------------------------------------

@dataclass
class EmbeddedImage:
    embeddings: np.ndarray   # rows x cols x g
    image_id: str
    patch_size: int
    meta: dict = field(default_factory=dict)

    @property
    def num_patches(self) -> int:
        return self.embeddings.shape[0] * self.embeddings.shape[1]


def tile_grid(height: int, width: int, s_cr: int):
    return height // s_cr, width // s_cr


def tile_and_embed(image: np.ndarray, model: PCLModel, image_id: str = "",
                   chunk: int = 512) -> EmbeddedImage:
    """Divide an image into an even grid of patches (border remainder
    dropped) and embed every patch."""
    s = model.cfg.s_cr
    rows, cols = tile_grid(image.shape[0], image.shape[1], s)
    if rows == 0 or cols == 0:
        raise ValueError(f"image {image.shape} smaller than patch side {s}")
    trimmed = image[:rows * s, :cols * s, :]
    patches = trimmed.reshape(rows, s, cols, s, -1).transpose(0, 2, 1, 3, 4)
    patches = patches.reshape(rows * cols, s, s, image.shape[2])
    outs = []
    for lo in range(0, patches.shape[0], chunk):
        outs.append(model.encode(patches[lo:lo + chunk]).numpy())
    emb = np.concatenate(outs, axis=0).reshape(rows, cols, model.cfg.g)
    return EmbeddedImage(embeddings=emb, image_id=image_id, patch_size=s)


def save_embedded(base_path, embedded: EmbeddedImage, meta=None):
    """Per-image float32 raw (L x g) plus sidecar with grid dims and patch size."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    rows, cols, g = embedded.embeddings.shape
    flat = embedded.embeddings.reshape(rows * cols, g).astype("<f4")
    with open(base.with_suffix(".emb"), "wb") as f:
        f.write(flat.tobytes())
    side = {"rows": rows, "cols": cols, "g": g, "patch_size": embedded.patch_size,
            "image_id": embedded.image_id, "dtype": "<f4"}
    if meta:
        side["meta"] = meta
    tio.write_json(base.with_suffix(".json"), side)
    return base.with_suffix(".emb")


def load_embedded(base_path) -> EmbeddedImage:
    base = Path(base_path)
    side = tio.read_json(base.with_suffix(".json"))
    rows, cols, g = side["rows"], side["cols"], side["g"]
    flat = np.fromfile(base.with_suffix(".emb"), dtype="<f4")
    emb = flat.reshape(rows, cols, g).astype(np.float64)
    return EmbeddedImage(embeddings=emb, image_id=side["image_id"],
                         patch_size=side["patch_size"])
