"""Synthetic multiplexed tissue cohorts with per-image ground truth.

Each image is built in three stages: (1) the canvas is partitioned into
contiguous neighborhood regions grown from seeded centers with prevalence
balancing, (2) cells are placed inside each region by a hardcore point
process with phenotype counts drawn from the region's abundance simplex and
signed pairwise interactions realized by offspring clustering (attraction)
or inhibition-radius thinning (repulsion), and (3) every cell is rendered as
a filled ellipse whose per-marker intensity is a clipped Gaussian draw, on a
low Gaussian noise floor.

Seven disease-paradigm presets vary one property across patient groups:
marker intensity (PMI1/PMI2), phenotype frequency (PF1/PF2), cell-cell
interaction (CCI1/CCI2), or neighborhood-neighborhood interaction (NNI1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom as nd_zoom
from scipy.stats import norm as norm_dist

from . import io as tio

MARKER_NAMES = tuple(f"Mk{i}" for i in range(1, 7))
PHENOTYPE_NAMES = tuple(f"Ph{i}" for i in range(1, 9))
NEIGHBORHOOD_NAMES = tuple(f"Nb{i}" for i in range(1, 5))
GROUP_NAMES = ("I", "II", "III")

PARADIGM_NAMES = ("PMI1", "PMI2", "PF1", "PF2", "CCI1", "CCI2", "NNI1")


class PlacementError(RuntimeError):
    """Hardcore placement failed; carries the achieved cell density."""


@dataclass
class PhenotypeSpec:
    id: str
    marker_means: np.ndarray      # length B, values in [0, 1]
    marker_stddev: float
    radius_px: float
    eccentricity: float

    def __post_init__(self):
        self.marker_means = np.asarray(self.marker_means, dtype=float)
        if self.radius_px <= 0:
            raise ValueError(f"{self.id}: radius must be positive")
        if not (0.0 <= self.eccentricity < 1.0):
            raise ValueError(f"{self.id}: eccentricity must be in [0, 1)")
        if self.marker_stddev < 0:
            raise ValueError(f"{self.id}: stddev must be >= 0")


@dataclass
class NeighborhoodSpec:
    id: str
    phenotype_abundance: np.ndarray   # length-8 simplex
    pairwise_interaction: np.ndarray  # 8x8 symmetric in [-1, 1]
    prevalence: float

    def __post_init__(self):
        self.phenotype_abundance = np.asarray(self.phenotype_abundance, dtype=float)
        self.pairwise_interaction = np.asarray(self.pairwise_interaction, dtype=float)
        if abs(self.phenotype_abundance.sum() - 1.0) > 1e-9:
            raise ValueError(f"{self.id}: abundance must sum to 1")
        if not np.allclose(self.pairwise_interaction, self.pairwise_interaction.T):
            raise ValueError(f"{self.id}: interaction matrix must be symmetric")


@dataclass
class GroupOverride:
    """Per-group parameter overrides; keys use (Ph*, Mk*, Nb*) names."""
    marker_means: dict = field(default_factory=dict)        # (ph, mk) -> value
    abundance: dict = field(default_factory=dict)           # (nb, ph) -> pinned value
    cell_interaction: dict = field(default_factory=dict)    # (ph, ph) -> value
    neighborhood_interaction: dict = field(default_factory=dict)  # (nb, nb) -> value


@dataclass
class ParadigmSpec:
    name: str
    num_groups: int
    phenotypes: list
    neighborhoods: list
    neighborhood_interaction: np.ndarray      # 4x4 in [-1, 1]
    image_size: tuple                          # (H, W)
    cell_density: float                        # cells per kilopixel
    group_overrides: list                      # one GroupOverride per group
    relevant_neighborhoods: tuple = ("Nb3",)
    group_names: tuple = GROUP_NAMES
    default_per_group: int = 20
    seeds_per_neighborhood: int = 2
    scale: str = "desk"

    def __post_init__(self):
        if len(self.group_overrides) != self.num_groups:
            raise ValueError("need exactly one override set per group")


@dataclass
class GroundTruthMask:
    neighborhood_id: str
    mask: np.ndarray  # bool H x W


@dataclass
class CellTable:
    cell_id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    phenotype: np.ndarray      # strings Ph1..Ph8
    neighborhood: np.ndarray   # strings Nb1..Nb4
    radius: np.ndarray | None = None  # rendering metadata, not persisted

    def __len__(self):
        return len(self.cell_id)

    def to_csv(self, path, meta=None):
        rows = zip(self.cell_id, self.x, self.y, self.phenotype, self.neighborhood)
        return tio.write_csv(path, ["cell_id", "x", "y", "phenotype", "neighborhood"],
                             rows, meta=meta)

    @classmethod
    def from_csv(cls, path):
        _, rows = tio.read_csv(path)
        if rows:
            cid, x, y, ph, nb = zip(*rows)
        else:
            cid = x = y = ph = nb = ()
        return cls(cell_id=np.array([int(c) for c in cid]),
                   x=np.array([float(v) for v in x]),
                   y=np.array([float(v) for v in y]),
                   phenotype=np.array(ph, dtype=object),
                   neighborhood=np.array(nb, dtype=object))


# -- presets --------------------------------------------------------------------

def _base_phenotypes(radius: float) -> list:
    means = np.array([
        [0.85, 0.05, 0.05, 0.02, 0.02, 0.02],   # Ph1
        [0.05, 0.85, 0.05, 0.02, 0.02, 0.02],   # Ph2
        [0.05, 0.05, 0.85, 0.02, 0.02, 0.02],   # Ph3
        [0.02, 0.02, 0.05, 0.85, 0.05, 0.02],   # Ph4
        [0.02, 0.02, 0.05, 0.05, 0.85, 0.02],   # Ph5
        [0.02, 0.02, 0.02, 0.05, 0.05, 0.80],   # Ph6
        [0.45, 0.05, 0.45, 0.02, 0.02, 0.05],   # Ph7
        [0.05, 0.45, 0.05, 0.02, 0.02, 0.45],   # Ph8
    ])
    radii = radius * np.array([1.0, 0.9, 1.05, 1.0, 1.0, 1.0, 0.9, 1.05])
    eccs = [0.30, 0.45, 0.20, 0.35, 0.35, 0.25, 0.50, 0.40]
    return [PhenotypeSpec(id=PHENOTYPE_NAMES[i], marker_means=means[i],
                          marker_stddev=0.08, radius_px=float(radii[i]),
                          eccentricity=eccs[i]) for i in range(8)]


def _base_neighborhoods() -> list:
    abundance = np.array([
        [0.45, 0.30, 0.00, 0.00, 0.00, 0.00, 0.25, 0.00],   # Nb1
        [0.00, 0.00, 0.55, 0.05, 0.05, 0.00, 0.00, 0.35],   # Nb2
        [0.25, 0.20, 0.00, 0.00, 0.00, 0.15, 0.40, 0.00],   # Nb3
        [0.15, 0.15, 0.20, 0.00, 0.00, 0.00, 0.25, 0.25],   # Nb4
    ])
    prevalence = [0.28, 0.27, 0.25, 0.20]
    return [NeighborhoodSpec(id=NEIGHBORHOOD_NAMES[i],
                             phenotype_abundance=abundance[i],
                             pairwise_interaction=np.zeros((8, 8)),
                             prevalence=prevalence[i]) for i in range(4)]


def pin_simplex(vec: np.ndarray, pins: dict) -> np.ndarray:
    """Pin some simplex entries and rescale the rest to keep the sum at 1."""
    out = np.asarray(vec, dtype=float).copy()
    idx = list(pins.keys())
    values = np.array([pins[i] for i in idx])
    if values.sum() > 1.0 + 1e-9:
        raise ValueError("pinned abundances exceed 1")
    rest = np.setdiff1d(np.arange(len(out)), idx)
    rest_total = out[rest].sum()
    remainder = 1.0 - values.sum()
    if rest_total <= 0:
        out[rest] = remainder / max(1, len(rest))
    else:
        out[rest] *= remainder / rest_total
    out[idx] = values
    return out


def _pin_prevalences(neighborhoods: list, pins: dict) -> list:
    prev = np.array([nb.prevalence for nb in neighborhoods])
    pinned = {NEIGHBORHOOD_NAMES.index(k): v for k, v in pins.items()}
    prev = pin_simplex(prev, pinned)
    return [replace(nb, prevalence=float(prev[i])) for i, nb in enumerate(neighborhoods)]


def build_paradigm(name: str, scale: str = "desk") -> ParadigmSpec:
    """Preset generative parameters for one of the seven disease paradigms.

    Paper scale keeps 800x800 images and 40 patients per group; desk scale
    shrinks size and cohort but never the parameter values that vary across
    patient groups.
    """
    if name not in PARADIGM_NAMES:
        raise ValueError(f"unknown paradigm {name!r}; valid presets: "
                         + ", ".join(PARADIGM_NAMES))
    if scale not in ("paper", "desk"):
        raise ValueError(f"scale must be 'paper' or 'desk', got {scale!r}")
    if scale == "paper":
        image_size, density, radius, per_group = (800, 800), 7.0, 5.5, 40
    else:
        image_size, density, radius, per_group = (200, 200), 26.0, 2.6, 20

    phenotypes = _base_phenotypes(radius)
    neighborhoods = _base_neighborhoods()
    nb_inter = np.zeros((4, 4))
    relevant = ("Nb3",)
    ph6, mk6 = "Ph6", "Mk6"

    if name in ("PMI1", "PMI2"):
        if name == "PMI2":
            idx = NEIGHBORHOOD_NAMES.index("Nb3")
            ab = pin_simplex(neighborhoods[idx].phenotype_abundance,
                             {PHENOTYPE_NAMES.index(ph6): 0.0025})
            neighborhoods[idx] = replace(neighborhoods[idx], phenotype_abundance=ab)
        overrides = [GroupOverride(marker_means={(ph6, mk6): v})
                     for v in (0.25, 0.50, 0.75)]
    elif name in ("PF1", "PF2"):
        levels = (0.0, 0.30, 0.60) if name == "PF1" else (0.0, 0.0012, 0.0025)
        overrides = [GroupOverride(abundance={("Nb3", ph6): v}) for v in levels]
    elif name in ("CCI1", "CCI2"):
        if name == "CCI2":
            idx = NEIGHBORHOOD_NAMES.index("Nb2")
            ab = pin_simplex(neighborhoods[idx].phenotype_abundance,
                             {PHENOTYPE_NAMES.index("Ph4"): 0.01,
                              PHENOTYPE_NAMES.index("Ph5"): 0.01})
            neighborhoods[idx] = replace(neighborhoods[idx], phenotype_abundance=ab)
        overrides = [GroupOverride(cell_interaction={("Ph4", "Ph5"): w})
                     for w in (-1.0, 0.0, 1.0)]
        relevant = ("Nb2",)
    else:  # NNI1
        neighborhoods = _pin_prevalences(neighborhoods, {"Nb2": 0.15, "Nb3": 0.15})
        overrides = [GroupOverride(neighborhood_interaction={("Nb2", "Nb3"): w})
                     for w in (-1.0, 0.0, 1.0)]
        relevant = ("Nb2", "Nb3")

    return ParadigmSpec(name=name, num_groups=3, phenotypes=phenotypes,
                        neighborhoods=neighborhoods,
                        neighborhood_interaction=nb_inter,
                        image_size=image_size, cell_density=density,
                        group_overrides=overrides,
                        relevant_neighborhoods=relevant,
                        default_per_group=per_group, scale=scale)


def resolve_group(spec: ParadigmSpec, group: int):
    """Apply a group's overrides; returns (phenotypes, neighborhoods, nb_inter)."""
    if not 0 <= group < spec.num_groups:
        raise ValueError(f"group {group} out of range for O={spec.num_groups}")
    ov = spec.group_overrides[group]
    phenotypes = []
    for ph in spec.phenotypes:
        means = ph.marker_means.copy()
        for (p, mk), v in ov.marker_means.items():
            if p == ph.id:
                means[MARKER_NAMES.index(mk)] = v
        phenotypes.append(replace(ph, marker_means=means))
    neighborhoods = []
    for nb in spec.neighborhoods:
        ab = nb.phenotype_abundance
        pins = {PHENOTYPE_NAMES.index(p): v
                for (n, p), v in ov.abundance.items() if n == nb.id}
        if pins:
            ab = pin_simplex(ab, pins)
        inter = nb.pairwise_interaction.copy()
        for (pa, pb), v in ov.cell_interaction.items():
            ia, ib = PHENOTYPE_NAMES.index(pa), PHENOTYPE_NAMES.index(pb)
            inter[ia, ib] = inter[ib, ia] = v
        neighborhoods.append(replace(nb, phenotype_abundance=ab,
                                     pairwise_interaction=inter))
    nb_inter = spec.neighborhood_interaction.copy()
    for (na, nb_), v in ov.neighborhood_interaction.items():
        ia, ib = NEIGHBORHOOD_NAMES.index(na), NEIGHBORHOOD_NAMES.index(nb_)
        nb_inter[ia, ib] = nb_inter[ib, ia] = v
    return phenotypes, neighborhoods, nb_inter


# -- region growth ----------------------------------------------------------------

def _place_region_seeds(h, w, n_regions, n_seeds, nb_inter, rng):
    near = 0.18 * min(h, w)
    far = 0.42 * min(h, w)
    seeds = [[] for _ in range(n_regions)]
    for k in range(n_regions):
        attract = [j for j in range(k) if nb_inter[j, k] > 0 and seeds[j]]
        repel = [j for j in range(k) if nb_inter[j, k] < 0 and seeds[j]]
        for _ in range(n_seeds):
            best = None
            for _attempt in range(200):
                if attract:
                    j = attract[int(rng.integers(len(attract)))]
                    base = seeds[j][int(rng.integers(len(seeds[j])))]
                    pos = base + rng.uniform(-near, near, size=2)
                    pos = np.clip(pos, [0, 0], [h - 1, w - 1])
                else:
                    pos = rng.uniform([0, 0], [h - 1, w - 1])
                ok = True
                for j in repel:
                    d = min(np.hypot(*(pos - s)) for s in seeds[j])
                    if d < far * abs(nb_inter[j, k]):
                        ok = False
                        break
                if ok:
                    best = pos
                    break
                best = pos  # best effort if constraints are unsatisfiable
            seeds[k].append(best)
    return seeds


def _grow_regions(h, w, prevalences, n_seeds, nb_inter, rng) -> np.ndarray:
    """Capacity-balanced jittered Voronoi partition; exact cover, prevalence
    within a few percent."""
    K = len(prevalences)
    seeds = _place_region_seeds(h, w, K, n_seeds, nb_inter, rng)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.empty((K, h, w))
    for k in range(K):
        d = np.full((h, w), np.inf)
        for sy, sx in seeds[k]:
            d = np.minimum(d, np.hypot(yy - sy, xx - sx))
        dist[k] = d + 1.0
    # smooth multiplicative jitter for organic boundaries
    cell = 16
    gh, gw = h // cell + 2, w // cell + 2
    for k in range(K):
        noise = nd_zoom(rng.uniform(0.85, 1.15, size=(gh, gw)), cell, order=1)
        dist[k] *= noise[:h, :w]
    quotas = np.asarray(prevalences) * h * w
    scale = np.sqrt(np.asarray(prevalences))
    label = np.argmin(dist / scale[:, None, None], axis=0)
    for _ in range(80):
        sizes = np.bincount(label.ravel(), minlength=K).astype(float)
        ratio = sizes / np.maximum(quotas, 1.0)
        if np.abs(ratio - 1.0).max() < 0.02:
            break
        scale *= np.where(sizes > 0, (quotas / np.maximum(sizes, 1.0)) ** 0.3, 1.5)
        label = np.argmin(dist / scale[:, None, None], axis=0)
    return label


# -- cell placement -----------------------------------------------------------------

class _HashGrid:
    """Uniform spatial hash for hardcore / inhibition distance queries."""

    def __init__(self, cell_size: float):
        self.cell = max(cell_size, 1.0)
        self.buckets: dict = {}

    def _key(self, y, x):
        return (int(y // self.cell), int(x // self.cell))

    def add(self, y, x, tag):
        self.buckets.setdefault(self._key(y, x), []).append((y, x, tag))

    def near(self, y, x, radius):
        ky, kx = self._key(y, x)
        span = int(math.ceil(radius / self.cell))
        for dy in range(-span, span + 1):
            for dx in range(-span, span + 1):
                for (py, px, tag) in self.buckets.get((ky + dy, kx + dx), ()):
                    if (py - y) ** 2 + (px - x) ** 2 <= radius * radius:
                        yield (py, px, tag)


def _place_cells(label, phenotypes, neighborhoods, density, rng):
    """Hardcore placement with attraction/repulsion, region by region."""
    h, w = label.shape
    radii = np.array([p.radius_px for p in phenotypes])
    hardcore = 0.65
    max_r = radii.max()
    grid = _HashGrid(cell_size=3.0 * max_r)
    ys, xs, ph_idx, nb_idx, cell_r = [], [], [], [], []
    requested = 0

    for k, nb in enumerate(neighborhoods):
        pixels = np.flatnonzero(label.ravel() == k)
        if pixels.size == 0:
            continue
        n_cells = int(round(density * pixels.size / 1000.0))
        requested += n_cells
        if n_cells == 0:
            continue
        counts = rng.multinomial(n_cells, nb.phenotype_abundance)
        placed_by_ph: dict[int, list] = {}
        for j in range(len(phenotypes)):
            if counts[j] == 0:
                continue
            inter = nb.pairwise_interaction[:, j]
            attract_from = [i for i in range(j) if inter[i] > 0 and placed_by_ph.get(i)]
            repel_from = [(i, -inter[i]) for i in range(j)
                          if inter[i] < 0 and placed_by_ph.get(i)]
            n_off = 0
            if attract_from:
                strength = max(nb.pairwise_interaction[i, j] for i in attract_from)
                n_off = int(round(strength * counts[j]))
            placed_here = []
            for c in range(counts[j]):
                as_offspring = c < n_off
                pos = None
                for _attempt in range(60):
                    if as_offspring:
                        i = attract_from[int(rng.integers(len(attract_from)))]
                        py, px, _ = placed_by_ph[i][int(rng.integers(len(placed_by_ph[i])))]
                        reach = 2.0 * max(radii[i], radii[j])
                        ang = rng.uniform(0, 2 * np.pi)
                        rad = rng.uniform(hardcore * (radii[i] + radii[j]), reach)
                        cy, cx = py + rad * np.sin(ang), px + rad * np.cos(ang)
                        if not (0 <= cy < h and 0 <= cx < w):
                            continue
                        if label[int(cy), int(cx)] != k:
                            continue
                    else:
                        pix = pixels[int(rng.integers(pixels.size))]
                        cy = pix // w + rng.uniform(0, 1)
                        cx = pix % w + rng.uniform(0, 1)
                    ok = True
                    for (py, px, tag) in grid.near(cy, cx, 3.0 * max_r):
                        d2 = (py - cy) ** 2 + (px - cx) ** 2
                        if d2 < (hardcore * (radii[tag] + radii[j])) ** 2:
                            ok = False
                            break
                    if ok:
                        for (i, strength) in repel_from:
                            inhibit = 3.0 * max(radii[i], radii[j])
                            for (py, px, tag) in grid.near(cy, cx, inhibit):
                                if tag == i and rng.random() < strength:
                                    ok = False
                                    break
                            if not ok:
                                break
                    if ok:
                        pos = (cy, cx)
                        break
                if pos is None:
                    continue
                grid.add(pos[0], pos[1], j)
                placed_here.append((pos[0], pos[1], j))
                ys.append(pos[0])
                xs.append(pos[1])
                ph_idx.append(j)
                nb_idx.append(k)
                cell_r.append(max(1.2, rng.normal(radii[j], 0.12 * radii[j])))
            if placed_here:
                placed_by_ph.setdefault(j, []).extend(placed_here)

    placed = len(ys)
    if requested > 0 and placed < 0.6 * requested:
        achieved = placed / (h * w / 1000.0)
        raise PlacementError(
            f"hardcore placement failed: requested {requested} cells, placed "
            f"{placed} (achieved density {achieved:.2f} cells/kpx)")
    return (np.array(ys), np.array(xs), np.array(ph_idx, dtype=int),
            np.array(nb_idx, dtype=int), np.array(cell_r))


# -- rendering ------------------------------------------------------------------------

def _render_cells(h, w, b, ys, xs, ph_idx, cell_r, phenotypes, rng) -> np.ndarray:
    image = np.zeros((h, w, b), dtype=np.float64)
    for cy, cx, j, r in zip(ys, xs, ph_idx, cell_r):
        ph = phenotypes[j]
        values = np.clip(rng.normal(ph.marker_means, ph.marker_stddev), 0.0, 1.0)
        stretch = (1.0 - ph.eccentricity) ** 0.25
        a, bb = r / stretch, r * stretch
        theta = rng.uniform(0, 2 * np.pi)
        y0, y1 = max(0, int(cy - a)), min(h, int(cy + a) + 2)
        x0, x1 = max(0, int(cx - a)), min(w, int(cx + a) + 2)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / a) ** 2 + (v / bb) ** 2 <= 1.0
        region = image[y0:y1, x0:x1, :]
        np.maximum(region, np.where(mask[..., None], values, 0.0), out=region)
    return image


NOISE_SIGMA = 0.02


def simulate_tissue(spec: ParadigmSpec, group: int, seed: int):
    """One patient image: (H x W x B float32, ground-truth masks, cell table).

    Deterministic for a fixed (spec, group, seed).
    """
    phenotypes, neighborhoods, nb_inter = resolve_group(spec, group)
    h, w = spec.image_size
    b = len(MARKER_NAMES)
    rng = np.random.default_rng([seed, 0x7155])
    label = _grow_regions(h, w, [nb.prevalence for nb in neighborhoods],
                          spec.seeds_per_neighborhood, nb_inter, rng)
    ys, xs, ph_idx, nb_idx, cell_r = _place_cells(
        label, phenotypes, neighborhoods, spec.cell_density, rng)
    image = _render_cells(h, w, b, ys, xs, ph_idx, cell_r, phenotypes, rng)
    image = np.maximum(image + rng.normal(0.0, NOISE_SIGMA, size=image.shape), 0.0)
    masks = [GroundTruthMask(neighborhood_id=NEIGHBORHOOD_NAMES[k],
                             mask=(label == k)) for k in range(len(neighborhoods))]
    order = np.arange(len(ys))
    cells = CellTable(cell_id=order,
                      x=np.round(xs, 3), y=np.round(ys, 3),
                      phenotype=np.array([PHENOTYPE_NAMES[j] for j in ph_idx],
                                         dtype=object),
                      neighborhood=np.array([NEIGHBORHOOD_NAMES[k] for k in nb_idx],
                                            dtype=object),
                      radius=cell_r)
    return image.astype(np.float32), masks, cells


# -- cohort ---------------------------------------------------------------------------

@dataclass
class PatientRecord:
    patient_id: str
    group_index: int
    label: str
    image_paths: list
    mask_paths: dict
    cells_path: str
    seed: int


@dataclass
class SyntheticCohort:
    paradigm: str
    scale: str
    seed: int
    root: Path
    patients: list
    group_names: list
    relevant_neighborhoods: tuple
    manifest_path: Path


def simulate_cohort(spec: ParadigmSpec, per_group: int, seed: int, out_dir,
                    groups=None) -> SyntheticCohort:
    """Write a full cohort (images, masks, cell tables, manifest) to disk.

    ``groups`` restricts the cohort to a subset of group indices, e.g.
    (0, 2) for patient types I and III only.
    """
    if per_group < 2:
        raise ValueError("per_group must be >= 2")
    group_list = list(range(spec.num_groups)) if groups is None else list(groups)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create output directory {out}: {err}") from err

    records = []
    for g in group_list:
        gname = spec.group_names[g]
        for i in range(per_group):
            pid = f"{spec.name}-{gname}-{i:03d}"
            pseed = int(np.random.default_rng([seed, g, i]).integers(0, 2 ** 31))
            image, masks, cells = simulate_tissue(spec, g, pseed)
            pdir = out / "patients" / pid
            base = pdir / "image_00"
            tio.write_raw_image(base, image, MARKER_NAMES,
                                meta=tio.artifact_meta(pseed))
            mask_paths = {}
            for m in masks:
                mp = pdir / f"mask_{m.neighborhood_id}.png"
                tio.write_mask_png(mp, m.mask)
                mask_paths[m.neighborhood_id] = str(mp.relative_to(out))
            cpath = pdir / "cells.csv"
            cells.to_csv(cpath, meta=tio.artifact_meta(pseed))
            records.append(PatientRecord(
                patient_id=pid, group_index=g, label=gname,
                image_paths=[str(base.with_suffix(".raw").relative_to(out))],
                mask_paths=mask_paths,
                cells_path=str(cpath.relative_to(out)),
                seed=pseed))

    manifest = {
        "paradigm": spec.name, "scale": spec.scale, "seed": seed,
        "per_group": per_group, "groups": [spec.group_names[g] for g in group_list],
        "channel_names": list(MARKER_NAMES),
        "image_size": list(spec.image_size),
        "relevant_neighborhoods": list(spec.relevant_neighborhoods),
        "meta": tio.artifact_meta(seed, {"paradigm": spec.name, "scale": spec.scale}),
        "patients": [{
            "patient_id": r.patient_id, "group_index": r.group_index,
            "label": r.label, "images": r.image_paths, "masks": r.mask_paths,
            "cells": r.cells_path, "seed": r.seed,
        } for r in records],
    }
    manifest_path = out / "manifest.json"
    tio.write_json(manifest_path, manifest)
    return SyntheticCohort(paradigm=spec.name, scale=spec.scale, seed=seed,
                           root=out, patients=records,
                           group_names=[spec.group_names[g] for g in group_list],
                           relevant_neighborhoods=spec.relevant_neighborhoods,
                           manifest_path=manifest_path)


def load_cohort(manifest_path) -> SyntheticCohort:
    manifest_path = Path(manifest_path)
    m = tio.read_json(manifest_path)
    root = manifest_path.parent
    records = [PatientRecord(patient_id=p["patient_id"], group_index=p["group_index"],
                             label=p["label"], image_paths=p["images"],
                             mask_paths=p["masks"], cells_path=p["cells"],
                             seed=p["seed"])
               for p in m["patients"]]
    return SyntheticCohort(paradigm=m["paradigm"], scale=m["scale"], seed=m["seed"],
                           root=root, patients=records, group_names=m["groups"],
                           relevant_neighborhoods=tuple(m.get("relevant_neighborhoods", ())),
                           manifest_path=manifest_path)


# -- realization validation --------------------------------------------------------------

def censored_normal_mean(mu: float, sigma: float, lo=0.0, hi=1.0) -> float:
    """Mean of clip(N(mu, sigma), lo, hi); the expected rendered intensity."""
    if sigma == 0:
        return float(np.clip(mu, lo, hi))
    a, b = (lo - mu) / sigma, (hi - mu) / sigma
    return float(lo * norm_dist.cdf(a) + hi * norm_dist.sf(b)
                 + mu * (norm_dist.cdf(b) - norm_dist.cdf(a))
                 + sigma * (norm_dist.pdf(a) - norm_dist.pdf(b)))


@dataclass
class RealizationCheck:
    kind: str           # "fraction" | "marker"
    where: str          # neighborhood or phenotype id
    what: str           # phenotype or marker id
    expected: float
    measured: float | None
    tolerance: float
    ok: bool
    note: str = ""


@dataclass
class RealizationReport:
    checks: list

    @property
    def flagged(self):
        return [c for c in self.checks if not c.ok]


def validate_realization(cells: CellTable, spec: ParadigmSpec, group: int,
                         image: np.ndarray | None = None,
                         fraction_tol: float = 0.05,
                         marker_tol: float = 0.05) -> RealizationReport:
    """Compare measured phenotype fractions (and marker means, when the
    rendered image is given) against the resolved group parameters."""
    if len(cells) == 0:
        raise ValueError("cell table is empty")
    phenotypes, neighborhoods, _ = resolve_group(spec, group)
    checks = []
    for nb in neighborhoods:
        in_nb = cells.neighborhood == nb.id
        total = int(in_nb.sum())
        for j, ph in enumerate(phenotypes):
            expected = float(nb.phenotype_abundance[j])
            if total == 0:
                checks.append(RealizationCheck(
                    "fraction", nb.id, ph.id, expected, None, fraction_tol,
                    ok=False, note="empty neighborhood; fraction undefined"))
                continue
            measured = float((cells.phenotype[in_nb] == ph.id).mean())
            ok = abs(measured - expected) <= fraction_tol
            checks.append(RealizationCheck("fraction", nb.id, ph.id, expected,
                                           measured, fraction_tol, ok))
    if image is not None:
        for j, ph in enumerate(phenotypes):
            sel = cells.phenotype == ph.id
            if not sel.any():
                continue
            r = max(1, int(round(0.4 * ph.radius_px)))
            means = _interior_marker_means(image, cells.y[sel], cells.x[sel], r)
            for mi, mk in enumerate(MARKER_NAMES):
                expected = censored_normal_mean(ph.marker_means[mi], ph.marker_stddev)
                measured = float(means[mi])
                ok = abs(measured - expected) <= marker_tol
                checks.append(RealizationCheck("marker", ph.id, mk, expected,
                                               measured, marker_tol, ok))
    return RealizationReport(checks=checks)


def _interior_marker_means(image, ys, xs, r) -> np.ndarray:
    h, w, b = image.shape
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r * r]
    acc = np.zeros(b)
    n = 0
    for cy, cx in zip(ys, xs):
        for dy, dx in offs:
            py, px = int(cy) + dy, int(cx) + dx
            if 0 <= py < h and 0 <= px < w:
                acc += image[py, px, :]
                n += 1
    return acc / max(1, n)
