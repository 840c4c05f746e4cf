"""Synthetic delayed-enhancement short-axis phantoms.

Each slice holds an elliptical blood pool (label 1) inside a myocardial ring
(label 2). Pathological cases turn an angular wedge of the ring, growing
from the endocardium outwards, into infarct (label 3) and may carve a
no-reflow core (label 4) out of the wedge. Geometry tapers from base to apex
and drifts smoothly between slices. Intensities mimic the contrast of
late-enhancement imaging: bright blood, nulled myocardium, hyperintense scar,
dark microvascular obstruction, mid-grey surroundings with a bright right
ventricle, plus blur and Gaussian noise.

Intensity levels are fixed stand-ins, not measured tissue statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .volume import LabelMap, Volume

# mean intensities before noise
BACKGROUND_LEVEL = 0.30
BLOOD_LEVEL = 0.70
MYOCARDIUM_LEVEL = 0.08
INFARCT_LEVEL = 1.00
NO_REFLOW_LEVEL = 0.12
RV_LEVEL = 0.62
LEVEL_JITTER = 0.05


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    extents: tuple[int, int, int] = (64, 64, 8)
    spacing: tuple[float, float, float] = (1.667, 1.667, 10.0)
    cavity_radius_mm: tuple[float, float] = (12.0, 17.0)
    outer_radius_mm: tuple[float, float] = (20.0, 26.0)
    axis_ratio: tuple[float, float] = (0.8, 1.0)
    apex_taper: float = 0.35
    infarct_angle_deg: tuple[float, float] = (60.0, 150.0)
    transmurality: tuple[float, float] = (0.6, 1.0)
    noreflow_probability: float = 0.5
    noreflow_radius_mm: tuple[float, float] = (4.0, 7.0)
    noise_sigma: float = 0.06
    blur_sigma_px: float = 0.6
    pathological: bool = True
    case_id: str = ""

    def validate(self) -> None:
        ranges = {
            "cavity_radius_mm": self.cavity_radius_mm,
            "outer_radius_mm": self.outer_radius_mm,
            "axis_ratio": self.axis_ratio,
            "infarct_angle_deg": self.infarct_angle_deg,
            "transmurality": self.transmurality,
            "noreflow_radius_mm": self.noreflow_radius_mm,
        }
        for name, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if not (0 < self.cavity_radius_mm[0] and self.cavity_radius_mm[1] < self.outer_radius_mm[0]):
            raise ValueError("radii must be ordered: 0 < cavity radius < outer wall radius")
        if not 0 < self.axis_ratio[0] <= self.axis_ratio[1] <= 1:
            raise ValueError("axis_ratio must lie in (0, 1]")
        if not (0 < self.transmurality[0] and self.transmurality[1] <= 1):
            raise ValueError("transmurality must lie in (0, 1]")
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError(f"invalid extents {self.extents}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"invalid spacing {self.spacing}")
        if not 0 <= self.noreflow_probability <= 1:
            raise ValueError("noreflow_probability must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class Anatomy:
    """Boolean component masks of one phantom, before they are merged into labels."""

    cavity: np.ndarray
    annulus: np.ndarray
    wedge: np.ndarray
    noreflow: np.ndarray
    rv: np.ndarray

    def labels(self) -> np.ndarray:
        out = np.zeros(self.cavity.shape, dtype=np.uint8)
        out[self.cavity] = 1
        out[self.annulus] = 2
        out[self.annulus & self.wedge] = 3
        out[self.annulus & self.wedge & self.noreflow] = 4
        return out


def _smooth_walk(rng, n, start, step):
    """Random walk of length ``n`` with small increments."""
    return start + np.concatenate([[0.0], np.cumsum(rng.normal(0, step, n - 1))])


def build_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> Anatomy:
    spec.validate()
    nx, ny, nz = spec.extents
    sx, sy, _ = spec.spacing
    x = (np.arange(nx) - (nx - 1) / 2) * sx
    y = (np.arange(ny) - (ny - 1) / 2) * sy
    X, Y = np.meshgrid(x, y, indexing="ij")

    r_cav = rng.uniform(*spec.cavity_radius_mm)
    r_out = max(rng.uniform(*spec.outer_radius_mm), r_cav + 4.0)
    ratio = rng.uniform(*spec.axis_ratio)
    theta = rng.uniform(0, np.pi)
    fov = min(nx * sx, ny * sy)
    shift = max(0.0, fov / 2 - r_out - 4 * sx)
    cx = _smooth_walk(rng, nz, rng.uniform(-0.3, 0.3) * shift, 0.6)
    cy = _smooth_walk(rng, nz, rng.uniform(-0.3, 0.3) * shift, 0.6)
    depth = np.linspace(0.0, 1.0, nz) if nz > 1 else np.zeros(1)
    scale = 1.0 - spec.apex_taper * depth**1.5

    # wedge: contiguous run of slices, centre angle drifting, width tapering at the ends
    wedge_on = np.zeros(nz, dtype=bool)
    phi0 = _smooth_walk(rng, nz, rng.uniform(-np.pi, np.pi), 0.08)
    half_width = np.zeros(nz)
    transmural = rng.uniform(*spec.transmurality)
    if spec.pathological:
        span = max(1, int(round(rng.uniform(0.5, 1.0) * nz)))
        z0 = int(rng.integers(0, nz - span + 1))
        wedge_on[z0 : z0 + span] = True
        width = np.deg2rad(rng.uniform(*spec.infarct_angle_deg)) / 2
        pos = (np.arange(nz) - z0 + 0.5) / span
        half_width = width * (0.75 + 0.25 * np.sin(np.pi * np.clip(pos, 0, 1)))
    has_nr = spec.pathological and rng.random() < spec.noreflow_probability
    r_nr = rng.uniform(*spec.noreflow_radius_mm)
    nr_depth = rng.uniform(0.2, 0.5) * transmural
    nr_angle_offset = rng.uniform(-0.3, 0.3)

    # right ventricle: crescent-ish bright blob beside the septum
    rv_angle = theta + np.pi / 2 + rng.uniform(-0.4, 0.4)
    rv_dist = r_out + rng.uniform(6.0, 12.0)
    rv_r = rng.uniform(0.6, 0.9) * r_cav

    shape = (nx, ny, nz)
    cavity = np.zeros(shape, bool)
    annulus = np.zeros(shape, bool)
    wedge = np.zeros(shape, bool)
    noreflow = np.zeros(shape, bool)
    rv = np.zeros(shape, bool)
    ct, st = np.cos(theta), np.sin(theta)
    for k in range(nz):
        u = (X - cx[k]) * ct + (Y - cy[k]) * st
        v = -(X - cx[k]) * st + (Y - cy[k]) * ct
        rho = np.sqrt(u**2 + (v / ratio) ** 2)  # elliptical radius in mm along the major axis
        a_cav, a_out = r_cav * scale[k], r_out * scale[k]
        cavity[:, :, k] = rho <= a_cav
        annulus[:, :, k] = (rho > a_cav) & (rho <= a_out)
        phi = np.arctan2(Y - cy[k], X - cx[k])
        if wedge_on[k]:
            dphi = np.angle(np.exp(1j * (phi - phi0[k])))
            wall = (rho - a_cav) / (a_out - a_cav)
            wedge[:, :, k] = (np.abs(dphi) <= half_width[k]) & (wall <= transmural)
            if has_nr:
                ang = phi0[k] + nr_angle_offset * half_width[k]
                rad = a_cav + nr_depth * (a_out - a_cav)
                bx = cx[k] + rad * np.cos(ang)
                by = cy[k] + rad * np.sin(ang)
                noreflow[:, :, k] = (X - bx) ** 2 + (Y - by) ** 2 <= (r_nr * np.sqrt(scale[k])) ** 2
        rx = cx[k] + rv_dist * scale[k] * np.cos(rv_angle)
        ry = cy[k] + rv_dist * scale[k] * np.sin(rv_angle)
        rv[:, :, k] = ((X - rx) ** 2 + (Y - ry) ** 2 <= (rv_r * scale[k]) ** 2) & ~(rho <= a_out + 2.0)
    return Anatomy(cavity, annulus, wedge, noreflow, rv)


def render(anatomy: Anatomy, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    labels = anatomy.labels()
    shape = labels.shape

    def level(mean):
        return mean + rng.uniform(-LEVEL_JITTER, LEVEL_JITTER)

    # slowly varying surroundings
    bg = rng.normal(0, 1, shape)
    bg = ndimage.gaussian_filter(bg, sigma=(6, 6, 1))
    bg = BACKGROUND_LEVEL + 0.08 * bg / max(bg.std(), 1e-12)
    img = bg
    img = np.where(anatomy.rv, level(RV_LEVEL), img)
    img = np.where(labels == 1, level(BLOOD_LEVEL), img)
    img = np.where(labels == 2, level(MYOCARDIUM_LEVEL), img)
    img = np.where(labels == 3, level(INFARCT_LEVEL), img)
    img = np.where(labels == 4, level(NO_REFLOW_LEVEL), img)
    if spec.blur_sigma_px > 0:
        img = ndimage.gaussian_filter(img, sigma=(spec.blur_sigma_px, spec.blur_sigma_px, 0))
    # coil-like bias field
    nx, ny, _ = shape
    gx, gy = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), indexing="ij")
    bias = 1.0 + 0.1 * (rng.uniform(-1, 1) * gx + rng.uniform(-1, 1) * gy)
    img = img * bias[:, :, None]
    img = img + rng.normal(0, spec.noise_sigma, shape)
    return img.astype(np.float32)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Image and ground truth for one phantom; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    anatomy = build_anatomy(spec, rng)
    image = render(anatomy, spec, rng)
    return Volume(image, spec.spacing, spec.case_id), LabelMap(anatomy.labels(), spec.spacing, spec.case_id)


def phantom_anatomy(spec: PhantomSpec) -> Anatomy:
    """The component masks behind :func:`generate_phantom` for the same spec."""
    return build_anatomy(spec, np.random.default_rng(spec.seed))


def cohort_specs(count: int, seed: int = 0, pathology_rate: float = 0.67, base: PhantomSpec | None = None) -> list[PhantomSpec]:
    """Specs for ``count`` phantoms, each pathological with probability ``pathology_rate``."""
    base = base or PhantomSpec()
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    sick = rng.random(count) < pathology_rate
    return [
        replace(base, seed=int(s), pathological=bool(p), case_id=f"P{i:03d}" if p else f"N{i:03d}")
        for i, (s, p) in enumerate(zip(seeds, sick))
    ]


def generate_cohort(count: int, seed: int = 0, pathology_rate: float = 0.67, base: PhantomSpec | None = None):
    return [generate_phantom(s) for s in cohort_specs(count, seed, pathology_rate, base)]
