"""Synthetic eyes and template populations with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from iris_he.encoding import TEMPLATE_ROWS, ANGULAR, IrisTemplate
from iris_he.image_pipeline import EyeImage


@dataclass(frozen=True)
class EyeTruth:
    pupil_circle: tuple[float, float, float]
    iris_circle: tuple[float, float, float]
    eyelid_y: float | None = None  # upper eyelid line, pixels above are skin


def _coverage(dist: np.ndarray, radius: float) -> np.ndarray:
    """Anti-aliased disc coverage from a distance field."""
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def iris_texture(rng: np.random.Generator, shape=(64, 256), smooth=1.5) -> np.ndarray:
    """Zero-mean, unit-std smooth noise, periodic along the second axis."""
    tex = ndimage.gaussian_filter(rng.standard_normal(shape), smooth, mode=("nearest", "wrap"))
    return (tex - tex.mean()) / (tex.std() + 1e-12)


def synthetic_eye(
    rng: np.random.Generator | int | None = None,
    size: tuple[int, int] = (320, 320),
    pupil=None,
    iris=None,
    eyelid: bool = False,
    highlight: bool = False,
    texture_amp: float = 25.0,
    noise_std: float = 2.0,
) -> tuple[EyeImage, EyeTruth]:
    """Dark pupil disc inside a textured iris annulus on a bright sclera.

    `pupil` and `iris` are (cx, cy, r); missing circles are drawn at random.
    """
    rng = np.random.default_rng(rng)
    h, w = size
    if iris is None:
        ir = rng.uniform(0.25, 0.33) * min(h, w)
        ix = w / 2 + rng.uniform(-0.05, 0.05) * w
        iy = h / 2 + rng.uniform(-0.05, 0.05) * h
        iris = (ix, iy, ir)
    ix, iy, ir = iris
    if pupil is None:
        pr = ir * rng.uniform(0.3, 0.5)
        off = rng.uniform(0, 0.05 * ir)
        ang = rng.uniform(0, 2 * np.pi)
        pupil = (ix + off * math.cos(ang), iy + off * math.sin(ang), pr)
    px, py, pr = pupil

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    di = np.hypot(xx - ix, yy - iy)
    dp = np.hypot(xx - px, yy - py)
    # texture indexed by angle about the pupil and by normalized radius
    theta = np.mod(np.arctan2(yy - py, xx - px), 2 * np.pi)
    rad = np.clip((dp - pr) / max(ir - pr, 1.0), 0.0, 1.0)
    tex = iris_texture(rng)
    tv = ndimage.map_coordinates(
        tex, [rad * (tex.shape[0] - 1), theta / (2 * np.pi) * tex.shape[1]], order=1, mode="grid-wrap"
    )
    sclera, iris_level, pupil_level = 215.0, 110.0, 25.0
    img = np.full((h, w), sclera)
    cov_i = _coverage(di, ir)
    img = img * (1 - cov_i) + (iris_level + texture_amp * tv) * cov_i
    cov_p = _coverage(dp, pr)
    img = img * (1 - cov_p) + pupil_level * cov_p
    lid = None
    if eyelid:
        lid = iy - rng.uniform(0.45, 0.7) * ir
        skin = np.clip(lid - yy + 0.5, 0.0, 1.0)
        img = img * (1 - skin) + 175.0 * skin
    if highlight:
        hx, hy = px + 0.3 * pr, py - 0.3 * pr
        img = np.maximum(img, 255.0 * _coverage(np.hypot(xx - hx, yy - hy), max(2.0, 0.12 * pr)))
    img += rng.normal(0.0, noise_std, size=img.shape)
    return EyeImage.from_array(img), EyeTruth(tuple(map(float, pupil)), tuple(map(float, iris)), lid)


# -- templates -------------------------------------------------------------------


def per_sample_flip(pair_rate: float) -> float:
    """Per-sample flip probability giving expected pairwise disagreement `pair_rate`.

    Two samples flipped independently at p disagree with probability 2p(1-p).
    """
    if not 0.0 <= pair_rate < 0.5:
        raise ValueError("flip rate must lie in [0, 0.5)")
    return (1.0 - math.sqrt(1.0 - 2.0 * pair_rate)) / 2.0


def random_template(rng: np.random.Generator, shape=(TEMPLATE_ROWS, ANGULAR), mask_density: float = 1.0) -> IrisTemplate:
    code = rng.integers(0, 2, size=shape, dtype=np.uint8)
    mask = (rng.random(shape) < mask_density).astype(np.uint8) if mask_density < 1.0 else np.ones(shape, np.uint8)
    return IrisTemplate(code, mask)


def noisy_sample(rng: np.random.Generator, proto: IrisTemplate, flip: float, mask_drop: float = 0.0) -> IrisTemplate:
    code = proto.code ^ (rng.random(proto.shape) < flip).astype(np.uint8)
    mask = proto.mask.copy()
    if mask_drop > 0:
        mask &= (rng.random(proto.shape) >= mask_drop).astype(np.uint8)
    return IrisTemplate(code, mask)


def synthetic_population(
    subjects: int,
    samples: int,
    rate: float,
    seed: int,
    mask_density: float = 1.0,
    shape=(TEMPLATE_ROWS, ANGULAR),
) -> list[tuple[str, str, str, IrisTemplate]]:
    """(subject, eye, sample, template) records; deterministic per seed.

    Genuine pairs disagree on about `rate` of their bits. With mask density
    below 1, each sample also drops (1 - density) / 2 of its valid bits.
    """
    flip = per_sample_flip(rate)
    drop = (1.0 - mask_density) / 2.0
    rng = np.random.default_rng(seed)
    out = []
    for s in range(subjects):
        proto = random_template(rng, shape, mask_density)
        for k in range(samples):
            out.append((f"S{s + 1:04d}", "L", f"{k + 1:02d}", noisy_sample(rng, proto, flip, drop)))
    return out


def template_pair_with_counts(
    numerator: int, denominator: int, seed: int, shape=(TEMPLATE_ROWS, ANGULAR)
) -> tuple[IrisTemplate, IrisTemplate]:
    """Two templates whose unshifted masked comparison gives exactly (numerator, denominator)."""
    rows, cols = shape
    total = rows * cols
    if not 0 <= numerator <= denominator <= total:
        raise ValueError("need 0 <= numerator <= denominator <= template size")
    rng = np.random.default_rng(seed)
    a_code = rng.integers(0, 2, size=total, dtype=np.uint8)
    joint = rng.permutation(total)[:denominator]
    rest = np.setdiff1d(np.arange(total), joint)
    # outside the joint mask each template keeps some bits of its own
    side = rng.integers(0, 3, size=rest.size)  # 0: neither, 1: only a, 2: only b
    a_mask = np.zeros(total, np.uint8)
    b_mask = np.zeros(total, np.uint8)
    a_mask[joint] = b_mask[joint] = 1
    a_mask[rest[side == 1]] = 1
    b_mask[rest[side == 2]] = 1
    b_code = a_code.copy()
    flip = rng.permutation(joint)[:numerator]
    b_code[flip] ^= 1
    noise = rest[rng.random(rest.size) < 0.5]
    b_code[noise] ^= 1
    return (
        IrisTemplate(a_code.reshape(shape), a_mask.reshape(shape)),
        IrisTemplate(b_code.reshape(shape), b_mask.reshape(shape)),
    )
