"""Rubber-sheet normalization, two-scale Gabor phase encoding and template files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from iris_he.errors import TemplateFormatError
from iris_he.image_pipeline import EyeImage, SegmentationResult, preprocess, segment_iris

RADIAL = 64
ANGULAR = 512
BANDS = 8
WAVELENGTHS = (16, 32)
SIGMA_RATIO = 0.5
MAG_FLOOR = 1e-3
TEMPLATE_ROWS = 2 * BANDS * len(WAVELENGTHS)  # 32
TEMPLATE_BITS = TEMPLATE_ROWS * ANGULAR

TPL_MAGIC = b"IRISTPL\x01"
_TPL_HEAD = struct.Struct("<8sHH")


@dataclass(frozen=True, eq=False)
class NormalizedIris:
    intensities: np.ndarray  # (64, 512) float64, rows = radius, columns = angle
    validity: np.ndarray  # (64, 512) uint8 in {0, 1}

    def __post_init__(self):
        if self.intensities.shape != (RADIAL, ANGULAR) or self.validity.shape != (RADIAL, ANGULAR):
            raise ValueError(f"normalized iris must be {RADIAL}x{ANGULAR}")

    def roll(self, k: int) -> "NormalizedIris":
        return NormalizedIris(np.roll(self.intensities, k, axis=1), np.roll(self.validity, k, axis=1))


@dataclass(frozen=True, eq=False)
class IrisTemplate:
    """Iris code and validity mask as uint8 {0,1} arrays of shape (rows, cols).

    The canonical layout is 32 x 512; rows 0-7 hold the wavelength-16 real
    bits per band, 8-15 its imaginary bits, 16-23 and 24-31 the same for
    wavelength 32. Smaller shapes are accepted for miniature tests.
    """

    code: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        code = np.ascontiguousarray(self.code, dtype=np.uint8)
        mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if code.ndim != 2 or code.shape != mask.shape:
            raise ValueError(f"code {code.shape} and mask {mask.shape} must be equal 2-D shapes")
        if code.max(initial=0) > 1 or mask.max(initial=0) > 1:
            raise ValueError("template bits must be 0 or 1")
        object.__setattr__(self, "code", code)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.code.shape

    @property
    def rows(self) -> int:
        return self.code.shape[0]

    @property
    def cols(self) -> int:
        return self.code.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, IrisTemplate):
            return NotImplemented
        return np.array_equal(self.code, other.code) and np.array_equal(self.mask, other.mask)

    def to_bytes(self) -> bytes:
        return (
            _TPL_HEAD.pack(TPL_MAGIC, self.rows, self.cols)
            + np.packbits(self.code).tobytes()
            + np.packbits(self.mask).tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "IrisTemplate":
        if len(data) < _TPL_HEAD.size:
            raise TemplateFormatError("template file is truncated")
        magic, rows, cols = _TPL_HEAD.unpack_from(data)
        if magic != TPL_MAGIC:
            raise TemplateFormatError("not an IRISTPL v1 file")
        nbits = rows * cols
        if nbits == 0:
            raise TemplateFormatError("template has zero size")
        plane = (nbits + 7) // 8
        if len(data) != _TPL_HEAD.size + 2 * plane:
            raise TemplateFormatError(
                f"expected {_TPL_HEAD.size + 2 * plane} bytes for {rows}x{cols}, got {len(data)}"
            )
        raw = np.frombuffer(data, dtype=np.uint8, offset=_TPL_HEAD.size)
        code = np.unpackbits(raw[:plane])[:nbits].reshape(rows, cols)
        mask = np.unpackbits(raw[plane:])[:nbits].reshape(rows, cols)
        return cls(code, mask)


def save_template(t: IrisTemplate, path) -> None:
    Path(path).write_bytes(t.to_bytes())


def load_template(path) -> IrisTemplate:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise TemplateFormatError(f"cannot read template {path}: {exc}") from exc
    return IrisTemplate.from_bytes(data)


def template_rotate(t: IrisTemplate, k: int) -> IrisTemplate:
    """Circular shift of code and mask by k columns (positive = towards higher columns)."""
    if abs(k) > 511:
        raise ValueError(f"|k| must be <= 511, got {k}")
    k %= t.cols
    if k == 0:
        return t
    return IrisTemplate(np.roll(t.code, k, axis=1), np.roll(t.mask, k, axis=1))


# -- normalization -------------------------------------------------------------


def sample_grid(seg: SegmentationResult) -> tuple[np.ndarray, np.ndarray]:
    """Image coordinates (x, y), each (64, 512), of the rubber-sheet samples."""
    px, py, pr = seg.pupil_circle
    ix, iy, ir = seg.iris_circle
    theta = 2.0 * np.pi * np.arange(ANGULAR) / ANGULAR
    r = np.arange(RADIAL)[:, None] / (RADIAL - 1)
    cos, sin = np.cos(theta)[None, :], np.sin(theta)[None, :]
    x = (1.0 - r) * (px + pr * cos) + r * (ix + ir * cos)
    y = (1.0 - r) * (py + pr * sin) + r * (iy + ir * sin)
    return x, y


def rubber_sheet_normalize(img: EyeImage, seg: SegmentationResult) -> NormalizedIris:
    """Bilinear samples along rays from the pupil to the iris boundary.

    Row i is at radial fraction i/63 and column j at angle 2*pi*j/512, with
    angles measured from +x towards +y in image coordinates. Validity takes
    the occlusion mask at the nearest pixel; samples off the image are invalid.
    """
    x, y = sample_grid(seg)
    coords = np.stack([y, x])
    pixels = img.array().astype(np.float64)
    values = ndimage.map_coordinates(pixels, coords, order=1, mode="nearest")
    valid = ndimage.map_coordinates(
        seg.occlusion_mask.astype(np.uint8), coords, order=0, mode="constant", cval=0
    )
    return NormalizedIris(values, (valid > 0).astype(np.uint8))


# -- Gabor encoding --------------------------------------------------------------


def gabor_kernel(wavelength: float) -> tuple[np.ndarray, int]:
    """Complex 1-D kernel on offsets -h..h with a zero-mean real part."""
    sigma = SIGMA_RATIO * wavelength
    h = int(math.ceil(3.0 * sigma))
    u = np.arange(-h, h + 1, dtype=np.float64)
    env = np.exp(-(u**2) / (2.0 * sigma**2))
    real = env * np.cos(2.0 * np.pi * u / wavelength)
    real -= env * (real.sum() / env.sum())
    imag = env * np.sin(2.0 * np.pi * u / wavelength)
    return real + 1j * imag, h


def gabor_response(signal: np.ndarray, wavelength: float) -> np.ndarray:
    """Circular correlation R[j] = sum_u signal[j + u] * g(u) along the last axis."""
    g, h = gabor_kernel(wavelength)
    cols = signal.shape[-1]
    kern = np.zeros(cols, dtype=np.complex128)
    for idx, u in enumerate(range(-h, h + 1)):
        kern[(-u) % cols] += g[idx]
    return np.fft.ifft(np.fft.fft(signal, axis=-1) * np.fft.fft(kern), axis=-1)


def _support_valid(valid: np.ndarray, h: int) -> np.ndarray:
    """Columns whose whole circular window [j-h, j+h] is valid."""
    cols = valid.shape[-1]
    width = 2 * h + 1
    if width >= cols:
        return np.repeat(valid.all(axis=-1, keepdims=True), cols, axis=-1)
    bad = (valid == 0).astype(np.int32)
    hits = ndimage.convolve1d(bad, np.ones(width, dtype=np.int32), axis=-1, mode="wrap")
    return hits == 0


def gabor_encode(norm: NormalizedIris) -> IrisTemplate:
    """Quadrant phase bits of 8 radial bands x 2 wavelengths -> 32 x 512 template."""
    bands = norm.intensities.reshape(BANDS, RADIAL // BANDS, ANGULAR).mean(axis=1)
    band_valid = norm.validity.reshape(BANDS, RADIAL // BANDS, ANGULAR).all(axis=1)
    code = np.zeros((TEMPLATE_ROWS, ANGULAR), dtype=np.uint8)
    mask = np.zeros((TEMPLATE_ROWS, ANGULAR), dtype=np.uint8)
    band_rms = np.sqrt(np.mean(bands**2, axis=1, keepdims=True))  # floor scale per band signal
    for s, wavelength in enumerate(WAVELENGTHS):
        resp = gabor_response(bands, wavelength)
        _, h = gabor_kernel(wavelength)
        mag = np.abs(resp)
        ok = _support_valid(band_valid, h) & (mag >= MAG_FLOOR * band_rms)
        base = 2 * BANDS * s
        code[base : base + BANDS] = resp.real >= 0
        code[base + BANDS : base + 2 * BANDS] = resp.imag >= 0
        mask[base : base + BANDS] = ok
        mask[base + BANDS : base + 2 * BANDS] = ok
    return IrisTemplate(code, mask)


def encode_image(img: EyeImage, seg: SegmentationResult | None = None) -> tuple[IrisTemplate, SegmentationResult]:
    """Full pipeline: preprocess, segment (unless `seg` is given), normalize, encode."""
    clean = preprocess(img)
    if seg is None:
        seg = segment_iris(clean)
    return gabor_encode(rubber_sheet_normalize(clean, seg)), seg
