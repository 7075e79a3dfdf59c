"""Eye-image loading, highlight removal, contrast normalization and segmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from iris_he.errors import ImageFormatError, MaskFormatError, SegmentationError

DEFAULT_HIGHLIGHT_PERCENTILE = 0.995
BRIGHT_LEVEL = 250
GRADIENT_FLOOR = 3.0  # intensity levels per pixel after smoothing
EYELID_COVERAGE = 0.8


@dataclass(frozen=True, eq=False)
class EyeImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8, row-major

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if px.size != self.width * self.height:
            raise ValueError(f"{px.size} pixels for a {self.width}x{self.height} image")
        object.__setattr__(self, "pixels", px.reshape(self.height, self.width))

    @classmethod
    def from_array(cls, arr) -> "EyeImage":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array")
        return cls(arr.shape[1], arr.shape[0], np.clip(np.rint(arr), 0, 255).astype(np.uint8))

    def array(self) -> np.ndarray:
        return self.pixels


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    pupil_circle: tuple[float, float, float]  # (cx, cy, r)
    iris_circle: tuple[float, float, float]
    occlusion_mask: np.ndarray  # (height, width) uint8, 1 = valid iris

    def __post_init__(self):
        object.__setattr__(self, "pupil_circle", tuple(float(v) for v in self.pupil_circle))
        object.__setattr__(self, "iris_circle", tuple(float(v) for v in self.iris_circle))
        object.__setattr__(self, "occlusion_mask", np.asarray(self.occlusion_mask, dtype=np.uint8))

    def validate(self) -> None:
        px, py, pr = self.pupil_circle
        ix, iy, ir = self.iris_circle
        if not 0 < pr < ir:
            raise ValueError(f"pupil radius {pr} must be positive and below iris radius {ir}")
        if math.hypot(px - ix, py - iy) >= ir:
            raise ValueError("pupil centre lies outside the iris circle")
        m = self.occlusion_mask
        if m.ndim != 2 or m.max(initial=0) > 1:
            raise ValueError("occlusion mask must be a 2-D {0,1} grid")
        if np.any(m & ~annulus(m.shape, self.pupil_circle, self.iris_circle)):
            raise ValueError("occlusion mask marks pixels outside the iris annulus")


def annulus(shape, pupil, iris) -> np.ndarray:
    """uint8 grid: 1 where a pixel centre is outside the pupil and inside the iris circle."""
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    dp = np.hypot(xx - pupil[0], yy - pupil[1])
    di = np.hypot(xx - iris[0], yy - iris[1])
    return ((dp > pupil[2]) & (di <= iris[2])).astype(np.uint8)


# -- I/O ------------------------------------------------------------------------


def load_eye_image(path) -> EyeImage:
    """Read an 8-bit single-channel PGM or PNG."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr", "PA", "RGBX", "HSV", "LAB"):
                raise ImageFormatError(f"{path}: channels: expected 1 (grayscale), got mode {mode}")
            if mode != "L":
                raise ImageFormatError(f"{path}: bit depth: expected 8-bit, got mode {mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return EyeImage(arr.shape[1], arr.shape[0], arr)


def save_eye_image(img: EyeImage, path) -> None:
    Image.fromarray(img.pixels, mode="L").save(path)


# -- preprocessing ---------------------------------------------------------------


def _neighbour_system(shape, hole: np.ndarray):
    """Sparse system whose solution gives each hole pixel the mean of its 3x3 neighbours."""
    h, w = shape
    idx = -np.ones(shape, dtype=np.int64)
    ys, xs = np.nonzero(hole)
    idx[ys, xs] = np.arange(ys.size)
    rows, cols, vals = [], [], []
    count = np.zeros(ys.size)
    known_sum_terms = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ny, nx = ys + dy, xs + dx
            inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            count += inside
            ny, nx, src = ny[inside], nx[inside], np.nonzero(inside)[0]
            j = idx[ny, nx]
            unk = j >= 0
            rows.append(src[unk])
            cols.append(j[unk])
            vals.append(-np.ones(unk.sum()))
            known_sum_terms.append((src[~unk], ny[~unk], nx[~unk]))
    rows.append(np.arange(ys.size))
    cols.append(np.arange(ys.size))
    vals.append(count)
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(ys.size, ys.size)
    )
    return A, (ys, xs), known_sum_terms


def remove_specular_highlights(img: EyeImage, percentile: float = DEFAULT_HIGHLIGHT_PERCENTILE) -> EyeImage:
    """Inpaint pixels brighter than percentile * 255 from their non-highlight surroundings.

    Each highlight pixel ends at the mean of its 3x3 neighbours (the fixed
    point of iterated neighbourhood averaging), solved directly. By the
    discrete maximum principle no output exceeds the brightest kept pixel.
    """
    if not 0.0 < percentile < 1.0:
        raise ValueError("percentile must lie in (0, 1)")
    px = img.pixels
    hole = px.astype(np.float64) > percentile * 255.0
    if not hole.any() or hole.all():
        return img
    A, (ys, xs), known = _neighbour_system(px.shape, hole)
    b = np.zeros(ys.size)
    src_vals = px.astype(np.float64)
    for src, ny, nx in known:
        np.add.at(b, src, src_vals[ny, nx])
    sol = spsolve(A.tocsc(), b)
    out = px.copy()
    out[ys, xs] = np.clip(np.rint(sol), 0, 255).astype(np.uint8)
    return EyeImage(img.width, img.height, out)


def normalize_contrast(img: EyeImage) -> EyeImage:
    """Linear stretch of the 1st..99th percentile range onto [0, 255], clipped."""
    x = img.pixels.astype(np.float64)
    lo, hi = np.percentile(x, [1.0, 99.0])
    if hi <= lo:
        out = np.where(x > lo, 255.0, np.where(x < lo, 0.0, 128.0))
    else:
        out = (x - lo) * (255.0 / (hi - lo))
    return EyeImage(img.width, img.height, np.clip(np.rint(out), 0, 255).astype(np.uint8))


def preprocess(img: EyeImage, percentile: float = DEFAULT_HIGHLIGHT_PERCENTILE) -> EyeImage:
    return normalize_contrast(remove_specular_highlights(img, percentile))


# -- segmentation ----------------------------------------------------------------


def _circle_profiles(img: np.ndarray, cx, cy, radii, angles) -> np.ndarray:
    """Mean intensity on circles: (len(cx), len(radii))."""
    cx = np.asarray(cx, dtype=np.float64)[:, None, None]
    cy = np.asarray(cy, dtype=np.float64)[:, None, None]
    r = np.asarray(radii, dtype=np.float64)[None, :, None]
    x = cx + r * np.cos(angles)[None, None, :]
    y = cy + r * np.sin(angles)[None, None, :]
    vals = ndimage.map_coordinates(img, [y.ravel(), x.ravel()], order=1, mode="nearest")
    return vals.reshape(x.shape).mean(axis=2)


def _best_circle(img, cx, cy, radii, angles, sigma, max_inner=None):
    """Integro-differential search: maximise the smoothed radial derivative.

    With `max_inner`, circles whose enclosed mean intensity (over the
    searched radii) exceeds it are discarded.
    """
    prof = _circle_profiles(img, cx, cy, radii, angles)
    step = radii[1] - radii[0]
    grad = ndimage.gaussian_filter1d(prof, sigma / step, order=1, axis=1, mode="nearest") / step
    # ignore the ends, where the smoothed derivative is biased
    edge = max(1, int(round(sigma / step)))
    grad[:, :edge] = -np.inf
    grad[:, -edge:] = -np.inf
    if max_inner is not None:
        # mean over the ring [r/2, r - lag] just inside each candidate circle
        lag = 2 * edge
        csum = np.concatenate([np.zeros((prof.shape[0], 1)), np.cumsum(prof, axis=1)], axis=1)
        hi = np.arange(prof.shape[1]) - lag
        lo = np.searchsorted(radii, radii / 2.0)
        lo = np.minimum(lo, np.maximum(hi, 0))
        ok = hi > lo
        inner = np.full(prof.shape, np.inf)
        inner[:, ok] = (csum[:, hi[ok] + 1] - csum[:, lo[ok]]) / (hi[ok] + 1 - lo[ok])
        grad[inner > max_inner] = -np.inf
    flat = int(np.argmax(grad))
    c, ri = divmod(flat, grad.shape[1])
    return float(cx[c]), float(cy[c]), float(radii[ri]), float(grad[c, ri])


_LATERAL = np.concatenate([np.linspace(-np.pi / 4, np.pi / 4, 24), np.linspace(3 * np.pi / 4, 5 * np.pi / 4, 24)])
_FULL = np.linspace(0, 2 * np.pi, 64, endpoint=False)


def _find_pupil(img: np.ndarray, rmin: float, rmax: float):
    h, w = img.shape
    smooth = ndimage.gaussian_filter(img, 3.0)
    step = max(2, int(round(min(h, w) / 120)))
    gy, gx = np.mgrid[step // 2 : h : step, step // 2 : w : step]
    vals = smooth[gy, gx]
    dark = vals <= np.quantile(vals, 0.08)
    cx, cy = gx[dark].astype(float), gy[dark].astype(float)
    lo, mid = np.quantile(smooth, [0.01, 0.5])
    max_inner = lo + 0.35 * (mid - lo)
    radii = np.arange(rmin, rmax + 1.0, 1.0)
    x, y, r, g = _best_circle(ndimage.gaussian_filter(img, 1.5), cx, cy, radii, _FULL, 2.0, max_inner)
    if not np.isfinite(g):
        return x, y, r, 0.0
    # refine at sub-step resolution
    offs = np.arange(-step, step + 1, 1.0)
    ox, oy = np.meshgrid(offs, offs)
    radii = np.arange(max(2.0, r - 4), r + 4.01, 0.5)
    base = ndimage.gaussian_filter(img, 1.0)
    return _best_circle(base, x + ox.ravel(), y + oy.ravel(), radii, _FULL, 1.5)


def _find_iris(img: np.ndarray, pupil, rmax: float):
    px, py, pr = pupil
    smooth = ndimage.gaussian_filter(img, 2.0)
    offs = np.arange(-0.3 * pr, 0.3 * pr + 0.01, 2.0)
    ox, oy = np.meshgrid(offs, offs)
    radii = np.arange(1.4 * pr, min(5.0 * pr, rmax) + 1.0, 1.0)
    if radii.size < 8:
        radii = np.arange(1.4 * pr, 1.4 * pr + 8.0, 1.0)
    x, y, r, g = _best_circle(smooth, px + ox.ravel(), py + oy.ravel(), radii, _LATERAL, 3.0)
    offs = np.arange(-2.0, 2.01, 1.0)
    ox, oy = np.meshgrid(offs, offs)
    radii = np.arange(max(pr + 2, r - 5), r + 5.01, 0.5)
    base = ndimage.gaussian_filter(img, 1.0)
    x, y, r, g = _best_circle(base, x + ox.ravel(), y + oy.ravel(), radii, _LATERAL, 2.0)
    return x, y, r, g


def _eyelid_line(grad_y: np.ndarray, iris, rows: np.ndarray):
    """Best near-horizontal line within `rows` whose edge spans the whole iris chord.

    Returns (y0, slope) with y = y0 + slope * (x - ix), or None when no
    candidate has a consistent gradient over the chord.
    """
    ix, iy, ir = iris
    h, w = grad_y.shape
    best, best_score = None, 0.0
    for slope in np.linspace(-0.2, 0.2, 9):
        for y0 in rows:
            half = math.sqrt(max(ir**2 - (y0 - iy) ** 2, 0.0)) * 0.9
            if half < 5:
                continue
            xs = np.arange(math.ceil(ix - half), math.floor(ix + half) + 1, dtype=np.float64)
            ys = y0 + slope * (xs - ix)
            keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h - 1)
            if keep.sum() < 10:
                continue
            g = ndimage.map_coordinates(grad_y, [ys[keep], xs[keep]], order=1)
            sign = np.sign(np.median(g))
            if sign == 0:
                continue
            strong = (g * sign) > GRADIENT_FLOOR
            if strong.mean() < EYELID_COVERAGE:
                continue
            score = float(np.abs(g.mean()))
            if score > best_score:
                best, best_score = (float(y0), float(slope)), score
    return best


def segment_iris(img: EyeImage) -> SegmentationResult:
    """Circular integro-differential segmentation with eyelid and highlight masking."""
    x = img.pixels.astype(np.float64)
    h, w = x.shape
    side = min(h, w)
    if side < 16:
        raise SegmentationError(f"image {w}x{h} too small to segment")
    pupil_min, pupil_max = max(3.0, 0.03 * side), 0.3 * side
    px, py, pr, pg = _find_pupil(x, pupil_min, pupil_max)
    candidate = {"pupil_circle": (px, py, pr), "pupil_gradient": pg}
    if not pg >= GRADIENT_FLOOR:
        raise SegmentationError(f"no pupil boundary (peak gradient {pg:.2f} < {GRADIENT_FLOOR})", candidate)
    ix, iy, ir, ig = _find_iris(x, (px, py, pr), 0.75 * side)
    candidate.update(iris_circle=(ix, iy, ir), iris_gradient=ig)
    if not ig >= GRADIENT_FLOOR:
        raise SegmentationError(f"no iris boundary (peak gradient {ig:.2f} < {GRADIENT_FLOOR})", candidate)
    if not (pr < ir and math.hypot(px - ix, py - iy) < ir):
        raise SegmentationError("implausible pupil/iris geometry", candidate)

    mask = annulus(x.shape, (px, py, pr), (ix, iy, ir)).astype(bool)
    grad_y = ndimage.gaussian_filter(x, 2.0, order=(1, 0))
    yy, xx = np.mgrid[0:h, 0:w]
    top = np.arange(math.ceil(iy - ir + 3), math.floor(py - pr - 2) + 1)
    line = _eyelid_line(grad_y, (ix, iy, ir), top)
    if line is not None:
        mask &= yy > line[0] + line[1] * (xx - ix)
    bottom = np.arange(math.ceil(py + pr + 3), math.floor(iy + ir - 3) + 1)
    line = _eyelid_line(grad_y, (ix, iy, ir), bottom)
    if line is not None:
        mask &= yy < line[0] + line[1] * (xx - ix)
    mask &= img.pixels < BRIGHT_LEVEL
    return SegmentationResult((px, py, pr), (ix, iy, ir), mask.astype(np.uint8))


# -- external masks --------------------------------------------------------------

MASK_TAG = "IRISMASK"


def save_external_mask(seg: SegmentationResult, path) -> None:
    h, w = seg.occlusion_mask.shape
    head = " ".join(
        [MASK_TAG, "v1", str(w), str(h)] + [repr(float(v)) for v in (*seg.pupil_circle, *seg.iris_circle)]
    )
    Path(path).write_bytes(head.encode("ascii") + b"\n" + seg.occlusion_mask.astype(np.uint8).tobytes())


def load_external_mask(path, img: EyeImage) -> SegmentationResult:
    """Read an IRISMASK v1 sidecar and validate it against `img`."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise MaskFormatError(f"cannot read mask {path}: {exc}") from exc
    nl = data.find(b"\n")
    if nl < 0:
        raise MaskFormatError("mask header line missing")
    fields = data[:nl].decode("ascii", errors="replace").split()
    if len(fields) != 10 or fields[0] != MASK_TAG or fields[1] != "v1":
        raise MaskFormatError("expected header 'IRISMASK v1 <w> <h> <px> <py> <pr> <ix> <iy> <ir>'")
    try:
        w, h = int(fields[2]), int(fields[3])
        nums = [float(v) for v in fields[4:]]
    except ValueError as exc:
        raise MaskFormatError(f"malformed mask header: {exc}") from exc
    if (w, h) != (img.width, img.height):
        raise MaskFormatError(f"mask is {w}x{h} but the image is {img.width}x{img.height}")
    body = data[nl + 1 :]
    if len(body) != w * h:
        raise MaskFormatError(f"mask body has {len(body)} bytes, expected {w * h}")
    grid = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if grid.max(initial=0) > 1:
        raise MaskFormatError("mask values must be 0 or 1")
    seg = SegmentationResult(tuple(nums[:3]), tuple(nums[3:]), grid.copy())
    try:
        seg.validate()
    except ValueError as exc:
        raise MaskFormatError(str(exc)) from exc
    return seg
