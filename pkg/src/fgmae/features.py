"""Reconstruction-target feature extractors.

All functions here are pure numpy: targets are constants of the loss and
never participate in the gradient tape. Images are (B, C, H, W) with the
last two axes as rows/columns; "horizontal" gradients run along columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# parameter blocks


@dataclass(frozen=True)
class BandMap:
    """Channel indices of the bands entering the normalized difference
    indices. Defaults follow Sentinel-2 L1C ordering (B8, B4, B3, B11)."""

    nir: int = 7
    red: int = 3
    green: int = 2
    swir: int = 10

    def validate(self, channels):
        idx = (self.nir, self.red, self.green, self.swir)
        if len(set(idx)) != 4 or any(i < 0 or i >= channels for i in idx):
            raise ValueError(f"invalid band map {idx} for {channels} channels")


@dataclass(frozen=True)
class HogParams:
    n_bins: int = 9
    cell_size: int = 8
    eps: float = 1e-10

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least 2 orientation bins")


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = 1.4
    kernel_size: int = 5
    low: float = 0.1
    high: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.low < self.high <= 1.0):
            raise ValueError("need 0 < low < high <= 1")


@dataclass(frozen=True)
class SiftParams:
    stride: int = 8
    support: int = 16
    spatial_bins: int = 4
    orientation_bins: int = 8
    clip: float = 0.2
    eps: float = 1e-10

    def __post_init__(self):
        if self.support % self.spatial_bins != 0:
            raise ValueError("descriptor support must divide evenly into spatial bins")

    @property
    def dims(self):
        return self.spatial_bins * self.spatial_bins * self.orientation_bins


VARIANTS = ("raw", "canny", "hog", "sift", "ndi", "hog+ndi")


@dataclass(frozen=True)
class FeatureSpec:
    """Which descriptor(s) a pretraining run reconstructs."""

    variant: str = "hog"
    hog: HogParams = field(default_factory=HogParams)
    canny: CannyParams = field(default_factory=CannyParams)
    sift: SiftParams = field(default_factory=SiftParams)
    bands: BandMap = field(default_factory=BandMap)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown feature variant {self.variant!r}")

    @property
    def dual_head(self):
        return self.variant == "hog+ndi"

    def out_dims(self, channels, patch_size):
        """Per-patch target width(s) for the given image geometry."""
        if self.variant in ("raw", "canny"):
            return patch_size * patch_size * channels
        if self.variant == "ndi":
            return patch_size * patch_size * 3
        if self.variant == "hog":
            return hog_patch_dims(channels, patch_size, self.hog)
        if self.variant == "sift":
            return sift_patch_dims(patch_size, self.sift)
        # hog+ndi: pair (hog_dims, ndi_dims)
        return (hog_patch_dims(channels, patch_size, self.hog),
                patch_size * patch_size * 3)


def hog_patch_dims(channels, patch_size, p):
    if patch_size % p.cell_size != 0:
        raise ValueError("patch size must be divisible by HOG cell size")
    cells = patch_size // p.cell_size
    return channels * cells * cells * p.n_bins


def sift_patch_dims(patch_size, p):
    if patch_size % p.stride != 0:
        raise ValueError("patch size must be divisible by SIFT grid stride")
    slots = patch_size // p.stride
    return slots * slots * p.dims


# ---------------------------------------------------------------------------
# helpers


def _check_image(image):
    image = np.asarray(image)
    if image.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) image, got shape {image.shape}")
    return image


def _conv_fixed_order(x, kernel):
    """2-D correlation with replicate borders, accumulating kernel taps in
    row-major order (bitwise-matched by the scalar-loop test oracles)."""
    kh, kw = kernel.shape
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="edge")
    out = np.zeros_like(x)
    h, w = x.shape
    for i in range(kh):
        for j in range(kw):
            out = out + kernel[i, j] * xp[i:i + h, j:j + w]
    return out


def _grad_xy(x):
    """Centered [-1, 0, 1] gradients with replicate borders."""
    gx = _conv_fixed_order(x, np.array([[-1.0, 0.0, 1.0]]))
    gy = _conv_fixed_order(x, np.array([[-1.0], [0.0], [1.0]]))
    return gx, gy


def grayscale_reduce(image):
    """Arithmetic mean over channels, keeping a singleton channel axis."""
    image = _check_image(image)
    return image.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# NDI


def compute_ndi(image, bands=BandMap()):
    """NDVI/NDWI/NDBI channels from a multispectral raster.

    Each index is (x - y) / (x + y) with the convention 0 when x + y == 0,
    so outputs always lie in [-1, 1] for nonnegative inputs.
    """
    image = _check_image(image)
    bands.validate(image.shape[1])
    nir = image[:, bands.nir]
    red = image[:, bands.red]
    green = image[:, bands.green]
    swir = image[:, bands.swir]
    ndvi = _safe_ratio(nir - red, nir + red)
    ndwi = _safe_ratio(green - nir, green + nir)
    ndbi = _safe_ratio(swir - nir, swir + nir)
    return np.stack([ndvi, ndwi, ndbi], axis=1)


def _safe_ratio(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


# ---------------------------------------------------------------------------
# HOG


def compute_hog(image, p=HogParams()):
    """Per-cell orientation histograms, one HOG field per image channel.

    Gradients come from [-1, 0, 1] filters with replicate borders; votes are
    magnitude-weighted with linear interpolation between the two adjacent
    unsigned orientation bins over [0, 180); each cell histogram is L2
    normalized. Returns (B, C, H/cell, W/cell, n_bins).
    """
    image = _check_image(image).astype(np.float64)
    b, c, h, w = image.shape
    if h % p.cell_size or w % p.cell_size:
        raise ValueError(f"image size {h}x{w} not divisible by cell size {p.cell_size}")
    ch, cw = h // p.cell_size, w // p.cell_size
    out = np.zeros((b, c, ch, cw, p.n_bins))
    bin_width = 180.0 / p.n_bins
    for bi in range(b):
        for ci in range(c):
            gx, gy = _grad_xy(image[bi, ci])
            mag = np.sqrt(gx * gx + gy * gy)
            ang = np.degrees(np.arctan2(gy, gx)) % 180.0
            pos = ang / bin_width
            lo = np.floor(pos).astype(np.int64) % p.n_bins
            hi = (lo + 1) % p.n_bins
            frac = pos - np.floor(pos)
            hist = np.zeros((ch, cw, p.n_bins))
            cell_r = np.arange(h) // p.cell_size
            cell_c = np.arange(w) // p.cell_size
            rr = np.repeat(cell_r, w)
            cc = np.tile(cell_c, h)
            np.add.at(hist, (rr, cc, lo.ravel()), (mag * (1.0 - frac)).ravel())
            np.add.at(hist, (rr, cc, hi.ravel()), (mag * frac).ravel())
            norm = np.sqrt((hist * hist).sum(axis=-1, keepdims=True))
            out[bi, ci] = hist / (norm + p.eps)
    return out


# ---------------------------------------------------------------------------
# Canny


def gaussian_kernel(sigma, size):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])

# neighbor offsets per 45-degree orientation sector
_NMS_NEIGHBORS = {
    0: ((0, -1), (0, 1)),
    1: ((-1, 1), (1, -1)),
    2: ((-1, 0), (1, 0)),
    3: ((-1, -1), (1, 1)),
}


def compute_canny(image, p=CannyParams()):
    """Binary edge maps: Gaussian blur, Sobel gradients, 4-direction
    non-maximum suppression, double threshold (fractions of the max
    magnitude) and 8-connected hysteresis. One edge map per channel."""
    image = _check_image(image).astype(np.float64)
    b, c, h, w = image.shape
    if h < p.kernel_size or w < p.kernel_size:
        raise ValueError("image smaller than the Gaussian kernel")
    out = np.zeros((b, c, h, w))
    kernel = gaussian_kernel(p.gaussian_sigma, p.kernel_size)
    for bi in range(b):
        for ci in range(c):
            out[bi, ci] = _canny_single(image[bi, ci], kernel, p)
    return out


def _canny_single(x, kernel, p):
    blurred = _conv_fixed_order(x, kernel)
    gx = _conv_fixed_order(blurred, SOBEL_X)
    gy = _conv_fixed_order(blurred, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((ang + 22.5) / 45.0).astype(np.int64)) % 4

    h, w = x.shape
    suppressed = np.zeros_like(mag)
    padded = np.pad(mag, 1, mode="constant")
    for s, ((r1, c1), (r2, c2)) in _NMS_NEIGHBORS.items():
        n1 = padded[1 + r1:1 + r1 + h, 1 + c1:1 + c1 + w]
        n2 = padded[1 + r2:1 + r2 + h, 1 + c2:1 + c2 + w]
        keep = (sector == s) & (mag >= n1) & (mag >= n2)
        suppressed[keep] = mag[keep]

    mmax = mag.max()
    if mmax == 0.0:
        return np.zeros_like(mag)
    high_t = p.high * mmax
    low_t = p.low * mmax
    strong = suppressed >= high_t
    weak = (suppressed >= low_t) & ~strong

    # grow strong edges into connected weak pixels (8-neighborhood)
    edges = strong.copy()
    frontier = list(zip(*np.nonzero(strong)))
    while frontier:
        r, c = frontier.pop()
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and weak[rr, cc] and not edges[rr, cc]:
                    edges[rr, cc] = True
                    frontier.append((rr, cc))
    return edges.astype(np.float64)


# ---------------------------------------------------------------------------
# dense SIFT


def sift_grid(h, w, p=SiftParams()):
    """Top-left corners of the descriptor support windows."""
    ys = np.arange(0, h - p.support + 1, p.stride)
    xs = np.arange(0, w - p.support + 1, p.stride)
    return ys, xs


def compute_dense_sift(image, p=SiftParams()):
    """128-d descriptors on a regular grid over the channel-mean grayscale.

    Per window: Gaussian-weighted gradient magnitudes vote into a 4x4 grid
    of 8-bin signed-orientation histograms, then L2 normalize, clip at
    ``p.clip`` and renormalize. Returns (B, G, 128) with G grid positions
    in row-major order.
    """
    image = _check_image(image).astype(np.float64)
    b, _, h, w = image.shape
    if h < p.support or w < p.support:
        raise ValueError("image smaller than the descriptor support")
    gray = grayscale_reduce(image)[:, 0]
    ys, xs = sift_grid(h, w, p)
    n_desc = len(ys) * len(xs)
    out = np.zeros((b, n_desc, p.dims))

    cell = p.support // p.spatial_bins
    ax = np.arange(p.support) - (p.support - 1) / 2.0
    sigma = p.support / 2.0
    gwin = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    bin_width = 360.0 / p.orientation_bins
    spatial_r = np.arange(p.support) // cell
    spatial_c = np.arange(p.support) // cell

    for bi in range(b):
        gx, gy = _grad_xy(gray[bi])
        mag = np.sqrt(gx * gx + gy * gy)
        ang = np.degrees(np.arctan2(gy, gx)) % 360.0
        k = 0
        for y0 in ys:
            for x0 in xs:
                m = mag[y0:y0 + p.support, x0:x0 + p.support] * gwin
                a = ang[y0:y0 + p.support, x0:x0 + p.support]
                pos = a / bin_width
                lo = np.floor(pos).astype(np.int64) % p.orientation_bins
                hi = (lo + 1) % p.orientation_bins
                frac = pos - np.floor(pos)
                hist = np.zeros((p.spatial_bins, p.spatial_bins, p.orientation_bins))
                rr = np.repeat(spatial_r, p.support)
                cc = np.tile(spatial_c, p.support)
                np.add.at(hist, (rr, cc, lo.ravel()), (m * (1.0 - frac)).ravel())
                np.add.at(hist, (rr, cc, hi.ravel()), (m * frac).ravel())
                vec = hist.ravel()
                norm = math.sqrt(float(vec @ vec))
                if norm > p.eps:
                    vec = vec / norm
                    vec = np.minimum(vec, p.clip)
                    norm2 = math.sqrt(float(vec @ vec))
                    if norm2 > p.eps:
                        vec = vec / norm2
                out[bi, k] = vec
                k += 1
    return out


# ---------------------------------------------------------------------------
# target assembly


def patchify_array(image, patch_size):
    """(B, C, H, W) -> (B, L, patch² · C); channel-major then row-major
    spatial order inside each flattened patch."""
    image = _check_image(image)
    b, c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_size * patch_size)


def unpatchify_array(patches, channels, h, w, patch_size):
    """Inverse of :func:`patchify_array`."""
    patches = np.asarray(patches)
    b, l, _ = patches.shape
    gh, gw = h // patch_size, w // patch_size
    if l != gh * gw:
        raise ValueError("patch count inconsistent with image geometry")
    x = patches.reshape(b, gh, gw, channels, patch_size, patch_size)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, h, w)


def _per_patch_normalize(patches, eps=1e-6):
    mu = patches.mean(axis=-1, keepdims=True)
    sd = patches.std(axis=-1, keepdims=True)
    return (patches - mu) / (sd + eps)


@dataclass
class TargetTensor:
    """Per-patch flattened reconstruction targets."""

    values: np.ndarray  # (B, L, K_out)
    normalized: bool


def assemble_targets(image, spec, patch_size):
    """Targets for one batch; ``hog+ndi`` yields a (hog, ndi) pair."""
    image = _check_image(image)
    if spec.variant == "raw":
        return TargetTensor(_per_patch_normalize(patchify_array(image, patch_size)), True)
    if spec.variant == "canny":
        edges = compute_canny(image, spec.canny)
        return TargetTensor(_per_patch_normalize(patchify_array(edges, patch_size)), True)
    if spec.variant == "ndi":
        return _ndi_targets(image, spec, patch_size)
    if spec.variant == "hog":
        return _hog_targets(image, spec, patch_size)
    if spec.variant == "sift":
        return _sift_targets(image, spec, patch_size)
    if spec.variant == "hog+ndi":
        return (_hog_targets(image, spec, patch_size),
                _ndi_targets(image, spec, patch_size))
    raise ValueError(f"unknown feature variant {spec.variant!r}")


def _ndi_targets(image, spec, patch_size):
    ndi = compute_ndi(image, spec.bands)
    # already bounded in [-1, 1]; no per-patch normalization
    return TargetTensor(patchify_array(ndi, patch_size), False)


def _hog_targets(image, spec, patch_size):
    hist = compute_hog(image, spec.hog)  # (B, C, CH, CW, bins)
    b, c, ch, cw, nb = hist.shape
    cells = patch_size // spec.hog.cell_size
    gh, gw = ch // cells, cw // cells
    x = hist.reshape(b, c, gh, cells, gw, cells, nb)
    # per patch: channel-major, then cell rows, cell cols, bins
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return TargetTensor(x.reshape(b, gh * gw, c * cells * cells * nb), False)


def _sift_targets(image, spec, patch_size):
    p = spec.sift
    descr = compute_dense_sift(image, p)  # (B, G, dims)
    b, _, h, w = image.shape
    ys, xs = sift_grid(h, w, p)
    gh, gw = h // patch_size, w // patch_size
    slots = patch_size // p.stride
    k_out = slots * slots * p.dims
    out = np.zeros((b, gh * gw, k_out))
    center_off = p.support // 2
    # descriptor centers lie at corner + support/2; a patch owns the fixed
    # slot positions congruent to that offset, zeros where the grid has no
    # descriptor (image border)
    for pr in range(gh):
        for pc in range(gw):
            patch = pr * gw + pc
            for sr in range(slots):
                for sc in range(slots):
                    cy = pr * patch_size + sr * p.stride + center_off % p.stride
                    cx = pc * patch_size + sc * p.stride + center_off % p.stride
                    iy = (cy - center_off) // p.stride
                    ix = (cx - center_off) // p.stride
                    if 0 <= iy < len(ys) and 0 <= ix < len(xs):
                        slot = (sr * slots + sc)
                        g = iy * len(xs) + ix
                        out[:, patch, slot * p.dims:(slot + 1) * p.dims] = descr[:, g]
    return TargetTensor(out, False)
