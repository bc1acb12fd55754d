"""Dense optical flow by polynomial expansion (Farnebäck) and flow colourisation.

Each neighbourhood of a grey frame is approximated by a quadratic
``f(x) ~ x^T A x + b^T x + c``. If the next frame is the previous one
translated by ``d`` then ``b2 = b1 - 2 A d``, so ``d`` follows from matching
coefficients. Estimates are averaged over a Gaussian window, refined
iteratively and propagated coarse-to-fine through an image pyramid.

Coordinates are (x, y) = (column, row); ``u`` is horizontal displacement and
``v`` vertical, both in pixels per frame, with ``next(p + d(p)) ~ prev(p)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage

from .imaging import bilinear_resize, to_gray

# intensities are rescaled to 0..255 internally so the solver regulariser
# keeps the magnitude it has in 8-bit implementations
_INTENSITY_SCALE = 255.0
_DET_EPSILON = 1e-3


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise ValueError("pyramid_levels and iterations must be positive")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError(f"pyramid_scale must lie in (0, 1), got {self.pyramid_scale}")
        for name in ("window_size", "poly_n"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {value}")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive")

    def digest(self) -> str:
        """Short stable hash used to key the flow cache."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class PolyCoeffs:
    """Per-pixel quadratic fit: A (H, W, 2, 2) symmetric, b (H, W, 2), c (H, W)."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def as_array(self) -> np.ndarray:
        """(H, W, 2) array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, uv: np.ndarray) -> "FlowField":
        return cls(np.ascontiguousarray(uv[..., 0]), np.ascontiguousarray(uv[..., 1]))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@lru_cache(maxsize=16)
def _dual_kernels(poly_n: int, poly_sigma: float) -> np.ndarray:
    # rows of (B^T W B)^-1 B^T W for basis [1, x, y, x^2, y^2, xy] under a Gaussian applicability
    radius = poly_n // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    gauss = np.exp(-offsets ** 2 / (2.0 * poly_sigma ** 2))
    ys, xs = np.meshgrid(offsets, offsets, indexing="ij")
    weights = np.outer(gauss, gauss).reshape(-1)
    x, y = xs.reshape(-1), ys.reshape(-1)
    basis = np.stack([np.ones_like(x), x, y, x * x, y * y, x * y], axis=1)
    gram = basis.T @ (weights[:, None] * basis)
    dual = np.linalg.solve(gram, (basis * weights[:, None]).T)
    return dual.reshape(6, poly_n, poly_n)


def polynomial_expansion(frame: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> PolyCoeffs:
    """Gaussian-weighted least-squares quadratic fit around every pixel.

    Pixels whose neighbourhood leaves the frame copy the nearest interior fit.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError(f"expected a 2-d grey frame, got shape {frame.shape}")
    height, width = frame.shape
    if height < poly_n or width < poly_n:
        raise ValueError(f"frame {height}x{width} smaller than poly_n={poly_n}")
    radius = poly_n // 2
    dual = _dual_kernels(poly_n, float(poly_sigma))
    coeffs = []
    for kernel in dual:
        full = ndimage.correlate(frame, kernel, mode="nearest")
        if radius:
            interior = full[radius:height - radius, radius:width - radius]
            full = np.pad(interior, radius, mode="edge")
        coeffs.append(full)
    r1, rx, ry, rxx, ryy, rxy = coeffs
    A = np.empty((height, width, 2, 2))
    A[..., 0, 0] = rxx
    A[..., 1, 1] = ryy
    A[..., 0, 1] = A[..., 1, 0] = rxy / 2.0
    return PolyCoeffs(A=A, b=np.stack([rx, ry], axis=-1), c=r1)


def _window_sigma(window_size: int) -> float:
    return 0.3 * (window_size / 2.0 - 1.0) + 0.8


def _confidence(coords, height: int, width: int, border: int) -> np.ndarray:
    rows, cols = coords
    inside = ((rows >= border) & (rows <= height - 1 - border)
              & (cols >= border) & (cols <= width - 1 - border))
    return inside.astype(np.float64)


def _refine(p1: PolyCoeffs, p2: PolyCoeffs, flow: np.ndarray, window_size: int,
            border: int) -> np.ndarray:
    height, width = flow.shape[:2]
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    coords = [rows + flow[..., 1], cols + flow[..., 0]]

    def warp(plane):
        return ndimage.map_coordinates(plane, coords, order=1, mode="nearest")

    a11 = (p1.A[..., 0, 0] + warp(p2.A[..., 0, 0])) / 2.0
    a12 = (p1.A[..., 0, 1] + warp(p2.A[..., 0, 1])) / 2.0
    a22 = (p1.A[..., 1, 1] + warp(p2.A[..., 1, 1])) / 2.0
    db1 = -0.5 * (warp(p2.b[..., 0]) - p1.b[..., 0]) + a11 * flow[..., 0] + a12 * flow[..., 1]
    db2 = -0.5 * (warp(p2.b[..., 1]) - p1.b[..., 1]) + a12 * flow[..., 0] + a22 * flow[..., 1]

    # pixels that warp outside the frame, or whose fit was truncated, carry no evidence
    w = _confidence(coords, height, width, border) * _confidence((rows, cols), height, width, border)
    a11, a12, a22, db1, db2 = (w * a11, w * a12, w * a22, w * db1, w * db2)

    # normal equations A^T A d = A^T db, averaged over the window
    sigma = _window_sigma(window_size)
    truncate = (window_size // 2) / sigma

    def blur(plane):
        return ndimage.gaussian_filter(plane, sigma, mode="nearest", truncate=truncate)

    g11 = blur(a11 * a11 + a12 * a12)
    g12 = blur(a11 * a12 + a12 * a22)
    g22 = blur(a12 * a12 + a22 * a22)
    h1 = blur(a11 * db1 + a12 * db2)
    h2 = blur(a12 * db1 + a22 * db2)
    det = g11 * g22 - g12 * g12 + _DET_EPSILON
    out = np.empty_like(flow)
    out[..., 0] = (g22 * h1 - g12 * h2) / det
    out[..., 1] = (g11 * h2 - g12 * h1) / det
    return out


def _pyramid_shapes(height: int, width: int, params: FlowParams) -> list[tuple[int, int]]:
    shapes = [(height, width)]
    for level in range(1, params.pyramid_levels):
        factor = params.pyramid_scale ** level
        h, w = int(round(height * factor)), int(round(width * factor))
        if min(h, w) < max(params.poly_n, 2 * (params.poly_n // 2) + 4):
            break
        shapes.append((h, w))
    return shapes


def _downsample(frame: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if shape == frame.shape:
        return frame
    ratio = frame.shape[0] / shape[0]
    smoothed = ndimage.gaussian_filter(frame, (ratio - 1.0) * 0.5, mode="nearest")
    return bilinear_resize(smoothed, *shape)


def estimate_flow(prev: np.ndarray, next: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Dense displacement field from ``prev`` to ``next``.

    Frames may be grey (H, W) or colour (H, W, 3); colour is reduced by luma.
    """
    prev, next = np.asarray(prev), np.asarray(next)
    if prev.shape[:2] != next.shape[:2]:
        raise ValueError(f"frame extents differ: {prev.shape[:2]} vs {next.shape[:2]}")
    f1 = to_gray(prev).astype(np.float64) * _INTENSITY_SCALE
    f2 = to_gray(next).astype(np.float64) * _INTENSITY_SCALE
    shapes = _pyramid_shapes(*f1.shape, params)
    flow = None
    for shape in reversed(shapes):
        if flow is None:
            flow = np.zeros(shape + (2,))
        else:
            scale_y = shape[0] / flow.shape[0]
            scale_x = shape[1] / flow.shape[1]
            flow = bilinear_resize(flow, *shape)
            flow[..., 0] *= scale_x
            flow[..., 1] *= scale_y
        p1 = polynomial_expansion(_downsample(f1, shape), params.poly_n, params.poly_sigma)
        p2 = polynomial_expansion(_downsample(f2, shape), params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            flow = _refine(p1, p2, flow, params.window_size, params.poly_n // 2)
    flow = flow.astype(np.float32)
    return FlowField.from_array(flow)


def flow_to_color(flow: FlowField) -> np.ndarray:
    """Hue from direction, value from magnitude (normalised by the field maximum)."""
    magnitude = flow.magnitude()
    peak = float(magnitude.max()) if magnitude.size else 0.0
    hue = (np.degrees(np.arctan2(flow.v, flow.u)) % 360.0) / 360.0
    value = magnitude / peak if peak > 0 else np.zeros_like(magnitude)
    hsv = np.stack([hue, np.ones_like(hue), value], axis=-1)
    return hsv_to_rgb(hsv).astype(np.float32)
