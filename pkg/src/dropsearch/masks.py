"""Structured dropout masks for ConvNet and Transformer activations.

Masks are float arrays of 0/1 with the same shape as the activation they
regularise: ``(N, H, W, C)`` for convolutional maps and ``(N, T, C)`` for
token sequences. :func:`drop` applies a mask with the rescaling that keeps
the mean of the scaled mask at exactly one.

``rate`` is the probability that each tiled rectangle (ConvNet) or each
affected run/token (Transformer) actually fires; geometry decides *where*
units may be dropped, ``rate`` decides *how often*.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, mul
from .vocab import CONV_VALUES, TRANSFORMER_VALUES


@dataclass(frozen=True)
class ConvPatternSpec:
    size_k: int = 0
    stride: int = 1
    repeat: int = 1
    share_c: bool = False
    residual: bool = False
    rotate_max: int = 0
    shear_x_max: float = 0.0
    shear_y_max: float = 0.0

    def __post_init__(self):
        for slot, value in (("size", self.size_k), ("stride", self.stride), ("repeat", self.repeat),
                            ("share_c", self.share_c), ("residual", self.residual),
                            ("rotate", self.rotate_max), ("shear_x", self.shear_x_max),
                            ("shear_y", self.shear_y_max)):
            if value not in CONV_VALUES[slot] or (type(value) is bool) != (slot in ("share_c", "residual")):
                raise ContractError(f"ConvPatternSpec: {slot}={value!r} not in vocabulary")

    def side(self, extent: int) -> int:
        """Rectangle side along a spatial axis of length ``extent``."""
        return self.size_k * (extent // 5)

    @property
    def is_identity(self) -> bool:
        return self.size_k == 0


@dataclass(frozen=True)
class TransformerPatternSpec:
    size: int = 0
    stride: int = 0
    share_t: bool = False
    share_c: bool = False

    def __post_init__(self):
        for slot, value in (("size", self.size), ("stride", self.stride),
                            ("share_t", self.share_t), ("share_c", self.share_c)):
            if value not in TRANSFORMER_VALUES[slot] or (type(value) is bool) != slot.startswith("share"):
                raise ContractError(f"TransformerPatternSpec: {slot}={value!r} not in vocabulary")

    @property
    def is_identity(self) -> bool:
        return self.size == 0


@dataclass(frozen=True)
class RateSchedule:
    """Dropout rate rising linearly from 0 at layer 0 to ``final_rate``."""

    final_rate: float
    n_layers: int

    def __post_init__(self):
        if not 0.0 <= self.final_rate <= 1.0:
            raise ContractError(f"final_rate must lie in [0, 1], got {self.final_rate}")
        if self.n_layers < 1:
            raise ContractError(f"n_layers must be positive, got {self.n_layers}")

    def rate(self, layer: int) -> float:
        return rate_at_layer(self, layer)


def rate_at_layer(schedule: RateSchedule, layer: int) -> float:
    if not 0 <= layer < schedule.n_layers:
        raise ContractError(f"layer {layer} out of range [0, {schedule.n_layers})")
    if layer == schedule.n_layers - 1:
        return schedule.final_rate
    return schedule.final_rate * layer / (schedule.n_layers - 1)


@dataclass
class MaskStats:
    """Counters an evaluator threads through :func:`drop`."""

    applied: int = 0
    degenerate: int = 0


def scaled_mask(m: np.ndarray) -> np.ndarray:
    total = m.sum()
    if total == 0:
        raise ContractError("scaled_mask: mask has no retained units")
    return m * (m.size / total)


def drop(h, m: np.ndarray, stats: MaskStats | None = None):
    """Return ``h * (Size(m) / Sum(m)) * m``.

    An all-zero mask leaves ``h`` untouched and is counted as degenerate in
    ``stats``; an all-ones mask returns ``h`` itself.
    """
    m = np.asarray(m)
    if tuple(h.shape) != m.shape:
        raise ShapeError("drop", h.shape, m.shape)
    if stats is not None:
        stats.applied += 1
    total = m.sum()
    if total == 0:
        if stats is not None:
            stats.degenerate += 1
        return h
    if total == m.size:
        return h
    scale = m * (m.size / total)
    if isinstance(h, Tensor):
        return mul(h, scale.astype(h.dtype))
    return np.asarray(h) * scale


# -- geometry --------------------------------------------------------------------------

def _round_half_away(v: np.ndarray) -> np.ndarray:
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def _affine(y: np.ndarray, x: np.ndarray, angle_deg, shear_x, shear_y, height: int, width: int):
    """Rotate about the grid centre, then shear; returns rounded integer coords."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = y - cy, x - cx
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rx, ry = c * rx - s * ry, s * rx + c * ry
    rx, ry = rx + shear_x * ry, ry + shear_y * rx
    return _round_half_away(ry + cy), _round_half_away(rx + cx)


def apply_transform(coords, angle: float, shear_x: float, shear_y: float,
                    grid: tuple[int, int]) -> np.ndarray:
    """Deterministic rotate-then-shear of ``(K, 2)`` (row, col) cells.

    Out-of-grid results are dropped and duplicates merged, so the output
    never has more cells than the input.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    height, width = grid
    if coords.size and (coords.min() < 0 or (coords[:, 0] >= height).any() or (coords[:, 1] >= width).any()):
        raise ContractError("apply_transform: coordinates outside the grid")
    ny, nx = _affine(coords[:, 0].astype(float), coords[:, 1].astype(float),
                     angle, shear_x, shear_y, height, width)
    keep = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
    out = np.stack([ny[keep], nx[keep]], axis=1)
    return np.unique(out, axis=0) if len(out) else out.reshape(0, 2)


def transform_pattern(coords, rotate_max: float, shear_x_max: float, shear_y_max: float,
                      rng: np.random.Generator, grid: tuple[int, int]) -> np.ndarray:
    """Rotate by U(-rotate_max, rotate_max) degrees, then shear by U(-max, max) per axis."""
    angle = rng.uniform(-rotate_max, rotate_max)
    shx = rng.uniform(-shear_x_max, shear_x_max)
    shy = rng.uniform(-shear_y_max, shear_y_max)
    return apply_transform(coords, angle, shx, shy, grid)


def sample_conv_mask(spec: ConvPatternSpec, shape, rate: float, rng: np.random.Generator,
                     offset: tuple[int, int] | None = None) -> np.ndarray:
    """Draw a binary mask of ``shape`` = (N, H, W, C) from a ConvNet pattern.

    Per independent slice (one per example, times C unless ``share_c``):
    sample a tiling offset uniformly over the grid (or use ``offset``), lay
    out up to ``repeat`` rectangles, let each fire with probability ``rate``,
    and rotate/shear the dropped cells about the grid centre.
    """
    if len(shape) != 4 or min(shape) < 1:
        raise ContractError(f"sample_conv_mask: expected (N, H, W, C), got {tuple(shape)}")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"rate must lie in [0, 1], got {rate}")
    n, height, width, channels = shape
    side_h, side_w = spec.side(height), spec.side(width)
    if side_h == 0 or side_w == 0 or rate == 0.0:
        return np.ones(shape)

    slices = n * (1 if spec.share_c else channels)
    py, px = side_h + spec.stride, side_w + spec.stride
    ny, nx = math.ceil(height / py), math.ceil(width / px)
    if offset is None:
        oy = rng.integers(0, height, slices)
        ox = rng.integers(0, width, slices)
    else:
        oy = np.full(slices, offset[0])
        ox = np.full(slices, offset[1])
    origin_y = oy[:, None] + np.arange(ny) * py
    origin_x = ox[:, None] + np.arange(nx) * px
    laid = ((origin_y < height)[:, :, None] & (origin_x < width)[:, None, :]).reshape(slices, -1)
    laid &= np.cumsum(laid, axis=1) <= spec.repeat
    fired = laid & (rng.random(laid.shape) < rate)

    angle = rng.uniform(-spec.rotate_max, spec.rotate_max, slices)
    shx = rng.uniform(-spec.shear_x_max, spec.shear_x_max, slices)
    shy = rng.uniform(-spec.shear_y_max, spec.shear_y_max, slices)

    s_idx, r_idx = np.nonzero(fired)
    dy, dx = np.meshgrid(np.arange(side_h), np.arange(side_w), indexing="ij")
    cy = origin_y[s_idx, r_idx // nx][:, None] + dy.ravel()[None, :]
    cx = origin_x[s_idx, r_idx % nx][:, None] + dx.ravel()[None, :]
    cs = np.broadcast_to(s_idx[:, None], cy.shape)
    inside = (cy < height) & (cx < width)
    cs, cy, cx = cs[inside], cy[inside], cx[inside]
    if spec.rotate_max or spec.shear_x_max or spec.shear_y_max:
        cy, cx = _affine(cy.astype(float), cx.astype(float), angle[cs], shx[cs], shy[cs], height, width)
        keep = (cy >= 0) & (cy < height) & (cx >= 0) & (cx < width)
        cs, cy, cx = cs[keep], cy[keep], cx[keep]

    flat = np.ones((slices, height * width))
    flat[cs, cy * width + cx] = 0.0
    if spec.share_c:
        return np.repeat(flat.reshape(n, height, width, 1), channels, axis=3)
    return flat.reshape(n, channels, height, width).transpose(0, 2, 3, 1).copy()


def sample_transformer_mask(spec: TransformerPatternSpec, shape, rate: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Draw a binary mask of ``shape`` = (N, T, C) from a Transformer pattern.

    Along T the pattern alternates ``size`` affected tokens with ``stride``
    skipped ones from a per-example random phase; a run at least as long as
    the sequence covers it whole. Inside a run, ``share_t`` reuses one draw
    for every token; ``share_c`` reuses one draw for every channel.
    """
    if len(shape) != 3 or min(shape) < 1:
        raise ContractError(f"sample_transformer_mask: expected (N, T, C), got {tuple(shape)}")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"rate must lie in [0, 1], got {rate}")
    n, steps, channels = shape
    if spec.size == 0 or rate == 0.0:
        return np.ones(shape)
    width = 1 if spec.share_c else channels
    t = np.arange(steps)
    if spec.size >= steps:
        affected = np.ones((n, steps), dtype=bool)
        run = np.zeros((n, steps), dtype=np.int64)
        n_runs = 1
    else:
        period = spec.size + spec.stride
        phase = rng.integers(0, period, n)
        pos = t[None, :] + phase[:, None]
        affected = pos % period < spec.size
        run = pos // period
        n_runs = int(run.max()) + 1
    if spec.share_t:
        fire = rng.random((n, n_runs, width)) < rate
        dropped = np.take_along_axis(fire, run[:, :, None], axis=1)
    else:
        dropped = rng.random((n, steps, width)) < rate
    dropped &= affected[:, :, None]
    mask = 1.0 - dropped.astype(np.float64)
    if spec.share_c:
        mask = np.repeat(mask, channels, axis=2)
    return mask


def write_pgm(path, plane: np.ndarray) -> None:
    """Write a 2-D 0/1 plane as an ASCII (P2) greymap; kept units are white."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ContractError(f"write_pgm: expected a 2-D plane, got shape {plane.shape}")
    pixels = np.where(plane > 0, 255, 0).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in pixels)
    Path(path).write_text(f"P2\n{plane.shape[1]} {plane.shape[0]}\n255\n{rows}\n")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ContractError(f"{path}: not a P2 greymap")
    width, height = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + width * height], dtype=int).reshape(height, width)
