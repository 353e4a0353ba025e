"""Overlapped patch inference and Gaussian-weighted stitching.

A tile is covered by 256x256 windows at a 192-pixel stride (64 pixels of
overlap on interior edges, final window snapped to the tile edge). Each
window's 3-class probabilities are blended into the tile mosaic with an
unnormalized Gaussian weight kernel; normalization cancels in the weighted
mean. Accumulation is compensated (Kahan) so the result is independent of
patch order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .grids import GridError, Raster

PATCH_SIZE = 256
PATCH_STRIDE = 192  # 256 - 64 pixels of overlap
KERNEL_SIGMA = 0.25 * PATCH_SIZE

CLASS_BACKGROUND = 0
CLASS_FIELD = 1
CLASS_BOUNDARY = 2
CLASS_NODATA = 255

DEFAULT_BOA_OFFSET = -1000

# Fixed class scores emitted by the synthetic backend; each triple is
# binary-exact so per-pixel sums are exactly 1.
_SYNTH_BACKGROUND = (1.0, 0.0, 0.0)
_SYNTH_INTERIOR = (0.0625, 0.8125, 0.125)
_SYNTH_RIM = (0.125, 0.25, 0.625)
_SYNTH_NDVI_THRESHOLD = 0.5


class StitchError(ValueError):
    """Raised for malformed patch plans or missing patch predictions."""


@dataclass(frozen=True)
class PatchPlan:
    """Pixel windows covering a tile; each window is (row_off, col_off, h, w)."""

    windows: tuple[tuple[int, int, int, int], ...]
    tile_dims: tuple[int, int]


class SegmentationBackend(Protocol):
    """Maps an 8-channel 256x256 reflectance patch (two dates x 4 bands) to a
    256x256x3 probability map with per-pixel sums of 1 within 1e-5."""

    def __call__(self, patch: np.ndarray) -> np.ndarray: ...


def normalize_patch(
    dn: np.ndarray, boa_offset: int = DEFAULT_BOA_OFFSET, upper_clamp: float = 1.0
) -> np.ndarray:
    """Digital numbers to reflectance: clamp((DN + offset) / 10000, 0, upper)."""
    refl = (np.asarray(dn, dtype=np.float32) + np.float32(boa_offset)) / np.float32(10000.0)
    return np.clip(refl, 0.0, np.float32(upper_clamp))


def _axis_offsets(dim: int) -> list[int]:
    offsets = list(range(0, dim - PATCH_SIZE + 1, PATCH_STRIDE))
    if offsets[-1] != dim - PATCH_SIZE:
        offsets.append(dim - PATCH_SIZE)
    return offsets


def plan_patches(tile_dims: tuple[int, int]) -> PatchPlan:
    """Constant-stride windows with a final edge-snapped window per axis."""
    h, w = tile_dims
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise StitchError(
            f"tile {tile_dims} smaller than patch size {PATCH_SIZE}; pad before planning"
        )
    windows = tuple(
        (r, c, PATCH_SIZE, PATCH_SIZE) for r in _axis_offsets(h) for c in _axis_offsets(w)
    )
    return PatchPlan(windows=windows, tile_dims=(h, w))


def gaussian_kernel(size: int = PATCH_SIZE, sigma: float = KERNEL_SIGMA) -> np.ndarray:
    """Unnormalized 2D Gaussian, value 1 at the kernel center."""
    if size < 1 or sigma <= 0:
        raise ValueError(f"need size >= 1 and sigma > 0, got size={size} sigma={sigma}")
    mu = (size - 1) / 2.0
    ax = np.arange(size, dtype=np.float64) - mu
    sq = ax[:, None] ** 2 + ax[None, :] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma))


def stitch(
    patches: list[tuple[tuple[int, int, int, int], np.ndarray]],
    plan: PatchPlan,
    grid=None,
) -> Raster | np.ndarray:
    """Blend per-window probability maps into a tile probability mosaic.

    ``patches`` pairs each planned window with its (h, w, 3) probabilities.
    Output pixel values are the Gaussian-weighted mean over covering patches;
    per-pixel class sums stay within 1e-5 of 1. Returns a plain array when no
    grid is given.
    """
    h, w = plan.tile_dims
    provided = {tuple(win): p for win, p in patches}
    missing = [win for win in plan.windows if win not in provided]
    if missing:
        raise StitchError(f"missing probability maps for windows {missing[:3]}")

    acc = np.zeros((h, w, 3), dtype=np.float64)
    acc_comp = np.zeros((h, w, 3), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    wsum_comp = np.zeros((h, w), dtype=np.float64)
    kernel = gaussian_kernel()

    for win in plan.windows:
        r, c, ph, pw = win
        probs = np.asarray(provided[win], dtype=np.float64)
        if probs.shape != (ph, pw, 3):
            raise StitchError(f"window {win} expects probabilities of shape {(ph, pw, 3)}")
        k = kernel[:ph, :pw]
        _kahan_add(acc, acc_comp, (r, c), probs * k[:, :, None])
        _kahan_add(wsum, wsum_comp, (r, c), k)

    out = (acc / wsum[:, :, None]).astype(np.float32)
    if grid is None:
        return out
    return Raster(grid, out, np.nan)


def _kahan_add(total: np.ndarray, comp: np.ndarray, origin: tuple[int, int], term: np.ndarray):
    r, c = origin
    h, w = term.shape[:2]
    view_t = total[r : r + h, c : c + w]
    view_c = comp[r : r + h, c : c + w]
    y = term - view_c
    t = view_t + y
    view_c[:] = (t - view_t) - y
    view_t[:] = t


def argmax_classify(probs: Raster) -> Raster:
    """Per-pixel class labels; ties break toward the lowest class index.

    Nodata probability pixels map to the nodata label 255.
    """
    values = probs.values
    labels = np.argmax(values, axis=2).astype(np.uint8)
    if np.issubdtype(values.dtype, np.floating):
        labels[np.isnan(values).any(axis=2)] = CLASS_NODATA
    return Raster(probs.grid, labels, CLASS_NODATA)


def _ndvi(red: np.ndarray, nir: np.ndarray) -> np.ndarray:
    denom = nir + red
    with np.errstate(divide="ignore", invalid="ignore"):
        ndvi = np.where(denom > 0, (nir - red) / np.where(denom > 0, denom, 1.0), 0.0)
    return ndvi


def synthetic_backend(patch: np.ndarray) -> np.ndarray:
    """Deterministic rule-based reference backend.

    Channels are [B02, B03, B04, B08] for the first date then the second.
    Rule: per date, NDVI = (B08 - B04) / (B08 + B04) (0 where the denominator
    is not positive); take the per-pixel max over dates; pixels above 0.5 are
    vegetation. Pixels whose 3x3 neighborhood mixes vegetation and
    non-vegetation score as boundary, pure vegetation as field interior,
    everything else as background, using fixed class-score triples.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[2] != 8:
        raise StitchError(f"synthetic backend expects (h, w, 8) patches, got {patch.shape}")
    greenest = np.maximum(
        _ndvi(patch[:, :, 2], patch[:, :, 3]), _ndvi(patch[:, :, 6], patch[:, :, 7])
    )
    veg = greenest > _SYNTH_NDVI_THRESHOLD

    padded = np.pad(veg, 1, mode="edge")
    any_veg = np.zeros_like(veg)
    all_veg = np.ones_like(veg)
    for dr in range(3):
        for dc in range(3):
            win = padded[dr : dr + veg.shape[0], dc : dc + veg.shape[1]]
            any_veg |= win
            all_veg &= win
    rim = any_veg & ~all_veg

    out = np.empty(veg.shape + (3,), dtype=np.float32)
    out[:] = _SYNTH_BACKGROUND
    out[veg] = _SYNTH_INTERIOR
    out[rim] = _SYNTH_RIM
    return out


def constant_backend(triple: tuple[float, float, float]) -> SegmentationBackend:
    """Backend emitting one fixed probability triple everywhere (testing aid)."""

    def predict(patch: np.ndarray) -> np.ndarray:
        out = np.empty(patch.shape[:2] + (3,), dtype=np.float32)
        out[:] = triple
        return out

    return predict


def onnx_backend(model_path) -> SegmentationBackend:
    """Backend running a serialized ONNX segmentation model.

    Requires the optional ``onnxruntime`` package; the test suite and the
    bundled fixtures rely only on :func:`synthetic_backend`.
    """
    try:
        import onnxruntime  # noqa: F401
    except ImportError as exc:
        raise StitchError(
            "onnxruntime is not installed; install it to use file-based backends "
            "or use the synthetic backend"
        ) from exc
    session = onnxruntime.InferenceSession(str(model_path))
    input_name = session.get_inputs()[0].name

    def predict(patch: np.ndarray) -> np.ndarray:
        batch = np.transpose(patch, (2, 0, 1))[None].astype(np.float32)
        (probs,) = session.run(None, {input_name: batch})
        return np.transpose(probs[0], (1, 2, 0))

    return predict


def run_backend_over_plan(
    tile_stack: np.ndarray, plan: PatchPlan, backend: SegmentationBackend
) -> list[tuple[tuple[int, int, int, int], np.ndarray]]:
    """Apply a backend to every planned window of an (H, W, 8) tile stack."""
    if tile_stack.shape[:2] != plan.tile_dims:
        raise GridError(
            f"tile stack {tile_stack.shape[:2]} does not match plan dims {plan.tile_dims}"
        )
    out = []
    for win in plan.windows:
        r, c, h, w = win
        out.append((win, backend(tile_stack[r : r + h, c : c + w])))
    return out
