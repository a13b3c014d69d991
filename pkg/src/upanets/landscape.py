"""Loss and top-1-error landscapes around a trained model.

Two random directions are drawn and filter-normalized (each conv filter
slice rescaled to the norm of the matching model slice; other tensors
rescaled whole), then the model is evaluated on a steps x steps grid of
parameter offsets alpha * d1 + beta * d2 over [-r, r]^2. Batch-norm runs in
eval mode throughout, so sampling never mutates model state, and the base
parameters are restored bit-exactly afterwards. Min-max scaling maps a grid
onto [0, 1] so different models become comparable.

Any object with `named_parameters()` and `loss_and_error(eval_set)` can be
sampled; quadratic toy models are used as oracles in the tests.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

DEFAULT_STEPS = 50
DEFAULT_RANGE = 1.0
PAPER_COMPARISON_RANGE = 0.0375


@dataclass
class Direction:
    """One perturbation per model parameter, keyed by parameter name."""

    parts: dict
    seed: int


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    loss: np.ndarray          # steps x steps, loss[i, j] at (alphas[i], betas[j])
    top1_error: np.ndarray
    range_r: float
    nonfinite_count: int = 0
    scaled: bool = False
    scaled_loss: np.ndarray = None
    scaled_top1: np.ndarray = None


def grid_coords(r, steps):
    """Evenly spaced offsets over [-r, r]; odd step counts hit 0 exactly."""
    coords = np.linspace(-r, r, steps)
    if steps % 2 == 1:
        coords[steps // 2] = 0.0
    return coords


def _filter_normalize(direction, reference):
    """Scale `direction` so its slices match the norms of `reference`."""
    if reference.ndim == 4:  # conv kernels: per output-filter slice
        out = np.empty_like(direction)
        for i in range(reference.shape[0]):
            ref_norm = np.linalg.norm(reference[i])
            dir_norm = np.linalg.norm(direction[i])
            out[i] = 0.0 if ref_norm == 0 or dir_norm == 0 else direction[i] * (ref_norm / dir_norm)
        return out
    ref_norm = np.linalg.norm(reference)
    dir_norm = np.linalg.norm(direction)
    if ref_norm == 0 or dir_norm == 0:
        return np.zeros_like(direction)
    return direction * (ref_norm / dir_norm)


def make_directions(model, seed):
    """Two independent, filter-normalized standard-normal directions."""
    rng = np.random.default_rng(seed)
    directions = []
    for _ in range(2):
        parts = {}
        for name, p in model.named_parameters():
            raw = rng.standard_normal(p.shape).astype(p.data.dtype)
            parts[name] = _filter_normalize(raw, p.data)
        directions.append(Direction(parts=parts, seed=seed))
    return directions[0], directions[1]


def sample_grid(model, eval_set, d1, d2, r, steps=DEFAULT_STEPS):
    """Evaluate the model at every grid offset; parameters are restored
    bit-exactly, non-finite losses are recorded and counted, never fatal."""
    if steps < 2:
        raise ConfigError(f"need steps >= 2, got {steps}")
    if r < 0:
        raise ConfigError(f"need range >= 0, got {r}")
    named = list(model.named_parameters())
    base = {name: p.data.copy() for name, p in named}
    alphas = grid_coords(r, steps)
    betas = grid_coords(r, steps)
    loss = np.zeros((steps, steps))
    top1_error = np.zeros((steps, steps))
    nonfinite = 0
    try:
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                for name, p in named:
                    p.data = base[name] + a * d1.parts[name] + b * d2.parts[name]
                try:
                    cell_loss, cell_err = model.loss_and_error(eval_set)
                except (NumericError, FloatingPointError, OverflowError):
                    cell_loss, cell_err = float("nan"), float("nan")
                loss[i, j] = cell_loss
                top1_error[i, j] = cell_err
                if not np.isfinite(cell_loss):
                    nonfinite += 1
    finally:
        for name, p in named:
            p.data = base[name]
    return LandscapeGrid(alphas=alphas, betas=betas, loss=loss, top1_error=top1_error,
                         range_r=r, nonfinite_count=nonfinite)


def _minmax(values):
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise NumericError("min-max scaling needs at least one finite grid value")
    filled = np.where(np.isfinite(values), values, finite.max())
    lo, hi = filled.min(), filled.max()
    if hi == lo:
        return np.zeros_like(filled)
    return (filled - lo) / (hi - lo)


def minmax_scale(grid: LandscapeGrid):
    """Fill the scaled views: non-finite cells become the finite maximum,
    then values map onto [0, 1]; constant grids map to all zeros."""
    grid.scaled_loss = _minmax(grid.loss)
    grid.scaled_top1 = _minmax(grid.top1_error)
    grid.scaled = True
    return grid


def find_visualizable_range(model, eval_set, candidate_ranges, seed=0):
    """Largest candidate whose coarse 5x5 probe grid stays finite; falls back
    to the smallest candidate with a warning. Candidates must be sorted in
    descending order."""
    candidates = list(candidate_ranges)
    if not candidates:
        raise ConfigError("need at least one candidate range")
    if any(a < b for a, b in zip(candidates, candidates[1:])):
        raise ConfigError("candidate ranges must be sorted in descending order")
    d1, d2 = make_directions(model, seed)
    for r in candidates:
        probe = sample_grid(model, eval_set, d1, d2, r, steps=5)
        if probe.nonfinite_count == 0:
            return r
    warnings.warn(f"no candidate range gave an all-finite probe grid; "
                  f"falling back to {candidates[-1]}")
    return candidates[-1]


def grid_to_csv(grid: LandscapeGrid):
    """CSV rows in row-major (alpha, beta) order; scaled columns are blank
    until minmax_scale has run."""
    lines = ["alpha,beta,loss,top1_error,scaled_loss,scaled_top1"]
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            if grid.scaled:
                tail = f"{grid.scaled_loss[i, j]!r},{grid.scaled_top1[i, j]!r}"
            else:
                tail = ","
            lines.append(f"{a!r},{b!r},{grid.loss[i, j]!r},{grid.top1_error[i, j]!r},{tail}")
    return "\n".join(lines) + "\n"


def write_pgm(path, values):
    """8-bit binary portable graymap, one pixel per grid cell; values are
    expected in [0, 1] (use the scaled views)."""
    arr = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64), nan=1.0), 0.0, 1.0)
    pixels = np.round(arr * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
