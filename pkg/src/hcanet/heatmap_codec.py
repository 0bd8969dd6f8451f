"""Conversions between keypoint coordinates and heatmap / probability maps.

Coordinates are (row, col) pixel positions throughout. A disc that is not
visible carries the sentinel coordinate (-1, -1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, InputError, NumericError

INVISIBLE_COORD = (-1.0, -1.0)


@dataclass
class KeypointSet:
    """A fixed-length set of (row, col) keypoints with per-point visibility.

    ``spacing_mm`` is the physical size of one pixel (isotropic) in the image
    these coordinates refer to.
    """

    coords: np.ndarray
    visible: np.ndarray
    spacing_mm: float = 1.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if self.coords.shape[0] != self.visible.shape[0]:
            raise InputError(
                f"coords ({self.coords.shape[0]}) and visible "
                f"({self.visible.shape[0]}) lengths differ"
            )
        if not self.spacing_mm > 0:
            raise ConfigurationError(f"spacing_mm must be > 0, got {self.spacing_mm}")

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())


@dataclass
class HeatmapStack:
    """Dense (V, H, W) stack of per-disc maps, either targets or predictions.

    Target channels hold a Gaussian with peak 1.0 at the nearest pixel to the
    keypoint (all-zero for invisible discs); prediction channels are raw,
    unbounded network activations.
    """

    values: torch.Tensor
    role: str = "prediction"

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InputError(f"expected (V, H, W) values, got shape {tuple(self.values.shape)}")
        if self.role not in ("target", "prediction"):
            raise ConfigurationError(f"role must be 'target' or 'prediction', got {self.role!r}")

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]

    @property
    def spatial_size(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


@dataclass
class ProbabilityMap:
    """(V, H, W) stack where each channel is a positional distribution summing to 1."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InputError(f"expected (V, H, W) values, got shape {tuple(self.values.shape)}")

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]


def encode_heatmaps(
    keypoints: KeypointSet,
    height: int,
    width: int,
    sigma: float = 2.0,
    dtype: torch.dtype = torch.float32,
) -> HeatmapStack:
    """Render one Gaussian target channel per keypoint.

    Channel i holds exp(-||p - c_i||^2 / (2 sigma^2)) for every pixel p,
    renormalized so the maximum (the pixel nearest c_i) is exactly 1.0.
    Invisible channels are all-zero.
    """
    if height <= 0 or width <= 0:
        raise ConfigurationError(f"height/width must be positive, got {height}x{width}")
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")

    rows = torch.arange(height, dtype=torch.float64).view(height, 1)
    cols = torch.arange(width, dtype=torch.float64).view(1, width)
    out = torch.zeros(len(keypoints), height, width, dtype=dtype)
    for i, ((r, c), vis) in enumerate(zip(keypoints.coords, keypoints.visible)):
        if not vis:
            continue
        if not (0.0 <= r <= height - 1 and 0.0 <= c <= width - 1):
            raise InputError(
                f"visible keypoint {i} at ({r}, {c}) outside [0, {height - 1}] x [0, {width - 1}]"
            )
        d2 = (rows - r) ** 2 + (cols - c) ** 2
        g = torch.exp(-d2 / (2.0 * sigma * sigma))
        out[i] = (g / g.max()).to(dtype)
    return HeatmapStack(out, role="target")


def softmax_probability(prediction: HeatmapStack) -> ProbabilityMap:
    """Turn each prediction channel into a positional probability distribution.

    Per channel: exponentiate (stabilized by subtracting the channel max) and
    divide by the sum over all pixels.
    """
    x = prediction.values
    if not torch.isfinite(x).all():
        raise NumericError("prediction contains NaN or Inf")
    shift = x - x.amax(dim=(-2, -1), keepdim=True)
    e = shift.exp()
    return ProbabilityMap(e / e.sum(dim=(-2, -1), keepdim=True))


def decode_peaks(
    prediction: HeatmapStack,
    threshold: float,
    spacing_mm: float = 1.0,
) -> KeypointSet:
    """Read the argmax of each channel as a detection.

    A disc is detected iff its channel maximum is >= threshold; ties go to the
    smallest row, then smallest column. Undetected discs get the (-1, -1)
    sentinel and visible=False.
    """
    if threshold < 0:
        raise ConfigurationError(f"threshold must be >= 0, got {threshold}")
    values = prediction.values.detach().cpu().numpy()
    v, height, width = values.shape
    coords = np.full((v, 2), -1.0)
    visible = np.zeros(v, dtype=bool)
    for i in range(v):
        flat = values[i].reshape(-1)
        idx = int(np.argmax(flat))  # first occurrence = smallest row, then col
        if flat[idx] >= threshold:
            coords[i] = (idx // width, idx % width)
            visible[i] = True
    return KeypointSet(coords, visible, spacing_mm=spacing_mm)
