"""Spine sample ingestion, synthetic data generation, and batch preparation.

On-disk sample format (readable from any language):
  <id>.img            one ASCII header line "HCA1 <height> <width> <spacing_mm>\n"
                      followed by 32-bit little-endian floats, row-major
  <id>.keypoints.csv  header "disc,row,col,visible", 11 rows, disc in 0..10
  manifest.csv        optional, header "id,modality,subject_id"

Volumes are .npy arrays shaped (slices, height, width) with a JSON label file:
  {"spacing_mm": 0.8, "discs": [{"disc": 0, "row": 31.5, "col": 42.0}, ...]}
Discs absent from the label file are marked not visible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import map_coordinates

from .errors import ConfigurationError, IngestionError, InputError
from .heatmap_codec import KeypointSet, encode_heatmaps
from .network import DOWNSAMPLE, ModelConfig

NUM_DISCS = 11
MODALITIES = ("t1w", "t2w", "synthetic")

_IMG_MAGIC = "HCA1"
_EDGE_MARGIN = 3.0


@dataclass
class SpineSample:
    """One 2D sagittal image in [0, 1] with its 11 disc keypoints."""

    image: np.ndarray
    keypoints: KeypointSet
    subject_id: str
    modality: str = "synthetic"

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 2:
            raise InputError(f"image must be 2D, got shape {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise InputError("image values must lie in [0, 1]")
        if len(self.keypoints) != NUM_DISCS:
            raise InputError(f"expected {NUM_DISCS} keypoint slots, got {len(self.keypoints)}")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"modality must be one of {MODALITIES}, got {self.modality!r}")


@dataclass
class SynthConfig:
    """Parameters of the synthetic spine image generator.

    ``disc_gap_px`` bounds the row spacing between consecutive disc centers;
    ``curvature`` bounds the lateral bow of the spine as a fraction of width.
    """

    count: int = 16
    height: int = 128
    width: int = 128
    curvature: tuple[float, float] = (-0.1, 0.1)
    disc_gap_px: tuple[float, float] = (7.0, 10.0)
    noise_std: float = 0.02
    distractor_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError(f"count must be >= 1, got {self.count}")
        for name in ("curvature", "disc_gap_px"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} range ({lo}, {hi}) is empty")
        if self.disc_gap_px[0] <= 0:
            raise ConfigurationError("disc_gap_px must be positive")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.distractor_count < 0:
            raise ConfigurationError(f"distractor_count must be >= 0, got {self.distractor_count}")
        needed = (NUM_DISCS - 1) * self.disc_gap_px[1] + 2 * _EDGE_MARGIN + 2
        if self.height < needed or self.width < 24:
            raise ConfigurationError(
                f"image {self.height}x{self.width} too small for 11 discs with "
                f"gaps up to {self.disc_gap_px[1]} px (needs height >= {needed:.0f})"
            )


def _synthesize_one(config: SynthConfig, rng: np.random.Generator, index: int) -> SpineSample:
    h, w = config.height, config.width
    gaps = rng.uniform(config.disc_gap_px[0], config.disc_gap_px[1], size=NUM_DISCS - 1)
    start = rng.uniform(_EDGE_MARGIN, h - 1 - _EDGE_MARGIN - gaps.sum())
    rows = start + np.concatenate([[0.0], np.cumsum(gaps)])

    t = (rows - rows[0]) / (rows[-1] - rows[0])
    bow = rng.uniform(*config.curvature)
    tilt = rng.uniform(-0.06, 0.06)
    cols = w * (0.5 + tilt * (t - 0.5) + bow * (4.0 * (t - 0.5) ** 2 - 1.0) / 2.0)
    col_margin = _EDGE_MARGIN + 1.0
    cols = np.clip(cols, col_margin, w - 1 - col_margin)

    mean_gap = float(gaps.mean())
    disc_r = max(0.9, 0.16 * mean_gap)
    disc_c = max(1.6, 0.42 * mean_gap)

    visible = np.ones(NUM_DISCS, dtype=bool)
    if rng.random() < 0.1:
        visible[rng.integers(NUM_DISCS)] = False

    rr = np.arange(h, dtype=np.float64).reshape(h, 1)
    cc = np.arange(w, dtype=np.float64).reshape(1, w)
    image = np.full((h, w), 0.08)

    def blob(center_r, center_c, axis_r, axis_c, value):
        profile = value * np.exp(-(((rr - center_r) / axis_r) ** 2 + ((cc - center_c) / axis_c) ** 2))
        np.maximum(image, profile, out=image)

    for k in range(NUM_DISCS - 1):
        blob(
            (rows[k] + rows[k + 1]) / 2.0,
            (cols[k] + cols[k + 1]) / 2.0,
            0.32 * mean_gap,
            0.5 * disc_c + 0.8,
            0.35,
        )
    for k in range(NUM_DISCS):
        if visible[k]:
            blob(rows[k], cols[k], disc_r, disc_c, 0.9)

    # bright blobs away from the spine to exercise false-positive suppression;
    # placement is best-effort within 200 rejection-sampling attempts
    centers = np.stack([rows, cols], axis=1)
    placed = attempts = 0
    while placed < config.distractor_count and attempts < 200:
        attempts += 1
        dr = rng.uniform(_EDGE_MARGIN, h - 1 - _EDGE_MARGIN)
        dc = rng.uniform(col_margin, w - 1 - col_margin)
        near_disc = np.hypot(centers[:, 0] - dr, centers[:, 1] - dc).min()
        spine_col = float(np.interp(dr, rows, cols))
        if near_disc >= 3.0 * disc_c and abs(dc - spine_col) >= 2.5 * disc_c:
            blob(dr, dc, disc_r, disc_c, 0.82)
            placed += 1

    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    coords = np.where(visible[:, None], centers, -1.0)
    return SpineSample(
        image=image.astype(np.float32),
        keypoints=KeypointSet(coords, visible, spacing_mm=1.0),
        subject_id=f"synth{index:04d}",
        modality="synthetic",
    )


def generate_synthetic(config: SynthConfig) -> list[SpineSample]:
    """Generate deterministic synthetic spine samples.

    Each sample holds a curved chain of 11 bright disc blobs with darker
    vertebral bodies between them, optional off-spine distractor blobs, and
    additive Gaussian noise. Roughly 10% of samples drop one random disc
    (marked not visible and not drawn).
    """
    return [
        _synthesize_one(config, np.random.default_rng([config.seed, i]), i)
        for i in range(config.count)
    ]


def load_volume_as_sample(volume_path, labels_path) -> SpineSample:
    """Collapse a sagittal volume to one training sample.

    Averages the six slices centered on the middle one (indices mid-3..mid+2
    with mid = floor(n/2)), min-max normalizes to [0, 1] (constant volumes map
    to zeros), and projects labeled disc positions onto the sagittal plane.
    """
    volume_path, labels_path = Path(volume_path), Path(labels_path)
    try:
        volume = np.load(volume_path)
    except Exception as exc:
        raise IngestionError(f"cannot read volume {volume_path}: {exc}") from exc
    if volume.ndim != 3:
        raise IngestionError(f"volume {volume_path} must be 3D, got shape {volume.shape}")
    n_slices = volume.shape[0]
    if n_slices < 6:
        raise IngestionError(f"volume {volume_path} has {n_slices} sagittal slices, need >= 6")
    mid = n_slices // 2
    image = volume[mid - 3 : mid + 3].astype(np.float64).mean(axis=0)
    value_range = image.max() - image.min()
    if value_range > 0:
        image = (image - image.min()) / value_range
    else:
        image = np.zeros_like(image)

    try:
        labels = json.loads(labels_path.read_text())
        spacing = float(labels["spacing_mm"])
        entries = labels["discs"]
    except Exception as exc:
        raise IngestionError(f"cannot read labels {labels_path}: {exc}") from exc

    coords = np.full((NUM_DISCS, 2), -1.0)
    visible = np.zeros(NUM_DISCS, dtype=bool)
    for entry in entries:
        try:
            disc = int(entry["disc"])
            row, col = float(entry["row"]), float(entry["col"])
        except Exception as exc:
            raise IngestionError(f"malformed disc entry in {labels_path}: {entry!r}") from exc
        if not 0 <= disc < NUM_DISCS:
            raise IngestionError(f"disc index {disc} out of range 0..{NUM_DISCS - 1} in {labels_path}")
        coords[disc] = (row, col)
        visible[disc] = True

    return SpineSample(
        image=image.astype(np.float32),
        keypoints=KeypointSet(coords, visible, spacing_mm=spacing),
        subject_id=str(labels.get("subject_id", volume_path.stem)),
        modality=str(labels.get("modality", "t1w")),
    )


def save_sample(sample: SpineSample, directory, sample_id: Optional[str] = None) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sid = sample_id or sample.subject_id
    h, w = sample.image.shape
    header = f"{_IMG_MAGIC} {h} {w} {float(sample.keypoints.spacing_mm)!r}\n"
    with open(directory / f"{sid}.img", "wb") as f:
        f.write(header.encode("ascii"))
        f.write(sample.image.astype("<f4").tobytes())
    lines = ["disc,row,col,visible"]
    for i in range(NUM_DISCS):
        r, c = sample.keypoints.coords[i]
        lines.append(f"{i},{float(r)!r},{float(c)!r},{int(sample.keypoints.visible[i])}")
    (directory / f"{sid}.keypoints.csv").write_text("\n".join(lines) + "\n")
    return sid


def read_image_file(path) -> tuple[np.ndarray, float]:
    try:
        with open(path, "rb") as f:
            header = f.readline().decode("ascii").split()
            if len(header) != 4 or header[0] != _IMG_MAGIC:
                raise IngestionError(f"{path}: bad header (expected '{_IMG_MAGIC} H W spacing')")
            h, w, spacing = int(header[1]), int(header[2]), float(header[3])
            data = np.frombuffer(f.read(), dtype="<f4")
    except IngestionError:
        raise
    except Exception as exc:
        raise IngestionError(f"cannot read image file {path}: {exc}") from exc
    if data.size != h * w:
        raise IngestionError(f"{path}: expected {h * w} pixels, found {data.size}")
    return data.reshape(h, w).copy(), spacing


def read_keypoints_file(path, spacing: float) -> KeypointSet:
    try:
        lines = path.read_text().strip().splitlines()
    except Exception as exc:
        raise IngestionError(f"cannot read keypoints file {path}: {exc}") from exc
    if not lines or lines[0].strip() != "disc,row,col,visible":
        raise IngestionError(f"{path}: missing 'disc,row,col,visible' header")
    coords = np.full((NUM_DISCS, 2), -1.0)
    visible = np.zeros(NUM_DISCS, dtype=bool)
    seen = set()
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            raise IngestionError(f"{path}: malformed row {line!r}")
        disc = int(parts[0])
        if disc in seen or not 0 <= disc < NUM_DISCS:
            raise IngestionError(f"{path}: bad or duplicate disc index {disc}")
        seen.add(disc)
        coords[disc] = (float(parts[1]), float(parts[2]))
        visible[disc] = bool(int(parts[3]))
    if len(seen) != NUM_DISCS:
        raise IngestionError(f"{path}: expected {NUM_DISCS} disc rows, found {len(seen)}")
    return KeypointSet(coords, visible, spacing_mm=spacing)


def load_sample(directory, sample_id: str, modality: str = "synthetic",
                subject_id: Optional[str] = None) -> SpineSample:
    directory = Path(directory)
    image, spacing = read_image_file(directory / f"{sample_id}.img")
    keypoints = read_keypoints_file(directory / f"{sample_id}.keypoints.csv", spacing)
    return SpineSample(image, keypoints, subject_id=subject_id or sample_id, modality=modality)


def save_dataset(samples: Sequence[SpineSample], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["id,modality,subject_id"]
    for sample in samples:
        sid = save_sample(sample, directory)
        rows.append(f"{sid},{sample.modality},{sample.subject_id}")
    (directory / "manifest.csv").write_text("\n".join(rows) + "\n")


def load_dataset(directory) -> list[SpineSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"dataset directory {directory} does not exist")
    manifest = directory / "manifest.csv"
    entries: list[tuple[str, str, str]] = []
    if manifest.exists():
        lines = manifest.read_text().strip().splitlines()
        if not lines or lines[0].strip() != "id,modality,subject_id":
            raise IngestionError(f"{manifest}: missing 'id,modality,subject_id' header")
        for line in lines[1:]:
            sid, modality, subject = (part.strip() for part in line.split(","))
            entries.append((sid, modality, subject))
    else:
        for path in sorted(directory.glob("*.img")):
            entries.append((path.stem, "synthetic", path.stem))
    if not entries:
        raise IngestionError(f"no samples found in {directory}")
    return [load_sample(directory, sid, modality, subject) for sid, modality, subject in entries]


def split_train_val(samples: Sequence[SpineSample], train_fraction: float = 0.8,
                    ) -> tuple[list[SpineSample], list[SpineSample]]:
    """Split by subject so no subject appears on both sides.

    Buckets subjects by a stable hash; if one side would be empty the subject
    with the extreme bucket value is moved across.
    """

    def bucket(subject: str) -> int:
        return int(hashlib.sha256(subject.encode("utf-8")).hexdigest(), 16) % 100

    cut = train_fraction * 100
    train = [s for s in samples if bucket(s.subject_id) < cut]
    val = [s for s in samples if bucket(s.subject_id) >= cut]
    subjects = {s.subject_id for s in samples}
    if len(subjects) > 1:
        if not val:
            top = max(subjects, key=bucket)
            val = [s for s in train if s.subject_id == top]
            train = [s for s in train if s.subject_id != top]
        elif not train:
            low = min(subjects, key=bucket)
            train = [s for s in val if s.subject_id == low]
            val = [s for s in val if s.subject_id != low]
    return train, val


def resize_image(image: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, float, tuple[float, float]]:
    """Aspect-preserving resize onto a zero-padded canvas.

    Returns (canvas, scale, (row_offset, col_offset)); a source position p maps
    to p * scale + offset on the canvas.
    """
    h, w = image.shape
    target_h, target_w = size
    if (h, w) == (target_h, target_w):
        return image.copy(), 1.0, (0.0, 0.0)
    scale = min(target_h / h, target_w / w)
    content_h, content_w = round(h * scale), round(w * scale)
    grid_r = np.arange(content_h, dtype=np.float64) / scale
    grid_c = np.arange(content_w, dtype=np.float64) / scale
    mesh = np.meshgrid(grid_r, grid_c, indexing="ij")
    content = map_coordinates(image.astype(np.float64), mesh, order=1, mode="nearest")
    off_r, off_c = (target_h - content_h) // 2, (target_w - content_w) // 2
    canvas = np.zeros((target_h, target_w), dtype=np.float64)
    canvas[off_r : off_r + content_h, off_c : off_c + content_w] = content
    return np.clip(canvas, 0.0, 1.0).astype(image.dtype), scale, (float(off_r), float(off_c))


def resize_sample(sample: SpineSample, size: tuple[int, int]) -> tuple[np.ndarray, KeypointSet]:
    """Resize a sample's image to ``size`` and apply the same map to its keypoints."""
    canvas, scale, (off_r, off_c) = resize_image(sample.image, size)
    kp = sample.keypoints
    coords = kp.coords * scale + np.array([off_r, off_c])
    coords[:, 0] = np.clip(coords[:, 0], 0.0, size[0] - 1)
    coords[:, 1] = np.clip(coords[:, 1], 0.0, size[1] - 1)
    coords = np.where(kp.visible[:, None], coords, -1.0)
    return canvas, KeypointSet(coords, kp.visible.copy(), spacing_mm=kp.spacing_mm / scale)


def prepare_batch(
    samples: Sequence[SpineSample],
    model_config: ModelConfig,
    sigma: float = 2.0,
) -> tuple[torch.Tensor, torch.Tensor, list[KeypointSet], np.ndarray]:
    """Resize, encode, and stack samples for the network.

    Returns (images (B,1,H,W) float32, targets (B,V,h,w) float32, keypoints,
    visibility (B,V) bool). Keypoints come back in heatmap-resolution pixels
    with spacing_mm meaning millimeters per network-input pixel, matching the
    target encoding.
    """
    if len(samples) == 0:
        raise InputError("prepare_batch needs at least one sample")
    hm_h, hm_w = model_config.heatmap_size
    images, targets, keypoints = [], [], []
    for sample in samples:
        if len(sample.keypoints) != model_config.num_discs:
            raise InputError(
                f"sample has {len(sample.keypoints)} keypoints, model expects {model_config.num_discs}"
            )
        canvas, kp_input = resize_sample(sample, model_config.input_size)
        coords = kp_input.coords / DOWNSAMPLE
        coords[:, 0] = np.clip(coords[:, 0], 0.0, hm_h - 1)
        coords[:, 1] = np.clip(coords[:, 1], 0.0, hm_w - 1)
        coords = np.where(kp_input.visible[:, None], coords, -1.0)
        kp_hm = KeypointSet(coords, kp_input.visible.copy(), spacing_mm=kp_input.spacing_mm)
        keypoints.append(kp_hm)
        images.append(torch.as_tensor(canvas, dtype=torch.float32))
        targets.append(encode_heatmaps(kp_hm, hm_h, hm_w, sigma=sigma).values)
    visibility = np.stack([kp.visible for kp in keypoints])
    return torch.stack(images).unsqueeze(1), torch.stack(targets), keypoints, visibility
