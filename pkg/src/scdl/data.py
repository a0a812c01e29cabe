"""Long-tailed synthetic segmentation data and the SCDS container format.

SCDS layout (little-endian): magic ``b"SCDS"``, then u32 version, N, H, W, C;
then per sample the image as f32[H*W], labels as u8[H*W] and a u8 labeled flag.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCDS"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


class InfeasibleSpecError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class SyntheticDatasetSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    # percent of the image per foreground class, head to tail
    area_ratios: tuple = (30.0, 9.0, 1.0)
    intensities: tuple = (0.0, 0.5, 1.0, 0.65)
    noise_std: float = 0.35
    num_samples: int = 200
    labeled_frac: float = 0.1
    seed: int = 0

    def validate(self):
        if len(self.area_ratios) != self.num_classes - 1:
            raise InfeasibleSpecError("need one area ratio per foreground class")
        if len(self.intensities) != self.num_classes:
            raise InfeasibleSpecError("need one intensity per class")
        if any(r <= 0 for r in self.area_ratios) or sum(self.area_ratios) >= 100:
            raise InfeasibleSpecError("area ratios must be positive and sum below 100%")
        if not 0 <= self.labeled_frac <= 1:
            raise InfeasibleSpecError("labeled fraction must lie in [0, 1]")
        if self.num_samples < 0 or self.num_classes > 255:
            raise InfeasibleSpecError("bad sample or class count")


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W float32
    labels: np.ndarray  # N x H x W uint8
    labeled: np.ndarray  # N bool
    num_classes: int
    histogram: dict = field(default_factory=dict)

    def __len__(self):
        return self.images.shape[0]


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _layout(spec, rng, max_tries=200):
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.uint8)
    order = np.argsort(spec.area_ratios)[::-1]  # largest first
    for k in order:
        target = spec.area_ratios[k] / 100.0 * h * w * rng.uniform(0.8, 1.2)
        aspect = rng.uniform(0.7, 1.4)
        r = math.sqrt(target / math.pi)
        ry, rx = r * math.sqrt(aspect), r / math.sqrt(aspect)
        if 2 * ry >= h or 2 * rx >= w:
            return None
        for _ in range(max_tries):
            cy = rng.uniform(ry - 0.5, h - ry - 0.5)
            cx = rng.uniform(rx - 0.5, w - rx - 0.5)
            blob = _ellipse(h, w, cy, cx, ry, rx)
            if blob.any() and not np.any(labels[blob]):
                labels[blob] = k + 1
                break
        else:
            return None
    return labels


def generate_dataset(spec, seed=None, max_layout_tries=50):
    """Draw ``spec.num_samples`` images with one blob per foreground class."""
    spec.validate()
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    n, h, w = spec.num_samples, spec.height, spec.width
    images = np.zeros((n, h, w), dtype=np.float32)
    labels = np.zeros((n, h, w), dtype=np.uint8)
    means = np.asarray(spec.intensities, dtype=np.float64)
    for i in range(n):
        for _ in range(max_layout_tries):
            lab = _layout(spec, rng)
            if lab is not None:
                break
        else:
            raise InfeasibleSpecError("could not place non-overlapping blobs for these area ratios")
        labels[i] = lab
        images[i] = (means[lab] + spec.noise_std * rng.standard_normal((h, w))).astype(np.float32)
    labeled = np.zeros(n, dtype=bool)
    labeled[:math.ceil(spec.labeled_frac * n)] = True
    return Dataset(images, labels, labeled, spec.num_classes,
                   class_histogram(labels, spec.num_classes, spec))


def class_histogram(labels, num_classes, spec=None):
    counts = np.bincount(labels.reshape(-1), minlength=num_classes)[:num_classes]
    per_image = np.stack([np.bincount(l.reshape(-1), minlength=num_classes)[:num_classes]
                          for l in labels]) if len(labels) else np.zeros((0, num_classes))
    total = max(labels.size, 1)
    hist = {
        "pixel_counts": counts.tolist(),
        "realized_percent": (100.0 * counts / total).tolist(),
        "mean_percent_per_image": (100.0 * per_image.mean(axis=0) / (labels[0].size if len(labels) else 1)).tolist(),
    }
    if spec is not None:
        hist["target_percent"] = [100.0 - sum(spec.area_ratios)] + list(spec.area_ratios)
        hist["spec"] = asdict(spec)
    return hist


def save_dataset(ds, path):
    path = Path(path)
    n, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, h, w, ds.num_classes))
        for i in range(n):
            f.write(ds.images[i].astype("<f4").tobytes())
            f.write(ds.labels[i].astype(np.uint8).tobytes())
            f.write(bytes([1 if ds.labeled[i] else 0]))
    hist = ds.histogram or class_histogram(ds.labels, ds.num_classes)
    Path(str(path) + ".hist.json").write_text(json.dumps(hist, indent=2, sort_keys=True))
    return path


def load_dataset(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for an SCDS header")
    magic, version, n, h, w, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SCDS version {version}")
    rec = 4 * h * w + h * w + 1
    if len(raw) != _HEADER.size + n * rec:
        raise FormatError("SCDS payload length does not match header")
    images = np.empty((n, h, w), dtype=np.float32)
    labels = np.empty((n, h, w), dtype=np.uint8)
    labeled = np.empty(n, dtype=bool)
    off = _HEADER.size
    for i in range(n):
        images[i] = np.frombuffer(raw, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += 4 * h * w
        labels[i] = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=off).reshape(h, w)
        off += h * w
        labeled[i] = raw[off] != 0
        off += 1
    hist_path = Path(str(path) + ".hist.json")
    hist = json.loads(hist_path.read_text()) if hist_path.exists() else {}
    return Dataset(images, labels, labeled, c, hist)
