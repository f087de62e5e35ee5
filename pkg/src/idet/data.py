"""Synthetic change-detection pairs and on-disk dataset I/O.

Each pair shares a procedural background (smooth gradients and blobs).
A handful of solid shapes (rectangles/ellipses) is painted into exactly
one of the two images; those pixels, and only those, form the ground
truth. The second image additionally gets a global brightness/contrast
shift and mild pixel noise, which the ground truth must ignore.

On disk: binary PPM (P6) for images, binary PGM (P5) for masks with
0 = unchanged and 255 = changed, plus a manifest.txt listing pair ids.
All randomness is derived from (seed, pair index), so regeneration is
byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError


class ParseError(ValueError):
    """A dataset file is malformed; the message names the file."""


@dataclass
class ImagePair:
    x: np.ndarray  # (3, H, W) float32 in [0, 1]
    y: np.ndarray  # (3, H, W) float32 in [0, 1]
    gt: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str


@dataclass
class SynthConfig:
    n_pairs: int = 64
    height: int = 64
    width: int = 64
    change_ratio_target: float = 0.07
    photometric_jitter: float = 0.1
    background_complexity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.height % 16 or self.width % 16 or self.height < 32 or self.width < 32:
            raise ConfigError(
                f"image size ({self.height},{self.width}) must be >= 32 and "
                f"divisible by 16"
            )
        if not 0.0 <= self.change_ratio_target <= 0.5:
            raise ConfigError(
                f"change_ratio_target {self.change_ratio_target} outside "
                f"[0, 0.5]; larger ratios are not reachable with a few shapes"
            )
        if self.n_pairs < 1:
            raise ConfigError(f"n_pairs must be >= 1, got {self.n_pairs}")


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_header(fh, path, magic: bytes):
    got = fh.read(2)
    if got != magic:
        raise ParseError(f"{path}: expected {magic!r} header, found {got!r}")
    fields = []
    while len(fields) < 3:
        ch = fh.read(1)
        if not ch:
            raise ParseError(f"{path}: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            continue
        token = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            token += ch
        try:
            fields.append(int(token))
        except ValueError:
            raise ParseError(f"{path}: non-numeric header token {token!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit files supported, maxval={maxval}")
    return width, height


def write_ppm(path, image: np.ndarray):
    """Write a (3, H, W) float image in [0, 1] as binary 8-bit PPM."""
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    _, h, w = quantized.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, path, b"P6")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise ParseError(f"{path}: truncated pixel payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_pgm(path, mask: np.ndarray):
    """Write a (H, W) binary mask as PGM with 0/255 values."""
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, path, b"P5")
        payload = fh.read(w * h)
        if len(payload) != w * h:
            raise ParseError(f"{path}: truncated pixel payload")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    bad = np.setdiff1d(np.unique(raw), [0, 255])
    if bad.size:
        raise ParseError(
            f"{path}: mask holds non-binary values {bad.tolist()[:8]}; "
            f"expected only 0 and 255"
        )
    return (raw // 255).astype(np.uint8)


def save_pair(root, pair: ImagePair):
    root = Path(root)
    write_ppm(root / f"{pair.id}_X.ppm", pair.x)
    write_ppm(root / f"{pair.id}_Y.ppm", pair.y)
    write_pgm(root / f"{pair.id}_gt.pgm", pair.gt)


def load_pair(root, pair_id: str) -> ImagePair:
    root = Path(root)
    return ImagePair(
        x=read_ppm(root / f"{pair_id}_X.ppm"),
        y=read_ppm(root / f"{pair_id}_Y.ppm"),
        gt=read_pgm(root / f"{pair_id}_gt.pgm"),
        id=pair_id,
    )


def load_dataset(root) -> list[ImagePair]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ParseError(f"{manifest}: missing dataset manifest")
    ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    return [load_pair(root, pid) for pid in ids]


def split_pairs(pairs: list[ImagePair]) -> tuple[list[ImagePair], list[ImagePair]]:
    """Deterministic 80/20 split keyed by a stable hash of the pair id."""
    train, val = [], []
    for pair in pairs:
        digest = hashlib.sha1(pair.id.encode()).digest()
        bucket = int.from_bytes(digest[:4], "little") % 5
        (val if bucket == 0 else train).append(pair)
    return train, val


# ---------------------------------------------------------------------------
# generation


def _background(rng, h, w, complexity):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    field = np.zeros((3, h, w))
    field += rng.uniform(0.25, 0.75, size=(3, 1, 1))
    for _ in range(complexity):
        weights = rng.uniform(0.3, 1.0, size=(3, 1, 1)) * rng.choice((-1.0, 1.0))
        if rng.random() < 0.5:
            a, b = rng.uniform(-1.0, 1.0, size=2)
            component = a * xx + b * yy
        else:
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            sigma = rng.uniform(0.15, 0.4)
            component = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        field += 0.3 * weights * component
    lo, hi = field.min(), field.max()
    if hi > lo:
        field = 0.15 + 0.7 * (field - lo) / (hi - lo)
    return field


def _shape_mask(rng, h, w, area):
    """Pixel mask for one random rectangle or ellipse of roughly `area`."""
    aspect = rng.uniform(0.5, 2.0)
    if rng.random() < 0.5:  # rectangle
        sw = max(2, int(round(np.sqrt(area * aspect))))
        sh = max(2, int(round(area / sw)))
        sw, sh = min(sw, w), min(sh, h)
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        mask = np.zeros((h, w), dtype=bool)
        mask[top : top + sh, left : left + sw] = True
        return mask
    rx = max(1.0, np.sqrt(area * aspect / np.pi))
    ry = max(1.0, area / (np.pi * rx))
    rx, ry = min(rx, w / 2), min(ry, h / 2)
    cx = rng.uniform(rx, w - rx)
    cy = rng.uniform(ry, h - ry)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _shape_color(rng, background, mask):
    """A color that stays clear of the local background average."""
    local = background[:, mask].mean(axis=1)
    offset = rng.uniform(0.25, 0.5, size=3) * rng.choice((-1.0, 1.0), size=3)
    return np.clip(local + offset, 0.0, 1.0)


def make_pair(cfg: SynthConfig, index: int) -> ImagePair:
    """Generate pair `index`; randomness depends only on (seed, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    h, w = cfg.height, cfg.width
    background = _background(rng, h, w, cfg.background_complexity)
    x = background.copy()
    y = background.copy()
    gt = np.zeros((h, w), dtype=np.uint8)

    if cfg.change_ratio_target > 0:
        count = int(rng.integers(1, 6))
        total_area = cfg.change_ratio_target * h * w
        portions = rng.uniform(0.5, 1.5, size=count)
        portions = portions / portions.sum()
        for portion in portions:
            mask = _shape_mask(rng, h, w, portion * total_area)
            color = _shape_color(rng, background, mask)
            target = x if rng.random() < 0.5 else y
            target[:, mask] = color[:, None]
            gt[mask] = 1

    jitter = cfg.photometric_jitter
    brightness = rng.uniform(-jitter, jitter)
    contrast = rng.uniform(-jitter, jitter)
    noise = rng.normal(0.0, 0.1 * jitter, size=y.shape) if jitter > 0 else 0.0
    if jitter > 0:
        y = (y - 0.5) * (1.0 + contrast) + 0.5 + brightness + noise
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    y = np.clip(y, 0.0, 1.0).astype(np.float32)
    return ImagePair(x=x, y=y, gt=gt, id=f"pair_{index:04d}")


def generate_synthetic(cfg: SynthConfig, out_dir) -> list[str]:
    """Write the dataset to `out_dir`; returns the pair ids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    ratios = []
    for index in range(cfg.n_pairs):
        pair = make_pair(cfg, index)
        save_pair(out_dir, pair)
        ids.append(pair.id)
        ratios.append(pair.gt.mean())
    achieved = float(np.mean(ratios))
    target = cfg.change_ratio_target
    if target > 0 and not (0.5 * target <= achieved <= 1.5 * target):
        raise ConfigError(
            f"achieved change ratio {achieved:.4f} misses target {target} "
            f"by more than 50%; adjust the target or image size"
        )
    (out_dir / "manifest.txt").write_text("".join(f"{i}\n" for i in ids))
    return ids
