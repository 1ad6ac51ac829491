"""Data pipeline: dataset IO, ROI cropping, augmentation, edge maps, synthetic domains.

Disk layout (shared by real and synthetic datasets):
    root/images/*.png|jpg    RGB fundus images
    root/masks/*.png         grayscale masks, 0=background, 128=disc only,
                             255=disc+cup (encoding enforces cup inside disc)

All arrays are numpy: images H×W×3 float32 in [0,1], labels H×W×2 binary
(channel 0 = disc, channel 1 = cup), edge maps H×W float32 in [0,1].
"""

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import AugmentConfig

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MASK_BACKGROUND, MASK_DISC, MASK_DISC_CUP = 0, 128, 255


class DatasetError(RuntimeError):
    """Raised for malformed dataset directories or files."""


@dataclass(eq=False)
class ImageSample:
    """One fundus image with optional labels, derived edge map, and domain tag."""

    x: np.ndarray                 # H×W×3 float32 in [0,1]
    y: np.ndarray = None          # H×W×2 binary (disc, cup) or None
    b: np.ndarray = None          # H×W float32 soft edge map or None
    domain: str = "source"
    id: str = ""

    @property
    def labeled(self):
        return self.y is not None

    def copy(self):
        return ImageSample(
            x=self.x.copy(),
            y=None if self.y is None else self.y.copy(),
            b=None if self.b is None else self.b.copy(),
            domain=self.domain,
            id=self.id,
        )


def validate_sample(sample):
    """Assert the emitted-sample invariants; raises AssertionError on violation."""
    x = sample.x
    assert x.ndim == 3 and x.shape[2] == 3, f"image must be H×W×3, got {x.shape}"
    assert x.min() >= 0.0 and x.max() <= 1.0, "image values must lie in [0,1]"
    assert (sample.y is None) == (sample.b is None), "edge map present iff labels present"
    if sample.y is not None:
        y = sample.y
        assert y.shape == (x.shape[0], x.shape[1], 2), f"labels must be H×W×2, got {y.shape}"
        assert set(np.unique(y)).issubset({0, 1}), "labels must be binary"
        assert np.all(y[..., 1] <= y[..., 0]), "cup must lie inside disc"
        b = sample.b
        assert b.shape == (x.shape[0], x.shape[1]), f"edge map must be H×W, got {b.shape}"
        assert b.min() >= 0.0 and b.max() <= 1.0 + 1e-6, "edge map values must lie in [0,1]"
        if b.max() > 0:
            assert abs(b.max() - 1.0) < 1e-6, "nonzero edge map must peak at 1"


# ---------------------------------------------------------------------------
# mask encoding


def encode_mask(y):
    """Label tensor H×W×2 -> single grayscale mask {0,128,255}."""
    if np.any(y[..., 1] > y[..., 0]):
        raise DatasetError("cannot encode mask: cup not contained in disc")
    out = np.zeros(y.shape[:2], dtype=np.uint8)
    out[y[..., 0] == 1] = MASK_DISC
    out[(y[..., 0] == 1) & (y[..., 1] == 1)] = MASK_DISC_CUP
    return out


def decode_mask(mask, path="<array>"):
    """Grayscale mask {0,128,255} -> label tensor H×W×2."""
    values = set(np.unique(mask).tolist())
    if not values.issubset({MASK_BACKGROUND, MASK_DISC, MASK_DISC_CUP}):
        raise DatasetError(
            f"mask {path} contains values {sorted(values)}; expected subset of "
            f"{{0, {MASK_DISC}, {MASK_DISC_CUP}}}"
        )
    disc = (mask >= MASK_DISC).astype(np.uint8)
    cup = (mask == MASK_DISC_CUP).astype(np.uint8)
    return np.stack([disc, cup], axis=-1)


# ---------------------------------------------------------------------------
# edge maps


def _gaussian_kernel_1d(size, sigma):
    half = size // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma**2))
    return k / k.sum()


def make_edge_map(y, kernel=5, sigma=1.0):
    """Soft boundary target: Sobel magnitude per channel, channel max, Gaussian blur.

    The result is rescaled so its maximum is 1 (an all-background label yields
    an all-zero map).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[..., None]
    grad = np.zeros(y.shape[:2], dtype=np.float64)
    for c in range(y.shape[2]):
        gx = ndimage.sobel(y[..., c], axis=1, mode="reflect")
        gy = ndimage.sobel(y[..., c], axis=0, mode="reflect")
        grad = np.maximum(grad, np.hypot(gx, gy))
    k1 = _gaussian_kernel_1d(kernel, sigma)
    blurred = ndimage.convolve1d(grad, k1, axis=0, mode="reflect")
    blurred = ndimage.convolve1d(blurred, k1, axis=1, mode="reflect")
    peak = blurred.max()
    if peak > 0:
        blurred = blurred / peak
    return blurred.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset IO


def _stems(directory, extensions):
    found = {}
    for name in sorted(os.listdir(directory)):
        p = Path(directory) / name
        if p.suffix.lower() in extensions:
            found[p.stem] = p
    return found


def load_dataset(root, domain, edge_kernel=5, edge_sigma=1.0):
    """Load a dataset directory into samples sorted lexicographically by file stem."""
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir():
        raise DatasetError(f"dataset root {root} has no images/ directory")
    images = _stems(images_dir, IMAGE_EXTENSIONS)
    labeled = masks_dir.is_dir()
    masks = _stems(masks_dir, (".png",)) if labeled else {}
    if labeled:
        missing = sorted(set(images) - set(masks))
        if missing:
            raise DatasetError(
                f"labeled dataset {root} is missing masks for stems: {', '.join(missing)}"
            )
    samples = []
    for stem in sorted(images):
        path = images[stem]
        try:
            img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise DatasetError(f"unreadable image {path}: {exc}")
        y = b = None
        if labeled:
            try:
                raw = np.asarray(Image.open(masks[stem]).convert("L"))
            except Exception as exc:
                raise DatasetError(f"unreadable mask {masks[stem]}: {exc}")
            if raw.shape != img.shape[:2]:
                raise DatasetError(
                    f"mask {masks[stem]} shape {raw.shape} does not match image {img.shape[:2]}"
                )
            y = decode_mask(raw, path=str(masks[stem]))
            b = make_edge_map(y, kernel=edge_kernel, sigma=edge_sigma)
        samples.append(ImageSample(x=img, y=y, b=b, domain=domain, id=stem))
    return samples


def save_dataset(samples, root):
    """Write samples in the standard layout (images/ + masks/ when labeled)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    any_labeled = any(s.labeled for s in samples)
    if any_labeled:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = Image.fromarray((np.clip(s.x, 0, 1) * 255).round().astype(np.uint8))
        img.save(root / "images" / f"{s.id}.png")
        if s.labeled:
            Image.fromarray(encode_mask(s.y)).save(root / "masks" / f"{s.id}.png")


# ---------------------------------------------------------------------------
# geometry: resize / crop / rotate


def _resize_plane(arr, out_h, out_w, order):
    """Resize one 2-D plane with pixel-center alignment (order 0 or 1)."""
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    rows = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(arr, grid, order=order, mode="nearest")


def resize_sample(sample, out_size):
    """Bilinear for image/edge map, nearest for labels; peak of edge map restored."""
    x = np.stack(
        [_resize_plane(sample.x[..., c], out_size, out_size, order=1) for c in range(3)],
        axis=-1,
    ).astype(np.float32)
    y = b = None
    if sample.labeled:
        y = np.stack(
            [_resize_plane(sample.y[..., c].astype(np.float64), out_size, out_size, order=0)
             for c in range(2)],
            axis=-1,
        ).astype(sample.y.dtype)
        b = _resize_plane(sample.b.astype(np.float64), out_size, out_size, order=1)
        peak = b.max()
        if peak > 0:
            b = b / peak
        b = b.astype(np.float32)
    return replace(sample, x=np.clip(x, 0.0, 1.0), y=y, b=b)


def crop_roi(sample, center, roi, out):
    """Crop a roi×roi window around `center` (edge-padded) and resample to out×out."""
    if roi <= 0:
        raise ValueError(f"roi must be positive, got {roi}")
    if out <= 0:
        raise ValueError(f"output size must be positive, got {out}")
    h, w = sample.x.shape[:2]
    row, col = center
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"roi center {center} lies outside the {h}x{w} image")
    r0 = int(round(row - roi / 2.0))
    c0 = int(round(col - roi / 2.0))
    pad_top = max(0, -r0)
    pad_left = max(0, -c0)
    pad_bottom = max(0, r0 + roi - h)
    pad_right = max(0, c0 + roi - w)

    def window(arr):
        pads = ((pad_top, pad_bottom), (pad_left, pad_right)) + ((0, 0),) * (arr.ndim - 2)
        padded = np.pad(arr, pads, mode="edge")
        rs, cs = r0 + pad_top, c0 + pad_left
        return padded[rs:rs + roi, cs:cs + roi]

    cropped = ImageSample(
        x=window(sample.x),
        y=window(sample.y) if sample.labeled else None,
        b=window(sample.b) if sample.labeled else None,
        domain=sample.domain,
        id=sample.id,
    )
    return resize_sample(cropped, out)


def roi_center(sample):
    """Disc centroid when labels exist, image center otherwise.

    Hook point: a learned locator can replace this for unlabeled real data.
    """
    h, w = sample.x.shape[:2]
    if sample.labeled and sample.y[..., 0].any():
        rows, cols = np.nonzero(sample.y[..., 0])
        return float(rows.mean()), float(cols.mean())
    return (h - 1) / 2.0, (w - 1) / 2.0


def _warp_sample(sample, row_coords, col_coords):
    """Resample all planes at the given source coordinates (shared geometry)."""
    coords = np.stack([row_coords, col_coords])
    x = np.stack(
        [ndimage.map_coordinates(sample.x[..., c], coords, order=1, mode="nearest")
         for c in range(3)],
        axis=-1,
    ).astype(np.float32)
    y = b = None
    if sample.labeled:
        y = np.stack(
            [ndimage.map_coordinates(sample.y[..., c].astype(np.float64), coords,
                                     order=0, mode="nearest")
             for c in range(2)],
            axis=-1,
        ).astype(sample.y.dtype)
        b = ndimage.map_coordinates(sample.b.astype(np.float64), coords, order=1,
                                    mode="nearest")
        peak = b.max()
        if peak > 0:
            b = b / peak
        b = b.astype(np.float32)
    return replace(sample, x=np.clip(x, 0.0, 1.0), y=y, b=b)


def rotate_sample(sample, angle_deg):
    """Rotate about the image center; right angles use an exact grid path."""
    if angle_deg % 90 == 0 and sample.x.shape[0] == sample.x.shape[1]:
        k = int(angle_deg // 90) % 4
        if k == 0:
            return sample.copy()
        rot = lambda a: np.ascontiguousarray(np.rot90(a, k))
        return replace(
            sample,
            x=rot(sample.x),
            y=rot(sample.y) if sample.labeled else None,
            b=rot(sample.b) if sample.labeled else None,
        )
    h, w = sample.x.shape[:2]
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rows - cy, cols - cx
    src_r = cy + np.cos(theta) * dy - np.sin(theta) * dx
    src_c = cx + np.sin(theta) * dy + np.cos(theta) * dx
    return _warp_sample(sample, src_r, src_c)


def scale_sample(sample, factor):
    """Zoom about the image center, output size unchanged (edge-clamped)."""
    h, w = sample.x.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    src_r = cy + (rows - cy) / factor
    src_c = cx + (cols - cx) / factor
    return _warp_sample(sample, src_r, src_c)


def flip_sample(sample):
    """Horizontal mirror."""
    fl = lambda a: np.ascontiguousarray(a[:, ::-1])
    return replace(
        sample,
        x=fl(sample.x),
        y=fl(sample.y) if sample.labeled else None,
        b=fl(sample.b) if sample.labeled else None,
    )


def elastic_sample(sample, rng, alpha, sigma):
    """Smooth random displacement field, shared across image/labels/edge map."""
    h, w = sample.x.shape[:2]
    scale = alpha * (h / 256.0)
    dr = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma) * scale
    dc = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma) * scale
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    return _warp_sample(sample, rows + dr, cols + dc)


# ---------------------------------------------------------------------------
# augmentation


def augment(sample, rng, cfg=None):
    """Apply one independent coin per augmentation op.

    Geometric ops (scale, rotation, flip, elastic) transform image, labels
    and edge map with shared geometry; photometric ops (salt-pepper noise,
    random erasing, brightness) touch the image only. Output size never
    changes and labels stay binary with the cup inside the disc.
    """
    cfg = cfg or AugmentConfig()
    out = sample
    if rng.random() < cfg.p_scale:
        out = scale_sample(out, rng.uniform(*cfg.scale_range))
    if rng.random() < cfg.p_rotate:
        out = rotate_sample(out, rng.uniform(-cfg.rotate_max_deg, cfg.rotate_max_deg))
    if rng.random() < cfg.p_flip:
        out = flip_sample(out)
    if rng.random() < cfg.p_elastic:
        out = elastic_sample(out, rng, cfg.elastic_alpha, cfg.elastic_sigma)

    x = out.x if out is not sample else sample.x.copy()
    h, w = x.shape[:2]
    if rng.random() < cfg.p_noise:
        n = int(round(cfg.sp_amount * h * w))
        if n > 0:
            rr = rng.integers(0, h, size=2 * n)
            cc = rng.integers(0, w, size=2 * n)
            x[rr[:n], cc[:n]] = 1.0
            x[rr[n:], cc[n:]] = 0.0
    if rng.random() < cfg.p_erase:
        frac = rng.uniform(*cfg.erase_frac)
        aspect = rng.uniform(0.5, 2.0)
        eh = max(1, min(h, int(round(np.sqrt(frac * h * w * aspect)))))
        ew = max(1, min(w, int(round(np.sqrt(frac * h * w / aspect)))))
        r0 = int(rng.integers(0, h - eh + 1))
        c0 = int(rng.integers(0, w - ew + 1))
        x[r0:r0 + eh, c0:c0 + ew] = rng.uniform(0, 1, size=(eh, ew, 3)).astype(np.float32)
    if rng.random() < cfg.p_brightness:
        x = np.clip(x + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta), 0.0, 1.0)
    x = x.astype(np.float32)

    if out is sample:
        return replace(sample, x=x,
                       y=None if sample.y is None else sample.y.copy(),
                       b=None if sample.b is None else sample.b.copy())
    return replace(out, x=x)


# ---------------------------------------------------------------------------
# synthetic two-domain benchmark


def _ellipse_mask(h, w, center, semi_axes, theta):
    cy, cx = center
    a, b = semi_axes
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = rows - cy, cols - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)


def _draw_vessels(canvas_shape, rng, density):
    """Dark curvy strokes radiating across the image, as a coverage mask."""
    h, w = canvas_shape
    mask = np.zeros((h, w), dtype=np.float64)
    n_vessels = max(0, int(round(4 * density)))
    for _ in range(n_vessels):
        ang = rng.uniform(0, 2 * np.pi)
        r = min(h, w) * 0.48
        start = np.array([h / 2 + r * np.sin(ang), w / 2 + r * np.cos(ang)])
        direction = np.array([h / 2, w / 2]) - start
        direction = direction / (np.linalg.norm(direction) + 1e-9)
        pos = start.copy()
        steps = int(min(h, w) * rng.uniform(0.6, 1.1))
        wiggle = rng.uniform(0.15, 0.4)
        for _ in range(steps):
            direction += wiggle * rng.normal(scale=0.3, size=2)
            direction = direction / (np.linalg.norm(direction) + 1e-9)
            pos = pos + direction
            rr, cc = int(round(pos[0])), int(round(pos[1]))
            if 0 <= rr < h and 0 <= cc < w:
                mask[max(0, rr - 1):rr + 1, max(0, cc - 1):cc + 1] = 1.0
    return ndimage.gaussian_filter(mask, 0.6)


def _render_base_image(size, rng, spec):
    """Shared anatomy rendering: textured background, vessels, disc, cup.

    Returns the neutral-appearance image plus the binary disc/cup masks;
    domain appearance (tone/contrast/brightness/noise) is applied afterwards.
    """
    h = w = size
    r_disc = rng.uniform(*spec.disc_radius_range)
    ratio = rng.uniform(*spec.cup_ratio_range)
    center = np.array([h / 2.0, w / 2.0]) + rng.uniform(-0.06, 0.06, size=2) * size
    squish = rng.uniform(0.85, 1.15)
    theta = rng.uniform(0, np.pi)
    axes = (r_disc * np.sqrt(squish), r_disc / np.sqrt(squish))
    # cup shares center-ish, orientation and squish; offset kept small enough
    # that the scaled ellipse stays inside the disc
    off_r = rng.uniform(0, 0.5 * (1 - ratio))
    off_ang = rng.uniform(0, 2 * np.pi)
    off = np.array([
        off_r * (axes[0] * np.sin(theta) + axes[1] * np.cos(theta)) * np.sin(off_ang),
        off_r * (axes[0] * np.cos(theta) + axes[1] * np.sin(theta)) * np.cos(off_ang),
    ]) * 0.5
    disc = _ellipse_mask(h, w, center, axes, theta)
    cup = _ellipse_mask(h, w, center + off, (axes[0] * ratio, axes[1] * ratio), theta)
    cup = cup * disc  # rasterization guard

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = ((rows - h / 2) ** 2 + (cols - w / 2) ** 2) / ((h / 2) ** 2 + (w / 2) ** 2)
    vignette = 1.0 - 0.4 * d2
    blotch = ndimage.gaussian_filter(rng.normal(size=(h, w)), size / 10.0)
    blotch = blotch / (np.abs(blotch).max() + 1e-9)

    base_color = np.array([0.58, 0.34, 0.16])
    img = base_color[None, None, :] * vignette[..., None] * (1.0 + 0.10 * blotch[..., None])

    vessels = _draw_vessels((h, w), rng, spec.vessel_density)[..., None]
    vessel_color = np.array([0.30, 0.12, 0.08])[None, None, :]
    img = img * (1 - vessels) + vessel_color * vessels

    disc_soft = ndimage.gaussian_filter(disc.astype(np.float64), 1.0)[..., None]
    cup_soft = ndimage.gaussian_filter(cup.astype(np.float64), 0.8)[..., None]
    disc_color = np.array([0.88, 0.66, 0.34])[None, None, :]
    cup_color = np.array([0.98, 0.86, 0.52])[None, None, :]
    img = img * (1 - disc_soft) + disc_color * disc_soft * (1.0 + 0.05 * blotch[..., None])
    img = img * (1 - cup_soft) + cup_color * cup_soft

    y = np.stack([disc, cup], axis=-1).astype(np.uint8)
    return img, y


def _apply_domain_appearance(img, rng, spec):
    img = (img - 0.5) * spec.contrast + 0.5 + spec.brightness
    img = img + np.asarray(spec.tone_shift, dtype=np.float64)[None, None, :]
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_sample(spec, rng, size, domain, sample_id):
    img, y = _render_base_image(size, rng, spec)
    x = _apply_domain_appearance(img, rng, spec)
    b = make_edge_map(y)
    return ImageSample(x=x, y=y, b=b, domain=domain, id=sample_id)


def generate_synthetic_pair(spec_s, spec_t, n, rng, size=64):
    """Render n labeled source and n labeled target samples.

    Target labels exist for evaluation only; training code must treat the
    target stream as unlabeled.
    """
    if n < 1:
        raise ValueError(f"need at least one sample per domain, got n={n}")
    source = [
        generate_synthetic_sample(spec_s, rng, size, "source", f"source_{i:04d}")
        for i in range(n)
    ]
    target = [
        generate_synthetic_sample(spec_t, rng, size, "target", f"target_{i:04d}")
        for i in range(n)
    ]
    return source, target
