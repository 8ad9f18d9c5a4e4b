"""Image augmentation pipelines on 8-bit images.

Images are numpy ``uint8`` arrays of shape (H, W, C) with C in {1, 3}.
Every geometric or photometric op rounds back to uint8, so a pipeline is a
chain of integer images ending in one float conversion. Ops with identity
parameters return the input unchanged, which keeps the degenerate training
profile bit-identical to the validation transform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
TTA_ROTATION_DEG = 10.0
RANDAUGMENT_OPS = ("brightness", "contrast", "saturation", "sharpness", "rotate", "translate")


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major 8-bit image with 1 or 3 channels."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ShapeError("image is empty")
        if arr.dtype != np.uint8:
            raise ValueError(f"image samples must be uint8, got {arr.dtype}")
        object.__setattr__(self, "pixels", np.ascontiguousarray(arr))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _pixels(image) -> np.ndarray:
    return image.pixels if isinstance(image, ImageBuffer) else ImageBuffer(image).pixels


@dataclass(frozen=True)
class AugmentationProfile:
    resize_large: int = 40
    crop_size: int = 32
    randaugment_n: int = 2
    randaugment_m: int = 9
    rotation_deg: float = 20.0
    shear_deg: float = 10.0
    scale_range: tuple = (0.9, 1.1)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_blur: float = 0.2
    p_posterize: float = 0.2
    p_erase: float = 0.25
    erase_scale: tuple = (0.02, 0.1)
    posterize_bits: int = 4
    blur_kernel: int = 3
    blur_sigma: float = 0.8
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        for name in ("scale_range", "erase_scale", "mean", "std"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.crop_size < 1 or self.crop_size > self.resize_large:
            raise ConfigError(f"crop_size {self.crop_size} must lie in [1, resize_large={self.resize_large}]")
        if self.randaugment_n < 0 or not 0 <= self.randaugment_m <= 10:
            raise ConfigError("randaugment_n must be >= 0 and randaugment_m in [0, 10]")
        for name in ("p_hflip", "p_vflip", "p_blur", "p_posterize", "p_erase"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        lo, hi = self.erase_scale
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"erase_scale must lie within (0, 1), got {self.erase_scale}")
        if not 1 <= self.posterize_bits <= 8:
            raise ConfigError("posterize_bits must lie in [1, 8]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("blur_kernel must be a positive odd integer")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigError("mean and std need 3 entries with std > 0")
        for name in ("rotation_deg", "shear_deg", "brightness", "contrast", "saturation", "hue", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def with_overrides(self, **kw) -> "AugmentationProfile":
        return replace(self, **kw)


def teacher_profile(full_scale: bool = False) -> AugmentationProfile:
    """Heavy training augmentation."""
    size = dict(resize_large=256, crop_size=224) if full_scale else {}
    return AugmentationProfile(randaugment_n=2, randaugment_m=9, rotation_deg=20.0, **size)


def student_profile(full_scale: bool = False) -> AugmentationProfile:
    """Light training augmentation: milder RandAugment, no blur or posterize."""
    size = dict(resize_large=256, crop_size=224) if full_scale else {}
    return AugmentationProfile(randaugment_n=2, randaugment_m=7, rotation_deg=15.0,
                               p_blur=0.0, p_posterize=0.0, **size)


def minimal_profile(base: AugmentationProfile | None = None) -> AugmentationProfile:
    """Profile whose training pipeline collapses to the validation transform."""
    base = base or AugmentationProfile()
    return replace(base, resize_large=base.crop_size, randaugment_n=0, randaugment_m=0, rotation_deg=0.0,
                   shear_deg=0.0, scale_range=(1.0, 1.0), brightness=0.0, contrast=0.0, saturation=0.0,
                   hue=0.0, p_hflip=0.0, p_vflip=0.0, p_blur=0.0, p_posterize=0.0, p_erase=0.0)


PROFILES = {"teacher": teacher_profile, "student": student_profile, "minimal": lambda: minimal_profile()}


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample generator; independent of iteration or worker order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


# -- primitive ops -----------------------------------------------------------

def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def resize(image, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize with half-pixel centers; same size returns the input."""
    img = _pixels(image)
    width = height if width is None else width
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bottom = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    return _to_u8(top * (1 - wy) + bottom * wy)


def crop(image, top: int, left: int, size: int) -> np.ndarray:
    img = _pixels(image)
    return img[top:top + size, left:left + size]


def center_crop(image, size: int) -> np.ndarray:
    img = _pixels(image)
    h, w = img.shape[:2]
    return crop(img, (h - size) // 2, (w - size) // 2, size)


def hflip(image) -> np.ndarray:
    return _pixels(image)[:, ::-1]


def vflip(image) -> np.ndarray:
    return _pixels(image)[::-1]


def _snap(c: np.ndarray) -> np.ndarray:
    r = np.rint(c)
    return np.where(np.abs(c - r) < 1e-6, r, c)


def geometric_affine(image, angle_deg: float = 0.0, shear_deg: float = 0.0, scale: float = 1.0,
                     translate_px=(0.0, 0.0)) -> np.ndarray:
    """Affine warp about the image center (counter-clockwise positive angle).

    Output pixels are inverse-mapped into the source and sampled bilinearly;
    samples falling outside the source read as 0.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    img = _pixels(image)
    tx, ty = translate_px
    if angle_deg == 0 and shear_deg == 0 and scale == 1 and tx == 0 and ty == 0:
        return img
    h, w, c = img.shape
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), math.sin(a)], [-math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(math.radians(shear_deg))], [0.0, 1.0]])
    inv = np.linalg.inv(rot @ shear * scale)

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - cx - tx
    dy = yy - cy - ty
    sx = _snap(inv[0, 0] * dx + inv[0, 1] * dy + cx)
    sy = _snap(inv[1, 0] * dx + inv[1, 1] * dy + cy)

    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = img.astype(np.float64)

    def tap(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0)

    out = (tap(y0, x0) * (1 - fx) * (1 - fy) + tap(y0, x0 + 1) * fx * (1 - fy)
           + tap(y0 + 1, x0) * (1 - fx) * fy + tap(y0 + 1, x0 + 1) * fx * fy)
    return _to_u8(out)


def _gray(f: np.ndarray) -> np.ndarray:
    if f.shape[2] == 1:
        return f
    return (0.299 * f[..., 0:1] + 0.587 * f[..., 1:2] + 0.114 * f[..., 2:3])


def _blend(img: np.ndarray, base: np.ndarray, factor: float) -> np.ndarray:
    f = img.astype(np.float64)
    return _to_u8(base + factor * (f - base))


def adjust_brightness(image, factor: float) -> np.ndarray:
    img = _pixels(image)
    return img if factor == 1 else _to_u8(img.astype(np.float64) * factor)


def adjust_contrast(image, factor: float) -> np.ndarray:
    img = _pixels(image)
    if factor == 1:
        return img
    return _blend(img, np.full_like(img, _gray(img.astype(np.float64)).mean(), dtype=np.float64), factor)


def adjust_saturation(image, factor: float) -> np.ndarray:
    img = _pixels(image)
    if factor == 1 or img.shape[2] == 1:
        return img
    return _blend(img, np.broadcast_to(_gray(img.astype(np.float64)), img.shape), factor)


def _smooth(f: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    r = k // 2
    pad = np.pad(f, ((r, r), (r, r), (0, 0)), mode="edge")
    h, w = f.shape[:2]
    out = np.zeros_like(f)
    for i in range(k):
        for j in range(k):
            out += kernel[i, j] * pad[i:i + h, j:j + w]
    return out


_SHARPEN_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0


def adjust_sharpness(image, factor: float) -> np.ndarray:
    img = _pixels(image)
    if factor == 1:
        return img
    return _blend(img, _smooth(img.astype(np.float64), _SHARPEN_KERNEL), factor)


def adjust_hue(image, shift: float) -> np.ndarray:
    """Rotate chroma by ``shift`` turns in YIQ space; gray pixels are untouched."""
    img = _pixels(image)
    if shift == 0 or img.shape[2] == 1 or (np.all(img[..., 0] == img[..., 1]) and np.all(img[..., 1] == img[..., 2])):
        return img
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    t = 2 * math.pi * shift
    rot = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return _to_u8(img.astype(np.float64) @ m.T)


def gaussian_blur(image, kernel_size: int = 3, sigma: float = 0.8) -> np.ndarray:
    img = _pixels(image)
    r = kernel_size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    return _to_u8(_smooth(img.astype(np.float64), np.outer(g, g)))


def posterize(image, bits: int) -> np.ndarray:
    """Keep the top ``bits`` bits of every sample."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    img = _pixels(image)
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return img & mask


def rand_augment(image, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Apply ``n`` ops drawn with replacement, each at magnitude ``m`` of 10."""
    if not 0 <= m <= 10:
        raise ValueError(f"magnitude must lie in [0, 10], got {m}")
    img = _pixels(image)
    w = img.shape[1]
    for _ in range(n):
        op = RANDAUGMENT_OPS[rng.integers(len(RANDAUGMENT_OPS))]
        sign = 1.0 if rng.random() < 0.5 else -1.0
        axis = int(rng.integers(2))
        if m == 0:
            continue
        factor = 1.0 + sign * 0.05 * m
        if op == "brightness":
            img = adjust_brightness(img, factor)
        elif op == "contrast":
            img = adjust_contrast(img, factor)
        elif op == "saturation":
            img = adjust_saturation(img, factor)
        elif op == "sharpness":
            img = adjust_sharpness(img, factor)
        elif op == "rotate":
            img = geometric_affine(img, angle_deg=sign * 3.0 * m)
        else:
            shift = sign * (m / 10.0) * 0.1 * w
            img = geometric_affine(img, translate_px=(shift, 0.0) if axis == 0 else (0.0, shift))
    return img


def sample_erase_box(height: int, width: int, scale_range, rng: np.random.Generator,
                     ratio=(1 / 3, 3.0), attempts: int = 10):
    """Rectangle (top, left, h, w) whose area fraction lies in ``scale_range``."""
    lo, hi = scale_range
    total = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        area = rng.uniform(lo, hi) * total
        r = math.exp(rng.uniform(*log_r))
        bh = int(round(math.sqrt(area * r)))
        bw = int(round(math.sqrt(area / r)))
        if 1 <= bh <= height and 1 <= bw <= width and lo <= bh * bw / total <= hi:
            return int(rng.integers(0, height - bh + 1)), int(rng.integers(0, width - bw + 1)), bh, bw
    # fall back to the most square box that satisfies the bounds
    best = None
    for bh in range(1, height + 1):
        for bw in range(1, width + 1):
            frac = bh * bw / total
            if lo <= frac <= hi:
                key = (abs(math.log(bh / bw)), bh, bw)
                if best is None or key < best:
                    best = key
    if best is None:
        raise ValueError(f"no rectangle of a {height}x{width} image has area fraction in {scale_range}")
    _, bh, bw = best
    return int(rng.integers(0, height - bh + 1)), int(rng.integers(0, width - bw + 1)), bh, bw


def random_erasing(tensor: np.ndarray, p: float, scale_range, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p`` zero one rectangle of a (C, H, W) float tensor."""
    lo, hi = scale_range
    if not 0 < lo <= hi < 1:
        raise ValueError(f"scale range must lie within (0, 1), got {scale_range}")
    if p <= 0 or rng.random() >= p:
        return tensor
    top, left, bh, bw = sample_erase_box(tensor.shape[1], tensor.shape[2], scale_range, rng)
    out = tensor.copy()
    out[:, top:top + bh, left:left + bw] = 0.0
    return out


# -- pipelines ---------------------------------------------------------------

def to_unit_chw(image) -> np.ndarray:
    img = _pixels(image)
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)


def standardize(chw: np.ndarray, profile: AugmentationProfile) -> np.ndarray:
    if chw.shape[0] == 1:
        chw = np.repeat(chw, 3, axis=0)
    mean = np.asarray(profile.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(profile.std, dtype=np.float32)[:, None, None]
    return ((chw - mean) / std).astype(np.float32)


def val_pipeline(image, profile: AugmentationProfile) -> np.ndarray:
    """Resize to the crop size and standardize; no randomness."""
    img = resize(image, profile.crop_size)
    return standardize(to_unit_chw(img), profile)


def _jitter_factor(rng, amount):
    return rng.uniform(1.0 - amount, 1.0 + amount) if amount > 0 else 1.0


def train_pipeline(image, profile: AugmentationProfile, rng) -> np.ndarray:
    """Full training transform; ``rng`` is a Generator or an integer seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    p = profile
    img = resize(image, p.resize_large)
    top = int(rng.integers(0, p.resize_large - p.crop_size + 1))
    left = int(rng.integers(0, p.resize_large - p.crop_size + 1))
    img = crop(img, top, left, p.crop_size)
    img = rand_augment(img, p.randaugment_n, p.randaugment_m, rng)
    img = geometric_affine(img, angle_deg=rng.uniform(-p.rotation_deg, p.rotation_deg))
    img = geometric_affine(img, shear_deg=rng.uniform(-p.shear_deg, p.shear_deg),
                           scale=rng.uniform(*p.scale_range))
    img = adjust_brightness(img, _jitter_factor(rng, p.brightness))
    img = adjust_contrast(img, _jitter_factor(rng, p.contrast))
    img = adjust_saturation(img, _jitter_factor(rng, p.saturation))
    img = adjust_hue(img, rng.uniform(-p.hue, p.hue) if p.hue > 0 else 0.0)
    if rng.random() < p.p_hflip:
        img = hflip(img)
    if rng.random() < p.p_vflip:
        img = vflip(img)
    if rng.random() < p.p_blur:
        img = gaussian_blur(img, p.blur_kernel, p.blur_sigma)
    if rng.random() < p.p_posterize:
        img = posterize(img, p.posterize_bits)
    chw = random_erasing(to_unit_chw(img), p.p_erase, p.erase_scale, rng)
    return standardize(chw, p)


def tta_resize(crop_size: int) -> int:
    return int(round(crop_size * 256 / 224))


def tta_variants(image, profile: AugmentationProfile) -> list[np.ndarray]:
    """Original, hflip, vflip, resize-then-center-crop, and a small rotation."""
    base = resize(image, profile.crop_size)
    big = resize(image, max(tta_resize(profile.crop_size), profile.crop_size))
    views = [
        base,
        hflip(base),
        vflip(base),
        center_crop(big, profile.crop_size),
        geometric_affine(base, angle_deg=TTA_ROTATION_DEG),
    ]
    return [standardize(to_unit_chw(v), profile) for v in views]
