"""Synthetic tampered images, the perturbation ladder, and on-disk datasets.

Every function here is a pure function of its seed and parameters.  Images are
``uint8 [H, W, 3]``; masks are ``uint8 [H, W]`` with 1 marking tampered pixels
(stored on disk as 0/255 PNG).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

TAMPER_KINDS = ("copy-move", "splice", "inpaint")
PERTURBATIONS = ("brightness", "contrast", "darken", "dither", "pink-noise", "compression-surrogate")
SEVERITIES = range(10)
MIN_AREA, MAX_AREA = 0.01, 0.50

# Severity ladders, index = severity.  Entry 0 is never applied (identity).
LADDERS = {
    "brightness": (0, 6, 12, 18, 24, 30, 36, 42, 48, 54),                  # added offset
    "contrast": (1.0, 0.92, 0.84, 0.76, 0.68, 0.60, 0.52, 0.44, 0.36, 0.28),  # scale about 128
    "darken": (1.0, 0.93, 0.86, 0.79, 0.72, 0.65, 0.58, 0.51, 0.44, 0.37),    # multiplier
    "dither": (256, 128, 96, 64, 48, 32, 24, 16, 12, 8),                   # quantization levels
    "pink-noise": (0, 2, 4, 6, 8, 10, 12, 14, 16, 18),                     # noise std, 8-bit units
    "compression-surrogate": (64, 36, 28, 21, 15, 10, 6, 4, 2, 1),          # kept DCT coeffs per 8x8 block
}


class DataError(ValueError):
    """Malformed dataset, manifest or generator request."""


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Clip to [0, 255] and round half away from zero."""
    x = np.clip(x, 0.0, 255.0)
    return np.floor(x + 0.5).astype(np.uint8)


def _lowpass_noise(rng, size: int, cutoff: float) -> np.ndarray:
    white = rng.normal(size=(size, size))
    f = np.fft.fftfreq(size)
    r2 = f[:, None] ** 2 + f[None, :] ** 2
    out = np.real(np.fft.ifft2(np.fft.fft2(white) * np.exp(-r2 / (2 * cutoff ** 2))))
    return out / (out.std() + 1e-12)


def _ellipse(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[:size, :size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _convex_polygon(rng, size, cy, cx, r):
    n = rng.integers(3, 7)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = r * rng.uniform(0.6, 1.0, n)
    vy, vx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
    yy, xx = np.mgrid[:size, :size]
    inside = np.ones((size, size), dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        # left-of-edge test for counter-clockwise vertex order
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        inside &= cross >= 0
    return inside


def gen_base(seed: int, size: int = 64) -> np.ndarray:
    """Procedural background (gradient + band-limited noise) with 2-5 textured shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        a, gy, gx = rng.uniform(40, 200), rng.uniform(-60, 60), rng.uniform(-60, 60)
        img[..., c] = a + gy * yy + gx * xx + rng.uniform(5, 20) * _lowpass_noise(rng, size, 0.08)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.1, 0.3) * size
        if rng.random() < 0.5:
            region = _ellipse(size, cy, cx, r, r * rng.uniform(0.5, 1.5))
        else:
            region = _convex_polygon(rng, size, cy, cx, r)
        color = rng.uniform(0, 255, 3)
        texture = rng.uniform(3, 25) * _lowpass_noise(rng, size, rng.uniform(0.05, 0.3))
        img[region] = color + texture[region][:, None]
    img += rng.normal(scale=3.0, size=img.shape)
    return to_uint8(img)


def _region(rng, size: int) -> tuple[np.ndarray, dict]:
    """Rectangle or ellipse mask covering 4-25% of the image (well inside the 1-50% contract)."""
    while True:
        frac = rng.uniform(0.04, 0.25)
        aspect = rng.uniform(0.6, 1.6)
        shape = "rect" if rng.random() < 0.5 else "ellipse"
        area = frac * size * size * (1 if shape == "rect" else 4 / np.pi)
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        if not (2 <= h <= size // 2 and 2 <= w <= size // 2):
            continue
        local = np.ones((h, w), dtype=bool)
        if shape == "ellipse":
            local = _ellipse(max(h, w), (h - 1) / 2, (w - 1) / 2, h / 2, w / 2)[:h, :w]
        a = local.sum() / size ** 2
        if MIN_AREA <= a <= MAX_AREA:
            return local, {"shape": shape, "h": h, "w": w}


def _place(rng, size, h, w):
    return int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))


def _paste(base, local, ty, tx, src_img, sy, sx):
    out = base.copy()
    h, w = local.shape
    tgt = out[ty:ty + h, tx:tx + w]
    tgt[local] = src_img[sy:sy + h, sx:sx + w][local]
    mask = np.zeros(base.shape[:2], dtype=np.uint8)
    mask[ty:ty + h, tx:tx + w][local] = 1
    return out, mask


def _all_changed(before, after, mask):
    diff = np.any(before != after, axis=-1)
    return np.array_equal(diff, mask.astype(bool))


def gen_tampered(seed: int, kind: str, size: int = 64) -> Sample:
    """Tampered image with the exact mask of pasted or filled pixels."""
    if kind not in TAMPER_KINDS:
        raise DataError(f"unknown tamper kind {kind!r}; expected one of {TAMPER_KINDS}")
    base = gen_base(seed, size)
    rng = np.random.default_rng([seed, TAMPER_KINDS.index(kind) + 1])
    prov = {"kind": kind, "seed": int(seed)}
    donor_seed = int(np.random.SeedSequence([seed, 99]).generate_state(1)[0])

    for _ in range(200):
        local, geom = _region(rng, size)
        h, w = local.shape
        ty, tx = _place(rng, size, h, w)
        region = {**geom, "y": ty, "x": tx}
        if kind == "copy-move":
            sy, sx = _place(rng, size, h, w)
            if not (sy + h <= ty or ty + h <= sy or sx + w <= tx or tx + w <= sx):
                continue  # source and target boxes overlap
            img, mask = _paste(base, local, ty, tx, base, sy, sx)
            extra = {"source": {"y": sy, "x": sx}, "offset": {"dy": ty - sy, "dx": tx - sx}}
        elif kind == "splice":
            donor = gen_base(donor_seed, size)
            sy, sx = _place(rng, size, h, w)
            img, mask = _paste(base, local, ty, tx, donor, sy, sx)
            extra = {"donor_seed": donor_seed, "source": {"y": sy, "x": sx}}
        else:
            img, mask = _inpaint(base, local, ty, tx)
            extra = {}
        if kind != "inpaint" and not _all_changed(base, img, mask):
            continue  # some pasted pixel coincides with the original; redraw
        prov.update({"region": region, **extra})
        return Sample(img, mask, prov)
    raise DataError(f"could not place a {kind} region for seed {seed}")


def _inpaint(base, local, ty, tx):
    """Fill the region with the mean of row-wise and column-wise linear interpolation of its bounding box border."""
    size = base.shape[0]
    h, w = local.shape
    img = base.astype(np.float64)
    y0, y1 = max(ty - 1, 0), min(ty + h, size - 1)
    x0, x1 = max(tx - 1, 0), min(tx + w, size - 1)
    ys = np.arange(ty, ty + h)
    xs = np.arange(tx, tx + w)
    ty_ = ((ys - y0) / max(y1 - y0, 1))[:, None, None]
    tx_ = ((xs - x0) / max(x1 - x0, 1))[None, :, None]
    vert = (1 - ty_) * img[y0, tx:tx + w][None] + ty_ * img[y1, tx:tx + w][None]
    horiz = (1 - tx_) * img[ty:ty + h, x0][:, None] + tx_ * img[ty:ty + h, x1][:, None]
    fill = to_uint8(0.5 * (vert + horiz))
    out = base.copy()
    out[ty:ty + h, tx:tx + w][local] = fill[local]
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[ty:ty + h, tx:tx + w][local] = 1
    return out, mask


# ---------------------------------------------------------------- perturbations
def pink_noise(shape: tuple[int, int], rng) -> np.ndarray:
    """Unit-variance 2-D noise with power spectral density proportional to 1/f."""
    H, W = shape
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.rfftfreq(W)[None, :]
    f = np.sqrt(fy ** 2 + fx ** 2)
    f[0, 0] = np.inf
    spec = np.fft.rfft2(rng.normal(size=(H, W))) / np.sqrt(f)
    out = np.fft.irfft2(spec, s=(H, W))
    return out / out.std()


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)
    M = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    M[0] /= np.sqrt(2.0)
    return M


def _zigzag(n: int = 8) -> np.ndarray:
    order = sorted(((i, j) for i in range(n) for j in range(n)),
                   key=lambda p: (p[0] + p[1], p[1] if (p[0] + p[1]) % 2 else p[0]))
    return np.array(order)


def _compress(img: np.ndarray, keep: int) -> np.ndarray:
    H, W, _ = img.shape
    n = 8
    ph, pw = (-H) % n, (-W) % n
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    Hp, Wp = x.shape[:2]
    blocks = x.reshape(Hp // n, n, Wp // n, n, 3).transpose(0, 2, 4, 1, 3)
    D = _dct_matrix(n)
    coef = D @ blocks @ D.T
    zz = _zigzag(n)
    keep_mask = np.zeros((n, n), dtype=bool)
    keep_mask[zz[:keep, 0], zz[:keep, 1]] = True
    rec = D.T @ (coef * keep_mask) @ D
    out = rec.transpose(0, 3, 1, 4, 2).reshape(Hp, Wp, 3)[:H, :W]
    return to_uint8(out)


def perturb(image: np.ndarray, kind: str, severity: int, seed: int = 0) -> np.ndarray:
    """Apply one post-processing perturbation; severity 0 returns an identical copy."""
    if kind not in PERTURBATIONS:
        raise DataError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    if int(severity) != severity or not 0 <= severity <= 9:
        raise DataError(f"severity must be an integer in 0..9, got {severity}")
    if severity == 0:
        return image.copy()
    v = LADDERS[kind][severity]
    x = image.astype(np.float64)
    # one noise draw per (seed, kind): severities scale the same realization
    rng = np.random.default_rng([seed, PERTURBATIONS.index(kind)])
    if kind == "brightness":
        return to_uint8(x + v)
    if kind == "contrast":
        return to_uint8(128.0 + v * (x - 128.0))
    if kind == "darken":
        return to_uint8(x * v)
    if kind == "dither":
        q = 256.0 / v
        u = rng.uniform(-0.5, 0.5, size=x.shape) * q
        return to_uint8(np.floor((x + u) / q) * q + q / 2)
    if kind == "pink-noise":
        noise = np.stack([pink_noise(x.shape[:2], rng) for _ in range(x.shape[2])], -1)
        return to_uint8(x + v * noise)
    return _compress(image, v)


# -------------------------------------------------------------------- datasets
def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate(count: int, seed: int, size: int = 64) -> list[Sample]:
    """``count`` samples cycling through the tamper kinds."""
    out = []
    for k in range(count):
        s = gen_tampered(sample_seed(seed, k), TAMPER_KINDS[k % len(TAMPER_KINDS)], size)
        s.provenance["id"] = f"{k:05d}"
        out.append(s)
    return out


def save_dataset(samples: list[Sample], out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        sid = s.provenance.get("id", f"{k:05d}")
        img_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
        Image.fromarray(s.image, mode="RGB").save(out / img_rel)
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(out / mask_rel)
        entries.append({"id": sid, "seed": s.provenance.get("seed"), "kind": s.provenance.get("kind"),
                        "image": img_rel, "mask": mask_rel, "provenance": s.provenance})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "samples": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def validate_manifest(root) -> list[str]:
    """Problems found in a dataset directory (empty list when valid)."""
    root = Path(root)
    problems = []
    try:
        man = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"manifest unreadable: {exc}"]
    for e in man.get("samples", []):
        for key in ("id", "seed", "kind", "image", "mask"):
            if key not in e:
                problems.append(f"entry {e.get('id')} lacks {key!r}")
        for key in ("image", "mask"):
            if key in e and not (root / e[key]).is_file():
                problems.append(f"entry {e.get('id')}: missing file {e[key]}")
    return problems


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    problems = validate_manifest(root)
    if problems:
        raise DataError("; ".join(problems))
    man = json.loads((root / "manifest.json").read_text())
    out = []
    for e in man["samples"]:
        img = np.asarray(Image.open(root / e["image"]).convert("RGB"))
        mask = (np.asarray(Image.open(root / e["mask"]).convert("L")) > 127).astype(np.uint8)
        out.append(Sample(img, mask, e.get("provenance", {"id": e["id"]})))
    return out
