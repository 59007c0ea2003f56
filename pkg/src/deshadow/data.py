"""Desk-scale paired shadow data: procedural base scenes, the synthetic
shadow generator (hard / soft / self), dataset directory I/O and the
pixel-space <-> diffusion-space conversions.

Pixel arrays are float64 (H, W, 3) in [0, 1]; masks are (H, W) in [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
SHADOW_KINDS = ("hard", "soft", "self")


@dataclass
class ShadowSpec:
    """Parameters of one synthetic shadow; geometry is in unit coordinates."""
    kind: str
    geometry: dict
    attenuation: float
    penumbra: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHADOW_KINDS:
            raise ValueError(f"unknown shadow kind {self.kind!r}")
        if not 0.0 < self.attenuation < 1.0:
            raise ValueError("attenuation must lie strictly inside (0, 1)")
        if self.penumbra < 0:
            raise ValueError("penumbra width must be >= 0")


@dataclass
class ShadowPair:
    shadow: np.ndarray            # x_w, (H, W, 3) in [0, 1]
    clean: np.ndarray             # x_0, same shape
    mask: np.ndarray | None = None
    provenance: str = "synthetic"
    name: str = ""

    def __post_init__(self):
        if self.shadow.shape != self.clean.shape:
            raise ValueError("shadow and clean shapes must match")


def to_diffusion(img01: np.ndarray) -> torch.Tensor:
    """(H, W, 3) [0, 1] array -> (3, H, W) float32 tensor in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(img01, dtype=np.float32))
    return t.permute(2, 0, 1) * 2.0 - 1.0


def from_diffusion(x: torch.Tensor) -> np.ndarray:
    """(3, H, W) [-1, 1] tensor -> clipped (H, W, 3) float64 array in [0, 1]."""
    arr = x.detach().cpu().double().permute(1, 2, 0).numpy()
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def _polygon_indicator(vertices: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Rasterize unit-square polygon vertices to a {0, 1} float field."""
    h, w = size
    canvas = Image.new("L", (w, h), 0)
    pts = [(float(vx * (w - 1)), float(vy * (h - 1))) for vx, vy in vertices]
    ImageDraw.Draw(canvas).polygon(pts, fill=255)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _disk_silhouette(center, radius, size) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = center[1] * (h - 1), center[0] * (w - 1)
    r = radius * min(h, w)
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2).astype(np.float64)


def attenuation_field(spec: ShadowSpec, size: tuple[int, int]) -> np.ndarray:
    """Multiplicative brightness field in [attenuation, 1]."""
    h, w = size
    if spec.kind in ("hard", "soft"):
        verts = np.asarray(spec.geometry["vertices"], dtype=np.float64)
        ind = _polygon_indicator(verts, size)
    else:
        ind = _disk_silhouette(spec.geometry["center"],
                               spec.geometry["radius"], size)
    if ind.sum() == 0:
        raise ValueError(f"degenerate {spec.kind} shadow geometry: zero area")

    if spec.kind == "soft":
        ind = gaussian_filter(ind, sigma=max(spec.penumbra, 1e-3))
        ind = np.clip(ind, 0.0, 1.0)
    elif spec.kind == "self":
        # shade the object's own surface: a directional ramp across the
        # silhouette, darkest on the side facing away from the light
        dx, dy = spec.geometry["light_dir"]
        norm = max(np.hypot(dx, dy), 1e-9)
        dx, dy = dx / norm, dy / norm
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = spec.geometry["center"][1] * (h - 1), spec.geometry["center"][0] * (w - 1)
        r = spec.geometry["radius"] * min(h, w)
        ramp = ((xx - cx) * dx + (yy - cy) * dy) / (2.0 * r) + 0.5
        ind = ind * np.clip(ramp, 0.0, 1.0)
        if spec.penumbra > 0:
            ind = np.clip(gaussian_filter(ind, sigma=spec.penumbra), 0.0, 1.0)

    return 1.0 - (1.0 - spec.attenuation) * ind


# darkening below half an 8-bit quantization step is invisible; such
# pixels never count as shadow, so the mask empties in the attenuation -> 1
# limit
MIN_VISIBLE_DARKENING = 0.5 / 255.0


def synth_shadow(clean: np.ndarray, spec: ShadowSpec) -> ShadowPair:
    """Darken a clean image with the spec's attenuation field.

    The mask is the field thresholded at the midpoint of [attenuation, 1];
    pixels where the field equals 1 are untouched.
    """
    if clean.min() < 0.0 or clean.max() > 1.0:
        raise ValueError("clean image must be in [0, 1] pixel space")
    fld = attenuation_field(spec, clean.shape[:2])
    shadow = clean * fld[:, :, None]
    midpoint = (spec.attenuation + 1.0) / 2.0
    mask = ((fld < midpoint) & (1.0 - fld > MIN_VISIBLE_DARKENING))
    return ShadowPair(shadow=shadow, clean=clean, mask=mask.astype(np.float64),
                      provenance="synthetic")


def make_base_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural scene: color gradient, a few shapes, mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (xx * np.cos(theta) + yy * np.sin(theta) + 1.0) / 2.0
    c0, c1 = rng.uniform(0.25, 0.9, 3), rng.uniform(0.25, 0.9, 3)
    img = ramp[:, :, None] * c0 + (1.0 - ramp[:, :, None]) * c1

    for _ in range(rng.integers(2, 5)):
        color = rng.uniform(0.15, 0.95, 3)
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0, 0.7, 2)
            x1, y1 = x0 + rng.uniform(0.15, 0.4), y0 + rng.uniform(0.15, 0.4)
            region = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        else:
            cx, cy = rng.uniform(0.15, 0.85, 2)
            r = rng.uniform(0.08, 0.25)
            region = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
        img[region] = 0.65 * color + 0.35 * img[region]

    freq = rng.uniform(2, 6)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.03 * np.sin(2 * np.pi * freq * (xx + yy) + phase)[:, :, None]
    return np.clip(img, 0.05, 0.98)


def random_spec(kind: str, rng: np.random.Generator) -> ShadowSpec:
    """Draw one shadow spec with moderate coverage and attenuation."""
    attenuation = float(rng.uniform(0.35, 0.65))
    seed = int(rng.integers(0, 2 ** 31 - 1))
    if kind in ("hard", "soft"):
        cx, cy = rng.uniform(0.25, 0.75, 2)
        n_verts = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_verts))
        radii = rng.uniform(0.18, 0.42, n_verts)
        verts = np.stack([np.clip(cx + radii * np.cos(angles), 0.02, 0.98),
                          np.clip(cy + radii * np.sin(angles), 0.02, 0.98)],
                         axis=1)
        penumbra = float(rng.uniform(1.5, 3.5)) if kind == "soft" else 0.0
        return ShadowSpec(kind=kind, geometry={"vertices": verts.tolist()},
                          attenuation=attenuation, penumbra=penumbra, seed=seed)
    center = rng.uniform(0.3, 0.7, 2)
    geometry = {
        "center": [float(center[0]), float(center[1])],
        "radius": float(rng.uniform(0.2, 0.38)),
        "light_dir": [float(rng.normal()), float(rng.normal())],
    }
    return ShadowSpec(kind="self", geometry=geometry,
                      attenuation=attenuation,
                      penumbra=float(rng.uniform(0.5, 1.5)), seed=seed)


def make_synthetic_dataset(counts: dict[str, int], size: int, seed: int
                           ) -> tuple[list[ShadowPair], list[ShadowSpec]]:
    """Seeded set of paired images: counts per kind at a fixed size."""
    if sum(counts.get(k, 0) for k in SHADOW_KINDS) <= 0:
        raise ValueError("dataset counts must include at least one pair")
    rng = np.random.default_rng(seed)
    pairs, specs = [], []
    index = 0
    for kind in SHADOW_KINDS:
        for _ in range(counts.get(kind, 0)):
            spec = random_spec(kind, rng)
            pair = synth_shadow(make_base_image(size, rng), spec)
            pair.name = f"pair_{index:04d}_{kind}"
            pairs.append(pair)
            specs.append(spec)
            index += 1
    return pairs, specs


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_pair(pair: ShadowPair, root: Path) -> None:
    root = Path(root)
    for sub in ("shadow", "clean"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(pair.shadow)).save(root / "shadow" / f"{pair.name}.png")
    Image.fromarray(_to_uint8(pair.clean)).save(root / "clean" / f"{pair.name}.png")
    if pair.mask is not None:
        (root / "mask").mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_uint8(pair.mask)).save(root / "mask" / f"{pair.name}.png")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def load_paired_dataset(directory) -> list[ShadowPair]:
    """Read a shadow/ + clean/ (+ optional mask/) directory of matched files.

    Unmatched or shape-mismatched files are skipped with a warning; an empty
    result is an error. Pairs come back sorted by filename.
    """
    root = Path(directory)
    shadow_dir, clean_dir, mask_dir = root / "shadow", root / "clean", root / "mask"
    if not shadow_dir.is_dir() or not clean_dir.is_dir():
        raise FileNotFoundError(f"{root} lacks shadow/ and clean/ subdirectories")

    pairs = []
    for spath in sorted(shadow_dir.iterdir()):
        if spath.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        cpath = clean_dir / spath.name
        if not cpath.exists():
            log.warning("skipping %s: no clean counterpart", spath.name)
            continue
        shadow, clean = load_image(spath), load_image(cpath)
        if shadow.shape != clean.shape:
            log.warning("skipping %s: shape mismatch %s vs %s",
                        spath.name, shadow.shape, clean.shape)
            continue
        mask = None
        mpath = mask_dir / spath.name
        if mpath.exists():
            mask = load_mask(mpath)
            if mask.shape != shadow.shape[:2]:
                log.warning("dropping mask for %s: shape mismatch", spath.name)
                mask = None
        pairs.append(ShadowPair(shadow=shadow, clean=clean, mask=mask,
                                provenance="external", name=spath.stem))
    if not pairs:
        raise ValueError(f"no usable pairs found under {root}")
    return pairs
