"""Synthetic scene generation, dataset I/O, normalization, sparse sampling.

Scenes are endoscopy-like tube interiors rendered by ray casting: a camera
sits on a swept centerline and every pixel ray is intersected with a
tube wall whose centerline, radius and surface carry smooth procedural
perturbations. With all perturbations disabled the tube is a straight
cylinder and the per-pixel depth has a closed form, which the tests use
as an analytic oracle.

Depth is stored on disk as 16-bit grayscale PNG with a declared scale
(default 0.1 mm per raw unit) recorded in a JSON sidecar next to each
depth file. Splits are declared in tab-separated manifests with one
``id<TAB>image_path<TAB>depth_path`` line per sample; paths are resolved
relative to the manifest location.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

DEFAULT_DEPTH_SCALE = 0.1  # mm per raw 16-bit unit


def stable_seed(*parts) -> int:
    """Deterministic 32-bit seed from arbitrary parts (unlike hash())."""
    return zlib.crc32(":".join(str(p) for p in parts).encode("utf-8"))


@dataclass
class DepthMap:
    """Dense per-pixel depth in millimeters with a validity mask."""

    values: np.ndarray  # (H, W) float32, mm
    mask: np.ndarray    # (H, W) bool

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError(
                f"depth/mask shape mismatch: {self.values.shape} vs {self.mask.shape}"
            )

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SparseDepth:
    """Sparse depth observations on the image grid; zero where invalid."""

    values: np.ndarray  # (H, W) float32, mm
    mask: np.ndarray    # (H, W) bool

    @property
    def n_points(self) -> int:
        return int(self.mask.sum())

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: DepthMap
    sparse: SparseDepth
    id: str


@dataclass
class SceneConfig:
    """Parameters of the procedural tube generator (distances in mm)."""

    height: int = 64
    width: int = 80
    d_min: float = 10.0
    d_max: float = 200.0
    focal: float = 0.0          # pixels; 0 means "use the image width"
    radius: float = 22.0        # base tube radius
    radius_wobble: float = 0.12  # relative radius modulation
    curve_amp: float = 6.0      # centerline lateral excursion
    curve_period: float = 140.0  # along the view axis
    bump_amp: float = 0.06      # relative wall perturbation
    n_bumps: int = 3
    n_highlights: int = 3
    n_flat_patches: int = 2
    straight: bool = False      # exact cylinder, no perturbations

    def __post_init__(self):
        if self.d_min >= self.d_max:
            raise ValueError(f"degenerate depth range [{self.d_min}, {self.d_max}]")
        if self.height % 4 or self.width % 4:
            raise ValueError(f"resolution {self.height}x{self.width} not divisible by 4")

    @property
    def focal_px(self) -> float:
        return self.focal if self.focal > 0 else float(self.width)


def _ray_grid(cfg: SceneConfig):
    f = cfg.focal_px
    cy = (cfg.height - 1) / 2.0
    cx = (cfg.width - 1) / 2.0
    v, u = np.meshgrid(
        (np.arange(cfg.height) - cy) / f,
        (np.arange(cfg.width) - cx) / f,
        indexing="ij",
    )
    return u, v  # per-pixel ray direction (u, v, 1), unnormalized


class _TubeField:
    """Signed distance-to-wall along rays for one procedural tube."""

    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.cfg = cfg
        r0 = cfg.radius
        # keep the camera strictly inside the wall for every draw
        self.curve_amp = 0.0 if cfg.straight else min(cfg.curve_amp, 0.45 * r0)
        self.curve_period = cfg.curve_period * rng.uniform(0.8, 1.25)
        self.curve_phase = rng.uniform(0, 2 * np.pi, size=2)
        self.wobble = 0.0 if cfg.straight else min(cfg.radius_wobble, 0.3)
        self.wobble_period = cfg.curve_period * rng.uniform(0.5, 0.9)
        self.wobble_phase = rng.uniform(0, 2 * np.pi)
        if cfg.straight or cfg.n_bumps == 0:
            self.bumps = np.zeros((0, 4))
        else:
            k = np.arange(1, cfg.n_bumps + 1)
            self.bumps = np.stack(
                [
                    cfg.bump_amp * rng.uniform(0.4, 1.0, cfg.n_bumps) / k,
                    rng.integers(2, 6, cfg.n_bumps).astype(float),   # angular mode
                    rng.uniform(0.05, 0.25, cfg.n_bumps),            # axial frequency
                    rng.uniform(0, 2 * np.pi, cfg.n_bumps),          # phase
                ],
                axis=1,
            )

    def centerline(self, z):
        a = self.curve_amp
        w = 2 * np.pi / self.curve_period
        cx = a * (np.sin(w * z + self.curve_phase[0]) - np.sin(self.curve_phase[0]))
        cy = a * (np.sin(0.73 * w * z + self.curve_phase[1]) - np.sin(self.curve_phase[1]))
        return cx, cy

    def signed(self, u, v, z):
        """Radial coordinate minus wall radius at axial position z (per ray)."""
        cx, cy = self.centerline(z)
        px = u * z - cx
        py = v * z - cy
        rho = np.sqrt(px * px + py * py)
        r = self.cfg.radius * (
            1.0 + self.wobble * np.sin(2 * np.pi * z / self.wobble_period + self.wobble_phase)
        )
        if len(self.bumps):
            theta = np.arctan2(py, px)
            pert = np.zeros_like(rho)
            for amp, mode, freq, phase in self.bumps:
                pert += amp * np.sin(mode * theta + freq * z + phase)
            r = r * (1.0 + pert)
        return rho - r


def _cast_depth(cfg: SceneConfig, tube: _TubeField) -> np.ndarray:
    """First wall crossing along each pixel ray, by march + bisection."""
    u, v = _ray_grid(cfg)
    u = u.ravel()
    v = v.ravel()
    z_near = 0.25 * cfg.d_min
    z_far = 1.05 * cfg.d_max
    n_march = 256

    zs = np.linspace(z_near, z_far, n_march)
    lo = np.full(u.shape, z_near)
    hi = np.full(u.shape, z_far)
    found = np.zeros(u.shape, dtype=bool)
    g_prev = tube.signed(u, v, np.full(u.shape, zs[0]))
    hit_at_start = g_prev >= 0
    for z in zs[1:]:
        g = tube.signed(u, v, np.full(u.shape, z))
        crossing = (~found) & (g_prev < 0) & (g >= 0)
        lo = np.where(crossing, z - (zs[1] - zs[0]), lo)
        hi = np.where(crossing, z, hi)
        found |= crossing
        g_prev = g

    for _ in range(48):
        mid = 0.5 * (lo + hi)
        gm = tube.signed(u, v, mid)
        hi = np.where(gm >= 0, mid, hi)
        lo = np.where(gm >= 0, lo, mid)

    depth = np.where(found, 0.5 * (lo + hi), z_far)
    depth = np.where(hit_at_start, z_near, depth)
    return np.clip(depth, cfg.d_min, cfg.d_max).reshape(cfg.height, cfg.width)


def _smooth_noise(shape, rng: np.random.Generator, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.standard_normal(shape), sigma)
    peak = np.abs(n).max()
    return n / peak if peak > 0 else n


def _shade_rgb(cfg: SceneConfig, depth: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = depth.shape
    falloff = 1.0 / (1.0 + (depth / (0.55 * cfg.d_max)) ** 2)

    base = np.array([0.78, 0.33, 0.30])[:, None, None]
    tint = np.array([0.10, 0.05, 0.04])[:, None, None]
    texture = 0.5 * _smooth_noise((h, w), rng, sigma=3.0) + 0.25 * _smooth_noise(
        (h, w), rng, sigma=1.2
    )
    banding = 0.12 * np.sin(2 * np.pi * depth / (0.22 * cfg.d_max) + rng.uniform(0, 2 * np.pi))

    yy, xx = np.mgrid[0:h, 0:w]
    flat = np.zeros((h, w))
    for _ in range(cfg.n_flat_patches):
        cy0, cx0 = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.1, 0.25) * h, rng.uniform(0.1, 0.25) * w
        flat = np.maximum(flat, np.exp(-(((yy - cy0) / ry) ** 2 + ((xx - cx0) / rx) ** 2)))
    modulation = (texture + banding) * (1.0 - 0.9 * flat)

    rgb = (base + tint * modulation) * falloff[None]

    for _ in range(cfg.n_highlights):
        cy0, cx0 = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.02, 0.08) * h, rng.uniform(0.02, 0.08) * w
        spot = np.exp(-(((yy - cy0) / ry) ** 2 + ((xx - cx0) / rx) ** 2))
        rgb = rgb + 0.9 * spot[None]

    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def synth_scene(seed: int, config: SceneConfig | None = None) -> tuple[np.ndarray, DepthMap]:
    """Render one procedural tube scene; deterministic per (seed, config)."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    tube = _TubeField(cfg, rng)
    depth = _cast_depth(cfg, tube).astype(np.float32)
    rgb = _shade_rgb(cfg, depth.astype(np.float64), rng)
    mask = np.ones_like(depth, dtype=bool)
    return rgb, DepthMap(values=depth, mask=mask)


def straight_tube_depth(cfg: SceneConfig) -> np.ndarray:
    """Closed-form depth of the unperturbed cylinder (test oracle)."""
    u, v = _ray_grid(cfg)
    rho = np.hypot(u, v)
    with np.errstate(divide="ignore"):
        z = np.where(rho > 0, cfg.radius / np.maximum(rho, 1e-300), np.inf)
    return np.clip(z, cfg.d_min, cfg.d_max)


def sparsify(
    depth: DepthMap,
    n_points: int,
    seed: int,
    noise_std: float = 0.0,
) -> SparseDepth:
    """Sample n_points valid pixels uniformly at random, without replacement.

    Values are copied exactly from the ground truth unless noise_std > 0,
    in which case Gaussian noise (mm) is added to the sampled values.
    """
    valid = np.flatnonzero(depth.mask)
    if n_points > valid.size:
        raise ValueError(
            f"requested {n_points} sparse points but only {valid.size} valid pixels"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(valid, size=n_points, replace=False) if n_points else np.array([], dtype=int)

    values = np.zeros(depth.shape, dtype=np.float32)
    mask = np.zeros(depth.shape, dtype=bool)
    values.flat[chosen] = depth.values.flat[chosen]
    mask.flat[chosen] = True
    if noise_std > 0 and n_points:
        values.flat[chosen] += rng.normal(0.0, noise_std, size=n_points).astype(np.float32)
    return SparseDepth(values=values, mask=mask)


def normalize_depth(values, d_min: float, d_max: float):
    """Affine map [d_min, d_max] -> [-1, 1], clamped; numpy or torch."""
    if not 0 < d_min < d_max:
        raise ValueError(f"invalid depth range [{d_min}, {d_max}]")
    return (2.0 * (values - d_min) / (d_max - d_min) - 1.0).clip(-1.0, 1.0)


def denormalize_depth(values, d_min: float, d_max: float):
    """Inverse of the (unclamped) normalization affine map."""
    if not 0 < d_min < d_max:
        raise ValueError(f"invalid depth range [{d_min}, {d_max}]")
    return (values + 1.0) * 0.5 * (d_max - d_min) + d_min


# ---------------------------------------------------------------------------
# file I/O


def _sidecar_path(depth_path: Path) -> Path:
    return depth_path.with_suffix(".json")


def save_depth(
    depth: DepthMap,
    path,
    scale: float = DEFAULT_DEPTH_SCALE,
    d_min: float | None = None,
    d_max: float | None = None,
    extra: dict | None = None,
) -> None:
    """Write 16-bit depth PNG plus its JSON sidecar; invalid pixels store 0.

    `extra` entries are merged into the sidecar, letting callers embed
    provenance (config snapshot, seeds) next to the pixels.
    """
    path = Path(path)
    raw = np.round(depth.values / scale)
    raw = np.where(depth.mask, np.clip(raw, 1, 65535), 0).astype(np.uint16)
    Image.fromarray(raw).save(path)
    meta = {
        "scale_mm_per_unit": scale,
        "d_min_mm": float(d_min) if d_min is not None else float(depth.values[depth.mask].min()) if depth.mask.any() else 0.0,
        "d_max_mm": float(d_max) if d_max is not None else float(depth.values[depth.mask].max()) if depth.mask.any() else 0.0,
    }
    if extra:
        meta.update(extra)
    _sidecar_path(path).write_text(json.dumps(meta, indent=1))


def load_depth(path) -> tuple[DepthMap, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"depth file not found: {path}")
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"depth sidecar metadata not found: {sidecar}")
    meta = json.loads(sidecar.read_text())
    if "scale_mm_per_unit" not in meta:
        raise ValueError(f"sidecar {sidecar} missing scale_mm_per_unit")
    raw = np.array(Image.open(path))
    if raw.dtype != np.uint16:
        raise ValueError(f"{path}: expected 16-bit depth PNG, got {raw.dtype}")
    values = raw.astype(np.float32) * float(meta["scale_mm_per_unit"])
    return DepthMap(values=values, mask=raw > 0), meta


def save_image(image: np.ndarray, path) -> None:
    """(3, H, W) float in [0,1] -> 8-bit RGB PNG."""
    arr = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(Path(path))


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    arr = np.array(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_sample(
    image_path,
    depth_path,
    sample_id: str = "",
    n_points: int = 0,
    sparsity_seed: int = 0,
) -> Sample:
    """Load one (image, depth) pair, optionally sparsifying on the fly."""
    image = load_image(image_path)
    depth, _ = load_depth(depth_path)
    if image.shape[1:] != depth.shape:
        raise ValueError(
            f"sample {sample_id or image_path}: image {image.shape[1:]} vs depth {depth.shape}"
        )
    sparse = sparsify(depth, n_points, sparsity_seed) if n_points else SparseDepth(
        values=np.zeros(depth.shape, dtype=np.float32),
        mask=np.zeros(depth.shape, dtype=bool),
    )
    return Sample(image=image, depth=depth, sparse=sparse, id=sample_id or Path(image_path).stem)


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    """Parse a split manifest into (id, image_path, depth_path) triples."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        sid, img, dep = parts
        img_path = (path.parent / img).resolve()
        dep_path = (path.parent / dep).resolve()
        for p in (img_path, dep_path):
            if not p.exists():
                raise FileNotFoundError(f"{path}:{lineno}: listed file missing: {p}")
        rows.append((sid, img_path, dep_path))
    return rows


class ManifestDataset:
    """Deterministic split loader with per-(sample, epoch) sparsification.

    Iteration order follows the manifest. The sparsity pattern of sample
    ``sid`` at epoch ``e`` is seeded by stable_seed(seed, sid, e), so two
    runs with the same configuration see identical sparse maps.
    """

    def __init__(self, manifest_path, n_points: int, seed: int, noise_std: float = 0.0):
        self.rows = read_manifest(manifest_path)
        self.n_points = n_points
        self.seed = seed
        self.noise_std = noise_std

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> list[str]:
        return [r[0] for r in self.rows]

    def get(self, idx: int, epoch: int = 0, n_points: int | None = None,
            sparsity_seed: int | None = None) -> Sample:
        sid, img_path, dep_path = self.rows[idx]
        image = load_image(img_path)
        depth, _ = load_depth(dep_path)
        if image.shape[1:] != depth.shape:
            raise ValueError(f"sample {sid}: image {image.shape[1:]} vs depth {depth.shape}")
        n = self.n_points if n_points is None else n_points
        s = stable_seed(self.seed, sid, epoch) if sparsity_seed is None else sparsity_seed
        sparse = sparsify(depth, n, s, self.noise_std)
        return Sample(image=image, depth=depth, sparse=sparse, id=sid)


def generate_dataset(
    out_dir,
    n_train: int,
    n_val: int,
    n_test: int,
    scene: SceneConfig,
    seed: int,
    scale: float = DEFAULT_DEPTH_SCALE,
) -> dict:
    """Render and write a full synthetic dataset with split manifests."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)

    splits = {"train": n_train, "val": n_val, "test": n_test}
    for split, count in splits.items():
        lines = []
        for i in range(count):
            sid = f"{split}_{i:04d}"
            rgb, depth = synth_scene(stable_seed(seed, split, i), scene)
            img_rel = f"images/{sid}.png"
            dep_rel = f"depths/{sid}.png"
            save_image(rgb, out / img_rel)
            save_depth(depth, out / dep_rel, scale=scale, d_min=scene.d_min, d_max=scene.d_max)
            lines.append(f"{sid}\t{img_rel}\t{dep_rel}")
        (out / f"{split}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))

    info = {
        "seed": seed,
        "scale_mm_per_unit": scale,
        "scene": asdict(scene),
        "splits": splits,
    }
    (out / "dataset.json").write_text(json.dumps(info, indent=1))
    return info
