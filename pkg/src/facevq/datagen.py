"""Procedural multi-domain, multi-view face-like dataset generator.

Faces are parametric 2D renders: a smooth skin gradient over an elliptical
face region, geometric features (eyes, brows, nose, mouth) placed from a
per-identity parameter vector, and seeded high-frequency detail noise.
Five pixel-aligned domains are rendered per (identity, view):

* rgb        - shaded color image (the cheap, abundant domain)
* diffuse    - unshaded base color
* specular   - highlight intensity carried in the blue channel only
* roughness  - scalar field duplicated into three channels
* normal     - per-pixel unit surface normals mapped into [0, 1]

Views (left / frontal / right) come from a cylindrical head model under
yaw rotation, which yields exact, invertible pixel-to-UV correspondences;
these stand in for an external shape estimator and drive UV stitching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import DOMAINS, REFLECTANCE_DOMAINS, VIEWS
from .checkpoint import load_container, save_container
from .config import DataConfig

# Cylindrical view geometry. u in [0, 1] spans SPREAD radians of the head
# cylinder; a view rotates it by YAW[view]; pixels are visible while the
# camera-relative angle |psi| stays under VISIBLE_ANGLE.
SPREAD = 1.6
YAW = {"left": 0.6, "frontal": 0.0, "right": -0.6}
VISIBLE_ANGLE = 0.65
HALF_WIDTH = 0.42   # horizontal image half-extent of the cylinder
HALF_HEIGHT = 0.45  # vertical half-extent per unit v
FACE_RV = 0.47      # vertical radius of the face ellipse in UV

UV_SENTINEL = -1.0

# Geometry components of an identity, each sampled uniformly inside its
# declared bounds (all expressed in UV coordinates or UV-sized radii).
GEOMETRY_BOUNDS = (
    ("eye_y", 0.30, 0.42),
    ("eye_dx", 0.12, 0.20),
    ("eye_size", 0.040, 0.070),
    ("brow_offset", 0.055, 0.095),
    ("brow_thickness", 0.012, 0.028),
    ("nose_y", 0.48, 0.56),
    ("nose_len", 0.10, 0.18),
    ("nose_width", 0.030, 0.070),
    ("mouth_y", 0.68, 0.78),
    ("mouth_width", 0.10, 0.18),
    ("mouth_height", 0.018, 0.040),
    ("cheek_flush", 0.0, 1.0),
)


class DataGenError(ValueError):
    """Unknown domain/view or invalid generation request."""


@dataclass(frozen=True)
class IdentityParams:
    """Deterministic description of one synthetic identity."""

    id: int
    geometry: np.ndarray        # one value per GEOMETRY_BOUNDS entry
    skin_tone: np.ndarray       # rgb in [0, 1]
    detail_seed: int

    def geom(self, name: str) -> float:
        names = [g[0] for g in GEOMETRY_BOUNDS]
        return float(self.geometry[names.index(name)])


@dataclass
class DomainImage:
    """An H x W x 3 image in [0, 1] tagged with domain and view."""

    pixels: np.ndarray
    domain: str
    view: str
    identity_id: int | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataGenError(f"unknown domain '{self.domain}'")
        if self.view not in VIEWS:
            raise DataGenError(f"unknown view '{self.view}'")


@dataclass
class CorrespondenceField:
    """Per-pixel UV coordinates of one view, with a validity mask."""

    uv: np.ndarray      # H x W x 2, UV_SENTINEL outside the face
    valid: np.ndarray   # H x W bool


def generate_identity(seed: int, label: int | None = None) -> IdentityParams:
    """Sample identity parameters as a pure function of the seed."""
    rng = np.random.default_rng(seed)
    lows = np.array([b[1] for b in GEOMETRY_BOUNDS])
    highs = np.array([b[2] for b in GEOMETRY_BOUNDS])
    geometry = lows + rng.random(len(GEOMETRY_BOUNDS)) * (highs - lows)
    skin_tone = 0.20 + rng.random(3) * 0.75
    detail_seed = int(rng.integers(0, 2**31 - 1))
    return IdentityParams(
        id=seed if label is None else label,
        geometry=geometry,
        skin_tone=skin_tone,
        detail_seed=detail_seed,
    )


def _pixel_grid(size: int):
    centers = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(centers, centers, indexing="ij")
    return x, y


def view_correspondence(view: str, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map every pixel of a view into the shared UV square.

    Returns (u, v, psi) arrays plus validity folded into NaN-free masks by
    the caller; psi is the camera-relative cylinder angle used for shading
    and normals. The map is expansive in UV, so distinct valid pixels land
    in distinct UV cells at render resolution.
    """
    if view not in YAW:
        raise DataGenError(f"unknown view '{view}'")
    x, y = _pixel_grid(size)
    s = (x - 0.5) / HALF_WIDTH
    inside = np.abs(s) < 1.0
    psi = np.arcsin(np.clip(s, -1.0, 1.0))
    phi = psi - YAW[view]
    u = 0.5 + phi / SPREAD
    v = 0.5 + (y - 0.5) / HALF_HEIGHT * 0.5
    ellipse = ((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / FACE_RV) ** 2
    valid = (
        inside
        & (np.abs(psi) <= VISIBLE_ANGLE)
        & (u >= 0.0) & (u <= 1.0)
        & (v >= 0.0) & (v <= 1.0)
        & (ellipse <= 1.0)
    )
    return u, v, psi, valid


def uv_to_image(u: np.ndarray, v: np.ndarray, view: str):
    """Inverse of view_correspondence on the visible region.

    Returns normalized image coordinates (x, y) and a visibility mask.
    """
    if view not in YAW:
        raise DataGenError(f"unknown view '{view}'")
    phi = SPREAD * (np.asarray(u) - 0.5)
    psi = phi + YAW[view]
    visible = np.abs(psi) <= VISIBLE_ANGLE
    x = 0.5 + HALF_WIDTH * np.sin(psi)
    y = 0.5 + (np.asarray(v) - 0.5) * HALF_HEIGHT * 2.0
    return x, y, visible


# High-frequency identity texture: octaves of seeded grids, bilinearly
# interpolated in UV so detail is consistent across views.
NOISE_OCTAVES = ((8, 1.0), (16, 0.7), (32, 0.5))


def _noise_octave(detail_seed: int, octave: int, u: np.ndarray, v: np.ndarray,
                  cells: int) -> np.ndarray:
    rng = np.random.default_rng(detail_seed + 7919 * octave)
    grid = rng.random((cells + 1, cells + 1)) * 2.0 - 1.0
    gu = np.clip(u, 0.0, 1.0) * cells
    gv = np.clip(v, 0.0, 1.0) * cells
    i0 = np.clip(gv.astype(int), 0, cells - 1)
    j0 = np.clip(gu.astype(int), 0, cells - 1)
    fv = gv - i0
    fu = gu - j0
    top = grid[i0, j0] * (1 - fu) + grid[i0, j0 + 1] * fu
    bot = grid[i0 + 1, j0] * (1 - fu) + grid[i0 + 1, j0 + 1] * fu
    return top * (1 - fv) + bot * fv


def _detail_noise(detail_seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Multi-octave per-identity noise, roughly in [-1, 1]."""
    total = np.zeros_like(u)
    weight = 0.0
    for k, (cells, amp) in enumerate(NOISE_OCTAVES):
        total += amp * _noise_octave(detail_seed, k, u, v, cells)
        weight += amp
    return total / weight


def _soft_ellipse(u, v, cu, cv, ru, rv, sharpness=1.6):
    d2 = ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2
    return np.clip(sharpness * (1.0 - d2), 0.0, 1.0)


def _feature_fields(params: IdentityParams, u: np.ndarray, v: np.ndarray) -> dict:
    g = params.geom
    eyes = (
        _soft_ellipse(u, v, 0.5 - g("eye_dx"), g("eye_y"), g("eye_size"), g("eye_size") * 0.62)
        + _soft_ellipse(u, v, 0.5 + g("eye_dx"), g("eye_y"), g("eye_size"), g("eye_size") * 0.62)
    )
    brow_y = g("eye_y") - g("brow_offset")
    brows = (
        _soft_ellipse(u, v, 0.5 - g("eye_dx"), brow_y, g("eye_size") * 1.5, g("brow_thickness"))
        + _soft_ellipse(u, v, 0.5 + g("eye_dx"), brow_y, g("eye_size") * 1.5, g("brow_thickness"))
    )
    mouth = _soft_ellipse(u, v, 0.5, g("mouth_y"), g("mouth_width"), g("mouth_height"))
    nose_top, nose_len = g("nose_y"), g("nose_len")
    v_window = np.clip(1.0 - np.abs((v - (nose_top + nose_len / 2)) / (nose_len / 2)) ** 2, 0.0, 1.0)
    nose = np.exp(-((u - 0.5) / g("nose_width")) ** 2) * v_window
    cheeks = g("cheek_flush") * (
        _soft_ellipse(u, v, 0.5 - g("eye_dx") * 1.3, 0.58, 0.09, 0.07, 1.0)
        + _soft_ellipse(u, v, 0.5 + g("eye_dx") * 1.3, 0.58, 0.09, 0.07, 1.0)
    )
    noise = _detail_noise(params.detail_seed, u, v)
    return {"eyes": np.clip(eyes, 0, 1), "brows": np.clip(brows, 0, 1),
            "mouth": mouth, "nose": nose, "cheeks": np.clip(cheeks, 0, 1), "noise": noise}


def _diffuse_field(params: IdentityParams, u, v, feats) -> np.ndarray:
    r2 = ((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / FACE_RV) ** 2
    brightness = 0.80 + 0.25 * np.clip(1.0 - r2, 0.0, 1.0)
    base = params.skin_tone[None, None, :] * brightness[..., None]
    base = base * (1.0 + 0.10 * feats["noise"])[..., None]
    base = base * (1.0 - 0.62 * feats["eyes"] - 0.48 * feats["brows"] - 0.22 * feats["nose"] * 0.4)[..., None]
    lip = np.array([0.72, 0.30, 0.34])
    base = base * (1.0 - feats["mouth"][..., None]) + lip[None, None, :] * feats["mouth"][..., None]
    flush = np.array([0.12, 0.0, 0.02])
    base = base + flush[None, None, :] * feats["cheeks"][..., None]
    return np.clip(base, 0.0, 1.0)


def _height_field(params: IdentityParams, u, v) -> np.ndarray:
    feats = _feature_fields(params, u, v)
    return (0.40 * feats["nose"] - 0.30 * feats["eyes"] - 0.12 * feats["mouth"]
            + 0.07 * feats["noise"])


def _normal_field(params: IdentityParams, u, v, psi) -> np.ndarray:
    delta = 1e-3
    dh_du = (_height_field(params, u + delta, v) - _height_field(params, u - delta, v)) / (2 * delta)
    dh_dv = (_height_field(params, u, v + delta) - _height_field(params, u, v - delta)) / (2 * delta)
    k = 0.45
    n = np.stack([np.sin(psi) - k * dh_du, -k * dh_dv, np.cos(psi)], axis=-1)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return (n + 1.0) / 2.0


def _render_domain(params: IdentityParams, domain: str, u, v, psi, valid) -> np.ndarray:
    feats = _feature_fields(params, u, v)
    h, w = u.shape
    out = np.zeros((h, w, 3))
    if domain == "diffuse":
        out[:] = 0.10
        face = _diffuse_field(params, u, v, feats)
    elif domain == "rgb":
        out[:] = 0.10
        diffuse = _diffuse_field(params, u, v, feats)
        # strong directional light plus a warm cast: the rgb domain is a
        # lit photograph, clearly apart from the flat diffuse albedo
        light = np.clip(np.cos(SPREAD * (u - 0.5)) * (0.55 + 0.45 * (1.0 - v)), 0.0, 1.0)
        shade = 0.30 + 0.70 * light
        tint = np.array([1.00, 0.88, 0.72])
        highlight = 0.15 * (feats["nose"] + _soft_ellipse(u, v, 0.5, 0.22, 0.28, 0.12, 1.0))
        face = np.clip(diffuse * shade[..., None] * tint[None, None, :]
                       + highlight[..., None], 0.0, 1.0)
    elif domain == "specular":
        spec = np.clip(0.22 + 0.45 * feats["nose"]
                       + 0.30 * _soft_ellipse(u, v, 0.5, 0.24, 0.30, 0.14, 1.0)
                       - 0.18 * feats["mouth"] + 0.09 * feats["noise"], 0.0, 1.0)
        face = np.stack([np.zeros_like(spec), np.zeros_like(spec), spec], axis=-1)
    elif domain == "roughness":
        rough = np.clip(0.24 - 0.12 * feats["nose"] + 0.10 * feats["eyes"]
                        + 0.05 * feats["noise"], 0.02, 0.5)
        out[:] = 0.5
        face = np.repeat(rough[..., None], 3, axis=-1)
    elif domain == "normal":
        out[:] = np.array([0.5, 0.5, 1.0])
        face = _normal_field(params, u, v, psi)
    else:
        raise DataGenError(f"unknown domain '{domain}'")
    out[valid] = face[valid]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_views(params: IdentityParams, domain: str, views, size: int = 64):
    """Render one domain of an identity for the requested views.

    Returns a list of (DomainImage, CorrespondenceField) pairs, one per
    view. All domains of the same (identity, view) share the silhouette
    mask and the correspondence field.
    """
    if domain not in DOMAINS:
        raise DataGenError(f"unknown domain '{domain}'")
    results = []
    for view in views:
        u, v, psi, valid = view_correspondence(view, size)
        pixels = _render_domain(params, domain, u, v, psi, valid)
        uv = np.full((size, size, 2), UV_SENTINEL, dtype=np.float32)
        uv[valid, 0] = u[valid]
        uv[valid, 1] = v[valid]
        img = DomainImage(pixels=pixels, domain=domain, view=view, identity_id=params.id)
        results.append((img, CorrespondenceField(uv=uv, valid=valid)))
    return results


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass
class ManifestEntry:
    identity: int
    domain: str
    view: str
    file: str
    corr: str
    split: str


@dataclass
class DatasetManifest:
    """Index of a generated dataset directory."""

    root: Path
    seed: int
    image_size: int
    identities: int
    reflectance_ratio: float
    train_identities: list = field(default_factory=list)
    test_identities: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    def entries_for(self, split: str | None = None, domain: str | None = None,
                    view: str | None = None, identity: int | None = None):
        out = []
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            if domain is not None and e.domain != domain:
                continue
            if view is not None and e.view != view:
                continue
            if identity is not None and e.identity != identity:
                continue
            out.append(e)
        return out

    def captured_identities(self, split: str | None = None) -> list:
        ids = {e.identity for e in self.entries_for(split=split, domain="diffuse")}
        return sorted(ids)

    def load_image(self, entry: ManifestEntry) -> DomainImage:
        return load_image(self.root / entry.file, entry.domain, entry.view, entry.identity)

    def load_correspondence(self, identity: int, view: str) -> CorrespondenceField:
        arrays, _ = load_container(self.root / "corr")
        key = f"id{identity:04d}/{view}"
        if f"{key}/uv" not in arrays:
            raise DataGenError(f"no correspondence stored for identity {identity} view {view}")
        return CorrespondenceField(uv=arrays[f"{key}/uv"], valid=arrays[f"{key}/valid"] > 0.5)

    def validate(self):
        overlap = set(self.train_identities) & set(self.test_identities)
        if overlap:
            raise DataGenError(f"train/test identity overlap: {sorted(overlap)}")
        for e in self.entries:
            if not (self.root / e.file).exists():
                raise DataGenError(f"manifest references missing file {e.file}")

    def save(self):
        payload = {
            "seed": self.seed,
            "image_size": self.image_size,
            "identities": self.identities,
            "reflectance_ratio": self.reflectance_ratio,
            "train_identities": self.train_identities,
            "test_identities": self.test_identities,
            "entries": [vars(e) for e in self.entries],
        }
        with open(self.root / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        with open(root / "manifest.json", "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        m = cls(
            root=root,
            seed=payload["seed"],
            image_size=payload["image_size"],
            identities=payload["identities"],
            reflectance_ratio=payload["reflectance_ratio"],
            train_identities=payload["train_identities"],
            test_identities=payload["test_identities"],
            entries=[ManifestEntry(**e) for e in payload["entries"]],
        )
        return m


def save_image(img: DomainImage, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path: Path, domain: str, view: str, identity_id: int | None = None) -> DomainImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return DomainImage(pixels=arr, domain=domain, view=view, identity_id=identity_id)


def identity_seed(base_seed: int, index: int) -> int:
    # Spaced so per-identity streams never collide for desk-scale counts.
    return base_seed * 1_000_003 + index


def _split_identities(ids: list, train_split: float, rng: np.random.Generator):
    ids = list(ids)
    rng.shuffle(ids)
    n_train = round(train_split * len(ids))
    return sorted(ids[:n_train]), sorted(ids[n_train:])


def build_dataset(config: DataConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate the full dataset under out_dir and write its manifest.

    Reflectance domains are rendered only for the "captured" identity
    subset (every k-th identity with k = round(1/reflectance_ratio)); rgb
    is rendered for everyone. Output is a pure function of (config, seed).
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataGenError(f"cannot create output directory {out_dir}: {exc}") from exc

    every_k = max(1, round(1.0 / config.reflectance_ratio)) if config.reflectance_ratio > 0 else 0
    all_ids = list(range(config.identities))
    captured = [i for i in all_ids if every_k and i % every_k == 0]
    plain = [i for i in all_ids if i not in captured]

    rng = np.random.default_rng(config.seed)
    cap_train, cap_test = _split_identities(captured, config.train_split, rng)
    plain_train, plain_test = _split_identities(plain, config.train_split, rng)
    train_ids = sorted(cap_train + plain_train)
    test_ids = sorted(cap_test + plain_test)

    manifest = DatasetManifest(
        root=out_dir, seed=config.seed, image_size=config.image_size,
        identities=config.identities, reflectance_ratio=config.reflectance_ratio,
        train_identities=train_ids, test_identities=test_ids,
    )

    corr_arrays = {}
    for ident in all_ids:
        params = generate_identity(identity_seed(config.seed, ident), label=ident)
        split = "train" if ident in train_ids else "test"
        domains = DOMAINS if ident in captured else ("rgb",)
        for view in VIEWS:
            corr_key = f"id{ident:04d}/{view}"
            for domain in domains:
                (img, corr), = render_views(params, domain, [view], size=config.image_size)
                fname = f"images/id{ident:04d}_{domain}_{view}.png"
                save_image(img, out_dir / fname)
                manifest.entries.append(ManifestEntry(
                    identity=ident, domain=domain, view=view,
                    file=fname, corr=corr_key, split=split,
                ))
                if f"{corr_key}/uv" not in corr_arrays:
                    corr_arrays[f"{corr_key}/uv"] = corr.uv
                    corr_arrays[f"{corr_key}/valid"] = corr.valid.astype(np.float32)
    save_container(out_dir / "corr", corr_arrays,
                   config={"image_size": config.image_size, "seed": config.seed})
    manifest.save()
    return manifest


def ingest_folder(path: str | Path, domain: str, image_size: int = 64,
                  view: str = "frontal"):
    """Load user-supplied images as DomainImages at the working resolution.

    Unreadable files are reported per-file in the returned error dict and
    do not abort the ingest. Grayscale inputs are replicated to three
    channels; everything is resized and normalized to [0, 1].
    """
    if domain not in DOMAINS:
        raise DataGenError(f"unknown domain '{domain}'")
    path = Path(path)
    images, errors = [], {}
    for f in sorted(path.iterdir()) if path.exists() else []:
        if not f.is_file():
            continue
        try:
            with Image.open(f) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            images.append(DomainImage(pixels=arr, domain=domain, view=view, identity_id=None))
        except Exception as exc:  # corrupt or non-image file
            errors[f.name] = str(exc)
    return images, errors
