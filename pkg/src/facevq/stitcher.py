"""Monocular inference: template selection, multi-view reflectance
swapping, YUV color matching, and correspondence-based UV stitching.

A template entry carries 12 reflectance images (4 domains x 3 views),
the per-view correspondence fields, and the identity embedding of its
frontal rgb render. Inference swaps the input identity into all 12
images, color-matches side views to the frontal view (diffuse only),
forward-splats each view into UV space through the template's own
correspondences, and blends with frontal priority and a feathered seam.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import distance_transform_edt

from . import REFLECTANCE_DOMAINS, VIEWS
from .datagen import CorrespondenceField, DatasetManifest, DomainImage, save_image
from .swapper import embed_identity, swap

# BT.601 full-range luma/chroma matrix; the inverse is its exact
# numerical inverse so a YUV round trip is lossless up to float error.
RGB_TO_YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51499, -0.10001],
])
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

COLOR_MATCHED_DOMAINS = ("diffuse", "rgb")


class StitchError(ValueError):
    pass


@dataclass
class TemplateEntry:
    identity_id: int
    embedding: torch.Tensor
    images: dict                      # (domain, view) -> DomainImage
    correspondences: dict             # view -> CorrespondenceField
    face: DomainImage                 # frontal rgb render


@dataclass
class TemplateLibrary:
    entries: list = field(default_factory=list)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, embedder,
                      split: str | None = "train") -> "TemplateLibrary":
        lib = cls()
        for ident in manifest.captured_identities(split=split):
            images = {}
            for domain in REFLECTANCE_DOMAINS:
                for view in VIEWS:
                    found = manifest.entries_for(domain=domain, view=view, identity=ident)
                    if not found:
                        raise StitchError(
                            f"identity {ident} is missing {domain}/{view} for the library")
                    images[(domain, view)] = manifest.load_image(found[0])
            corr = {view: manifest.load_correspondence(ident, view) for view in VIEWS}
            face_entries = manifest.entries_for(domain="rgb", view="frontal", identity=ident)
            if not face_entries:
                raise StitchError(f"identity {ident} has no frontal rgb render")
            face = manifest.load_image(face_entries[0])
            lib.entries.append(TemplateEntry(
                identity_id=ident,
                embedding=embed_identity(face, embedder),
                images=images, correspondences=corr, face=face,
            ))
        return lib

    def __len__(self):
        return len(self.entries)


def select_template(embedding: torch.Tensor, library: TemplateLibrary) -> TemplateEntry:
    """Closest template by cosine similarity; ties go to the lowest
    identity id."""
    if len(library) == 0:
        raise StitchError("template library is empty")
    e = embedding / embedding.norm()
    best, best_cos = None, -np.inf
    for entry in sorted(library.entries, key=lambda t: t.identity_id):
        t = entry.embedding / entry.embedding.norm()
        cos = float((e * t).sum())
        if cos > best_cos:
            best, best_cos = entry, cos
    return best


def rgb_to_yuv(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) @ RGB_TO_YUV.T


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    return yuv @ YUV_TO_RGB.T


def yuv_color_match(src: DomainImage, ref: DomainImage, overlap_mask) -> DomainImage:
    """Affinely remap src's YUV channels so overlap statistics match ref's.

    overlap_mask is one boolean mask applied to both images, or a
    (src_mask, ref_mask) pair when the overlap covers different pixels in
    each view. Matching applies to diffuse and rgb texture images only;
    other reflectance domains pass through untouched (remapping normals
    or packed scalars would corrupt their semantics).
    """
    if src.domain not in COLOR_MATCHED_DOMAINS:
        return DomainImage(pixels=src.pixels.copy(), domain=src.domain,
                           view=src.view, identity_id=src.identity_id)
    if isinstance(overlap_mask, tuple):
        src_mask, ref_mask = overlap_mask
    else:
        src_mask = ref_mask = overlap_mask
    if src_mask.sum() < 16 or ref_mask.sum() < 16:
        raise StitchError("color matching needs at least 16 overlap pixels per image")

    src_yuv = rgb_to_yuv(src.pixels)
    ref_yuv = rgb_to_yuv(ref.pixels)
    out = np.empty_like(src_yuv)
    for c in range(3):
        s_vals = src_yuv[..., c][src_mask]
        r_vals = ref_yuv[..., c][ref_mask]
        mu_s, sd_s = s_vals.mean(), s_vals.std()
        mu_r, sd_r = r_vals.mean(), r_vals.std()
        if sd_s < 1e-8:
            out[..., c] = src_yuv[..., c] - mu_s + mu_r
        else:
            out[..., c] = (src_yuv[..., c] - mu_s) * (sd_r / sd_s) + mu_r
    pixels = np.clip(yuv_to_rgb(out), 0.0, 1.0).astype(np.float32)
    return DomainImage(pixels=pixels, domain=src.domain, view=src.view,
                       identity_id=src.identity_id)


def unwrap_view(img: DomainImage, corr: CorrespondenceField, uv_size: int):
    """Forward-splat a view into the UV grid with a bilinear footprint.

    Returns (uv_map, weight_map); cells receiving no splat mass are zero.
    """
    if not corr.valid.any():
        raise StitchError("correspondence field has no valid pixels")
    colors = img.pixels[corr.valid].astype(np.float64)
    uv = corr.uv[corr.valid].astype(np.float64)
    gx = uv[:, 0] * (uv_size - 1)
    gy = uv[:, 1] * (uv_size - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    x1 = np.minimum(x0 + 1, uv_size - 1)
    y1 = np.minimum(y0 + 1, uv_size - 1)

    acc = np.zeros((uv_size, uv_size, 3))
    wmap = np.zeros((uv_size, uv_size))
    for ys, xs, w in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        np.add.at(acc, (ys, xs), colors * w[:, None])
        np.add.at(wmap, (ys, xs), w)
    out = np.zeros_like(acc)
    covered = wmap > 0
    out[covered] = acc[covered] / wmap[covered, None]
    return out.astype(np.float32), wmap.astype(np.float32)


def sample_uv(uv_map: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup into a UV map at continuous (u, v); the inverse
    operation of unwrap_view, used for round-trip checks."""
    size = uv_map.shape[0]
    gx = np.asarray(u) * (size - 1)
    gy = np.asarray(v) * (size - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, size - 2)
    y0 = np.clip(np.floor(gy).astype(int), 0, size - 2)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    top = uv_map[y0, x0] * (1 - fx) + uv_map[y0, x0 + 1] * fx
    bot = uv_map[y0 + 1, x0] * (1 - fx) + uv_map[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _feather_ramp(weight: np.ndarray, feather: int) -> np.ndarray:
    support = weight > 0
    if feather <= 0 or not support.any():
        return support.astype(np.float64)
    dist = distance_transform_edt(support)
    return np.clip(dist / feather, 0.0, 1.0)


def blend_views(partials: dict, view_priority: float = 2.0, feather: int = 8,
                fill: np.ndarray | None = None):
    """Merge per-view partial UV maps into one map.

    partials maps view name -> (uv_map, weight_map). Frontal weights are
    multiplied by view_priority and every view's weight is ramped linearly
    over `feather` UV pixels from its support boundary, which bounds the
    blend's spatial gradient across seams. Cells covered by no view take
    values from `fill` (the template's own unwrapped map) when given.

    Returns (blended map, union-of-supports mask).
    """
    if not partials or all(not (w > 0).any() for _, w in partials.values()):
        raise StitchError("blend_views needs at least one non-empty view")
    shape = next(iter(partials.values()))[0].shape
    acc = np.zeros(shape)
    wsum = np.zeros(shape[:2])
    union = np.zeros(shape[:2], dtype=bool)
    for view, (uv_map, weight) in partials.items():
        w = weight.astype(np.float64) * _feather_ramp(weight, feather)
        if view == "frontal":
            w = w * view_priority
        acc += uv_map * w[..., None]
        wsum += w
        union |= weight > 0
    out = np.zeros(shape)
    covered = wsum > 0
    out[covered] = acc[covered] / wsum[covered, None]
    # Support cells whose feathered weight vanished still need a value.
    holes = union & ~covered
    if holes.any():
        raw = np.zeros(shape)
        rawsum = np.zeros(shape[:2])
        for view, (uv_map, weight) in partials.items():
            raw += uv_map * weight[..., None]
            rawsum += weight
        out[holes] = raw[holes] / rawsum[holes, None]
    if fill is not None:
        missing = ~union
        out[missing] = fill[missing]
    return out.astype(np.float32), union


@dataclass
class UVAsset:
    """Stitched per-domain UV maps sharing one validity mask."""

    maps: dict                       # domain -> (U, U, 3) float in [0, 1]
    mask: np.ndarray                 # (U, U) bool
    provenance: dict

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for domain, uv_map in self.maps.items():
            save_image(DomainImage(uv_map, domain, "frontal"), out_dir / f"uv_{domain}.png")
        mask_img = np.repeat(self.mask[..., None].astype(np.float32), 3, axis=-1)
        save_image(DomainImage(mask_img, "rgb", "frontal"), out_dir / "uv_mask.png")
        with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
            json.dump(self.provenance, fh, sort_keys=True, indent=1)
        return out_dir


def _uv_support(corr: CorrespondenceField, uv_size: int) -> np.ndarray:
    ones = DomainImage(np.ones((*corr.valid.shape, 3), dtype=np.float32), "rgb", "frontal")
    _, weight = unwrap_view(ones, corr, uv_size)
    return weight > 0


def view_overlap_masks(corr_a: CorrespondenceField, corr_b: CorrespondenceField,
                       uv_size: int = 32):
    """Pixel masks of the region two views share in UV space.

    Returns (mask_a, mask_b): pixels of each view whose UV cell is covered
    by both views' supports at the given UV resolution.
    """
    shared = _uv_support(corr_a, uv_size) & _uv_support(corr_b, uv_size)

    def pixels_in(corr):
        mask = np.zeros_like(corr.valid)
        uv = corr.uv[corr.valid]
        cx = np.clip((uv[:, 0] * (uv_size - 1)).round().astype(int), 0, uv_size - 1)
        cy = np.clip((uv[:, 1] * (uv_size - 1)).round().astype(int), 0, uv_size - 1)
        mask[corr.valid] = shared[cy, cx]
        return mask

    return pixels_in(corr_a), pixels_in(corr_b)


def reflectance_infer(face: DomainImage, library: TemplateLibrary, models,
                      uv_size: int = 64, view_priority: float = 2.0,
                      feather: int = 8) -> UVAsset:
    """Full monocular pipeline: embed, pick the closest template, swap all
    12 template reflectance images, color-match, unwrap and blend."""
    embedding = embed_identity(face, models.embedder)
    entry = select_template(embedding, library)

    swapped = {}
    for domain in REFLECTANCE_DOMAINS:
        for view in VIEWS:
            swapped[(domain, view)] = swap(entry.images[(domain, view)], face, models)

    corr = entry.correspondences
    overlaps = {
        view: view_overlap_masks(corr[view], corr["frontal"])
        for view in ("left", "right")
    }

    maps = {}
    union_mask = None
    for domain in REFLECTANCE_DOMAINS:
        views = {"frontal": swapped[(domain, "frontal")]}
        for view in ("left", "right"):
            img = swapped[(domain, view)]
            views[view] = yuv_color_match(img, views["frontal"], overlaps[view])
        partials = {v: unwrap_view(views[v], corr[v], uv_size) for v in VIEWS}
        template_partials = {
            v: unwrap_view(entry.images[(domain, v)], corr[v], uv_size) for v in VIEWS}
        fill, _ = blend_views(template_partials, view_priority, feather)
        blended, union = blend_views(partials, view_priority, feather, fill=fill)
        maps[domain] = np.clip(blended, 0.0, 1.0)
        union_mask = union if union_mask is None else union_mask  # identical per domain

    return UVAsset(
        maps=maps, mask=union_mask,
        provenance={
            "template_identity": int(entry.identity_id),
            "input_identity": None if face.identity_id is None else int(face.identity_id),
            "uv_size": int(uv_size),
            "view_priority": float(view_priority),
            "feather_pixels": int(feather),
        },
    )
