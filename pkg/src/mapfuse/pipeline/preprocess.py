"""Image-size recipes: KITTI-style zero padding and resize + center crop.

Pixel coordinates are continuous with pixel ``i`` covering ``[i, i + 1)``, so a
resize by ``s`` maps ``u -> s * u`` and a crop subtracts its offset.
"""

from __future__ import annotations

from fractions import Fraction

import cv2
import numpy as np

from mapfuse.geometry import Intrinsics

KITTI_SIZE = (384, 1280)
CROP_SIZE = (640, 832)


class RecipeMismatchError(ValueError):
    pass


def preprocess_kitti(image: np.ndarray, out_h: int = KITTI_SIZE[0], out_w: int = KITTI_SIZE[1]) -> np.ndarray:
    """Zero-pad on the bottom and right up to ``out_h x out_w``."""
    h, w = image.shape[:2]
    if h > out_h or w > out_w:
        raise RecipeMismatchError(f"image {h}x{w} larger than padded size {out_h}x{out_w}")
    out = np.zeros((out_h, out_w) + image.shape[2:], dtype=image.dtype)
    out[:h, :w] = image
    return out


def preprocess_scale_crop(image: np.ndarray, scale, out_h: int, out_w: int, k: Intrinsics | None = None):
    """Bilinear resize by ``scale`` then center crop; returns ``(image, intrinsics)``."""
    scale = Fraction(scale).limit_denominator(1000)
    h, w = image.shape[:2]
    sh, sw = int(round(h * scale)), int(round(w * scale))
    if sh < out_h or sw < out_w:
        raise RecipeMismatchError(f"{h}x{w} scaled by {scale} is {sh}x{sw}, smaller than crop {out_h}x{out_w}")
    if (sh, sw) == (h, w):
        resized = image
    else:
        resized = cv2.resize(image, (sw, sh), interpolation=cv2.INTER_LINEAR)
    top, left = (sh - out_h) // 2, (sw - out_w) // 2
    out = np.ascontiguousarray(resized[top : top + out_h, left : left + out_w])
    new_k = None
    if k is not None:
        new_k = k.scaled(float(scale), sw, sh).cropped(top, left, out_h, out_w)
    return out, new_k


RECIPES = {
    "none": None,
    "kitti": ("pad", KITTI_SIZE),
    "nuscenes": ("scale_crop", Fraction(3, 4), CROP_SIZE),
    "meijo": ("scale_crop", Fraction(2, 3), CROP_SIZE),
}


def apply_recipe(recipe: str, image: np.ndarray, k: Intrinsics):
    """Run a named recipe; returns the network-ready image and matching intrinsics."""
    if recipe not in RECIPES:
        raise RecipeMismatchError(f"unknown recipe {recipe!r}; known: {sorted(RECIPES)}")
    spec = RECIPES[recipe]
    if spec is None:
        return image, k
    if spec[0] == "pad":
        out = preprocess_kitti(image, *spec[1])
        h, w = spec[1]
        return out, Intrinsics(k.fx, k.fy, k.cx, k.cy, w, h)
    _, scale, (h, w) = spec
    return preprocess_scale_crop(image, scale, h, w, k)


def recipe_intrinsics(recipe: str, k: Intrinsics) -> Intrinsics:
    """Intrinsics after a recipe, without touching pixels."""
    dummy = np.zeros((k.height, k.width), dtype=np.uint8)
    return apply_recipe(recipe, dummy, k)[1]
