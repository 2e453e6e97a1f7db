"""Procedural hand-scene generator.

Renders an articulated 2D hand (palm ellipse plus capsule fingers) over a
textured background. Every modality of a sample derives from one scene
state, so depth, crops, bbox, mesh and caption are mutually consistent by
construction: the capsule skeleton and the mesh vertices come from the
same posed joint chains, the depth map is the normalized distance
transform of the rendered silhouette, and the bbox is the silhouette's
pixel extent.

Mesh vertices are stored in normalized image coordinates (x, y in [0, 1]
matching the projection; z scaled by the same factor), so keypoint
regression can be compared against projected joint positions directly.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng
from .data import (
    GESTURES,
    MultimodalSample,
    RawSample,
    bbox_center_px,
    caption_prompt,
    crop_centered,
    quantize_depth,
    save_raw_sample,
    save_sample,
    write_manifest,
)
from .errors import ValidationError
from .mesh import (
    _FINGER_RADIUS,
    FINGER_NAMES,
    HandMesh,
    HandPose,
    NormalizedBBox,
    build_procedural_hand,
)

# label -> (flexion tuple, spread, in-plane rotation radians)
GESTURE_POSES = {
    "call": ((0.0, 1.0, 1.0, 1.0, 0.0), 0.3, 0.0),
    "dislike": ((0.0, 1.0, 1.0, 1.0, 1.0), 0.2, np.pi),
    "fist": ((1.0, 1.0, 1.0, 1.0, 1.0), 0.1, 0.0),
    "four": ((1.0, 0.0, 0.0, 0.0, 0.0), 0.7, 0.0),
    "like": ((0.0, 1.0, 1.0, 1.0, 1.0), 0.2, 0.0),
    "mute": ((0.6, 0.0, 1.0, 1.0, 1.0), 0.1, 0.3),
    "ok": ((0.8, 0.9, 0.0, 0.0, 0.0), 0.6, 0.0),
    "one": ((1.0, 0.0, 1.0, 1.0, 1.0), 0.3, 0.0),
    "palm": ((0.0, 0.0, 0.0, 0.0, 0.0), 0.8, 0.0),
    "peace": ((1.0, 0.0, 0.0, 1.0, 1.0), 0.9, 0.0),
    "peace_inverted": ((1.0, 0.0, 0.0, 1.0, 1.0), 0.9, np.pi),
    "rock": ((0.2, 0.0, 1.0, 1.0, 0.0), 0.6, 0.0),
    "stop": ((0.0, 0.0, 0.0, 0.0, 0.0), 0.3, 0.0),
    "stop_inverted": ((0.0, 0.0, 0.0, 0.0, 0.0), 0.3, np.pi),
    "three": ((0.9, 0.0, 0.0, 0.0, 1.0), 0.7, 0.0),
    "three2": ((0.0, 0.0, 0.0, 1.0, 1.0), 0.6, 0.0),
    "two_up": ((1.0, 0.0, 0.0, 1.0, 1.0), 0.25, 0.0),
    "two_up_inverted": ((1.0, 0.0, 0.0, 1.0, 1.0), 0.25, np.pi),
}

_COLOR_WORDS = {
    "red": (200, 70, 60),
    "green": (70, 170, 80),
    "blue": (60, 90, 190),
    "yellow": (210, 190, 70),
    "purple": (140, 70, 170),
    "teal": (60, 160, 160),
    "gray": (128, 128, 128),
    "brown": (140, 100, 60),
}

_SEGMENT_TAPER = (1.0, 0.85, 0.7)


@dataclass
class SceneTruth:
    """Generator-side ground truth kept out of the sample record."""

    label: str
    pose: HandPose
    rotation: float
    scale: float  # pixels per model unit
    center: tuple  # pixel coords of the model origin
    joints_px: np.ndarray  # (21, 2)
    mask: np.ndarray  # (H, W) bool silhouette


def _pose_for(label):
    flexion, spread, rotation = GESTURE_POSES[label]
    return HandPose(flexion=flexion, spread=spread), rotation


def _project(points, rotation, scale, center):
    """Model (x, y[, z]) -> pixel (x right, y down)."""
    c, s = np.cos(rotation), np.sin(rotation)
    x = points[:, 0] * c - points[:, 1] * s
    y = points[:, 0] * s + points[:, 1] * c
    return np.stack([center[0] + scale * x, center[1] - scale * y], axis=1)


def _segment_mask(xx, yy, p0, p1, radius):
    v = p1 - p0
    vv = max(float(v @ v), 1e-12)
    t = np.clip(((xx - p0[0]) * v[0] + (yy - p0[1]) * v[1]) / vv, 0.0, 1.0)
    dx = xx - (p0[0] + t * v[0])
    dy = yy - (p0[1] + t * v[1])
    return dx * dx + dy * dy <= radius * radius


def _render_mask(hand, truth, size):
    xx, yy = np.meshgrid(
        np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="xy"
    )
    mask = np.zeros((size, size), dtype=bool)
    # palm: ellipse tested in the model frame (inverse of _project)
    cx, cy = truth.center
    c, s = np.cos(truth.rotation), np.sin(truth.rotation)
    u = (xx - cx) / truth.scale
    v = (cy - yy) / truth.scale
    mx = u * c + v * s
    my = -u * s + v * c
    mask |= (mx / 0.52) ** 2 + ((my - 0.5) / 0.60) ** 2 <= 1.0
    joints_px = truth.joints_px
    for f_idx, name in enumerate(FINGER_NAMES):
        base = 1 + 4 * f_idx
        for seg in range(3):
            p0 = joints_px[base + seg]
            p1 = joints_px[base + seg + 1]
            radius = _FINGER_RADIUS[name] * _SEGMENT_TAPER[seg] * truth.scale
            mask |= _segment_mask(xx, yy, p0, p1, radius)
    return mask


def _background(gen, size):
    word = list(_COLOR_WORDS)[int(gen.integers(len(_COLOR_WORDS)))]
    base = np.array(_COLOR_WORDS[word], dtype=np.float64)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.ones((size, size, 3)) * base[None, None, :]
    for _ in range(2):
        freq = gen.uniform(0.5, 2.0)
        phase = gen.uniform(0, 2 * np.pi)
        direction = gen.uniform(0, 2 * np.pi)
        wave = np.sin(
            2 * np.pi * freq * (np.cos(direction) * xx + np.sin(direction) * yy) / size + phase
        )
        img += wave[:, :, None] * gen.uniform(8, 25)
    for _ in range(3):
        bx, by = gen.uniform(0, size, 2)
        rad = gen.uniform(size * 0.08, size * 0.25)
        blob = np.exp(-(((xx - bx) ** 2 + (yy - by) ** 2) / (2 * rad * rad)))
        img += blob[:, :, None] * gen.uniform(-40, 40, 3)[None, None, :]
    return np.clip(img, 0, 255), word


def generate_scene(sample_id, label, seed, image_size, split="train"):
    """Render one scene; returns (MultimodalSample-ready fields dict, SceneTruth)."""
    if label not in GESTURES:
        raise ValidationError(f"unknown gesture label {label!r}")
    gen = rng.stream(seed, "synth", split, sample_id)
    pose, rotation = _pose_for(label)
    hand = build_procedural_hand(pose)

    base_scale = 0.40 * image_size / 2.6
    scale = base_scale * gen.uniform(0.85, 1.05)
    rotation = rotation + gen.uniform(-0.2, 0.2)

    # keep the whole silhouette inside the frame when choosing the center
    c, s = np.cos(rotation), np.sin(rotation)
    rx = hand.mesh.vertices[:, 0] * c - hand.mesh.vertices[:, 1] * s
    ry = hand.mesh.vertices[:, 0] * s + hand.mesh.vertices[:, 1] * c
    pad = 0.18
    x_lo, x_hi = (rx.min() - pad) * scale, (rx.max() + pad) * scale
    y_lo, y_hi = (ry.min() - pad) * scale, (ry.max() + pad) * scale
    cx_min, cx_max = -x_lo, image_size - x_hi
    cy_min, cy_max = y_hi, image_size + y_lo
    cx = gen.uniform(min(cx_min, cx_max), max(cx_min, cx_max))
    cy = gen.uniform(min(cy_min, cy_max), max(cy_min, cy_max))
    center = (cx, cy)

    joints_px = _project(hand.joints, rotation, scale, center)
    truth = SceneTruth(
        label=label,
        pose=pose,
        rotation=rotation,
        scale=scale,
        center=center,
        joints_px=joints_px,
        mask=None,
    )
    truth.mask = _render_mask(hand, truth, image_size)

    background, color_word = _background(gen, image_size)
    skin = np.array([205, 165, 140], dtype=np.float64) + gen.uniform(-25, 25, 3)
    edt = ndimage.distance_transform_edt(truth.mask)
    shade = 0.55 + 0.45 * (edt / edt.max() if edt.max() > 0 else edt)
    image = background.copy()
    image[truth.mask] = np.clip(skin[None, :] * shade[truth.mask, None], 0, 255)
    image = image.astype(np.uint8)

    depth = quantize_depth(edt / edt.max() if edt.max() > 0 else edt)

    rows = np.flatnonzero(truth.mask.any(axis=1))
    cols = np.flatnonzero(truth.mask.any(axis=0))
    bbox = NormalizedBBox(
        x0=cols[0] / image_size,
        y0=rows[0] / image_size,
        x1=(cols[-1] + 1) / image_size,
        y1=(rows[-1] + 1) / image_size,
    )

    verts_px = _project(hand.mesh.vertices, rotation, scale, center)
    verts_img = np.stack(
        [
            verts_px[:, 0] / image_size,
            verts_px[:, 1] / image_size,
            hand.mesh.vertices[:, 2] * scale / image_size,
        ],
        axis=1,
    )
    mesh_img = HandMesh(vertices=verts_img, edges=hand.mesh.edges)

    caption = f"a person performing the {label} hand gesture in front of a {color_word} background"

    fields = dict(
        sample_id=sample_id,
        split=split,
        gesture_label=label,
        caption=caption,
        image=image,
        depth=depth,
        mesh=mesh_img,
        bbox=bbox,
    )
    return fields, truth


def generate_sample(sample_id, label, seed, image_size, crop_size, split="train"):
    fields, truth = generate_scene(sample_id, label, seed, image_size, split)
    center = bbox_center_px(fields["bbox"], image_size, image_size)
    sample = MultimodalSample(
        hand_rgb=crop_centered(fields["image"], center, crop_size),
        hand_depth=crop_centered(fields["depth"], center, crop_size),
        **fields,
    )
    return sample, truth


def synth_generate(n, seed, split, out_dir, image_size=256, crop_size=64):
    """Generate n samples (labels cycle through all 18 classes), write manifest.

    Returns (manifest_path, rows).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if split not in ("train", "test"):
        raise ValidationError(f"split must be train or test, got {split!r}")
    rows = []
    for i in range(n):
        label = GESTURES[i % len(GESTURES)]
        sample, _ = generate_sample(
            f"{split}_{i:05d}", label, seed, image_size, crop_size, split
        )
        rows.append(save_sample(sample, out_dir))
    manifest_path = Path(out_dir) / "manifest.jsonl"
    write_manifest(manifest_path, rows, image_size, crop_size)
    return manifest_path, rows


def synth_raw(n, seed, out_dir, image_size=256, margin=48):
    """Generate a raw-source directory (bigger frames + oracle truth files)."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    raw_size = image_size + 2 * margin
    for i in range(n):
        label = GESTURES[i % len(GESTURES)]
        sample_id = f"raw_{i:05d}"
        fields, truth = generate_scene(sample_id, label, seed, raw_size, split="train")
        gen = rng.stream(seed, "rawjitter", sample_id)
        cx, cy = bbox_center_px(fields["bbox"], raw_size, raw_size)
        center = (cx + gen.uniform(-8, 8), cy + gen.uniform(-8, 8))
        raw = RawSample(
            sample_id=sample_id,
            image=fields["image"],
            gesture_label=label,
            hand_center=center,
            split="train",
        )
        save_raw_sample(
            raw,
            out_dir,
            truth=dict(
                depth=fields["depth"],
                mesh=fields["mesh"],
                bbox=fields["bbox"],
                caption=fields["caption"],
            ),
        )
    return out_dir
