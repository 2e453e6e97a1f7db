"""Multimodal sample schema, manifest I/O, and the curation pipeline.

A sample couples one whole image with spatially aligned hand-region
annotations: depth maps for both, a gesture label, a caption, mesh
vertices and a normalized bounding box. The hand crops are exact
sub-windows of the whole-image rasters, centered on the bbox center and
clamped at borders; curation verifies that alignment on the persisted
files before a sample may enter the manifest.

Field names carry no sizes; the manifest header records the geometry
(512/225 at full scale, 256/64 at the toy scale used in tests).
"""

import dataclasses
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import RecordFormatError, ValidationError
from .mesh import HandMesh, NormalizedBBox, load_mesh_record, save_mesh_record

# HaGRID v1 vocabulary, all 18 classes.
GESTURES = (
    "call",
    "dislike",
    "fist",
    "four",
    "like",
    "mute",
    "ok",
    "one",
    "palm",
    "peace",
    "peace_inverted",
    "rock",
    "stop",
    "stop_inverted",
    "three",
    "three2",
    "two_up",
    "two_up_inverted",
)

SPLITS = ("train", "test")

MANIFEST_SCHEMA = "handfusion.manifest"
MANIFEST_VERSION = 1

DEPTH_SCALE = 65535  # depth rasters persist as 16-bit grayscale PNG


def quantize_depth(depth):
    """Snap a [0, 1] float depth map onto the 16-bit storage grid."""
    q = np.round(np.clip(depth, 0.0, 1.0) * DEPTH_SCALE).astype(np.uint16)
    return q.astype(np.float64) / DEPTH_SCALE


def crop_centered(image, center_px, size):
    """Exact size x size window centered at (x, y), shifted to stay in bounds."""
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValidationError(f"crop size {size} exceeds image dims ({h}, {w})")
    cx, cy = center_px
    col = int(np.clip(int(round(cx)) - size // 2, 0, w - size))
    row = int(np.clip(int(round(cy)) - size // 2, 0, h - size))
    return image[row : row + size, col : col + size].copy()


def bbox_center_px(bbox, width, height):
    cx, cy = bbox.center
    return (cx * width, cy * height)


@dataclass
class MultimodalSample:
    """One aligned training record; rasters are numpy arrays in memory."""

    sample_id: str
    split: str
    gesture_label: str
    caption: str
    image: np.ndarray  # (S, S, 3) uint8
    depth: np.ndarray  # (S, S) float64 in [0, 1], on the 16-bit grid
    hand_rgb: np.ndarray  # (C, C, 3) uint8
    hand_depth: np.ndarray  # (C, C) float64
    mesh: HandMesh
    bbox: NormalizedBBox

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.gesture_label not in GESTURES:
            raise ValidationError(f"unknown gesture label {self.gesture_label!r}")
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValidationError("image must be (S, S, 3) uint8")
        if self.image.shape[0] != self.image.shape[1]:
            raise ValidationError("image must be square")
        if self.depth.shape != self.image.shape[:2]:
            raise ValidationError("depth must match image spatial dims")
        if self.depth.min() < 0 or self.depth.max() > 1:
            raise ValidationError("depth values must lie in [0, 1]")
        if self.hand_rgb.shape[:2] != self.hand_depth.shape[:2]:
            raise ValidationError("hand crops must share spatial dims")
        if self.hand_rgb.shape[0] != self.hand_rgb.shape[1]:
            raise ValidationError("hand crops must be square")

    @property
    def image_size(self):
        return self.image.shape[0]

    @property
    def crop_size(self):
        return self.hand_rgb.shape[0]


def verify_alignment(sample):
    """Check the exact-sub-crop invariant; returns None or a reason string."""
    center = bbox_center_px(sample.bbox, sample.image_size, sample.image_size)
    want_rgb = crop_centered(sample.image, center, sample.crop_size)
    if not np.array_equal(want_rgb, sample.hand_rgb):
        return "pixel_mismatch:hand_rgb"
    want_depth = crop_centered(sample.depth, center, sample.crop_size)
    if not np.array_equal(want_depth, sample.hand_depth):
        return "pixel_mismatch:hand_depth"
    return None


# ---------------------------------------------------------------------------
# Raster + sample persistence
# ---------------------------------------------------------------------------


def save_rgb(path, arr):
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_rgb(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_depth(path, depth):
    q = np.round(np.clip(depth, 0.0, 1.0) * DEPTH_SCALE).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path, format="PNG")


def load_depth(path):
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.uint16)
    return arr.astype(np.float64) / DEPTH_SCALE


def sample_files(sample_id):
    return {
        "image": f"{sample_id}_image.png",
        "depth": f"{sample_id}_depth.png",
        "hand_rgb": f"{sample_id}_hand.png",
        "hand_depth": f"{sample_id}_hand_depth.png",
        "mesh": f"{sample_id}.hfmesh",
    }


def save_sample(sample, root):
    """Write all rasters + mesh under root; returns the manifest row dict."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = sample_files(sample.sample_id)
    save_rgb(root / files["image"], sample.image)
    save_depth(root / files["depth"], sample.depth)
    save_rgb(root / files["hand_rgb"], sample.hand_rgb)
    save_depth(root / files["hand_depth"], sample.hand_depth)
    save_mesh_record(root / files["mesh"], sample.mesh)
    return {
        "sample_id": sample.sample_id,
        "split": sample.split,
        "gesture_label": sample.gesture_label,
        "caption": sample.caption,
        "bbox": [float(v) for v in sample.bbox.as_tuple()],
        "files": files,
    }


def load_sample(row, root):
    root = Path(root)
    files = row["files"]
    mesh, _ = load_mesh_record(root / files["mesh"])
    return MultimodalSample(
        sample_id=row["sample_id"],
        split=row["split"],
        gesture_label=row["gesture_label"],
        caption=row["caption"],
        image=load_rgb(root / files["image"]),
        depth=load_depth(root / files["depth"]),
        hand_rgb=load_rgb(root / files["hand_rgb"]),
        hand_depth=load_depth(root / files["hand_depth"]),
        mesh=mesh,
        bbox=NormalizedBBox(*row["bbox"]),
    )


# ---------------------------------------------------------------------------
# Manifest (line-delimited JSON with a schema-version header)
# ---------------------------------------------------------------------------

_ROW_FIELDS = ("sample_id", "split", "gesture_label", "caption", "bbox", "files")


def write_manifest(path, rows, image_size, crop_size):
    """Write rows sorted by sample_id; byte-stable for identical inputs."""
    header = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "image_size": image_size,
        "crop_size": crop_size,
        "field_order": list(_ROW_FIELDS),
    }
    ordered = sorted(rows, key=lambda r: r["sample_id"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for row in ordered:
            out = {k: row[k] for k in _ROW_FIELDS}
            fh.write(json.dumps(out, separators=(",", ":")) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise RecordFormatError("manifest is empty", field="header")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise RecordFormatError(
            f"unexpected manifest schema {header.get('schema')!r}", field="schema"
        )
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        row = json.loads(line)
        missing = [k for k in _ROW_FIELDS if k not in row]
        if missing:
            raise RecordFormatError(f"manifest line {i} missing {missing}", field=missing[0])
        rows.append(row)
    return header, rows


# ---------------------------------------------------------------------------
# Caption prompt template
# ---------------------------------------------------------------------------

CAPTION_PROMPT_VERSION = 1
_CAPTION_TEMPLATE = (
    "The photo shows a person performing the '{label}' hand gesture. "
    "Describe the image in one sentence: name the gesture and describe the "
    "background and lighting around the person."
)


def caption_prompt(label):
    if label not in GESTURES:
        raise ValidationError(f"unknown gesture label {label!r}")
    return _CAPTION_TEMPLATE.format(label=label)


def caption_prompt_hash():
    payload = f"v{CAPTION_PROMPT_VERSION}:{_CAPTION_TEMPLATE}"
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Annotator adapters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rejected:
    """Adapter verdict: drop the sample for this documented reason."""

    reason: str


@dataclass
class RawSample:
    """Uncurated source record: a larger scene plus a rough hand center hint."""

    sample_id: str
    image: np.ndarray  # (H, W, 3) uint8
    gesture_label: str
    hand_center: tuple  # (x, y) pixels in the raw frame
    split: str = "train"


@dataclass
class AdapterContext:
    """What curation passes to adapters alongside the cropped image."""

    sample_id: str
    gesture_label: str
    raw_root: Optional[Path] = None
    crop_window: Optional[tuple] = None  # (col0, row0, size) in the raw frame


class AcceptAllPoseFilter:
    kind = "pose_filter"

    def annotate(self, image, ctx):
        return None


class RejectEveryNthPoseFilter:
    kind = "pose_filter"

    def __init__(self, n=2, reason="distorted_pose"):
        if n < 1:
            raise ValidationError("n must be >= 1")
        self.n = n
        self.reason = reason
        self._seen = 0

    def annotate(self, image, ctx):
        self._seen += 1
        if self._seen % self.n == 0:
            return Rejected(self.reason)
        return None


class LumaDepthAnnotator:
    """Stand-in depth: normalized image luminance (deterministic)."""

    kind = "depth"

    def annotate(self, image, ctx):
        gray = image.astype(np.float64).mean(axis=2) / 255.0
        return quantize_depth(gray)


class FixedMeshAnnotator:
    """Stand-in mesh: the canonical rest-pose hand and a centered box."""

    kind = "mesh"

    def __init__(self, bbox=(0.3, 0.3, 0.7, 0.7)):
        self.bbox = NormalizedBBox(*bbox)

    def annotate(self, image, ctx):
        from .mesh import canonical_hand

        return canonical_hand().mesh, self.bbox


class EchoCaptionAnnotator:
    """Stand-in captioner: deterministic sentence derived from the prompt."""

    kind = "caption"

    def annotate(self, image, ctx, prompt):
        return f"a person performing the {ctx.gesture_label} hand gesture"


class OracleDepthAnnotator:
    """Reads the generator's ground-truth depth for the cropped window."""

    kind = "depth"

    def annotate(self, image, ctx):
        full = load_depth(Path(ctx.raw_root) / f"{ctx.sample_id}_truth_depth.png")
        col0, row0, size = ctx.crop_window
        return full[row0 : row0 + size, col0 : col0 + size].copy()


class OracleMeshAnnotator:
    """Reads ground-truth mesh + bbox and re-expresses them in the crop frame."""

    kind = "mesh"

    def annotate(self, image, ctx):
        raw_root = Path(ctx.raw_root)
        mesh, _ = load_mesh_record(raw_root / f"{ctx.sample_id}_truth.hfmesh")
        truth = json.loads((raw_root / f"{ctx.sample_id}_truth.json").read_text())
        col0, row0, size = ctx.crop_window
        raw_w, raw_h = truth["raw_size"]
        bx0, by0, bx1, by1 = truth["bbox"]
        verts = mesh.vertices.copy()
        verts[:, 0] = (verts[:, 0] * raw_w - col0) / size
        verts[:, 1] = (verts[:, 1] * raw_h - row0) / size
        verts[:, 2] = verts[:, 2] * raw_w / size
        bbox = NormalizedBBox(
            x0=max(0.0, (bx0 * raw_w - col0) / size),
            y0=max(0.0, (by0 * raw_h - row0) / size),
            x1=min(1.0, (bx1 * raw_w - col0) / size),
            y1=min(1.0, (by1 * raw_h - row0) / size),
        )
        return HandMesh(vertices=verts, edges=mesh.edges), bbox


class OracleCaptionAnnotator:
    """Reads the generator's ground-truth caption."""

    kind = "caption"

    def annotate(self, image, ctx, prompt):
        truth = json.loads(
            (Path(ctx.raw_root) / f"{ctx.sample_id}_truth.json").read_text()
        )
        return truth["caption"]


ADAPTER_REGISTRY = {
    "pose_filter": {
        "accept_all": AcceptAllPoseFilter,
        "reject_every_nth": RejectEveryNthPoseFilter,
    },
    "depth": {"luma": LumaDepthAnnotator, "oracle": OracleDepthAnnotator},
    "mesh": {"fixed": FixedMeshAnnotator, "oracle": OracleMeshAnnotator},
    "caption": {"echo": EchoCaptionAnnotator, "oracle": OracleCaptionAnnotator},
}


def build_adapters(conf):
    """Instantiate the four adapter kinds from a config mapping."""
    adapters = {}
    for kind in ("pose_filter", "depth", "mesh", "caption"):
        if kind not in conf:
            raise ValidationError(f"adapter config missing kind {kind!r}")
        entry = dict(conf[kind])
        name = entry.pop("name")
        if name not in ADAPTER_REGISTRY[kind]:
            raise ValidationError(
                f"unknown {kind} adapter {name!r}; known: {sorted(ADAPTER_REGISTRY[kind])}"
            )
        adapters[kind] = ADAPTER_REGISTRY[kind][name](**entry)
    return adapters


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------

CURATION_STAGES = (
    "crop",
    "pose_filter",
    "depth",
    "mesh",
    "hand_crops",
    "caption",
    "manual_filter",
    "alignment",
)


@dataclass
class CurationReport:
    input_count: int = 0
    accepted: int = 0
    rejected: dict = field(default_factory=dict)
    reasons: dict = field(default_factory=dict)
    per_gesture: Counter = field(default_factory=Counter)

    def reject(self, stage, reason):
        self.rejected[stage] = self.rejected.get(stage, 0) + 1
        self.reasons.setdefault(stage, Counter())[reason] += 1

    def check_identity(self):
        total = self.accepted + sum(self.rejected.values())
        if total != self.input_count:
            raise ValidationError(
                f"curation accounting broken: {self.input_count} in, "
                f"{self.accepted} accepted + {sum(self.rejected.values())} rejected"
            )

    def as_dict(self):
        return {
            "input_count": self.input_count,
            "accepted": self.accepted,
            "rejected": dict(sorted(self.rejected.items())),
            "reasons": {k: dict(v) for k, v in sorted(self.reasons.items())},
            "per_gesture": dict(sorted(self.per_gesture.items())),
        }


class AdapterFailure(RuntimeError):
    """An adapter raised (as opposed to rejecting); aborts the whole run."""


def _run_adapter(adapter, stage, sample_id, *args, **kwargs):
    try:
        return adapter.annotate(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise AdapterFailure(f"{stage} adapter failed on sample {sample_id!r}: {exc}") from exc


def curate(
    raw_samples,
    adapters,
    out_dir,
    manifest_path,
    image_size,
    crop_size,
    accept_list=None,
    raw_root=None,
    post_write_hook=None,
):
    """Run the staged curation pipeline and write an aligned manifest.

    Stage order: center crop -> pose filter -> depth -> mesh (vertices +
    bbox) -> hand crops -> caption -> manual accept list -> on-disk
    alignment check -> manifest append. A rejection at any stage
    short-circuits that sample; adapter exceptions abort the run.
    ``post_write_hook(sample_id, out_dir)`` runs between persisting a
    sample and the alignment check (used to fault-inject corrupt files).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = CurationReport()
    rows = []
    for raw in raw_samples:
        report.input_count += 1
        h, w = raw.image.shape[:2]
        if image_size > h or image_size > w:
            report.reject("crop", "raw_too_small")
            continue
        cx, cy = raw.hand_center
        col0 = int(np.clip(int(round(cx)) - image_size // 2, 0, w - image_size))
        row0 = int(np.clip(int(round(cy)) - image_size // 2, 0, h - image_size))
        image = raw.image[row0 : row0 + image_size, col0 : col0 + image_size].copy()
        ctx = AdapterContext(
            sample_id=raw.sample_id,
            gesture_label=raw.gesture_label,
            raw_root=raw_root,
            crop_window=(col0, row0, image_size),
        )

        verdict = _run_adapter(adapters["pose_filter"], "pose_filter", raw.sample_id, image, ctx)
        if isinstance(verdict, Rejected):
            report.reject("pose_filter", verdict.reason)
            continue

        depth = _run_adapter(adapters["depth"], "depth", raw.sample_id, image, ctx)
        if isinstance(depth, Rejected):
            report.reject("depth", depth.reason)
            continue
        depth = quantize_depth(np.asarray(depth, dtype=np.float64))
        if depth.shape != image.shape[:2]:
            raise AdapterFailure(
                f"depth adapter returned {depth.shape} for image {image.shape[:2]}"
            )

        mesh_out = _run_adapter(adapters["mesh"], "mesh", raw.sample_id, image, ctx)
        if isinstance(mesh_out, Rejected):
            report.reject("mesh", mesh_out.reason)
            continue
        mesh, bbox = mesh_out

        try:
            center = bbox_center_px(bbox, image_size, image_size)
            hand_rgb = crop_centered(image, center, crop_size)
            hand_depth = crop_centered(depth, center, crop_size)
        except ValidationError as exc:
            report.reject("hand_crops", str(exc))
            continue

        caption = _run_adapter(
            adapters["caption"],
            "caption",
            raw.sample_id,
            image,
            ctx,
            prompt=caption_prompt(raw.gesture_label),
        )
        if isinstance(caption, Rejected):
            report.reject("caption", caption.reason)
            continue

        if accept_list is not None and raw.sample_id not in accept_list:
            report.reject("manual_filter", "not_in_accept_list")
            continue

        sample = MultimodalSample(
            sample_id=raw.sample_id,
            split=raw.split,
            gesture_label=raw.gesture_label,
            caption=caption,
            image=image,
            depth=depth,
            hand_rgb=hand_rgb,
            hand_depth=hand_depth,
            mesh=mesh,
            bbox=bbox,
        )
        row = save_sample(sample, out_dir)
        if post_write_hook is not None:
            post_write_hook(raw.sample_id, out_dir)
        reloaded = load_sample(row, out_dir)
        reason = verify_alignment(reloaded)
        if reason is not None:
            for fname in row["files"].values():
                (out_dir / fname).unlink(missing_ok=True)
            report.reject("alignment", reason)
            continue

        rows.append(row)
        report.accepted += 1
        report.per_gesture[raw.gesture_label] += 1

    write_manifest(manifest_path, rows, image_size, crop_size)
    report.check_identity()
    return report


# ---------------------------------------------------------------------------
# Raw-source directory layout (input to `curate`)
# ---------------------------------------------------------------------------


def save_raw_sample(raw, root, truth=None):
    """Persist a raw record; ``truth`` optionally carries oracle annotations."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    save_rgb(root / f"{raw.sample_id}_raw.png", raw.image)
    meta = {
        "sample_id": raw.sample_id,
        "gesture_label": raw.gesture_label,
        "hand_center": list(raw.hand_center),
        "split": raw.split,
    }
    (root / f"{raw.sample_id}_raw.json").write_text(json.dumps(meta, separators=(",", ":")))
    if truth is not None:
        save_depth(root / f"{raw.sample_id}_truth_depth.png", truth["depth"])
        save_mesh_record(root / f"{raw.sample_id}_truth.hfmesh", truth["mesh"])
        payload = {
            "bbox": list(truth["bbox"].as_tuple()),
            "caption": truth["caption"],
            "raw_size": [raw.image.shape[1], raw.image.shape[0]],
        }
        (root / f"{raw.sample_id}_truth.json").write_text(
            json.dumps(payload, separators=(",", ":"))
        )


def load_raw_dir(root):
    root = Path(root)
    raws = []
    for meta_path in sorted(root.glob("*_raw.json")):
        meta = json.loads(meta_path.read_text())
        image = load_rgb(root / f"{meta['sample_id']}_raw.png")
        raws.append(
            RawSample(
                sample_id=meta["sample_id"],
                image=image,
                gesture_label=meta["gesture_label"],
                hand_center=tuple(meta["hand_center"]),
                split=meta.get("split", "train"),
            )
        )
    return raws
