"""Procedural "person" images with fine part masks, identities and camera styles.

Each identity is a fixed combination of hair, skin, upper-clothes, pants and
shoe colours plus body proportions. Each camera has its own background
texture, illumination gain, clutter density and occlusion probability.
Clutter rectangles reuse the clothing palette, so pooling over the whole
image mixes identity evidence with background distractors.
"""

from __future__ import annotations

import itertools
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .parsing import LABEL_INDEX
from .tensor import load_tensor, save_tensor

BACKGROUND = LABEL_INDEX["Background"]
HAIR = LABEL_INDEX["Hair"]
FACE = LABEL_INDEX["Face"]
UPPER = LABEL_INDEX["Upper-clothes"]
PANTS = LABEL_INDEX["Pants"]
RIGHT_SHOE = LABEL_INDEX["Right-shoe"]
LEFT_SHOE = LABEL_INDEX["Left-shoe"]
USED_LABELS = (BACKGROUND, HAIR, FACE, UPPER, PANTS, RIGHT_SHOE, LEFT_SHOE)

CLOTHING_PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.65, 0.20], [0.15, 0.30, 0.85], [0.90, 0.80, 0.15],
    [0.60, 0.20, 0.70], [0.10, 0.70, 0.75], [0.95, 0.50, 0.10], [0.95, 0.95, 0.95],
    [0.10, 0.10, 0.10], [0.55, 0.35, 0.20],
])
HAIR_PALETTE = np.array([[0.08, 0.06, 0.05], [0.45, 0.28, 0.12], [0.85, 0.70, 0.35], [0.55, 0.55, 0.55]])
SKIN_PALETTE = np.array([[0.96, 0.80, 0.68], [0.80, 0.60, 0.45], [0.50, 0.35, 0.25]])

TEXTURES = ("gradient", "stripes", "blobs")


class SplitError(ValueError):
    """The requested split constraints cannot be satisfied."""


@dataclass(frozen=True)
class SyntheticPersonSpec:
    identity: int
    hair: np.ndarray
    skin: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    shoes: np.ndarray
    head_frac: float
    torso_frac: float
    torso_width: float
    leg_width: float
    jitter: float = 0.06


@dataclass(frozen=True)
class CameraStyle:
    camera: int
    texture: str
    background: np.ndarray
    gain: float
    clutter_density: float
    occlusion_prob: float

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("camera gain must be positive")
        if not (0 <= self.clutter_density <= 1 and 0 <= self.occlusion_prob <= 1):
            raise ValueError("clutter density and occlusion probability must lie in [0, 1]")


@dataclass
class SyntheticDataset:
    images: np.ndarray          # N x 3 x H x W in [0, 1]
    masks: np.ndarray           # N x H x W uint8 fine labels
    identities: np.ndarray
    cameras: np.ndarray
    splits: np.ndarray          # "train" | "query" | "gallery"
    manifest: list = field(default_factory=list)

    def subset(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def save(self, root) -> Path:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for rec, img, mask in zip(self.manifest, self.images, self.masks):
            save_tensor(root / rec["path"], img)
            save_tensor(root / rec["mask_path"], mask)
        with open(root / "manifest.jsonl", "w") as fh:
            for rec in self.manifest:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return root / "manifest.jsonl"


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(manifest_path, split: str | None = None) -> SyntheticDataset:
    """Load images/masks listed in a manifest (optionally one split only)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = [r for r in read_manifest(manifest_path) if split is None or r["split"] == split]
    if not records:
        raise SplitError(f"manifest {manifest_path} has no records for split {split!r}")
    images = np.stack([load_tensor(root / r["path"]) for r in records]).astype(np.float64)
    masks = np.stack([
        load_tensor(root / r["mask_path"]).astype(np.uint8) if r.get("mask_path") else
        np.zeros(images.shape[2:], np.uint8) for r in records
    ])
    return SyntheticDataset(
        images=images,
        masks=masks,
        identities=np.array([r["identity"] for r in records]),
        cameras=np.array([r["camera"] for r in records]),
        splits=np.array([r["split"] for r in records]),
        manifest=records,
    )


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def make_identities(rng: np.random.Generator, n_ids: int) -> list[SyntheticPersonSpec]:
    combos = list(itertools.product(range(len(CLOTHING_PALETTE)), repeat=3))
    pick = rng.choice(len(combos), size=n_ids, replace=False)
    specs = []
    for pid, c in enumerate(pick):
        u, lo, s = combos[c]
        specs.append(SyntheticPersonSpec(
            identity=pid,
            hair=HAIR_PALETTE[rng.integers(len(HAIR_PALETTE))],
            skin=SKIN_PALETTE[rng.integers(len(SKIN_PALETTE))],
            upper=CLOTHING_PALETTE[u],
            lower=CLOTHING_PALETTE[lo],
            shoes=CLOTHING_PALETTE[s],
            head_frac=float(rng.uniform(0.15, 0.19)),
            torso_frac=float(rng.uniform(0.33, 0.40)),
            torso_width=float(rng.uniform(0.50, 0.68)),
            leg_width=float(rng.uniform(0.40, 0.55)),
        ))
    return specs


def make_cameras(rng: np.random.Generator, n_cams: int, clutter: float, occlusion: float) -> list[CameraStyle]:
    return [
        CameraStyle(
            camera=c,
            texture=TEXTURES[c % len(TEXTURES)],
            background=rng.uniform(0.2, 0.8, size=3),
            gain=float(rng.uniform(0.75, 1.25)),
            clutter_density=clutter,
            occlusion_prob=occlusion,
        )
        for c in range(n_cams)
    ]


def _background(rng, cam: CameraStyle, h: int, w: int) -> np.ndarray:
    base = cam.background[:, None, None] * np.ones((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    if cam.texture == "gradient":
        base = base * (0.7 + 0.6 * yy / max(h - 1, 1))[None]
    elif cam.texture == "stripes":
        period = rng.integers(4, 9)
        base = base * (0.75 + 0.5 * ((yy // period) % 2))[None]
    else:
        for _ in range(4):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(0.1, 0.3) * h
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            base = base + blob[None] * rng.uniform(-0.3, 0.3, size=3)[:, None, None]
    return base


def _rect(y0, y1, x0, x1, h, w):
    y0, y1 = int(np.clip(round(y0), 0, h)), int(np.clip(round(y1), 0, h))
    x0, x1 = int(np.clip(round(x0), 0, w)), int(np.clip(round(x1), 0, w))
    return slice(y0, y1), slice(x0, x1)


def render(rng, person: SyntheticPersonSpec, cam: CameraStyle, size, jitter=True, noise=0.03,
           scale_jitter=0.0):
    """Draw one image; returns ``(image 3xHxW, fine mask HxW, silhouette HxW)``.

    ``scale_jitter`` > 0 additionally rescales the whole figure about its centre
    by a factor drawn from ``[1 - scale_jitter, 1 + scale_jitter]``; parts that
    leave the frame are cropped.
    """
    h, w = size
    img = _background(rng, cam, h, w)
    n_clutter = int(round(cam.clutter_density * 8))
    for _ in range(n_clutter):
        ch, cw = rng.uniform(0.08, 0.3) * h, rng.uniform(0.15, 0.5) * w
        y0, x0 = rng.uniform(-0.1 * h, h), rng.uniform(-0.2 * w, w)
        ys, xs = _rect(y0, y0 + ch, x0, x0 + cw, h, w)
        img[:, ys, xs] = CLOTHING_PALETTE[rng.integers(len(CLOTHING_PALETTE))][:, None, None]

    j = person.jitter if jitter else 0.0
    top = (0.04 + rng.uniform(-j, j) * 0.5) * h
    height = (0.92 + rng.uniform(-j, j)) * h - top
    cx = (0.5 + rng.uniform(-j, j)) * w
    scale_w = 1.0 + rng.uniform(-j, j)
    if jitter and scale_jitter > 0:
        s = 1.0 + rng.uniform(-scale_jitter, scale_jitter)
        mid = top + height / 2
        height *= s
        top = mid - height / 2
        scale_w *= s

    mask = np.zeros((h, w), dtype=np.uint8)
    colour = np.zeros((3, h, w))

    def paint(label, rgb, y0, y1, x0, x1):
        ys, xs = _rect(y0, y1, x0, x1, h, w)
        mask[ys, xs] = label
        colour[:, ys, xs] = rgb[:, None, None]

    head_h = person.head_frac * height
    head_w = 0.34 * w * scale_w
    torso_h = person.torso_frac * height
    shoe_h = 0.09 * height
    leg_h = height - head_h - torso_h - shoe_h
    y = top
    paint(HAIR, person.hair, y, y + 0.4 * head_h, cx - head_w / 2, cx + head_w / 2)
    paint(FACE, person.skin, y + 0.4 * head_h, y + head_h, cx - head_w / 2, cx + head_w / 2)
    y += head_h
    tw = person.torso_width * w * scale_w
    paint(UPPER, person.upper, y, y + torso_h, cx - tw / 2, cx + tw / 2)
    y += torso_h
    lw = person.leg_width * w * scale_w
    gap = 0.04 * w
    paint(PANTS, person.lower, y, y + leg_h, cx - lw / 2, cx - gap / 2)
    paint(PANTS, person.lower, y, y + leg_h, cx + gap / 2, cx + lw / 2)
    y += leg_h
    # frontal view: the person's right shoe appears on the image's left
    paint(RIGHT_SHOE, person.shoes, y, y + shoe_h, cx - lw / 2 - 0.03 * w, cx - gap / 2)
    paint(LEFT_SHOE, person.shoes, y, y + shoe_h, cx + gap / 2, cx + lw / 2 + 0.03 * w)

    silhouette = mask > 0
    img = np.where(silhouette[None], colour, img)

    if rng.uniform() < cam.occlusion_prob:
        oh = rng.uniform(0.15, 0.35) * h
        ow = rng.uniform(0.3, 0.6) * w
        oy = rng.uniform(0.3 * h, h - oh)
        ox = 0.0 if rng.uniform() < 0.5 else w - ow
        ys, xs = _rect(oy, oy + oh, ox, ox + ow, h, w)
        img[:, ys, xs] = rng.uniform(0.1, 0.9, size=3)[:, None, None]
        mask[ys, xs] = BACKGROUND

    img = img * cam.gain
    if noise:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0), mask, silhouette


def assign_splits(rng, identities, cameras, n_ids, train_fraction=0.5):
    """Disjoint train/test identities; one query per (test identity, camera).

    A query is only taken when the identity keeps a gallery image from another
    camera.
    """
    ids = rng.permutation(n_ids)
    n_train = int(round(n_ids * train_fraction))
    if n_train < 1 or n_train >= n_ids:
        raise SplitError(f"train_fraction={train_fraction} leaves an empty train or test set")
    train_ids = set(ids[:n_train].tolist())
    splits = np.where(np.isin(identities, list(train_ids)), "train", "gallery").astype(object)
    for pid in ids[n_train:]:
        rows = np.flatnonzero(identities == pid)
        cams = np.unique(cameras[rows])
        if len(cams) < 2:
            raise SplitError(f"identity {pid} is seen by a single camera; no cross-camera query possible")
        for cam in cams:
            cand = rows[cameras[rows] == cam]
            remaining = np.setdiff1d(rows, cand[:1])
            if np.any(cameras[remaining] != cam) and len(cand) > 0:
                splits[cand[0]] = "query"
        if not np.any(splits[rows] == "query"):
            raise SplitError(f"identity {pid} has no valid query")
    return splits.astype(str)


def generate(seed: int, n_ids: int, imgs_per_id: int, n_cams: int, size=(64, 24),
             clutter: float = 0.5, occlusion: float = 0.1, jitter: bool = True,
             noise: float = 0.03, scale_jitter: float = 0.0, train_fraction: float = 0.5,
             cameras: list[CameraStyle] | None = None) -> SyntheticDataset:
    if n_ids < 2:
        raise SplitError("need at least two identities")
    if n_cams < 2:
        raise SplitError("need at least two cameras")
    if imgs_per_id < 2:
        raise SplitError("need at least two images per identity for a query/gallery split")
    people = make_identities(_stream(seed, "identities"), n_ids)
    cams = cameras or make_cameras(_stream(seed, "cameras"), n_cams, clutter, occlusion)
    if len(cams) != n_cams:
        raise ValueError("number of camera styles must equal n_cams")
    render_rng = _stream(seed, "render")
    images, masks, identities, camera_ids = [], [], [], []
    cam_rng = _stream(seed, "camera-assignment")
    for person in people:
        offset = int(cam_rng.integers(n_cams))
        order = cam_rng.permutation(imgs_per_id)
        for k in range(imgs_per_id):
            cam = cams[(order[k] + offset) % n_cams]
            img, mask, _ = render(render_rng, person, cam, size, jitter=jitter, noise=noise,
                                  scale_jitter=scale_jitter)
            images.append(img)
            masks.append(mask)
            identities.append(person.identity)
            camera_ids.append(cam.camera)
    identities = np.array(identities)
    camera_ids = np.array(camera_ids)
    splits = assign_splits(_stream(seed, "splits"), identities, camera_ids, n_ids, train_fraction)
    manifest = [
        {
            "path": f"images/{i:05d}.sprt",
            "mask_path": f"masks/{i:05d}.sprt",
            "identity": int(identities[i]),
            "camera": int(camera_ids[i]),
            "split": str(splits[i]),
        }
        for i in range(len(images))
    ]
    return SyntheticDataset(
        images=np.stack(images).astype(np.float32),
        masks=np.stack(masks),
        identities=identities,
        cameras=camera_ids,
        splits=splits,
        manifest=manifest,
    )
