"""Procedural pedestrians with pixel-exact part masks.

A prototype fixes an identity's colours and proportions; :func:`render` draws
eight body parts over a noisy background and records which part won each
pixel.  :func:`occlude` pastes a textured obstacle and reassigns the covered
pixels to background, which is what a parser would report.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .rng import Stream

PART_NAMES = ("background", "head", "left_arm", "right_arm", "torso",
              "left_leg", "right_leg", "left_foot", "right_foot")
N_PARTS = 8

RECORD_MAGIC = b"OGFRIMG1"
_GOLDEN = 0.6180339887498949


@dataclass
class SynthImage:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    identity: int
    camera: int


@dataclass
class ParsingMask:
    """Per-pixel part labels; channel 0 is background."""

    labels: np.ndarray  # (H, W) uint8 in [0, K]
    n_parts: int = N_PARTS

    def one_hot(self) -> np.ndarray:
        return np.eye(self.n_parts + 1, dtype=np.uint8)[self.labels]

    def channel_sums(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_parts + 1)

    def copy(self) -> "ParsingMask":
        return ParsingMask(self.labels.copy(), self.n_parts)


@dataclass
class Obstacle:
    rect: tuple  # (top, left, height, width)
    texture: int

    @property
    def area(self) -> int:
        return self.rect[2] * self.rect[3]


@dataclass
class Prototype:
    identity: int
    colors: dict
    torso_width: float
    leg_length: float
    head_radius: float
    arm_width: float
    stripe: float  # torso stripe contrast

    def key(self) -> tuple:
        vals = [self.torso_width, self.leg_length, self.head_radius, self.arm_width, self.stripe]
        for name in sorted(self.colors):
            vals.extend(self.colors[name])
        return tuple(round(float(v), 12) for v in vals)


@dataclass
class Sample:
    image: SynthImage
    mask: ParsingMask
    obstacle: Obstacle | None = None


def _hsv(h, s, v):
    h = (h % 1.0) * 6.0
    i = int(h) % 6
    f = h - int(h)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def generate_identity_prototype(identity: int, rng: Stream) -> Prototype:
    """Colours and proportions for one identity.

    Torso and leg hues step by golden-ratio increments of the id, so
    consecutive ids land far apart on the colour wheel; the remaining
    attributes come from the stream ``rng.split("proto", id)``.
    """
    if identity < 0:
        raise ConfigError(f"identity must be >= 0, got {identity}")
    r = rng.split("proto", identity)
    torso = _hsv(identity * _GOLDEN, 0.75 + 0.2 * r.uniform(), 0.75 + 0.2 * r.uniform())
    legs = _hsv(0.5 + identity * _GOLDEN * 2.0 + 0.1 * r.uniform(),
                0.5 + 0.4 * r.uniform(), 0.35 + 0.5 * r.uniform())
    colors = {
        "head": np.array([0.85, 0.65, 0.5]) * (0.7 + 0.3 * r.uniform()),
        "arms": np.clip(torso * (0.6 + 0.3 * r.uniform()) + 0.1 * r.uniform(size=3), 0, 1),
        "torso": torso,
        "legs": legs,
        "feet": r.uniform(0.05, 0.5, size=3),
    }
    return Prototype(
        identity=identity,
        colors=colors,
        torso_width=r.uniform(11.0, 15.0),
        leg_length=r.uniform(15.0, 19.0),
        head_radius=r.uniform(5.0, 6.5),
        arm_width=r.uniform(3.5, 5.0),
        stripe=r.uniform(0.0, 0.25),
    )


def part_layers(proto: Prototype, height: int, width: int, jitter=(0, 0)) -> list:
    """Boolean shape of each body part in drawing order ``(label, mask)``.

    Geometry is laid out for a 64x32 canvas and scaled to ``height`` x
    ``width``; ``jitter`` shifts the whole figure by (rows, cols).
    """
    sy, sx = height / 64.0, width / 32.0
    dy, dx = jitter
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]

    def rect(top, left, h, w):
        t, l = (top + dy) * sy, (left + dx) * sx
        return (rows >= round(t)) & (rows < round(t + h * sy)) & (cols >= round(l)) & (cols < round(l + w * sx))

    cx = 16.0
    tw, aw = proto.torso_width, proto.arm_width
    torso_top, torso_h = 15.0, 20.0
    leg_top = torso_top + torso_h + 1
    leg_h = proto.leg_length
    leg_w = tw / 2.0 - 1.0
    hr = proto.head_radius
    head = (((rows - (8.0 + dy) * sy) / (hr * sy)) ** 2 + ((cols - (cx + dx) * sx) / (hr * 0.85 * sx)) ** 2) <= 1.0
    layers = [
        (2, rect(torso_top, cx - tw / 2 - aw - 0.5, torso_h - 2, aw)),
        (3, rect(torso_top, cx + tw / 2 + 0.5, torso_h - 2, aw)),
        (4, rect(torso_top, cx - tw / 2, torso_h, tw)),
        (5, rect(leg_top, cx - tw / 2, leg_h, leg_w)),
        (6, rect(leg_top, cx + 1.0, leg_h, leg_w)),
        (7, rect(leg_top + leg_h, cx - tw / 2 - 2, 4, leg_w + 2)),
        (8, rect(leg_top + leg_h, cx + 1.0, 4, leg_w + 2)),
        (1, head),
    ]
    return layers


def _part_color(proto: Prototype, label: int) -> np.ndarray:
    return proto.colors[{1: "head", 2: "arms", 3: "arms", 4: "torso", 5: "legs",
                         6: "legs", 7: "feet", 8: "feet"}[label]]


def render(proto: Prototype, camera: int, pose_jitter, rng: Stream,
           height=64, width=32, n_cameras=4):
    """Draw one image of ``proto``; returns ``(SynthImage, ParsingMask)``.

    ``pose_jitter`` is an (rows, cols) shift.  The camera id scales global
    brightness so that camera embeddings have something to learn.
    """
    pixels = (0.45 + 0.1 * rng.uniform(size=(height, width, 3))).astype(np.float64)
    labels = np.zeros((height, width), dtype=np.uint8)
    for label, shape in part_layers(proto, height, width, pose_jitter):
        color = _part_color(proto, label)
        shade = 1.0 + 0.06 * rng.standard_normal(size=(height, width, 1))
        fill = color[None, None, :] * shade
        if label == 4 and proto.stripe > 0:
            stripes = ((np.arange(height) // max(1, height // 16)) % 2)[:, None, None]
            fill = fill * (1.0 - proto.stripe * stripes)
        pixels = np.where(shape[..., None], fill, pixels)
        labels[shape] = label
    gain = 0.8 + 0.4 * (camera / max(1, n_cameras - 1))
    pixels = np.clip(pixels * gain, 0.0, 1.0).astype(np.float32)
    return SynthImage(pixels, proto.identity, int(camera)), ParsingMask(labels)


def occlude(img: SynthImage, mask: ParsingMask, rng: Stream, area=(0.1, 0.4), rect=None):
    """Paste a textured obstacle; covered pixels become background.

    ``area`` is the (low, high) range of the obstacle area as a fraction of
    the image; ``(0, 0)`` disables occlusion and ``rect`` pins the position.
    """
    h, w = mask.labels.shape
    if rect is None:
        frac = rng.uniform(area[0], area[1]) if area[1] > area[0] else float(area[0])
        target = frac * h * w
        if target <= 0:
            rect = (0, 0, 0, 0)
        else:
            aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            rh = int(np.clip(round(np.sqrt(target * aspect)), 1, h))
            rw = int(np.clip(round(target / rh), 1, w))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            rect = (top, left, rh, rw)
    top, left, rh, rw = rect
    if not (0 <= top and 0 <= left and rh >= 0 and rw >= 0 and top + rh <= h and left + rw <= w):
        raise ConfigError(f"obstacle rect {rect} does not fit a {h}x{w} image")
    seed = int(rng.integers(0, 2**31 - 1))
    pixels = img.pixels.copy()
    labels = mask.labels.copy()
    if rh and rw:
        tex = Stream(seed)
        base = tex.uniform(0.0, 1.0, size=3)
        noise = tex.uniform(-0.25, 0.25, size=(rh, rw, 3))
        pixels[top:top + rh, left:left + rw] = np.clip(base + noise, 0.0, 1.0)
        labels[top:top + rh, left:left + rw] = 0
    return (SynthImage(pixels, img.identity, img.camera), ParsingMask(labels, mask.n_parts),
            Obstacle(tuple(int(v) for v in rect), seed))


def _jitter(rng: Stream, amount: int):
    if amount <= 0:
        return (0, 0)
    return tuple(int(v) for v in rng.integers(-amount, amount + 1, size=2))


def build_splits(n_ids: int, imgs_per_id: int, config) -> dict:
    """Train / query / gallery lists of :class:`Sample`.

    ``config`` is a :class:`ogfr.config.Config`.  Training images are
    holistic renders of every identity; query images are fresh occluded
    renders; gallery images are fresh holistic renders taken from cameras
    other than the identity's query camera.
    """
    data, model = config.data, config.model
    if n_ids < 2:
        raise ConfigError(f"need at least 2 identities, got {n_ids}")
    if imgs_per_id < 2:
        raise ConfigError(f"each identity needs at least 2 images, got {imgs_per_id}")
    if data.n_cameras < 2:
        raise ConfigError("need at least 2 cameras for cross-camera query/gallery")
    root = Stream(config.seed).split("data")
    splits = {"train": [], "query": [], "gallery": []}
    for pid in range(n_ids):
        proto = generate_identity_prototype(pid, root)
        r = root.split("id", pid)

        def draw(cam, tag, idx):
            s = r.split(tag, idx)
            img, msk = render(proto, cam, _jitter(s, data.pose_jitter), s,
                              model.height, model.width, data.n_cameras)
            return img, msk, s

        for j in range(imgs_per_id):
            cam = int(r.split("train-cam", j).integers(0, data.n_cameras))
            img, msk, _ = draw(cam, "train", j)
            splits["train"].append(Sample(img, msk))
        q_cam = int(r.split("query-cam").integers(0, data.n_cameras))
        for j in range(data.query_per_id):
            img, msk, s = draw(q_cam, "query", j)
            img, msk, obs = occlude(img, msk, s.split("occ"), (data.occlusion_min, data.occlusion_max))
            splits["query"].append(Sample(img, msk, obs))
        others = [c for c in range(data.n_cameras) if c != q_cam]
        for j in range(data.gallery_per_id):
            cam = others[int(r.split("gallery-cam", j).integers(0, len(others)))]
            img, msk, _ = draw(cam, "gallery", j)
            splits["gallery"].append(Sample(img, msk))
    return splits


# ---------------------------------------------------------------------------
# archive


def encode_record(sample: Sample) -> bytes:
    px = np.ascontiguousarray(sample.image.pixels, dtype="<f4")
    h, w, _ = px.shape
    head = RECORD_MAGIC + struct.pack("<III", h, w, sample.mask.n_parts)
    return head + px.tobytes() + np.ascontiguousarray(sample.mask.labels, dtype=np.uint8).tobytes()


def decode_record(blob: bytes, identity: int, camera: int) -> Sample:
    if blob[:8] != RECORD_MAGIC:
        raise FormatError("bad image record magic")
    if len(blob) < 20:
        raise FormatError("truncated image record header")
    h, w, k = struct.unpack("<III", blob[8:20])
    n_px = h * w * 3 * 4
    if len(blob) != 20 + n_px + h * w:
        raise FormatError(f"image record length {len(blob)} does not match {h}x{w}")
    pixels = np.frombuffer(blob, dtype="<f4", count=h * w * 3, offset=20).reshape(h, w, 3)
    labels = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=20 + n_px).reshape(h, w)
    if labels.max(initial=0) > k:
        raise FormatError("mask label exceeds part count")
    return Sample(SynthImage(pixels.astype(np.float32), identity, camera), ParsingMask(labels.copy(), k))


@dataclass
class Dataset:
    splits: dict
    meta: dict = field(default_factory=dict)


def write_archive(splits: dict, out_dir, config) -> dict:
    """Write ``meta.json`` plus one binary record per image; returns meta."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    records = []
    index = {}
    for split in ("train", "query", "gallery"):
        index[split] = []
        for sample in splits[split]:
            i = len(records)
            name = f"images/{i:06d}.bin"
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(encode_record(sample))
            records.append({"file": name, "identity": sample.image.identity,
                            "camera": sample.image.camera, "split": split})
            index[split].append(i)
    meta = {
        "format": "ogfr-dataset",
        "version": 1,
        "seed": config.seed,
        "config_hash": config.data_hash(),
        "height": config.model.height,
        "width": config.model.width,
        "n_parts": N_PARTS,
        "n_ids": len({r["identity"] for r in records}),
        "n_cameras": config.data.n_cameras,
        "records": records,
        "splits": index,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return meta


def read_archive(data_dir) -> Dataset:
    meta_path = os.path.join(data_dir, "meta.json")
    with open(meta_path, encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: {exc}") from None
    if meta.get("format") != "ogfr-dataset":
        raise FormatError(f"{meta_path}: not a dataset archive")
    splits = {}
    for split, idxs in meta["splits"].items():
        items = []
        for i in idxs:
            rec = meta["records"][i]
            with open(os.path.join(data_dir, rec["file"]), "rb") as fh:
                items.append(decode_record(fh.read(), rec["identity"], rec["camera"]))
        splits[split] = items
    return Dataset(splits, meta)


def archive_digest(data_dir) -> str:
    """SHA-256 over every file of an archive, in sorted path order."""
    h = hashlib.sha256()
    for base, _, files in sorted(os.walk(data_dir)):
        for name in sorted(files):
            path = os.path.join(base, name)
            h.update(os.path.relpath(path, data_dir).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
