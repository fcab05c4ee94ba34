"""Turntable datasets: on-disk layout, synthetic renderer, and pair sampling.

Layout::

    root/objects/<id>/<angle>.png   8-bit RGB, angle zero-padded to 3 digits
    root/masks/<id>/<angle>.png     optional, binarized at 127
    root/manifest.json
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

STEP = 5
N_VIEWS = 360 // STEP
MAX_K = 36
MANIFEST_VERSION = 1
SPLITS = ("train", "seen_test", "unseen_test")
PRIMITIVES = ("cuboid", "hexagonal prism", "L-shape")


class DatasetError(ValueError):
    pass


def to_unit(x):
    """uint8 [0,255] -> float32 [-1,1]."""
    return np.asarray(x, dtype=np.float32) / 127.5 - 1.0


def from_unit(x):
    """float [-1,1] -> uint8, rounding to nearest."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def view_angle(base, k):
    return (base + STEP * k) % 360


# ----------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ViewRecord:
    object_id: int
    angle: int
    image_path: Path
    mask_path: Path | None = None


@dataclass
class TurntableManifest:
    root: Path
    objects: dict[int, list[ViewRecord]]
    split: dict[int, str]
    resolution: tuple[int, int]
    pairs_train: list[tuple[int, int]] = field(default_factory=list)
    pairs_seen_test: list[tuple[int, int]] = field(default_factory=list)
    pairs_unseen_test: list[tuple[int, int]] = field(default_factory=list)

    def ids(self, split):
        return sorted(i for i, s in self.split.items() if s == split)

    @property
    def train_ids(self):
        # seen-test objects are training objects evaluated on held-out start angles
        return sorted(i for i, s in self.split.items() if s in ("train", "seen_test"))

    def pairs(self, split):
        return {"train": self.pairs_train, "seen_test": self.pairs_seen_test,
                "unseen_test": self.pairs_unseen_test}[split]

    @property
    def has_masks(self):
        return all(v.mask_path is not None for views in self.objects.values() for v in views)

    @property
    def has_intermediates(self):
        return all(len(views) == N_VIEWS for views in self.objects.values())

    def view(self, object_id, angle):
        return self.objects[object_id][(angle % 360) // STEP]

    def to_json(self):
        h, w = self.resolution
        return {
            "version": MANIFEST_VERSION,
            "resolution": [h, w],
            "splits": {str(i): self.split[i] for i in sorted(self.split)},
            "pairs_train": [list(p) for p in self.pairs_train],
            "pairs_seen_test": [list(p) for p in self.pairs_seen_test],
            "pairs_unseen_test": [list(p) for p in self.pairs_unseen_test],
        }


def assign_splits(object_ids, seed=0, unseen_frac=0.1, seen_frac=0.1):
    """Return {id: split}.  Seen-test objects are a subset of the training objects."""
    ids = sorted(object_ids)
    if len(ids) < 3:
        raise DatasetError("need at least 3 objects to populate train/seen/unseen splits")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_unseen = max(1, round(len(ids) * unseen_frac))
    n_seen = max(1, round(len(ids) * seen_frac))
    out = {}
    for rank, idx in enumerate(order):
        if rank < n_unseen:
            out[ids[idx]] = "unseen_test"
        elif rank < n_unseen + n_seen:
            out[ids[idx]] = "seen_test"
        else:
            out[ids[idx]] = "train"
    return out


def make_pairs(split):
    """Materialize (object_id, base_angle) pair lists.

    Training pairs start at even multiples of 5 degrees (36 per object); test
    pairs start at odd multiples, so seen-test pairs never share a start angle
    with training.
    """
    train_bases = list(range(0, 360, 2 * STEP))
    test_bases = list(range(STEP, 360, 2 * STEP))
    train = [(i, b) for i in sorted(split) if split[i] in ("train", "seen_test") for b in train_bases]
    seen = [(i, b) for i in sorted(split) if split[i] == "seen_test" for b in test_bases]
    unseen = [(i, b) for i in sorted(split) if split[i] == "unseen_test" for b in test_bases]
    return train, seen, unseen


def _image_size(path):
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def load_manifest(root, check_shapes=True) -> TurntableManifest:
    root = Path(root)
    obj_dir, mask_dir = root / "objects", root / "masks"
    if not obj_dir.is_dir():
        raise DatasetError(f"{obj_dir} does not exist")
    ids = sorted(int(p.name) for p in obj_dir.iterdir() if p.is_dir() and p.name.isdigit())
    if not ids:
        raise DatasetError(f"no object directories under {obj_dir}")

    objects = {}
    resolution = None
    for oid in ids:
        views = []
        for angle in range(0, 360, STEP):
            img = obj_dir / str(oid) / f"{angle:03d}.png"
            if not img.exists():
                raise DatasetError(f"object {oid} missing view {angle}°")
            mask = mask_dir / str(oid) / f"{angle:03d}.png"
            mask = mask if mask.exists() else None
            if check_shapes:
                size = _image_size(img)
                if resolution is None:
                    resolution = size
                elif size != resolution:
                    raise DatasetError(f"object {oid} view {angle}° has size {size}, expected {resolution}")
                if mask is not None and _image_size(mask) != size:
                    raise DatasetError(f"object {oid} view {angle}°: mask/image shape mismatch")
            views.append(ViewRecord(oid, angle, img, mask))
        objects[oid] = views

    meta_path = root / "manifest.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {meta.get('version')!r}")
        split = {int(k): v for k, v in meta["splits"].items()}
        if set(split) != set(ids):
            raise DatasetError("manifest splits do not match object directories")
        resolution = tuple(meta["resolution"]) if resolution is None else resolution
        if tuple(meta["resolution"]) != tuple(resolution):
            raise DatasetError(f"manifest resolution {meta['resolution']} != images {list(resolution)}")
        pairs = [[tuple(p) for p in meta.get(key, [])]
                 for key in ("pairs_train", "pairs_seen_test", "pairs_unseen_test")]
        if not pairs[0]:
            pairs = make_pairs(split)
    else:
        # no manifest: default split; too few objects to hold any out -> all train
        split = assign_splits(ids) if len(ids) >= 3 else {i: "train" for i in ids}
        pairs = make_pairs(split)
        if resolution is None:
            resolution = _image_size(objects[ids[0]][0].image_path)

    man = TurntableManifest(root, objects, split, tuple(resolution), *pairs)
    check_manifest(man)
    return man


def check_manifest(man: TurntableManifest):
    for s in man.split.values():
        if s not in SPLITS:
            raise DatasetError(f"unknown split {s!r}")
    train = set(man.train_ids)
    unseen = set(man.ids("unseen_test"))
    if train & unseen:
        raise DatasetError(f"objects {sorted(train & unseen)} are both train and unseen_test")
    train_starts = {p for p in man.pairs_train}
    for p in man.pairs_seen_test:
        if p[0] not in train:
            raise DatasetError(f"seen-test pair {p} uses a non-training object")
        if p in train_starts:
            raise DatasetError(f"seen-test pair {p} reuses a training start angle")
    for p in man.pairs_unseen_test:
        if p[0] not in unseen:
            raise DatasetError(f"unseen-test pair {p} uses a non-unseen object")


# ----------------------------------------------------------------------------
# image access and sampling


@lru_cache(maxsize=8192)
def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


@lru_cache(maxsize=8192)
def _read_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def read_image(path):
    return _read_rgb(str(path))


def read_mask(path):
    return _read_mask(str(path))


@dataclass
class Sample:
    input: np.ndarray                  # H x W x 3, [-1, 1]
    target: np.ndarray
    k: int
    base_angle: int
    object_id: int
    intermediates: list[np.ndarray] | None = None   # T^1 .. T^{k-1}
    mask: np.ndarray | None = None                 # H x W, {0, 1}, of the target view


def sample_pair(man: TurntableManifest, object_id, base_angle, k, with_intermediates=False) -> Sample:
    if object_id not in man.objects:
        raise DatasetError(f"unknown object {object_id}")
    if not 1 <= k <= MAX_K:
        raise DatasetError(f"k must be in 1..{MAX_K}, got {k}")
    if base_angle % STEP or not 0 <= base_angle < 360:
        raise DatasetError(f"base angle {base_angle} is not a view angle")
    a = man.view(object_id, base_angle)
    t = man.view(object_id, view_angle(base_angle, k))
    inter = None
    if with_intermediates:
        inter = [to_unit(read_image(man.view(object_id, view_angle(base_angle, i)).image_path))
                 for i in range(1, k)]
    mask = read_mask(t.mask_path) if t.mask_path is not None else None
    return Sample(to_unit(read_image(a.image_path)), to_unit(read_image(t.image_path)),
                  k, base_angle, object_id, inter, mask)


def epoch_rng(seed, epoch, worker=0):
    """Generator for (seed, epoch, worker); independent of worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, worker]))


def collate(samples):
    """Stack samples into NCHW float tensors (dict of torch tensors)."""
    import torch

    def nchw(arrs):
        return torch.from_numpy(np.stack(arrs).transpose(0, 3, 1, 2).copy())

    batch = {
        "A": nchw([s.input for s in samples]),
        "T": nchw([s.target for s in samples]),
        "k": samples[0].k,
    }
    if any(s.k != batch["k"] for s in samples):
        raise ValueError("all samples in a batch must share k")
    if all(s.mask is not None for s in samples):
        batch["M"] = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))
    if all(s.intermediates is not None for s in samples) and batch["k"] > 1:
        batch["T_inter"] = [nchw([s.intermediates[i] for s in samples]) for i in range(batch["k"] - 1)]
    return batch


def iter_batches(man, pairs, batch_size, rng, k_fn, with_intermediates=False, shuffle=True,
                 subsample=1.0):
    """Yield collated batches; k is drawn once per batch via ``k_fn(rng)``."""
    pairs = list(pairs)
    if subsample < 1.0:
        n = max(1, int(len(pairs) * subsample))
        pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), n, replace=False))]
    order = rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    for start in range(0, len(order), batch_size):
        k = k_fn(rng)
        chunk = [pairs[i] for i in order[start:start + batch_size]]
        yield collate([sample_pair(man, o, b, k, with_intermediates) for o, b in chunk])


# ----------------------------------------------------------------------------
# synthetic turntable renderer

ELEVATION = math.radians(25.0)
SUBPIXEL = 16
_LIGHT = np.array([0.35, 0.6, 1.0]) / np.linalg.norm([0.35, 0.6, 1.0])


@dataclass(frozen=True)
class SynthObjectSpec:
    seed: int
    primitive: str
    face_colors: tuple[tuple[int, int, int], ...]
    texture: tuple[str, float] | None = None   # ("checker" | "stripe", cells per unit)
    scale: float = 1.0
    dims: tuple[float, float, float] | None = None  # footprint x, height, footprint z

    @classmethod
    def from_seed(cls, seed, textured=None):
        rng = np.random.default_rng(seed)
        prim = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
        n_faces = 6 if prim == "cuboid" else 8
        colors = []
        for _ in range(n_faces):
            c = rng.integers(20, 256, size=3)
            c[int(rng.integers(3))] = int(rng.integers(150, 256))
            colors.append(tuple(int(v) for v in c))
        if textured is None:
            textured = bool(rng.random() < 0.3)
        texture = (("checker", "stripe")[int(rng.integers(2))], float(rng.uniform(2.0, 4.0))) if textured else None
        dims = (float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.3, 0.8)))
        return cls(seed, prim, tuple(colors), texture, float(rng.uniform(0.8, 1.0)), dims)


def _footprint(spec):
    fx, _, fz = spec.dims or (0.8, 0.8, 0.6)
    if spec.primitive == "cuboid":
        poly = [(-fx, -fz), (fx, -fz), (fx, fz), (-fx, fz)]
        parts = [list(range(4))]
    elif spec.primitive == "hexagonal prism":
        poly = [(fx * math.cos(math.pi / 3 * i), fz * math.sin(math.pi / 3 * i)) for i in range(6)]
        parts = [list(range(6))]
    elif spec.primitive == "L-shape":
        poly = [(-fx, -fz), (fx, -fz), (fx, 0.0), (0.0, 0.0), (0.0, fz), (-fx, fz)]
        parts = [[0, 1, 2, 3], [0, 3, 4, 5]]
    else:
        raise ValueError(f"unknown primitive {spec.primitive!r}")
    return poly, parts


def _mesh(spec):
    """Faces as (polygon vertices Nx3, outward normal, color index, convex parts)."""
    poly, parts = _footprint(spec)
    h = (spec.dims or (0.8, 0.8, 0.6))[1]
    # footprint lives in the x/z plane; counter-clockwise seen from +y
    top = [np.array([x, h, z]) for x, z in poly]
    bot = [np.array([x, -h, z]) for x, z in poly]
    n = len(poly)
    faces = []
    for i in range(n):
        j = (i + 1) % n
        quad = np.array([bot[i], bot[j], top[j], top[i]])
        edge = quad[1] - quad[0]
        normal = np.array([edge[2], 0.0, -edge[0]])
        faces.append((quad, normal / np.linalg.norm(normal), i, [[0, 1, 2, 3]]))
    faces.append((np.array(top), np.array([0.0, 1.0, 0.0]), n, parts))
    faces.append((np.array(bot), np.array([0.0, -1.0, 0.0]), n + 1, parts))
    return faces


def _rotation(angle_deg):
    t = math.radians(angle_deg % 360)
    c, s = math.cos(t), math.sin(t)
    yaw = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    ce, se = math.cos(ELEVATION), math.sin(ELEVATION)
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return tilt @ yaw


def _orient(pts):
    # signed doubled area in screen coordinates (y down)
    return sum(int(pts[i][0]) * int(pts[(i + 1) % len(pts)][1]) - int(pts[(i + 1) % len(pts)][0]) * int(pts[i][1])
               for i in range(len(pts)))


def _fill_convex(pts, cx, cy):
    """Boolean coverage of pixel centers (cx, cy fixed-point int grids) by a convex polygon."""
    if _orient(pts) < 0:
        pts = pts[::-1]
    inside = np.ones(cx.shape, dtype=bool)
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        inside &= (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0) >= 0
    return inside


def synth_render(spec: SynthObjectSpec, angle, resolution):
    """Orthographic flat-shaded render of ``spec`` turned ``angle`` degrees about the vertical axis.

    Returns (uint8 H x W x 3 image, uint8 H x W mask).
    """
    h_px, w_px = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    if min(h_px, w_px) < 32:
        raise ValueError(f"resolution must be >= 32, got {resolution}")
    if angle % STEP:
        raise ValueError(f"angle must be a multiple of {STEP}, got {angle}")
    if not spec.scale > 0 or (spec.dims is not None and min(spec.dims) <= 0):
        raise ValueError("degenerate object spec (non-positive scale or dimension)")

    rot = _rotation(angle)
    px_per_unit = 0.30 * min(h_px, w_px) * spec.scale
    cx, cy = np.meshgrid((np.arange(w_px, dtype=np.int64) * 2 + 1) * SUBPIXEL // 2,
                         (np.arange(h_px, dtype=np.int64) * 2 + 1) * SUBPIXEL // 2)
    image = np.zeros((h_px, w_px, 3), dtype=np.uint8)
    mask = np.zeros((h_px, w_px), dtype=np.uint8)

    drawn = []
    for verts, normal, color_idx, parts in _mesh(spec):
        n_cam = rot @ normal
        if n_cam[2] <= 1e-9:
            continue  # back face
        v_cam = verts @ rot.T
        depth = float(v_cam[:, 2].mean())
        screen = [(int(round((w_px / 2 + x * px_per_unit) * SUBPIXEL)),
                   int(round((h_px / 2 - y * px_per_unit) * SUBPIXEL))) for x, y, _ in v_cam]
        drawn.append((depth, color_idx, n_cam, screen, parts, verts))

    drawn.sort(key=lambda f: (f[0], f[1]))
    for _, color_idx, n_cam, screen, parts, verts in drawn:
        cover = np.zeros((h_px, w_px), dtype=bool)
        for part in parts:
            cover |= _fill_convex([screen[i] for i in part], cx, cy)
        if not cover.any():
            continue
        shade = 0.45 + 0.55 * max(0.0, float(n_cam @ _LIGHT))
        color = np.array(spec.face_colors[color_idx % len(spec.face_colors)], dtype=np.float64) * shade
        rgb = np.broadcast_to(color, (h_px, w_px, 3)).copy()
        if spec.texture is not None:
            rgb *= _texture(spec.texture, screen, verts, cx, cy)[..., None]
        pix = np.clip(np.rint(rgb), 1, 255).astype(np.uint8)
        image[cover] = pix[cover]
        mask[cover] = 1
    return image, mask


def _texture(texture, screen, verts, cx, cy):
    """Per-pixel brightness factor from a checker/stripe pattern in face coordinates."""
    kind, freq = texture
    p0, p1, p3 = (np.array(screen[i], dtype=np.float64) for i in (0, 1, -1))
    e1, e2 = p1 - p0, p3 - p0
    det = e1[0] * e2[1] - e1[1] * e2[0]
    if abs(det) < 1e-9:
        return np.ones(cx.shape)
    dx, dy = cx - p0[0], cy - p0[1]
    u = (dx * e2[1] - dy * e2[0]) / det
    v = (e1[0] * dy - e1[1] * dx) / det
    len_u = np.linalg.norm(verts[1] - verts[0])
    len_v = np.linalg.norm(verts[-1] - verts[0])
    iu = np.floor(u * len_u * freq).astype(np.int64)
    iv = np.floor(v * len_v * freq).astype(np.int64)
    on = (iu + iv) % 2 == 0 if kind == "checker" else iu % 2 == 0
    return np.where(on, 1.0, 0.6)


def _write_png(path, arr):
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def build_synth_dataset(n_objects, resolution, seed, out, n_unseen=None, n_seen=None) -> TurntableManifest:
    """Render ``n_objects`` synthetic turntables into ``out`` and write the manifest."""
    if n_objects < 3:
        raise DatasetError("need at least 3 objects to populate all splits")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "objects").mkdir(exist_ok=True)
        (out / "masks").mkdir(exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"cannot write dataset to {out}")

    h_px, w_px = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    seeds = np.random.SeedSequence(seed).generate_state(n_objects)
    for oid in range(n_objects):
        spec = SynthObjectSpec.from_seed(int(seeds[oid]))
        (out / "objects" / str(oid)).mkdir(exist_ok=True)
        (out / "masks" / str(oid)).mkdir(exist_ok=True)
        for angle in range(0, 360, STEP):
            img, mask = synth_render(spec, angle, (h_px, w_px))
            _write_png(out / "objects" / str(oid) / f"{angle:03d}.png", img)
            _write_png(out / "masks" / str(oid) / f"{angle:03d}.png", mask * 255)

    ids = list(range(n_objects))
    if n_unseen is None and n_seen is None:
        split = assign_splits(ids, seed)
    else:
        split = assign_splits(ids, seed, (n_unseen or 1) / n_objects, (n_seen or 1) / n_objects)
    train, seen, unseen = make_pairs(split)
    man = TurntableManifest(out, {}, split, (h_px, w_px), train, seen, unseen)
    (out / "manifest.json").write_text(json.dumps(man.to_json(), indent=1) + "\n")
    return load_manifest(out)
