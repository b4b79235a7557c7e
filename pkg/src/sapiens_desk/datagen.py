"""Procedural people: articulated capsule figures rendered with a z-buffer.

Each figure is a 2.5D stick body fleshed out with capsules (segments with
radius) and discs. Rasterizing a capsule at pixel p uses the distance d from
p to the bone segment: the pixel is covered when d <= r, its depth bulges
toward the camera like a tube cross-section,

    z(p) = z_part - pitch * r * sqrt(1 - (d/r)^2)

and its unit normal is (ux*s, uy*s, -c) with s = d/r, c = sqrt(1-s^2) and
(ux, uy) the in-plane direction from the bone axis to p. Because the tube
radius in meters equals pitch * r_pixels, the rendered normal agrees exactly
with the screen-space gradient of the rendered depth on capsule interiors,
which gives the label maps a cross-task consistency that tests exploit.

Camera looks along +z, so surface normals facing it have negative z. Depth
is metric (meters), zero outside people. Part ids follow skeleton.PART_NAMES.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fileio
from .errors import (ConfigError, DegenerateCropError, EmptySceneError,
                     TooSmallBackgroundError)
from .skeleton import (FLIP_PAIRS, N_KEYPOINTS, N_PARTS, VIS_ABSENT,
                       VIS_OCCLUDED, VIS_VISIBLE, flip_index)

__all__ = [
    "SceneParams", "Sample", "render_sample", "generate_dataset",
    "hflip_sample", "crop_sample", "scale_sample", "photometric_sample",
    "composite_background", "curate", "CurateResult",
]

# part ids (class 0 is background)
_HEAD, _TORSO, _UARM, _LARM, _HAND, _ULEG, _LLEG = 1, 2, 3, 4, 5, 6, 7

# bone proportions as fractions of figure height
_PROP = {
    "torso_len": 0.32, "torso_r": 0.105,
    "head_rise": 0.06, "head_r": 0.095,
    "shoulder_off": 0.10, "hip_off": 0.062,
    "uarm_len": 0.16, "uarm_r": 0.042,
    "larm_len": 0.14, "larm_r": 0.035,
    "hand_r": 0.047,
    "uleg_len": 0.24, "uleg_r": 0.052,
    "lleg_len": 0.22, "lleg_r": 0.042,
    "foot_r": 0.047,
}

# per-part depth offsets in meters relative to the figure's base plane;
# arms sit in front of the torso, legs slightly behind
_PART_Z = {_TORSO: 0.0, _HEAD: -0.05, _UARM: -0.10, _LARM: -0.13,
           _HAND: -0.15, _ULEG: 0.03, _LLEG: 0.05}

_PART_COLOR = np.array([
    [0.00, 0.00, 0.00],   # background, unused
    [0.87, 0.72, 0.53],   # head
    [0.25, 0.45, 0.80],   # torso
    [0.80, 0.30, 0.25],   # upper arm
    [0.90, 0.55, 0.20],   # lower arm
    [0.92, 0.80, 0.35],   # hand/foot
    [0.30, 0.65, 0.35],   # upper leg
    [0.55, 0.35, 0.70],   # lower leg
], dtype=np.float32)

_LIGHT = np.array([0.35, -0.25, 1.0])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 48
    n_figures: int = 1
    min_scale: float = 0.70   # figure height over frame height
    max_scale: float = 0.92
    frame_meters: float = 2.0  # world height of the frame at the body plane
    base_depth: float = 2.0
    noise: float = 0.008
    background: str = "procedural"

    @property
    def pixel_pitch(self) -> float:
        return self.frame_meters / self.height


@dataclass
class Sample:
    """A rendered scene with aligned labels for every task."""
    image: np.ndarray          # [H,W,3] float32 in [0,1]
    mask: np.ndarray           # [H,W] int64 part ids
    depth: np.ndarray          # [H,W] float32 meters, 0 off-person
    normal: np.ndarray         # [H,W,3] float32 unit vectors, 0 off-person
    keypoints: np.ndarray      # [K,2] float64, front figure, (x, y) pixels
    visibility: np.ndarray     # [K] int64
    boxes: np.ndarray          # [P,4] float64 (x, y, w, h) visible extent
    scores: np.ndarray         # [P] float64 visible fraction per figure
    pixel_pitch: float

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# -- figure pose --------------------------------------------------------------

def _pose_figure(rng: np.random.Generator, h: float, cx: float, base_y: float):
    """Joint positions for one figure. h is figure height in pixels; base_y
    is where the feet should land. Returns (keypoints [14,2], bones, discs).
    """
    P = {k: v * h for k, v in _PROP.items()}
    lean = rng.uniform(-0.12, 0.12)

    leg_span = P["uleg_len"] + P["lleg_len"]
    pelvis = np.array([cx, base_y - leg_span])
    up = np.array([math.sin(lean), -math.cos(lean)])
    neck = pelvis + up * P["torso_len"]
    head_dir = np.array([math.sin(lean + rng.uniform(-0.15, 0.15)),
                         -math.cos(lean + rng.uniform(-0.15, 0.15))])
    head = neck + head_dir * (P["head_rise"] + P["head_r"])

    side = np.array([up[1], -up[0]])  # unit vector to the figure's right (+x-ish)

    def chain(origin, length, angle):
        # angle measured from straight down, positive swings toward +x
        d = np.array([math.sin(angle), math.cos(angle)])
        return origin + d * length

    kps = np.zeros((N_KEYPOINTS, 2))
    kps[0] = head
    kps[1] = neck
    bones = []   # (part_id, a, b, radius)
    discs = []   # (part_id, center, radius)

    bones.append((_TORSO, pelvis, neck, P["torso_r"]))
    discs.append((_HEAD, head, P["head_r"]))

    for sign, (sh_i, el_i, wr_i) in ((+1, (2, 3, 4)), (-1, (5, 6, 7))):
        # sign +1 is the figure's right, which sits at smaller x for a
        # camera-facing body; sweep grows outward from the torso
        sweep = sign * side[0]
        shoulder = neck + side * (sign * P["shoulder_off"])
        sh_angle = sweep * rng.uniform(-0.25, 0.9)
        elbow = chain(shoulder, P["uarm_len"], sh_angle)
        el_angle = sh_angle + sweep * rng.uniform(0.0, 1.1)
        wrist = chain(elbow, P["larm_len"], el_angle)
        hand_c = chain(wrist, P["hand_r"] * 0.7, el_angle)
        kps[sh_i], kps[el_i], kps[wr_i] = shoulder, elbow, wrist
        bones.append((_UARM, shoulder, elbow, P["uarm_r"]))
        bones.append((_LARM, elbow, wrist, P["larm_r"]))
        discs.append((_HAND, hand_c, P["hand_r"]))

    for sign, (hp_i, kn_i, an_i) in ((+1, (8, 9, 10)), (-1, (11, 12, 13))):
        sweep = sign * side[0]
        hip = pelvis + side * (sign * P["hip_off"])
        hp_angle = sweep * rng.uniform(-0.12, 0.35)
        knee = chain(hip, P["uleg_len"], hp_angle)
        kn_angle = hp_angle - sweep * rng.uniform(0.0, 0.5)
        ankle = chain(knee, P["lleg_len"], kn_angle)
        foot_c = ankle + np.array([sweep * P["foot_r"] * 0.6, P["foot_r"] * 0.4])
        kps[hp_i], kps[kn_i], kps[an_i] = hip, knee, ankle
        bones.append((_ULEG, hip, knee, P["uleg_r"]))
        bones.append((_LLEG, knee, ankle, P["lleg_r"]))
        discs.append((_HAND, foot_c, P["foot_r"]))

    return kps, bones, discs


# -- rasterization ------------------------------------------------------------

def _raster_capsule(bufs, fig_id, part, a, b, radius, z_part, pitch, tint):
    """Z-buffered capsule fill over the part's bounding window."""
    depth, mask, inst, normal, image = bufs
    H, W = depth.shape
    x0 = max(int(math.floor(min(a[0], b[0]) - radius)), 0)
    x1 = min(int(math.ceil(max(a[0], b[0]) + radius)) + 1, W)
    y0 = max(int(math.floor(min(a[1], b[1]) - radius)), 0)
    y1 = min(int(math.ceil(max(a[1], b[1]) + radius)) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.astype(np.float64)
    py = ys.astype(np.float64)

    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    fx = a[0] + t * ab[0]
    fy = a[1] + t * ab[1]
    dx = px - fx
    dy = py - fy
    d = np.sqrt(dx * dx + dy * dy)
    inside = d <= radius
    if not inside.any():
        return

    s = np.where(inside, d / radius, 0.0)
    c = np.sqrt(np.clip(1.0 - s * s, 0.0, 1.0))
    z = z_part - pitch * radius * c
    win = inside & (z < depth[y0:y1, x0:x1])
    if not win.any():
        return

    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.where(d > 1e-9, dx / d, 0.0)
        uy = np.where(d > 1e-9, dy / d, 0.0)
    nx, ny, nz = ux * s, uy * s, -c

    shade = 0.35 + 0.65 * np.clip(-(nx * _LIGHT[0] + ny * _LIGHT[1]
                                    + nz * _LIGHT[2]), 0.0, 1.0)
    color = _PART_COLOR[part][None, None, :] * tint[None, None, :]
    color = np.clip(color * shade[..., None], 0.0, 1.0)

    sl = (slice(y0, y1), slice(x0, x1))
    depth[sl] = np.where(win, z, depth[sl])
    mask[sl] = np.where(win, part, mask[sl])
    inst[sl] = np.where(win, fig_id, inst[sl])
    for k, comp in enumerate((nx, ny, nz)):
        normal[sl][..., k] = np.where(win, comp, normal[sl][..., k])
    image[sl] = np.where(win[..., None], color, image[sl])


_BG_STYLES = {"gradient": 0, "checker": 1, "blobs": 2}


def _procedural_background(rng: np.random.Generator, h: int, w: int,
                           style_name: str = "procedural") -> np.ndarray:
    if style_name == "procedural":
        style = rng.integers(0, 3)
    elif style_name in _BG_STYLES:
        style = _BG_STYLES[style_name]
    else:
        raise ConfigError(f"unknown background {style_name!r}; "
                          f"have procedural, {', '.join(sorted(_BG_STYLES))}")
    c0 = rng.uniform(0.1, 0.9, size=3)
    c1 = rng.uniform(0.1, 0.9, size=3)
    if style == 0:  # oriented gradient
        ang = rng.uniform(0.0, 2 * math.pi)
        ys, xs = np.mgrid[0:h, 0:w]
        t = (xs * math.cos(ang) + ys * math.sin(ang))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
    elif style == 1:  # checker
        cell = int(rng.integers(4, 13))
        ys, xs = np.mgrid[0:h, 0:w]
        par = ((ys // cell + xs // cell) % 2).astype(np.float64)
        img = c0[None, None, :] * (1 - par[..., None]) + c1[None, None, :] * par[..., None]
    else:  # smooth blobs from an upsampled coarse grid
        gh, gw = max(h // 16, 2), max(w // 16, 2)
        coarse = rng.uniform(0.0, 1.0, size=(gh, gw, 3))
        yi = np.linspace(0, gh - 1, h)
        xi = np.linspace(0, gw - 1, w)
        y0 = np.clip(yi.astype(int), 0, gh - 2)
        x0 = np.clip(xi.astype(int), 0, gw - 2)
        fy = (yi - y0)[:, None, None]
        fx = (xi - x0)[None, :, None]
        img = (coarse[y0][:, x0] * (1 - fy) * (1 - fx)
               + coarse[y0][:, x0 + 1] * (1 - fy) * fx
               + coarse[y0 + 1][:, x0] * fy * (1 - fx)
               + coarse[y0 + 1][:, x0 + 1] * fy * fx)
        img = c0[None, None, :] * (1 - img) + c1[None, None, :] * img
    return img.astype(np.float32)


def render_sample(params: SceneParams, rng: np.random.Generator) -> Sample:
    """Render one scene. Figure 0 is the front-most (smallest base depth)
    person; its keypoints populate the keypoint fields."""
    H, W = params.height, params.width
    pitch = params.pixel_pitch

    depth = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=np.int64)
    inst = np.full((H, W), -1, dtype=np.int64)
    normal = np.zeros((H, W, 3))
    image = _procedural_background(rng, H, W, params.background).astype(np.float64)
    bufs = (depth, mask, inst, normal, image)

    figures = []
    for fid in range(params.n_figures):
        scale = rng.uniform(params.min_scale, params.max_scale)
        h_fig = scale * H
        margin = 0.30 * h_fig
        cx = rng.uniform(margin, W - margin) if W > 2 * margin else W / 2.0
        base_y = rng.uniform(0.93 * H, 1.0 * H)
        kps, bones, discs = _pose_figure(rng, h_fig, cx, base_y)
        z_fig = params.base_depth + rng.uniform(0.0, 0.6)
        tint = rng.uniform(0.85, 1.15, size=3)
        figures.append((z_fig, kps, bones, discs, tint))

    order = sorted(range(len(figures)), key=lambda i: figures[i][0])
    rendered_area = np.zeros(len(figures))
    for fid in order:
        z_fig, kps, bones, discs, tint = figures[fid]
        area = 0.0
        for part, a, b, r in bones:
            area += 2 * r * np.linalg.norm(b - a) + math.pi * r * r
        for part, c, r in discs:
            area += math.pi * r * r
        rendered_area[fid] = area
        for part, a, b, r in bones:
            _raster_capsule(bufs, fid, part, a, b, r,
                            z_fig + _PART_Z[part], pitch, tint)
        for part, c, r in discs:
            _raster_capsule(bufs, fid, part, c, c, r,
                            z_fig + _PART_Z[part], pitch, tint)

    if not (inst >= 0).any():
        raise EmptySceneError("no figure pixels landed inside the frame")

    boxes = []
    scores = []
    front = order[0]
    for fid in range(len(figures)):
        where = inst == fid
        count = int(where.sum())
        if count == 0:
            boxes.append([0.0, 0.0, 0.0, 0.0])
            scores.append(0.0)
            continue
        ys, xs = np.nonzero(where)
        boxes.append([float(xs.min()), float(ys.min()),
                      float(xs.max() - xs.min() + 1),
                      float(ys.max() - ys.min() + 1)])
        scores.append(min(count / max(rendered_area[fid], 1.0), 1.0))

    # front figure first so boxes[0] pairs with the keypoint annotation
    perm = [front] + [i for i in range(len(figures)) if i != front]
    boxes = np.asarray([boxes[i] for i in perm], dtype=np.float64)
    scores = np.asarray([scores[i] for i in perm], dtype=np.float64)

    kps = figures[front][1].copy()
    vis = np.zeros(N_KEYPOINTS, dtype=np.int64)
    for k, (x, y) in enumerate(kps):
        xi, yi = int(round(x)), int(round(y))
        if not (0 <= xi < W and 0 <= yi < H):
            vis[k] = VIS_ABSENT
        elif inst[yi, xi] == front:
            vis[k] = VIS_VISIBLE
        else:
            vis[k] = VIS_OCCLUDED

    if params.noise > 0:
        image = image + rng.normal(0.0, params.noise, size=image.shape)
    depth = np.where(np.isfinite(depth), depth, 0.0)

    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        mask=mask,
        depth=depth.astype(np.float32),
        normal=normal.astype(np.float32),
        keypoints=kps,
        visibility=vis,
        boxes=boxes,
        scores=scores,
        pixel_pitch=pitch,
    )


# -- augmentation ----------------------------------------------------------------

def hflip_sample(s: Sample) -> Sample:
    """Mirror left-right. Swaps paired keypoints and negates normal x.
    Applying it twice restores every pixel map bit for bit and coordinates
    to within one rounding step."""
    W = s.width
    idx = flip_index()
    normal = s.normal[:, ::-1].copy()
    normal[..., 0] = -normal[..., 0]
    kps = s.keypoints[idx].copy()
    kps[:, 0] = (W - 1) - kps[:, 0]
    boxes = s.boxes.copy()
    boxes[:, 0] = W - boxes[:, 0] - boxes[:, 2]
    return replace(
        s,
        image=s.image[:, ::-1].copy(),
        mask=s.mask[:, ::-1].copy(),
        depth=s.depth[:, ::-1].copy(),
        normal=normal,
        keypoints=kps,
        visibility=s.visibility[idx].copy(),
        boxes=boxes,
    )


def crop_sample(s: Sample, x0: int, y0: int, w: int, h: int) -> Sample:
    """Axis-aligned integer crop of image and labels."""
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > s.width or y0 + h > s.height:
        raise DegenerateCropError(f"window {(x0, y0, w, h)} leaves {s.width}x{s.height}")
    sl = (slice(y0, y0 + h), slice(x0, x0 + w))
    mask = s.mask[sl].copy()
    if not (mask > 0).any():
        raise DegenerateCropError("crop contains no person pixels")
    kps = s.keypoints - np.array([x0, y0], dtype=np.float64)
    vis = s.visibility.copy()
    out = (kps[:, 0] < 0) | (kps[:, 0] > w - 1) | (kps[:, 1] < 0) | (kps[:, 1] > h - 1)
    vis[out] = VIS_ABSENT
    boxes = s.boxes.copy()
    boxes[:, 0] -= x0
    boxes[:, 1] -= y0
    for b in boxes:
        bx1 = min(b[0] + b[2], w)
        by1 = min(b[1] + b[3], h)
        b[0] = max(b[0], 0.0)
        b[1] = max(b[1], 0.0)
        b[2] = max(bx1 - b[0], 0.0)
        b[3] = max(by1 - b[1], 0.0)
    return replace(s, image=s.image[sl].copy(), mask=mask,
                   depth=s.depth[sl].copy(), normal=s.normal[sl].copy(),
                   keypoints=kps, visibility=vis, boxes=boxes)


def _resize_nearest(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = arr.shape[:2]
    yi = np.clip(((np.arange(oh) + 0.5) * h / oh - 0.5).round().astype(int), 0, h - 1)
    xi = np.clip(((np.arange(ow) + 0.5) * w / ow - 0.5).round().astype(int), 0, w - 1)
    return arr[yi][:, xi].copy()


def _resize_bilinear(arr: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0.0, w - 1.0)
    y0 = np.minimum(ys.astype(int), h - 2) if h > 1 else np.zeros(oh, dtype=int)
    x0 = np.minimum(xs.astype(int), w - 2) if w > 1 else np.zeros(ow, dtype=int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if arr.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return (arr[y0][:, x0] * (1 - fy) * (1 - fx) + arr[y0][:, x1] * (1 - fy) * fx
            + arr[y1][:, x0] * fy * (1 - fx) + arr[y1][:, x1] * fy * fx)


def scale_sample(s: Sample, out_h: int, out_w: int) -> Sample:
    """Resize: bilinear for the image, nearest for every label map so class
    ids and metric depth stay unmixed. Keypoints follow pixel centers."""
    if out_h <= 0 or out_w <= 0:
        raise DegenerateCropError(f"bad target size {(out_h, out_w)}")
    sy = out_h / s.height
    sx = out_w / s.width
    kps = s.keypoints.copy()
    kps[:, 0] = (kps[:, 0] + 0.5) * sx - 0.5
    kps[:, 1] = (kps[:, 1] + 0.5) * sy - 0.5
    boxes = s.boxes.copy()
    boxes[:, 0] *= sx
    boxes[:, 2] *= sx
    boxes[:, 1] *= sy
    boxes[:, 3] *= sy
    return replace(
        s,
        image=_resize_bilinear(s.image.astype(np.float64), out_h, out_w)
            .clip(0, 1).astype(np.float32),
        mask=_resize_nearest(s.mask, out_h, out_w),
        depth=_resize_nearest(s.depth, out_h, out_w),
        normal=_resize_nearest(s.normal, out_h, out_w),
        keypoints=kps, boxes=boxes,
        pixel_pitch=s.pixel_pitch / ((sx + sy) / 2.0),
    )


def photometric_sample(s: Sample, rng: np.random.Generator,
                       strength: float = 0.15) -> Sample:
    """Per-channel gain and bias jitter on the image only."""
    gain = rng.uniform(1 - strength, 1 + strength, size=3)
    bias = rng.uniform(-strength / 2, strength / 2, size=3)
    img = np.clip(s.image * gain[None, None, :] + bias[None, None, :], 0, 1)
    return replace(s, image=img.astype(np.float32))


def composite_background(s: Sample, bg: np.ndarray) -> Sample:
    """Swap background pixels (mask == 0) for a center crop of bg."""
    H, W = s.height, s.width
    if bg.shape[0] < H or bg.shape[1] < W:
        raise TooSmallBackgroundError(
            f"background {bg.shape[:2]} smaller than frame {(H, W)}")
    y0 = (bg.shape[0] - H) // 2
    x0 = (bg.shape[1] - W) // 2
    patch = bg[y0:y0 + H, x0:x0 + W].astype(np.float32)
    img = np.where((s.mask == 0)[..., None], patch, s.image)
    return replace(s, image=img.astype(np.float32))


# -- dataset writing ---------------------------------------------------------------

def generate_dataset(out_dir: str | Path, count: int, params: SceneParams,
                     seed: int, overwrite: bool = False) -> Path:
    """Render `count` scenes and write images, labels, and a manifest.
    Sample i draws from default_rng((seed, i)), so any prefix of the dataset
    is reproducible independently of the rest."""
    out = Path(out_dir)
    manifest_path = fileio.ensure_fresh(out / "manifest.jsonl", overwrite)
    for sub in ("images", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        sample = render_sample(params, rng)
        stem = f"{i:05d}"
        fileio.write_image(out / "images" / f"{stem}.png", sample.image)
        fileio.write_mask(out / "labels" / f"{stem}_mask.png", sample.mask)
        fileio.write_pfm(out / "labels" / f"{stem}_depth.pfm", sample.depth)
        fileio.write_pfm(out / "labels" / f"{stem}_normal.pfm", sample.normal)
        fileio.write_keypoints(out / "labels" / f"{stem}_kp.txt",
                               sample.keypoints, sample.visibility)
        persons = [{"box": [float(v) for v in box], "score": float(sc)}
                   for box, sc in zip(sample.boxes, sample.scores)]
        records.append(fileio.ManifestRecord(
            id=stem,
            image=f"images/{stem}.png",
            width=params.width, height=params.height,
            persons=persons,
            keypoints=f"labels/{stem}_kp.txt",
            mask=f"labels/{stem}_mask.png",
            depth=f"labels/{stem}_depth.pfm",
            normal=f"labels/{stem}_normal.pfm",
        ))
    fileio.write_manifest(manifest_path, records)
    return manifest_path


# -- curation ------------------------------------------------------------------------

_HIST_BINS = ("1", "2", "3", "4+")


@dataclass
class CurateResult:
    kept: list
    histogram: dict[str, int] = field(default_factory=dict)


def curate(records: list, min_score: float = 0.9,
           min_box: float = 300.0) -> CurateResult:
    """Keep records with at least one qualifying person: score above
    min_score and both box sides above min_box pixels. The histogram counts
    qualifying people per kept record, binned 1/2/3/4+, so its total equals
    the number of kept records."""
    kept = []
    hist = {b: 0 for b in _HIST_BINS}
    for rec in records:
        n_ok = 0
        for person in rec.persons:
            box = person["box"]
            if person["score"] > min_score and box[2] > min_box and box[3] > min_box:
                n_ok += 1
        if n_ok == 0:
            continue
        kept.append(rec)
        hist[_HIST_BINS[min(n_ok, 4) - 1]] += 1
    return CurateResult(kept=kept, histogram=hist)
