"""Synthetic stick-figure video clips with exact keypoint ground truth,
plus the degradation pipeline (Gaussian blur, then bicubic downsampling)
that produces paired HR/LR clips.

Figures have 15 joints (3 head points, shoulders/elbows/wrists, hips/knees/
ankles). Each joint is drawn as a small bright dot in its own palette color
so a local detector can tell joints apart; limbs are gray sticks. Rendering
is a pure function of (config, seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d, zoom

from . import tnsr

KEYPOINT_NAMES = (
    "nose", "head_bottom", "head_top",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

# limb sticks drawn between joint indices
_EDGES = (
    (1, 2), (3, 4), (9, 10),          # head stick, shoulder line, hip line
    (3, 5), (5, 7), (4, 6), (6, 8),   # arms
    (9, 11), (11, 13), (10, 12), (12, 14),  # legs
)

_STICK_COLOR = np.array([0.82, 0.82, 0.82], dtype=np.float32)
_DOT_SIGMA = 1.1
_DOT_RADIUS = 4.0
_STICK_PEAK = 0.55


def joint_palette() -> np.ndarray:
    """15 distinct bright colors, one per joint.

    The 0.5 floor keeps every dot's luminance above the stick luminance so
    joint markers stay local maxima of the rendered figure intensity.
    """
    colors = np.empty((NUM_KEYPOINTS, 3), dtype=np.float32)
    for k in range(NUM_KEYPOINTS):
        h = (k / NUM_KEYPOINTS) * 6.0
        c, x = 1.0, 1.0 - abs(h % 2.0 - 1.0)
        rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][int(h) % 6]
        colors[k] = np.array(rgb) * 0.5 + 0.5
    return colors


_PALETTE = joint_palette()


@dataclass(frozen=True)
class RenderConfig:
    height: int = 256
    width: int = 192
    frames: int = 5
    max_velocity: float = 8.0
    figure_frac: tuple = (0.52, 0.72)   # figure height as a fraction of frame height
    background: bool = True
    margin: float = 6.0


@dataclass
class VideoClip:
    frames: np.ndarray       # (T, 3, H, W) float32 in [0, 1]
    keypoints: np.ndarray    # (T, K, 2) float64, (x, y) pixel units
    figure_height: float
    seed: int

    @property
    def hw(self) -> tuple:
        return self.frames.shape[2], self.frames.shape[3]


@dataclass(frozen=True)
class DegradationSpec:
    scale: int = 4
    blur_sigma: float = field(default=None)  # type: ignore[assignment]
    blur_kernel_size: int = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        sigma = self.blur_sigma if self.blur_sigma is not None else 0.5 * self.scale
        ksize = (self.blur_kernel_size if self.blur_kernel_size is not None
                 else 2 * math.ceil(3 * sigma) + 1)
        if ksize < 3 or ksize % 2 == 0:
            raise ValueError(f"blur kernel size must be odd and >= 3, got {ksize}")
        object.__setattr__(self, "blur_sigma", float(sigma))
        object.__setattr__(self, "blur_kernel_size", int(ksize))


def figure_height_of(keypoints: np.ndarray) -> float:
    """Vertical keypoint extent, maximized over frames; the PCK normalizer."""
    ys = keypoints[..., 1]
    return float(np.max(ys.max(axis=-1) - ys.min(axis=-1)))


# -- skeleton ----------------------------------------------------------------

def _skeleton_tracks(cfg: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    """Joint positions for all frames, (T, K, 2), before fitting to frame."""
    T = cfg.frames
    h = rng.uniform(*cfg.figure_frac) * cfg.height
    prop = rng.uniform(0.9, 1.1, size=8)
    head = 0.15 * h * prop[0]
    torso = 0.38 * h * prop[1]
    uarm = 0.18 * h * prop[2]
    farm = 0.16 * h * prop[3]
    thigh = 0.24 * h * prop[4]
    shin = 0.22 * h * prop[5]
    shoulder_w = 0.22 * h * prop[6]
    hip_w = 0.16 * h * prop[7]

    moving = cfg.max_velocity > 0
    amp = rng.uniform(0.08, 0.22, size=8) if moving else np.zeros(8)
    omega = rng.uniform(0.4, 0.9, size=8) if moving else np.zeros(8)
    phase = rng.uniform(0, 2 * np.pi, size=8)
    base = np.array([
        rng.uniform(-0.5, 0.5),   # left shoulder swing
        rng.uniform(-0.5, 0.5),   # right shoulder swing
        rng.uniform(0.2, 0.9),    # left elbow bend
        rng.uniform(0.2, 0.9),    # right elbow bend
        rng.uniform(-0.25, 0.25),  # left hip swing
        rng.uniform(-0.25, 0.25),  # right hip swing
        rng.uniform(0.05, 0.5),   # left knee bend
        rng.uniform(0.05, 0.5),   # right knee bend
    ])
    lean = rng.uniform(-0.08, 0.08)
    if moving:
        root_v = rng.uniform(-1, 1, size=2)
        nrm = np.linalg.norm(root_v)
        if nrm > 0:
            root_v = root_v / nrm * rng.uniform(0.0, 0.45) * cfg.max_velocity
    else:
        root_v = np.zeros(2)

    def frames_for(scale_motion: float) -> np.ndarray:
        out = np.zeros((T, NUM_KEYPOINTS, 2))
        for t in range(T):
            ang = base + scale_motion * amp * np.sin(omega * t + phase)
            pelvis = scale_motion * root_v * t
            up = np.array([math.sin(lean), -math.cos(lean)])
            neck = pelvis + up * torso
            head_top = neck + up * head
            nose = neck + up * head * 0.55 + np.array([0.35 * head, 0.0])
            lsh = neck + np.array([-shoulder_w / 2, 0.0])
            rsh = neck + np.array([shoulder_w / 2, 0.0])
            lhip = pelvis + np.array([-hip_w / 2, 0.0])
            rhip = pelvis + np.array([hip_w / 2, 0.0])

            def swing(origin, length, angle):
                return origin + length * np.array([math.sin(angle), math.cos(angle)])

            lel = swing(lsh, uarm, ang[0] - 0.15)
            rel = swing(rsh, uarm, ang[1] + 0.15)
            lwr = swing(lel, farm, ang[0] - 0.15 + ang[2])
            rwr = swing(rel, farm, ang[1] + 0.15 - ang[3])
            lkn = swing(lhip, thigh, ang[4])
            rkn = swing(rhip, thigh, ang[5])
            lank = swing(lkn, shin, ang[4] - ang[6] * 0.5)
            rank = swing(rkn, shin, ang[5] + ang[7] * 0.5)
            out[t] = np.stack([nose, neck, head_top, lsh, rsh, lel, rel,
                               lwr, rwr, lhip, rhip, lkn, rkn, lank, rank])
        return out

    kps = frames_for(1.0)
    if moving and T > 1:
        for _ in range(6):
            step = np.linalg.norm(np.diff(kps, axis=0), axis=-1).max()
            if step <= cfg.max_velocity:
                break
            kps = frames_for(0.9 * cfg.max_velocity / step)
    return kps


def _fit_to_frame(kps: np.ndarray, cfg: RenderConfig,
                  rng: np.random.Generator) -> np.ndarray:
    m = cfg.margin
    lo = kps.reshape(-1, 2).min(axis=0)
    hi = kps.reshape(-1, 2).max(axis=0)
    span = hi - lo
    avail = np.array([cfg.width, cfg.height]) - 2 * m
    if span[0] > avail[0] or span[1] > avail[1]:
        raise ValueError(
            f"figure extent {span} exceeds frame {cfg.width}x{cfg.height} "
            f"with margin {m}")
    slack = avail - span
    origin = m + rng.uniform(0, 1, size=2) * slack
    return kps + (origin - lo)


# -- drawing -----------------------------------------------------------------

def _paint(alpha, color, ys, xs, a, rgb):
    cur = alpha[ys, xs]
    m = a > cur
    if not np.any(m):
        return
    alpha[ys[m], xs[m]] = a[m]
    color[ys[m], xs[m]] = rgb


def _draw_segment(alpha, color, p0, p1, thickness, rgb, peak):
    H, W = alpha.shape
    pad = thickness / 2 + 1.5
    x0, y0 = np.floor(np.minimum(p0, p1) - pad).astype(int)
    x1, y1 = np.ceil(np.maximum(p0, p1) + pad).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, W - 1), min(y1, H - 1)
    if x1 < x0 or y1 < y0:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    d = p1 - p0
    den = float(d @ d)
    px = xs - p0[0]
    py = ys - p0[1]
    if den == 0.0:
        dist = np.hypot(px, py)
    else:
        tproj = np.clip((px * d[0] + py * d[1]) / den, 0.0, 1.0)
        dist = np.hypot(px - tproj * d[0], py - tproj * d[1])
    a = peak * np.clip(thickness / 2 + 0.5 - dist, 0.0, 1.0)
    keep = a > 0.01
    _paint(alpha, color, ys[keep], xs[keep], a[keep], rgb)


def _draw_dot(alpha, color, p, rgb):
    H, W = alpha.shape
    x0, y0 = np.floor(p - _DOT_RADIUS).astype(int)
    x1, y1 = np.ceil(p + _DOT_RADIUS).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, W - 1), min(y1, H - 1)
    if x1 < x0 or y1 < y0:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    r2 = (xs - p[0]) ** 2 + (ys - p[1]) ** 2
    a = np.exp(-r2 / (2 * _DOT_SIGMA ** 2))
    keep = a > 0.01
    _paint(alpha, color, ys[keep], xs[keep], a[keep], rgb)


def _value_noise(shape, rng: np.random.Generator) -> np.ndarray:
    H, W = shape
    out = np.zeros((H, W))
    for cell, weight in ((64, 0.5), (24, 0.3), (10, 0.2)):
        gh, gw = max(H // cell, 2), max(W // cell, 2)
        grid = rng.uniform(0, 1, (gh, gw))
        out += weight * zoom(grid, (H / gh, W / gw), order=1, grid_mode=True,
                             mode="nearest")
    return out


def _background(cfg: RenderConfig, rng: np.random.Generator) -> np.ndarray:
    base = _value_noise((cfg.height, cfg.width), rng)
    tint = rng.uniform(0.6, 1.0, size=3)
    bg = base[None, :, :] * tint[:, None, None]
    for _ in range(rng.integers(2, 5)):
        rw = int(rng.uniform(0.1, 0.45) * cfg.width)
        rh = int(rng.uniform(0.1, 0.45) * cfg.height)
        rx = rng.integers(0, cfg.width - rw)
        ry = rng.integers(0, cfg.height - rh)
        rgb = rng.uniform(0.1, 0.7, size=3)
        a = rng.uniform(0.5, 0.9)
        bg[:, ry:ry + rh, rx:rx + rw] *= (1 - a)
        bg[:, ry:ry + rh, rx:rx + rw] += a * rgb[:, None, None]
    return np.clip(bg, 0.05, 0.75).astype(np.float32)


_MIN_JOINT_SEP = 2.5  # px; keeps every joint dot a local max of the figure layer


def _min_pair_dist(kps: np.ndarray) -> float:
    d = np.linalg.norm(kps[:, :, None, :] - kps[:, None, :, :], axis=-1)
    iu = np.triu_indices(kps.shape[1], k=1)
    return float(d[:, iu[0], iu[1]].min())


def render_clip(cfg: RenderConfig, seed: int) -> VideoClip:
    """Render one clip; identical (cfg, seed) pairs give bit-identical clips."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    for _ in range(50):
        kps = _skeleton_tracks(cfg, rng)
        if _min_pair_dist(kps) >= _MIN_JOINT_SEP:
            break
    kps = _fit_to_frame(kps, cfg, rng)
    bg = (_background(cfg, rng) if cfg.background
          else np.zeros((3, cfg.height, cfg.width), dtype=np.float32))
    frames = np.empty((cfg.frames, 3, cfg.height, cfg.width), dtype=np.float32)
    for t in range(cfg.frames):
        alpha = np.zeros((cfg.height, cfg.width), dtype=np.float32)
        color = np.zeros((cfg.height, cfg.width, 3), dtype=np.float32)
        for i, j in _EDGES:
            _draw_segment(alpha, color, kps[t, i], kps[t, j], 2.0,
                          _STICK_COLOR, _STICK_PEAK)
        for k in range(NUM_KEYPOINTS):
            _draw_dot(alpha, color, kps[t, k], _PALETTE[k])
        frame = bg * (1.0 - alpha[None]) + color.transpose(2, 0, 1) * alpha[None]
        frames[t] = np.clip(frame, 0.0, 1.0)
    return VideoClip(frames=frames, keypoints=kps,
                     figure_height=figure_height_of(kps), seed=seed)


# -- degradation ----------------------------------------------------------------

def gaussian_kernel(sigma: float, ksize: int) -> np.ndarray:
    if ksize % 2 == 0:
        raise ValueError(f"blur kernel size must be odd, got {ksize}")
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(frames: np.ndarray, sigma: float, ksize: int) -> np.ndarray:
    """Separable blur with a sum-1 kernel and reflect (edge-repeat) padding."""
    k = gaussian_kernel(sigma, ksize)
    out = frames.astype(np.float64, copy=False)
    out = correlate1d(out, k, axis=-2, mode="reflect")
    out = correlate1d(out, k, axis=-1, mode="reflect")
    return out.astype(frames.dtype, copy=False)


def _keys_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    w = np.where(at <= 1,
                 (a + 2) * at ** 3 - (a + 3) * at ** 2 + 1,
                 a * at ** 3 - 5 * a * at ** 2 + 8 * a * at - 4 * a)
    return np.where(at < 2, w, 0.0)


def _resize_axis(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = x.shape[axis]
    scale = n_in / n_out
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(pos).astype(int)
    frac = pos - base
    taps = np.arange(-1, 3)
    out = np.zeros(x.shape[:axis] + (n_out,) + x.shape[axis + 1:], dtype=np.float64)
    for k in taps:
        idx = np.clip(base + k, 0, n_in - 1)
        w = _keys_weights(np.asarray(k - frac, dtype=np.float64))
        picked = np.take(x, idx, axis=axis)
        shape = [1] * x.ndim
        shape[axis] = n_out
        out += picked * w.reshape(shape)
    return out


def bicubic_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Keys (a = -0.5) resampling with edge clamping; works for
    both directions. Downsampling requires exactly divisible extents."""
    h, w = frames.shape[-2], frames.shape[-1]
    if out_h < h and (h % out_h or w % out_w):
        raise ValueError(f"downsample {h}x{w} -> {out_h}x{out_w} is not an "
                         f"integer factor")
    out = _resize_axis(frames.astype(np.float64, copy=False), out_h, frames.ndim - 2)
    out = _resize_axis(out, out_w, frames.ndim - 1)
    return out.astype(frames.dtype, copy=False)


def bicubic_down(frames: np.ndarray, scale: int) -> np.ndarray:
    h, w = frames.shape[-2], frames.shape[-1]
    return bicubic_resize(frames, h // scale, w // scale)


def bicubic_up(frames: np.ndarray, scale: int) -> np.ndarray:
    h, w = frames.shape[-2], frames.shape[-1]
    return bicubic_resize(frames, h * scale, w * scale)


def degrade(clip: VideoClip, spec: DegradationSpec) -> VideoClip:
    """Blur + bicubic-downsample every frame; keypoints scale by 1/scale."""
    blurred = gaussian_blur(clip.frames, spec.blur_sigma, spec.blur_kernel_size)
    lr = np.clip(bicubic_down(blurred, spec.scale), 0.0, 1.0).astype(np.float32)
    kps = clip.keypoints / spec.scale
    return VideoClip(frames=lr, keypoints=kps,
                     figure_height=clip.figure_height / spec.scale, seed=clip.seed)


# -- dataset on disk -------------------------------------------------------------

VAL_SEED_OFFSET = 500_000


def clip_seed(base_seed: int, split: str, index: int) -> int:
    off = 0 if split == "train" else VAL_SEED_OFFSET
    return base_seed * 1_000_000 + off + index


def _write_keypoints_csv(path: Path, kps: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "joint", "x", "y"])
        for t in range(kps.shape[0]):
            for k in range(kps.shape[1]):
                wr.writerow([t, k, repr(float(kps[t, k, 0])), repr(float(kps[t, k, 1]))])


def _read_keypoints_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        rd = csv.reader(fh)
        next(rd)
        for frame, joint, x, y in rd:
            rows.append((int(frame), int(joint), float(x), float(y)))
    T = max(r[0] for r in rows) + 1
    K = max(r[1] for r in rows) + 1
    kps = np.zeros((T, K, 2))
    for frame, joint, x, y in rows:
        kps[frame, joint] = (x, y)
    return kps


def write_clip(root: Path, split: str, index: int, clip: VideoClip) -> Path:
    d = Path(root) / "clips" / split / f"{index:05d}"
    d.mkdir(parents=True, exist_ok=True)
    tnsr.save(d / "hr.tnsr", clip.frames)
    for scale in (2, 4):
        lr = degrade(clip, DegradationSpec(scale=scale))
        tnsr.save(d / f"lr_x{scale}.tnsr", lr.frames)
    _write_keypoints_csv(d / "keypoints.csv", clip.keypoints)
    return d


def generate_dataset(root, train_count: int, val_count: int, seed: int,
                     cfg: RenderConfig | None = None) -> None:
    cfg = cfg or RenderConfig()
    for split, count in (("train", train_count), ("val", val_count)):
        for i in range(count):
            write_clip(Path(root), split, i, render_clip(cfg, clip_seed(seed, split, i)))


def list_clips(root, split: str) -> list[Path]:
    base = Path(root) / "clips" / split
    if not base.is_dir():
        return []
    return sorted(p for p in base.iterdir() if p.is_dir())


def load_clip(clip_dir: Path, scale: int | None = None) -> tuple[VideoClip, VideoClip | None]:
    """Load the HR clip and, when `scale` is given, its stored LR twin."""
    clip_dir = Path(clip_dir)
    hr_frames = tnsr.load(clip_dir / "hr.tnsr")
    kps = _read_keypoints_csv(clip_dir / "keypoints.csv")
    hr = VideoClip(frames=hr_frames, keypoints=kps,
                   figure_height=figure_height_of(kps), seed=-1)
    if scale is None:
        return hr, None
    lr_frames = tnsr.load(clip_dir / f"lr_x{scale}.tnsr")
    lr = VideoClip(frames=lr_frames, keypoints=kps / scale,
                   figure_height=hr.figure_height / scale, seed=-1)
    return hr, lr


def default_render_config(**overrides) -> RenderConfig:
    return replace(RenderConfig(), **overrides)
