"""Synthetic moving-actor world with fully measurable conditioning effects.

Each sample is a short clip of a colored actor disk moving over a black
canvas with a colored object square at a fixed offset, a 2x2 gray mouth
patch under the actor center whose intensity tracks the audio envelope,
and complete labels: pose track, reference images, audio features, text.

Identity colors come from a 12-entry palette (4 hue families x 3 shades).
Text encodes the color FAMILY only; the exact shade is visible only in the
reference images, so reference conditioning carries information text does
not.  The audio envelope's frequency and phase never appear in the text,
so mouth/audio correlation is only learnable through the audio pathway.
Trajectories are fully determined by the motion id in the text, which
keeps actor position learnable for every task family.

Evaluation works purely from pixels using nearest-palette-color detection,
giving desk-scale analogs of sync, pose-accuracy, and reference metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import audio as audio_mod
from .audio import AudioFeatures
from .codec import Clip, CodecGeometry, PoseTrack, draw_disk, encode, encode_image, rasterize_pose
from .condition import ConditionSpec, task_uses_pose
from .errors import ConfigError, ShapeError

# identity palette: 4 hue families x 3 shades
FAMILY_COLORS = np.array([
    (1.00, 0.20, 0.20),   # red
    (0.20, 1.00, 0.20),   # green
    (0.25, 0.35, 1.00),   # blue
    (1.00, 0.90, 0.15),   # yellow
])
FAMILY_NAMES = ("red", "green", "blue", "yellow")
SHADES = (1.00, 0.70, 0.45)
PALETTE = np.concatenate([FAMILY_COLORS * s for s in SHADES], axis=0).reshape(3, 4, 3)
PALETTE = np.transpose(PALETTE, (1, 0, 2)).reshape(12, 3)  # id = family * 3 + shade

COLOR_TOL = 0.15           # nearest-color match tolerance (mean abs per channel)
MIN_MASS = 0.5             # detection: minimum summed pixel intensity
PCK_THRESHOLD_PX = 2.0
ACTOR_RADIUS = 2
OBJECT_HALF = 1            # object square is (2*half+1)^2 = 3x3
OBJECT_OFFSET = (3, 3)     # object center relative to actor center (dx, dy)
MOUTH_DY = (1, 2)          # mouth rows relative to rounded actor center
MOUTH_DX = (-1, 0)

PATH_LO, PATH_HI = 4.0, 10.0      # actor center stays in this box -> all parts on canvas
ENVELOPE_FREQS_HZ = (0.5, 1.0, 1.5, 2.0)
ENVELOPE_PHASES = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)
DECOY_BANDS_HZ = (3.3, 4.9, 6.1, 7.3)
AUDIO_RATE_HZ = 32.0
N_MOTIONS = 6

# text vocabulary: token 0 unused, 1..4 actor family, 5..8 object family,
# 9..14 motion id
ACTOR_TOKEN_BASE = 1
OBJECT_TOKEN_BASE = 5
MOTION_TOKEN_BASE = 9


def color_id(family: int, shade: int) -> int:
    return family * len(SHADES) + shade


@dataclass
class SynthSample:
    clip: Clip
    text_ids: np.ndarray
    ref_human: np.ndarray            # (C, H, W) actor disk on black
    ref_object: np.ndarray           # (C, H, W) object square on black
    pose: PoseTrack
    audio: AudioFeatures
    mouth_region: tuple = (MOUTH_DY, MOUTH_DX)
    metadata: dict = field(default_factory=dict)


def trajectory_xy(motion_id: int, frame_idx, n_frames: int = 16):
    """Closed-form actor center (x, y) for a motion id; vectorized over frames.

    Motions 0-3 are linear paths reflecting off the walls of the path box;
    4 and 5 are circles (counter-clockwise and clockwise).
    """
    t = np.asarray(frame_idx, dtype=np.float64)
    if motion_id in (4, 5):
        revs = 1.25 if motion_id == 4 else -1.25
        phi0 = 0.0 if motion_id == 4 else 0.5 * math.pi
        ang = 2.0 * math.pi * revs * t / n_frames + phi0
        return 7.0 + 3.0 * np.cos(ang), 7.0 + 3.0 * np.sin(ang)
    starts = {0: (4.0, 4.0), 1: (10.0, 4.0), 2: (4.0, 10.0), 3: (7.0, 7.0)}
    vels = {0: (1.7, 0.9), 1: (-1.1, 1.9), 2: (2.3, -1.3), 3: (0.9, -2.1)}
    if motion_id not in starts:
        raise ConfigError(f"unknown motion id {motion_id}")
    (x0, y0), (vx, vy) = starts[motion_id], vels[motion_id]
    return _reflect(x0 + vx * t), _reflect(y0 + vy * t)


def _reflect(a: np.ndarray, lo: float = PATH_LO, hi: float = PATH_HI) -> np.ndarray:
    span = hi - lo
    u = np.mod(np.asarray(a, dtype=np.float64) - lo, 2.0 * span)
    return lo + np.where(u <= span, u, 2.0 * span - u)


def envelope_value(freq_hz: float, phase: float, t_seconds) -> np.ndarray:
    return 0.5 + 0.45 * np.sin(2.0 * math.pi * freq_hz * np.asarray(t_seconds) + phase)


def _make_audio(freq_hz: float, phase: float, decoy_phases: np.ndarray,
                geo: CodecGeometry) -> AudioFeatures:
    """Channel 0 is the envelope; 1-3 its harmonics; 4-7 fixed decoy bands."""
    duration = geo.frames / geo.fps
    n = int(math.ceil(duration * AUDIO_RATE_HZ))
    ts = np.arange(n) / AUDIO_RATE_HZ
    feats = np.empty((n, 8))
    feats[:, 0] = envelope_value(freq_hz, phase, ts)
    for k, mult in enumerate((2.0, 3.0, 4.0), start=1):
        feats[:, k] = envelope_value(freq_hz * mult, phase, ts)
    for k, band in enumerate(DECOY_BANDS_HZ, start=4):
        feats[:, k] = envelope_value(band, float(decoy_phases[k - 4]), ts)
    return AudioFeatures(feats=feats, feature_rate=AUDIO_RATE_HZ)


def _draw_square(frame: np.ndarray, cy: int, cx: int, half: int, color) -> None:
    _, h, w = frame.shape
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            yy, xx = cy + dy, cx + dx
            if 0 <= yy < h and 0 <= xx < w:
                frame[:, yy, xx] = color


def render_frame(frame: np.ndarray, x: float, y: float, actor_color, object_color,
                 mouth_value: float) -> None:
    """Paint one frame in place: object square, actor disk, then mouth patch."""
    cy, cx = int(round(y)), int(round(x))
    _draw_square(frame, cy + OBJECT_OFFSET[1], cx + OBJECT_OFFSET[0], OBJECT_HALF,
                 np.asarray(object_color))
    draw_disk(frame, float(cy), float(cx), ACTOR_RADIUS, tuple(actor_color))
    for dy in MOUTH_DY:
        for dx in MOUTH_DX:
            yy, xx = cy + dy, cx + dx
            if 0 <= yy < frame.shape[1] and 0 <= xx < frame.shape[2]:
                frame[:, yy, xx] = mouth_value


def _render_ref(color, kind: str, geo: CodecGeometry) -> np.ndarray:
    img = np.zeros((geo.channels, geo.height, geo.width))
    cy, cx = geo.height // 2 - 1, geo.width // 2 - 1
    if kind == "actor":
        draw_disk(img, float(cy), float(cx), ACTOR_RADIUS, tuple(color))
    else:
        _draw_square(img, cy, cx, OBJECT_HALF, np.asarray(color))
    return img


def generate(seed: int, count: int, task_kind: str = "RA2V",
             geo: CodecGeometry | None = None) -> list[SynthSample]:
    """Deterministic labeled samples; the same (seed, task_kind) reproduces bytes.

    task_kind seeds a separate stream per task family so the R2V and A2V
    datasets differ, but every sample carries the full label set and can
    serve any task.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    geo = (geo or CodecGeometry()).validate()
    family_code = sum(task_kind.encode())
    samples = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, family_code, i)))
        actor_family = int(rng.integers(0, len(FAMILY_COLORS)))
        actor_shade = int(rng.integers(0, len(SHADES)))
        object_family = int((actor_family + 1 + rng.integers(0, len(FAMILY_COLORS) - 1))
                            % len(FAMILY_COLORS))
        object_shade = int(rng.integers(0, len(SHADES)))
        motion_id = int(rng.integers(0, N_MOTIONS))
        freq = ENVELOPE_FREQS_HZ[rng.integers(0, len(ENVELOPE_FREQS_HZ))]
        phase = ENVELOPE_PHASES[rng.integers(0, len(ENVELOPE_PHASES))]
        decoy_phases = rng.uniform(0.0, 2.0 * math.pi, size=len(DECOY_BANDS_HZ))

        actor_color = PALETTE[color_id(actor_family, actor_shade)]
        object_color = PALETTE[color_id(object_family, object_shade)]
        ts = np.arange(geo.frames)
        # pose labels are the rasterized (integer) positions, so the actor
        # sits exactly at its keypoints and detection oracles are tight
        xs, ys = trajectory_xy(motion_id, ts, geo.frames)
        xs, ys = np.round(xs), np.round(ys)
        env = envelope_value(freq, phase, ts / geo.fps)

        frames = np.zeros((geo.frames, geo.channels, geo.height, geo.width))
        for t in range(geo.frames):
            render_frame(frames[t], float(xs[t]), float(ys[t]), actor_color,
                         object_color, float(env[t]))

        text_ids = np.array([ACTOR_TOKEN_BASE + actor_family,
                             OBJECT_TOKEN_BASE + object_family,
                             MOTION_TOKEN_BASE + motion_id], dtype=np.int64)
        samples.append(SynthSample(
            clip=Clip(frames=frames, fps=geo.fps),
            text_ids=text_ids,
            ref_human=_render_ref(actor_color, "actor", geo),
            ref_object=_render_ref(object_color, "object", geo),
            pose=PoseTrack(xy=np.stack([xs, ys], axis=1),
                           visible=np.ones(geo.frames, dtype=bool)),
            audio=_make_audio(freq, phase, decoy_phases, geo),
            metadata={
                "actor_color_id": color_id(actor_family, actor_shade),
                "object_color_id": color_id(object_family, object_shade),
                "actor_color": actor_color.tolist(),
                "object_color": object_color.tolist(),
                "motion_id": motion_id,
                "freq_hz": freq,
                "phase": phase,
                "task_kind": task_kind,
            }))
    return samples


# -- detection and metrics ----------------------------------------------------


@dataclass
class ActorDetection:
    found: bool
    x: float = 0.0
    y: float = 0.0
    color: np.ndarray | None = None    # plain mean color over the matched region
    palette_id: int = -1
    mass: float = 0.0


def detect_actor(frame: np.ndarray, query_color=None, tol: float = COLOR_TOL,
                 min_mass: float = MIN_MASS) -> ActorDetection:
    """Nearest-palette-color blob detection on one (C, H, W) frame.

    Pixels whose nearest palette color is within ``tol`` (mean abs per
    channel) are candidates.  With a query color, only pixels matching the
    query's palette entry count; otherwise the palette entry with the
    largest intensity mass wins.  The centroid is intensity weighted; the
    color estimate is the plain mean over matched pixels.
    """
    c, h, w = frame.shape
    px = frame.reshape(c, -1).T                               # (HW, C)
    dists = np.abs(px[:, None, :] - PALETTE[None]).mean(axis=2)  # (HW, 12)
    nearest = dists.argmin(axis=1)
    candidate = dists[np.arange(px.shape[0]), nearest] <= tol

    if query_color is not None:
        want = int(np.abs(PALETTE - np.asarray(query_color)).mean(axis=1).argmin())
    else:
        masses = np.zeros(len(PALETTE))
        inten_all = px.mean(axis=1)
        np.add.at(masses, nearest[candidate], inten_all[candidate])
        if not masses.any():
            return ActorDetection(found=False)
        want = int(masses.argmax())

    sel = candidate & (nearest == want)
    if not sel.any():
        return ActorDetection(found=False, palette_id=want)
    inten = px[sel].mean(axis=1)
    mass = float(inten.sum())
    if mass < min_mass:
        return ActorDetection(found=False, palette_id=want, mass=mass)
    ys, xs = np.divmod(np.flatnonzero(sel), w)
    return ActorDetection(
        found=True,
        x=float((xs * inten).sum() / mass),
        y=float((ys * inten).sum() / mass),
        color=px[sel].mean(axis=0),
        palette_id=want,
        mass=mass)


def mouth_series(clip: Clip, centers: np.ndarray) -> np.ndarray:
    """Mean mouth-window intensity per frame, window anchored at ``centers``.

    centers is (T, 2) float (x, y); the window is the fixed offset patch
    below the rounded center, clipped at the canvas border.
    """
    t_len, _, h, w = clip.frames.shape
    out = np.zeros(t_len)
    for t in range(t_len):
        cx, cy = int(round(centers[t, 0])), int(round(centers[t, 1]))
        rows = [cy + dy for dy in MOUTH_DY if 0 <= cy + dy < h]
        cols = [cx + dx for dx in MOUTH_DX if 0 <= cx + dx < w]
        if not rows or not cols:
            continue
        out[t] = clip.frames[t][:, rows][:, :, cols].mean()
    return out


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """(correlation, degenerate); zero-variance series score 0 with a flag."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"series length mismatch: {a.shape} vs {b.shape}")
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0, True
    r = float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))
    return max(-1.0, min(1.0, r)), False


@dataclass
class DeskMetrics:
    """Desk-scale analogs of sync / pose / reference quality, batch means."""

    sync_corr: float | None = None
    sync_degenerate: int = 0
    pose_err: float | None = None
    pck: float | None = None
    ref_err_human: float | None = None
    ref_err_object: float | None = None
    recon_ref_mse: float | None = None
    n_clips: int = 0

    def __str__(self) -> str:
        def fmt(v, digits=4):
            return "absent" if v is None else f"{v:.{digits}f}"
        return (f"sync_corr={fmt(self.sync_corr)} (degenerate {self.sync_degenerate})"
                f" pose_err={fmt(self.pose_err, 2)} pck={fmt(self.pck, 3)}"
                f" ref_err_human={fmt(self.ref_err_human)}"
                f" ref_err_object={fmt(self.ref_err_object)}"
                f" recon_ref_mse={fmt(self.recon_ref_mse)} n={self.n_clips}")


def _ref_color_error(clip: Clip, color: np.ndarray) -> float:
    """Mean abs color error of the detected region vs the true identity color.

    Frames where nothing is detected charge the full distance of the color
    against black, the same penalty a clip that never paints the identity
    would earn.
    """
    errs = []
    for t in range(clip.n_frames):
        det = detect_actor(clip.frames[t], query_color=color)
        if det.found:
            errs.append(float(np.abs(det.color - color).mean()))
        else:
            errs.append(float(np.abs(color).mean()))
    return float(np.mean(errs))


def evaluate(clips: list[Clip], samples: list[SynthSample], task_kind: str,
             pseudo_images: list | None = None,
             geo: CodecGeometry | None = None) -> DeskMetrics:
    """Score generated clips against the labels of their source samples.

    Pose metrics are reported absent unless the task carries pose; the
    reconstruction MSE is reported absent unless decoded pseudo-frames are
    supplied.  Mouth windows anchor on the detected actor (falling back to
    the labeled pose when detection misses).
    """
    if len(clips) != len(samples):
        raise ShapeError(f"{len(clips)} clips vs {len(samples)} samples")
    if pseudo_images is not None and len(pseudo_images) != len(clips):
        raise ShapeError("pseudo_images not aligned with clips")
    geo = (geo or CodecGeometry()).validate()

    syncs, degenerate = [], 0
    ref_h, ref_o = [], []
    pose_errs, pck_hits = [], []
    recon = []
    want_pose = task_uses_pose(task_kind)

    for i, (clip, sample) in enumerate(zip(clips, samples)):
        actor_color = np.asarray(sample.metadata["actor_color"])
        object_color = np.asarray(sample.metadata["object_color"])

        centers = np.zeros((clip.n_frames, 2))
        per_frame_err = []
        for t in range(clip.n_frames):
            det = detect_actor(clip.frames[t], query_color=actor_color)
            if det.found:
                centers[t] = (det.x, det.y)
                err = math.hypot(det.x - sample.pose.xy[t, 0],
                                 det.y - sample.pose.xy[t, 1])
            else:
                centers[t] = sample.pose.xy[t]
                err = math.hypot(geo.width, geo.height)
            per_frame_err.append(err)
        if want_pose:
            pose_errs.extend(per_frame_err)
            pck_hits.extend(e <= PCK_THRESHOLD_PX for e in per_frame_err)

        env = audio_mod.interpolate_to_fps(sample.audio, geo.fps, geo.frames)[:, 0]
        r, degen = pearson(mouth_series(clip, centers), env)
        syncs.append(r)
        degenerate += int(degen)

        ref_h.append(_ref_color_error(clip, actor_color))
        ref_o.append(_ref_color_error(clip, object_color))

        if pseudo_images is not None:
            imgs = pseudo_images[i]
            truth = [sample.ref_human, sample.ref_object][:len(imgs)]
            for img, want in zip(imgs, truth):
                recon.append(float(((img - want) ** 2).mean()))

    return DeskMetrics(
        sync_corr=float(np.mean(syncs)),
        sync_degenerate=degenerate,
        pose_err=float(np.mean(pose_errs)) if want_pose else None,
        pck=float(np.mean(pck_hits)) if want_pose else None,
        ref_err_human=float(np.mean(ref_h)),
        ref_err_object=float(np.mean(ref_o)),
        recon_ref_mse=float(np.mean(recon)) if recon else None,
        n_clips=len(clips))


def high_contrast_subset(samples: list[SynthSample],
                         fraction: float = 0.25) -> list[SynthSample]:
    """Top-``fraction`` of samples by clip contrast (pixel std), order kept.

    Desk-scale stand-in for a curated high-quality subset; used by the
    optional filtered fine-tune stage.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"subset fraction {fraction} outside (0, 1]")
    if not samples:
        return []
    contrast = np.array([float(s.clip.frames.std()) for s in samples])
    keep = max(1, int(math.ceil(len(samples) * fraction)))
    cut = np.sort(contrast)[::-1][keep - 1]
    picked = [s for s, c in zip(samples, contrast) if c >= cut]
    return picked[:keep]


# -- bridging samples to model inputs ----------------------------------------


def sample_to_spec(sample: SynthSample, task_kind: str, geo: CodecGeometry,
                   rng: np.random.Generator | None = None,
                   pose_dropout: float = 0.0) -> ConditionSpec:
    """Build the condition spec a task family derives from a labeled sample.

    References go human-first; the first-frame condition is the encoded
    initial pixel frame repeated over one temporal group.  With pose
    dropout, a dropped step downgrades to the same task without pose so
    the pose slot gets the unconditioned fill and a zero mask.
    """
    kind = task_kind
    if pose_dropout > 0.0 and task_uses_pose(kind):
        if rng is None:
            raise ConfigError("pose dropout needs an rng")
        if rng.random() < pose_dropout:
            kind = {"RAP2V": "RA2V", "RP2V": "R2V"}[kind]

    refs = []
    pose = None
    first = None
    if kind in ("R2V", "RA2V", "RP2V", "RAP2V"):
        refs = [encode_image(sample.ref_human, geo), encode_image(sample.ref_object, geo)]
    if task_uses_pose(kind):
        pose = encode(rasterize_pose(sample.pose, geo, radius=ACTOR_RADIUS), geo)
    if kind in ("I2V", "A2V"):
        first = encode_image(sample.clip.frames[0], geo)
    return ConditionSpec(task_kind=kind, references=refs, pose=pose,
                         first_frame=first).validate(geo)


def samples_to_tensors(samples: list[SynthSample]) -> tuple[dict, list[dict]]:
    """Flatten samples into a name->array map plus a manifest row per sample."""
    tensors: dict[str, np.ndarray] = {}
    manifest = []
    for i, s in enumerate(samples):
        p = f"s{i:05d}"
        tensors[f"{p}.clip"] = s.clip.frames
        tensors[f"{p}.ref_human"] = s.ref_human
        tensors[f"{p}.ref_object"] = s.ref_object
        tensors[f"{p}.audio"] = s.audio.feats
        tensors[f"{p}.pose_xy"] = s.pose.xy
        tensors[f"{p}.pose_vis"] = s.pose.visible.astype(np.float64)
        tensors[f"{p}.text_ids"] = s.text_ids.astype(np.float64)
        manifest.append({"index": i, "fps": s.clip.fps,
                         "feature_rate": s.audio.feature_rate, **s.metadata})
    return tensors, manifest


def tensors_to_samples(tensors: dict, manifest: list[dict]) -> list[SynthSample]:
    samples = []
    for row in manifest:
        p = f"s{row['index']:05d}"
        meta = {k: v for k, v in row.items()
                if k not in ("index", "fps", "feature_rate")}
        samples.append(SynthSample(
            clip=Clip(frames=tensors[f"{p}.clip"], fps=float(row["fps"])),
            text_ids=tensors[f"{p}.text_ids"].astype(np.int64),
            ref_human=tensors[f"{p}.ref_human"],
            ref_object=tensors[f"{p}.ref_object"],
            pose=PoseTrack(xy=tensors[f"{p}.pose_xy"],
                           visible=tensors[f"{p}.pose_vis"] > 0.5),
            audio=AudioFeatures(feats=tensors[f"{p}.audio"],
                                feature_rate=float(row["feature_rate"])),
            metadata=meta))
    return samples
