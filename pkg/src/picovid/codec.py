"""Lossless video<->latent codec and pose rasterization.

Replaces a learned VAE with a pure reshape: temporal groups of
``t_stride`` frames and spatial ``patch x patch`` blocks flattened into
token channels.  Nothing is learned and the roundtrip is exact, so
conditioning mechanisms can be verified without codec error in the way.

Token channel layout (documented so index oracles can be written against
it): token (k, i, j) holds, flattened in this order,

    d = ((dt * p + py) * p + px) * C + c   ->   frames[t_stride*k + dt, c, i*p + py, j*p + px]

with dt in [0, t_stride), py/px in [0, p), c in [0, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class CodecGeometry:
    """Pixel and latent grid extents; shared by every module downstream."""

    frames: int = 16          # clip length T, divisible by t_stride
    channels: int = 3
    height: int = 16
    width: int = 16
    patch: int = 2            # spatial patch size p
    t_stride: int = 4         # temporal compression
    fps: float = 8.0

    @property
    def t_latent(self) -> int:
        return self.frames // self.t_stride

    @property
    def h_latent(self) -> int:
        return self.height // self.patch

    @property
    def w_latent(self) -> int:
        return self.width // self.patch

    @property
    def token_dim(self) -> int:
        return self.t_stride * self.patch * self.patch * self.channels

    @property
    def tokens_per_frame(self) -> int:
        return self.h_latent * self.w_latent

    @property
    def n_video_tokens(self) -> int:
        return self.t_latent * self.tokens_per_frame

    def validate(self) -> "CodecGeometry":
        if self.frames % self.t_stride != 0:
            raise ShapeError(f"frames {self.frames} not divisible by t_stride {self.t_stride}")
        if self.height % self.patch != 0 or self.width % self.patch != 0:
            raise ShapeError(f"canvas {self.height}x{self.width} not divisible by patch {self.patch}")
        return self


@dataclass
class Clip:
    """Pixel clip: frames (T, C, H, W) in [0, 1]."""

    frames: np.ndarray
    fps: float = 8.0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class LatentGrid:
    """Token view of a clip: (T_l, H_l, W_l, D)."""

    tokens: np.ndarray

    @property
    def t_latent(self) -> int:
        return self.tokens.shape[0]

    def flat(self) -> np.ndarray:
        """Tokens flattened to (N, D) in t-major, then h, then w order."""
        t, h, w, d = self.tokens.shape
        return self.tokens.reshape(t * h * w, d)


@dataclass
class PoseTrack:
    """Per-frame keypoint (x, y) in pixel coordinates plus visibility."""

    xy: np.ndarray            # (T, 2) float
    visible: np.ndarray       # (T,) bool

    def __len__(self) -> int:
        return self.xy.shape[0]


def _check_clip(clip: Clip, geo: CodecGeometry) -> None:
    t, c, h, w = clip.frames.shape
    if t % geo.t_stride != 0:
        raise ShapeError(f"clip length {t} not divisible by temporal stride {geo.t_stride}")
    if c != geo.channels or h % geo.patch != 0 or w % geo.patch != 0:
        raise ShapeError(f"clip shape {clip.frames.shape} incompatible with geometry "
                         f"(C={geo.channels}, patch={geo.patch})")


def encode(clip: Clip, geo: CodecGeometry) -> LatentGrid:
    """Pure regroup of pixels into latent tokens; exactly invertible."""
    _check_clip(clip, geo)
    t, c, h, w = clip.frames.shape
    s, p = geo.t_stride, geo.patch
    x = clip.frames.reshape(t // s, s, c, h // p, p, w // p, p)
    # -> (T_l, H_l, W_l, dt, py, px, c), then flatten the last four into D
    x = x.transpose(0, 3, 5, 1, 4, 6, 2)
    tokens = np.ascontiguousarray(x).reshape(t // s, h // p, w // p, s * p * p * c)
    return LatentGrid(tokens=tokens.astype(np.float64))


def decode(grid: LatentGrid, geo: CodecGeometry) -> Clip:
    """Exact inverse of :func:`encode`."""
    tl, hl, wl, d = grid.tokens.shape
    s, p, c = geo.t_stride, geo.patch, geo.channels
    if d != s * p * p * c:
        raise ShapeError(f"token dim {d} does not match geometry D={s * p * p * c}")
    x = grid.tokens.reshape(tl, hl, wl, s, p, p, c)
    x = x.transpose(0, 3, 6, 1, 4, 2, 5)
    frames = np.ascontiguousarray(x).reshape(tl * s, c, hl * p, wl * p)
    return Clip(frames=frames, fps=geo.fps)


def encode_image(img: np.ndarray, geo: CodecGeometry) -> np.ndarray:
    """Encode a single image into one latent frame of tokens (H_l, W_l, D).

    The image is repeated across one temporal group so the resulting
    pseudo-frame has the same token structure as a video latent frame.
    """
    c, h, w = img.shape
    if c != geo.channels or h % geo.patch != 0 or w % geo.patch != 0:
        raise ShapeError(f"image shape {img.shape} incompatible with geometry")
    frames = np.repeat(img[None], geo.t_stride, axis=0)
    grid = encode(Clip(frames=frames, fps=geo.fps), geo)
    return grid.tokens[0]


def decode_latent_frame(tokens: np.ndarray, geo: CodecGeometry) -> np.ndarray:
    """Decode one latent frame (H_l, W_l, D) back to an image (C, H, W).

    Averages the t_stride temporal slots; for a pseudo-frame produced by
    :func:`encode_image` the slots are identical, so the mean is exact.
    """
    grid = LatentGrid(tokens=tokens[None])
    clip = decode(grid, geo)
    return clip.frames.mean(axis=0)


def rasterize_pose(track: PoseTrack, geo: CodecGeometry, radius: int = 2) -> Clip:
    """Render a keypoint track as a video: bright disk on black per frame.

    The disk has the given pixel radius (pixels with squared distance
    <= radius^2 from the rounded keypoint); invisible frames stay black.
    """
    if len(track) != geo.frames:
        raise ShapeError(f"track length {len(track)} != clip length {geo.frames}")
    frames = np.zeros((geo.frames, geo.channels, geo.height, geo.width), dtype=np.float64)
    for t in range(geo.frames):
        if not track.visible[t]:
            continue
        x, y = track.xy[t]
        if not (0 <= x < geo.width and 0 <= y < geo.height):
            raise ShapeError(f"visible keypoint ({x}, {y}) outside canvas at frame {t}")
        draw_disk(frames[t], float(y), float(x), radius, (1.0,) * geo.channels)
    return Clip(frames=frames, fps=geo.fps)


def draw_disk(frame: np.ndarray, cy: float, cx: float, radius: int, color) -> None:
    """Paint a filled disk onto (C, H, W), clipped at the canvas border."""
    _, h, w = frame.shape
    iy, ix = int(round(cy)), int(round(cx))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy * dy + dx * dx > radius * radius:
                continue
            yy, xx = iy + dy, ix + dx
            if 0 <= yy < h and 0 <= xx < w:
                for c, v in enumerate(color):
                    frame[c, yy, xx] = v
