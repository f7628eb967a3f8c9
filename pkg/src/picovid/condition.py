"""Channel-wise conditioning: build the model input from a noisy latent clip.

The model input stacks three channel groups per token: the noisy latent
(pseudo-frame tokens followed by video tokens along the temporal axis), the
condition tokens (reference images at pseudo positions, pose or first-frame
tokens at video positions), and a 4-channel presence mask.  Reference
pseudo-frames are themselves noised with the clip's timestep and carry a
reconstruction flow target so the network is pushed to reproduce the
references.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore
from .codec import CodecGeometry, LatentGrid
from .errors import ConfigError, ShapeError
from .numcore import Tensor

MASK_CHANNELS = 4

TASK_KINDS = ("T2V", "I2V", "R2V", "A2V", "RA2V", "RP2V", "RAP2V")

# Per task: (references, pose, first_frame, audio) -> "req" / "no" / "opt".
_TASK_TABLE = {
    "T2V":   ("no",  "no",  "no",  "no"),
    "I2V":   ("no",  "no",  "req", "no"),
    "R2V":   ("req", "no",  "no",  "no"),
    "A2V":   ("no",  "no",  "req", "req"),
    "RA2V":  ("req", "no",  "opt", "req"),
    "RP2V":  ("req", "req", "no",  "no"),
    "RAP2V": ("req", "req", "opt", "req"),
}


def task_uses_audio(task_kind: str) -> bool:
    return _TASK_TABLE[task_kind][3] == "req"


def task_uses_pose(task_kind: str) -> bool:
    return _TASK_TABLE[task_kind][1] == "req"


@dataclass
class ConditionSpec:
    """Which conditions accompany a clip.

    references: 0-2 latent frames (H_l, W_l, D), human first when two.
    pose: optional LatentGrid aligned with the video latent grid.
    first_frame: optional latent frame conditioning latent frame 0.
    """

    task_kind: str = "T2V"
    references: list = field(default_factory=list)
    pose: LatentGrid | None = None
    first_frame: np.ndarray | None = None

    def validate(self, geo: CodecGeometry) -> "ConditionSpec":
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        refs, pose, first, _audio = _TASK_TABLE[self.task_kind]
        _check_field(refs, bool(self.references), "references", self.task_kind)
        _check_field(pose, self.pose is not None, "pose", self.task_kind)
        _check_field(first, self.first_frame is not None, "first_frame", self.task_kind)
        if len(self.references) > 2:
            raise ConfigError(f"at most 2 references supported, got {len(self.references)}")
        frame_shape = (geo.h_latent, geo.w_latent, geo.token_dim)
        for i, r in enumerate(self.references):
            if r.shape != frame_shape:
                raise ShapeError(f"reference {i} shape {r.shape} != latent frame {frame_shape}")
        if self.first_frame is not None and self.first_frame.shape != frame_shape:
            raise ShapeError(f"first_frame shape {self.first_frame.shape} != {frame_shape}")
        if self.pose is not None:
            want = (geo.t_latent, geo.h_latent, geo.w_latent, geo.token_dim)
            if self.pose.tokens.shape != want:
                raise ShapeError(f"pose grid {self.pose.tokens.shape} != video grid {want}")
        return self

    @property
    def n_pseudo_frames(self) -> int:
        return len(self.references)


def _check_field(rule: str, present: bool, name: str, kind: str) -> None:
    if rule == "req" and not present:
        raise ConfigError(f"task {kind} requires {name}")
    if rule == "no" and present:
        raise ConfigError(f"task {kind} does not take {name}")


@dataclass
class LatentSequence:
    """Assembled token view of one conditioned clip.

    noisy/cond are ((N' + N), D); mask is ((N' + N), 4) with the presence
    bit replicated across its channels.  pos holds per-token (t, h, w)
    rotary index triples and is filled by the model according to its
    configured strategy.
    """

    noisy: np.ndarray
    cond: np.ndarray
    mask: np.ndarray
    n_pseudo_frames: int
    geo: CodecGeometry
    pos: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return self.noisy.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.geo.tokens_per_frame

    def model_input(self) -> np.ndarray:
        """Channel concat (noisy, cond, mask): ((N' + N), D + D + 4)."""
        return np.concatenate([self.noisy, self.cond, self.mask], axis=1)


@dataclass
class FlowTargets:
    """Velocity regression targets for the video and pseudo-frame parts."""

    video: np.ndarray                  # (N, D): clean - noise
    pseudo: np.ndarray                 # (N', D): reference - noise
    t: float


def unconditioned_fill(n_rows: int, token_dim: int) -> np.ndarray:
    """Condition tokens for positions with nothing to say.

    A black clip encodes to all-zero tokens under the lossless codec, so
    the fill is exactly zero.
    """
    return np.zeros((n_rows, token_dim), dtype=np.float64)


def build_condition_tensors(spec: ConditionSpec, geo: CodecGeometry):
    """The constant (timestep-independent) parts of the model input.

    Returns (cond, mask, ref_clean) where cond/mask cover pseudo then video
    rows and ref_clean is the stacked clean reference tokens (N', D).
    """
    spec.validate(geo)
    d = geo.token_dim
    tpf = geo.tokens_per_frame
    n_pseudo = spec.n_pseudo_frames * tpf
    n_video = geo.n_video_tokens

    if spec.references:
        ref_clean = np.concatenate([r.reshape(tpf, d) for r in spec.references], axis=0)
    else:
        ref_clean = np.zeros((0, d), dtype=np.float64)

    cond = np.zeros((n_pseudo + n_video, d), dtype=np.float64)
    mask = np.zeros((n_pseudo + n_video, MASK_CHANNELS), dtype=np.float64)
    cond[:n_pseudo] = ref_clean
    mask[:n_pseudo] = 1.0

    video_cond = cond[n_pseudo:]
    video_mask = mask[n_pseudo:]
    if spec.pose is not None:
        video_cond[:] = spec.pose.flat()
        video_mask[:] = 1.0
    else:
        video_cond[:] = unconditioned_fill(n_video, d)
    if spec.first_frame is not None:
        video_cond[:tpf] = spec.first_frame.reshape(tpf, d)
        video_mask[:tpf] = 1.0
    return cond, mask, ref_clean


def assemble(x1: LatentGrid, spec: ConditionSpec, t: float,
             noise: np.ndarray, geo: CodecGeometry) -> tuple[LatentSequence, FlowTargets]:
    """Noise the clip and its reference pseudo-frames at a shared timestep.

    noise covers pseudo rows then video rows, ((N' + N), D).  The noisy
    part follows the linear path (1 - t) * noise + t * clean; flow targets
    are clean - noise for both parts.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep t={t} outside [0, 1]")
    cond, mask, ref_clean = build_condition_tensors(spec, geo)
    x1_flat = x1.flat()
    n_pseudo = ref_clean.shape[0]
    n_total = n_pseudo + x1_flat.shape[0]
    if noise.shape != (n_total, geo.token_dim):
        raise ShapeError(f"noise shape {noise.shape} != ({n_total}, {geo.token_dim})")

    noise_pseudo, noise_video = noise[:n_pseudo], noise[n_pseudo:]
    noisy = np.concatenate([
        (1.0 - t) * noise_pseudo + t * ref_clean,
        (1.0 - t) * noise_video + t * x1_flat,
    ], axis=0)
    seq = LatentSequence(noisy=noisy, cond=cond, mask=mask,
                         n_pseudo_frames=spec.n_pseudo_frames, geo=geo)
    targets = FlowTargets(video=x1_flat - noise_video,
                          pseudo=ref_clean - noise_pseudo, t=t)
    return seq, targets


def split_outputs(v_pred: Tensor, n_pseudo_frames: int, tokens_per_frame: int):
    """Partition predicted velocities at the pseudo/video boundary."""
    cut = n_pseudo_frames * tokens_per_frame
    if cut > v_pred.shape[0]:
        raise ShapeError(f"split at {cut} exceeds {v_pred.shape[0]} rows")
    return v_pred[:cut], v_pred[cut:]


def loss(v_pred: Tensor, targets: FlowTargets, geo: CodecGeometry):
    """Flow-matching MSE on video plus weight-1 reference reconstruction.

    Returns (flow, flow_ref, total) scalar tensors; flow_ref is exactly
    zero when no pseudo frames are present.
    """
    n_pseudo = targets.pseudo.shape[0]
    n_video = targets.video.shape[0]
    if v_pred.shape != (n_pseudo + n_video, geo.token_dim):
        raise ShapeError(f"prediction shape {v_pred.shape} != "
                         f"({n_pseudo + n_video}, {geo.token_dim})")
    v_pseudo, v_video = split_outputs(v_pred, n_pseudo // geo.tokens_per_frame if n_pseudo else 0,
                                      geo.tokens_per_frame)
    diff_video = v_video - Tensor(targets.video)
    flow = (diff_video * diff_video).mean()
    if n_pseudo:
        diff_ref = v_pseudo - Tensor(targets.pseudo)
        flow_ref = (diff_ref * diff_ref).mean()
    else:
        flow_ref = numcore.as_tensor(0.0)
    total = flow + flow_ref * 1.0
    return flow, flow_ref, total
