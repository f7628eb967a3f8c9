"""Frame-local audio conditioning.

Audio features are linearly resampled to the video frame rate, grouped into
one window of ``w`` consecutive per-frame vectors per latent frame (stride
matching the codec's temporal compression), and injected into the token
stream through masked cross-attention: each latent frame's tokens may only
attend to that frame's window.  A learnable per-injection gate vector,
initialized near zero, scales the attention residual so a freshly added
audio path barely perturbs the host model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore
from .errors import ShapeError
from .numcore import MASK_BLOCK, Tensor

GATE_INIT = 1e-5


@dataclass
class AudioFeatures:
    """Raw feature track: (L, F) rows at feature_rate rows per second."""

    feats: np.ndarray
    feature_rate: float = 32.0

    @property
    def duration(self) -> float:
        return self.feats.shape[0] / self.feature_rate


@dataclass
class AudioContext:
    """Packed per-latent-frame audio groups plus the frame-local mask.

    tokens: ((n_pseudo_frames + T_l) * w, F); pseudo groups are all zero.
    attn_mask: ((N' + N), N_a) binary; row r of latent-frame slot q has
    ones exactly on columns [q * w, (q + 1) * w).
    """

    tokens: np.ndarray
    window: int
    n_pseudo_frames: int
    attn_mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def interpolate_to_fps(audio: AudioFeatures, fps: float, n_frames: int) -> np.ndarray:
    """Resample features onto video-frame timestamps k / fps, k < n_frames.

    Per-channel linear interpolation with endpoint clamping.  The track
    must cover the clip up to one feature-sample of slack.
    """
    feats = audio.feats
    if feats.ndim != 2:
        raise ShapeError(f"audio features must be (L, F), got {feats.shape}")
    n_feat = feats.shape[0]
    last_t = (n_frames - 1) / fps
    covered = (n_feat - 1) / audio.feature_rate + 1.0 / audio.feature_rate
    if last_t > covered:
        raise ShapeError(f"audio covers {covered:.3f}s but clip needs {last_t:.3f}s")
    sample_pos = np.arange(n_frames) / fps * audio.feature_rate
    grid = np.arange(n_feat, dtype=np.float64)
    out = np.empty((n_frames, feats.shape[1]), dtype=np.float64)
    for ch in range(feats.shape[1]):
        out[:, ch] = np.interp(sample_pos, grid, feats[:, ch])
    return out


def pack_context(frame_feats: np.ndarray, w: int, s: int, n_pseudo_frames: int,
                 tokens_per_frame: int) -> AudioContext:
    """Group per-frame features into one window per latent frame.

    Latent frame k anchors at representative pixel frame k * s; the window
    gathers the w rows centered there, replicating edges.  n_pseudo_frames
    zero groups are prepended so reference pseudo-frames see only silence.
    """
    if w % 2 != 1:
        raise ShapeError(f"context window must be odd, got {w}")
    n_frames, feat_dim = frame_feats.shape
    if n_frames % s != 0:
        raise ShapeError(f"frame count {n_frames} not divisible by stride {s}")
    t_latent = n_frames // s
    half = (w - 1) // 2

    groups = np.zeros((n_pseudo_frames + t_latent, w, feat_dim), dtype=np.float64)
    for k in range(t_latent):
        anchor = k * s
        rows = np.clip(np.arange(anchor - half, anchor + half + 1), 0, n_frames - 1)
        groups[n_pseudo_frames + k] = frame_feats[rows]
    tokens = groups.reshape(-1, feat_dim)

    n_slots = n_pseudo_frames + t_latent
    attn_mask = np.zeros((n_slots * tokens_per_frame, n_slots * w), dtype=np.float64)
    for q in range(n_slots):
        attn_mask[q * tokens_per_frame:(q + 1) * tokens_per_frame, q * w:(q + 1) * w] = 1.0
    return AudioContext(tokens=tokens, window=w,
                        n_pseudo_frames=n_pseudo_frames, attn_mask=attn_mask)


@dataclass
class AudioAttentionParams:
    """Projections for one injection site plus the shared feature projector."""

    proj_w: Tensor   # (F, H) shared audio projector weight
    proj_b: Tensor   # (H,)
    wq: Tensor       # (H, H)
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int


def mask_bias(mask: np.ndarray) -> np.ndarray:
    """Additive pre-softmax bias: 0 where allowed, MASK_BLOCK where not."""
    return (1.0 - mask) * MASK_BLOCK


def masked_cross_attention(h: Tensor, ctx: AudioContext,
                           params: AudioAttentionParams) -> Tensor:
    """Scaled dot-product attention from tokens onto their audio window.

    Queries come from the token stream, keys/values from the projected
    audio tokens; disallowed pairs receive the blocking constant before the
    softmax, so their weights underflow to exactly zero.
    """
    n_tok, width = h.shape
    if ctx.attn_mask.shape != (n_tok, ctx.n_tokens):
        raise ShapeError(f"attention mask {ctx.attn_mask.shape} != "
                         f"({n_tok}, {ctx.n_tokens})")
    heads = params.n_heads
    if width % heads != 0:
        raise ShapeError(f"hidden width {width} not divisible by {heads} heads")
    d_head = width // heads

    a = numcore.matmul(Tensor(ctx.tokens), params.proj_w) + params.proj_b
    q = numcore.matmul(h, params.wq)
    k = numcore.matmul(a, params.wk)
    v = numcore.matmul(a, params.wv)

    def split(x: Tensor, rows: int) -> Tensor:
        return x.reshape(rows, heads, d_head).transpose(1, 0, 2)

    qh = split(q, n_tok)
    kh = split(k, ctx.n_tokens)
    vh = split(v, ctx.n_tokens)
    logits = numcore.bmm(qh, kh.transpose(0, 2, 1)) * (1.0 / np.sqrt(d_head))
    logits = logits + Tensor(mask_bias(ctx.attn_mask)[None])
    weights = numcore.softmax_lastdim(logits)
    mixed = numcore.bmm(weights, vh)
    merged = mixed.transpose(1, 0, 2).reshape(n_tok, width)
    return numcore.matmul(merged, params.wo)


def gated_inject(h: Tensor, ctx: AudioContext, gate: Tensor,
                 params: AudioAttentionParams) -> Tensor:
    """Residual audio injection scaled elementwise by the gate vector."""
    return h + masked_cross_attention(h, ctx, params) * gate


def gate_norm_report(params: dict) -> list[tuple[int, float]]:
    """Per-block mean |gate| telemetry rows, ordered by block index.

    Accepts any name->Tensor (or name->ndarray) map containing gate entries
    named ``dual.<i>.audio.gate`` or ``single.<i>.audio.gate``.
    """
    rows = []
    for name, value in params.items():
        if not name.endswith(".audio.gate"):
            continue
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        stream, idx = name.split(".")[0], int(name.split(".")[1])
        order = idx if stream == "dual" else 10_000 + idx
        rows.append((order, float(np.abs(arr).mean())))
    rows.sort(key=lambda r: r[0])
    return [(i, v) for i, (_, v) in enumerate(rows)]
