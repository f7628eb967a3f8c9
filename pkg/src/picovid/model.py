"""Toy dual-stream diffusion transformer predicting flow velocities.

Text and video tokens run in separate parameter streams that meet in one
joint self-attention per dual block; video-only single blocks follow.  The
video stream consumes the channel-concatenated (noisy | cond | mask) input
and carries pseudo-frame tokens alongside video tokens.  Audio enters as a
gated frame-local cross-attention after block output, by default only in
the dual blocks.

Rotary positions are 3-axis (t, h, w), with each head's pair budget split
2:1:1 (temporal gets half).  Three index strategies for pseudo-frames are
supported: ``native`` counts pseudo frames as leading timesteps, with video
continuing after them; ``temporal_shift`` gives pseudo frames negative
timesteps; ``spatiotemporal_shift`` additionally offsets their spatial
indices by the latent grid extents.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import audio as audio_mod
from . import numcore
from .audio import AudioAttentionParams, AudioContext
from .codec import Clip, CodecGeometry, LatentGrid, decode, decode_latent_frame
from .condition import ConditionSpec, LatentSequence, build_condition_tensors
from .errors import ConfigError, ShapeError
from .numcore import Tensor, cat, layernorm, matmul, silu, softmax_lastdim, take_rows

ROPE_STRATEGIES = ("native", "temporal_shift", "spatiotemporal_shift")
AUDIO_PLACEMENTS = ("dual_only", "all")

BASE_GROUP = "base"
AUDIO_GROUP = "audio-module"

ROPE_THETA = 10000.0
TIME_SCALE = 1000.0  # timestep in [0,1] scaled before the sinusoidal embed


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    n_dual: int = 3
    n_single: int = 1
    heads: int = 4
    vocab: int = 64
    max_text_len: int = 8
    token_dim: int = 48                  # D from the codec geometry
    audio_feat_dim: int = 8
    rope_strategy: str = "native"
    audio_placement: str = "dual_only"
    audio_window: int = 5
    mlp_ratio: int = 4

    @property
    def d_head(self) -> int:
        return self.hidden // self.heads

    @property
    def in_dim(self) -> int:
        return 2 * self.token_dim + 4

    def validate(self) -> "ModelConfig":
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.d_head % 2 != 0:
            raise ConfigError(f"head dim {self.d_head} must be even for rotary pairs")
        if self.rope_strategy not in ROPE_STRATEGIES:
            raise ConfigError(f"unknown rope strategy {self.rope_strategy!r}")
        if self.audio_placement not in AUDIO_PLACEMENTS:
            raise ConfigError(f"unknown audio placement {self.audio_placement!r}")
        if self.audio_window % 2 != 1:
            raise ConfigError(f"audio window must be odd, got {self.audio_window}")
        return self


@dataclass
class TextTokens:
    """Prompt token ids; the embedding table lives in the parameter map."""

    ids: np.ndarray

    def validate(self, config: ModelConfig) -> "TextTokens":
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size > config.max_text_len:
            raise ShapeError(f"text ids must be 1-d with length <= {config.max_text_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= config.vocab):
            raise ConfigError(f"text id out of range [0, {config.vocab})")
        self.ids = ids
        return self


# -- parameter map -----------------------------------------------------------


def _stream_shapes(cfg: ModelConfig, prefix: str) -> dict[str, tuple]:
    h, m = cfg.hidden, cfg.hidden * cfg.mlp_ratio
    return {
        f"{prefix}.ln1.g": (h,), f"{prefix}.ln1.b": (h,),
        f"{prefix}.attn.wq": (h, h), f"{prefix}.attn.wk": (h, h),
        f"{prefix}.attn.wv": (h, h), f"{prefix}.attn.wo": (h, h),
        f"{prefix}.ln2.g": (h,), f"{prefix}.ln2.b": (h,),
        f"{prefix}.mlp.fc1.w": (h, m), f"{prefix}.mlp.fc1.b": (m,),
        f"{prefix}.mlp.fc2.w": (m, h), f"{prefix}.mlp.fc2.b": (h,),
    }


def _audio_site_shapes(cfg: ModelConfig, prefix: str) -> dict[str, tuple]:
    h = cfg.hidden
    return {
        f"{prefix}.audio.wq": (h, h), f"{prefix}.audio.wk": (h, h),
        f"{prefix}.audio.wv": (h, h), f"{prefix}.audio.wo": (h, h),
        f"{prefix}.audio.gate": (h,),
    }


def param_shapes(cfg: ModelConfig, include_audio: bool = True) -> dict[str, tuple]:
    """Name -> shape map; a pure function of the config."""
    cfg.validate()
    h = cfg.hidden
    shapes: dict[str, tuple] = {
        "embed.in.w": (cfg.in_dim, h), "embed.in.b": (h,),
        "text.embed": (cfg.vocab, h), "text.pos": (cfg.max_text_len, h),
        "time.fc1.w": (h, h), "time.fc1.b": (h,),
        "time.fc2.w": (h, h), "time.fc2.b": (h,),
        "head.ln.g": (h,), "head.ln.b": (h,),
        "head.w": (h, cfg.token_dim), "head.b": (cfg.token_dim,),
    }
    for i in range(cfg.n_dual):
        shapes.update(_stream_shapes(cfg, f"dual.{i}.vid"))
        shapes.update(_stream_shapes(cfg, f"dual.{i}.txt"))
        if include_audio:
            shapes.update(_audio_site_shapes(cfg, f"dual.{i}"))
    for i in range(cfg.n_single):
        shapes.update(_stream_shapes(cfg, f"single.{i}"))
        if include_audio and cfg.audio_placement == "all":
            shapes.update(_audio_site_shapes(cfg, f"single.{i}"))
    if include_audio:
        shapes["audio.proj.w"] = (cfg.audio_feat_dim, h)
        shapes["audio.proj.b"] = (h,)
    return shapes


def group_of(name: str) -> str:
    return AUDIO_GROUP if (".audio." in name or name.startswith("audio.")) else BASE_GROUP


@dataclass
class ModelParams:
    """Named tensors with per-name group tags (base vs audio-module)."""

    tensors: dict[str, Tensor]
    config: ModelConfig

    @property
    def groups(self) -> dict[str, str]:
        return {name: group_of(name) for name in self.tensors}

    @property
    def has_audio(self) -> bool:
        return any(g == AUDIO_GROUP for g in self.groups.values())

    def names(self, group: str | None = None) -> list[str]:
        return sorted(n for n in self.tensors
                      if group is None or group_of(n) == group)

    def trainable(self) -> list[Tensor]:
        return [self.tensors[n] for n in self.names()]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def clone(self) -> "ModelParams":
        return ModelParams(
            tensors={n: Tensor(t.data.copy(), requires_grad=True)
                     for n, t in self.tensors.items()},
            config=self.config)


def init_params(cfg: ModelConfig, seed: int = 0, include_audio: bool = True) -> ModelParams:
    """Seeded parameter init with a per-name random stream.

    Keying each draw on (seed, name) makes the base weights identical
    whether or not audio modules are present, so the audio-equipped and
    audio-free specialists start from one shared base the way both would
    start from one pretrained model at full scale.

    Layer norms start at identity, gates at the near-zero constant, the
    velocity head at exactly zero (a fresh model predicts zero velocity),
    and weight matrices at N(0, 1/sqrt(fan_in)).
    """
    tensors: dict[str, Tensor] = {}
    for name, shape in sorted(param_shapes(cfg, include_audio).items()):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, zlib.crc32(name.encode()))))
        if name.endswith((".ln1.g", ".ln2.g", "head.ln.g")):
            data = np.ones(shape)
        elif name.endswith(".gate"):
            data = np.full(shape, audio_mod.GATE_INIT)
        elif name in ("head.w", "head.b"):
            data = np.zeros(shape)
        elif name.endswith((".b", ".ln1.b", ".ln2.b")):
            data = np.zeros(shape)
        elif name == "text.pos":
            data = rng.normal(0.0, 0.02, size=shape)
        else:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            data = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors=tensors, config=cfg)


def count_params(cfg: ModelConfig, include_audio: bool = True):
    """(total, per-group) parameter counts straight from the name map."""
    per_group = {BASE_GROUP: 0, AUDIO_GROUP: 0}
    for name, shape in param_shapes(cfg, include_audio).items():
        per_group[group_of(name)] += int(np.prod(shape))
    return sum(per_group.values()), per_group


# -- rotary positions ----------------------------------------------------------


def rope_indices(n_pseudo_frames: int, geo: CodecGeometry, strategy: str) -> np.ndarray:
    """Per-token (t, h, w) integer triples for pseudo + video tokens.

    Tokens are ordered pseudo frames first, then video frames, each frame
    row-major over the latent grid.
    """
    if strategy not in ROPE_STRATEGIES:
        raise ConfigError(f"unknown rope strategy {strategy!r}")
    hl, wl = geo.h_latent, geo.w_latent
    hh, ww = np.meshgrid(np.arange(hl), np.arange(wl), indexing="ij")
    hh, ww = hh.reshape(-1), ww.reshape(-1)

    rows = []
    for k in range(n_pseudo_frames):
        if strategy == "native":
            t_idx, dh, dw = k, 0, 0
        else:
            t_idx = -(k + 1)
            dh, dw = (hl, wl) if strategy == "spatiotemporal_shift" else (0, 0)
        rows.append(np.stack([np.full_like(hh, t_idx), hh + dh, ww + dw], axis=1))
    video_t0 = n_pseudo_frames if strategy == "native" else 0
    for k in range(geo.t_latent):
        rows.append(np.stack([np.full_like(hh, video_t0 + k), hh, ww], axis=1))
    return np.concatenate(rows, axis=0).astype(np.int64)


def _pair_split(d_head: int) -> tuple[int, int, int]:
    """Rotary pair budget per axis, (t, h, w) ~ 2:1:1 with whole pairs."""
    pairs = d_head // 2
    hw = pairs // 4
    return pairs - 2 * hw, hw, hw


def rope_tables(pos: np.ndarray, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (S, d_head / 2) for 3-axis rotary."""
    t_pairs, h_pairs, w_pairs = _pair_split(d_head)
    blocks = []
    for axis, n_pairs in ((0, t_pairs), (1, h_pairs), (2, w_pairs)):
        if n_pairs == 0:
            continue
        inv_freq = ROPE_THETA ** (-np.arange(n_pairs) / n_pairs)
        blocks.append(pos[:, axis:axis + 1].astype(np.float64) * inv_freq[None])
    angles = np.concatenate(blocks, axis=1)
    return np.cos(angles), np.sin(angles)


# -- forward pass ---------------------------------------------------------------


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(ROPE_THETA) * np.arange(half) / half)
    angles = t * TIME_SCALE * freqs
    return np.concatenate([np.cos(angles), np.sin(angles)])


def _heads_view(x: Tensor, heads: int) -> Tensor:
    rows, width = x.shape
    return x.reshape(rows, heads, width // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    heads, rows, d_head = x.shape
    return x.transpose(1, 0, 2).reshape(rows, heads * d_head)


def _qkv(h: Tensor, p: dict[str, Tensor], prefix: str) -> tuple[Tensor, Tensor, Tensor]:
    n1 = layernorm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    return (matmul(n1, p[f"{prefix}.attn.wq"]),
            matmul(n1, p[f"{prefix}.attn.wk"]),
            matmul(n1, p[f"{prefix}.attn.wv"]))


def _mlp(h: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    n2 = layernorm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    return matmul(silu(matmul(n2, p[f"{prefix}.mlp.fc1.w"]) + p[f"{prefix}.mlp.fc1.b"]),
                  p[f"{prefix}.mlp.fc2.w"]) + p[f"{prefix}.mlp.fc2.b"]


def _rope_on_heads(x: Tensor, cos: np.ndarray, sin: np.ndarray, heads: int) -> Tensor:
    return numcore.rotate_pairs(_heads_view(x, heads), cos, sin)


def _audio_params(p: dict[str, Tensor], prefix: str, heads: int) -> AudioAttentionParams:
    return AudioAttentionParams(
        proj_w=p["audio.proj.w"], proj_b=p["audio.proj.b"],
        wq=p[f"{prefix}.audio.wq"], wk=p[f"{prefix}.audio.wk"],
        wv=p[f"{prefix}.audio.wv"], wo=p[f"{prefix}.audio.wo"],
        n_heads=heads)


def forward(seq: LatentSequence, text: TextTokens, ctx: AudioContext | None,
            t: float, params: ModelParams, geo: CodecGeometry) -> Tensor:
    """Predict per-token velocities, ((N' + N), D).

    ctx enables the gated audio path; passing ctx against a parameter set
    without audio modules is an error, while ctx=None skips the audio code
    path entirely (the audio-off route shares every other operation).
    """
    cfg = params.config
    p = params.tensors
    text.validate(cfg)
    if ctx is not None and not params.has_audio:
        raise ConfigError("audio context supplied but parameters carry no audio modules")

    pos = rope_indices(seq.n_pseudo_frames, geo, cfg.rope_strategy)
    if pos.shape[0] != seq.n_tokens:
        raise ShapeError(f"sequence has {seq.n_tokens} tokens but geometry implies {pos.shape[0]}")
    seq.pos = pos
    cos, sin = rope_tables(pos, cfg.d_head)

    h_vid = matmul(Tensor(seq.model_input()), p["embed.in.w"]) + p["embed.in.b"]
    te = Tensor(sinusoidal_embedding(t, cfg.hidden)[None])
    te = matmul(silu(matmul(te, p["time.fc1.w"]) + p["time.fc1.b"]), p["time.fc2.w"]) + p["time.fc2.b"]
    h_vid = h_vid + te

    n_txt = int(text.ids.size)
    h_txt = take_rows(p["text.embed"], text.ids) + p["text.pos"][:n_txt] + te

    heads = cfg.heads
    for i in range(cfg.n_dual):
        vq, vk, vv = _qkv(h_vid, p, f"dual.{i}.vid")
        tq, tk, tv = _qkv(h_txt, p, f"dual.{i}.txt")
        vqh = _rope_on_heads(vq, cos, sin, heads)
        vkh = _rope_on_heads(vk, cos, sin, heads)
        q = cat([_heads_view(tq, heads), vqh], axis=1)
        k = cat([_heads_view(tk, heads), vkh], axis=1)
        v = cat([_heads_view(tv, heads), _heads_view(vv, heads)], axis=1)
        scale = 1.0 / math.sqrt(cfg.d_head)
        mixed = numcore.bmm(softmax_lastdim(numcore.bmm(q, k.transpose(0, 2, 1)) * scale), v)
        mixed = _merge_heads(mixed)
        h_txt = h_txt + matmul(mixed[:n_txt], p[f"dual.{i}.txt.attn.wo"])
        h_vid = h_vid + matmul(mixed[n_txt:], p[f"dual.{i}.vid.attn.wo"])
        h_txt = h_txt + _mlp(h_txt, p, f"dual.{i}.txt")
        h_vid = h_vid + _mlp(h_vid, p, f"dual.{i}.vid")
        if ctx is not None:
            h_vid = audio_mod.gated_inject(h_vid, ctx, p[f"dual.{i}.audio.gate"],
                                           _audio_params(p, f"dual.{i}", heads))

    for i in range(cfg.n_single):
        q, k, v = _qkv(h_vid, p, f"single.{i}")
        qh = _rope_on_heads(q, cos, sin, heads)
        kh = _rope_on_heads(k, cos, sin, heads)
        scale = 1.0 / math.sqrt(cfg.d_head)
        logits = numcore.bmm(qh, kh.transpose(0, 2, 1)) * scale
        mixed = _merge_heads(numcore.bmm(softmax_lastdim(logits), _heads_view(v, heads)))
        h_vid = h_vid + matmul(mixed, p[f"single.{i}.attn.wo"])
        h_vid = h_vid + _mlp(h_vid, p, f"single.{i}")
        if ctx is not None and cfg.audio_placement == "all":
            h_vid = audio_mod.gated_inject(h_vid, ctx, p[f"single.{i}.audio.gate"],
                                           _audio_params(p, f"single.{i}", heads))

    out = layernorm(h_vid, p["head.ln.g"], p["head.ln.b"])
    return matmul(out, p["head.w"]) + p["head.b"]


# -- sampling --------------------------------------------------------------------


@dataclass
class SampleResult:
    clip: Clip
    pseudo_images: list = field(default_factory=list)  # decoded reference reconstructions
    latents: np.ndarray | None = None


def build_audio_context(feats_at_fps: np.ndarray, cfg: ModelConfig,
                        geo: CodecGeometry, n_pseudo_frames: int) -> AudioContext:
    return audio_mod.pack_context(feats_at_fps, cfg.audio_window, geo.t_stride,
                                  n_pseudo_frames, geo.tokens_per_frame)


def sample(spec: ConditionSpec, text: TextTokens, audio_feats: np.ndarray | None,
           steps: int, seed: int, params: ModelParams, geo: CodecGeometry,
           return_diagnostics: bool = False):
    """Fixed-step Euler integration of the learned velocity field.

    Noise is drawn for pseudo and video rows together; cond and mask stay
    constant while the noisy part advances from t=0 to t=1.  Returns the
    decoded Clip, or a SampleResult with decoded pseudo-frames when
    diagnostics are requested.
    """
    if steps < 1:
        raise ConfigError(f"sampler needs steps >= 1, got {steps}")
    cfg = params.config
    cond, mask, _ = build_condition_tensors(spec, geo)
    n_pf = spec.n_pseudo_frames
    tpf = geo.tokens_per_frame
    n_total = n_pf * tpf + geo.n_video_tokens

    ctx = None
    if audio_feats is not None:
        ctx = build_audio_context(audio_feats, cfg, geo, n_pf)

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A11)))
    x = rng.standard_normal((n_total, geo.token_dim))
    dt = 1.0 / steps
    for i in range(steps):
        seq = LatentSequence(noisy=x, cond=cond, mask=mask,
                             n_pseudo_frames=n_pf, geo=geo)
        v = forward(seq, text, ctx, i * dt, params, geo)
        x = x + dt * v.data

    video = x[n_pf * tpf:]
    grid = LatentGrid(tokens=video.reshape(geo.t_latent, geo.h_latent, geo.w_latent,
                                           geo.token_dim))
    clip = decode(grid, geo)
    if not return_diagnostics:
        return clip
    pseudo = [decode_latent_frame(
        x[k * tpf:(k + 1) * tpf].reshape(geo.h_latent, geo.w_latent, geo.token_dim), geo)
        for k in range(n_pf)]
    return SampleResult(clip=clip, pseudo_images=pseudo, latents=x)
