"""Decoupled-then-joint training: specialists, merge, joint fine-tunes.

The pipeline trains a reference specialist (no audio modules in the
parameter set at all) and an audio specialist (first-frame conditioned),
merges them by inheriting audio modules verbatim and interpolating every
base tensor, checks the merged model zero-shot on the combined task, then
fine-tunes jointly, adding pose only in the last stage.

Also home to the checkpoint container: a binary file of named float64
tensors with group tags plus a canonical JSON header, written so that
save -> load -> save reproduces the bytes exactly.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audio as audio_mod
from . import model as model_mod
from . import numcore
from . import synthdata
from .codec import CodecGeometry, encode
from .condition import TASK_KINDS, assemble, loss as flow_loss, task_uses_audio
from .errors import ConfigError, IOFailure, NumericError, ShapeError
from .model import ModelConfig, ModelParams, TextTokens, group_of, init_params
from .numcore import Tensor
from .synthdata import DeskMetrics, SynthSample

PLAN_STAGE_NAMES = ("R2V", "A2V", "MERGE", "RA2V", "RAP2V")
# standalone training also accepts text-only / first-frame-only stages,
# used for control models in evaluation; plans stay restricted
STANDALONE_STAGE_NAMES = PLAN_STAGE_NAMES + ("T2V", "I2V")

GRAD_SPIKE_NORM = 1e3
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8


@dataclass
class StageSpec:
    name: str
    steps: int = 0
    batch_size: int = 1
    lr: float = 3e-5
    weight_decay: float = 0.01
    dataset: str = ""              # selector: task family, optionally ":hq"
    alpha_a2v: float = 0.6         # MERGE only
    pose_dropout: float = 0.0

    @property
    def task_kind(self) -> str:
        base = self.dataset.split(":", 1)[0] if self.dataset else ""
        return base or self.name

    @property
    def hq_subset(self) -> bool:
        """Filtered fine-tune: keep only the high-contrast quartile."""
        return self.dataset.endswith(":hq")

    def validate(self, allow_standalone: bool = False) -> "StageSpec":
        names = STANDALONE_STAGE_NAMES if allow_standalone else PLAN_STAGE_NAMES
        if self.name not in names:
            raise ConfigError(f"unknown stage name {self.name!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"stage {self.name}: bad steps/batch_size")
        if not 0.0 <= self.pose_dropout <= 1.0:
            raise ConfigError(f"stage {self.name}: pose_dropout outside [0, 1]")
        if self.name == "MERGE" and not 0.0 <= self.alpha_a2v <= 1.0:
            raise ConfigError(f"merge alpha {self.alpha_a2v} outside [0, 1]")
        if self.dataset:
            base, _, tag = self.dataset.partition(":")
            if base not in TASK_KINDS or tag not in ("", "hq"):
                raise ConfigError(f"stage {self.name}: bad dataset selector "
                                  f"{self.dataset!r}")
        return self


@dataclass
class StagePlan:
    stages: list

    def validate(self) -> "StagePlan":
        for s in self.stages:
            s.validate(allow_standalone=False)
        names = [s.name for s in self.stages]
        if names.count("MERGE") > 1:
            raise ConfigError("plan may contain at most one MERGE stage")
        merge_at = names.index("MERGE") if "MERGE" in names else None
        for i, n in enumerate(names):
            if n in ("R2V", "A2V") and merge_at is not None and i > merge_at:
                raise ConfigError("specialist stages must precede MERGE")
            if n in ("RA2V", "RAP2V"):
                if merge_at is None or i < merge_at:
                    raise ConfigError(f"{n} requires a preceding MERGE")
        if "RAP2V" in names and names[-1] != "RAP2V":
            raise ConfigError("RAP2V must be the last stage")
        if merge_at is not None:
            if "R2V" not in names[:merge_at] or "A2V" not in names[:merge_at]:
                raise ConfigError("MERGE needs both R2V and A2V stages before it")
        return self


def default_plan(steps_r2v: int = 1600, steps_a2v: int = 2000, steps_ra2v: int = 400,
                 steps_rap2v: int = 400, lr: float = 1e-2,
                 batch_size: int = 4) -> StagePlan:
    """Desk-scale schedule; step counts and lr set by calibration runs."""
    mk = lambda name, steps, **kw: StageSpec(name=name, steps=steps,
                                             batch_size=batch_size, lr=lr, **kw)
    return StagePlan(stages=[
        mk("R2V", steps_r2v),
        mk("A2V", steps_a2v),
        StageSpec(name="MERGE", alpha_a2v=0.6),
        mk("RA2V", steps_ra2v),
        mk("RAP2V", steps_rap2v, pose_dropout=0.3),
    ]).validate()


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam with per-name moment state."""

    def __init__(self, lr: float, weight_decay: float,
                 betas: tuple = ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, tensors: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name in sorted(grads):
            g = grads[name]
            p = tensors[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / (1.0 - b1 ** t)
            v_hat = self.v[name] / (1.0 - b2 ** t)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)


# -- checkpoint container --------------------------------------------------------

MAGIC = b"PVIDCKPT"
FORMAT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_container(path, tensors: dict, tags: dict, header: dict) -> None:
    """Named-tensor container: canonical header, then sorted tensor records."""
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            blob = _canonical_json(header)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            f.write(struct.pack("<I", len(tensors)))
            for name in sorted(tensors):
                arr = np.asarray(tensors[name], dtype=np.float64)
                nb = name.encode()
                tb = tags.get(name, "").encode()
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", len(tb)))
                f.write(tb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                f.write(arr.astype("<f8").tobytes())
    except OSError as e:
        raise IOFailure(f"cannot write container {path}: {e}") from e


def read_container(path):
    """Inverse of :func:`write_container` -> (header, tensors, tags)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IOFailure(f"cannot read container {path}: {e}") from e
    if raw[:len(MAGIC)] != MAGIC:
        raise IOFailure(f"{path}: not a checkpoint container (bad magic)")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise IOFailure(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals if len(vals) > 1 else vals[0]

    def take_bytes(n):
        nonlocal off
        if off + n > len(raw):
            raise IOFailure(f"{path}: truncated container")
        chunk = raw[off:off + n]
        off += n
        return chunk

    version = take("<I")
    if version != FORMAT_VERSION:
        raise IOFailure(f"{path}: unsupported container version {version}")
    header = json.loads(take_bytes(take("<Q")).decode())
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for _ in range(take("<I")):
        name = take_bytes(take("<I")).decode()
        tag = take_bytes(take("<I")).decode()
        rank = take("<I")
        shape = tuple(struct.unpack_from(f"<{rank}Q", raw, off)) if rank else ()
        off += 8 * rank
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take_bytes(8 * n), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)
        tags[name] = tag
    if off != len(raw):
        raise IOFailure(f"{path}: trailing bytes in container")
    return header, tensors, tags


@dataclass
class Checkpoint:
    params: ModelParams
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    adam_step: int = 0
    stage_cursor: str = ""
    rng_state: dict | None = None
    version: int = FORMAT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "adam_step": ckpt.adam_step,
        "config": asdict(ckpt.params.config),
        "rng_state": ckpt.rng_state,
        "stage_cursor": ckpt.stage_cursor,
    }
    tensors: dict[str, np.ndarray] = {}
    tags: dict[str, str] = {}
    for name, t in ckpt.params.tensors.items():
        tensors[name] = t.data
        tags[name] = group_of(name)
    for name, arr in ckpt.moments_m.items():
        tensors[f"m:{name}"] = arr
        tags[f"m:{name}"] = "adam-m"
    for name, arr in ckpt.moments_v.items():
        tensors[f"v:{name}"] = arr
        tags[f"v:{name}"] = "adam-v"
    write_container(path, tensors, tags, header)


def load_checkpoint(path) -> Checkpoint:
    header, tensors, tags = read_container(path)
    try:
        cfg = ModelConfig(**header["config"]).validate()
    except TypeError as e:
        raise ConfigError(f"{path}: bad config in checkpoint: {e}") from e
    params: dict[str, Tensor] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("m:"):
            m[name[2:]] = arr.copy()
        elif name.startswith("v:"):
            v[name[2:]] = arr.copy()
        else:
            if tags.get(name) != group_of(name):
                raise IOFailure(f"{path}: tensor {name} carries tag {tags.get(name)!r}, "
                                f"expected {group_of(name)!r}")
            params[name] = Tensor(arr.copy(), requires_grad=True)
    for want in (model_mod.param_shapes(cfg, include_audio=True),
                 model_mod.param_shapes(cfg, include_audio=False)):
        if set(params) == set(want):
            break
    else:
        raise IOFailure(f"{path}: tensor names match neither the audio-equipped "
                        f"nor the audio-free architecture")
    for name, t in params.items():
        if tuple(t.data.shape) != tuple(want[name]):
            raise IOFailure(f"{path}: tensor {name} shape {t.data.shape}, "
                            f"expected {tuple(want[name])}")
    return Checkpoint(
        params=ModelParams(tensors=params, config=cfg),
        moments_m=m, moments_v=v,
        adam_step=int(header["adam_step"]),
        stage_cursor=header["stage_cursor"],
        rng_state=header["rng_state"])


# -- training ---------------------------------------------------------------------


def make_stream(samples: list, rng: np.random.Generator):
    """Infinite stream over a sample list, order drawn from the given rng."""
    if not samples:
        raise ConfigError("empty sample list for training stream")

    def draw():
        while True:
            for i in rng.permutation(len(samples)):
                yield samples[int(i)]

    return draw()


def _audio_context_for(sample: SynthSample, spec, cfg: ModelConfig, geo: CodecGeometry):
    feats = audio_mod.interpolate_to_fps(sample.audio, geo.fps, geo.frames)
    return model_mod.build_audio_context(feats, cfg, geo, spec.n_pseudo_frames)


def _format_gates(params: ModelParams) -> str:
    rows = audio_mod.gate_norm_report(params.tensors)
    return ";".join(f"{i}:{v:.6e}" for i, v in rows) if rows else "-"


def log_row_text(row: dict) -> str:
    return "\t".join(str(row[k]) for k in
                     ("step", "stage", "loss", "loss_ref", "grad_norm", "skipped", "gates"))


def train_stage(stage: StageSpec, params: ModelParams, data_stream, geo: CodecGeometry,
                rng: np.random.Generator, optimizer: AdamW | None = None,
                log_file=None) -> tuple[ModelParams, list]:
    """Run one stage's optimization loop; returns the params and metric rows.

    The reference-specialist stage requires audio modules to be absent so
    its architecture matches a plain conditioned model; audio stages
    require them present.  Batches are gradient accumulation over
    consecutive stream draws; a step whose accumulated gradient norm
    exceeds the spike guard is skipped (moments untouched) and logged.
    """
    stage.validate(allow_standalone=True)
    if stage.name == "MERGE":
        raise ConfigError("MERGE is not a training stage")
    task = stage.task_kind
    uses_audio = task_uses_audio(task)
    if stage.name == "R2V" and params.has_audio:
        raise ConfigError("reference-specialist stage must run without audio modules")
    if uses_audio and not params.has_audio:
        raise ConfigError(f"stage {stage.name} needs audio modules in the parameter set")

    cfg = params.config
    opt = optimizer or AdamW(lr=stage.lr, weight_decay=stage.weight_decay)
    rows = []
    for step in range(stage.steps):
        params.zero_grads()
        loss_sum = 0.0
        ref_sum = 0.0
        # timesteps are stratified across the batch: each draw is uniform
        # within its own bin, so marginally t stays U(0,1) but every
        # accumulation window covers [0,1] evenly.  the flow loss varies a
        # lot with t (high-t draws dominate a uniform batch), so this cuts
        # gradient variance without changing what any single sample sees.
        for b in range(stage.batch_size):
            sample = next(data_stream)
            spec = synthdata.sample_to_spec(sample, task, geo, rng=rng,
                                            pose_dropout=stage.pose_dropout)
            n_rows = (spec.n_pseudo_frames * geo.tokens_per_frame
                      + geo.n_video_tokens)
            t = (b + float(rng.uniform())) / stage.batch_size
            noise = rng.standard_normal((n_rows, geo.token_dim))
            seq, targets = assemble(encode(sample.clip, geo), spec, t, noise, geo)
            ctx = _audio_context_for(sample, spec, cfg, geo) if uses_audio else None
            v = model_mod.forward(seq, TextTokens(sample.text_ids), ctx, t, params, geo)
            fl, fr, tot = flow_loss(v, targets, geo)
            numcore.backward(tot)
            loss_sum += fl.item()
            ref_sum += fr.item()

        names = params.names()
        grads = {}
        sq = 0.0
        for name in names:
            g = params.tensors[name].grad
            g = np.zeros_like(params.tensors[name].data) if g is None else g / stage.batch_size
            grads[name] = g
            sq += float((g * g).sum())
        gnorm = math.sqrt(sq)
        if not math.isfinite(gnorm):
            raise NumericError(f"non-finite gradient norm at step {step} of {stage.name}")
        skipped = gnorm > GRAD_SPIKE_NORM
        if not skipped:
            opt.step(params.tensors, grads)
        params.zero_grads()

        row = {"step": step, "stage": stage.name,
               "loss": loss_sum / stage.batch_size,
               "loss_ref": ref_sum / stage.batch_size,
               "grad_norm": gnorm, "skipped": skipped,
               "gates": _format_gates(params)}
        rows.append(row)
        if log_file is not None:
            log_file.write(log_row_text(row) + "\n")
    return params, rows


def merge(r2v: Checkpoint, a2v: Checkpoint, alpha_a2v: float) -> Checkpoint:
    """Combine specialists: audio modules verbatim from the audio model,
    every base tensor interpolated alpha * a2v + (1 - alpha) * r2v.

    Optimizer moments reset; the stage cursor moves to the joint stage.
    """
    if not 0.0 <= alpha_a2v <= 1.0:
        raise ConfigError(f"merge alpha {alpha_a2v} outside [0, 1]")
    if r2v.params.config != a2v.params.config:
        raise ConfigError("merge requires identical model configs")
    if r2v.params.has_audio:
        raise ConfigError("reference specialist unexpectedly carries audio modules")
    if not a2v.params.has_audio:
        raise ConfigError("audio specialist carries no audio modules")
    base_r = set(r2v.params.names("base"))
    base_a = set(a2v.params.names("base"))
    if base_r != base_a:
        missing = base_r ^ base_a
        raise ConfigError(f"base tensor name sets differ: {sorted(missing)[:5]}")

    tensors: dict[str, Tensor] = {}
    for name in a2v.params.names():
        a = a2v.params.tensors[name].data
        if group_of(name) == model_mod.AUDIO_GROUP:
            tensors[name] = Tensor(a.copy(), requires_grad=True)
        else:
            r = r2v.params.tensors[name].data
            tensors[name] = Tensor(alpha_a2v * a + (1.0 - alpha_a2v) * r,
                                   requires_grad=True)
    return Checkpoint(params=ModelParams(tensors=tensors, config=a2v.params.config),
                      stage_cursor="RA2V")


def evaluate_checkpoint(params: ModelParams, samples: list, task_kind: str,
                        geo: CodecGeometry, sample_steps: int = 20,
                        seed: int = 0) -> DeskMetrics:
    """Generate one clip per sample and score against the sample labels."""
    clips = []
    pseudo = []
    for i, sample in enumerate(samples):
        spec = synthdata.sample_to_spec(sample, task_kind, geo)
        feats = None
        if task_uses_audio(task_kind):
            feats = audio_mod.interpolate_to_fps(sample.audio, geo.fps, geo.frames)
        out = model_mod.sample(spec, TextTokens(sample.text_ids), feats,
                               steps=sample_steps, seed=seed + i, params=params,
                               geo=geo, return_diagnostics=True)
        clips.append(out.clip)
        pseudo.append(out.pseudo_images)
    has_refs = any(p for p in pseudo)
    return synthdata.evaluate(clips, samples, task_kind,
                              pseudo_images=pseudo if has_refs else None, geo=geo)


@dataclass
class RunResult:
    checkpoint: Checkpoint
    logs: dict
    merge_eval: DeskMetrics | None = None
    merged_zero_shot: Checkpoint | None = None   # merged weights before joint training
    specialists: dict = field(default_factory=dict)
    stage_secs: dict = field(default_factory=dict)   # wall time per stage key


def run_plan(plan: StagePlan, seed: int, cfg: ModelConfig | None = None,
             geo: CodecGeometry | None = None, train_count: int = 192,
             eval_count: int = 8, sample_steps: int = 20,
             data_provider=None, log_file=None) -> RunResult:
    """Execute a stage plan end to end, deterministically in (plan, seed).

    Both specialists start from the same seeded base initialization (the
    desk-scale stand-in for a shared pretrained backbone).  Right after
    the merge, before any joint training, the merged model is evaluated
    zero-shot on the combined reference+audio task and the metrics logged;
    a copy of those weights is kept on the result.

    data_provider(task_kind, stage_index) may supply training samples,
    e.g. from files; by default each stage generates its own set.
    """
    plan.validate()
    cfg = (cfg or ModelConfig()).validate()
    geo = (geo or CodecGeometry()).validate()
    if data_provider is None:
        data_provider = lambda task, idx: synthdata.generate(
            seed + 1000 + idx, train_count, task, geo)

    specialists: dict[str, ModelParams] = {}
    merged: Checkpoint | None = None
    merged_zero_shot: Checkpoint | None = None
    last_trained: ModelParams | None = None
    logs: dict[str, list] = {}
    merge_eval: DeskMetrics | None = None
    stage_secs: dict[str, float] = {}

    for idx, stage in enumerate(plan.stages):
        key = f"{idx}:{stage.name}"
        t_start = time.monotonic()
        if stage.name == "MERGE":
            if "R2V" not in specialists or "A2V" not in specialists:
                raise ConfigError("MERGE reached without trained specialists")
            merged = merge(Checkpoint(params=specialists["R2V"]),
                           Checkpoint(params=specialists["A2V"]),
                           stage.alpha_a2v)
            merged_zero_shot = Checkpoint(params=merged.params.clone(),
                                          stage_cursor="RA2V")
            eval_samples = synthdata.generate(seed + 7000, eval_count, "RA2V", geo)
            merge_eval = evaluate_checkpoint(merged.params, eval_samples, "RA2V",
                                             geo, sample_steps, seed=seed + 500)
            logs[key] = [{"stage": "MERGE", "zero_shot_ra2v": str(merge_eval)}]
            if log_file is not None:
                log_file.write(f"-\tMERGE\tzero_shot\t{merge_eval}\n")
            last_trained = merged.params
            stage_secs[key] = time.monotonic() - t_start
            continue

        if stage.name in ("R2V", "A2V"):
            params = specialists.get(stage.name)
            if params is None:
                params = init_params(cfg, seed, include_audio=(stage.name == "A2V"))
                specialists[stage.name] = params
        else:
            if merged is None:
                raise ConfigError(f"{stage.name} reached without a merge")
            params = merged.params

        data = data_provider(stage.task_kind, idx)
        if stage.hq_subset:
            data = synthdata.high_contrast_subset(data)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 42, idx)))
        stream = make_stream(data, np.random.default_rng(np.random.SeedSequence((seed, 43, idx))))
        _, rows = train_stage(stage, params, stream, geo, rng, log_file=log_file)
        logs[key] = rows
        last_trained = params
        stage_secs[key] = time.monotonic() - t_start

    if last_trained is None:
        raise ConfigError("plan produced no parameters")
    final = merged if merged is not None else Checkpoint(params=last_trained)
    final.stage_cursor = plan.stages[-1].name if plan.stages else ""
    return RunResult(checkpoint=final, logs=logs, merge_eval=merge_eval,
                     merged_zero_shot=merged_zero_shot, specialists=specialists,
                     stage_secs=stage_secs)
