"""Command-line surface: data generation, staged training, merging,
sampling, evaluation, gradient checks, and gate telemetry.

The run config is a strict YAML document. Unknown keys are rejected at
every level, and the fully resolved document is echoed into each output
directory so ablation flags (rope_strategy, audio_window, placement,
merge alpha) stay auditable per run.

Exit codes: 0 ok, 2 config, 3 io, 4 shape, 5 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import yaml

from . import audio as audio_mod
from . import model as model_mod
from . import numcore, synthdata, trainer
from .codec import CodecGeometry, encode
from .condition import TASK_KINDS, assemble, loss as flow_loss, task_uses_audio
from .errors import ConfigError, IOFailure, NumericError, ShapeError
from .model import ModelConfig, TextTokens, init_params
from .numcore import Tensor

RESOLVED_CONFIG_NAME = "config_resolved.yaml"
_STAGE_FIELDS = {f.name for f in dataclasses.fields(trainer.StageSpec)}
_SAMPLE_SPEC_KEYS = {"task", "dataset", "index", "count", "steps", "seed"}


# -- run config ---------------------------------------------------------------


def default_config() -> dict:
    """Fully populated config document; user files override these keys."""
    return {
        "seed": 0,
        "model": asdict(ModelConfig()),
        "geometry": asdict(CodecGeometry()),
        "data": {
            "train_count": 192,
            "eval_count": 16,
            "families": ["R2V", "A2V", "RA2V", "RAP2V"],
        },
        "sample": {"steps": 20},
        "plan": {"stages": [asdict(s) for s in trainer.default_plan().stages]},
    }


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        cur = base[key]
        if isinstance(cur, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} expects a mapping")
            out[key] = _merge_strict(cur, val, where)
        else:
            out[key] = val
    return out


def _parse_stages(raw) -> list:
    if not isinstance(raw, list):
        raise ConfigError("plan.stages must be a list of stage mappings")
    stages = []
    for i, s in enumerate(raw):
        if not isinstance(s, dict):
            raise ConfigError(f"plan.stages[{i}] must be a mapping")
        unknown = set(s) - _STAGE_FIELDS
        if unknown:
            raise ConfigError(f"plan.stages[{i}]: unknown keys {sorted(unknown)}")
        if "name" not in s:
            raise ConfigError(f"plan.stages[{i}]: missing 'name'")
        stages.append(trainer.StageSpec(**s))
    return stages


@dataclass
class RunConfig:
    """Parsed, validated run configuration plus its resolved document."""

    seed: int
    model: ModelConfig
    geometry: CodecGeometry
    plan: trainer.StagePlan
    train_count: int
    eval_count: int
    families: list
    sample_steps: int
    resolved: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        resolved = _merge_strict(default_config(), doc)
        try:
            model = ModelConfig(**resolved["model"]).validate()
            geometry = CodecGeometry(**resolved["geometry"]).validate()
        except TypeError as e:
            raise ConfigError(f"bad model/geometry section: {e}") from e
        if model.token_dim != geometry.token_dim:
            raise ConfigError(
                f"model.token_dim {model.token_dim} != geometry token dim "
                f"{geometry.token_dim}")
        plan = trainer.StagePlan(_parse_stages(resolved["plan"]["stages"])).validate()
        data = resolved["data"]
        if not isinstance(data["families"], list) or not all(
                f in TASK_KINDS for f in data["families"]):
            raise ConfigError(f"data.families entries must be in {TASK_KINDS}")
        if int(data["train_count"]) < 0 or int(data["eval_count"]) < 0:
            raise ConfigError("data counts must be >= 0")
        if int(resolved["sample"]["steps"]) < 1:
            raise ConfigError("sample.steps must be >= 1")
        return cls(seed=int(resolved["seed"]), model=model, geometry=geometry,
                   plan=plan, train_count=int(data["train_count"]),
                   eval_count=int(data["eval_count"]),
                   families=list(data["families"]),
                   sample_steps=int(resolved["sample"]["steps"]),
                   resolved=resolved)

    @classmethod
    def load(cls, path: str | None, seed_override: int | None = None) -> "RunConfig":
        doc: dict = {}
        if path is not None:
            doc = _read_yaml(path)
            if doc is None:
                doc = {}
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: config must be a mapping")
        if seed_override is not None:
            doc = dict(doc)
            doc["seed"] = int(seed_override)
        return cls.from_dict(doc)

    def echo(self, out_dir: Path) -> None:
        try:
            (out_dir / RESOLVED_CONFIG_NAME).write_text(
                yaml.safe_dump(self.resolved, sort_keys=True))
        except OSError as e:
            raise IOFailure(f"cannot write resolved config: {e}") from e

    def label(self) -> str:
        m = self.model
        return (f"rope_strategy={m.rope_strategy} audio_window={m.audio_window} "
                f"audio_placement={m.audio_placement} seed={self.seed}")


def _read_yaml(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e


def _ensure_dir(path_str: str) -> Path:
    out = Path(path_str)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create output directory {out}: {e}") from e
    return out


# -- datasets on disk ---------------------------------------------------------


def write_dataset(path, samples: list, family: str, seed: int) -> None:
    tensors, manifest = synthdata.samples_to_tensors(samples)
    header = {"kind": "dataset", "family": family, "seed": seed,
              "count": len(samples), "manifest": manifest}
    trainer.write_container(path, tensors, tags={}, header=header)


def read_dataset(path) -> tuple[list, dict]:
    header, tensors, _ = trainer.read_container(path)
    if header.get("kind") != "dataset":
        raise IOFailure(f"{path}: not a dataset container")
    return synthdata.tensors_to_samples(tensors, header["manifest"]), header


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = _ensure_dir(args.out)
    cfg.echo(out)
    for family in cfg.families:
        samples = []
        if cfg.train_count > 0:
            samples = synthdata.generate(cfg.seed, cfg.train_count, family,
                                         cfg.geometry)
        path = out / f"{family}.ntc"
        write_dataset(path, samples, family, cfg.seed)
        print(f"{family}: {len(samples)} samples -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    plan = cfg.plan
    if args.stage is not None:
        matched = [s for s in plan.stages if s.name == args.stage]
        if not matched:
            raise ConfigError(f"--stage {args.stage}: no such stage in the plan")
        for s in matched:
            if args.steps is not None:
                s.steps = int(args.steps)
            if args.alpha is not None and s.name == "MERGE":
                s.alpha_a2v = float(args.alpha)
    elif args.steps is not None or args.alpha is not None:
        raise ConfigError("--steps/--alpha require --stage")
    plan.validate()

    out = _ensure_dir(args.out)
    cfg.echo(out)

    provider = None
    if args.data is not None:
        data_dir = Path(args.data)
        cache: dict[str, list] = {}

        def provider(task, idx, _dir=data_dir, _cache=cache):
            if task not in _cache:
                path = _dir / f"{task}.ntc"
                if not path.exists():
                    raise IOFailure(f"no dataset for task {task}: {path}")
                _cache[task], _ = read_dataset(path)
            return _cache[task]

    with open(out / "metrics.log", "w") as log_file:
        log_file.write(f"# picovid metrics  {cfg.label()}\n")
        result = trainer.run_plan(
            plan, cfg.seed, cfg.model, cfg.geometry,
            train_count=cfg.train_count, eval_count=cfg.eval_count,
            sample_steps=cfg.sample_steps, data_provider=provider,
            log_file=log_file)

    trainer.save_checkpoint(result.checkpoint, out / "final.ckpt")
    for name, params in result.specialists.items():
        trainer.save_checkpoint(trainer.Checkpoint(params=params, stage_cursor=name),
                                out / f"{name.lower()}.ckpt")
    if result.merged_zero_shot is not None:
        trainer.save_checkpoint(result.merged_zero_shot, out / "merged.ckpt")

    summary = {"label": cfg.label(), "stages": []}
    for key in sorted(result.logs, key=lambda k: int(k.split(":")[0])):
        rows = result.logs[key]
        name = key.split(":", 1)[1]
        entry = {"stage": name, "steps": len(rows)}
        if rows and "loss" in rows[-1]:
            entry["first_loss"] = float(rows[0]["loss"])
            entry["final_loss"] = float(rows[-1]["loss"])
        summary["stages"].append(entry)
        print(f"{name}: {entry.get('steps', 0)} rows"
              + (f", loss {entry['first_loss']:.4f} -> {entry['final_loss']:.4f}"
                 if "final_loss" in entry else ""))
    if result.merge_eval is not None:
        summary["zero_shot_ra2v"] = str(result.merge_eval)
        print(f"zero-shot RA2V after merge: {result.merge_eval}")
    (out / "summary.yaml").write_text(yaml.safe_dump(summary, sort_keys=True))
    print(f"final checkpoint -> {out / 'final.ckpt'}")
    return 0


def cmd_merge(args) -> int:
    r2v = trainer.load_checkpoint(args.r2v)
    a2v = trainer.load_checkpoint(args.a2v)
    merged = trainer.merge(r2v, a2v, float(args.alpha))
    trainer.save_checkpoint(merged, args.out)
    print(f"merged (alpha_a2v={float(args.alpha)}) -> {args.out}")
    return 0


def cmd_sample(args) -> int:
    doc = _read_yaml(args.spec)
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.spec}: sample spec must be a mapping")
    unknown = set(doc) - _SAMPLE_SPEC_KEYS
    if unknown:
        raise ConfigError(f"{args.spec}: unknown keys {sorted(unknown)}")
    task = doc.get("task", "T2V")
    if task not in TASK_KINDS:
        raise ConfigError(f"{args.spec}: unknown task {task!r}")
    if "dataset" not in doc:
        raise ConfigError(f"{args.spec}: missing 'dataset' path")
    index = int(doc.get("index", 0))
    count = int(doc.get("count", 1))
    steps = int(doc.get("steps", 20))
    seed = int(doc.get("seed", 0)) if args.seed is None else int(args.seed)

    ckpt = trainer.load_checkpoint(args.ckpt)
    samples, _ = read_dataset(doc["dataset"])
    if index < 0 or index + count > len(samples):
        raise ConfigError(f"sample range [{index}, {index + count}) outside "
                          f"dataset of {len(samples)}")
    geo = CodecGeometry().validate()
    out = _ensure_dir(args.out)
    resolved = {"task": task, "dataset": str(doc["dataset"]), "index": index,
                "count": count, "steps": steps, "seed": seed}
    (out / "sample_spec_resolved.yaml").write_text(
        yaml.safe_dump(resolved, sort_keys=True))

    for k in range(count):
        s = samples[index + k]
        spec = synthdata.sample_to_spec(s, task, geo)
        feats = None
        if task_uses_audio(task):
            feats = audio_mod.interpolate_to_fps(s.audio, geo.fps, geo.frames)
        res = model_mod.sample(spec, TextTokens(s.text_ids), feats, steps=steps,
                               seed=seed + k, params=ckpt.params, geo=geo,
                               return_diagnostics=True)
        tensors = {"frames": res.clip.frames}
        for j, img in enumerate(res.pseudo_images):
            tensors[f"pseudo.{j}"] = img
        header = {"kind": "clip", "task": task, "dataset": str(doc["dataset"]),
                  "index": index + k, "steps": steps, "seed": seed + k,
                  "fps": geo.fps, "config": asdict(ckpt.params.config)}
        path = out / f"clip_{index + k:04d}.ntc"
        trainer.write_container(path, tensors, tags={}, header=header)
        print(f"clip {index + k} ({task}) -> {path}")
    return 0


def cmd_eval(args) -> int:
    clips_dir = Path(args.clips)
    paths = sorted(clips_dir.glob("clip_*.ntc"))
    if not paths:
        raise IOFailure(f"no clip containers under {clips_dir}")
    samples, _ = read_dataset(args.data)

    from .codec import Clip
    tasks = set()
    clips, subset, pseudo = [], [], []
    for p in paths:
        header, tensors, _ = trainer.read_container(p)
        if header.get("kind") != "clip":
            raise IOFailure(f"{p}: not a clip container")
        tasks.add(header["task"])
        idx = int(header["index"])
        if idx >= len(samples):
            raise ConfigError(f"{p}: sample index {idx} outside dataset")
        clips.append(Clip(frames=tensors["frames"], fps=float(header["fps"])))
        subset.append(samples[idx])
        imgs = [tensors[k] for k in sorted(tensors) if k.startswith("pseudo.")]
        pseudo.append(imgs)
    if len(tasks) != 1:
        raise ConfigError(f"clips mix task kinds: {sorted(tasks)}")
    task = tasks.pop()
    geo = CodecGeometry().validate()
    metrics = synthdata.evaluate(clips, subset, task,
                                 pseudo_images=pseudo if any(pseudo) else None,
                                 geo=geo)
    print(f"task {task}, {len(clips)} clips")
    print(metrics)
    return 0


def cmd_gate_report(args) -> int:
    ckpt = trainer.load_checkpoint(args.ckpt)
    if not ckpt.params.has_audio:
        raise ConfigError(f"{args.ckpt}: checkpoint has no audio modules")
    rows = audio_mod.gate_norm_report(ckpt.params.tensors)
    for i, v in rows:
        print(f"block {i}: mean|g| = {v:.6e}")
    values = [v for _, v in rows]
    trend = ("increasing" if all(b >= a for a, b in zip(values, values[1:]))
             else "decreasing" if all(b <= a for a, b in zip(values, values[1:]))
             else "non-monotonic")
    print(f"ordering across blocks: {trend} (logged, not asserted)")
    return 0


# -- gradcheck battery ---------------------------------------------------------


def _primitive_suites(rng: np.random.Generator) -> list[tuple[str, object]]:
    """(name, report) rows for every differentiable primitive."""
    def T(*shape, scale: float = 1.0) -> Tensor:
        return Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    a34, b34, c45 = T(3, 4), T(3, 4), T(4, 5)
    bm_a, bm_b = T(2, 3, 4), T(2, 4, 5)
    sm, si = T(3, 5), T(4, 6)
    ln_x, ln_g, ln_b = T(3, 8), T(8), T(8)
    rp = T(2, 6, 4)
    cos = np.cos(rng.standard_normal((6, 2)))
    sin = np.sin(rng.standard_normal((6, 2)))
    tbl = T(7, 5)
    ids = rng.integers(0, 7, size=9)
    cat_a, cat_b = T(2, 3), T(4, 3)
    gi = T(5, 4)

    suites = [
        ("arith", lambda: numcore.gradcheck(
            lambda x, y: ((x * y + x - 0.5 * y) / (y * y + 2.0)).sum(),
            [a34, b34])),
        ("pow_mean", lambda: numcore.gradcheck(
            lambda x: (x ** 3).mean() + (x ** 2).mean(axis=0).sum(), [a34])),
        ("matmul", lambda: numcore.gradcheck(
            lambda x, y: numcore.matmul(x, y).sum(), [a34, c45])),
        ("bmm", lambda: numcore.gradcheck(
            lambda x, y: (numcore.bmm(x, y) ** 2).sum(), [bm_a, bm_b])),
        ("softmax", lambda: numcore.gradcheck(
            lambda x: (numcore.softmax_lastdim(x) * np.arange(5.0)).sum(), [sm])),
        ("silu", lambda: numcore.gradcheck(
            lambda x: numcore.silu(x).sum(), [si])),
        ("layernorm", lambda: numcore.gradcheck(
            lambda x, g, b: (numcore.layernorm(x, g, b) ** 2).sum(),
            [ln_x, ln_g, ln_b])),
        ("rotate_pairs", lambda: numcore.gradcheck(
            lambda x: (numcore.rotate_pairs(x, cos, sin) ** 2).sum(), [rp])),
        ("take_rows", lambda: numcore.gradcheck(
            lambda x: (numcore.take_rows(x, ids) ** 2).sum(), [tbl])),
        ("cat_slice", lambda: numcore.gradcheck(
            lambda x, y: (numcore.cat([x, y], axis=0)[1:5] ** 2).sum(),
            [cat_a, cat_b])),
        ("reshape_transpose", lambda: numcore.gradcheck(
            lambda x: (x.reshape(4, 5).transpose(1, 0) ** 3).mean(), [gi])),
    ]
    return [(name, run()) for name, run in suites]


def _audio_suite(rng: np.random.Generator) -> object:
    hdim, feat, heads = 8, 4, 2
    frame_feats = rng.standard_normal((6, feat))
    ctx = audio_mod.pack_context(frame_feats, w=3, s=2, n_pseudo_frames=1,
                                 tokens_per_frame=2)
    n_tok = ctx.attn_mask.shape[0]
    h = Tensor(rng.standard_normal((n_tok, hdim)), requires_grad=True)
    gate = Tensor(rng.standard_normal(hdim) * 0.1, requires_grad=True)
    proj_w = Tensor(rng.standard_normal((feat, hdim)) * 0.3, requires_grad=True)
    proj_b = Tensor(rng.standard_normal(hdim) * 0.1, requires_grad=True)
    mats = {k: Tensor(rng.standard_normal((hdim, hdim)) * 0.3, requires_grad=True)
            for k in ("wq", "wk", "wv", "wo")}

    def f(h_, gate_, pw, pb, wq, wk, wv, wo):
        ap = audio_mod.AudioAttentionParams(proj_w=pw, proj_b=pb, wq=wq, wk=wk,
                                            wv=wv, wo=wo, n_heads=heads)
        return (audio_mod.gated_inject(h_, ctx, gate_, ap) ** 2).mean()

    return numcore.gradcheck(f, [h, gate, proj_w, proj_b,
                                 mats["wq"], mats["wk"], mats["wv"], mats["wo"]],
                             max_coords_per_input=6)


def _model_suite(cfg: ModelConfig, geo: CodecGeometry, tol: float,
                 coords_per_tensor: int, seed: int = 0) -> object:
    """End-to-end forward+loss gradcheck on parameters moved off exact init."""
    cfg.validate()
    geo.validate()
    params = init_params(cfg, seed=seed, include_audio=True)
    rng = np.random.default_rng(seed + 1)
    for t in params.trainable():
        t.data = t.data + 0.02 * rng.standard_normal(t.data.shape)

    sample = synthdata.generate(seed, 1, "RA2V", geo)[0]
    spec = synthdata.sample_to_spec(sample, "RA2V", geo)
    x1 = encode(sample.clip, geo)
    feats = audio_mod.interpolate_to_fps(sample.audio, geo.fps, geo.frames)
    text = TextTokens(sample.text_ids)
    t_val = 0.37
    n_rows = spec.n_pseudo_frames * geo.tokens_per_frame + geo.n_video_tokens
    noise = rng.standard_normal((n_rows, geo.token_dim))

    prefer = ["embed.in.w", "text.embed", "time.fc1.w",
              "dual.0.vid.attn.wq", "dual.0.txt.mlp.fc1.w",
              "dual.0.audio.gate", "audio.proj.w", "head.w"]
    chosen = [params.tensors[n] for n in prefer if n in params.tensors]

    def f(*_):
        seq, targets = assemble(x1, spec, t_val, noise, geo)
        ctx = model_mod.build_audio_context(feats, cfg, geo, spec.n_pseudo_frames)
        v = model_mod.forward(seq, text, ctx, t_val, params, geo)
        return flow_loss(v, targets, geo)[2]

    return numcore.gradcheck(f, chosen, tol=tol,
                             max_coords_per_input=coords_per_tensor, seed=seed)


def reduced_model_config() -> ModelConfig:
    """Smallest config whose rotary split still covers all three axes."""
    return ModelConfig(hidden=12, n_dual=1, n_single=0, heads=1).validate()


def run_gradcheck(cfg: ModelConfig, geo: CodecGeometry,
                  reduced: bool = False) -> list[tuple[str, object]]:
    rng = np.random.default_rng(7)
    rows = list(_primitive_suites(rng))
    rows.append(("audio", _audio_suite(rng)))
    model_cfg = reduced_model_config() if reduced else cfg
    coords = 4 if reduced else 8
    rows.append(("model", _model_suite(model_cfg, geo, tol=1e-3,
                                       coords_per_tensor=coords)))
    return rows


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    rows = run_gradcheck(cfg.model, cfg.geometry, reduced=args.reduced)
    failed = []
    for name, report in rows:
        state = "PASS" if report.passed else "FAIL"
        print(f"{name:>20s}: {state}  max rel err {report.max_rel_err:.3e} "
              f"(tol {report.tol:.1e}, {report.n_coords} coords)")
        if not report.passed:
            failed.append(name)
    if failed:
        raise NumericError(f"gradcheck failed for: {', '.join(failed)}")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="picovid",
        description="Desk-scale multimodal conditioned video generator.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write synthetic datasets per task family")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "run the staged training plan")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", default=None,
                   help="dataset directory from gen-data; default regenerates in memory")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", default=None, help="stage name for overrides")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None,
                   help="merge interpolation weight toward the audio specialist")

    p = add("merge", cmd_merge, "combine specialist checkpoints")
    p.add_argument("--r2v", required=True)
    p.add_argument("--a2v", required=True)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--out", required=True)

    p = add("sample", cmd_sample, "generate clips from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--spec", required=True, help="YAML: task/dataset/index/count/steps/seed")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "score generated clips against dataset labels")
    p.add_argument("--clips", required=True)
    p.add_argument("--data", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference checks per module")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reduced", action="store_true",
                   help="tiny model config for a fast full-model check")

    p = add("gate-report", cmd_gate_report, "per-block audio gate magnitudes")
    p.add_argument("--ckpt", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except ConfigError as e:
        print(f"picovid: config error: {e}", file=sys.stderr)
        return 2
    except IOFailure as e:
        print(f"picovid: io error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"picovid: io error: {e}", file=sys.stderr)
        return 3
    except ShapeError as e:
        print(f"picovid: shape error: {e}", file=sys.stderr)
        return 4
    except NumericError as e:
        print(f"picovid: numeric error: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
