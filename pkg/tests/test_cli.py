"""Command-line surface: config parsing, subcommands, artifacts, exit codes."""

import numpy as np
import pytest
import yaml

import picovid.cli as cli
import picovid.trainer as trainer
from picovid.cli import RESOLVED_CONFIG_NAME, RunConfig, main, read_dataset
from picovid.codec import CodecGeometry
from picovid.errors import NumericError, ShapeError
from picovid.model import ModelConfig, init_params
from picovid.synthdata import generate
from picovid.trainer import Checkpoint, load_checkpoint, save_checkpoint, write_container

GEO = CodecGeometry()
TINY_MODEL = {"hidden": 12, "n_dual": 1, "n_single": 0, "heads": 1}


def write_config(path, **over):
    doc = {"model": dict(TINY_MODEL), **over}
    path.write_text(yaml.safe_dump(doc))
    return str(path)


# -- shared artifacts (one tiny CLI training run, one dataset dir) ---------------


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    cfg = write_config(root / "cfg.yaml",
                       data={"train_count": 4, "families": ["R2V"]})
    out = root / "ds"
    assert main(["gen-data", "--config", cfg, "--seed", "11", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg = write_config(
        root / "cfg.yaml",
        data={"train_count": 3, "eval_count": 1,
              "families": ["R2V", "A2V", "RA2V"]},
        sample={"steps": 2},
        plan={"stages": [
            {"name": "R2V", "steps": 2, "batch_size": 1, "lr": 1e-3},
            {"name": "A2V", "steps": 2, "batch_size": 1, "lr": 1e-3},
            {"name": "MERGE", "alpha_a2v": 0.6},
            {"name": "RA2V", "steps": 1, "batch_size": 1, "lr": 1e-3},
        ]})
    out = root / "run"
    assert main(["train", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    return cfg, out


@pytest.fixture(scope="session")
def sampled_clips(tmp_path_factory, train_run, data_dir):
    _, run_dir = train_run
    root = tmp_path_factory.mktemp("cli_sample")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump({
        "task": "R2V", "dataset": str(data_dir / "R2V.ntc"),
        "index": 1, "count": 2, "steps": 2, "seed": 9}))
    out = root / "clips"
    assert main(["sample", "--ckpt", str(run_dir / "final.ckpt"),
                 "--spec", str(spec), "--out", str(out)]) == 0
    return spec, out


# -- run config -----------------------------------------------------------------


def test_default_config_is_a_fixed_point():
    cfg = RunConfig.from_dict({})
    assert RunConfig.from_dict(cfg.resolved).resolved == cfg.resolved
    assert cfg.train_count == 192 and cfg.eval_count == 16
    assert cfg.families == ["R2V", "A2V", "RA2V", "RAP2V"]


def test_config_rejects_unknown_keys(tmp_path):
    assert main(["gen-data", "--config",
                 write_config(tmp_path / "a.yaml", bogus=1),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--config",
                 write_config(tmp_path / "b.yaml", data={"bogus": 1}),
                 "--out", str(tmp_path / "o")]) == 2
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(
        {"plan": {"stages": [{"name": "R2V", "bogus": 1}]}}))
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_config_rejects_bad_sections(tmp_path, capsys):
    cases = [
        {"model": {"token_dim": 24}},            # disagrees with the codec
        {"data": {"families": ["R2V", "XX"]}},
        {"data": {"train_count": -1}},
        {"sample": {"steps": 0}},
        {"plan": {"stages": [{"name": "RA2V"}]}},  # joint stage without merge
        {"plan": {"stages": "R2V"}},
    ]
    for doc in cases:
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump(doc))
        assert main(["gen-data", "--config", str(p),
                     "--out", str(tmp_path / "o")]) == 2, doc
    assert "config error" in capsys.readouterr().err


def test_config_file_errors(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "missing.yaml"),
                 "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    lst = tmp_path / "list.yaml"
    lst.write_text("- 1\n- 2\n")
    assert main(["gen-data", "--config", str(lst), "--out", str(tmp_path / "o")]) == 2


def test_seed_override():
    assert RunConfig.load(None, 42).seed == 42
    assert RunConfig.load(None).seed == 0


# -- gen-data -------------------------------------------------------------------


def test_gen_data_artifacts(data_dir):
    assert (data_dir / RESOLVED_CONFIG_NAME).exists()
    samples, header = read_dataset(data_dir / "R2V.ntc")
    assert header["family"] == "R2V" and header["count"] == 4
    want = generate(11, 4, "R2V", GEO)
    for got, ref in zip(samples, want):
        assert np.array_equal(got.clip.frames, ref.clip.frames)
        assert np.array_equal(got.text_ids, ref.text_ids)


def test_gen_data_reruns_byte_identical(data_dir, tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml",
                       data={"train_count": 4, "families": ["R2V"]})
    out = tmp_path / "again"
    assert main(["gen-data", "--config", cfg, "--seed", "11",
                 "--out", str(out)]) == 0
    assert (out / "R2V.ntc").read_bytes() == (data_dir / "R2V.ntc").read_bytes()


def test_gen_data_output_dir_failure(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub"),
                 "--config", write_config(tmp_path / "c.yaml",
                                          data={"train_count": 0})]) == 3


# -- train ----------------------------------------------------------------------


def test_train_artifacts(train_run):
    _, out = train_run
    for name in (RESOLVED_CONFIG_NAME, "metrics.log", "summary.yaml",
                 "final.ckpt", "r2v.ckpt", "a2v.ckpt", "merged.ckpt"):
        assert (out / name).exists(), name

    lines = (out / "metrics.log").read_text().splitlines()
    assert lines[0].startswith("# picovid metrics  ")
    assert "rope_strategy=native" in lines[0] and "seed=3" in lines[0]
    assert all("\t" in row for row in lines[1:])

    summary = yaml.safe_load((out / "summary.yaml").read_text())
    assert [s["stage"] for s in summary["stages"]] == ["R2V", "A2V", "MERGE", "RA2V"]
    assert "zero_shot_ra2v" in summary

    final = load_checkpoint(out / "final.ckpt")
    assert final.stage_cursor == "RA2V" and final.params.has_audio
    assert not load_checkpoint(out / "r2v.ckpt").params.has_audio
    assert load_checkpoint(out / "a2v.ckpt").params.has_audio


def test_train_rerun_byte_identical(train_run, tmp_path):
    cfg, out = train_run
    out2 = tmp_path / "run2"
    assert main(["train", "--config", str(cfg), "--seed", "3",
                 "--out", str(out2)]) == 0
    assert (out2 / "final.ckpt").read_bytes() == (out / "final.ckpt").read_bytes()
    assert (out2 / "summary.yaml").read_text() == (out / "summary.yaml").read_text()


def test_train_resolved_config_reloads(train_run):
    _, out = train_run
    cfg = RunConfig.load(out / RESOLVED_CONFIG_NAME)
    assert cfg.model.hidden == TINY_MODEL["hidden"]
    assert [s.name for s in cfg.plan.stages] == ["R2V", "A2V", "MERGE", "RA2V"]


def test_train_stage_override_flags(tmp_path):
    cfg = write_config(tmp_path / "cfg.yaml",
                       plan={"stages": [{"name": "R2V", "steps": 5}]})
    assert main(["train", "--config", cfg, "--steps", "1",
                 "--out", str(tmp_path / "o")]) == 2     # --steps needs --stage
    assert main(["train", "--config", cfg, "--stage", "A2V", "--steps", "1",
                 "--out", str(tmp_path / "o")]) == 2     # no such stage


def test_train_from_dataset_dir(data_dir, tmp_path):
    cfg = write_config(
        tmp_path / "cfg.yaml",
        data={"train_count": 3, "eval_count": 1, "families": ["R2V"]},
        plan={"stages": [{"name": "R2V", "steps": 1, "batch_size": 1,
                          "lr": 1e-3}]})
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--data", str(data_dir),
                 "--out", str(out)]) == 0
    assert (out / "final.ckpt").exists()
    # same plan pointed at a directory missing the needed family
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--config", cfg, "--data", str(empty),
                 "--out", str(tmp_path / "run2")]) == 3


# -- merge ----------------------------------------------------------------------


def test_merge_cli_interpolates(tmp_path):
    small = ModelConfig(**TINY_MODEL)
    r2v = init_params(small, seed=1, include_audio=False)
    a2v = init_params(small, seed=2, include_audio=True)
    pr, pa = tmp_path / "r.ckpt", tmp_path / "a.ckpt"
    save_checkpoint(Checkpoint(params=r2v, stage_cursor="R2V"), pr)
    save_checkpoint(Checkpoint(params=a2v, stage_cursor="A2V"), pa)

    out = tmp_path / "m.ckpt"
    assert main(["merge", "--r2v", str(pr), "--a2v", str(pa),
                 "--alpha", "0.8", "--out", str(out)]) == 0
    merged = load_checkpoint(out)
    name = "embed.in.w"
    want = 0.8 * a2v.tensors[name].data + 0.2 * r2v.tensors[name].data
    np.testing.assert_allclose(merged.params.tensors[name].data, want)
    gate = "dual.0.audio.gate"
    assert np.array_equal(merged.params.tensors[gate].data,
                          a2v.tensors[gate].data)


def test_merge_cli_errors(tmp_path):
    small = ModelConfig(**TINY_MODEL)
    lean = tmp_path / "lean.ckpt"
    save_checkpoint(Checkpoint(params=init_params(small, seed=0,
                                                  include_audio=False),
                               stage_cursor="R2V"), lean)
    assert main(["merge", "--r2v", str(lean), "--a2v", str(lean),
                 "--alpha", "0.6", "--out", str(tmp_path / "m.ckpt")]) == 2
    assert main(["merge", "--r2v", str(tmp_path / "nope.ckpt"),
                 "--a2v", str(lean), "--alpha", "0.6",
                 "--out", str(tmp_path / "m.ckpt")]) == 3


# -- sample / eval --------------------------------------------------------------


def test_sample_artifacts(sampled_clips, data_dir):
    spec, out = sampled_clips
    assert sorted(p.name for p in out.glob("clip_*.ntc")) == [
        "clip_0001.ntc", "clip_0002.ntc"]
    resolved = yaml.safe_load((out / "sample_spec_resolved.yaml").read_text())
    assert resolved == {"task": "R2V", "dataset": str(data_dir / "R2V.ntc"),
                        "index": 1, "count": 2, "steps": 2, "seed": 9}
    header, tensors, _ = trainer.read_container(out / "clip_0001.ntc")
    assert header["kind"] == "clip" and header["task"] == "R2V"
    assert header["seed"] == 9 and header["index"] == 1
    assert tensors["frames"].shape == (GEO.frames, 3, GEO.height, GEO.width)
    # reference conditions ride along for later pseudo-image scoring
    assert "pseudo.0" in tensors and "pseudo.1" in tensors


def test_sample_rerun_byte_identical(sampled_clips, train_run, tmp_path):
    spec, out = sampled_clips
    _, run_dir = train_run
    out2 = tmp_path / "clips2"
    assert main(["sample", "--ckpt", str(run_dir / "final.ckpt"),
                 "--spec", str(spec), "--out", str(out2)]) == 0
    for name in ("clip_0001.ntc", "clip_0002.ntc"):
        assert (out2 / name).read_bytes() == (out / name).read_bytes()


def test_sample_seed_flag_overrides_spec(sampled_clips, train_run, tmp_path):
    spec, _ = sampled_clips
    _, run_dir = train_run
    out = tmp_path / "clips"
    assert main(["sample", "--ckpt", str(run_dir / "final.ckpt"),
                 "--spec", str(spec), "--seed", "77", "--out", str(out)]) == 0
    resolved = yaml.safe_load((out / "sample_spec_resolved.yaml").read_text())
    assert resolved["seed"] == 77


def test_sample_spec_errors(train_run, data_dir, tmp_path):
    _, run_dir = train_run
    ckpt = str(run_dir / "final.ckpt")
    ds = str(data_dir / "R2V.ntc")

    def rc(doc):
        p = tmp_path / "spec.yaml"
        p.write_text(yaml.safe_dump(doc))
        return main(["sample", "--ckpt", ckpt, "--spec", str(p),
                     "--out", str(tmp_path / "o")])

    assert rc({"dataset": ds, "bogus": 1}) == 2
    assert rc({"dataset": ds, "task": "X2V"}) == 2
    assert rc({"task": "R2V"}) == 2                       # no dataset
    assert rc({"dataset": ds, "index": 3, "count": 2}) == 2  # runs off the end
    assert rc([1, 2]) == 2
    assert rc({"dataset": str(tmp_path / "nope.ntc")}) == 3
    assert main(["sample", "--ckpt", str(tmp_path / "nope.ckpt"),
                 "--spec", str(tmp_path / "spec.yaml"),
                 "--out", str(tmp_path / "o")]) == 3


def test_eval_scores_clips(sampled_clips, data_dir, capsys):
    _, out = sampled_clips
    assert main(["eval", "--clips", str(out),
                 "--data", str(data_dir / "R2V.ntc")]) == 0
    printed = capsys.readouterr().out
    assert "task R2V, 2 clips" in printed
    assert "ref_err_human" in printed


def test_eval_errors(sampled_clips, data_dir, tmp_path):
    _, clips = sampled_clips
    ds = str(data_dir / "R2V.ntc")
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--clips", str(empty), "--data", ds]) == 3

    # a dataset container masquerading as a clip
    fake_dir = tmp_path / "fake"
    fake_dir.mkdir()
    write_container(fake_dir / "clip_0000.ntc", {}, tags={},
                    header={"kind": "dataset"})
    assert main(["eval", "--clips", str(fake_dir), "--data", ds]) == 3

    frames = generate(0, 1, "R2V", GEO)[0].clip.frames

    def fake_clip(dirname, **hdr):
        d = tmp_path / dirname
        d.mkdir(exist_ok=True)
        base = {"kind": "clip", "task": "R2V", "index": 0, "fps": GEO.fps}
        write_container(d / f"clip_{hdr.get('index', 0):04d}.ntc",
                        {"frames": frames}, tags={}, header={**base, **hdr})
        return d

    mixed = fake_clip("mixed", index=0)
    fake_clip("mixed", index=1, task="A2V")
    assert main(["eval", "--clips", str(mixed), "--data", ds]) == 2
    assert main(["eval", "--clips", str(fake_clip("oob", index=99)),
                 "--data", ds]) == 2


# -- gradcheck / gate-report ----------------------------------------------------


def test_gradcheck_reduced_battery(capsys):
    assert main(["gradcheck", "--reduced"]) == 0
    printed = capsys.readouterr().out
    assert "FAIL" not in printed
    for name in ("matmul", "softmax", "layernorm", "audio", "model"):
        assert f"{name}:" in printed.replace(" ", "")


def test_gate_report(train_run, capsys):
    _, out = train_run
    assert main(["gate-report", "--ckpt", str(out / "a2v.ckpt")]) == 0
    printed = capsys.readouterr().out
    assert "block 0: mean|g| = " in printed
    assert "ordering across blocks:" in printed
    assert main(["gate-report", "--ckpt", str(out / "r2v.ckpt")]) == 2


# -- exit-code mapping ----------------------------------------------------------


def test_exit_codes_for_shape_and_numeric(monkeypatch, tmp_path, capsys):
    def boom_shape(args):
        raise ShapeError("boom")

    def boom_numeric(args):
        raise NumericError("boom")

    monkeypatch.setattr(cli, "cmd_gate_report", boom_shape)
    assert main(["gate-report", "--ckpt", "x"]) == 4
    monkeypatch.setattr(cli, "cmd_gate_report", boom_numeric)
    assert main(["gate-report", "--ckpt", "x"]) == 5
    err = capsys.readouterr().err
    assert "shape error" in err and "numeric error" in err


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
