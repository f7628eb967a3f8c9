"""Condition assembly: per-task layouts, the shared noising path, and the
two-part training loss."""

import numpy as np
import pytest

from picovid.codec import CodecGeometry, Clip, LatentGrid, encode, encode_image
from picovid.condition import (ConditionSpec, FlowTargets, assemble,
                               build_condition_tensors, loss, split_outputs,
                               task_uses_audio, task_uses_pose,
                               unconditioned_fill)
from picovid.errors import ConfigError, ShapeError
from picovid.numcore import Tensor

GEO = CodecGeometry()
RNG = np.random.default_rng(0)


def latent_frame(rng=RNG):
    return encode_image(rng.random((3, 16, 16)), GEO)


def pose_grid(rng=RNG):
    return encode(Clip(frames=rng.random((16, 3, 16, 16))), GEO)


def spec_for(kind, rng=RNG):
    refs, pose, first = [], None, None
    if kind in ("R2V", "RA2V", "RP2V", "RAP2V"):
        refs = [latent_frame(rng), latent_frame(rng)]
    if task_uses_pose(kind):
        pose = pose_grid(rng)
    if kind in ("I2V", "A2V"):
        first = latent_frame(rng)
    return ConditionSpec(task_kind=kind, references=refs, pose=pose,
                         first_frame=first).validate(GEO)


def test_task_capability_flags():
    assert [k for k in ("T2V", "I2V", "R2V", "A2V", "RA2V", "RP2V", "RAP2V")
            if task_uses_audio(k)] == ["A2V", "RA2V", "RAP2V"]
    assert [k for k in ("T2V", "I2V", "R2V", "A2V", "RA2V", "RP2V", "RAP2V")
            if task_uses_pose(k)] == ["RP2V", "RAP2V"]


def test_spec_validation_required_and_forbidden():
    with pytest.raises(ConfigError):
        ConditionSpec(task_kind="R2V").validate(GEO)              # missing refs
    with pytest.raises(ConfigError):
        ConditionSpec(task_kind="T2V",
                      references=[latent_frame()]).validate(GEO)  # refs forbidden
    with pytest.raises(ConfigError):
        ConditionSpec(task_kind="A2V").validate(GEO)              # needs first frame
    with pytest.raises(ConfigError):
        ConditionSpec(task_kind="nope").validate(GEO)
    with pytest.raises(ShapeError):
        ConditionSpec(task_kind="R2V",
                      references=[np.zeros((3, 3, 48))]).validate(GEO)


def test_unconditioned_model_input_is_all_zero():
    cond, mask, ref_clean = build_condition_tensors(spec_for("T2V"), GEO)
    assert cond.shape == (256, 48)
    assert mask.shape == (256, 4)
    assert not cond.any()
    assert not mask.any()
    assert ref_clean.shape == (0, 48)


def test_first_frame_rows_flagged():
    cond, mask, _ = build_condition_tensors(spec_for("I2V"), GEO)
    tpf = GEO.tokens_per_frame
    assert mask[:tpf].all()
    assert not mask[tpf:].any()
    assert cond[:tpf].any()
    assert not cond[tpf:].any()


def test_reference_rows_come_first_and_are_flagged():
    spec = spec_for("R2V")
    cond, mask, ref_clean = build_condition_tensors(spec, GEO)
    tpf = GEO.tokens_per_frame
    n_pseudo = 2 * tpf
    assert cond.shape == (n_pseudo + 256, 48)
    np.testing.assert_array_equal(cond[:tpf], spec.references[0].reshape(tpf, 48))
    np.testing.assert_array_equal(cond[tpf:n_pseudo],
                                  spec.references[1].reshape(tpf, 48))
    np.testing.assert_array_equal(ref_clean, cond[:n_pseudo])
    assert mask[:n_pseudo].all()
    assert not mask[n_pseudo:].any()


def test_pose_fills_video_condition_rows():
    spec = spec_for("RP2V")
    cond, mask, _ = build_condition_tensors(spec, GEO)
    n_pseudo = 2 * GEO.tokens_per_frame
    np.testing.assert_array_equal(cond[n_pseudo:], spec.pose.flat())
    assert mask.all()   # refs and pose rows all carry the presence bit


def test_first_frame_overwrites_pose_rows_when_both_present():
    spec = spec_for("RAP2V")
    spec.first_frame = latent_frame()
    spec.validate(GEO)
    cond, _, _ = build_condition_tensors(spec, GEO)
    n_pseudo = 2 * GEO.tokens_per_frame
    tpf = GEO.tokens_per_frame
    np.testing.assert_array_equal(cond[n_pseudo:n_pseudo + tpf],
                                  spec.first_frame.reshape(tpf, 48))
    np.testing.assert_array_equal(cond[n_pseudo + tpf:], spec.pose.flat()[tpf:])


def test_mask_bit_replicated_across_channels():
    cond, mask, _ = build_condition_tensors(spec_for("R2V"), GEO)
    assert mask.shape[1] == 4
    np.testing.assert_array_equal(mask[:, 0], mask[:, 1])
    np.testing.assert_array_equal(mask[:, 0], mask[:, 3])


def test_model_input_channel_layout():
    rng = np.random.default_rng(5)
    x1 = pose_grid(rng)
    spec = spec_for("R2V", rng)
    n_rows = 2 * GEO.tokens_per_frame + 256
    noise = rng.standard_normal((n_rows, 48))
    seq, _ = assemble(x1, spec, 0.3, noise, GEO)
    mi = seq.model_input()
    assert mi.shape == (n_rows, 48 + 48 + 4)
    np.testing.assert_array_equal(mi[:, :48], seq.noisy)
    np.testing.assert_array_equal(mi[:, 48:96], seq.cond)
    np.testing.assert_array_equal(mi[:, 96:], seq.mask)


def test_assemble_follows_linear_path():
    rng = np.random.default_rng(6)
    x1 = pose_grid(rng)
    spec = spec_for("R2V", rng)
    n_pseudo = 2 * GEO.tokens_per_frame
    noise = rng.standard_normal((n_pseudo + 256, 48))
    for t in (0.0, 0.25, 1.0):
        seq, targets = assemble(x1, spec, t, noise, GEO)
        ref_clean = np.concatenate([r.reshape(-1, 48) for r in spec.references])
        np.testing.assert_allclose(
            seq.noisy[:n_pseudo], (1 - t) * noise[:n_pseudo] + t * ref_clean)
        np.testing.assert_allclose(
            seq.noisy[n_pseudo:], (1 - t) * noise[n_pseudo:] + t * x1.flat())
        np.testing.assert_allclose(targets.video, x1.flat() - noise[n_pseudo:])
        np.testing.assert_allclose(targets.pseudo, ref_clean - noise[:n_pseudo])
        assert targets.t == t


def test_references_and_video_share_the_timestep():
    """At t=1 the noisy rows equal the clean data for both parts."""
    rng = np.random.default_rng(7)
    x1 = pose_grid(rng)
    spec = spec_for("R2V", rng)
    n_pseudo = 2 * GEO.tokens_per_frame
    noise = rng.standard_normal((n_pseudo + 256, 48))
    seq, _ = assemble(x1, spec, 1.0, noise, GEO)
    ref_clean = np.concatenate([r.reshape(-1, 48) for r in spec.references])
    np.testing.assert_array_equal(seq.noisy[:n_pseudo], ref_clean)
    np.testing.assert_array_equal(seq.noisy[n_pseudo:], x1.flat())


def test_assemble_rejects_bad_t_and_noise():
    rng = np.random.default_rng(8)
    x1 = pose_grid(rng)
    spec = spec_for("T2V")
    with pytest.raises(ValueError):
        assemble(x1, spec, 1.5, rng.standard_normal((256, 48)), GEO)
    with pytest.raises(ShapeError):
        assemble(x1, spec, 0.5, rng.standard_normal((100, 48)), GEO)


def test_plain_task_assembly_matches_native_form():
    """Zero pseudo-frames: the assembled input is byte-identical to the
    plain conditioned path (noisy video, zero cond, zero mask)."""
    rng = np.random.default_rng(9)
    x1 = pose_grid(rng)
    noise = rng.standard_normal((256, 48))
    seq, targets = assemble(x1, spec_for("T2V"), 0.4, noise, GEO)
    assert seq.n_pseudo_frames == 0
    native = np.concatenate([0.6 * noise + 0.4 * x1.flat(),
                             np.zeros((256, 48)), np.zeros((256, 4))], axis=1)
    assert seq.model_input().tobytes() == native.tobytes()
    np.testing.assert_array_equal(targets.pseudo, np.zeros((0, 48)))


def test_split_outputs_boundary():
    v = Tensor(np.arange(10.0).reshape(5, 2))
    a, b = split_outputs(v, 1, 2)
    assert a.shape == (2, 2)
    assert b.shape == (3, 2)
    with pytest.raises(ShapeError):
        split_outputs(v, 3, 2)


def test_loss_hand_computed():
    geo = GEO
    n_pseudo, n_video = geo.tokens_per_frame, geo.n_video_tokens
    targets = FlowTargets(video=np.zeros((n_video, 48)),
                          pseudo=np.zeros((n_pseudo, 48)), t=0.5)
    v = np.zeros((n_pseudo + n_video, 48))
    v[:n_pseudo] = 2.0      # pseudo rows off by 2 -> ref term 4
    v[n_pseudo:] = 1.0      # video rows off by 1 -> flow term 1
    fl, fr, tot = loss(Tensor(v), targets, geo)
    assert fl.item() == 1.0
    assert fr.item() == 4.0
    assert tot.item() == 5.0   # reference term enters at weight 1


def test_loss_without_pseudo_rows():
    geo = GEO
    targets = FlowTargets(video=np.ones((geo.n_video_tokens, 48)),
                          pseudo=np.zeros((0, 48)), t=0.1)
    fl, fr, tot = loss(Tensor(np.zeros((geo.n_video_tokens, 48))), targets, geo)
    assert fl.item() == 1.0
    assert fr.item() == 0.0
    assert tot.item() == 1.0


def test_loss_shape_mismatch():
    targets = FlowTargets(video=np.zeros((256, 48)), pseudo=np.zeros((0, 48)), t=0.2)
    with pytest.raises(ShapeError):
        loss(Tensor(np.zeros((200, 48))), targets, GEO)


def test_unconditioned_fill_is_zero():
    fill = unconditioned_fill(10, 48)
    assert fill.shape == (10, 48)
    assert not fill.any()
