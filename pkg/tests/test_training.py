import json

import numpy as np
import pytest
import torch

from glyphsynth.checkpoint import load_checkpoint, model_checksum, save_checkpoint, tensor_checksum
from glyphsynth.data_pipeline import SynthConfig, synthesize_corpus
from glyphsynth.denoiser import BaseDenoiser, GlyphDenoiser
from glyphsynth.errors import DivergenceError, PartitionError, PrerequisiteError
from glyphsynth.training import (
    MaskPredictor,
    MaskTrainConfig,
    TrainConfig,
    apply_partition,
    classify,
    fit,
    glyph_loss,
    make_optimizer,
    partition_params,
    prepare_training_data,
    train_mask_predictor,
    train_step,
)

SYNTH = SynthConfig(canvas=(16, 16), max_len=2, empty_fraction=0.2)


@pytest.fixture
def setup(tiny_models, atlas):
    _, glyph = tiny_models
    apply_partition(glyph, partition_params(glyph))
    data = prepare_training_data(synthesize_corpus(24, 0, atlas, SYNTH), glyph)
    return glyph, data


def test_partition_law(tiny_models):
    _, glyph = tiny_models
    part = partition_params(glyph)
    names = {n for n, _ in glyph.named_parameters()}
    assert part.trainable | part.frozen == names and not part.trainable & part.frozen
    for n in names:
        if n.startswith("unet.") and ".to_q." in n:
            assert n in part.frozen
        if "conv_in" in n or n.startswith("fusion."):
            assert n in part.trainable
    expect = {n for n in names if n.startswith("fusion.") or "conv_in" in n
              or ".cross.to_k." in n or ".cross.to_v." in n}
    assert part.trainable == expect


def test_partition_rejects_unknown_names():
    with pytest.raises(PartitionError):
        classify("adapter.weight")
    assert classify("unet.mid_attn.cross.to_k.weight") == (True, "attn_k")
    assert classify("unet.mid_attn.self_attn.to_k.weight") == (False, "backbone")


def test_frozen_tensors_unchanged_after_steps(setup, schedule):
    glyph, data = setup
    part = partition_params(glyph)
    before = {n: p.detach().clone() for n, p in glyph.named_parameters()}
    fit(glyph, data, schedule, TrainConfig(steps=10, batch_size=8))
    for n, p in glyph.named_parameters():
        if n in part.frozen:
            assert torch.equal(p, before[n]), n
    assert any(not torch.equal(p, before[n]) for n, p in glyph.named_parameters() if n in part.trainable)


def test_every_trainable_tensor_gets_gradient_by_second_step(setup, schedule):
    glyph, data = setup
    cfg = TrainConfig(batch_size=8)
    opt = make_optimizer(glyph, cfg.learning_rate)
    gen = torch.Generator().manual_seed(0)
    texted = torch.tensor([i for i, t in enumerate(data.texts) if t][:8])
    train_step(data.batch(texted), glyph, schedule, cfg, opt, gen)
    aux_grad = glyph.conv_in.weight.grad[:, 3:]
    assert aux_grad.abs().sum() > 0
    train_step(data.batch(texted), glyph, schedule, cfg, opt, gen)
    for n, p in glyph.named_parameters():
        if p.requires_grad:
            assert p.grad is not None and p.grad.abs().sum() > 0, n


def test_loss_reproducible(tiny_cfg, atlas, schedule):
    losses = []
    for _ in range(2):
        g = GlyphDenoiser.from_base(BaseDenoiser(tiny_cfg))
        apply_partition(g, partition_params(g))
        data = prepare_training_data(synthesize_corpus(16, 1, atlas, SYNTH), g)
        rows = fit(g, data, schedule, TrainConfig(steps=3, batch_size=4, seed=5))
        losses.append([r["loss"] for r in rows])
    assert losses[0] == losses[1]


def test_resume_matches_uninterrupted(tiny_cfg, atlas, schedule, tmp_path):
    def fresh():
        g = GlyphDenoiser.from_base(BaseDenoiser(tiny_cfg))
        apply_partition(g, partition_params(g))
        return g

    samples = synthesize_corpus(16, 2, atlas, SYNTH)
    cfg = TrainConfig(steps=6, batch_size=4, checkpoint_every=3)
    g1 = fresh()
    full = fit(g1, prepare_training_data(samples, g1), schedule, cfg)
    g2 = fresh()
    data = prepare_training_data(samples, g2)
    first = fit(g2, data, schedule, cfg, checkpoint_dir=tmp_path, stop_after=3, log_path=tmp_path / "log.jsonl")
    g3 = fresh()
    rest = fit(g3, data, schedule, cfg, resume_from=tmp_path / "step000003", log_path=tmp_path / "log.jsonl")
    assert [r["loss"] for r in first + rest] == [r["loss"] for r in full]
    assert model_checksum(g3) == model_checksum(g1)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(1, 7))


def test_divergence_reports_last_good(setup, schedule, tmp_path):
    glyph, data = setup
    calls = {"n": 0}

    def flaky(batch, model, sched, alpha, gen):
        calls["n"] += 1
        loss, text = glyph_loss(batch, model, sched, alpha, gen)
        return (loss * float("nan"), text) if calls["n"] == 5 else (loss, text)

    with pytest.raises(DivergenceError) as exc:
        fit(glyph, data, schedule, TrainConfig(steps=8, batch_size=4, checkpoint_every=2), flaky,
            checkpoint_dir=tmp_path)
    assert exc.value.step == 4
    assert exc.value.last_good.endswith("step000004")
    assert load_checkpoint(exc.value.last_good) is not None


def test_mask_changes_prediction_after_training(setup, schedule):
    glyph, data = setup
    fit(glyph, data, schedule, TrainConfig(steps=100, batch_size=8))
    z = torch.randn(1, 3, 16, 16)
    e_t = glyph.encode_prompts(["a sign"])
    cond = glyph.condition(glyph.encode_glyphs(torch.ones(1, 1, 16, 16)), e_t)
    gl = torch.ones(1, 1, 16, 16)
    m0 = torch.ones(1, 1, 16, 16)
    m1 = m0.clone()
    m1[..., 5:11, 3:13] = 0
    with torch.no_grad():
        assert not torch.allclose(glyph(z, 10, cond, gl, m0), glyph(z, 10, cond, gl, m1))


def test_mask_predictor_requires_trained_model(setup, schedule):
    glyph, data = setup
    with pytest.raises(PrerequisiteError):
        train_mask_predictor(data, glyph, schedule, 35)


def test_mask_predictor_range_and_training(setup, schedule):
    glyph, data = setup
    glyph.trained = True
    mp = train_mask_predictor(data, glyph, schedule, 45, MaskTrainConfig(steps=20, batch_size=4))
    out = mp(torch.randn(3, mp.in_dim, 16, 16) * 10)
    assert out.shape == (3, 1, 16, 16) and out.min() >= 0 and out.max() <= 1


def test_checkpoint_roundtrip(setup, tmp_path):
    glyph, _ = setup
    glyph.trained = True
    save_checkpoint(glyph, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert isinstance(back, GlyphDenoiser) and back.trained
    assert model_checksum(back) == model_checksum(glyph)
    assert partition_params(back).trainable == {n for n, p in back.named_parameters() if p.requires_grad}
    manifest = json.loads((tmp_path / "ck" / "partition.json").read_text())
    assert set(manifest["trainable"]) == partition_params(glyph).trainable
    arrays = np.load(tmp_path / "ck" / "weights.npz")
    assert all(k.split(".", 1)[0] in ("trainable", "frozen") for k in arrays.files)
    mp = MaskPredictor(8, 16, 3)
    save_checkpoint(mp, tmp_path / "mp")
    assert tensor_checksum(dict(load_checkpoint(tmp_path / "mp").named_parameters())) == model_checksum(mp)
