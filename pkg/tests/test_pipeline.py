import json
import math

import pytest
import torch

from ncfl.core import VideoClip
from ncfl.bench.experiments import direction_cost
from ncfl.data import synthesize_awgn, synthetic_clips
from ncfl.flow import MConv, MVRefiner
from ncfl.pipeline import (NCFLNet, NonFiniteLoss, RecurrentState, build_model, cosine_lr, load_model, run_clip,
                           save_model, step, total_loss, train_two_stage)
from ncfl.refine import Compressor, NConv

from conftest import tiny_config


@pytest.fixture(scope="module")
def pairs():
    return [synthesize_awgn(c, 25, i) for i, c in enumerate(synthetic_clips(3, 4, 32, seed=0))]


def _randomize_heads(model):
    # zero-initialized heads make every variant an identity map; perturb them so tests see real outputs
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "image_head" in name or "flow.nets" in name or "attention.tail" in name:
                p.copy_(torch.randn(p.shape, generator=g) * 0.05)
    return model


def test_first_step_is_single_image_restoration():
    model = _randomize_heads(build_model(tiny_config()))
    x = torch.rand(1, 3, 16, 16)
    y, ce, state = step(RecurrentState(), x, model)
    zeros = torch.zeros(1, 8, 16, 16)
    c_tilde, ce_ref, _ = model.refiner(x, zeros)
    y_ref, c_ref = model.restorer(x, c_tilde)
    assert torch.equal(y, y_ref) and torch.equal(state.prev_features, c_ref)
    assert state.t == 1 and torch.equal(state.prev_frame, x)


@pytest.mark.parametrize("flags, mvr, attn, comp", [
    (dict(mvr=False, ncfl=False, fa=False), None, False, None),
    (dict(ncfl=False, fa=False), MVRefiner, False, None),
    (dict(fa=False), MVRefiner, False, Compressor),
    (dict(), MVRefiner, True, Compressor),
    (dict(conv_replacements=["mvr"]), MConv, True, Compressor),
    (dict(conv_replacements=["ncfl"]), MVRefiner, True, NConv),
])
def test_ablation_flags_build_modules(flags, mvr, attn, comp):
    m = NCFLNet(tiny_config(**flags))
    assert (m.mvr is None) if mvr is None else isinstance(m.mvr, mvr)
    assert (m.refiner.attention is not None) == attn
    assert (m.refiner.compressor is None) if comp is None else isinstance(m.refiner.compressor, comp)
    y, ces, _ = m(torch.rand(1, 2, 3, 16, 16))
    assert y.shape == (1, 2, 3, 16, 16) and len(ces) == 2


def test_single_frame_uni_equals_bi():
    model = _randomize_heads(build_model(tiny_config(direction="bi")))
    clip = VideoClip(torch.rand(1, 3, 20, 20))
    a, _ = run_clip(clip, model, "uni")
    b, _ = run_clip(clip, model, "bi")
    assert torch.equal(a.frames, b.frames)


def test_bi_uses_future_frames():
    model = _randomize_heads(build_model(tiny_config(direction="bi")))
    with torch.no_grad():
        for p in model.restorer.unet1.head.parameters():
            p.add_(0.1)
    frames = torch.rand(4, 3, 16, 16)
    changed = frames.clone()
    changed[3] = torch.rand(3, 16, 16)
    a, _ = run_clip(frames, model, "bi")
    b, _ = run_clip(changed, model, "bi")
    assert not torch.equal(a.frames[0], b.frames[0])
    with pytest.raises(ValueError):
        run_clip(frames, build_model(tiny_config()), "bi")


def test_causality_uni():
    model = _randomize_heads(build_model(tiny_config()))
    frames = torch.rand(5, 3, 16, 16)
    base, _ = run_clip(frames, model, "uni", evaluate=False)
    for t in range(4):
        pert = frames.clone()
        pert[t + 1] = torch.rand(3, 16, 16)
        out, _ = run_clip(pert, model, "uni", evaluate=False)
        assert torch.equal(out.frames[: t + 1], base.frames[: t + 1])
        assert not torch.equal(out.frames[t + 1], base.frames[t + 1])


def test_bi_cost_measured():
    model = build_model(tiny_config(direction="bi"))
    cost = direction_cost(model, torch.rand(4, 3, 32, 32), repeats=2)
    print(f"bi/uni per-frame time ratio: {cost['ratio']:.2f}")
    assert 1.2 < cost["ratio"] < 4.0


def test_odd_sizes_are_padded():
    model = build_model(tiny_config())
    out, ces = run_clip(torch.rand(2, 3, 13, 27), model)
    assert out.frames.shape == (2, 3, 13, 27) and len(ces) == 2


def test_total_loss_examples():
    y = torch.rand(1, 3, 3, 8, 8)
    assert float(total_loss(y, y, [torch.tensor(1.0)] * 3, 0.0)) == 0.0
    target = torch.zeros(3, 8, 8)
    out = torch.full((1, 3, 8, 8), 0.1)
    loss = total_loss(out, target[None], [2.0], 1 / 2048)
    assert float(loss) == pytest.approx(0.01 + 2 / 2048, abs=1e-8)
    assert float(loss) == pytest.approx(0.0109766, abs=1e-7)
    noisy = y + 0.1 * torch.randn_like(y)
    assert float(total_loss(noisy, y, [5.0] * 3, 0.0)) == pytest.approx(float(((noisy - y) ** 2).mean()), rel=1e-5)


def test_total_loss_errors():
    y = torch.rand(1, 3, 3, 8, 8)
    with pytest.raises(ValueError):
        total_loss(y, y, [0.0] * 2, 0.0)
    with pytest.raises(ValueError):
        total_loss(y, y[:, :2], [0.0] * 3, 0.0)


def test_cosine_lr():
    assert cosine_lr(2e-4, 1, 100) == 2e-4
    assert cosine_lr(2e-4, 51, 100) == pytest.approx(1e-4)
    assert cosine_lr(2e-4, 101, 100) == pytest.approx(0.0, abs=1e-20)


def test_training_stages_and_freeze(pairs, tmp_path):
    cfg = tiny_config(total_iters=6, stage1_iters=3, flow_freeze_iters=2)
    model = build_model(cfg)
    flow0 = {k: v.clone() for k, v in model.flow.state_dict().items()}
    seen = []

    def cb(rec):
        if rec["iter"] == 2:
            for k, v in model.flow.state_dict().items():
                assert torch.equal(v, flow0[k]), k
        seen.append(rec)

    res = train_two_stage(cfg, pairs, out_dir=tmp_path, callback=cb, model=model)
    assert [r["stage"] for r in seen] == [1, 1, 1, 2, 2, 2]
    assert [r["lr_flow"] == 0 for r in seen] == [True, True, False, False, False, False]
    assert all(r["loss"] == pytest.approx(r["l2"]) for r in seen if r["stage"] == 2)
    assert all(r["loss"] > r["l2"] for r in seen if r["stage"] == 1)
    assert any(not torch.equal(v, flow0[k]) for k, v in model.flow.state_dict().items())
    lines = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert lines == seen == res.records
    assert {"iter", "loss", "l2", "ce_bits", "lr_main", "lr_flow", "stage", "psnr"} <= set(lines[0])
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_deterministic_replay(pairs):
    cfg = tiny_config(total_iters=4)
    a = train_two_stage(cfg, pairs).records
    b = train_two_stage(cfg, pairs).records
    c = train_two_stage(cfg.replace(seed=1), pairs).records
    assert a == b and a != c


def test_max_iters_prefix_matches_full_run(pairs):
    cfg = tiny_config(total_iters=5)
    full = train_two_stage(cfg, pairs).records
    prefix = train_two_stage(cfg, pairs, max_iters=3).records
    assert prefix == full[:3]


def test_checkpoints_and_reload(pairs, tmp_path):
    cfg = tiny_config(total_iters=4, ckpt_interval=2)
    res = train_two_stage(cfg, pairs, out_dir=tmp_path)
    assert (tmp_path / "ckpt_000002").is_dir() and (tmp_path / "ckpt_000004").is_dir()
    model = load_model(res.checkpoint)
    x = torch.rand(3, 3, 16, 16)
    assert torch.equal(run_clip(x, model)[0].frames, run_clip(x, res.model)[0].frames)
    save_model(model, tmp_path / "copy")
    assert load_model(tmp_path / "copy").cfg == cfg


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_two_stage(tiny_config(), [])


def test_nonfinite_loss_aborts_with_dump(pairs, tmp_path):
    cfg = tiny_config(total_iters=3)
    model = build_model(cfg)
    with torch.no_grad():
        model.restorer.image_head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        train_two_stage(cfg, pairs, out_dir=tmp_path, model=model)
    dump = tmp_path / "nonfinite_000001"
    assert (dump / "clean.ncfl").exists() and (dump / "degraded.ncfl").exists()


def test_flow_pretraining_is_reused(pairs):
    cfg = tiny_config(total_iters=2, stage1_iters=1, flow_freeze_iters=1, flow_pretrain_iters=3)
    a = train_two_stage(cfg, pairs)
    b = train_two_stage(cfg.replace(ncfl=False), pairs)
    assert a.flow_pretrain == b.flow_pretrain and len(a.flow_pretrain) == 3
    fresh = build_model(cfg)
    assert a.records == train_two_stage(cfg, pairs, model=fresh).records
