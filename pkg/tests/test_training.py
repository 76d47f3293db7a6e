import copy
import math

import numpy as np
import pytest
import torch

from architts.checkpoint import CheckpointError, load_into, load_model, read_checkpoint
from architts.codec import generate_corpus
from architts.training import (
    BatchError,
    Trainer,
    TrainConfig,
    TrainingError,
    apply_condition_dropout,
    clip_gradients,
    combine,
    compute_losses,
    ema_update,
    flow_losses,
    infill_mask,
    interpolate,
    lr_schedule,
    make_batch,
    make_optimizer,
    sample_timestep,
    train_step,
)
from architts.verify import check_dropout_rates, check_logit_normal, check_masks, tiny_batch, tiny_model


def test_interpolation_endpoints_and_velocity():
    g = torch.Generator().manual_seed(0)
    x0, x1 = torch.randn(2, 3, 4, generator=g), torch.randn(2, 3, 4, generator=g)
    xt, v = interpolate(x0, x1, 0.0)
    assert torch.equal(xt, x0) and torch.equal(v, x1 - x0)
    assert torch.equal(interpolate(x0, x1, 1.0)[0], x1)
    xt, _ = interpolate(x0, x1, torch.tensor([0.25, 0.5]))
    torch.testing.assert_close(xt[1], 0.5 * (x0[1] + x1[1]))
    with pytest.raises(ValueError):
        interpolate(x0, x1, 1.5)


def test_logit_normal_sampler_matches_distribution():
    assert check_logit_normal().passed
    t = sample_timestep(10000, 1).numpy()
    assert abs(np.median(t) - 0.5) < 0.02
    assert (t > 0).all() and (t < 1).all()


def test_dropout_rates():
    assert check_dropout_rates().passed
    flags = apply_condition_dropout(1000, 0, p_joint=0.0, p_all=0.0)
    assert not flags.any()


def test_infill_masks_contiguous_and_sized():
    assert check_masks().passed
    rng = np.random.default_rng(0)
    assert infill_mask(1, rng).tolist() == [True]
    for n in range(1, 40):
        m = infill_mask(n, rng)
        assert 0.7 * n - 1e-9 <= m.sum() <= n


def test_batch_layout(codec):
    utts = generate_corpus(codec.config, 4, (3, 6), 0, codec)
    batch = make_batch(utts, codec, 7, TrainConfig())
    assert batch.lengths == [u.frames for u in utts]
    assert batch.targets == [[t + 1 for t in u.tokens] for u in utts]
    assert not batch.x0[~batch.frame_mask].any()
    again = make_batch(utts, codec, 7, TrainConfig())
    assert torch.equal(batch.x0, again.x0) and torch.equal(batch.gen_mask, again.gen_mask)
    with pytest.raises(BatchError):
        make_batch([], codec, 0, TrainConfig())


def test_flow_loss_identities():
    g = torch.Generator().manual_seed(0)
    v = torch.randn(2, 5, 4, generator=g, dtype=torch.float64)
    mask = torch.ones(2, 5, dtype=torch.bool)
    cfm, d = flow_losses(v, v, mask)
    assert cfm.item() == 0.0 and abs(d.item()) < 1e-12
    cfm, d = flow_losses(2 * v, v, mask)
    assert abs(d.item()) < 1e-12
    torch.testing.assert_close(cfm, v.pow(2).sum(-1).mean())
    assert flow_losses(-v, v, mask)[1].item() == pytest.approx(2.0)
    with pytest.raises(BatchError):
        flow_losses(v, v, torch.zeros_like(mask))


def test_loss_only_counts_generated_frames():
    g = torch.Generator().manual_seed(1)
    v_hat = torch.randn(1, 4, 3, generator=g)
    pred = v_hat.clone()
    pred[0, :2] += 100.0
    mask = torch.tensor([[False, False, True, True]])
    assert flow_losses(pred, v_hat, mask)[0].item() == 0.0


def test_total_combines_terms():
    parts = [torch.tensor(x) for x in (1.5, 0.25, 3.0)]
    assert combine(*parts, eta=0.1).total.item() == pytest.approx(1.5 + 0.25 + 0.3)


def test_compute_losses_rejects_unmasked_item():
    model = tiny_model(0)
    _, batch = tiny_batch(0)
    batch.gen_mask[0] = False
    with pytest.raises(BatchError):
        compute_losses(model, batch)


def test_lr_schedule():
    assert lr_schedule(500, 1e-4, 1000, 20000) == pytest.approx(5e-5)
    assert lr_schedule(0, 1e-4, 1000, 20000) == 0.0
    assert lr_schedule(1000, 1e-4, 1000, 20000) == pytest.approx(1e-4)
    assert lr_schedule(10500, 1e-4, 1000, 20000) == pytest.approx(5e-5)
    assert lr_schedule(20000, 1e-4, 1000, 20000) == 0.0
    assert lr_schedule(5, 1e-3, 0, 10) == pytest.approx(5e-4)


def test_gradient_clipping_to_unit_norm():
    p = torch.nn.Parameter(torch.zeros(4))
    p.grad = torch.tensor([6.0, 8.0, 0.0, 0.0])
    assert clip_gradients([p], 1.0) == pytest.approx(10.0)
    assert p.grad.norm().item() == pytest.approx(1.0)
    p.grad = torch.tensor([0.3, 0.4, 0.0, 0.0])
    clip_gradients([p], 1.0)
    torch.testing.assert_close(p.grad, torch.tensor([0.3, 0.4, 0.0, 0.0]))


def test_ema_update():
    a, b = torch.nn.Linear(2, 2), torch.nn.Linear(2, 2)
    with torch.no_grad():
        for p in a.parameters():
            p.zero_()
        for p in b.parameters():
            p.fill_(1.0)
    ema_update(a, b, 0.999)
    for p in a.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.001))


def test_zero_gradient_leaves_weights_unchanged():
    model = tiny_model(0, torch.float32)
    opt = make_optimizer(model, TrainConfig(weight_decay=0.0))
    before = [p.detach().clone() for p in model.parameters()]
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert all(torch.equal(a, p) for a, p in zip(before, model.parameters()))


def test_train_step_reduces_loss_on_fixed_batch():
    model = tiny_model(0, torch.float32)
    ema = copy.deepcopy(model)
    codec, _ = tiny_batch(0)
    utts = generate_corpus(codec.config, 4, (3, 4), 0, codec)
    cfg = TrainConfig(steps=40, warmup_steps=1, peak_lr=3e-3, p_joint=0, p_all=0, weight_decay=0)
    opt = make_optimizer(model, cfg)
    batch = make_batch(utts, codec, 0, cfg)
    first = compute_losses(model, batch).total.item()
    for step in range(1, 31):
        res = train_step(model, ema, batch, opt, step, cfg)
    assert res.losses.total.item() < 0.7 * first


def test_non_finite_loss_aborts_with_seed():
    model = tiny_model(0, torch.float32)
    codec, _ = tiny_batch(0)
    utts = generate_corpus(codec.config, 2, (3, 4), 0, codec)
    cfg = TrainConfig(steps=2)
    batch = make_batch(utts, codec, 123, cfg)
    batch.x1[0, 0, 0] = float("nan")
    with pytest.raises(TrainingError, match="batch seed 123"):
        train_step(model, copy.deepcopy(model), batch, make_optimizer(model, cfg), 1, cfg)


def _trainer(steps=6):
    model = tiny_model(0, torch.float32)
    codec, _ = tiny_batch(0)
    cfg = TrainConfig(steps=steps, batch_size=4, warmup_steps=2, peak_lr=1e-3, log_every=1, checkpoint_every=3)
    return Trainer(model, cfg, codec), generate_corpus(codec.config, 12, (2, 4), 0, codec)


def _strip(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


def test_training_is_deterministic(tmp_path):
    a, train = _trainer()
    b, _ = _trainer()
    ra, rb = a.fit(train, tmp_path / "a"), b.fit(train, tmp_path / "b")
    assert _strip(ra) == _strip(rb)
    assert all(torch.equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))


def test_resume_matches_uninterrupted_run(tmp_path):
    full, train = _trainer()
    full.fit(train, tmp_path / "full")
    part, _ = _trainer()
    part.fit(train, tmp_path / "part", until=3)
    resumed, _ = _trainer()
    header = load_into(resumed, tmp_path / "part" / "latest.ckpt")
    assert header["step"] == 3 and not header["final"]
    resumed.fit(train, tmp_path / "part")
    for mod in ("model", "ema"):
        for p, q in zip(getattr(full, mod).parameters(), getattr(resumed, mod).parameters()):
            assert torch.equal(p, q)
    assert read_checkpoint(tmp_path / "part" / "latest.ckpt")[0]["final"]


def test_checkpoint_round_trip(tmp_path):
    trainer, train = _trainer(steps=2)
    trainer.fit(train, tmp_path)
    header, tensors = read_checkpoint(tmp_path / "latest.ckpt")
    assert header["step"] == 2 and header["version"] == 1
    assert {"model", "ema", "opt"} == {name.split("/")[0] for name in tensors}
    model, _ = load_model(tmp_path / "latest.ckpt")
    for p, q in zip(model.parameters(), trainer.ema.parameters()):
        assert torch.equal(p, q)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"grad_norm"' in lines[0]


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")


def test_pipeline_gradients_match_finite_differences():
    from architts.verify import pipeline_gradient_errors

    errors = pipeline_gradient_errors(0)
    assert all(math.isfinite(e) and e < 1e-3 for e in errors.values()), errors
