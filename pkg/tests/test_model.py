import pytest
import torch

from architts.aligner import AlignerConfig, AlignerError, SemanticAligner, quantize
from architts.decoder import DecoderError
from architts.encoder import NULL_PROMPT, NULL_SEMANTIC, NULL_SPEAKER, ConditionState, EncoderError
from architts.layers import DiTBlock, frame_positions
from architts.model import ArchiTTS, ModelConfig, parameter_count
from architts.training import TrainConfig, make_batch, train_step
from architts.verify import tiny_batch, tiny_model


def small_aligner(**kw):
    cfg = AlignerConfig(vocab_size=8, model_dim=16, head_count=2, convnext_blocks=1, transformer_blocks=2,
                        conv_kernel=3, **kw)
    torch.manual_seed(0)
    return SemanticAligner(cfg).double()


def test_aligner_output_shape_and_mask():
    al = small_aligner()
    tokens = torch.tensor([[1, 2, 3, 0], [4, 5, 0, 0]])
    mask = tokens > 0
    out = al(tokens, [7, 3], mask)
    assert out.z.shape == (2, 7, 16)
    assert out.frame_mask.tolist()[1] == [True] * 3 + [False] * 4
    assert out.input_length.tolist() == [3 + 7 + 2, 2 + 3 + 2]


def test_aligner_output_is_frame_slice_of_full_sequence():
    # one mask slot: z must depend on where the slot sits, i.e. on L
    al = small_aligner()
    out = al(torch.tensor([[1, 2]]), [1])
    assert out.z.shape == (1, 1, 16)


def test_aligner_padding_does_not_leak():
    al = small_aligner().eval()
    alone = al(torch.tensor([[1, 2, 3]]), [5]).z
    batched = al(torch.tensor([[1, 2, 3, 0, 0], [4, 5, 6, 7, 1]]), [5, 9],
                 torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)).z
    torch.testing.assert_close(batched[0, :5], alone[0], atol=1e-10, rtol=0)


def test_every_text_token_influences_every_frame():
    al = small_aligner()
    feats = al.embed_text(torch.tensor([[1, 2, 3, 4]])).detach().requires_grad_(True)
    z = al.align(feats, [6]).z
    # a plain feature sum is constant under the final LayerNorm, so project
    proj = torch.randn(16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    for j in range(6):
        (g,) = torch.autograd.grad(z[0, j] @ proj, feats, retain_graph=True)
        norms = g[0].norm(dim=-1)
        assert (norms >= 1e-8).all(), (j, norms)


def test_permuting_text_changes_alignment_after_training():
    model = tiny_model(0, torch.float32)
    codec, _ = tiny_batch(0)
    from architts.codec import generate_corpus
    utts = generate_corpus(codec.config, 8, (3, 5), 1, codec)
    cfg = TrainConfig(steps=20, warmup_steps=2, peak_lr=1e-3, p_joint=0, p_all=0)
    ema = tiny_model(0, torch.float32)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    for step in range(1, 21):
        train_step(model, ema, make_batch(utts, codec, step, cfg), opt, step, cfg)
    model.eval()
    with torch.no_grad():
        a = model.semantic(torch.tensor([[1, 2, 3, 4]]), [8]).z
        b = model.semantic(torch.tensor([[4, 3, 2, 1]]), [8]).z
    assert (a - b).abs().mean() > 1e-3


def test_aligner_rejects_bad_input():
    al = small_aligner()
    with pytest.raises(AlignerError):
        al(torch.zeros(1, 0, dtype=torch.long), [3])
    with pytest.raises(AlignerError):
        al(torch.tensor([[1, 2]]), [0])
    with pytest.raises(AlignerError):
        al(torch.tensor([[1, 9]]), [3])


def test_canvas_positions():
    al = small_aligner()
    pos = al._positions(2, 4, torch.float64)
    assert pos.tolist() == [0.0, 1.5, 2.5, 0.0, 1.25, 1.75, 2.25, 2.75]
    assert small_aligner(positions="index")._positions(2, 1, torch.float64).tolist() == [0, 1, 2, 3, 4]


def test_vector_quantizer_straight_through():
    codebook = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    z = torch.tensor([[[0.1, 0.2], [0.9, 0.7]]], requires_grad=True)
    zq, idx, loss = quantize(z, codebook, 0.25)
    assert idx.tolist() == [[0, 1]]
    torch.testing.assert_close(zq.detach(), codebook[[0, 1]][None])
    zq.sum().backward()
    torch.testing.assert_close(z.grad, torch.ones_like(z))
    expected = 1.25 * ((z.detach() - codebook[[0, 1]][None]) ** 2).sum(-1).mean()
    torch.testing.assert_close(loss.detach(), expected)


def test_vq_enabled_model_adds_loss_term():
    from architts.training import compute_losses
    model = tiny_model(0)
    model_vq = ArchiTTS(ModelConfig(**{**model.config.__dict__, "aligner": AlignerConfig(
        **{**model.config.aligner.__dict__, "vq_enabled": True, "codebook_size": 8})})).double()
    _, batch = tiny_batch(0)
    losses = compute_losses(model_vq, batch)
    assert losses.vq is not None and losses.vq.item() >= 0
    expected = losses.cfm + losses.dir + 0.1 * losses.ctc + losses.vq
    torch.testing.assert_close(losses.total, expected)
    assert compute_losses(model, batch).vq is None


def _encoder_inputs(model, T=5, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64
    return dict(
        x_t=torch.randn(B, T, 6, generator=g, dtype=dt), t=torch.rand(B, generator=g, dtype=dt),
        x_ref=torch.randn(B, T, 6, generator=g, dtype=dt), z=torch.randn(B, T, 16, generator=g, dtype=dt),
        speaker=torch.randn(B, 2, generator=g, dtype=dt),
    )


def test_encoder_shapes_and_tap():
    model = tiny_model(0)
    state = model.encode_condition(**_encoder_inputs(model))
    assert state.h.shape == (2, 5, 16) and state.phi.shape == (2, 5, 16)
    lp = model.encoder.ctc_logits(state.phi)
    assert lp.shape == (2, 5, 6)
    torch.testing.assert_close(lp.exp().sum(-1), torch.ones(2, 5, dtype=torch.float64))


def test_encoder_frame_mismatch():
    model = tiny_model(0)
    inputs = _encoder_inputs(model)
    inputs["z"] = inputs["z"][:, :4]
    with pytest.raises(EncoderError):
        model.encode_condition(**inputs)


def test_null_flags_swap_single_condition():
    model = tiny_model(0)
    inputs = _encoder_inputs(model)
    base = model.encode_condition(**inputs).h
    for col, key in ((NULL_SEMANTIC, "z"), (NULL_SPEAKER, "speaker"), (NULL_PROMPT, "x_ref")):
        flags = torch.zeros(2, 3, dtype=torch.bool)
        flags[0, col] = True
        h = model.encode_condition(**inputs, null_flags=flags).h
        assert not torch.allclose(h[0], base[0])
        torch.testing.assert_close(h[1], base[1])
        # a flagged input is ignored entirely
        changed = dict(inputs)
        changed[key] = inputs[key] + 1.0
        flags_all = torch.zeros(2, 3, dtype=torch.bool)
        flags_all[:, col] = True
        torch.testing.assert_close(model.encode_condition(**changed, null_flags=flags_all).h,
                                   model.encode_condition(**inputs, null_flags=flags_all).h)


def test_decoder_depends_on_state_and_checks_frames():
    model = tiny_model(0)
    inputs = _encoder_inputs(model)
    state = model.encode_condition(**inputs)
    v = model.decode_velocity(inputs["x_t"], inputs["t"], state)
    assert v.shape == inputs["x_t"].shape
    other = ConditionState(state.h + 0.5, state.phi, state.t)
    assert not torch.allclose(model.decode_velocity(inputs["x_t"], inputs["t"], other), v)
    with pytest.raises(DecoderError):
        model.decode_velocity(inputs["x_t"][:, :4], inputs["t"], state)


def test_fresh_decoder_outputs_zero_velocity():
    cfg = tiny_model(0).config
    model = ArchiTTS(cfg).double()
    inputs = _encoder_inputs(model)
    v = model.decode_velocity(inputs["x_t"], inputs["t"], model.encode_condition(**inputs))
    assert torch.equal(v, torch.zeros_like(v))


def test_dit_block_ignores_condition_when_modulation_zero():
    block = DiTBlock(8, 2, 2).double()
    torch.nn.init.zeros_(block.modulation.weight)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 8, generator=g, dtype=torch.float64)
    pos = frame_positions(1, 3, torch.float64)
    a = block(x, torch.randn(1, 3, 8, generator=g, dtype=torch.float64), pos)
    b = block(x, torch.randn(1, 3, 8, generator=g, dtype=torch.float64), pos)
    torch.testing.assert_close(a, b)
    assert not torch.allclose(a, x)


def test_model_init_is_seeded():
    cfg = tiny_model(0).config
    a, b = ArchiTTS(cfg), ArchiTTS(cfg)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert parameter_count(a) == sum(p.numel() for p in a.parameters())


def test_model_config_validates_dims():
    cfg = tiny_model(0).config
    with pytest.raises(ValueError):
        ModelConfig(**{**cfg.__dict__, "decoder": {"model_dim": 8, "head_count": 2, "blocks": 1}})
