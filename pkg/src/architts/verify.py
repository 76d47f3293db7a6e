"""Self-contained property checks behind ``architts verify``.

Each check returns a :class:`CheckResult`; failures carry the seed that
reproduces them. Nothing here needs a trained model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import numerics as nx
from .codec import CodecConfig, LatentCodec, generate_corpus, token_error_rate
from .ctc import ctc_brute_force, ctc_loss, min_frames
from .seeding import numpy_rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    failing_seeds: list[int] = field(default_factory=list)
    seconds: float = 0.0
    value: float = 0.0  # headline measurement, e.g. the worst relative error


def random_ctc_instance(seed: int, max_frames: int = 6, max_vocab: int = 3, max_target: int = 3):
    """Feasible ``(log_probs[T, V] float64, target)`` pair."""
    rng = numpy_rng(seed, "ctc-instance")
    while True:
        T = int(rng.integers(1, max_frames + 1))
        V = int(rng.integers(2, max_vocab + 1))
        U = int(rng.integers(0, max_target + 1))
        target = [int(v) for v in rng.integers(1, V, size=U)]
        if min_frames(target) <= T:
            break
    logits = torch.from_numpy(rng.standard_normal((T, V)) * 2)
    return torch.log_softmax(logits, dim=-1), target


def check_ctc_oracle(cases: int = 200, tol: float = 1e-6, loss_fn: Callable = ctc_loss) -> CheckResult:
    bad, worst = [], 0.0
    for seed in range(cases):
        lp, target = random_ctc_instance(seed)
        err = abs(float(loss_fn(lp, target)) - ctc_brute_force(lp, target))
        worst = max(worst, err)
        if not err < tol:
            bad.append(seed)
    return CheckResult("ctc_oracle_equivalence", not bad, f"{cases} cases, max |diff| {worst:.2e}", bad)


# -- gradient checks ----------------------------------------------------------


def _primitive_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, torch.Tensor]]]:
    """Each factory returns a scalar function of one double tensor and a point."""

    def t(rng, *shape):
        return torch.from_numpy(rng.standard_normal(shape))

    def matmul(rng):
        w = t(rng, 4, 3)
        return (lambda x: ((x @ w) ** 2).sum()), t(rng, 2, 4)

    def attn(rng):
        k, v, w = t(rng, 3, 4), t(rng, 3, 4), t(rng, 3, 4)
        return (lambda q: (nx.attention(q, k, v) * w).sum()), t(rng, 3, 4)

    def attn_values(rng):
        q, k, w = t(rng, 3, 4), t(rng, 3, 4), t(rng, 3, 4)
        return (lambda v: (nx.attention(q, k, v, nx.causal_mask(3)) * w).sum()), t(rng, 3, 4)

    def norm(rng):
        g, b, w = t(rng, 5), t(rng, 5), t(rng, 2, 5)
        return (lambda x: (nx.layer_norm(x, g, b, 1e-5) * w).sum()), t(rng, 2, 5)

    def gelu(rng):
        w = t(rng, 6)
        return (lambda x: (nx.gelu(x) * w).sum()), t(rng, 6)

    def conv(rng):
        x, w = t(rng, 1, 6, 3), t(rng, 1, 6, 3)
        return (lambda k: (nx.depthwise_conv1d(x, k) * w).sum()), t(rng, 3, 5)

    def embedding(rng):
        ids = torch.from_numpy(rng.integers(0, 5, size=7))
        w = t(rng, 7, 3)
        return (lambda table: (torch.nn.functional.embedding(ids, table) * w).sum()), t(rng, 5, 3)

    def softmax(rng):
        w = t(rng, 2, 5)
        return (lambda x: (torch.softmax(x, -1) * w).sum()), t(rng, 2, 5)

    def elementwise(rng):
        a = t(rng, 6)
        return (lambda x: (x * a + x / (2 + a * a) - x * x).sum()), t(rng, 6)

    def reduction(rng):
        return (lambda x: x.mean(0).pow(2).sum() + x.sum(1).max()), t(rng, 3, 4)

    def rotary(rng):
        pos = torch.from_numpy(rng.uniform(0, 5, size=3))
        cos, sin = nx.rotary_angles(pos, 4)
        w = t(rng, 3, 4)
        return (lambda x: (nx.apply_rotary(x, cos, sin) * w).sum()), t(rng, 3, 4)

    return {
        "matmul": matmul, "attention_query": attn, "attention_value_masked": attn_values,
        "layer_norm": norm, "gelu": gelu, "depthwise_conv1d": conv, "embedding": embedding,
        "softmax": softmax, "elementwise": elementwise, "reduction": reduction, "rotary": rotary,
    }


def check_primitive_gradients(seeds: int = 20, tol: float = 1e-5, eps: float = 1e-5) -> list[CheckResult]:
    results = []
    for name, factory in _primitive_cases().items():
        bad, worst = [], 0.0
        for seed in range(seeds):
            f, x = factory(numpy_rng(seed, "prim", name))
            err = nx.relative_error(nx.reverse_mode_grad(f, x), nx.finite_difference_grad(f, x, eps))
            worst = max(worst, err)
            if not err < tol:
                bad.append(seed)
        results.append(CheckResult(f"grad_{name}", not bad, f"max rel err {worst:.2e}", bad, value=worst))
    return results


def tiny_model(seed: int = 0, dtype=torch.float64):
    """``D_model=16`` network (2 aligner + 2 encoder + 1 decoder blocks), all weights random."""
    from .aligner import AlignerConfig
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .model import ArchiTTS, ModelConfig

    cfg = ModelConfig(
        vocab_size=5, latent_dim=6, speaker_dim=2,
        aligner=AlignerConfig(model_dim=16, head_count=2, convnext_blocks=1, transformer_blocks=2, conv_kernel=3),
        encoder=EncoderConfig(model_dim=16, head_count=2, blocks=2),
        decoder=DecoderConfig(model_dim=16, head_count=2, blocks=1),
        init_seed=seed,
    )
    model = ArchiTTS(cfg).to(dtype)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            if not p.any():
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=dtype))
    return model


def tiny_batch(seed: int = 0):
    from .training import TrainConfig, make_batch

    codec = LatentCodec(CodecConfig(vocab_size=5, latent_dim=6, speaker_dim=2, speaker_count=2, seed=seed))
    utts = generate_corpus(codec.config, 2, (2, 3), seed, codec)
    batch = make_batch(utts, codec, seed, TrainConfig(p_joint=0.0, p_all=0.0))
    return codec, batch


def pipeline_gradient_errors(seed: int = 0, coords: int = 24, eps: float = 1e-5) -> dict[str, float]:
    """Relative error of autograd vs central differences for every loss term.

    Compared on a random subset of parameter coordinates and on one random
    direction through the full parameter vector.
    """
    from torch.nn.utils import parameters_to_vector, vector_to_parameters

    from .training import compute_losses

    model = tiny_model(seed)
    _, batch = tiny_batch(seed)
    params = list(model.parameters())
    theta0 = parameters_to_vector(params).detach().clone()
    rng = numpy_rng(seed, "pipeline-coords")
    idx = torch.from_numpy(rng.choice(theta0.numel(), size=coords, replace=False))
    direction = torch.from_numpy(rng.standard_normal(theta0.numel()))
    direction /= direction.norm()

    errors = {}
    for term in ("cfm", "dir", "ctc", "total"):
        def value(theta):
            vector_to_parameters(theta, params)
            with torch.no_grad():
                return getattr(compute_losses(model, batch), term).item()

        vector_to_parameters(theta0, params)
        model.zero_grad()
        getattr(compute_losses(model, batch), term).backward()
        grad = torch.cat([torch.zeros(p.numel(), dtype=p.dtype) if p.grad is None else p.grad.reshape(-1) for p in params])

        fd = torch.zeros(coords, dtype=torch.float64)
        for j, i in enumerate(idx.tolist()):
            up, down = theta0.clone(), theta0.clone()
            up[i] += eps
            down[i] -= eps
            fd[j] = (value(up) - value(down)) / (2 * eps)
        dir_fd = (value(theta0 + eps * direction) - value(theta0 - eps * direction)) / (2 * eps)
        dir_ad = float(grad @ direction)
        errors[term] = max(
            nx.relative_error(grad[idx], fd),
            abs(dir_fd - dir_ad) / max(abs(dir_fd), abs(dir_ad), 1e-12),
        )
    vector_to_parameters(theta0, params)
    return errors


def check_pipeline_gradient(tol: float = 1e-3) -> CheckResult:
    errs = pipeline_gradient_errors()
    ok = all(e < tol for e in errs.values())
    return CheckResult("grad_full_objective", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()), [] if ok else [0])


# -- sampling, schedule, statistics ------------------------------------------


def check_cfg_identities() -> CheckResult:
    from .sampler import cfg_velocity

    bad = []
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        vc, vu = torch.randn(5, 4, generator=g), torch.randn(5, 4, generator=g)
        if not torch.equal(cfg_velocity(vc, vu, 0.0), vc):
            bad.append(seed)
        for w in (0.0, 1.0, 4.0):
            out = cfg_velocity(vc, vc.clone(), w)
            if not torch.allclose(out, vc, rtol=4 * torch.finfo(vc.dtype).eps, atol=0):
                bad.append(seed)
    return CheckResult("cfg_identities", not bad, "w=0 exact; equal branches collapse", sorted(set(bad)))


class LinearField:
    """Stand-in model whose velocity is ``v(x, t) = x``."""

    def encode_condition(self, x_t, t, x_ref, z, speaker, null_flags=None, frame_mask=None):
        from .encoder import ConditionState

        return ConditionState(torch.zeros_like(x_t), torch.zeros_like(x_t), torch.as_tensor(t))

    def decode_velocity(self, x_t, t, state, frame_mask=None):
        return x_t.clone()


def linear_field_conditions(frames: int = 4, dim: int = 3, dtype=torch.float64):
    from .sampler import Conditions

    return Conditions(
        z=torch.zeros(1, frames, 1, dtype=dtype), speaker=torch.zeros(1, 1, dtype=dtype),
        x_ref=torch.zeros(1, frames, dim, dtype=dtype), frame_mask=torch.ones(1, frames, dtype=torch.bool),
    )


def euler_errors(nfes=(16, 32, 64), seed: int = 0) -> dict[int, float]:
    from .sampler import SamplerPlan, initial_noise, sample

    cond = linear_field_conditions()
    x0 = initial_noise(cond, seed)
    out = {}
    for n in nfes:
        x = sample(LinearField(), cond, SamplerPlan(nfe=n, timeshift=1.0, cfg_strength=4.0, seed=seed)).latents
        exact = math.e * x0
        out[n] = float((x - exact).norm() / exact.norm())
    return out


def check_euler_convergence() -> CheckResult:
    errs = euler_errors()
    ratios = [errs[16] / errs[32], errs[32] / errs[64]]
    ok = errs[64] < 0.02 and all(1.7 <= r <= 2.3 for r in ratios)
    return CheckResult("euler_convergence", ok, f"errors {errs}, ratios {[round(r, 3) for r in ratios]}", [] if ok else [0])


def check_sharing_law(cases=((32, 32), (32, 8), (16, 1))) -> CheckResult:
    from .sampler import Conditions, SamplerPlan, sample, sample_reference

    model = tiny_model(0, torch.float32).eval()
    T = 6
    g = torch.Generator().manual_seed(0)
    cond = Conditions(
        z=torch.randn(1, T, 16, generator=g), speaker=torch.randn(1, 2, generator=g),
        x_ref=torch.randn(1, T, 6, generator=g), frame_mask=torch.ones(1, T, dtype=torch.bool),
    )
    details, ok = [], True
    for n, k in cases:
        res = sample(model, cond, SamplerPlan(nfe=n, recompute=k, seed=1))
        good = res.encoder_evals == 2 * k and res.decoder_evals == 2 * n
        if n == k:
            good &= torch.equal(res.latents, sample_reference(model, cond, SamplerPlan(nfe=n, seed=1)))
        ok &= good
        details.append(f"N={n},K={k}: enc {res.encoder_evals} dec {res.decoder_evals}")
    return CheckResult("sharing_eval_law", ok, "; ".join(details), [] if ok else [0])


def check_logit_normal(count: int = 10000, seed: int = 0) -> CheckResult:
    from scipy.stats import kstest

    from .training import logit_normal_cdf, sample_timestep

    t = sample_timestep(count, seed).numpy()
    stat = kstest(t, logit_normal_cdf).statistic
    ok = bool(stat < 0.02 and (t > 0).all() and (t < 1).all())
    return CheckResult("logit_normal_ks", ok, f"KS {stat:.4f}", [] if ok else [seed])


def check_dropout_rates(draws: int = 100_000, seed: int = 0) -> CheckResult:
    from .training import apply_condition_dropout

    flags = apply_condition_dropout(draws, seed).numpy()
    all_null = flags.all(1).mean()
    joint = (flags[:, 1] & flags[:, 2] & ~flags[:, 0]).mean()
    ok = abs(all_null - 0.2) <= 0.01 and abs(joint - 0.24) <= 0.01
    return CheckResult("dropout_rates", bool(ok), f"all-null {all_null:.4f}, prompt+speaker {joint:.4f}", [] if ok else [seed])


def check_masks(batches: int = 50) -> CheckResult:
    from .training import TrainConfig, make_batch

    cfg = CodecConfig()
    codec = LatentCodec(cfg)
    utts = generate_corpus(cfg, 64, (1, 16), 3, codec)
    bad = []
    for seed in range(batches):
        batch = make_batch(utts[seed % 48 : seed % 48 + 16], codec, seed, TrainConfig())
        for b, n in enumerate(batch.lengths):
            m = batch.gen_mask[b, :n].numpy()
            frac = m.sum() / n
            edges = np.flatnonzero(np.diff(np.concatenate([[0], m.astype(int), [0]])))
            if not (0.7 <= frac <= 1.0 and len(edges) == 2 and not batch.gen_mask[b, n:].any()):
                bad.append(seed)
            if batch.x_ref[b][batch.gen_mask[b]].abs().sum() != 0:
                bad.append(seed)
    return CheckResult("infill_masks", not bad, f"{batches} batches", sorted(set(bad)))


def check_codec_roundtrip(trials: int = 1000) -> CheckResult:
    exact = LatentCodec(CodecConfig(noise_scale=0.0, seed=1))
    noisy_probe = LatentCodec(CodecConfig(noise_scale=0.0, seed=2))
    noisy = LatentCodec(CodecConfig(noise_scale=0.24 * noisy_probe.min_codeword_distance, seed=2))
    bad = []
    for seed in range(trials):
        for codec in (exact, noisy):
            (utt,) = generate_corpus(codec.config, 1, (1, 24), seed, codec)
            if token_error_rate(utt.tokens, codec.decode(utt.latents)) != 0:
                bad.append(seed)
    return CheckResult("codec_roundtrip", not bad, f"{trials} sequences, clean and noisy", sorted(set(bad)))


def check_schedule() -> CheckResult:
    from .sampler import build_schedule

    ok = True
    for n in (1, 2, 7, 32):
        for s in (0.5, 1.0, 3.0):
            ts = build_schedule(n, s)
            ok &= ts[0] == 0.0 and ts[-1] == 1.0 and all(b > a for a, b in zip(ts, ts[1:]))
        ok &= build_schedule(n, 1.0) == [i / n for i in range(n + 1)]
    return CheckResult("schedule", ok, "monotone, exact endpoints, s=1 uniform")


def run_all(ctc_fn: Callable = ctc_loss, quick: bool = False) -> list[CheckResult]:
    checks: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_ctc_oracle(loss_fn=ctc_fn),
        lambda: check_primitive_gradients(seeds=5 if quick else 20),
        check_pipeline_gradient,
        check_cfg_identities,
        check_euler_convergence,
        check_sharing_law,
        check_logit_normal,
        check_dropout_rates,
        check_masks,
        lambda: check_codec_roundtrip(200 if quick else 1000),
        check_schedule,
    ]
    results = []
    for check in checks:
        start = time.perf_counter()
        out = check()
        for r in out if isinstance(out, list) else [out]:
            r.seconds = time.perf_counter() - start
            results.append(r)
    return results


def mutated_ctc_loss(log_probs, target) -> float:
    """CTC forward pass with its time loop stopping one frame early.

    Only used to show that the oracle check catches recursion bugs.
    """
    lp = np.asarray(log_probs.detach() if isinstance(log_probs, torch.Tensor) else log_probs, dtype=np.float64)
    T = lp.shape[0]
    ext = [0]
    for y in target:
        ext += [y, 0]
    S = len(ext)
    alpha = np.full(S, -np.inf)
    alpha[0] = lp[0, ext[0]]
    if S > 1:
        alpha[1] = lp[0, ext[1]]
    for t in range(1, T - 1):
        new = np.full(S, -np.inf)
        for s in range(S):
            terms = [alpha[s]]
            if s >= 1:
                terms.append(alpha[s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                terms.append(alpha[s - 2])
            new[s] = np.logaddexp.reduce(terms) + lp[t, ext[s]]
        alpha = new
    final = alpha[-2:] if S > 1 else alpha[-1:]
    return float(-np.logaddexp.reduce(final))
