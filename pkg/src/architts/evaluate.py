"""Zero-shot evaluation on a held-out split and the sharing-ratio sweep."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import LatentCodec, Utterance, token_error_rate
from .sampler import SamplerPlan, SynthesisRequest, synthesize_batch


class EvaluationError(ValueError):
    pass


def crop_prompt(codec: LatentCodec, utt: Utterance, prompt_tokens: int) -> tuple[np.ndarray, list[int]]:
    """First ``prompt_tokens`` tokens of an utterance and the frames they span.

    Token boundaries come from the codec's own frame labels.
    """
    runs = codec.segment(utt.latents)
    k = min(prompt_tokens, len(runs))
    stop = runs[k - 1][2]
    return np.asarray(utt.latents[:stop]), [tok for tok, _, _ in runs[:k]]


def build_requests(codec: LatentCodec, split: Sequence[Utterance], prompt_tokens: int = 3) -> list[SynthesisRequest]:
    """Cross-utterance prompts: each target borrows the next same-speaker utterance as reference."""
    if not split:
        raise EvaluationError("empty evaluation split")
    by_speaker: dict[int, list[int]] = {}
    for i, u in enumerate(split):
        by_speaker.setdefault(u.speaker, []).append(i)
    requests = []
    for i, u in enumerate(split):
        peers = by_speaker[u.speaker]
        ref = split[peers[(peers.index(i) + 1) % len(peers)]]
        ref_latents, ref_tokens = crop_prompt(codec, ref, prompt_tokens)
        requests.append(SynthesisRequest(ref_latents, ref_tokens, list(u.tokens), u.speaker, key=u.utt_id))
    return requests


@dataclass
class EvalSummary:
    nfe: int
    recompute: int
    sharing_ratio: float
    token_error_rate: float
    speaker_cosine: float
    encoder_evals: int
    decoder_evals: int
    wall_time: float
    utterances: int

    def row(self) -> dict:
        return {
            "sharing_ratio": round(self.sharing_ratio, 6),
            "nfe": self.nfe,
            "recompute": self.recompute,
            "token_error_rate": self.token_error_rate,
            "speaker_cosine": self.speaker_cosine,
            "encoder_evals": self.encoder_evals,
            "decoder_evals": self.decoder_evals,
            "wall_time": self.wall_time,
            "utterances": self.utterances,
        }


def evaluate(model, codec: LatentCodec, requests: Sequence[SynthesisRequest], plan: SamplerPlan, batch_size: int = 50) -> EvalSummary:
    """Mean per-utterance token error rate and speaker cosine.

    ``encoder_evals``/``decoder_evals`` are per utterance (each batch runs
    every request through the same schedule).
    """
    if not requests:
        raise EvaluationError("empty evaluation split")
    ters, coss = [], []
    enc = dec = 0
    start = time.perf_counter()
    for i in range(0, len(requests), batch_size):
        chunk = requests[i : i + batch_size]
        for req, res in zip(chunk, synthesize_batch(model, codec, chunk, plan)):
            ters.append(token_error_rate(req.gen_tokens, res.decoded_tokens))
            coss.append(codec.speaker_cosine(res.latents, req.speaker))
            enc, dec = res.encoder_evals, res.decoder_evals
    return EvalSummary(
        plan.nfe, plan.recompute, plan.sharing_ratio, float(np.mean(ters)), float(np.mean(coss)),
        enc, dec, time.perf_counter() - start, len(requests),
    )


def bench_sharing(
    model,
    codec: LatentCodec,
    requests: Sequence[SynthesisRequest],
    ratios: Sequence[float],
    nfes: Sequence[int],
    base_plan: SamplerPlan | None = None,
    batch_size: int = 50,
) -> list[dict]:
    base = base_plan or SamplerPlan()
    rows = []
    for nfe in nfes:
        for ratio in sorted(ratios):
            plan = SamplerPlan.from_sharing_ratio(
                nfe, ratio, cfg_strength=base.cfg_strength, timeshift=base.timeshift,
                seed=base.seed, cfg_null=base.cfg_null,
            )
            rows.append(evaluate(model, codec, requests, plan, batch_size).row())
    return rows


def wall_time_decreasing(rows: Sequence[dict]) -> bool:
    """True when wall time falls as the sharing ratio rises, for every NFE."""
    ok = True
    for nfe in sorted({r["nfe"] for r in rows}):
        times = [r["wall_time"] for r in sorted((r for r in rows if r["nfe"] == nfe), key=lambda r: r["sharing_ratio"])]
        ok &= all(b < a for a, b in zip(times, times[1:]))
    return ok


COLUMNS = ["sharing_ratio", "nfe", "recompute", "token_error_rate", "speaker_cosine",
           "encoder_evals", "decoder_evals", "wall_time", "utterances"]


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in COLUMNS})
