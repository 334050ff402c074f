"""Scaling-trend harness: no-protection vs full-isolation vs two-party
decode, with weight-copy accounting.

Latency is desk-scale wall clock on CPU, so only orderings and slopes are
meaningful; a "round" advances every user by one token and its duration
is the reported per-token latency. Weight copies are counted by the
instrumented allocation counter in the model module: the sharing modes
instantiate the weights once, full isolation once per user.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .langmodel import NgramModel
from .model import (
    KvCache,
    ModelConfig,
    _rms_norm,
    _silu,
    attention_reference,
    decode_step_monolithic,
    init_model,
    prefill,
    reset_weight_alloc_count,
    rotary_encode,
    sample_token,
    weight_alloc_count,
)
from .obfuscation import ObfuscationConfig, TaggedPrompt
from .protocol import (
    Controller,
    InProcLink,
    ModelParty,
    Transcript,
    UserParty,
    WeightsHandle,
    model_batch_step,
    new_stream_ids,
    user_prefill,
)
from .wire import serialize

__all__ = [
    "BenchConfig",
    "BenchRecord",
    "CSV_HEADER",
    "bench_csv",
    "bench_prompts",
    "run_mode",
    "sweep",
]

MODES = ("no_protection", "full_isolation", "spd")

CSV_HEADER = (
    "mode,users,lambda,in_tokens,out_tokens,"
    "ms_per_token_med,ms_per_token_p95,weight_copies,bytes_per_token"
)


@dataclass(frozen=True)
class BenchConfig:
    mode: str
    users: int
    in_tokens: int
    out_tokens: int
    lam: int
    model: ModelConfig
    repetitions: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.users < 1:
            raise ValueError("users must be >= 1")
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3")
        if self.in_tokens < 1 or self.out_tokens < 1:
            raise ValueError("token counts must be >= 1")
        needed = self.in_tokens + self.out_tokens
        if needed > self.model.max_seq:
            raise ValueError(f"in+out tokens {needed} exceed max_seq {self.model.max_seq}")


@dataclass
class BenchRecord:
    mode: str
    users: int
    lam: int
    in_tokens: int
    out_tokens: int
    ms_per_token_med: float
    ms_per_token_p95: float
    weight_copies: int
    bytes_per_token: float
    tokens: dict = field(default_factory=dict, repr=False)  # user -> authentic stream

    def csv_row(self) -> str:
        return (
            f"{self.mode},{self.users},{self.lam},{self.in_tokens},{self.out_tokens},"
            f"{self.ms_per_token_med:.4f},{self.ms_per_token_p95:.4f},"
            f"{self.weight_copies},{self.bytes_per_token:.1f}"
        )


def bench_prompts(config: BenchConfig) -> list[list[int]]:
    """Deterministic per-user prompts; EOS never appears in a prompt."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed)))
    v = config.model.vocab_size
    return [
        rng.integers(0, v - 1, size=config.in_tokens).tolist() for _ in range(config.users)
    ]


def _uniform_oracle(vocab_size: int) -> NgramModel:
    # no counts: smoothing alone makes every next-token distribution uniform
    return NgramModel(order=1, vocab_size=vocab_size)


class _MonoBatchState:
    """Shared-weights monolithic decode of several users, trunk batched."""

    def __init__(self, weights, prompts):
        self.w = weights
        self.c = weights.config
        self.caches = []
        self.tokens = []
        for prompt in prompts:
            cache, logits = prefill(weights, prompt)
            self.caches.append(cache)
            self.tokens.append([sample_token(logits)])

    def active(self) -> list[int]:
        # bench workloads decode a fixed length; EOS is an ordinary token
        return [i for i in range(len(self.caches)) if self.caches[i].length < self.c.max_seq]

    def round(self):
        """One batched decode step for all active users."""
        idx = self.active()
        if not idx:
            return
        c, w = self.c, self.w
        positions = np.array([self.caches[i].length for i in idx])
        x = w.embed[[self.tokens[i][-1] for i in idx]]
        B = x.shape[0]
        scale = c.head_dim**-0.5
        for layer in range(c.n_layers):
            lw = w.layers[layer]
            h = _rms_norm(x, lw.gain_attn)
            q = rotary_encode(
                (h @ lw.wq).reshape(B, c.n_heads, c.head_dim).transpose(1, 0, 2), positions
            ) * scale
            k = rotary_encode(
                (h @ lw.wk).reshape(B, c.n_heads, c.head_dim).transpose(1, 0, 2), positions
            )
            v = (h @ lw.wv).reshape(B, c.n_heads, c.head_dim).transpose(1, 0, 2)
            merged = np.empty((B, c.d_model))
            for b, i in enumerate(idx):
                cache = self.caches[i]
                pos = cache.length
                cache.store(layer, pos, k[:, b, :], v[:, b, :])
                heads = [
                    attention_reference(
                        q[head, b], cache.keys(layer, head, pos + 1), cache.values(layer, head, pos + 1)
                    )[0]
                    for head in range(c.n_heads)
                ]
                merged[b] = np.concatenate(heads)
            x = x + merged @ lw.wo
            x = x + _silu(_rms_norm(x, lw.gain_mlp) @ lw.w_in) @ lw.w_out
        logits = _rms_norm(x, w.final_gain) @ w.unembed
        for b, i in enumerate(idx):
            self.caches[i].length += 1
            self.tokens[i].append(sample_token(logits[b]))


def _run_no_protection(config: BenchConfig, prompts) -> tuple[dict, list[float], int, int]:
    start_allocs = weight_alloc_count()
    weights = init_model(config.model)
    state = _MonoBatchState(weights, prompts)
    round_times = []
    for _ in range(config.out_tokens - 1):
        if not state.active():
            break
        t0 = time.perf_counter()
        state.round()
        round_times.append(time.perf_counter() - t0)
    tokens = {i: list(t) for i, t in enumerate(state.tokens)}
    return tokens, round_times, weight_alloc_count() - start_allocs, 0


def _run_full_isolation(config: BenchConfig, prompts) -> tuple[dict, list[float], int, int]:
    start_allocs = weight_alloc_count()
    instances = [init_model(config.model) for _ in range(config.users)]
    caches: list[KvCache] = []
    tokens: dict[int, list[int]] = {}
    for i, prompt in enumerate(prompts):
        cache, logits = prefill(instances[i], prompt)
        caches.append(cache)
        tokens[i] = [sample_token(logits)]
    round_times = []
    for _ in range(config.out_tokens - 1):
        idx = [i for i in range(config.users) if caches[i].length < config.model.max_seq]
        if not idx:
            break
        t0 = time.perf_counter()
        for i in idx:
            logits = decode_step_monolithic(instances[i], caches[i], tokens[i][-1])
            tokens[i].append(sample_token(logits))
        round_times.append(time.perf_counter() - t0)
    return tokens, round_times, weight_alloc_count() - start_allocs, 0


def _run_spd(config: BenchConfig, prompts) -> tuple[dict, list[float], int, int]:
    start_allocs = weight_alloc_count()
    weights = init_model(config.model)
    model = ModelParty(weights, stop_at_eos=False)
    ctrl = Controller()
    transcript = Transcript(config=config.model)
    # the sampler's pool includes the authentic n-gram, so lam decoys
    # need a pool cap of lam + 1
    obf = ObfuscationConfig(
        epsilon=1.0 if config.lam > 0 else 0.0,
        lambda_max=config.lam + 1,
        prf_key=b"bench",
    )
    oracle = _uniform_oracle(config.model.vocab_size)

    users = []
    link_of = {}
    authentic_stream: dict[int, int] = {}
    for i, prompt in enumerate(prompts):
        party = UserParty(
            user_id=i, weights_handle=WeightsHandle(weights), oracle=oracle, prf_key=obf.prf_key
        )
        # one tagged token gives lam equal-length decoys under the uniform oracle
        tagged = TaggedPrompt(tokens=prompt, spans=((0, 1),) if config.lam > 0 else ())
        stream_ids = new_stream_ids(config.lam + 1)
        msgs = user_prefill(party, tagged, obf, stream_ids=stream_ids)
        link = InProcLink(party.handle_frame, transcript)
        for msg in msgs:
            transcript.record("u2m", 0, serialize(msg))
            model.handle_user_frame(msg)
            ctrl.open_stream(msg.session_id)
        for sid in party.streams:
            link_of[sid] = link
        authentic_stream[i] = stream_ids[party.vps.idx]
        users.append(party)

    round_times = []
    for step in range(1, config.out_tokens):
        pairs = [(sid, link_of[sid]) for sid in model.active_streams()]
        if not pairs:
            break
        t0 = time.perf_counter()
        model_batch_step(model, pairs, controller=ctrl, step=step)
        round_times.append(time.perf_counter() - t0)
    tokens = {
        i: list(users[i].streams[authentic_stream[i]].tokens) for i in range(config.users)
    }
    total_tokens = sum(len(s.tokens) for u in users for s in u.streams.values())
    bytes_per_token = transcript.total_bytes() / max(total_tokens, 1)
    return tokens, round_times, weight_alloc_count() - start_allocs, bytes_per_token


_RUNNERS = {
    "no_protection": _run_no_protection,
    "full_isolation": _run_full_isolation,
    "spd": _run_spd,
}


def run_mode(config: BenchConfig) -> BenchRecord:
    """Execute one mode end-to-end, repetitions times.

    Token outputs must agree across repetitions; per-token latency is the
    median/p95 over all decode rounds of all repetitions.
    """
    reset_weight_alloc_count()
    prompts = bench_prompts(config)
    runner = _RUNNERS[config.mode]
    all_round_times: list[float] = []
    rep_medians: list[float] = []
    tokens = None
    copies = None
    bytes_per_token = 0.0
    for _ in range(config.repetitions):
        rep_tokens, round_times, rep_copies, rep_bytes = runner(config, prompts)
        if tokens is None:
            tokens, copies, bytes_per_token = rep_tokens, rep_copies, rep_bytes
        else:
            if rep_tokens != tokens:
                raise RuntimeError("token outputs changed across repetitions")
            if rep_copies != copies:
                raise RuntimeError("weight-copy count changed across repetitions")
        all_round_times.extend(round_times)
        rep_medians.append(float(np.median(round_times)) if round_times else 0.0)
    med = float(np.median(rep_medians)) * 1000
    p95 = float(np.percentile(all_round_times, 95)) * 1000 if all_round_times else 0.0
    return BenchRecord(
        mode=config.mode,
        users=config.users,
        lam=config.lam,
        in_tokens=config.in_tokens,
        out_tokens=config.out_tokens,
        ms_per_token_med=med,
        ms_per_token_p95=p95,
        weight_copies=copies,
        bytes_per_token=float(bytes_per_token),
        tokens=tokens,
    )


def sweep(configs: list[BenchConfig]) -> list[BenchRecord]:
    """One record per config, in a deterministic sort order."""
    if not configs:
        raise ValueError("sweep needs at least one config")
    ordered = sorted(
        configs, key=lambda c: (c.mode, c.users, c.lam, c.in_tokens, c.out_tokens)
    )
    return [run_mode(c) for c in ordered]


def bench_csv(records: list[BenchRecord]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in records])
