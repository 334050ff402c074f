"""Two-party decode: a model party that owns the weights and public KV
rows, user parties that own prompts and private KV rows, and a controller
that lets only ground-truth-matching tokens leave the boundary.

Per generated token, per layer, the model party projects the incoming
token, appends its K/V to the public partition, and sends one QUERY per
head. The user party answers each with a PARTIAL (weighted values,
denominator, running max); the model merges, finishes the layer, and
after the last layer returns the next-token distribution (FINAL_Y). The
user samples and emits the token both back to the model and outward
through the controller gate.

User parties never touch weights after prefill (the handle is released
and any later access faults), and private partitions never serialize:
the wire layer only moves ProtocolMessage frames.

Transport is an in-process frame conduit by default; the same frames run
over localhost stream sockets via SocketLink/serve_user_party.
"""

from __future__ import annotations

import itertools
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ModelConfig,
    Weights,
    _rms_norm,
    _silu,
    prefill,
    rotary_encode,
    sample_token,
)
from .numerics import stable_softmax_stats
from .obfuscation import (
    ObfuscationConfig,
    TaggedPrompt,
    VirtualPromptSet,
    build_virtual_prompts,
    multi_segment_gqs,
    winnow,
)
from .partition import (
    PRIVATE,
    PUBLIC,
    KvPartition,
    PartialAttention,
    batched_public_partials,
    private_partial,
)
from .wire import (
    TAG_ABORT,
    TAG_CONTROL,
    TAG_FINAL_Y,
    TAG_PARTIAL,
    TAG_QUERY,
    TAG_TOKEN,
    ProtocolMessage,
    decode_f64s,
    decode_token,
    deserialize,
    encode_f64s,
    encode_token,
    parse_header,
    serialize,
)

__all__ = [
    "CommReport",
    "Controller",
    "GateDecision",
    "InProcLink",
    "ModelParty",
    "ProtocolError",
    "SocketLink",
    "Transcript",
    "UserParty",
    "WeightsHandle",
    "WeightsReleasedError",
    "comm_accounting",
    "controller_gate",
    "model_batch_step",
    "new_stream_ids",
    "run_decode_session",
    "run_sessions",
    "serve_user_party",
    "user_prefill",
]

_stream_id_counter = itertools.count(1)


def new_stream_ids(count: int) -> list[int]:
    return [next(_stream_id_counter) for _ in range(count)]


class ProtocolError(RuntimeError):
    """Message arrived out of order or malformed for the protocol state."""


class WeightsReleasedError(RuntimeError):
    """Weight access after the prefill-only handle was released."""


class WeightsHandle:
    """Counting, revocable reference to the shared weights.

    The user party may read weights only during prefill; release() drops
    the reference so the party's resident state holds no weight matrices
    and any later get() is a hard fault.
    """

    def __init__(self, weights: Weights):
        self._weights = weights
        self.accesses = 0
        self.released = False

    def get(self) -> Weights:
        if self.released:
            raise WeightsReleasedError("weights were released after prefill")
        self.accesses += 1
        return self._weights

    def release(self):
        self.released = True
        self._weights = None


# -- transcript ---------------------------------------------------------


@dataclass
class TranscriptEntry:
    """Header-level record of one frame; payload bytes are not retained."""

    direction: str  # m2u, u2m, out, blk
    step: int
    tag: int
    session_id: int
    layer: int
    head: int
    payload_len: int
    nbytes: int

    @property
    def tag_name(self) -> str:
        from .wire import TAG_NAMES

        return TAG_NAMES.get(self.tag, f"0x{self.tag:02x}")


@dataclass
class Transcript:
    config: ModelConfig
    entries: list = field(default_factory=list)
    tokens: dict = field(default_factory=dict)  # stream -> gate-passed tokens
    killed: dict = field(default_factory=dict)  # stream -> reason
    gate_log: list = field(default_factory=list)  # (step, stream, passed, reason)

    def record(self, direction: str, step: int, frame: bytes):
        tag, session_id, layer, head, payload_len = parse_header(frame)
        self.entries.append(
            TranscriptEntry(
                direction=direction,
                step=step,
                tag=tag,
                session_id=session_id,
                layer=layer,
                head=head,
                payload_len=payload_len,
                nbytes=len(frame),
            )
        )

    def total_bytes(self) -> int:
        return sum(e.nbytes for e in self.entries)

    def dump(self) -> str:
        return "\n".join(
            f"{e.direction} {e.tag_name} {e.session_id} {e.layer} {e.head} {e.nbytes}"
            for e in self.entries
        )


# -- links --------------------------------------------------------------


class InProcLink:
    """Synchronous in-process conduit: sending a frame hands it to the
    peer handler and queues the replies for recv()."""

    def __init__(self, handler, transcript: Transcript | None = None):
        self._handler = handler
        self._pending = deque()
        self.transcript = transcript
        self.step = 0

    def send(self, frame: bytes):
        if self.transcript is not None:
            self.transcript.record("m2u", self.step, frame)
        self._pending.extend(self._handler(frame))

    def recv(self) -> bytes:
        if not self._pending:
            raise ProtocolError("expected a reply frame, peer sent none")
        frame = self._pending.popleft()
        if self.transcript is not None:
            self.transcript.record("u2m", self.step, frame)
        return frame


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one length-prefixed frame; None on clean EOF."""
    head = _read_exact(sock, 4)
    if head is None:
        return None
    (body_len,) = struct.unpack("<I", head)
    body = _read_exact(sock, body_len)
    if body is None:
        raise ProtocolError("socket closed mid-frame")
    return head + body


class SocketLink:
    """Model-party end of a localhost stream socket carrying frames."""

    def __init__(self, sock: socket.socket, transcript: Transcript | None = None):
        self._sock = sock
        self.transcript = transcript
        self.step = 0

    def send(self, frame: bytes):
        if self.transcript is not None:
            self.transcript.record("m2u", self.step, frame)
        self._sock.sendall(frame)

    def recv(self) -> bytes:
        frame = read_frame(self._sock)
        if frame is None:
            raise ProtocolError("peer closed the connection")
        if self.transcript is not None:
            self.transcript.record("u2m", self.step, frame)
        return frame


def serve_user_party(user: "UserParty", sock: socket.socket):
    """Blocking loop for socket transport: announce the prefill messages,
    then answer the model's frames until EOF."""
    for msg in user.pending_setup:
        sock.sendall(serialize(msg))
    user.pending_setup = []
    while True:
        frame = read_frame(sock)
        if frame is None:
            return
        for reply in user.handle_frame(frame):
            sock.sendall(reply)


# -- control payloads ---------------------------------------------------

_SETUP = struct.Struct("<I")  # prompt length


def encode_setup(prompt_len: int) -> bytes:
    return _SETUP.pack(prompt_len)


def decode_setup(payload: bytes) -> int:
    if len(payload) != _SETUP.size:
        raise ProtocolError("bad stream-setup payload")
    return _SETUP.unpack(payload)[0]


# -- user party ---------------------------------------------------------


@dataclass
class _UserStream:
    stream_id: int
    private: KvPartition
    tokens: list
    alive: bool = True


class UserParty:
    """Holds the prompt-side secrets of one user: virtual prompts, the
    authentic index, and per-stream private KV partitions.

    During decode the party answers QUERY frames from its private rows and
    samples from FINAL_Y distributions; it needs no weights, and its
    weights handle is released at the end of prefill.
    """

    def __init__(
        self,
        user_id: int,
        weights_handle: WeightsHandle,
        oracle=None,
        prf_key: bytes = b"",
        temperature: float | None = None,
        sample_seed: int = 0,
    ):
        self.user_id = user_id
        self.weights_handle = weights_handle
        self.oracle = oracle
        self.prf_key = prf_key
        self.temperature = temperature
        self.sample_seed = sample_seed
        self.config: ModelConfig | None = None
        self.streams: dict[int, _UserStream] = {}
        self.vps: VirtualPromptSet | None = None
        self.pending_setup: list[ProtocolMessage] = []
        self._outward: deque = deque()
        self._outward_lock = threading.Lock()
        self._sample_counter = 0

    def take_outward(self) -> list[ProtocolMessage]:
        with self._outward_lock:
            out = list(self._outward)
            self._outward.clear()
        return out

    def _queue_outward(self, msg: ProtocolMessage):
        with self._outward_lock:
            self._outward.append(msg)

    def _sample(self, logits: np.ndarray) -> int:
        if self.temperature is None:
            return sample_token(logits)
        token = sample_token(
            logits, self.temperature, seed=self.sample_seed + self._sample_counter
        )
        self._sample_counter += 1
        return token

    def authentic_response(self) -> list[int]:
        """Winnow: the response stream at the PRF-derived index."""
        idx = self.vps.idx if self.vps is not None else 0
        return winnow([s.tokens for s in self.streams.values()], idx)

    def handle_frame(self, frame: bytes) -> list[bytes]:
        msg = deserialize(frame)
        stream = self.streams.get(msg.session_id)
        if stream is None or not stream.alive:
            raise ProtocolError(f"frame for unknown or dead stream {msg.session_id}")
        if msg.tag == TAG_QUERY:
            q = decode_f64s(msg.payload)
            pa = private_partial(q, stream.private, msg.layer, msg.head)
            return [
                serialize(
                    ProtocolMessage(
                        tag=TAG_PARTIAL,
                        session_id=msg.session_id,
                        layer=msg.layer,
                        head=msg.head,
                        payload=encode_f64s(pa.scalars()),
                    )
                )
            ]
        if msg.tag == TAG_FINAL_Y:
            logits = decode_f64s(msg.payload)
            token = self._sample(logits)
            stream.tokens.append(token)
            token_msg = ProtocolMessage(
                tag=TAG_TOKEN, session_id=msg.session_id, payload=encode_token(token)
            )
            self._queue_outward(token_msg)
            return [serialize(token_msg)]
        if msg.tag == TAG_ABORT:
            stream.alive = False
            return []
        raise ProtocolError(f"user party cannot handle {msg.tag_name} frames")


def user_prefill(
    party: UserParty,
    prompt: TaggedPrompt,
    config: ObfuscationConfig,
    stream_ids: list[int] | None = None,
) -> list[ProtocolMessage]:
    """Build the virtual prompts, prefill them all, release the weights,
    and emit per-stream setup plus first-token messages.

    Raises InsufficientObfuscationError (the obfuscation abort) when fewer
    than lambda_min decoys exist; the weights handle stays valid in that
    case since no stream started.
    """
    weights = party.weights_handle.get()
    party.config = weights.config

    if prompt.spans and config.lambda_max > 0 and config.epsilon > 0:
        fake_sets = multi_segment_gqs(prompt, config, party.oracle)
    else:
        fake_sets = []
    party.vps = build_virtual_prompts(prompt, fake_sets, config, party.user_id)

    prompts = party.vps.prompts
    if stream_ids is None:
        # deterministic per user: stream i of user u is u*2^16 + i
        if not 0 <= party.user_id < 2**16:
            raise ValueError("default stream ids need user_id < 2^16")
        stream_ids = [party.user_id * 2**16 + i for i in range(len(prompts))]
    if len(stream_ids) != len(prompts):
        raise ValueError("need one stream id per prompt")

    messages = []
    c = weights.config
    for stream_id, tokens in zip(stream_ids, prompts):
        cache, logits = prefill(weights, list(tokens))
        private = KvPartition(
            label=PRIVATE,
            k=[
                [cache.k[layer, head, : len(tokens)].copy() for head in range(c.n_heads)]
                for layer in range(c.n_layers)
            ],
            v=[
                [cache.v[layer, head, : len(tokens)].copy() for head in range(c.n_heads)]
                for layer in range(c.n_layers)
            ],
        )
        first = party._sample(logits)
        party.streams[stream_id] = _UserStream(
            stream_id=stream_id, private=private, tokens=[first]
        )
        token_msg = ProtocolMessage(
            tag=TAG_TOKEN, session_id=stream_id, payload=encode_token(first)
        )
        messages.append(
            ProtocolMessage(
                tag=TAG_CONTROL, session_id=stream_id, payload=encode_setup(len(tokens))
            )
        )
        messages.append(token_msg)
        party._queue_outward(token_msg)

    party.weights_handle.release()
    party.pending_setup = list(messages)
    return messages


# -- controller ---------------------------------------------------------


@dataclass(frozen=True)
class GateDecision:
    passed: bool
    reason: str


class Controller:
    """Token inspector at the boundary: only TOKEN frames whose value
    matches the model party's ground truth may exit.

    The very first token of each stream is produced by the user party
    during prefill, before the model has any ground truth for it; exactly
    one unverified token per stream is let through. Under non-greedy
    sampling (mode="support") the gate checks membership in the
    positive-probability support instead of exact equality.
    """

    def __init__(self, mode: str = "exact"):
        if mode not in ("exact", "support"):
            raise ValueError("mode must be 'exact' or 'support'")
        self.mode = mode
        self.expected: dict[int, deque] = {}
        self.first_passed: set[int] = set()
        self.killed: dict[int, str] = {}

    def open_stream(self, stream_id: int):
        self.expected.setdefault(stream_id, deque())

    def register_expected(self, stream_id: int, token: int, support=None):
        self.expected[stream_id].append((token, support))

    def kill(self, stream_id: int, reason: str):
        self.killed[stream_id] = reason

    def gate(self, outbound: ProtocolMessage) -> GateDecision:
        if outbound.tag != TAG_TOKEN:
            return GateDecision(False, f"non-token frame ({outbound.tag_name})")
        stream_id = outbound.session_id
        if stream_id in self.killed:
            return GateDecision(False, "session killed")
        if stream_id not in self.expected:
            return GateDecision(False, "unknown session")
        try:
            token = decode_token(outbound.payload)
        except Exception:
            self.kill(stream_id, "malformed token payload")
            return GateDecision(False, "malformed token payload")
        queue = self.expected[stream_id]
        if not queue:
            if stream_id not in self.first_passed:
                self.first_passed.add(stream_id)
                return GateDecision(True, "first token (pre-decode)")
            self.kill(stream_id, "token without ground truth")
            return GateDecision(False, "token without ground truth")
        expected_token, support = queue.popleft()
        if self.mode == "support" and support is not None:
            if token in support:
                return GateDecision(True, "in support")
        elif token == expected_token:
            return GateDecision(True, "matches ground truth")
        self.kill(stream_id, "token mismatch")
        return GateDecision(False, "token mismatch")


def controller_gate(ctrl: Controller, outbound: ProtocolMessage) -> GateDecision:
    """Apply the boundary policy to one outbound message."""
    return ctrl.gate(outbound)


# -- model party --------------------------------------------------------


@dataclass
class _ModelStream:
    stream_id: int
    prompt_len: int
    pos: int  # absolute position of the next token to process
    public: KvPartition
    # public K/V live in preallocated buffers; the partition holds views
    kbuf: np.ndarray = field(repr=False, default=None)
    vbuf: np.ndarray = field(repr=False, default=None)
    public_len: int = 0
    pending_token: int | None = None
    tokens: list = field(default_factory=list)
    done: bool = False

    def append_public(self, layer: int, k_heads: np.ndarray, v_heads: np.ndarray):
        """Write one position's K/V for all heads and refresh the views."""
        col = self.public_len
        self.kbuf[layer, :, col] = k_heads
        self.vbuf[layer, :, col] = v_heads
        for head in range(self.kbuf.shape[1]):
            self.public.k[layer][head] = self.kbuf[layer, head, : col + 1]
            self.public.v[layer][head] = self.vbuf[layer, head, : col + 1]


class ModelParty:
    """Owns the weights and, per stream, only public state: generated
    tokens and their KV rows. Never sees a private K/V row.

    stop_at_eos=False decodes fixed-length responses (bench workloads).
    """

    def __init__(self, weights: Weights, stop_at_eos: bool = True):
        self.weights = weights
        self.config = weights.config
        self.stop_at_eos = stop_at_eos
        self.streams: dict[int, _ModelStream] = {}

    def handle_user_frame(self, msg: ProtocolMessage):
        c = self.config
        if msg.tag == TAG_CONTROL:
            if msg.session_id in self.streams:
                raise ProtocolError(f"stream {msg.session_id} registered twice")
            prompt_len = decode_setup(msg.payload)
            shape = (c.n_layers, c.n_heads, max(c.max_seq - prompt_len, 1), c.head_dim)
            self.streams[msg.session_id] = _ModelStream(
                stream_id=msg.session_id,
                prompt_len=prompt_len,
                pos=prompt_len,
                public=KvPartition.empty(PUBLIC, c.n_layers, c.n_heads, c.head_dim),
                kbuf=np.zeros(shape),
                vbuf=np.zeros(shape),
            )
            return
        if msg.tag == TAG_TOKEN:
            stream = self.streams.get(msg.session_id)
            if stream is None:
                raise ProtocolError(f"token for unregistered stream {msg.session_id}")
            if stream.pending_token is not None:
                raise ProtocolError("duplicate token before a decode round")
            self._accept_token(stream, decode_token(msg.payload))
            return
        raise ProtocolError(f"model party cannot handle {msg.tag_name} frames")

    def _accept_token(self, stream: _ModelStream, token: int):
        stream.pending_token = token
        stream.tokens.append(token)
        if self.stop_at_eos and token == self.config.eos_token:
            stream.done = True

    def active_streams(self) -> list[int]:
        return [
            s.stream_id
            for s in self.streams.values()
            if not s.done and s.pending_token is not None and s.pos < self.config.max_seq
        ]

    def ground_truth(self, stream_id: int) -> list[int]:
        return list(self.streams[stream_id].tokens)


def _expect_partial(link, stream_id: int, layer: int, head: int) -> PartialAttention:
    msg = deserialize(link.recv())
    if (
        msg.tag != TAG_PARTIAL
        or msg.session_id != stream_id
        or msg.layer != layer
        or msg.head != head
    ):
        raise ProtocolError(
            f"out-of-order reply: expected PARTIAL {stream_id}/{layer}/{head}, "
            f"got {msg.tag_name} {msg.session_id}/{msg.layer}/{msg.head}"
        )
    scalars = decode_f64s(msg.payload)
    return PartialAttention(a=scalars[:-2], gamma=float(scalars[-2]), m=float(scalars[-1]))


def _merge_batch(pvt: list[PartialAttention], pub: list[PartialAttention]) -> np.ndarray:
    """Vectorized merge of per-stream partial pairs; same arithmetic as
    merge_partials, which the in-protocol partials (both sides non-empty)
    always satisfy."""
    a1 = np.stack([p.a for p in pvt])
    a2 = np.stack([p.a for p in pub])
    m1 = np.array([p.m for p in pvt])
    m2 = np.array([p.m for p in pub])
    m = np.maximum(m1, m2)
    g1 = np.array([p.gamma for p in pvt]) * np.exp(m1 - m)
    g2 = np.array([p.gamma for p in pub]) * np.exp(m2 - m)
    total = g1 + g2
    return (g1 / total)[:, None] * a1 + (g2 / total)[:, None] * a2


def _expect_token(link, stream_id: int) -> int:
    msg = deserialize(link.recv())
    if msg.tag != TAG_TOKEN or msg.session_id != stream_id:
        raise ProtocolError(
            f"out-of-order reply: expected TOKEN for {stream_id}, "
            f"got {msg.tag_name} {msg.session_id}"
        )
    return decode_token(msg.payload)


def model_batch_step(
    model: ModelParty,
    sessions: list[tuple[int, object]],
    controller: Controller | None = None,
    step: int = 1,
) -> dict[int, int]:
    """Advance every listed (stream_id, link) pair by one token in one
    batched pass.

    All per-stream trunk math (projections, merge, MLP, logits) runs
    stacked across streams, and public partials go through
    batched_public_partials; the resulting tokens are identical to running
    each stream alone. Returns the token each user party fed back.
    """
    c = model.config
    w = model.weights
    live = [
        (sid, link)
        for sid, link in sessions
        if sid in model.streams
        and not model.streams[sid].done
        and model.streams[sid].pending_token is not None
    ]
    if not live:
        return {}
    states = [model.streams[sid] for sid, _ in live]
    for st in states:
        if st.pos >= c.max_seq:
            raise ProtocolError(f"stream {st.stream_id} ran past max_seq")
    for _, link in live:
        link.step = step

    positions = np.array([st.pos for st in states])
    x = w.embed[[st.pending_token for st in states]]
    for st in states:
        st.pending_token = None
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

        for i, st in enumerate(states):
            st.append_public(layer, k[:, i], v[:, i])

        for i, (sid, link) in enumerate(live):
            for head in range(c.n_heads):
                link.send(
                    serialize(
                        ProtocolMessage(
                            tag=TAG_QUERY,
                            session_id=sid,
                            layer=layer,
                            head=head,
                            payload=encode_f64s(q[head, i]),
                        )
                    )
                )
        pvt = {
            (sid, head): _expect_partial(link, sid, layer, head)
            for (sid, link) in live
            for head in range(c.n_heads)
        }

        merged = np.empty((B, c.d_model))
        for head in range(c.n_heads):
            pub = batched_public_partials(q[head], [st.public for st in states], layer, head)
            pvt_head = [pvt[(sid, head)] for sid, _ in live]
            merged[:, head * c.head_dim : (head + 1) * c.head_dim] = _merge_batch(
                pvt_head, pub
            )
        x = x + merged @ lw.wo
        x = x + _silu(_rms_norm(x, lw.gain_mlp) @ lw.w_in) @ lw.w_out

    logits = _rms_norm(x, w.final_gain) @ w.unembed

    returned: dict[int, int] = {}
    for i, (sid, link) in enumerate(live):
        st = states[i]
        if controller is not None:
            expected = sample_token(logits[i])
            support = set(np.nonzero(stable_softmax_stats(logits[i]).weights > 0)[0].tolist())
            controller.register_expected(sid, expected, support)
        link.send(
            serialize(
                ProtocolMessage(
                    tag=TAG_FINAL_Y, session_id=sid, payload=encode_f64s(logits[i])
                )
            )
        )
        token = _expect_token(link, sid)
        model._accept_token(st, token)
        st.pos += 1
        st.public_len += 1
        if st.pos >= c.max_seq:
            st.done = True
        returned[sid] = token
    return returned


# -- session drivers ----------------------------------------------------


def _route_outward(user: UserParty, ctrl: Controller, transcript: Transcript, step: int):
    """Push the user party's outward messages through the gate."""
    killed_now = []
    for msg in user.take_outward():
        decision = controller_gate(ctrl, msg)
        transcript.record("out" if decision.passed else "blk", step, serialize(msg))
        transcript.gate_log.append((step, msg.session_id, decision.passed, decision.reason))
        if decision.passed:
            transcript.tokens.setdefault(msg.session_id, []).append(
                decode_token(msg.payload)
            )
        elif msg.session_id in ctrl.killed:
            killed_now.append(msg.session_id)
            transcript.killed[msg.session_id] = ctrl.killed[msg.session_id]
    return killed_now


def _abort_stream(model: ModelParty, user: UserParty, link, stream_id: int):
    if stream_id in model.streams:
        model.streams[stream_id].done = True
    abort = serialize(ProtocolMessage(tag=TAG_ABORT, session_id=stream_id))
    link.send(abort)


def run_sessions(
    model: ModelParty,
    ctrl: Controller,
    users_links: list[tuple[UserParty, object]],
    max_tokens: int,
    transcript: Transcript,
) -> Transcript:
    """Drive all sessions in lockstep token rounds until EOS/max_tokens.

    Every user must already have completed user_prefill; their setup
    messages are ingested here, then each round advances all active
    streams of all users in one batched model step.
    """
    link_of: dict[int, object] = {}
    for user, link in users_links:
        for msg in user.pending_setup:
            transcript.record("u2m", 0, serialize(msg))
            model.handle_user_frame(msg)
            if msg.tag == TAG_CONTROL:
                ctrl.open_stream(msg.session_id)
        user.pending_setup = []
        for sid in user.streams:
            link_of[sid] = link
        for sid in _route_outward(user, ctrl, transcript, 0):
            _abort_stream(model, user, link, sid)

    for step in range(1, max_tokens + 1):
        pairs = [(sid, link_of[sid]) for sid in model.active_streams() if sid in link_of]
        if not pairs:
            break
        model_batch_step(model, pairs, controller=ctrl, step=step)
        for user, link in users_links:
            for sid in _route_outward(user, ctrl, transcript, step):
                _abort_stream(model, user, link, sid)
    return transcript


def run_decode_session(
    user: UserParty,
    model: ModelParty,
    ctrl: Controller,
    max_tokens: int,
    transport: str = "inproc",
) -> Transcript:
    """Run one user's streams to completion and return the transcript.

    transport="inproc" exchanges frames through an in-process conduit;
    transport="socket" moves the same frames over a localhost TCP stream
    with the user party served from a thread.
    """
    transcript = Transcript(config=model.config)
    if transport == "inproc":
        link = InProcLink(user.handle_frame, transcript)
        return run_sessions(model, ctrl, [(user, link)], max_tokens, transcript)
    if transport != "socket":
        raise ValueError(f"unknown transport {transport!r}")

    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    setup_count = len(user.pending_setup)

    def serve():
        conn, _ = listener.accept()
        with conn:
            serve_user_party(user, conn)

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    client = socket.create_connection(("127.0.0.1", port))
    try:
        link = SocketLink(client, transcript)
        # the serve loop announces the prefill messages over the wire;
        # link.recv records them as u2m traffic
        setup_msgs = [deserialize(link.recv()) for _ in range(setup_count)]
        for msg in setup_msgs:
            model.handle_user_frame(msg)
            if msg.tag == TAG_CONTROL:
                ctrl.open_stream(msg.session_id)
        for sid in _route_outward(user, ctrl, transcript, 0):
            _abort_stream(model, user, link, sid)
        for step in range(1, max_tokens + 1):
            pairs = [(sid, link) for sid in model.active_streams() if sid in user.streams]
            if not pairs:
                break
            model_batch_step(model, pairs, controller=ctrl, step=step)
            for sid in _route_outward(user, ctrl, transcript, step):
                _abort_stream(model, user, link, sid)
    finally:
        client.close()
        thread.join(timeout=5)
        listener.close()
    return transcript


# -- communication accounting -------------------------------------------


@dataclass
class CommReport:
    """Exact message/byte/scalar accounting of one transcript.

    rows: (step, stream, layer, direction, messages, scalars, bytes) for
    the attention exchange (QUERY and PARTIAL frames). A per-head PARTIAL
    carries head_dim + 2 scalars — the weighted-value vector plus the
    softmax denominator and its running max; the running max rides along
    so the merge can rescale safely, which is why each round costs
    2*head_dim + 2 scalars per head rather than a bare 2*head_dim + 1.
    """

    rows: list
    query_scalars_per_round: int
    partial_scalars_per_round: int
    round_scalars_per_round: int
    final_scalars_per_round: int
    constant_per_round: bool
    total_bytes: int
    steps: int
    note: str = (
        "per-head partial = head_dim + 2 scalars (weighted values, denominator, "
        "running max); the running max is transmitted for numerically safe merging"
    )

    def expected_round_scalars(self, config: ModelConfig) -> int:
        return config.n_layers * config.n_heads * (2 * config.head_dim + 2)

    def to_text(self) -> str:
        lines = [
            f"decode rounds: {self.steps}",
            f"query scalars per stream-round: {self.query_scalars_per_round}",
            f"partial scalars per stream-round: {self.partial_scalars_per_round}",
            f"attention-exchange scalars per stream-round: {self.round_scalars_per_round}",
            f"final-distribution scalars per stream-round: {self.final_scalars_per_round}",
            f"constant across rounds: {self.constant_per_round}",
            f"total bytes on the wire: {self.total_bytes}",
            f"note: {self.note}",
        ]
        return "\n".join(lines)


def comm_accounting(transcript: Transcript) -> CommReport:
    """Tally per-token, per-layer, per-direction traffic of the decode
    rounds and check that the per-round scalar count is constant."""
    per_cell: dict[tuple, list] = {}
    per_round: dict[tuple, dict] = {}
    total_bytes = 0
    for e in transcript.entries:
        total_bytes += e.nbytes
        if e.step < 1 or e.tag not in (TAG_QUERY, TAG_PARTIAL, TAG_FINAL_Y):
            continue
        scalars = e.payload_len // 8
        key = (e.step, e.session_id)
        agg = per_round.setdefault(key, {"query": 0, "partial": 0, "final": 0})
        if e.tag == TAG_QUERY:
            agg["query"] += scalars
        elif e.tag == TAG_PARTIAL:
            agg["partial"] += scalars
        else:
            agg["final"] += scalars
        if e.tag in (TAG_QUERY, TAG_PARTIAL):
            cell = per_cell.setdefault(
                (e.step, e.session_id, e.layer, e.direction), [0, 0, 0]
            )
            cell[0] += 1
            cell[1] += scalars
            cell[2] += e.nbytes

    rows = [
        (step, stream, layer, direction, msgs, scalars, nbytes)
        for (step, stream, layer, direction), (msgs, scalars, nbytes) in sorted(
            per_cell.items()
        )
    ]
    queries = {agg["query"] for agg in per_round.values()}
    partials = {agg["partial"] for agg in per_round.values()}
    finals = {agg["final"] for agg in per_round.values()}
    constant = len(queries) <= 1 and len(partials) <= 1 and len(finals) <= 1
    steps = len({step for step, _ in per_round})
    return CommReport(
        rows=rows,
        query_scalars_per_round=next(iter(queries), 0),
        partial_scalars_per_round=next(iter(partials), 0),
        round_scalars_per_round=next(iter(queries), 0) + next(iter(partials), 0),
        final_scalars_per_round=next(iter(finals), 0),
        constant_per_round=constant,
        total_bytes=total_bytes,
        steps=steps,
    )
