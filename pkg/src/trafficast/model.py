"""The forecasting network.

Encoder: one GRU parameter set, run per node over the recent window R and
over every daily/weekly context block. The R pass ends in the decoder's
initial state; the block passes leave a bank of hidden states per block
that attention indexes later.

Decoder, per forecast step t: a GRU (separate parameters) advances on its
own previous output, attention pools a (2S+1)-wide window from each bank
around the position aligned with t, and a graph-convolutional GRU mixes
nodes. An affine layer maps its state to the forecast. The attention and
graph stages can be swapped (`order`), and each mechanism has an off
switch so its contribution can be measured.

Everything here runs on the tape from `tensor`; data enters as constant
tensors, parameters carry requires_grad.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from trafficast import tensor as tc
from trafficast.data import parse_tensor_blob, tensor_blob
from trafficast.graph import NodeEmbeddings, adaptive_adjacency
from trafficast.tensor import ShapeError, Tensor

ORDERS = ("attention_then_dgc", "dgc_then_attention")


class ModelError(ValueError):
    """Invalid configuration or out-of-range argument."""


@dataclass
class ModelConfig:
    d_h: int = 64
    d_e: int = 8
    n_head: int = 8
    K: int = 2
    w_pre: float = 0.1
    w_adp: float = 0.9
    P: int = 12
    Q: int = 12
    S: int = 3
    d_count: int = 1
    w_count: int = 1
    l_d: int = 288
    l_w: int = 2016
    no_pre: bool = False
    no_adp: bool = False
    no_window: bool = False
    no_period: bool = False
    order: str = "attention_then_dgc"

    def __post_init__(self):
        if self.n_head < 1:
            raise ModelError(f"n_head must be >= 1, got {self.n_head}")
        if self.K < 1:
            raise ModelError(f"K must be >= 1, got {self.K}")
        if self.d_h < 1 or self.d_e < 1:
            raise ModelError(f"d_h and d_e must be >= 1, got {self.d_h}, {self.d_e}")
        if self.w_pre < 0 or self.w_adp < 0:
            raise ModelError(
                f"fusion weights must be >= 0, got {self.w_pre}, {self.w_adp}"
            )
        if self.P < 1 or self.Q < 1 or self.S < 0:
            raise ModelError(f"bad windowing P={self.P} Q={self.Q} S={self.S}")
        if self.P < self.S:
            raise ModelError(
                f"P ({self.P}) must be >= S ({self.S}): the attention window at "
                "step 0 reaches S positions before the aligned bank index P"
            )
        if self.d_count < 1 or self.w_count < 1:
            raise ModelError("d_count and w_count must be >= 1")
        if self.order not in ORDERS:
            raise ModelError(f"order must be one of {ORDERS}, got {self.order!r}")

    @property
    def bank_len(self) -> int:
        return self.P + self.Q + self.S


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """One GRU's six tensors: update/reset/candidate weights and biases."""

    wz: Tensor
    bz: Tensor
    wr: Tensor
    br: Tensor
    wc: Tensor
    bc: Tensor


@dataclass
class AttentionParams:
    w1: Tensor
    w2: Tensor
    b: Tensor
    v: Tensor


@dataclass
class DgcGateParams:
    """One gate's two hop-weight stacks (index k = 0..K) and bias."""

    pre: List[Tensor]
    adp: List[Tensor]
    bias: Tensor


@dataclass
class ModelState:
    """All trainable tensors, keyed by stable dotted names.

    Insertion order is the checkpoint and optimizer order; it must not
    depend on config flags so ablations stay checkpoint-compatible.
    """

    config: ModelConfig
    n_nodes: int
    n_channels: int
    params: Dict[str, Tensor]

    def named_parameters(self):
        return self.params.items()

    def gru(self, prefix: str) -> GruParams:
        p = self.params
        return GruParams(
            wz=p[f"{prefix}.update.weight"], bz=p[f"{prefix}.update.bias"],
            wr=p[f"{prefix}.reset.weight"], br=p[f"{prefix}.reset.bias"],
            wc=p[f"{prefix}.cand.weight"], bc=p[f"{prefix}.cand.bias"],
        )

    def attention(self) -> AttentionParams:
        p = self.params
        return AttentionParams(p["attn.w1"], p["attn.w2"], p["attn.b"], p["attn.v"])

    def dgc_gate(self, gate: str) -> DgcGateParams:
        p = self.params
        k_max = self.config.K
        return DgcGateParams(
            pre=[p[f"dgc.{gate}.pre.hop{k}"] for k in range(k_max + 1)],
            adp=[p[f"dgc.{gate}.adp.hop{k}"] for k in range(k_max + 1)],
            bias=p[f"dgc.{gate}.bias"],
        )

    def embeddings(self) -> NodeEmbeddings:
        return NodeEmbeddings(self.params["embed.e1"], self.params["embed.e2"])


def init_model(cfg: ModelConfig, n_nodes: int, n_channels: int, seed: int) -> ModelState:
    """Seeded init: weights uniform +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}

    def weight(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True
        )

    def bias(name, width):
        params[name] = Tensor(np.zeros(width), requires_grad=True)

    d_h, c = cfg.d_h, n_channels
    for prefix, d_in in (("encoder", c + d_h), ("decoder", c + d_h)):
        for gate in ("update", "reset", "cand"):
            weight(f"{prefix}.{gate}.weight", d_in, d_h)
            bias(f"{prefix}.{gate}.bias", d_h)

    # attention inner width follows the hidden size
    weight("attn.w1", d_h, d_h)
    weight("attn.w2", d_h, d_h)
    bias("attn.b", d_h)
    bound = 1.0 / np.sqrt(d_h)
    params["attn.v"] = Tensor(rng.uniform(-bound, bound, size=d_h), requires_grad=True)

    for gate in ("update", "reset", "cand"):
        for branch in ("pre", "adp"):
            for k in range(cfg.K + 1):
                weight(f"dgc.{gate}.{branch}.hop{k}", 2 * d_h, d_h)
        bias(f"dgc.{gate}.bias", d_h)

    e_bound = 1.0 / np.sqrt(cfg.d_e)
    shape = (n_nodes, cfg.n_head, cfg.d_e)
    params["embed.e1"] = Tensor(rng.uniform(-e_bound, e_bound, size=shape), requires_grad=True)
    params["embed.e2"] = Tensor(rng.uniform(-e_bound, e_bound, size=shape), requires_grad=True)

    weight("out.weight", d_h, n_channels)
    bias("out.bias", n_channels)
    return ModelState(config=cfg, n_nodes=n_nodes, n_channels=n_channels, params=params)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

def _gate_mix(z: Tensor, h: Tensor, cand: Tensor) -> Tensor:
    # (1 - z) * h + z * cand, written as h - z*h + z*cand so every op is
    # an equal-shape binary
    return tc.add(tc.sub(h, tc.mul(z, h)), tc.mul(z, cand))


def gru_cell(params: GruParams, x: Tensor, h: Tensor) -> Tensor:
    """h' = (1-z) * h + z * tanh(Wc [x, r*h] + bc), z/r sigmoid over [x, h]."""
    if x.shape[1] + h.shape[1] != params.wz.shape[0]:
        raise ShapeError(
            f"gru_cell width mismatch: input {x.shape[1]} + state {h.shape[1]} "
            f"!= weight rows {params.wz.shape[0]}"
        )
    xh = tc.concat([x, h], axis=1)
    z = tc.sigmoid(tc.add(tc.matmul(xh, params.wz), params.bz))
    r = tc.sigmoid(tc.add(tc.matmul(xh, params.wr), params.br))
    xrh = tc.concat([x, tc.mul(r, h)], axis=1)
    cand = tc.tanh(tc.add(tc.matmul(xrh, params.wc), params.bc))
    return _gate_mix(z, h, cand)


def _run_gru(params: GruParams, steps: List[Tensor], h0: Tensor, keep_all: bool):
    h = h0
    states = []
    for x_t in steps:
        h = gru_cell(params, x_t, h)
        if keep_all:
            states.append(h)
    return h, states


def encode(
    state: ModelState, r: np.ndarray, d: np.ndarray, w: np.ndarray
) -> Tuple[Tensor, List[List[Tensor]]]:
    """Shared-parameter GRU passes over R and the periodic blocks.

    Returns the final R state [B*N, d_h] (decoder init) and one hidden
    bank per block, each a list of P+L states. Banks are ordered daily
    blocks first, then weekly, both most-distant-first (matching the data
    layout). Empty when periodic context is switched off.
    """
    cfg = state.config
    b, p_len, n, c = r.shape
    if p_len != cfg.P:
        raise ShapeError(f"R has {p_len} steps, config says P={cfg.P}")
    enc = state.gru("encoder")
    h0 = Tensor(np.zeros((b * n, cfg.d_h)))

    r_steps = [Tensor(np.ascontiguousarray(r[:, t]).reshape(b * n, c)) for t in range(p_len)]
    h_final, _ = _run_gru(enc, r_steps, h0, keep_all=False)

    banks: List[List[Tensor]] = []
    if not cfg.no_period:
        if d.shape[1] != cfg.d_count or w.shape[1] != cfg.w_count:
            raise ShapeError(
                f"expected {cfg.d_count} daily and {cfg.w_count} weekly blocks, "
                f"got {d.shape[1]} and {w.shape[1]}"
            )
        if d.shape[2] != cfg.bank_len:
            raise ShapeError(
                f"block length {d.shape[2]} != P+Q+S = {cfg.bank_len}"
            )
        for source in (d, w):
            for block in range(source.shape[1]):
                steps = [
                    Tensor(np.ascontiguousarray(source[:, block, t]).reshape(b * n, c))
                    for t in range(source.shape[2])
                ]
                _, bank = _run_gru(enc, steps, h0, keep_all=True)
                banks.append(bank)
    return h_final, banks


def attention_step(
    h_t: Tensor,
    banks: List[List[Tensor]],
    t: int,
    cfg: ModelConfig,
    params: AttentionParams,
) -> Tuple[Tensor, Optional[Tensor]]:
    """Pool periodic hidden states around the position aligned with step t.

    Bank index P+t is the prior-day/week state at the same clock offset as
    forecast step t; the window takes offsets -S..+S around it (just the
    aligned state when windowing is off). Scores are v' tanh(W1 h + W2 h_p
    + b) per candidate, softmaxed per node; the context adds residually.
    Returns (a_t, weights) with weights [B*N, n_candidates], or (h_t, None)
    when periodic context is off.
    """
    if not 0 <= t < cfg.Q:
        raise ModelError(f"step {t} out of range for Q={cfg.Q}")
    if cfg.no_period or not banks:
        return h_t, None

    offsets = (0,) if cfg.no_window else tuple(range(-cfg.S, cfg.S + 1))
    center = cfg.P + t
    candidates = [bank[center + off] for bank in banks for off in offsets]

    query = tc.matmul(h_t, params.w1)
    scores = []
    for h_p in candidates:
        pre = tc.add(tc.add(query, tc.matmul(h_p, params.w2)), params.b)
        scores.append(tc.matmul(tc.tanh(pre), tc.reshape(params.v, (params.v.shape[0], 1))))
    weights = tc.softmax(tc.concat(scores, axis=1), axis=1)

    d_h = h_t.shape[1]
    ones_row = Tensor(np.ones((1, d_h)))
    context = None
    for p, h_p in enumerate(candidates):
        w_col = tc.slice_axis(weights, 1, p, p + 1)
        term = tc.mul(tc.matmul(w_col, ones_row), h_p)
        context = term if context is None else tc.add(context, term)
    return tc.add(h_t, context), weights


# ---------------------------------------------------------------------------
# double graph convolution
# ---------------------------------------------------------------------------

def _mix(adj: Tensor, x3: Tensor, b: int, n: int, d: int) -> Tensor:
    """Left-multiply each batch element's [N, d] signal by adj [N, N]."""
    xt = tc.reshape(tc.transpose(x3, (1, 0, 2)), (n, b * d))
    mixed = tc.matmul(adj, xt)
    return tc.transpose(tc.reshape(mixed, (n, b, d)), (1, 0, 2))


def adaptive_mix_mats(emb: NodeEmbeddings, cfg: ModelConfig) -> List[Optional[Tensor]]:
    """Head-averaged adjacency powers M_k = mean_i A_i^k for k = 0..K.

    The k-hop chain averaged over heads collapses to these: with shared
    hop weights, mean_i(A_i^k x) W^k = (M_k x) W^k. M_0 is the identity,
    returned as None so callers skip the multiply. Computed once per
    forward pass and reused by every gate at every step.
    """
    mats: List[Optional[Tensor]] = [None]
    adjs = [adaptive_adjacency(emb, i).matrix for i in range(cfg.n_head)]
    powers = adjs
    inv = Tensor([1.0 / cfg.n_head])
    for k in range(1, cfg.K + 1):
        total = powers[0]
        for a in powers[1:]:
            total = tc.add(total, a)
        mats.append(tc.mul(total, inv))
        if k < cfg.K:
            powers = [tc.matmul(a, p) for a, p in zip(adjs, powers)]
    return mats


def _precompute_adaptive(state: ModelState) -> List[Optional[Tensor]]:
    cfg = state.config
    if cfg.no_adp and not cfg.no_pre:
        return []
    if cfg.no_adp and cfg.no_pre:
        return [None] * (cfg.K + 1)  # identity stand-in
    return adaptive_mix_mats(state.embeddings(), cfg)


def pre_mix_mats(a_pre: Optional[np.ndarray], cfg: ModelConfig) -> List[Optional[Tensor]]:
    """Constant powers of the predefined adjacency, identity first (None)."""
    if cfg.no_pre and not cfg.no_adp:
        return []
    if cfg.no_pre and cfg.no_adp:
        return [None] * (cfg.K + 1)
    if a_pre is None:
        raise ModelError("predefined adjacency required unless its branch is off")
    mats: List[Optional[Tensor]] = [None]
    power = a_pre
    for _ in range(1, cfg.K + 1):
        mats.append(Tensor(power))
        power = power @ a_pre
    return mats


def _hop_sum(x3: Tensor, mats: List[Optional[Tensor]], hops: List[Tensor],
             b: int, n: int, d_in: int, d_h: int) -> Tensor:
    acc = None
    for k, w_k in enumerate(hops):
        term = x3 if mats[k] is None else _mix(mats[k], x3, b, n, d_in)
        out = tc.matmul(tc.reshape(term, (b * n, d_in)), w_k)
        acc = out if acc is None else tc.add(acc, out)
    return tc.reshape(acc, (b, n, d_h))


def double_graph_conv(
    x3: Tensor,
    pre_mats: List[Optional[Tensor]],
    adp_mats: List[Optional[Tensor]],
    gate: DgcGateParams,
    cfg: ModelConfig,
) -> Tensor:
    """w_pre * sum_k (A_pre^k x) Wpre_k + w_adp * sum_k (M_k x) Wadp_k.

    Branch switches drop a term entirely; with both off, both branches run
    with identity adjacencies (no node mixing), which reduces the layer to
    a per-node dense map. Mixing matrices come in precomputed (pre_mix_mats
    / adaptive_mix_mats) since they are shared across gates and steps.
    """
    b, n, d_in = x3.shape
    d_h = gate.bias.shape[0]
    both_off = cfg.no_pre and cfg.no_adp
    acc = None
    if not cfg.no_pre or both_off:
        o_pre = _hop_sum(x3, pre_mats, gate.pre, b, n, d_in, d_h)
        acc = tc.mul(o_pre, Tensor([cfg.w_pre]))
    if not cfg.no_adp or both_off:
        o_adp = _hop_sum(x3, adp_mats, gate.adp, b, n, d_in, d_h)
        scaled = tc.mul(o_adp, Tensor([cfg.w_adp]))
        acc = scaled if acc is None else tc.add(acc, scaled)
    return acc


def dgcgru_cell(
    state: ModelState,
    x3: Tensor,
    h3: Tensor,
    pre_mats: List[Optional[Tensor]],
    adp_mats: List[Optional[Tensor]],
) -> Tensor:
    """GRU step whose gate transforms are double graph convolutions."""
    if x3.shape != h3.shape:
        raise ShapeError(f"dgcgru input {list(x3.shape)} != state {list(h3.shape)}")
    cfg = state.config
    xh = tc.concat([x3, h3], axis=2)
    z = tc.sigmoid(tc.add(
        double_graph_conv(xh, pre_mats, adp_mats, state.dgc_gate("update"), cfg),
        state.params["dgc.update.bias"],
    ))
    r = tc.sigmoid(tc.add(
        double_graph_conv(xh, pre_mats, adp_mats, state.dgc_gate("reset"), cfg),
        state.params["dgc.reset.bias"],
    ))
    xrh = tc.concat([x3, tc.mul(r, h3)], axis=2)
    cand = tc.tanh(tc.add(
        double_graph_conv(xrh, pre_mats, adp_mats, state.dgc_gate("cand"), cfg),
        state.params["dgc.cand.bias"],
    ))
    return _gate_mix(z, h3, cand)


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    predictions: Tensor                       # [B, Q, N, C]
    decoder_hiddens: List[Tensor] = field(default_factory=list)
    attention_outputs: List[Tensor] = field(default_factory=list)
    attention_weights: List[Optional[Tensor]] = field(default_factory=list)
    banks: List[List[Tensor]] = field(default_factory=list)


def forward(
    state: ModelState,
    r: np.ndarray,
    d: np.ndarray,
    w: np.ndarray,
    a_pre: Optional[np.ndarray] = None,
    y: Optional[np.ndarray] = None,
    teacher_forcing: bool = False,
) -> ForwardTrace:
    """Unroll the full network over Q forecast steps.

    The decoder feeds on its own previous projection (teacher_forcing
    swaps in the ground truth y, normalized scale). Per step: decoder GRU
    advances, then attention and the graph GRU run in the configured
    order, then the output affine produces that step's forecast.
    """
    cfg = state.config
    b, _, n, c = r.shape
    if n != state.n_nodes or c != state.n_channels:
        raise ShapeError(
            f"batch is {n} nodes x {c} channels, model was built for "
            f"{state.n_nodes} x {state.n_channels}"
        )
    if teacher_forcing and y is None:
        raise ModelError("teacher_forcing requires y")

    h, banks = encode(state, r, d, w)
    pre_mats = pre_mix_mats(a_pre, cfg)
    adp_mats = _precompute_adaptive(state)
    dec = state.gru("decoder")
    attn = state.attention()
    w_out, b_out = state.params["out.weight"], state.params["out.bias"]

    g = Tensor(np.zeros((b, n, cfg.d_h)))
    x_in = Tensor(np.ascontiguousarray(r[:, -1]).reshape(b * n, c))
    trace = ForwardTrace(predictions=None, banks=banks)
    step_preds = []
    for t in range(cfg.Q):
        h = gru_cell(dec, x_in, h)
        trace.decoder_hiddens.append(h)
        if cfg.order == "attention_then_dgc":
            a_t, w_t = attention_step(h, banks, t, cfg, attn)
            g = dgcgru_cell(state, tc.reshape(a_t, (b, n, cfg.d_h)), g, pre_mats, adp_mats)
            y_t = tc.add(tc.matmul(tc.reshape(g, (b * n, cfg.d_h)), w_out), b_out)
        else:
            g = dgcgru_cell(state, tc.reshape(h, (b, n, cfg.d_h)), g, pre_mats, adp_mats)
            a_t, w_t = attention_step(tc.reshape(g, (b * n, cfg.d_h)), banks, t, cfg, attn)
            y_t = tc.add(tc.matmul(a_t, w_out), b_out)
        trace.attention_outputs.append(a_t)
        trace.attention_weights.append(w_t)
        step_preds.append(tc.reshape(y_t, (b, 1, n, c)))
        if t + 1 < cfg.Q:
            if teacher_forcing:
                x_in = Tensor(np.ascontiguousarray(y[:, t]).reshape(b * n, c))
            else:
                x_in = y_t
    trace.predictions = step_preds[0] if cfg.Q == 1 else tc.concat(step_preds, axis=1)
    return trace


# ---------------------------------------------------------------------------
# checkpoints: text manifest, then one binary tensor blob per parameter
# ---------------------------------------------------------------------------

CKPT_HEADER = b"STGC-CKPT 1"


def save_checkpoint(state: ModelState, path) -> None:
    names = list(state.params)
    lines = [CKPT_HEADER + b" %d" % len(names)]
    for name in names:
        t = state.params[name]
        dims = ",".join(str(int(s)) for s in t.shape)
        lines.append(f"{name},{len(t.shape)},{dims}".encode("ascii"))
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n")
        for name in names:
            fh.write(tensor_blob(state.params[name].data))


def load_checkpoint(path, state: ModelState) -> None:
    """Load parameters into an existing state (shapes must match)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    first_nl = raw.index(b"\n")
    header = raw[:first_nl]
    if not header.startswith(CKPT_HEADER):
        raise ModelError(f"{path}: not a checkpoint file (header {header[:20]!r})")
    count = int(header.rsplit(b" ", 1)[1])
    offset = first_nl + 1
    names = []
    for _ in range(count):
        nl = raw.index(b"\n", offset)
        names.append(raw[offset:nl].decode("ascii").split(",")[0])
        offset = nl + 1
    if names != list(state.params):
        missing = set(state.params) - set(names)
        extra = set(names) - set(state.params)
        raise ModelError(
            f"{path}: parameter names do not match the model "
            f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for name in names:
        arr, offset = parse_tensor_blob(raw, offset, origin=str(path))
        if tuple(arr.shape) != state.params[name].shape:
            raise ModelError(
                f"{path}: {name} has shape {list(arr.shape)}, "
                f"model expects {list(state.params[name].shape)}"
            )
        state.params[name].data[...] = arr
