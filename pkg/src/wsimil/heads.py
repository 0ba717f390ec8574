"""The two trainable attention MIL heads.

``dsmil_forward`` is the dual-stream aggregator over patch bags: an
instance classifier picks the critical instance, queries are scored
against the critical query by inner product, and the bag logit is the
mean of the critical-instance logit and a classifier over the
attention-weighted value sum.

``transformer_forward`` is a single pre-norm transformer encoder layer
over region bags with a class token, multi-head self-attention and no
positional encoding (regions are unordered biopsy fragments, which makes
permutation equivariance a testable property). Region embeddings pass
through a learned input projection so the model width is always a
multiple of the head count regardless of the incoming embedding size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MilOutput:
    """Bag-level prediction plus per-instance attention."""

    bag_logit: float
    raw_attention: np.ndarray  # (N,), sums to 1
    instance_attention: np.ndarray  # (N,), min-max normalized to [0, 1]
    instance_logits: np.ndarray  # (N,)
    critical_index: int


def normalize_attention(raw) -> np.ndarray:
    """Min-max normalize a probability vector to [0, 1].

    Constant input (including single-instance bags) maps to 0.5 everywhere.
    """
    a = np.asarray(raw, dtype=np.float64).reshape(-1)
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < 1e-12:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# dual-stream MIL


@dataclass
class DsmilParams:
    inst_w: Tensor  # (D, 1)
    inst_b: Tensor  # (1,)
    query_w: Tensor  # (D, Dq)
    query_b: Tensor  # (Dq,)
    value_w: Tensor  # (D, Dv)
    value_b: Tensor  # (Dv,)
    bag_w: Tensor  # (Dv, 1)
    bag_b: Tensor  # (1,)

    @property
    def dim(self) -> int:
        return self.inst_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "inst_w": self.inst_w,
            "inst_b": self.inst_b,
            "query_w": self.query_w,
            "query_b": self.query_b,
            "value_w": self.value_w,
            "value_b": self.value_b,
            "bag_w": self.bag_w,
            "bag_b": self.bag_b,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "DsmilParams":
        return cls(**{k: ad.parameter(v, k) for k, v in arrays.items()})


def init_dsmil(rng: np.random.Generator, dim: int, query_dim: int | None = None,
               value_dim: int | None = None) -> DsmilParams:
    dq = query_dim or dim
    dv = value_dim or dim
    zeros = lambda n, name: ad.parameter(np.zeros(n, dtype=np.float32), name)
    return DsmilParams(
        inst_w=ad.parameter(ad.xavier_uniform(rng, dim, 1), "inst_w"),
        inst_b=zeros(1, "inst_b"),
        query_w=ad.parameter(ad.xavier_uniform(rng, dim, dq), "query_w"),
        query_b=zeros(dq, "query_b"),
        value_w=ad.parameter(ad.xavier_uniform(rng, dim, dv), "value_w"),
        value_b=zeros(dv, "value_b"),
        bag_w=ad.parameter(ad.xavier_uniform(rng, dv, 1), "bag_w"),
        bag_b=zeros(1, "bag_b"),
    )


@dataclass
class DsmilForward:
    bag_logit: Tensor  # (1, 1)
    instance_logits: Tensor  # (N, 1)
    attention: Tensor  # (N, 1), softmax over instances
    critical_index: int


def dsmil_forward(instances: Tensor | np.ndarray, params: DsmilParams) -> DsmilForward:
    x = instances if isinstance(instances, Tensor) else Tensor(instances)
    if x.shape[1] != params.dim:
        raise ValueError(
            f"bag dim {x.shape[1]} does not match params dim {params.dim}"
        )
    c = ad.linear(x, params.inst_w, params.inst_b)  # (N, 1)
    c_max, idx = ad.max_with_argmax(c, axis=0)  # (1, 1)
    m = int(idx.reshape(-1)[0])
    q = ad.linear(x, params.query_w, params.query_b)  # (N, Dq)
    q_crit = ad.take_rows(q, [m])  # (1, Dq)
    scores = ad.matmul(q, ad.transpose(q_crit))  # (N, 1)
    attention = ad.softmax(scores, axis=0)
    values = ad.linear(x, params.value_w, params.value_b)  # (N, Dv)
    bag_embedding = ad.matmul(ad.transpose(attention), values)  # (1, Dv)
    bag_score = ad.linear(bag_embedding, params.bag_w, params.bag_b)  # (1, 1)
    bag_logit = ad.scale(ad.add(c_max, bag_score), 0.5)
    return DsmilForward(bag_logit, c, attention, m)


def dsmil_output(instances: np.ndarray, params: DsmilParams) -> MilOutput:
    fwd = dsmil_forward(np.asarray(instances, dtype=np.float32), params)
    raw = fwd.attention.data.reshape(-1).astype(np.float64)
    return MilOutput(
        bag_logit=fwd.bag_logit.item(),
        raw_attention=raw,
        instance_attention=normalize_attention(raw),
        instance_logits=fwd.instance_logits.data.reshape(-1).astype(np.float64),
        critical_index=fwd.critical_index,
    )


# ---------------------------------------------------------------------------
# single-layer transformer with class token

# dropout site ids for the counter-based RNG streams
_SITE_ATTN = 0  # + head index
_SITE_PROJ = 100
_SITE_FF_HIDDEN = 101
_SITE_FF_OUT = 102


@dataclass
class TransformerParams:
    embed_w: Tensor  # (D_in, D)
    embed_b: Tensor  # (D,)
    cls_token: Tensor  # (1, D)
    ln1_gain: Tensor
    ln1_bias: Tensor
    q_w: list[Tensor] = field(default_factory=list)  # per head (D, Dh)
    q_b: list[Tensor] = field(default_factory=list)
    # keys carry no bias: a key bias shifts every attention row by a
    # constant and cancels in the row softmax
    k_w: list[Tensor] = field(default_factory=list)
    v_w: list[Tensor] = field(default_factory=list)
    v_b: list[Tensor] = field(default_factory=list)
    out_w: Tensor = None  # (D, D)
    out_b: Tensor = None
    ln2_gain: Tensor = None
    ln2_bias: Tensor = None
    ff1_w: Tensor = None  # (D, F)
    ff1_b: Tensor = None
    ff2_w: Tensor = None  # (F, D)
    ff2_b: Tensor = None
    lnf_gain: Tensor = None
    lnf_bias: Tensor = None
    head_w: Tensor = None  # (D, 1)
    head_b: Tensor = None
    dropout: float = 0.25

    @property
    def n_heads(self) -> int:
        return len(self.q_w)

    @property
    def model_dim(self) -> int:
        return self.cls_token.shape[1]

    @property
    def input_dim(self) -> int:
        return self.embed_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        named = {
            "embed_w": self.embed_w,
            "embed_b": self.embed_b,
            "cls_token": self.cls_token,
            "ln1_gain": self.ln1_gain,
            "ln1_bias": self.ln1_bias,
        }
        for h in range(self.n_heads):
            named[f"q{h}_w"] = self.q_w[h]
            named[f"q{h}_b"] = self.q_b[h]
            named[f"k{h}_w"] = self.k_w[h]
            named[f"v{h}_w"] = self.v_w[h]
            named[f"v{h}_b"] = self.v_b[h]
        named.update(
            out_w=self.out_w,
            out_b=self.out_b,
            ln2_gain=self.ln2_gain,
            ln2_bias=self.ln2_bias,
            ff1_w=self.ff1_w,
            ff1_b=self.ff1_b,
            ff2_w=self.ff2_w,
            ff2_b=self.ff2_b,
            lnf_gain=self.lnf_gain,
            lnf_bias=self.lnf_bias,
            head_w=self.head_w,
            head_b=self.head_b,
        )
        return named

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray],
                    dropout: float = 0.25) -> "TransformerParams":
        n_heads = sum(1 for k in arrays if k.startswith("q") and k.endswith("_w"))
        p = {k: ad.parameter(v, k) for k, v in arrays.items()}
        return cls(
            embed_w=p["embed_w"],
            embed_b=p["embed_b"],
            cls_token=p["cls_token"],
            ln1_gain=p["ln1_gain"],
            ln1_bias=p["ln1_bias"],
            q_w=[p[f"q{h}_w"] for h in range(n_heads)],
            q_b=[p[f"q{h}_b"] for h in range(n_heads)],
            k_w=[p[f"k{h}_w"] for h in range(n_heads)],
            v_w=[p[f"v{h}_w"] for h in range(n_heads)],
            v_b=[p[f"v{h}_b"] for h in range(n_heads)],
            out_w=p["out_w"],
            out_b=p["out_b"],
            ln2_gain=p["ln2_gain"],
            ln2_bias=p["ln2_bias"],
            ff1_w=p["ff1_w"],
            ff1_b=p["ff1_b"],
            ff2_w=p["ff2_w"],
            ff2_b=p["ff2_b"],
            lnf_gain=p["lnf_gain"],
            lnf_bias=p["lnf_bias"],
            head_w=p["head_w"],
            head_b=p["head_b"],
            dropout=dropout,
        )


def model_dim_for(input_dim: int, n_heads: int) -> int:
    """Smallest width >= input_dim that the head count divides."""
    return ((input_dim + n_heads - 1) // n_heads) * n_heads


def init_transformer(rng: np.random.Generator, input_dim: int, n_heads: int = 3,
                     ff_dim: int | None = None, dropout: float = 0.25,
                     model_dim: int | None = None) -> TransformerParams:
    d = model_dim or model_dim_for(input_dim, n_heads)
    if d % n_heads != 0:
        raise ValueError(f"model_dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    f = ff_dim or 4 * d
    ones = lambda name: ad.parameter(np.ones(d, dtype=np.float32), name)
    zeros = lambda n, name: ad.parameter(np.zeros(n, dtype=np.float32), name)
    params = TransformerParams(
        embed_w=ad.parameter(ad.xavier_uniform(rng, input_dim, d), "embed_w"),
        embed_b=zeros(d, "embed_b"),
        cls_token=ad.parameter(
            (0.02 * rng.standard_normal((1, d))).astype(np.float32), "cls_token"
        ),
        ln1_gain=ones("ln1_gain"),
        ln1_bias=zeros(d, "ln1_bias"),
        out_w=ad.parameter(ad.xavier_uniform(rng, d, d), "out_w"),
        out_b=zeros(d, "out_b"),
        ln2_gain=ones("ln2_gain"),
        ln2_bias=zeros(d, "ln2_bias"),
        ff1_w=ad.parameter(ad.xavier_uniform(rng, d, f), "ff1_w"),
        ff1_b=zeros(f, "ff1_b"),
        ff2_w=ad.parameter(ad.xavier_uniform(rng, f, d), "ff2_w"),
        ff2_b=zeros(d, "ff2_b"),
        lnf_gain=ones("lnf_gain"),
        lnf_bias=zeros(d, "lnf_bias"),
        head_w=ad.parameter(ad.xavier_uniform(rng, d, 1), "head_w"),
        head_b=zeros(1, "head_b"),
        dropout=dropout,
    )
    for h in range(n_heads):
        params.q_w.append(ad.parameter(ad.xavier_uniform(rng, d, dh), f"q{h}_w"))
        params.q_b.append(zeros(dh, f"q{h}_b"))
        params.k_w.append(ad.parameter(ad.xavier_uniform(rng, d, dh), f"k{h}_w"))
        params.v_w.append(ad.parameter(ad.xavier_uniform(rng, d, dh), f"v{h}_w"))
        params.v_b.append(zeros(dh, f"v{h}_b"))
    return params


@dataclass
class TransformerForward:
    bag_logit: Tensor  # (1, 1)
    raw_attention: np.ndarray  # (M,), class-token attention over regions
    attention_scores: np.ndarray  # (M,), pre-softmax, head-averaged


def transformer_forward(regions: Tensor | np.ndarray, params: TransformerParams,
                        training: bool = False,
                        dropout_state: ad.DropoutState | None = None) -> TransformerForward:
    r = regions if isinstance(regions, Tensor) else Tensor(regions)
    if r.shape[1] != params.input_dim:
        raise ValueError(
            f"region dim {r.shape[1]} does not match params dim {params.input_dim}"
        )
    p = params.dropout if training else 0.0
    embedded = ad.linear(r, params.embed_w, params.embed_b)
    x = ad.concat([params.cls_token, embedded], axis=0)  # (M+1, D)

    normed = ad.layer_norm(x, params.ln1_gain, params.ln1_bias)
    dh = params.model_dim // params.n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    head_outs = []
    cls_rows = []
    score_rows = []
    for h in range(params.n_heads):
        q = ad.linear(normed, params.q_w[h], params.q_b[h])
        k = ad.matmul(normed, params.k_w[h])
        v = ad.linear(normed, params.v_w[h], params.v_b[h])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)  # (M+1, M+1)
        attn = ad.softmax(scores, axis=-1)
        cls_rows.append(attn.data[0, 1:].astype(np.float64))
        score_rows.append(scores.data[0, 1:].astype(np.float64))
        attn = ad.dropout(attn, p, dropout_state, _SITE_ATTN + h, training)
        head_outs.append(ad.matmul(attn, v))
    mh = ad.concat(head_outs, axis=1)  # (M+1, D)
    proj = ad.linear(mh, params.out_w, params.out_b)
    proj = ad.dropout(proj, p, dropout_state, _SITE_PROJ, training)
    x = ad.add(x, proj)

    normed2 = ad.layer_norm(x, params.ln2_gain, params.ln2_bias)
    ff = ad.relu(ad.linear(normed2, params.ff1_w, params.ff1_b))
    ff = ad.dropout(ff, p, dropout_state, _SITE_FF_HIDDEN, training)
    ff = ad.linear(ff, params.ff2_w, params.ff2_b)
    ff = ad.dropout(ff, p, dropout_state, _SITE_FF_OUT, training)
    x = ad.add(x, ff)

    final = ad.layer_norm(x, params.lnf_gain, params.lnf_bias)
    cls_out = ad.slice_rows(final, 0, 1)
    bag_logit = ad.linear(cls_out, params.head_w, params.head_b)

    raw = np.mean(cls_rows, axis=0)
    total = raw.sum()
    raw = raw / total if total > 1e-12 else np.full_like(raw, 1.0 / len(raw))
    return TransformerForward(bag_logit, raw, np.mean(score_rows, axis=0))


def transformer_output(regions: np.ndarray, params: TransformerParams) -> MilOutput:
    fwd = transformer_forward(np.asarray(regions, dtype=np.float32), params)
    raw = fwd.raw_attention
    return MilOutput(
        bag_logit=fwd.bag_logit.item(),
        raw_attention=raw,
        instance_attention=normalize_attention(raw),
        instance_logits=fwd.attention_scores,
        critical_index=int(np.argmax(raw)),
    )
