"""Moment alignment transformer network.

Batches of variable-length (target, query) pairs are padded to a common
length; padding is masked out of attention, the heads and the alignment DP so
a batched forward equals the per-sample forwards.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .alignment import align, cosine_cost, hard_dtw, extract_span, soft_dtw_value
from .autodiff import MASK_VALUE, Tensor


@dataclass
class ModelConfig:
    input_dim: int = 512
    d: int = 64
    k: int = 2
    n_queries: int = 10
    heads: int = 4
    ffn_mult: int = 4
    dropout_transformer: float = 0.1
    dropout_projection: float = 0.5
    gamma: float = 0.1
    alignment_mode: str = "subsequence"
    head_layers: int = 3
    token_types: bool = True

    def __post_init__(self):
        for name in ("input_dim", "d", "heads", "ffn_mult", "head_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 0 or self.n_queries < 1:
            raise ValueError("k must be >= 0 and n_queries >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ValueError("d must be even for sinusoidal positional encodings")
        for name in ("dropout_transformer", "dropout_projection"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.alignment_mode not in ("standard", "subsequence"):
            raise ValueError(f"unknown alignment_mode {self.alignment_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def positional_encoding(length, d):
    """Sinusoidal table; even columns sin, odd columns cos."""
    if d % 2:
        raise ValueError("positional encoding needs an even dimension")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


@dataclass
class Batch:
    target: np.ndarray          # (B, M, input_dim), zero padded
    query: np.ndarray           # (B, N, input_dim)
    target_len: np.ndarray      # (B,)
    query_len: np.ndarray       # (B,)

    @property
    def size(self):
        return self.target.shape[0]

    @classmethod
    def from_pairs(cls, pairs):
        """``pairs`` is a sequence of (target (M, D), query (N, D)) arrays."""
        if not pairs:
            raise ValueError("empty batch")
        tl = np.array([len(t) for t, _ in pairs])
        ql = np.array([len(q) for _, q in pairs])
        if tl.min() < 1 or ql.min() < 1:
            raise ValueError("target and query sequences must be nonempty")
        dim = np.asarray(pairs[0][0]).shape[1]
        T = np.zeros((len(pairs), tl.max(), dim))
        Q = np.zeros((len(pairs), ql.max(), dim))
        for b, (t, q) in enumerate(pairs):
            t, q = np.asarray(t, dtype=np.float64), np.asarray(q, dtype=np.float64)
            if t.shape[1] != dim or q.shape[1] != dim:
                raise ValueError(f"feature dim mismatch in pair {b}: {t.shape}, {q.shape}, expected {dim}")
            T[b, :len(t)] = t
            Q[b, :len(q)] = q
        return cls(T, Q, tl, ql)


@dataclass
class ModelOutput:
    encoder_target: Tensor      # (B, M, d)
    encoder_query: Tensor       # (B, N, d)
    decoder_out: Tensor         # (B, l, d)
    fused: Tensor               # (B, M + l, d) per-sample layout [target; decoder; pad]
    fg_logits: Tensor           # (B, M)
    fg_probs: Tensor            # (B, M)
    offsets: Tensor             # (B, M, 2)
    pre_loss: Tensor            # (B,)
    post_loss: Tensor           # (B,)
    spans: List[Tuple[int, int]]
    target_len: np.ndarray
    query_len: np.ndarray
    pre_cost: np.ndarray = field(repr=False, default=None)
    post_cost: np.ndarray = field(repr=False, default=None)
    attention: list = field(repr=False, default_factory=list)

    def sample(self, b):
        """Unpadded numpy views for sample ``b``."""
        m, n = int(self.target_len[b]), int(self.query_len[b])
        l = self.decoder_out.shape[1]
        return {
            "encoder_target": self.encoder_target.data[b, :m],
            "encoder_query": self.encoder_query.data[b, :n],
            "decoder_out": self.decoder_out.data[b],
            "fused": self.fused.data[b, :m + l],
            "fg_probs": self.fg_probs.data[b, :m],
            "offsets": self.offsets.data[b, :m],
            "span": self.spans[b],
        }

    def alignment_results(self, b, gamma, mode):
        """Full pre- and post-fusion alignment results for sample ``b``."""
        m, n = int(self.target_len[b]), int(self.query_len[b])
        return (align(self.pre_cost[b, :m, :n], gamma, mode),
                align(self.post_cost[b, :m, :n], gamma, mode))


class MATRNetwork:
    """Projection, fused encoder, dual alignment, span decoder and heads."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.params = {}
        rng = np.random.default_rng(seed)
        c = config
        ff = c.d * c.ffn_mult
        self._linear("proj.0", c.input_dim, c.d, rng)
        self._norm("proj.0.norm", c.d)
        self._linear("proj.1", c.d, c.d, rng)
        self._norm("proj.1.norm", c.d)
        if c.token_types and c.k > 0:
            self._param("token_type", ad.xavier_init((2, c.d), rng))
        for i in range(c.k):
            p = f"enc.{i}"
            self._attention(f"{p}.self", rng)
            self._norm(f"{p}.norm1", c.d)
            self._linear(f"{p}.ff1", c.d, ff, rng)
            self._linear(f"{p}.ff2", ff, c.d, rng)
            self._norm(f"{p}.norm2", c.d)
        self._param("queries", ad.xavier_init((c.n_queries, c.d), rng))
        for i in range(c.k):
            p = f"dec.{i}"
            self._attention(f"{p}.self", rng)
            self._norm(f"{p}.norm1", c.d)
            self._attention(f"{p}.cross", rng)
            self._norm(f"{p}.norm2", c.d)
            self._linear(f"{p}.ff1", c.d, ff, rng)
            self._linear(f"{p}.ff2", ff, c.d, rng)
            self._norm(f"{p}.norm3", c.d)
        for head, out in (("fg", 1), ("bd", 2)):
            for i in range(c.head_layers):
                width = out if i == c.head_layers - 1 else c.d
                self._param(f"{head}.conv{i}.w", ad.xavier_init((3, c.d, width), rng))
                self._param(f"{head}.conv{i}.b", np.zeros(width))

    # -- parameter construction
    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _linear(self, name, n_in, n_out, rng):
        self._param(f"{name}.w", ad.xavier_init((n_in, n_out), rng))
        self._param(f"{name}.b", np.zeros(n_out))

    def _norm(self, name, n):
        self._param(f"{name}.g", np.ones(n))
        self._param(f"{name}.b", np.zeros(n))

    def _attention(self, name, rng):
        for part in ("q", "k", "v", "o"):
            self._linear(f"{name}.{part}", self.config.d, self.config.d, rng)

    def no_decay_names(self):
        return [n for n in self.params if n.endswith(".b") or n.endswith(".g")]

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    # -- layers
    def _lin(self, name, x):
        P = self.params
        return x @ P[f"{name}.w"] + P[f"{name}.b"]

    def _ln(self, name, x):
        P = self.params
        return ad.layer_norm(x) * P[f"{name}.g"] + P[f"{name}.b"]

    def _mha(self, name, q_in, k_in, v_in, key_bias, keep=None):
        B, Lq, d = q_in.shape
        Lk = k_in.shape[1]
        h = self.config.heads
        dh = d // h

        def split(x, L):
            return x.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

        q = split(self._lin(f"{name}.q", q_in), Lq)
        k = split(self._lin(f"{name}.k", k_in), Lk)
        v = split(self._lin(f"{name}.v", v_in), Lk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + key_bias
        attn = ad.softmax(scores, axis=-1)
        if keep is not None:
            keep.append(attn.data)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return self._lin(f"{name}.o", out)

    def _drop(self, x, p, rng, training):
        return ad.dropout(x, p, rng, training)

    def project(self, x, training=False, rng=None):
        """Two linear layers, each followed by layer norm and dropout."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"project: expected input dim {self.config.input_dim}, got {x.shape[-1]}")
        p = self.config.dropout_projection
        h = ad.relu(self._ln("proj.0.norm", self._lin("proj.0", x)))
        h = self._drop(h, p, rng, training)
        h = self._ln("proj.1.norm", self._lin("proj.1", h))
        return self._drop(h, p, rng, training)

    def encode(self, Et, Eq, target_len, query_len, training=False, rng=None, keep=None):
        """Run the fused encoder over ``[Et; Eq]`` and split the result."""
        B, M, d = Et.shape
        N = Eq.shape[1]
        pos = np.zeros((B, M + N, d))
        valid = np.zeros((B, M + N), dtype=bool)
        table = positional_encoding(int(M + N), d)
        for b in range(B):
            m, n = int(target_len[b]), int(query_len[b])
            pos[b, :m] = table[:m]
            pos[b, M:M + n] = table[m:m + n]
            valid[b, :m] = True
            valid[b, M:M + n] = True
        if self.config.k == 0:
            return Et + pos[:, :M], Eq + pos[:, M:]
        if "token_type" in self.params:
            tt = self.params["token_type"]
            Et, Eq = Et + tt[0], Eq + tt[1]
        x = ad.concat([Et, Eq], axis=1)
        bias = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
        p = self.config.dropout_transformer
        for i in range(self.config.k):
            pre = f"enc.{i}"
            qk = x + pos
            a = self._mha(f"{pre}.self", qk, qk, x, bias, keep)
            x = self._ln(f"{pre}.norm1", x + self._drop(a, p, rng, training))
            f = self._lin(f"{pre}.ff2", self._drop(ad.relu(self._lin(f"{pre}.ff1", x)), p, rng, training))
            x = self._ln(f"{pre}.norm2", x + self._drop(f, p, rng, training))
        return x[:, :M], x[:, M:]

    def decode(self, memory, spans, training=False, rng=None, keep=None):
        """Refine the learnable queries against ``memory[s:e+1]`` per sample."""
        memory = ad.as_tensor(memory)
        B, M, d = memory.shape
        l = self.config.n_queries
        key_ok = np.zeros((B, M), dtype=bool)
        for b, (s, e) in enumerate(spans):
            if not 0 <= s <= e < M:
                raise ValueError(f"span {(s, e)} outside [0, {M - 1}]")
            key_ok[b, s:e + 1] = True
        mem_bias = np.where(key_ok, 0.0, MASK_VALUE)[:, None, None, :]
        mem_pos = positional_encoding(M, d)[None]
        q_pos = positional_encoding(l, d)[None]
        no_bias = np.zeros((1, 1, 1, l))
        x = self.params["queries"] * np.ones((B, 1, 1))
        p = self.config.dropout_transformer
        mem_k = memory + mem_pos
        for i in range(self.config.k):
            pre = f"dec.{i}"
            qk = x + q_pos
            a = self._mha(f"{pre}.self", qk, qk, x, no_bias, keep)
            x = self._ln(f"{pre}.norm1", x + self._drop(a, p, rng, training))
            a = self._mha(f"{pre}.cross", x + q_pos, mem_k, memory, mem_bias, keep)
            x = self._ln(f"{pre}.norm2", x + self._drop(a, p, rng, training))
            f = self._lin(f"{pre}.ff2", self._drop(ad.relu(self._lin(f"{pre}.ff1", x)), p, rng, training))
            x = self._ln(f"{pre}.norm3", x + self._drop(f, p, rng, training))
        return x

    def fuse(self, Etg, El, target_len):
        """Per-sample ``[E_t^g[:M_b]; E_t^l]`` followed by zero padding."""
        B, M, _ = Etg.shape
        l = El.shape[1]
        L = M + l
        index = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L, 1))
        for b in range(B):
            m = int(target_len[b])
            index[b, :m] = np.arange(m)
            index[b, m:m + l] = M + np.arange(l)
            mask[b, :m + l] = 1.0
        stacked = ad.concat([Etg, El], axis=1)
        return ad.gather_rows(stacked, index) * mask, mask

    def heads(self, fused, mask=None):
        """Foreground logits and nonnegative offsets at every fused position."""
        P = self.config
        outs = {}
        for head in ("fg", "bd"):
            x = fused
            for i in range(P.head_layers):
                x = ad.conv1d(x, self.params[f"{head}.conv{i}.w"], self.params[f"{head}.conv{i}.b"])
                if i < P.head_layers - 1:
                    x = ad.relu(x)
                    if mask is not None:
                        x = x * mask
            outs[head] = x
        return outs["fg"][..., 0], ad.relu(outs["bd"])

    def forward(self, batch: Batch, training=False, rng=None, keep_attention=False):
        if training and rng is None:
            raise ValueError("training-mode forward needs an explicit rng")
        c = self.config
        keep = [] if keep_attention else None
        Et = self.project(batch.target, training, rng)
        Eq = self.project(batch.query, training, rng)
        lengths = list(zip(batch.target_len.tolist(), batch.query_len.tolist()))

        pre_cost = cosine_cost(Et, Eq)
        pre_loss = soft_dtw_value(pre_cost, c.gamma, c.alignment_mode, lengths)

        Etg, Eqg = self.encode(Et, Eq, batch.target_len, batch.query_len, training, rng, keep)

        post_cost = cosine_cost(Etg, Eqg)
        post_loss = soft_dtw_value(post_cost, c.gamma, c.alignment_mode, lengths)
        spans = []
        for b, (m, n) in enumerate(lengths):
            try:
                _, path = hard_dtw(post_cost.data[b, :m, :n], c.alignment_mode)
                spans.append(extract_span(path))
            except ValueError:
                spans.append((0, m - 1))

        El = self.decode(Etg, spans, training, rng, keep)
        fused, mask = self.fuse(Etg, El, batch.target_len)
        fg_all, off_all = self.heads(fused, mask)
        M = Etg.shape[1]
        fg_logits = fg_all[:, :M]
        return ModelOutput(
            encoder_target=Etg, encoder_query=Eqg, decoder_out=El, fused=fused,
            fg_logits=fg_logits, fg_probs=ad.sigmoid(fg_logits), offsets=off_all[:, :M],
            pre_loss=pre_loss, post_loss=post_loss, spans=spans,
            target_len=batch.target_len, query_len=batch.query_len,
            pre_cost=pre_cost.data, post_cost=post_cost.data, attention=keep or [],
        )

    def __call__(self, target, query, training=False, rng=None):
        """Single-pair convenience wrapper."""
        return self.forward(Batch.from_pairs([(target, query)]), training, rng)

    # -- weights
    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
