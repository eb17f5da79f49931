"""Pixel-wise transformer fusion of appearance and transparency features.

At every grid cell the appearance vector x_ij, the transparency vector x'_ij
and a learned query embedding form a 3-token sequence. A stack of post-norm
transformer encoder layers (self-attention over those 3 tokens only, no
positional embedding, no input down-projection) transforms it, and the
output row at the query position is projected back to the appearance
feature space by a two-layer MLP. Instance normalisation over the assembled
h x w map closes the module and is its only cross-pixel step.

Ablations: without the query embedding only (x, x') are tokenised and the
transformed x row is read out; without the projection MLP the read-out row
is returned as is; ``ffn_fuse_mode`` swaps the whole encoder for an 8-layer
MLP over concat(x, x') with a matched parameter budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Param, ShapeError, Tape
from .gradcheck import register_composed
from .rng import Rng, derive_seed

# token rows
X_ROW, XP_ROW, QUERY_ROW = 0, 1, 2


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 64
    num_encoder_layers: int = 4
    num_heads: int = 2
    ffn_hidden_dim: int | None = None  # None -> 4 * channels
    phi_hidden_dim: int | None = None  # None -> channels
    use_query_embedding: bool = True
    use_projection_mlp: bool = True
    ffn_fuse_mode: bool = False
    ffn_fuse_layers: int = 8
    zero_original_input: bool = False
    zero_transparency_input: bool = False
    norm_eps: float = 1e-8
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.num_heads < 1:
            raise ValueError("channels and num_heads must be positive")
        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")
        if self.ffn_fuse_mode and self.ffn_fuse_layers < 2:
            raise ValueError("ffn fusion needs at least 2 layers")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden_dim or 4 * self.channels

    @property
    def phi_dim(self) -> int:
        return self.phi_hidden_dim or self.channels

    @property
    def num_tokens(self) -> int:
        return 3 if self.use_query_embedding else 2

    @classmethod
    def reference(cls, **kw) -> "FusionConfig":
        """256-dim, 4-layer encoder; 8 heads and a 2048-wide FFN as in DETR-style encoders."""
        return cls(**{"channels": 256, "num_encoder_layers": 4, "num_heads": 8, "ffn_hidden_dim": 2048, **kw})

    def with_inputs(self, zero_x: bool = False, zero_xp: bool = False) -> "FusionConfig":
        return replace(self, zero_original_input=zero_x, zero_transparency_input=zero_xp)


# --------------------------------------------------------------------------
# transformer pieces shared with the model predictor


def encoder_layer_params(prefix: str, c: int, ffn: int, rng: Rng) -> dict[str, Param]:
    p: dict[str, Param] = {}

    def add(name, value):
        p[f"{prefix}.{name}"] = Param(value, f"{prefix}.{name}")

    for name in ("q", "k", "v", "out"):
        add(f"{name}.w", ad.xavier_init(c, c, rng.spawn(name)))
        add(f"{name}.b", np.zeros(c))
    add("ln1.g", np.ones(c))
    add("ln1.b", np.zeros(c))
    add("ffn1.w", ad.xavier_init(c, ffn, rng.spawn("ffn1")))
    add("ffn1.b", np.zeros(ffn))
    add("ffn2.w", ad.xavier_init(ffn, c, rng.spawn("ffn2")))
    add("ffn2.b", np.zeros(c))
    add("ln2.g", np.ones(c))
    add("ln2.b", np.zeros(c))
    return p


def encoder_layer(
    tokens: Node,
    p: dict[str, Param],
    prefix: str,
    heads: int,
    ln_eps: float = 1e-5,
    only_row: int | None = None,
) -> Node:
    """Post-norm encoder layer: x = LN(x + MHSA(x)); x = LN(x + FFN(x)).

    ``tokens`` is (B, n, c): B independent sequences of n tokens. With
    ``only_row`` set, just that output row is computed (shape (B, c)); keys
    and values still come from every token, so the row equals the
    corresponding row of the full layer.
    """
    tape = tokens.tape
    if tokens.value.ndim != 3:
        raise ShapeError(f"encoder_layer expects (B, n, c) tokens, got {tokens.shape}")
    c = tokens.shape[-1]
    W = lambda name: tape.param(p[f"{prefix}.{name}"])
    if W("q.w").shape[0] != c:
        raise ShapeError(f"encoder_layer: tokens have {c} channels, weights expect {W('q.w').shape[0]}")
    if only_row is None:
        rows = tokens
    else:
        rows = ad.reshape(ad.take(tokens, only_row, axis=1), (tokens.shape[0], 1, c))
    q = ad.linear(rows, W("q.w"), W("q.b"))
    k = ad.linear(tokens, W("k.w"), W("k.b"))
    v = ad.linear(tokens, W("v.w"), W("v.b"))
    att = ad.linear(ad.attention(q, k, v, heads), W("out.w"), W("out.b"))
    h = ad.layer_norm(ad.add(rows, att), W("ln1.g"), W("ln1.b"), ln_eps)
    f = ad.linear(ad.relu(ad.linear(h, W("ffn1.w"), W("ffn1.b"))), W("ffn2.w"), W("ffn2.b"))
    out = ad.layer_norm(ad.add(h, f), W("ln2.g"), W("ln2.b"), ln_eps)
    return out if only_row is None else ad.reshape(out, (tokens.shape[0], c))


# --------------------------------------------------------------------------
# the fusion module


def ffn_hidden_for_budget(c: int, layers: int, budget: int) -> int:
    """Hidden width whose layers-deep MLP (2c -> H ... H -> c) has ~budget params."""
    # 2cH + H + (layers-2)(H^2 + H) + Hc + c = budget
    a = layers - 2
    b = 3 * c + 1 + (layers - 2)
    k = c - budget
    if a == 0:
        return max(1, round(-k / b))
    return max(1, round((-b + math.sqrt(b * b - 4 * a * k)) / (2 * a)))


def count(params: dict[str, Param]) -> int:
    return sum(p.size for p in params.values())


class FusionModule:
    """Parameters plus forward pass for one fusion configuration."""

    def __init__(self, cfg: FusionConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(derive_seed(seed, "fusion"))
        c = cfg.channels
        self.params: dict[str, Param] = {}
        if cfg.ffn_fuse_mode:
            budget = count(_transformer_params(replace(cfg, ffn_fuse_mode=False), rng))
            self.ffn_hidden = ffn_hidden_for_budget(c, cfg.ffn_fuse_layers, budget)
            dims = [2 * c] + [self.ffn_hidden] * (cfg.ffn_fuse_layers - 1) + [c]
            for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
                self.params[f"fusion.ffn{i}.w"] = Param(ad.xavier_init(fi, fo, rng.spawn(f"ffn{i}")), f"fusion.ffn{i}.w")
                self.params[f"fusion.ffn{i}.b"] = Param(np.zeros(fo), f"fusion.ffn{i}.b")
            self.budget = budget
            if abs(count(self.params) - budget) > 0.1 * budget:
                raise ValueError(f"ffn fusion has {count(self.params)} params vs transformer budget {budget}")
        else:
            self.params = _transformer_params(cfg, rng)

    @property
    def num_params(self) -> int:
        return count(self.params)

    def with_config(self, cfg: FusionConfig) -> "FusionModule":
        """Same parameters (shared objects) under different runtime flags."""
        if (cfg.channels, cfg.ffn_fuse_mode, cfg.use_query_embedding, cfg.use_projection_mlp) != (
            self.cfg.channels,
            self.cfg.ffn_fuse_mode,
            self.cfg.use_query_embedding,
            self.cfg.use_projection_mlp,
        ):
            raise ValueError("with_config may only change runtime input flags")
        clone = object.__new__(FusionModule)
        clone.__dict__.update(self.__dict__)
        clone.cfg = cfg
        return clone

    def __call__(self, tape: Tape, x, xp) -> Node:
        return fuse(tape, x, xp, self.cfg, self.params)


def _transformer_params(cfg: FusionConfig, rng: Rng) -> dict[str, Param]:
    c = cfg.channels
    params: dict[str, Param] = {}
    if cfg.use_query_embedding:
        a = math.sqrt(6.0 / (1 + c))
        params["fusion.e_query"] = Param(rng.spawn("e_query").uniform(c, -a, a), "fusion.e_query")
    for i in range(cfg.num_encoder_layers):
        params.update(encoder_layer_params(f"fusion.enc{i}", c, cfg.ffn_dim, rng.spawn(f"enc{i}")))
    if cfg.use_projection_mlp:
        params["fusion.phi1.w"] = Param(ad.xavier_init(c, cfg.phi_dim, rng.spawn("phi1")), "fusion.phi1.w")
        params["fusion.phi1.b"] = Param(np.zeros(cfg.phi_dim), "fusion.phi1.b")
        params["fusion.phi2.w"] = Param(ad.xavier_init(cfg.phi_dim, c, rng.spawn("phi2")), "fusion.phi2.w")
        params["fusion.phi2.b"] = Param(np.zeros(c), "fusion.phi2.b")
    return params


def concat_tokens(x_ij, xp_ij, e_query=None) -> Node:
    """Stack per-pixel rows into (P, n, c): x, x', then e_query if given.

    Inputs are (c,) vectors or (P, c) batches of pixels; e_query is (c,).
    """
    parts = [x_ij, xp_ij]
    tape = next(p.tape for p in parts + [e_query] if isinstance(p, Node))
    xn, xpn = (p if isinstance(p, Node) else tape.constant(p) for p in parts)
    if xn.shape != xpn.shape or (e_query is not None and e_query.shape[-1] != xn.shape[-1]):
        shapes = [xn.shape, xpn.shape] + ([e_query.shape] if e_query is not None else [])
        raise ShapeError(f"concat_tokens: length mismatch {shapes}")
    single = xn.value.ndim == 1
    if single:
        xn, xpn = ad.reshape(xn, (1, -1)), ad.reshape(xpn, (1, -1))
    rows = [xn, xpn]
    if e_query is not None:
        rows.append(ad.broadcast_rows(e_query, xn.shape[0]))
    z = ad.stack(rows, axis=1)
    return ad.reshape(z, z.shape[1:]) if single else z


def transformer_encode(tokens: Node, cfg: FusionConfig, params: dict[str, Param]) -> Node:
    """(P, n, c) token sequences -> (P, c) read-out rows (f_interim)."""
    row = QUERY_ROW if cfg.use_query_embedding else X_ROW
    z = tokens
    last = cfg.num_encoder_layers - 1
    for i in range(last):
        z = encoder_layer(z, params, f"fusion.enc{i}", cfg.num_heads, cfg.ln_eps)
    # nothing downstream reads the other rows of the last layer
    return encoder_layer(z, params, f"fusion.enc{last}", cfg.num_heads, cfg.ln_eps, only_row=row)


def project(f_interim: Node, cfg: FusionConfig, params: dict[str, Param]) -> Node:
    """The MLP part of phi; instance normalisation happens on the assembled map."""
    if not cfg.use_projection_mlp:
        return f_interim
    tape = f_interim.tape
    W = lambda n: tape.param(params[n])
    h = ad.relu(ad.linear(f_interim, W("fusion.phi1.w"), W("fusion.phi1.b")))
    return ad.linear(h, W("fusion.phi2.w"), W("fusion.phi2.b"))


def ffn_fuse(x_ij: Node, xp_ij: Node, cfg: FusionConfig, params: dict[str, Param]) -> Node:
    """(P, c), (P, c) -> (P, c) through the deep MLP over the 2c concatenation."""
    tape = x_ij.tape
    h = ad.concat([x_ij, xp_ij], axis=-1)
    n = cfg.ffn_fuse_layers
    for i in range(n):
        h = ad.linear(h, tape.param(params[f"fusion.ffn{i}.w"]), tape.param(params[f"fusion.ffn{i}.b"]))
        if i < n - 1:
            h = ad.relu(h)
    return h


def fuse_pixels(tape: Tape, x, xp, cfg: FusionConfig, params: dict[str, Param]) -> Node:
    """Fusion before instance normalisation: (P, c), (P, c) -> (P, c).

    Every output row depends only on the matching input rows and shared
    parameters.
    """
    x = x if isinstance(x, Node) else tape.constant(x)
    xp = xp if isinstance(xp, Node) else tape.constant(xp)
    if x.shape != xp.shape or x.value.ndim != 2 or x.shape[1] != cfg.channels:
        raise ShapeError(f"fuse: expected matching (P, {cfg.channels}) inputs, got {x.shape} and {xp.shape}")
    if cfg.zero_original_input:
        x = tape.constant(np.zeros(x.shape))
    if cfg.zero_transparency_input:
        xp = tape.constant(np.zeros(xp.shape))
    if cfg.ffn_fuse_mode:
        return ffn_fuse(x, xp, cfg, params)
    e = tape.param(params["fusion.e_query"]) if cfg.use_query_embedding else None
    f_interim = transformer_encode(concat_tokens(x, xp, e), cfg, params)
    return project(f_interim, cfg, params)


def fuse(tape: Tape, x, xp, cfg: FusionConfig, params: dict[str, Param]) -> Node:
    """Fuse feature maps (h, w, c) or (..., h, w, c) into a map of the same shape."""
    shape = x.shape
    if tuple(xp.shape) != tuple(shape):
        raise ShapeError(f"fuse: feature maps differ in shape, {tuple(shape)} vs {tuple(xp.shape)}")
    if len(shape) < 3 or shape[-1] != cfg.channels:
        raise ShapeError(f"fuse: expected (..., h, w, {cfg.channels}) maps, got {tuple(shape)}")
    flat = lambda a: ad.reshape(a, (-1, cfg.channels)) if isinstance(a, Node) else np.reshape(a, (-1, cfg.channels))
    out = fuse_pixels(tape, flat(x), flat(xp), cfg, params)
    h, w, c = shape[-3:]
    maps = ad.reshape(out, (-1, h, w, c))
    if cfg.use_projection_mlp or cfg.ffn_fuse_mode:
        maps = ad.instance_normalize(maps, cfg.norm_eps)
    return ad.reshape(maps, tuple(shape))


# --------------------------------------------------------------------------
# finite-difference registration


def _tiny_case(cfg: FusionConfig):
    def make(rng: Rng):
        module = FusionModule(cfg, seed=rng.seed & 0xFFFF)
        hh, ww = 3, 3
        x = rng.normal(hh * ww * cfg.channels).reshape(hh, ww, cfg.channels)
        xp = rng.normal(hh * ww * cfg.channels).reshape(hh, ww, cfg.channels)
        r = rng.normal(x.size).reshape(x.shape)

        def loss(tape):
            return ad.sum_all(ad.mul(module(tape, x, xp), r))

        return loss, list(module.params.values())

    return make


register_composed("fuse", "fusion")(_tiny_case(FusionConfig(channels=8, num_encoder_layers=2, num_heads=2)))
register_composed("fuse_no_query", "fusion")(
    _tiny_case(FusionConfig(channels=8, num_encoder_layers=1, num_heads=2, use_query_embedding=False))
)
register_composed("fuse_ffn", "fusion")(_tiny_case(FusionConfig(channels=8, ffn_fuse_mode=True)))
