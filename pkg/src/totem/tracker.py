"""Simplified transformer model-predictor tracker.

Two train frames (features plus an embedding of their target box) and one
test frame are flattened to 3*h*w tokens and processed jointly by a
transformer encoder. A single learned query cross-attends to the encoder
output; linear heads turn the result into a target model: a
classification kernel ``w_cls`` (c) and a regression kernel ``W_reg``
(c x 4). Applied to the encoded test-frame tokens they give the center
response ``y_hat`` and the ltrb offsets ``d_hat`` (softplus, cell units).

Coordinates: cell (i, j) covers [j, j+1) x [i, i+1); its center is
(j + 0.5, i + 0.5). Boxes are (x, y, w, h) in cell units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node, Param, ShapeError, Tape
from .fusion import FusionConfig, FusionModule, encoder_layer, encoder_layer_params
from .gradcheck import register_composed
from .metrics import BoundingBox
from .rng import Rng, derive_seed


@dataclass(frozen=True)
class PredictorConfig:
    channels: int = 64
    num_encoder_layers: int = 1
    num_heads: int = 2
    ffn_hidden_dim: int | None = None  # None -> 2 * channels
    label_sigma: float = 1.0
    reg_weight: float = 1.0
    confidence_threshold: float = 0.5
    ltrb_scale: float = 4.0  # ltrb inputs of the state encoding are divided by this
    matched_init: bool = True  # start as a matched filter (see Predictor)
    state_gain: float = 16.0
    query_gain: float = 16.0
    kernel_gain: float = 0.05
    head_init_scale: float = 0.05
    state_ltrb_gain: float = 8.0
    const_gain: float = 8.0
    size_gain: float = 0.2

    def __post_init__(self):
        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden_dim or 2 * self.channels


@dataclass
class TargetModel:
    w_cls: Node  # (B, c)
    W_reg: Node  # (B, c, 4)


@dataclass
class TrackerOutput:
    y_hat: Node  # (B, h, w, 1)
    d_hat: Node  # (B, h, w, 4)


# --------------------------------------------------------------------------
# box geometry on the grid


def _check_in_grid(box: BoundingBox, h: int, w: int, tol: float = 1e-9) -> None:
    if box.empty or box.x < -tol or box.y < -tol or box.x + box.w > w + tol or box.y + box.h > h + tol:
        raise ContractError(f"box {box.as_tuple()} is not a non-empty box inside the {h}x{w} grid")


def ltrb_map(box: BoundingBox, h: int, w: int) -> np.ndarray:
    """(h, w, 4): distances from every cell center to the box sides (signed)."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return np.stack([xs - box.x, ys - box.y, box.x + box.w - xs, box.y + box.h - ys], axis=-1)


def center_cell(box: BoundingBox, h: int, w: int) -> tuple[int, int]:
    cx, cy = box.center
    return min(max(int(np.floor(cy)), 0), h - 1), min(max(int(np.floor(cx)), 0), w - 1)


def gaussian_map(box: BoundingBox, h: int, w: int, sigma: float = 1.0) -> np.ndarray:
    """(h, w) Gaussian bump on the cell holding the box center (peak value 1)."""
    i0, j0 = center_cell(box, h, w)
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((ys - i0) ** 2 + (xs - j0) ** 2) / (2.0 * sigma * sigma))


# --------------------------------------------------------------------------
# the predictor


class Predictor:
    def __init__(self, cfg: PredictorConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(derive_seed(seed, "predictor"))
        c = cfg.channels
        p: dict[str, Param] = {}

        def add(name, value):
            p[name] = Param(value, name)

        add("pred.state.w", ad.xavier_init(5, c, rng.spawn("state")))
        add("pred.state.b", np.zeros(c))
        for i in range(cfg.num_encoder_layers):
            p.update(encoder_layer_params(f"pred.enc{i}", c, cfg.ffn_dim, rng.spawn(f"enc{i}")))
        a = np.sqrt(6.0 / (1 + c))
        add("pred.query", rng.spawn("query").uniform(c, -a, a))
        p.update(encoder_layer_params("pred.dec", c, cfg.ffn_dim, rng.spawn("dec")))
        add("pred.cls.w", ad.xavier_init(c, c, rng.spawn("cls")))
        add("pred.cls.b", np.zeros(c))
        add("pred.reg.w", np.concatenate([ad.xavier_init(c, c, rng.spawn(f"reg{k}")) for k in range(4)], axis=1))
        add("pred.reg.b", np.zeros(4 * c))
        self.params = p
        if cfg.matched_init:
            self._matched_init(_orthonormal_rows(rng.spawn("marker"), min(6, c), c))

    def _matched_init(self, basis: np.ndarray) -> None:
        """Start as a matched filter instead of a random map.

        Residual branches of the encoder start at zero, so encoding is a
        per-token normalization. The Gaussian state score is embedded along
        the unit direction ``u``; the decoder query looks for ``u`` and so
        averages the target cells of the train frames. Identity value and
        output maps pass that average on, and the classification head turns
        it (minus the marker) into ``w_cls``.

        Box size takes a similar path: the ltrb state channels get their own
        directions, the last encoder norm adds a constant direction ``v0`` to
        every token, and the regression head turns the ltrb read off the
        train targets into multiples of ``v0``, so every test cell starts by
        predicting the train box's extents. Pretraining then starts from a
        tracker that already localizes, rather than having to discover the
        attention pattern and the copy maps at the same time.
        """
        cfg, p, c = self.cfg, self.params, self.cfg.channels
        eye = np.eye(c)
        u = basis[0]
        size_path = len(basis) == 6 and cfg.num_encoder_layers > 0
        ltrb_dirs = basis[1:5] if size_path else np.zeros((0, c))
        # centering leaves the ltrb directions alone: their grid mean depends
        # on where the box is, not on its size
        keep = eye - ltrb_dirs.T @ ltrb_dirs
        for layer in range(cfg.num_encoder_layers):
            pre = f"pred.enc{layer}"
            if layer == 0:
                # uniform attention over all tokens minus the token: centering
                p[f"{pre}.q.w"].value[:] = 0.0
                p[f"{pre}.k.w"].value[:] = 0.0
                p[f"{pre}.v.w"].value[:] = eye
                p[f"{pre}.out.w"].value[:] = -keep
            else:
                p[f"{pre}.out.w"].value[:] = 0.0
            p[f"{pre}.ffn2.w"].value[:] = 0.0
        p["pred.state.w"].value[4] = cfg.state_gain * u
        p["pred.query"].value[:] = 0.0
        p["pred.dec.q.w"].value[:] = 0.0
        p["pred.dec.q.b"].value[:] = cfg.query_gain * u
        for name in ("k", "v", "out"):
            p[f"pred.dec.{name}.w"].value[:] = eye
        p["pred.dec.ffn2.w"].value[:] = 0.0
        # the kernel ignores the marker and, when present, the size-path directions
        used = basis if size_path else basis[:1]
        p["pred.cls.w"].value[:] = cfg.kernel_gain * (eye - used.T @ used)
        p["pred.reg.w"].value *= cfg.head_init_scale
        if size_path:
            v0 = basis[5]
            p["pred.state.w"].value[:4] = cfg.state_ltrb_gain * ltrb_dirs
            p[f"pred.enc{cfg.num_encoder_layers - 1}.ln2.b"].value[:] = cfg.const_gain * v0
            for k in range(4):
                p["pred.reg.w"].value[:, k * c:(k + 1) * c] = cfg.size_gain * np.outer(ltrb_dirs[k], v0)

    def __call__(self, tape: Tape, f_tr1, f_tr2, f_te, boxes1, boxes2) -> tuple[TargetModel, TrackerOutput]:
        """Feature maps are (B, h, w, c); boxes are length-B sequences."""
        maps = [m if isinstance(m, Node) else tape.constant(m) for m in (f_tr1, f_tr2, f_te)]
        if len({m.shape for m in maps}) != 1 or maps[0].value.ndim != 4:
            raise ShapeError(f"predictor: feature maps must share a (B, h, w, c) shape, got {[m.shape for m in maps]}")
        B, h, w, c = maps[0].shape
        if c != self.cfg.channels:
            raise ShapeError(f"predictor: expected {self.cfg.channels} channels, got {c}")
        tr1 = encode_target_state(maps[0], boxes1, self.params, self.cfg)
        tr2 = encode_target_state(maps[1], boxes2, self.params, self.cfg)
        tokens = ad.concat([ad.reshape(m, (B, h * w, c)) for m in (tr1, tr2, maps[2])], axis=1)
        enc = tokens
        for i in range(self.cfg.num_encoder_layers):
            enc = encoder_layer(enc, self.params, f"pred.enc{i}", self.cfg.num_heads)
        model = predict_model(enc, self.params, self.cfg)
        test = ad.take(ad.reshape(enc, (B, 3, h * w, c)), 2, axis=1)
        out = apply_model(model, test)
        return model, TrackerOutput(ad.reshape(out.y_hat, (B, h, w, 1)), ad.reshape(out.d_hat, (B, h, w, 4)))

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _orthonormal_rows(rng: Rng, n: int, c: int) -> np.ndarray:
    """n random orthonormal vectors of length c (Gram-Schmidt)."""
    out = np.zeros((n, c))
    for i in range(n):
        v = rng.spawn(i).normal(c)
        v -= out[:i].T @ (out[:i] @ v)
        out[i] = v / np.sqrt(v @ v)
    return out


def encode_target_state(features: Node, boxes: Sequence[BoundingBox], params: dict[str, Param], cfg: PredictorConfig) -> Node:
    """features (B, h, w, c) + Linear([ltrb / scale, gaussian]) per cell."""
    tape = features.tape
    B, h, w, c = features.shape
    if len(boxes) != B:
        raise ShapeError(f"encode_target_state: {len(boxes)} boxes for a batch of {B}")
    state = np.empty((B, h, w, 5))
    for b, box in enumerate(boxes):
        _check_in_grid(box, h, w)
        state[b, ..., :4] = ltrb_map(box, h, w) / cfg.ltrb_scale
        state[b, ..., 4] = gaussian_map(box, h, w, cfg.label_sigma)
    emb = ad.linear(tape.constant(state), tape.param(params["pred.state.w"]), tape.param(params["pred.state.b"]))
    return ad.add(features, emb)


def decoder_layer(query: Node, memory: Node, p: dict[str, Param], prefix: str, heads: int) -> Node:
    """query (B, 1, c) cross-attends to memory (B, N, c); post-norm like the encoder."""
    tape = query.tape
    W = lambda name: tape.param(p[f"{prefix}.{name}"])
    q = ad.linear(query, W("q.w"), W("q.b"))
    k = ad.linear(memory, W("k.w"), W("k.b"))
    v = ad.linear(memory, W("v.w"), W("v.b"))
    att = ad.linear(ad.attention(q, k, v, heads), W("out.w"), W("out.b"))
    h = ad.layer_norm(ad.add(query, att), W("ln1.g"), W("ln1.b"))
    f = ad.linear(ad.relu(ad.linear(h, W("ffn1.w"), W("ffn1.b"))), W("ffn2.w"), W("ffn2.b"))
    return ad.layer_norm(ad.add(h, f), W("ln2.g"), W("ln2.b"))


def predict_model(encoded: Node, params: dict[str, Param], cfg: PredictorConfig) -> TargetModel:
    """Decoder step over the joint encoder output (B, 3hw, c) -> kernels."""
    tape = encoded.tape
    B, _, c = encoded.shape
    q = ad.reshape(ad.broadcast_rows(tape.param(params["pred.query"]), B), (B, 1, c))
    dec = ad.reshape(decoder_layer(q, encoded, params, "pred.dec", cfg.num_heads), (B, c))
    w_cls = ad.linear(dec, tape.param(params["pred.cls.w"]), tape.param(params["pred.cls.b"]))
    W_reg = ad.reshape(ad.linear(dec, tape.param(params["pred.reg.w"]), tape.param(params["pred.reg.b"])), (B, 4, c))
    return TargetModel(w_cls, ad.transpose(W_reg, (0, 2, 1)))


def apply_model(model: TargetModel, features: Node) -> TrackerOutput:
    """features (B, P, c) -> y_hat (B, P, 1) = f . w_cls, d_hat (B, P, 4) = softplus(W_reg^T f)."""
    B, P, c = features.shape
    if model.w_cls.shape != (B, c) or model.W_reg.shape != (B, c, 4):
        raise ShapeError(f"apply_model: kernels {model.w_cls.shape}/{model.W_reg.shape} vs features {features.shape}")
    y = ad.bmm(features, ad.reshape(model.w_cls, (B, c, 1)))
    d = ad.softplus(ad.bmm(features, model.W_reg))
    return TrackerOutput(y, d)


def localize_arrays(y_hat: np.ndarray, d_hat: np.ndarray) -> BoundingBox:
    """Single-sample decoding from (h, w[, 1]) and (h, w, 4) arrays."""
    y = y_hat.reshape(y_hat.shape[0], y_hat.shape[1])
    i, j = np.unravel_index(int(np.argmax(y)), y.shape)  # first max in row-major order
    l, t, r, b = d_hat[i, j]
    return BoundingBox(float(j + 0.5 - l), float(i + 0.5 - t), float(l + r), float(t + b))


def localize(out: TrackerOutput) -> list[BoundingBox]:
    return [localize_arrays(y, d) for y, d in zip(out.y_hat.value, out.d_hat.value)]


def training_losses(out: TrackerOutput, gt_boxes: Sequence[BoundingBox], sigma: float = 1.0) -> tuple[Node, Node]:
    """L1: MSE against Gaussian labels; L2: mean |ltrb error| where label > 0.5 max."""
    B, h, w, _ = out.y_hat.shape
    if len(gt_boxes) != B:
        raise ShapeError(f"training_losses: {len(gt_boxes)} boxes for a batch of {B}")
    labels = np.empty((B, h, w, 1))
    targets = np.empty((B, h, w, 4))
    for b, box in enumerate(gt_boxes):
        _check_in_grid(box, h, w)
        labels[b, ..., 0] = gaussian_map(box, h, w, sigma)
        targets[b] = ltrb_map(box, h, w)
    region = (labels > 0.5 * labels.max(axis=(1, 2, 3), keepdims=True)).astype(np.float64)
    l1 = ad.mean(ad.square(ad.sub(out.y_hat, labels)))
    err = ad.mul(ad.absolute(ad.sub(out.d_hat, targets)), np.broadcast_to(region, targets.shape).copy())
    l2 = ad.scale(ad.sum_all(err), 1.0 / (4.0 * region.sum()))
    return l1, l2


def total_loss(l1: Node, l2: Node, reg_weight: float = 1.0) -> Node:
    return ad.add(l1, ad.scale(l2, reg_weight))


# --------------------------------------------------------------------------
# full tracker


class TrackerModel:
    """Optional fusion module in front of the model predictor.

    Without fusion the predictor consumes the appearance features x
    directly (the baseline tracker).
    """

    def __init__(self, predictor: Predictor, fusion: FusionModule | None = None):
        self.predictor = predictor
        self.fusion = fusion

    @classmethod
    def build(cls, fusion_cfg: FusionConfig | None, predictor_cfg: PredictorConfig, seed: int) -> "TrackerModel":
        fusion = FusionModule(fusion_cfg, seed) if fusion_cfg is not None else None
        return cls(Predictor(predictor_cfg, seed), fusion)

    def parameters(self) -> dict[str, Param]:
        out = dict(self.fusion.params) if self.fusion is not None else {}
        out.update(self.predictor.params)
        return out

    def features(self, tape: Tape, x, xp) -> Node:
        if self.fusion is None:
            return x if isinstance(x, Node) else tape.constant(x)
        return self.fusion(tape, x, xp)

    def forward(self, tape: Tape, x: np.ndarray, xp: np.ndarray, boxes1, boxes2) -> TrackerOutput:
        """x, xp: (B, 3, h, w, c) stacks of (train1, train2, test) frames."""
        B = x.shape[0]
        f = self.features(tape, x.reshape(B * 3, *x.shape[2:]), xp.reshape(B * 3, *xp.shape[2:]))
        f = ad.reshape(f, x.shape)
        parts = [ad.take(f, k, axis=1) for k in range(3)]
        return self.predictor(tape, *parts, boxes1, boxes2)[1]


def _clip_to_grid(box: BoundingBox, h: int, w: int) -> BoundingBox | None:
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x + box.w, float(w)), min(box.y + box.h, float(h))
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass
class TrackTrace:
    boxes: list[BoundingBox]
    peaks: list[float]
    memory: list[int]  # frame index used as the second train frame at each step


def track_sequences(
    model: TrackerModel, sequences: Sequence[tuple[np.ndarray, np.ndarray, BoundingBox]]
) -> list[TrackTrace]:
    """Track several sequences in lock-step (batched over sequences).

    Each item is (x (T, h, w, c), xp (T, h, w, c), init_box). Memory per
    sequence: the first frame plus the latest frame whose peak response
    reached the confidence threshold (frame 0 until one does).
    """
    if not sequences:
        return []
    thr = model.predictor.cfg.confidence_threshold
    tape = Tape(record=False)
    feats, traces, mem = [], [], []
    for x, xp, init in sequences:
        if len(x) == 0:
            raise ContractError("cannot track an empty sequence")
        h, w = x.shape[1:3]
        _check_in_grid(init, h, w)
        feats.append(model.features(tape, x, xp).value)
        traces.append(TrackTrace([init], [float("nan")], [0]))
        mem.append((0, init))
    longest = max(len(f) for f in feats)
    for t in range(1, longest):
        live = [k for k, f in enumerate(feats) if t < len(f)]
        f1 = np.stack([feats[k][0] for k in live])
        f2 = np.stack([feats[k][mem[k][0]] for k in live])
        fte = np.stack([feats[k][t] for k in live])
        _, out = model.predictor(
            tape, f1, f2, fte, [traces[k].boxes[0] for k in live], [mem[k][1] for k in live]
        )
        for row, k in enumerate(live):
            y, d = out.y_hat.value[row], out.d_hat.value[row]
            box = localize_arrays(y, d)
            peak = float(y.max())
            tr = traces[k]
            tr.memory.append(mem[k][0])
            tr.boxes.append(box)
            tr.peaks.append(peak)
            if peak >= thr:
                clipped = _clip_to_grid(box, *feats[k].shape[1:3])
                if clipped is not None:
                    mem[k] = (t, clipped)
    return traces


def track_sequence(model: TrackerModel, x: np.ndarray, xp: np.ndarray, init_box: BoundingBox) -> list[BoundingBox]:
    return track_sequences(model, [(x, xp, init_box)])[0].boxes


# --------------------------------------------------------------------------
# finite-difference registration


def _tiny_triplet(rng: Rng, h=4, w=4, c=8, B=2):
    x = rng.normal(B * 3 * h * w * c).reshape(B, 3, h, w, c)
    xp = rng.normal(B * 3 * h * w * c).reshape(B, 3, h, w, c)
    boxes = [BoundingBox(0.5, 1.0, 2.0, 2.5), BoundingBox(1.2, 0.3, 2.5, 3.0), BoundingBox(0.0, 0.0, 3.0, 2.0)]
    return x, xp, boxes


@register_composed("predict", "tracker")
def _predict_case(rng: Rng):
    pcfg = PredictorConfig(channels=8, num_heads=2)
    model = TrackerModel(Predictor(pcfg, seed=rng.seed & 0xFFFF))
    x, xp, boxes = _tiny_triplet(rng)

    proj = rng.spawn("proj")
    r1 = proj.normal(2 * 4 * 4).reshape(2, 4, 4, 1)
    r2 = proj.normal(2 * 4 * 4 * 4).reshape(2, 4, 4, 4)

    def loss(tape):
        out = model.forward(tape, x, xp, boxes[:2], boxes[1:])
        return ad.add(ad.sum_all(ad.mul(out.y_hat, r1)), ad.sum_all(ad.mul(out.d_hat, r2)))

    return loss, list(model.predictor.params.values())


@register_composed("loss", "tracker")
def _loss_case(rng: Rng):
    fcfg = FusionConfig(channels=8, num_encoder_layers=2, num_heads=2)
    pcfg = PredictorConfig(channels=8, num_heads=2)
    model = TrackerModel.build(fcfg, pcfg, seed=rng.seed & 0xFFFF)
    x, xp, boxes = _tiny_triplet(rng)

    def loss(tape):
        out = model.forward(tape, x, xp, boxes[:2], boxes[1:])
        return total_loss(*training_losses(out, [boxes[2], boxes[0]]))

    return loss, list(model.parameters().values())
