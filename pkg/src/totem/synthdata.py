"""Feature-level synthetic tracking sequences for transparent targets.

Every frame is a pair of h x w x c maps: ``x`` (appearance features, what
the tracker's own backbone sees) and ``xp`` (transparency features). Cells
carry i.i.d. background noise around a per-sequence texture mean. The
target adds a signature direction scaled by its (receptive-field blurred)
box coverage: in ``x`` the signature lies in the first half of the
channels at ``appearance_snr``, in ``xp`` it lies in the second half at
``transparency_snr``.

Both streams also carry oriented edge responses: the horizontal and vertical
gradients of the target coefficient map along two fixed directions per
stream, standing in for the local shape cues of a real backbone. They let a
per-cell regressor tell on which side of the target centre it sits. The edge
directions belong to the "backbone", not to a dataset, so they do not depend
on the config seed; signatures are drawn orthogonal to them.

Transparency signatures come from object classes. A class direction mixes
a shared "transparency" axis with a class-specific component, so classes
held out for testing differ from the training ones while sharing the
generic cue. Appearance signatures are drawn per sequence.

All generation runs on :class:`totem.rng.Rng`, so the output is
bit-identical across platforms for a given seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .metrics import ATTRIBUTES, BoundingBox
from .rng import Rng, derive_seed
from .tensorio import read_records, write_records

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# attribute strengths
IV_FINAL_GAIN = 0.5
ARC_WARP = 2.0  # aspect ratio change first -> last frame
DEF_AMPLITUDE = 0.3
SV_SCALE = 2.0  # linear size ratio last / first
FM_FACTOR = 3.0
ROT_ANGLE = math.pi / 3
BC_STRENGTH = 0.6  # background std along the signature, relative to snr
MB_MIX = 0.5
LR_BLOCK = 2
BACKBONE_SEED = 0x70E3  # fixes the edge-response directions of both streams
MIN_EDGE_HALF = 8  # below this many channels per stream there are no edge cues


@dataclass(frozen=True)
class SynthConfig:
    h: int = 16
    w: int = 16
    c: int = 64
    num_train_sequences: int = 45
    num_test_sequences: int = 60
    frames_per_sequence: int = 15
    target_size_range: tuple[float, float] = (3.0, 6.0)
    max_step: float = 1.0
    appearance_snr: float = 2.0
    transparency_snr: float = 10.0
    num_train_classes: int = 3
    num_test_classes: int = 12
    shared_fraction: float = 0.85  # weight of the shared axis in class directions
    texture_std: float = 0.5  # spread of per-sequence background means
    rf_sigma: float = 1.0  # receptive-field blur (cells), 0 = none
    edge_gain: float = 2.0  # edge responses relative to the signature
    attribute_rate: float = 0.08
    forced_attributes: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.target_size_range
        if not 1.0 <= lo <= hi:
            raise ConfigError(f"target_size_range {self.target_size_range} must satisfy 1 <= lo <= hi")
        if hi > min(self.h, self.w):
            raise ConfigError(f"target size {hi} larger than the {self.h}x{self.w} grid")
        if hi * SV_SCALE * math.sqrt(ARC_WARP) > min(self.h, self.w) and (self.attribute_rate > 0 or self.forced_attributes):
            log.debug("largest warped targets will be clipped by the grid")
        if self.frames_per_sequence < 1 or self.c < 2 or self.c % 2:
            raise ConfigError("need >= 1 frame and an even channel count >= 2")
        for a in self.forced_attributes:
            if a not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {a!r}; valid tags: {', '.join(ATTRIBUTES)}")

    @classmethod
    def transparent(cls, **kw) -> "SynthConfig":
        return cls(**kw)

    @classmethod
    def opaque(cls, **kw) -> "SynthConfig":
        """Appearance-informative regime used to pretrain the model predictor."""
        return cls(**{"appearance_snr": 10.0, "transparency_snr": 0.0, "shared_fraction": 0.6, **kw})

    @classmethod
    def reference(cls, **kw) -> "SynthConfig":
        """18 x 18 grid of 256-dim features (288 px input at stride 16)."""
        return cls(**{"h": 18, "w": 18, "c": 256, **kw})

    @classmethod
    def ablation(cls, **kw) -> "SynthConfig":
        """Smaller grid and width so the multi-seed ablations stay cheap."""
        return cls(**{"h": 12, "w": 12, "c": 32, "target_size_range": (2.5, 5.0), **kw})

    @property
    def num_sequences(self) -> int:
        return self.num_train_sequences + self.num_test_sequences


@dataclass
class Recipe:
    """Latent description of a sequence; ``render`` turns it into maps."""

    seed: int
    base_size: tuple[float, float]
    start_center: tuple[float, float]
    steps: np.ndarray  # (T, 2) unit-disc displacement draws
    max_step: float
    size_scale: np.ndarray  # (T,)
    aspect: np.ndarray  # (T,) width multiplier, height divisor
    ov_offset: np.ndarray  # (T, 2) extra displacement that can leave the grid
    gain: np.ndarray  # (T,)
    visibility: np.ndarray  # (T,)
    occlusion: np.ndarray  # (T,) occluded fraction of the box, from the left
    app_dirs: np.ndarray  # (T, c)
    trans_dirs: np.ndarray  # (T, c)
    bg_x: np.ndarray  # (c,)
    bg_xp: np.ndarray  # (c,)
    bc: bool = False
    mb: bool = False
    lr: bool = False


@dataclass
class SynthSequence:
    seq_id: str
    x: np.ndarray  # (T, h, w, c)
    xp: np.ndarray  # (T, h, w, c)
    gt: list[BoundingBox]
    attributes: tuple[str, ...] = ()
    class_id: int = -1
    split: str = "train"
    recipe: Recipe | None = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    sequences: list[SynthSequence]

    def split(self, name: str) -> list[SynthSequence]:
        return [s for s in self.sequences if s.split == name]

    @property
    def train(self) -> list[SynthSequence]:
        return self.split("train")

    @property
    def test(self) -> list[SynthSequence]:
        return self.split("test")

    def by_id(self, seq_id: str) -> SynthSequence:
        for s in self.sequences:
            if s.seq_id == seq_id:
                return s
        raise KeyError(seq_id)


# --------------------------------------------------------------------------
# geometry


def trajectory(recipe: Recipe, h: int, w: int) -> np.ndarray:
    """Unclipped boxes (T, 4) as x, y, w, h."""
    T = len(recipe.steps)
    bw = recipe.base_size[0] * recipe.size_scale * recipe.aspect
    bh = recipe.base_size[1] * recipe.size_scale / recipe.aspect
    bw, bh = np.minimum(bw, w), np.minimum(bh, h)
    centers = np.empty((T, 2))
    c = np.array(recipe.start_center, dtype=np.float64)
    for t in range(T):
        lo = np.array([bw[t] / 2, bh[t] / 2])
        hi = np.array([w - bw[t] / 2, h - bh[t] / 2])
        if t:
            d = recipe.steps[t] * recipe.max_step
            nxt = c + d
            # bounce off the borders
            out = (nxt < lo) | (nxt > hi)
            nxt = np.where(out, c - d, nxt)
            c = np.clip(nxt, lo, hi)
        else:
            c = np.clip(c, lo, hi)
        centers[t] = c
    centers = centers + recipe.ov_offset
    return np.stack([centers[:, 0] - bw / 2, centers[:, 1] - bh / 2, bw, bh], axis=1)


def clip_box(box: np.ndarray, h: int, w: int) -> BoundingBox:
    """Clip to the grid; a box fully outside becomes an empty box on the border."""
    x0, y0 = box[0], box[1]
    x1, y1 = x0 + box[2], y0 + box[3]
    cx0, cy0 = min(max(x0, 0.0), w), min(max(y0, 0.0), h)
    cx1, cy1 = min(max(x1, 0.0), w), min(max(y1, 0.0), h)
    if cx1 <= cx0 or cy1 <= cy0:
        return BoundingBox(float(cx0), float(cy0), 0.0, 0.0)
    return BoundingBox(float(cx0), float(cy0), float(cx1 - cx0), float(cy1 - cy0))


def coverage(box: np.ndarray, h: int, w: int, occluded: float = 0.0) -> np.ndarray:
    """Fraction of every cell covered by the (visible part of the) box."""
    x0, y0, bw, bh = box
    x0 = x0 + occluded * bw
    x1, y1 = box[0] + bw, y0 + bh
    cols = np.clip(np.minimum(np.arange(1, w + 1), x1) - np.maximum(np.arange(w), x0), 0.0, 1.0)
    rows = np.clip(np.minimum(np.arange(1, h + 1), y1) - np.maximum(np.arange(h), y0), 0.0, 1.0)
    return rows[:, None] * cols[None, :]


def _blur(m: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return m
    r = int(math.ceil(3 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(m, r)
    tmp = sum(k[i] * pad[i:i + m.shape[0], r:r + m.shape[1]] for i in range(2 * r + 1))
    tmp = np.pad(tmp, ((0, 0), (r, r)))
    return sum(k[i] * tmp[:, i:i + m.shape[1]] for i in range(2 * r + 1))


def _block_average(m: np.ndarray, b: int) -> np.ndarray:
    h, w = m.shape
    H, W = -(-h // b) * b, -(-w // b) * b
    p = np.zeros((H, W))
    p[:h, :w] = m
    blocks = p.reshape(H // b, b, W // b, b).mean(axis=(1, 3))
    return np.repeat(np.repeat(blocks, b, axis=0), b, axis=1)[:h, :w]


# --------------------------------------------------------------------------
# rendering


def signal_maps(recipe: Recipe, cfg: SynthConfig) -> np.ndarray:
    """Per-frame target coefficient maps (T, h, w)."""
    boxes = trajectory(recipe, cfg.h, cfg.w)
    maps = []
    for t, box in enumerate(boxes):
        cov = coverage(box, cfg.h, cfg.w, recipe.occlusion[t])
        if recipe.lr:
            cov = _block_average(cov, LR_BLOCK)
        maps.append(_blur(cov, cfg.rf_sigma) * recipe.visibility[t])
    k = np.stack(maps)
    if recipe.mb:
        k[1:] = (1 - MB_MIX) * k[1:] + MB_MIX * k[:-1]
    return k


def render(recipe: Recipe, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, list[BoundingBox]]:
    T, h, w, c = len(recipe.steps), cfg.h, cfg.w, cfg.c
    kappa = signal_maps(recipe, cfg)
    edges = edge_directions(c)
    noise = Rng(derive_seed(recipe.seed, "noise"))
    x = np.empty((T, h, w, c))
    xp = np.empty((T, h, w, c))
    bc_rng = Rng(derive_seed(recipe.seed, "bc"))
    for t in range(T):
        nx = noise.normal(h * w * c).reshape(h, w, c)
        nxp = noise.normal(h * w * c).reshape(h, w, c)
        if recipe.bc:
            # clutter: background cells also vary along the target signatures
            nx += (BC_STRENGTH * cfg.appearance_snr) * bc_rng.normal(h * w).reshape(h, w, 1) * recipe.app_dirs[t]
            nxp += (BC_STRENGTH * cfg.transparency_snr) * bc_rng.normal(h * w).reshape(h, w, 1) * recipe.trans_dirs[t]
        sx = (cfg.appearance_snr * kappa[t])[..., None] * recipe.app_dirs[t]
        sxp = (cfg.transparency_snr * kappa[t])[..., None] * recipe.trans_dirs[t]
        if cfg.edge_gain and min(h, w) > 1:
            gy, gx = np.gradient(kappa[t])
            sx += cfg.edge_gain * cfg.appearance_snr * (gx[..., None] * edges[0] + gy[..., None] * edges[1])
            sxp += cfg.edge_gain * cfg.transparency_snr * (gx[..., None] * edges[2] + gy[..., None] * edges[3])
        x[t] = recipe.gain[t] * (recipe.bg_x + nx + sx)
        xp[t] = recipe.gain[t] * (recipe.bg_xp + nxp + sxp)
    gt = [clip_box(b, h, w) for b in trajectory(recipe, h, w)]
    return x, xp, gt


# --------------------------------------------------------------------------
# directions


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def edge_directions(c: int) -> np.ndarray:
    """(4, c): x/y edge directions of the appearance half, then of the
    transparency half. Orthonormal within each half; zero when a half has
    fewer than MIN_EDGE_HALF channels."""
    half = c // 2
    out = np.zeros((4, c))
    if half < MIN_EDGE_HALF:
        return out
    rng = Rng(derive_seed(BACKBONE_SEED, "edges"))
    for k, lo in enumerate((0, half)):
        n = c - half if lo else half
        a, b = rng.spawn(k).normal(2 * n).reshape(2, n)
        a = _unit(a)
        out[2 * k, lo:lo + n] = a
        out[2 * k + 1, lo:lo + n] = _unit(b - (b @ a) * a)
    return out


def _in_half(rng: Rng, c: int, second: bool) -> np.ndarray:
    """Unit vector in one half of the channels, orthogonal to its edge directions."""
    v = np.zeros(c)
    half = c // 2
    if second:
        v[half:] = rng.unit_vector(c - half)
    else:
        v[:half] = rng.unit_vector(half)
    e = edge_directions(c)[2:] if second else edge_directions(c)[:2]
    v -= e.T @ (e @ v)
    return _unit(v)


def class_directions(cfg: SynthConfig) -> np.ndarray:
    """Transparency signatures (num_classes, c); train classes come first."""
    rng = Rng(derive_seed(cfg.seed, "classes"))
    shared = _in_half(rng.spawn("shared"), cfg.c, second=True)
    n = cfg.num_train_classes + cfg.num_test_classes
    a = cfg.shared_fraction
    dirs = []
    for k in range(n):
        own = _in_half(rng.spawn(f"class{k}"), cfg.c, second=True)
        own = _unit(own - (own @ shared) * shared)
        dirs.append(_unit(a * shared + math.sqrt(1 - a * a) * own))
    return np.stack(dirs)


def _rotate_towards(d0: np.ndarray, other: np.ndarray, angles: np.ndarray) -> np.ndarray:
    u = _unit(other - (other @ d0) * d0)
    return np.cos(angles)[:, None] * d0 + np.sin(angles)[:, None] * u


# --------------------------------------------------------------------------
# generation


def _base_recipe(cfg: SynthConfig, seed: int, trans_dir: np.ndarray) -> Recipe:
    rng = Rng(seed)
    T = cfg.frames_per_sequence
    lo, hi = cfg.target_size_range
    size = rng.spawn("size").uniform(2, lo, hi)
    start = rng.spawn("start").uniform(2)
    cx = size[0] / 2 + start[0] * (cfg.w - size[0])
    cy = size[1] / 2 + start[1] * (cfg.h - size[1])
    mv = rng.spawn("motion")
    ang = mv.uniform(T, 0.0, 2 * math.pi)
    mag = mv.uniform(T)
    steps = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
    steps[0] = 0.0
    app = _in_half(rng.spawn("appearance"), cfg.c, second=False)
    tex = rng.spawn("texture")
    return Recipe(
        seed=seed,
        base_size=(float(size[0]), float(size[1])),
        start_center=(float(cx), float(cy)),
        steps=steps,
        max_step=cfg.max_step,
        size_scale=np.ones(T),
        aspect=np.ones(T),
        ov_offset=np.zeros((T, 2)),
        gain=np.ones(T),
        visibility=np.ones(T),
        occlusion=np.zeros(T),
        app_dirs=np.tile(app, (T, 1)),
        trans_dirs=np.tile(trans_dir, (T, 1)),
        bg_x=cfg.texture_std * tex.normal(cfg.c),
        bg_xp=cfg.texture_std * tex.normal(cfg.c),
    )


def _sequence(cfg: SynthConfig, recipe: Recipe, seq_id: str, class_id: int, split: str, attrs=()) -> SynthSequence:
    x, xp, gt = render(recipe, cfg)
    return SynthSequence(seq_id, x, xp, gt, tuple(attrs), class_id, split, recipe)


def generate(cfg: SynthConfig) -> Dataset:
    """Train sequences cycle through the train classes, test ones through the rest."""
    dirs = class_directions(cfg)
    seqs = []
    attr_rng = Rng(derive_seed(cfg.seed, "attributes"))
    for i in range(cfg.num_sequences):
        if i < cfg.num_train_sequences:
            split, cls = "train", i % cfg.num_train_classes
        else:
            j = i - cfg.num_train_sequences
            split, cls = "test", cfg.num_train_classes + j % cfg.num_test_classes
        recipe = _base_recipe(cfg, derive_seed(cfg.seed, f"seq{i}"), dirs[cls])
        seq = _sequence(cfg, recipe, f"seq{i:03d}", cls, split)
        draws = attr_rng.uniform(len(ATTRIBUTES))
        chosen = [a for a, u in zip(ATTRIBUTES, draws) if u < cfg.attribute_rate or a in cfg.forced_attributes]
        for a in chosen:
            seq = inject_attribute(seq, a, cfg)
        seqs.append(seq)
    return Dataset(seqs)


def heldout_sequences(cfg: SynthConfig, n: int) -> list[SynthSequence]:
    """``n`` unseen sequences of the train classes.

    Sequence ``i`` depends only on the seed and ``i``, so extending the train
    split past both original splits leaves every earlier index unchanged and
    appends fresh ones.
    """
    total = cfg.num_sequences
    full = generate(replace(cfg, num_train_sequences=total + n, num_test_sequences=0))
    return full.train[total:]


def _span(T: int, span: tuple[int, int] | None, default: tuple[float, float]) -> slice:
    if span is None:
        span = (int(round(default[0] * T)), int(round(default[1] * T)))
    a, b = max(0, span[0]), min(T, span[1])
    return slice(a, max(a, b))


def inject_attribute(
    seq: SynthSequence, attr: str, cfg: SynthConfig, span: tuple[int, int] | None = None
) -> SynthSequence:
    """Apply one challenge attribute and re-render; returns a new sequence.

    ``span`` (frame range [a, b)) applies to POC/FOC/OV; defaults are the
    middle third for POC/OV and the last third for FOC.
    """
    if attr not in ATTRIBUTES:
        raise ConfigError(f"unknown attribute {attr!r}; valid tags: {', '.join(ATTRIBUTES)}")
    if seq.recipe is None:
        raise ConfigError(f"sequence {seq.seq_id} has no recipe (imported sequences cannot be re-rendered)")
    r = replace(seq.recipe)
    T = len(r.steps)
    ramp = np.arange(T) / max(T - 1, 1)
    rng = Rng(derive_seed(r.seed, f"attr-{attr}"))
    if attr == "IV":
        r.gain = r.gain * (1 + (IV_FINAL_GAIN - 1) * ramp)
    elif attr == "ARC":
        r.aspect = r.aspect * ARC_WARP ** (ramp / 2)
    elif attr == "DEF":
        phase = rng.uniform(1, 0, 2 * math.pi)[0]
        r.aspect = r.aspect * (1 + DEF_AMPLITUDE * np.sin(4 * math.pi * ramp + phase))
    elif attr == "SV":
        r.size_scale = r.size_scale * (1 + (SV_SCALE - 1) * ramp)
    elif attr == "FM":
        r.max_step = r.max_step * FM_FACTOR
    elif attr == "LR":
        r.lr = True
    elif attr == "POC":
        r.occlusion = r.occlusion.copy()
        r.occlusion[_span(T, span, (1 / 3, 2 / 3))] = 0.5
    elif attr == "FOC":
        r.visibility = r.visibility.copy()
        r.visibility[_span(T, span, (2 / 3, 1.0))] = 0.0
    elif attr == "OV":
        base = trajectory(r, cfg.h, cfg.w)
        sl = _span(T, span, (1 / 3, 2 / 3))
        mid = (sl.start + sl.stop - 1) / 2
        c = base[:, :2] + base[:, 2:] / 2
        # push towards the nearest border far enough to leave the grid at mid-span
        dists = np.array([c[sl.start, 0], cfg.w - c[sl.start, 0], c[sl.start, 1], cfg.h - c[sl.start, 1]])
        side = int(np.argmin(dists))
        extent = base[sl.start, 2] if side < 2 else base[sl.start, 3]
        need = dists[side] + extent / 2 + 1.0
        direction = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]][side], dtype=np.float64)
        half = max((sl.stop - sl.start) / 2, 0.5)
        prof = np.zeros(T)
        idx = np.arange(sl.start, sl.stop)
        prof[idx] = np.clip(1 - np.abs(idx - mid) / half, 0, 1)
        prof[idx] = np.minimum(1.0, prof[idx] * 2)
        r.ov_offset = r.ov_offset + prof[:, None] * need * direction
    elif attr == "MB":
        r.mb = True
    elif attr == "ROT":
        other = _in_half(rng.spawn("trans"), cfg.c, second=True)
        r.trans_dirs = _rotate_towards(r.trans_dirs[0], other, ROT_ANGLE * ramp)
        other = _in_half(rng.spawn("app"), cfg.c, second=False)
        r.app_dirs = _rotate_towards(r.app_dirs[0], other, ROT_ANGLE * ramp)
    elif attr == "BC":
        r.bc = True
    attrs = tuple(a for a in ATTRIBUTES if a in seq.attributes or a == attr)
    return _sequence(cfg, r, seq.seq_id, seq.class_id, seq.split, attrs)


# --------------------------------------------------------------------------
# benchmark directories


def export_dataset(dataset: Dataset, directory: str | Path) -> Path:
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for s in dataset.sequences:
            d = root / s.seq_id
            d.mkdir(exist_ok=True)
            write_records(d / "features.bin", {"x": s.x, "xp": s.xp, "class_id": np.array(float(s.class_id))})
            metrics.write_annotation_file(d / "groundtruth.txt", s.gt)
            (d / "attributes.txt").write_text("".join(a + "\n" for a in s.attributes))
        (root / "split.txt").write_text("".join(f"{s.split} {s.seq_id}\n" for s in dataset.sequences))
    except OSError as exc:
        raise OSError(f"cannot write benchmark under {root}: {exc}") from exc
    return root


def load_split(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("train", "test"):
            raise metrics.AnnotationError(f"{path}: line {lineno}: expected 'train <id>' or 'test <id>'")
        out.append((parts[0], parts[1]))
    return out


def import_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    if not (root / "split.txt").exists():
        raise FileNotFoundError(f"{root / 'split.txt'} not found (is {root} a benchmark directory?)")
    seqs = []
    for split, seq_id in load_split(root / "split.txt"):
        d = root / seq_id
        rec = read_records(d / "features.bin")
        gt = metrics.parse_annotation_file(d / "groundtruth.txt")
        attrs = tuple(metrics.parse_attribute_file(d / "attributes.txt"))
        x, xp = rec["x"], rec["xp"]
        if x.shape != xp.shape or x.ndim != 4 or len(gt) != x.shape[0]:
            raise metrics.AnnotationError(f"{d}: features {x.shape}/{xp.shape} do not match {len(gt)} boxes")
        seqs.append(SynthSequence(seq_id, x, xp, gt, attrs, int(rec.get("class_id", np.array(-1.0))), split))
    return Dataset(seqs)


# --------------------------------------------------------------------------
# diagnostics


def probe_auc(features: np.ndarray, labels: np.ndarray) -> float:
    """Least-squares linear probe for target presence; ROC AUC of its scores.

    ``features`` is (N, c) and ``labels`` a boolean (N,). The AUC equals the
    area under the threshold-sweep ROC curve (ties count one half).
    """
    X = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    w, *_ = np.linalg.lstsq(X, labels.astype(np.float64), rcond=None)
    s = X @ w
    pos, neg = s[labels], s[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("probe needs both positive and negative cells")
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    ranks = np.empty(len(order))
    allv = np.concatenate([pos, neg])[order]
    # average ranks over ties
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and allv[j + 1] == allv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return float((ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def presence_labels(seq: SynthSequence, h: int, w: int) -> np.ndarray:
    """(T, h, w) booleans: cell center inside the ground-truth box."""
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    out = []
    for b in seq.gt:
        out.append((xs >= b.x) & (xs < b.x + b.w) & (ys >= b.y) & (ys < b.y + b.h))
    return np.stack(out)
