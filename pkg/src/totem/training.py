"""Training: AdamW, parameter freezing, triplet sampling and the two-step schedule.

Schedules (``step_mode``):

* ``one_step``: fusion trained with both feature streams live;
* ``two_step``: first part of the epochs with the appearance input replaced
  by zeros, then both inputs live (fresh optimizer state);
* ``two_step_plus_finetune``: two_step, then every parameter trainable.

The model predictor is "pretrained" beforehand on appearance-informative
data with the predictor consuming raw appearance features, then frozen.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import metrics
from .autodiff import NonFiniteError, Param, Tape
from .fusion import FusionConfig, FusionModule
from .metrics import SequenceResult
from .rng import Rng, derive_seed
from . import synthdata as sd
from .synthdata import SynthSequence
from .tensorio import read_records, write_records
from .tracker import Predictor, PredictorConfig, TrackerModel, total_loss, track_sequences, training_losses

log = logging.getLogger(__name__)

STEP_MODES = ("one_step", "two_step", "two_step_plus_finetune")
VARIANTS = ("totem", "totem_t", "ffn_fuse", "no_query", "no_phi")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    triplets_per_epoch: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    step_mode: str = "two_step"
    step1_fraction: float = 0.5
    finetune_epochs: int = 5
    finetune_learning_rate: float | None = None
    pretrain_epochs: int = 30
    pretrain_learning_rate: float = 3e-4
    pretrain_sequences: int = 400
    heldout_triplets: int = 48

    def __post_init__(self):
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")
        if min(self.epochs, self.triplets_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, triplets_per_epoch and batch_size must be positive")
        if not 0.0 < self.step1_fraction < 1.0:
            raise ValueError("step1_fraction must lie strictly between 0 and 1")

    @classmethod
    def reference(cls, **kw) -> "TrainConfig":
        return cls(**{"epochs": 25, "triplets_per_epoch": 4000, "batch_size": 18, "learning_rate": 1e-4, **kw})

    @property
    def step1_epochs(self) -> int:
        return max(1, min(self.epochs - 1, round(self.epochs * self.step1_fraction)))

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>", base: "TrainConfig | None" = None) -> "TrainConfig":
        return parse_config(cls, text, source, base)


def _fmt(v) -> str:
    return "none" if v is None else str(v)


def parse_config(cls, text: str, source: str = "<config>", base=None):
    """key=value lines (``#`` comments allowed) onto a frozen dataclass."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}: line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"{source}: line {lineno}: unknown key {key!r}; valid keys: {', '.join(fields)}")
        default = getattr(base, key) if base is not None else fields[key].default
        try:
            values[key] = _coerce(val, default, fields[key].type)
        except ValueError as exc:
            raise ValueError(f"{source}: line {lineno}: bad value for {key!r}: {exc}") from exc
    try:
        if base is not None:
            return dataclasses.replace(base, **values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{source}: {exc}") from exc


def _coerce(val: str, default, type_name):
    t = str(type_name)
    if val.lower() == "none":
        if "None" in t:
            return None
        raise ValueError("None not allowed")
    if isinstance(default, bool) or t.startswith("bool"):
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if isinstance(default, tuple) or t.startswith("tuple"):
        items = [s.strip() for s in val.strip("()").split(",") if s.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    if isinstance(default, int) or t.startswith("int"):
        return int(val)
    if isinstance(default, float) or "float" in t:
        return float(val)
    return val


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay; frozen parameters carry no state."""

    def __init__(self, params: dict[str, Param], lr: float, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {n: p for n, p in params.items() if p.trainable}
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.t = 0

    @classmethod
    def from_config(cls, params: dict[str, Param], cfg: TrainConfig, lr: float | None = None) -> "AdamW":
        return cls(params, cfg.learning_rate if lr is None else lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self) -> None:
        live = {n: p for n, p in self.params.items() if p.trainable}
        for n, p in live.items():
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {n}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for n, p in live.items():
            g = p.grad
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_records(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array(float(self.t))}
        for n in self.params:
            out[f"adam/m/{n}"] = self.m[n]
            out[f"adam/v/{n}"] = self.v[n]
        return out

    def load_state_records(self, rec: dict[str, np.ndarray]) -> None:
        self.t = int(rec["adam/t"])
        for n in self.params:
            self.m[n] = rec[f"adam/m/{n}"].copy()
            self.v[n] = rec[f"adam/v/{n}"].copy()


def adamw_step(params: dict[str, Param], state: AdamW) -> None:
    """One optimizer update from the gradients accumulated in ``params``."""
    for n in state.params:
        if n not in params:
            raise KeyError(f"optimizer parameter {n} missing from the model")
    state.step()


def freeze_all_except_fusion(model: TrackerModel) -> TrackerModel:
    for p in model.predictor.params.values():
        p.trainable = False
    if model.fusion is not None:
        for p in model.fusion.params.values():
            p.trainable = True
    return model


def unfreeze_all(model: TrackerModel) -> TrackerModel:
    for p in model.parameters().values():
        p.trainable = True
    return model


def trainable_count(model: TrackerModel) -> int:
    return sum(p.size for p in model.parameters().values() if p.trainable)


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class FrameTriplet:
    seq: int  # index into the sequence list
    tr1: int
    tr2: int
    te: int


def _valid_frames(seq: SynthSequence) -> np.ndarray:
    return np.array([t for t, b in enumerate(seq.gt) if not b.empty], dtype=np.int64)


def sample_triplets(
    sequences: Sequence[SynthSequence], epoch_seed: int, count: int, batch_size: int
) -> list[list[FrameTriplet]]:
    """``count`` triplets of distinct frames from one sequence each, in batches.

    Sequences are drawn uniformly, then three distinct frames with a visible
    target; their roles are assigned in draw order, so train frames may
    precede or follow the test frame.
    """
    valid = []
    for k, s in enumerate(sequences):
        frames = _valid_frames(s)
        if len(frames) < 3:
            log.warning("sequence %s has fewer than 3 usable frames; skipped", s.seq_id)
            continue
        valid.append((k, frames))
    if not valid:
        raise ValueError("no sequence has 3 or more usable frames")
    rng = Rng(derive_seed(epoch_seed, "triplets"), lanes=64)
    picks = rng.integers(count, 0, len(valid))
    out = []
    for i in range(count):
        k, frames = valid[int(picks[i])]
        a, b, c = frames[rng.permutation(len(frames))[:3]]
        out.append(FrameTriplet(k, int(a), int(b), int(c)))
    return [out[i:i + batch_size] for i in range(0, count, batch_size)]


def batch_arrays(sequences: Sequence[SynthSequence], batch: Sequence[FrameTriplet]):
    """Stack a batch: x, xp (B, 3, h, w, c) and the three box lists."""
    x = np.stack([sequences[t.seq].x[[t.tr1, t.tr2, t.te]] for t in batch])
    xp = np.stack([sequences[t.seq].xp[[t.tr1, t.tr2, t.te]] for t in batch])
    b1 = [sequences[t.seq].gt[t.tr1] for t in batch]
    b2 = [sequences[t.seq].gt[t.tr2] for t in batch]
    bt = [sequences[t.seq].gt[t.te] for t in batch]
    return x, xp, b1, b2, bt


def batch_loss(model: TrackerModel, tape: Tape, arrays, reg_weight: float = 1.0):
    x, xp, b1, b2, bt = arrays
    out = model.forward(tape, x, xp, b1, b2)
    l1, l2 = training_losses(out, bt, model.predictor.cfg.label_sigma)
    return l1, l2, total_loss(l1, l2, reg_weight)


def evaluate_loss(model: TrackerModel, sequences, batches) -> float:
    """Mean total loss over fixed batches, no gradients."""
    vals = []
    for batch in batches:
        tape = Tape(record=False)
        _, _, tot = batch_loss(model, tape, batch_arrays(sequences, batch), model.predictor.cfg.reg_weight)
        vals.append(float(tot.value) * len(batch))
    return sum(vals) / sum(len(b) for b in batches)


def heldout_batches(sequences, cfg: TrainConfig) -> list[list[FrameTriplet]]:
    return sample_triplets(sequences, derive_seed(cfg.seed, "heldout"), cfg.heldout_triplets, cfg.batch_size)


# --------------------------------------------------------------------------
# checkpoints


def _text_record(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _record_text(a: np.ndarray) -> str:
    return bytes(a.astype(np.uint8).tolist()).decode("utf-8")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    trainable: dict[str, bool] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config)

    def save(self, path: str | Path) -> Path:
        rec: dict[str, np.ndarray] = {
            "meta/config": _text_record(json.dumps(self.model_config, sort_keys=True)),
            f"meta/config_hash/{self.config_hash}": np.zeros(0),
            "meta/step": np.array(float(self.step)),
        }
        for n, v in self.params.items():
            rec[f"param/{n}"] = v
            rec[f"trainable/{n}"] = np.array(1.0 if self.trainable.get(n, True) else 0.0)
        rec.update(self.optimizer)
        write_records(path, rec)
        return Path(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        rec = read_records(path)
        try:
            cfg = json.loads(_record_text(rec["meta/config"]))
        except KeyError as exc:
            raise ValueError(f"{path}: not a model checkpoint (missing config record)") from exc
        stored = [k.rsplit("/", 1)[1] for k in rec if k.startswith("meta/config_hash/")]
        ck = cls(
            params={k[len("param/"):]: v for k, v in rec.items() if k.startswith("param/")},
            model_config=cfg,
            optimizer={k: v for k, v in rec.items() if k.startswith("adam/")},
            step=int(rec["meta/step"]),
            trainable={k[len("trainable/"):]: bool(v) for k, v in rec.items() if k.startswith("trainable/")},
        )
        if stored != [ck.config_hash]:
            raise ValueError(f"{path}: config hash mismatch (file {stored}, computed {ck.config_hash})")
        return ck


def model_config(variant: str, fusion: FusionConfig | None, predictor: PredictorConfig, grid: tuple[int, int]) -> dict:
    return {
        "variant": variant,
        "fusion": dataclasses.asdict(fusion) if fusion is not None else None,
        "predictor": dataclasses.asdict(predictor),
        "grid": list(grid),
    }


def make_checkpoint(model: TrackerModel, mcfg: dict, opt: AdamW | None = None, step: int = 0) -> Checkpoint:
    params = model.parameters()
    return Checkpoint(
        {n: p.value.copy() for n, p in params.items()},
        mcfg,
        opt.state_records() if opt is not None else {},
        step,
        {n: p.trainable for n, p in params.items()},
    )


def model_from_checkpoint(ck: Checkpoint) -> TrackerModel:
    mc = ck.model_config
    fcfg = FusionConfig(**_tuples(mc["fusion"])) if mc.get("fusion") else None
    pcfg = PredictorConfig(**mc["predictor"])
    model = TrackerModel.build(fcfg, pcfg, seed=0)
    params = model.parameters()
    if set(params) != set(ck.params):
        missing = sorted(set(params) ^ set(ck.params))
        raise ValueError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for n, p in params.items():
        if p.shape != ck.params[n].shape:
            raise ValueError(f"checkpoint parameter {n} has shape {ck.params[n].shape}, model expects {p.shape}")
        p.value[...] = ck.params[n]
        p.trainable = ck.trainable.get(n, True)
    return model


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# loss log


@dataclass
class LossLog:
    rows: list[list] = field(default_factory=list)

    def epoch(self, epoch: int, step: str, l1: float, l2: float, total: float) -> None:
        self.rows.append([epoch, step, l1, l2, total])

    def marker(self, label: str) -> None:
        self.rows.append(["boundary", label, "", "", ""])

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "L1", "L2", "total"])
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    model: TrackerModel
    log: LossLog
    heldout_initial: float
    heldout_final: float
    steps: int
    checkpoint: Checkpoint | None = None
    stages: dict[str, Checkpoint] = field(default_factory=dict)


def run_epochs(
    model: TrackerModel,
    sequences: Sequence[SynthSequence],
    cfg: TrainConfig,
    opt: AdamW,
    epochs: Iterable[int],
    label: str,
    loss_log: LossLog,
    mcfg: dict | None = None,
    divergence_dir: Path | None = None,
) -> int:
    steps = 0
    for epoch in epochs:
        batches = sample_triplets(sequences, derive_seed(cfg.seed, f"epoch{epoch}"), cfg.triplets_per_epoch, cfg.batch_size)
        sums = np.zeros(3)
        n = 0
        for batch in batches:
            opt.zero_grad()
            try:
                tape = Tape()
                l1, l2, tot = batch_loss(model, tape, batch_arrays(sequences, batch), model.predictor.cfg.reg_weight)
                tape.backward(tot)
                opt.step()
            except NonFiniteError as exc:
                path = None
                if divergence_dir is not None and mcfg is not None:
                    path = make_checkpoint(model, mcfg, opt, opt.t).save(Path(divergence_dir) / "last_finite.ckpt")
                raise TrainingDiverged(f"training diverged in {label}, epoch {epoch}: {exc}", path) from exc
            sums += np.array([float(l1.value), float(l2.value), float(tot.value)]) * len(batch)
            n += len(batch)
            steps += 1
        m = sums / n
        loss_log.epoch(epoch, label, float(m[0]), float(m[1]), float(m[2]))
        log.info("%s epoch %d: L1=%.4f L2=%.4f total=%.4f", label, epoch, *m)
    return steps


def pretrain_predictor(predictor: Predictor, sequences: Sequence[SynthSequence], cfg: TrainConfig) -> LossLog:
    """Train the predictor alone on raw appearance features."""
    model = TrackerModel(predictor, None)
    for p in predictor.params.values():
        p.trainable = True
    opt = AdamW.from_config(predictor.params, cfg, cfg.pretrain_learning_rate)
    pcfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "pretrain"))
    loss_log = LossLog()
    run_epochs(model, sequences, pcfg, opt, range(cfg.pretrain_epochs), "pretrain", loss_log)
    return loss_log


PRETRAIN_GEOMETRY = ("h", "w", "c", "frames_per_sequence", "target_size_range", "max_step",
                     "num_train_classes", "texture_std", "rf_sigma", "edge_gain")


def pretrained_predictor(scfg: sd.SynthConfig, cfg: TrainConfig, seed: int, pcfg: PredictorConfig | None = None) -> Predictor:
    """Predictor trained on opaque-preset data with the geometry of ``scfg``."""
    geometry = {k: getattr(scfg, k) for k in PRETRAIN_GEOMETRY}
    opq = sd.generate(sd.SynthConfig.opaque(**{
        **geometry, "seed": derive_seed(seed, "opaque-data"),
        "num_train_sequences": cfg.pretrain_sequences, "num_test_sequences": 0,
    }))
    pred = Predictor(pcfg or PredictorConfig(channels=scfg.c, num_heads=2), seed=derive_seed(seed, "predictor"))
    pretrain_predictor(pred, opq.train, dataclasses.replace(cfg, seed=seed))
    return pred


def train(
    model: TrackerModel,
    sequences: Sequence[SynthSequence],
    cfg: TrainConfig,
    heldout: Sequence[SynthSequence] | None = None,
    mcfg: dict | None = None,
    out_dir: Path | None = None,
) -> TrainResult:
    """Train the fusion module (predictor frozen) under ``cfg.step_mode``."""
    if model.fusion is None:
        raise ValueError("train() needs a model with a fusion module")
    fusion = model.fusion
    if cfg.step_mode != "one_step" and fusion.cfg.ffn_fuse_mode:
        raise ValueError("two-step training is defined only for the transformer fusion (ffn_fuse_mode set)")
    freeze_all_except_fusion(model)
    held_seqs = heldout if heldout is not None else sequences
    held = heldout_batches(held_seqs, cfg)
    initial = evaluate_loss(model, held_seqs, held)
    loss_log = LossLog()
    stages: dict[str, Checkpoint] = {}
    steps = 0
    kw = dict(mcfg=mcfg, divergence_dir=out_dir)
    if cfg.step_mode == "one_step":
        opt = AdamW.from_config(model.parameters(), cfg)
        steps += run_epochs(model, sequences, cfg, opt, range(cfg.epochs), "one_step", loss_log, **kw)
    else:
        e1 = cfg.step1_epochs
        model.fusion = fusion.with_config(fusion.cfg.with_inputs(zero_x=True, zero_xp=fusion.cfg.zero_transparency_input))
        opt = AdamW.from_config(model.parameters(), cfg)
        steps += run_epochs(model, sequences, cfg, opt, range(e1), "step1", loss_log, **kw)
        model.fusion = fusion
        loss_log.marker("step2")
        opt = AdamW.from_config(model.parameters(), cfg)  # fresh moments for the new objective
        steps += run_epochs(model, sequences, cfg, opt, range(e1, cfg.epochs), "step2", loss_log, **kw)
        if cfg.step_mode == "two_step_plus_finetune":
            if mcfg is not None:
                stages["two_step"] = make_checkpoint(model, mcfg, opt, steps)
            steps += finetune_end_to_end(model, sequences, cfg, loss_log, **kw)
    final = evaluate_loss(model, held_seqs, held)
    ck = make_checkpoint(model, mcfg, opt, steps) if mcfg is not None else None
    return TrainResult(model, loss_log, initial, final, steps, ck, stages)


def finetune_end_to_end(model: TrackerModel, sequences, cfg: TrainConfig, loss_log: LossLog, **kw) -> int:
    unfreeze_all(model)
    lr = cfg.finetune_learning_rate if cfg.finetune_learning_rate is not None else cfg.learning_rate
    opt = AdamW.from_config(model.parameters(), cfg, lr)
    loss_log.marker("finetune")
    start = cfg.epochs
    return run_epochs(model, sequences, cfg, opt, range(start, start + cfg.finetune_epochs), "finetune", loss_log, **kw)


# --------------------------------------------------------------------------
# model construction


def variant_fusion_config(variant: str, channels: int, base: FusionConfig | None = None) -> FusionConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    cfg = base or FusionConfig(channels=channels)
    cfg = dataclasses.replace(cfg, channels=channels)
    if variant == "totem_t":
        return dataclasses.replace(cfg, zero_transparency_input=True)
    if variant == "ffn_fuse":
        return dataclasses.replace(cfg, ffn_fuse_mode=True)
    if variant == "no_query":
        return dataclasses.replace(cfg, use_query_embedding=False)
    if variant == "no_phi":
        return dataclasses.replace(cfg, use_projection_mlp=False)
    return cfg


def attach_fusion(predictor: Predictor, fusion_cfg: FusionConfig, seed: int) -> TrackerModel:
    """Fresh Xavier-initialised fusion in front of a (pretrained) predictor copy."""
    pred = Predictor(predictor.cfg, seed)
    for n, p in pred.params.items():
        p.value[...] = predictor.params[n].value
    return TrackerModel(pred, FusionModule(fusion_cfg, derive_seed(seed, "fusion-init")))


# --------------------------------------------------------------------------
# evaluation


def track_dataset(model: TrackerModel, sequences: Sequence[SynthSequence]) -> list[SequenceResult]:
    """Track every sequence from its first ground-truth box."""
    traces = track_sequences(model, [(s.x, s.xp, s.gt[0]) for s in sequences])
    return [SequenceResult(s.seq_id, s.gt, t.boxes, s.attributes) for s, t in zip(sequences, traces)]


def evaluate_tracker(model: TrackerModel, sequences: Sequence[SynthSequence]) -> metrics.TrackerMetrics:
    return metrics.evaluate_frames(track_dataset(model, sequences))
