"""Desk-scale training on covariance-separable synthetic data.

Classes share one mean and differ only in covariance, so a first-order
(global average) head has nothing to learn from while second-order heads do.
The model is ``[linear projection] -> pooling head -> k-way linear -> softmax``.
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ContractError, DomainError, TrainingError
from .fileio import atomic_write_bytes, atomic_write_text
from .numerics import RngStream, read_tensor, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}

# stream ids; per-sample data streams live above 2**48
_SIGMA_STREAM = 1 << 20
_MEAN_STREAM = 2 << 20
_INIT_STREAM = 3 << 20
_SHUFFLE_STREAM = 4 << 20

CKPT_MAGIC = b"SMCK"
CKPT_VERSION = 1


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class Config:
    """Flat JSON configuration: dataset, model and optimizer fields."""

    seed: int = 0
    # dataset
    k_classes: int = 4
    n_locations: int = 64
    c_channels: int = 16
    train_per_class: int = 500
    val_per_class: int = 200
    test_per_class: int = 200
    condition_number: float = 16.0
    mean_scale: float = 0.0
    # model
    projection_dim: int = None
    head: str = "smso"
    p: int = 16
    transform: str = "sqrt"
    mode: str = "direct"
    alpha_mode: str = "ema"
    alpha_fixed: float = 1.0
    ema_momentum: float = 0.9
    n_ref: int = None
    scale_bias: bool = True
    # optimizer
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    patience: int = 8
    lr_factor: float = 10.0
    plateau_threshold: float = 1e-4

    def __post_init__(self):
        if self.head not in ("smso", "bp", "gap"):
            raise ValueError(f"head must be smso, bp or gap, got {self.head!r}")
        if self.k_classes < 2 or self.n_locations < 2 or self.c_channels < 1:
            raise ValueError("need k_classes >= 2, n_locations >= 2, c_channels >= 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        """32-byte SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

@dataclass
class SyntheticDatasetSpec:
    k_classes: int
    n_locations: int
    c_channels: int
    shared_mean: np.ndarray
    class_sigmas: list
    samples_per_class: dict
    seed: int

    @classmethod
    def from_config(cls, config):
        """Random rotations of a log-spaced diagonal spectrum (condition ``condition_number``)."""
        c = config.c_channels
        spectrum = np.logspace(0.0, math.log10(config.condition_number), c)
        sigmas = []
        for k in range(config.k_classes):
            Q, R = np.linalg.qr(RngStream(config.seed, _SIGMA_STREAM + k).gaussian((c, c)))
            Q = Q * np.sign(np.diag(R))
            S = (Q * spectrum) @ Q.T
            sigmas.append(0.5 * (S + S.T))
        mean = config.mean_scale * RngStream(config.seed, _MEAN_STREAM).gaussian(c)
        counts = {"train": config.train_per_class, "val": config.val_per_class,
                  "test": config.test_per_class}
        return cls(config.k_classes, config.n_locations, c, mean, sigmas, counts, config.seed)


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    manifest: dict
    splits: dict

    def __getitem__(self, name):
        return self.splits[name]


def _sample_stream(seed, split, k, i):
    return RngStream(seed, (_SPLIT_CODES[split] << 56) | (k << 32) | i)


def gen_dataset(spec, out_dir=None):
    """Draw every split; each sample comes from its own (seed, split, class, index) stream."""
    from .numerics import cholesky

    factors = [cholesky(S) for S in spec.class_sigmas]
    n, c = spec.n_locations, spec.c_channels
    splits = {}
    for split in SPLITS:
        m = spec.samples_per_class[split]
        X = np.empty((spec.k_classes * m, n, c))
        y = np.repeat(np.arange(spec.k_classes), m)
        for k, L in enumerate(factors):
            for i in range(m):
                g = _sample_stream(spec.seed, split, k, i).gaussian((n, c))
                X[k * m + i] = spec.shared_mean + g @ L.T
        splits[split] = Split(X, y)
    manifest = {
        "format": "smso-dataset",
        "version": 1,
        "seed": spec.seed,
        "k_classes": spec.k_classes,
        "n_locations": n,
        "c_channels": c,
        "counts": {s: len(splits[s]) for s in SPLITS},
        "labels": list(range(spec.k_classes)),
        "files": {s: {"X": f"{s}_X.smst", "y": f"{s}_y.smst"} for s in SPLITS},
        "sigmas": "sigmas.smst",
        "mean": "mean.smst",
    }
    ds = Dataset(manifest, splits)
    if out_dir is not None:
        save_dataset(ds, spec, out_dir)
    return ds


def save_dataset(ds, spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for s in SPLITS:
        atomic_write_bytes(os.path.join(out_dir, ds.manifest["files"][s]["X"]), tensor_to_bytes(ds[s].X))
        atomic_write_bytes(os.path.join(out_dir, ds.manifest["files"][s]["y"]),
                           tensor_to_bytes(ds[s].y.astype(np.float64)))
    atomic_write_bytes(os.path.join(out_dir, "sigmas.smst"), tensor_to_bytes(np.stack(spec.class_sigmas)))
    atomic_write_bytes(os.path.join(out_dir, "mean.smst"), tensor_to_bytes(spec.shared_mean))
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(ds.manifest, indent=2) + "\n")


def load_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    splits = {}
    for s in SPLITS:
        X = read_tensor(os.path.join(directory, manifest["files"][s]["X"]))
        y = read_tensor(os.path.join(directory, manifest["files"][s]["y"])).astype(np.int64)
        splits[s] = Split(X, y)
    return Dataset(manifest, splits)


def check_dataset(config, dataset):
    m = dataset.manifest
    want = (config.k_classes, config.n_locations, config.c_channels)
    got = (m["k_classes"], m["n_locations"], m["c_channels"])
    if want != got:
        raise ContractError(f"dataset dims (k, n, c)={got} do not match config {want}")


# --------------------------------------------------------------------------
# Model pieces
# --------------------------------------------------------------------------

def glorot(fan_in, fan_out, stream):
    return stream.gaussian((fan_in, fan_out)) * math.sqrt(2.0 / (fan_in + fan_out))


def softmax_xent_fwd_bwd(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b, k = logits.shape
    if np.any((labels < 0) | (labels >= k)):
        raise DomainError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(b)
    loss = float(np.mean(lse - shifted[rows, labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / b


class Model:
    """Optional linear projection, pooling head, linear classifier."""

    def __init__(self, config, stream=None):
        stream = stream or RngStream(config.seed, _INIT_STREAM)
        self.config = config
        c = config.c_channels
        self.proj = None
        if config.projection_dim:
            self.proj = glorot(c, config.projection_dim, stream)
            c = config.projection_dim
        if config.head == "smso":
            self.head = layers.SmsoHead.init(
                c, config.p, stream, transform=config.transform, mode=config.mode,
                alpha_mode=config.alpha_mode, alpha_fixed=config.alpha_fixed,
                ema_momentum=config.ema_momentum, n_ref=config.n_ref, affine=config.scale_bias)
        elif config.head == "bp":
            self.head = layers.BpHead(c)
        else:
            self.head = layers.GapHead(c)
        self.cls_W = glorot(self.head.out_dim, config.k_classes, stream)
        self.cls_b = np.zeros(config.k_classes)

    def params(self):
        """Trainable arrays by name; updates happen in place."""
        out = {}
        if self.proj is not None:
            out["proj"] = self.proj
        for name, arr in self.head.params().items():
            out[f"head.{name}"] = arr
        out["cls.W"] = self.cls_W
        out["cls.b"] = self.cls_b
        return out

    def set_params(self, values):
        for name, arr in self.params().items():
            arr[...] = values[name]

    def n_params(self):
        return int(sum(a.size for a in self.params().values()))

    def logits(self, X, training=False):
        tape = {"X": X}
        H = X @ self.proj if self.proj is not None else X
        feats, head_tape = self.head.forward(H, training)
        tape.update(head=head_tape, feats=feats)
        return feats @ self.cls_W + self.cls_b, tape

    def forward(self, X, y, training=False):
        logits, tape = self.logits(X, training)
        loss, dlogits = softmax_xent_fwd_bwd(logits, y)
        tape.update(logits=logits, dlogits=dlogits)
        return loss, tape

    def backward(self, tape):
        dlogits = tape["dlogits"]
        grads = {"cls.W": tape["feats"].T @ dlogits, "cls.b": dlogits.sum(axis=0)}
        dfeats = dlogits @ self.cls_W.T
        dH, head_grads = self.head.backward(tape["head"], dfeats)
        for name, g in head_grads.items():
            grads[f"head.{name}"] = g
        if self.proj is not None:
            X = tape["X"]
            grads["proj"] = np.einsum("bnc,bnd->cd", X, dH)
            grads["dX"] = dH @ self.proj.T
        else:
            grads["dX"] = dH
        return grads

    def state_arrays(self):
        """Non-trainable state that must survive a checkpoint."""
        if isinstance(self.head, layers.SmsoHead) and self.head.alpha_ema is not None:
            return {"head/alpha_ema": self.head.alpha_ema}
        return {}

    def load_state_arrays(self, records):
        if isinstance(self.head, layers.SmsoHead):
            ema = records.get("head/alpha_ema")
            self.head.alpha_ema = None if ema is None else ema.copy()


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------

def sgd_step(params, grads, state, lr, momentum):
    """v <- momentum * v + g; theta <- theta - lr * v, in place."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        theta -= lr * v
    return params, state


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement.

    Improvement means beating the best loss by more than ``threshold``
    (relative). The bad-epoch counter restarts after each division, so one
    plateau yields one division. The rate never drops below ``lr_init / 1e3``.
    """

    def __init__(self, lr_init, patience=8, factor=10.0, threshold=1e-4):
        self.lr_init = lr_init
        self.lr = lr_init
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.num_bad = 0

    def step(self, val_loss):
        if math.isinf(self.best) or val_loss < self.best - self.threshold * abs(self.best):
            self.best = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.lr / self.factor, self.lr_init / 1e3)
                self.num_bad = 0
        return self.lr

    def state(self):
        return {"sched/lr": self.lr, "sched/best": self.best, "sched/num_bad": float(self.num_bad)}

    def load_state(self, records):
        self.lr = float(records["sched/lr"])
        self.best = float(records["sched/best"])
        self.num_bad = int(records["sched/num_bad"])


def plateau_scheduler(history, lr_init, patience=8, factor=10.0, threshold=1e-4):
    """Learning rate after replaying a history of validation losses."""
    if len(history) == 0:
        raise DomainError("plateau_scheduler needs a non-empty history")
    sched = PlateauScheduler(lr_init, patience, factor, threshold)
    for loss in history:
        sched.step(loss)
    return sched.lr


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(config_hash, records):
    if len(config_hash) != 32:
        raise ContractError("config hash must be 32 bytes")
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), config_hash, struct.pack("<I", len(records))]
    for name in sorted(records):
        key = name.encode()
        out.append(struct.pack("<H", len(key)) + key)
        out.append(tensor_to_bytes(np.asarray(records[name], dtype=np.float64)))
    return b"".join(out)


def parse_checkpoint(buf):
    """Returns (config_hash, {name: array})."""
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    config_hash = bytes(buf[8:40])
    (count,) = struct.unpack_from("<I", buf, 40)
    pos = 44
    records = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        name = bytes(buf[pos + 2:pos + 2 + klen]).decode()
        arr, pos = tensor_from_bytes(buf, pos + 2 + klen)
        records[name] = arr
    if pos != len(buf):
        raise ValueError("trailing bytes after checkpoint records")
    return config_hash, records


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


@dataclass
class TrainMetrics:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def rows(self):
        """Per-epoch records without wall-clock time (reproducible across runs)."""
        return [{"epoch": i + 1, "train_loss": self.train_loss[i], "val_loss": self.val_loss[i],
                 "val_acc": self.val_acc[i], "lr": self.lr[i]} for i in range(len(self.train_loss))]


@dataclass
class TrainState:
    epoch: int
    velocity: dict
    scheduler: PlateauScheduler
    metrics: TrainMetrics
    best_val_loss: float = math.inf


def _records(config, model, state):
    rec = {f"param/{k}": v for k, v in model.params().items()}
    rec.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    rec.update(model.state_arrays())
    rec.update(state.scheduler.state())
    m = state.metrics
    rec.update({
        "state/epoch": float(state.epoch),
        "state/best_val_loss": state.best_val_loss,
        "rng/seed": np.array([config.seed & 0xFFFFFFFF, config.seed >> 32], dtype=np.float64),
        "rng/next_shuffle_stream": float(_SHUFFLE_STREAM + state.epoch),
        "history/train_loss": np.array(m.train_loss),
        "history/val_loss": np.array(m.val_loss),
        "history/val_acc": np.array(m.val_acc),
        "history/lr": np.array(m.lr),
    })
    return rec


def save_checkpoint(path, config, model, state):
    atomic_write_bytes(path, checkpoint_bytes(config.digest(), _records(config, model, state)))


def restore(config, path):
    """Model and TrainState from a checkpoint written for ``config``."""
    digest, rec = load_checkpoint(path)
    if digest != config.digest():
        raise ContractError(f"{path}: checkpoint was written for a different config")
    model = Model(config)
    model.set_params({k[len("param/"):]: v for k, v in rec.items() if k.startswith("param/")})
    model.load_state_arrays(rec)
    sched = PlateauScheduler(config.lr, config.patience, config.lr_factor, config.plateau_threshold)
    sched.load_state(rec)
    metrics = TrainMetrics(*[[float(v) for v in rec[f"history/{k}"]]
                             for k in ("train_loss", "val_loss", "val_acc", "lr")])
    metrics.seconds = [math.nan] * len(metrics.train_loss)
    velocity = {k[len("velocity/"):]: v.copy() for k, v in rec.items() if k.startswith("velocity/")}
    state = TrainState(int(rec["state/epoch"]), velocity, sched, metrics, float(rec["state/best_val_loss"]))
    return model, state


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

def evaluate_model(model, split, batch_size=256):
    """(mean loss, top-1 accuracy); no state is updated."""
    if len(split) == 0:
        return math.nan, math.nan
    total, correct = 0.0, 0
    for start in range(0, len(split), batch_size):
        X = split.X[start:start + batch_size]
        y = split.y[start:start + batch_size]
        logits, _ = model.logits(X, training=False)
        loss, _ = softmax_xent_fwd_bwd(logits, y)
        total += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    return total / len(split), correct / len(split)


def train(config, dataset, out_dir=None, resume=None, stop_after=None):
    """Minibatch SGD with momentum and plateau decay.

    Writes ``best.smck`` (lowest validation loss) and ``last.smck`` to
    ``out_dir`` after every epoch when given. ``resume`` continues from a
    ``last.smck``; ``stop_after`` ends the run early after that many epochs
    in total (used to test resumption).
    Returns ``(TrainMetrics, Model)``.
    """
    check_dataset(config, dataset)
    if resume is not None:
        model, state = restore(config, resume)
    else:
        model = Model(config)
        sched = PlateauScheduler(config.lr, config.patience, config.lr_factor, config.plateau_threshold)
        state = TrainState(0, {}, sched, TrainMetrics())
    train_split, val_split = dataset["train"], dataset["val"]
    if len(train_split) == 0:
        raise DomainError("training split is empty")
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    params = model.params()
    for epoch in range(state.epoch, last_epoch):
        t0 = time.perf_counter()
        lr = state.scheduler.lr
        perm = RngStream(config.seed, _SHUFFLE_STREAM + epoch).permutation(len(train_split))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, tape = model.forward(train_split.X[idx], train_split.y[idx], training=True)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}; last good checkpoint kept")
            grads = model.backward(tape)
            sgd_step(params, grads, state.velocity, lr, config.momentum)
            total += loss * len(idx)
        train_loss = total / len(train_split)
        val_loss, val_acc = evaluate_model(model, val_split)
        monitor = val_loss if math.isfinite(val_loss) else train_loss
        state.scheduler.step(monitor)
        m = state.metrics
        m.train_loss.append(train_loss)
        m.val_loss.append(val_loss)
        m.val_acc.append(val_acc)
        m.lr.append(lr)
        m.seconds.append(time.perf_counter() - t0)
        state.epoch = epoch + 1
        logger.info("epoch %d train_loss=%.4f val_loss=%.4f val_acc=%.4f lr=%g",
                    epoch + 1, train_loss, val_loss, val_acc, lr)
        improved = monitor < state.best_val_loss
        if improved:
            state.best_val_loss = monitor
        if out_dir is not None:
            if improved:
                save_checkpoint(os.path.join(out_dir, "best.smck"), config, model, state)
            save_checkpoint(os.path.join(out_dir, "last.smck"), config, model, state)
    return state.metrics, model


def evaluate(config, checkpoint, dataset, split="test"):
    """Load ``checkpoint`` and report {'loss', 'accuracy', 'n'} on ``split``."""
    check_dataset(config, dataset)
    model, _ = restore(config, checkpoint)
    loss, acc = evaluate_model(model, dataset[split])
    return {"split": split, "loss": loss, "accuracy": acc, "n": len(dataset[split])}
