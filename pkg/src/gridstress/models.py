"""Model assembly and training: the stress CNN, the MLP baseline and CART.

Network inputs come straight from a :class:`~gridstress.scenario.Dataset`:
image models see the normalized ``N x N`` angle-difference matrix of a
pattern's operating condition; the pair model sees the ``C(n, 2)`` pairwise
differences among a few selected buses.  The contingency id is encoded and
joined to the image features at the first dense layer.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from . import neural as nn
from .scenario import Dataset

log = logging.getLogger(__name__)

CLASSIFICATION, REGRESSION = "classification", "si-regression"
IMAGE, PAIRS = "image", "pairs"


class ModelError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


# ---------------------------------------------------------------------------
# architecture descriptions


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer descriptions plus input/output conventions.

    Layers are dicts with a ``type`` of ``conv`` (filters, kernel, stride,
    pad), ``pool`` (window, stride), ``relu``, ``flatten``, ``dropout`` (rate)
    or ``dense`` (width).  The first dense layer is where the contingency
    code joins the image features.
    """

    input_shape: tuple[int, ...]
    layers: tuple[dict, ...]
    head: str = CLASSIFICATION
    n_contingencies: int = 1
    encoding: str = "onehot"
    input_kind: str = IMAGE
    selected_buses: tuple[int, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        object.__setattr__(self, "selected_buses", tuple(self.selected_buses))
        if self.head not in (CLASSIFICATION, REGRESSION):
            raise ModelError(f"unknown head {self.head!r}")
        dense = [l for l in self.layers if l["type"] == "dense"]
        if not dense or dense[-1]["width"] != 1:
            raise ModelError("the output layer must be a single dense node")
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Shape after every layer (without batch axis); validates the chain."""
        shape = self.input_shape
        out = []
        for k, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv":
                if len(shape) != 3:
                    raise ModelError(f"layer {k}: conv needs an image input, got {shape}")
                pad, kern, stride = layer.get("pad", 0), layer["kernel"], layer.get("stride", 1)
                h = nn.conv_output_size(shape[1], kern, stride, pad)
                w = nn.conv_output_size(shape[2], kern, stride, pad)
                if h < 1 or w < 1:
                    raise ModelError(f"layer {k}: input {shape[1:]} too small for kernel {kern}")
                shape = (layer["filters"], h, w)
            elif kind == "pool":
                win, stride = layer.get("window", 2), layer.get("stride", 2)
                if len(shape) != 3 or shape[1] < win or shape[2] < win:
                    raise ModelError(f"layer {k}: input {shape} too small for {win}x{win} pooling")
                shape = (shape[0], nn.conv_output_size(shape[1], win, stride),
                         nn.conv_output_size(shape[2], win, stride))
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ModelError(f"layer {k}: dense needs a flat input, got {shape}")
                shape = (layer["width"],)
            elif kind in ("relu", "dropout"):
                pass
            else:
                raise ModelError(f"layer {k}: unknown type {kind!r}")
            out.append(shape)
        return out

    @property
    def code_width(self) -> int:
        return {"onehot": self.n_contingencies, "scalar": 1, "none": 0}[self.encoding]

    @property
    def flatten_width(self) -> int:
        """Width of the image features entering the first dense layer."""
        shape = self.input_shape
        for layer, after in zip(self.layers, self.shapes()):
            if layer["type"] == "dense":
                return int(np.prod(shape))
            shape = after
        raise ModelError("no dense layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [dict(l) for l in self.layers]
        d["selected_buses"] = list(self.selected_buses)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"]),
                      "layers": tuple(d["layers"]),
                      "selected_buses": tuple(d.get("selected_buses", ()))})


def _cnn_layers(pad: int, filters=(10, 20), kernel=5, width=1100, dropout=0.5):
    layers = []
    for f in filters:
        layers += [{"type": "conv", "filters": f, "kernel": kernel, "stride": 1, "pad": pad},
                   {"type": "relu"},
                   {"type": "pool", "window": 2, "stride": 2}]
    layers += [{"type": "flatten"},
               {"type": "dense", "width": width},
               {"type": "relu"},
               {"type": "dropout", "rate": dropout},
               {"type": "dense", "width": 1}]
    return layers


def build_paper_cnn(n_buses: int, n_contingencies: int, head: str = CLASSIFICATION,
                    encoding: str = "onehot", width: int = 1100) -> NetworkSpec:
    """Two conv(5x5)+ReLU+pool(2x2, s2) stages, dense(1100)+dropout(0.5), one output.

    Valid convolutions are used when the image is large enough; otherwise the
    convolutions are zero padded (pad 2) so that the spatial size survives.
    """
    if n_buses < 8:
        raise ModelError(f"need at least 8 buses for the CNN, got {n_buses}")
    for pad in (0, 2):
        try:
            return NetworkSpec(
                input_shape=(1, n_buses, n_buses), layers=tuple(_cnn_layers(pad, width=width)),
                head=head, n_contingencies=n_contingencies, encoding=encoding,
                name=f"paper-cnn-{n_buses}")
        except ModelError:
            continue
    raise ModelError(f"input {n_buses}x{n_buses} too small for the receptive field")


def build_mlp(n_selected_buses: int, selected_buses: Sequence[int] = (),
              head: str = CLASSIFICATION, hidden=(20, 12)) -> NetworkSpec:
    """Dense C(n,2) -> 20 -> 12 -> 1 over pairwise angle differences."""
    if n_selected_buses < 2:
        raise ModelError("need at least two selected buses")
    width = n_selected_buses * (n_selected_buses - 1) // 2
    layers = []
    for h in hidden:
        layers += [{"type": "dense", "width": h}, {"type": "relu"}]
    layers.append({"type": "dense", "width": 1})
    return NetworkSpec(input_shape=(width,), layers=tuple(layers), head=head,
                       n_contingencies=1, encoding="none", input_kind=PAIRS,
                       selected_buses=tuple(selected_buses), name=f"paper-mlp-{n_selected_buses}bus")


def preset(name: str, n_buses: int, n_contingencies: int, head: str = CLASSIFICATION,
           selected_buses: Sequence[int] = ()) -> NetworkSpec:
    if name.startswith("paper-cnn"):
        return build_paper_cnn(n_buses, n_contingencies, head)
    if name.startswith("paper-mlp"):
        return build_mlp(len(selected_buses), selected_buses, head)
    if name == "pjm-cnn":
        return build_pjm_cnn(n_buses, n_contingencies, head)
    raise ModelError(f"unknown preset {name!r}")


def build_pjm_cnn(n_buses: int, n_contingencies: int, head: str = CLASSIFICATION) -> NetworkSpec:
    """Variant with 5 and 9 zero-padded 5x5 filters, 2x1 pooling and 1000 nodes.

    The input geometry (the N x N angle image) is our choice.
    """
    layers = []
    for f in (5, 9):
        layers += [{"type": "conv", "filters": f, "kernel": 5, "stride": 1, "pad": 2},
                   {"type": "relu"}, {"type": "pool", "window": 2, "stride": 2}]
    layers += [{"type": "flatten"}, {"type": "dense", "width": 1000}, {"type": "relu"},
               {"type": "dropout", "rate": 0.5}, {"type": "dense", "width": 1}]
    return NetworkSpec((1, n_buses, n_buses), tuple(layers), head, n_contingencies,
                       name="pjm-cnn")


def parameter_count(spec: NetworkSpec) -> int:
    return sum(p.size for p in StressNet(spec).parameters().values())


# ---------------------------------------------------------------------------
# executable network


class StressNet:
    """Executable network for a :class:`NetworkSpec`.

    The layers before the first dense layer (the trunk) run once per
    distinct input image; the first dense layer joins the contingency code and
    everything after it runs per pattern.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng([seed, 0xC0])
        self.dropout_rng = np.random.default_rng([seed, 0xD0])
        trunk, head = [], []
        shape = spec.input_shape
        merge = None
        for layer, after in zip(spec.layers, spec.shapes()):
            kind = layer["type"]
            if kind == "conv":
                built = nn.Conv2D(shape[0], layer["filters"], layer["kernel"],
                                  layer.get("stride", 1), layer.get("pad", 0), rng, self.dtype)
            elif kind == "pool":
                built = nn.MaxPool2D(layer.get("window", 2), layer.get("stride", 2))
            elif kind == "relu":
                built = nn.ReLU()
            elif kind == "flatten":
                built = nn.Flatten()
            elif kind == "dropout":
                built = nn.Dropout(layer["rate"], self.dropout_rng)
            elif kind == "dense":
                if merge is None:
                    built = merge = nn.MergeDense(shape[0], spec.n_contingencies, layer["width"],
                                                  spec.encoding, rng, self.dtype)
                    shape = after
                    continue
                built = nn.Dense(shape[0], layer["width"], rng, self.dtype)
            (trunk if merge is None else head).append(built)
            shape = after
        self.trunk = nn.Sequential(trunk)
        self.merge = merge
        self.head = nn.Sequential(head)

    def parameters(self) -> dict[str, np.ndarray]:
        out = self.trunk.parameters("trunk.")
        out.update({f"merge.{k}": v for k, v in self.merge.params.items()})
        out.update(self.head.parameters("head."))
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = self.trunk.gradients("trunk.")
        out.update({f"merge.{k}": v for k, v in self.merge.grads.items()})
        out.update(self.head.gradients("head."))
        return out

    def zero_grad(self):
        self.trunk.zero_grad()
        self.merge.zero_grad()
        self.head.zero_grad()

    def forward(self, x_unique, group, codes, train: bool = False) -> np.ndarray:
        """Raw outputs (logits or SI estimates), one per pattern."""
        x = np.asarray(x_unique, dtype=self.dtype)
        feat = self.trunk.forward(x, train)
        feat = feat.reshape(feat.shape[0], -1)
        h = self.merge.forward((feat, np.asarray(group), np.asarray(codes)), train)
        return self.head.forward(h, train)[:, 0]

    def backward(self, dout) -> np.ndarray:
        dh = self.head.backward(np.asarray(dout, dtype=self.dtype)[:, None])
        dfeat = self.merge.backward(dh)
        if not self.trunk.layers:
            return dfeat
        return self.trunk.backward(dfeat)

    def loss_and_grad(self, x_unique, group, codes, target, train=True):
        out = self.forward(x_unique, group, codes, train)
        if self.spec.head == CLASSIFICATION:
            loss, dout = nn.cross_entropy_logits(out, target)
        else:
            loss, dout = nn.mse(out, target), nn.mse_grad(out, target)
        return loss, dout, out

    def load_parameters(self, params: dict[str, np.ndarray]):
        own = self.parameters()
        if set(own) != set(params):
            raise ModelError("parameter names do not match the architecture")
        for k, v in params.items():
            if own[k].shape != v.shape:
                raise ModelError(f"{k}: shape {v.shape} != {own[k].shape}")
            own[k][...] = v


# ---------------------------------------------------------------------------
# inputs


def pair_indices(n_bus: int, buses: Sequence[int]) -> np.ndarray:
    """Flat indices into an N x N image of the pairs (r, s), r < s in list order."""
    return np.array([r * n_bus + s for r, s in combinations(buses, 2)], dtype=np.int64)


def select_buses(ds: Dataset, n: int = 8, idx: np.ndarray | None = None) -> tuple[int, ...]:
    """Buses whose angle varies most over the (training) operating conditions."""
    rows = np.arange(ds.angles.shape[0]) if idx is None else np.unique(ds.oc_index[idx])
    spread = ds.angles[rows].astype(np.float64).std(axis=0)
    order = np.lexsort((np.arange(spread.size), -spread))
    return tuple(sorted(int(b) for b in order[:n]))


def model_inputs(spec: NetworkSpec, ds: Dataset, idx: np.ndarray, mean, scale):
    """(x_unique, group, codes) for the pattern indices ``idx``."""
    rows, group = np.unique(ds.oc_index[idx], return_inverse=True)
    x = _inputs_for_rows(spec, ds.angles[rows], mean, scale)
    return x, group, ds.contingency_id[idx]


def _inputs_for_rows(spec: NetworkSpec, angles: np.ndarray, mean, scale):
    a = np.asarray(angles, dtype=np.float64)
    n = a.shape[1]
    if spec.input_kind == PAIRS:
        pairs = pair_indices(n, spec.selected_buses)
        r, s = np.divmod(pairs, n)
        diff = a[:, r] - a[:, s]
        return (diff - mean[pairs]) / scale[pairs]
    img = a[:, :, None] - a[:, None, :]
    img = (img - mean.reshape(n, n)) / scale.reshape(n, n)
    return img[:, None]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    paper_exact_adam: bool = False
    # "oc-grouped" keeps the patterns of one OC together so that each batch
    # touches few distinct images; "random" shuffles patterns freely
    shuffle: str = "oc-grouped"
    patience: int | None = None
    # stop as soon as the held-out metric reaches this value
    target: float | None = None
    dtype: str = "float64"
    eval_chunk: int = 16
    step_trace: bool = False


@dataclass
class TrainedModel:
    spec: NetworkSpec
    net: StressNet
    config: TrainConfig
    norm_mean: np.ndarray
    norm_scale: np.ndarray
    dataset_fingerprint: str = ""
    adam: nn.AdamState | None = None
    trace: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def raw(self, ds: Dataset, idx: np.ndarray) -> np.ndarray:
        return raw_outputs(self, ds, idx)

    def predict_dataset(self, ds: Dataset, idx: np.ndarray) -> np.ndarray:
        out = raw_outputs(self, ds, idx)
        return nn.sigmoid(out) if self.spec.head == CLASSIFICATION else out


def _batches(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.shuffle == "random":
        order = rng.permutation(idx)
    else:
        rows = ds.oc_index[idx]
        ocs = rng.permutation(np.unique(rows))
        rank = np.empty(ds.angles.shape[0], dtype=np.int64)
        rank[ocs] = np.arange(ocs.size)
        jitter = rng.permutation(idx.size)
        # OC-major order, random within each OC
        order = idx[np.lexsort((jitter, rank[rows]))]
    for start in range(0, order.size, cfg.batch_size):
        yield order[start:start + cfg.batch_size]


def raw_outputs(model: TrainedModel, ds: Dataset, idx: np.ndarray, chunk: int | None = None):
    """Network outputs for ``idx`` (inference mode), evaluated a few OCs at a time."""
    idx = np.asarray(idx)
    out = np.empty(idx.size)
    if idx.size == 0:
        return out
    chunk = chunk or model.config.eval_chunk
    rows = ds.oc_index[idx]
    uniq = np.unique(rows)
    for start in range(0, uniq.size, chunk):
        sel = np.flatnonzero(np.isin(rows, uniq[start:start + chunk]))
        x, group, codes = model_inputs(model.spec, ds, idx[sel], model.norm_mean, model.norm_scale)
        out[sel] = model.net.forward(x, group, codes, train=False)
    return out


def evaluate(model: TrainedModel, ds: Dataset, idx: np.ndarray) -> dict:
    from .eval import confusion, mape_accuracy

    out = raw_outputs(model, ds, idx)
    if model.spec.head == CLASSIFICATION:
        y = ds.label_stressed[idx].astype(float)
        loss, _ = nn.cross_entropy_logits(out, y) if idx.size else (float("nan"), None)
        pred = out > 0  # sigmoid(out) > 0.5
        cm = confusion(ds.label_stressed[idx], pred)
        return {"loss": loss, "accuracy": cm.accuracy if idx.size else float("nan"),
                "fn_rate": cm.fn_rate, "fp_rate": cm.fp_rate}
    y = ds.label_si[idx]
    res = {"loss": nn.mse(out, y) if idx.size else float("nan")}
    try:
        mape, acc = mape_accuracy(y, out)
    except ValueError:
        mape, acc = float("nan"), float("nan")
    res.update({"mape": mape, "accuracy": acc})
    return res


def train(spec: NetworkSpec, ds: Dataset, config: TrainConfig | None = None,
          train_idx: np.ndarray | None = None, test_idx: np.ndarray | None = None,
          stats: tuple[np.ndarray, np.ndarray] | None = None, progress=None) -> TrainedModel:
    """Fit ``spec`` on the dataset's training split with Adam.

    ``stats`` defaults to the dataset's stored normalization statistics
    (derived from its training split).  After each epoch the held-out metric
    is appended to ``trace``; training stops early on ``config.target`` or
    after ``config.patience`` epochs without improvement.
    """
    cfg = config or TrainConfig()
    train_idx = ds.indices("train") if train_idx is None else np.asarray(train_idx)
    test_idx = ds.indices("test") if test_idx is None else np.asarray(test_idx)
    if train_idx.size == 0:
        raise ModelError("empty training set")
    if spec.head == CLASSIFICATION:
        labels = ds.label_stressed[train_idx]
        if labels.all() or not labels.any():
            raise ModelError("classification needs both classes in the training set")
    if spec.input_shape[-1] != ds.n_bus and spec.input_kind == IMAGE:
        raise ModelError(f"model expects {spec.input_shape[-1]} buses, dataset has {ds.n_bus}")
    if spec.encoding == "onehot" and spec.n_contingencies != ds.n_contingencies:
        raise ModelError("contingency count of the model and dataset differ")
    mean, scale = stats if stats is not None else (ds.norm_mean, ds.norm_scale)
    if mean is None:
        mean, scale = ds.subset_stats(train_idx)

    net = StressNet(spec, cfg.seed, np.dtype(cfg.dtype))
    adam = nn.AdamState(lr=cfg.lr, paper_exact=cfg.paper_exact_adam)
    model = TrainedModel(spec, net, cfg, mean, scale, ds.fingerprint, adam)
    rng = np.random.default_rng([cfg.seed, 0x5A])
    target_of = (lambda i: ds.label_stressed[i].astype(float)) if spec.head == CLASSIFICATION \
        else (lambda i: ds.label_si[i])
    best, stale = -math.inf, 0
    params = net.parameters()
    for epoch in range(1, cfg.epochs + 1):
        losses, weights = [], []
        for batch in _batches(ds, train_idx, cfg, rng):
            x, group, codes = model_inputs(spec, ds, batch, mean, scale)
            net.zero_grad()
            loss, dout, _ = net.loss_and_grad(x, group, codes, target_of(batch), train=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model.trace)
            net.backward(dout)
            try:
                nn.adam_step(params, net.gradients(), adam)
            except nn.NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), model.trace) from None
            losses.append(loss)
            weights.append(batch.size)
            if cfg.step_trace:
                model.step_trace.append({"epoch": epoch, "step": adam.t, "loss": loss})
        row = {"epoch": epoch, "step": adam.t,
               "train_loss": float(np.average(losses, weights=weights))}
        if test_idx.size:
            ev = evaluate(model, ds, test_idx)
            row.update({f"test_{k}": v for k, v in ev.items()})
        model.trace.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d: %s", epoch, row)
        metric = row.get("test_accuracy", -row["train_loss"])
        if cfg.target is not None and metric >= cfg.target:
            break
        if metric > best + 1e-12:
            best, stale = metric, 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.metrics = dict(model.trace[-1]) if model.trace else {}
    return model


def predict(model: TrainedModel, pattern) -> float:
    """Probability of stress (classification) or SI estimate for one pattern.

    ``pattern`` needs ``angle_diff`` (N x N, radians) and ``contingency_id``.
    """
    return float(predict_batch(model, [pattern.angle_diff], [pattern.contingency_id])[0])


def predict_batch(model: TrainedModel, angle_diffs, contingency_ids) -> np.ndarray:
    spec = model.spec
    diffs = np.asarray(angle_diffs, dtype=np.float64)
    codes = np.asarray(contingency_ids, dtype=np.int64)
    n = int(round(math.sqrt(model.norm_mean.size)))
    if diffs.ndim != 3 or diffs.shape[1:] != (n, n):
        raise ModelError(f"expected {n}x{n} angle-difference matrices, got {diffs.shape[1:]}")
    if codes.size != diffs.shape[0]:
        raise ModelError("one contingency id per matrix required")
    if spec.encoding != "none" and (np.any(codes < 0) or np.any(codes >= spec.n_contingencies)):
        raise ModelError("contingency id out of range")
    if spec.input_kind == PAIRS:
        pairs = pair_indices(n, spec.selected_buses)
        x = (diffs.reshape(len(diffs), -1)[:, pairs] - model.norm_mean[pairs]) / model.norm_scale[pairs]
    else:
        x = ((diffs - model.norm_mean.reshape(n, n)) / model.norm_scale.reshape(n, n))[:, None]
    out = model.net.forward(x, np.arange(len(diffs)), codes, train=False)
    return nn.sigmoid(out) if spec.head == CLASSIFICATION else out


def predict_contingencies(model: TrainedModel, angles: np.ndarray,
                          contingency_ids: Sequence[int] | None = None) -> np.ndarray:
    """Outputs for one operating condition (bus angles) over many contingencies.

    The angle image is pushed through the trunk once and shared by every
    contingency.
    """
    spec = model.spec
    codes = np.arange(spec.n_contingencies) if contingency_ids is None \
        else np.asarray(contingency_ids, dtype=np.int64)
    if spec.encoding != "none" and (np.any(codes < 0) or np.any(codes >= spec.n_contingencies)):
        raise ModelError("contingency id out of range")
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size ** 2 != model.norm_mean.size:
        raise ModelError("angle vector does not match the model geometry")
    x = _inputs_for_rows(spec, angles[None], model.norm_mean, model.norm_scale)
    out = model.net.forward(x, np.zeros(codes.size, dtype=np.int64), codes, train=False)
    return nn.sigmoid(out) if spec.head == CLASSIFICATION else out


def write_trace_csv(model: TrainedModel, fh) -> None:
    """Per-epoch held-out metrics, one row per epoch."""
    if not model.trace:
        return
    keys = list(model.trace[0])
    for row in model.trace:
        keys += [k for k in row if k not in keys]
    w = csv.DictWriter(fh, fieldnames=keys)
    w.writeheader()
    for row in model.trace:
        w.writerow(row)


# ---------------------------------------------------------------------------
# checkpoints
#
# offset  size  field
# 0       4     magic b"GSCK"
# 4       2     version (uint16 LE), currently 1
# 6       2     reserved, zero
# 8       8     header length H (uint64 LE)
# 16      H     UTF-8 JSON header, sorted keys; "blobs" lists [name, dtype,
#               shape, byte offset relative to the blob area, nbytes]
# ...           zero padding to a multiple of 8, then the blob area; every
#               blob is little-endian, C-ordered and 8-byte aligned.

CK_MAGIC = b"GSCK"
CK_VERSION = 1


def checkpoint_bytes(model: TrainedModel) -> bytes:
    blobs: list[tuple[str, np.ndarray]] = []
    for name, p in model.net.parameters().items():
        blobs.append((f"param/{name}", p))
    if model.adam is not None:
        for name in model.adam.m:
            blobs.append((f"adam_m/{name}", model.adam.m[name]))
            blobs.append((f"adam_v/{name}", model.adam.v[name]))
    blobs.append(("norm/mean", np.asarray(model.norm_mean, dtype=np.float64)))
    blobs.append(("norm/scale", np.asarray(model.norm_scale, dtype=np.float64)))
    index, offset = [], 0
    for name, arr in blobs:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<").str
        index.append([name, dt, list(arr.shape), offset, arr.nbytes])
        offset += arr.nbytes + (-arr.nbytes) % 8
    adam = None
    if model.adam is not None:
        adam = {k: getattr(model.adam, k) for k in ("lr", "beta1", "beta2", "eps", "t",
                                                    "paper_exact")}
    header = {
        "spec": model.spec.to_dict(),
        "config": asdict(model.config),
        "dataset_fingerprint": model.dataset_fingerprint,
        "adam": adam,
        "rng": {"dropout": _jsonable_rng(model.net.dropout_rng)},
        "metrics": model.metrics,
        "trace": model.trace,
        "blobs": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    out = io.BytesIO()
    out.write(CK_MAGIC + struct.pack("<HHQ", CK_VERSION, 0, len(head)))
    out.write(head + b"\0" * ((-len(head)) % 8))
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr).astype(np.ascontiguousarray(arr).dtype.newbyteorder("<")).tobytes()
        out.write(raw + b"\0" * ((-len(raw)) % 8))
    return out.getvalue()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _jsonable_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=_json_default))


def save_checkpoint(model: TrainedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> TrainedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CK_MAGIC:
        raise ModelError(f"{path}: not a checkpoint")
    version, _, hlen = struct.unpack_from("<HHQ", blob, 4)
    if version != CK_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen + (-hlen) % 8
    arrays = {}
    for name, dt, shape, off, nbytes in header["blobs"]:
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // np.dtype(dt).itemsize,
                                     offset=base + off).reshape(shape).copy()
    spec = NetworkSpec.from_dict(header["spec"])
    cfg = TrainConfig(**header["config"])
    net = StressNet(spec, cfg.seed, np.dtype(cfg.dtype))
    net.load_parameters({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    net.dropout_rng.bit_generator.state = header["rng"]["dropout"]
    adam = None
    if header["adam"] is not None:
        adam = nn.AdamState(**header["adam"])
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                adam.m[k[7:]] = v
            elif k.startswith("adam_v/"):
                adam.v[k[7:]] = v
    return TrainedModel(spec, net, cfg, arrays["norm/mean"], arrays["norm/scale"],
                        header["dataset_fingerprint"], adam, header["trace"], [],
                        header["metrics"])


# ---------------------------------------------------------------------------
# CART


@dataclass
class TreeNode:
    value: float
    n_samples: int
    impurity: float
    feature: int = -1
    threshold: float = math.nan
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())

    def n_leaves(self) -> int:
        return 1 if self.is_leaf else self.left.n_leaves() + self.right.n_leaves()


def gini(y) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return 0.0
    p = np.mean(y)
    return 1.0 - p * p - (1 - p) * (1 - p)


def _best_split(X, y, regression: bool):
    """Best (feature, threshold, score) by weighted child impurity; None if no split."""
    n = y.size
    best = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order].astype(np.float64)
        distinct = xs[1:] > xs[:-1]
        if not distinct.any():
            continue
        n_left = np.arange(1, n)
        n_right = n - n_left
        if regression:
            cs, cs2 = np.cumsum(ys)[:-1], np.cumsum(ys * ys)[:-1]
            ts, ts2 = ys.sum(), (ys * ys).sum()
            sse_l = cs2 - cs * cs / n_left
            sse_r = (ts2 - cs2) - (ts - cs) ** 2 / n_right
            score = (sse_l + sse_r) / n
        else:
            pos_l = np.cumsum(ys)[:-1]
            pos_r = ys.sum() - pos_l
            pl, pr = pos_l / n_left, pos_r / n_right
            g_l = 2 * pl * (1 - pl)
            g_r = 2 * pr * (1 - pr)
            score = (n_left * g_l + n_right * g_r) / n
        score = np.where(distinct, score, np.inf)
        k = int(np.argmin(score))
        if best is None or score[k] < best[2] - 1e-15:
            best = (f, 0.5 * (xs[k] + xs[k + 1]), float(score[k]))
    return best


def fit_cart(X, y, mnsn: int = 1, regression: bool = False,
             max_depth: int | None = None) -> TreeNode:
    """Grow a CART tree; a node is split only if it holds at least ``mnsn``
    samples and is impure.  Leaves predict the majority class (ties -> 0) or,
    with ``regression``, the mean target.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ModelError("cannot fit a tree on an empty dataset")
    if mnsn < 1:
        raise ModelError("mnsn must be at least 1")
    if X.ndim == 1:
        X = X[:, None]

    def leaf_value(yy):
        return float(yy.mean()) if regression else float(yy.mean() > 0.5)

    def impurity(yy):
        return float(yy.var()) if regression else gini(yy)

    def grow(rows, depth):
        yy = y[rows]
        node = TreeNode(leaf_value(yy), int(rows.size), impurity(yy))
        if rows.size < mnsn or node.impurity <= 0 or rows.size < 2:
            return node
        if max_depth is not None and depth >= max_depth:
            return node
        split = _best_split(X[rows], yy, regression)
        if split is None:
            return node
        f, thr, _ = split
        go_left = X[rows, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        return node

    return grow(np.arange(y.size), 0)


def predict_cart(tree: TreeNode, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    out = np.empty(X.shape[0])
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, rows = stack.pop()
        if node.is_leaf:
            out[rows] = node.value
            continue
        left = X[rows, node.feature] <= node.threshold
        stack.append((node.left, rows[left]))
        stack.append((node.right, rows[~left]))
    return out


def cart_features(ds: Dataset, idx: np.ndarray, buses: Sequence[int],
                  with_contingency: bool = True) -> np.ndarray:
    """Pairwise angle differences among ``buses`` (+ the contingency id)."""
    a = ds.angles[ds.oc_index[idx]].astype(np.float64)
    cols = [a[:, r] - a[:, s] for r, s in combinations(buses, 2)]
    if with_contingency:
        cols.append(ds.contingency_id[idx].astype(np.float64))
    return np.column_stack(cols)


def mnsn_sweep(X, y, mnsn_values=range(1, 21), k_folds: int = 5, seed: int = 0):
    """K-fold accuracy for every MNSN; returns ``(best_mnsn, table)``.

    ``table`` maps MNSN to mean fold accuracy; ties go to the smallest MNSN.
    """
    from .eval import stratified_folds

    values = list(mnsn_values)
    if not values:
        raise ModelError("empty MNSN range")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    folds = stratified_folds(y.astype(bool), k_folds, seed)
    table = {}
    for m in values:
        accs = []
        for k in range(k_folds):
            test = folds == k
            tree = fit_cart(X[~test], y[~test], m)
            accs.append(float(np.mean(predict_cart(tree, X[test]) == y[test])))
        table[m] = float(np.mean(accs))
    best = max(values, key=lambda m: (table[m], -m))
    return best, table


def tree_to_dict(node: TreeNode) -> dict:
    d = {"value": node.value, "n_samples": node.n_samples, "impurity": node.impurity}
    if not node.is_leaf:
        d.update(feature=node.feature, threshold=node.threshold,
                 left=tree_to_dict(node.left), right=tree_to_dict(node.right))
    return d


def tree_from_dict(d: dict) -> TreeNode:
    node = TreeNode(d["value"], d["n_samples"], d["impurity"])
    if "feature" in d:
        node.feature, node.threshold = d["feature"], d["threshold"]
        node.left, node.right = tree_from_dict(d["left"]), tree_from_dict(d["right"])
    return node


@dataclass
class CartModel:
    """A fitted tree plus the feature recipe it expects."""

    tree: TreeNode
    buses: tuple[int, ...]
    mnsn: int
    sweep: dict = field(default_factory=dict)
    regression: bool = False
    dataset_fingerprint: str = ""

    def features(self, ds: Dataset, idx: np.ndarray) -> np.ndarray:
        return cart_features(ds, idx, self.buses)

    def predict_dataset(self, ds: Dataset, idx: np.ndarray) -> np.ndarray:
        return predict_cart(self.tree, self.features(ds, idx))

    def to_json(self) -> str:
        return json.dumps({"kind": "cart", "buses": list(self.buses), "mnsn": self.mnsn,
                           "sweep": {str(k): v for k, v in self.sweep.items()},
                           "regression": self.regression,
                           "dataset_fingerprint": self.dataset_fingerprint,
                           "tree": tree_to_dict(self.tree)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CartModel":
        d = json.loads(text)
        return cls(tree_from_dict(d["tree"]), tuple(d["buses"]), d["mnsn"],
                   {int(k): v for k, v in d["sweep"].items()}, d["regression"],
                   d["dataset_fingerprint"])


def train_cart(ds: Dataset, train_idx: np.ndarray, buses: Sequence[int],
               mnsn_values=range(1, 21), k_folds: int = 5, seed: int = 0,
               sweep_limit: int | None = None) -> CartModel:
    """Pick MNSN by K-fold sweep on the training patterns, then refit on all of them.

    ``sweep_limit`` caps the number of training patterns used by the sweep.
    """
    X = cart_features(ds, train_idx, buses)
    y = ds.label_stressed[train_idx].astype(np.float64)
    values = list(mnsn_values)
    if len(values) == 1:
        best, table = values[0], {}
    else:
        rows = np.arange(y.size)
        if sweep_limit is not None and y.size > sweep_limit:
            rows = np.sort(np.random.default_rng([seed, 0xCA]).choice(y.size, sweep_limit,
                                                                     replace=False))
        best, table = mnsn_sweep(X[rows], y[rows], values, k_folds, seed)
    return CartModel(fit_cart(X, y, best), tuple(buses), best, table, False, ds.fingerprint)
