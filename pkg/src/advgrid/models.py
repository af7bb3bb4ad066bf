"""Desk-scale MLP classifiers: construction, training (standard and
adversarial), prediction, and bit-exact checkpoint persistence."""

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import engine

CHECKPOINT_MAGIC = b"AGCK"
CHECKPOINT_VERSION = 1

KIND_STANDARD = "standard"
KIND_ADVERSARIAL = "adversarial"


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture + init seed; fully determines the initial weights."""

    height: int
    width: int
    hidden: tuple = (32,)
    n_classes: int = 3
    init_seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if any(w <= 0 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def input_dim(self):
        return self.height * self.width

    def to_dict(self):
        return {
            "height": self.height,
            "width": self.width,
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            height=int(d["height"]),
            width=int(d["width"]),
            hidden=tuple(d["hidden"]),
            n_classes=int(d["n_classes"]),
            init_seed=int(d["init_seed"]),
        )


def _init_layers(spec):
    rng = np.random.default_rng(spec.init_seed)
    dims = [spec.input_dim, *spec.hidden, spec.n_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return layers


class MLPClassifier:
    """Fully connected ReLU classifier over flattened images.

    Weights are plain float64 arrays; a trained instance is immutable in
    practice and safe to share across evaluation workers.
    """

    def __init__(self, spec, layers=None):
        self.spec = spec
        self.layers = layers if layers is not None else _init_layers(spec)

    def get_params(self):
        return self.spec.to_dict()

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.shape[0] != self.spec.input_dim:
            raise engine.DimensionError(
                f"expected {self.spec.input_dim} pixels, got {x.shape[0]}"
            )
        return x

    def logits(self, x):
        h = self._flat(x)
        with np.errstate(over="ignore", invalid="ignore"):
            for W, b in self.layers[:-1]:
                h = np.maximum(W @ h + b, 0.0)
            W, b = self.layers[-1]
            return W @ h + b

    def logits_node(self, graph, x_node):
        """Differentiable forward pass; weights enter as constants."""
        h = x_node
        for W, b in self.layers[:-1]:
            h = engine.relu(engine.linear_forward(W, h, b))
        W, b = self.layers[-1]
        return engine.linear_forward(W, h, b)

    def probs(self, x):
        return engine.softmax_values(self.logits(x))

    def predict(self, x):
        """Argmax label; ties break toward the lowest class index."""
        return int(np.argmax(self.logits(x)))

    def input_gradient(self, x, cotangent):
        """d(logits . cotangent)/dx through the autodiff engine."""
        graph = engine.Graph()
        x_node = graph.input(self._flat(x))
        z = self.logits_node(graph, x_node)
        return graph.backward(z, cotangent)[x_node.idx]


def accuracy(model, dataset):
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    hits = sum(
        model.predict(x) == int(y) for x, y in zip(dataset.inputs, dataset.labels)
    )
    return hits / len(dataset)


@dataclass
class Checkpoint:
    spec: ModelSpec
    layers: list
    meta: dict = field(default_factory=dict)

    def model(self):
        return MLPClassifier(self.spec, [(W.copy(), b.copy()) for W, b in self.layers])


def _train(spec, dataset, epochs, lr, seed, attack_cfg=None, batch_size=32):
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = MLPClassifier(spec)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch_x = dataset.inputs[idx]
            batch_y = dataset.labels[idx]
            if attack_cfg is not None:
                from . import attacks  # adversarial data augmentation

                batch_x = np.stack(
                    [
                        attacks.pgd(model, model, x, y, attack_cfg).adversary
                        for x, y in zip(batch_x, batch_y)
                    ]
                )
            _descend(model, batch_x, batch_y, lr)
    kind = KIND_STANDARD if attack_cfg is None else KIND_ADVERSARIAL
    meta = {"kind": kind, "seed": seed, "epochs": epochs, "lr": lr}
    if attack_cfg is not None:
        meta["attack"] = attack_cfg.describe()
    return Checkpoint(spec, model.layers, meta)


def _descend(model, batch_x, batch_y, lr):
    graph = engine.Graph()
    weight_nodes = [(graph.input(W), graph.input(b)) for W, b in model.layers]
    total = None
    for x, y in zip(batch_x, batch_y):
        h = np.asarray(x, dtype=np.float64).ravel()
        for Wn, bn in weight_nodes[:-1]:
            h = engine.relu(engine.linear_forward(Wn, h, bn))
        Wn, bn = weight_nodes[-1]
        try:
            ce = engine.cross_entropy(engine.linear_forward(Wn, h, bn), int(y))
        except engine.NumericError as exc:
            raise TrainingError(f"loss diverged: {exc}") from exc
        total = ce if total is None else engine.add(total, ce)
    adjoints = graph.backward(total, np.asarray(1.0))
    scale = lr / len(batch_y)
    new_layers = []
    for (W, b), (Wn, bn) in zip(model.layers, weight_nodes):
        gW = adjoints[Wn.idx]
        gb = adjoints[bn.idx]
        new_layers.append((
            W if gW is None else W - scale * gW,
            b if gb is None else b - scale * gb,
        ))
    model.layers = new_layers


def train_standard(spec, dataset, epochs=40, lr=0.5, seed=0):
    """Mini-batch gradient descent on cross-entropy; deterministic in seed."""
    return _train(spec, dataset, epochs, lr, seed)


def train_adversarial(spec, dataset, epochs=40, lr=0.5, seed=0, attack_cfg=None):
    """Madry-style adversarial training: every batch is replaced by PGD
    adversaries before the descent step."""
    if attack_cfg is None:
        raise ValueError("adversarial training needs an attack config")
    return _train(spec, dataset, epochs, lr, seed, attack_cfg=attack_cfg)


def save_checkpoint(ckpt, path):
    """Write the documented binary layout (little-endian throughout)."""
    buf = io.BytesIO()
    header = json.dumps(
        {"spec": ckpt.spec.to_dict(), "meta": ckpt.meta}, sort_keys=True
    ).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    tensors = [t for pair in ckpt.layers for t in pair]
    buf.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad magic; not an advgrid checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, header_len, "header"))
        spec = ModelSpec.from_dict(header["spec"])
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        if n_tensors % 2 != 0:
            raise CheckpointFormatError("tensor count must pair weights and biases")
        tensors = []
        for i in range(n_tensors):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor shape"))
            count = int(np.prod(shape)) if ndim else 1
            raw = _read_exact(fh, 8 * count, f"tensor {i} data")
            tensors.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint body")
    layers = [(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)]
    return Checkpoint(spec, layers, header["meta"])
