"""The three regression architectures as layer graphs, plus inference,
gradient saliency and top-k thresholding.

All models regress a single criterion score from one ROI volume; a full
rating setup therefore trains one model per (hemisphere, criterion) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import KTooLarge, ShapeMismatch, ShapeTooSmall
from .volumes import Volume3D
from . import weights as weights_io

ARCHITECTURES = ("conv5_fc3", "resnet3d", "secnn")
_SE_REDUCTION = 4


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters. conv5_fc3 stacks five conv blocks
    (conv/BN/ReLU/maxpool) and three fully connected layers; resnet3d and
    secnn stack five residual blocks each followed by a max pooling and a
    two-layer head with dropout."""

    architecture: str
    input_shape: tuple[int, int, int]
    channel_widths: tuple[int, ...] = (8, 16, 32, 64, 128)
    fc_widths: tuple[int, ...] = (1300, 50)
    dropout_p: float = 0.0
    output_dim: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if len(self.channel_widths) != 5 or any(w < 1 for w in self.channel_widths):
            raise ValueError("channel_widths must be 5 positive integers")
        if self.architecture == "conv5_fc3" and len(self.fc_widths) != 2:
            raise ValueError("conv5_fc3 uses two hidden FC widths (three FC layers)")
        if self.architecture in ("resnet3d", "secnn") and len(self.fc_widths) != 1:
            raise ValueError(f"{self.architecture} uses one hidden FC width")
        if self.output_dim != 1:
            raise ValueError("only scalar regression heads are supported")
        if any(s < 32 for s in self.input_shape):
            raise ShapeTooSmall(
                f"input {self.input_shape} too small: five poolings need >= (32,32,32)")

    @property
    def pooled_trace(self) -> list[tuple[int, int, int]]:
        """Spatial shape after each of the five pooling stages."""
        shape = tuple(self.input_shape)
        trace = []
        for _ in range(5):
            shape = tuple(s // 2 for s in shape)
            trace.append(shape)
        return trace

    @property
    def flat_features(self) -> int:
        final = self.pooled_trace[-1]
        return self.channel_widths[-1] * final[0] * final[1] * final[2]


def default_spec(architecture: str, input_shape: tuple[int, int, int]) -> ModelSpec:
    if architecture == "conv5_fc3":
        return ModelSpec(architecture, tuple(input_shape))
    return ModelSpec(architecture, tuple(input_shape),
                     fc_widths=(128,), dropout_p=0.5)


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        crit = self.provenance.get("criterion")
        hemi = self.provenance.get("hemisphere")
        if crit is not None and crit not in ("C1", "C2", "C3", "C5"):
            raise ValueError(f"provenance.criterion {crit!r} invalid")
        if hemi is not None and hemi not in ("L", "R"):
            raise ValueError(f"provenance.hemisphere {hemi!r} invalid")

    @property
    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def forward(self, x: Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return _FORWARD[self.spec.architecture](self, x, training, rng)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()

    def clone_state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        return ({k: t.data.copy() for k, t in self.params.items()},
                {k: v.copy() for k, v in self.buffers.items()})

    def load_state(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = params[k].astype(np.float32, copy=True)
            t.grad = None
        for k in self.buffers:
            self.buffers[k] = buffers[k].astype(np.float32, copy=True)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

class _Init:
    """Kaiming-uniform parameter factory with a fixed draw order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(np.float32)
        self.params[name] = Tensor(data, requires_grad=True)

    def zeros(self, name: str, shape: tuple[int, ...]) -> None:
        self.params[name] = Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def bn(self, prefix: str, channels: int) -> None:
        self.params[prefix + ".gamma"] = Tensor(np.ones(channels, dtype=np.float32),
                                                requires_grad=True)
        self.params[prefix + ".beta"] = Tensor(np.zeros(channels, dtype=np.float32),
                                               requires_grad=True)
        self.buffers[prefix + ".running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers[prefix + ".running_var"] = np.ones(channels, dtype=np.float32)


def build(spec: ModelSpec, seed: int = 0, provenance: dict | None = None) -> TrainedModel:
    """Randomly initialized model; bit-identical for identical (spec, seed)."""
    init = _Init(seed)
    widths = spec.channel_widths
    in_ch = 1
    if spec.architecture == "conv5_fc3":
        for i, out_ch in enumerate(widths, start=1):
            init.weight(f"block{i}.conv.weight", (out_ch, in_ch, 3, 3, 3), in_ch * 27)
            init.zeros(f"block{i}.conv.bias", (out_ch,))
            init.bn(f"block{i}.bn", out_ch)
            in_ch = out_ch
        dims = [spec.flat_features, *spec.fc_widths, 1]
        for j in range(3):
            init.weight(f"fc{j + 1}.weight", (dims[j + 1], dims[j]), dims[j])
            init.zeros(f"fc{j + 1}.bias", (dims[j + 1],))
    else:
        for i, out_ch in enumerate(widths, start=1):
            p = f"block{i}"
            init.weight(f"{p}.conv1.weight", (out_ch, in_ch, 3, 3, 3), in_ch * 27)
            init.zeros(f"{p}.conv1.bias", (out_ch,))
            init.bn(f"{p}.bn1", out_ch)
            init.weight(f"{p}.conv2.weight", (out_ch, out_ch, 3, 3, 3), out_ch * 27)
            init.zeros(f"{p}.conv2.bias", (out_ch,))
            init.bn(f"{p}.bn2", out_ch)
            if in_ch != out_ch:
                init.weight(f"{p}.skip.weight", (out_ch, in_ch), in_ch)
                init.zeros(f"{p}.skip.bias", (out_ch,))
            if spec.architecture == "secnn":
                hidden = max(1, out_ch // _SE_REDUCTION)
                init.weight(f"{p}.se.fc1.weight", (hidden, out_ch), out_ch)
                init.zeros(f"{p}.se.fc1.bias", (hidden,))
                init.weight(f"{p}.se.fc2.weight", (out_ch, hidden), hidden)
                init.zeros(f"{p}.se.fc2.bias", (out_ch,))
            in_ch = out_ch
        dims = [spec.flat_features, spec.fc_widths[0], 1]
        for j in range(2):
            init.weight(f"fc{j + 1}.weight", (dims[j + 1], dims[j]), dims[j])
            init.zeros(f"fc{j + 1}.bias", (dims[j + 1],))
    return TrainedModel(spec=spec, params=init.params, buffers=init.buffers,
                        provenance=dict(provenance or {}))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _check_input(model: TrainedModel, x: Tensor) -> None:
    want = (x.data.shape[0], 1) + tuple(model.spec.input_shape)
    if x.data.shape != want:
        raise ShapeMismatch(
            f"expected batch shape {want}, got {x.data.shape}")


def _forward_conv5_fc3(model, x, training, rng):
    _check_input(model, x)
    p, bufs = model.params, model.buffers
    h = x
    for i in range(1, 6):
        h = ad.conv3d(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"])
        h = ad.batchnorm3d(h, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"],
                           bufs[f"block{i}.bn.running_mean"],
                           bufs[f"block{i}.bn.running_var"], training)
        h = ad.relu(h)
        h = ad.maxpool3d(h)
    h = ad.flatten(h)
    if model.spec.dropout_p > 0:
        h = ad.dropout(h, model.spec.dropout_p, training, rng)
    h = ad.relu(ad.linear(h, p["fc1.weight"], p["fc1.bias"]))
    h = ad.relu(ad.linear(h, p["fc2.weight"], p["fc2.bias"]))
    return ad.linear(h, p["fc3.weight"], p["fc3.bias"])


def _forward_residual(model, x, training, rng):
    _check_input(model, x)
    p, bufs = model.params, model.buffers
    use_se = model.spec.architecture == "secnn"
    h = x
    in_ch = 1
    for i, out_ch in enumerate(model.spec.channel_widths, start=1):
        pre = f"block{i}"
        t = ad.conv3d(h, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"])
        t = ad.batchnorm3d(t, p[f"{pre}.bn1.gamma"], p[f"{pre}.bn1.beta"],
                           bufs[f"{pre}.bn1.running_mean"],
                           bufs[f"{pre}.bn1.running_var"], training)
        t = ad.relu(t)
        t = ad.conv3d(t, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
        t = ad.batchnorm3d(t, p[f"{pre}.bn2.gamma"], p[f"{pre}.bn2.beta"],
                           bufs[f"{pre}.bn2.running_mean"],
                           bufs[f"{pre}.bn2.running_var"], training)
        if use_se:
            s = ad.global_avg_pool(t)
            s = ad.relu(ad.linear(s, p[f"{pre}.se.fc1.weight"], p[f"{pre}.se.fc1.bias"]))
            s = ad.sigmoid(ad.linear(s, p[f"{pre}.se.fc2.weight"], p[f"{pre}.se.fc2.bias"]))
            t = ad.scale_channels(t, s)
        if in_ch != out_ch:
            identity = ad.conv1x1(h, p[f"{pre}.skip.weight"], p[f"{pre}.skip.bias"])
        else:
            identity = h
        h = ad.relu(ad.add(t, identity))
        h = ad.maxpool3d(h)
        in_ch = out_ch
    h = ad.flatten(h)  # the head's concentration stage
    h = ad.relu(ad.linear(h, p["fc1.weight"], p["fc1.bias"]))
    h = ad.dropout(h, model.spec.dropout_p, training, rng)
    return ad.linear(h, p["fc2.weight"], p["fc2.bias"])


_FORWARD = {
    "conv5_fc3": _forward_conv5_fc3,
    "resnet3d": _forward_residual,
    "secnn": _forward_residual,
}


# ---------------------------------------------------------------------------
# inference, saliency, thresholding
# ---------------------------------------------------------------------------

def predict(model: TrainedModel, batch: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Raw (unrounded) criterion predictions for a (B,1,X,Y,Z) batch,
    eval mode, deterministic."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 5:
        raise ShapeMismatch(f"predict expects (B,1,X,Y,Z), got {batch.shape}")
    outputs = []
    for b0 in range(0, batch.shape[0], chunk):
        out = model.forward(Tensor(batch[b0:b0 + chunk]), training=False)
        outputs.append(out.data.reshape(-1))
    return np.concatenate(outputs) if outputs else np.zeros(0, dtype=np.float32)


def volumes_to_batch(volumes: list[Volume3D]) -> np.ndarray:
    return np.stack([v.data for v in volumes])[:, None, :, :, :]


def saliency(model: TrainedModel, volumes: list[Volume3D]) -> Volume3D:
    """Group saliency: |d prediction / d input| per volume, averaged over the
    group, on the ROI grid of the inputs."""
    if not volumes:
        raise ShapeMismatch("saliency needs at least one volume")
    origin = volumes[0].origin_mni
    accum = np.zeros(volumes[0].shape, dtype=np.float64)
    for v in volumes:
        if v.shape != volumes[0].shape or v.origin_mni != origin:
            raise ShapeMismatch("saliency volumes must share shape and origin")
        x = Tensor(v.data[None, None], requires_grad=True)
        out = model.forward(x, training=False)
        out.backward()
        accum += np.abs(x.grad[0, 0]).astype(np.float64)
    return Volume3D(data=(accum / len(volumes)).astype(np.float32), origin_mni=origin)


def threshold_top_k(saliency_map: Volume3D, k: int) -> Volume3D:
    """Binary mask of the k largest values (ties resolved by scan order)."""
    flat = saliency_map.data.reshape(-1)
    if k > flat.size:
        raise KTooLarge(f"k={k} exceeds voxel count {flat.size}")
    mask = np.zeros(flat.size, dtype=np.float32)
    if k > 0:
        order = np.argsort(-flat, kind="stable")
        mask[order[:k]] = 1.0
    return Volume3D(data=mask.reshape(saliency_map.shape),
                    origin_mni=saliency_map.origin_mni)


# ---------------------------------------------------------------------------
# persistence (weight container + model card)
# ---------------------------------------------------------------------------

def save_model(model: TrainedModel, path: str | Path) -> None:
    """Weight container plus a sidecar .json model card (spec + provenance)."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {f"param.{k}": t.data for k, t in model.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    card = {
        "spec": {
            "architecture": model.spec.architecture,
            "input_shape": list(model.spec.input_shape),
            "channel_widths": list(model.spec.channel_widths),
            "fc_widths": list(model.spec.fc_widths),
            "dropout_p": model.spec.dropout_p,
            "output_dim": model.spec.output_dim,
        },
        "provenance": model.provenance,
    }
    weights_io.save_weights(path, tensors, meta=card)
    path.with_suffix(".json").write_text(
        json.dumps(card, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> TrainedModel:
    tensors, card = weights_io.load_weights(path)
    spec = ModelSpec(
        architecture=card["spec"]["architecture"],
        input_shape=tuple(card["spec"]["input_shape"]),
        channel_widths=tuple(card["spec"]["channel_widths"]),
        fc_widths=tuple(card["spec"]["fc_widths"]),
        dropout_p=card["spec"]["dropout_p"],
        output_dim=card["spec"]["output_dim"],
    )
    params = {}
    buffers = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[6:]] = Tensor(arr.astype(np.float32), requires_grad=True)
        elif name.startswith("buffer."):
            buffers[name[7:]] = arr.astype(np.float32)
    return TrainedModel(spec=spec, params=params, buffers=buffers,
                        provenance=card.get("provenance", {}))
