"""Forward computation for the three verb-translation classifiers.

Three architectures over a shared output layer:

* visual:      image vector -> hidden -> label logits
* textual:     mean phrase embedding -> hidden -> label logits
* multimodal:  [image vector ; textual hidden] -> fused hidden -> logits

All layers are affine; no nonlinearity sits between them by default (an
optional elementwise rectifier can be enabled for experimentation). The
multimodal fusion concatenates the *raw* image vector with the *textual
hidden* state, so it carries the text projection but no image projection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .features import PhraseVector

KINDS = ("visual", "textual", "multimodal")
ACTIVATIONS = ("none", "relu")

# Canonical tensor order for initialization draws and checkpoint layout.
_TENSOR_ORDER = ("w_img", "b_img", "w_text", "b_text", "w_fuse", "b_fuse", "w_out", "b_out")


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass(frozen=True)
class ModelParams:
    """Learned tensors of one architecture; absent slots are ``None``.

    Shapes (h = hidden_size, d = embed_dim, v = n_labels, m = img_dim):
    ``w_img (h, m)``, ``w_text (h, d)``, ``w_fuse (h, m + h)``,
    ``w_out (v, h)``; each bias matches its matrix's output side.
    """

    kind: str
    hidden_size: int
    embed_dim: int
    n_labels: int
    img_dim: int
    activation: str = "none"
    seed: int | None = None
    w_img: np.ndarray | None = None
    b_img: np.ndarray | None = None
    w_text: np.ndarray | None = None
    b_text: np.ndarray | None = None
    w_fuse: np.ndarray | None = None
    b_fuse: np.ndarray | None = None
    w_out: np.ndarray | None = None
    b_out: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        """Present tensors in canonical order."""
        out = {}
        for name in _TENSOR_ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


def _required_shapes(kind, h, d, v, m) -> dict[str, tuple]:
    if kind == "visual":
        return {"w_img": (h, m), "b_img": (h,), "w_out": (v, h), "b_out": (v,)}
    if kind == "textual":
        return {"w_text": (h, d), "b_text": (h,), "w_out": (v, h), "b_out": (v,)}
    if kind == "multimodal":
        return {
            "w_text": (h, d), "b_text": (h,),
            "w_fuse": (h, m + h), "b_fuse": (h,),
            "w_out": (v, h), "b_out": (v,),
        }
    raise ValueError(f"unknown model kind {kind!r} (expected one of {KINDS})")


def init_params(kind: str, hidden_size: int, embed_dim: int, n_labels: int,
                seed: int, img_dim: int = 512, activation: str = "none") -> ModelParams:
    """Deterministically initialize a model.

    Matrices are drawn uniformly from +-sqrt(6 / (fan_in + fan_out)) per
    matrix, biases start at zero. Draws happen in the fixed canonical tensor
    order, so the same (kind, dims, seed) always yields identical values.
    """
    if min(hidden_size, embed_dim, n_labels, img_dim) < 1:
        raise ValueError("all dimensions must be >= 1")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    shapes = _required_shapes(kind, hidden_size, embed_dim, n_labels, img_dim)
    rng = np.random.default_rng(seed)
    values = {}
    for name in _TENSOR_ORDER:
        if name not in shapes:
            continue
        shape = shapes[name]
        if name.startswith("b_"):
            values[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            values[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(
        kind=kind, hidden_size=hidden_size, embed_dim=embed_dim,
        n_labels=n_labels, img_dim=img_dim, activation=activation, seed=seed,
        **values,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted stable softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return pre
    if activation == "relu":
        return np.maximum(pre, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def _as_phrase_array(q) -> np.ndarray:
    if isinstance(q, PhraseVector):
        q = q.values
    return np.asarray(q, dtype=np.float64)


def _check_last_dim(x, expected, what):
    if x.shape[-1] != expected:
        raise ValueError(f"{what} has dimension {x.shape[-1]}, expected {expected}")


def forward_visual(params: ModelParams, x_img) -> np.ndarray:
    """Logits of the visual model; accepts a vector or a batch of rows."""
    if params.kind != "visual":
        raise ValueError(f"forward_visual called on a {params.kind} model")
    x = np.asarray(x_img, dtype=np.float64)
    _check_last_dim(x, params.img_dim, "image vector")
    hidden = _activate(x @ params.w_img.T + params.b_img, params.activation)
    return hidden @ params.w_out.T + params.b_out


def forward_textual(params: ModelParams, q) -> np.ndarray:
    """Logits of the textual model; accepts a phrase vector or a batch."""
    if params.kind != "textual":
        raise ValueError(f"forward_textual called on a {params.kind} model")
    qv = _as_phrase_array(q)
    _check_last_dim(qv, params.embed_dim, "phrase vector")
    hidden = _activate(qv @ params.w_text.T + params.b_text, params.activation)
    return hidden @ params.w_out.T + params.b_out


def forward_multimodal(params: ModelParams, x_img, q) -> np.ndarray:
    """Logits of the early-fusion model.

    The textual hidden state is computed first, then concatenated with the
    raw image vector and projected through the fusion layer.
    """
    if params.kind != "multimodal":
        raise ValueError(f"forward_multimodal called on a {params.kind} model")
    x = np.asarray(x_img, dtype=np.float64)
    qv = _as_phrase_array(q)
    _check_last_dim(x, params.img_dim, "image vector")
    _check_last_dim(qv, params.embed_dim, "phrase vector")
    h_text = _activate(qv @ params.w_text.T + params.b_text, params.activation)
    joint = np.concatenate([x, h_text], axis=-1)
    hidden = _activate(joint @ params.w_fuse.T + params.b_fuse, params.activation)
    return hidden @ params.w_out.T + params.b_out


def forward(params: ModelParams, x_img=None, q=None) -> np.ndarray:
    """Dispatch to the kind-appropriate forward pass."""
    if params.kind == "visual":
        if x_img is None:
            raise ValueError("visual model needs an image vector")
        return forward_visual(params, x_img)
    if params.kind == "textual":
        if q is None:
            raise ValueError("textual model needs a phrase vector")
        return forward_textual(params, q)
    if x_img is None or q is None:
        raise ValueError("multimodal model needs both an image and a phrase vector")
    return forward_multimodal(params, x_img, q)


def predict(params: ModelParams, x_img=None, q=None):
    """Return (label index, probability distribution) for one input.

    Argmax ties break toward the smallest index.
    """
    logits = forward(params, x_img=x_img, q=q)
    if logits.ndim != 1:
        raise ValueError("predict expects a single input, not a batch")
    dist = softmax(logits)
    return int(np.argmax(logits)), dist


def save_checkpoint(params: ModelParams, path) -> None:
    """Write a checkpoint: one JSON header line, then raw float32 payloads.

    The header lists every tensor with its shape and byte offset (relative to
    the end of the header line); payloads follow in header order,
    little-endian binary32.
    """
    tensors = params.tensors()
    entries = []
    offset = 0
    blobs = []
    for name, value in tensors.items():
        blob = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": params.kind,
        "hidden_size": params.hidden_size,
        "embed_dim": params.embed_dim,
        "n_labels": params.n_labels,
        "img_dim": params.img_dim,
        "activation": params.activation,
        "seed": params.seed,
        "tensors": entries,
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    payload = raw[nl + 1:]
    values = {}
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if name not in _TENSOR_ORDER:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at tensor {name!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4").reshape(shape)
        values[name] = arr.astype(np.float64)
    kind = header.get("kind")
    required = _required_shapes(kind, header["hidden_size"], header["embed_dim"],
                                header["n_labels"], header["img_dim"])
    for name, shape in required.items():
        if name not in values:
            raise CheckpointError(f"{path}: missing tensor {name!r} for kind {kind!r}")
        if values[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {values[name].shape}, expected {shape}"
            )
    return ModelParams(
        kind=kind,
        hidden_size=header["hidden_size"],
        embed_dim=header["embed_dim"],
        n_labels=header["n_labels"],
        img_dim=header["img_dim"],
        activation=header.get("activation", "none"),
        seed=header.get("seed"),
        **values,
    )


def with_tensors(params: ModelParams, **tensors) -> ModelParams:
    """Copy of ``params`` with some tensors replaced (shape-checked)."""
    for name, value in tensors.items():
        current = getattr(params, name)
        if current is None:
            raise ValueError(f"model kind {params.kind!r} has no tensor {name!r}")
        if np.shape(value) != current.shape:
            raise ValueError(
                f"tensor {name!r}: shape {np.shape(value)} != {current.shape}"
            )
    return replace(params, **{k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})
