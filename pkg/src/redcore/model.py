"""Model architecture: variational self-encoders, cross-modal imputers, decoders.

Per modality m the pipeline is:

  x^m --senc--> (mu, log_var) --reparameterize--> z_bar^m
  {z_bar^m' : m' != m, available} --xenc--> z_hat^m
  z^m = z_bar^m where present, z_hat^m where missing
  logits^m = dec(z^m);  joint logits = dec_joint(concat of all z^m)

Self-encoders are two-layer tanh nets emitting 2d outputs (mean stacked on
log-variance, i.e. a diagonal Gaussian). Cross-modal encoders consume a
fixed-order concatenation of the other modalities' representations with
unavailable slots zeroed row-wise, pass it through residual bottleneck blocks
(h <- h + up(tanh(down(h)))), and project to width d. Decoders are linear.

Parameters live in a flat name -> float64 array mapping, which keeps the
optimizer, gradient bookkeeping, and the checkpoint manifest all keyed the
same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ShapeError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass(frozen=True)
class ArchConfig:
    rep_dim: int = 16
    senc_hidden: int = 64
    xenc_bottlenecks: tuple[int, ...] = (64, 32, 16)

    def __post_init__(self):
        object.__setattr__(self, "xenc_bottlenecks",
                           tuple(int(w) for w in self.xenc_bottlenecks))
        if self.rep_dim < 1 or self.senc_hidden < 1:
            raise ConfigError("rep_dim and senc_hidden must be positive")
        if not self.xenc_bottlenecks or any(w < 1 for w in self.xenc_bottlenecks):
            raise ConfigError("xenc_bottlenecks must be a non-empty tuple of positive widths")


@dataclass
class ModelParams:
    arch: ArchConfig
    modality_dims: tuple[int, ...]
    n_classes: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_modalities(self) -> int:
        return len(self.modality_dims)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, tuple(self.modality_dims), self.n_classes,
                           {k: v.copy() for k, v in self.tensors.items()})


def _tensor_specs(arch: ArchConfig, modality_dims, n_classes):
    """Ordered (name, shape, init_fan_in) triples; fan_in None means zero init."""
    d = arch.rep_dim
    m_count = len(modality_dims)
    cross_in = (m_count - 1) * d
    specs = []
    for m, dm in enumerate(modality_dims):
        specs += [
            (f"senc{m}.w1", (dm, arch.senc_hidden), dm),
            (f"senc{m}.b1", (arch.senc_hidden,), None),
            (f"senc{m}.w2", (arch.senc_hidden, 2 * d), arch.senc_hidden),
            (f"senc{m}.b2", (2 * d,), None),
        ]
        for i, width in enumerate(arch.xenc_bottlenecks):
            specs += [
                (f"xenc{m}.block{i}.w_down", (cross_in, width), cross_in),
                (f"xenc{m}.block{i}.b_down", (width,), None),
                (f"xenc{m}.block{i}.w_up", (width, cross_in), width),
                (f"xenc{m}.block{i}.b_up", (cross_in,), None),
            ]
        specs += [
            (f"xenc{m}.w_out", (cross_in, d), cross_in),
            (f"xenc{m}.b_out", (d,), None),
            (f"dec{m}.w", (d, n_classes), d),
            (f"dec{m}.b", (n_classes,), None),
        ]
    specs += [
        ("joint.w", (m_count * d, n_classes), m_count * d),
        ("joint.b", (n_classes,), None),
    ]
    return specs


def init_params(arch: ArchConfig, modality_dims, n_classes: int, seed: int) -> ModelParams:
    modality_dims = tuple(int(x) for x in modality_dims)
    if len(modality_dims) < 2:
        raise ConfigError("cross-modal imputation needs at least 2 modalities")
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 10])
    tensors: dict[str, np.ndarray] = {}
    for name, shape, fan_in in _tensor_specs(arch, modality_dims, n_classes):
        if fan_in is None:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)
    return ModelParams(arch, modality_dims, n_classes, tensors)


def wrap_params(params: ModelParams) -> dict[str, ad.Node]:
    """Fresh leaf nodes for every parameter tensor (one graph's worth)."""
    return {name: ad.var(arr) for name, arr in params.tensors.items()}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def senc_forward(pnodes: dict[str, ad.Node], m: int, x: ad.Node):
    """(mu, log_var) of modality m's variational encoder; log_var clamped."""
    w1 = pnodes[f"senc{m}.w1"]
    if x.value.ndim != 2 or x.value.shape[1] != w1.value.shape[0]:
        raise ShapeError("senc%d expects width %d, got %s"
                         % (m, w1.value.shape[0], x.value.shape))
    h = ad.tanh(ad.add(ad.matmul(x, w1), pnodes[f"senc{m}.b1"]))
    out = ad.add(ad.matmul(h, pnodes[f"senc{m}.w2"]), pnodes[f"senc{m}.b2"])
    d = out.value.shape[1] // 2
    mu = ad.slice_(out, 1, 0, d)
    log_var = ad.clip(ad.slice_(out, 1, d, 2 * d), LOG_VAR_MIN, LOG_VAR_MAX)
    return mu, log_var


def reparameterize(mu: ad.Node, log_var: ad.Node, eps: np.ndarray) -> ad.Node:
    """z = mu + eps * exp(0.5 * log_var); eps is injected by the caller."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.value.shape or mu.value.shape != log_var.value.shape:
        raise ShapeError("reparameterize shapes differ: mu %s, log_var %s, eps %s"
                         % (mu.value.shape, log_var.value.shape, eps.shape))
    std = ad.exp(ad.scale(log_var, 0.5))
    return ad.add(mu, ad.mul_elem(ad.var(eps), std))


def xenc_forward(pnodes: dict[str, ad.Node], m: int, z_bars: list[ad.Node],
                 presence: np.ndarray, arch: ArchConfig) -> ad.Node:
    """Impute modality m from the other modalities' representations.

    Input slots follow fixed modality order; a slot whose modality is missing
    in a given row is zeroed for that row, so absent features can never leak
    into the imputation.
    """
    slots = []
    for other in range(len(z_bars)):
        if other == m:
            continue
        mask = np.repeat(presence[:, other].astype(np.float64)[:, None],
                         arch.rep_dim, axis=1)
        slots.append(ad.mul_elem(z_bars[other], ad.var(mask)))
    h = ad.concat(slots, axis=1)
    for i in range(len(arch.xenc_bottlenecks)):
        down = ad.tanh(ad.add(ad.matmul(h, pnodes[f"xenc{m}.block{i}.w_down"]),
                              pnodes[f"xenc{m}.block{i}.b_down"]))
        up = ad.add(ad.matmul(down, pnodes[f"xenc{m}.block{i}.w_up"]),
                    pnodes[f"xenc{m}.block{i}.b_up"])
        h = ad.add(h, up)
    return ad.add(ad.matmul(h, pnodes[f"xenc{m}.w_out"]), pnodes[f"xenc{m}.b_out"])


def assemble_representation(z_bar: ad.Node, z_hat: ad.Node,
                            presence_col: np.ndarray) -> ad.Node:
    """Row n gets z_bar if present, z_hat otherwise."""
    if z_bar.value.shape != z_hat.value.shape:
        raise ShapeError("assemble shapes differ: %s vs %s"
                         % (z_bar.value.shape, z_hat.value.shape))
    mask = np.repeat(presence_col.astype(np.float64)[:, None],
                     z_bar.value.shape[1], axis=1)
    keep = ad.mul_elem(z_bar, ad.var(mask))
    fill = ad.mul_elem(z_hat, ad.var(1.0 - mask))
    return ad.add(keep, fill)


@dataclass
class ForwardOutputs:
    z_bar: list[ad.Node]
    z_hat: list[ad.Node]
    z: list[ad.Node]
    mu: list[ad.Node]
    log_var: list[ad.Node]
    logits: list[ad.Node]
    joint_logits: ad.Node
    presence: np.ndarray           # rows with 0 are excluded from KL and MSE
    param_nodes: dict[str, ad.Node]


def forward_all(params: ModelParams, batch, eps=None) -> ForwardOutputs:
    """Full forward pass over one batch.

    `batch` is (features-per-modality, labels, presence) as yielded by the
    data pipeline. `eps` supplies the reparameterization noise: a list of
    (batch, d) arrays per modality, a callable (m, shape) -> array, or None
    for zero noise (the deterministic inference path).
    """
    feats, _labels, presence = batch
    m_count = params.n_modalities
    if len(feats) != m_count or presence.shape[1] != m_count:
        raise ConfigError("batch modality count does not match the model")
    b = presence.shape[0]
    d = params.arch.rep_dim

    def eps_for(m):
        if eps is None:
            return np.zeros((b, d))
        if callable(eps):
            return eps(m, (b, d))
        return eps[m]

    pnodes = wrap_params(params)
    mu, log_var, z_bar = [], [], []
    for m in range(m_count):
        mu_m, lv_m = senc_forward(pnodes, m, ad.var(feats[m]))
        mu.append(mu_m)
        log_var.append(lv_m)
        z_bar.append(reparameterize(mu_m, lv_m, eps_for(m)))

    z_hat = [xenc_forward(pnodes, m, z_bar, presence, params.arch)
             for m in range(m_count)]
    z = [assemble_representation(z_bar[m], z_hat[m], presence[:, m])
         for m in range(m_count)]

    logits = [ad.add(ad.matmul(z[m], pnodes[f"dec{m}.w"]), pnodes[f"dec{m}.b"])
              for m in range(m_count)]
    joint = ad.concat(z, axis=1)
    joint_logits = ad.add(ad.matmul(joint, pnodes["joint.w"]), pnodes["joint.b"])
    return ForwardOutputs(z_bar, z_hat, z, mu, log_var, logits, joint_logits,
                          presence, pnodes)


# ---------------------------------------------------------------------------
# checkpoint blob: manifest.json + weights.bin (little-endian float64)
# ---------------------------------------------------------------------------

def write_tensor_blob(directory, named: dict[str, np.ndarray], manifest_extra: dict) -> None:
    """Write manifest.json + weights.bin; offsets are byte positions."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in named.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = dict(manifest_extra)
    manifest["tensors"] = entries
    manifest["total_bytes"] = offset
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (directory / "weights.bin").write_bytes(b"".join(chunks))


def read_tensor_blob(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    man_path = directory / "manifest.json"
    bin_path = directory / "weights.bin"
    if not man_path.exists() or not bin_path.exists():
        raise CheckpointError(f"checkpoint incomplete under {directory}")
    try:
        manifest = json.loads(man_path.read_text())
        entries = manifest["tensors"]
        total = int(manifest["total_bytes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{man_path}: {exc}") from None
    raw = bin_path.read_bytes()
    if len(raw) != total:
        raise CheckpointError(f"{bin_path}: expected {total} bytes, found {len(raw)}")
    named = {}
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(raw):
            raise CheckpointError(f"{bin_path}: tensor {entry['name']} overruns the blob")
        flat = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        named[entry["name"]] = flat.reshape(shape).astype(np.float64)
    return manifest, named


def _arch_manifest(params: ModelParams) -> dict:
    return {
        "arch": {
            "rep_dim": params.arch.rep_dim,
            "senc_hidden": params.arch.senc_hidden,
            "xenc_bottlenecks": list(params.arch.xenc_bottlenecks),
        },
        "modality_dims": list(params.modality_dims),
        "n_classes": params.n_classes,
    }


def save_model(params: ModelParams, directory) -> None:
    write_tensor_blob(directory, params.tensors,
                      {"format": "model-v1", **_arch_manifest(params)})


def load_model(directory) -> ModelParams:
    manifest, named = read_tensor_blob(directory)
    return params_from_manifest(manifest, named)


def params_from_manifest(manifest: dict, named: dict[str, np.ndarray]) -> ModelParams:
    try:
        arch = ArchConfig(rep_dim=int(manifest["arch"]["rep_dim"]),
                          senc_hidden=int(manifest["arch"]["senc_hidden"]),
                          xenc_bottlenecks=tuple(manifest["arch"]["xenc_bottlenecks"]))
        dims = tuple(int(x) for x in manifest["modality_dims"])
        n_classes = int(manifest["n_classes"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"manifest missing/invalid architecture: {exc}") from None
    tensors = {}
    for name, shape, _ in _tensor_specs(arch, dims, n_classes):
        if name not in named:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if named[name].shape != shape:
            raise CheckpointError("tensor %s has shape %s, expected %s"
                                  % (name, named[name].shape, shape))
        tensors[name] = named[name]
    return ModelParams(arch, dims, n_classes, tensors)
