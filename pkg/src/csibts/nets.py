"""Primal (sequence) and dual (spatial) encoders, projection head, checkpoints.

The primal view treats a frame as a (tau, S*K) sequence and runs a small
pre-norm transformer; its latent is the encoding of the last packet.  The
dual view treats the same frame as a (K, tau, S) image and runs a strided
residual conv stack with global average pooling.  Both emit a latent of the
same width so one shared projection head ``psi`` can map either into the
space where outlier distances are measured.

No batch-coupled layers (batchnorm, dropout): encoding a frame is independent
of whatever else sits in the batch, and forward passes are deterministic.

A model bundle serializes to a single file: an 8-byte magic, a JSON header
(config, seeds, frozen center, tensor manifest) and little-endian float32
tensor payloads in manifest order.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .layers import (add_params, attention_bwd, attention_fwd, conv_params,
                     layernorm_bwd, layernorm_fwd, layernorm_params, linear_bwd,
                     linear_fwd, linear_params, relu_bwd, relu_fwd, softmax)

MAGIC = b"CSIBTS01"


class CheckpointFormatError(ValueError):
    """Checkpoint file is malformed or inconsistent with its manifest."""


@dataclass(frozen=True)
class PrimalConfig:
    n_features: int                 # P = S*K after the diversity reshape
    tau: int
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    n_classes: int = 4


@dataclass(frozen=True)
class DualConfig:
    tau: int
    n_subcarriers: int
    n_pairs: int
    width: int = 32
    n_blocks: int = 3
    d_latent: int = 64
    n_classes: int = 4


@dataclass(frozen=True)
class PsiConfig:
    dims: tuple[int, ...] = (64, 64, 32)    # latent in, hidden..., projection out


@dataclass
class EncoderOutput:
    z: np.ndarray                   # (B, D) latent fed to psi
    logits: np.ndarray              # (B, C)
    probs: np.ndarray               # (B, C) softmax rows


# ---------------------------------------------------------------------------
# primal: transformer over the diversity-embedded sequence
# ---------------------------------------------------------------------------

def init_primal(rng, cfg: PrimalConfig) -> dict:
    p = {}
    add_params(p, "embed", linear_params(rng, cfg.n_features, cfg.d_model))
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        add_params(p, f"{pre}.ln1", layernorm_params(cfg.d_model))
        for name in ("q", "k", "v", "o"):
            lp = linear_params(rng, cfg.d_model, cfg.d_model)
            p[f"{pre}.attn.w{name}"] = lp["w"]
            p[f"{pre}.attn.b{name}"] = lp["b"]
        add_params(p, f"{pre}.ln2", layernorm_params(cfg.d_model))
        add_params(p, f"{pre}.ff1",
                   linear_params(rng, cfg.d_model, cfg.d_ff, np.sqrt(2.0 / cfg.d_model)))
        add_params(p, f"{pre}.ff2", linear_params(rng, cfg.d_ff, cfg.d_model))
    add_params(p, "lnf", layernorm_params(cfg.d_model))
    add_params(p, "cls", linear_params(rng, cfg.d_model, cfg.n_classes))
    return p


def primal_forward(p: dict, cfg: PrimalConfig, x: np.ndarray):
    """Encode embedded frames (B, tau, P); returns (EncoderOutput, cache)."""
    h, c_embed = linear_fwd(x, p["embed.w"], p["embed.b"])
    block_caches = []
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        t1, c_ln1 = layernorm_fwd(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        a, c_attn = attention_fwd(t1, p, f"{pre}.attn", cfg.n_heads)
        h2 = h + a
        t2, c_ln2 = layernorm_fwd(h2, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        f1, c_ff1 = linear_fwd(t2, p[f"{pre}.ff1.w"], p[f"{pre}.ff1.b"])
        r, c_relu = relu_fwd(f1)
        f2, c_ff2 = linear_fwd(r, p[f"{pre}.ff2.w"], p[f"{pre}.ff2.b"])
        h = h2 + f2
        block_caches.append((c_ln1, c_attn, c_ln2, c_ff1, c_relu, c_ff2))
    z, c_lnf = layernorm_fwd(h[:, -1, :], p["lnf.g"], p["lnf.b"])
    logits, c_cls = linear_fwd(z, p["cls.w"], p["cls.b"])
    out = EncoderOutput(z=z, logits=logits, probs=softmax(logits))
    return out, (c_embed, block_caches, c_lnf, c_cls, x.shape)


def primal_backward(p: dict, cfg: PrimalConfig, cache, dz=None, dlogits=None) -> dict:
    """Grads of a scalar loss given its gradient at the latent and/or logits."""
    c_embed, block_caches, c_lnf, c_cls, x_shape = cache
    b, tau = x_shape[0], x_shape[1]
    grads = {}
    dz_total = np.zeros((b, cfg.d_model))
    if dlogits is not None:
        dz_cls, grads["cls.w"], grads["cls.b"] = linear_bwd(c_cls, dlogits)
        dz_total += dz_cls
    else:
        grads["cls.w"] = np.zeros_like(p["cls.w"])
        grads["cls.b"] = np.zeros_like(p["cls.b"])
    if dz is not None:
        dz_total = dz_total + dz
    dlast, grads["lnf.g"], grads["lnf.b"] = layernorm_bwd(c_lnf, dz_total)
    dh = np.zeros((b, tau, cfg.d_model))
    dh[:, -1, :] = dlast
    for i in reversed(range(cfg.n_blocks)):
        pre = f"block{i}"
        c_ln1, c_attn, c_ln2, c_ff1, c_relu, c_ff2 = block_caches[i]
        dr, grads[f"{pre}.ff2.w"], grads[f"{pre}.ff2.b"] = linear_bwd(c_ff2, dh)
        df1 = relu_bwd(c_relu, dr)
        dt2, grads[f"{pre}.ff1.w"], grads[f"{pre}.ff1.b"] = linear_bwd(c_ff1, df1)
        dh2, grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = layernorm_bwd(c_ln2, dt2)
        dh2 = dh2 + dh
        dt1, attn_grads = attention_bwd(c_attn, dh2)
        for key, value in attn_grads.items():
            grads[f"{pre}.attn.{key}"] = value
        dh1, grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = layernorm_bwd(c_ln1, dt1)
        dh = dh1 + dh2
    _, grads["embed.w"], grads["embed.b"] = linear_bwd(c_embed, dh)
    return grads


# ---------------------------------------------------------------------------
# dual: strided residual conv stack over the (K, tau, S) image
# ---------------------------------------------------------------------------

def init_dual(rng, cfg: DualConfig) -> dict:
    p = {}
    add_params(p, "stem", conv_params(rng, cfg.width, cfg.n_pairs, 3, 3))
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        add_params(p, f"{pre}.conv1", conv_params(rng, cfg.width, cfg.width, 3, 3))
        add_params(p, f"{pre}.conv2", conv_params(rng, cfg.width, cfg.width, 3, 3))
        add_params(p, f"{pre}.proj", conv_params(rng, cfg.width, cfg.width, 1, 1))
    add_params(p, "latent", linear_params(rng, cfg.width, cfg.d_latent))
    add_params(p, "cls", linear_params(rng, cfg.d_latent, cfg.n_classes))
    return p


def dual_forward(p: dict, cfg: DualConfig, frames: np.ndarray):
    """Encode raw frames (B, tau, S, K); returns (EncoderOutput, cache)."""
    x = np.ascontiguousarray(frames.transpose(0, 3, 1, 2))      # (B, K, tau, S)
    h0 = backend.conv2d(x, p["stem.w"], p["stem.b"], stride=2, pad=1)
    h, c_stem_relu = relu_fwd(h0)
    stem_cache = (x, c_stem_relu)
    block_caches = []
    for i in range(cfg.n_blocks):
        pre = f"block{i}"
        u0 = backend.conv2d(h, p[f"{pre}.conv1.w"], p[f"{pre}.conv1.b"], stride=2, pad=1)
        u, c_relu1 = relu_fwd(u0)
        f = backend.conv2d(u, p[f"{pre}.conv2.w"], p[f"{pre}.conv2.b"], stride=1, pad=1)
        s = backend.conv2d(h, p[f"{pre}.proj.w"], p[f"{pre}.proj.b"], stride=2, pad=0)
        out, c_relu2 = relu_fwd(f + s)
        block_caches.append((h, c_relu1, u, c_relu2))
        h = out
    gap = h.mean(axis=(2, 3))
    z, c_latent = linear_fwd(gap, p["latent.w"], p["latent.b"])
    logits, c_cls = linear_fwd(z, p["cls.w"], p["cls.b"])
    out = EncoderOutput(z=z, logits=logits, probs=softmax(logits))
    return out, (stem_cache, block_caches, h.shape, c_latent, c_cls)


def dual_backward(p: dict, cfg: DualConfig, cache, dz=None, dlogits=None) -> dict:
    stem_cache, block_caches, h_shape, c_latent, c_cls = cache
    b = h_shape[0]
    grads = {}
    dz_total = np.zeros((b, cfg.d_latent))
    if dlogits is not None:
        dz_cls, grads["cls.w"], grads["cls.b"] = linear_bwd(c_cls, dlogits)
        dz_total += dz_cls
    else:
        grads["cls.w"] = np.zeros_like(p["cls.w"])
        grads["cls.b"] = np.zeros_like(p["cls.b"])
    if dz is not None:
        dz_total = dz_total + dz
    dgap, grads["latent.w"], grads["latent.b"] = linear_bwd(c_latent, dz_total)
    area = h_shape[2] * h_shape[3]
    dh = np.broadcast_to(dgap[:, :, None, None] / area, h_shape).copy()
    for i in reversed(range(cfg.n_blocks)):
        pre = f"block{i}"
        h_in, c_relu1, u, c_relu2 = block_caches[i]
        dsum = relu_bwd(c_relu2, dh)
        du, dw2, db2 = backend.conv2d_grads(u, p[f"{pre}.conv2.w"], dsum, stride=1, pad=1)
        grads[f"{pre}.conv2.w"], grads[f"{pre}.conv2.b"] = dw2, db2
        du0 = relu_bwd(c_relu1, du)
        dh1, dw1, db1 = backend.conv2d_grads(h_in, p[f"{pre}.conv1.w"], du0, stride=2, pad=1)
        grads[f"{pre}.conv1.w"], grads[f"{pre}.conv1.b"] = dw1, db1
        dh2, dwp, dbp = backend.conv2d_grads(h_in, p[f"{pre}.proj.w"], dsum, stride=2, pad=0)
        grads[f"{pre}.proj.w"], grads[f"{pre}.proj.b"] = dwp, dbp
        dh = dh1 + dh2
    dh0 = relu_bwd(stem_cache[1], dh)
    _, grads["stem.w"], grads["stem.b"] = backend.conv2d_grads(
        stem_cache[0], p["stem.w"], dh0, stride=2, pad=1)
    return grads


# ---------------------------------------------------------------------------
# psi: shared projection head
# ---------------------------------------------------------------------------

def init_psi(rng, cfg: PsiConfig) -> dict:
    # Bias-free on purpose: with biases the head admits a constant map
    # psi(z) = center, which zeroes both coupling losses without the
    # teachers agreeing on anything.  Weight-only layers cannot represent
    # a nonzero constant, so the head has to keep depending on its input.
    # The final layer starts small so the coupling gradients reaching the
    # encoder backbones scale as out_scale^2: at init the center pull would
    # otherwise flatten the latents into one point faster than the labeled
    # loss can separate the classes.
    p = {}
    n = len(cfg.dims) - 1
    for i in range(n):
        d_in = cfg.dims[i]
        scale = (0.1 if i == n - 1 else 1.0) / np.sqrt(d_in)
        p[f"l{i}.w"] = rng.standard_normal((d_in, cfg.dims[i + 1])) * scale
    return p


def psi_forward(p: dict, cfg: PsiConfig, z: np.ndarray):
    """Project latents (B, D) -> (B, dims[-1]); returns (proj, cache)."""
    h = z
    caches = []
    n = len(cfg.dims) - 1
    for i in range(n):
        h, c_lin = h @ p[f"l{i}.w"], (h, p[f"l{i}.w"])
        c_relu = None
        if i < n - 1:
            h, c_relu = relu_fwd(h)
        caches.append((c_lin, c_relu))
    return h, caches


def psi_backward(p: dict, cfg: PsiConfig, caches, dout):
    """Returns (grads, dz)."""
    grads = {}
    dh = dout
    for i in reversed(range(len(cfg.dims) - 1)):
        c_lin, c_relu = caches[i]
        if c_relu is not None:
            dh = relu_bwd(c_relu, dh)
        x, w = c_lin
        grads[f"l{i}.w"] = x.T @ dh
        dh = dh @ w.T
    return grads, dh


# ---------------------------------------------------------------------------
# bundle + checkpoint file
# ---------------------------------------------------------------------------

NET_ORDER = ("primal_teacher", "dual_teacher", "primal_student", "dual_student", "psi")


@dataclass(frozen=True)
class BundleConfig:
    tau: int = 50
    n_subcarriers: int = 56
    n_pairs: int = 4
    n_classes: int = 4
    eta: float = 10000.0
    d_model: int = 64
    n_heads: int = 4
    primal_blocks: int = 2
    d_ff: int = 128
    width: int = 32
    dual_blocks: int = 3
    psi_dims: tuple[int, ...] = (64, 64, 32)
    d_th: float = 50.0
    seed: int = 0

    @property
    def primal(self) -> PrimalConfig:
        return PrimalConfig(
            n_features=self.n_subcarriers * self.n_pairs, tau=self.tau,
            d_model=self.d_model, n_heads=self.n_heads, n_blocks=self.primal_blocks,
            d_ff=self.d_ff, n_classes=self.n_classes)

    @property
    def dual(self) -> DualConfig:
        return DualConfig(
            tau=self.tau, n_subcarriers=self.n_subcarriers, n_pairs=self.n_pairs,
            width=self.width, n_blocks=self.dual_blocks, d_latent=self.d_model,
            n_classes=self.n_classes)

    @property
    def psi(self) -> PsiConfig:
        return PsiConfig(dims=self.psi_dims)


@dataclass
class ModelBundle:
    config: BundleConfig
    primal_teacher: dict
    dual_teacher: dict
    primal_student: dict
    dual_student: dict
    psi: dict
    center: np.ndarray | None = None    # frozen projection-space mean, read-only

    def nets(self) -> dict[str, dict]:
        return {name: getattr(self, name) for name in NET_ORDER}


def init_bundle(config: BundleConfig, streams: dict) -> ModelBundle:
    """Initialize all five networks from per-network RNG streams."""
    return ModelBundle(
        config=config,
        primal_teacher=init_primal(streams["init_pt"], config.primal),
        dual_teacher=init_dual(streams["init_dt"], config.dual),
        primal_student=init_primal(streams["init_ps"], config.primal),
        dual_student=init_dual(streams["init_ds"], config.dual),
        psi=init_psi(streams["init_psi"], config.psi))


def save_bundle(bundle: ModelBundle, path: str | Path) -> None:
    manifest = []
    payload = bytearray()
    for net_name, params in bundle.nets().items():
        for key in sorted(params):
            tensor = np.ascontiguousarray(params[key], dtype="<f4")
            manifest.append({"net": net_name, "name": key, "shape": list(tensor.shape)})
            payload.extend(tensor.tobytes())
    header = {
        "schema_version": 1,
        "config": dataclasses.asdict(bundle.config),
        "center": None if bundle.center is None else [float(v) for v in bundle.center],
        "tensors": manifest,
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_bundle(path: str | Path) -> ModelBundle:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc
    if header.get("schema_version") != 1:
        raise CheckpointFormatError(f"{path}: unsupported schema {header.get('schema_version')}")
    cfg_dict = dict(header["config"])
    cfg_dict["psi_dims"] = tuple(cfg_dict["psi_dims"])
    config = BundleConfig(**cfg_dict)
    nets = {name: {} for name in NET_ORDER}
    offset = 16 + header_len
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if offset + size > len(raw):
            raise CheckpointFormatError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(raw[offset:offset + size], dtype="<f4").reshape(entry["shape"])
        nets[entry["net"]][entry["name"]] = arr.astype(np.float64)
        offset += size
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    center = header["center"]
    bundle = ModelBundle(
        config=config,
        center=None if center is None else np.asarray(center, dtype=np.float64),
        **nets)
    if bundle.center is not None:
        bundle.center.flags.writeable = False
    return bundle
