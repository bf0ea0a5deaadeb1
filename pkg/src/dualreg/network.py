"""Patch-wise displacement regression network.

A 3-level U-net over two input channels (the two modality patches), built
entirely from valid 3x3x3 convolutions, each followed by batch norm and
ReLU. The encoder downsamples twice with 2x2x2 max pooling; the decoder
upsamples twice with nearest-neighbor repetition and concatenates
center-cropped skip features. A final 1x1x1 convolution maps to the 3
displacement components with no activation, since displacements take both
signs. Because every convolution is unpadded, each spatial extent follows

    out = ((((n - 4) / 2 - 4) / 2 - 4) * 2 - 4) * 2 - 4 = n - 40

with divisibility constraints checked stage by stage; 68 maps to 28, and
the output block is centered inside the input patch. The network is fully
convolutional: one set of trained kernels accepts any admissible input size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .volumes import DisplacementField, FormatError

CKPT_MAGIC = "DUALREG-CKPT1"

_BLOCK_ORDER = ("enc1a", "enc1b", "enc2a", "enc2b", "bot_a", "bot_b",
                "dec2a", "dec2b", "dec1a", "dec1b")


def output_size(input_size: int) -> int:
    """Spatial extent of the predicted field block for a given input extent.

    Raises ValueError naming the first stage whose extent becomes
    non-positive or non-integral.
    """
    n = int(input_size)

    def shrink(n, stage):
        n -= 4
        if n <= 0:
            raise ValueError(f"invalid input size {input_size}: {stage} leaves extent {n}")
        return n

    def halve(n, stage):
        if n % 2:
            raise ValueError(f"invalid input size {input_size}: {stage} sees odd extent {n}")
        return n // 2

    n = shrink(n, "encoder level 1")
    n = halve(n, "pooling 1")
    n = shrink(n, "encoder level 2")
    n = halve(n, "pooling 2")
    n = shrink(n, "bottleneck")
    n = shrink(2 * n, "decoder level 2")
    n = shrink(2 * n, "decoder level 1")
    return n


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 68
    level_channels: tuple[int, int, int] = (16, 32, 64)
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "level_channels", tuple(int(c) for c in self.level_channels))
        if len(self.level_channels) != 3 or any(c <= 0 for c in self.level_channels):
            raise ValueError("level_channels must be 3 positive widths")
        output_size(self.input_size)

    @property
    def output_size(self) -> int:
        return output_size(self.input_size)

    @property
    def margin(self) -> int:
        return (self.input_size - self.output_size) // 2


@dataclass
class ConvBlock:
    """One conv + batch-norm unit: kernel, bias, BN affine and running stats."""

    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    run_mean: np.ndarray
    run_var: np.ndarray


@dataclass
class NetworkParams:
    """All learnable weights and BN statistics, plus the training/inference flag."""

    cfg: NetworkConfig
    seed: int
    blocks: dict[str, ConvBlock]
    out_w: Tensor
    out_b: Tensor
    mode: str = "training"

    def tensors(self):
        """Learnable tensors in the documented checkpoint order."""
        for name in _BLOCK_ORDER:
            blk = self.blocks[name]
            yield blk.w
            yield blk.b
            yield blk.gamma
            yield blk.beta
        yield self.out_w
        yield self.out_b

    def set_mode(self, mode: str):
        if mode not in ("training", "inference"):
            raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
        self.mode = mode
        return self


def _block_channels(cfg: NetworkConfig):
    c1, c2, c3 = cfg.level_channels
    return {
        "enc1a": (2, c1), "enc1b": (c1, c1),
        "enc2a": (c1, c2), "enc2b": (c2, c2),
        "bot_a": (c2, c3), "bot_b": (c3, c3),
        "dec2a": (c3 + c2, c2), "dec2b": (c2, c2),
        "dec1a": (c2 + c1, c1), "dec1b": (c1, c1),
    }


# The final 1x1x1 convolution is initialized an order of magnitude smaller
# than the hidden layers so the predicted field starts near zero; warp-based
# losses only see local image structure, so training must begin near identity.
_OUT_INIT_SCALE = 0.1


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Deterministic He-style initialization: N(0, 2/fan_in) kernels, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, (cin, cout) in _block_channels(cfg).items():
        std = np.sqrt(2.0 / (cin * 27))
        blocks[name] = ConvBlock(
            w=Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3, 3)), dtype=dtype),
            b=Tensor(np.zeros(cout), dtype=dtype),
            gamma=Tensor(np.ones(cout), dtype=dtype),
            beta=Tensor(np.zeros(cout), dtype=dtype),
            run_mean=np.zeros(cout, dtype=dtype),
            run_var=np.ones(cout, dtype=dtype),
        )
    c1 = cfg.level_channels[0]
    out_std = _OUT_INIT_SCALE * np.sqrt(2.0 / c1)
    out_w = Tensor(rng.normal(0.0, out_std, size=(3, c1, 1, 1, 1)), dtype=dtype)
    out_b = Tensor(np.zeros(3), dtype=dtype)
    return NetworkParams(cfg=cfg, seed=seed, blocks=blocks, out_w=out_w, out_b=out_b)


def _bn(x: Tensor, blk: ConvBlock, training: bool, eps: float, momentum: float) -> Tensor:
    c = blk.gamma.data.size
    shape = (1, c, 1, 1, 1)
    if training:
        out, stats = ad.batchnorm(x, blk.gamma, blk.beta, eps)
        blk.run_mean[...] = (1 - momentum) * blk.run_mean + momentum * stats["mu"].ravel()
        blk.run_var[...] = (1 - momentum) * blk.run_var + momentum * stats["var"].ravel()
        return out
    if not np.all(np.isfinite(blk.run_var)) or np.any(blk.run_var < 0):
        raise ValueError("inference with invalid batch-norm statistics")
    mu = blk.run_mean.reshape(shape)
    inv = 1.0 / np.sqrt(blk.run_var.reshape(shape) + eps)
    xn = ad.mul(ad.sub(x, Tensor(mu.astype(x.data.dtype), requires_grad=False)),
                Tensor(inv.astype(x.data.dtype), requires_grad=False))
    y = ad.mul(xn, ad.reshape(blk.gamma, shape))
    return ad.add(y, ad.reshape(blk.beta, shape))


def _unit(x, blk, training, cfg):
    return ad.relu(_bn(ad.conv3d(x, blk.w, blk.b), blk, training, cfg.bn_epsilon, cfg.bn_momentum))


def _center_crop_to(t: Tensor, spatial) -> Tensor:
    cur = t.data.shape[2:]
    key = [slice(None), slice(None)]
    for c, s in zip(cur, spatial):
        if (c - s) % 2 or c < s:
            raise ValueError(f"cannot center-crop {cur} to {spatial}")
        m = (c - s) // 2
        key.append(slice(m, m + s))
    return ad.slice_nd(t, tuple(key))


def forward(params: NetworkParams, ct_patch, mr_patch) -> Tensor:
    """Run the network on a batch; returns the field tensor (N, 3, f, f, f).

    ``ct_patch`` / ``mr_patch`` are arrays shaped (d, h, w) or (n, d, h, w);
    both modalities enter as channels of a single stack. In training mode
    batch statistics are used (and running statistics updated); in inference
    mode the stored running statistics make the pass batch-size independent.
    """
    ct = np.asarray(ct_patch)
    mr = np.asarray(mr_patch)
    if ct.shape != mr.shape:
        raise ValueError(f"modality patch shapes differ: {ct.shape} vs {mr.shape}")
    if ct.ndim == 3:
        ct, mr = ct[None], mr[None]
    if ct.ndim != 4:
        raise ValueError(f"patches must be (d,h,w) or (n,d,h,w), got {ct.shape}")
    for e in ct.shape[1:]:
        output_size(e)

    cfg = params.cfg
    training = params.mode == "training"
    x = Tensor(np.stack([ct, mr], axis=1), requires_grad=False)
    blk = params.blocks

    e1 = _unit(_unit(x, blk["enc1a"], training, cfg), blk["enc1b"], training, cfg)
    e2_in = ad.maxpool2(e1)
    e2 = _unit(_unit(e2_in, blk["enc2a"], training, cfg), blk["enc2b"], training, cfg)
    bott_in = ad.maxpool2(e2)
    bott = _unit(_unit(bott_in, blk["bot_a"], training, cfg), blk["bot_b"], training, cfg)

    d2_up = ad.upsample2(bott)
    d2_cat = ad.concat([d2_up, _center_crop_to(e2, d2_up.data.shape[2:])], axis=1)
    d2 = _unit(_unit(d2_cat, blk["dec2a"], training, cfg), blk["dec2b"], training, cfg)

    d1_up = ad.upsample2(d2)
    d1_cat = ad.concat([d1_up, _center_crop_to(e1, d1_up.data.shape[2:])], axis=1)
    d1 = _unit(_unit(d1_cat, blk["dec1a"], training, cfg), blk["dec1b"], training, cfg)

    return ad.conv3d(d1, params.out_w, params.out_b)


def predict_field(params: NetworkParams, ct_patch, mr_patch) -> DisplacementField:
    """Inference convenience: one patch pair in, a centered field block out."""
    mode = params.mode
    params.set_mode("inference")
    try:
        out = forward(params, ct_patch, mr_patch)
    finally:
        params.set_mode(mode)
    comp = out.data[0].astype(np.float32)
    n = np.asarray(ct_patch).shape[-1]
    m = (n - comp.shape[-1]) // 2
    return DisplacementField(comp, origin_offset=(m, m, m))


# ---------------------------------------------------------------------------
# Parameter vector packing (used by checkpoints and the gradcheck harness)


def params_vector(params: NetworkParams) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in params.tensors()])


def load_vector(params: NetworkParams, vec: np.ndarray) -> None:
    """Overwrite the learnable tensors from a flat vector (checkpoint order)."""
    offset = 0
    for t in params.tensors():
        n = t.data.size
        t.data = np.asarray(vec[offset:offset + n], dtype=t.data.dtype).reshape(t.data.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector has {vec.size} entries, network needs {offset}")


def with_param_tensor(params: NetworkParams, vec: Tensor) -> NetworkParams:
    """A view of ``params`` whose learnable tensors are slices of ``vec``.

    Lets the gradcheck harness differentiate the loss with respect to a
    single flat parameter vector. BN running statistics stay shared.
    """
    shapes = [t.data.shape for t in params.tensors()]
    total = sum(int(np.prod(s)) for s in shapes)
    if vec.data.shape != (total,):
        raise ValueError(f"expected vector of length {total}, got {vec.data.shape}")
    pieces = []
    offset = 0
    for s in shapes:
        n = int(np.prod(s))
        pieces.append(ad.reshape(ad.slice_nd(vec, (slice(offset, offset + n),)), s))
        offset += n
    it = iter(pieces)
    blocks = {}
    for name in _BLOCK_ORDER:
        blk = params.blocks[name]
        blocks[name] = ConvBlock(w=next(it), b=next(it), gamma=next(it), beta=next(it),
                                 run_mean=blk.run_mean, run_var=blk.run_var)
    return NetworkParams(cfg=params.cfg, seed=params.seed, blocks=blocks,
                         out_w=next(it), out_b=next(it), mode=params.mode)


def clone_params(params: NetworkParams) -> NetworkParams:
    """Deep copy (used for best-validation snapshots)."""
    blocks = {
        name: ConvBlock(
            w=Tensor(blk.w.data.copy()), b=Tensor(blk.b.data.copy()),
            gamma=Tensor(blk.gamma.data.copy()), beta=Tensor(blk.beta.data.copy()),
            run_mean=blk.run_mean.copy(), run_var=blk.run_var.copy(),
        )
        for name, blk in params.blocks.items()
    }
    return NetworkParams(cfg=params.cfg, seed=params.seed, blocks=blocks,
                         out_w=Tensor(params.out_w.data.copy()),
                         out_b=Tensor(params.out_b.data.copy()), mode=params.mode)


# ---------------------------------------------------------------------------
# Checkpoints: one JSON manifest line, then the raw little-endian f32 payload.
# Array order: per block (checkpoint order) w, b, gamma, beta, run_mean,
# run_var; then the final conv w, b.


def _all_arrays(params: NetworkParams):
    for name in _BLOCK_ORDER:
        blk = params.blocks[name]
        for tag, arr in (("w", blk.w.data), ("b", blk.b.data), ("gamma", blk.gamma.data),
                         ("beta", blk.beta.data), ("run_mean", blk.run_mean), ("run_var", blk.run_var)):
            yield f"{name}.{tag}", arr
    yield "out.w", params.out_w.data
    yield "out.b", params.out_b.data


def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    names_shapes = [[name, list(arr.shape)] for name, arr in _all_arrays(params)]
    manifest = {
        "magic": CKPT_MAGIC,
        "config": {
            "input_size": params.cfg.input_size,
            "level_channels": list(params.cfg.level_channels),
            "bn_epsilon": params.cfg.bn_epsilon,
            "bn_momentum": params.cfg.bn_momentum,
        },
        "seed": params.seed,
        "mode": params.mode,
        "arrays": names_shapes,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        for _, arr in _all_arrays(params):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as f:
        line = f.readline(1 << 20)
        if not line.endswith(b"\n"):
            raise FormatError(f"{path}: missing manifest line")
        try:
            manifest = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: bad manifest ({e})") from e
        if manifest.get("magic") != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        raw = f.read()
    c = manifest["config"]
    cfg = NetworkConfig(input_size=c["input_size"], level_channels=tuple(c["level_channels"]),
                        bn_epsilon=c["bn_epsilon"], bn_momentum=c["bn_momentum"])
    params = init_params(cfg, seed=manifest.get("seed", 0))
    params.set_mode(manifest.get("mode", "inference"))
    data = np.frombuffer(raw, dtype="<f4")

    expected = list(_all_arrays(params))
    declared = manifest.get("arrays", [])
    if len(declared) != len(expected):
        raise FormatError(f"{path}: manifest declares {len(declared)} arrays, expected {len(expected)}")
    offset = 0
    for (name, arr), (decl_name, decl_shape) in zip(expected, declared):
        if decl_name != name or list(arr.shape) != list(decl_shape):
            raise FormatError(f"{path}: array mismatch at {decl_name} {decl_shape}, expected {name} {list(arr.shape)}")
        n = arr.size
        if offset + n > data.size:
            raise FormatError(f"{path}: payload truncated at {name}")
        arr[...] = data[offset:offset + n].reshape(arr.shape)
        offset += n
    if offset != data.size:
        raise FormatError(f"{path}: payload has {data.size} floats, manifest declares {offset}")
    return params, manifest.get("extra", {})
