"""U-Net assembly: parameter construction, forward/backward passes, checkpoints.

Encoder levels double the feature count starting from ``base_features``;
each level is a convolution block (two pad -> 3x3 conv -> batch-norm/ReLU
-> dropout units) followed by 2x2 average pooling. The deepest level is a
convolution block without pooling. Decoder levels upsample with a 2x2/2
transposed convolution followed by batch-norm/ReLU, concatenate the encoder
skip tensor (encoder first), and run a convolution block. A final 1x1
convolution maps to ``out_channels`` scores.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import BatchNormParams, ConvKernel, ShapeError

CHECKPOINT_FORMAT = "selfseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class UNetConfig:
    depth: int = 4
    base_features: int = 64
    out_channels: int = 3
    dropout_p: float = 0.5
    input_channels: int = 1
    dropout_rescale: bool = True

    def __post_init__(self):
        if self.out_channels < 2:
            raise ValueError("out_channels must be >= 2")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_features < 1:
            raise ValueError("base_features must be >= 1")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")

    def features(self, level):
        return self.base_features * 2 ** level


@dataclass
class ConvBlock:
    conv1: ConvKernel
    bn1: BatchNormParams
    conv2: ConvKernel
    bn2: BatchNormParams


@dataclass
class UpBlock:
    tconv: ConvKernel
    bn: BatchNormParams


@dataclass
class ModelParams:
    config: UNetConfig
    encoder: list
    bottleneck: ConvBlock
    up: list
    decoder: list
    final: ConvKernel

    def _modules(self):
        for i, blk in enumerate(self.encoder):
            yield f"enc{i}", blk
        yield "mid", self.bottleneck
        for i, blk in enumerate(self.up):
            yield f"up{i}", blk
        for i, blk in enumerate(self.decoder):
            yield f"dec{i}", blk
        yield "final", self.final

    def _leaves(self):
        for prefix, mod in self._modules():
            if isinstance(mod, ConvKernel):
                yield prefix, mod
                continue
            for name in mod.__dataclass_fields__:
                yield f"{prefix}.{name}", getattr(mod, name)

    def trainable(self):
        """Ordered mapping ``name -> array`` of every learnable array (views)."""
        out = {}
        for name, leaf in self._leaves():
            if isinstance(leaf, ConvKernel):
                out[f"{name}.w"] = leaf.weights
                out[f"{name}.b"] = leaf.bias
            else:
                out[f"{name}.gamma"] = leaf.gamma
                out[f"{name}.beta"] = leaf.beta
        return out

    def buffers(self):
        """Ordered mapping of batch-norm running statistics (views)."""
        out = {}
        for name, leaf in self._leaves():
            if isinstance(leaf, BatchNormParams):
                out[f"{name}.run_mean"] = leaf.run_mean
                out[f"{name}.run_var"] = leaf.run_var
        return out

    def state_dict(self):
        d = dict(self.trainable())
        d.update(self.buffers())
        return d

    def load_state_dict(self, arrays):
        own = self.state_dict()
        missing = set(own) - set(arrays)
        if missing:
            raise KeyError(f"missing arrays: {sorted(missing)[:5]}")
        for name, dst in own.items():
            src = np.asarray(arrays[name])
            if src.shape != dst.shape:
                raise ShapeError(f"{name}: shape {src.shape} != {dst.shape}")
            dst[...] = src

    def copy(self):
        clone = build(self.config, seed=0, dtype=self.dtype)
        clone.load_state_dict(self.state_dict())
        return clone

    @property
    def dtype(self):
        return self.final.weights.dtype

    def n_parameters(self):
        return sum(a.size for a in self.trainable().values())


def _kernel(rng, hk, wk, fin, fout, dtype):
    return nn.xavier_normal_init(ConvKernel.zeros(hk, wk, fin, fout, dtype), rng)


def _conv_block(rngs, fin, fout, dtype):
    return ConvBlock(
        conv1=_kernel(next(rngs), 3, 3, fin, fout, dtype),
        bn1=BatchNormParams.identity(fout, dtype),
        conv2=_kernel(next(rngs), 3, 3, fout, fout, dtype),
        bn2=BatchNormParams.identity(fout, dtype),
    )


def build(config: UNetConfig, seed=0, dtype=np.float64) -> ModelParams:
    """Create Xavier-initialized parameters for ``config``.

    One child generator is spawned per kernel in a fixed order so the same
    seed always yields the same parameters.
    """
    n_kernels = 2 * config.depth + 2 + config.depth + 2 * config.depth + 1
    rngs = iter(np.random.default_rng(s)
                for s in np.random.SeedSequence(seed).spawn(n_kernels))
    encoder = []
    fin = config.input_channels
    for level in range(config.depth):
        encoder.append(_conv_block(rngs, fin, config.features(level), dtype))
        fin = config.features(level)
    bottleneck = _conv_block(rngs, fin, config.features(config.depth), dtype)
    up = []
    for level in range(config.depth):
        f_low = config.features(level + 1)
        up.append(UpBlock(
            tconv=_kernel(next(rngs), 2, 2, f_low, f_low // 2, dtype),
            bn=BatchNormParams.identity(f_low // 2, dtype),
        ))
    decoder = []
    for level in range(config.depth):
        f = config.features(level)
        # skip tensor (f) concatenated with the upsampled tensor (f)
        decoder.append(_conv_block(rngs, 2 * f, f, dtype))
    final = _kernel(next(rngs), 1, 1, config.base_features, config.out_channels, dtype)
    return ModelParams(config, encoder, bottleneck, up, decoder, final)


def check_compat(config: UNetConfig, h, w):
    """Return ``(ok, diagnostic)`` for an input of spatial size ``h x w``."""
    m = 2 ** config.depth
    for name, size in (("height", h), ("width", w)):
        if size < m:
            return False, (f"{name} {size} is below the minimum {m} for depth "
                           f"{config.depth} (bottleneck would be empty)")
        if size % m:
            return False, f"{name} {size} is not divisible by 2**depth = {m}"
    return True, "ok"


# --------------------------------------------------------------------------
# forward / backward

def _unit_forward(x, conv, bn, p_d, mode, rng, rescale=False):
    xp = nn.zero_pad(x, 1, 1)
    c = nn.conv2d_forward(xp, conv)
    a, bn_cache = nn.batchnorm_relu_forward(c, bn, mode)
    d, mask = nn.dropout(a, p_d, rng, mode, rescale)
    scale = 1.0 / (1.0 - p_d) if rescale and mode == "train" else 1.0
    return d, (xp, bn_cache, mask, scale)


def _unit_backward(g, conv, bn, cache):
    xp, bn_cache, mask, scale = cache
    g = g * mask
    if scale != 1.0:
        g *= scale
    g, g_gamma, g_beta = nn.batchnorm_relu_backward(g, bn_cache, bn)
    gxp, gw, gb = nn.conv2d_backward(xp, conv, 1, 1, g)
    return nn.unpad(gxp, 1, 1), gw, gb, g_gamma, g_beta


def _block_forward(x, blk: ConvBlock, p_d, mode, rng, rescale=False):
    y1, c1 = _unit_forward(x, blk.conv1, blk.bn1, p_d, mode, rng, rescale)
    y2, c2 = _unit_forward(y1, blk.conv2, blk.bn2, p_d, mode, rng, rescale)
    return y2, (c1, c2)


def _block_backward(g, blk: ConvBlock, cache, prefix, grads):
    c1, c2 = cache
    g, gw, gb, gg, gbt = _unit_backward(g, blk.conv2, blk.bn2, c2)
    grads[f"{prefix}.conv2.w"], grads[f"{prefix}.conv2.b"] = gw, gb
    grads[f"{prefix}.bn2.gamma"], grads[f"{prefix}.bn2.beta"] = gg, gbt
    g, gw, gb, gg, gbt = _unit_backward(g, blk.conv1, blk.bn1, c1)
    grads[f"{prefix}.conv1.w"], grads[f"{prefix}.conv1.b"] = gw, gb
    grads[f"{prefix}.bn1.gamma"], grads[f"{prefix}.bn1.beta"] = gg, gbt
    return g


def forward(params: ModelParams, x, mode="infer", rng=None, return_cache=False):
    """Map ``(n, h, w, input_channels)`` images to ``(n, h, w, out_channels)`` scores.

    Train mode uses batch statistics (updating the running ones) and active
    dropout driven by ``rng``; infer mode is deterministic and side-effect free.
    """
    cfg = params.config
    x = nn.check_tensor4(x, "input")
    if x.shape[3] != cfg.input_channels:
        raise ShapeError(f"input has {x.shape[3]} channels, model expects {cfg.input_channels}")
    ok, why = check_compat(cfg, x.shape[1], x.shape[2])
    if not ok:
        raise ShapeError(why)
    if mode == "train" and cfg.dropout_p > 0:
        rng = np.random.default_rng(rng)
    x = x.astype(params.dtype, copy=False)
    p_d, rs = cfg.dropout_p, cfg.dropout_rescale
    skips, enc_caches, pool_shapes = [], [], []
    h = x
    for blk in params.encoder:
        h, c = _block_forward(h, blk, p_d, mode, rng, rs)
        skips.append(h)
        enc_caches.append(c)
        pool_shapes.append(h.shape)
        h = nn.avg_pool(h)
    h, mid_cache = _block_forward(h, params.bottleneck, p_d, mode, rng, rs)
    up_caches, dec_caches = [None] * cfg.depth, [None] * cfg.depth
    for level in reversed(range(cfg.depth)):
        ub = params.up[level]
        u_in = h
        u = nn.transposed_conv_forward(u_in, ub.tconv, 2, 2)
        u, bn_cache = nn.batchnorm_relu_forward(u, ub.bn, mode)
        cat = nn.concat_features(skips[level], u)
        h, dc = _block_forward(cat, params.decoder[level], p_d, mode, rng, rs)
        up_caches[level] = (u_in, bn_cache)
        dec_caches[level] = dc
    out = nn.conv2d_forward(h, params.final)
    if not return_cache:
        return out
    cache = dict(enc=enc_caches, pool_shapes=pool_shapes, mid=mid_cache,
                 up=up_caches, dec=dec_caches, last=h)
    return out, cache


def backward(params: ModelParams, cache, grad_out):
    """Gradients of a scalar loss w.r.t. every trainable array.

    ``grad_out`` is the loss gradient w.r.t. the network output. Returns a
    dict keyed like :meth:`ModelParams.trainable`.
    """
    cfg = params.config
    grads = {}
    g, gw, gb = nn.conv2d_backward(cache["last"], params.final, 1, 1, grad_out)
    grads["final.w"], grads["final.b"] = gw, gb
    skip_grads = [None] * cfg.depth
    for level in range(cfg.depth):
        g = _block_backward(g, params.decoder[level], cache["dec"][level], f"dec{level}", grads)
        f_skip = cfg.features(level)
        g_skip, g_up = nn.split_features(g, f_skip)
        skip_grads[level] = g_skip
        ub = params.up[level]
        u_in, bn_cache = cache["up"][level]
        g_up, gg, gbt = nn.batchnorm_relu_backward(g_up, bn_cache, ub.bn)
        g, gw, gb = nn.transposed_conv_backward(u_in, ub.tconv, 2, 2, g_up)
        grads[f"up{level}.tconv.w"], grads[f"up{level}.tconv.b"] = gw, gb
        grads[f"up{level}.bn.gamma"], grads[f"up{level}.bn.beta"] = gg, gbt
    g = _block_backward(g, params.bottleneck, cache["mid"], "mid", grads)
    for level in reversed(range(cfg.depth)):
        g = nn.avg_pool_backward(g, cache["pool_shapes"][level])
        g = g + skip_grads[level]
        g = _block_backward(g, params.encoder[level], cache["enc"][level], f"enc{level}", grads)
    return {name: grads[name] for name in params.trainable()}


# --------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive of .npy members (numpy ``savez`` layout):
#   meta.json             UTF-8 JSON: format, version, unet config, dtype and
#                         any caller metadata (epoch, iteration, seed, ...)
#   param/<name>.npy      trainable arrays, names as in ModelParams.trainable
#   buffer/<name>.npy     batch-norm running statistics
#   extra/<group>/<name>.npy  optional caller arrays (e.g. optimizer velocity)

def save_checkpoint(path, params: ModelParams, meta=None, extra_arrays=None):
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "unet": asdict(params.config),
        "dtype": np.dtype(params.dtype).name,
        "meta": meta or {},
    }
    members = {f"param/{k}": v for k, v in params.trainable().items()}
    members.update({f"buffer/{k}": v for k, v in params.buffers().items()})
    for group, arrays in (extra_arrays or {}).items():
        members.update({f"extra/{group}/{k}": v for k, v in arrays.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        # fixed timestamps keep the archive byte-identical across runs
        info = zipfile.ZipInfo("meta.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name, arr in members.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(params, meta, extra_arrays)`` from :func:`save_checkpoint` output."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("meta.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a selfseg checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays, extra = {}, {}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            key = name[:-4]
            kind, _, rest = key.partition("/")
            if kind in ("param", "buffer"):
                arrays[rest] = arr
            elif kind == "extra":
                group, _, leaf = rest.partition("/")
                extra.setdefault(group, {})[leaf] = arr
    params = build(UNetConfig(**header["unet"]), seed=0, dtype=np.dtype(header["dtype"]))
    params.load_state_dict(arrays)
    return params, header["meta"], extra
