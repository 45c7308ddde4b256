"""Encoder-decoder refinement network and its checkpoint serialization.

The encoder is a stack of residual stages (two 3x3 convolutions per block
with identity or projected shortcuts), one stage per entry of
``encoder_blocks``, each stage opening with a stride-2 block.  The decoder
mirrors it with nearest-neighbour upsampling, concatenating the matching
encoder activation ahead of two convolution+norm+ReLU units per stage.  A
final convolution and a logistic squash produce output planes strictly
inside (0, 1).

Checkpoints are a single little-endian binary stream:

    magic "LCTM" | u32 version | u32 length, config JSON |
    tensor records ... | u32 CRC-32 of all preceding bytes

where each record is ``u32 name length | name | u8 rank | u32 dims... |
float32 values``.  Parameters serialize in registration order, then the
normalization running statistics, then (optionally) the Adam moments.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .nn import (
    ParamStore,
    Tensor,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    upsample_nearest2x_backward,
    upsample_nearest2x_forward,
)

CHECKPOINT_MAGIC = b"LCTM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``encoder_blocks`` gives the residual-block count of each encoder stage;
    the default (2, 2, 2, 2) is the classic 18-layer residual layout.
    ``base_width`` is the channel count after the stem; each stage doubles
    the working width.  The stem is either a stride-1 3x3 convolution (desk
    scale) or the stride-2 7x7 used at full scale.  ``input_size`` records
    the intended training resolution; `UNet.forward` accepts any spatial
    size divisible by the downsample factor.
    """

    encoder_blocks: tuple = (2, 2, 2, 2)
    base_width: int = 16
    input_channels: int = 1
    output_channels: int = 1
    input_size: int = 512
    stem: str = "3x3"
    norm: str = "batch"

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.encoder_blocks)
        object.__setattr__(self, "encoder_blocks", blocks)
        if len(blocks) < 1 or any(b < 1 for b in blocks):
            raise InputError(f"encoder_blocks must be positive counts, got {blocks}")
        if self.base_width < 1:
            raise InputError(f"base_width must be at least 1, got {self.base_width}")
        if self.input_channels < 1 or self.output_channels < 1:
            raise InputError("channel counts must be positive")
        if self.stem not in ("3x3", "7x7"):
            raise InputError(f"stem must be '3x3' or '7x7', got {self.stem!r}")
        if self.norm not in ("batch", "none"):
            raise InputError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        if self.input_size < self.downsample_factor or self.input_size % self.downsample_factor:
            raise InputError(
                f"input_size {self.input_size} must be a positive multiple of the "
                f"downsample factor {self.downsample_factor}"
            )

    @property
    def downsample_factor(self) -> int:
        factor = 2 ** len(self.encoder_blocks)
        return factor * 2 if self.stem == "7x7" else factor


class _Conv:
    def __init__(self, store, name, cin, cout, k, stride=1, bias=False, dtype=np.float32):
        self.stride = stride
        self.padding = k // 2
        self.fan_in = cin * k * k
        self.weight = store.register(
            f"{name}.weight", Tensor(np.zeros((cout, cin, k, k), dtype))
        )
        self.bias = (
            store.register(f"{name}.bias", Tensor(np.zeros(cout, dtype))) if bias else None
        )

    def init(self, rng):
        bound = np.sqrt(6.0 / self.fan_in)
        w = self.weight.value
        w[...] = rng.uniform(-bound, bound, w.shape).astype(w.dtype)

    def forward(self, x):
        b = None if self.bias is None else self.bias.value
        return conv2d_forward(x, self.weight.value, b, self.stride, self.padding), x

    def backward(self, dy, x):
        dx, dw, db = conv2d_backward(
            dy, x, self.weight.value, self.stride, self.padding, bias=self.bias is not None
        )
        self.weight.add_grad(dw)
        if self.bias is not None:
            self.bias.add_grad(db)
        return dx


class _Norm:
    """Batch normalization, or a transparent pass-through when disabled."""

    def __init__(self, store, buffers, name, channels, enabled, dtype=np.float32):
        self.enabled = enabled
        if not enabled:
            return
        self.gamma = store.register(f"{name}.gamma", Tensor(np.ones(channels, dtype)))
        self.beta = store.register(f"{name}.beta", Tensor(np.zeros(channels, dtype)))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        buffers[f"{name}.running_mean"] = self.running_mean
        buffers[f"{name}.running_var"] = self.running_var

    def forward(self, x, train):
        if not self.enabled:
            return x, None
        return batchnorm2d_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, train=train,
        )

    def backward(self, dy, cache):
        if not self.enabled:
            return dy
        dx, dgamma, dbeta = batchnorm2d_backward(dy, cache)
        self.gamma.add_grad(dgamma)
        self.beta.add_grad(dbeta)
        return dx


class _ConvUnit:
    """conv -> norm -> relu.  Used for the stem and the decoder refinements."""

    def __init__(self, store, buffers, name, cin, cout, k, stride, with_norm, dtype):
        self.conv = _Conv(store, f"{name}.conv", cin, cout, k, stride,
                          bias=not with_norm, dtype=dtype)
        self.norm = _Norm(store, buffers, f"{name}.norm", cout, with_norm, dtype)

    def init(self, rng):
        self.conv.init(rng)

    def forward(self, x, train):
        h, conv_cache = self.conv.forward(x)
        h, norm_cache = self.norm.forward(h, train)
        y, mask = relu_forward(h)
        return y, (conv_cache, norm_cache, mask)

    def backward(self, dy, cache):
        conv_cache, norm_cache, mask = cache
        d = relu_backward(dy, mask)
        d = self.norm.backward(d, norm_cache)
        return self.conv.backward(d, conv_cache)


class _BasicBlock:
    """Two 3x3 convolutions and a shortcut; ReLU after the residual add.

    The shortcut is the identity when shape allows, otherwise a 1x1
    projection with its own normalization.
    """

    def __init__(self, store, buffers, name, cin, cout, stride, with_norm, dtype):
        self.conv1 = _Conv(store, f"{name}.a.conv", cin, cout, 3, stride,
                           bias=not with_norm, dtype=dtype)
        self.norm1 = _Norm(store, buffers, f"{name}.a.norm", cout, with_norm, dtype)
        self.conv2 = _Conv(store, f"{name}.b.conv", cout, cout, 3, 1,
                           bias=not with_norm, dtype=dtype)
        self.norm2 = _Norm(store, buffers, f"{name}.b.norm", cout, with_norm, dtype)
        if stride != 1 or cin != cout:
            self.proj = _Conv(store, f"{name}.shortcut.conv", cin, cout, 1, stride,
                              bias=not with_norm, dtype=dtype)
            self.proj_norm = _Norm(store, buffers, f"{name}.shortcut.norm", cout,
                                   with_norm, dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def init(self, rng):
        self.conv1.init(rng)
        self.conv2.init(rng)
        if self.proj is not None:
            self.proj.init(rng)

    def forward(self, x, train):
        h, c1 = self.conv1.forward(x)
        h, n1 = self.norm1.forward(h, train)
        h, mask1 = relu_forward(h)
        h, c2 = self.conv2.forward(h)
        h, n2 = self.norm2.forward(h, train)
        if self.proj is not None:
            sc, cp = self.proj.forward(x)
            sc, npc = self.proj_norm.forward(sc, train)
        else:
            sc, cp, npc = x, None, None
        y, mask_out = relu_forward(h + sc)
        return y, (c1, n1, mask1, c2, n2, cp, npc, mask_out)

    def backward(self, dy, cache):
        c1, n1, mask1, c2, n2, cp, npc, mask_out = cache
        d = relu_backward(dy, mask_out)
        if self.proj is not None:
            dsc = self.proj_norm.backward(d, npc)
            dsc = self.proj.backward(dsc, cp)
        else:
            dsc = d
        dm = self.norm2.backward(d, n2)
        dm = self.conv2.backward(dm, c2)
        dm = relu_backward(dm, mask1)
        dm = self.norm1.backward(dm, n1)
        dm = self.conv1.backward(dm, c1)
        return dm + dsc


class _DecoderStage:
    """Upsample, concatenate the encoder skip (when present), refine twice."""

    def __init__(self, store, buffers, name, cin, skip_ch, cout, with_norm, dtype):
        self.cin = cin
        self.skip_ch = skip_ch
        self.unit1 = _ConvUnit(store, buffers, f"{name}.a", cin + skip_ch, cout, 3, 1,
                               with_norm, dtype)
        self.unit2 = _ConvUnit(store, buffers, f"{name}.b", cout, cout, 3, 1,
                               with_norm, dtype)

    def init(self, rng):
        self.unit1.init(rng)
        self.unit2.init(rng)

    def forward(self, x, skip, train):
        up = upsample_nearest2x_forward(x)
        if self.skip_ch:
            if skip.shape[2:] != up.shape[2:]:
                raise InputError(
                    f"skip resolution {skip.shape[2:]} does not match upsample "
                    f"{up.shape[2:]}"
                )
            merged = np.concatenate([up, skip], axis=1)
        else:
            merged = up
        h, cache1 = self.unit1.forward(merged, train)
        y, cache2 = self.unit2.forward(h, train)
        return y, (cache1, cache2)

    def backward(self, dy, cache):
        cache1, cache2 = cache
        d = self.unit2.backward(dy, cache2)
        d = self.unit1.backward(d, cache1)
        dskip = d[:, self.cin :] if self.skip_ch else None
        dx = upsample_nearest2x_backward(np.ascontiguousarray(d[:, : self.cin]))
        return dx, dskip


class UNet:
    """The refinement network.  Construct through `build` or `load_checkpoint`."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        self.buffers: dict[str, np.ndarray] = {}
        with_norm = config.norm == "batch"
        w = config.base_width
        stem_k, stem_stride = (7, 2) if config.stem == "7x7" else (3, 1)
        self.stem = _ConvUnit(self.store, self.buffers, "stem", config.input_channels,
                              w, stem_k, stem_stride, with_norm, dtype)
        self.stages: list[list[_BasicBlock]] = []
        cin = w
        for i, depth in enumerate(config.encoder_blocks):
            cout = w * (2**i)
            blocks = []
            for j in range(depth):
                blocks.append(
                    _BasicBlock(
                        self.store, self.buffers, f"enc{i + 1}.block{j + 1}",
                        cin if j == 0 else cout, cout,
                        stride=2 if j == 0 else 1, with_norm=with_norm, dtype=dtype,
                    )
                )
            self.stages.append(blocks)
            cin = cout
        # Skip sources: the stem output, then every stage output except the
        # bottleneck.  Decoders are stored in application order (deepest first).
        skip_widths = [w] + [w * (2**i) for i in range(len(config.encoder_blocks) - 1)]
        self.decoders: list[_DecoderStage] = []
        for i in reversed(range(len(config.encoder_blocks))):
            skip_ch = skip_widths[i]
            self.decoders.append(
                _DecoderStage(self.store, self.buffers, f"dec{i + 1}", cin, skip_ch,
                              skip_ch, with_norm, dtype)
            )
            cin = skip_ch
        if stem_stride == 2:
            self.final_up = _DecoderStage(self.store, self.buffers, "dec0", cin, 0,
                                          cin, with_norm, dtype)
        else:
            self.final_up = None
        self.head = _Conv(self.store, "head", cin, config.output_channels, 3, 1,
                          bias=True, dtype=dtype)

    def init_params(self, rng) -> None:
        self.stem.init(rng)
        for blocks in self.stages:
            for block in blocks:
                block.init(rng)
        for dec in self.decoders:
            dec.init(rng)
        if self.final_up is not None:
            self.final_up.init(rng)
        self.head.init(rng)

    @property
    def n_parameters(self) -> int:
        return self.store.n_values

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise InputError(
                f"expected (B, {self.config.input_channels}, H, W) input, got shape {x.shape}"
            )
        factor = self.config.downsample_factor
        if min(x.shape[2], x.shape[3]) < factor or x.shape[2] % factor or x.shape[3] % factor:
            raise InputError(
                f"spatial size {x.shape[2]}x{x.shape[3]} is not a positive multiple "
                f"of the downsample factor {factor}"
            )

    def forward(self, x, train: bool = False):
        """Run the network; returns the output and the backward cache."""
        self._check_input(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        h, stem_cache = self.stem.forward(x, train)
        skips = [h]
        stage_caches = []
        for blocks in self.stages:
            block_caches = []
            for block in blocks:
                h, c = block.forward(h, train)
                block_caches.append(c)
            stage_caches.append(block_caches)
            skips.append(h)
        skips.pop()  # the bottleneck feeds the decoder directly, not a skip
        dec_caches = []
        for dec in self.decoders:
            h, c = dec.forward(h, skips.pop(), train)
            dec_caches.append(c)
        if self.final_up is not None:
            h, final_cache = self.final_up.forward(h, None, train)
        else:
            final_cache = None
        h, head_cache = self.head.forward(h)
        y, sig_cache = sigmoid_forward(h)
        return y, (stem_cache, stage_caches, dec_caches, final_cache, head_cache, sig_cache)

    def predict(self, x) -> np.ndarray:
        """Eval-mode forward pass: pure, no buffer updates, output in (0, 1)."""
        y, _ = self.forward(x, train=False)
        return y

    def backward(self, dy, cache):
        """Accumulate parameter gradients from an upstream output gradient.

        Returns the gradient with respect to the network input.
        """
        stem_cache, stage_caches, dec_caches, final_cache, head_cache, sig_cache = cache
        d = sigmoid_backward(dy, sig_cache)
        d = self.head.backward(d, head_cache)
        if self.final_up is not None:
            d, _ = self.final_up.backward(d, final_cache)
        # Walking the decoders shallowest-first yields the gradient into skip
        # source k at position k (k = 0 is the stem output).
        skip_grads = []
        for dec, c in zip(reversed(self.decoders), reversed(dec_caches)):
            d, dskip = dec.backward(d, c)
            skip_grads.append(dskip)
        # d now sits at the bottleneck; every stage output also received a
        # direct contribution through its skip connection.
        for i in reversed(range(len(self.stages))):
            for block, c in zip(reversed(self.stages[i]), reversed(stage_caches[i])):
                d = block.backward(d, c)
            d = d + skip_grads[i]
        return self.stem.backward(d, stem_cache)


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> UNet:
    """Construct a network and initialize every convolution from one seed."""
    model = UNet(config, dtype)
    model.init_params(np.random.default_rng(seed))
    return model


# ---------------------------------------------------------------------------
# checkpoint serialization


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    parts = [struct.pack("<I", len(nb)), nb, struct.pack("B", data.ndim)]
    parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
    parts.append(data.tobytes())
    return b"".join(parts)


def save_checkpoint(model: UNet, path: str | Path, optimizer: bool = False) -> None:
    """Serialize a model (and optionally its Adam moments) to one file.

    Values are stored as float32 regardless of the in-memory dtype.
    """
    cfg = asdict(model.config)
    cfg["encoder_blocks"] = list(cfg["encoder_blocks"])
    cfg["step"] = model.store.t
    cfg["with_optimizer"] = bool(optimizer)
    payload = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(payload))
    out += payload
    for name, tensor in model.store.items():
        out += _pack_record(name, tensor.value)
    for name, buf in model.buffers.items():
        out += _pack_record(name, buf)
    if optimizer:
        for name, _ in model.store.items():
            out += _pack_record(f"adam.m.{name}", model.store.m[name])
            out += _pack_record(f"adam.v.{name}", model.store.v[name])
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def _parse_records(buf: bytes, pos: int, end: int) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    while pos < end:
        if pos + 4 > end:
            raise InputError("checkpoint record header extends past the end")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if name_len == 0 or pos + name_len + 1 > end:
            raise InputError("checkpoint record name is malformed")
        try:
            name = buf[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"checkpoint record name is not UTF-8: {exc}") from None
        pos += name_len
        rank = buf[pos]
        pos += 1
        if rank > 8 or pos + 4 * rank > end:
            raise InputError(f"record {name!r} has a malformed shape")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = count * 4
        if pos + nbytes > end:
            raise InputError(f"record {name!r} data extends past the end")
        if name in records:
            raise InputError(f"duplicate record {name!r}")
        values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
        records[name] = values.reshape(shape).astype(np.float32)
        pos += nbytes
    return records


def load_checkpoint(path: str | Path) -> UNet:
    """Rebuild a model from a checkpoint file, validating structure first.

    The CRC is checked before any record is trusted, so a truncated or
    corrupted file fails cleanly without producing a partially loaded model.
    """
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise InputError(f"{path}: too short to be a checkpoint")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise InputError(f"{path}: checksum mismatch (file truncated or corrupted)")
    (cfg_len,) = struct.unpack_from("<I", buf, 8)
    if 12 + cfg_len > len(buf) - 4:
        raise InputError(f"{path}: config record extends past the end")
    try:
        cfg = json.loads(buf[12 : 12 + cfg_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: bad config record: {exc}") from None
    try:
        step = int(cfg.pop("step"))
        with_optimizer = bool(cfg.pop("with_optimizer"))
        config = ModelConfig(
            encoder_blocks=tuple(cfg.pop("encoder_blocks")),
            base_width=int(cfg.pop("base_width")),
            input_channels=int(cfg.pop("input_channels")),
            output_channels=int(cfg.pop("output_channels")),
            input_size=int(cfg.pop("input_size")),
            stem=str(cfg.pop("stem")),
            norm=str(cfg.pop("norm")),
        )
    except KeyError as exc:
        raise InputError(f"{path}: config record is missing {exc}") from None
    if cfg:
        raise InputError(f"{path}: config record has unknown fields {sorted(cfg)}")
    records = _parse_records(buf, 12 + cfg_len, len(buf) - 4)
    model = UNet(config)
    expected = list(model.store.names()) + list(model.buffers)
    if with_optimizer:
        expected += [f"adam.m.{n}" for n in model.store.names()]
        expected += [f"adam.v.{n}" for n in model.store.names()]
    missing = set(expected) - set(records)
    extra = set(records) - set(expected)
    if missing or extra:
        raise InputError(
            f"{path}: records do not match the architecture "
            f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})"
        )
    for name, tensor in model.store.items():
        _assign(path, name, tensor.value, records[name])
    for name, buf_arr in model.buffers.items():
        _assign(path, name, buf_arr, records[name])
    if with_optimizer:
        for name in model.store.names():
            _assign(path, name, model.store.m[name], records[f"adam.m.{name}"])
            _assign(path, name, model.store.v[name], records[f"adam.v.{name}"])
    model.store.t = step
    return model


def _assign(path, name, dst: np.ndarray, src: np.ndarray) -> None:
    if dst.shape != src.shape:
        raise InputError(
            f"{path}: record {name!r} has shape {src.shape}, expected {dst.shape}"
        )
    dst[...] = src
