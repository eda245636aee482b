"""Network assembly: multi-scale attention encoder, spike residual attention
blocks and the classifier head, plus presets, static shape tracing, parameter
accounting and the ``MRAS`` checkpoint container."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .layers import BatchNorm1d, Conv1d, Linear, Module
from .neurons import (
    SPATIAL_KERNEL,
    AttentionSpikingNeuron,
    LIFNeuron,
    NeuronConfig,
    attention_kernel_size,
    channel_scores,
    spatial_scores,
)
from .tensor import DimensionError, Tensor

ATTENTION_ORDERS = ("ca-sa", "sa-ca", "parallel")
ASN_SITES = ("fusion+blocks", "all", "none")


@dataclass
class EncoderConfig:
    kernel_sizes: tuple[int, int, int] = (3, 5, 7)
    stage_channels: tuple[int, int] = (32, 64)
    pool_stride: int = 2
    second_conv_stride: int = 2
    use_attention: bool = True


@dataclass
class ResidualBlockConfig:
    in_channels: int
    out_channels: int
    downsample_stride: int = 2
    use_attention: bool = True


@dataclass
class NetworkConfig:
    num_classes: int
    input_channels: int = 1
    input_length: int = 1024
    timesteps: int = 4
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    blocks: list[ResidualBlockConfig] = field(default_factory=list)
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    attention_order: str = "ca-sa"
    asn_sites: str = "fusion+blocks"
    conv_bias: bool = True
    standardize: bool = True
    name: str = "custom"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if any(k % 2 == 0 for k in self.encoder.kernel_sizes):
            raise ValueError("encoder kernel sizes must be odd")
        if self.attention_order not in ATTENTION_ORDERS:
            raise ValueError(f"attention_order must be one of {ATTENTION_ORDERS}")
        if self.asn_sites not in ASN_SITES:
            raise ValueError(f"asn_sites must be one of {ASN_SITES}")
        prev = self.encoder.stage_channels[1]
        for i, blk in enumerate(self.blocks):
            if blk.in_channels != prev:
                raise ValueError(
                    f"block {i + 1} expects {blk.in_channels} input channels but receives {prev}"
                )
            prev = blk.out_channels

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.encoder.stage_channels[1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        for key in ("kernel_sizes", "stage_channels"):
            if key in enc:
                enc[key] = tuple(enc[key])
        d["encoder"] = EncoderConfig(**enc)
        d["blocks"] = [ResidualBlockConfig(**b) for b in d.pop("blocks", [])]
        d["neuron"] = NeuronConfig(**d.pop("neuron", {}))
        return cls(**d)

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


PRESET_CLASSES = {"mfpt": 15, "jnu": 12, "seu": 10, "synthetic": 3}
PRESET_INPUT_CHANNELS = {"mfpt": 1, "jnu": 1, "seu": 3, "synthetic": 1}
PRESETS = tuple(PRESET_CLASSES) + ("mfpt-deep",)


def build_preset(name: str, num_classes: int | None = None, timesteps: int = 4) -> NetworkConfig:
    """Declarative architecture for a named dataset.

    ``synthetic`` is the width-reduced desk-scale variant (64 channels max).
    ``mfpt-deep`` stacks four residual blocks instead of two.
    """
    if name == "synthetic":
        enc = EncoderConfig(stage_channels=(8, 16))
        blocks = [ResidualBlockConfig(16, 32), ResidualBlockConfig(32, 64)]
    elif name in ("mfpt", "jnu", "seu"):
        enc = EncoderConfig()
        blocks = [ResidualBlockConfig(64, 256), ResidualBlockConfig(256, 512)]
    elif name == "mfpt-deep":
        enc = EncoderConfig()
        blocks = [
            ResidualBlockConfig(64, 256),
            ResidualBlockConfig(256, 256),
            ResidualBlockConfig(256, 512),
            ResidualBlockConfig(512, 512),
        ]
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = name.split("-")[0]
    return NetworkConfig(
        num_classes=num_classes if num_classes is not None else PRESET_CLASSES[base],
        input_channels=PRESET_INPUT_CHANNELS[base],
        timesteps=timesteps,
        encoder=enc,
        blocks=blocks,
        name=name,
    )


# ---------------------------------------------------------------- static tracing


def static_shapes(cfg: NetworkConfig) -> "OrderedDict[str, tuple[int, int]]":
    """(channels, length) of every named activation, derived from the config alone."""
    enc = cfg.encoder
    s = cfg.input_length
    c1, c2 = enc.stage_channels
    if s % (enc.pool_stride * enc.second_conv_stride):
        raise DimensionError(
            f"length axis: input length {s} not divisible by the encoder reduction "
            f"{enc.pool_stride * enc.second_conv_stride}"
        )
    shapes: OrderedDict[str, tuple[int, int]] = OrderedDict()
    shapes["input"] = (cfg.input_channels, s)
    s_pool = (s - enc.pool_stride) // enc.pool_stride + 1
    s_enc = (s_pool + 2 * (min(enc.kernel_sizes) // 2) - min(enc.kernel_sizes)) // enc.second_conv_stride + 1
    for k in enc.kernel_sizes:
        shapes[f"encoder.path{k}.sn1"] = (c1, s)
        shapes[f"encoder.path{k}.pool"] = (c1, s_pool)
        shapes[f"encoder.path{k}.current"] = (c2, (s_pool + 2 * (k // 2) - k) // enc.second_conv_stride + 1)
    shapes["encoder.fused"] = (3 * c2, s_enc)
    shapes["encoder"] = (c2, s_enc)
    s_cur = s_enc
    for i, blk in enumerate(cfg.blocks, start=1):
        if s_cur % blk.downsample_stride:
            raise DimensionError(f"length axis: block {i} input length {s_cur} is not divisible by its stride")
        s_cur = (s_cur + 2 - 3) // blk.downsample_stride + 1
        shapes[f"block{i}.sn1"] = (blk.out_channels, s_cur)
        shapes[f"block{i}"] = (blk.out_channels, s_cur)
    shapes["features"] = (cfg.feature_channels, 1)
    shapes["logits"] = (cfg.num_classes, 1)
    return shapes


@dataclass(frozen=True)
class LayerSpec:
    """A weight layer as seen by the FLOP counter."""

    name: str
    kind: str  # "conv" or "fc"
    kernel: int
    c_in: int
    c_out: int
    h_out: int
    source: str  # spiking layer feeding it, or "input"


def layer_plan(cfg: NetworkConfig) -> list[LayerSpec]:
    shapes = static_shapes(cfg)
    enc = cfg.encoder
    c1, c2 = enc.stage_channels
    plan = []
    for k in enc.kernel_sizes:
        plan.append(LayerSpec(f"encoder.path{k}.conv1", "conv", k, cfg.input_channels, c1, cfg.input_length, "input"))
        plan.append(LayerSpec(f"encoder.path{k}.conv2", "conv", k, c1, c2, shapes[f"encoder.path{k}.current"][1],
                              f"encoder.path{k}.sn1"))
    prev = "encoder.sn"
    for i, blk in enumerate(cfg.blocks, start=1):
        s_out = shapes[f"block{i}"][1]
        plan.append(LayerSpec(f"block{i}.conv1", "conv", 3, blk.in_channels, blk.out_channels, s_out, prev))
        plan.append(LayerSpec(f"block{i}.conv2", "conv", 3, blk.out_channels, blk.out_channels, s_out, f"block{i}.sn1"))
        plan.append(LayerSpec(f"block{i}.shortcut", "conv", 1, blk.in_channels, blk.out_channels, s_out, prev))
        prev = f"block{i}.sn"
    plan.append(LayerSpec("fc", "fc", 1, cfg.feature_channels, cfg.num_classes, 1, prev))
    return plan


# ---------------------------------------------------------------- modules


def _is_binary(a: np.ndarray) -> bool:
    return bool(np.all((a == 0) | (a == 1)))


class ChannelGate(Module):
    """``sigmoid(conv_c(mean_s(I))) * I``; also used over the fused 3C encoder currents."""

    def __init__(self, channels: int):
        super().__init__()
        self.add_param("w_c", np.zeros((1, 1, attention_kernel_size(channels)), dtype=tc.default_dtype()))

    def weights(self, I: Tensor) -> Tensor:
        return tc.sigmoid(channel_scores(I, self.w_c))

    def __call__(self, I: Tensor) -> Tensor:
        return tc.mul(self.weights(I), I)


class SpatialGate(Module):
    def __init__(self, k_s: int = SPATIAL_KERNEL):
        super().__init__()
        self.add_param("w_s", np.zeros((1, 1, k_s), dtype=tc.default_dtype()))

    def weights(self, I: Tensor) -> Tensor:
        return tc.sigmoid(spatial_scores(I, self.w_s))

    def __call__(self, I: Tensor) -> Tensor:
        return tc.mul(self.weights(I), I)


def channel_attention_fused(I_cat: Tensor, gate: ChannelGate) -> Tensor:
    """Per-channel weights ``[b, 3C, 1]`` in (0, 1) for the concatenated currents."""
    return gate.weights(I_cat)


def _neuron(asn: bool, channels: int, cfg: NeuronConfig) -> LIFNeuron:
    return AttentionSpikingNeuron(channels, cfg) if asn else LIFNeuron(cfg)


class Pathway(Module):
    def __init__(self, k, c_in, enc: EncoderConfig, neuron: NeuronConfig, bias, asn, rng):
        super().__init__()
        c1, c2 = enc.stage_channels
        self.pool_stride = enc.pool_stride
        self.conv1 = Conv1d(c_in, c1, k, 1, k // 2, bias, rng)
        self.bn1 = BatchNorm1d(c1)
        self.sn1 = _neuron(asn, c1, neuron)
        self.conv2 = Conv1d(c1, c2, k, enc.second_conv_stride, k // 2, bias, rng)
        self.bn2 = BatchNorm1d(c2)

    def stem(self, X: Tensor) -> Tensor:
        return self.bn1(self.conv1(X))

    def __call__(self, stem_current: Tensor) -> Tensor:
        s = self.sn1(stem_current)
        pooled = tc.avgpool1d(s, self.pool_stride, self.pool_stride)
        return self.bn2(self.conv2(pooled))


class Encoder(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        super().__init__()
        enc = cfg.encoder
        c2 = enc.stage_channels[1]
        self.kernel_sizes = enc.kernel_sizes
        self.paths = []
        for k in enc.kernel_sizes:
            p = Pathway(k, cfg.input_channels, enc, cfg.neuron, cfg.conv_bias, cfg.asn_sites == "all", rng)
            setattr(self, f"path{k}", p)
            self.paths.append(p)
        self.ca = ChannelGate(3 * c2) if enc.use_attention else None
        self.sn = _neuron(cfg.asn_sites != "none", c2, cfg.neuron)

    def stems(self, X: Tensor) -> list[Tensor]:
        return [p.stem(X) for p in self.paths]

    def fuse(self, currents: list[Tensor]) -> Tensor:
        if self.ca is not None:
            cat = tc.concat_channels(currents)
            weighted = tc.mul(channel_attention_fused(cat, self.ca), cat)
            currents = tc.split_channels(weighted, len(currents))
        total = currents[0]
        for c in currents[1:]:
            total = tc.add(total, c)
        return total

    def __call__(self, X: Tensor, stems: list[Tensor] | None = None) -> Tensor:
        stems = stems if stems is not None else self.stems(X)
        currents = [p(st) for p, st in zip(self.paths, stems)]
        return self.sn(self.fuse(currents))


class ResidualBlock(Module):
    def __init__(self, blk: ResidualBlockConfig, cfg: NetworkConfig, rng):
        super().__init__()
        c_in, c_out, st = blk.in_channels, blk.out_channels, blk.downsample_stride
        bias = cfg.conv_bias
        self.order = cfg.attention_order
        self.conv1 = Conv1d(c_in, c_out, 3, st, 1, bias, rng)
        self.bn1 = BatchNorm1d(c_out)
        self.sn1 = _neuron(cfg.asn_sites == "all", c_out, cfg.neuron)
        self.conv2 = Conv1d(c_out, c_out, 3, 1, 1, bias, rng)
        self.bn2 = BatchNorm1d(c_out)
        if blk.use_attention:
            self.ca = ChannelGate(c_out)
            self.sa = SpatialGate()
        else:
            self.ca = self.sa = None
        self.shortcut = Conv1d(c_in, c_out, 1, st, 0, bias, rng)
        self.bn_short = BatchNorm1d(c_out)
        self.sn = _neuron(cfg.asn_sites != "none", c_out, cfg.neuron)

    def residual_current(self, x: Tensor) -> Tensor:
        return self.bn2(self.conv2(self.sn1(self.bn1(self.conv1(x)))))

    def attend(self, I: Tensor) -> Tensor:
        if self.ca is None:
            return I
        if self.order == "ca-sa":
            return self.sa(self.ca(I))
        if self.order == "sa-ca":
            return self.ca(self.sa(I))
        return tc.mul(tc.mul(self.ca.weights(I), self.sa.weights(I)), I)

    def __call__(self, x: Tensor) -> Tensor:
        assert _is_binary(x.data), "residual block input must be binary spikes"
        I_res = self.attend(self.residual_current(x))
        I_short = self.bn_short(self.shortcut(x))
        return self.sn(tc.add(I_res, I_short))


class MRASNN(Module):
    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.blocks = []
        for i, blk in enumerate(cfg.blocks, start=1):
            b = ResidualBlock(blk, cfg, rng)
            setattr(self, f"block{i}", b)
            self.blocks.append(b)
        self.fc = Linear(cfg.feature_channels, cfg.num_classes, True, rng)

    def spiking_layers(self) -> "OrderedDict[str, LIFNeuron]":
        return OrderedDict((name, m) for name, m in self.modules() if isinstance(m, LIFNeuron))

    def feature_layers(self) -> list[str]:
        return ["encoder"] + [f"block{i}" for i in range(1, len(self.blocks) + 1)]

    def __call__(self, X, taps: dict | None = None) -> Tensor:
        """Logits for every timestep, shape ``[T, b, num_classes]``.

        Membranes start from zero. The same input is presented at each step,
        so the first conv + BN current of every pathway is computed once.
        ``taps`` (optional dict) receives per-timestep spike maps of the
        encoder and each block under their layer names.
        """
        X = X if isinstance(X, Tensor) else Tensor(X)
        cfg = self.cfg
        if X.ndim != 3 or X.shape[1] != cfg.input_channels:
            raise DimensionError(
                f"channel axis: expected [batch, {cfg.input_channels}, length], got {X.shape}"
            )
        self.reset_state()
        stems = self.encoder.stems(X)
        outs = []
        for _ in range(cfg.timesteps):
            s = self.encoder(X, stems)
            assert _is_binary(s.data), "encoder output must be binary spikes"
            if taps is not None:
                taps.setdefault("encoder", []).append(s.data)
            for i, blk in enumerate(self.blocks, start=1):
                s = blk(s)
                assert _is_binary(s.data), f"block{i} output must be binary spikes"
                if taps is not None:
                    taps.setdefault(f"block{i}", []).append(s.data)
            feat = tc.reshape(tc.mean(s, axis=2), (s.shape[0], s.shape[1]))
            outs.append(self.fc(feat))
        self.reset_state()
        return tc.stack(outs)


def build_network(cfg: NetworkConfig, seed: int = 0) -> MRASNN:
    return MRASNN(cfg, seed)


def dynamic_shapes(net: MRASNN, batch: int = 1) -> "OrderedDict[str, tuple[int, int]]":
    """Run one eval forward on zeros and record the observed activation shapes."""
    cfg = net.cfg
    X = np.zeros((batch, cfg.input_channels, cfg.input_length), dtype=tc.default_dtype())
    taps: dict = {}
    was = net.training
    net.eval()
    with tc.no_grad():
        logits = net(X, taps)
    net.train(was)
    out = OrderedDict((name, arr[0].shape[1:]) for name, arr in taps.items())
    out["logits"] = logits.shape
    return out


def count_parameters(net: Module) -> tuple[int, "OrderedDict[str, int]"]:
    """Total trainable parameters and a per-layer breakdown (layer path -> count)."""
    breakdown: OrderedDict[str, int] = OrderedDict()
    for path, p in net.named_parameters():
        layer = path.rsplit(".", 1)[0] if "." in path else ""
        breakdown[layer] = breakdown.get(layer, 0) + int(p.data.size)
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------- checkpoint

MAGIC = b"MRAS"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def _entries(net: Module):
    for path, p in net.named_parameters():
        yield path, p.data
    for path, b in net.named_buffers():
        yield path, b


def checkpoint_bytes(net: MRASNN) -> bytes:
    cfg_text = net.cfg.to_text().encode("utf-8")
    manifest = io.BytesIO()
    payload = io.BytesIO()
    entries = list(_entries(net))
    manifest.write(struct.pack("<I", len(entries)))
    for path, arr in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        key = path.encode("utf-8")
        manifest.write(struct.pack("<H", len(key)))
        manifest.write(key)
        manifest.write(struct.pack("<B", arr.ndim))
        manifest.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        manifest.write(struct.pack("<Q", payload.tell()))
        payload.write(raw)
    head = MAGIC + struct.pack("<II", FORMAT_VERSION, len(cfg_text)) + cfg_text
    return head + manifest.getvalue() + payload.getvalue()


def save_checkpoint(net: MRASNN, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(net))


def checkpoint_from_bytes(blob: bytes) -> MRASNN:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an MRAS checkpoint (bad magic)")
    try:
        version, n_cfg = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        if pos + n_cfg > len(blob):
            raise CheckpointError("truncated checkpoint: configuration text cut short")
        try:
            cfg = NetworkConfig.from_text(blob[pos : pos + n_cfg].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CheckpointError(f"corrupt configuration text: {exc}") from None
        pos += n_cfg
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        manifest = []
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            key = blob[pos : pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            manifest.append((key, shape, offset))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from None
    payload = blob[pos:]
    net = MRASNN(cfg)
    targets = dict(_entries(net))
    if set(targets) != {k for k, _, _ in manifest}:
        raise CheckpointError("checkpoint tensors do not match the stored configuration")
    for key, shape, offset in manifest:
        size = int(np.prod(shape)) * 4
        if offset + size > len(payload):
            raise CheckpointError(f"truncated payload for {key}")
        arr = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).reshape(shape)
        dst = targets[key]
        if dst.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {dst.shape}")
        dst[...] = arr
    return net


def load_checkpoint(path) -> MRASNN:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
