"""Leaky integrate-and-fire neurons and the attention spiking neuron.

A neuron step charges ``H = (1 - 1/tau) * U_prev + I``, fires ``S = [H >= theta]``
and soft-resets ``U = H - S * theta``. The attention spiking neuron first gates
its input current with a channel x spatial attention map computed from the
current itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .layers import Module
from .tensor import DimensionError, ParameterError, Tensor


@dataclass(frozen=True)
class NeuronConfig:
    tau: float = 2.0
    theta: float = 1.0
    a: float = 1.0
    reset: str = "soft"

    def __post_init__(self):
        if not self.tau > 1:
            raise ParameterError(f"tau must exceed 1, got {self.tau}")
        if not self.theta > 0:
            raise ParameterError(f"theta must be positive, got {self.theta}")
        if not self.a > 0:
            raise ParameterError(f"surrogate width a must be positive, got {self.a}")
        if self.reset != "soft":
            raise ParameterError("only soft reset is supported")

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class MembraneState:
    U: Tensor

    @classmethod
    def zeros(cls, shape) -> "MembraneState":
        return cls(Tensor(np.zeros(shape, dtype=tc.default_dtype())))


def charge(state: MembraneState, I, cfg: NeuronConfig) -> Tensor:
    """Membrane potential before firing."""
    I = I if isinstance(I, Tensor) else Tensor(I)
    if state.U.shape != I.shape:
        raise DimensionError(f"membrane shape {state.U.shape} != current shape {I.shape}")
    return tc.add(tc.scale(state.U, cfg.leak), I)


def lif_step(state: MembraneState, I: Tensor, cfg: NeuronConfig) -> tuple[Tensor, MembraneState]:
    H = charge(state, I, cfg)
    S = tc.heaviside_surrogate(H, cfg.theta, cfg.a)
    U = tc.sub(H, tc.scale(S, cfg.theta))
    return S, MembraneState(U)


def attention_kernel_size(c: int) -> int:
    """Nearest odd kernel to ``log2(c)/2 + 1/2``; ties at half-integers round down.

    >>> attention_kernel_size(64), attention_kernel_size(256)
    (3, 5)
    """
    if c < 1:
        raise ValueError("channel count must be >= 1")
    t = int(math.log2(c) / 2 + 0.5)
    return t if t % 2 else t + 1


SPATIAL_KERNEL = 7


@dataclass
class AttentionParams:
    w_c: Tensor  # [1, 1, k_c]
    w_s: Tensor  # [1, 1, k_s]

    @classmethod
    def for_channels(cls, c: int, k_s: int = SPATIAL_KERNEL, init: str = "neutral") -> "AttentionParams":
        k_c = attention_kernel_size(c)
        w_c = np.zeros((1, 1, k_c), dtype=tc.default_dtype())
        w_s = np.zeros((1, 1, k_s), dtype=tc.default_dtype())
        if init == "neutral":
            # identity channel tap keeps w = 0.5 initially while leaving the
            # spatial kernel a nonzero gradient (both-zero is a saddle)
            w_c[0, 0, k_c // 2] = 1.0
        elif init != "zeros":
            raise ValueError(f"unknown attention init {init!r}")
        return cls(Tensor(w_c, requires_grad=True), Tensor(w_s, requires_grad=True))

    @property
    def count(self) -> int:
        return self.w_c.data.size + self.w_s.data.size


def channel_scores(I: Tensor, w_c: Tensor) -> Tensor:
    """Per-channel attention logits ``[b, c, 1]`` from the spatial mean."""
    k = w_c.shape[-1]
    avg = tc.transpose_last(tc.mean(I, axis=2))  # [b, 1, c]
    return tc.transpose_last(tc.conv1d(avg, w_c, None, 1, k // 2))


def spatial_scores(I: Tensor, w_s: Tensor) -> Tensor:
    """Per-position attention logits ``[b, 1, s]`` from the channel mean."""
    k = w_s.shape[-1]
    return tc.conv1d(tc.mean(I, axis=1), w_s, None, 1, k // 2)


def attention_weights(I: Tensor, params: AttentionParams) -> Tensor:
    return tc.sigmoid(tc.mul(channel_scores(I, params.w_c), spatial_scores(I, params.w_s)))


def attention_filter(I: Tensor, params: AttentionParams) -> Tensor:
    if I.ndim != 3:
        raise DimensionError(f"current must be [batch, channels, length], got {I.shape}")
    return tc.mul(attention_weights(I, params), I)


def asn_step(state: MembraneState, I: Tensor, cfg: NeuronConfig, params: AttentionParams):
    return lif_step(state, attention_filter(I, params), cfg)


class LIFNeuron(Module):
    """Stateful spiking layer; the membrane persists until :meth:`reset_state`."""

    def __init__(self, cfg: NeuronConfig | None = None):
        super().__init__()
        self.cfg = cfg or NeuronConfig()
        self.state: MembraneState | None = None
        self.recording = False
        self.spikes_fired = 0
        self.neuron_sites = 0

    def _reset_membrane(self) -> None:
        self.state = None

    def filter(self, I: Tensor) -> Tensor:
        return I

    def __call__(self, I: Tensor) -> Tensor:
        if self.state is None:
            self.state = MembraneState.zeros(I.shape)
        S, self.state = lif_step(self.state, self.filter(I), self.cfg)
        if self.recording:
            self.spikes_fired += int(S.data.sum())
            self.neuron_sites += S.data.size
        return S


class AttentionSpikingNeuron(LIFNeuron):
    def __init__(self, channels: int, cfg: NeuronConfig | None = None, k_s: int = SPATIAL_KERNEL,
                 init: str = "neutral"):
        super().__init__(cfg)
        self.channels = channels
        params = AttentionParams.for_channels(channels, k_s, init)
        self.add_param("w_c", params.w_c.data)
        self.add_param("w_s", params.w_s.data)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_c, self.w_s)

    def filter(self, I: Tensor) -> Tensor:
        return attention_filter(I, self.params)
