"""Spike-activity-driven operation counting and energy estimation.

Weight layers of the spiking network cost ``T * FL * phi`` operations, where
``FL`` is the dense FLOP count of the layer and ``phi`` the average spike
rate of the layer feeding it. The first layer sees real-valued input
(``phi = 1``) and is charged as MAC; every other weight layer is charged as
AC. Element-wise additions are AC; attention arithmetic is MAC.

Counts are per input sample and kept as reals; only display rounds them.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .architecture import MRASNN, NetworkConfig, layer_plan, static_shapes
from .neurons import SPATIAL_KERNEL, attention_kernel_size


class NoStatsError(RuntimeError):
    """Energy requested before any spikes were recorded."""


@dataclass
class OpCount:
    mac: float = 0.0
    ac: float = 0.0

    def __post_init__(self):
        if self.mac < 0 or self.ac < 0:
            raise ValueError("operation counts are non-negative")

    def __add__(self, other: "OpCount") -> "OpCount":
        return OpCount(self.mac + other.mac, self.ac + other.ac)


@dataclass(frozen=True)
class EnergyModel:
    e_ac: float = 0.9  # pJ per accumulate
    e_mac: float = 4.6  # pJ per multiply-accumulate

    def __post_init__(self):
        if not (self.e_ac > 0 and self.e_mac > 0):
            raise ValueError("energy constants must be positive")


@dataclass
class LayerStats:
    spikes_fired: int = 0
    neuron_sites: int = 0

    @property
    def lasar(self) -> float:
        if self.neuron_sites == 0:
            raise NoStatsError("no neuron sites recorded for this layer")
        return self.spikes_fired / self.neuron_sites

    def merge(self, other: "LayerStats") -> "LayerStats":
        return LayerStats(self.spikes_fired + other.spikes_fired, self.neuron_sites + other.neuron_sites)


def flops_conv(k: int, h_out: int, c_in: int, c_out: int) -> int:
    return k * h_out * c_in * c_out


def flops_fc(i: int, o: int) -> int:
    return i * o


def snn_layer_count(static_fl: float, T: int, phi_prev: float, first_layer: bool) -> OpCount:
    if not 0 <= phi_prev <= 1:
        raise ValueError(f"spike rate must lie in [0, 1], got {phi_prev}")
    n = T * static_fl * phi_prev
    return OpCount(mac=n) if first_layer else OpCount(ac=n)


def energy_total(counts: OpCount, model: EnergyModel = EnergyModel()) -> float:
    """Energy in pJ: ``mac * e_mac + ac * e_ac``."""
    return math.fsum((counts.mac * model.e_mac, counts.ac * model.e_ac))


@dataclass
class OverheadLine:
    site: str
    kind: str  # "add" | "charge" | "pool" | "attention"
    per_step: OpCount

    def over(self, T: int) -> OpCount:
        return OpCount(self.per_step.mac * T, self.per_step.ac * T)


def attention_terms(c: int, s: int, kind: str) -> dict[str, int]:
    """Per-timestep MACs of one attention pipeline on a ``[c, s]`` current.

    ``kind`` is ``"ca"`` (channel gate), ``"sa"`` (spatial gate) or ``"asn"``
    (the joint channel x spatial map of an attention spiking neuron).
    """
    k_c, k_s = attention_kernel_size(c), SPATIAL_KERNEL
    if kind == "ca":
        return {"mean": c * s, "conv": k_c * c, "sigmoid": c, "weight": c * s}
    if kind == "sa":
        return {"mean": c * s, "conv": k_s * s, "sigmoid": s, "weight": c * s}
    if kind == "asn":
        return {"mean": 2 * c * s, "conv": k_c * c + k_s * s, "product": c * s, "sigmoid": c * s,
                "weight": c * s}
    raise ValueError(f"unknown attention kind {kind!r}")


def _attention(site: str, c: int, s: int, kind: str) -> OverheadLine:
    return OverheadLine(site, "attention", OpCount(mac=sum(attention_terms(c, s, kind).values())))


def overhead_lines(cfg: NetworkConfig) -> list[OverheadLine]:
    """Per-timestep additions and attention arithmetic, itemised by site."""
    shapes = static_shapes(cfg)
    enc = cfg.encoder
    lines: list[OverheadLine] = []
    neurons: list[tuple[str, tuple[int, int], bool]] = []
    for k in enc.kernel_sizes:
        c1, s_pool = shapes[f"encoder.path{k}.pool"]
        lines.append(OverheadLine(f"encoder.path{k}.pool", "pool", OpCount(ac=c1 * s_pool * (enc.pool_stride - 1))))
        neurons.append((f"encoder.path{k}.sn1", shapes[f"encoder.path{k}.sn1"], cfg.asn_sites == "all"))
    c_cat, s_enc = shapes["encoder.fused"]
    c2 = enc.stage_channels[1]
    if enc.use_attention:
        lines.append(_attention("encoder.ca", c_cat, s_enc, "ca"))
    lines.append(OverheadLine("encoder.fusion", "add", OpCount(ac=(len(enc.kernel_sizes) - 1) * c2 * s_enc)))
    neurons.append(("encoder.sn", shapes["encoder"], cfg.asn_sites != "none"))
    for i, blk in enumerate(cfg.blocks, start=1):
        c, s = shapes[f"block{i}"]
        neurons.append((f"block{i}.sn1", shapes[f"block{i}.sn1"], cfg.asn_sites == "all"))
        if blk.use_attention:
            # parallel order swaps one weighting pass for the broadcast product: same count
            lines.append(_attention(f"block{i}.ca", c, s, "ca"))
            lines.append(_attention(f"block{i}.sa", c, s, "sa"))
        lines.append(OverheadLine(f"block{i}.add", "add", OpCount(ac=c * s)))
        neurons.append((f"block{i}.sn", shapes[f"block{i}"], cfg.asn_sites != "none"))
    for name, (c, s), asn in neurons:
        if asn:
            lines.append(_attention(f"{name}.asn", c, s, "asn"))
        lines.append(OverheadLine(f"{name}.charge", "charge", OpCount(ac=c * s)))
    return lines


def overhead_counts(cfg: NetworkConfig, T: int | None = None) -> OpCount:
    T = cfg.timesteps if T is None else T
    total = OpCount()
    for line in overhead_lines(cfg):
        total = total + line.over(T)
    return total


@contextlib.contextmanager
def record_spikes(net: MRASNN):
    """Accumulate per-layer spike totals during the enclosed forward passes.

    Yields a dict that is filled with :class:`LayerStats` on exit.
    """
    layers = net.spiking_layers()
    for m in layers.values():
        m.recording = True
        m.spikes_fired = 0
        m.neuron_sites = 0
    stats: dict[str, LayerStats] = {}
    try:
        yield stats
    finally:
        for name, m in layers.items():
            m.recording = False
            stats[name] = LayerStats(m.spikes_fired, m.neuron_sites)


def stats_of(spikes) -> LayerStats:
    """LayerStats of a raw binary spike array (any shape)."""
    a = np.asarray(spikes)
    return LayerStats(int(a.sum()), int(a.size))


@dataclass
class ReportLine:
    layer: str
    kind: str
    static_flops: float
    phi: float
    count: OpCount

    def energy(self, model: EnergyModel) -> float:
        return energy_total(self.count, model)


@dataclass
class EnergyReport:
    lines: list[ReportLine]
    model: EnergyModel = field(default_factory=EnergyModel)
    timesteps: int = 4

    @property
    def total(self) -> OpCount:
        tot = OpCount()
        for ln in self.lines:
            tot = tot + ln.count
        return tot

    @property
    def energy(self) -> float:
        return math.fsum(ln.energy(self.model) for ln in self.lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "type", "static_flops", "phi", "mac", "ac", "pj"])
        for ln in self.lines:
            w.writerow([ln.layer, ln.kind, _num(ln.static_flops), f"{ln.phi:.6f}", _num(ln.count.mac),
                        _num(ln.count.ac), f"{ln.energy(self.model):.1f}"])
        tot = self.total
        w.writerow(["total", "total", "", "", _num(tot.mac), _num(tot.ac), f"{energy_total(tot, self.model):.1f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        rows = [("layer", "type", "phi", "MAC", "AC", "Energy(pJ)")]
        for ln in self.lines:
            rows.append((ln.layer, ln.kind, f"{ln.phi:.4f}", f"{ln.count.mac:,.0f}", f"{ln.count.ac:,.0f}",
                         f"{ln.energy(self.model):,.1f}"))
        tot = self.total
        rows.append(("total", "", "", f"{tot.mac:,.0f}", f"{tot.ac:,.0f}", f"{energy_total(tot, self.model):,.1f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        out = []
        for j, r in enumerate(rows):
            out.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
            if j == 0:
                out.append("-" * len(out[0]))
        return "\n".join(out) + "\n"


def _num(x: float) -> str:
    return f"{x:.0f}" if float(x).is_integer() else f"{x:.4f}"


def profile(cfg: NetworkConfig, phis: dict[str, float], T: int | None = None,
            model: EnergyModel = EnergyModel()) -> EnergyReport:
    """Combine static FLOPs with a spike-rate trace (layer name -> LASAR)."""
    T = cfg.timesteps if T is None else T
    lines = []
    for spec in layer_plan(cfg):
        fl = flops_conv(spec.kernel, spec.h_out, spec.c_in, spec.c_out) if spec.kind == "conv" \
            else flops_fc(spec.c_in, spec.c_out)
        first = spec.source == "input"
        if first:
            phi = 1.0
        else:
            if spec.source not in phis:
                raise NoStatsError(f"no spike rate recorded for {spec.source}")
            phi = phis[spec.source]
        lines.append(ReportLine(spec.name, spec.kind, fl, phi, snn_layer_count(fl, T, phi, first)))
    for ov in overhead_lines(cfg):
        lines.append(ReportLine(ov.site, ov.kind, ov.per_step.mac + ov.per_step.ac, 1.0, ov.over(T)))
    return EnergyReport(lines, model, T)


def energy_report(net: MRASNN, evalset=None, model: EnergyModel = EnergyModel(),
                  stats: dict[str, LayerStats] | None = None, batch_size: int = 64) -> EnergyReport:
    """Run an evaluation pass with spike recording and profile the result.

    Pass ``stats`` to reuse an earlier recording instead of running ``evalset``.
    """
    if stats is None:
        if evalset is None:
            raise NoStatsError("no spike statistics: run a forward pass or pass an evaluation set")
        from .training import evaluate

        with record_spikes(net) as stats:
            evaluate(net, evalset, batch_size=batch_size)
    if not stats or all(s.neuron_sites == 0 for s in stats.values()):
        raise NoStatsError("no spike statistics recorded")
    phis = {name: s.lasar for name, s in stats.items() if s.neuron_sites}
    return profile(net.cfg, phis, net.cfg.timesteps, model)
