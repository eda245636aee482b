import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrasnn import architecture as arch
from mrasnn import energy as e
from mrasnn.energy import EnergyModel, LayerStats, NoStatsError, OpCount

# (MAC, AC, published pJ); the two MRA rows are the acceptance vectors, the
# others are rows whose published totals follow exactly from their counts
TABLE_ROWS = [
    (696_458_752, 524_288, 3_204_182_118.4),
    (5_031_040, 25_072_983, 45_708_468.7),
    (698_547_712, 524_288, 3_213_791_334.4),
    (132_467_712, 0, 609_351_475.2),
    (276_827_904, 262_144, 1_273_644_288.0),
    (51_906_262, 98_304, 238_857_278.8),
    (268_023_681, 131_072, 1_233_026_897.4),
]


def _sources(cfg):
    return sorted({s.source for s in arch.layer_plan(cfg)} - {"input"})


def uniform_phis(cfg, phi):
    return {name: phi for name in _sources(cfg)}


@pytest.mark.parametrize("mac,ac,pj", TABLE_ROWS)
def test_energy_total_published_rows(mac, ac, pj):
    assert abs(e.energy_total(OpCount(mac, ac)) - pj) < 0.1


def test_energy_zero_and_custom_model():
    assert e.energy_total(OpCount()) == 0.0
    assert e.energy_total(OpCount(2, 3), EnergyModel(e_ac=1.0, e_mac=10.0)) == 23.0
    with pytest.raises(ValueError):
        EnergyModel(e_ac=0.0)
    with pytest.raises(ValueError):
        OpCount(-1, 0)


def test_flops_examples():
    assert e.flops_conv(3, 1024, 1, 32) == 98_304
    assert e.flops_conv(1, 64, 256, 512) == 64 * 256 * 512
    assert e.flops_fc(512, 15) == 7_680
    assert e.flops_fc(1, 1) == 1 and e.flops_fc(0, 15) == 0


def test_snn_layer_count_examples():
    assert e.snn_layer_count(98_304, 4, 1.0, True) == OpCount(mac=393_216)
    assert e.snn_layer_count(10**6, 4, 0.0, False) == OpCount()
    assert e.snn_layer_count(10**6, 4, 0.05, False).ac == pytest.approx(200_000)
    # spiking first conv with 64 filters over 1024 samples, as in the published SNN rows
    assert e.snn_layer_count(e.flops_conv(3, 1024, 1, 64), 4, 1.0, True).mac == 786_432
    with pytest.raises(ValueError):
        e.snn_layer_count(1, 1, 1.5, False)


def test_counts_stay_fractional():
    c = e.snn_layer_count(7, 1, 0.1, False)
    assert c.ac == pytest.approx(0.7)


def test_overhead_examples():
    cfg = arch.build_preset("mfpt")
    lines = {ln.site: ln for ln in e.overhead_lines(cfg)}
    assert lines["block1.add"].over(4).ac == 256 * 128 * 4 == 131_072
    assert e.attention_terms(192, 256, "ca")["conv"] * 4 == 5 * 192 * 4 == 3_840
    assert lines["encoder.fusion"].over(4).ac == 2 * 64 * 256 * 4
    assert lines["encoder.sn.charge"].over(1).ac == 64 * 256
    assert lines["encoder.ca"].per_step.mac == sum(e.attention_terms(192, 256, "ca").values())


def test_disabling_attention_zeroes_attention_macs():
    cfg = arch.build_preset("mfpt")
    cfg.encoder.use_attention = False
    for b in cfg.blocks:
        b.use_attention = False
    cfg.asn_sites = "none"
    assert all(ln.kind != "attention" for ln in e.overhead_lines(cfg))
    assert e.overhead_counts(cfg).mac == 0
    with_att = arch.build_preset("mfpt")
    assert e.overhead_counts(with_att).ac == e.overhead_counts(cfg).ac


def test_attention_terms_unknown_kind():
    with pytest.raises(ValueError):
        e.attention_terms(4, 4, "xyz")


def test_report_is_sum_of_lines():
    cfg = arch.build_preset("mfpt")
    rep = e.profile(cfg, uniform_phis(cfg, 0.13))
    tot = OpCount()
    for ln in rep.lines:
        tot = tot + ln.count
    assert rep.total == tot
    assert rep.energy == pytest.approx(e.energy_total(tot), rel=1e-12)
    first = [ln for ln in rep.lines if ln.layer.endswith("conv1") and ln.layer.startswith("encoder")]
    assert all(ln.count.ac == 0 and ln.phi == 1.0 for ln in first)


def test_fc_uses_last_block_rate():
    cfg = arch.build_preset("synthetic")
    phis = uniform_phis(cfg, 0.2)
    phis["block2.sn"] = 0.5
    rep = e.profile(cfg, phis)
    fc = next(ln for ln in rep.lines if ln.layer == "fc")
    assert fc.phi == 0.5
    assert fc.count.ac == pytest.approx(4 * 64 * 3 * 0.5)


@pytest.mark.parametrize("name", ["mfpt", "synthetic"])
def test_timestep_linearity(name):
    cfg = arch.build_preset(name)
    phis = uniform_phis(cfg, 0.17)
    reps = {T: e.profile(cfg, phis, T) for T in (1, 2, 4)}
    for i, ln in enumerate(reps[1].lines):
        for T in (2, 4):
            other = reps[T].lines[i]
            assert other.count.mac == T * ln.count.mac
            assert other.count.ac == T * ln.count.ac
    assert reps[4].energy == pytest.approx(4 * reps[1].energy, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8), st.integers(0, 7), st.floats(0, 1))
def test_energy_monotone_in_rates(rates, which, bump):
    cfg = arch.build_preset("mfpt")
    names = _sources(cfg)
    phis = dict(zip(names, rates))
    base = e.profile(cfg, phis).energy
    phis[names[which]] = min(1.0, phis[names[which]] + bump)
    assert e.profile(cfg, phis).energy >= base


def test_missing_rate_is_no_stats():
    cfg = arch.build_preset("synthetic")
    with pytest.raises(NoStatsError, match="encoder.path3.sn1"):
        e.profile(cfg, {"encoder.sn": 0.1})


# ---------------------------------------------------------------- spike statistics


def test_stats_of_examples():
    assert e.stats_of(np.zeros((2, 3))).lasar == 0.0
    assert e.stats_of(np.ones((2, 3))).lasar == 1.0
    r = (np.random.default_rng(0).random((4, 5, 6)) < 0.3).astype(np.float32)
    assert e.stats_of(r).lasar == pytest.approx(r.mean())
    with pytest.raises(NoStatsError):
        _ = LayerStats().lasar


def test_stats_merge_is_additive():
    a, b = LayerStats(3, 10), LayerStats(5, 30)
    assert a.merge(b) == LayerStats(8, 40) == b.merge(a)


def test_record_spikes_counts_sites(synth_split):
    _, ev = synth_split
    net = arch.MRASNN(arch.build_preset("synthetic"), seed=0)
    sub = ev.subset(np.arange(6))
    from mrasnn.training import evaluate

    with e.record_spikes(net) as stats:
        evaluate(net, sub, batch_size=4)
    shapes = arch.static_shapes(net.cfg)
    c, s = shapes["block1"]
    assert stats["block1.sn"].neuron_sites == 6 * 4 * c * s
    c, s = shapes["encoder.path5.sn1"]
    assert stats["encoder.path5.sn1"].neuron_sites == 6 * 4 * c * s
    assert all(0 <= st_.lasar <= 1 for st_ in stats.values())
    assert not any(m.recording for m in net.spiking_layers().values())


def test_energy_report_requires_stats():
    net = arch.MRASNN(arch.build_preset("synthetic"))
    with pytest.raises(NoStatsError):
        e.energy_report(net)
    with pytest.raises(NoStatsError):
        e.energy_report(net, stats={"encoder.sn": LayerStats()})


def test_noise_changes_spike_energy(trained_t4, synth_split):
    from mrasnn.data import add_noise_set

    _, ev = synth_split
    sub = ev.subset(np.arange(0, len(ev), 3))
    clean = e.energy_report(trained_t4.net, sub)
    noisy = e.energy_report(trained_t4.net, add_noise_set(sub, -5.0, seed=0))
    assert clean.total.mac == noisy.total.mac  # first layer and attention do not depend on spikes
    assert clean.total.ac != noisy.total.ac


def test_report_formats():
    cfg = arch.build_preset("synthetic")
    rep = e.profile(cfg, uniform_phis(cfg, 0.25))
    csv_text = rep.to_csv().splitlines()
    assert csv_text[0] == "layer,type,static_flops,phi,mac,ac,pj"
    assert csv_text[-1].startswith("total,total,")
    assert len(csv_text) == len(rep.lines) + 2
    text = rep.to_text().splitlines()
    assert text[0].split() == ["layer", "type", "phi", "MAC", "AC", "Energy(pJ)"]
    assert text[-1].startswith("total")
