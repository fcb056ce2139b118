import math

import numpy as np
import pytest

from wesar_lab import telemetry as T


def test_update_ratio_frozen():
    assert T.update_ratio(np.array([[0.3, 0.4]]), np.array([[3.0, 4.0]])) == pytest.approx(0.1, abs=1e-16)


def test_update_ratio_zero_weight_is_inf():
    with pytest.warns(RuntimeWarning):
        assert T.update_ratio(np.ones(2), np.zeros(2)) == math.inf
    with pytest.raises(ValueError):
        T.update_ratio(np.ones(2), np.ones(3))


def test_spike_fires_after_arming_only():
    det = T.SpikeDetector(window=3, delta=0.5, armed_after=2)
    losses = [5.0, 6.0, 4.0, 4.2, 4.4, 5.1, 4.0]
    events = T.detect_spike(losses, det)
    assert [(e.step, e.trailing_min) for e in events] == [(6, 4.0)]
    assert T.detect_spike([5.0, 6.0], det) == []


def test_spike_window_slides():
    det = T.SpikeDetector(window=2, delta=0.5, armed_after=0)
    # step 4 sees only steps 2 and 3, so the early 1.0 no longer counts
    assert [e.step for e in T.detect_spike([1.0, 3.0, 3.0, 3.4], det)] == [2, 3]


def test_flat_losses_never_spike():
    assert T.detect_spike([2.0] * 50, T.SpikeDetector(window=10, delta=0.0, armed_after=0)) == []


def record(step, ratios):
    rec = T.TelemetryRecord(step=step, lr=1e-3 * step, loss=5.0 - 0.1 * step, tokens_seen=100 * step)
    for name, r in ratios.items():
        rec.tensors[name] = T.TensorStats(1.0 / 3.0, 2.0, r, None if name.startswith("gamma") else 1.5)
    return rec


def test_csv_round_trip_and_format(tmp_path):
    recs = [record(1, {"layer0.W_u": 0.01, "gamma_LN_final": 0.02}), record(2, {"layer0.W_u": 0.03, "gamma_LN_final": 0.04})]
    path = tmp_path / "t.csv"
    T.write_csv(recs, path)
    text = path.read_bytes().decode()
    assert "\r" not in text
    lines = text.splitlines()
    assert lines[0].startswith("step,lr,loss,tokens_seen,layer0.W_u.param_norm,layer0.W_u.grad_norm")
    assert lines[1].split(",")[4] == "0.333333333"
    assert lines[1].endswith(",")
    names, back = T.read_csv(path)
    assert names == ["layer0.W_u", "gamma_LN_final"]
    assert back[1].tensors["layer0.W_u"].update_ratio == 0.03
    assert back[0].tensors["gamma_LN_final"].gate is None


def test_csv_rejects_inconsistent_records(tmp_path):
    with pytest.raises(ValueError):
        T.write_csv([record(1, {"a": 1.0}), record(2, {"b": 1.0})], tmp_path / "x.csv")


def test_ratio_spread_is_per_layer():
    rec = record(1, {"layer0.W_u": 0.01, "layer0.W_d": 0.015, "layer1.W_u": 0.1, "layer1.W_d": 0.1, "W_e": 9.0})
    assert T.ratio_spread(rec) == pytest.approx(1.5)


def test_spike_sidecar(tmp_path):
    path = tmp_path / "spikes.txt"
    T.write_spikes([T.SpikeEvent(7, 3.25, 2.5)], path)
    assert path.read_text() == "step,loss,trailing_min\n7,3.25,2.5\n"
