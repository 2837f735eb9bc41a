import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urllc_la import olla
from urllc_la.phy import ACK, NACK, FblParams, McsTable, ideal_rate, transmit


def test_ack_raises_nack_lowers():
    s = olla.OllaState(2, step=0.1, target=0.01)
    up = s.record(0, ACK)
    assert up == pytest.approx(0.1 * 0.01 / 0.99)
    down = s.record(1, NACK)
    assert down == pytest.approx(-0.1)


def test_stationary_when_nack_fraction_hits_target():
    # one NACK per 1/target feedbacks leaves the offset where it started
    s = olla.OllaState(1, step=0.09, target=1e-3)
    for _ in range(999):
        s.record(0, ACK)
    s.record(0, NACK)
    assert s.delta[0] == pytest.approx(0.0, abs=1e-12)


def test_clamped():
    s = olla.OllaState(1, step=1.0, target=0.5, lower=-2.0, upper=1.0)
    for _ in range(10):
        s.record(0, NACK)
    assert s.delta[0] == -2.0
    for _ in range(10):
        s.record(0, ACK)
    assert s.delta[0] == 1.0


def test_functional_update_does_not_mutate():
    s = olla.OllaState(3)
    t = olla.update(s, 1, NACK)
    assert s.delta[1] == 0.0 and t.delta[1] < 0


def test_apply_continuous_and_discrete():
    assert olla.apply(1.0, -0.25) == 0.75
    assert olla.apply(0.1, -0.5) == 0.0
    table = McsTable.nr_table3()
    r = olla.apply(2.0, 0.1, table)
    assert r in table.rates and r <= 2.1


def test_invalid_parameters():
    with pytest.raises(ValueError):
        olla.OllaState(1, step=0.0)
    with pytest.raises(ValueError):
        olla.OllaState(1, target=1.0)


@given(st.lists(st.sampled_from([ACK, NACK]), min_size=1, max_size=200))
def test_offset_is_feedback_count_formula(feedbacks):
    s = olla.OllaState(1, step=0.05, target=0.1, lower=-1e9, upper=1e9)
    for f in feedbacks:
        s.record(0, f)
    n_nack = sum(f == NACK for f in feedbacks)
    n_ack = len(feedbacks) - n_nack
    expected = 0.05 * (n_ack * 0.1 / 0.9 - n_nack)
    assert s.delta[0] == pytest.approx(expected, abs=1e-9)


def nack_fraction_static_channel(slots=100_000, excess=1e-3):
    fbl = FblParams()
    snr = 5.0
    base = ideal_rate(snr, fbl.bler_threshold, fbl.blocklength) + excess
    s = olla.OllaState(1, step=0.09, target=fbl.bler_threshold)
    nacks = 0
    for _ in range(slots):
        fb = transmit(snr, olla.apply(base, s.delta[0]), fbl).feedback
        s.record(0, fb)
        nacks += fb == NACK
    return nacks / slots


def test_fixed_point_static_channel():
    frac = nack_fraction_static_channel()
    assert 0.5e-3 <= frac <= 2e-3
