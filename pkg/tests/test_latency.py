import pytest
from hypothesis import given, strategies as st

from smofisim.errors import ConfigurationError
from smofisim.latency import (
    ClientProfile, ServerProfile, batch_latency, batch_latency_raw, fedavg_latency, read_profiles, round_latency,
    sample_profiles, write_profiles,
)
from smofisim.split import SplitModel
from smofisim.tensor import mlp


def test_worked_example():
    lat = batch_latency_raw(ClientProfile(0.05, 1000.0), 0.0005, 0.2, 64.0, 32)
    # 3*32*0.05*0.2, 3*32*0.0005*0.8, 2*32*64/1000
    assert lat.astuple() == (0.96, 0.0384, 4.096, 5.0944)


def test_all_compute_on_server_when_ratio_zero():
    model = SplitModel(mlp(4, [8], 2), 0)
    server = ServerProfile(100, 0.001)
    lat = batch_latency(ClientProfile(0.05, 1000.0), server, model, 16)
    assert lat.t_d == 0.0 and lat.t_s > 0


def test_bandwidth_limit():
    vals = [batch_latency_raw(ClientProfile(0.01, b), 1e-4, 0.3, 1.0, 8).t_comm for b in (1e3, 1e6, 1e12)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-8


def test_profiles_sampling():
    same = sample_profiles(5, 3, (0.02, 0.02), (500.0, 500.0))
    assert all(p == ClientProfile(0.02, 500.0) for p in same)
    assert sample_profiles(7, 11) == sample_profiles(7, 11)
    ps = sample_profiles(9, 1)
    server = ServerProfile.from_clients(ps, kappa=100)
    assert server.p_s == pytest.approx(sum(p.p_d for p in ps) / 9 / 100, rel=1e-15)
    assert all(0.001 <= p.p_d <= 0.1 and 1000 <= p.b <= 20000 for p in ps)
    with pytest.raises(ConfigurationError):
        sample_profiles(3, 0, (0.1, 0.01))


@given(
    st.floats(1e-4, 1), st.floats(1e-6, 1e-2), st.floats(0, 1), st.floats(0.01, 100), st.floats(10, 1e5),
    st.integers(1, 128),
)
def test_latency_monotone(p_d, p_s, ratio, s_kb, b, B):
    base = batch_latency_raw(ClientProfile(p_d, b), p_s, ratio, s_kb, B)
    assert min(base.t_d, base.t_s, base.t_comm) >= 0
    assert batch_latency_raw(ClientProfile(p_d, b), p_s, ratio, s_kb, B + 1).total >= base.total
    assert batch_latency_raw(ClientProfile(p_d * 2, b), p_s, ratio, s_kb, B).total >= base.total
    assert batch_latency_raw(ClientProfile(p_d, b), p_s * 2, ratio, s_kb, B).total >= base.total
    assert batch_latency_raw(ClientProfile(p_d, b), p_s, ratio, s_kb * 2, B).total >= base.total
    assert batch_latency_raw(ClientProfile(p_d, b * 2), p_s, ratio, s_kb, B).total <= base.total


def _setup():
    model = SplitModel(mlp(16, [32, 32], 10), 1)
    profiles = {0: ClientProfile(0.01, 2000.0), 1: ClientProfile(0.05, 500.0), 2: ClientProfile(0.002, 9000.0)}
    server = ServerProfile.from_clients(list(profiles.values()))
    return model, profiles, server


def test_round_rules_single_client_agree():
    model, profiles, server = _setup()
    par = round_latency("smofi", {1: 7}, profiles, server, model, 16)
    seq = round_latency("sflv2", {1: 7}, profiles, server, model, 16)
    assert par.seconds == seq.seconds


def test_round_rules_max_vs_sum():
    model, profiles, server = _setup()
    steps = {0: 10, 1: 4, 2: 6}
    per = {c: T * batch_latency(profiles[c], server, model, 16).total for c, T in steps.items()}
    par = round_latency("smofi", steps, profiles, server, model, 16)
    seq = round_latency("sflv2", steps, profiles, server, model, 16)
    assert par.seconds == max(per.values())
    assert seq.seconds == pytest.approx(sum(per.values()), rel=1e-15)
    assert par.seconds <= seq.seconds
    assert par.t_d + par.t_s + par.t_comm == pytest.approx(par.seconds, rel=1e-15)


def test_fedavg_costing():
    model, profiles, server = _setup()
    lat = fedavg_latency(profiles[0], model, 16, 5)
    assert lat.t_d == 5 * 3 * 16 * 0.01
    assert lat.t_comm == 2 * model.param_count * 8 / 1024 / 2000.0
    r = round_latency("fedavg", {0: 5}, profiles, server, model, 16)
    assert r.seconds == lat.total


def test_profiles_csv_round_trip(tmp_path):
    ps = sample_profiles(4, 2)
    write_profiles(ps, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "client_id,p_d_s_per_frame,b_kbps"
    assert read_profiles(tmp_path / "p.csv") == ps
