import importlib.util
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenvc.bitrate import (MalformedPacket, SplitMix64, TargetUnreachable, apply_self_drop,
                             drop_ratio_for_target, frame_bitrate, packet_bytes, plan_frame, prng_next,
                             recover_survivor_positions, select_drops)
from tokenvc.codec import FULL_GEOMETRY, PatchGeometry
from tokenvc.packetizer import Packet, PacketLayout, serialize_packet

_spec = importlib.util.spec_from_file_location("oracle", Path(__file__).parent / "oracles" / "splitmix_drops.py")
oracle = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(oracle)

# Frozen from tests/oracles/splitmix_drops.py (pure-Python reference).
SPLITMIX_ZERO = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
FROZEN_DROPS = {
    (1, 0, 4, 1): (2,),
    (7, 3, 256, 5): (34, 176, 234, 235, 245),
    (0, 0, 10, 3): (1, 5, 9),
}


def test_splitmix_reference_vectors():
    s = 0
    for want in SPLITMIX_ZERO:
        v, s = prng_next(s)
        assert v == want


def test_splitmix_same_state_same_value():
    assert prng_next(12345) == prng_next(12345)


def test_splitmix_array_matches_scalar():
    a = SplitMix64(99)
    b = SplitMix64(99)
    arr = a.u64_array(50)
    assert [int(x) for x in arr] == [b.next_u64() for _ in range(50)]
    assert a.state == b.state


def test_splitmix_bit_balance():
    vals = SplitMix64(2024).u64_array(1_000_000)
    bits = (vals[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    frac = bits.mean(axis=0)
    assert np.all((frac > 0.45) & (frac < 0.55))


def test_uniform_in_unit_interval():
    u = SplitMix64(5).uniform_array(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


@pytest.mark.parametrize("args,want", sorted(FROZEN_DROPS.items()))
def test_select_drops_frozen(args, want):
    assert select_drops(*args) == want


@given(st.integers(0, 2**20 - 1), st.integers(0, 3), st.integers(1, 300), st.data())
def test_select_drops_matches_oracle(frame, pkt, m, data):
    d = data.draw(st.integers(0, m))
    assert select_drops(frame, pkt, m, d) == oracle.drops(frame, pkt, m, d)


def test_select_drops_edges():
    assert select_drops(3, 1, 17, 0) == ()
    assert select_drops(3, 1, 17, 17) == tuple(range(17))
    with pytest.raises(ValueError):
        select_drops(0, 0, 4, 5)
    with pytest.raises(ValueError):
        select_drops(0, 0, 1024, 1)


@given(st.integers(0, 2**20 - 1), st.integers(0, 3), st.integers(0, 1023), st.data())
def test_receiver_survivors_complement_drops(frame, pkt, m, data):
    d = data.draw(st.integers(0, m))
    dropped = set(select_drops(frame, pkt, m, d))
    survivors = recover_survivor_positions(frame, pkt, m, m - d)
    assert survivors == tuple(p for p in range(m) if p not in dropped)


def test_survivors_edges():
    assert recover_survivor_positions(5, 2, 9, 9) == tuple(range(9))
    assert recover_survivor_positions(5, 2, 9, 0) == ()
    with pytest.raises(MalformedPacket):
        recover_survivor_positions(5, 2, 9, 10)


def test_drop_positions_uniform():
    m, d, frames = 64, 16, 100_000
    counts = np.zeros(m)
    for f in range(frames):
        counts[list(select_drops(f, f % 4, m, d))] += 1
    frac = counts / frames
    assert np.all(np.abs(frac - 0.25) < 0.01)


def test_plan_frame_uses_one_drop_count():
    plan = plan_frame(11, 4, 256, 40)
    assert plan.drop_count == 40
    assert all(len(s) == 40 for s in plan.dropped)
    assert plan.dropped[0] != plan.dropped[1]


def test_apply_self_drop_keeps_order():
    pkt = Packet(0, 0, np.array([10, 11, 12, 13]))
    out = apply_self_drop(pkt, {1})
    assert out.tokens.tolist() == [10, 12, 13]
    assert out.token_count == 3
    assert apply_self_drop(pkt, set()) is pkt
    empty = apply_self_drop(pkt, {0, 1, 2, 3})
    assert len(serialize_packet(empty, 10)) == 4
    with pytest.raises(ValueError):
        apply_self_drop(pkt, {4})


def test_packet_and_frame_bitrate_full_geometry():
    assert packet_bytes(256, 10) == 324
    assert frame_bitrate(4, 256, 10, 30) == Fraction(311_040)
    assert packet_bytes(128, 10) == 164
    assert frame_bitrate(4, 128, 10, 30) == Fraction(157_440)


def test_target_at_or_above_full_rate():
    r, d = drop_ratio_for_target(311_040, PacketLayout(), FULL_GEOMETRY, 10)
    assert (r, d) == (0, 0)
    assert drop_ratio_for_target(10**7, PacketLayout(), FULL_GEOMETRY, 10)[1] == 0


def test_target_half_rate_floor():
    r, d = drop_ratio_for_target(157_440, PacketLayout(), FULL_GEOMETRY, 10)
    assert (r, d) == (Fraction(1, 2), 128)
    with pytest.raises(TargetUnreachable):
        drop_ratio_for_target(157_439, PacketLayout(), FULL_GEOMETRY, 10)


def test_target_two_thirds_drops_one_third():
    # One packet of 623 sixteen-bit tokens: (4 + 1246) * 8 * 30 = 300 kbps.
    geom = PatchGeometry(7, 89, 1, 1)
    layout = PacketLayout(1, 1)
    assert frame_bitrate(1, 623, 16, 30) == 300_000
    r, d = drop_ratio_for_target(200_000, layout, geom, 16)
    assert frame_bitrate(1, 623 - d, 16, 30) <= 200_000 < frame_bitrate(1, 624 - d, 16, 30)
    assert abs(float(r) - 1 / 3) < 0.005


def test_target_must_be_positive():
    with pytest.raises(ValueError):
        drop_ratio_for_target(0, PacketLayout(), FULL_GEOMETRY, 10)
