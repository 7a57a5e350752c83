import numpy as np
import pytest

from tokenvc.baseline import (DELTA, KEY, AckPath, BaselineReceiver, BaselineSender, DecoderState,
                              DeltaCodecConfig, EncoderState, MalformedPayload, baseline_step, delta_decode,
                              delta_encode, frame_features, parse_shard, shard_frame, unshard_frame)
from tokenvc.channel import Channel, ChannelConfig, reverse_channel
from tokenvc.codec import DESK_GEOMETRY, FULL_GEOMETRY, PatchGeometry
from tokenvc.fec import Unrecoverable
from tokenvc.frames import SynthConfig, SynthObject, synth_sequence

SHAPE = (16, 16, 12)


def test_keyframe_sizes():
    feats = np.zeros((32, 32, 12), dtype=np.uint8)
    payload, kind = delta_encode(feats, EncoderState(), force_key=False)
    assert kind == KEY and len(payload) == 12288


def test_static_delta_is_empty():
    feats = np.full(SHAPE, 7, dtype=np.uint8)
    st = EncoderState()
    delta_encode(feats, st, False)
    payload, kind = delta_encode(feats, st, False)
    assert kind == DELTA and payload == b""


def test_zero_threshold_full_change():
    st = EncoderState()
    cfg = DeltaCodecConfig(threshold=0.0)
    delta_encode(np.zeros(SHAPE, dtype=np.uint8), st, False, cfg)
    payload, kind = delta_encode(np.ones(SHAPE, dtype=np.uint8), st, False, cfg)
    assert kind == DELTA and len(payload) == 256 * 14


def test_keyframe_interval_and_force():
    st = EncoderState()
    cfg = DeltaCodecConfig(keyframe_interval=3)
    f = np.zeros(SHAPE, dtype=np.uint8)
    kinds = [delta_encode(f, st, False, cfg)[1] for _ in range(7)]
    assert kinds == [KEY, DELTA, DELTA, KEY, DELTA, DELTA, KEY]
    assert delta_encode(f, st, True, cfg)[1] == KEY


def test_mirror_state_lossless(scene_frames):
    enc, dec = EncoderState(), DecoderState()
    for f in scene_frames[:40]:
        payload, kind = delta_encode(frame_features(f, DESK_GEOMETRY), enc, False)
        out = delta_decode(payload, kind, dec, SHAPE)
        assert np.array_equal(out, enc.reference)


def test_chain_break_and_reset():
    enc, dec = EncoderState(), DecoderState()
    f = np.zeros(SHAPE, dtype=np.uint8)
    p0, k0 = delta_encode(f, enc, False)
    assert delta_decode(p0, k0, dec, SHAPE) is not None
    dec.chain_ok = False
    p1, k1 = delta_encode(f + 50, enc, False)
    assert delta_decode(p1, k1, dec, SHAPE) is None
    assert not dec.chain_ok
    p2, k2 = delta_encode(f, enc, True)
    assert delta_decode(p2, k2, dec, SHAPE) is not None and dec.chain_ok


def test_malformed_payloads():
    with pytest.raises(MalformedPayload):
        delta_decode(b"\0" * 5, KEY, DecoderState(), SHAPE)
    with pytest.raises(MalformedPayload):
        delta_decode(b"\0" * 5, DELTA, DecoderState(), SHAPE)
    with pytest.raises(MalformedPayload):
        delta_decode(b"\0" * 14, 3, DecoderState(), SHAPE)


def test_config_validation():
    for bad in (dict(keyframe_interval=0), dict(parity_ratio=1.5), dict(mtu=6)):
        with pytest.raises(ValueError):
            DeltaCodecConfig(**bad)


def test_shard_header_and_roundtrip():
    cfg = DeltaCodecConfig()
    payload = bytes(range(256)) * 5
    shards = shard_frame(payload, 2**20 + 9, DELTA, cfg)
    k = -(-(len(payload) + 4) // cfg.shard_body)
    p = -(-k // 2)
    assert len(shards) == k + p and all(len(s) == cfg.mtu for s in shards)
    frame, idx, kind, kk, pp, _ = parse_shard(shards[-1])
    assert (frame, idx, kind, kk, pp) == (9, k + p - 1, DELTA, k, p)
    assert unshard_frame(shards[p:]) == (payload, DELTA)
    with pytest.raises(Unrecoverable):
        unshard_frame(shards[p + 1:])


def test_keyframe_shard_limit():
    cfg = DeltaCodecConfig()
    assert len(shard_frame(bytes(12288), 0, KEY, cfg)) <= 64
    with pytest.raises(ValueError):
        shard_frame(bytes(20000), 0, KEY, cfg)


def test_parity_overhead(scene_frames):
    cfg = DeltaCodecConfig()
    enc = EncoderState()
    data = parity = 0
    for f in scene_frames:
        payload, kind = delta_encode(frame_features(f, DESK_GEOMETRY), enc, False, cfg)
        shards = shard_frame(payload, f.index, kind, cfg)
        _, _, _, k, p, _ = parse_shard(shards[0])
        data += k
        parity += p
    ratio = parity / data
    assert 0.5 <= ratio <= 0.5 + 0.5 * len(scene_frames) / data


def _session(frames, channel, ack_loss=0.0, cfg=DeltaCodecConfig()):
    sender = BaselineSender.create(cfg, 30.0)
    receiver = BaselineReceiver(SHAPE, DESK_GEOMETRY)
    acks = AckPath(reverse_channel(ack_loss, seed=3))
    return sender, [baseline_step(sender, receiver, channel, acks, f, f.capture_time, 100.0) for f in frames]


def test_lossless_all_rendered(scene_frames):
    _, steps = _session(scene_frames, Channel(ChannelConfig.lossless()))
    assert all(s.rendered for s in steps)
    assert [s.kind for s in steps][:31].count(KEY) == 2


def test_freeze_until_keyframe(scene_frames):
    _, steps = _session(scene_frames, Channel(ChannelConfig("trace", drop_frames=(10,))))
    rendered = [s.rendered for s in steps]
    nxt = next(i for i in range(11, len(steps)) if steps[i].kind == KEY)
    assert rendered[:10] == [True] * 10
    assert not any(rendered[10:nxt])
    assert all(rendered[nxt:])
    # the freeze shows the last decoded image
    assert all(np.array_equal(steps[i].display, steps[9].display) for i in range(10, nxt))


def test_ack_loss_forces_keyframe():
    frames = synth_sequence(SynthConfig.random(2), 20)
    sender, steps = _session(frames, Channel(ChannelConfig.lossless()), ack_loss=1.0)
    assert sender.forced_keyframes >= 1
    assert any(s.forced and s.kind == KEY for s in steps)
    sender, _ = _session(frames, Channel(ChannelConfig.lossless()), ack_loss=0.0)
    assert sender.forced_keyframes == 0


def test_keyframe_spikes():
    geom = PatchGeometry(32, 32, 4, 2)
    frames = synth_sequence(SynthConfig.random(1), 90)
    enc = EncoderState()
    sizes = {KEY: [], DELTA: []}
    for f in frames:
        payload, kind = delta_encode(frame_features(f, geom), enc, False)
        sizes[kind].append(len(payload))
    assert sizes[KEY] == [12288] * 3
    assert min(sizes[KEY]) >= 10 * np.median(sizes[DELTA])


def test_static_scene_zero_delta():
    cfg = SynthConfig(128, 128, objects=(SynthObject(10, 10, 20, 20, (200, 0, 0)),))
    frames = synth_sequence(cfg, 3)
    enc = EncoderState()
    kinds = [delta_encode(frame_features(f, DESK_GEOMETRY), enc, False) for f in frames]
    assert kinds[1] == (b"", DELTA)


def test_full_geometry_keyframe_shape():
    assert FULL_GEOMETRY.h * FULL_GEOMETRY.w * FULL_GEOMETRY.channels == 12288
