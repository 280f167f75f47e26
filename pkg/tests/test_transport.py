import random

import numpy as np
import pytest

from fedmesh.simnet import SimNetConfig, SimNetwork
from fedmesh.transport import (
    CorruptFrame,
    FrameDecoder,
    MSG_TASK_ASSIGN,
    NeedMoreBytes,
    ReliableEndpoint,
    decode_frame,
    decode_payload,
    encode_frame,
    encode_payload,
)


class TestFrameCodec:
    def test_empty_payload_layout(self):
        frame = encode_frame(0x01, b"")
        assert len(frame) == 14
        assert frame[:4] == b"FHN1"
        assert frame[4] == 0x01  # version
        assert frame[5] == 0x01  # msg_type
        assert frame[6:10] == b"\x00\x00\x00\x00"

    def test_round_trip_random_payloads(self):
        rng = random.Random(0)
        for _ in range(10_000):
            msg_type = rng.randrange(256)
            payload = rng.randbytes(rng.randrange(0, 64))
            msg_type2, payload2, consumed = decode_frame(encode_frame(msg_type, payload))
            assert (msg_type2, payload2) == (msg_type, payload)
            assert consumed == 14 + len(payload)

    def test_every_payload_bit_flip_detected(self):
        payload = b"exhaustive"
        frame = bytearray(encode_frame(0x03, payload))
        start = 10  # payload offset
        for byte_idx in range(start, start + len(payload)):
            for bit in range(8):
                corrupted = bytearray(frame)
                corrupted[byte_idx] ^= 1 << bit
                with pytest.raises(CorruptFrame):
                    decode_frame(bytes(corrupted))

    def test_truncated_needs_more(self):
        frame = encode_frame(0x02, b"hello")
        for cut in range(len(frame)):
            prefix = frame[:cut]
            try:
                decode_frame(prefix)
            except NeedMoreBytes:
                continue
            except CorruptFrame:
                pytest.fail(f"prefix of {cut} bytes misread as corrupt")
            pytest.fail(f"prefix of {cut} bytes decoded as complete")

    def test_bad_magic_and_version(self):
        frame = bytearray(encode_frame(0x01, b"x"))
        wrong_magic = b"XXXX" + bytes(frame[4:])
        with pytest.raises(CorruptFrame):
            decode_frame(wrong_magic)
        frame[4] = 0x02
        with pytest.raises(CorruptFrame):
            decode_frame(bytes(frame))

    def test_oversize_declared_length_rejected(self):
        frame = bytearray(encode_frame(0x01, b""))
        frame[6:10] = (65 * 1024 * 1024).to_bytes(4, "big")
        with pytest.raises(CorruptFrame):
            decode_frame(bytes(frame))

    def test_fuzz_never_crashes(self):
        rng = random.Random(1)
        for _ in range(2000):
            blob = rng.randbytes(rng.randrange(0, 40))
            try:
                decode_frame(blob)
            except (NeedMoreBytes, CorruptFrame):
                pass

    def test_stream_decoder_reassembles_across_chunks(self):
        frames = [encode_frame(i % 7, bytes([i]) * i) for i in range(20)]
        blob = b"".join(frames)
        decoder = FrameDecoder()
        got = []
        rng = random.Random(2)
        i = 0
        while i < len(blob):
            step = rng.randrange(1, 9)
            got.extend(decoder.feed(blob[i:i + step]))
            i += step
        assert got == [(i % 7, bytes([i]) * i) for i in range(20)]


class TestPayloadEnvelope:
    def test_doc_only(self):
        doc = {"round": 3, "invited": ["a", "b"], "ok": True}
        got_doc, got_vec = decode_payload(encode_payload(doc))
        assert got_doc == doc and got_vec is None

    def test_float_vector(self):
        vec = np.linspace(-1, 1, 9)
        doc, got = decode_payload(encode_payload({"round": 1}, vec))
        assert doc == {"round": 1}
        np.testing.assert_array_equal(got, vec)
        assert got.dtype == np.float64

    def test_word_vector(self):
        vec = np.arange(5, dtype=np.uint64) * np.uint64(2**60)
        _, got = decode_payload(encode_payload({}, vec))
        np.testing.assert_array_equal(got, vec)
        assert got.dtype == np.uint64

    def test_malformed_rejected(self):
        with pytest.raises(CorruptFrame):
            decode_payload(b"\x00\x00\x00\xffjunk")


def _pair(config, names=("a", "b"), **rel_kwargs):
    net = SimNetwork(config)
    endpoints = {}
    inboxes = {}
    for name in names:
        rel = ReliableEndpoint(net.endpoint(name), **rel_kwargs)
        inbox = []
        rel.on_message = (
            lambda src, mt, payload, inbox=inbox: inbox.append((src, mt, payload))
        )
        endpoints[name] = rel
        inboxes[name] = inbox
    return net, endpoints, inboxes


class TestSimNetwork:
    def test_identical_traces_for_same_seed(self):
        def run(seed):
            net, eps, inboxes = _pair(SimNetConfig((1.0, 9.0), 0.3, seed))
            for i in range(25):
                eps["a"].send("b", 0x01, bytes([i]))
            net.run()
            return net.delivery_trace, [p for _, _, p in inboxes["b"]]

        assert run(77) == run(77)
        assert run(77) != run(78)

    def test_fixed_latency_is_exact(self):
        net = SimNetwork(SimNetConfig((5.0, 5.0), 0.0, 1))
        a, b = net.endpoint("a"), net.endpoint("b")
        got = []
        b.set_receive_handler(lambda data: got.append(net.now_ms))
        a.send("b", b"x")
        net.schedule(100.0, lambda: a.send("b", b"y"))
        net.run()
        assert got == [5.0, 105.0]

    def test_partition_window_blocks_directionally(self):
        config = SimNetConfig((1.0, 1.0), 0.0, 1, partitions=(("a", "b", 0.0, 50.0),))
        net = SimNetwork(config)
        a, b = net.endpoint("a"), net.endpoint("b")
        got = []
        b.set_receive_handler(lambda data: got.append((net.now_ms, data)))
        a.send("b", b"blocked")
        net.schedule(60.0, lambda: a.send("b", b"open"))
        net.run()
        assert got == [(61.0, b"open")]

    def test_unknown_endpoint_rejected(self):
        net = SimNetwork(SimNetConfig())
        a = net.endpoint("a")
        with pytest.raises(KeyError):
            a.send("ghost", b"x")


class TestReliableDelivery:
    def test_no_loss_single_transmission(self):
        net, eps, inboxes = _pair(SimNetConfig((2.0, 2.0), 0.0, 5))
        receipts = []
        eps["a"].send("b", MSG_TASK_ASSIGN, b"payload", receipts.append)
        net.run()
        assert len(inboxes["b"]) == 1
        assert receipts[0].ok and receipts[0].attempts == 1
        # one data frame + one ack in the trace
        assert len(net.delivery_trace) == 2

    def test_seeded_double_drop_delivers_on_third_attempt(self):
        # With latency fixed (no latency draws), seed 34 at drop_prob 0.6
        # yields drop decisions (drop, drop, pass, pass); replay the draw
        # sequence independently to pin the schedule, then check behaviour.
        replay = random.Random(34)
        pattern = [replay.random() < 0.6 for _ in range(4)]
        assert pattern == [True, True, False, False]

        net, eps, inboxes = _pair(
            SimNetConfig((2.0, 2.0), 0.6, 34), max_retries=5, backoff_base_ms=10.0
        )
        receipts = []
        eps["a"].send("b", MSG_TASK_ASSIGN, b"x", receipts.append)
        net.run()
        assert receipts and receipts[0].ok
        assert receipts[0].attempts == 3
        assert len(inboxes["b"]) == 1

    def test_retries_exhausted_reports_failure(self):
        net, eps, inboxes = _pair(
            SimNetConfig((1.0, 1.0), 0.999999, 9), max_retries=3, backoff_base_ms=5.0
        )
        receipts = []
        eps["a"].send("b", MSG_TASK_ASSIGN, b"x", receipts.append)
        net.run()
        assert receipts and not receipts[0].ok
        assert receipts[0].attempts == 4  # 1 try + 3 retries
        assert receipts[0].error == "retries exhausted"
        assert inboxes["b"] == []

    def test_duplicate_data_frames_processed_once(self):
        # Drop the first ack so the sender retransmits a frame the receiver
        # already handled; dedup must keep the application delivery single.
        for seed in range(500):
            replay = random.Random(seed)
            if [replay.random() < 0.45 for _ in range(4)] == [False, True, False, False]:
                break
        else:
            pytest.fail("no seed produces pass, drop-ack, pass, pass")
        net, eps, inboxes = _pair(
            SimNetConfig((2.0, 2.0), 0.45, seed), max_retries=5, backoff_base_ms=10.0
        )
        receipts = []
        eps["a"].send("b", MSG_TASK_ASSIGN, b"x", receipts.append)
        net.run()
        assert receipts and receipts[0].ok
        assert receipts[0].attempts == 2
        assert len(inboxes["b"]) == 1

    def test_backoff_is_exponential(self):
        net, eps, _ = _pair(
            SimNetConfig((1.0, 1.0), 0.999999, 10), max_retries=3, backoff_base_ms=50.0
        )
        sends = []
        raw_send = eps["a"].raw.send
        eps["a"].raw.send = lambda dst, data: (sends.append(net.now_ms), raw_send(dst, data))
        eps["a"].send("b", MSG_TASK_ASSIGN, b"x")
        net.run()
        gaps = [b - a for a, b in zip(sends, sends[1:])]
        assert gaps == [50.0, 100.0, 200.0]
