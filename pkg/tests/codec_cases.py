"""Randomized messages and malformed frames shared by codec tests."""

import numpy as np

from distqn.cluster.codec import HEADER, MAGIC, VEC_COUNTS, Message, MsgType, encode_message


def random_message(rng, max_p=4096):
    t = MsgType(int(rng.integers(0, len(MsgType))))
    count = int(rng.choice(VEC_COUNTS[t]))
    p = int(rng.integers(0, max_p + 1)) if count else 0
    if count and rng.random() < 0.5:
        p = int(rng.integers(0, 16))
    payload = []
    for _ in range(count):
        bits = rng.integers(0, 2**64, size=p, dtype=np.uint64)  # arbitrary bit patterns incl. NaN/inf
        payload.append(bits.view(np.float64) if rng.random() < 0.3 else rng.standard_normal(p))
    return Message(t, int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), tuple(payload))


def malformed_frames(rng, n_base=50):
    bad = []
    for _ in range(n_base):
        frame = encode_message(random_message(rng, max_p=32))
        for cut in sorted(set(rng.integers(0, len(frame), size=6).tolist())):
            bad.append(frame[:cut])
        bad.append(frame + b"\x00")
        bad.append(b"DQNX" + frame[4:])
        bad.append(frame[:4] + bytes([frame[4] + 1]) + frame[5:])
        code = int(rng.integers(len(MsgType), 16))
        bad.append(frame[:5] + bytes([(frame[5] & 0xF0) | code]) + frame[6:])
    # vec_count inconsistent with the message type
    bad.append(HEADER.pack(MAGIC, 1, int(MsgType.V_VECTOR) | (1 << 4), 0, 0, 1) + b"\x00" * 8)
    bad.append(HEADER.pack(MAGIC, 1, int(MsgType.LOCAL_GRAD) | (0 << 4), 0, 0, 0))
    bad.append(HEADER.pack(MAGIC, 1, int(MsgType.CONTROL) | (0 << 4), 0, 0, 3))
    bad.append(b"")
    return bad
