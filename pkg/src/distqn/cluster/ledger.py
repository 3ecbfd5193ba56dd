"""Communication accounting for master/worker runs."""

from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import asdict, dataclass, field

UP = "up"
DOWN = "down"


@dataclass(frozen=True)
class Transfer:
    round_index: int
    direction: str
    msg_type: int
    worker_id: int
    payload_floats: int

    @property
    def payload_bytes(self) -> int:
        return 8 * self.payload_floats


@dataclass
class CommLedger:
    """Per-transfer log grouped into protocol rounds.

    A round is one master/worker exchange as grouped by the protocol driver
    (see :meth:`begin_round`); a broadcast counts once however many workers
    it reaches. Rounds without any transfer are not counted.
    """

    transfers: list = field(default_factory=list)
    labels: dict = field(default_factory=dict)
    _round: int = -1
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def begin_round(self, label: str = "") -> int:
        with self._lock:
            self._round += 1
            self.labels[self._round] = label
            return self._round

    def record(self, direction: str, msg_type: int, worker_id: int, payload_floats: int) -> None:
        with self._lock:
            if self._round < 0:
                self._round = 0
                self.labels[0] = ""
            self.transfers.append(Transfer(self._round, direction, int(msg_type), worker_id, payload_floats))

    @property
    def rounds(self) -> int:
        return len({t.round_index for t in self.transfers})

    def totals_per_worker(self) -> dict:
        out = defaultdict(int)
        for t in self.transfers:
            out[t.worker_id] += t.payload_bytes
        return dict(out)

    @property
    def total_bytes(self) -> int:
        return sum(t.payload_bytes for t in self.transfers)

    def to_dict(self) -> dict:
        return {
            "transfers": [asdict(t) for t in self.transfers],
            "labels": {str(k): v for k, v in self.labels.items()},
            "summary": ledger_summary(self),
        }


def ledger_summary(ledger: CommLedger) -> dict:
    """Round count, the busiest worker's bytes in each round, and the largest payload."""
    per_round = defaultdict(lambda: defaultdict(int))
    for t in ledger.transfers:
        per_round[t.round_index][t.worker_id] += t.payload_bytes
    return {
        "rounds": ledger.rounds,
        "bytes_per_worker_per_round": [max(per_round[r].values()) for r in sorted(per_round)],
        "max_payload_floats": max((t.payload_floats for t in ledger.transfers), default=0),
    }
