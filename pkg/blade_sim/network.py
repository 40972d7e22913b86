"""
Deterministic discrete-event model of the P2P gossip layer.

Broadcasts are delivered directly from the sender to every other node after
a per-link delay; messages may be dropped. Events are totally ordered by
``(deliver_at, seq, src, dst)`` where ``seq`` is a network-wide counter, so a
trace is a pure function of (config, seed).
"""
import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from .blade_schemas import NetConfig
from .seeding import rng_for

logger = logging.getLogger(__name__)

KIND_UPDATE = "update"
KIND_BLOCK = "block"
KIND_CONTRACT = "contract"
KIND_TIMER = "timer"


@dataclass(frozen=True)
class Message:
    kind: str
    body: Any = None

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if hasattr(self.body, "client_id"):
            out["client_id"] = self.body.client_id
        if hasattr(self.body, "hash") and isinstance(getattr(self.body, "hash"), bytes):
            out["block"] = self.body.hash.hex()[:16]
        if hasattr(self.body, "tip"):
            out["block"] = self.body.tip.hash.hex()[:16]
            out["height"] = self.body.height
        if isinstance(self.body, dict):
            out.update({k: v for k, v in self.body.items() if isinstance(v, (int, float, str))})
        return out


@dataclass(order=True, frozen=True)
class Event:
    deliver_at: float
    seq: int
    src: int
    dst: int
    payload: Message = field(compare=False)


class EventQueue:
    """Min-heap of events in delivery order"""

    def __init__(self, events: Iterable[Event] = ()):
        self._heap: List[Event] = list(events)
        heapq.heapify(self._heap)

    def push(self, event: Event) -> None:
        heapq.heappush(self._heap, event)

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def peek(self) -> Optional[Event]:
        return self._heap[0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)

    def clear(self) -> int:
        dropped = len(self._heap)
        self._heap = []
        return dropped

    def run_until(self, tick_limit: float) -> List[Event]:
        """Pop and return every event due at or before `tick_limit`"""
        delivered = []
        while self._heap and self._heap[0].deliver_at <= tick_limit:
            delivered.append(heapq.heappop(self._heap))
        return delivered


def run_until(queue: EventQueue, tick_limit: float) -> List[Event]:
    return queue.run_until(tick_limit)


class GossipNetwork:
    def __init__(self, node_ids: Iterable[int], cfg: NetConfig, seed: int,
                 record_trace: bool = False):
        self.node_ids: Tuple[int, ...] = tuple(sorted(set(node_ids)))
        self.cfg = cfg
        self.rng: np.random.Generator = rng_for(seed, "network")
        self.queue = EventQueue()
        self._seq = 0
        self._last_on_link: Dict[Tuple[int, int], float] = {}
        self.record_trace = record_trace
        self.trace: List[Dict[str, Any]] = []
        self.sent = 0
        self.dropped = 0

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def broadcast(self, src: int, payload: Message, tick: float) -> List[Event]:
        """One event per other node; dropped messages produce no event"""
        if src not in self.node_ids:
            raise ValueError(f"Node {src} is not registered on the network")
        events = []
        for dst in self.node_ids:
            if dst == src:
                continue
            dropped = bool(self.rng.random() < self.cfg.drop_prob)
            jitter = int(self.rng.integers(0, self.cfg.jitter_ticks + 1)) if self.cfg.jitter_ticks else 0
            self.sent += 1
            if dropped:
                self.dropped += 1
                self._record(tick, None, None, src, dst, payload, dropped=True)
                continue
            deliver_at = tick + self.cfg.link_delay(src, dst) + jitter
            link = (src, dst)
            deliver_at = max(deliver_at, self._last_on_link.get(link, deliver_at))
            self._last_on_link[link] = deliver_at
            event = Event(deliver_at=deliver_at, seq=self._next_seq(), src=src, dst=dst,
                          payload=payload)
            self.queue.push(event)
            self._record(tick, deliver_at, event.seq, src, dst, payload)
            events.append(event)
        return events

    def schedule(self, node: int, at: float, payload: Message) -> Event:
        """A node-local timer; never dropped"""
        event = Event(deliver_at=at, seq=self._next_seq(), src=node, dst=node, payload=payload)
        self.queue.push(event)
        return event

    def run_until(self, tick_limit: float) -> List[Event]:
        return self.queue.run_until(tick_limit)

    def _record(self, tick, deliver_at, seq, src, dst, payload: Message, dropped=False) -> None:
        if not self.record_trace:
            return
        entry = {"tick": tick, "deliver_at": deliver_at, "seq": seq, "src": src, "dst": dst,
                 "dropped": dropped}
        entry.update(payload.summary())
        self.trace.append(entry)

    def export_trace(self, path: Union[str, Path]) -> Path:
        """Write the emission trace as JSON lines"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for entry in self.trace:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.info(f"Wrote {len(self.trace)} trace entries to {path}")
        return path
